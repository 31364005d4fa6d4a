// gmseg command-line driver: plan | synth | train | eval | gradcheck | bench.
// All tabular output is CSV; --out writes to a file, otherwise stdout.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "gmseg/bench.hpp"
#include "gmseg/checkpoint.hpp"
#include "gmseg/evaluate.hpp"
#include "gmseg/gradcheck.hpp"
#include "gmseg/net.hpp"
#include "gmseg/synth.hpp"
#include "gmseg/train.hpp"
#include "gmseg/volume_io.hpp"

namespace {

using namespace gmseg;

std::array<int, 3> parse_triple3(const std::string& s) {
  const auto parts = split(s, 'x');
  if (parts.size() != 3) throw std::invalid_argument("expected DxHxW, got '" + s + "'");
  return {std::stoi(parts[0]), std::stoi(parts[1]), std::stoi(parts[2])};
}

std::pair<double, double> parse_band(const std::string& s) {
  const auto parts = split(s, ':');
  if (parts.size() != 2) throw std::invalid_argument("expected lo:hi, got '" + s + "'");
  return {std::stod(parts[0]), std::stod(parts[1])};
}

ScanMode parse_scan_mode(const std::string& s) {
  if (s == "sequential") return ScanMode::sequential;
  if (s == "parallel") return ScanMode::parallel;
  throw std::invalid_argument("scan mode must be sequential or parallel, got '" + s + "'");
}

Gating parse_gating(const std::string& s) {
  if (s == "additive") return Gating::additive;
  if (s == "multiplicative") return Gating::multiplicative;
  throw std::invalid_argument("gating must be additive or multiplicative, got '" + s + "'");
}

void emit(const std::string& out, const std::string& text) {
  if (out.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream f(out, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open '" + out + "' for writing");
  f << text;
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot read '" + path + "'");
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Preset name, else a plan file in the serialized structured-text format.
NetworkPlan resolve_plan(const std::string& name_or_path) {
  static const char* kPresets[] = {"pcd", "lungt", "livert", "abd", "brats", "toy"};
  for (const char* p : kPresets) {
    if (name_or_path == p) return preset_plan(name_or_path);
  }
  if (!std::filesystem::exists(name_or_path)) {
    throw std::runtime_error("plan '" + name_or_path + "' is neither a preset nor a file");
  }
  return NetworkPlan::parse_text(slurp(name_or_path));
}

std::string zero_pad(int v, int width) {
  std::string s = std::to_string(v);
  while (static_cast<int>(s.size()) < width) s.insert(s.begin(), '0');
  return s;
}

int max_label(std::span<const VolumeSample> data) {
  int m = 0;
  for (const VolumeSample& s : data) {
    for (std::uint8_t v : s.labels.data) m = std::max(m, static_cast<int>(v));
  }
  return m;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gmseg: gated-convolution + selective-scan segmentation kernels"};
  app.require_subcommand(1);
  int rc = 0;

  // ---- plan ----------------------------------------------------------
  auto* plan_cmd = app.add_subcommand("plan", "emit a network plan (preset or derived)");
  std::string plan_preset, plan_shape, plan_spacing = "1,1,1", plan_gating, plan_out;
  int plan_classes = 2;
  double plan_memory = 0.0, plan_gate_scale = 0.0;
  plan_cmd->add_option("--preset", plan_preset, "preset name: pcd|lungt|livert|abd|brats|toy");
  plan_cmd->add_option("--shape", plan_shape, "median volume extents DxHxW (derive a plan)");
  plan_cmd->add_option("--spacing", plan_spacing, "voxel spacing mm, comma separated");
  plan_cmd->add_option("--classes", plan_classes, "segmentation class count");
  plan_cmd->add_option("--memory-gb", plan_memory, "memory budget in GB (<=0: unconstrained)");
  plan_cmd->add_option("--gating", plan_gating, "override gating: additive|multiplicative");
  plan_cmd->add_option("--gate-scale", plan_gate_scale, "override gate scale (<=0: 1/order)");
  plan_cmd->add_option("--out", plan_out, "write the plan here instead of stdout");
  plan_cmd->callback([&] {
    if (plan_preset.empty() == plan_shape.empty()) {
      throw std::runtime_error("plan: give exactly one of --preset or --shape");
    }
    NetworkPlan plan;
    if (!plan_preset.empty()) {
      plan = preset_plan(plan_preset);
    } else {
      Fingerprint fp;
      fp.median_shape = parse_triple3(plan_shape);
      const auto sp = split(plan_spacing, ',');
      if (sp.size() != 3) throw std::runtime_error("plan: --spacing needs three values");
      fp.spacing = {std::stod(sp[0]), std::stod(sp[1]), std::stod(sp[2])};
      fp.class_count = plan_classes;
      fp.memory_budget_gb = plan_memory;
      plan = derive_plan(fp);
    }
    if (plan_cmd->count("--gating")) plan.gating = parse_gating(plan_gating);
    if (plan_cmd->count("--gate-scale")) plan.gate_scale = plan_gate_scale;
    plan.validate();
    emit(plan_out, plan.serialize());
  });

  // ---- synth ---------------------------------------------------------
  auto* synth_cmd = app.add_subcommand("synth", "generate synthetic labeled volumes");
  std::string sy_out, sy_config, sy_shape, sy_blobs, sy_radius, sy_tw;
  int sy_count = 8, sy_channels = 1, sy_classes = 2, sy_retries = 64;
  double sy_contrast = 2.0, sy_noise = 0.25;
  std::uint64_t sy_seed = 1;
  synth_cmd->add_option("--out", sy_out, "output directory")->required();
  synth_cmd->add_option("--count", sy_count, "number of samples");
  synth_cmd->add_option("--config", sy_config, "generator config file (SynthSpec keys)");
  synth_cmd->add_option("--shape", sy_shape, "volume extents DxHxW");
  synth_cmd->add_option("--channels", sy_channels, "image channels");
  synth_cmd->add_option("--classes", sy_classes, "class count (including background)");
  synth_cmd->add_option("--blobs", sy_blobs, "blob count range lo:hi");
  synth_cmd->add_option("--radius", sy_radius, "blob radius range lo:hi (voxels)");
  synth_cmd->add_option("--tw", sy_tw, "target/whole voxel ratio band lo:hi");
  synth_cmd->add_option("--contrast", sy_contrast, "foreground intensity lift");
  synth_cmd->add_option("--noise", sy_noise, "background noise sigma");
  synth_cmd->add_option("--seed", sy_seed, "generator seed");
  synth_cmd->add_option("--retries", sy_retries, "resample attempts before failing");
  synth_cmd->callback([&] {
    SynthSpec spec;
    if (!sy_config.empty()) spec = SynthSpec::from_config(KvConfig::load(sy_config));
    if (synth_cmd->count("--shape")) spec.extents = parse_triple3(sy_shape);
    if (synth_cmd->count("--channels")) spec.channels = sy_channels;
    if (synth_cmd->count("--classes")) spec.class_count = sy_classes;
    if (synth_cmd->count("--blobs")) {
      const auto [lo, hi] = parse_band(sy_blobs);
      spec.blobs_min = static_cast<int>(lo);
      spec.blobs_max = static_cast<int>(hi);
    }
    if (synth_cmd->count("--radius")) std::tie(spec.radius_min, spec.radius_max) = parse_band(sy_radius);
    if (synth_cmd->count("--tw")) std::tie(spec.tw_min, spec.tw_max) = parse_band(sy_tw);
    if (synth_cmd->count("--contrast")) spec.contrast = sy_contrast;
    if (synth_cmd->count("--noise")) spec.noise = sy_noise;
    if (synth_cmd->count("--seed")) spec.seed = sy_seed;
    if (synth_cmd->count("--retries")) spec.max_retries = sy_retries;
    spec.validate();

    const auto samples = synth_generate(spec, sy_count);
    std::filesystem::create_directories(sy_out);
    std::string manifest = "id,path,tw\n";
    for (size_t i = 0; i < samples.size(); ++i) {
      const std::string name = "sample_" + zero_pad(static_cast<int>(i), 4) + ".mcvx";
      write_volume((std::filesystem::path(sy_out) / name).string(), samples[i]);
      manifest += samples[i].id + "," + name + "," + format_double(tw_ratio(samples[i].labels)) + "\n";
    }
    emit((std::filesystem::path(sy_out) / "manifest.csv").string(), manifest);
    std::cout << "wrote " << samples.size() << " samples to " << sy_out << "\n";
  });

  // ---- train ---------------------------------------------------------
  auto* train_cmd = app.add_subcommand("train", "train a network on a volume directory");
  std::string tr_data, tr_config, tr_plan, tr_loss, tr_splits, tr_gating, tr_scan, tr_out;
  int tr_epochs = 0, tr_steps = 0;
  double tr_lr = 0.0, tr_alpha = 0.0, tr_beta = 0.0, tr_gate_scale = 0.0;
  bool tr_adaptive = false;
  std::uint64_t tr_seed = 1;
  train_cmd->add_option("--data", tr_data, "directory of .mcvx samples")->required();
  train_cmd->add_option("--config", tr_config, "training config file (TrainConfig keys)");
  train_cmd->add_option("--plan", tr_plan, "plan preset name or plan file");
  train_cmd->add_option("--epochs", tr_epochs, "epoch count");
  train_cmd->add_option("--steps", tr_steps, "steps per epoch");
  train_cmd->add_option("--lr", tr_lr, "initial learning rate");
  train_cmd->add_option("--loss", tr_loss,
                        "dice|tversky|region-dice|region-tversky|cross-entropy|compound");
  train_cmd->add_option("--alpha", tr_alpha, "Tversky false-positive weight");
  train_cmd->add_option("--beta", tr_beta, "Tversky false-negative weight");
  train_cmd->add_option("--region-splits", tr_splits, "region boxes per axis, e.g. 4,4,4");
  train_cmd->add_flag("--adaptive", tr_adaptive, "adapt alpha/beta per region each epoch");
  train_cmd->add_option("--gating", tr_gating, "override gating: additive|multiplicative");
  train_cmd->add_option("--gate-scale", tr_gate_scale, "override gate scale (<=0: 1/order)");
  train_cmd->add_option("--scan-mode", tr_scan, "sequential|parallel");
  train_cmd->add_option("--seed", tr_seed, "training seed");
  double tr_stop_dsc = 0.0;
  train_cmd->add_option("--stop-dsc", tr_stop_dsc, "stop once the epoch train DSC reaches this");
  train_cmd->add_option("--out", tr_out, "output prefix: writes <out>.mckp and <out>.csv");
  train_cmd->callback([&] {
    TrainConfig cfg;
    if (!tr_config.empty()) cfg = TrainConfig::from_config(KvConfig::load(tr_config));
    if (train_cmd->count("--plan")) cfg.plan = tr_plan;
    if (train_cmd->count("--epochs")) cfg.epochs = tr_epochs;
    if (train_cmd->count("--steps")) cfg.steps_per_epoch = tr_steps;
    if (train_cmd->count("--lr")) cfg.lr = tr_lr;
    if (train_cmd->count("--loss")) cfg.loss.variant = loss_variant_from(tr_loss);
    if (train_cmd->count("--alpha")) cfg.loss.alpha = tr_alpha;
    if (train_cmd->count("--beta")) cfg.loss.beta = tr_beta;
    if (train_cmd->count("--region-splits")) {
      const auto s = split(tr_splits, ',');
      if (s.size() != 3) throw std::runtime_error("train: --region-splits needs three values");
      cfg.loss.region_splits = {std::stoi(s[0]), std::stoi(s[1]), std::stoi(s[2])};
    }
    if (tr_adaptive) cfg.loss.adaptive = true;
    if (train_cmd->count("--scan-mode")) cfg.scan_mode = parse_scan_mode(tr_scan);
    if (train_cmd->count("--seed")) cfg.seed = tr_seed;
    if (train_cmd->count("--stop-dsc")) cfg.stop_dsc = tr_stop_dsc;
    if (!tr_out.empty()) {
      cfg.checkpoint_path = tr_out + ".mckp";
      cfg.metrics_csv = tr_out + ".csv";
    }

    const auto data = read_volume_dir(tr_data);
    NetworkPlan plan = resolve_plan(cfg.plan);
    if (train_cmd->count("--gating")) plan.gating = parse_gating(tr_gating);
    if (train_cmd->count("--gate-scale")) plan.gate_scale = tr_gate_scale;
    plan.validate();
    const int in_channels = static_cast<int>(data.front().image.extent(0));
    const int class_count = std::max(2, max_label(data) + 1);
    std::cout << "samples " << data.size() << ", channels " << in_channels << ", classes "
              << class_count << ", stages " << plan.stages << "\n";

    auto net = build(plan, in_channels, class_count, cfg.seed);
    const TrainResult res = train(*net, data, cfg);
    if (cfg.metrics_csv.empty()) {
      std::cout << res.csv;
    } else {
      std::cout << "metrics: " << cfg.metrics_csv << "\n";
    }
    if (!cfg.checkpoint_path.empty()) std::cout << "checkpoint: " << cfg.checkpoint_path << "\n";
    if (res.aborted_nan) {
      std::cerr << "training aborted: non-finite loss at step " << res.steps
                << " (last-good checkpoint kept)\n";
      rc = 1;
      return;
    }
    std::cout << "steps " << res.steps << ", final loss " << format_double(res.loss_curve.back())
              << ", train DSC " << format_double(res.final_dsc) << "\n";
  });

  // ---- eval ----------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on a volume directory");
  std::string ev_ckpt, ev_data, ev_scan = "parallel", ev_out;
  eval_cmd->add_option("--checkpoint", ev_ckpt, "checkpoint file")->required();
  eval_cmd->add_option("--data", ev_data, "directory of .mcvx samples")->required();
  eval_cmd->add_option("--scan-mode", ev_scan, "sequential|parallel");
  eval_cmd->add_option("--out", ev_out, "write the metrics CSV here instead of stdout");
  eval_cmd->callback([&] {
    const auto net = network_from_checkpoint(load_checkpoint(ev_ckpt));
    const auto data = read_volume_dir(ev_data);
    const MetricsReport rep = evaluate(*net, data, parse_scan_mode(ev_scan));
    emit(ev_out, rep.csv());
  });

  // ---- gradcheck -----------------------------------------------------
  auto* gc_cmd = app.add_subcommand("gradcheck", "reverse-mode vs finite-difference check");
  std::string gc_scope = "all", gc_out;
  std::uint64_t gc_seed = 1;
  gc_cmd->add_option("--scope", gc_scope, "op|block|network|all");
  gc_cmd->add_option("--seed", gc_seed, "probe seed");
  gc_cmd->add_option("--out", gc_out, "write the report CSV here instead of stdout");
  gc_cmd->callback([&] {
    std::vector<GradScope> scopes;
    if (gc_scope == "op") {
      scopes = {GradScope::op};
    } else if (gc_scope == "block") {
      scopes = {GradScope::block};
    } else if (gc_scope == "network") {
      scopes = {GradScope::network};
    } else if (gc_scope == "all") {
      scopes = {GradScope::op, GradScope::block, GradScope::network};
    } else {
      throw std::runtime_error("gradcheck: scope must be op|block|network|all");
    }
    GradCheckReport merged;
    for (GradScope s : scopes) {
      GradCheckReport r = run_gradcheck(s, gc_seed);
      merged.all_pass = merged.all_pass && r.all_pass;
      for (auto& it : r.items) merged.items.push_back(std::move(it));
    }
    emit(gc_out, merged.csv());
    if (!merged.all_pass) {
      std::cerr << "gradcheck: FAILED\n";
      rc = 1;
    }
  });

  // ---- bench ---------------------------------------------------------
  auto* bench_cmd = app.add_subcommand("bench", "scan and hgconv throughput");
  std::string bn_kind = "all", bn_lengths = "64,256,1024", bn_shape = "16x16x16", bn_out;
  int bn_channels = 4, bn_state = 8, bn_reps = 5, bn_cstage = 16;
  std::uint64_t bn_seed = 1;
  bench_cmd->add_option("--kind", bn_kind, "scan|hgconv|all");
  bench_cmd->add_option("--lengths", bn_lengths, "scan sequence lengths, comma separated");
  bench_cmd->add_option("--channels", bn_channels, "scan channels");
  bench_cmd->add_option("--state", bn_state, "scan state dimension");
  bench_cmd->add_option("--c-stage", bn_cstage, "hgconv stage channel count");
  bench_cmd->add_option("--shape", bn_shape, "hgconv volume extents DxHxW");
  bench_cmd->add_option("--reps", bn_reps, "timed repetitions");
  bench_cmd->add_option("--seed", bn_seed, "input seed");
  bench_cmd->add_option("--out", bn_out, "write the CSV here instead of stdout");
  bench_cmd->callback([&] {
    if (bn_kind != "scan" && bn_kind != "hgconv" && bn_kind != "all") {
      throw std::runtime_error("bench: kind must be scan|hgconv|all");
    }
    std::string csv;
    bool ok = true;
    if (bn_kind == "scan" || bn_kind == "all") {
      std::vector<int> lengths;
      for (const std::string& tok : split(bn_lengths, ',')) lengths.push_back(std::stoi(tok));
      const BenchReport r = bench_scan(lengths, bn_channels, bn_state, bn_reps, bn_seed);
      csv += r.csv;
      ok = ok && r.correctness_ok;
    }
    if (bn_kind == "hgconv" || bn_kind == "all") {
      const BenchReport r = bench_hgconv(bn_cstage, parse_triple3(bn_shape), bn_reps, bn_seed);
      csv += r.csv;
      ok = ok && r.correctness_ok;
    }
    emit(bn_out, csv);
    if (!ok) {
      std::cerr << "bench: dual-path correctness check FAILED\n";
      rc = 1;
    }
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return rc;
}
