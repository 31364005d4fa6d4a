#include "gmseg/train.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "gmseg/evaluate.hpp"

namespace gmseg {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

struct Batch {
  Tensor image;       // [N,C,D,H,W]
  ByteVolume labels;  // [N,D,H,W]
};

Batch make_batch(std::span<const VolumeSample> data, std::uint64_t step, int batch) {
  const VolumeSample& first = data[static_cast<size_t>(step * batch % data.size())];
  const int c = first.image.extent(0);
  const int d = first.image.extent(1), h = first.image.extent(2), w = first.image.extent(3);
  const std::int64_t img_n = first.image.size();
  const std::int64_t lab_n = static_cast<std::int64_t>(first.labels.data.size());
  Batch b;
  std::vector<double> img(static_cast<size_t>(batch * img_n));
  b.labels = ByteVolume::zeros({batch, d, h, w});
  for (int j = 0; j < batch; ++j) {
    const VolumeSample& s =
        data[static_cast<size_t>((step * batch + static_cast<std::uint64_t>(j)) % data.size())];
    auto sp = s.image.data();
    std::copy(sp.begin(), sp.end(), img.begin() + j * img_n);
    std::copy(s.labels.data.begin(), s.labels.data.end(), b.labels.data.begin() + j * lab_n);
  }
  b.image = Tensor::raw({batch, c, d, h, w}, std::move(img));
  return b;
}

// Numeric softmax over axis 1 of [N,C,D,H,W] (no tape), for the soft
// confusion window that drives the adaptive alpha/beta rule.
Tensor softmax_probs(const Tensor& logits) {
  const int n = logits.extent(0), c = logits.extent(1);
  const std::int64_t sp = logits.size() / (static_cast<std::int64_t>(n) * c);
  std::vector<double> out(static_cast<size_t>(logits.size()));
  auto in = logits.data();
  for (int b = 0; b < n; ++b) {
    for (std::int64_t v = 0; v < sp; ++v) {
      const std::int64_t base = static_cast<std::int64_t>(b) * c * sp + v;
      double mx = in[static_cast<size_t>(base)];
      for (int k = 1; k < c; ++k) mx = std::max(mx, in[static_cast<size_t>(base + k * sp)]);
      double z = 0.0;
      for (int k = 0; k < c; ++k) {
        z += (out[static_cast<size_t>(base + k * sp)] =
                  std::exp(in[static_cast<size_t>(base + k * sp)] - mx));
      }
      for (int k = 0; k < c; ++k) out[static_cast<size_t>(base + k * sp)] /= z;
    }
  }
  return Tensor::raw(logits.shape(), std::move(out));
}

void adam_step(Network& net, AdamState& st, Ctx& cx, const GradMap& grads, double lr_t,
               const TrainConfig& cfg) {
  st.t += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  const auto& items = net.params.items();
  for (size_t i = 0; i < items.size(); ++i) {
    Param* p = items[i].get();
    if (!p->trainable) continue;
    const Var leaf = cx.bound(p);
    if (!leaf.valid()) continue;
    const Tensor* g = grads.find(leaf);
    if (g == nullptr) continue;
    auto gd = g->data();
    double* pm = st.m[i].mutable_data();
    double* pv = st.v[i].mutable_data();
    double* pp = p->value.mutable_data();
    const std::int64_t n = p->value.size();
    for (std::int64_t k = 0; k < n; ++k) {
      const double gk = gd[static_cast<size_t>(k)];
      pm[k] = cfg.beta1 * pm[k] + (1.0 - cfg.beta1) * gk;
      pv[k] = cfg.beta2 * pv[k] + (1.0 - cfg.beta2) * gk * gk;
      pp[k] -= lr_t * (pm[k] / bc1) / (std::sqrt(pv[k] / bc2) + cfg.adam_eps);
    }
  }
}

}  // namespace

void TrainConfig::validate() const {
  require(epochs > 0 && steps_per_epoch > 0, "TrainConfig: epochs and steps must be positive");
  require(lr > 0.0, "TrainConfig: lr must be > 0");
  require(poly_power > 0.0, "TrainConfig: poly_power must be > 0");
  require(beta1 > 0.0 && beta1 < 1.0 && beta2 > 0.0 && beta2 < 1.0,
          "TrainConfig: Adam betas must lie in (0,1)");
  require(adam_eps > 0.0, "TrainConfig: adam_eps must be > 0");
  require(stop_dsc <= 1.0, "TrainConfig: stop_dsc must be <= 1");
  require(!plan.empty(), "TrainConfig: plan is required");
  loss.validate();
}

TrainConfig TrainConfig::from_config(const KvConfig& cfg) {
  TrainConfig c;
  if (auto v = cfg.maybe("plan")) c.plan = *v;
  if (cfg.has("epochs")) c.epochs = cfg.get_int("epochs");
  if (cfg.has("steps_per_epoch")) c.steps_per_epoch = cfg.get_int("steps_per_epoch");
  if (cfg.has("lr")) c.lr = cfg.get_double("lr");
  if (cfg.has("poly_power")) c.poly_power = cfg.get_double("poly_power");
  if (cfg.has("beta1")) c.beta1 = cfg.get_double("beta1");
  if (cfg.has("beta2")) c.beta2 = cfg.get_double("beta2");
  if (cfg.has("adam_eps")) c.adam_eps = cfg.get_double("adam_eps");
  if (cfg.has("seed")) c.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
  if (cfg.has("stop_dsc")) c.stop_dsc = cfg.get_double("stop_dsc");
  if (auto v = cfg.maybe("checkpoint_path")) c.checkpoint_path = *v;
  if (auto v = cfg.maybe("metrics_csv")) c.metrics_csv = *v;
  if (auto v = cfg.maybe("scan_mode")) {
    if (*v == "sequential") {
      c.scan_mode = ScanMode::sequential;
    } else if (*v == "parallel") {
      c.scan_mode = ScanMode::parallel;
    } else {
      throw std::invalid_argument("TrainConfig: scan_mode must be sequential or parallel");
    }
  }
  if (auto v = cfg.maybe("variant")) c.loss.variant = loss_variant_from(*v);
  if (cfg.has("alpha")) c.loss.alpha = cfg.get_double("alpha");
  if (cfg.has("beta")) c.loss.beta = cfg.get_double("beta");
  if (cfg.has("eps")) c.loss.eps = cfg.get_double("eps");
  if (cfg.has("region_splits")) {
    auto s = cfg.get_int_list("region_splits");
    require(s.size() == 3, "TrainConfig: region_splits needs three values");
    c.loss.region_splits = {s[0], s[1], s[2]};
  }
  if (cfg.has("normalize_regions")) c.loss.normalize_regions = cfg.get_bool("normalize_regions");
  if (cfg.has("adaptive")) c.loss.adaptive = cfg.get_bool("adaptive");
  if (auto v = cfg.maybe("scale_weights")) {
    c.loss.scale_weights.clear();
    for (const std::string& tok : split(*v, ',')) c.loss.scale_weights.push_back(std::stod(tok));
  }
  c.validate();
  return c;
}

KvConfig TrainConfig::to_config() const {
  KvConfig cfg;
  cfg.set("plan", plan);
  cfg.set("epochs", std::to_string(epochs));
  cfg.set("steps_per_epoch", std::to_string(steps_per_epoch));
  cfg.set("lr", format_double(lr));
  cfg.set("poly_power", format_double(poly_power));
  cfg.set("beta1", format_double(beta1));
  cfg.set("beta2", format_double(beta2));
  cfg.set("adam_eps", format_double(adam_eps));
  cfg.set("seed", std::to_string(seed));
  if (stop_dsc > 0.0) cfg.set("stop_dsc", format_double(stop_dsc));
  if (!checkpoint_path.empty()) cfg.set("checkpoint_path", checkpoint_path);
  if (!metrics_csv.empty()) cfg.set("metrics_csv", metrics_csv);
  cfg.set("scan_mode", scan_mode == ScanMode::sequential ? "sequential" : "parallel");
  cfg.set("variant", loss_variant_name(loss.variant));
  cfg.set("alpha", format_double(loss.alpha));
  cfg.set("beta", format_double(loss.beta));
  cfg.set("eps", format_double(loss.eps));
  cfg.set("region_splits", std::to_string(loss.region_splits[0]) + "," +
                               std::to_string(loss.region_splits[1]) + "," +
                               std::to_string(loss.region_splits[2]));
  cfg.set("normalize_regions", loss.normalize_regions ? "true" : "false");
  cfg.set("adaptive", loss.adaptive ? "true" : "false");
  if (!loss.scale_weights.empty()) {
    std::string w;
    for (size_t i = 0; i < loss.scale_weights.size(); ++i) {
      if (i) w += ",";
      w += format_double(loss.scale_weights[i]);
    }
    cfg.set("scale_weights", w);
  }
  return cfg;
}

AdamState AdamState::init(const Network& net) {
  AdamState st;
  const auto& items = net.params.items();
  st.m.resize(items.size());
  st.v.resize(items.size());
  for (size_t i = 0; i < items.size(); ++i) {
    if (items[i]->trainable) {
      st.m[i] = Tensor::zeros(items[i]->value.shape());
      st.v[i] = Tensor::zeros(items[i]->value.shape());
    }
  }
  return st;
}

double poly_lr(double lr0, double power, std::uint64_t step, std::uint64_t total_steps) {
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr0 * std::pow(1.0 - frac, power);
}

void pack_optimizer(const Network& net, const AdamState& st, Checkpoint& c) {
  const auto& items = net.params.items();
  for (size_t i = 0; i < items.size(); ++i) {
    if (!items[i]->trainable) continue;
    c.opt_state.emplace_back("adam.m/" + items[i]->name, st.m[i]);
    c.opt_state.emplace_back("adam.v/" + items[i]->name, st.v[i]);
  }
  c.opt_state.emplace_back("adam.t", Tensor::scalar(static_cast<double>(st.t)));
}

AdamState unpack_optimizer(const Network& net, const Checkpoint& c) {
  AdamState st = AdamState::init(net);
  if (c.opt_state.empty()) return st;
  const auto& items = net.params.items();
  for (const auto& [name, value] : c.opt_state) {
    if (name == "adam.t") {
      st.t = static_cast<std::uint64_t>(value.value());
      continue;
    }
    const bool is_m = name.rfind("adam.m/", 0) == 0;
    const bool is_v = name.rfind("adam.v/", 0) == 0;
    if (!is_m && !is_v) {
      throw std::runtime_error("unpack_optimizer: unknown record '" + name + "'");
    }
    const std::string pname = name.substr(7);
    bool found = false;
    for (size_t i = 0; i < items.size(); ++i) {
      if (items[i]->name == pname) {
        if (!shapes_equal(value.shape(), items[i]->value.shape())) {
          throw std::runtime_error("unpack_optimizer: shape mismatch for '" + name + "'");
        }
        (is_m ? st.m : st.v)[i] = value;
        found = true;
        break;
      }
    }
    if (!found) throw std::runtime_error("unpack_optimizer: no parameter for '" + name + "'");
  }
  return st;
}

TrainResult train(Network& net, std::span<const VolumeSample> data, const TrainConfig& cfg) {
  cfg.validate();
  require(!data.empty(), "train: no data");
  const NetworkPlan& plan = net.plan;
  for (const VolumeSample& s : data) {
    require(s.image.rank() == 4 && s.image.extent(0) == net.in_channels,
            "train: sample '" + s.id + "' does not have " + std::to_string(net.in_channels) +
                " channels");
    require(s.image.extent(1) == plan.patch[0] && s.image.extent(2) == plan.patch[1] &&
                s.image.extent(3) == plan.patch[2],
            "train: sample '" + s.id + "' extents do not match the plan patch");
    for (std::uint8_t lab : s.labels.data) {
      require(lab < net.class_count, "train: sample '" + s.id + "' has an out-of-range label");
    }
  }

  const auto total_steps =
      static_cast<std::uint64_t>(cfg.epochs) * static_cast<std::uint64_t>(cfg.steps_per_epoch);
  AdamState st = AdamState::init(net);
  LossConfig lcfg = cfg.loss;

  const bool adaptive_active =
      lcfg.adaptive && (lcfg.variant == LossVariant::region_tversky ||
                        lcfg.variant == LossVariant::compound);
  RegionPartition part =
      RegionPartition::splits({plan.patch[0], plan.patch[1], plan.patch[2]}, lcfg.region_splits);
  std::vector<ConfusionCounts> window(static_cast<size_t>(part.k()));

  auto save = [&](std::uint64_t step) {
    if (cfg.checkpoint_path.empty()) return;
    Checkpoint c = snapshot(net, step);
    pack_optimizer(net, st, c);
    save_checkpoint(cfg.checkpoint_path, c);
  };
  save(0);  // last-good baseline before the first update

  TrainResult res;
  res.csv = "epoch,step,lr,loss,train_dsc\n";
  for (int epoch = 0; epoch < cfg.epochs && !res.aborted_nan; ++epoch) {
    double loss_sum = 0.0;
    int loss_n = 0;
    double lr_t = cfg.lr;
    for (int s = 0; s < cfg.steps_per_epoch; ++s) {
      const std::uint64_t t =
          static_cast<std::uint64_t>(epoch) * static_cast<std::uint64_t>(cfg.steps_per_epoch) +
          static_cast<std::uint64_t>(s);
      lr_t = poly_lr(cfg.lr, cfg.poly_power, t, total_steps);
      Batch batch = make_batch(data, t, plan.batch);

      Tape tape;
      Ctx cx(tape);
      cx.training = true;
      cx.scan_mode = cfg.scan_mode;
      Var x = tape.constant(batch.image);
      std::vector<Var> logits = net.forward(cx, x);
      Var loss = supervise(tape, logits, batch.labels, lcfg);
      const double lv = tape.value(loss).value();
      res.loss_curve.push_back(lv);
      if (!std::isfinite(lv)) {
        // keep the last epoch checkpoint on disk as the recovery point
        res.aborted_nan = true;
        break;
      }
      if (adaptive_active) {
        Tensor prob = softmax_probs(tape.value(logits.front()));
        Tensor onehot = one_hot(batch.labels, net.class_count);
        for (int r = 0; r < part.k(); ++r) {
          window[static_cast<size_t>(r)].accumulate_soft(prob, onehot,
                                                         part.boxes[static_cast<size_t>(r)]);
        }
      }
      GradMap grads = tape.backward(loss);
      adam_step(net, st, cx, grads, lr_t, cfg);
      loss_sum += lv;
      ++loss_n;
      ++res.steps;
    }
    if (res.aborted_nan) break;

    if (adaptive_active) {
      lcfg.region_ab.resize(static_cast<size_t>(part.k()));
      for (int r = 0; r < part.k(); ++r) {
        lcfg.region_ab[static_cast<size_t>(r)] =
            adaptive_alpha_beta(window[static_cast<size_t>(r)]);
        window[static_cast<size_t>(r)].reset();
      }
    }

    const double dsc = evaluate(net, data, cfg.scan_mode).mean_dsc;
    res.epoch_dsc.push_back(dsc);
    res.final_dsc = dsc;
    res.csv += std::to_string(epoch + 1) + "," + std::to_string(res.steps) + "," +
               format_double(lr_t) + "," + format_double(loss_n > 0 ? loss_sum / loss_n : 0.0) +
               "," + format_double(dsc) + "\n";
    save(res.steps);
    if (cfg.stop_dsc > 0.0 && dsc >= cfg.stop_dsc) break;
  }

  if (!cfg.metrics_csv.empty()) {
    std::ofstream out(cfg.metrics_csv, std::ios::trunc);
    if (!out) throw std::runtime_error(cfg.metrics_csv + ": cannot open for writing");
    out << res.csv;
  }
  return res;
}

}  // namespace gmseg
