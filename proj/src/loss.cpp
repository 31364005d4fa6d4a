#include "gmseg/loss.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "gmseg/config.hpp"

namespace gmseg {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

// Per-(batch, class) spatial sums of a plain tensor: [N,C,sp...] -> [N,C].
Tensor class_sums(const Tensor& y) {
  const int n = y.extent(0), c = y.extent(1);
  const std::int64_t sp = y.size() / (static_cast<std::int64_t>(n) * c);
  std::vector<double> out(static_cast<size_t>(n) * c, 0.0);
  auto p = y.data();
  for (std::int64_t row = 0; row < static_cast<std::int64_t>(n) * c; ++row) {
    double acc = 0.0;
    for (std::int64_t v = 0; v < sp; ++v) acc += p[static_cast<size_t>(row * sp + v)];
    out[static_cast<size_t>(row)] = acc;
  }
  return Tensor::raw({n, c}, std::move(out));
}

// Region copy of a plain [N,C,D,H,W] tensor.
Tensor slice5(const Tensor& x, const Box& b) {
  const int n = x.extent(0), c = x.extent(1);
  const int dd = x.extent(2), hh = x.extent(3), ww = x.extent(4);
  const int bd = b.d1 - b.d0, bh = b.h1 - b.h0, bw = b.w1 - b.w0;
  std::vector<double> out(static_cast<size_t>(n) * c * bd * bh * bw);
  auto p = x.data();
  std::int64_t o = 0;
  for (int bn = 0; bn < n; ++bn) {
    for (int ch = 0; ch < c; ++ch) {
      const std::int64_t base = (static_cast<std::int64_t>(bn) * c + ch) * dd;
      for (int d = b.d0; d < b.d1; ++d) {
        for (int h = b.h0; h < b.h1; ++h) {
          const std::int64_t src = ((base + d) * hh + h) * ww + b.w0;
          for (int w = 0; w < bw; ++w) out[static_cast<size_t>(o++)] = p[static_cast<size_t>(src + w)];
        }
      }
    }
  }
  return Tensor::raw({n, c, bd, bh, bw}, std::move(out));
}

void check_probabilities(const Tensor& p, const char* who) {
  auto v = p.data();
  for (std::int64_t i = 0; i < p.size(); ++i) {
    const double x = v[static_cast<size_t>(i)];
    if (!(x >= -1e-9 && x <= 1.0 + 1e-9)) {
      throw std::invalid_argument(std::string(who) + ": probability " + std::to_string(x) +
                                  " at flat index " + std::to_string(i) + " outside [0,1]");
    }
  }
}

void check_soft_inputs(const Tensor& pred, const Tensor& onehot, const char* who) {
  require(pred.rank() >= 3, std::string(who) + ": need [N,C,sp...] input");
  require(pred.shape() == onehot.shape(), std::string(who) + ": prediction/target shape mismatch");
  require(pred.extent(1) >= 2, std::string(who) + ": need at least one foreground class");
  check_probabilities(pred, who);
}

// Mean over batch and foreground classes of a [N,C] per-instance term.
Var masked_mean(Tape& t, Var per_bc, int n, int c) {
  std::vector<double> m(static_cast<size_t>(c), 1.0 / (static_cast<double>(n) * (c - 1)));
  m[0] = 0.0;
  return sum_all(t, mul(t, per_bc, t.constant(Tensor::raw({c}, std::move(m)))));
}

// Mean over (batch, foreground class) of the one-vs-rest overlap term on the
// given (sub)volume. dice_form uses 2TP/(|pred|+|target|), otherwise the
// Tversky denominator TP + alpha*FP + beta*FN.
Var overlap_term(Tape& t, Var pred, const Tensor& onehot, double alpha, double beta, double eps,
                 bool dice_form) {
  const Tensor& pv = t.value(pred);
  const int n = pv.extent(0), c = pv.extent(1);
  Var tp = sum_spatial(t, mul(t, pred, t.constant(onehot)));
  Var sp = sum_spatial(t, pred);
  Var sy = t.constant(class_sums(onehot));
  Var num, den;
  if (dice_form) {
    num = scale(t, tp, 2.0, eps);
    den = scale(t, add(t, sp, sy), 1.0, eps);
  } else {
    Var fp = sub(t, sp, tp);
    Var fn = sub(t, sy, tp);
    num = scale(t, tp, 1.0, eps);
    den = scale(t, add(t, add(t, tp, scale(t, fp, alpha)), scale(t, fn, beta)), 1.0, eps);
  }
  Var term = scale(t, div(t, num, den), -1.0, 1.0);
  return masked_mean(t, term, n, c);
}

std::vector<double> default_scale_weights(size_t scales) {
  std::vector<double> w(scales);
  double sum = 0.0;
  for (size_t l = 0; l < scales; ++l) sum += (w[l] = std::ldexp(1.0, -static_cast<int>(l)));
  for (double& x : w) x /= sum;
  return w;
}

}  // namespace

RegionPartition RegionPartition::make(const Shape& volume, std::array<int, 3> box_extents) {
  require(volume.size() == 3, "RegionPartition: volume must be [D,H,W]");
  RegionPartition part;
  part.volume = volume;
  part.box = box_extents;
  for (int a = 0; a < 3; ++a) {
    require(volume[static_cast<size_t>(a)] >= 1, "RegionPartition: empty volume axis");
    require(box_extents[static_cast<size_t>(a)] >= 1, "RegionPartition: box extent < 1");
  }
  for (int d = 0; d < volume[0]; d += box_extents[0]) {
    for (int h = 0; h < volume[1]; h += box_extents[1]) {
      for (int w = 0; w < volume[2]; w += box_extents[2]) {
        part.boxes.push_back(Box{d, std::min(d + box_extents[0], volume[0]),
                                 h, std::min(h + box_extents[1], volume[1]),
                                 w, std::min(w + box_extents[2], volume[2])});
      }
    }
  }
  return part;
}

RegionPartition RegionPartition::splits(const Shape& volume, std::array<int, 3> boxes_per_axis) {
  require(volume.size() == 3, "RegionPartition: volume must be [D,H,W]");
  std::array<int, 3> box{};
  for (int a = 0; a < 3; ++a) {
    require(boxes_per_axis[static_cast<size_t>(a)] >= 1, "RegionPartition: splits < 1");
    const int e = volume[static_cast<size_t>(a)];
    const int s = std::min(boxes_per_axis[static_cast<size_t>(a)], e);
    box[static_cast<size_t>(a)] = (e + s - 1) / s;
  }
  return make(volume, box);
}

LossVariant loss_variant_from(const std::string& name) {
  if (name == "dice") return LossVariant::dice;
  if (name == "tversky") return LossVariant::tversky;
  if (name == "region-dice") return LossVariant::region_dice;
  if (name == "region-tversky") return LossVariant::region_tversky;
  if (name == "cross-entropy") return LossVariant::cross_entropy;
  if (name == "compound") return LossVariant::compound;
  throw std::invalid_argument(
      "unknown loss variant '" + name +
      "' (expected dice|tversky|region-dice|region-tversky|cross-entropy|compound)");
}

std::string loss_variant_name(LossVariant v) {
  switch (v) {
    case LossVariant::dice: return "dice";
    case LossVariant::tversky: return "tversky";
    case LossVariant::region_dice: return "region-dice";
    case LossVariant::region_tversky: return "region-tversky";
    case LossVariant::cross_entropy: return "cross-entropy";
    case LossVariant::compound: return "compound";
  }
  return "?";
}

void LossConfig::validate() const {
  require(eps > 0.0, "LossConfig: eps must be > 0");
  require(alpha >= 0.0 && beta >= 0.0, "LossConfig: alpha/beta must be >= 0");
  const bool tversky_family = variant == LossVariant::tversky ||
                              variant == LossVariant::region_tversky ||
                              variant == LossVariant::compound;
  if (tversky_family) {
    require(std::abs(alpha + beta - 1.0) <= 1e-12, "LossConfig: alpha + beta must equal 1");
  }
  for (int s : region_splits) require(s >= 1, "LossConfig: region splits must be >= 1");
  for (auto [a, b] : region_ab) {
    require(a >= 0.0 && b >= 0.0 && std::abs(a + b - 1.0) <= 1e-12,
            "LossConfig: per-region alpha/beta must be >= 0 and sum to 1");
  }
  if (!scale_weights.empty()) {
    double sum = 0.0;
    for (double w : scale_weights) {
      require(std::isfinite(w) && w >= 0.0, "LossConfig: scale weights must be >= 0");
      sum += w;
    }
    require(sum > 0.0, "LossConfig: scale weights sum to zero");
  }
}

void ConfusionCounts::reset() {
  std::fill(tp.begin(), tp.end(), 0.0);
  std::fill(fp.begin(), fp.end(), 0.0);
  std::fill(fn.begin(), fn.end(), 0.0);
}

void ConfusionCounts::accumulate_soft(const Tensor& prob, const Tensor& onehot, const Box& box) {
  require(prob.rank() == 5 && prob.shape() == onehot.shape(),
          "ConfusionCounts: need matching [N,C,D,H,W] prob/onehot");
  const int n = prob.extent(0), c = prob.extent(1);
  if (classes() == 0) {
    tp.assign(static_cast<size_t>(c), 0.0);
    fp.assign(static_cast<size_t>(c), 0.0);
    fn.assign(static_cast<size_t>(c), 0.0);
  }
  require(classes() == c, "ConfusionCounts: class count changed between windows");
  const int hh = prob.extent(3), ww = prob.extent(4);
  auto p = prob.data();
  auto y = onehot.data();
  for (int bn = 0; bn < n; ++bn) {
    for (int ch = 0; ch < c; ++ch) {
      const std::int64_t base = (static_cast<std::int64_t>(bn) * c + ch) * prob.extent(2);
      double atp = 0.0, afp = 0.0, afn = 0.0;
      for (int d = box.d0; d < box.d1; ++d) {
        for (int h = box.h0; h < box.h1; ++h) {
          const std::int64_t row = ((base + d) * hh + h) * ww;
          for (int w = box.w0; w < box.w1; ++w) {
            const double pv = p[static_cast<size_t>(row + w)];
            const double yv = y[static_cast<size_t>(row + w)];
            atp += pv * yv;
            afp += pv * (1.0 - yv);
            afn += (1.0 - pv) * yv;
          }
        }
      }
      tp[static_cast<size_t>(ch)] += atp;
      fp[static_cast<size_t>(ch)] += afp;
      fn[static_cast<size_t>(ch)] += afn;
    }
  }
}

void ConfusionCounts::accumulate_soft(const Tensor& prob, const Tensor& onehot) {
  require(prob.rank() == 5, "ConfusionCounts: need [N,C,D,H,W]");
  accumulate_soft(prob, onehot, Box{0, prob.extent(2), 0, prob.extent(3), 0, prob.extent(4)});
}

void ConfusionCounts::accumulate_hard(const ByteVolume& pred, const ByteVolume& target,
                                      int class_count) {
  require(pred.shape == target.shape, "ConfusionCounts: prediction/target shape mismatch");
  if (classes() == 0) {
    tp.assign(static_cast<size_t>(class_count), 0.0);
    fp.assign(static_cast<size_t>(class_count), 0.0);
    fn.assign(static_cast<size_t>(class_count), 0.0);
  }
  require(classes() == class_count, "ConfusionCounts: class count changed between windows");
  for (size_t i = 0; i < pred.data.size(); ++i) {
    const int pv = pred.data[i], tv = target.data[i];
    require(pv < class_count && tv < class_count, "ConfusionCounts: label out of range");
    if (pv == tv) {
      tp[static_cast<size_t>(pv)] += 1.0;
    } else {
      fp[static_cast<size_t>(pv)] += 1.0;
      fn[static_cast<size_t>(tv)] += 1.0;
    }
  }
}

Var dice_loss(Tape& t, Var pred_prob, const Tensor& target_onehot, double eps) {
  require(eps > 0.0, "dice_loss: eps must be > 0");
  check_soft_inputs(t.value(pred_prob), target_onehot, "dice_loss");
  return overlap_term(t, pred_prob, target_onehot, 0.5, 0.5, eps, /*dice_form=*/true);
}

Var tversky_loss(Tape& t, Var pred_prob, const Tensor& target_onehot, double alpha, double beta,
                 double eps) {
  require(eps > 0.0, "tversky_loss: eps must be > 0");
  require(alpha >= 0.0 && beta >= 0.0, "tversky_loss: alpha/beta must be >= 0");
  require(std::abs(alpha + beta - 1.0) <= 1e-12, "tversky_loss: alpha + beta must equal 1");
  check_soft_inputs(t.value(pred_prob), target_onehot, "tversky_loss");
  return overlap_term(t, pred_prob, target_onehot, alpha, beta, eps, /*dice_form=*/false);
}

namespace {

Var region_loss_impl(Tape& t, Var pred_prob, const Tensor& target_onehot,
                     const RegionPartition& part,
                     std::span<const std::pair<double, double>> region_ab, double alpha,
                     double beta, double eps, bool normalize) {
  require(eps > 0.0, "region_tversky_loss: eps must be > 0");
  const Tensor& pv = t.value(pred_prob);
  require(pv.rank() == 5, "region_tversky_loss: need [N,C,D,H,W]");
  check_soft_inputs(pv, target_onehot, "region_tversky_loss");
  Shape vol{pv.extent(2), pv.extent(3), pv.extent(4)};
  if (vol != part.volume) {
    throw std::invalid_argument("region_tversky_loss: partition extents do not match volume");
  }
  require(part.k() >= 1, "region_tversky_loss: empty partition");
  if (!region_ab.empty() && static_cast<int>(region_ab.size()) != part.k()) {
    throw std::invalid_argument("region_tversky_loss: per-region alpha/beta count " +
                                std::to_string(region_ab.size()) + " does not match k=" +
                                std::to_string(part.k()));
  }
  Var total;
  for (int r = 0; r < part.k(); ++r) {
    const Box& b = part.boxes[static_cast<size_t>(r)];
    double a = alpha, bt = beta;
    if (!region_ab.empty()) {
      a = region_ab[static_cast<size_t>(r)].first;
      bt = region_ab[static_cast<size_t>(r)].second;
      require(a >= 0.0 && bt >= 0.0 && std::abs(a + bt - 1.0) <= 1e-12,
              "region_tversky_loss: per-region alpha + beta must equal 1");
    }
    Var pr = spatial_slice(t, pred_prob, b);
    Var term = overlap_term(t, pr, slice5(target_onehot, b), a, bt, eps, /*dice_form=*/false);
    total = r == 0 ? term : add(t, total, term);
  }
  return normalize ? scale(t, total, 1.0 / part.k()) : total;
}

}  // namespace

Var region_tversky_loss(Tape& t, Var pred_prob, const Tensor& target_onehot,
                        const RegionPartition& part, double alpha, double beta, double eps,
                        bool normalize) {
  require(alpha >= 0.0 && beta >= 0.0, "region_tversky_loss: alpha/beta must be >= 0");
  require(std::abs(alpha + beta - 1.0) <= 1e-12, "region_tversky_loss: alpha + beta must equal 1");
  return region_loss_impl(t, pred_prob, target_onehot, part, {}, alpha, beta, eps, normalize);
}

Var region_tversky_loss(Tape& t, Var pred_prob, const Tensor& target_onehot,
                        const RegionPartition& part,
                        std::span<const std::pair<double, double>> region_ab, double eps,
                        bool normalize) {
  require(!region_ab.empty(), "region_tversky_loss: empty per-region alpha/beta list");
  return region_loss_impl(t, pred_prob, target_onehot, part, region_ab, 0.0, 0.0, eps, normalize);
}

std::pair<double, double> adaptive_alpha_beta(const ConfusionCounts& counts, double eps,
                                              double floor) {
  double sfp = 0.0, sfn = 0.0;
  for (int c = 1; c < counts.classes(); ++c) {
    sfp += counts.fp[static_cast<size_t>(c)];
    sfn += counts.fn[static_cast<size_t>(c)];
  }
  if (sfp + sfn < floor) return {0.3, 0.7};
  const double beta = std::clamp(sfn / (sfp + sfn + eps), 0.5, 0.9);
  return {1.0 - beta, beta};
}

Var cross_entropy(Tape& t, Var logits, const ByteVolume& labels) {
  const Tensor& lg = t.value(logits);
  require(lg.rank() >= 2, "cross_entropy: need [N,C,sp...] logits");
  Shape expect;
  expect.push_back(lg.extent(0));
  for (int a = 2; a < lg.rank(); ++a) expect.push_back(lg.extent(a));
  if (labels.shape != expect) {
    throw std::invalid_argument("cross_entropy: label extents do not match logits");
  }
  Var picked = gather_class(t, log_softmax(t, logits, 1), labels);
  return neg(t, mean_all(t, picked));
}

Var compound_loss(Tape& t, Var logits, const ByteVolume& labels, const LossConfig& cfg) {
  cfg.validate();
  // copy the handle: recording below may reallocate the tape's node storage
  const Tensor lg = t.value(logits);
  require(lg.rank() >= 3, "compound_loss: need [N,C,sp...] logits");
  Var ce = cross_entropy(t, logits, labels);
  if (cfg.variant == LossVariant::cross_entropy) return ce;

  Var prob = softmax(t, logits, 1);
  Tensor onehot = one_hot(labels, lg.extent(1));
  Var term;
  switch (cfg.variant) {
    case LossVariant::dice:
      term = dice_loss(t, prob, onehot, cfg.eps);
      break;
    case LossVariant::tversky:
      term = tversky_loss(t, prob, onehot, cfg.alpha, cfg.beta, cfg.eps);
      break;
    case LossVariant::region_dice:
    case LossVariant::region_tversky:
    case LossVariant::compound: {
      require(lg.rank() == 5, "compound_loss: region variants need [N,C,D,H,W]");
      RegionPartition part =
          RegionPartition::splits({lg.extent(2), lg.extent(3), lg.extent(4)}, cfg.region_splits);
      const bool dice_ab = cfg.variant == LossVariant::region_dice;
      if (!dice_ab && static_cast<int>(cfg.region_ab.size()) == part.k()) {
        term = region_tversky_loss(t, prob, onehot, part, cfg.region_ab, cfg.eps,
                                   cfg.normalize_regions);
      } else {
        term = region_tversky_loss(t, prob, onehot, part, dice_ab ? 0.5 : cfg.alpha,
                                   dice_ab ? 0.5 : cfg.beta, cfg.eps, cfg.normalize_regions);
      }
      break;
    }
    case LossVariant::cross_entropy:
      break;  // handled above
  }
  return add(t, ce, term);
}

Var supervise(Tape& t, std::span<const Var> logits, const ByteVolume& labels,
              const LossConfig& cfg) {
  cfg.validate();
  require(!logits.empty(), "supervise: need at least one scale");
  std::vector<double> w =
      cfg.scale_weights.empty() ? default_scale_weights(logits.size()) : cfg.scale_weights;
  if (w.size() != logits.size()) {
    throw std::invalid_argument("supervise: " + std::to_string(w.size()) + " weights for " +
                                std::to_string(logits.size()) + " scales");
  }
  double sum = 0.0;
  for (double x : w) sum += x;
  for (double& x : w) x /= sum;

  Var total;
  for (size_t l = 0; l < logits.size(); ++l) {
    const Tensor& lg = t.value(logits[l]);
    require(lg.rank() >= 3, "supervise: need [N,C,sp...] logits at every scale");
    Shape tgt;
    tgt.push_back(lg.extent(0));
    for (int a = 2; a < lg.rank(); ++a) tgt.push_back(lg.extent(a));
    ByteVolume lab_l = downsample_labels_nn(labels, tgt);
    Var c = scale(t, compound_loss(t, logits[l], lab_l, cfg), w[l]);
    total = l == 0 ? c : add(t, total, c);
  }
  return total;
}

MetricsReport evaluate_metrics(const ByteVolume& pred, const ByteVolume& target, int class_count) {
  if (pred.shape != target.shape) {
    throw std::invalid_argument("evaluate_metrics: prediction/target shape mismatch");
  }
  require(class_count >= 2, "evaluate_metrics: need at least one foreground class");
  ConfusionCounts counts(class_count);
  counts.accumulate_hard(pred, target, class_count);
  return report_from_counts(counts, static_cast<double>(pred.data.size()));
}

MetricsReport report_from_counts(const ConfusionCounts& counts, double total) {
  const int class_count = counts.classes();
  require(class_count >= 2, "report_from_counts: need at least one foreground class");
  require(total > 0.0, "report_from_counts: empty volume");

  MetricsReport rep;
  double sd = 0.0, si = 0.0, sr = 0.0, fg = 0.0;
  int present = 0;
  for (int c = 1; c < class_count; ++c) {
    const double tp = counts.tp[static_cast<size_t>(c)];
    const double fp = counts.fp[static_cast<size_t>(c)];
    const double fn = counts.fn[static_cast<size_t>(c)];
    ClassMetrics m;
    m.label = c;
    m.tw = (tp + fn) / total;
    m.present = tp + fp + fn > 0.0;
    if (m.present) {
      m.dsc = 2.0 * tp / (2.0 * tp + fp + fn);
      m.iou = tp / (tp + fp + fn);
      // No positives in the target: recall is vacuously 1.
      m.recall = tp + fn > 0.0 ? tp / (tp + fn) : 1.0;
      sd += m.dsc;
      si += m.iou;
      sr += m.recall;
      ++present;
    }
    fg += tp + fn;
    rep.per_class.push_back(m);
  }
  if (present > 0) {
    rep.mean_dsc = sd / present;
    rep.mean_iou = si / present;
    rep.mean_recall = sr / present;
  }
  rep.tw = fg / total;
  return rep;
}

std::string MetricsReport::csv() const {
  std::string out = "class,DSC,IoU,recall,T/W\n";
  for (const ClassMetrics& m : per_class) {
    out += std::to_string(m.label) + "," + format_double(m.dsc) + "," + format_double(m.iou) +
           "," + format_double(m.recall) + "," + format_double(m.tw) + "\n";
  }
  out += "mean," + format_double(mean_dsc) + "," + format_double(mean_iou) + "," +
         format_double(mean_recall) + "," + format_double(tw) + "\n";
  return out;
}

}  // namespace gmseg
