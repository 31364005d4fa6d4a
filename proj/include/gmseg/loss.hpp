#pragma once

#include <array>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "gmseg/ops.hpp"
#include "gmseg/tape.hpp"

namespace gmseg {

// Axis-aligned grid over a [D,H,W] volume; boundary boxes are clipped so the
// boxes are disjoint and cover every voxel.
struct RegionPartition {
  Shape volume;                 // {D,H,W}
  std::array<int, 3> box{};     // nominal sub-volume extents
  std::vector<Box> boxes;

  int k() const { return static_cast<int>(boxes.size()); }

  // Grid with sub-volumes of the given extents.
  static RegionPartition make(const Shape& volume, std::array<int, 3> box_extents);
  // Grid with (at most) the given number of boxes per axis; extents are split
  // as evenly as possible (ceil division).
  static RegionPartition splits(const Shape& volume, std::array<int, 3> boxes_per_axis);
};

enum class LossVariant { dice, tversky, region_dice, region_tversky, cross_entropy, compound };

LossVariant loss_variant_from(const std::string& name);
std::string loss_variant_name(LossVariant v);

struct LossConfig {
  LossVariant variant = LossVariant::compound;
  double alpha = 0.3;
  double beta = 0.7;
  double eps = 1e-5;
  std::array<int, 3> region_splits{4, 4, 4};  // boxes per axis at full resolution
  bool normalize_regions = false;             // divide the region sum by k
  bool adaptive = false;                      // refresh region_ab from soft counts
  // Per-region (alpha, beta) overrides, refreshed once per epoch when adaptive.
  // Consulted only when its length matches the partition of the scale at hand.
  std::vector<std::pair<double, double>> region_ab;
  std::vector<double> scale_weights;  // deep-supervision weights; empty = 2^-l default

  void validate() const;
};

// Per-class soft (or hard) confusion accumulators.
struct ConfusionCounts {
  std::vector<double> tp, fp, fn;

  ConfusionCounts() = default;
  explicit ConfusionCounts(int classes) : tp(classes, 0.0), fp(classes, 0.0), fn(classes, 0.0) {}
  int classes() const { return static_cast<int>(tp.size()); }
  void reset();
  // prob/onehot: [N,C,D,H,W]; accumulates over the given box (or everything).
  void accumulate_soft(const Tensor& prob, const Tensor& onehot, const Box& box);
  void accumulate_soft(const Tensor& prob, const Tensor& onehot);
  void accumulate_hard(const ByteVolume& pred, const ByteVolume& target, int class_count);
};

// Soft one-vs-rest losses over probabilities in [0,1]; each term is averaged
// over batch and foreground classes. pred_prob: [N,C,D,H,W] with C >= 2,
// target_onehot of the same shape.
Var dice_loss(Tape& t, Var pred_prob, const Tensor& target_onehot, double eps = 1e-5);
Var tversky_loss(Tape& t, Var pred_prob, const Tensor& target_onehot, double alpha, double beta,
                 double eps = 1e-5);
// Sum over partition boxes of per-region Tversky terms; each region's gradient
// touches only its own voxels. normalize divides the sum by k.
Var region_tversky_loss(Tape& t, Var pred_prob, const Tensor& target_onehot,
                        const RegionPartition& part, double alpha, double beta, double eps = 1e-5,
                        bool normalize = false);
Var region_tversky_loss(Tape& t, Var pred_prob, const Tensor& target_onehot,
                        const RegionPartition& part,
                        std::span<const std::pair<double, double>> region_ab, double eps = 1e-5,
                        bool normalize = false);

// beta = clamp(FN/(FP+FN+eps), 0.5, 0.9), alpha = 1-beta, from counts summed
// over foreground classes; (0.3, 0.7) when the window holds almost no errors.
std::pair<double, double> adaptive_alpha_beta(const ConfusionCounts& counts, double eps = 1e-5,
                                              double floor = 1e-3);

// Mean voxelwise softmax cross-entropy. logits: [N,C,sp...], labels: [N,sp...].
Var cross_entropy(Tape& t, Var logits, const ByteVolume& labels);

// CE plus the soft term selected by cfg.variant (unit weights); the
// cross-entropy variant is CE alone, compound is CE + region-Tversky.
Var compound_loss(Tape& t, Var logits, const ByteVolume& labels, const LossConfig& cfg);

// Deep supervision: sum over scales of w_l * compound(logits_l, labels_l) with
// nearest-neighbour downsampled labels; weights normalised to sum 1.
Var supervise(Tape& t, std::span<const Var> logits, const ByteVolume& labels,
              const LossConfig& cfg);

// Hard-label evaluation metrics over foreground classes.
struct ClassMetrics {
  int label = 0;
  double dsc = 1.0, iou = 1.0, recall = 1.0, tw = 0.0;
  bool present = false;  // class appears in prediction or target
};

struct MetricsReport {
  std::vector<ClassMetrics> per_class;  // foreground classes 1..C-1
  double mean_dsc = 1.0, mean_iou = 1.0, mean_recall = 1.0;
  double tw = 0.0;  // all foreground target voxels / total voxels

  std::string csv() const;  // header, one row per class, then a mean row
};

MetricsReport evaluate_metrics(const ByteVolume& pred, const ByteVolume& target, int class_count);
// Same report from already-pooled hard counts (e.g. across samples).
MetricsReport report_from_counts(const ConfusionCounts& counts, double total_voxels);

}  // namespace gmseg
