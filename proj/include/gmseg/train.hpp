#pragma once

#include <span>
#include <string>
#include <vector>

#include "gmseg/checkpoint.hpp"
#include "gmseg/loss.hpp"
#include "gmseg/net.hpp"
#include "gmseg/synth.hpp"

namespace gmseg {

struct TrainConfig {
  std::string plan = "toy";  // preset name or path to a plan file
  LossConfig loss;
  int epochs = 5;
  int steps_per_epoch = 40;
  double lr = 1e-4;
  double poly_power = 0.9;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
  std::uint64_t seed = 1;
  double stop_dsc = 0.0;        // > 0: stop after any epoch whose train DSC reaches this
  std::string checkpoint_path;  // empty: keep checkpoints in memory only
  std::string metrics_csv;      // empty: return the log without writing it
  ScanMode scan_mode = ScanMode::parallel;

  void validate() const;
  static TrainConfig from_config(const KvConfig& cfg);
  KvConfig to_config() const;
};

// Adam first/second moments in parameter-registry order (slots for
// non-trainable parameters stay empty).
struct AdamState {
  std::vector<Tensor> m, v;
  std::uint64_t t = 0;

  static AdamState init(const Network& net);
};

double poly_lr(double lr0, double power, std::uint64_t step, std::uint64_t total_steps);

// Optimizer state round-trip through checkpoint records ("adam.m/<name>" etc.).
void pack_optimizer(const Network& net, const AdamState& st, Checkpoint& c);
AdamState unpack_optimizer(const Network& net, const Checkpoint& c);

struct TrainResult {
  std::vector<double> loss_curve;  // one entry per step
  std::vector<double> epoch_dsc;   // eval-mode mean DSC on the training data
  double final_dsc = 0.0;
  std::uint64_t steps = 0;
  bool aborted_nan = false;  // stopped early; last-good checkpoint kept
  std::string csv;           // "epoch,step,lr,loss,train_dsc" rows
};

// Deterministic full training run: batches cycle through data in order, the
// Adam update walks parameters in registration order single-threaded, and a
// checkpoint (with optimizer state) is written before training and after
// every epoch.
TrainResult train(Network& net, std::span<const VolumeSample> data, const TrainConfig& cfg);

}  // namespace gmseg
