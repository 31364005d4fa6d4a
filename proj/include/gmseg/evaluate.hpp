#pragma once

#include <functional>
#include <span>

#include "gmseg/loss.hpp"
#include "gmseg/net.hpp"
#include "gmseg/synth.hpp"

namespace gmseg {

// Eval-mode forward (running batch-norm stats), argmax over the full-resolution
// logits. Volumes larger than the plan patch are covered tile by tile at patch
// stride; a ragged edge shifts the last tile inward to stay in bounds.
ByteVolume predict_volume(const Network& net, const Tensor& image,
                          ScanMode mode = ScanMode::parallel);

using PredictFn = std::function<ByteVolume(const VolumeSample&)>;

// Pools hard confusion counts over all samples into one report.
MetricsReport evaluate_with(const PredictFn& fn, std::span<const VolumeSample> data,
                            int class_count);
MetricsReport evaluate(const Network& net, std::span<const VolumeSample> data,
                       ScanMode mode = ScanMode::parallel);

}  // namespace gmseg
