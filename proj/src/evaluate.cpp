#include "gmseg/evaluate.hpp"

#include <stdexcept>

namespace gmseg {

namespace {

std::vector<int> tile_starts(int extent, int patch) {
  std::vector<int> starts;
  for (int s = 0; s + patch <= extent; s += patch) starts.push_back(s);
  if (starts.back() + patch < extent) starts.push_back(extent - patch);
  return starts;
}

}  // namespace

ByteVolume predict_volume(const Network& net, const Tensor& image, ScanMode mode) {
  if (image.rank() != 4) throw std::invalid_argument("predict_volume: image must be [C,D,H,W]");
  if (image.extent(0) != net.in_channels) {
    throw std::invalid_argument("predict_volume: image has " + std::to_string(image.extent(0)) +
                                " channels, network expects " + std::to_string(net.in_channels));
  }
  const auto& patch = net.plan.patch;
  const int vd = image.extent(1), vh = image.extent(2), vw = image.extent(3);
  const std::array<int, 3> vol{vd, vh, vw};
  for (int a = 0; a < 3; ++a) {
    if (vol[static_cast<size_t>(a)] < patch[static_cast<size_t>(a)]) {
      throw std::invalid_argument("predict_volume: volume axis " + std::to_string(a) +
                                  " smaller than the plan patch");
    }
  }
  ByteVolume out = ByteVolume::zeros({vd, vh, vw});
  auto img = image.data();
  const int c_in = net.in_channels;
  const int pd = patch[0], ph = patch[1], pw = patch[2];

  for (int d0 : tile_starts(vd, pd)) {
    for (int h0 : tile_starts(vh, ph)) {
      for (int w0 : tile_starts(vw, pw)) {
        std::vector<double> tile(static_cast<size_t>(c_in) * pd * ph * pw);
        std::int64_t o = 0;
        for (int ch = 0; ch < c_in; ++ch) {
          for (int d = 0; d < pd; ++d) {
            for (int h = 0; h < ph; ++h) {
              const std::int64_t src =
                  ((static_cast<std::int64_t>(ch) * vd + d0 + d) * vh + h0 + h) * vw + w0;
              for (int w = 0; w < pw; ++w) tile[static_cast<size_t>(o++)] = img[static_cast<size_t>(src + w)];
            }
          }
        }
        Tape tape(/*grad_enabled=*/false);
        Ctx cx(tape);
        cx.training = false;
        cx.scan_mode = mode;
        Var x = tape.constant(Tensor::raw({1, c_in, pd, ph, pw}, std::move(tile)));
        std::vector<Var> logits = net.forward(cx, x);
        const Tensor& full = tape.value(logits.front());
        const int classes = full.extent(1);
        auto lg = full.data();
        const std::int64_t sp = static_cast<std::int64_t>(pd) * ph * pw;
        for (std::int64_t v = 0; v < sp; ++v) {
          int best = 0;
          double bv = lg[static_cast<size_t>(v)];
          for (int c = 1; c < classes; ++c) {
            const double cv = lg[static_cast<size_t>(c * sp + v)];
            if (cv > bv) {
              bv = cv;
              best = c;
            }
          }
          const int d = static_cast<int>(v / (ph * pw));
          const int h = static_cast<int>((v / pw) % ph);
          const int w = static_cast<int>(v % pw);
          out.data[static_cast<size_t>(((d0 + d) * static_cast<std::int64_t>(vh) + h0 + h) * vw +
                                       w0 + w)] = static_cast<std::uint8_t>(best);
        }
      }
    }
  }
  return out;
}

MetricsReport evaluate_with(const PredictFn& fn, std::span<const VolumeSample> data,
                            int class_count) {
  if (data.empty()) throw std::invalid_argument("evaluate: no samples");
  ConfusionCounts counts(class_count);
  double total = 0.0;
  for (const VolumeSample& s : data) {
    ByteVolume pred = fn(s);
    counts.accumulate_hard(pred, s.labels, class_count);
    total += static_cast<double>(s.labels.data.size());
  }
  return report_from_counts(counts, total);
}

MetricsReport evaluate(const Network& net, std::span<const VolumeSample> data, ScanMode mode) {
  return evaluate_with(
      [&net, mode](const VolumeSample& s) { return predict_volume(net, s.image, mode); }, data,
      net.class_count);
}

}  // namespace gmseg
