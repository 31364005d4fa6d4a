#include "gmseg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace gmseg {

namespace {

struct Blob {
  double cd, ch, cw;  // center
  double rd, rh, rw;  // per-axis radii
  int cls;
};

void rasterize(const std::vector<Blob>& blobs, double radius_mul, ByteVolume& labels) {
  std::fill(labels.data.begin(), labels.data.end(), std::uint8_t{0});
  const int dd = labels.shape[0], hh = labels.shape[1], ww = labels.shape[2];
  for (const Blob& b : blobs) {
    const double rd = b.rd * radius_mul, rh = b.rh * radius_mul, rw = b.rw * radius_mul;
    const int d0 = std::max(0, static_cast<int>(std::floor(b.cd - rd)));
    const int d1 = std::min(dd - 1, static_cast<int>(std::ceil(b.cd + rd)));
    const int h0 = std::max(0, static_cast<int>(std::floor(b.ch - rh)));
    const int h1 = std::min(hh - 1, static_cast<int>(std::ceil(b.ch + rh)));
    const int w0 = std::max(0, static_cast<int>(std::floor(b.cw - rw)));
    const int w1 = std::min(ww - 1, static_cast<int>(std::ceil(b.cw + rw)));
    for (int d = d0; d <= d1; ++d) {
      for (int h = h0; h <= h1; ++h) {
        for (int w = w0; w <= w1; ++w) {
          const double qd = (d - b.cd) / rd, qh = (h - b.ch) / rh, qw = (w - b.cw) / rw;
          if (qd * qd + qh * qh + qw * qw <= 1.0) {
            labels.data[static_cast<size_t>((d * hh + h) * ww + w)] =
                static_cast<std::uint8_t>(b.cls);
          }
        }
      }
    }
    // a blob always marks at least its center voxel
    const int cd = std::clamp(static_cast<int>(std::lround(b.cd)), 0, dd - 1);
    const int ch = std::clamp(static_cast<int>(std::lround(b.ch)), 0, hh - 1);
    const int cw = std::clamp(static_cast<int>(std::lround(b.cw)), 0, ww - 1);
    labels.data[static_cast<size_t>((cd * hh + ch) * ww + cw)] = static_cast<std::uint8_t>(b.cls);
  }
}

}  // namespace

void SynthSpec::validate() const {
  for (int e : extents) {
    if (e < 4) throw std::invalid_argument("SynthSpec: extents must be >= 4");
  }
  if (channels < 1) throw std::invalid_argument("SynthSpec: channels must be >= 1");
  if (class_count < 2) throw std::invalid_argument("SynthSpec: class_count must be >= 2");
  if (blobs_min < 1 || blobs_max < blobs_min) {
    throw std::invalid_argument("SynthSpec: need 1 <= blobs_min <= blobs_max");
  }
  if (!(radius_min > 0.0 && radius_max >= radius_min)) {
    throw std::invalid_argument("SynthSpec: need 0 < radius_min <= radius_max");
  }
  const int emin = std::min({extents[0], extents[1], extents[2]});
  if (radius_max > emin / 2.0) {
    throw std::invalid_argument("SynthSpec: radius_max does not fit the extents");
  }
  if (!(tw_min > 0.0 && tw_min < tw_max && tw_max < 1.0)) {
    throw std::invalid_argument("SynthSpec: T/W band must satisfy 0 < lo < hi < 1");
  }
  if (!(noise >= 0.0) || !(contrast > 0.0)) {
    throw std::invalid_argument("SynthSpec: need noise >= 0 and contrast > 0");
  }
  if (max_retries < 1) throw std::invalid_argument("SynthSpec: max_retries must be >= 1");
}

SynthSpec SynthSpec::from_config(const KvConfig& cfg) {
  SynthSpec s;
  if (cfg.has("extents")) s.extents = cfg.get_triple("extents");
  if (cfg.has("channels")) s.channels = cfg.get_int("channels");
  if (cfg.has("class_count")) s.class_count = cfg.get_int("class_count");
  if (cfg.has("blobs_min")) s.blobs_min = cfg.get_int("blobs_min");
  if (cfg.has("blobs_max")) s.blobs_max = cfg.get_int("blobs_max");
  if (cfg.has("radius_min")) s.radius_min = cfg.get_double("radius_min");
  if (cfg.has("radius_max")) s.radius_max = cfg.get_double("radius_max");
  if (cfg.has("tw_min")) s.tw_min = cfg.get_double("tw_min");
  if (cfg.has("tw_max")) s.tw_max = cfg.get_double("tw_max");
  if (cfg.has("contrast")) s.contrast = cfg.get_double("contrast");
  if (cfg.has("noise")) s.noise = cfg.get_double("noise");
  if (cfg.has("seed")) s.seed = static_cast<std::uint64_t>(cfg.get_int("seed"));
  if (cfg.has("max_retries")) s.max_retries = cfg.get_int("max_retries");
  s.validate();
  return s;
}

KvConfig SynthSpec::to_config() const {
  KvConfig cfg;
  cfg.set("extents", std::to_string(extents[0]) + "x" + std::to_string(extents[1]) + "x" +
                         std::to_string(extents[2]));
  cfg.set("channels", std::to_string(channels));
  cfg.set("class_count", std::to_string(class_count));
  cfg.set("blobs_min", std::to_string(blobs_min));
  cfg.set("blobs_max", std::to_string(blobs_max));
  cfg.set("radius_min", format_double(radius_min));
  cfg.set("radius_max", format_double(radius_max));
  cfg.set("tw_min", format_double(tw_min));
  cfg.set("tw_max", format_double(tw_max));
  cfg.set("contrast", format_double(contrast));
  cfg.set("noise", format_double(noise));
  cfg.set("seed", std::to_string(seed));
  cfg.set("max_retries", std::to_string(max_retries));
  return cfg;
}

double tw_ratio(const ByteVolume& labels) {
  std::int64_t fg = 0;
  for (std::uint8_t v : labels.data) fg += v != 0;
  return static_cast<double>(fg) / static_cast<double>(labels.data.size());
}

std::vector<VolumeSample> synth_generate(const SynthSpec& spec, int count) {
  spec.validate();
  if (count < 1) throw std::invalid_argument("synth_generate: count must be >= 1");
  const Shape vol{spec.extents[0], spec.extents[1], spec.extents[2]};
  const double tw_mid = 0.5 * (spec.tw_min + spec.tw_max);
  const int emin = std::min({spec.extents[0], spec.extents[1], spec.extents[2]});

  std::vector<VolumeSample> out;
  out.reserve(static_cast<size_t>(count));
  for (int i = 0; i < count; ++i) {
    Rng rng(spec.seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(i) + 1);
    ByteVolume labels = ByteVolume::zeros(vol);
    bool ok = false;
    for (int attempt = 0; attempt < spec.max_retries && !ok; ++attempt) {
      const int k = rng.uniform_int(spec.blobs_min, spec.blobs_max);
      std::vector<Blob> blobs(static_cast<size_t>(k));
      for (Blob& b : blobs) {
        b.rd = rng.uniform(spec.radius_min, spec.radius_max);
        b.rh = rng.uniform(spec.radius_min, spec.radius_max);
        b.rw = rng.uniform(spec.radius_min, spec.radius_max);
        auto center = [&rng](double r, int e) {
          const double lo = std::min(r, (e - 1) / 2.0);
          return rng.uniform(lo, std::max(lo, e - 1 - r));
        };
        b.cd = center(b.rd, spec.extents[0]);
        b.ch = center(b.rh, spec.extents[1]);
        b.cw = center(b.rw, spec.extents[2]);
        b.cls = spec.class_count == 2 ? 1 : rng.uniform_int(1, spec.class_count - 1);
      }
      // one resize step per draw: scale radii toward the band's midpoint,
      // then re-measure; counts as the same attempt
      double mul = 1.0;
      for (int adjust = 0; adjust < 8; ++adjust) {
        rasterize(blobs, mul, labels);
        const double tw = tw_ratio(labels);
        if (tw >= spec.tw_min && tw <= spec.tw_max) {
          ok = true;
          break;
        }
        const double f = tw > 0.0 ? std::cbrt(tw_mid / tw) : 1.6;
        mul = std::clamp(mul * f, 0.05, emin / (2.0 * spec.radius_max));
      }
    }
    if (!ok) {
      throw std::runtime_error("synth_generate: T/W band (" + std::to_string(spec.tw_min) + ", " +
                               std::to_string(spec.tw_max) + ") not attainable at extents " +
                               shape_str(vol) + " after " + std::to_string(spec.max_retries) +
                               " attempts");
    }

    const std::int64_t nvox = shape_numel(vol);
    std::vector<double> img(static_cast<size_t>(spec.channels) * nvox);
    for (int ch = 0; ch < spec.channels; ++ch) {
      for (std::int64_t v = 0; v < nvox; ++v) {
        const int lab = labels.data[static_cast<size_t>(v)];
        const double lift =
            lab == 0 ? 0.0 : spec.contrast * (0.5 + 0.5 * lab / (spec.class_count - 1));
        img[static_cast<size_t>(ch * nvox + v)] = lift + rng.normal(0.0, spec.noise);
      }
    }
    VolumeSample s;
    s.image = Tensor::raw({spec.channels, spec.extents[0], spec.extents[1], spec.extents[2]},
                          std::move(img));
    s.labels = std::move(labels);
    s.id = "synth-" + std::to_string(spec.seed) + "-" + std::to_string(i);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace gmseg
