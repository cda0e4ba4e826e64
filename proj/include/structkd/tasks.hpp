#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "structkd/common.hpp"
#include "structkd/io.hpp"
#include "structkd/nets.hpp"
#include "structkd/ops.hpp"
#include "structkd/rng.hpp"
#include "structkd/tensor.hpp"

namespace structkd {
namespace tasks {

enum class Task { Segmentation, Depth };

inline const char* task_name(Task t) {
  return t == Task::Segmentation ? "segmentation" : "depth";
}

/// One image with its dense target. Exactly one of `classes` or `depth` is
/// populated depending on the task; `labeled` gates the task loss.
struct Sample {
  Tensor image;              // [3,H,W], values in [0,1]
  std::vector<int> classes;  // H*W class indices, row major
  std::vector<float> depth;  // H*W depths
  bool labeled = true;
};

struct Dataset {
  Task task = Task::Segmentation;
  int classes = 0;  ///< class count for segmentation, 0 for depth
  int h = 0, w = 0;
  std::vector<Sample> samples;

  int size() const { return static_cast<int>(samples.size()); }
};

namespace tdetail {

constexpr float kDepthMin = 0.5f;
constexpr float kDepthMax = 10.0f;

// Appearance knobs for the shapes generator. Noise and jitter control how
// ambiguous class identity is from a single pixel.
constexpr float kShapeNoiseSigma = 0.06f;
constexpr float kShapeColorJitter = 0.10f;
constexpr float kShapeTextureAmp = 0.09f;
constexpr float kDepthNoiseSigma = 0.04f;

inline void hsv_to_rgb(float h, float s, float v, float rgb[3]) {
  h = h - std::floor(h);
  const float c = v * s;
  const float hp = h * 6.0f;
  const float x = c * (1.0f - std::fabs(std::fmod(hp, 2.0f) - 1.0f));
  float r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  rgb[0] = r + (v - c);
  rgb[1] = g + (v - c);
  rgb[2] = b + (v - c);
}

/// Base color of a foreground class, spread around the hue wheel.
inline void class_color(int cls, int classes, float rgb[3]) {
  const float t = classes > 2
                      ? static_cast<float>(cls - 1) / (classes - 2)
                      : 0.0f;
  hsv_to_rgb(0.02f + 0.86f * t, 0.55f, 0.72f, rgb);
}

/// Stripe frequency that travels with the class so texture carries identity.
inline float class_frequency(int cls) { return 1.0f + 0.75f * cls; }

struct ShapeInstance {
  int cls = 0;
  int kind = 0;  // 0 rectangle, 1 disc, 2 bar
  float cx = 0, cy = 0, rx = 0, ry = 0, rot = 0;
  float color[3] = {0, 0, 0};
  float tex_dir = 0, tex_phase = 0, tex_freq = 1;

  /// Signed distance to the outline, negative inside.
  float sdf(float x, float y) const {
    const float dx = x - cx, dy = y - cy;
    if (kind == 1) return std::sqrt(dx * dx + dy * dy) - rx;
    const float cs = std::cos(rot), sn = std::sin(rot);
    const float u = cs * dx + sn * dy;
    const float v = -sn * dx + cs * dy;
    return std::max(std::fabs(u) - rx, std::fabs(v) - ry);
  }

  float shade(float x, float y, int ch) const {
    const float axis = x * std::cos(tex_dir) + y * std::sin(tex_dir);
    const float tex = kShapeTextureAmp *
                      std::sin(2.0f * 3.14159265358979f * tex_freq * axis /
                                   16.0f +
                               tex_phase);
    return color[ch] + tex;
  }
};

}  // namespace tdetail

/// Renders one textured-background scene with 1..C-1 anti-aliased shapes of
/// distinct foreground classes. Pure function of (seed, index, H, W, C).
inline Sample gen_shapes_sample(std::uint64_t seed, int index, int h, int w,
                                int classes) {
  using namespace tdetail;
  Rng rng = Rng::stream(seed, "shapes:" + std::to_string(index));
  Sample s;
  s.image = Tensor::zeros({3, h, w});
  s.classes.assign(static_cast<size_t>(h) * w, 0);
  float* img = s.image.data();
  const auto px = [&](int c, int y, int x) -> float& {
    return img[(static_cast<size_t>(c) * h + y) * w + x];
  };

  // Textured background.
  float bg_freq[3][2], bg_phase[3], bg_base[3];
  for (int c = 0; c < 3; ++c) {
    bg_freq[c][0] = static_cast<float>(rng.uniform(0.5, 2.5));
    bg_freq[c][1] = static_cast<float>(rng.uniform(0.5, 2.5));
    bg_phase[c] = static_cast<float>(rng.uniform(0.0, 6.2831853));
    bg_base[c] = static_cast<float>(rng.uniform(0.38, 0.5));
  }
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        px(c, y, x) = bg_base[c] +
                      0.07f * std::sin(2.0f * 3.14159265f *
                                           (bg_freq[c][0] * x +
                                            bg_freq[c][1] * y) /
                                           w +
                                       bg_phase[c]);

  // Shapes of distinct classes, painted back to front.
  const int max_shapes = classes - 1;
  const int count = rng.uniform_int(1, max_shapes);
  std::vector<int> order = rng.permutation(max_shapes);
  const float scale = static_cast<float>(std::min(h, w));
  for (int k = 0; k < count; ++k) {
    ShapeInstance sh;
    sh.cls = order[static_cast<size_t>(k)] + 1;
    sh.kind = rng.uniform_int(0, 2);
    sh.cx = static_cast<float>(rng.uniform(0.15, 0.85)) * w;
    sh.cy = static_cast<float>(rng.uniform(0.15, 0.85)) * h;
    if (sh.kind == 1) {
      sh.rx = static_cast<float>(rng.uniform(0.08, 0.2)) * scale;
    } else if (sh.kind == 2) {
      sh.rx = static_cast<float>(rng.uniform(0.18, 0.32)) * scale;
      sh.ry = static_cast<float>(rng.uniform(0.03, 0.06)) * scale;
      sh.rot = static_cast<float>(rng.uniform(0.0, 3.14159265));
    } else {
      sh.rx = static_cast<float>(rng.uniform(0.08, 0.2)) * scale;
      sh.ry = static_cast<float>(rng.uniform(0.08, 0.2)) * scale;
    }
    class_color(sh.cls, classes, sh.color);
    for (float& c : sh.color)
      c += static_cast<float>(
          rng.uniform(-kShapeColorJitter, kShapeColorJitter));
    sh.tex_dir = static_cast<float>(rng.uniform(0.0, 3.14159265));
    sh.tex_phase = static_cast<float>(rng.uniform(0.0, 6.2831853));
    sh.tex_freq = class_frequency(sh.cls);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const float d = sh.sdf(x + 0.5f, y + 0.5f);
        const float a = std::clamp(0.5f - d, 0.0f, 1.0f);
        if (a <= 0.0f) continue;
        for (int c = 0; c < 3; ++c)
          px(c, y, x) = a * sh.shade(x + 0.5f, y + 0.5f, c) +
                        (1.0f - a) * px(c, y, x);
        if (a >= 0.5f)
          s.classes[static_cast<size_t>(y) * w + x] = sh.cls;
      }
  }

  // Pixel noise last so class appearance is ambiguous up close.
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        px(c, y, x) = std::clamp(
            px(c, y, x) + static_cast<float>(rng.normal()) *
                              kShapeNoiseSigma,
            0.0f, 1.0f);
  return s;
}

inline Dataset gen_shapes(std::uint64_t seed, int n, int h, int w,
                          int classes) {
  SKD_CHECK(classes >= 2, Config,
            "gen_shapes needs at least 2 classes, got " << classes);
  SKD_CHECK(h >= 16 && w >= 16, Config,
            "gen_shapes needs H,W >= 16, got " << h << "x" << w);
  SKD_CHECK(n >= 0, Config, "gen_shapes: negative sample count");
  Dataset ds;
  ds.task = Task::Segmentation;
  ds.classes = classes;
  ds.h = h;
  ds.w = w;
  ds.samples.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    ds.samples.push_back(gen_shapes_sample(seed, i, h, w, classes));
  return ds;
}

/// Planar depth ramp, linear in pixel coordinates and guaranteed inside the
/// depth range without clamping.
inline std::vector<float> ramp_depth(Rng& rng, int h, int w) {
  using namespace tdetail;
  std::vector<float> d(static_cast<size_t>(h) * w);
  const float d0 = static_cast<float>(rng.uniform(3.5, 6.5));
  const float gx = static_cast<float>(rng.uniform(-2.5, 2.5));
  const float gy = static_cast<float>(rng.uniform(-2.5, 2.5));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      d[static_cast<size_t>(y) * w + x] =
          d0 + gx * (static_cast<float>(x) / (w - 1) - 0.5f) +
          gy * (static_cast<float>(y) / (h - 1) - 0.5f);
  return d;
}

/// Scene of a base ramp with 0..3 protruding sphere caps occluding it; image
/// channels carry inverse-depth shading under textured albedo.
inline Sample gen_depth_sample(std::uint64_t seed, int index, int h, int w) {
  using namespace tdetail;
  Rng rng = Rng::stream(seed, "depth:" + std::to_string(index));
  Sample s;
  s.image = Tensor::zeros({3, h, w});
  s.depth = ramp_depth(rng, h, w);

  const int spheres = rng.uniform_int(0, 3);
  const float scale = static_cast<float>(std::min(h, w));
  for (int k = 0; k < spheres; ++k) {
    const float cx = static_cast<float>(rng.uniform(0.2, 0.8)) * w;
    const float cy = static_cast<float>(rng.uniform(0.2, 0.8)) * h;
    const float r = static_cast<float>(rng.uniform(0.1, 0.22)) * scale;
    const float dc = static_cast<float>(rng.uniform(1.5, 8.0));
    const float bulge =
        static_cast<float>(rng.uniform(0.5, std::min(1.2, dc - 0.55)));
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const float dx = x + 0.5f - cx, dy = y + 0.5f - cy;
        const float rho2 = dx * dx + dy * dy;
        if (rho2 >= r * r) continue;
        const float sd = dc - bulge * std::sqrt(1.0f - rho2 / (r * r));
        float& cur = s.depth[static_cast<size_t>(y) * w + x];
        cur = std::min(cur, sd);
      }
  }

  float alb_freq[3][2], alb_phase[3];
  for (int c = 0; c < 3; ++c) {
    alb_freq[c][0] = static_cast<float>(rng.uniform(0.5, 2.0));
    alb_freq[c][1] = static_cast<float>(rng.uniform(0.5, 2.0));
    alb_phase[c] = static_cast<float>(rng.uniform(0.0, 6.2831853));
  }
  float* img = s.image.data();
  const float inv_lo = 1.0f / kDepthMax, inv_hi = 1.0f / kDepthMin;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const float d = s.depth[static_cast<size_t>(y) * w + x];
        const float shade = (1.0f / d - inv_lo) / (inv_hi - inv_lo);
        const float albedo =
            0.55f + 0.25f * std::sin(2.0f * 3.14159265f *
                                         (alb_freq[c][0] * x +
                                          alb_freq[c][1] * y) /
                                         w +
                                     alb_phase[c]);
        img[(static_cast<size_t>(c) * h + y) * w + x] = std::clamp(
            albedo * (0.25f + 0.75f * shade) +
                static_cast<float>(rng.normal()) * kDepthNoiseSigma,
            0.0f, 1.0f);
      }
  return s;
}

inline Dataset gen_depth(std::uint64_t seed, int n, int h, int w) {
  SKD_CHECK(h >= 16 && w >= 16, Config,
            "gen_depth needs H,W >= 16, got " << h << "x" << w);
  SKD_CHECK(n >= 0, Config, "gen_depth: negative sample count");
  Dataset ds;
  ds.task = Task::Depth;
  ds.h = h;
  ds.w = w;
  ds.samples.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    ds.samples.push_back(gen_depth_sample(seed, i, h, w));
  return ds;
}

// ---------------------------------------------------------------------------
// depth discretization

/// Depth range carved into bins whose edges are uniform in log-depth;
/// decoding uses the arithmetic midpoint of each bin so nearest-bin
/// round-trip error stays within half a bin width.
struct DepthBinning {
  int bins;
  float d_min, d_max;
  std::vector<float> edges;    // bins+1, strictly increasing
  std::vector<float> centers;  // bins, inside their bins

  explicit DepthBinning(int bins_ = 32, float d_min_ = tdetail::kDepthMin,
                        float d_max_ = tdetail::kDepthMax)
      : bins(bins_), d_min(d_min_), d_max(d_max_) {
    SKD_CHECK(bins >= 2, Config, "DepthBinning needs >= 2 bins");
    SKD_CHECK(d_min > 0 && d_max > d_min, Config,
              "DepthBinning needs 0 < d_min < d_max");
    edges.resize(static_cast<size_t>(bins) + 1);
    centers.resize(static_cast<size_t>(bins));
    const double l0 = std::log(static_cast<double>(d_min));
    const double l1 = std::log(static_cast<double>(d_max));
    for (int i = 0; i <= bins; ++i)
      edges[static_cast<size_t>(i)] = static_cast<float>(
          std::exp(l0 + (l1 - l0) * i / bins));
    edges[0] = d_min;
    edges[static_cast<size_t>(bins)] = d_max;
    for (int i = 0; i < bins; ++i)
      centers[static_cast<size_t>(i)] =
          0.5f * (edges[static_cast<size_t>(i)] +
                  edges[static_cast<size_t>(i) + 1]);
  }

  /// Index of the containing bin, clamped to the boundary bins.
  int bin_of(float d) const {
    if (d <= d_min) return 0;
    if (d >= d_max) return bins - 1;
    const double t = (std::log(static_cast<double>(d)) -
                      std::log(static_cast<double>(d_min))) /
                     (std::log(static_cast<double>(d_max)) -
                      std::log(static_cast<double>(d_min)));
    int i = static_cast<int>(t * bins);
    i = std::clamp(i, 0, bins - 1);
    // Guard against log/exp rounding at the edges.
    while (i > 0 && d < edges[static_cast<size_t>(i)]) --i;
    while (i < bins - 1 && d >= edges[static_cast<size_t>(i) + 1]) ++i;
    return i;
  }
};

/// Quantizes a depth map to bin indices. Out-of-range depths clamp to the
/// boundary bins; their count is returned through `clamped` for logging.
inline std::vector<int> depth_to_bins(const std::vector<float>& depth,
                                      const DepthBinning& b,
                                      int* clamped = nullptr) {
  std::vector<int> out(depth.size());
  int warn = 0;
  for (size_t i = 0; i < depth.size(); ++i) {
    if (depth[i] < b.d_min || depth[i] > b.d_max) ++warn;
    out[i] = b.bin_of(depth[i]);
  }
  if (clamped) *clamped = warn;
  return out;
}

/// Soft weighted sum: per-pixel expectation of bin centers under `probs`
/// [N,C,H,W], which must sum to 1 over channels. Returns [N,1,H,W].
inline Tensor bins_to_depth(const Tensor& probs, const DepthBinning& b) {
  SKD_CHECK(probs.ndim() == 4 && probs.dim(1) == b.bins, Shape,
            "bins_to_depth expects [N," << b.bins << ",H,W] probs, got "
                                        << shape_str(probs.shape()));
  const int n = probs.dim(0), c = probs.dim(1);
  const int h = probs.dim(2), w = probs.dim(3);
  const float* p = probs.data();
  const size_t hw = static_cast<size_t>(h) * w;
  std::vector<float> out(static_cast<size_t>(n) * hw);
  for (int i = 0; i < n; ++i)
    for (size_t s = 0; s < hw; ++s) {
      double sum = 0.0, acc = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        const float pv = p[(static_cast<size_t>(i) * c + ch) * hw + s];
        sum += pv;
        acc += static_cast<double>(pv) * b.centers[static_cast<size_t>(ch)];
      }
      SKD_CHECK(std::fabs(sum - 1.0) < 1e-3, Domain,
                "bins_to_depth: probabilities sum to " << sum
                                                       << ", expected 1");
      out[static_cast<size_t>(i) * hw + s] = static_cast<float>(acc);
    }
  return Tensor::from({n, 1, h, w}, std::move(out));
}

// ---------------------------------------------------------------------------
// iteration and batching

/// Epoch-shuffled index stream: each epoch is a fresh seeded permutation and
/// every sample appears exactly once per epoch.
class BatchSampler {
 public:
  BatchSampler(int n, int batch_size, Rng rng)
      : n_(n), batch_(batch_size), rng_(rng) {
    SKD_CHECK(n_ > 0 && batch_ > 0, Config,
              "BatchSampler needs positive sizes");
    reshuffle();
  }

  std::vector<int> next() {
    std::vector<int> idx;
    idx.reserve(static_cast<size_t>(batch_));
    for (int k = 0; k < batch_; ++k) {
      if (pos_ == perm_.size()) reshuffle();
      idx.push_back(perm_[pos_++]);
    }
    return idx;
  }

 private:
  void reshuffle() {
    perm_ = rng_.permutation(n_);
    pos_ = 0;
  }

  int n_, batch_;
  Rng rng_;
  std::vector<int> perm_;
  size_t pos_ = 0;
};

inline Tensor batch_images(const Dataset& ds, const std::vector<int>& idx) {
  SKD_CHECK(!idx.empty(), Config, "batch_images: empty index list");
  const int b = static_cast<int>(idx.size());
  Tensor out = Tensor::zeros({b, 3, ds.h, ds.w});
  const size_t stride = static_cast<size_t>(3) * ds.h * ds.w;
  for (int i = 0; i < b; ++i) {
    const int j = idx[static_cast<size_t>(i)];
    SKD_CHECK(j >= 0 && j < ds.size(), Config,
              "batch_images: index " << j << " out of range");
    std::copy_n(ds.samples[static_cast<size_t>(j)].image.data(), stride,
                out.data() + static_cast<size_t>(i) * stride);
  }
  return out;
}

/// Flattened class labels for a batch; unlabeled samples contribute zeros
/// and are reported through `labeled_mask`.
inline std::shared_ptr<const std::vector<int>> batch_class_labels(
    const Dataset& ds, const std::vector<int>& idx,
    std::vector<float>* labeled_mask = nullptr) {
  SKD_CHECK(ds.task == Task::Segmentation, Config,
            "batch_class_labels on a non-segmentation dataset");
  const size_t hw = static_cast<size_t>(ds.h) * ds.w;
  auto out = std::make_shared<std::vector<int>>(idx.size() * hw, 0);
  if (labeled_mask) labeled_mask->assign(idx.size(), 0.0f);
  for (size_t i = 0; i < idx.size(); ++i) {
    const Sample& s = ds.samples[static_cast<size_t>(idx[i])];
    if (!s.labeled) continue;
    std::copy_n(s.classes.begin(), hw, out->begin() + i * hw);
    if (labeled_mask) (*labeled_mask)[i] = 1.0f;
  }
  return out;
}

inline std::vector<float> batch_depths(const Dataset& ds,
                                       const std::vector<int>& idx,
                                       std::vector<float>* labeled_mask =
                                           nullptr) {
  SKD_CHECK(ds.task == Task::Depth, Config,
            "batch_depths on a non-depth dataset");
  const size_t hw = static_cast<size_t>(ds.h) * ds.w;
  std::vector<float> out(idx.size() * hw, tdetail::kDepthMin);
  if (labeled_mask) labeled_mask->assign(idx.size(), 0.0f);
  for (size_t i = 0; i < idx.size(); ++i) {
    const Sample& s = ds.samples[static_cast<size_t>(idx[i])];
    if (!s.labeled) continue;
    std::copy_n(s.depth.begin(), hw, out.begin() + i * hw);
    if (labeled_mask) (*labeled_mask)[i] = 1.0f;
  }
  return out;
}

// ---------------------------------------------------------------------------
// dataset persistence

inline void save_dataset(const Dataset& ds, const std::string& dir) {
  io::ensure_dir(dir);
  const int n = ds.size();
  SKD_CHECK(n > 0, Config, "save_dataset: empty dataset");
  Tensor images = Tensor::zeros({n, 3, ds.h, ds.w});
  Tensor targets = Tensor::zeros({n, ds.h, ds.w});
  const size_t istride = static_cast<size_t>(3) * ds.h * ds.w;
  const size_t tstride = static_cast<size_t>(ds.h) * ds.w;
  std::string flags;
  for (int i = 0; i < n; ++i) {
    const Sample& s = ds.samples[static_cast<size_t>(i)];
    std::copy_n(s.image.data(), istride,
                images.data() + static_cast<size_t>(i) * istride);
    float* t = targets.data() + static_cast<size_t>(i) * tstride;
    if (ds.task == Task::Segmentation) {
      for (size_t k = 0; k < tstride; ++k)
        t[k] = static_cast<float>(s.classes[k]);
    } else {
      std::copy_n(s.depth.begin(), tstride, t);
    }
    flags += s.labeled ? '1' : '0';
  }
  io::write_tensor(dir + "/images.stkd", images);
  io::write_tensor(dir + "/targets.stkd", targets);
  std::ostringstream m;
  m << "structkd-dataset 1\n"
    << "task " << task_name(ds.task) << "\n"
    << "classes " << ds.classes << "\n"
    << "size " << n << " " << ds.h << " " << ds.w << "\n"
    << "labeled " << flags << "\n"
    << "images images.stkd " << io::tensor_hash(images) << "\n"
    << "targets targets.stkd " << io::tensor_hash(targets) << "\n";
  io::write_text(dir + "/dataset.txt", m.str());
}

inline Dataset load_dataset(const std::string& dir) {
  const auto lines = io::split_lines(io::read_text(dir + "/dataset.txt"));
  SKD_CHECK(!lines.empty() && lines[0] == "structkd-dataset 1", Io,
            "not a dataset manifest: " << dir << "/dataset.txt");
  Dataset ds;
  int n = 0;
  std::string flags;
  for (size_t i = 1; i < lines.size(); ++i) {
    const auto f = io::split_ws(lines[i]);
    if (f.empty()) continue;
    if (f[0] == "task") {
      SKD_CHECK(f.size() == 2, Io, "bad task line in " << dir);
      ds.task = f[1] == "depth" ? Task::Depth : Task::Segmentation;
    } else if (f[0] == "classes" && f.size() == 2) {
      ds.classes = std::stoi(f[1]);
    } else if (f[0] == "size" && f.size() == 4) {
      n = std::stoi(f[1]);
      ds.h = std::stoi(f[2]);
      ds.w = std::stoi(f[3]);
    } else if (f[0] == "labeled" && f.size() == 2) {
      flags = f[1];
    }
  }
  SKD_CHECK(n > 0 && ds.h > 0 && ds.w > 0, Io,
            "dataset manifest missing size: " << dir);
  SKD_CHECK(static_cast<int>(flags.size()) == n, Io,
            "dataset manifest labeled flags do not match size");
  Tensor images = io::read_tensor(dir + "/images.stkd");
  Tensor targets = io::read_tensor(dir + "/targets.stkd");
  SKD_CHECK(images.shape() == Shape({n, 3, ds.h, ds.w}), Io,
            "dataset images shape mismatch in " << dir);
  SKD_CHECK(targets.shape() == Shape({n, ds.h, ds.w}), Io,
            "dataset targets shape mismatch in " << dir);
  const size_t istride = static_cast<size_t>(3) * ds.h * ds.w;
  const size_t tstride = static_cast<size_t>(ds.h) * ds.w;
  ds.samples.resize(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Sample& s = ds.samples[static_cast<size_t>(i)];
    s.image = Tensor::zeros({3, ds.h, ds.w});
    std::copy_n(images.data() + static_cast<size_t>(i) * istride, istride,
                s.image.data());
    const float* t = targets.data() + static_cast<size_t>(i) * tstride;
    if (ds.task == Task::Segmentation) {
      s.classes.resize(tstride);
      for (size_t k = 0; k < tstride; ++k) {
        const int cls = static_cast<int>(std::lround(t[k]));
        SKD_CHECK(cls >= 0 && cls < ds.classes, Io,
                  "dataset class index " << cls << " out of range in "
                                         << dir);
        s.classes[k] = cls;
      }
    } else {
      s.depth.assign(t, t + tstride);
    }
    s.labeled = flags[static_cast<size_t>(i)] == '1';
  }
  return ds;
}

// ---------------------------------------------------------------------------
// teacher output cache

/// Frozen-teacher outputs for every sample, stored coarse (pre-upsample).
struct TeacherCache {
  Tensor logits;    // [N,C',h',w']
  Tensor features;  // [N,C_f,h',w']
  std::uint64_t teacher_hash = 0;
};

inline TeacherCache build_teacher_cache(nets::Network& teacher,
                                        const Dataset& ds,
                                        ops::ConvImpl impl,
                                        int batch_size = 8) {
  SKD_CHECK(teacher.frozen, Config,
            "build_teacher_cache requires a frozen teacher");
  SKD_CHECK(ds.size() > 0, Config, "build_teacher_cache: empty dataset");
  NoGradGuard off;
  TeacherCache cache;
  cache.teacher_hash = teacher.params_hash();
  for (int start = 0; start < ds.size(); start += batch_size) {
    std::vector<int> idx;
    for (int i = start; i < std::min(ds.size(), start + batch_size); ++i)
      idx.push_back(i);
    Tensor images = batch_images(ds, idx);
    nets::DenseOutput out =
        nets::forward_dense(teacher, images, ops::Mode::Eval, impl);
    if (start == 0) {
      Shape ls = out.logits.shape(), fs = out.features.shape();
      ls[0] = ds.size();
      fs[0] = ds.size();
      cache.logits = Tensor::zeros(ls);
      cache.features = Tensor::zeros(fs);
    }
    const size_t lst = static_cast<size_t>(numel(out.logits.shape())) /
                       idx.size();
    const size_t fst = static_cast<size_t>(numel(out.features.shape())) /
                       idx.size();
    std::copy_n(out.logits.data(), lst * idx.size(),
                cache.logits.data() + static_cast<size_t>(start) * lst);
    std::copy_n(out.features.data(), fst * idx.size(),
                cache.features.data() + static_cast<size_t>(start) * fst);
  }
  return cache;
}

/// Batch slices of cached teacher outputs, as constants.
inline Tensor cache_slice(const Tensor& all, const std::vector<int>& idx) {
  Shape sh = all.shape();
  const size_t stride = static_cast<size_t>(numel(sh)) / sh[0];
  sh[0] = static_cast<int>(idx.size());
  Tensor out = Tensor::zeros(sh);
  for (size_t i = 0; i < idx.size(); ++i) {
    SKD_CHECK(idx[i] >= 0 && idx[i] < all.dim(0), Config,
              "cache_slice: index " << idx[i] << " out of range");
    std::copy_n(all.data() + static_cast<size_t>(idx[i]) * stride, stride,
                out.data() + i * stride);
  }
  return out;
}

/// Writes per-sample logits and features as STKD files plus a manifest of
/// ids, paths, and payload hashes.
inline void save_teacher_cache(const TeacherCache& cache,
                               const std::string& dir) {
  io::ensure_dir(dir);
  const int n = cache.logits.dim(0);
  SKD_CHECK(cache.features.dim(0) == n, Shape,
            "teacher cache logits/features disagree on sample count");
  std::ostringstream m;
  m << "structkd-teacher-cache 1\n"
    << "teacher_hash " << cache.teacher_hash << "\n"
    << "count " << n << "\n";
  char name[64];
  for (int i = 0; i < n; ++i) {
    Tensor l = cache_slice(cache.logits, {i});
    Tensor f = cache_slice(cache.features, {i});
    std::snprintf(name, sizeof(name), "logits_%05d.stkd", i);
    std::string lf = name;
    std::snprintf(name, sizeof(name), "features_%05d.stkd", i);
    std::string ff = name;
    io::write_tensor(dir + "/" + lf, l);
    io::write_tensor(dir + "/" + ff, f);
    m << "sample " << i << " " << lf << " " << io::tensor_hash(l) << " "
      << ff << " " << io::tensor_hash(f) << "\n";
  }
  io::write_text(dir + "/cache.txt", m.str());
}

inline TeacherCache load_teacher_cache(const std::string& dir) {
  const auto lines = io::split_lines(io::read_text(dir + "/cache.txt"));
  SKD_CHECK(!lines.empty() && lines[0] == "structkd-teacher-cache 1", Io,
            "not a teacher cache manifest: " << dir << "/cache.txt");
  TeacherCache cache;
  int n = 0;
  std::vector<std::array<std::string, 4>> entries;
  for (size_t i = 1; i < lines.size(); ++i) {
    const auto f = io::split_ws(lines[i]);
    if (f.empty()) continue;
    if (f[0] == "teacher_hash" && f.size() == 2) {
      cache.teacher_hash = std::stoull(f[1]);
    } else if (f[0] == "count" && f.size() == 2) {
      n = std::stoi(f[1]);
    } else if (f[0] == "sample") {
      SKD_CHECK(f.size() == 6, Io, "bad cache sample line: " << lines[i]);
      entries.push_back({f[2], f[3], f[4], f[5]});
    }
  }
  SKD_CHECK(n > 0 && static_cast<int>(entries.size()) == n, Io,
            "teacher cache manifest count mismatch in " << dir);
  for (int i = 0; i < n; ++i) {
    const auto& e = entries[static_cast<size_t>(i)];
    Tensor l = io::read_tensor(dir + "/" + e[0]);
    Tensor f = io::read_tensor(dir + "/" + e[2]);
    SKD_CHECK(io::tensor_hash(l) == std::stoull(e[1]), Io,
              "teacher cache hash mismatch for " << e[0]);
    SKD_CHECK(io::tensor_hash(f) == std::stoull(e[3]), Io,
              "teacher cache hash mismatch for " << e[2]);
    if (i == 0) {
      Shape ls = l.shape(), fs = f.shape();
      ls[0] = n;
      fs[0] = n;
      cache.logits = Tensor::zeros(ls);
      cache.features = Tensor::zeros(fs);
    }
    std::copy_n(l.data(), l.size(),
                cache.logits.data() + static_cast<size_t>(i) * l.size());
    std::copy_n(f.data(), f.size(),
                cache.features.data() + static_cast<size_t>(i) * f.size());
  }
  return cache;
}

inline TeacherCache cache_teacher_outputs(nets::Network& teacher,
                                          const Dataset& ds,
                                          const std::string& dir,
                                          ops::ConvImpl impl,
                                          int batch_size = 8) {
  TeacherCache cache = build_teacher_cache(teacher, ds, impl, batch_size);
  save_teacher_cache(cache, dir);
  return cache;
}

}  // namespace tasks
}  // namespace structkd
