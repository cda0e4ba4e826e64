#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <sstream>
#include <string>
#include <vector>

#include "structkd/common.hpp"
#include "structkd/distill.hpp"
#include "structkd/ops.hpp"
#include "structkd/tasks.hpp"

namespace structkd {
namespace config {

struct Toggles {
  bool pi = false;     ///< per-position class-distribution matching
  bool pa = false;     ///< affinity-graph similarity matching
  bool ho = false;     ///< adversarial whole-map matching
  bool mimic = false;  ///< feature regression baseline
  bool at = false;     ///< attention-map transfer baseline
  bool local = false;  ///< 3x3-neighborhood pair-wise baseline

  bool any_distill() const { return pi || pa || ho || mimic || at || local; }
};

struct TrainConfig {
  tasks::Task task = tasks::Task::Segmentation;
  int iterations = 3000;
  int batch_size = 8;
  double lr0 = 0.01;
  double momentum = 0.9;
  double weight_decay = 0.0005;
  double lr_power = 0.9;
  Toggles toggles;
  int alpha = 0;  ///< connections per graph node, 0 = fully connected
  int beta = 4;   ///< pixels aggregated per graph node, perfect square
  distill::LossWeights weights;
  int d_steps_per_g_step = 1;
  /// The penalty term differentiates through the critic's own gradient, so
  /// first-moment accumulation feeds update noise back into itself; the
  /// critic therefore steps without momentum by default.
  double d_momentum = 0.0;
  double d_lr_scale = 1.0;
  std::uint64_t seed = 1;
  int image_h = 64;
  int image_w = 64;
  int classes = 6;
  int train_count = 512;
  int val_count = 128;
  int unlabeled_count = 0;
  int depth_bins = 32;
  double temperature = 1.0;
  bool kl_reverse = false;
  ops::ConvImpl conv_impl = ops::ConvImpl::Im2col;
  int d_attention = 2;
  int d_blocks = 4;
  int checkpoint_every = 500;
  std::string teacher_dir;
  std::string out_dir;
  std::string cache_dir;
  std::string data_dir;
};

namespace cdetail {

inline bool parse_bool(const std::string& v, const std::string& key) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw Error(ErrorKind::Config,
              "config key '" + key + "': expected boolean, got '" + v + "'");
}

inline int parse_int(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    const int r = std::stoi(v, &pos);
    SKD_CHECK(pos == v.size(), Config, "trailing characters");
    return r;
  } catch (const Error&) {
    throw;
  } catch (...) {
    throw Error(ErrorKind::Config,
                "config key '" + key + "': expected integer, got '" + v +
                    "'");
  }
}

inline std::uint64_t parse_u64(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    const std::uint64_t r = std::stoull(v, &pos);
    SKD_CHECK(pos == v.size(), Config, "trailing characters");
    return r;
  } catch (const Error&) {
    throw;
  } catch (...) {
    throw Error(ErrorKind::Config,
                "config key '" + key + "': expected integer, got '" + v +
                    "'");
  }
}

inline double parse_double(const std::string& v, const std::string& key) {
  try {
    size_t pos = 0;
    const double r = std::stod(v, &pos);
    SKD_CHECK(pos == v.size(), Config, "trailing characters");
    return r;
  } catch (const Error&) {
    throw;
  } catch (...) {
    throw Error(ErrorKind::Config,
                "config key '" + key + "': expected number, got '" + v +
                    "'");
  }
}

struct Field {
  const char* key;
  std::function<void(TrainConfig&, const std::string&)> set;
  std::function<std::string(const TrainConfig&)> get;
};

inline const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    const auto num = [](double d) {
      std::ostringstream os;
      os << d;
      return os.str();
    };
    const auto add_int = [&v](const char* k, int TrainConfig::* m) {
      v.push_back({k,
                   [k, m](TrainConfig& c, const std::string& s) {
                     c.*m = parse_int(s, k);
                   },
                   [m](const TrainConfig& c) { return std::to_string(c.*m); }});
    };
    const auto add_dbl = [&v, num](const char* k, double TrainConfig::* m) {
      v.push_back({k,
                   [k, m](TrainConfig& c, const std::string& s) {
                     c.*m = parse_double(s, k);
                   },
                   [m, num](const TrainConfig& c) { return num(c.*m); }});
    };
    const auto add_tog = [&v](const char* k, bool Toggles::* m) {
      v.push_back({k,
                   [k, m](TrainConfig& c, const std::string& s) {
                     c.toggles.*m = parse_bool(s, k);
                   },
                   [m](const TrainConfig& c) {
                     return c.toggles.*m ? "true" : "false";
                   }});
    };
    const auto add_str = [&v](const char* k, std::string TrainConfig::* m) {
      v.push_back({k,
                   [m](TrainConfig& c, const std::string& s) { c.*m = s; },
                   [m](const TrainConfig& c) { return c.*m; }});
    };
    v.push_back({"task",
                 [](TrainConfig& c, const std::string& s) {
                   if (s == "segmentation") {
                     c.task = tasks::Task::Segmentation;
                   } else if (s == "depth") {
                     c.task = tasks::Task::Depth;
                   } else {
                     throw Error(ErrorKind::Config,
                                 "config key 'task': expected segmentation "
                                 "or depth, got '" + s + "'");
                   }
                 },
                 [](const TrainConfig& c) {
                   return std::string(tasks::task_name(c.task));
                 }});
    add_int("iterations", &TrainConfig::iterations);
    add_int("batch_size", &TrainConfig::batch_size);
    add_dbl("lr0", &TrainConfig::lr0);
    add_dbl("momentum", &TrainConfig::momentum);
    add_dbl("weight_decay", &TrainConfig::weight_decay);
    add_dbl("lr_power", &TrainConfig::lr_power);
    add_tog("pi", &Toggles::pi);
    add_tog("pa", &Toggles::pa);
    add_tog("ho", &Toggles::ho);
    add_tog("mimic", &Toggles::mimic);
    add_tog("at", &Toggles::at);
    add_tog("local", &Toggles::local);
    add_int("alpha", &TrainConfig::alpha);
    add_int("beta", &TrainConfig::beta);
    v.push_back({"lambda1",
                 [](TrainConfig& c, const std::string& s) {
                   c.weights.lambda1 =
                       static_cast<float>(parse_double(s, "lambda1"));
                 },
                 [num](const TrainConfig& c) {
                   return num(c.weights.lambda1);
                 }});
    v.push_back({"lambda2",
                 [](TrainConfig& c, const std::string& s) {
                   c.weights.lambda2 =
                       static_cast<float>(parse_double(s, "lambda2"));
                 },
                 [num](const TrainConfig& c) {
                   return num(c.weights.lambda2);
                 }});
    v.push_back({"gp_coeff",
                 [](TrainConfig& c, const std::string& s) {
                   c.weights.gp_coeff =
                       static_cast<float>(parse_double(s, "gp_coeff"));
                 },
                 [num](const TrainConfig& c) {
                   return num(c.weights.gp_coeff);
                 }});
    add_int("d_steps_per_g_step", &TrainConfig::d_steps_per_g_step);
    add_dbl("d_momentum", &TrainConfig::d_momentum);
    add_dbl("d_lr_scale", &TrainConfig::d_lr_scale);
    v.push_back({"seed",
                 [](TrainConfig& c, const std::string& s) {
                   c.seed = parse_u64(s, "seed");
                 },
                 [](const TrainConfig& c) { return std::to_string(c.seed); }});
    add_int("image_h", &TrainConfig::image_h);
    add_int("image_w", &TrainConfig::image_w);
    add_int("classes", &TrainConfig::classes);
    add_int("train_count", &TrainConfig::train_count);
    add_int("val_count", &TrainConfig::val_count);
    add_int("unlabeled_count", &TrainConfig::unlabeled_count);
    add_int("depth_bins", &TrainConfig::depth_bins);
    add_dbl("temperature", &TrainConfig::temperature);
    v.push_back({"kl_reverse",
                 [](TrainConfig& c, const std::string& s) {
                   c.kl_reverse = parse_bool(s, "kl_reverse");
                 },
                 [](const TrainConfig& c) {
                   return std::string(c.kl_reverse ? "true" : "false");
                 }});
    v.push_back({"conv_impl",
                 [](TrainConfig& c, const std::string& s) {
                   if (s == "im2col") {
                     c.conv_impl = ops::ConvImpl::Im2col;
                   } else if (s == "direct") {
                     c.conv_impl = ops::ConvImpl::Direct;
                   } else {
                     throw Error(ErrorKind::Config,
                                 "config key 'conv_impl': expected im2col "
                                 "or direct, got '" + s + "'");
                   }
                 },
                 [](const TrainConfig& c) {
                   return std::string(c.conv_impl == ops::ConvImpl::Im2col
                                          ? "im2col"
                                          : "direct");
                 }});
    add_int("d_attention", &TrainConfig::d_attention);
    add_int("d_blocks", &TrainConfig::d_blocks);
    add_int("checkpoint_every", &TrainConfig::checkpoint_every);
    add_str("teacher_dir", &TrainConfig::teacher_dir);
    add_str("out_dir", &TrainConfig::out_dir);
    add_str("cache_dir", &TrainConfig::cache_dir);
    add_str("data_dir", &TrainConfig::data_dir);
    return v;
  }();
  return f;
}

inline const Field& find_field(const std::string& key) {
  for (const auto& f : fields())
    if (key == f.key) return f;
  throw Error(ErrorKind::Config, "unknown config key '" + key + "'");
}

inline std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

}  // namespace cdetail

/// Applies one `key=value` assignment (leading `--` permitted).
inline void apply_override(TrainConfig& cfg, const std::string& assignment) {
  std::string s = assignment;
  if (s.rfind("--", 0) == 0) s = s.substr(2);
  const size_t eq = s.find('=');
  SKD_CHECK(eq != std::string::npos, Config,
            "expected key=value, got '" << assignment << "'");
  const std::string key = cdetail::trim(s.substr(0, eq));
  const std::string val = cdetail::trim(s.substr(eq + 1));
  cdetail::find_field(key).set(cfg, val);
}

/// Parses `key = value` lines; `#` starts a comment, blank lines skipped.
inline TrainConfig parse_config_text(const std::string& text,
                                     TrainConfig base = TrainConfig{}) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = cdetail::trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    SKD_CHECK(eq != std::string::npos, Config,
              "config line " << lineno << ": expected key = value");
    const std::string key = cdetail::trim(line.substr(0, eq));
    const std::string val = cdetail::trim(line.substr(eq + 1));
    cdetail::find_field(key).set(base, val);
  }
  return base;
}

inline std::string config_to_text(const TrainConfig& cfg) {
  std::ostringstream os;
  for (const auto& f : cdetail::fields())
    os << f.key << " = " << f.get(cfg) << "\n";
  return os.str();
}

inline void validate(const TrainConfig& c) {
  SKD_CHECK(c.iterations > 0, Config, "iterations must be positive");
  SKD_CHECK(c.batch_size > 0, Config, "batch_size must be positive");
  SKD_CHECK(c.lr0 > 0, Config, "lr0 must be positive");
  SKD_CHECK(c.momentum >= 0 && c.momentum < 1, Config,
            "momentum must lie in [0,1)");
  SKD_CHECK(c.weight_decay >= 0, Config, "weight_decay must be >= 0");
  SKD_CHECK(c.lr_power > 0, Config, "lr_power must be positive");
  SKD_CHECK(c.alpha >= 0, Config, "alpha must be >= 0 (0 = full)");
  const int side = static_cast<int>(std::lround(std::sqrt(
      static_cast<double>(c.beta))));
  SKD_CHECK(c.beta >= 1 && side * side == c.beta, Config,
            "beta must be a perfect square, got " << c.beta);
  SKD_CHECK(c.weights.lambda1 >= 0 && c.weights.lambda2 >= 0 &&
                c.weights.gp_coeff >= 0,
            Config, "loss weights must be >= 0");
  SKD_CHECK(c.d_steps_per_g_step >= 1, Config,
            "d_steps_per_g_step must be >= 1");
  SKD_CHECK(c.d_momentum >= 0 && c.d_momentum < 1, Config,
            "d_momentum must lie in [0,1)");
  SKD_CHECK(c.d_lr_scale > 0, Config, "d_lr_scale must be positive");
  SKD_CHECK(c.image_h >= 16 && c.image_w >= 16, Config,
            "image size must be at least 16x16");
  SKD_CHECK(c.classes >= 2, Config, "classes must be >= 2");
  SKD_CHECK(c.train_count > 0 && c.val_count > 0, Config,
            "train_count and val_count must be positive");
  SKD_CHECK(c.unlabeled_count >= 0, Config, "unlabeled_count must be >= 0");
  SKD_CHECK(c.depth_bins >= 2, Config, "depth_bins must be >= 2");
  SKD_CHECK(c.temperature > 0, Config, "temperature must be positive");
  SKD_CHECK(c.d_attention >= 0 && c.d_attention <= 2, Config,
            "d_attention must be 0, 1, or 2");
  SKD_CHECK(c.d_blocks >= 1, Config, "d_blocks must be >= 1");
  SKD_CHECK(c.checkpoint_every > 0, Config,
            "checkpoint_every must be positive");
}

}  // namespace config
}  // namespace structkd
