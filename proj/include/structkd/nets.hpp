#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "structkd/common.hpp"
#include "structkd/io.hpp"
#include "structkd/ops.hpp"
#include "structkd/rng.hpp"
#include "structkd/tensor.hpp"

namespace structkd {
namespace nets {

enum class Role { Teacher, Student, Discriminator };

inline const char* role_name(Role r) {
  switch (r) {
    case Role::Teacher: return "teacher";
    case Role::Student: return "student";
    default: return "discriminator";
  }
}

struct LayerSpec {
  enum class Kind { Conv, BatchNorm, Relu, SelfAttention, AvgPool };
  Kind kind;
  int out_channels = 0;  ///< Conv only
  int kernel = 3;        ///< Conv only, odd; padding is kernel/2
  int stride = 1;        ///< Conv only
  int pool_k = 2;        ///< AvgPool only

  static LayerSpec conv(int out_channels, int kernel, int stride) {
    LayerSpec l;
    l.kind = Kind::Conv;
    l.out_channels = out_channels;
    l.kernel = kernel;
    l.stride = stride;
    return l;
  }
  static LayerSpec bn() { return {Kind::BatchNorm}; }
  static LayerSpec relu() { return {Kind::Relu}; }
  static LayerSpec attention() { return {Kind::SelfAttention}; }
  static LayerSpec pool(int k) {
    LayerSpec l;
    l.kind = Kind::AvgPool;
    l.pool_k = k;
    return l;
  }
};

enum class Head { SegClassifier, ScorePool };

struct NetworkSpec {
  Role role = Role::Student;
  int in_channels = 3;
  std::vector<LayerSpec> blocks;
  Head head = Head::SegClassifier;
  int classes = 0;  ///< SegClassifier head width

  int total_stride() const {
    int s = 1;
    for (const LayerSpec& l : blocks) {
      if (l.kind == LayerSpec::Kind::Conv) s *= l.stride;
      if (l.kind == LayerSpec::Kind::AvgPool) s *= l.pool_k;
    }
    return s;
  }
};

/// Checks structural invariants and throws a Config error naming the first
/// violated one. Returns the channel count entering the head.
inline int validate_spec(const NetworkSpec& spec) {
  SKD_CHECK(!spec.blocks.empty(), Config, "network spec has no blocks");
  int c = spec.in_channels;
  SKD_CHECK(c >= 1, Config, "network spec: in_channels must be positive");
  int convs_total = 0;
  for (const LayerSpec& l : spec.blocks)
    if (l.kind == LayerSpec::Kind::Conv) ++convs_total;
  int convs_seen = 0;
  int attn_count = 0;
  for (const LayerSpec& l : spec.blocks) {
    switch (l.kind) {
      case LayerSpec::Kind::Conv:
        SKD_CHECK(l.out_channels >= 1, Config,
                  "conv block needs positive out_channels");
        SKD_CHECK(l.kernel >= 1 && l.kernel % 2 == 1, Config,
                  "conv kernel must be odd, got " << l.kernel);
        SKD_CHECK(l.stride >= 1, Config, "conv stride must be positive");
        c = l.out_channels;
        ++convs_seen;
        break;
      case LayerSpec::Kind::SelfAttention:
        SKD_CHECK(c >= 8, Config,
                  "self-attention needs at least 8 channels, got " << c);
        ++attn_count;
        if (spec.role == Role::Discriminator) {
          SKD_CHECK(convs_seen >= convs_total - 2 && convs_seen < convs_total,
                    Config,
                    "discriminator self-attention must sit between the final "
                    "three conv blocks");
        }
        break;
      case LayerSpec::Kind::AvgPool:
        SKD_CHECK(l.pool_k >= 1, Config, "pool window must be positive");
        break;
      default:
        break;
    }
  }
  if (spec.role == Role::Discriminator) {
    SKD_CHECK(attn_count <= 2, Config,
              "discriminator allows at most 2 self-attention blocks, got "
                  << attn_count);
    SKD_CHECK(spec.head == Head::ScorePool, Config,
              "discriminator requires the score-pool head");
  } else {
    SKD_CHECK(spec.head == Head::SegClassifier && spec.classes >= 2, Config,
              role_name(spec.role)
                  << " requires a classifier head with >= 2 classes");
  }
  return c;
}

// ---------------------------------------------------------------------------
// default specifications

inline NetworkSpec teacher_spec(int classes, int in_channels = 3) {
  NetworkSpec s;
  s.role = Role::Teacher;
  s.in_channels = in_channels;
  s.classes = classes;
  const int widths[6] = {32, 64, 64, 64, 64, 64};
  for (int i = 0; i < 6; ++i) {
    s.blocks.push_back(LayerSpec::conv(widths[i], 3, i < 2 ? 2 : 1));
    s.blocks.push_back(LayerSpec::bn());
    s.blocks.push_back(LayerSpec::relu());
  }
  s.head = Head::SegClassifier;
  return s;
}

inline NetworkSpec student_spec(int classes, int in_channels = 3) {
  NetworkSpec s;
  s.role = Role::Student;
  s.in_channels = in_channels;
  s.classes = classes;
  const int widths[4] = {8, 16, 16, 16};
  for (int i = 0; i < 4; ++i) {
    s.blocks.push_back(LayerSpec::conv(widths[i], 3, i < 2 ? 2 : 1));
    s.blocks.push_back(LayerSpec::bn());
    s.blocks.push_back(LayerSpec::relu());
  }
  s.head = Head::SegClassifier;
  return s;
}

/// AnLm discriminator: m stride-2 conv blocks with BN+ReLU except the last,
/// n <= 2 self-attention modules filling the two slots between the final
/// three conv blocks (deepest slot first), input batch normalization, and a
/// mean-pooled scalar score.
inline NetworkSpec discriminator_spec(int in_channels, int n_attention = 2,
                                      int m_blocks = 4) {
  SKD_CHECK(m_blocks >= 3, Config,
            "discriminator needs at least 3 conv blocks, got " << m_blocks);
  SKD_CHECK(n_attention >= 0 && n_attention <= 2, Config,
            "discriminator supports 0..2 self-attention blocks, got "
                << n_attention);
  NetworkSpec s;
  s.role = Role::Discriminator;
  s.in_channels = in_channels;
  s.head = Head::ScorePool;
  s.blocks.push_back(LayerSpec::bn());
  int width = 64;
  for (int i = 0; i < m_blocks; ++i) {
    // Attention slots precede the last and second-to-last conv blocks;
    // a single module takes the deeper slot.
    const int slot = m_blocks - i;  // 1 before the last conv, 2 before that
    if ((slot == 1 && n_attention >= 1) || (slot == 2 && n_attention == 2))
      s.blocks.push_back(LayerSpec::attention());
    s.blocks.push_back(LayerSpec::conv(width, 3, 2));
    if (i + 1 < m_blocks) {
      s.blocks.push_back(LayerSpec::bn());
      s.blocks.push_back(LayerSpec::relu());
    }
    if (width < 256) width *= 2;
  }
  return s;
}

// ---------------------------------------------------------------------------
// network container

class Network {
 public:
  NetworkSpec spec;
  bool frozen = false;
  /// Trainable tensors in stable declaration order.
  std::vector<std::pair<std::string, Tensor>> params;
  /// Non-trainable state (BN running statistics), same naming scheme.
  std::vector<std::pair<std::string, Tensor>> buffers;

  Tensor& param(const std::string& name) {
    for (auto& [n, t] : params)
      if (n == name) return t;
    SKD_CHECK(false, Config, "unknown parameter " << name);
    return params.front().second;
  }
  const Tensor& param(const std::string& name) const {
    return const_cast<Network*>(this)->param(name);
  }
  Tensor& buffer(const std::string& name) {
    for (auto& [n, t] : buffers)
      if (n == name) return t;
    SKD_CHECK(false, Config, "unknown buffer " << name);
    return buffers.front().second;
  }

  int64_t param_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params) n += t.size();
    return n;
  }

  void zero_grads() {
    for (auto& [name, t] : params) t.zero_grad();
  }

  void set_frozen(bool f) {
    frozen = f;
    for (auto& [name, t] : params) t.set_requires_grad(!f);
  }

  /// FNV-1a over all parameter payloads in declaration order; cheap enough
  /// to assert teacher immutability every iteration.
  uint64_t params_hash() const {
    uint64_t h = 1469598103934665603ull;
    for (const auto& [name, t] : params)
      h = fnv1a(t.data(), static_cast<size_t>(t.size()) * sizeof(float), h);
    return h;
  }
};

namespace netdetail {

inline Tensor init_uniform(Shape shape, double bound, Rng& rng) {
  std::vector<float> v(static_cast<size_t>(numel(shape)));
  for (float& x : v) x = static_cast<float>(rng.uniform(-bound, bound));
  return Tensor::from(std::move(shape), std::move(v), true);
}

}  // namespace netdetail

/// Deterministically initializes all parameters from (spec, seed): conv and
/// projection weights Kaiming-uniform over fan-in, biases zero, BN affine
/// (1, 0), attention gates zero. Each tensor draws from an RNG stream named
/// after it, so layout changes elsewhere do not shift its values.
inline Network build_network(const NetworkSpec& spec, uint64_t seed) {
  const int head_in = validate_spec(spec);
  Network net;
  net.spec = spec;
  auto uniform_param = [&](const std::string& name, Shape shape, int fan_in) {
    Rng rng = Rng::stream(seed, "init:" + name);
    const double bound = std::sqrt(6.0 / fan_in);
    net.params.emplace_back(name,
                            netdetail::init_uniform(std::move(shape), bound, rng));
  };
  auto zeros_param = [&](const std::string& name, Shape shape) {
    net.params.emplace_back(name, Tensor::zeros(std::move(shape), true));
  };
  auto const_param = [&](const std::string& name, Shape shape, float v) {
    net.params.emplace_back(name, Tensor::full(std::move(shape), v, true));
  };

  int c = spec.in_channels;
  for (size_t i = 0; i < spec.blocks.size(); ++i) {
    const LayerSpec& l = spec.blocks[i];
    const std::string p = "b" + std::to_string(i);
    switch (l.kind) {
      case LayerSpec::Kind::Conv: {
        const int k = l.kernel;
        uniform_param(p + ".conv.w", {l.out_channels, c, k, k}, c * k * k);
        zeros_param(p + ".conv.b", {l.out_channels});
        c = l.out_channels;
        break;
      }
      case LayerSpec::Kind::BatchNorm: {
        const_param(p + ".bn.gamma", {c}, 1.0f);
        zeros_param(p + ".bn.beta", {c});
        net.buffers.emplace_back(p + ".bn.mean", Tensor::zeros({c}));
        net.buffers.emplace_back(p + ".bn.var", Tensor::full({c}, 1.0f));
        break;
      }
      case LayerSpec::Kind::SelfAttention: {
        const int c8 = c / 8;
        uniform_param(p + ".attn.f_w", {c8, c}, c);
        zeros_param(p + ".attn.f_b", {c8});
        uniform_param(p + ".attn.g_w", {c8, c}, c);
        zeros_param(p + ".attn.g_b", {c8});
        uniform_param(p + ".attn.h_w", {c, c}, c);
        zeros_param(p + ".attn.h_b", {c});
        zeros_param(p + ".attn.gamma", {1});
        break;
      }
      default:
        break;
    }
  }
  if (spec.head == Head::SegClassifier) {
    uniform_param("head.w", {spec.classes, head_in}, head_in);
    zeros_param("head.b", {spec.classes});
  }
  return net;
}

// ---------------------------------------------------------------------------
// forward passes

/// One projection of a 1x1 channel map applied per sample: y = W x + b over
/// flattened spatial positions.
inline Tensor project_channels(const Tensor& x, const Tensor& w,
                               const Tensor& b) {
  const int n = x.dim(0), h = x.dim(2), wd = x.dim(3);
  const int co = w.dim(0), p = h * wd;
  std::vector<Tensor> outs;
  outs.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Tensor xi = ops::reshape(ops::select0(x, i), {x.dim(1), p});
    Tensor y = ops::add(ops::matmul(w, xi), ops::expand_tail(b, {co, p}));
    outs.push_back(ops::reshape(y, {co, h, wd}));
  }
  return ops::stack0(outs);
}

/// SAGAN-style self-attention over all spatial positions: query/key
/// projections at C/8 channels, values at C, row softmax over positions,
/// gated residual with learnable scalar initialized to zero.
inline Tensor self_attention(const Tensor& x, const Tensor& f_w,
                             const Tensor& f_b, const Tensor& g_w,
                             const Tensor& g_b, const Tensor& h_w,
                             const Tensor& h_b, const Tensor& gamma) {
  SKD_CHECK(x.ndim() == 4, Shape,
            "self_attention expects [N,C,H,W], got " << shape_str(x.shape()));
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  SKD_CHECK(c >= 8, Config,
            "self_attention needs at least 8 channels, got " << c);
  const int p = h * w, c8 = c / 8;
  std::vector<Tensor> outs;
  outs.reserve(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    Tensor xi = ops::reshape(ops::select0(x, i), {c, p});
    Tensor q = ops::add(ops::matmul(f_w, xi), ops::expand_tail(f_b, {c8, p}));
    Tensor k = ops::add(ops::matmul(g_w, xi), ops::expand_tail(g_b, {c8, p}));
    Tensor v = ops::add(ops::matmul(h_w, xi), ops::expand_tail(h_b, {c, p}));
    Tensor attn = ops::softmax(ops::matmul(ops::transpose2d(q), k));  // [P,P]
    Tensor o = ops::matmul(v, ops::transpose2d(attn));                // [C,P]
    outs.push_back(ops::reshape(o, {c, h, w}));
  }
  return ops::add(ops::mul(ops::stack0(outs), gamma), x);
}

namespace netdetail {

/// Runs the block list. Shared by dense networks and the discriminator.
inline Tensor run_blocks(Network& net, const Tensor& input, ops::Mode mode,
                         ops::ConvImpl impl) {
  Tensor x = input;
  for (size_t i = 0; i < net.spec.blocks.size(); ++i) {
    const LayerSpec& l = net.spec.blocks[i];
    const std::string p = "b" + std::to_string(i);
    switch (l.kind) {
      case LayerSpec::Kind::Conv:
        x = ops::conv2d(x, net.param(p + ".conv.w"), net.param(p + ".conv.b"),
                        l.stride, l.kernel / 2, impl);
        break;
      case LayerSpec::Kind::BatchNorm:
        x = ops::batch_norm(x, net.param(p + ".bn.gamma"),
                            net.param(p + ".bn.beta"),
                            net.buffer(p + ".bn.mean"),
                            net.buffer(p + ".bn.var"), 1e-5f, 0.1f, mode);
        break;
      case LayerSpec::Kind::Relu:
        x = ops::relu(x);
        break;
      case LayerSpec::Kind::SelfAttention:
        x = self_attention(x, net.param(p + ".attn.f_w"),
                           net.param(p + ".attn.f_b"),
                           net.param(p + ".attn.g_w"),
                           net.param(p + ".attn.g_b"),
                           net.param(p + ".attn.h_w"),
                           net.param(p + ".attn.h_b"),
                           net.param(p + ".attn.gamma"));
        break;
      case LayerSpec::Kind::AvgPool:
        x = ops::avg_pool(x, l.pool_k);
        break;
    }
  }
  return x;
}

}  // namespace netdetail

struct DenseOutput {
  Tensor features;          ///< pre-classifier map [N,F,H',W']
  Tensor logits;            ///< class scores [N,C,H',W']
  Tensor upsampled_logits;  ///< bilinear resize to the input size
};

/// Full dense forward: backbone features, classifier logits, and logits
/// upsampled to the input resolution. Frozen networks run without gradient
/// tracking.
inline DenseOutput forward_dense(Network& net, const Tensor& image,
                                 ops::Mode mode,
                                 ops::ConvImpl impl = ops::ConvImpl::Im2col) {
  SKD_CHECK(net.spec.role != Role::Discriminator, Config,
            "forward_dense expects a teacher or student network");
  SKD_CHECK(image.ndim() == 4 && image.dim(1) == net.spec.in_channels, Shape,
            "forward_dense expects [N," << net.spec.in_channels
                                        << ",H,W], got "
                                        << shape_str(image.shape()));
  const int stride = net.spec.total_stride();
  SKD_CHECK(image.dim(2) % stride == 0 && image.dim(3) % stride == 0, Shape,
            "input " << image.dim(2) << "x" << image.dim(3)
                     << " is not divisible by total stride " << stride);
  std::unique_ptr<NoGradGuard> off;
  if (net.frozen) off = std::make_unique<NoGradGuard>();
  DenseOutput out;
  out.features = netdetail::run_blocks(net, image, mode, impl);
  out.logits = project_channels(out.features, net.param("head.w"),
                                net.param("head.b"));
  out.upsampled_logits =
      ops::upsample_bilinear(out.logits, image.dim(2), image.dim(3));
  return out;
}

/// Conditions the score on the image by channel concatenation, normalizes
/// the joint input, runs the conv/attention stack, and mean-pools the final
/// embedding to one score per sample.
inline Tensor forward_discriminator(Network& net, const Tensor& q,
                                    const Tensor& image, ops::Mode mode,
                                    ops::ConvImpl impl = ops::ConvImpl::Im2col) {
  SKD_CHECK(net.spec.role == Role::Discriminator, Config,
            "forward_discriminator expects a discriminator network");
  SKD_CHECK(q.ndim() == 4 && image.ndim() == 4, Shape,
            "forward_discriminator expects [N,C,H,W] inputs");
  SKD_CHECK(q.dim(0) == image.dim(0) && q.dim(2) == image.dim(2) &&
                q.dim(3) == image.dim(3),
            Shape, "map " << shape_str(q.shape()) << " and image "
                          << shape_str(image.shape())
                          << " are not spatially aligned");
  SKD_CHECK(q.dim(1) + image.dim(1) == net.spec.in_channels, Shape,
            "discriminator expects " << net.spec.in_channels
                                     << " joint channels, got "
                                     << q.dim(1) + image.dim(1));
  Tensor x = netdetail::run_blocks(net, ops::concat_c(q, image), mode, impl);
  const double inv = 1.0 / (static_cast<double>(x.dim(1)) * x.dim(2) * x.dim(3));
  return ops::scale(ops::sum_tail(x, 1), inv);
}

// ---------------------------------------------------------------------------
// checkpoints

namespace netdetail {

inline std::string spec_to_text(const NetworkSpec& s) {
  std::ostringstream ss;
  ss << "role " << role_name(s.role) << "\n";
  ss << "in_channels " << s.in_channels << "\n";
  for (const LayerSpec& l : s.blocks) {
    switch (l.kind) {
      case LayerSpec::Kind::Conv:
        ss << "block conv " << l.out_channels << " " << l.kernel << " "
           << l.stride << "\n";
        break;
      case LayerSpec::Kind::BatchNorm: ss << "block bn\n"; break;
      case LayerSpec::Kind::Relu: ss << "block relu\n"; break;
      case LayerSpec::Kind::SelfAttention: ss << "block attn\n"; break;
      case LayerSpec::Kind::AvgPool:
        ss << "block pool " << l.pool_k << "\n";
        break;
    }
  }
  if (s.head == Head::SegClassifier)
    ss << "head seg " << s.classes << "\n";
  else
    ss << "head score\n";
  return ss.str();
}

}  // namespace netdetail

struct Checkpoint {
  Network net;
  uint64_t seed = 0;
  int iteration = 0;
};

/// Writes one STKD file per tensor plus a manifest recording the spec, the
/// seed, the iteration, and a payload hash per tensor.
inline void save_checkpoint(const Network& net, uint64_t seed, int iteration,
                            const std::string& dir) {
  io::ensure_dir(dir);
  std::ostringstream m;
  m << "structkd-checkpoint 1\n";
  m << "seed " << seed << "\n";
  m << "iteration " << iteration << "\n";
  m << netdetail::spec_to_text(net.spec);
  auto dump = [&](const char* kind,
                  const std::vector<std::pair<std::string, Tensor>>& list) {
    for (const auto& [name, t] : list) {
      std::string file = name + ".stkd";
      for (char& ch : file)
        if (ch == '/') ch = '_';
      io::write_tensor(dir + "/" + file, t);
      m << kind << " " << name << " " << file << " " << io::tensor_hash(t)
        << "\n";
    }
  };
  dump("tensor", net.params);
  dump("buffer", net.buffers);
  io::write_text(dir + "/checkpoint.txt", m.str());
}

inline Checkpoint load_checkpoint(const std::string& dir) {
  const std::string manifest = io::read_text(dir + "/checkpoint.txt");
  NetworkSpec spec;
  Checkpoint ck;
  std::vector<std::array<std::string, 4>> entries;  // kind, name, file, hash
  bool have_header = false;
  for (const std::string& line : io::split_lines(manifest)) {
    const auto tok = io::split_ws(line);
    if (tok.empty() || tok[0][0] == '#') continue;
    if (tok[0] == "structkd-checkpoint") {
      SKD_CHECK(tok.size() == 2 && tok[1] == "1", Io,
                dir << ": unsupported checkpoint version");
      have_header = true;
    } else if (tok[0] == "seed") {
      ck.seed = std::stoull(tok.at(1));
    } else if (tok[0] == "iteration") {
      ck.iteration = std::stoi(tok.at(1));
    } else if (tok[0] == "role") {
      const std::string& r = tok.at(1);
      spec.role = r == "teacher" ? Role::Teacher
                  : r == "student" ? Role::Student
                                   : Role::Discriminator;
      SKD_CHECK(r == "teacher" || r == "student" || r == "discriminator", Io,
                dir << ": unknown role " << r);
    } else if (tok[0] == "in_channels") {
      spec.in_channels = std::stoi(tok.at(1));
    } else if (tok[0] == "block") {
      const std::string& k = tok.at(1);
      if (k == "conv") {
        spec.blocks.push_back(LayerSpec::conv(std::stoi(tok.at(2)),
                                              std::stoi(tok.at(3)),
                                              std::stoi(tok.at(4))));
      } else if (k == "bn") {
        spec.blocks.push_back(LayerSpec::bn());
      } else if (k == "relu") {
        spec.blocks.push_back(LayerSpec::relu());
      } else if (k == "attn") {
        spec.blocks.push_back(LayerSpec::attention());
      } else if (k == "pool") {
        spec.blocks.push_back(LayerSpec::pool(std::stoi(tok.at(2))));
      } else {
        SKD_CHECK(false, Io, dir << ": unknown block kind " << k);
      }
    } else if (tok[0] == "head") {
      if (tok.at(1) == "seg") {
        spec.head = Head::SegClassifier;
        spec.classes = std::stoi(tok.at(2));
      } else {
        spec.head = Head::ScorePool;
      }
    } else if (tok[0] == "tensor" || tok[0] == "buffer") {
      entries.push_back({tok[0], tok.at(1), tok.at(2), tok.at(3)});
    } else {
      SKD_CHECK(false, Io, dir << ": unknown manifest line: " << line);
    }
  }
  SKD_CHECK(have_header, Io, dir << ": missing checkpoint header");
  ck.net = build_network(spec, ck.seed);
  for (const auto& e : entries) {
    Tensor t = io::read_tensor(dir + "/" + e[2]);
    SKD_CHECK(io::tensor_hash(t) == std::stoull(e[3]), Io,
              dir << "/" << e[2] << ": payload hash mismatch");
    Tensor& dst = e[0] == "tensor" ? ck.net.param(e[1]) : ck.net.buffer(e[1]);
    SKD_CHECK(dst.shape() == t.shape(), Io,
              dir << "/" << e[2] << ": shape " << shape_str(t.shape())
                  << " does not match spec shape " << shape_str(dst.shape()));
    dst.values() = t.values();
  }
  return ck;
}

}  // namespace nets
}  // namespace structkd
