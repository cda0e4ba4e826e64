#pragma once

#include <cmath>
#include <functional>
#include <memory>
#include <unordered_map>
#include <utility>
#include <vector>

#include "structkd/common.hpp"

namespace structkd {

struct TensorData {
  Shape shape;
  std::vector<float> v;  ///< values, row-major
  std::vector<float> g;  ///< gradient buffer; empty until backward touches it
  bool requires_grad = false;
  bool from_op = false;  ///< produced by a recorded operation
};

/// Dense f32 tensor handle with shared storage. Copying a Tensor copies the
/// handle, not the buffer; ops always allocate fresh outputs.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorData> d) : d_(std::move(d)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto d = std::make_shared<TensorData>();
    d->v.assign(static_cast<size_t>(numel(shape)), 0.0f);
    d->shape = std::move(shape);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
  }

  static Tensor full(Shape shape, float value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (float& x : t.d_->v) x = value;
    return t;
  }

  static Tensor from(Shape shape, std::vector<float> values,
                     bool requires_grad = false) {
    SKD_CHECK(numel(shape) == static_cast<int64_t>(values.size()), Shape,
              "tensor init: shape " << shape_str(shape) << " expects "
                                    << numel(shape) << " values, got "
                                    << values.size());
    auto d = std::make_shared<TensorData>();
    d->shape = std::move(shape);
    d->v = std::move(values);
    d->requires_grad = requires_grad;
    return Tensor(std::move(d));
  }

  static Tensor scalar(float value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int ndim() const { return static_cast<int>(d_->shape.size()); }
  int dim(int i) const { return d_->shape[static_cast<size_t>(i)]; }
  int64_t size() const { return static_cast<int64_t>(d_->v.size()); }

  float* data() { return d_->v.data(); }
  const float* data() const { return d_->v.data(); }
  std::vector<float>& values() { return d_->v; }
  const std::vector<float>& values() const { return d_->v; }

  float item() const {
    SKD_CHECK(size() == 1, Shape,
              "item() on non-scalar tensor " << shape_str(d_->shape));
    return d_->v[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool rg) { d_->requires_grad = rg; }
  bool is_leaf() const { return !d_->from_op; }

  bool has_grad() const { return !d_->g.empty(); }
  const std::vector<float>& grad() const { return d_->g; }
  std::vector<float>& grad_mut() { return d_->g; }
  void zero_grad() {
    d_->g.clear();
    d_->g.shrink_to_fit();
  }

  /// Value copy with no grad tracking and no producer.
  Tensor detach() const {
    auto d = std::make_shared<TensorData>();
    d->shape = d_->shape;
    d->v = d_->v;
    return Tensor(std::move(d));
  }

  Tensor clone_as_leaf(bool requires_grad) const {
    Tensor t = detach();
    t.set_requires_grad(requires_grad);
    return t;
  }

  const std::shared_ptr<TensorData>& ptr() const { return d_; }

 private:
  std::shared_ptr<TensorData> d_;
};

namespace autograd {

/// One recorded differentiable operation. The vjp callback receives the
/// gradient w.r.t. the output and returns gradients aligned with `inputs`
/// (an undefined Tensor means "no gradient for this input"). vjp bodies are
/// written in terms of tape ops, so running them with recording enabled
/// builds the graph needed for gradient-of-gradient.
struct TapeEntry {
  std::shared_ptr<TensorData> out;
  std::vector<std::shared_ptr<TensorData>> inputs;
  std::function<std::vector<Tensor>(const Tensor&)> vjp;
};

class Tape;

inline Tape*& current_tape() {
  static thread_local Tape* t = nullptr;
  return t;
}

inline bool& grad_mode() {
  static thread_local bool enabled = true;
  return enabled;
}

/// Scoped operation recorder. Constructing a Tape makes it the active
/// recorder for the current thread; destruction restores the previous one.
class Tape {
 public:
  Tape() : prev_(current_tape()) { current_tape() = this; }
  ~Tape() { current_tape() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(TapeEntry e) { entries_.push_back(std::move(e)); }
  size_t size() const { return entries_.size(); }
  const TapeEntry& entry(size_t i) const { return entries_[i]; }

 private:
  std::vector<TapeEntry> entries_;
  Tape* prev_;
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(grad_mode()) { grad_mode() = false; }
  ~NoGradGuard() { grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

inline bool recording_active() {
  return grad_mode() && current_tape() != nullptr;
}

}  // namespace autograd

using autograd::NoGradGuard;
using autograd::Tape;

namespace detail {

// Declared here, defined in ops.hpp; the engine uses it to accumulate
// gradient contributions so that accumulation itself stays differentiable.
inline Tensor engine_add(const Tensor& a, const Tensor& b);

inline void run_backward_impl(const Tensor& root, bool create_graph,
                              bool write_grads, TensorData* want,
                              Tensor* got) {
  Tape* tape = autograd::current_tape();
  SKD_CHECK(tape != nullptr, Numeric,
            "backward called outside of an active Tape scope");
  SKD_CHECK(root.size() == 1, Shape,
            "backward requires a scalar loss, got " << shape_str(root.shape()));

  std::unordered_map<TensorData*, Tensor> grads;
  grads.emplace(root.ptr().get(), Tensor::full({1}, 1.0f));

  const size_t n0 = tape->size();
  {
    // vjp bodies run with recording enabled only when building a
    // higher-order graph; otherwise they execute as plain arithmetic.
    std::unique_ptr<NoGradGuard> off;
    if (!create_graph) off = std::make_unique<NoGradGuard>();
    for (size_t i = n0; i-- > 0;) {
      // Copy: with create_graph the vjp call appends entries and may
      // reallocate the tape's storage while we hold this one.
      autograd::TapeEntry e = tape->entry(i);
      auto it = grads.find(e.out.get());
      if (it == grads.end()) continue;
      Tensor gout = it->second;
      std::vector<Tensor> gins = e.vjp(gout);
      SKD_CHECK(gins.size() == e.inputs.size(), Numeric,
                "vjp returned wrong arity");
      for (size_t k = 0; k < gins.size(); ++k) {
        if (!gins[k].defined()) continue;
        TensorData* in = e.inputs[k].get();
        if (!in->requires_grad && !in->from_op) continue;
        auto g_it = grads.find(in);
        if (g_it == grads.end()) {
          grads.emplace(in, gins[k]);
        } else {
          g_it->second = engine_add(g_it->second, gins[k]);
        }
      }
    }
  }

  if (write_grads) {
    for (auto& [ptr, g] : grads) {
      if (!ptr->requires_grad) continue;
      if (ptr->g.empty()) ptr->g.assign(ptr->v.size(), 0.0f);
      const std::vector<float>& src = g.values();
      for (size_t i = 0; i < src.size(); ++i) ptr->g[i] += src[i];
    }
  }
  if (want != nullptr && got != nullptr) {
    auto it = grads.find(want);
    if (it != grads.end()) {
      *got = it->second;
    } else {
      Tensor z = Tensor::zeros(want->shape);
      *got = z;
    }
  }
}

}  // namespace detail

/// Reverse-mode sweep: accumulates d(loss)/d(t) into the grad buffer of
/// every requires_grad tensor reachable from `loss` on the active tape.
inline void backward(const Tensor& loss) {
  detail::run_backward_impl(loss, /*create_graph=*/false, /*write_grads=*/true,
                            nullptr, nullptr);
}

/// Returns d(out)/d(x) as a tensor without touching grad buffers. `x` must
/// have requires_grad set, otherwise the sweep prunes it away. With
/// create_graph=true the returned gradient is itself differentiable, which
/// is what the gradient penalty needs.
inline Tensor grad_wrt(const Tensor& out, const Tensor& x, bool create_graph) {
  Tensor g;
  detail::run_backward_impl(out, create_graph, /*write_grads=*/false,
                            x.ptr().get(), &g);
  return g;
}

}  // namespace structkd
