#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <mutex>
#include <tuple>
#include <vector>

#include "structkd/common.hpp"
#include "structkd/nets.hpp"
#include "structkd/ops.hpp"
#include "structkd/tensor.hpp"

namespace structkd {
namespace distill {

struct LossWeights {
  float lambda1 = 10.0f;  ///< weight on pixel-wise + pair-wise terms
  float lambda2 = 0.1f;   ///< weight on the adversarial student term
  float gp_coeff = 10.0f;
  bool unlabeled = false;  ///< drops the task term for unlabeled batches
};

// ---------------------------------------------------------------------------
// pixel-wise distillation

/// Mean per-position KL divergence between class distributions, student
/// distribution first; softened by `temp` before normalization. Averaged
/// over batch and spatial positions.
inline Tensor pixel_wise_loss(const Tensor& student_logits,
                              const Tensor& teacher_logits, double temp = 1.0,
                              bool kl_reverse = false) {
  SKD_CHECK(student_logits.ndim() == 4 &&
                student_logits.shape() == teacher_logits.shape(),
            Shape, "pixel_wise_loss: logit shapes "
                       << shape_str(student_logits.shape()) << " and "
                       << shape_str(teacher_logits.shape()) << " must match");
  SKD_CHECK(temp > 0.0, Config, "pixel_wise_loss: temperature must be > 0");
  const int n = student_logits.dim(0);
  const int hw = student_logits.dim(2) * student_logits.dim(3);
  Tensor ls = ops::log_softmax(ops::scale(student_logits, 1.0 / temp));
  Tensor lt = ops::log_softmax(ops::scale(teacher_logits, 1.0 / temp));
  Tensor contrib = kl_reverse ? ops::mul(ops::exp(lt), ops::sub(lt, ls))
                              : ops::mul(ops::exp(ls), ops::sub(ls, lt));
  return ops::scale(ops::sum_all(contrib),
                    1.0 / (static_cast<double>(n) * hw));
}

// ---------------------------------------------------------------------------
// affinity graph

/// Static similarity graph over spatially aggregated feature nodes. `alpha`
/// counts connections per node with 0 meaning fully connected; `beta` is the
/// aggregated patch area (a perfect square).
struct AffinityGraph {
  Tensor node_features;  ///< [R', C_f]
  std::vector<std::vector<int>> neighbors;
  int alpha = 0;  ///< 0 = fully connected
  int beta = 1;
  int grid_h = 0;
  int grid_w = 0;

  int node_count() const { return grid_h * grid_w; }
  int conn_per_node() const {
    return alpha == 0 ? node_count() : std::min(alpha, node_count());
  }
};

/// Per-node index lists of the `alpha` nearest grid nodes under Chebyshev
/// distance, self included, ties broken by row-major node index. alpha=0
/// yields the full node set for every node.
inline std::vector<std::vector<int>> chebyshev_neighbors(int grid_h,
                                                         int grid_w,
                                                         int alpha) {
  const int r = grid_h * grid_w;
  const int take = alpha == 0 ? r : std::min(alpha, r);
  std::vector<std::vector<int>> out(static_cast<size_t>(r));
  std::vector<std::pair<int, int>> order(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    const int ri = i / grid_w, ci = i % grid_w;
    for (int j = 0; j < r; ++j) {
      const int rj = j / grid_w, cj = j % grid_w;
      order[static_cast<size_t>(j)] = {
          std::max(std::abs(ri - rj), std::abs(ci - cj)), j};
    }
    std::sort(order.begin(), order.end());
    auto& lst = out[static_cast<size_t>(i)];
    lst.reserve(static_cast<size_t>(take));
    for (int t = 0; t < take; ++t) lst.push_back(order[static_cast<size_t>(t)].second);
  }
  return out;
}

/// Aggregates sqrt(beta) x sqrt(beta) patches into nodes by average pooling
/// and attaches the neighbor lists. Returns one graph per batch element.
inline std::vector<AffinityGraph> build_affinity_graph(const Tensor& features,
                                                       int alpha, int beta) {
  SKD_CHECK(features.ndim() == 4, Shape,
            "build_affinity_graph expects [B,C,H,W] features, got "
                << shape_str(features.shape()));
  const int b = features.dim(0), c = features.dim(1);
  const int h = features.dim(2), w = features.dim(3);
  const int side = static_cast<int>(std::lround(std::sqrt(
      static_cast<double>(beta))));
  SKD_CHECK(beta >= 1 && side * side == beta, Config,
            "granularity beta=" << beta << " must be a perfect square");
  SKD_CHECK(h % side == 0 && w % side == 0, Shape,
            "patch side " << side << " does not divide feature map " << h
                          << "x" << w);
  const int gh = h / side, gw = w / side, r = gh * gw;
  SKD_CHECK(alpha >= 0 && alpha <= r, Config,
            "connection range alpha=" << alpha
                                      << " exceeds node count " << r);
  Tensor pooled = side == 1 ? features : ops::avg_pool(features, side);
  const auto nbrs = chebyshev_neighbors(gh, gw, alpha);
  std::vector<AffinityGraph> out;
  out.reserve(static_cast<size_t>(b));
  for (int i = 0; i < b; ++i) {
    AffinityGraph g;
    g.node_features = ops::transpose2d(
        ops::reshape(ops::select0(pooled, i), {c, r}));
    g.neighbors = nbrs;
    g.alpha = alpha;
    g.beta = beta;
    g.grid_h = gh;
    g.grid_w = gw;
    out.push_back(std::move(g));
  }
  return out;
}

/// Total connection count of the graph a (map_pixels, alpha, beta) setting
/// produces: (map_pixels/beta) nodes times alpha connections each, where
/// alpha=0 selects the fully connected graph.
inline long long connection_count(long long map_pixels, long long alpha,
                                  long long beta) {
  SKD_CHECK(beta >= 1 && map_pixels % beta == 0, Config,
            "connection_count: beta=" << beta << " must divide "
                                      << map_pixels);
  const long long nodes = map_pixels / beta;
  SKD_CHECK(alpha >= 0 && alpha <= nodes, Config,
            "connection_count: alpha=" << alpha << " exceeds node count "
                                       << nodes);
  return nodes * (alpha == 0 ? nodes : alpha);
}

/// Cosine similarity of two feature vectors; a pair of zero vectors scores 0.
inline Tensor node_similarity(const Tensor& a, const Tensor& b) {
  SKD_CHECK(a.shape() == b.shape() && a.ndim() == 1, Shape,
            "node_similarity expects two equal-length vectors");
  Tensor na = ops::sqrt(ops::add_scalar(ops::sum_all(ops::square(a)), 1e-12));
  Tensor nb = ops::sqrt(ops::add_scalar(ops::sum_all(ops::square(b)), 1e-12));
  return ops::div(ops::sum_all(ops::mul(a, b)), ops::mul(na, nb));
}

namespace ddetail {

/// All-pairs cosine similarity of row vectors; zero rows yield zero rows.
inline Tensor cosine_matrix(const Tensor& x) {
  const int r = x.dim(0);
  Tensor dots = ops::matmul(x, ops::transpose2d(x));
  Tensor norm =
      ops::sqrt(ops::add_scalar(ops::sum_tail(ops::square(x), 1), 1e-12));
  Tensor outer = ops::matmul(ops::reshape(norm, {r, 1}),
                             ops::reshape(norm, {1, r}));
  return ops::div(dots, outer);
}

/// 0/1 connection mask [R,R] for a neighbor structure; memoized because the
/// graph is static across samples and iterations.
inline Tensor connection_mask(int grid_h, int grid_w, int alpha) {
  static std::mutex mu;
  static std::map<std::tuple<int, int, int>, Tensor> cache;
  std::lock_guard<std::mutex> lock(mu);
  const auto key = std::make_tuple(grid_h, grid_w, alpha);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  const int r = grid_h * grid_w;
  std::vector<float> m(static_cast<size_t>(r) * r, 0.0f);
  const auto nbrs = chebyshev_neighbors(grid_h, grid_w, alpha);
  for (int i = 0; i < r; ++i)
    for (int j : nbrs[static_cast<size_t>(i)])
      m[static_cast<size_t>(i) * r + j] = 1.0f;
  Tensor t = Tensor::from({r, r}, std::move(m));
  cache.emplace(key, t);
  return t;
}

}  // namespace ddetail

/// Squared-difference loss between student and teacher pairwise similarities
/// over the graph's connections, normalized by beta/(W'*H'*alpha) so a unit
/// discrepancy on every connection integrates to 1.
inline Tensor pair_wise_loss(const AffinityGraph& g_s,
                             const AffinityGraph& g_t) {
  SKD_CHECK(g_s.alpha == g_t.alpha && g_s.beta == g_t.beta &&
                g_s.grid_h == g_t.grid_h && g_s.grid_w == g_t.grid_w,
            Shape, "pair_wise_loss: graph structures differ");
  const int r = g_s.node_count();
  const int conn = g_s.conn_per_node();
  Tensor a_s = ddetail::cosine_matrix(g_s.node_features);
  Tensor a_t = ddetail::cosine_matrix(g_t.node_features);
  Tensor mask = ddetail::connection_mask(g_s.grid_h, g_s.grid_w, g_s.alpha);
  Tensor sq = ops::mul(mask, ops::square(ops::sub(a_s, a_t)));
  return ops::scale(ops::sum_all(sq),
                    1.0 / (static_cast<double>(r) * conn));
}

/// Batch mean of per-sample pair-wise losses on freshly built graphs.
inline Tensor pair_wise_loss_batch(const Tensor& student_features,
                                   const Tensor& teacher_features, int alpha,
                                   int beta) {
  auto gs = build_affinity_graph(student_features, alpha, beta);
  auto gt = build_affinity_graph(teacher_features, alpha, beta);
  SKD_CHECK(gs.size() == gt.size(), Shape,
            "pair_wise_loss_batch: batch sizes differ");
  Tensor acc = Tensor::zeros({1});
  for (size_t i = 0; i < gs.size(); ++i)
    acc = ops::add(acc, pair_wise_loss(gs[i], gt[i]));
  return ops::scale(acc, 1.0 / static_cast<double>(gs.size()));
}

/// Comparison baseline: pair-wise distillation restricted to each node's
/// 3x3 neighborhood at single-pixel granularity.
inline Tensor local_pairwise_loss(const Tensor& student_features,
                                  const Tensor& teacher_features) {
  return pair_wise_loss_batch(student_features, teacher_features, 9, 1);
}

// ---------------------------------------------------------------------------
// holistic (adversarial) distillation

/// Mean discriminator score of a map batch conditioned on its images.
inline Tensor expected_score(nets::Network& d, const Tensor& q,
                             const Tensor& image, ops::Mode mode,
                             ops::ConvImpl impl = ops::ConvImpl::Im2col) {
  Tensor scores = nets::forward_discriminator(d, q, image, mode, impl);
  return ops::scale(ops::sum_all(scores), 1.0 / scores.dim(0));
}

/// The student's adversarial term E[D(Q^s|I)]; enters the student objective
/// with a negative coefficient so the student climbs the score.
inline Tensor holistic_s_term(nets::Network& d, const Tensor& q_s,
                              const Tensor& image,
                              ops::Mode mode = ops::Mode::TrainNoUpdate,
                              ops::ConvImpl impl = ops::ConvImpl::Im2col) {
  return expected_score(d, q_s, image, mode, impl);
}

/// Penalty E[(||grad_x score(x)||_2 - 1)^2] at the given interpolates.
/// `score` maps a [N,C,H,W] tensor to per-sample scores [N]; the returned
/// scalar stays differentiable w.r.t. everything inside `score`.
template <class ScoreFn>
Tensor gradient_penalty(ScoreFn&& score, const Tensor& xhat) {
  const int n = xhat.dim(0);
  Tensor scores = score(xhat);
  SKD_CHECK(scores.ndim() == 1 && scores.dim(0) == n, Shape,
            "gradient_penalty: score fn must return [N] scores");
  Tensor g = grad_wrt(ops::sum_all(scores), xhat, /*create_graph=*/true);
  Tensor nrm =
      ops::sqrt(ops::add_scalar(ops::sum_tail(ops::square(g), 1), 1e-12));
  return ops::scale(ops::sum_all(ops::square(ops::add_scalar(nrm, -1.0))),
                    1.0 / n);
}

/// Builds the per-sample interpolates x_hat = u*q_t + (1-u)*q_s as a fresh
/// gradient leaf; u carries one uniform draw per sample.
inline Tensor make_interpolates(const Tensor& q_s, const Tensor& q_t,
                                const Tensor& u) {
  SKD_CHECK(q_s.shape() == q_t.shape(), Shape,
            "interpolates: map shapes differ");
  SKD_CHECK(u.ndim() == 1 && u.dim(0) == q_s.dim(0), Shape,
            "interpolates: need one mixing weight per sample");
  NoGradGuard off;
  Tensor uu = ops::expand_tail(u, q_s.shape());
  Tensor mixed = ops::add(ops::mul(uu, q_t),
                          ops::mul(ops::add_scalar(ops::neg(uu), 1.0), q_s));
  return mixed.clone_as_leaf(true);
}

/// Discriminator objective: E[D(Q^s|I)] - E[D(Q^t|I)] plus the gradient
/// penalty at interpolates between the two maps. The student map is detached
/// here; only discriminator parameters receive gradient.
inline Tensor holistic_d_loss(nets::Network& d, const Tensor& q_s,
                              const Tensor& q_t, const Tensor& image,
                              const Tensor& u, float gp_coeff,
                              ops::Mode mode = ops::Mode::Train,
                              ops::ConvImpl impl = ops::ConvImpl::Im2col) {
  Tensor q_s_const = q_s.requires_grad() ? q_s.detach() : q_s;
  Tensor e_s = expected_score(d, q_s_const, image, mode, impl);
  Tensor e_t = expected_score(d, q_t, image,
                              mode == ops::Mode::Train
                                  ? ops::Mode::TrainNoUpdate
                                  : mode,
                              impl);
  Tensor xhat = make_interpolates(q_s_const, q_t, u);
  Tensor gp = gradient_penalty(
      [&](const Tensor& x) {
        return nets::forward_discriminator(d, x, image,
                                           mode == ops::Mode::Train
                                               ? ops::Mode::TrainNoUpdate
                                               : mode,
                                           impl);
      },
      xhat);
  return ops::add(ops::sub(e_s, e_t), ops::scale(gp, gp_coeff));
}

// ---------------------------------------------------------------------------
// comparison baselines

/// Per-pixel feature regression through a 1x1 adapter that lifts student
/// channels to teacher channels.
inline Tensor mimic_loss(const Tensor& student_features,
                         const Tensor& teacher_features,
                         const Tensor& adapter_w, const Tensor& adapter_b) {
  SKD_CHECK(student_features.ndim() == 4 && teacher_features.ndim() == 4,
            Shape, "mimic_loss expects [N,C,H,W] features");
  SKD_CHECK(adapter_w.ndim() == 2 &&
                adapter_w.dim(1) == student_features.dim(1) &&
                adapter_w.dim(0) == teacher_features.dim(1),
            Shape, "mimic_loss: adapter " << shape_str(adapter_w.shape())
                                          << " must map student channels to "
                                             "teacher channels");
  Tensor adapted =
      nets::project_channels(student_features, adapter_w, adapter_b);
  SKD_CHECK(adapted.shape() == teacher_features.shape(), Shape,
            "mimic_loss: adapted shape " << shape_str(adapted.shape())
                                         << " does not match teacher "
                                         << shape_str(teacher_features.shape()));
  return ops::mean_all(ops::square(ops::sub(adapted, teacher_features)));
}

/// Spatial attention map: channel-wise sum of squared activations,
/// L2-normalized over all positions per sample.
inline Tensor attention_map(const Tensor& features) {
  SKD_CHECK(features.ndim() == 4, Shape, "attention_map expects [N,C,H,W]");
  Tensor a = ops::cpix_sum(ops::square(features));  // [N,1,H,W]
  Tensor ss = ops::sum_tail(ops::square(a), 1);     // [N]
  for (int i = 0; i < ss.dim(0); ++i)
    SKD_CHECK(ss.data()[i] > 0.0f, Domain,
              "attention_map: sample " << i
                                       << " has an all-zero feature map");
  return ops::div(a, ops::expand_tail(ops::sqrt(ss), a.shape()));
}

/// MSE between normalized spatial attention maps of student and teacher.
inline Tensor attention_transfer_loss(const Tensor& student_features,
                                      const Tensor& teacher_features) {
  SKD_CHECK(student_features.dim(2) == teacher_features.dim(2) &&
                student_features.dim(3) == teacher_features.dim(3) &&
                student_features.dim(0) == teacher_features.dim(0),
            Shape, "attention_transfer_loss: spatial sizes must match");
  Tensor as = attention_map(student_features);
  Tensor at = attention_map(teacher_features);
  return ops::mean_all(ops::square(ops::sub(as, at)));
}

// ---------------------------------------------------------------------------
// combined objective

/// task + lambda1*(pi + pa) - lambda2*ho_s, with the task term dropped for
/// unlabeled batches.
inline Tensor student_objective(const Tensor& task_loss, const Tensor& pi,
                                const Tensor& pa, const Tensor& ho_s,
                                const LossWeights& w) {
  Tensor distilled = ops::scale(ops::add(pi, pa), w.lambda1);
  Tensor adversarial = ops::scale(ho_s, w.lambda2);
  Tensor base = w.unlabeled ? Tensor::zeros({1}) : task_loss;
  return ops::sub(ops::add(base, distilled), adversarial);
}

}  // namespace distill
}  // namespace structkd
