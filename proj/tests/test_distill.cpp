// Distillation losses against hand-computed values and double-precision
// brute-force oracles.

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "structkd/distill.hpp"
#include "structkd/nets.hpp"
#include "structkd/ops.hpp"
#include "structkd/rng.hpp"
#include "structkd/tensor.hpp"

namespace skd = structkd;
namespace dst = structkd::distill;
namespace nets = structkd::nets;
using skd::Error;
using skd::ErrorKind;
using skd::Shape;
using skd::Tensor;

namespace {

Tensor randn(skd::Rng& rng, Shape sh, float scale = 1.0f, bool leaf = false) {
  std::vector<float> v(static_cast<size_t>(skd::numel(sh)));
  for (float& x : v) x = scale * static_cast<float>(rng.normal());
  return Tensor::from(std::move(sh), std::move(v), leaf);
}

/// Mean softened KL over batch and positions, all in double.
double kl_oracle(const Tensor& s, const Tensor& t, double temp, bool reverse) {
  const int n = s.dim(0), c = s.dim(1), h = s.dim(2), w = s.dim(3);
  auto prob = [&](const Tensor& x, int ni, int i, int j, std::vector<double>& p) {
    double mx = -1e300;
    for (int k = 0; k < c; ++k)
      mx = std::max(mx, static_cast<double>(
                            x.data()[((ni * c + k) * h + i) * w + j]) / temp);
    double z = 0.0;
    for (int k = 0; k < c; ++k) {
      p[static_cast<size_t>(k)] = std::exp(
          static_cast<double>(x.data()[((ni * c + k) * h + i) * w + j]) / temp -
          mx);
      z += p[static_cast<size_t>(k)];
    }
    for (int k = 0; k < c; ++k) p[static_cast<size_t>(k)] /= z;
  };
  double total = 0.0;
  std::vector<double> ps(static_cast<size_t>(c)), pt(static_cast<size_t>(c));
  for (int ni = 0; ni < n; ++ni)
    for (int i = 0; i < h; ++i)
      for (int j = 0; j < w; ++j) {
        prob(s, ni, i, j, ps);
        prob(t, ni, i, j, pt);
        for (int k = 0; k < c; ++k) {
          const double a = reverse ? pt[static_cast<size_t>(k)]
                                   : ps[static_cast<size_t>(k)];
          const double b = reverse ? ps[static_cast<size_t>(k)]
                                   : pt[static_cast<size_t>(k)];
          total += a * std::log(a / b);
        }
      }
  return total / (static_cast<double>(n) * h * w);
}

/// Chebyshev-nearest node lists, self included, ties by node index.
std::vector<std::vector<int>> neighbor_oracle(int gh, int gw, int take) {
  const int r = gh * gw;
  std::vector<std::vector<int>> out(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) {
    std::vector<std::pair<int, int>> order;
    for (int j = 0; j < r; ++j) {
      const int d = std::max(std::abs(i / gw - j / gw),
                             std::abs(i % gw - j % gw));
      order.emplace_back(d, j);
    }
    std::sort(order.begin(), order.end());
    for (int t = 0; t < take; ++t)
      out[static_cast<size_t>(i)].push_back(order[static_cast<size_t>(t)].second);
  }
  return out;
}

/// Brute-force pair-wise loss for one sample in double: patch-average
/// pooling, all-pairs cosine, masked squared differences.
double pair_wise_oracle(const Tensor& fs, const Tensor& ft, int alpha,
                        int beta) {
  const int c = fs.dim(1), h = fs.dim(2), w = fs.dim(3);
  const int side = static_cast<int>(std::lround(std::sqrt(double(beta))));
  const int gh = h / side, gw = w / side, r = gh * gw;
  auto nodes = [&](const Tensor& f) {
    std::vector<std::vector<double>> v(static_cast<size_t>(r),
                                       std::vector<double>(static_cast<size_t>(c)));
    for (int gi = 0; gi < gh; ++gi)
      for (int gj = 0; gj < gw; ++gj)
        for (int k = 0; k < c; ++k) {
          double acc = 0.0;
          for (int di = 0; di < side; ++di)
            for (int dj = 0; dj < side; ++dj)
              acc += f.data()[(k * h + gi * side + di) * w + gj * side + dj];
          v[static_cast<size_t>(gi * gw + gj)][static_cast<size_t>(k)] =
              acc / (side * side);
        }
    return v;
  };
  auto cos = [&](const std::vector<double>& a, const std::vector<double>& b) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t k = 0; k < a.size(); ++k) {
      dot += a[k] * b[k];
      na += a[k] * a[k];
      nb += b[k] * b[k];
    }
    return dot / std::sqrt((na + 1e-12) * (nb + 1e-12));
  };
  const auto vs = nodes(fs), vt = nodes(ft);
  const int take = alpha == 0 ? r : std::min(alpha, r);
  const auto nbrs = neighbor_oracle(gh, gw, take);
  double total = 0.0;
  for (int i = 0; i < r; ++i)
    for (int j : nbrs[static_cast<size_t>(i)]) {
      const double d = cos(vs[static_cast<size_t>(i)], vs[static_cast<size_t>(j)]) -
                       cos(vt[static_cast<size_t>(i)], vt[static_cast<size_t>(j)]);
      total += d * d;
    }
  return total / (static_cast<double>(r) * take);
}

}  // namespace

TEST(PixelWise, HandComputedBinaryDivergence) {
  // Student predicts (0.5, 0.5), teacher (0.8, 0.2) at a single position.
  Tensor s = Tensor::from({1, 2, 1, 1},
                          {std::log(0.5f), std::log(0.5f)});
  Tensor t = Tensor::from({1, 2, 1, 1},
                          {std::log(0.8f), std::log(0.2f)});
  const double want = 0.5 * std::log(0.5 / 0.8) + 0.5 * std::log(0.5 / 0.2);
  EXPECT_NEAR(want, std::log(1.25), 1e-12);
  EXPECT_NEAR(dst::pixel_wise_loss(s, t).item(), want, 1e-6);
  const double want_rev = 0.8 * std::log(0.8 / 0.5) + 0.2 * std::log(0.2 / 0.5);
  EXPECT_NEAR(dst::pixel_wise_loss(s, t, 1.0, true).item(), want_rev, 1e-6);
}

TEST(PixelWise, MatchesDoubleOracle) {
  skd::Rng rng = skd::Rng::stream(101, "pi");
  Tensor s = randn(rng, {2, 5, 3, 4}, 2.0f);
  Tensor t = randn(rng, {2, 5, 3, 4}, 2.0f);
  EXPECT_NEAR(dst::pixel_wise_loss(s, t).item(), kl_oracle(s, t, 1.0, false),
              1e-5);
  EXPECT_NEAR(dst::pixel_wise_loss(s, t, 3.0).item(), kl_oracle(s, t, 3.0, false),
              1e-5);
  EXPECT_NEAR(dst::pixel_wise_loss(s, t, 1.0, true).item(),
              kl_oracle(s, t, 1.0, true), 1e-5);
}

TEST(PixelWise, ZeroOnMatchingAndShiftInvariant) {
  skd::Rng rng = skd::Rng::stream(102, "pi");
  Tensor s = randn(rng, {2, 4, 3, 3});
  EXPECT_NEAR(dst::pixel_wise_loss(s, s).item(), 0.0, 1e-7);
  // A per-position constant added to every class leaves the softmax alone.
  Tensor shifted = skd::ops::add_scalar(s, 5.0);
  Tensor t = randn(rng, {2, 4, 3, 3});
  EXPECT_NEAR(dst::pixel_wise_loss(s, t).item(),
              dst::pixel_wise_loss(shifted, t).item(), 1e-5);
  EXPECT_THROW(dst::pixel_wise_loss(s, t, 0.0), Error);
  Tensor bad = randn(rng, {2, 4, 3, 4});
  EXPECT_THROW(dst::pixel_wise_loss(s, bad), Error);
}

TEST(Affinity, ChebyshevNeighborListsOnSmallGrids) {
  const auto full = dst::chebyshev_neighbors(3, 3, 0);
  ASSERT_EQ(full.size(), 9u);
  for (const auto& lst : full) EXPECT_EQ(lst.size(), 9u);
  // Self first, then the eight distance-1 nodes in index order.
  EXPECT_EQ(full[4], (std::vector<int>{4, 0, 1, 2, 3, 5, 6, 7, 8}));
  EXPECT_EQ(full[0], (std::vector<int>{0, 1, 3, 4, 2, 5, 6, 7, 8}));

  const auto near5 = dst::chebyshev_neighbors(3, 3, 5);
  EXPECT_EQ(near5[0], (std::vector<int>{0, 1, 3, 4, 2}));
  EXPECT_EQ(near5[4], (std::vector<int>{4, 0, 1, 2, 3}));

  const auto wide = dst::chebyshev_neighbors(2, 4, 3);
  EXPECT_EQ(wide[0], (std::vector<int>{0, 1, 4}));
  EXPECT_EQ(neighbor_oracle(2, 4, 3), wide);
}

TEST(Affinity, ConnectionCountsMatchClosedForms) {
  // 64x64 output map, so quarters and sixteenths stay integral.
  const long long p = 64 * 64;
  // Fixed granularity, shrinking connection range.
  EXPECT_EQ(dst::connection_count(p, p / 256, 1), p * p / 256);
  EXPECT_EQ(dst::connection_count(p, p / 64, 1), p * p / 64);
  EXPECT_EQ(dst::connection_count(p, p / 16, 1), p * p / 16);
  EXPECT_EQ(dst::connection_count(p, p / 4, 1), p * p / 4);
  EXPECT_EQ(dst::connection_count(p, 0, 1), p * p);
  // Fully connected, coarsening granularity.
  EXPECT_EQ(dst::connection_count(p, 0, 4), p * p / 16);
  EXPECT_EQ(dst::connection_count(p, 0, 16), p * p / 256);
  EXPECT_EQ(dst::connection_count(p, 0, 64), p * p / 4096);
  EXPECT_EQ(dst::connection_count(p, 0, 256), p * p / 65536);
  EXPECT_EQ(dst::connection_count(p, 0, 1024), p * p / 1048576);

  EXPECT_THROW(dst::connection_count(p, 0, 3), Error);      // does not divide
  EXPECT_THROW(dst::connection_count(p, p + 1, 1), Error);  // range too wide
}

TEST(Affinity, FullGraphMatchesBruteForce) {
  skd::Rng rng = skd::Rng::stream(103, "pa");
  Tensor fs = randn(rng, {1, 8, 6, 6});
  Tensor ft = randn(rng, {1, 8, 6, 6});
  const double want = pair_wise_oracle(fs, ft, 0, 1);
  EXPECT_NEAR(dst::pair_wise_loss_batch(fs, ft, 0, 1).item(), want, 1e-5);
  EXPECT_GT(want, 0.0);
}

TEST(Affinity, LocalGraphMatchesBruteForce) {
  skd::Rng rng = skd::Rng::stream(104, "pa");
  Tensor fs = randn(rng, {1, 8, 6, 6});
  Tensor ft = randn(rng, {1, 8, 6, 6});
  EXPECT_NEAR(dst::pair_wise_loss_batch(fs, ft, 9, 1).item(),
              pair_wise_oracle(fs, ft, 9, 1), 1e-5);
  Tensor a = dst::local_pairwise_loss(fs, ft);
  Tensor b = dst::pair_wise_loss_batch(fs, ft, 9, 1);
  EXPECT_FLOAT_EQ(a.item(), b.item());
}

TEST(Affinity, CoarseNodesMatchBruteForce) {
  skd::Rng rng = skd::Rng::stream(105, "pa");
  Tensor fs = randn(rng, {2, 8, 6, 6});
  Tensor ft = randn(rng, {2, 8, 6, 6});
  double want = 0.0;
  for (int i = 0; i < 2; ++i) {
    Tensor si = skd::ops::stack0({skd::ops::select0(fs, i)});
    Tensor ti = skd::ops::stack0({skd::ops::select0(ft, i)});
    want += pair_wise_oracle(si, ti, 0, 9);
  }
  want /= 2.0;
  EXPECT_NEAR(dst::pair_wise_loss_batch(fs, ft, 0, 9).item(), want, 1e-5);
}

TEST(Affinity, IdenticalFeaturesScoreZero) {
  skd::Rng rng = skd::Rng::stream(106, "pa");
  Tensor f = randn(rng, {2, 4, 4, 4});
  EXPECT_FLOAT_EQ(dst::pair_wise_loss_batch(f, f, 0, 1).item(), 0.0f);
  EXPECT_FLOAT_EQ(dst::pair_wise_loss_batch(f, f, 4, 4).item(), 0.0f);
}

TEST(Affinity, SimilarityIsScaleInvariant) {
  skd::Rng rng = skd::Rng::stream(107, "pa");
  Tensor fs = randn(rng, {1, 6, 4, 4});
  Tensor ft = randn(rng, {1, 6, 4, 4});
  const float base = dst::pair_wise_loss_batch(fs, ft, 0, 1).item();
  Tensor fs3 = skd::ops::scale(fs, 3.0);
  Tensor ft5 = skd::ops::scale(ft, 0.2);
  EXPECT_NEAR(dst::pair_wise_loss_batch(fs3, ft5, 0, 1).item(), base, 1e-5);
}

TEST(Affinity, UnitDiscrepancyIntegratesToOne) {
  // Two orthogonal student nodes vs two identical teacher nodes: the
  // off-diagonal similarities differ by exactly 1.
  Tensor fs = Tensor::from({1, 2, 1, 2}, {1.0f, 0.0f, 0.0f, 1.0f});
  Tensor ft = Tensor::from({1, 2, 1, 2}, {1.0f, 1.0f, 0.0f, 0.0f});
  // a_s = [[1,0],[0,1]], a_t = [[1,1],[1,1]]; two connections differ by 1,
  // normalized by r*conn = 4.
  EXPECT_NEAR(dst::pair_wise_loss_batch(fs, ft, 0, 1).item(), 0.5, 1e-6);
}

TEST(Affinity, RejectsBadGraphSettings) {
  skd::Rng rng = skd::Rng::stream(108, "pa");
  Tensor f = randn(rng, {1, 4, 6, 6});
  EXPECT_THROW(dst::build_affinity_graph(f, 0, 3), Error);   // not a square
  EXPECT_THROW(dst::build_affinity_graph(f, 0, 16), Error);  // 4 does not divide 6
  EXPECT_THROW(dst::build_affinity_graph(f, 37, 1), Error);  // exceeds node count
  auto gs = dst::build_affinity_graph(f, 4, 4);
  EXPECT_EQ(gs.size(), 1u);
  EXPECT_EQ(gs[0].node_count(), 9);
  EXPECT_EQ(gs[0].conn_per_node(), 4);
  EXPECT_EQ(gs[0].node_features.shape(), (Shape{9, 4}));
}

TEST(NodeSimilarity, HandCases) {
  Tensor a = Tensor::from({3}, {1.0f, 0.0f, 0.0f});
  Tensor b = Tensor::from({3}, {0.0f, 2.0f, 0.0f});
  Tensor c = Tensor::from({3}, {3.0f, 0.0f, 0.0f});
  Tensor z = Tensor::zeros({3});
  EXPECT_NEAR(dst::node_similarity(a, b).item(), 0.0, 1e-6);
  EXPECT_NEAR(dst::node_similarity(a, c).item(), 1.0, 1e-6);
  EXPECT_NEAR(dst::node_similarity(a, skd::ops::neg(c)).item(), -1.0, 1e-6);
  EXPECT_FLOAT_EQ(dst::node_similarity(z, a).item(), 0.0f);
  EXPECT_FLOAT_EQ(dst::node_similarity(z, z).item(), 0.0f);
  Tensor d = Tensor::from({2}, {1.0f, 1.0f});
  EXPECT_THROW(dst::node_similarity(a, d), Error);
}

TEST(GradientPenalty, LinearScoreHasClosedForm) {
  // score(x) = sum(w * x) per sample has constant gradient w, so the
  // penalty is (||w|| - 1)^2 independent of the evaluation point.
  auto penalty_for = [](float fill) {
    const int n = 2, c = 4, h = 2, w = 2;
    Tensor wfull = Tensor::full({n, c, h, w}, fill);
    skd::Rng rng = skd::Rng::stream(109, "gp");
    Tensor xhat = randn(rng, {n, c, h, w}, 1.0f, true);
    skd::Tape tape;
    Tensor gp = dst::gradient_penalty(
        [&](const Tensor& x) {
          return skd::ops::sum_tail(skd::ops::mul(x, wfull), 1);
        },
        xhat);
    return gp.item();
  };
  // 16 entries of 0.25 give a unit-norm gradient.
  EXPECT_NEAR(penalty_for(0.25f), 0.0, 1e-6);
  // 16 entries of 0.5 give norm 2.
  EXPECT_NEAR(penalty_for(0.5f), 1.0, 1e-5);
  const double norm = std::sqrt(16.0 * 0.1 * 0.1);
  EXPECT_NEAR(penalty_for(0.1f), (norm - 1.0) * (norm - 1.0), 1e-5);
}

TEST(GradientPenalty, RejectsNonVectorScores) {
  Tensor xhat = Tensor::full({2, 1, 2, 2}, 0.5f);
  xhat = xhat.clone_as_leaf(true);
  skd::Tape tape;
  EXPECT_THROW(dst::gradient_penalty(
                   [&](const Tensor& x) {
                     return skd::ops::reshape(skd::ops::sum_tail(x, 1), {2, 1});
                   },
                   xhat),
               Error);
}

TEST(Holistic, InterpolatesMixPerSample) {
  skd::Rng rng = skd::Rng::stream(110, "ho");
  Tensor qs = randn(rng, {2, 3, 2, 2}, 1.0f, true);
  Tensor qt = randn(rng, {2, 3, 2, 2});
  Tensor u = Tensor::from({2}, {0.3f, 0.9f});
  Tensor xhat = dst::make_interpolates(qs, qt, u);
  EXPECT_TRUE(xhat.requires_grad());
  for (int n = 0; n < 2; ++n) {
    const float un = u.data()[n];
    for (int i = 0; i < 12; ++i) {
      const float want = un * qt.data()[n * 12 + i] +
                         (1.0f - un) * qs.data()[n * 12 + i];
      EXPECT_NEAR(xhat.data()[n * 12 + i], want, 1e-6);
    }
  }
  // The interpolate is a fresh leaf; gradient flow stops there.
  skd::Tape tape;
  Tensor loss = skd::ops::sum_all(skd::ops::square(xhat));
  skd::backward(loss);
  EXPECT_TRUE(xhat.has_grad());
  EXPECT_FALSE(qs.has_grad());
  Tensor bad_u = Tensor::from({3}, {0.1f, 0.2f, 0.3f});
  EXPECT_THROW(dst::make_interpolates(qs, qt, bad_u), Error);
}

TEST(Holistic, DiscriminatorLossComposesScoresAndPenalty) {
  nets::Network d = nets::build_network(nets::discriminator_spec(7, 0, 3), 51);
  skd::Rng rng = skd::Rng::stream(111, "ho");
  Tensor qs = randn(rng, {2, 4, 16, 16});
  Tensor qt = randn(rng, {2, 4, 16, 16});
  Tensor image = randn(rng, {2, 3, 16, 16});
  Tensor u = Tensor::from({2}, {0.25f, 0.75f});
  const auto mode = skd::ops::Mode::TrainNoUpdate;

  float want;
  {
    skd::Tape tape;
    Tensor e_s = dst::expected_score(d, qs, image, mode);
    Tensor e_t = dst::expected_score(d, qt, image, mode);
    Tensor xhat = dst::make_interpolates(qs, qt, u);
    Tensor gp = dst::gradient_penalty(
        [&](const Tensor& x) {
          return nets::forward_discriminator(d, x, image, mode);
        },
        xhat);
    want = e_s.item() - e_t.item() + 10.0f * gp.item();
    EXPECT_GT(gp.item(), 0.0f);
  }
  skd::Tape tape;
  Tensor loss = dst::holistic_d_loss(d, qs, qt, image, u, 10.0f, mode);
  EXPECT_NEAR(loss.item(), want, 1e-5);
}

TEST(Holistic, DiscriminatorLossDetachesStudentMap) {
  nets::Network d = nets::build_network(nets::discriminator_spec(7, 0, 3), 52);
  skd::Rng rng = skd::Rng::stream(112, "ho");
  Tensor qs = randn(rng, {2, 4, 16, 16}, 1.0f, true);
  Tensor qt = randn(rng, {2, 4, 16, 16});
  Tensor image = randn(rng, {2, 3, 16, 16});
  Tensor u = Tensor::from({2}, {0.5f, 0.5f});
  skd::Tape tape;
  Tensor loss =
      dst::holistic_d_loss(d, qs, qt, image, u, 10.0f, skd::ops::Mode::TrainNoUpdate);
  skd::backward(loss);
  EXPECT_FALSE(qs.has_grad());
  bool any_d_grad = false;
  for (const auto& [name, t] : d.params) any_d_grad = any_d_grad || t.has_grad();
  EXPECT_TRUE(any_d_grad);
}

TEST(Holistic, ExpectedScoreIsTheBatchMean) {
  nets::Network d = nets::build_network(nets::discriminator_spec(7, 0, 3), 53);
  skd::Rng rng = skd::Rng::stream(113, "ho");
  Tensor q = randn(rng, {3, 4, 16, 16});
  Tensor image = randn(rng, {3, 3, 16, 16});
  Tensor scores = nets::forward_discriminator(d, q, image, skd::ops::Mode::Eval);
  double mean = 0.0;
  for (int i = 0; i < 3; ++i) mean += scores.data()[i];
  mean /= 3.0;
  EXPECT_NEAR(dst::expected_score(d, q, image, skd::ops::Mode::Eval).item(), mean,
              1e-6);
  EXPECT_FLOAT_EQ(
      dst::holistic_s_term(d, q, image, skd::ops::Mode::Eval).item(),
      dst::expected_score(d, q, image, skd::ops::Mode::Eval).item());
}

TEST(Baselines, MimicIsZeroWithThePerfectAdapter) {
  skd::Rng rng = skd::Rng::stream(114, "mi");
  Tensor fs = randn(rng, {2, 4, 3, 3});
  Tensor w = randn(rng, {8, 4});
  Tensor b = randn(rng, {8});
  Tensor ft;
  {
    skd::NoGradGuard off;
    ft = nets::project_channels(fs, w, b);
  }
  EXPECT_LE(dst::mimic_loss(fs, ft, w, b).item(), 1e-12f);
  Tensor w_bad = randn(rng, {8, 5});
  EXPECT_THROW(dst::mimic_loss(fs, ft, w_bad, b), Error);
}

TEST(Baselines, MimicMatchesDoubleOracle) {
  skd::Rng rng = skd::Rng::stream(115, "mi");
  const int n = 2, cs = 3, ct = 5, h = 4, w = 3;
  Tensor fs = randn(rng, {n, cs, h, w});
  Tensor ft = randn(rng, {n, ct, h, w});
  Tensor aw = randn(rng, {ct, cs});
  Tensor ab = randn(rng, {ct});
  double total = 0.0;
  for (int ni = 0; ni < n; ++ni)
    for (int co = 0; co < ct; ++co)
      for (int i = 0; i < h; ++i)
        for (int j = 0; j < w; ++j) {
          double y = ab.data()[co];
          for (int ci = 0; ci < cs; ++ci)
            y += static_cast<double>(aw.data()[co * cs + ci]) *
                 fs.data()[((ni * cs + ci) * h + i) * w + j];
          const double diff = y - ft.data()[((ni * ct + co) * h + i) * w + j];
          total += diff * diff;
        }
  total /= static_cast<double>(n) * ct * h * w;
  EXPECT_NEAR(dst::mimic_loss(fs, ft, aw, ab).item(), total, 1e-4);
}

TEST(Baselines, AttentionMapsAreNormalizedAndScaleInvariant) {
  skd::Rng rng = skd::Rng::stream(116, "at");
  Tensor f = randn(rng, {2, 4, 3, 3});
  Tensor a = dst::attention_map(f);
  ASSERT_EQ(a.shape(), (Shape{2, 1, 3, 3}));
  for (int n = 0; n < 2; ++n) {
    double ss = 0.0;
    for (int i = 0; i < 9; ++i)
      ss += static_cast<double>(a.data()[n * 9 + i]) * a.data()[n * 9 + i];
    EXPECT_NEAR(ss, 1.0, 1e-5);
  }
  Tensor a2 = dst::attention_map(skd::ops::scale(f, 2.0));
  for (int i = 0; i < 18; ++i) EXPECT_NEAR(a2.data()[i], a.data()[i], 1e-5);
  EXPECT_THROW(dst::attention_map(Tensor::zeros({1, 4, 3, 3})), Error);
}

TEST(Baselines, AttentionTransferComparesSpatialMaps) {
  skd::Rng rng = skd::Rng::stream(117, "at");
  Tensor f = randn(rng, {2, 4, 3, 3});
  EXPECT_FLOAT_EQ(dst::attention_transfer_loss(f, f).item(), 0.0f);
  // Channel counts may differ; only the spatial grid must align.
  Tensor wide = randn(rng, {2, 7, 3, 3});
  double total = 0.0;
  Tensor as = dst::attention_map(f);
  Tensor at = dst::attention_map(wide);
  for (int i = 0; i < 18; ++i) {
    const double d = static_cast<double>(as.data()[i]) - at.data()[i];
    total += d * d;
  }
  total /= 18.0;
  EXPECT_NEAR(dst::attention_transfer_loss(f, wide).item(), total, 1e-6);
  Tensor small = randn(rng, {2, 4, 2, 2});
  EXPECT_THROW(dst::attention_transfer_loss(f, small), Error);
}

TEST(Objective, CombinesWeightedTerms) {
  Tensor task = Tensor::scalar(1.5f);
  Tensor pi = Tensor::scalar(0.2f);
  Tensor pa = Tensor::scalar(0.3f);
  Tensor ho = Tensor::scalar(0.4f);
  dst::LossWeights w;
  EXPECT_NEAR(dst::student_objective(task, pi, pa, ho, w).item(),
              1.5 + 10.0 * 0.5 - 0.1 * 0.4, 1e-6);
  w.unlabeled = true;
  const float without_task =
      dst::student_objective(task, pi, pa, ho, w).item();
  Tensor task2 = Tensor::scalar(99.0f);
  EXPECT_FLOAT_EQ(dst::student_objective(task2, pi, pa, ho, w).item(),
                  without_task);
  EXPECT_NEAR(without_task, 10.0 * 0.5 - 0.1 * 0.4, 1e-6);
}
