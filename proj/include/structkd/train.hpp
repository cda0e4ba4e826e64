#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "structkd/common.hpp"
#include "structkd/config.hpp"
#include "structkd/distill.hpp"
#include "structkd/io.hpp"
#include "structkd/metrics.hpp"
#include "structkd/nets.hpp"
#include "structkd/ops.hpp"
#include "structkd/tasks.hpp"
#include "structkd/tensor.hpp"

namespace structkd {
namespace train {

// ---------------------------------------------------------------------------
// optimizer and schedule

inline double poly_lr(int iter, int max_iter, double lr0, double power) {
  SKD_CHECK(max_iter > 0 && iter >= 0 && iter <= max_iter, Config,
            "poly_lr: iter " << iter << " outside [0," << max_iter << "]");
  return lr0 * std::pow(1.0 - static_cast<double>(iter) / max_iter, power);
}

/// SGD with momentum and decoupled-from-nothing weight decay folded into the
/// gradient, velocity kept per parameter tensor.
class SgdOptimizer {
 public:
  SgdOptimizer(double momentum, double weight_decay)
      : momentum_(momentum), weight_decay_(weight_decay) {}

  void step(const std::vector<Tensor>& params, double lr) {
    for (const Tensor& p : params) {
      auto* d = p.ptr().get();
      auto& vel = velocity_[d];
      if (vel.empty()) vel.assign(static_cast<size_t>(p.size()), 0.0f);
      float* v = d->v.data();
      const float* g = d->g.data();
      for (int i = 0; i < p.size(); ++i) {
        vel[static_cast<size_t>(i)] =
            static_cast<float>(momentum_) * vel[static_cast<size_t>(i)] +
            g[i] + static_cast<float>(weight_decay_) * v[i];
        v[i] -= static_cast<float>(lr) * vel[static_cast<size_t>(i)];
      }
    }
  }

 private:
  double momentum_, weight_decay_;
  std::map<TensorData*, std::vector<float>> velocity_;
};

inline std::vector<Tensor> trainable_tensors(nets::Network& net) {
  std::vector<Tensor> out;
  out.reserve(net.params.size());
  for (auto& [name, t] : net.params) out.push_back(t);
  return out;
}

// ---------------------------------------------------------------------------
// task loss

/// Cross entropy over labeled samples only: per-pixel negative log
/// likelihood summed per sample, weighted by the labeled mask, normalized by
/// labeled pixel count. Returns a zero scalar for a fully unlabeled batch.
inline Tensor masked_cross_entropy(
    const Tensor& logits, std::shared_ptr<const std::vector<int>> labels,
    const std::vector<float>& labeled_mask) {
  const int n = logits.dim(0), h = logits.dim(2), w = logits.dim(3);
  SKD_CHECK(static_cast<int>(labeled_mask.size()) == n, Shape,
            "masked_cross_entropy: mask size " << labeled_mask.size()
                                               << " vs batch " << n);
  double labeled = 0;
  for (float m : labeled_mask) labeled += m;
  if (labeled == 0) return Tensor::zeros({1});
  Tensor picked = ops::gather_label(ops::log_softmax(logits), labels);
  Tensor per_sample = ops::sum_tail(picked, 1);
  Tensor mask = Tensor::from({n}, std::vector<float>(labeled_mask));
  Tensor sum = ops::sum_all(ops::mul(per_sample, mask));
  return ops::scale(sum, -1.0 / (labeled * h * w));
}

// ---------------------------------------------------------------------------
// evaluation

/// Eval-mode coarse logits for a whole dataset, batched, gradient-free.
inline Tensor collect_coarse_logits(nets::Network& net,
                                    const tasks::Dataset& ds, int batch_size,
                                    ops::ConvImpl impl) {
  SKD_CHECK(ds.size() > 0, Config, "collect_coarse_logits: empty dataset");
  NoGradGuard off;
  Tensor all;
  for (int start = 0; start < ds.size(); start += batch_size) {
    std::vector<int> idx;
    for (int i = start; i < std::min(ds.size(), start + batch_size); ++i)
      idx.push_back(i);
    Tensor images = tasks::batch_images(ds, idx);
    nets::DenseOutput out =
        nets::forward_dense(net, images, ops::Mode::Eval, impl);
    if (start == 0) {
      Shape sh = out.logits.shape();
      sh[0] = ds.size();
      all = Tensor::zeros(sh);
    }
    const size_t stride = static_cast<size_t>(out.logits.size()) /
                          idx.size();
    std::copy_n(out.logits.data(), stride * idx.size(),
                all.data() + static_cast<size_t>(start) * stride);
  }
  return all;
}

/// Full-dataset metrics in eval mode (running BN statistics). Unlabeled
/// samples are skipped.
inline metrics::MetricsReport evaluate(nets::Network& net,
                                       const tasks::Dataset& ds,
                                       const config::TrainConfig& cfg) {
  SKD_CHECK(ds.size() > 0, Config, "evaluate: empty dataset");
  SKD_CHECK(ds.task == cfg.task, Config,
            "evaluate: dataset task " << tasks::task_name(ds.task)
                                      << " does not match config task "
                                      << tasks::task_name(cfg.task));
  const int want = cfg.task == tasks::Task::Segmentation ? ds.classes
                                                         : cfg.depth_bins;
  SKD_CHECK(net.spec.classes == want, Config,
            "evaluate: network emits " << net.spec.classes
                                       << " channels, task needs " << want);
  NoGradGuard off;
  metrics::MetricsReport report;
  const size_t hw = static_cast<size_t>(ds.h) * ds.w;
  metrics::ConfusionMatrix cm(std::max(2, ds.classes));
  tasks::DepthBinning binning(cfg.depth_bins);
  std::vector<float> dpred, dgt;
  bool any_labeled = false;
  for (int start = 0; start < ds.size(); start += cfg.batch_size) {
    std::vector<int> idx;
    for (int i = start; i < std::min(ds.size(), start + cfg.batch_size); ++i)
      idx.push_back(i);
    Tensor images = tasks::batch_images(ds, idx);
    nets::DenseOutput out =
        nets::forward_dense(net, images, ops::Mode::Eval, cfg.conv_impl);
    if (cfg.task == tasks::Task::Segmentation) {
      const float* lg = out.upsampled_logits.data();
      const int c = out.upsampled_logits.dim(1);
      for (size_t b = 0; b < idx.size(); ++b) {
        const tasks::Sample& s = ds.samples[static_cast<size_t>(idx[b])];
        if (!s.labeled) continue;
        any_labeled = true;
        for (size_t p = 0; p < hw; ++p) {
          int best = 0;
          float bv = lg[(b * c + 0) * hw + p];
          for (int ch = 1; ch < c; ++ch) {
            const float v = lg[(b * c + ch) * hw + p];
            if (v > bv) {
              bv = v;
              best = ch;
            }
          }
          cm.add_pixel(s.classes[p], best);
        }
      }
    } else {
      Tensor probs = ops::softmax(out.upsampled_logits);
      Tensor depth = tasks::bins_to_depth(probs, binning);
      const float* dp = depth.data();
      for (size_t b = 0; b < idx.size(); ++b) {
        const tasks::Sample& s = ds.samples[static_cast<size_t>(idx[b])];
        if (!s.labeled) continue;
        any_labeled = true;
        for (size_t p = 0; p < hw; ++p) {
          dpred.push_back(dp[b * hw + p]);
          dgt.push_back(s.depth[p]);
        }
      }
    }
  }
  SKD_CHECK(any_labeled, Config, "evaluate: dataset has no labeled samples");
  if (cfg.task == tasks::Task::Segmentation) {
    report.has_segmentation = true;
    report.per_class_iou = cm.per_class_iou();
    report.miou = cm.miou();
    report.pixel_accuracy = cm.pixel_accuracy();
  } else {
    report.has_depth = true;
    report.depth = metrics::depth_metrics(dpred, dgt);
  }
  return report;
}

// ---------------------------------------------------------------------------
// benchmark data

struct DatasetBundle {
  tasks::Dataset train;
  tasks::Dataset val;
};

/// Generation stream for the synthetic benchmarks. The samples depend only
/// on the geometry and count fields, never on the training seed, so runs
/// with different seeds compare on identical data and one teacher cache
/// serves them all.
constexpr std::uint64_t kBenchmarkSeed = 0x5eedda7aull;

/// Train and val sets for `cfg`, loaded from `data_dir` when it is set and
/// generated otherwise. Unlabeled extras come from their own stream and are
/// appended to the training set with the label mask off.
inline DatasetBundle make_datasets(const config::TrainConfig& cfg) {
  config::validate(cfg);
  DatasetBundle b;
  if (!cfg.data_dir.empty()) {
    b.train = tasks::load_dataset(cfg.data_dir + "/train");
    b.val = tasks::load_dataset(cfg.data_dir + "/val");
    SKD_CHECK(b.train.task == cfg.task && b.val.task == cfg.task, Config,
              "datasets in " << cfg.data_dir << " hold task "
                             << tasks::task_name(b.train.task)
                             << ", config wants "
                             << tasks::task_name(cfg.task));
    return b;
  }
  const int h = cfg.image_h, w = cfg.image_w;
  if (cfg.task == tasks::Task::Segmentation) {
    b.train = tasks::gen_shapes(stream_seed(kBenchmarkSeed, "data:train"),
                                cfg.train_count, h, w, cfg.classes);
    b.val = tasks::gen_shapes(stream_seed(kBenchmarkSeed, "data:val"),
                              cfg.val_count, h, w, cfg.classes);
    if (cfg.unlabeled_count > 0) {
      tasks::Dataset extra =
          tasks::gen_shapes(stream_seed(kBenchmarkSeed, "data:unlabeled"),
                            cfg.unlabeled_count, h, w, cfg.classes);
      for (tasks::Sample& s : extra.samples) {
        s.labeled = false;
        b.train.samples.push_back(std::move(s));
      }
    }
  } else {
    b.train = tasks::gen_depth(stream_seed(kBenchmarkSeed, "data:train"),
                               cfg.train_count, h, w);
    b.val = tasks::gen_depth(stream_seed(kBenchmarkSeed, "data:val"),
                             cfg.val_count, h, w);
    if (cfg.unlabeled_count > 0) {
      tasks::Dataset extra =
          tasks::gen_depth(stream_seed(kBenchmarkSeed, "data:unlabeled"),
                           cfg.unlabeled_count, h, w);
      for (tasks::Sample& s : extra.samples) {
        s.labeled = false;
        b.train.samples.push_back(std::move(s));
      }
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// training engine

struct TrainResult {
  nets::Network net;
  std::unique_ptr<nets::Network> discriminator;
  std::vector<double> task_trace;
  std::vector<double> total_trace;
  std::vector<double> d_trace;
  metrics::MetricsReport val_metrics;
  std::string last_checkpoint;
};

namespace trdetail {

inline Tensor random_uniform01(Rng& rng, int n) {
  std::vector<float> v(static_cast<size_t>(n));
  for (float& x : v) x = static_cast<float>(rng.uniform());
  return Tensor::from({n}, std::move(v));
}

/// Per-batch target assembly shared by both tasks: labels are class indices
/// for segmentation and bin indices for depth.
inline std::shared_ptr<const std::vector<int>> batch_targets(
    const tasks::Dataset& ds, const std::vector<int>& idx,
    const tasks::DepthBinning& binning, std::vector<float>* mask) {
  if (ds.task == tasks::Task::Segmentation)
    return tasks::batch_class_labels(ds, idx, mask);
  const std::vector<float> depths = tasks::batch_depths(ds, idx, mask);
  auto bins = std::make_shared<std::vector<int>>(
      tasks::depth_to_bins(depths, binning));
  return bins;
}

}  // namespace trdetail

/// One training run of `spec` under `cfg`: plain task training when all
/// distillation toggles are off, otherwise the alternating scheme with a
/// frozen teacher (live or cached). The same loop serves teacher
/// pretraining and student distillation so the degenerate configurations
/// coincide exactly.
inline TrainResult run_training(const nets::NetworkSpec& spec,
                                const config::TrainConfig& cfg,
                                const tasks::Dataset& train_ds,
                                const tasks::Dataset& val_ds,
                                nets::Network* teacher = nullptr,
                                const tasks::TeacherCache* cache = nullptr) {
  config::validate(cfg);
  SKD_CHECK(train_ds.task == cfg.task && val_ds.task == cfg.task, Config,
            "run_training: dataset task does not match config");
  SKD_CHECK(train_ds.size() > 0, Config, "run_training: empty training set");
  const bool need_teacher = cfg.toggles.any_distill();
  SKD_CHECK(!need_teacher || teacher || cache, Config,
            "distillation toggles need a teacher network or cache");
  std::uint64_t teacher_hash = 0;
  if (teacher) {
    SKD_CHECK(teacher->frozen, Config, "teacher must be frozen");
    teacher_hash = teacher->params_hash();
    if (cache)
      SKD_CHECK(cache->teacher_hash == teacher_hash, Config,
                "teacher cache was built from different parameters");
  }
  if (cache)
    SKD_CHECK(cache->logits.dim(0) == train_ds.size(), Config,
              "teacher cache covers " << cache->logits.dim(0)
                                      << " samples, dataset has "
                                      << train_ds.size());

  nets::Network net =
      nets::build_network(spec, stream_seed(cfg.seed, "model"));
  std::vector<Tensor> params = trainable_tensors(net);

  // Feature-regression adapter, trained jointly with the student.
  Tensor adapter_w, adapter_b;
  if (cfg.toggles.mimic) {
    int t_channels = 0;
    if (cache) {
      t_channels = cache->features.dim(1);
    } else {
      const int blocks = static_cast<int>(teacher->spec.blocks.size());
      t_channels = teacher->spec.blocks[static_cast<size_t>(blocks - 1)]
                       .out_channels;
      for (int i = blocks - 1; i >= 0; --i)
        if (teacher->spec.blocks[static_cast<size_t>(i)].kind ==
            nets::LayerSpec::Kind::Conv) {
          t_channels =
              teacher->spec.blocks[static_cast<size_t>(i)].out_channels;
          break;
        }
    }
    int s_channels = 0;
    for (int i = static_cast<int>(spec.blocks.size()) - 1; i >= 0; --i)
      if (spec.blocks[static_cast<size_t>(i)].kind ==
          nets::LayerSpec::Kind::Conv) {
        s_channels = spec.blocks[static_cast<size_t>(i)].out_channels;
        break;
      }
    Rng arng = Rng::stream(cfg.seed, "adapter");
    const double bound = std::sqrt(6.0 / s_channels);
    std::vector<float> wv(static_cast<size_t>(t_channels) * s_channels);
    for (float& x : wv) x = static_cast<float>(arng.uniform(-bound, bound));
    adapter_w = Tensor::from({t_channels, s_channels}, std::move(wv), true);
    adapter_b = Tensor::zeros({t_channels}, true);
    params.push_back(adapter_w);
    params.push_back(adapter_b);
  }

  std::unique_ptr<nets::Network> disc;
  std::vector<Tensor> d_params;
  if (cfg.toggles.ho) {
    const nets::NetworkSpec dspec = nets::discriminator_spec(
        spec.classes + spec.in_channels, cfg.d_attention, cfg.d_blocks);
    disc = std::make_unique<nets::Network>(
        nets::build_network(dspec, stream_seed(cfg.seed, "disc")));
    d_params = trainable_tensors(*disc);
  }

  SgdOptimizer opt(cfg.momentum, cfg.weight_decay);
  SgdOptimizer d_opt(cfg.d_momentum, cfg.weight_decay);
  tasks::BatchSampler sampler(train_ds.size(), cfg.batch_size,
                              Rng::stream(cfg.seed, "batch"));
  Rng u_rng = Rng::stream(cfg.seed, "gp_u");
  tasks::DepthBinning binning(cfg.depth_bins);

  TrainResult result;
  std::string last_ckpt;
  for (int iter = 0; iter < cfg.iterations; ++iter) {
    const double lr = poly_lr(iter, cfg.iterations, cfg.lr0, cfg.lr_power);
    const std::vector<int> idx = sampler.next();
    Tensor images = tasks::batch_images(train_ds, idx);
    std::vector<float> labeled_mask;
    auto labels =
        trdetail::batch_targets(train_ds, idx, binning, &labeled_mask);
    double labeled = 0;
    for (float m : labeled_mask) labeled += m;

    double total = 0, task_v = 0;
    try {
      Tape tape;
      nets::DenseOutput so =
          nets::forward_dense(net, images, ops::Mode::Train, cfg.conv_impl);

      Tensor t_logits, t_features;
      if (need_teacher) {
        if (cache) {
          t_logits = tasks::cache_slice(cache->logits, idx);
          t_features = tasks::cache_slice(cache->features, idx);
        } else {
          NoGradGuard off;
          nets::DenseOutput to =
              nets::forward_dense(*teacher, images, ops::Mode::Eval,
                                  cfg.conv_impl);
          t_logits = to.logits;
          t_features = to.features;
        }
        SKD_CHECK(t_logits.dim(2) == so.logits.dim(2) &&
                      t_logits.dim(3) == so.logits.dim(3),
                  Shape, "teacher and student map sizes disagree");
      }

      Tensor d_image;
      if (cfg.toggles.ho) {
        NoGradGuard off;
        d_image = ops::avg_pool(images, spec.total_stride());
      }

      if (cfg.toggles.ho) {
        for (int k = 0; k < cfg.d_steps_per_g_step; ++k) {
          Tensor u = trdetail::random_uniform01(
              u_rng, static_cast<int>(idx.size()));
          disc->zero_grads();
          Tensor dl = distill::holistic_d_loss(
              *disc, so.logits, t_logits, d_image, u, cfg.weights.gp_coeff,
              ops::Mode::Train, cfg.conv_impl);
          backward(dl);
          d_opt.step(d_params, lr * cfg.d_lr_scale);
          result.d_trace.push_back(dl.item());
        }
      }

      Tensor task = masked_cross_entropy(so.upsampled_logits, labels,
                                         labeled_mask);
      Tensor zero = Tensor::zeros({1});
      Tensor pi = cfg.toggles.pi
                      ? distill::pixel_wise_loss(so.logits, t_logits,
                                                 cfg.temperature,
                                                 cfg.kl_reverse)
                      : zero;
      Tensor pa = cfg.toggles.pa
                      ? distill::pair_wise_loss_batch(so.features, t_features,
                                                      cfg.alpha, cfg.beta)
                      : zero;
      Tensor ho_s = cfg.toggles.ho
                        ? distill::holistic_s_term(*disc, so.logits, d_image,
                                                   ops::Mode::TrainNoUpdate,
                                                   cfg.conv_impl)
                        : zero;
      distill::LossWeights w = cfg.weights;
      w.unlabeled = labeled == 0;
      Tensor obj = distill::student_objective(task, pi, pa, ho_s, w);
      if (cfg.toggles.mimic)
        obj = ops::add(obj, ops::scale(distill::mimic_loss(
                                           so.features, t_features, adapter_w,
                                           adapter_b),
                                       cfg.weights.lambda1));
      if (cfg.toggles.at)
        obj = ops::add(obj,
                       ops::scale(distill::attention_transfer_loss(
                                      so.features, t_features),
                                  cfg.weights.lambda1));
      if (cfg.toggles.local)
        obj = ops::add(obj, ops::scale(distill::local_pairwise_loss(
                                           so.features, t_features),
                                       cfg.weights.lambda1));

      net.zero_grads();
      if (cfg.toggles.mimic) {
        adapter_w.zero_grad();
        adapter_b.zero_grad();
      }
      backward(obj);
      opt.step(params, lr);
      total = obj.item();
      task_v = task.item();
    } catch (const Error& e) {
      // An overflowing step stops inside the op that noticed it first, as
      // a finite check in checked builds or as a domain violation once the
      // bad values reach a log or norm; attach the training context and
      // report it as divergence either way.
      if (e.kind() != ErrorKind::Numeric && e.kind() != ErrorKind::Domain)
        throw;
      std::ostringstream msg;
      msg << "training diverged (" << e.what() << ") at iteration " << iter;
      if (!last_ckpt.empty())
        msg << "; last good checkpoint: " << last_ckpt;
      throw Error(ErrorKind::Numeric, msg.str());
    }

    if (teacher)
      SKD_CHECK(teacher->params_hash() == teacher_hash, Numeric,
                "teacher parameters changed at iteration " << iter);

    if (!std::isfinite(total)) {
      std::ostringstream msg;
      msg << "training diverged (non-finite loss) at iteration " << iter;
      if (!last_ckpt.empty())
        msg << "; last good checkpoint: " << last_ckpt;
      throw Error(ErrorKind::Numeric, msg.str());
    }
    result.task_trace.push_back(task_v);
    result.total_trace.push_back(total);

    if (!cfg.out_dir.empty() && (iter + 1) % cfg.checkpoint_every == 0 &&
        iter + 1 < cfg.iterations) {
      last_ckpt = cfg.out_dir + "/ckpt_last";
      nets::save_checkpoint(net, cfg.seed, iter + 1, last_ckpt);
    }
  }

  result.val_metrics = evaluate(net, val_ds, cfg);

  // Score statistics of teacher vs student maps under the final
  // discriminator, when both are available.
  if (disc && teacher && val_ds.size() > 0) {
    NoGradGuard off;
    Tensor tq = collect_coarse_logits(*teacher, val_ds, cfg.batch_size,
                                      cfg.conv_impl);
    Tensor sq = collect_coarse_logits(net, val_ds, cfg.batch_size,
                                      cfg.conv_impl);
    std::vector<int> all(static_cast<size_t>(val_ds.size()));
    for (int i = 0; i < val_ds.size(); ++i) all[static_cast<size_t>(i)] = i;
    Tensor images = tasks::batch_images(val_ds, all);
    Tensor pooled = ops::avg_pool(images, spec.total_stride());
    const auto ts = metrics::discriminator_scores(*disc, tq, pooled,
                                                  cfg.conv_impl,
                                                  cfg.batch_size);
    const auto ss = metrics::discriminator_scores(*disc, sq, pooled,
                                                  cfg.conv_impl,
                                                  cfg.batch_size);
    result.val_metrics.scores = metrics::score_analysis(ts, ss);
    result.val_metrics.has_scores = true;
  }

  if (!cfg.out_dir.empty()) {
    nets::save_checkpoint(net, cfg.seed, cfg.iterations,
                          cfg.out_dir + "/final");
    result.last_checkpoint = cfg.out_dir + "/final";
    if (disc)
      nets::save_checkpoint(*disc, cfg.seed, cfg.iterations,
                            cfg.out_dir + "/disc_final");
  } else {
    result.last_checkpoint = last_ckpt;
  }
  result.net = std::move(net);
  result.discriminator = std::move(disc);
  return result;
}

/// Teacher pretraining: plain task training of the wide architecture.
inline TrainResult train_teacher(const config::TrainConfig& cfg,
                                 const tasks::Dataset& train_ds,
                                 const tasks::Dataset& val_ds) {
  config::TrainConfig c = cfg;
  c.toggles = config::Toggles{};
  const int classes = c.task == tasks::Task::Segmentation ? c.classes
                                                          : c.depth_bins;
  return run_training(nets::teacher_spec(classes), c, train_ds, val_ds);
}

/// Student distillation against a frozen teacher (live or cached).
inline TrainResult distill_train(const config::TrainConfig& cfg,
                                 const tasks::Dataset& train_ds,
                                 const tasks::Dataset& val_ds,
                                 nets::Network* teacher,
                                 const tasks::TeacherCache* cache = nullptr) {
  const int classes = cfg.task == tasks::Task::Segmentation
                          ? cfg.classes
                          : cfg.depth_bins;
  return run_training(nets::student_spec(classes), cfg, train_ds, val_ds,
                      teacher, cache);
}

// ---------------------------------------------------------------------------
// gradient checking

struct GradcheckReport {
  std::string component;
  double max_rel_err = 0;
  int coords = 0;
  bool pass = false;
};

namespace trdetail {

/// Central-difference comparison on a handful of coordinates per leaf.
/// Relative error uses an absolute floor so near-zero gradients compare by
/// absolute difference instead.
template <class LossFn>
std::pair<double, int> fd_compare(LossFn&& build_loss,
                                  const std::vector<Tensor>& leaves,
                                  Rng& rng, int coords_per_leaf = 6,
                                  double eps = 1e-2) {
  for (Tensor l : leaves) l.zero_grad();
  {
    Tape tape;
    Tensor loss = build_loss();
    backward(loss);
  }
  double worst = 0;
  int checked = 0;
  for (Tensor leaf : leaves) {
    const int n = leaf.size();
    const int k = std::min(coords_per_leaf, n);
    const std::vector<int> perm = rng.permutation(n);
    for (int j = 0; j < k; ++j) {
      const int c = perm[static_cast<size_t>(j)];
      const float orig = leaf.data()[c];
      double fp, fm;
      {
        Tape tape;
        leaf.data()[c] = orig + static_cast<float>(eps);
        fp = build_loss().item();
      }
      {
        Tape tape;
        leaf.data()[c] = orig - static_cast<float>(eps);
        fm = build_loss().item();
      }
      leaf.data()[c] = orig;
      const double numeric = (fp - fm) / (2.0 * eps);
      // A leaf the loss never touches keeps an unallocated grad buffer,
      // which reads as zero.
      const auto& gbuf = leaf.ptr()->g;
      const double analytic =
          gbuf.empty() ? 0.0 : gbuf[static_cast<size_t>(c)];
      const double rel = std::fabs(analytic - numeric) /
                         std::max({std::fabs(analytic), std::fabs(numeric),
                                   0.1});
      worst = std::max(worst, rel);
      ++checked;
    }
  }
  return {worst, checked};
}

inline Tensor gc_randn(Rng& rng, Shape sh, double scale = 1.0,
                       bool leaf = false) {
  std::vector<float> v(static_cast<size_t>(numel(sh)));
  for (float& x : v) x = static_cast<float>(rng.normal() * scale);
  return Tensor::from(std::move(sh), std::move(v), leaf);
}

}  // namespace trdetail

inline const std::vector<std::string>& gradcheck_components() {
  static const std::vector<std::string> names = {
      "pixel_wise",   "pair_wise_full",     "pair_wise_local",
      "holistic_s",   "holistic_d",         "mimic",
      "attention_transfer"};
  return names;
}

/// Finite-difference check of one registered loss on a miniature instance.
/// Accepts the aliases pair_wise (full graph) and holistic_gp (the
/// discriminator loss, whose gradient flows through the penalty term).
inline GradcheckReport run_gradcheck(const std::string& component,
                                     std::uint64_t seed) {
  using trdetail::fd_compare;
  using trdetail::gc_randn;
  std::string name = component;
  if (name == "pair_wise") name = "pair_wise_full";
  if (name == "holistic_gp") name = "holistic_d";
  Rng rng = Rng::stream(seed, "gradcheck:" + name);
  GradcheckReport rep;
  rep.component = name;
  std::pair<double, int> r{0.0, 0};

  if (name == "pixel_wise") {
    Tensor s = gc_randn(rng, {2, 5, 6, 6}, 1.0, true);
    Tensor t = gc_randn(rng, {2, 5, 6, 6});
    r = fd_compare(
        [&] { return distill::pixel_wise_loss(s, t, 1.0, false); }, {s},
        rng);
  } else if (name == "pair_wise_full" || name == "pair_wise_local") {
    const int alpha = name == "pair_wise_full" ? 0 : 9;
    Tensor s = gc_randn(rng, {2, 5, 6, 6}, 1.0, true);
    Tensor t = gc_randn(rng, {2, 5, 6, 6});
    r = fd_compare(
        [&] { return distill::pair_wise_loss_batch(s, t, alpha, 1); }, {s},
        rng, 8);
  } else if (name == "holistic_s" || name == "holistic_d") {
    nets::Network disc = nets::build_network(
        nets::discriminator_spec(5 + 3, 1, 3),
        stream_seed(seed, "gradcheck:disc"));
    // Central differences are only valid where the loss is smooth inside
    // the probe window. A relu gate flip makes the penalty term jump, and
    // the difference quotient divides that jump by the step, so the check
    // evaluates at a point with every gate held open. Normalized batches
    // of n values satisfy |z| <= sqrt(n-1), so gain 0.2 with shift 1.5 in
    // front of each relu bounds its inputs away from zero for every seed
    // while keeping activations near unit scale. A nonzero attention gain
    // keeps the projection weights observable.
    for (size_t bi = 0; bi < disc.spec.blocks.size(); ++bi) {
      const std::string bp = "b" + std::to_string(bi);
      if (disc.spec.blocks[bi].kind == nets::LayerSpec::Kind::BatchNorm &&
          bi + 1 < disc.spec.blocks.size() &&
          disc.spec.blocks[bi + 1].kind == nets::LayerSpec::Kind::Relu) {
        Tensor gamma = disc.param(bp + ".bn.gamma");
        Tensor beta = disc.param(bp + ".bn.beta");
        for (int c = 0; c < beta.size(); ++c) {
          gamma.data()[c] = 0.2f;
          beta.data()[c] = 1.5f;
        }
      } else if (disc.spec.blocks[bi].kind ==
                 nets::LayerSpec::Kind::SelfAttention) {
        disc.param(bp + ".attn.gamma").data()[0] = 0.5f;
      }
    }
    Tensor q_s = gc_randn(rng, {2, 5, 8, 8}, 1.0, name == "holistic_s");
    Tensor q_t = gc_randn(rng, {2, 5, 8, 8});
    Tensor img = gc_randn(rng, {2, 3, 8, 8}, 0.5);
    if (name == "holistic_s") {
      r = fd_compare(
          [&] {
            return distill::holistic_s_term(disc, q_s, img,
                                            ops::Mode::TrainNoUpdate);
          },
          {q_s}, rng);
    } else {
      Tensor u = trdetail::random_uniform01(rng, 2);
      std::vector<Tensor> leaves;
      bool got_attn = false, got_gamma = false, got_bn = false;
      int convs = 0;
      for (auto& [pname, t] : disc.params) {
        if (convs < 2 && pname.find(".conv.w") != std::string::npos) {
          leaves.push_back(t);
          ++convs;
        } else if (!got_attn && pname.find(".attn.f_w") !=
                                    std::string::npos) {
          leaves.push_back(t);
          got_attn = true;
        } else if (!got_gamma && pname.find(".attn.gamma") !=
                                     std::string::npos) {
          leaves.push_back(t);
          got_gamma = true;
        } else if (!got_bn && pname.find(".bn.gamma") !=
                                  std::string::npos) {
          leaves.push_back(t);
          got_bn = true;
        }
      }
      SKD_CHECK(leaves.size() >= 4, Config,
                "gradcheck holistic_d: parameter selection failed");
      // The probe step is doubled here: the loss runs three score passes
      // plus an inner gradient sweep, and the larger step keeps rounding
      // noise in the difference quotient below the truncation error.
      r = fd_compare(
          [&] {
            return distill::holistic_d_loss(disc, q_s, q_t, img, u, 10.0f,
                                            ops::Mode::TrainNoUpdate);
          },
          leaves, rng, 4, 2e-2);
    }
  } else if (name == "mimic") {
    Tensor fs = gc_randn(rng, {2, 4, 6, 6}, 1.0, true);
    Tensor ft = gc_randn(rng, {2, 8, 6, 6});
    Tensor aw = gc_randn(rng, {8, 4}, 0.5, true);
    Tensor ab = Tensor::zeros({8}, true);
    r = fd_compare(
        [&] { return distill::mimic_loss(fs, ft, aw, ab); }, {fs, aw, ab},
        rng);
  } else if (name == "attention_transfer") {
    Tensor fs = gc_randn(rng, {2, 4, 6, 6}, 1.0, true);
    Tensor ft = gc_randn(rng, {2, 7, 6, 6});
    r = fd_compare(
        [&] { return distill::attention_transfer_loss(fs, ft); }, {fs},
        rng);
  } else {
    SKD_CHECK(false, Config, "unknown gradcheck component '" << component
                                                             << "'");
  }
  rep.max_rel_err = r.first;
  rep.coords = r.second;
  rep.pass = r.first < 1e-3;
  return rep;
}

// ---------------------------------------------------------------------------
// run records and reporting

struct RunRecord {
  std::string scheme;
  tasks::Task task = tasks::Task::Segmentation;
  std::uint64_t seed = 0;
  metrics::MetricsReport metrics;
  std::string config_text;
};

/// Canonical scheme label from the toggles, matching the ablation row names.
inline std::string scheme_name(const config::Toggles& t) {
  if (!t.any_distill()) return "baseline";
  std::string s;
  if (t.pi) s += "+PI";
  if (t.pa) s += "+PA";
  if (t.ho) s += "+HO";
  if (t.mimic) s += "+MIMIC";
  if (t.at) s += "+AT";
  if (t.local) s += "+LOCAL";
  return s;
}

namespace trdetail {

inline std::string fmt_full(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline std::string fmt_round(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(4) << v;
  return os.str();
}

}  // namespace trdetail

inline void save_run_record(const RunRecord& rec, const std::string& dir) {
  io::ensure_dir(dir);
  std::ostringstream os;
  os << "structkd-run 1\n";
  os << "scheme " << rec.scheme << "\n";
  os << "task " << tasks::task_name(rec.task) << "\n";
  os << "seed " << rec.seed << "\n";
  const auto& m = rec.metrics;
  if (m.has_segmentation) {
    os << "miou " << trdetail::fmt_full(m.miou) << "\n";
    os << "pixel_accuracy " << trdetail::fmt_full(m.pixel_accuracy) << "\n";
    for (size_t c = 0; c < m.per_class_iou.size(); ++c) {
      os << "iou " << c << " ";
      if (std::isnan(m.per_class_iou[c]))
        os << "absent";
      else
        os << trdetail::fmt_full(m.per_class_iou[c]);
      os << "\n";
    }
  }
  if (m.has_depth) {
    os << "rel " << trdetail::fmt_full(m.depth.rel) << "\n";
    os << "log10 " << trdetail::fmt_full(m.depth.log10) << "\n";
    os << "rms " << trdetail::fmt_full(m.depth.rms) << "\n";
    os << "delta1 " << trdetail::fmt_full(m.depth.delta1) << "\n";
    os << "delta2 " << trdetail::fmt_full(m.depth.delta2) << "\n";
    os << "delta3 " << trdetail::fmt_full(m.depth.delta3) << "\n";
  }
  if (m.has_scores) {
    os << "score_teacher " << trdetail::fmt_full(m.scores.mean_teacher)
       << "\n";
    os << "score_student " << trdetail::fmt_full(m.scores.mean_student)
       << "\n";
    os << "score_difference " << trdetail::fmt_full(m.scores.difference)
       << "\n";
    os << "hist_range " << trdetail::fmt_full(m.scores.hist_lo) << " "
       << trdetail::fmt_full(m.scores.hist_hi) << "\n";
    os << "hist_teacher";
    for (int v : m.scores.hist_teacher) os << " " << v;
    os << "\nhist_student";
    for (int v : m.scores.hist_student) os << " " << v;
    os << "\n";
  }
  io::write_text(dir + "/record.txt", os.str());
  if (!rec.config_text.empty())
    io::write_text(dir + "/config.txt", rec.config_text);
}

inline RunRecord load_run_record(const std::string& dir) {
  const auto lines = io::split_lines(io::read_text(dir + "/record.txt"));
  SKD_CHECK(!lines.empty() && lines[0] == "structkd-run 1", Io,
            "not a run record: " << dir << "/record.txt");
  RunRecord rec;
  auto& m = rec.metrics;
  for (size_t i = 1; i < lines.size(); ++i) {
    const auto f = io::split_ws(lines[i]);
    if (f.empty()) continue;
    const std::string& k = f[0];
    if (k == "scheme") {
      rec.scheme = f.at(1);
    } else if (k == "task") {
      rec.task = f.at(1) == "depth" ? tasks::Task::Depth
                                    : tasks::Task::Segmentation;
    } else if (k == "seed") {
      rec.seed = std::stoull(f.at(1));
    } else if (k == "miou") {
      m.miou = std::stod(f.at(1));
      m.has_segmentation = true;
    } else if (k == "pixel_accuracy") {
      m.pixel_accuracy = std::stod(f.at(1));
    } else if (k == "iou") {
      const size_t c = static_cast<size_t>(std::stoi(f.at(1)));
      if (m.per_class_iou.size() <= c) m.per_class_iou.resize(c + 1);
      m.per_class_iou[c] = f.at(2) == "absent"
                               ? std::numeric_limits<double>::quiet_NaN()
                               : std::stod(f.at(2));
    } else if (k == "rel") {
      m.depth.rel = std::stod(f.at(1));
      m.has_depth = true;
    } else if (k == "log10") {
      m.depth.log10 = std::stod(f.at(1));
    } else if (k == "rms") {
      m.depth.rms = std::stod(f.at(1));
    } else if (k == "delta1") {
      m.depth.delta1 = std::stod(f.at(1));
    } else if (k == "delta2") {
      m.depth.delta2 = std::stod(f.at(1));
    } else if (k == "delta3") {
      m.depth.delta3 = std::stod(f.at(1));
    } else if (k == "score_teacher") {
      m.scores.mean_teacher = std::stod(f.at(1));
      m.has_scores = true;
    } else if (k == "score_student") {
      m.scores.mean_student = std::stod(f.at(1));
    } else if (k == "score_difference") {
      m.scores.difference = std::stod(f.at(1));
    } else if (k == "hist_range") {
      m.scores.hist_lo = std::stod(f.at(1));
      m.scores.hist_hi = std::stod(f.at(2));
    } else if (k == "hist_teacher") {
      for (size_t j = 1; j < f.size(); ++j)
        m.scores.hist_teacher.push_back(std::stoi(f[j]));
    } else if (k == "hist_student") {
      for (size_t j = 1; j < f.size(); ++j)
        m.scores.hist_student.push_back(std::stoi(f[j]));
    } else {
      SKD_CHECK(false, Io, "unknown record line: " << lines[i]);
    }
  }
  std::ifstream cf(dir + "/config.txt");
  if (cf) {
    std::ostringstream ss;
    ss << cf.rdbuf();
    rec.config_text = ss.str();
  }
  return rec;
}

/// Ablation table over run records: known schemes first in their canonical
/// order, then any others by first appearance; one row per scheme with
/// mean and (for multiple seeds) sample standard deviation.
inline metrics::CsvTable ablation_table(
    const std::vector<RunRecord>& records) {
  SKD_CHECK(!records.empty(), Config, "ablation_table: no run records");
  for (const auto& r : records)
    SKD_CHECK(r.task == records[0].task, Config,
              "ablation_table: mixed tasks in one table");
  const bool seg = records[0].task == tasks::Task::Segmentation;
  std::vector<std::string> order = {"baseline", "+PI", "+PI+PA",
                                    "+PI+PA+HO"};
  for (const auto& r : records)
    if (std::find(order.begin(), order.end(), r.scheme) == order.end())
      order.push_back(r.scheme);

  metrics::CsvTable t;
  t.header = {"scheme",         "task",          "seeds",
              "miou_mean",      "miou_std",      "pixel_acc_mean",
              "pixel_acc_std",  "rel_mean",      "rel_std",
              "rms_mean",       "rms_std",       "score_diff_mean"};
  const auto stats = [](const std::vector<double>& v) {
    double mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0;
    for (double x : v) var += (x - mean) * (x - mean);
    const double sd =
        v.size() > 1 ? std::sqrt(var / static_cast<double>(v.size() - 1))
                     : 0.0;
    return std::make_pair(mean, sd);
  };
  for (const std::string& scheme : order) {
    std::vector<double> miou, acc, rel, rms, sdiff;
    int n = 0;
    for (const auto& r : records) {
      if (r.scheme != scheme) continue;
      ++n;
      if (r.metrics.has_segmentation) {
        miou.push_back(r.metrics.miou);
        acc.push_back(r.metrics.pixel_accuracy);
      }
      if (r.metrics.has_depth) {
        rel.push_back(r.metrics.depth.rel);
        rms.push_back(r.metrics.depth.rms);
      }
      if (r.metrics.has_scores) sdiff.push_back(r.metrics.scores.difference);
    }
    if (n == 0) continue;
    std::vector<std::string> row(t.header.size(), "");
    row[0] = scheme;
    row[1] = tasks::task_name(records[0].task);
    row[2] = std::to_string(n);
    if (seg && !miou.empty()) {
      const auto [mm, ms] = stats(miou);
      const auto [am, as] = stats(acc);
      row[3] = trdetail::fmt_round(mm);
      if (n > 1) row[4] = trdetail::fmt_round(ms);
      row[5] = trdetail::fmt_round(am);
      if (n > 1) row[6] = trdetail::fmt_round(as);
    }
    if (!seg && !rel.empty()) {
      const auto [rm, rs] = stats(rel);
      const auto [sm, ss] = stats(rms);
      row[7] = trdetail::fmt_round(rm);
      if (n > 1) row[8] = trdetail::fmt_round(rs);
      row[9] = trdetail::fmt_round(sm);
      if (n > 1) row[10] = trdetail::fmt_round(ss);
    }
    if (!sdiff.empty()) row[11] = trdetail::fmt_round(stats(sdiff).first);
    t.rows.push_back(std::move(row));
  }
  return t;
}

/// Writes report.csv plus scores.svg (when any record carries score
/// histograms) into `dir`.
inline void write_report(const std::vector<RunRecord>& records,
                         const std::string& dir) {
  io::ensure_dir(dir);
  io::write_text(dir + "/report.csv",
                 metrics::to_csv(ablation_table(records)));
  for (const auto& r : records)
    if (r.metrics.has_scores) {
      io::write_text(dir + "/scores.svg",
                     metrics::svg_histogram(r.metrics.scores));
      break;
    }
}

}  // namespace train
}  // namespace structkd
