#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "structkd/common.hpp"
#include "structkd/nets.hpp"
#include "structkd/ops.hpp"
#include "structkd/tensor.hpp"

namespace structkd {
namespace metrics {

// ---------------------------------------------------------------------------
// segmentation

/// Class-by-class pixel counts, rows indexed by ground truth and columns by
/// prediction. Accumulators merge associatively so sharded evaluation gives
/// the same totals as a single pass.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(int classes) : classes_(classes) {
    SKD_CHECK(classes_ >= 2, Config,
              "ConfusionMatrix needs >= 2 classes, got " << classes);
    counts_.assign(static_cast<size_t>(classes_) * classes_, 0);
  }

  int classes() const { return classes_; }

  void add_pixel(int gt, int pred) {
    SKD_CHECK(gt >= 0 && gt < classes_ && pred >= 0 && pred < classes_,
              Domain, "class index out of range: gt=" << gt
                                                      << " pred=" << pred);
    ++counts_[static_cast<size_t>(gt) * classes_ + pred];
  }

  void add(const std::vector<int>& gt, const std::vector<int>& pred) {
    SKD_CHECK(gt.size() == pred.size(), Shape,
              "confusion add: " << gt.size() << " ground-truth vs "
                                << pred.size() << " predicted pixels");
    for (size_t i = 0; i < gt.size(); ++i) add_pixel(gt[i], pred[i]);
  }

  void merge(const ConfusionMatrix& o) {
    SKD_CHECK(o.classes_ == classes_, Shape,
              "confusion merge: class counts differ");
    for (size_t i = 0; i < counts_.size(); ++i) counts_[i] += o.counts_[i];
  }

  std::int64_t count(int gt, int pred) const {
    return counts_[static_cast<size_t>(gt) * classes_ + pred];
  }

  std::int64_t total() const {
    std::int64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  /// Per-class intersection over union; classes absent from both ground
  /// truth and prediction come back as NaN and drop out of the mean.
  std::vector<double> per_class_iou() const {
    std::vector<double> iou(static_cast<size_t>(classes_));
    for (int c = 0; c < classes_; ++c) {
      std::int64_t tp = count(c, c), fp = 0, fn = 0;
      for (int o = 0; o < classes_; ++o) {
        if (o == c) continue;
        fp += count(o, c);
        fn += count(c, o);
      }
      const std::int64_t uni = tp + fp + fn;
      iou[static_cast<size_t>(c)] =
          uni == 0 ? std::numeric_limits<double>::quiet_NaN()
                   : static_cast<double>(tp) / static_cast<double>(uni);
    }
    return iou;
  }

  double miou() const {
    const auto iou = per_class_iou();
    double sum = 0.0;
    int n = 0;
    for (double v : iou)
      if (!std::isnan(v)) {
        sum += v;
        ++n;
      }
    SKD_CHECK(n > 0, Domain, "miou undefined: no pixels accumulated");
    return sum / n;
  }

  double pixel_accuracy() const {
    const std::int64_t t = total();
    SKD_CHECK(t > 0, Domain, "pixel accuracy undefined: no pixels");
    std::int64_t correct = 0;
    for (int c = 0; c < classes_; ++c) correct += count(c, c);
    return static_cast<double>(correct) / static_cast<double>(t);
  }

 private:
  int classes_;
  std::vector<std::int64_t> counts_;
};

// ---------------------------------------------------------------------------
// depth

struct DepthMetrics {
  double rel = 0, log10 = 0, rms = 0;
  double delta1 = 0, delta2 = 0, delta3 = 0;
};

/// Standard depth error suite; thresholds delta_i use strict comparison
/// against 1.25^i.
inline DepthMetrics depth_metrics(const std::vector<float>& pred,
                                  const std::vector<float>& gt) {
  SKD_CHECK(pred.size() == gt.size(), Shape,
            "depth_metrics: " << pred.size() << " predicted vs " << gt.size()
                              << " ground-truth pixels");
  SKD_CHECK(!pred.empty(), Domain, "depth_metrics: empty input");
  double rel = 0, l10 = 0, sq = 0;
  std::int64_t d1 = 0, d2 = 0, d3 = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    const double p = pred[i], g = gt[i];
    SKD_CHECK(p > 0 && g > 0, Domain,
              "depth_metrics: non-positive depth at pixel " << i);
    rel += std::fabs(p - g) / g;
    l10 += std::fabs(std::log10(p) - std::log10(g));
    sq += (p - g) * (p - g);
    const double ratio = std::max(p / g, g / p);
    if (ratio < 1.25) ++d1;
    if (ratio < 1.25 * 1.25) ++d2;
    if (ratio < 1.25 * 1.25 * 1.25) ++d3;
  }
  const double n = static_cast<double>(pred.size());
  DepthMetrics m;
  m.rel = rel / n;
  m.log10 = l10 / n;
  m.rms = std::sqrt(sq / n);
  m.delta1 = d1 / n;
  m.delta2 = d2 / n;
  m.delta3 = d3 / n;
  return m;
}

// ---------------------------------------------------------------------------
// discriminator score analysis

/// Eval-mode per-sample scores of a map set under a trained discriminator.
inline std::vector<float> discriminator_scores(
    nets::Network& d, const Tensor& q, const Tensor& images,
    ops::ConvImpl impl = ops::ConvImpl::Im2col, int batch_size = 8) {
  SKD_CHECK(q.ndim() == 4 && images.ndim() == 4 &&
                q.dim(0) == images.dim(0),
            Shape, "discriminator_scores: map and image batches disagree");
  NoGradGuard off;
  const int n = q.dim(0);
  std::vector<float> out;
  out.reserve(static_cast<size_t>(n));
  const size_t qs = static_cast<size_t>(q.size()) / n;
  const size_t is = static_cast<size_t>(images.size()) / n;
  for (int start = 0; start < n; start += batch_size) {
    const int b = std::min(batch_size, n - start);
    Shape qb = q.shape(), ib = images.shape();
    qb[0] = b;
    ib[0] = b;
    Tensor qt = Tensor::zeros(qb), it = Tensor::zeros(ib);
    std::copy_n(q.data() + static_cast<size_t>(start) * qs, qs * b,
                qt.data());
    std::copy_n(images.data() + static_cast<size_t>(start) * is, is * b,
                it.data());
    Tensor s = nets::forward_discriminator(d, qt, it, ops::Mode::Eval, impl);
    for (int i = 0; i < b; ++i) out.push_back(s.data()[i]);
  }
  return out;
}

/// Mean scores per source, their difference (teacher - student), and
/// histograms over bins shared by both sources for plotting.
struct ScoreStats {
  double mean_teacher = 0;
  double mean_student = 0;
  double difference = 0;
  double hist_lo = 0, hist_hi = 0;
  std::vector<int> hist_teacher;
  std::vector<int> hist_student;
};

inline ScoreStats score_analysis(const std::vector<float>& teacher_scores,
                                 const std::vector<float>& student_scores,
                                 int hist_bins = 20) {
  SKD_CHECK(!teacher_scores.empty() && !student_scores.empty(), Domain,
            "score_analysis: empty score set");
  SKD_CHECK(hist_bins >= 1, Config, "score_analysis: need >= 1 bin");
  ScoreStats st;
  double lo = teacher_scores[0], hi = teacher_scores[0];
  for (float v : teacher_scores) {
    st.mean_teacher += v;
    lo = std::min(lo, static_cast<double>(v));
    hi = std::max(hi, static_cast<double>(v));
  }
  for (float v : student_scores) {
    st.mean_student += v;
    lo = std::min(lo, static_cast<double>(v));
    hi = std::max(hi, static_cast<double>(v));
  }
  st.mean_teacher /= static_cast<double>(teacher_scores.size());
  st.mean_student /= static_cast<double>(student_scores.size());
  st.difference = st.mean_teacher - st.mean_student;
  if (hi <= lo) hi = lo + 1.0;
  st.hist_lo = lo;
  st.hist_hi = hi;
  st.hist_teacher.assign(static_cast<size_t>(hist_bins), 0);
  st.hist_student.assign(static_cast<size_t>(hist_bins), 0);
  const auto bin_of = [&](double v) {
    int b = static_cast<int>((v - lo) / (hi - lo) * hist_bins);
    return std::clamp(b, 0, hist_bins - 1);
  };
  for (float v : teacher_scores) ++st.hist_teacher[static_cast<size_t>(bin_of(v))];
  for (float v : student_scores) ++st.hist_student[static_cast<size_t>(bin_of(v))];
  return st;
}

// ---------------------------------------------------------------------------
// combined report

struct MetricsReport {
  bool has_segmentation = false;
  std::vector<double> per_class_iou;
  double miou = 0;
  double pixel_accuracy = 0;
  bool has_depth = false;
  DepthMetrics depth;
  bool has_scores = false;
  ScoreStats scores;
};

// ---------------------------------------------------------------------------
// CSV

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

namespace mdetail {

inline std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  out += '"';
  return out;
}

inline std::vector<std::string> csv_split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cur += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace mdetail

inline std::string to_csv(const CsvTable& t) {
  std::ostringstream os;
  for (size_t i = 0; i < t.header.size(); ++i)
    os << (i ? "," : "") << mdetail::csv_escape(t.header[i]);
  os << "\n";
  for (const auto& row : t.rows) {
    SKD_CHECK(row.size() == t.header.size(), Shape,
              "csv row has " << row.size() << " cells, header has "
                             << t.header.size());
    for (size_t i = 0; i < row.size(); ++i)
      os << (i ? "," : "") << mdetail::csv_escape(row[i]);
    os << "\n";
  }
  return os.str();
}

inline CsvTable parse_csv(const std::string& text) {
  CsvTable t;
  std::istringstream is(text);
  std::string line;
  bool first = true;
  while (std::getline(is, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = mdetail::csv_split_line(line);
    if (first) {
      t.header = std::move(cells);
      first = false;
    } else {
      SKD_CHECK(cells.size() == t.header.size(), Io,
                "csv line has " << cells.size() << " cells, header has "
                                << t.header.size());
      t.rows.push_back(std::move(cells));
    }
  }
  SKD_CHECK(!t.header.empty(), Io, "csv text has no header line");
  return t;
}

// ---------------------------------------------------------------------------
// SVG histogram

/// Renders two overlaid score histograms as a standalone SVG document.
inline std::string svg_histogram(const ScoreStats& st,
                                 const std::string& label_a = "teacher",
                                 const std::string& label_b = "student") {
  const int width = 640, height = 360, ml = 50, mb = 40, mt = 30, mr = 20;
  const int pw = width - ml - mr, ph = height - mt - mb;
  const size_t bins = st.hist_teacher.size();
  SKD_CHECK(bins > 0 && st.hist_student.size() == bins, Shape,
            "svg_histogram: histogram bins missing or mismatched");
  int peak = 1;
  for (size_t i = 0; i < bins; ++i)
    peak = std::max({peak, st.hist_teacher[i], st.hist_student[i]});
  std::ostringstream os;
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width
     << "\" height=\"" << height << "\" viewBox=\"0 0 " << width << " "
     << height << "\">\n";
  os << "<rect width=\"" << width << "\" height=\"" << height
     << "\" fill=\"white\"/>\n";
  const double bw = static_cast<double>(pw) / static_cast<double>(bins);
  const auto bar = [&](size_t i, int count, const char* fill,
                       double inset) {
    const double x = ml + bw * static_cast<double>(i) + inset;
    const double bh = ph * static_cast<double>(count) / peak;
    os << "<rect x=\"" << x << "\" y=\"" << (mt + ph - bh) << "\" width=\""
       << std::max(1.0, bw - 2 * inset) << "\" height=\"" << bh
       << "\" fill=\"" << fill << "\" fill-opacity=\"0.55\"/>\n";
  };
  for (size_t i = 0; i < bins; ++i) bar(i, st.hist_teacher[i], "#3366cc", 1.0);
  for (size_t i = 0; i < bins; ++i) bar(i, st.hist_student[i], "#cc6633", 3.0);
  os << "<line x1=\"" << ml << "\" y1=\"" << (mt + ph) << "\" x2=\""
     << (ml + pw) << "\" y2=\"" << (mt + ph)
     << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml
     << "\" y2=\"" << (mt + ph) << "\" stroke=\"black\"/>\n";
  os << "<text x=\"" << ml << "\" y=\"" << (height - 12)
     << "\" font-size=\"12\">" << st.hist_lo << "</text>\n";
  os << "<text x=\"" << (ml + pw - 40) << "\" y=\"" << (height - 12)
     << "\" font-size=\"12\">" << st.hist_hi << "</text>\n";
  os << "<text x=\"" << (ml + 10) << "\" y=\"" << (mt - 10)
     << "\" font-size=\"13\" fill=\"#3366cc\">" << label_a
     << " (mean " << st.mean_teacher << ")</text>\n";
  os << "<text x=\"" << (ml + 250) << "\" y=\"" << (mt - 10)
     << "\" font-size=\"13\" fill=\"#cc6633\">" << label_b
     << " (mean " << st.mean_student << ")</text>\n";
  os << "</svg>\n";
  return os.str();
}

}  // namespace metrics
}  // namespace structkd
