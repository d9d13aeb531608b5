#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <istream>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dmil/domain.hpp"
#include "dmil/model.hpp"
#include "dmil/synthdata.hpp"

namespace dmil {

class UndefinedMetricError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct ScoredImage {
  std::string image_id;
  double p_M = 0.0;
  double p_B = 0.0;
  ImageClass true_class = ImageClass::N;
  Matrix region_scores;  // m x 2: d^B, d^M
  std::vector<RegionGeometry> geometry;
  std::vector<LesionAnnotation> annotations;
};

inline ScoredImage score_image(const RegionBag& bag, const ModelParams& params) {
  const ForwardTrace t = forward(bag, params, Mode::Infer);
  return {bag.image_id, t.p_image.m,    t.p_image.b,     image_class(bag.weak_label),
          t.d_scores,   bag.geometry,   bag.annotations};
}

inline std::vector<ScoredImage> score_dataset(std::span<const RegionBag> bags,
                                              const ModelParams& params) {
  std::vector<ScoredImage> out;
  out.reserve(bags.size());
  for (const auto& b : bags) out.push_back(score_image(b, params));
  return out;
}

enum class Task { MvsBN, MBvsN };

inline std::string_view to_string(Task t) { return t == Task::MvsBN ? "MvsBN" : "MBvsN"; }

struct TaskScore {
  double score = 0.0;
  int label = 0;
};

inline TaskScore task_scores(const ScoredImage& s, Task task) {
  if (task == Task::MvsBN)
    return {s.p_M, s.true_class == ImageClass::M || s.true_class == ImageClass::MB};
  return {std::max(s.p_M, s.p_B), s.true_class != ImageClass::N};
}

inline void task_vectors(std::span<const ScoredImage> set, Task task, std::vector<double>& scores,
                         std::vector<int>& labels) {
  scores.clear();
  labels.clear();
  for (const auto& s : set) {
    const auto ts = task_scores(s, task);
    scores.push_back(ts.score);
    labels.push_back(ts.label);
  }
}

struct CurvePoint {
  double threshold = 0.0;
  double x = 0.0;
  double y = 0.0;
  friend bool operator==(const CurvePoint&, const CurvePoint&) = default;
};

struct EvalCurve {
  enum class Kind { ROC, FROC };
  Kind kind = Kind::ROC;
  std::vector<CurvePoint> points;
};

namespace detail {
inline void count_classes(std::span<const int> labels, std::size_t& pos, std::size_t& neg) {
  pos = std::size_t(std::count_if(labels.begin(), labels.end(), [](int l) { return l != 0; }));
  neg = labels.size() - pos;
}
}  // namespace detail

// Mann-Whitney: P(score_pos > score_neg) + 0.5 P(tie), via mid-ranks.
inline double auroc(std::span<const double> scores, std::span<const int> labels) {
  require_shape(scores.size() == labels.size(), "auroc scores vs labels");
  std::size_t pos = 0, neg = 0;
  detail::count_classes(labels, pos, neg);
  if (pos == 0 || neg == 0) throw UndefinedMetricError("auroc needs both classes");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;  // sum of positive mid-ranks (1-based)
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double mid = 0.5 * double(i + 1 + j);
    for (std::size_t r = i; r < j; ++r)
      if (labels[order[r]]) rank_sum += mid;
    i = j;
  }
  const double u = rank_sum - double(pos) * double(pos + 1) / 2.0;
  return u / (double(pos) * double(neg));
}

// ROC from unique thresholds, descending; the first point is (+inf, 0, 0).
inline EvalCurve roc_curve(std::span<const double> scores, std::span<const int> labels) {
  require_shape(scores.size() == labels.size(), "roc scores vs labels");
  std::size_t pos = 0, neg = 0;
  detail::count_classes(labels, pos, neg);
  if (pos == 0 || neg == 0) throw UndefinedMetricError("roc needs both classes");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  EvalCurve c;
  c.kind = EvalCurve::Kind::ROC;
  c.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double thr = scores[order[i]];
    while (i < order.size() && scores[order[i]] == thr) {
      (labels[order[i]] ? tp : fp)++;
      ++i;
    }
    c.points.push_back({thr, double(fp) / double(neg), double(tp) / double(pos)});
  }
  return c;
}

// Mean specificity over the sensitivity band, linear interpolation between
// operating points.
inline double paucr(const EvalCurve& roc, double sens_lo = 0.8, double sens_hi = 1.0) {
  if (!(sens_lo >= 0.0 && sens_lo < sens_hi && sens_hi <= 1.0))
    throw std::invalid_argument("paucr: need 0 <= sens_lo < sens_hi <= 1");
  double area = 0.0;
  for (std::size_t i = 1; i < roc.points.size(); ++i) {
    const auto& a = roc.points[i - 1];
    const auto& b = roc.points[i];
    if (!(b.y > a.y)) continue;
    const double lo = std::max(a.y, sens_lo), hi = std::min(b.y, sens_hi);
    if (!(hi > lo)) continue;
    auto x_at = [&](double y) { return a.x + (b.x - a.x) * (y - a.y) / (b.y - a.y); };
    area += (hi - lo) * (1.0 - 0.5 * (x_at(lo) + x_at(hi)));
  }
  return area / (sens_hi - sens_lo);
}

struct SpecAtSens {
  double specificity = 0.0;
  bool reachable = false;
};

// At the first operating point reaching the requested sensitivity (the one
// with highest specificity on ties), or interpolated from the point before it.
inline SpecAtSens spec_at_sens(const EvalCurve& roc, double sens) {
  for (std::size_t j = 0; j < roc.points.size(); ++j) {
    const auto& b = roc.points[j];
    if (b.y < sens) continue;
    if (j == 0 || b.y == sens) return {1.0 - b.x, true};
    const auto& a = roc.points[j - 1];
    const double x = a.x + (b.x - a.x) * (sens - a.y) / (b.y - a.y);
    return {1.0 - x, true};
  }
  return {0.0, false};
}

// Score threshold whose operating point first reaches the given sensitivity.
inline double threshold_at_sensitivity(std::span<const double> scores, std::span<const int> labels,
                                       double sens) {
  const EvalCurve roc = roc_curve(scores, labels);
  for (const auto& p : roc.points)
    if (p.y >= sens) return p.threshold;
  return -std::numeric_limits<double>::infinity();
}

struct FrocOptions {
  enum class Denominator { AllImages, PositiveImages };
  Denominator fppi_denominator = Denominator::AllImages;
  double iom_threshold = 0.5;
  // Optional population filter (e.g. images flagged by the classifier at an
  // operating point); empty means every image.
  std::vector<bool> include;
};

// Descending unique region scores for a class, preceded by +inf.
inline std::vector<double> froc_thresholds(std::span<const ScoredImage> set, LesionClass cls) {
  std::vector<double> t;
  const std::size_t col = det_column(cls);
  for (const auto& s : set)
    for (std::size_t i = 0; i < s.region_scores.rows(); ++i) t.push_back(s.region_scores(i, col));
  std::sort(t.begin(), t.end(), std::greater<>());
  t.erase(std::unique(t.begin(), t.end()), t.end());
  t.insert(t.begin(), std::numeric_limits<double>::infinity());
  return t;
}

// A region fires when d^c >= threshold. A firing region is a correct
// localization if IoM >= 0.5 with some lesion of the class, otherwise a false
// positive. y: fraction of images containing the class with at least one
// correct localization; x: false positives per image.
inline EvalCurve froc(std::span<const ScoredImage> set, LesionClass cls,
                      std::vector<double> thresholds, const FrocOptions& opts = {}) {
  if (!opts.include.empty()) require_shape(opts.include.size() == set.size(), "froc filter");
  const std::size_t col = det_column(cls);
  std::vector<double> best_hit;  // per positive image; -inf if no region hits
  std::vector<double> false_pos;
  std::size_t images = 0;
  for (std::size_t s = 0; s < set.size(); ++s) {
    if (!opts.include.empty() && !opts.include[s]) continue;
    const auto& img = set[s];
    const bool positive = std::any_of(img.annotations.begin(), img.annotations.end(),
                                      [&](const LesionAnnotation& a) { return a.cls == cls; });
    if (opts.fppi_denominator == FrocOptions::Denominator::AllImages || positive) ++images;
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < img.region_scores.rows(); ++i) {
      const Box r = img.geometry[i].box();
      bool hit = false;
      for (const auto& a : img.annotations)
        if (a.cls == cls && iom(r, a.box) >= opts.iom_threshold) hit = true;
      const double d = img.region_scores(i, col);
      if (hit)
        best = std::max(best, d);
      else if (opts.fppi_denominator == FrocOptions::Denominator::AllImages || positive)
        false_pos.push_back(d);
    }
    if (positive) best_hit.push_back(best);
  }
  if (best_hit.empty()) throw UndefinedMetricError("froc: no image annotated with the class");

  std::sort(best_hit.begin(), best_hit.end());
  std::sort(false_pos.begin(), false_pos.end());
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  auto count_at_least = [](const std::vector<double>& v, double t) {
    return double(v.end() - std::lower_bound(v.begin(), v.end(), t));
  };
  EvalCurve c;
  c.kind = EvalCurve::Kind::FROC;
  for (double t : thresholds)
    c.points.push_back({t, count_at_least(false_pos, t) / double(images),
                        count_at_least(best_hit, t) / double(best_hit.size())});
  return c;
}

inline EvalCurve froc(std::span<const ScoredImage> set, LesionClass cls,
                      const FrocOptions& opts = {}) {
  return froc(set, cls, froc_thresholds(set, cls), opts);
}

// Best sensitivity among operating points with FPPI <= fppi.
inline double sensitivity_at_fppi(const EvalCurve& froc_curve, double fppi) {
  double best = 0.0;
  for (const auto& p : froc_curve.points)
    if (p.x <= fppi) best = std::max(best, p.y);
  return best;
}

// Images a classifier flags at the operating point reaching `sens` on the
// images containing the class (scored by that class's image probability).
inline std::vector<bool> flagged_at_sensitivity(std::span<const ScoredImage> set, LesionClass cls,
                                                double sens) {
  std::vector<double> scores;
  std::vector<int> labels;
  for (const auto& s : set) {
    scores.push_back(cls == LesionClass::M ? s.p_M : s.p_B);
    const bool has = cls == LesionClass::M
                         ? (s.true_class == ImageClass::M || s.true_class == ImageClass::MB)
                         : (s.true_class == ImageClass::B || s.true_class == ImageClass::MB);
    labels.push_back(has);
  }
  const double thr = threshold_at_sensitivity(scores, labels, sens);
  std::vector<bool> out;
  for (double s : scores) out.push_back(s >= thr);
  return out;
}

inline std::string_view to_string(EvalCurve::Kind k) {
  return k == EvalCurve::Kind::ROC ? "ROC" : "FROC";
}

// One comment line naming kind and task, then threshold,x,y rows.
inline void write_curve(std::ostream& os, const EvalCurve& c, std::string_view task) {
  os << "# kind=" << to_string(c.kind) << " task=" << task << " columns=threshold,x,y\n";
  for (const auto& p : c.points)
    os << format_double(p.threshold) << ',' << format_double(p.x) << ',' << format_double(p.y)
       << '\n';
}

struct PlaneRow {
  std::string image_id;
  double p_M = 0.0;
  double p_B = 0.0;
  ImageClass true_class = ImageClass::N;
  friend bool operator==(const PlaneRow&, const PlaneRow&) = default;
};

inline void write_probability_plane(std::ostream& os, std::span<const ScoredImage> set) {
  os << "image_id,p_M,p_B,true_class\n";
  for (const auto& s : set)
    os << s.image_id << ',' << format_double(s.p_M) << ',' << format_double(s.p_B) << ','
       << to_string(s.true_class) << '\n';
}

inline void probability_plane_export(std::span<const ScoredImage> set, const std::string& path) {
  if (set.empty()) throw std::invalid_argument("probability plane: empty scored set");
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot open " + path + " for writing");
  write_probability_plane(os, set);
  if (!os) throw std::runtime_error("write failed: " + path);
}

inline std::vector<PlaneRow> read_probability_plane(std::istream& is) {
  std::vector<PlaneRow> rows;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line_no == 1) continue;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i)
      if (i == line.size() || line[i] == ',') {
        f.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    PlaneRow r;
    if (f.size() != 4 || !parse_double(f[1], r.p_M) || !parse_double(f[2], r.p_B))
      throw ParseError(line_no, f.empty() ? "" : f[0], "bad probability-plane row");
    r.image_id = f[0];
    if (f[3] == "N") r.true_class = ImageClass::N;
    else if (f[3] == "B") r.true_class = ImageClass::B;
    else if (f[3] == "M") r.true_class = ImageClass::M;
    else if (f[3] == "MB") r.true_class = ImageClass::MB;
    else throw ParseError(line_no, r.image_id, "bad class '" + f[3] + "'");
    rows.push_back(r);
  }
  return rows;
}

// Headline measures for one binary task.
struct TaskMetrics {
  double auroc = 0.0;
  double paucr = 0.0;
  double spec_at_085 = 0.0;
  double spec_at_090 = 0.0;
};

inline TaskMetrics task_metrics(std::span<const ScoredImage> set, Task task) {
  std::vector<double> s;
  std::vector<int> l;
  task_vectors(set, task, s, l);
  const EvalCurve roc = roc_curve(s, l);
  return {auroc(s, l), paucr(roc), spec_at_sens(roc, 0.85).specificity,
          spec_at_sens(roc, 0.90).specificity};
}

}  // namespace dmil
