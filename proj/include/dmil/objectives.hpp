#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "dmil/domain.hpp"
#include "dmil/model.hpp"

namespace dmil {

// All objectives here are losses to minimize: negated log-likelihoods.

inline constexpr double kProbEps = 1e-12;

// Only the lower end needs a guard: -log stays finite and a perfect
// prediction costs exactly 0.
inline double clamp_prob(double p) { return std::clamp(p, kProbEps, 1.0); }

class DegenerateSplitError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct SupervisionSplit {
  std::vector<std::size_t> weak_indices;
  std::vector<std::size_t> full_indices;
  std::size_t m_f = 0;  // region labels across the full images, Ignored excluded
  std::size_t n = 0;
};

inline std::size_t count_labeled(std::span<const RegionLabel> labels) {
  return std::size_t(std::count_if(labels.begin(), labels.end(),
                                   [](RegionLabel l) { return l != RegionLabel::Ignored; }));
}

inline bool has_malignant_region(std::span<const RegionLabel> labels) {
  return std::find(labels.begin(), labels.end(), RegionLabel::M) != labels.end();
}

// Splits images by their supervision tag; region_labels[t] is used only when
// image t is full.
inline SupervisionSplit make_split(std::span<const Supervision> supervision,
                                   std::span<const std::vector<RegionLabel>> region_labels) {
  SupervisionSplit s;
  s.n = supervision.size();
  for (std::size_t t = 0; t < supervision.size(); ++t) {
    if (supervision[t] == Supervision::Full) {
      s.full_indices.push_back(t);
      s.m_f += count_labeled(region_labels[t]);
    } else {
      s.weak_indices.push_back(t);
    }
  }
  return s;
}

inline SupervisionSplit all_weak_split(std::size_t n) {
  SupervisionSplit s;
  s.n = n;
  for (std::size_t t = 0; t < n; ++t) s.weak_indices.push_back(t);
  return s;
}

struct LossWeights {
  double lambda2 = 1.0;
  double beta = 1.0;
  // The benign weak term runs over every image when set, else over the weak
  // subset only.
  bool b_term_all_images = true;
  // Off when a mini-batch holds no weakly labeled image.
  bool weak_m_term = true;

  double lambda1(const SupervisionSplit& s) const {
    return s.m_f > 0 ? beta / double(s.m_f) : 0.0;
  }
};

struct WeakTerms {
  double m = 0.0;
  double b = 0.0;
  double total() const { return m + b; }
};

inline double neg_log_bernoulli(double p_one, int y) {
  return -std::log(clamp_prob(y ? p_one : 1.0 - p_one));
}

inline WeakTerms weak_image_loss(const ImageProbs& p, const WeakLabel& label) {
  return {neg_log_bernoulli(p.m, label.y_M), neg_log_bernoulli(p.b, label.y_B)};
}

inline WeakTerms weak_image_loss(const ForwardTrace& trace, const WeakLabel& label) {
  return weak_image_loss(trace.p_image, label);
}

// p_cls(BN | r) is the complement of the malignant probability, i.e. B + N.
inline double full_cls_loss(const ForwardTrace& trace, std::span<const RegionLabel> labels) {
  require_shape(labels.size() == trace.m(), "region labels vs trace");
  double loss = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    switch (labels[i]) {
      case RegionLabel::M:
        loss -= std::log(clamp_prob(trace.p_cls(i, kColM)));
        break;
      case RegionLabel::BN:
        loss -= std::log(clamp_prob(trace.p_cls(i, kColB) + trace.p_cls(i, kColN)));
        break;
      case RegionLabel::Ignored:
        break;
    }
  }
  return loss;
}

// Uses the unmasked detection distribution. Returns nullopt when the image has
// no malignant region (or the model has no detection branch); such images are
// left out of the detection average.
inline std::optional<double> full_det_loss(const ForwardTrace& trace,
                                           std::span<const RegionLabel> labels) {
  require_shape(labels.size() == trace.m(), "region labels vs trace");
  if (!has_malignant_region(labels) || trace.p_det_full.empty()) return std::nullopt;
  double mass = 0.0;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == RegionLabel::M) mass += trace.p_det_full(i, kDetM);
  return -std::log(std::clamp(mass, kProbEps, 1.0));
}

// Per-image multipliers that turn per-image terms into the batch objective.
struct LossCoefficients {
  std::vector<double> weak_m;
  std::vector<double> weak_b;
  std::vector<double> cls;
  std::vector<double> det;
};

inline LossCoefficients loss_coefficients(const SupervisionSplit& split,
                                          const LossWeights& weights,
                                          std::span<const std::vector<RegionLabel>> region_labels,
                                          bool has_detection) {
  const std::size_t n = split.n;
  LossCoefficients c{std::vector<double>(n, 0.0), std::vector<double>(n, 0.0),
                     std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)};
  if (split.weak_indices.size() + split.full_indices.size() != n)
    throw DegenerateSplitError("split does not cover the batch");
  if (weights.weak_m_term) {
    if (split.weak_indices.empty())
      throw DegenerateSplitError("weak objective requested with no weakly labeled image");
    for (std::size_t t : split.weak_indices) c.weak_m[t] = 1.0 / double(split.weak_indices.size());
  }
  if (weights.b_term_all_images) {
    for (std::size_t t = 0; t < n; ++t) c.weak_b[t] = 1.0 / double(n);
  } else if (!split.weak_indices.empty()) {
    for (std::size_t t : split.weak_indices) c.weak_b[t] = 1.0 / double(split.weak_indices.size());
  }
  if (weights.lambda2 != 0.0 && !split.full_indices.empty()) {
    const double l1 = weights.lambda1(split);
    std::size_t with_m = 0;
    for (std::size_t t : split.full_indices) {
      c.cls[t] = weights.lambda2 * l1;
      if (has_detection && has_malignant_region(region_labels[t])) ++with_m;
    }
    if (with_m > 0)
      for (std::size_t t : split.full_indices)
        if (has_detection && has_malignant_region(region_labels[t]))
          c.det[t] = weights.lambda2 / double(with_m);
  }
  return c;
}

struct LossBreakdown {
  double total = 0.0;
  double weak = 0.0;      // L^W
  double full_cls = 0.0;  // L^F_Cls before lambda1
  double full_det = 0.0;  // L^F_Det, averaged
};

// L = L^W + lambda2 (lambda1 L^F_Cls + L^F_Det).
inline LossBreakdown total_loss(std::span<const ForwardTrace> traces,
                                std::span<const WeakLabel> weak_labels,
                                std::span<const std::vector<RegionLabel>> region_labels,
                                const SupervisionSplit& split, const LossWeights& weights) {
  require_shape(traces.size() == split.n && weak_labels.size() == split.n &&
                    region_labels.size() == split.n,
                "batch vs split");
  const bool has_det = std::all_of(traces.begin(), traces.end(),
                                   [](const ForwardTrace& t) { return !t.p_det_full.empty(); });
  const auto c = loss_coefficients(split, weights, region_labels, has_det);
  LossBreakdown out;
  std::size_t det_count = 0;
  for (std::size_t t = 0; t < split.n; ++t) {
    const WeakTerms w = weak_image_loss(traces[t], weak_labels[t]);
    out.weak += c.weak_m[t] * w.m + c.weak_b[t] * w.b;
    if (c.cls[t] != 0.0) {
      const double cls = full_cls_loss(traces[t], region_labels[t]);
      out.full_cls += cls;
      out.total += c.cls[t] * cls;
    }
    if (c.det[t] != 0.0) {
      const double det = *full_det_loss(traces[t], region_labels[t]);
      out.full_det += det;
      out.total += c.det[t] * det;
      ++det_count;
    }
  }
  if (det_count > 0) out.full_det /= double(det_count);
  out.total += out.weak;
  return out;
}

}  // namespace dmil
