#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "dmil/domain.hpp"
#include "dmil/matrix.hpp"

namespace dmil {

using Rng = std::mt19937_64;

enum class Variant { ClsDetRS, ClsDet, DBBaseline, MaxRegion };

inline constexpr std::array<Variant, 4> kAllVariants = {
    Variant::ClsDetRS, Variant::ClsDet, Variant::DBBaseline, Variant::MaxRegion};

inline std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::ClsDetRS: return "cls-det-rs";
    case Variant::ClsDet: return "cls-det";
    case Variant::DBBaseline: return "db-baseline";
    case Variant::MaxRegion: return "max-region";
  }
  return "?";
}

inline Variant parse_variant(std::string_view s) {
  for (Variant v : kAllVariants)
    if (to_string(v) == s) return v;
  throw std::invalid_argument("unknown variant '" + std::string(s) + "'");
}

// Column layout of region classification output and detection output.
inline constexpr std::size_t kColN = 0, kColB = 1, kColM = 2;
inline constexpr std::size_t kDetB = 0, kDetM = 1;

inline std::size_t cls_column(LesionClass c) { return c == LesionClass::M ? kColM : kColB; }
inline std::size_t det_column(LesionClass c) { return c == LesionClass::M ? kDetM : kDetB; }

inline constexpr int kDefaultK = 10;
inline constexpr std::size_t kDefaultHidden = 128;

// Every trainable tensor, in checkpoint order. Biases are 1 x n matrices.
struct ParamTensors {
  Matrix shared_w;  // D_in x D_h
  Matrix shared_b;  // 1 x D_h
  Matrix cls_w;     // D_h x 3, columns N, B, M
  Matrix cls_b;     // 1 x 3
  Matrix det_w;     // D_h x 2, columns B, M; empty for max-region
  Matrix det_b;     // 1 x 2; empty for max-region

  static constexpr std::array<std::string_view, 6> kNames = {
      "shared_w", "shared_b", "cls_w", "cls_b", "det_w", "det_b"};
  static constexpr std::array<bool, 6> kIsWeight = {true, false, true, false, true, false};

  std::array<Matrix*, 6> tensors() {
    return {&shared_w, &shared_b, &cls_w, &cls_b, &det_w, &det_b};
  }
  std::array<const Matrix*, 6> tensors() const {
    return {&shared_w, &shared_b, &cls_w, &cls_b, &det_w, &det_b};
  }
  friend bool operator==(const ParamTensors&, const ParamTensors&) = default;
};

struct ModelParams : ParamTensors {
  int k = kDefaultK;
  Variant variant = Variant::ClsDetRS;

  std::size_t input_dim() const { return shared_w.rows(); }
  std::size_t hidden_dim() const { return shared_w.cols(); }
  bool has_detection() const { return variant != Variant::MaxRegion; }
  friend bool operator==(const ModelParams&, const ModelParams&) = default;
};

// Zero-valued tensors with the shapes a variant needs.
inline ModelParams make_params(std::size_t input_dim, std::size_t hidden_dim, Variant variant,
                               int k = kDefaultK) {
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  ModelParams p;
  p.variant = variant;
  p.k = k;
  p.shared_w = Matrix(input_dim, hidden_dim);
  p.shared_b = Matrix(1, hidden_dim);
  p.cls_w = Matrix(hidden_dim, 3);
  p.cls_b = Matrix(1, 3);
  if (variant != Variant::MaxRegion) {
    p.det_w = Matrix(hidden_dim, 2);
    p.det_b = Matrix(1, 2);
  }
  return p;
}

struct ImageProbs {
  double b = 0.0;  // p(y_B = 1 | x)
  double m = 0.0;  // p(y_M = 1 | x)
  double operator[](LesionClass c) const { return c == LesionClass::M ? m : b; }
};

struct ForwardTrace {
  Matrix pre_activation;  // m x D_h, before the rectifier
  Matrix hidden;          // m x D_h, after rectifier and dropout
  Matrix p_cls;           // m x 3
  Matrix det_logits;      // m x 2 (empty for max-region)
  Matrix mask;            // m x 2, h_B and h_M
  Matrix p_det;           // m x 2, masked detection distributions
  Matrix p_det_full;      // m x 2, unmasked detection distributions
  ImageProbs p_image;
  Matrix d_scores;        // m x 2, d^B and d^M

  std::size_t m() const { return p_cls.rows(); }
};

class InvalidMaskError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Inverted dropout: surviving units are scaled by 1/keep at training time so
// inference needs no rescaling.
inline Matrix sample_dropout(std::size_t rows, std::size_t cols, double keep, Rng& rng) {
  if (!(keep > 0.0 && keep <= 1.0)) throw std::invalid_argument("dropout keep must lie in (0, 1]");
  Matrix scale(rows, cols, 1.0);
  if (keep == 1.0) return scale;
  std::bernoulli_distribution survive(keep);
  for (double& v : scale.data()) v = survive(rng) ? 1.0 / keep : 0.0;
  return scale;
}

inline Matrix shared_embed(const Matrix& features, const ModelParams& params,
                           const Matrix* dropout_scale = nullptr,
                           Matrix* pre_activation = nullptr) {
  require_shape(features.cols() == params.input_dim(), "feature dimension vs shared layer");
  for (double v : features.data())
    if (!std::isfinite(v)) throw std::invalid_argument("shared_embed: non-finite feature");
  Matrix a = matmul(features, params.shared_w);
  const std::size_t h = params.hidden_dim();
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < h; ++j) a(i, j) += params.shared_b(0, j);
  Matrix out(a.rows(), h);
  for (std::size_t idx = 0; idx < a.size(); ++idx)
    out.data()[idx] = std::max(0.0, a.data()[idx]);
  if (dropout_scale) {
    require_shape(dropout_scale->rows() == out.rows() && dropout_scale->cols() == h,
                  "dropout sample");
    for (std::size_t idx = 0; idx < out.size(); ++idx) out.data()[idx] *= dropout_scale->data()[idx];
  }
  if (pre_activation) *pre_activation = std::move(a);
  return out;
}

// Softmax over the entries of `logits` where `support` is nonzero.
inline void masked_softmax(std::span<const double> logits, std::span<const double> support,
                           std::span<double> out) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < logits.size(); ++i)
    if (support[i] != 0.0) mx = std::max(mx, logits[i]);
  if (mx == -std::numeric_limits<double>::infinity())
    throw InvalidMaskError("masked softmax over an empty support");
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = support[i] != 0.0 ? std::exp(logits[i] - mx) : 0.0;
    z += out[i];
  }
  for (double& v : out) v /= z;
}

inline Matrix classify_regions(const Matrix& hidden, const ModelParams& params) {
  require_shape(hidden.cols() == params.cls_w.rows(), "hidden width vs classifier");
  Matrix logits = matmul(hidden, params.cls_w);
  const bool two_class = params.variant == Variant::DBBaseline;
  const std::array<double, 3> support = {two_class ? 0.0 : 1.0, 1.0, 1.0};
  Matrix p(hidden.rows(), 3);
  std::array<double, 3> z{};
  for (std::size_t i = 0; i < hidden.rows(); ++i) {
    for (std::size_t c = 0; c < 3; ++c) z[c] = logits(i, c) + params.cls_b(0, c);
    masked_softmax(z, support, p.row(i));
  }
  return p;
}

// Top-k regions by p_cls of class `cls`; ties go to the lower index.
inline std::vector<double> select_regions(const Matrix& p_cls, int k, LesionClass cls) {
  if (k < 1) throw std::invalid_argument("select_regions: k must be >= 1");
  const std::size_t m = p_cls.rows();
  const std::size_t col = cls_column(cls);
  std::vector<std::size_t> order(m);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return p_cls(a, col) > p_cls(b, col);
  });
  std::vector<double> mask(m, 0.0);
  for (std::size_t r = 0; r < std::min<std::size_t>(std::size_t(k), m); ++r) mask[order[r]] = 1.0;
  return mask;
}

inline std::vector<double> detection_logits(const Matrix& hidden, const ModelParams& params,
                                            LesionClass cls) {
  require_shape(params.has_detection() && hidden.cols() == params.det_w.rows(),
                "hidden width vs detector");
  const std::size_t col = det_column(cls);
  std::vector<double> z(hidden.rows(), params.det_b(0, col));
  for (std::size_t i = 0; i < hidden.rows(); ++i) {
    auto h = hidden.row(i);
    for (std::size_t j = 0; j < h.size(); ++j) z[i] += h[j] * params.det_w(j, col);
  }
  return z;
}

// Detection distribution over the masked regions. An all-ones mask gives the
// plain softmax over every region.
inline std::vector<double> detect_regions(const Matrix& hidden, const ModelParams& params,
                                          std::span<const double> mask, LesionClass cls) {
  require_shape(mask.size() == hidden.rows(), "mask length");
  if (std::none_of(mask.begin(), mask.end(), [](double v) { return v != 0.0; }))
    throw InvalidMaskError("detect_regions: mask selects no region");
  const auto z = detection_logits(hidden, params, cls);
  std::vector<double> p(z.size());
  masked_softmax(z, mask, p);
  return p;
}

// Weighted average of region probabilities under the detection distribution.
inline ImageProbs aggregate_image(const Matrix& p_cls, const Matrix& p_det) {
  require_shape(p_cls.rows() == p_det.rows() && p_cls.cols() == 3 && p_det.cols() == 2,
                "aggregate_image");
  ImageProbs out;
  for (std::size_t i = 0; i < p_cls.rows(); ++i) {
    out.b += p_det(i, kDetB) * p_cls(i, kColB);
    out.m += p_det(i, kDetM) * p_cls(i, kColM);
  }
  return out;
}

inline Matrix score_regions(const ForwardTrace& trace) {
  Matrix d(trace.m(), 2);
  for (std::size_t i = 0; i < trace.m(); ++i) {
    d(i, kDetB) = trace.p_cls(i, kColB) * trace.p_det(i, kDetB);
    d(i, kDetM) = trace.p_cls(i, kColM) * trace.p_det(i, kDetM);
  }
  return d;
}

// Selection masks implied by a variant. Max-region uses a one-hot mask at the
// first arg-max region, which makes its image probability the max over regions.
inline Matrix compute_mask(const Matrix& p_cls, const ModelParams& params) {
  const std::size_t m = p_cls.rows();
  Matrix mask(m, 2, 0.0);
  for (LesionClass c : {LesionClass::B, LesionClass::M}) {
    const std::size_t dc = det_column(c);
    switch (params.variant) {
      case Variant::ClsDetRS: {
        const auto h = select_regions(p_cls, params.k, c);
        for (std::size_t i = 0; i < m; ++i) mask(i, dc) = h[i];
        break;
      }
      case Variant::ClsDet:
      case Variant::DBBaseline:
        for (std::size_t i = 0; i < m; ++i) mask(i, dc) = 1.0;
        break;
      case Variant::MaxRegion: {
        const auto h = select_regions(p_cls, 1, c);
        for (std::size_t i = 0; i < m; ++i) mask(i, dc) = h[i];
        break;
      }
    }
  }
  return mask;
}

struct ForwardOptions {
  const Matrix* dropout_scale = nullptr;  // m x D_h; null in inference
  const Matrix* frozen_mask = nullptr;    // m x 2; null recomputes the selection
};

inline ForwardTrace forward(const Matrix& features, const ModelParams& params,
                            const ForwardOptions& opts = {}) {
  if (features.rows() == 0) throw std::invalid_argument("forward: empty bag");
  ForwardTrace t;
  t.hidden = shared_embed(features, params, opts.dropout_scale, &t.pre_activation);
  t.p_cls = classify_regions(t.hidden, params);
  const std::size_t m = t.m();
  if (opts.frozen_mask) {
    require_shape(opts.frozen_mask->rows() == m && opts.frozen_mask->cols() == 2, "frozen mask");
    t.mask = *opts.frozen_mask;
  } else {
    t.mask = compute_mask(t.p_cls, params);
  }

  if (params.variant == Variant::MaxRegion) {
    t.p_det = t.mask;
  } else {
    t.det_logits = Matrix(m, 2);
    t.p_det = Matrix(m, 2);
    t.p_det_full = Matrix(m, 2);
    const std::vector<double> ones(m, 1.0);
    std::vector<double> col_mask(m), out(m);
    for (LesionClass c : {LesionClass::B, LesionClass::M}) {
      const std::size_t dc = det_column(c);
      const auto z = detection_logits(t.hidden, params, c);
      for (std::size_t i = 0; i < m; ++i) {
        t.det_logits(i, dc) = z[i];
        col_mask[i] = t.mask(i, dc);
      }
      masked_softmax(z, col_mask, out);
      for (std::size_t i = 0; i < m; ++i) t.p_det(i, dc) = out[i];
      masked_softmax(z, ones, out);
      for (std::size_t i = 0; i < m; ++i) t.p_det_full(i, dc) = out[i];
    }
  }
  t.p_image = aggregate_image(t.p_cls, t.p_det);
  t.d_scores = score_regions(t);
  return t;
}

enum class Mode { Train, Infer };

// Bag-level convenience: samples a dropout mask in training mode.
inline ForwardTrace forward(const RegionBag& bag, const ModelParams& params, Mode mode,
                            Rng* rng = nullptr, double dropout_keep = 1.0) {
  validate(bag);
  if (mode == Mode::Train && dropout_keep < 1.0) {
    if (!rng) throw std::invalid_argument("forward: training-mode dropout needs an rng");
    const Matrix scale = sample_dropout(bag.m(), params.hidden_dim(), dropout_keep, *rng);
    return forward(bag.features, params, {&scale, nullptr});
  }
  return forward(bag.features, params);
}

}  // namespace dmil
