#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dmil/domain.hpp"
#include "dmil/model.hpp"
#include "dmil/objectives.hpp"

namespace dmil {

using GradientBundle = ParamTensors;

inline GradientBundle zeros_like(const ParamTensors& p) {
  GradientBundle g;
  auto dst = g.tensors();
  auto src = p.tensors();
  for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] = Matrix(src[i]->rows(), src[i]->cols());
  return g;
}

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct BatchItem {
  const Matrix* features = nullptr;
  WeakLabel weak_label;
  Supervision supervision = Supervision::Weak;
  std::vector<RegionLabel> region_labels;  // empty unless supervision is full
};

struct Batch {
  std::vector<BatchItem> items;
  SupervisionSplit split;

  std::size_t size() const { return items.size(); }
};

// Builds the split from the items' supervision tags.
inline Batch make_batch(std::vector<BatchItem> items) {
  Batch b;
  std::vector<Supervision> sup;
  std::vector<std::vector<RegionLabel>> labels;
  for (const auto& it : items) {
    sup.push_back(it.supervision);
    labels.push_back(it.region_labels);
  }
  b.split = make_split(sup, labels);
  b.items = std::move(items);
  return b;
}

// With use_local_labels off every bag is treated as weak and no annotation is
// read.
inline Batch make_batch(std::span<const RegionBag* const> bags, double alpha,
                        bool use_local_labels) {
  std::vector<BatchItem> items;
  items.reserve(bags.size());
  for (const RegionBag* bag : bags) {
    BatchItem it{&bag->features, bag->weak_label, Supervision::Weak, {}};
    if (use_local_labels && bag->supervision == Supervision::Full) {
      it.supervision = Supervision::Full;
      it.region_labels = label_regions(*bag, alpha);
    }
    items.push_back(std::move(it));
  }
  return make_batch(std::move(items));
}

struct PassState {
  // Per-image dropout scales and selection masks; empty vectors mean "no
  // dropout" and "recompute masks" respectively.
  std::vector<Matrix> dropout;
  std::vector<Matrix> masks;
};

inline std::vector<ForwardTrace> forward_batch(const Batch& batch, const ModelParams& params,
                                               const PassState& state) {
  std::vector<ForwardTrace> traces;
  traces.reserve(batch.size());
  for (std::size_t t = 0; t < batch.size(); ++t) {
    ForwardOptions opts;
    if (!state.dropout.empty()) opts.dropout_scale = &state.dropout[t];
    if (!state.masks.empty()) opts.frozen_mask = &state.masks[t];
    traces.push_back(forward(*batch.items[t].features, params, opts));
  }
  return traces;
}

inline double l2_penalty(const ParamTensors& p, double coeff) {
  if (coeff == 0.0) return 0.0;
  double s = 0.0;
  auto ts = p.tensors();
  for (std::size_t i = 0; i < ts.size(); ++i)
    if (ParamTensors::kIsWeight[i])
      for (double v : ts[i]->data()) s += v * v;
  return 0.5 * coeff * s;
}

inline void add_l2_gradient(const ParamTensors& p, double coeff, GradientBundle& g) {
  if (coeff == 0.0) return;
  auto ps = p.tensors();
  auto gs = g.tensors();
  for (std::size_t i = 0; i < ps.size(); ++i)
    if (ParamTensors::kIsWeight[i])
      for (std::size_t j = 0; j < ps[i]->size(); ++j) gs[i]->data()[j] += coeff * ps[i]->data()[j];
}

// Loss of a batch with selection masks and dropout held fixed.
inline LossBreakdown batch_loss(const Batch& batch, const ModelParams& params,
                                const LossWeights& weights, const PassState& state) {
  const auto traces = forward_batch(batch, params, state);
  std::vector<WeakLabel> weak;
  std::vector<std::vector<RegionLabel>> labels;
  for (const auto& it : batch.items) {
    weak.push_back(it.weak_label);
    labels.push_back(it.region_labels.empty() ? std::vector<RegionLabel>(it.features->rows(),
                                                                         RegionLabel::Ignored)
                                              : it.region_labels);
  }
  return total_loss(traces, weak, labels, batch.split, weights);
}

struct BackwardResult {
  double loss = 0.0;       // data loss + L2 penalty
  LossBreakdown data;      // without the penalty
  GradientBundle grads;
  std::vector<Matrix> masks;  // the selection used, for freezing
};

namespace detail {

// d/dp of -log(clamp(y ? p : 1 - p)).
inline double d_neg_log_bernoulli(double p, int y) {
  const double q = y ? p : 1.0 - p;
  if (q < kProbEps || q > 1.0) return 0.0;
  return y ? -1.0 / p : 1.0 / (1.0 - p);
}

// In-place softmax backward: given dp, returns dz = p * (dp - <p, dp>).
inline void softmax_backward(std::span<const double> p, std::span<double> grad) {
  double dot = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) dot += p[i] * grad[i];
  for (std::size_t i = 0; i < p.size(); ++i) grad[i] = p[i] * (grad[i] - dot);
}

inline void check_finite(const Matrix& m, std::string_view name) {
  for (double v : m.data())
    if (!std::isfinite(v)) throw NonFiniteError("non-finite value in " + std::string(name));
}

}  // namespace detail

// Exact gradient of the batch objective (plus 0.5 * l2 * |weights|^2). Masks
// and dropout are constants of the pass.
inline BackwardResult backward(const Batch& batch, const ModelParams& params,
                               const LossWeights& weights, const PassState& state = {},
                               double l2 = 0.0) {
  if (batch.size() == 0) throw std::invalid_argument("backward: empty batch");
  BackwardResult res;
  res.grads = zeros_like(params);
  auto traces = forward_batch(batch, params, state);

  std::vector<WeakLabel> weak;
  std::vector<std::vector<RegionLabel>> labels;
  for (std::size_t t = 0; t < batch.size(); ++t) {
    weak.push_back(batch.items[t].weak_label);
    labels.push_back(batch.items[t].region_labels.empty()
                         ? std::vector<RegionLabel>(traces[t].m(), RegionLabel::Ignored)
                         : batch.items[t].region_labels);
  }
  res.data = total_loss(traces, weak, labels, batch.split, weights);
  const auto coef = loss_coefficients(batch.split, weights, labels, params.has_detection());

  GradientBundle& g = res.grads;
  const std::size_t dh = params.hidden_dim();
  for (std::size_t t = 0; t < batch.size(); ++t) {
    const ForwardTrace& tr = traces[t];
    const std::size_t m = tr.m();
    Matrix dp(m, 3);
    Matrix dzd(params.has_detection() ? m : 0, 2);

    // Weak terms through the image-level aggregation.
    const double g_img[2] = {
        coef.weak_b[t] * detail::d_neg_log_bernoulli(tr.p_image.b, weak[t].y_B),
        coef.weak_m[t] * detail::d_neg_log_bernoulli(tr.p_image.m, weak[t].y_M)};
    for (LesionClass c : {LesionClass::B, LesionClass::M}) {
      const std::size_t dc = det_column(c), cc = cls_column(c);
      const double gc = g_img[dc];
      if (gc == 0.0) continue;
      std::vector<double> dq(m), q(m);
      for (std::size_t i = 0; i < m; ++i) {
        dp(i, cc) += gc * tr.p_det(i, dc);
        dq[i] = gc * tr.p_cls(i, cc);
        q[i] = tr.p_det(i, dc);
      }
      if (params.has_detection()) {
        detail::softmax_backward(q, dq);
        for (std::size_t i = 0; i < m; ++i) dzd(i, dc) += dq[i];
      }
    }

    // Region classification likelihood on labeled regions.
    if (coef.cls[t] != 0.0) {
      for (std::size_t i = 0; i < m; ++i) {
        if (labels[t][i] == RegionLabel::M) {
          const double pm = tr.p_cls(i, kColM);
          if (pm >= kProbEps && pm <= 1.0) dp(i, kColM) -= coef.cls[t] / pm;
        } else if (labels[t][i] == RegionLabel::BN) {
          const double s = tr.p_cls(i, kColB) + tr.p_cls(i, kColN);
          if (s >= kProbEps && s <= 1.0) {
            dp(i, kColB) -= coef.cls[t] / s;
            dp(i, kColN) -= coef.cls[t] / s;
          }
        }
      }
    }

    // Detection likelihood mass on malignant regions, unmasked distribution.
    if (coef.det[t] != 0.0) {
      double s = 0.0;
      for (std::size_t i = 0; i < m; ++i)
        if (labels[t][i] == RegionLabel::M) s += tr.p_det_full(i, kDetM);
      if (s >= kProbEps) {
        for (std::size_t i = 0; i < m; ++i) {
          const double in_m = labels[t][i] == RegionLabel::M ? 1.0 : 0.0;
          dzd(i, kDetM) += coef.det[t] * tr.p_det_full(i, kDetM) * (1.0 - in_m / s);
        }
      }
    }

    // Region softmax.
    Matrix dzc(m, 3);
    for (std::size_t i = 0; i < m; ++i) {
      auto row = dzc.row(i);
      for (std::size_t c = 0; c < 3; ++c) row[c] = dp(i, c);
      detail::softmax_backward(tr.p_cls.row(i), row);
    }

    // Branch layers.
    add_matmul_tn(tr.hidden, dzc, g.cls_w);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t c = 0; c < 3; ++c) g.cls_b(0, c) += dzc(i, c);
    Matrix dhid = matmul_nt(dzc, params.cls_w);
    if (params.has_detection()) {
      add_matmul_tn(tr.hidden, dzd, g.det_w);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t c = 0; c < 2; ++c) g.det_b(0, c) += dzd(i, c);
      const Matrix dh_det = matmul_nt(dzd, params.det_w);
      for (std::size_t idx = 0; idx < dhid.size(); ++idx) dhid.data()[idx] += dh_det.data()[idx];
    }

    // Dropout and rectifier.
    const Matrix* drop = state.dropout.empty() ? nullptr : &state.dropout[t];
    for (std::size_t idx = 0; idx < dhid.size(); ++idx) {
      double v = dhid.data()[idx];
      if (drop) v *= drop->data()[idx];
      if (tr.pre_activation.data()[idx] <= 0.0) v = 0.0;
      dhid.data()[idx] = v;
    }
    add_matmul_tn(*batch.items[t].features, dhid, g.shared_w);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < dh; ++j) g.shared_b(0, j) += dhid(i, j);

    res.masks.push_back(std::move(traces[t].mask));
  }

  add_l2_gradient(params, l2, g);
  res.loss = res.data.total + l2_penalty(params, l2);
  if (!std::isfinite(res.loss)) throw NonFiniteError("non-finite loss");
  auto gs = g.tensors();
  for (std::size_t i = 0; i < gs.size(); ++i) detail::check_finite(*gs[i], ParamTensors::kNames[i]);
  return res;
}

// Central differences of an arbitrary scalar function of the parameters.
inline GradientBundle finite_difference(const std::function<double(const ModelParams&)>& loss,
                                        const ModelParams& params, double step) {
  GradientBundle g = zeros_like(params);
  ModelParams probe = params;
  auto ps = probe.tensors();
  auto gs = g.tensors();
  for (std::size_t ti = 0; ti < ps.size(); ++ti) {
    for (std::size_t j = 0; j < ps[ti]->size(); ++j) {
      double& theta = ps[ti]->data()[j];
      const double saved = theta;
      theta = saved + step;
      const double up = loss(probe);
      theta = saved - step;
      const double down = loss(probe);
      theta = saved;
      gs[ti]->data()[j] = (up - down) / (2.0 * step);
    }
  }
  return g;
}

// Verification oracle for backward(): masks frozen from one pass at `params`,
// no dropout.
inline GradientBundle finite_difference_oracle(const Batch& batch, const ModelParams& params,
                                               const LossWeights& weights, double step,
                                               double l2 = 0.0,
                                               std::vector<Matrix> frozen_masks = {}) {
  PassState state;
  if (frozen_masks.empty()) {
    for (const auto& tr : forward_batch(batch, params, {})) state.masks.push_back(tr.mask);
  } else {
    state.masks = std::move(frozen_masks);
  }
  return finite_difference(
      [&](const ModelParams& p) {
        return batch_loss(batch, p, weights, state).total + l2_penalty(p, l2);
      },
      params, step);
}

}  // namespace dmil
