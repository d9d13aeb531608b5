#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <memory>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "dmil/gradients.hpp"
#include "dmil/model.hpp"
#include "dmil/objectives.hpp"

namespace dmil {

enum class SplitKind { Weak, Semi, Full };

inline std::string_view to_string(SplitKind s) {
  switch (s) {
    case SplitKind::Weak: return "weak";
    case SplitKind::Semi: return "semi";
    case SplitKind::Full: return "full";
  }
  return "?";
}

// A small random network and batch. Features live on the heap so the batch's
// pointers survive moves.
struct GradCheckCase {
  Variant variant = Variant::ClsDetRS;
  SplitKind split = SplitKind::Weak;
  ModelParams params;
  std::unique_ptr<std::vector<Matrix>> features;
  Batch batch;
  LossWeights weights;
  double l2 = 0.0;
};

inline constexpr double kGradCheckStep = 1e-4;
inline constexpr double kGradCheckTolerance = 1e-5;
inline constexpr double kGradCheckMinMagnitude = 1e-8;
// Configurations with a pre-activation this close to the rectifier kink are
// redrawn: central differences straddling the kink do not estimate a
// derivative.
inline constexpr double kKinkMargin = 1e-2;
// Standard deviation of the random parameters.
inline constexpr double kParamScale = 0.5;

namespace detail {

inline bool near_kink(const GradCheckCase& c) {
  for (const auto& x : *c.features) {
    Matrix pre;
    (void)shared_embed(x, c.params, nullptr, &pre);
    for (double v : pre.data())
      if (std::abs(v) < kKinkMargin) return true;
  }
  return false;
}

inline GradCheckCase draw_case(Rng& rng, Variant variant, SplitKind split) {
  std::uniform_int_distribution<int> dim(2, 5), regions(1, 9);
  std::normal_distribution<double> w(0.0, kParamScale), x(0.0, 1.0);
  std::bernoulli_distribution coin(0.5);

  GradCheckCase c;
  c.variant = variant;
  c.split = split;
  const std::size_t d_in = std::size_t(dim(rng)), d_h = std::size_t(dim(rng));
  const int n = split == SplitKind::Semi ? std::uniform_int_distribution<int>(2, 4)(rng)
                                         : std::uniform_int_distribution<int>(1, 4)(rng);
  c.features = std::make_unique<std::vector<Matrix>>();
  c.features->reserve(std::size_t(n));
  std::size_t max_m = 1;
  for (int t = 0; t < n; ++t) {
    const std::size_t m = std::size_t(regions(rng));
    max_m = std::max(max_m, m);
    Matrix f(m, d_in);
    for (double& v : f.data()) v = x(rng);
    c.features->push_back(std::move(f));
  }
  const int k = std::uniform_int_distribution<int>(1, int(max_m) + 1)(rng);
  c.params = make_params(d_in, d_h, variant, k);
  for (Matrix* t : c.params.tensors())
    for (double& v : t->data()) v = w(rng);

  std::vector<BatchItem> items;
  for (int t = 0; t < n; ++t) {
    BatchItem it;
    it.features = &(*c.features)[std::size_t(t)];
    it.weak_label = {int(coin(rng)), int(coin(rng))};
    bool full = split == SplitKind::Full || (split == SplitKind::Semi && t % 2 == 1);
    if (full) {
      it.supervision = Supervision::Full;
      std::discrete_distribution<int> lab({0.3, 0.5, 0.2});
      for (std::size_t i = 0; i < it.features->rows(); ++i)
        it.region_labels.push_back(static_cast<RegionLabel>(lab(rng)));
      it.weak_label.y_M = 1;
    }
    items.push_back(std::move(it));
  }
  c.batch = make_batch(std::move(items));
  std::uniform_real_distribution<double> u(0.2, 2.0);
  c.weights.lambda2 = u(rng);
  c.weights.beta = u(rng);
  c.weights.b_term_all_images = coin(rng);
  c.weights.weak_m_term = split != SplitKind::Full;
  c.l2 = coin(rng) ? 1e-2 : 0.0;
  return c;
}

}  // namespace detail

inline GradCheckCase random_case(Rng& rng, Variant variant, SplitKind split) {
  for (;;) {
    GradCheckCase c = detail::draw_case(rng, variant, split);
    if (!detail::near_kink(c)) return c;
  }
}

struct TensorCheck {
  std::string_view name;
  double worst_rel_error = 0.0;
  std::size_t checked = 0;
};

struct GradCheckResult {
  std::array<TensorCheck, 6> tensors{};
  double worst() const {
    double w = 0.0;
    for (const auto& t : tensors) w = std::max(w, t.worst_rel_error);
    return w;
  }
};

// |a - n| / max(|a|, |n|) over coordinates where the analytic gradient
// exceeds kGradCheckMinMagnitude.
inline GradCheckResult compare_gradients(const GradientBundle& analytic,
                                         const GradientBundle& numeric) {
  GradCheckResult r;
  auto a = analytic.tensors();
  auto n = numeric.tensors();
  for (std::size_t i = 0; i < a.size(); ++i) {
    r.tensors[i].name = ParamTensors::kNames[i];
    for (std::size_t j = 0; j < a[i]->size(); ++j) {
      const double ga = a[i]->data()[j], gn = n[i]->data()[j];
      if (std::abs(ga) <= kGradCheckMinMagnitude) continue;
      const double rel = std::abs(ga - gn) / std::max(std::abs(ga), std::abs(gn));
      r.tensors[i].worst_rel_error = std::max(r.tensors[i].worst_rel_error, rel);
      ++r.tensors[i].checked;
    }
  }
  return r;
}

// Runs backward and the finite-difference oracle on one case with the same
// frozen masks. `corrupt` flips the sign of the first analytic coordinate of
// shared_w, for testing the checker itself.
inline GradCheckResult check_case(const GradCheckCase& c, double step = kGradCheckStep,
                                  bool corrupt = false) {
  BackwardResult b = backward(c.batch, c.params, c.weights, {}, c.l2);
  if (corrupt) {
    for (Matrix* t : b.grads.tensors())
      for (double& v : t->data())
        if (std::abs(v) > kGradCheckMinMagnitude) {
          v = -v;
          goto flipped;
        }
  flipped:;
  }
  const GradientBundle fd =
      finite_difference_oracle(c.batch, c.params, c.weights, step, c.l2, b.masks);
  return compare_gradients(b.grads, fd);
}

}  // namespace dmil
