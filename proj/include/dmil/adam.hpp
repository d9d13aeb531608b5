#pragma once

#include <cmath>
#include <cstddef>

#include "dmil/gradients.hpp"
#include "dmil/model.hpp"

namespace dmil {

struct OptimizerState {
  long step_count = 0;
  ParamTensors first_moment;
  ParamTensors second_moment;
  double learning_rate = 1e-4;
  double beta_1 = 0.9;
  double beta_2 = 0.999;
  double epsilon_hat = 1e-8;
  double weight_decay = 0.0;  // L2 coupling, added to weight gradients only
  bool bias_correction = true;
};

inline OptimizerState make_optimizer(const ModelParams& params, double learning_rate = 1e-4) {
  OptimizerState s;
  s.first_moment = zeros_like(params);
  s.second_moment = zeros_like(params);
  s.learning_rate = learning_rate;
  return s;
}

inline void adam_step(OptimizerState& state, ModelParams& params, const GradientBundle& grads) {
  ++state.step_count;
  const double c1 = state.bias_correction ? 1.0 - std::pow(state.beta_1, double(state.step_count)) : 1.0;
  const double c2 = state.bias_correction ? 1.0 - std::pow(state.beta_2, double(state.step_count)) : 1.0;
  auto ps = params.tensors();
  auto gs = grads.tensors();
  auto ms = state.first_moment.tensors();
  auto vs = state.second_moment.tensors();
  for (std::size_t ti = 0; ti < ps.size(); ++ti) {
    require_shape(gs[ti]->size() == ps[ti]->size() && ms[ti]->size() == ps[ti]->size(),
                  "adam tensor " + std::string(ParamTensors::kNames[ti]));
    const double decay = ParamTensors::kIsWeight[ti] ? state.weight_decay : 0.0;
    auto& theta = ps[ti]->data();
    auto& m = ms[ti]->data();
    auto& v = vs[ti]->data();
    const auto& g = gs[ti]->data();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = g[j] + decay * theta[j];
      m[j] = state.beta_1 * m[j] + (1.0 - state.beta_1) * gj;
      v[j] = state.beta_2 * v[j] + (1.0 - state.beta_2) * gj * gj;
      theta[j] -= state.learning_rate * (m[j] / c1) / (std::sqrt(v[j] / c2) + state.epsilon_hat);
    }
  }
}

}  // namespace dmil
