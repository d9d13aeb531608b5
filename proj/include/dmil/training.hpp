#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

#include "dmil/adam.hpp"
#include "dmil/domain.hpp"
#include "dmil/gradients.hpp"
#include "dmil/model.hpp"
#include "dmil/objectives.hpp"
#include "dmil/rng.hpp"

namespace dmil {

struct TrainConfig {
  int epochs = 50;
  int batch_size_images = 256;
  std::uint64_t seed = 0;
  int k = kDefaultK;
  double alpha = kDefaultAlpha;
  double lambda2 = 1.0;
  double beta = 1.0;
  Variant variant = Variant::ClsDetRS;
  double dropout_keep = 0.5;
  double l2_coefficient = 1e-4;
  double learning_rate = 1e-4;
  std::size_t hidden_dim = kDefaultHidden;
  bool b_term_all_images = true;
};

inline void validate(const TrainConfig& c) {
  if (c.epochs < 0) throw std::invalid_argument("epochs must be >= 0");
  if (c.batch_size_images < 1) throw std::invalid_argument("batch size must be >= 1");
  if (!(c.dropout_keep > 0.0 && c.dropout_keep <= 1.0))
    throw std::invalid_argument("dropout keep must lie in (0, 1]");
  if (c.k < 1) throw std::invalid_argument("k must be >= 1");
  if (!(c.alpha > 0.0 && c.alpha <= 1.0)) throw std::invalid_argument("alpha must lie in (0, 1]");
  if (c.lambda2 < 0.0 || c.beta <= 0.0) throw std::invalid_argument("need lambda2 >= 0, beta > 0");
  if (c.hidden_dim == 0) throw std::invalid_argument("hidden width must be positive");
}

inline constexpr double kBranchInitStd = 1e-4;

// Shared layer: He-scaled normal, variance 2 / fan_in. Branch weights: normal
// with std 1e-4. Biases start at zero.
inline ModelParams initialize(const TrainConfig& config, std::size_t feature_dim, Rng& rng) {
  ModelParams p = make_params(feature_dim, config.hidden_dim, config.variant, config.k);
  std::normal_distribution<double> shared(0.0, std::sqrt(2.0 / double(feature_dim)));
  std::normal_distribution<double> branch(0.0, kBranchInitStd);
  for (double& v : p.shared_w.data()) v = shared(rng);
  for (double& v : p.cls_w.data()) v = branch(rng);
  for (double& v : p.det_w.data()) v = branch(rng);
  return p;
}

struct TrainResult {
  ModelParams params;
  std::vector<double> loss_history;       // per-epoch mean data loss
  std::vector<double> weak_loss_history;  // per-epoch mean of the weak part
};

inline TrainResult train(std::span<const RegionBag> dataset, const TrainConfig& config) {
  validate(config);
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  const std::size_t dim = dataset.front().feature_dim();
  for (const auto& bag : dataset) {
    validate(bag);
    if (bag.feature_dim() != dim) throw ShapeError("train: mixed feature dimensions");
  }

  // Local annotations are only read when the fully supervised term is on.
  const bool use_local = config.lambda2 > 0.0;
  std::vector<std::vector<RegionLabel>> labels(dataset.size());
  std::size_t weak_count = 0;
  for (std::size_t t = 0; t < dataset.size(); ++t) {
    if (use_local && dataset[t].supervision == Supervision::Full)
      labels[t] = label_regions(dataset[t], config.alpha);
    else
      ++weak_count;
  }
  if (weak_count == 0)
    throw DegenerateSplitError("train: weak objective active but no weakly labeled image");

  Rng init_rng = make_rng(config.seed, "init");
  Rng shuffle_rng = make_rng(config.seed, "shuffle");
  Rng dropout_rng = make_rng(config.seed, "dropout");

  TrainResult result;
  result.params = initialize(config, dim, init_rng);
  OptimizerState opt = make_optimizer(result.params, config.learning_rate);

  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = std::size_t(config.batch_size_images);

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0, weak_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      std::vector<BatchItem> items;
      PassState state;
      bool any_weak = false;
      for (std::size_t j = start; j < end; ++j) {
        const std::size_t t = order[j];
        const bool full = !labels[t].empty();
        any_weak |= !full;
        items.push_back({&dataset[t].features, dataset[t].weak_label,
                         full ? Supervision::Full : Supervision::Weak, labels[t]});
        if (config.dropout_keep < 1.0)
          state.dropout.push_back(sample_dropout(dataset[t].m(), config.hidden_dim,
                                                 config.dropout_keep, dropout_rng));
      }
      const Batch batch = make_batch(std::move(items));
      LossWeights weights;
      weights.lambda2 = config.lambda2;
      weights.beta = config.beta;
      weights.b_term_all_images = config.b_term_all_images;
      weights.weak_m_term = any_weak;
      const BackwardResult r = backward(batch, result.params, weights, state, config.l2_coefficient);
      adam_step(opt, result.params, r.grads);
      loss_sum += r.data.total * double(end - start);
      weak_sum += r.data.weak * double(end - start);
    }
    result.loss_history.push_back(loss_sum / double(dataset.size()));
    result.weak_loss_history.push_back(weak_sum / double(dataset.size()));
  }
  return result;
}

}  // namespace dmil
