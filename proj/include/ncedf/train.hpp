#pragma once

#include "ncedf/datagen.hpp"
#include "ncedf/mlp.hpp"
#include "ncedf/rng.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <vector>

namespace ncedf {

struct TrainConfig {
  double learning_rate = 0.003;
  std::size_t batch_size = 256;
  std::size_t epochs = 100;
  double lambda_e = 0.05;
  double lambda_o = 2.0;
  std::uint64_t seed = 0;
  /// Cosine decay of the learning rate from `learning_rate` to `final_lr_fraction` of it.
  bool cosine_decay = true;
  double final_lr_fraction = 0.01;

  double epoch_learning_rate(std::size_t epoch) const {
    if (!cosine_decay || epochs <= 1) return learning_rate;
    const double t = static_cast<double>(epoch - 1) / static_cast<double>(epochs - 1);
    const double floor = final_lr_fraction * learning_rate;
    return floor + 0.5 * (learning_rate - floor) * (1.0 + std::cos(std::numbers::pi * t));
  }

  void validate() const {
    if (!(learning_rate > 0.0)) throw std::invalid_argument("learning_rate must be positive");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (!(lambda_e >= 0.0)) throw std::invalid_argument("lambda_E must be non-negative");
    if (!(lambda_o >= 0.0)) throw std::invalid_argument("lambda_O must be non-negative");
    if (!(final_lr_fraction > 0.0 && final_lr_fraction <= 1.0))
      throw std::invalid_argument("final_lr_fraction must be in (0, 1]");
  }
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  ErrorMetrics val;
};

struct TrainResult {
  MlpParams params;
  std::vector<EpochRecord> history;
};

inline ErrorMetrics evaluate_metrics(const MlpParams& params, std::span<const TrainingSample> data) {
  const auto pred = mlp_forward_batch(params, data);
  std::vector<double> target(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) target[i] = data[i].d;
  return compute_error_metrics(pred, target);
}

/// Mini-batch Adam. Each epoch visits a seeded permutation of the dataset;
/// returns the final-epoch parameters.
inline TrainResult train(std::span<const TrainingSample> dataset, std::span<const TrainingSample> val,
                         const NetShape& shape, const TrainConfig& cfg,
                         const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  if (dataset.empty()) throw std::invalid_argument("train: dataset is empty");
  if (val.empty()) throw std::invalid_argument("train: validation set is empty");

  std::mt19937_64 init_rng(mix_seed(cfg.seed, 0x696e6974));
  const auto dims = shape.layer_dims();
  TrainResult result{glorot_init(dims, init_rng), {}};
  AdamState adam = AdamState::for_params(result.params);
  LossKernel kernel;
  const LossWeights weights{cfg.lambda_e, cfg.lambda_o};

  std::vector<std::size_t> order(dataset.size());
  std::vector<TrainingSample> batch;
  batch.reserve(cfg.batch_size);
  std::mt19937_64 shuffle_rng(mix_seed(cfg.seed, 0x73687566));

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform01(shuffle_rng) * static_cast<double>(i));
      std::swap(order[i - 1], order[std::min(j, i - 1)]);
    }

    const double lr = cfg.epoch_learning_rate(epoch);
    double loss_sum = 0.0;
    for (std::size_t begin = 0; begin < order.size(); begin += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), begin + cfg.batch_size);
      batch.clear();
      for (std::size_t i = begin; i < end; ++i) batch.push_back(dataset[order[i]]);
      const auto lg = kernel.evaluate(result.params, batch, weights);
      loss_sum += lg.loss.total * static_cast<double>(batch.size());
      adam_step(result.params, lg.grad, adam, lr);
    }

    EpochRecord rec{epoch, loss_sum / static_cast<double>(dataset.size()), evaluate_metrics(result.params, val)};
    result.history.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  return result;
}

}  // namespace ncedf
