#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "pfcr/data.hpp"
#include "pfcr/errors.hpp"
#include "pfcr/ops.hpp"
#include "pfcr/optim.hpp"
#include "pfcr/vit.hpp"

namespace pfcr {

// Index of the largest logit per row; ties go to the lowest index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  const std::size_t rows = logits.dim(0), cols = logits.dim(1);
  std::vector<int> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < cols; ++c)
      if (logits[r * cols + c] > logits[r * cols + best]) best = c;
    out[r] = int(best);
  }
  return out;
}

template <typename T>
double evaluate_top1(const ModelState<T>& model, const Dataset<T>& data,
                     std::size_t batch_size = 256) {
  if (data.size() == 0) throw ContractError("evaluate_top1: empty dataset");
  NoGrad<T> guard;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < data.size(); b += batch_size) {
    const auto chunk = data.slice(b, std::min(data.size(), b + batch_size));
    const auto pred = argmax_rows(model_forward(chunk.images, model));
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == chunk.labels[i];
  }
  return double(correct) / double(data.size());
}

struct TrainOptions {
  std::size_t epochs = 8;
  double lr = 1e-3;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;

  bool operator==(const TrainOptions&) const = default;
};

template <typename T>
struct TrainResult {
  ModelState<T> model;
  double eval_accuracy = 0.0;
  std::vector<double> epoch_loss;
};

// Cross-entropy training of a freshly initialised full-precision model with
// Adam and a cosine-annealed learning rate over all steps.
template <typename T>
TrainResult<T> train_baseline(const ViTConfig& config, const Dataset<T>& train,
                              const Dataset<T>& eval, const TrainOptions& opt) {
  config.validate();
  if (train.size() == 0) throw ContractError("train_baseline: empty training set");
  TrainResult<T> result{init_model<T>(config, opt.seed), 0.0, {}};
  auto& model = result.model;
  std::vector<Tensor<T>> params;
  for (auto& [name, t] : model.named_parameters()) params.push_back(t);
  for (auto& p : params) p.set_requires_grad(true);

  AdamState<T> state;
  std::mt19937_64 rng(opt.seed + 17);
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t steps_per_epoch = (train.size() + opt.batch_size - 1) / opt.batch_size;
  const std::int64_t total = std::int64_t(std::max<std::size_t>(1, opt.epochs * steps_per_epoch));
  std::int64_t step = 0;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < train.size(); b += opt.batch_size) {
      std::vector<std::size_t> idx(order.begin() + long(b),
                                   order.begin() + long(std::min(train.size(), b + opt.batch_size)));
      const auto batch = train.subset(idx);
      for (auto& p : params) p.zero_grad();
      Tape<T> tape;
      auto loss = cross_entropy(model_forward(batch.images, model), batch.labels);
      const double value = double(loss.item());
      if (!std::isfinite(value))
        throw NumericalError("train_baseline: non-finite loss at epoch " + std::to_string(epoch) +
                             ", step " + std::to_string(step));
      backward(loss, tape);
      adam_step(params, state, T(cosine_lr(step, total, opt.lr)));
      ++step;
      epoch_loss += value * double(idx.size());
    }
    result.epoch_loss.push_back(epoch_loss / double(train.size()));
  }
  for (auto& p : params) p.set_requires_grad(false);
  result.eval_accuracy = evaluate_top1(model, eval);
  return result;
}

}  // namespace pfcr
