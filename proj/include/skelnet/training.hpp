#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "skelnet/autodiff.hpp"
#include "skelnet/network.hpp"
#include "skelnet/pose_data.hpp"

namespace skelnet::train {

using ad::Var;

/// Which class the focal weight `alpha` multiplies; the other class gets 1 - alpha.
enum class AlphaTarget { Negative, Positive };

struct SchedulerConfig {
  double factor = 0.1;
  std::size_t patience_epochs = 5;
  double min_lr = 1e-6;
};

struct TrainConfig {
  double alpha = 0.1;
  double gamma = 0.0;
  double learning_rate = 1e-4;
  double weight_decay = 1e-4;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  double clip_max_norm = 1.0;
  std::size_t batch_size = 16;
  std::uint64_t seed = 3407;
  SchedulerConfig scheduler;
  AlphaTarget alpha_applies_to = AlphaTarget::Negative;
  bool augment_flip = true;
  double improvement_threshold = 1e-6;

  void validate() const {
    if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
    if (gamma < 0.0) throw ConfigError("gamma must be non-negative");
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (weight_decay < 0.0) throw ConfigError("weight_decay must be non-negative");
    if (clip_max_norm <= 0.0) throw ConfigError("clip_max_norm must be positive");
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2 (batch norm)");
    if (max_epochs < 1) throw ConfigError("max_epochs must be at least 1");
    if (scheduler.factor <= 0.0 || scheduler.factor > 1.0)
      throw ConfigError("scheduler factor must lie in (0, 1]");
  }
};

// ---------------------------------------------------------------------------
// Losses

inline constexpr double kMinProbability = 1e-12;

inline double class_weight(Label y, double alpha, AlphaTarget target) {
  const bool positive = y == Label::Dystonia;
  return (positive == (target == AlphaTarget::Positive)) ? alpha : 1.0 - alpha;
}

/// -alpha_t (1 - p_t)^gamma log(p_t), with p_t clamped to [1e-12, 1].
inline double focal_loss(double p_t, Label y, double alpha, double gamma,
                         AlphaTarget target = AlphaTarget::Negative) {
  const double p = std::clamp(p_t, kMinProbability, 1.0);
  const double modulator = gamma == 0.0 ? 1.0 : std::pow(1.0 - p, gamma);
  return -class_weight(y, alpha, target) * modulator * std::log(p);
}

/// Mean focal loss over a [B, 2] probability batch.
inline Var focal_loss(const Var& probabilities, std::span<const Label> labels, double alpha,
                      double gamma, AlphaTarget target = AlphaTarget::Negative) {
  const std::size_t batch = probabilities.dim(0);
  if (labels.size() != batch) throw NumericError("focal_loss: label count mismatch");
  const Tensor& p = probabilities.value();
  std::vector<double> dloss(batch);
  double total = 0.0;
  for (std::size_t i = 0; i < batch; ++i) {
    const std::size_t cls = static_cast<std::size_t>(to_int(labels[i]));
    const double raw = p.at(i, cls);
    const double pt = std::clamp(raw, kMinProbability, 1.0);
    const double w = class_weight(labels[i], alpha, target);
    total += focal_loss(pt, labels[i], alpha, gamma, target);
    if (raw < kMinProbability) {
      dloss[i] = 0.0;
      continue;
    }
    // d/dp of -w (1-p)^g log p
    const double one_minus = 1.0 - pt;
    const double mod = gamma == 0.0 ? 1.0 : std::pow(one_minus, gamma);
    const double dmod = gamma == 0.0 ? 0.0 : -gamma * std::pow(one_minus, gamma - 1.0);
    dloss[i] = -w * (dmod * std::log(pt) + mod / pt);
  }
  const double inv = 1.0 / static_cast<double>(batch);
  std::vector<std::size_t> cls(batch);
  for (std::size_t i = 0; i < batch; ++i) cls[i] = static_cast<std::size_t>(to_int(labels[i]));
  return ad::detail::make_result(
      Tensor::scalar(total * inv), {probabilities},
      [dloss = std::move(dloss), cls = std::move(cls), inv](ad::detail::Node& self) {
        auto& pp = self.parent(0);
        if (!pp.requires_grad) return;
        auto& g = pp.grad_buffer();
        const std::size_t width = pp.value.shape()[1];
        for (std::size_t i = 0; i < dloss.size(); ++i)
          g[i * width + cls[i]] += self.grad[0] * inv * dloss[i];
      },
      "focal_loss");
}

/// (lambda / 2) * sum of squared entries over weight tensors only.
inline double l2_penalty(const net::ParameterStore& params, double lambda) {
  double s = 0.0;
  params.visit([&](const std::string&, const Tensor& t, net::Role role) {
    if (role != net::Role::Weight) return;
    for (double v : t.values()) s += v * v;
  });
  return 0.5 * lambda * s;
}

inline double total_loss(double focal, const net::ParameterStore& params, double lambda) {
  return focal + l2_penalty(params, lambda);
}

// ---------------------------------------------------------------------------
// Optimizer plumbing

/// Trainable tensors of a store in visitation order.
struct Slot {
  std::string name;
  Tensor* tensor;
  net::Role role;
};

inline std::vector<Slot> trainable_slots(net::ParameterStore& params) {
  std::vector<Slot> slots;
  params.visit([&](const std::string& name, Tensor& t, net::Role role) {
    if (net::trainable(role)) slots.push_back(Slot{name, &t, role});
  });
  return slots;
}

inline double global_norm(const std::vector<Tensor>& grads) {
  double s = 0.0;
  for (const auto& g : grads)
    for (double v : g.values()) s += v * v;
  return std::sqrt(s);
}

/// Rescales all gradients by max_norm / norm when the global L2 norm exceeds
/// max_norm. Returns the norm before clipping.
inline double clip_grad_norm(std::vector<Tensor>& grads, double max_norm) {
  if (max_norm <= 0.0) throw ConfigError("max_norm must be positive");
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (auto& g : grads)
      for (auto& v : g.storage()) v *= s;
  }
  return norm;
}

struct AdamState {
  std::vector<Tensor> m, v;
  std::size_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

inline AdamState make_adam_state(const std::vector<Tensor*>& params) {
  AdamState s;
  for (const Tensor* p : params) {
    s.m.emplace_back(p->shape());
    s.v.emplace_back(p->shape());
  }
  return s;
}

/// Bias-corrected Adam update applied in place.
inline void adam_step(const std::vector<Tensor*>& params, const std::vector<Tensor>& grads,
                      AdamState& state, double lr) {
  if (params.size() != grads.size() || state.m.size() != params.size())
    throw NumericError("adam_step: parameter/gradient/state count mismatch");
  for (const auto& g : grads)
    if (!g.all_finite()) throw NumericError("adam_step: non-finite gradient");
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor& p = *params[k];
    const Tensor& g = grads[k];
    Tensor& m = state.m[k];
    Tensor& v = state.v[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
      v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
      p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + state.eps);
    }
  }
}

/// Reduce-on-plateau learning rate schedule.
class PlateauScheduler {
 public:
  PlateauScheduler(double lr, SchedulerConfig cfg, double threshold = 1e-6)
      : lr_(lr), cfg_(cfg), threshold_(threshold) {}

  /// Records one validation loss and returns the learning rate for the next epoch.
  double observe(double val_loss) {
    if (val_loss < best_ - threshold_) {
      best_ = val_loss;
      bad_ = 0;
    } else if (++bad_ >= cfg_.patience_epochs) {
      lr_ = std::max(lr_ * cfg_.factor, cfg_.min_lr);
      bad_ = 0;
    }
    return lr_;
  }

  double lr() const { return lr_; }

 private:
  double lr_;
  SchedulerConfig cfg_;
  double threshold_;
  double best_ = std::numeric_limits<double>::infinity();
  std::size_t bad_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double val_acc = 0.0;
  double lr = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t stop_epoch = 0;
  std::size_t best_epoch = 0;
  std::string stop_reason;
};

inline void write_history_csv(const std::filesystem::path& path, const TrainHistory& h) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "epoch,train_loss,val_loss,val_acc,lr\n";
  char buf[160];
  for (const auto& e : h.epochs) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", e.epoch, e.train_loss,
                  e.val_loss, e.val_acc, e.lr);
    out << buf;
  }
}

struct Evaluation {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<net::AttentionRecord> records;
};

/// Eval-mode mean focal loss and accuracy over a clip set.
inline Evaluation evaluate(const net::ParameterStore& params, const std::vector<SkeletonClip>& clips,
                           const TrainConfig& cfg) {
  Evaluation e;
  if (clips.empty()) return e;
  e.records = net::predict(params, clips);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < clips.size(); ++i) {
    const auto cls = static_cast<std::size_t>(to_int(clips[i].label));
    e.loss += focal_loss(e.records[i].probabilities[cls], clips[i].label, cfg.alpha, cfg.gamma,
                         cfg.alpha_applies_to);
    correct += e.records[i].predicted == clips[i].label;
  }
  e.loss /= static_cast<double>(clips.size());
  e.accuracy = static_cast<double>(correct) / static_cast<double>(clips.size());
  return e;
}

/// Random generators of one training run, derived from the run seed.
struct TrainRngs {
  std::mt19937_64 shuffle, dropout, flip;
  explicit TrainRngs(std::uint64_t seed) : shuffle(seed + 1), dropout(seed + 2), flip(seed + 3) {}
};

/// Loss value and gradients (including the L2 term) for one batch in train mode.
/// Updates batch-norm running statistics.
inline std::pair<double, std::vector<Tensor>> batch_gradients(
    net::ParameterStore& params, const std::vector<Slot>& slots,
    std::span<const SkeletonClip* const> batch, const TrainConfig& cfg, std::mt19937_64& dropout_rng) {
  net::Binder bind(true);
  net::Context ctx{params, bind, ad::Mode::Train, &dropout_rng};
  auto fwd = net::forward_batch(net::make_batch(batch), ctx);
  std::vector<Label> labels;
  for (const auto* c : batch) labels.push_back(c->label);
  Var loss = focal_loss(fwd.probabilities, labels, cfg.alpha, cfg.gamma, cfg.alpha_applies_to);
  ad::backward(loss);
  std::vector<Tensor> grads;
  grads.reserve(slots.size());
  for (const auto& s : slots) {
    Tensor g = bind.grad(*s.tensor);
    if (s.role == net::Role::Weight && cfg.weight_decay > 0.0)
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += cfg.weight_decay * (*s.tensor)[i];
    grads.push_back(std::move(g));
  }
  const double total = total_loss(loss.value().item(), params, cfg.weight_decay);
  if (!std::isfinite(total)) throw NumericError("non-finite training loss");
  return {total, std::move(grads)};
}

/// Mini-batch index groups for one epoch; a trailing singleton joins the previous batch.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, std::size_t batch_size,
                                                           std::mt19937_64& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t s = 0; s < n; s += batch_size)
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(s),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(n, s + batch_size)));
  if (batches.size() > 1 && batches.back().size() == 1) {
    batches[batches.size() - 2].push_back(batches.back()[0]);
    batches.pop_back();
  }
  return batches;
}

struct TrainResult {
  net::ParameterStore params;
  TrainHistory history;
};

/// Optional per-epoch hook, e.g. for progress logging.
using EpochCallback = std::function<void(const EpochRecord&)>;

inline TrainResult train(const net::ModelConfig& model_cfg, const TrainConfig& cfg,
                         const std::vector<SkeletonClip>& train_set,
                         const std::vector<SkeletonClip>& val_set,
                         const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train_set.size() < 2) throw DataError("training needs at least 2 clips");
  if (val_set.empty()) throw DataError("validation set is empty");

  net::ParameterStore params = net::init_params(model_cfg, cfg.seed);
  auto slots = trainable_slots(params);
  std::vector<Tensor*> tensors;
  for (auto& s : slots) tensors.push_back(s.tensor);
  AdamState adam = make_adam_state(tensors);
  TrainRngs rngs(cfg.seed);
  PlateauScheduler scheduler(cfg.learning_rate, cfg.scheduler, cfg.improvement_threshold);

  TrainResult result{params, {}};
  double best = std::numeric_limits<double>::infinity();
  std::size_t bad_epochs = 0;
  double lr = cfg.learning_rate;
  std::bernoulli_distribution coin(0.5);

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (const auto& idx : epoch_batches(train_set.size(), cfg.batch_size, rngs.shuffle)) {
      std::vector<SkeletonClip> flipped;
      flipped.reserve(idx.size());
      std::vector<const SkeletonClip*> batch;
      for (std::size_t i : idx) {
        if (cfg.augment_flip && coin(rngs.flip)) {
          flipped.push_back(flip_horizontal(train_set[i]));
          batch.push_back(&flipped.back());
        } else {
          batch.push_back(&train_set[i]);
        }
      }
      auto [loss, grads] = batch_gradients(params, slots, batch, cfg, rngs.dropout);
      clip_grad_norm(grads, cfg.clip_max_norm);
      adam_step(tensors, grads, adam, lr);
      loss_sum += loss * static_cast<double>(idx.size());
      seen += idx.size();
    }

    const auto val = evaluate(params, val_set, cfg);
    if (!std::isfinite(val.loss)) throw NumericError("non-finite validation loss");
    EpochRecord rec{epoch, loss_sum / static_cast<double>(seen), val.loss, val.accuracy, lr};
    result.history.epochs.push_back(rec);
    if (on_epoch) on_epoch(rec);

    if (val.loss < best - cfg.improvement_threshold) {
      best = val.loss;
      bad_epochs = 0;
      result.params = params;
      result.history.best_epoch = epoch;
    } else {
      ++bad_epochs;
    }
    result.history.stop_epoch = epoch;
    if (bad_epochs >= cfg.patience) {
      result.history.stop_reason = "early_stopping";
      return result;
    }
    lr = scheduler.observe(val.loss);
  }
  result.history.stop_reason = "max_epochs";
  return result;
}

}  // namespace skelnet::train
