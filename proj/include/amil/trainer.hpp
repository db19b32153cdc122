#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "amil/autograd.hpp"
#include "amil/bagdata.hpp"
#include "amil/error.hpp"
#include "amil/metrics.hpp"
#include "amil/milnet.hpp"
#include "amil/rng.hpp"

namespace amil::trainer {

namespace ag = amil::autograd;
using ag::ParameterSet;
using ag::Tape;
using ag::Tensor;

enum class LossKind { focal, cross_entropy };

inline std::string_view to_string(LossKind k) { return k == LossKind::focal ? "focal" : "cross_entropy"; }

inline LossKind parse_loss_kind(std::string_view s) {
  if (s == "focal") return LossKind::focal;
  if (s == "cross_entropy") return LossKind::cross_entropy;
  throw ConfigError("unknown loss '" + std::string(s) + "' (expected focal or cross_entropy)");
}

struct TrainConfig {
  double learning_rate = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.98;
  double epsilon = 1e-8;
  std::size_t batch_size = 512;
  std::size_t max_epochs = 200;
  LossKind loss = LossKind::focal;
  double alpha = 0.25;
  double gamma = 2.0;
  std::size_t early_stop_patience = 20;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
    if (!(beta1 > 0.0 && beta1 < 1.0)) throw ConfigError("beta1 must lie in (0,1)");
    if (!(beta2 > 0.0 && beta2 < 1.0)) throw ConfigError("beta2 must lie in (0,1)");
    if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
    if (!(gamma >= 0.0)) throw ConfigError("gamma must be nonnegative");
    if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in (0,1]");
    if (batch_size == 0) throw ConfigError("batch_size must be positive");
    if (max_epochs == 0) throw ConfigError("max_epochs must be positive");
    if (early_stop_patience == 0) throw ConfigError("early_stop_patience must be positive");
  }

  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

// ---------------------------------------------------------------------------
// Losses

inline void check_label(int y) {
  if (y != 0 && y != 1) throw DataError("label must be 0 or 1, got " + std::to_string(y));
}

inline double clamp_probability(double p) {
  return std::clamp(p, milnet::kProbabilityClamp, 1.0 - milnet::kProbabilityClamp);
}

/// -alpha (1 - p_t)^gamma log(p_t), with p_t the probability of the true class.
inline double focal_loss(double y_pred, int y_true, double alpha, double gamma) {
  check_label(y_true);
  const double p = clamp_probability(y_pred);
  const double pt = y_true == 1 ? p : 1.0 - p;
  return -alpha * std::pow(1.0 - pt, gamma) * std::log(pt);
}

inline double cross_entropy(double y_pred, int y_true) {
  check_label(y_true);
  const double p = clamp_probability(y_pred);
  return -(y_true * std::log(p) + (1 - y_true) * std::log(1.0 - p));
}

namespace detail {

/// p_t = y p + (1 - y)(1 - p) for a [B] probability tensor.
inline Tensor true_class_probability(Tape& tape, const Tensor& probs, std::span<const int> labels) {
  if (labels.size() != probs.size()) {
    throw ShapeError("loss: " + std::to_string(labels.size()) + " labels for " + std::to_string(probs.size()) +
                     " predictions");
  }
  std::vector<double> sign(labels.size());
  std::vector<double> offset(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    check_label(labels[i]);
    sign[i] = labels[i] == 1 ? 1.0 : -1.0;
    offset[i] = labels[i] == 1 ? 0.0 : 1.0;
  }
  Tensor p = ag::clamp(tape, probs, milnet::kProbabilityClamp, 1.0 - milnet::kProbabilityClamp);
  return ag::add(tape, ag::mul(tape, p, Tensor(probs.shape(), std::move(sign))), Tensor(probs.shape(), std::move(offset)));
}

inline Tensor batch_mean(Tape& tape, const Tensor& per_bag) {
  return ag::reduce(tape, ag::ReduceKind::mean, ag::reshape(tape, per_bag, {per_bag.size()}), 0);
}

}  // namespace detail

/// Batch-mean focal loss on the tape. (1 - p_t)^gamma is formed as
/// exp(gamma log(1 - p_t)), which is exact at gamma = 0.
inline Tensor focal_loss(Tape& tape, const Tensor& probs, std::span<const int> labels, double alpha, double gamma) {
  Tensor pt = detail::true_class_probability(tape, probs, labels);
  Tensor log_pt = ag::log(tape, pt);
  Tensor per_bag = ag::scale(tape, log_pt, -alpha);
  if (gamma != 0.0) {
    Tensor one_minus = ag::add(tape, ag::negate(tape, pt), Tensor::scalar(1.0));
    Tensor modulator = ag::exp(tape, ag::scale(tape, ag::log(tape, one_minus), gamma));
    per_bag = ag::mul(tape, per_bag, modulator);
  }
  return detail::batch_mean(tape, per_bag);
}

inline Tensor cross_entropy(Tape& tape, const Tensor& probs, std::span<const int> labels) {
  Tensor pt = detail::true_class_probability(tape, probs, labels);
  return detail::batch_mean(tape, ag::negate(tape, ag::log(tape, pt)));
}

inline Tensor loss(Tape& tape, const Tensor& probs, std::span<const int> labels, const TrainConfig& config) {
  return config.loss == LossKind::focal ? focal_loss(tape, probs, labels, config.alpha, config.gamma)
                                        : cross_entropy(tape, probs, labels);
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
  std::vector<std::vector<double>> first;
  std::vector<std::vector<double>> second;
};

inline AdamState make_adam_state(const ParameterSet& params) {
  AdamState s;
  for (const auto& p : params) {
    s.first.emplace_back(p.value.size(), 0.0);
    s.second.emplace_back(p.value.size(), 0.0);
  }
  return s;
}

/// One bias-corrected Adam update at step t (1-based) from the gradients
/// currently stored on the parameters. Parameters that received no gradient
/// are skipped; frozen rows are never touched.
inline void adam_step(ParameterSet& params, AdamState& state, std::size_t t, const TrainConfig& config) {
  if (t < 1) throw DomainError("adam_step: step index must be >= 1");
  if (state.first.size() != params.size() || state.second.size() != params.size()) {
    throw ShapeError("adam_step: optimizer state holds " + std::to_string(state.first.size()) +
                     " entries for " + std::to_string(params.size()) + " parameters");
  }
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(t));
  std::size_t k = 0;
  for (auto& p : params) {
    auto& m = state.first[k];
    auto& v = state.second[k];
    ++k;
    if (m.size() != p.value.size() || v.size() != p.value.size()) {
      throw ShapeError("adam_step: state for '" + p.name + "' does not match shape " +
                       ag::to_string(p.value.shape()));
    }
    if (!p.value.has_grad()) continue;
    const auto g = p.value.grad();
    auto theta = p.value.mutable_data();
    const std::size_t row = p.value.rank() == 2 ? p.value.extent(1) : p.value.size();
    std::vector<std::uint8_t> frozen(p.value.size() / row, 0);
    for (auto r : p.frozen_rows) frozen.at(r) = 1;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      if (frozen[i / row]) continue;
      m[i] = config.beta1 * m[i] + (1.0 - config.beta1) * g[i];
      v[i] = config.beta2 * v[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double m_hat = m[i] / c1;
      const double v_hat = v[i] / c2;
      theta[i] -= config.learning_rate * m_hat / (std::sqrt(v_hat) + config.epsilon);
    }
  }
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double val_auc = 0.0;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;  // 1-based; 0 before the first epoch

  double best_auc() const { return best_epoch == 0 ? 0.0 : epochs[best_epoch - 1].val_auc; }

  /// epoch,train_loss,val_auc,is_best
  std::string to_csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "epoch,train_loss,val_auc,is_best\n";
    for (const auto& e : epochs) {
      os << e.epoch << ',' << e.train_loss << ',' << e.val_auc << ',' << (e.epoch == best_epoch ? 1 : 0) << '\n';
    }
    return os.str();
  }
};

/// Tracks the best validation AUC. A tie with the best retains the later
/// epoch; only a strictly higher AUC resets the patience counter.
class EarlyStopping {
 public:
  explicit EarlyStopping(std::size_t patience) : patience_(patience) {}

  /// Returns true when the parameters of this epoch should be retained.
  bool observe(double auc) {
    ++epoch_;
    if (epoch_ == 1 || auc > best_) {
      best_ = auc;
      best_epoch_ = epoch_;
      improved_epoch_ = epoch_;
      return true;
    }
    if (auc == best_) {
      best_epoch_ = epoch_;
      return true;
    }
    return false;
  }

  bool should_stop() const { return epoch_ - improved_epoch_ >= patience_; }
  std::size_t best_epoch() const { return best_epoch_; }
  double best() const { return best_; }

 private:
  std::size_t patience_;
  std::size_t epoch_ = 0;
  std::size_t best_epoch_ = 0;
  std::size_t improved_epoch_ = 0;
  double best_ = -std::numeric_limits<double>::infinity();
};

struct TrainResult {
  ParameterSet params;  // the best-AUC parameters, not the last
  TrainHistory history;
};

inline std::vector<double> predict_all(const std::vector<bagdata::BatchedBags>& batches, const ParameterSet& params,
                                       const milnet::ModelConfig& config) {
  std::vector<double> out;
  for (const auto& b : batches) {
    auto p = milnet::predict(b, params, config);
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

/// Mini-batch Adam with a seeded per-epoch shuffle and early stopping on the
/// validation AUC. `model_config.vocab_size` must equal vocab.table_rows().
inline TrainResult train(const std::vector<bagdata::Bag>& train_bags, const std::vector<bagdata::Bag>& val_bags,
                         const bagdata::Vocabulary& vocab, const milnet::ModelConfig& model_config,
                         const TrainConfig& config) {
  config.validate();
  model_config.validate();
  if (train_bags.empty()) throw DataError("train: empty training set");
  if (val_bags.empty()) throw DataError("train: empty validation set");
  if (model_config.vocab_size != vocab.table_rows()) {
    throw ConfigError("train: model vocab_size " + std::to_string(model_config.vocab_size) +
                      " does not match vocabulary (" + std::to_string(vocab.table_rows()) + " rows)");
  }
  std::vector<int> val_labels;
  for (const auto& b : val_bags) val_labels.push_back(b.label);
  if (std::count(val_labels.begin(), val_labels.end(), 1) == 0 ||
      std::count(val_labels.begin(), val_labels.end(), 0) == 0) {
    throw DataError("train: AUC undefined, validation set contains a single class");
  }
  const auto val_batches = bagdata::batchify(val_bags, vocab, config.batch_size);

  ParameterSet params = milnet::init_params(model_config, model_config.seed);
  AdamState adam = make_adam_state(params);
  Rng shuffle_rng(derive_seed(config.seed, 0x7368756666ULL));
  std::vector<std::size_t> order(train_bags.size());
  std::iota(order.begin(), order.end(), 0);

  TrainResult result{params.clone(), {}};
  EarlyStopping stopper(config.early_stop_patience);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    shuffle_rng.shuffle(std::span(order));
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t n = std::min(config.batch_size, order.size() - start);
      const auto batch = bagdata::make_batch(train_bags, std::span(order).subspan(start, n), vocab);
      params.zero_grad();
      Tape tape;
      auto out = milnet::forward(tape, batch, params, model_config);
      Tensor l = loss(tape, out.probabilities, batch.labels, config);
      if (!std::isfinite(l.item())) throw NumericError("train: non-finite loss at epoch " + std::to_string(epoch));
      loss_sum += l.item() * static_cast<double>(n);
      ag::backward(l, tape);
      adam_step(params, adam, ++step, config);
    }
    if (!params.all_finite()) throw NumericError("train: non-finite parameter after epoch " + std::to_string(epoch));
    const double auc = evalx::roc_auc(predict_all(val_batches, params, model_config), val_labels);
    result.history.epochs.push_back({epoch, loss_sum / static_cast<double>(order.size()), auc});
    if (stopper.observe(auc)) {
      result.params = params.clone();
      result.history.best_epoch = epoch;
    }
    if (stopper.should_stop()) break;
  }
  return result;
}

}  // namespace amil::trainer
