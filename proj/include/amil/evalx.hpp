#pragma once

// Cross-validation runner, the three ablation sweeps, and report tables.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "amil/bagdata.hpp"
#include "amil/checkpoint.hpp"
#include "amil/error.hpp"
#include "amil/metrics.hpp"
#include "amil/milnet.hpp"
#include "amil/rng.hpp"
#include "amil/trainer.hpp"

namespace amil::evalx {

struct CvOptions {
  std::size_t k = 10;
  std::size_t repetitions = 5;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  double threshold = 0.5;
  bool keep_models = false;
};

struct FoldRun {
  MetricsReport report;
  trainer::TrainHistory history;
  std::vector<double> scores;  // validation-fold probabilities, fold order
  std::optional<autograd::ParameterSet> params;
};

struct MetricSummary {
  double auc = 0.0, accuracy = 0.0, precision = 0.0, recall = 0.0;
};

struct CvResult {
  milnet::ModelConfig model_config;
  trainer::TrainConfig train_config;
  bagdata::Vocabulary vocabulary;
  std::vector<bagdata::FoldSplit> splits;
  std::vector<FoldRun> runs;  // parallel to splits
  MetricSummary mean;
  MetricSummary stddev;  // sample standard deviation over folds
  std::uint64_t split_digest = 0;
};

inline std::string config_digest(const milnet::ModelConfig& model, const trainer::TrainConfig& train) {
  nlohmann::ordered_json j;
  j["model"] = milnet::config_to_json(model);
  j["train"] = {{"learning_rate", train.learning_rate}, {"beta1", train.beta1},
                {"beta2", train.beta2},                 {"epsilon", train.epsilon},
                {"batch_size", train.batch_size},       {"max_epochs", train.max_epochs},
                {"loss", trainer::to_string(train.loss)}, {"alpha", train.alpha},
                {"gamma", train.gamma},                 {"patience", train.early_stop_patience},
                {"seed", train.seed}};
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

namespace detail {

inline MetricSummary summarize(const std::vector<FoldRun>& runs, bool spread, const MetricSummary& mean = {}) {
  MetricSummary s;
  const double n = static_cast<double>(runs.size());
  for (const auto& r : runs) {
    if (spread) {
      s.auc += (r.report.auc - mean.auc) * (r.report.auc - mean.auc);
      s.accuracy += (r.report.accuracy - mean.accuracy) * (r.report.accuracy - mean.accuracy);
      s.precision += (r.report.precision - mean.precision) * (r.report.precision - mean.precision);
      s.recall += (r.report.recall - mean.recall) * (r.report.recall - mean.recall);
    } else {
      s.auc += r.report.auc;
      s.accuracy += r.report.accuracy;
      s.precision += r.report.precision;
      s.recall += r.report.recall;
    }
  }
  if (spread) {
    const double d = n > 1 ? n - 1 : 1;
    s = {std::sqrt(s.auc / d), std::sqrt(s.accuracy / d), std::sqrt(s.precision / d), std::sqrt(s.recall / d)};
  } else {
    s = {s.auc / n, s.accuracy / n, s.precision / n, s.recall / n};
  }
  return s;
}

/// Runs fn(i) for i in [0, n) on up to `jobs` threads; rethrows the first
/// failure after all workers have finished.
template <typename F>
void parallel_for(std::size_t n, std::size_t jobs, F fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < jobs; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(failure_mutex);
          if (!failure) failure = std::current_exception();
        }
      }
    });
  }
  for (auto& t : workers) t.join();
  if (failure) std::rethrow_exception(failure);
}

template <typename T>
std::vector<T> subset(const std::vector<T>& items, const std::vector<std::size_t>& idx) {
  std::vector<T> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(items[i]);
  return out;
}

}  // namespace detail

/// Per fold: train with early stopping on the validation fold's AUC, then
/// report that fold's metrics. Per-fold seeds derive from options.seed, so
/// the result does not depend on `jobs`.
inline CvResult cv_run(const std::vector<bagdata::Bag>& bags, const milnet::ModelConfig& model_config,
                       const trainer::TrainConfig& train_config, const CvOptions& options) {
  CvResult result;
  result.vocabulary = bagdata::build_vocab(bags);
  result.model_config = model_config;
  result.model_config.vocab_size = result.vocabulary.table_rows();
  result.model_config.validate();
  result.train_config = train_config;
  result.train_config.validate();
  result.splits = bagdata::stratified_kfold(bags, options.k, options.repetitions, options.seed);
  result.split_digest = bagdata::split_digest(result.splits);
  result.runs.resize(result.splits.size());
  const std::string digest = config_digest(result.model_config, result.train_config);

  detail::parallel_for(result.splits.size(), options.jobs, [&](std::size_t i) {
    const auto& split = result.splits[i];
    auto model = result.model_config;
    auto train = result.train_config;
    model.seed = derive_seed(options.seed, split.repetition, split.fold, 1);
    train.seed = derive_seed(options.seed, split.repetition, split.fold, 2);
    const auto train_bags = detail::subset(bags, split.train);
    const auto val_bags = detail::subset(bags, split.validation);
    auto trained = trainer::train(train_bags, val_bags, result.vocabulary, model, train);

    FoldRun run;
    run.scores = trainer::predict_all(bagdata::batchify(val_bags, result.vocabulary, train.batch_size),
                                      trained.params, model);
    std::vector<int> labels;
    for (const auto& b : val_bags) labels.push_back(b.label);
    run.report = confusion_metrics(run.scores, labels, options.threshold);
    run.report.auc = roc_auc(run.scores, labels);
    run.report.fold = split.fold;
    run.report.repetition = split.repetition;
    run.report.model_kind = std::string(milnet::to_string(model.kind));
    run.report.config_digest = digest;
    run.history = std::move(trained.history);
    if (options.keep_models) run.params = std::move(trained.params);
    result.runs[i] = std::move(run);
  });

  result.mean = detail::summarize(result.runs, false);
  result.stddev = detail::summarize(result.runs, true, result.mean);
  return result;
}

/// Fold seed used for the model of a given split (matches cv_run).
inline std::uint64_t fold_model_seed(std::uint64_t seed, const bagdata::FoldSplit& split) {
  return derive_seed(seed, split.repetition, split.fold, 1);
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepArm {
  std::string label;
  CvResult result;
};

namespace detail {

inline void check_paired(const std::vector<SweepArm>& arms) {
  for (const auto& a : arms) {
    if (a.result.split_digest != arms.front().result.split_digest) {
      throw NumericError("sweep arms do not share fold assignments");
    }
  }
}

}  // namespace detail

inline std::vector<SweepArm> sweep_heads(const std::vector<bagdata::Bag>& bags, const milnet::ModelConfig& base,
                                         const trainer::TrainConfig& train, const std::vector<std::size_t>& head_counts,
                                         const CvOptions& options) {
  for (auto h : head_counts) {
    if (h > 0 && base.d_model % h != 0) {
      throw ConfigError("sweep_heads: d_model " + std::to_string(base.d_model) + " is not divisible by " +
                        std::to_string(h) + " heads");
    }
  }
  std::vector<SweepArm> arms;
  for (auto h : head_counts) {
    auto model = base;
    model.num_heads = h;
    arms.push_back({std::to_string(h), cv_run(bags, model, train, options)});
  }
  detail::check_paired(arms);
  return arms;
}

inline std::vector<SweepArm> sweep_pooling(const std::vector<bagdata::Bag>& bags, const milnet::ModelConfig& base,
                                           const trainer::TrainConfig& train,
                                           const std::vector<milnet::InstancePooling>& modes,
                                           const CvOptions& options) {
  std::vector<SweepArm> arms;
  for (auto mode : modes) {
    auto model = base;
    model.instance_pooling = mode;
    arms.push_back({std::string(milnet::to_string(mode)), cv_run(bags, model, train, options)});
  }
  detail::check_paired(arms);
  return arms;
}

/// Focal loss (with the configured alpha, gamma) against cross-entropy.
inline std::vector<SweepArm> compare_losses(const std::vector<bagdata::Bag>& bags, const milnet::ModelConfig& base,
                                            const trainer::TrainConfig& train, const CvOptions& options) {
  std::vector<SweepArm> arms;
  for (auto kind : {trainer::LossKind::focal, trainer::LossKind::cross_entropy}) {
    auto t = train;
    t.loss = kind;
    arms.push_back({std::string(trainer::to_string(kind)), cv_run(bags, base, t, options)});
  }
  detail::check_paired(arms);
  return arms;
}

// ---------------------------------------------------------------------------
// Report tables

inline constexpr std::string_view kReportHeader =
    "model,loss,heads,pooling,repetition,fold,auc,accuracy,precision,recall,tp,fp,tn,fn";

namespace detail {

inline std::string fixed(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

inline std::string row_prefix(const CvResult& r) {
  return std::string(milnet::to_string(r.model_config.kind)) + ',' + std::string(trainer::to_string(r.train_config.loss)) +
         ',' + std::to_string(r.model_config.num_heads) + ',' +
         std::string(milnet::to_string(r.model_config.instance_pooling));
}

}  // namespace detail

/// Per-fold rows followed by "all,mean" and "all,std" rows; count columns
/// of the aggregate rows are summed over folds (mean) or left empty (std).
inline std::string report_rows(const CvResult& r) {
  std::string out;
  const std::string prefix = detail::row_prefix(r);
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
  for (const auto& run : r.runs) {
    const auto& m = run.report;
    out += prefix + ',' + std::to_string(m.repetition) + ',' + std::to_string(m.fold) + ',' + detail::fixed(m.auc) +
           ',' + detail::fixed(m.accuracy) + ',' + detail::fixed(m.precision) + ',' + detail::fixed(m.recall) + ',' +
           std::to_string(m.tp) + ',' + std::to_string(m.fp) + ',' + std::to_string(m.tn) + ',' +
           std::to_string(m.fn) + '\n';
    tp += m.tp;
    fp += m.fp;
    tn += m.tn;
    fn += m.fn;
  }
  auto summary = [&](const char* label, const MetricSummary& s, bool counts) {
    out += prefix + ",all," + label + ',' + detail::fixed(s.auc) + ',' + detail::fixed(s.accuracy) + ',' +
           detail::fixed(s.precision) + ',' + detail::fixed(s.recall) + ',';
    out += counts ? std::to_string(tp) + ',' + std::to_string(fp) + ',' + std::to_string(tn) + ',' + std::to_string(fn)
                  : std::string(",,,");
    out += '\n';
  };
  summary("mean", r.mean, true);
  summary("std", r.stddev, false);
  return out;
}

inline std::string report_table(const CvResult& r) { return std::string(kReportHeader) + '\n' + report_rows(r); }

inline std::string sweep_table(const std::vector<SweepArm>& arms) {
  std::string out = std::string(kReportHeader) + '\n';
  for (const auto& a : arms) out += report_rows(a.result);
  return out;
}

/// A single evaluation row (no fold structure), e.g. for a saved model.
inline std::string single_report_table(const MetricsReport& m, const milnet::ModelConfig& model,
                                       std::string_view loss) {
  return std::string(kReportHeader) + '\n' + std::string(milnet::to_string(model.kind)) + ',' + std::string(loss) +
         ',' + std::to_string(model.num_heads) + ',' + std::string(milnet::to_string(model.instance_pooling)) +
         ",-,-," + detail::fixed(m.auc) + ',' + detail::fixed(m.accuracy) + ',' + detail::fixed(m.precision) + ',' +
         detail::fixed(m.recall) + ',' + std::to_string(m.tp) + ',' + std::to_string(m.fp) + ',' +
         std::to_string(m.tn) + ',' + std::to_string(m.fn) + '\n';
}

}  // namespace amil::evalx
