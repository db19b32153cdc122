#pragma once

// Subcommands: train, eval, sweep, predict, gradcheck, synth.
//
// Exit codes: 0 ok, 1 unexpected, 2 data, 3 config (including usage),
// 4 numeric/shape/domain, 5 gradcheck failure.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "amil/autograd.hpp"
#include "amil/bagdata.hpp"
#include "amil/checkpoint.hpp"
#include "amil/error.hpp"
#include "amil/evalx.hpp"
#include "amil/metrics.hpp"
#include "amil/milnet.hpp"
#include "amil/run_config.hpp"
#include "amil/trainer.hpp"

namespace amil::cli {

namespace fs = std::filesystem;
namespace ag = amil::autograd;

inline constexpr int kExitOk = 0;
inline constexpr int kExitUnexpected = 1;
inline constexpr int kExitGradcheckFailed = 5;

inline int exit_code(ErrorCategory c) {
  switch (c) {
    case ErrorCategory::data: return 2;
    case ErrorCategory::config: return 3;
    case ErrorCategory::numeric:
    case ErrorCategory::shape:
    case ErrorCategory::domain: return 4;
  }
  return kExitUnexpected;
}

/// Writes next to the target and renames, so a failed run leaves no
/// partial file behind.
inline void write_atomic(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + tmp.string() + "'");
    out << content;
    if (!out) {
      out.close();
      fs::remove(tmp);
      throw DataError("failed writing '" + tmp.string() + "'");
    }
  }
  fs::rename(tmp, path);
}

// ---------------------------------------------------------------------------
// Tiny full-model gradient check

inline milnet::ModelConfig tiny_model_config(std::size_t vocab_rows, std::uint64_t seed) {
  milnet::ModelConfig c;
  c.vocab_size = vocab_rows;
  c.d_model = 8;
  c.num_heads = 2;
  c.fc_dims = {6, 4};
  c.seed = seed;
  return c;
}

inline std::vector<bagdata::Bag> tiny_bags() {
  return {{"g0", {"a", "b", "c"}, 1}, {"g1", {"d"}, 0}, {"g2", {"b", "e", "f", "a"}, 1}};
}

/// Focal loss of the tiny model on three bags of unequal length, checked
/// against central differences for every parameter tensor.
inline ag::GradcheckReport tiny_gradcheck(std::uint64_t seed, const std::string& corrupt_op = {},
                                          milnet::ModelKind kind = milnet::ModelKind::ami_net_plus) {
  const auto bags = tiny_bags();
  const auto vocab = bagdata::build_vocab(bags);
  auto config = tiny_model_config(vocab.table_rows(), seed);
  config.kind = kind;
  const std::vector<std::size_t> all{0, 1, 2};
  const auto batch = bagdata::make_batch(bags, all, vocab);
  auto params = milnet::init_params(config, seed);
  trainer::TrainConfig train;
  auto builder = [&](ag::Tape& tape) {
    auto out = milnet::forward(tape, batch, params, config);
    return trainer::loss(tape, out.probabilities, batch.labels, train);
  };
  ag::GradcheckOptions options;
  options.corrupt_op = corrupt_op;
  return ag::gradcheck(builder, params, options);
}

// ---------------------------------------------------------------------------
// Commands

namespace detail {

inline std::vector<bagdata::Bag> require_dataset(const RunConfig& c) {
  if (c.dataset.empty()) throw DataError("no dataset given (use --data PATH)");
  auto bags = bagdata::load_jsonl(c.dataset);
  if (bags.empty()) throw DataError("dataset '" + c.dataset + "' contains no bags");
  return bags;
}

inline milnet::Checkpoint require_checkpoint(const RunConfig& c) {
  if (c.checkpoint.empty()) throw DataError("no checkpoint given (use --checkpoint PATH)");
  return milnet::load_checkpoint(c.checkpoint);
}

inline void echo_config(const RunConfig& c) { write_atomic(fs::path(c.out) / "config.ini", to_ini(c)); }

inline evalx::CvOptions cv_options(const RunConfig& c) {
  evalx::CvOptions o;
  o.k = c.folds;
  o.repetitions = c.repetitions;
  o.seed = c.seed;
  o.jobs = c.jobs;
  o.threshold = c.threshold;
  return o;
}

}  // namespace detail

/// Holds out the first stratified fold as the early-stopping validation set
/// and trains on the rest.
inline int cmd_train(const RunConfig& c, std::ostream& out) {
  const auto bags = detail::require_dataset(c);
  c.train.validate();
  const auto vocab = bagdata::build_vocab(bags);
  auto model = c.model;
  model.vocab_size = vocab.table_rows();
  model.validate();
  const auto split = bagdata::stratified_kfold(bags, c.folds, 1, c.seed).front();
  const auto train_bags = evalx::detail::subset(bags, split.train);
  const auto val_bags = evalx::detail::subset(bags, split.validation);
  auto result = trainer::train(train_bags, val_bags, vocab, model, c.train);

  const fs::path dir(c.out);
  write_atomic(dir / "history.csv", result.history.to_csv());
  const std::string ckpt = milnet::encode_checkpoint(result.params, model, vocab);
  write_atomic(dir / "model.ckpt", ckpt);
  detail::echo_config(c);
  out << "epochs: " << result.history.epochs.size() << "\n";
  out << "best_epoch: " << result.history.best_epoch << "\n";
  out << "best_val_auc: " << evalx::detail::fixed(result.history.best_auc()) << "\n";
  out << "checkpoint: " << (dir / "model.ckpt").string() << "\n";
  return kExitOk;
}

inline int cmd_eval(const RunConfig& c, std::ostream& out, std::ostream& err) {
  const auto ck = detail::require_checkpoint(c);
  const auto bags = detail::require_dataset(c);
  const auto batches = bagdata::batchify(bags, ck.vocabulary, c.train.batch_size);
  const auto scores = trainer::predict_all(batches, ck.params, ck.config);
  std::vector<int> labels;
  for (const auto& b : bags) labels.push_back(b.label);
  auto report = evalx::confusion_metrics(scores, labels, c.threshold);
  const bool both = std::count(labels.begin(), labels.end(), 1) > 0 && std::count(labels.begin(), labels.end(), 0) > 0;
  if (both) {
    report.auc = evalx::roc_auc(scores, labels);
  } else {
    report.auc = std::nan("");
    err << "warning: dataset holds a single class, AUC reported as nan\n";
  }
  const std::string table = evalx::single_report_table(report, ck.config, trainer::to_string(c.train.loss));
  write_atomic(fs::path(c.out) / "metrics.csv", table);
  detail::echo_config(c);
  out << table;
  return kExitOk;
}

inline int cmd_sweep(const RunConfig& c, const std::string& kind, std::ostream& out) {
  if (kind != "heads" && kind != "pooling" && kind != "loss") {
    throw ConfigError("unknown sweep kind '" + kind + "' (expected heads, pooling or loss)");
  }
  const auto bags = detail::require_dataset(c);
  const auto options = detail::cv_options(c);
  std::vector<evalx::SweepArm> arms;
  if (kind == "heads") {
    arms = evalx::sweep_heads(bags, c.model, c.train, c.sweep_heads, options);
  } else if (kind == "pooling") {
    arms = evalx::sweep_pooling(bags, c.model, c.train, c.sweep_pooling, options);
  } else {
    arms = evalx::compare_losses(bags, c.model, c.train, options);
  }
  const std::string table = evalx::sweep_table(arms);
  write_atomic(fs::path(c.out) / ("sweep_" + kind + ".csv"), table);
  detail::echo_config(c);
  out << "arm,mean_auc,std_auc,mean_recall\n";
  for (const auto& a : arms) {
    out << a.label << ',' << evalx::detail::fixed(a.result.mean.auc) << ','
        << evalx::detail::fixed(a.result.stddev.auc) << ',' << evalx::detail::fixed(a.result.mean.recall) << '\n';
  }
  return kExitOk;
}

struct Prediction {
  double probability = 0.0;
  std::vector<std::pair<std::string, double>> weights;  // sorted by weight, descending
};

inline Prediction predict_bag(const milnet::Checkpoint& ck, const std::vector<std::string>& tokens) {
  if (tokens.empty()) throw DataError("predict: empty bag");
  const std::vector<bagdata::Bag> bags{{"input", tokens, 0}};
  const std::vector<std::size_t> sel{0};
  const auto batch = bagdata::make_batch(bags, sel, ck.vocabulary);
  ag::Tape tape = ag::Tape::no_grad();
  auto fwd = milnet::forward(tape, batch, ck.params, ck.config);
  if (!fwd.attention) {
    throw DomainError("predict: model kind '" + std::string(milnet::to_string(ck.config.kind)) +
                      "' has no attention weights");
  }
  Prediction p;
  p.probability = fwd.probabilities[0];
  for (std::size_t j = 0; j < tokens.size(); ++j) p.weights.emplace_back(tokens[j], (*fwd.attention)[j]);
  std::stable_sort(p.weights.begin(), p.weights.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  return p;
}

inline int cmd_predict(const RunConfig& c, const std::vector<std::string>& tokens, std::ostream& out) {
  const auto ck = detail::require_checkpoint(c);
  const auto p = predict_bag(ck, tokens);
  std::string text;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", p.probability);
  text += "probability: " + std::string(buf) + "\ntoken,weight\n";
  for (const auto& [token, w] : p.weights) {
    std::snprintf(buf, sizeof buf, "%.17g", w);
    text += token + ',' + buf + '\n';
  }
  write_atomic(fs::path(c.out) / "prediction.txt", text);
  detail::echo_config(c);
  out << text;
  return kExitOk;
}

inline int cmd_gradcheck(const RunConfig& c, const std::string& corrupt_op, std::ostream& out) {
  const auto report = tiny_gradcheck(c.seed, corrupt_op, c.model.kind);
  std::string text = "parameter,max_relative_error,status\n";
  char buf[32];
  for (const auto& e : report.entries) {
    std::snprintf(buf, sizeof buf, "%.3e", e.max_relative_error);
    text += e.name + ',' + buf + ',' + (e.passed ? "pass" : "FAIL") + '\n';
  }
  std::snprintf(buf, sizeof buf, "%.0e", report.tolerance);
  text += std::string(report.passed() ? "gradcheck passed" : "gradcheck FAILED") + " at tolerance " + buf + "\n";
  write_atomic(fs::path(c.out) / "gradcheck.csv", text);
  detail::echo_config(c);
  out << text;
  return report.passed() ? kExitOk : kExitGradcheckFailed;
}

inline int cmd_synth(const RunConfig& c, std::ostream& out) {
  const auto data = bagdata::synth_generate(c.synth);
  const auto positives = static_cast<std::size_t>(
      std::count_if(data.bags.begin(), data.bags.end(), [](const bagdata::Bag& b) { return b.label == 1; }));
  write_atomic(fs::path(c.out) / "bags.jsonl", bagdata::to_jsonl(data.bags));
  detail::echo_config(c);
  out << "positives: " << positives << "\n";
  out << "negatives: " << data.bags.size() - positives << "\n";
  out << "dataset: " << (fs::path(c.out) / "bags.jsonl").string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// Argument handling

/// Flag name -> config key. Every flag overrides the config file.
inline const std::vector<std::pair<std::string, std::string>>& override_flags() {
  static const std::vector<std::pair<std::string, std::string>> flags{
      {"--seed", "run.seed"},
      {"--out", "run.out"},
      {"--jobs", "run.jobs"},
      {"--data", "data.dataset"},
      {"--checkpoint", "data.checkpoint"},
      {"--model", "model.kind"},
      {"--d-model", "model.d_model"},
      {"--heads", "model.num_heads"},
      {"--fc", "model.fc_dims"},
      {"--views", "model.pooling_views"},
      {"--pooling", "model.instance_pooling"},
      {"--lr", "train.learning_rate"},
      {"--batch-size", "train.batch_size"},
      {"--epochs", "train.max_epochs"},
      {"--loss", "train.loss"},
      {"--alpha", "train.alpha"},
      {"--gamma", "train.gamma"},
      {"--patience", "train.patience"},
      {"--folds", "run.folds"},
      {"--repetitions", "run.repetitions"},
      {"--threshold", "run.threshold"},
      {"--sweep-heads", "sweep.heads"},
      {"--sweep-pooling", "sweep.pooling"},
      {"--num-bags", "synth.num_bags"},
      {"--vocab-size", "synth.vocab_size"},
      {"--witness-tokens", "synth.witness_tokens"},
      {"--positive-rate", "synth.positive_rate"},
      {"--min-length", "synth.min_length"},
      {"--max-length", "synth.max_length"},
      {"--witnesses-per-positive", "synth.witnesses_per_positive"},
  };
  return flags;
}

/// Runs one command line (args excludes the program name). Errors are
/// reported on `err` as "error [category]: message".
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"amil: multi-instance learning with attention pooling"};
  app.require_subcommand(1);
  std::string config_path;
  std::map<std::string, std::string> flag_values;
  std::vector<std::string> sets;
  std::string sweep_kind;
  std::vector<std::string> tokens;
  std::string corrupt_op;

  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "sectioned key=value config file");
    for (const auto& [flag, key] : override_flags()) sub->add_option(flag, flag_values[key], "sets " + key);
    sub->add_option("--set", sets, "override any config key: section.key=value");
  };
  auto* train = app.add_subcommand("train", "train one model, keep the best validation checkpoint");
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  auto* sweep = app.add_subcommand("sweep", "cross-validated ablation sweep");
  sweep->add_option("kind", sweep_kind, "heads, pooling or loss")->required();
  auto* predict = app.add_subcommand("predict", "score one bag and list its attention weights");
  predict->add_option("tokens", tokens, "instance tokens of the bag")->required();
  auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference check of the tiny full model");
  gradcheck->add_option("--corrupt", corrupt_op, "test hook: scale the gradient of this op");
  auto* synth = app.add_subcommand("synth", "generate a synthetic witness dataset");
  for (auto* sub : {train, eval, sweep, predict, gradcheck, synth}) add_common(sub);

  std::vector<std::string> argv_store{"amil"};
  argv_store.insert(argv_store.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_store) argv.push_back(a.data());
  try {
    app.parse(static_cast<int>(argv.size()), argv.data());
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error [config]: " << e.what() << "\n";
    return exit_code(ErrorCategory::config);
  }

  try {
    pt::ptree tree;
    if (!config_path.empty()) tree = read_ini_file(config_path);
    for (const auto& [flag, key] : override_flags()) {
      for (auto* sub : app.get_subcommands()) {
        if (sub->count(flag) > 0) apply_override(tree, key, flag_values[key]);
      }
    }
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got '" + s + "'");
      apply_override(tree, s.substr(0, eq), s.substr(eq + 1));
    }
    const RunConfig config = from_ptree(tree);

    if (train->parsed()) return cmd_train(config, out);
    if (eval->parsed()) return cmd_eval(config, out, err);
    if (sweep->parsed()) return cmd_sweep(config, sweep_kind, out);
    if (predict->parsed()) return cmd_predict(config, tokens, out);
    if (gradcheck->parsed()) return cmd_gradcheck(config, corrupt_op, out);
    if (synth->parsed()) return cmd_synth(config, out);
    throw ConfigError("no subcommand");
  } catch (const Error& e) {
    err << "error [" << to_string(e.category()) << "]: " << e.what() << "\n";
    return exit_code(e.category());
  } catch (const fs::filesystem_error& e) {
    err << "error [data]: " << e.what() << "\n";
    return exit_code(ErrorCategory::data);
  } catch (const std::exception& e) {
    err << "error [unexpected]: " << e.what() << "\n";
    return kExitUnexpected;
  }
}

}  // namespace amil::cli
