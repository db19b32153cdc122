#pragma once

// Effective run configuration: sectioned key=value file plus overrides.
//
//   [model] kind d_model num_heads fc_dims pooling_views instance_pooling
//   [train] learning_rate beta1 beta2 epsilon batch_size max_epochs loss alpha gamma patience
//   [data]  dataset checkpoint
//   [run]   seed out jobs folds repetitions threshold
//   [sweep] heads pooling
//   [synth] num_bags vocab_size witness_tokens positive_rate min_length max_length witnesses_per_positive
//
// Lists are comma separated.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "amil/bagdata.hpp"
#include "amil/error.hpp"
#include "amil/milnet.hpp"
#include "amil/trainer.hpp"

namespace amil::cli {

namespace pt = boost::property_tree;

struct RunConfig {
  milnet::ModelConfig model;
  trainer::TrainConfig train;
  std::string dataset;
  std::string checkpoint;
  std::uint64_t seed = 0;
  std::string out = "amil-out";
  std::size_t jobs = std::max(1u, std::thread::hardware_concurrency());
  std::size_t folds = 10;
  std::size_t repetitions = 1;
  double threshold = 0.5;
  std::vector<std::size_t> sweep_heads{0, 4, 8, 16, 32};
  std::vector<milnet::InstancePooling> sweep_pooling{milnet::InstancePooling::self_adaptive,
                                                     milnet::InstancePooling::max, milnet::InstancePooling::mean,
                                                     milnet::InstancePooling::attention};
  bagdata::SynthSpec synth;
};

inline const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "model.kind",         "model.d_model",         "model.num_heads",      "model.fc_dims",
      "model.pooling_views", "model.instance_pooling", "train.learning_rate", "train.beta1",
      "train.beta2",        "train.epsilon",         "train.batch_size",     "train.max_epochs",
      "train.loss",         "train.alpha",           "train.gamma",          "train.patience",
      "data.dataset",       "data.checkpoint",       "run.seed",             "run.out",
      "run.jobs",           "run.folds",             "run.repetitions",      "run.threshold",
      "sweep.heads",        "sweep.pooling",         "synth.num_bags",       "synth.vocab_size",
      "synth.witness_tokens", "synth.positive_rate", "synth.min_length",     "synth.max_length",
      "synth.witnesses_per_positive"};
  return keys;
}

namespace detail {

inline std::string format_double(double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}

template <typename T>
T parse_number(const std::string& key, const std::string& text) {
  T value{};
  const char* first = text.data();
  const char* last = text.data() + text.size();
  while (first < last && *first == ' ') ++first;
  while (last > first && last[-1] == ' ') --last;
  auto [ptr, ec] = std::from_chars(first, last, value);
  if (ec != std::errc() || ptr != last || first == last) {
    throw ConfigError("'" + key + "': cannot parse '" + text + "' as a number");
  }
  return value;
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  for (std::string item; std::getline(ss, item, ',');) {
    item.erase(0, item.find_first_not_of(' '));
    item.erase(item.find_last_not_of(' ') + 1);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& items, auto fmt) {
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += ',';
    out += fmt(items[i]);
  }
  return out;
}

// Parse helpers rethrow enum/number failures as ConfigError naming the key.
template <typename F>
auto keyed(const std::string& key, F f) -> decltype(f()) {
  try {
    return f();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError("'" + key + "': " + e.what());
  }
}

}  // namespace detail

inline pt::ptree to_ptree(const RunConfig& c) {
  using detail::format_double;
  pt::ptree t;
  auto put = [&](const std::string& key, const std::string& value) { t.put(pt::ptree::path_type(key, '.'), value); };
  put("model.kind", std::string(milnet::to_string(c.model.kind)));
  put("model.d_model", std::to_string(c.model.d_model));
  put("model.num_heads", std::to_string(c.model.num_heads));
  put("model.fc_dims", detail::join(c.model.fc_dims, [](std::size_t v) { return std::to_string(v); }));
  put("model.pooling_views",
      detail::join(c.model.pooling_views, [](milnet::PoolingView v) { return std::string(milnet::to_string(v)); }));
  put("model.instance_pooling", std::string(milnet::to_string(c.model.instance_pooling)));
  put("train.learning_rate", format_double(c.train.learning_rate));
  put("train.beta1", format_double(c.train.beta1));
  put("train.beta2", format_double(c.train.beta2));
  put("train.epsilon", format_double(c.train.epsilon));
  put("train.batch_size", std::to_string(c.train.batch_size));
  put("train.max_epochs", std::to_string(c.train.max_epochs));
  put("train.loss", std::string(trainer::to_string(c.train.loss)));
  put("train.alpha", format_double(c.train.alpha));
  put("train.gamma", format_double(c.train.gamma));
  put("train.patience", std::to_string(c.train.early_stop_patience));
  put("data.dataset", c.dataset);
  put("data.checkpoint", c.checkpoint);
  put("run.seed", std::to_string(c.seed));
  put("run.out", c.out);
  put("run.jobs", std::to_string(c.jobs));
  put("run.folds", std::to_string(c.folds));
  put("run.repetitions", std::to_string(c.repetitions));
  put("run.threshold", format_double(c.threshold));
  put("sweep.heads", detail::join(c.sweep_heads, [](std::size_t v) { return std::to_string(v); }));
  put("sweep.pooling", detail::join(c.sweep_pooling, [](milnet::InstancePooling p) {
        return std::string(milnet::to_string(p));
      }));
  put("synth.num_bags", std::to_string(c.synth.num_bags));
  put("synth.vocab_size", std::to_string(c.synth.vocab_size));
  put("synth.witness_tokens", std::to_string(c.synth.num_witness_tokens));
  put("synth.positive_rate", format_double(c.synth.positive_rate));
  put("synth.min_length", std::to_string(c.synth.min_length));
  put("synth.max_length", std::to_string(c.synth.max_length));
  put("synth.witnesses_per_positive", std::to_string(c.synth.witnesses_per_positive));
  return t;
}

/// Absent keys keep their defaults; unknown keys are rejected.
inline RunConfig from_ptree(const pt::ptree& tree) {
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError("key '" + section + "' is outside any section");
    for (const auto& [key, leaf] : body) {
      if (!known_keys().contains(section + "." + key)) throw ConfigError("unknown config key '" + section + "." + key + "'");
    }
  }
  RunConfig c;
  auto text = [&](const std::string& key) -> std::optional<std::string> {
    auto v = tree.get_optional<std::string>(pt::ptree::path_type(key, '.'));
    return v ? std::optional<std::string>(*v) : std::nullopt;
  };
  auto size = [&](const std::string& key, std::size_t& dst) {
    if (auto v = text(key)) dst = detail::parse_number<std::size_t>(key, *v);
  };
  auto real = [&](const std::string& key, double& dst) {
    if (auto v = text(key)) dst = detail::parse_number<double>(key, *v);
  };
  if (auto v = text("model.kind")) c.model.kind = detail::keyed("model.kind", [&] { return milnet::parse_model_kind(*v); });
  size("model.d_model", c.model.d_model);
  size("model.num_heads", c.model.num_heads);
  if (auto v = text("model.fc_dims")) {
    c.model.fc_dims.clear();
    for (const auto& item : detail::split_list(*v)) {
      c.model.fc_dims.push_back(detail::parse_number<std::size_t>("model.fc_dims", item));
    }
  }
  if (auto v = text("model.pooling_views")) {
    c.model.pooling_views.clear();
    for (const auto& item : detail::split_list(*v)) {
      c.model.pooling_views.push_back(
          detail::keyed("model.pooling_views", [&] { return milnet::parse_pooling_view(item); }));
    }
  }
  if (auto v = text("model.instance_pooling")) {
    c.model.instance_pooling =
        detail::keyed("model.instance_pooling", [&] { return milnet::parse_instance_pooling(*v); });
  }
  real("train.learning_rate", c.train.learning_rate);
  real("train.beta1", c.train.beta1);
  real("train.beta2", c.train.beta2);
  real("train.epsilon", c.train.epsilon);
  size("train.batch_size", c.train.batch_size);
  size("train.max_epochs", c.train.max_epochs);
  if (auto v = text("train.loss")) c.train.loss = detail::keyed("train.loss", [&] { return trainer::parse_loss_kind(*v); });
  real("train.alpha", c.train.alpha);
  real("train.gamma", c.train.gamma);
  size("train.patience", c.train.early_stop_patience);
  if (auto v = text("data.dataset")) c.dataset = *v;
  if (auto v = text("data.checkpoint")) c.checkpoint = *v;
  if (auto v = text("run.seed")) c.seed = detail::parse_number<std::uint64_t>("run.seed", *v);
  if (auto v = text("run.out")) c.out = *v;
  size("run.jobs", c.jobs);
  size("run.folds", c.folds);
  size("run.repetitions", c.repetitions);
  real("run.threshold", c.threshold);
  if (auto v = text("sweep.heads")) {
    c.sweep_heads.clear();
    for (const auto& item : detail::split_list(*v)) {
      c.sweep_heads.push_back(detail::parse_number<std::size_t>("sweep.heads", item));
    }
  }
  if (auto v = text("sweep.pooling")) {
    c.sweep_pooling.clear();
    for (const auto& item : detail::split_list(*v)) {
      c.sweep_pooling.push_back(detail::keyed("sweep.pooling", [&] { return milnet::parse_instance_pooling(item); }));
    }
  }
  size("synth.num_bags", c.synth.num_bags);
  size("synth.vocab_size", c.synth.vocab_size);
  size("synth.witness_tokens", c.synth.num_witness_tokens);
  real("synth.positive_rate", c.synth.positive_rate);
  size("synth.min_length", c.synth.min_length);
  size("synth.max_length", c.synth.max_length);
  size("synth.witnesses_per_positive", c.synth.witnesses_per_positive);

  if (c.jobs == 0) throw ConfigError("run.jobs must be at least 1");
  if (c.folds < 2) throw ConfigError("run.folds must be at least 2");
  if (c.repetitions == 0) throw ConfigError("run.repetitions must be at least 1");
  if (!(c.threshold >= 0.0 && c.threshold <= 1.0)) throw ConfigError("run.threshold must lie in [0,1]");
  c.model.seed = c.seed;
  c.train.seed = c.seed;
  c.synth.seed = c.seed;
  return c;
}

inline pt::ptree read_ini_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path.string() + "'");
  pt::ptree tree;
  try {
    pt::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("config file '" + path.string() + "': " + e.message() + " (line " +
                      std::to_string(e.line()) + ")");
  }
  return tree;
}

inline void apply_override(pt::ptree& tree, const std::string& key, const std::string& value) {
  if (!known_keys().contains(key)) throw ConfigError("unknown config key '" + key + "'");
  tree.put(pt::ptree::path_type(key, '.'), value);
}

inline std::string to_ini(const RunConfig& c) {
  std::ostringstream out;
  pt::write_ini(out, to_ptree(c));
  return out.str();
}

}  // namespace amil::cli
