#pragma once

// Bags of symptom tokens: ingestion, vocabulary, padding, stratified folds,
// and a synthetic generator that follows the standard MIL assumption.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include <json.hpp>

#include "amil/error.hpp"
#include "amil/rng.hpp"

namespace amil::bagdata {

struct Bag {
  std::string id;
  std::vector<std::string> tokens;
  int label = 0;

  friend bool operator==(const Bag&, const Bag&) = default;
};

/// Token <-> id map. Id 0 is the pad slot and never names a token.
class Vocabulary {
 public:
  static constexpr std::size_t pad_id = 0;

  Vocabulary() = default;

  explicit Vocabulary(const std::vector<std::string>& tokens) {
    for (const auto& t : tokens) insert(t);
  }

  std::size_t insert(const std::string& token) {
    auto [it, inserted] = ids_.emplace(token, tokens_.size() + 1);
    if (inserted) tokens_.push_back(token);
    return it->second;
  }

  bool contains(const std::string& token) const { return ids_.count(token) != 0; }

  std::size_t id(const std::string& token) const {
    auto it = ids_.find(token);
    if (it == ids_.end()) throw DataError("unknown token '" + token + "'");
    return it->second;
  }

  const std::string& token(std::size_t id) const {
    if (id == pad_id || id > tokens_.size()) throw DataError("no token with id " + std::to_string(id));
    return tokens_[id - 1];
  }

  /// Number of real tokens (excluding pad).
  std::size_t size() const { return tokens_.size(); }
  /// Rows an embedding table needs: tokens plus the pad row.
  std::size_t table_rows() const { return tokens_.size() + 1; }
  const std::vector<std::string>& tokens() const { return tokens_; }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.tokens_ == b.tokens_; }

 private:
  std::unordered_map<std::string, std::size_t> ids_;
  std::vector<std::string> tokens_;
};

/// Padded rectangular block of token ids, row-major B x width.
struct BatchedBags {
  std::size_t batch = 0;
  std::size_t width = 0;
  std::vector<std::size_t> token_ids;
  std::vector<std::uint8_t> mask;
  std::vector<int> labels;
  std::vector<std::string> ids;

  std::size_t length(std::size_t row) const {
    return static_cast<std::size_t>(std::count(mask.begin() + row * width, mask.begin() + (row + 1) * width, 1));
  }
};

// ---------------------------------------------------------------------------
// Ingestion

inline Bag parse_bag_line(const std::string& line, std::size_t line_no, std::size_t record_index) {
  const std::string where = "line " + std::to_string(line_no);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(where + ": malformed record (" + e.what() + ")");
  }
  if (!j.is_object()) throw DataError(where + ": record must be an object");
  Bag bag;
  if (j.contains("id")) {
    if (!j["id"].is_string()) throw DataError(where + ": field 'id' must be a string");
    bag.id = j["id"].get<std::string>();
  } else {
    bag.id = "bag" + std::to_string(record_index);
  }
  if (!j.contains("instances") || !j["instances"].is_array()) {
    throw DataError(where + ": field 'instances' must be an array (bag " + bag.id + ")");
  }
  for (const auto& t : j["instances"]) {
    if (!t.is_string()) throw DataError(where + ": instances must be strings (bag " + bag.id + ")");
    bag.tokens.push_back(t.get<std::string>());
  }
  if (bag.tokens.empty()) throw DataError(where + ": empty instances array (bag " + bag.id + ")");
  if (!j.contains("label") || !j["label"].is_number_integer()) {
    throw DataError(where + ": field 'label' must be 0 or 1 (bag " + bag.id + ")");
  }
  const auto label = j["label"].get<std::int64_t>();
  if (label != 0 && label != 1) {
    throw DataError(where + ": label must be 0 or 1, got " + std::to_string(label) + " (bag " + bag.id + ")");
  }
  bag.label = static_cast<int>(label);
  return bag;
}

/// Reads newline-delimited bag records; blank lines are skipped.
inline std::vector<Bag> load_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open dataset '" + path.string() + "'");
  std::vector<Bag> bags;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.find_first_not_of(" \t") == std::string::npos) continue;
    bags.push_back(parse_bag_line(line, line_no, bags.size()));
  }
  return bags;
}

inline std::string to_jsonl(const std::vector<Bag>& bags) {
  std::string out;
  for (const auto& bag : bags) {
    nlohmann::ordered_json j;
    j["id"] = bag.id;
    j["instances"] = bag.tokens;
    j["label"] = bag.label;
    out += j.dump();
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary and batching

/// Ids 1..T in order of first appearance.
inline Vocabulary build_vocab(const std::vector<Bag>& bags) {
  if (bags.empty()) throw DataError("build_vocab: no bags");
  Vocabulary vocab;
  for (const auto& bag : bags) {
    for (const auto& t : bag.tokens) vocab.insert(t);
  }
  return vocab;
}

/// Pads the selected bags into one block as wide as the longest of them.
inline BatchedBags make_batch(const std::vector<Bag>& bags, std::span<const std::size_t> selection,
                              const Vocabulary& vocab) {
  if (selection.empty()) throw DataError("make_batch: empty selection");
  BatchedBags out;
  out.batch = selection.size();
  for (std::size_t i : selection) out.width = std::max(out.width, bags.at(i).tokens.size());
  out.token_ids.assign(out.batch * out.width, Vocabulary::pad_id);
  out.mask.assign(out.batch * out.width, 0);
  for (std::size_t r = 0; r < selection.size(); ++r) {
    const Bag& bag = bags[selection[r]];
    if (bag.tokens.empty()) throw DataError("bag " + bag.id + " has no instances");
    for (std::size_t j = 0; j < bag.tokens.size(); ++j) {
      if (!vocab.contains(bag.tokens[j])) {
        throw DataError("unknown token '" + bag.tokens[j] + "' in bag " + bag.id);
      }
      out.token_ids[r * out.width + j] = vocab.id(bag.tokens[j]);
      out.mask[r * out.width + j] = 1;
    }
    out.labels.push_back(bag.label);
    out.ids.push_back(bag.id);
  }
  return out;
}

/// Consecutive batches of `batch_size`; the final short batch is kept.
inline std::vector<BatchedBags> batchify(const std::vector<Bag>& bags, const Vocabulary& vocab,
                                         std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  std::vector<std::size_t> order(bags.size());
  std::iota(order.begin(), order.end(), 0);
  std::vector<BatchedBags> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, order.size() - start);
    out.push_back(make_batch(bags, std::span(order).subspan(start, n), vocab));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Cross-validation splits

struct FoldSplit {
  std::size_t repetition = 0;
  std::size_t fold = 0;
  std::vector<std::size_t> train;
  std::vector<std::size_t> validation;
};

/// Per repetition: seeded shuffle of each class, then round-robin dealing of
/// each class over the k folds. Negatives continue the deal where positives
/// stopped so fold sizes stay within one of each other overall.
inline std::vector<FoldSplit> stratified_kfold(const std::vector<Bag>& bags, std::size_t k, std::size_t repetitions,
                                               std::uint64_t seed) {
  if (k < 2) throw ConfigError("stratified_kfold: k must be at least 2");
  if (repetitions < 1) throw ConfigError("stratified_kfold: repetitions must be at least 1");
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < bags.size(); ++i) by_class[bags[i].label].push_back(i);
  for (int c = 0; c < 2; ++c) {
    if (by_class[c].size() < k) {
      throw DataError("stratified_kfold: class " + std::to_string(c) + " has " + std::to_string(by_class[c].size()) +
                      " members, fewer than k = " + std::to_string(k));
    }
  }
  std::vector<FoldSplit> splits;
  for (std::size_t rep = 0; rep < repetitions; ++rep) {
    Rng rng(derive_seed(seed, 0x6b666f6c64ULL, rep));
    std::vector<std::size_t> fold_of(bags.size(), 0);
    std::size_t dealer = 0;
    for (int c : {1, 0}) {
      std::vector<std::size_t> members = by_class[c];
      rng.shuffle(std::span(members));
      for (std::size_t idx : members) fold_of[idx] = dealer++ % k;
    }
    for (std::size_t f = 0; f < k; ++f) {
      FoldSplit s{rep, f, {}, {}};
      for (std::size_t i = 0; i < bags.size(); ++i) (fold_of[i] == f ? s.validation : s.train).push_back(i);
      splits.push_back(std::move(s));
    }
  }
  return splits;
}

/// FNV-1a digest of fold assignments; equal digests mean identical splits.
inline std::uint64_t split_digest(const std::vector<FoldSplit>& splits) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](std::uint64_t v) {
    for (int b = 0; b < 8; ++b) {
      h ^= (v >> (8 * b)) & 0xff;
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& s : splits) {
    mix(s.repetition);
    mix(s.fold);
    for (auto i : s.validation) mix(i);
    mix(~0ULL);
  }
  return h;
}

// ---------------------------------------------------------------------------
// Synthetic witness data

struct SynthSpec {
  std::size_t num_bags = 1000;
  std::size_t vocab_size = 100;
  std::size_t num_witness_tokens = 5;
  double positive_rate = 0.057;
  std::size_t min_length = 3;
  std::size_t max_length = 17;
  std::uint64_t seed = 7;
  /// Distinct witness tokens that must co-occur to make a bag positive.
  /// 1 is the standard assumption; 2 gives the correlated variant where
  /// witnesses come in fixed pairs (w0,w1), (w2,w3), ... and negatives may
  /// hold unpaired witnesses.
  std::size_t witnesses_per_positive = 1;
};

struct SynthDataset {
  std::vector<Bag> bags;
  std::vector<std::string> witness_tokens;
};

inline void validate(const SynthSpec& s) {
  if (s.num_bags == 0) throw ConfigError("synth: num_bags must be positive");
  if (s.min_length < 1) throw ConfigError("synth: minimum bag length must be at least 1");
  if (s.max_length < s.min_length) throw ConfigError("synth: maximum bag length below minimum");
  if (s.num_witness_tokens == 0 || s.num_witness_tokens >= s.vocab_size) {
    throw ConfigError("synth: need 0 < witness tokens < vocab_size");
  }
  if (!(s.positive_rate > 0.0 && s.positive_rate < 1.0)) throw ConfigError("synth: positive_rate must be in (0,1)");
  if (s.witnesses_per_positive != 1 && s.witnesses_per_positive != 2) {
    throw ConfigError("synth: witnesses_per_positive must be 1 or 2");
  }
  if (s.witnesses_per_positive == 2) {
    if (s.num_witness_tokens < 2 || s.num_witness_tokens % 2 != 0) {
      throw ConfigError("synth: paired witnesses need an even witness count >= 2");
    }
    if (s.min_length < 2) throw ConfigError("synth: paired witnesses need bags of length >= 2");
  }
}

inline std::string witness_name(std::size_t i) { return "w" + std::to_string(i); }
inline std::string filler_name(std::size_t i) { return "s" + std::to_string(i); }

/// Exactly round(rate * n) positive bags. Positive bags hold one witness
/// (or one witness pair); negatives hold none (or at most one member of each
/// pair, never a full pair). Remaining slots are uniform over fillers.
inline SynthDataset synth_generate(const SynthSpec& spec) {
  validate(spec);
  Rng rng(spec.seed);
  const std::size_t fillers = spec.vocab_size - spec.num_witness_tokens;
  const auto positives = static_cast<std::size_t>(std::llround(spec.positive_rate * static_cast<double>(spec.num_bags)));
  std::vector<int> labels(spec.num_bags, 0);
  std::fill_n(labels.begin(), std::min(positives, spec.num_bags), 1);
  rng.shuffle(std::span(labels));

  SynthDataset out;
  for (std::size_t w = 0; w < spec.num_witness_tokens; ++w) out.witness_tokens.push_back(witness_name(w));
  const bool paired = spec.witnesses_per_positive == 2;
  const std::size_t pairs = spec.num_witness_tokens / 2;

  for (std::size_t b = 0; b < spec.num_bags; ++b) {
    const std::size_t length = spec.min_length + rng.index(spec.max_length - spec.min_length + 1);
    std::vector<std::string> tokens;
    if (labels[b] == 1) {
      if (paired) {
        const std::size_t p = rng.index(pairs);
        tokens.push_back(witness_name(2 * p));
        tokens.push_back(witness_name(2 * p + 1));
      } else {
        tokens.push_back(witness_name(rng.index(spec.num_witness_tokens)));
      }
    } else if (paired) {
      // Decoys: a lone witness, or two witnesses from different pairs, so
      // the witness count alone does not decide the label.
      const double r = rng.uniform();
      if (r < 0.25) {
        tokens.push_back(witness_name(rng.index(spec.num_witness_tokens)));
      } else if (r < 0.5 && pairs >= 2) {
        const std::size_t p = rng.index(pairs);
        const std::size_t q = (p + 1 + rng.index(pairs - 1)) % pairs;
        tokens.push_back(witness_name(2 * p + rng.index(2)));
        tokens.push_back(witness_name(2 * q + rng.index(2)));
      }
    }
    while (tokens.size() < length) tokens.push_back(filler_name(spec.num_witness_tokens + rng.index(fillers)));
    rng.shuffle(std::span(tokens));
    out.bags.push_back(Bag{"syn" + std::to_string(b), std::move(tokens), labels[b]});
  }
  return out;
}

}  // namespace amil::bagdata
