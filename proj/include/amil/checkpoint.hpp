#pragma once

// milnet-ckpt-v1 checkpoint files.
//
// Layout:
//   "milnet-ckpt-v1\n"
//   8-byte little-endian length N of the JSON header
//   N bytes of JSON: {"format", "config", "vocabulary", "tensors": [{"name","shape"}...]}
//   raw little-endian IEEE-754 doubles of every tensor, in header order
//
// The file must end exactly after the last tensor.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "amil/bagdata.hpp"
#include "amil/error.hpp"
#include "amil/milnet.hpp"

namespace amil::milnet {

inline constexpr std::string_view kCheckpointFormat = "milnet-ckpt-v1";

inline nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["vocab_size"] = c.vocab_size;
  j["d_model"] = c.d_model;
  j["num_heads"] = c.num_heads;
  j["fc_dims"] = c.fc_dims;
  std::vector<std::string> views;
  for (auto v : c.pooling_views) views.emplace_back(to_string(v));
  j["pooling_views"] = views;
  j["instance_pooling"] = to_string(c.instance_pooling);
  j["model_kind"] = to_string(c.kind);
  j["seed"] = c.seed;
  return j;
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  try {
    ModelConfig c;
    c.vocab_size = j.at("vocab_size").get<std::size_t>();
    c.d_model = j.at("d_model").get<std::size_t>();
    c.num_heads = j.at("num_heads").get<std::size_t>();
    c.fc_dims = j.at("fc_dims").get<std::vector<std::size_t>>();
    c.pooling_views.clear();
    for (const auto& v : j.at("pooling_views")) c.pooling_views.push_back(parse_pooling_view(v.get<std::string>()));
    c.instance_pooling = parse_instance_pooling(j.at("instance_pooling").get<std::string>());
    c.kind = parse_model_kind(j.at("model_kind").get<std::string>());
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: bad config block (") + e.what() + ")");
  }
}

struct Checkpoint {
  ModelConfig config;
  bagdata::Vocabulary vocabulary;
  ParameterSet params;
};

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline std::uint64_t get_u64(const char* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

}  // namespace detail

inline std::string encode_checkpoint(const ParameterSet& params, const ModelConfig& config,
                                     const bagdata::Vocabulary& vocab) {
  check_compatible(params, config);
  nlohmann::ordered_json header;
  header["format"] = kCheckpointFormat;
  header["config"] = config_to_json(config);
  header["vocabulary"] = vocab.tokens();
  auto& tensors = header["tensors"] = nlohmann::ordered_json::array();
  for (const auto& p : params) tensors.push_back({{"name", p.name}, {"shape", p.value.shape()}});
  const std::string text = header.dump();

  std::string out(kCheckpointFormat);
  out.push_back('\n');
  detail::put_u64(out, text.size());
  out += text;
  for (const auto& p : params) {
    for (double v : p.value.data()) detail::put_u64(out, std::bit_cast<std::uint64_t>(v));
  }
  return out;
}

namespace detail {

inline Checkpoint decode_unchecked(const std::string& bytes) {
  const std::string magic = std::string(kCheckpointFormat) + "\n";
  if (bytes.size() < magic.size() || bytes.compare(0, magic.size(), magic) != 0) {
    const auto nl = bytes.find('\n');
    throw DataError("checkpoint: unsupported format tag '" + bytes.substr(0, std::min<std::size_t>(nl, 32)) +
                    "', expected '" + std::string(kCheckpointFormat) + "'");
  }
  std::size_t pos = magic.size();
  if (bytes.size() < pos + 8) throw DataError("checkpoint: truncated before header length");
  const std::uint64_t header_len = detail::get_u64(bytes.data() + pos);
  pos += 8;
  if (header_len > bytes.size() - pos) throw DataError("checkpoint: truncated header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(pos),
                                   bytes.begin() + static_cast<std::ptrdiff_t>(pos + header_len));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: malformed header (") + e.what() + ")");
  }
  pos += header_len;
  if (header.value("format", "") != kCheckpointFormat) {
    throw DataError("checkpoint: header format '" + header.value("format", "") + "' is not '" +
                    std::string(kCheckpointFormat) + "'");
  }
  Checkpoint ck;
  ck.config = config_from_json(header.at("config"));
  for (const auto& t : header.at("vocabulary")) ck.vocabulary.insert(t.get<std::string>());
  const auto layout = parameter_layout(ck.config);
  const auto& tensors = header.at("tensors");
  if (tensors.size() != layout.size()) {
    throw DataError("checkpoint: expected " + std::to_string(layout.size()) + " tensors, found " +
                    std::to_string(tensors.size()));
  }
  std::size_t total = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto name = tensors[i].at("name").get<std::string>();
    const auto shape = tensors[i].at("shape").get<Shape>();
    if (name != layout[i].name) {
      throw DataError("checkpoint: tensor " + std::to_string(i) + " is '" + name + "', expected '" + layout[i].name +
                      "'");
    }
    if (shape != layout[i].shape) {
      throw DataError("checkpoint: shape mismatch for '" + name + "': expected " + ag::to_string(layout[i].shape) +
                      ", found " + ag::to_string(shape));
    }
    total += ag::numel(shape);
  }
  if (ck.vocabulary.table_rows() != ck.config.vocab_size) {
    throw DataError("checkpoint: vocabulary holds " + std::to_string(ck.vocabulary.size()) +
                    " tokens but the embedding table has " + std::to_string(ck.config.vocab_size) + " rows");
  }
  if (bytes.size() - pos != total * 8) {
    throw DataError("checkpoint: expected " + std::to_string(total * 8) + " bytes of tensor data, found " +
                    std::to_string(bytes.size() - pos));
  }
  for (const auto& entry : layout) {
    std::vector<double> data(ag::numel(entry.shape));
    for (double& v : data) {
      v = std::bit_cast<double>(detail::get_u64(bytes.data() + pos));
      pos += 8;
    }
    ck.params.add(entry.name, Tensor(entry.shape, std::move(data), true), frozen_rows(entry));
  }
  return ck;
}

}  // namespace detail

/// Validates the whole buffer before building anything, so a failure never
/// yields a partial parameter set.
inline Checkpoint decode_checkpoint(const std::string& bytes) {
  try {
    return detail::decode_unchecked(bytes);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("checkpoint: malformed header (") + e.what() + ")");
  }
}

/// Writes to a sibling temp file then renames, so readers never observe a
/// partially written checkpoint.
inline void save_checkpoint(const std::filesystem::path& path, const ParameterSet& params, const ModelConfig& config,
                            const bagdata::Vocabulary& vocab) {
  const std::string bytes = encode_checkpoint(params, config, vocab);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint '" + tmp.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("failed writing checkpoint '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace amil::milnet
