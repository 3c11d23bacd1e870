#pragma once

// Checkpoint archive layout:
//   8 bytes   magic "VILSEGCK"
//   u32       format version
//   u64       metadata length, then UTF-8 JSON metadata
//   raw little-endian float64 tensor data, in metadata order
// The metadata embeds the encoder config, the tokenizer merges and the
// name/shape/offset of every tensor.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vilseg/config.hpp"
#include "vilseg/model.hpp"

namespace vilseg {

inline constexpr char kCheckpointMagic[8] = {'V', 'I', 'L', 'S', 'E', 'G', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

template <typename S>
void save_checkpoint(const std::filesystem::path& path, const Model<S>& model, const nlohmann::json& extra = {}) {
  nlohmann::json meta;
  meta["config"] = model.config();
  meta["tokenizer"] = model.tokenizer().serialize();
  if (!extra.is_null()) meta["extra"] = extra;
  auto& tensors = meta["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, var] : model.parameters().all()) {
    tensors.push_back({{"name", name}, {"rows", var.rows()}, {"cols", var.cols()}, {"offset", offset}});
    offset += static_cast<std::uint64_t>(var.value().size());
  }
  const std::string text = meta.dump();

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write checkpoint: " + path.string());
    out.write(kCheckpointMagic, sizeof kCheckpointMagic);
    const std::uint32_t version = kCheckpointVersion;
    const std::uint64_t length = text.size();
    out.write(reinterpret_cast<const char*>(&version), sizeof version);
    out.write(reinterpret_cast<const char*>(&length), sizeof length);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [_, var] : model.parameters().all()) {
      const ad::Matrix<double> values = var.value().template cast<double>();
      out.write(reinterpret_cast<const char*>(values.data()),
                static_cast<std::streamsize>(values.size() * sizeof(double)));
    }
    if (!out) throw IoError("short write: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

struct CheckpointHeader {
  EncoderConfig config;
  Tokenizer tokenizer;
  nlohmann::json metadata;
  std::streamoff data_offset = 0;
};

inline CheckpointHeader read_checkpoint_header(std::istream& in, const std::string& label) {
  char magic[8];
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&version), sizeof version);
  in.read(reinterpret_cast<char*>(&length), sizeof length);
  if (!in || std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0) throw IoError("not a checkpoint: " + label);
  if (version != kCheckpointVersion) throw IoError("unsupported checkpoint version in " + label);
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw IoError("truncated checkpoint metadata: " + label);
  CheckpointHeader header;
  try {
    header.metadata = nlohmann::json::parse(text);
    header.config = header.metadata.at("config").get<EncoderConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad checkpoint metadata in " + label + ": " + e.what());
  }
  std::istringstream merges(header.metadata.at("tokenizer").get<std::string>());
  header.tokenizer = Tokenizer::parse(merges);
  header.data_offset = in.tellg();
  return header;
}

/// Rebuilds the model from the embedded config and checks every tensor's
/// name and shape against what that config produces.
template <typename S = double>
Model<S> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  CheckpointHeader header = read_checkpoint_header(in, path.string());
  Model<S> model(header.config, header.tokenizer, 0);

  const auto& tensors = header.metadata.at("tensors");
  auto& params = model.parameters();
  std::vector<std::string> problems;
  if (tensors.size() != params.all().size()) {
    problems.push_back("tensor count " + std::to_string(tensors.size()) + " != expected " +
                       std::to_string(params.all().size()));
  }
  for (const auto& t : tensors) {
    const auto name = t.at("name").get<std::string>();
    if (!params.contains(name)) {
      problems.push_back("unexpected tensor " + name);
      continue;
    }
    const auto& var = params.at(name);
    if (t.at("rows").get<Index>() != var.rows() || t.at("cols").get<Index>() != var.cols()) {
      problems.push_back("shape mismatch for " + name);
    }
  }
  if (!problems.empty()) throw ValidationError("checkpoint does not match its config", std::move(problems));

  for (const auto& t : tensors) {
    auto& var = params.at(t.at("name").get<std::string>());
    ad::Matrix<double> values(var.rows(), var.cols());
    in.seekg(header.data_offset + static_cast<std::streamoff>(t.at("offset").get<std::uint64_t>() * sizeof(double)));
    in.read(reinterpret_cast<char*>(values.data()), static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!in) throw IoError("truncated checkpoint data: " + path.string());
    var.mutable_value() = values.template cast<S>();
  }
  return model;
}

inline nlohmann::json checkpoint_metadata(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  return read_checkpoint_header(in, path.string()).metadata;
}

}  // namespace vilseg
