#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "vilseg/data.hpp"
#include "vilseg/errors.hpp"
#include "vilseg/transforms.hpp"

namespace vilseg {

enum class TextPooling { kEndToken, kMean };

NLOHMANN_JSON_SERIALIZE_ENUM(TextPooling, {{TextPooling::kEndToken, "eot"}, {TextPooling::kMean, "mean"}})

/// Shape of the image encoder, text encoder and the two heads.
/// Defaults are the ViT-B/16 configuration.
struct EncoderConfig {
  int image_resolution = 224;
  int patch_size = 16;
  int image_layers = 12;
  int image_width = 768;
  int image_heads = 12;
  int text_layers = 12;
  int text_width = 512;
  int text_heads = 8;
  int embed_dim = 512;
  int cluster_count = 20;
  int projection_dim = 2048;
  int max_text_length = 77;
  TextPooling text_pooling = TextPooling::kEndToken;

  int grid_size() const { return image_resolution / patch_size; }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v < 1) throw ConfigError(std::string(name) + " must be >= 1");
    };
    positive(image_resolution, "image_resolution");
    positive(patch_size, "patch_size");
    positive(image_layers, "image_layers");
    positive(image_width, "image_width");
    positive(image_heads, "image_heads");
    positive(text_layers, "text_layers");
    positive(text_width, "text_width");
    positive(text_heads, "text_heads");
    positive(embed_dim, "embed_dim");
    positive(projection_dim, "projection_dim");
    if (max_text_length < 2) throw ConfigError("max_text_length must be >= 2");
    if (cluster_count < 2) throw ConfigError("cluster_count must be >= 2");
    if (image_resolution % patch_size != 0) throw ConfigError("image_resolution must be divisible by patch_size");
    if (image_width % image_heads != 0) throw ConfigError("image_width must be divisible by image_heads");
    if (text_width % text_heads != 0) throw ConfigError("text_width must be divisible by text_heads");
  }

  /// Desk-scale model used by the tests and the toy experiments.
  static EncoderConfig tiny() {
    EncoderConfig c;
    c.image_resolution = 32;
    c.patch_size = 8;
    c.image_layers = 2;
    c.image_width = 32;
    c.image_heads = 2;
    c.text_layers = 1;
    c.text_width = 32;
    c.text_heads = 2;
    c.embed_dim = 16;
    c.cluster_count = 8;
    c.projection_dim = 32;
    c.max_text_length = 16;
    c.text_pooling = TextPooling::kMean;
    return c;
  }

  /// tiny() with a finer 8x8 patch grid, used for the segmentation experiments.
  static EncoderConfig toy() {
    EncoderConfig c = tiny();
    c.patch_size = 4;
    return c;
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE(EncoderConfig, image_resolution, patch_size, image_layers, image_width,
                                   image_heads, text_layers, text_width, text_heads, embed_dim, cluster_count,
                                   projection_dim, max_text_length, text_pooling)

struct TrainConfig {
  double peak_lr = 5e-4;
  double peak_weight_decay = 0.04;
  int warmup_iters = 4000;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int epochs = 30;
  int max_steps = 0;  // > 0 overrides epochs
  int batch_size = 32;
  std::uint64_t seed = 0;
  bool cluster_grad_to_encoder = true;
  bool symmetric_cross = false;
  bool cosine_after_warmup = false;
  double weight_vision = 1.0;
  double weight_cross = 1.0;
  double weight_cluster = 1.0;
  double grad_clip = 10.0;  // global norm; <= 0 disables
  int checkpoint_every = 0;  // steps; 0 writes only the final checkpoint
  AugmentConfig augment{};

  /// Desk-scale schedule paired with EncoderConfig::tiny().
  static TrainConfig toy() {
    TrainConfig c;
    c.peak_lr = 2e-3;
    c.warmup_iters = 50;
    c.max_steps = 500;
    c.batch_size = 32;
    c.augment.local_size = 16;
    c.cluster_grad_to_encoder = false;
    return c;
  }

  void validate() const {
    if (!(peak_lr > 0)) throw ConfigError("peak_lr must be > 0");
    if (peak_weight_decay < 0) throw ConfigError("peak_weight_decay must be >= 0");
    if (warmup_iters < 0) throw ConfigError("warmup_iters must be >= 0");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1 && max_steps < 1) throw ConfigError("need epochs >= 1 or max_steps >= 1");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError("Adam betas must lie in [0,1)");
    augment.validate();
  }
};

// ---------------------------------------------------------------------------
// Flat `key = value` config files

using ConfigMap = std::map<std::string, std::string>;

inline ConfigMap parse_config(std::istream& in) {
  ConfigMap out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(number, "expected key = value");
    auto key = trim(line.substr(0, eq));
    auto value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError(number, "empty key");
    out[key] = value;
  }
  return out;
}

inline ConfigMap load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path.string());
  try {
    return parse_config(in);
  } catch (const ParseError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

namespace detail {

template <typename T>
T parse_value(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  T value{};
  if constexpr (std::is_same_v<T, TextPooling>) {
    if (text == "eot") return TextPooling::kEndToken;
    if (text == "mean") return TextPooling::kMean;
    throw ConfigError("config key '" + key + "': expected eot or mean, got '" + text + "'");
  } else if constexpr (std::is_same_v<T, bool>) {
    if (text == "true" || text == "1" || text == "on") return true;
    if (text == "false" || text == "0" || text == "off") return false;
    throw ConfigError("config key '" + key + "': expected a boolean, got '" + text + "'");
  } else {
    in >> value;
    if (in.fail() || !(in >> std::ws).eof()) {
      throw ConfigError("config key '" + key + "': cannot parse '" + text + "'");
    }
  }
  return value;
}

}  // namespace detail

/// Applies every recognized key to the two configs; unknown keys are an error.
inline void apply_config(const ConfigMap& values, EncoderConfig& enc, TrainConfig& train) {
  using Setter = std::function<void(const std::string&, const std::string&)>;
  auto bind = [](auto& field) -> Setter {
    return [&field](const std::string& k, const std::string& v) {
      field = detail::parse_value<std::decay_t<decltype(field)>>(k, v);
    };
  };
  const std::map<std::string, Setter> setters{
      {"image_resolution", bind(enc.image_resolution)},
      {"patch_size", bind(enc.patch_size)},
      {"image_layers", bind(enc.image_layers)},
      {"image_width", bind(enc.image_width)},
      {"image_heads", bind(enc.image_heads)},
      {"text_layers", bind(enc.text_layers)},
      {"text_width", bind(enc.text_width)},
      {"text_heads", bind(enc.text_heads)},
      {"embed_dim", bind(enc.embed_dim)},
      {"cluster_count", bind(enc.cluster_count)},
      {"projection_dim", bind(enc.projection_dim)},
      {"max_text_length", bind(enc.max_text_length)},
      {"text_pooling", bind(enc.text_pooling)},
      {"peak_lr", bind(train.peak_lr)},
      {"peak_weight_decay", bind(train.peak_weight_decay)},
      {"warmup_iters", bind(train.warmup_iters)},
      {"beta1", bind(train.beta1)},
      {"beta2", bind(train.beta2)},
      {"adam_eps", bind(train.adam_eps)},
      {"epochs", bind(train.epochs)},
      {"max_steps", bind(train.max_steps)},
      {"batch_size", bind(train.batch_size)},
      {"seed", bind(train.seed)},
      {"cluster_grad_to_encoder", bind(train.cluster_grad_to_encoder)},
      {"symmetric_cross", bind(train.symmetric_cross)},
      {"cosine_after_warmup", bind(train.cosine_after_warmup)},
      {"weight_vision", bind(train.weight_vision)},
      {"weight_cross", bind(train.weight_cross)},
      {"weight_cluster", bind(train.weight_cluster)},
      {"grad_clip", bind(train.grad_clip)},
      {"checkpoint_every", bind(train.checkpoint_every)},
      {"local_views", bind(train.augment.local_views)},
      {"local_size", bind(train.augment.local_size)},
      {"global_scale_min", bind(train.augment.global_scale.min)},
      {"global_scale_max", bind(train.augment.global_scale.max)},
      {"local_scale_min", bind(train.augment.local_scale.min)},
      {"local_scale_max", bind(train.augment.local_scale.max)},
      {"offset_range", bind(train.augment.offset_range)},
      {"gain_min", bind(train.augment.gain_min)},
      {"gain_max", bind(train.augment.gain_max)},
      {"flip_probability", bind(train.augment.flip_probability)},
  };
  for (const auto& [key, value] : values) {
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("unknown config key: " + key);
    it->second(key, value);
  }
  train.augment.global_size = enc.image_resolution;
}

}  // namespace vilseg
