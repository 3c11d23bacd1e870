#pragma once

// The four learnable components: image encoder, text encoder, the softmax
// projection head used by the global/local consistency loss, and the 1x1
// clustering head. Image and text features share the embedding dimension D.

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "vilseg/autodiff.hpp"
#include "vilseg/config.hpp"
#include "vilseg/image.hpp"
#include "vilseg/nn.hpp"
#include "vilseg/tokenizer.hpp"

namespace vilseg {

using ad::Index;

/// Differentiable encoder output for one image.
template <typename S>
struct ImageFeatures {
  ad::Var<S> global;  // 1 x D
  ad::Var<S> pixels;  // (h*w) x D, row index = i * w + j
  int height = 0;     // feature-grid rows
  int width = 0;
};

/// Plain-value encoder output: global feature plus the per-pixel grid.
struct PixelEmbeddingMap {
  Eigen::VectorXd global_feature;
  ad::Matrix<double> grid;  // (h*w) x D
  int height = 0;
  int width = 0;

  int dim() const { return static_cast<int>(grid.cols()); }
  void validate() const {
    if (grid.rows() != static_cast<Index>(height) * width) throw InputError("pixel grid shape mismatch");
    if (!grid.allFinite() || !global_feature.allFinite()) throw NumericError("non-finite pixel embeddings");
  }
};

struct TextEmbedding {
  Eigen::VectorXd feature;
};

/// Per-pixel distributions over clusters, (h*w) x C.
struct ClusterPosterior {
  ad::Matrix<double> probs;
  int height = 0;
  int width = 0;

  int clusters() const { return static_cast<int>(probs.cols()); }
};

template <typename S = double>
class Model {
 public:
  static constexpr double kInitialTemperature = 0.07;

  Model(EncoderConfig config, Tokenizer tokenizer, std::uint64_t seed)
      : config_(config), tokenizer_(std::move(tokenizer)) {
    config_.validate();
    nn::Initializer init(seed);
    build_visual(init);
    build_text(init);
    projection_head_ = nn::Linear<S>::make(params_, "projection_head",
                                           init.truncated_normal<S>(config_.embed_dim, config_.projection_dim, 0.02));
    cluster_head_ = nn::Linear<S>::make(params_, "cluster_head",
                                        init.truncated_normal<S>(config_.embed_dim, config_.cluster_count, 0.02));
    ad::Matrix<S> t(1, 1);
    t(0, 0) = static_cast<S>(std::log(kInitialTemperature));
    log_temperature_ = params_.add("log_temperature", std::move(t));
  }

  // Parameters are shared handles; a copy would silently alias them.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const EncoderConfig& config() const { return config_; }
  const Tokenizer& tokenizer() const { return tokenizer_; }
  nn::ParameterStore<S>& parameters() { return params_; }
  const nn::ParameterStore<S>& parameters() const { return params_; }

  /// Square image whose side is a multiple of the patch size. Sides other
  /// than the configured resolution use interpolated position embeddings.
  ImageFeatures<S> encode_image(const Image& image) const {
    const int p = config_.patch_size;
    if (image.height != image.width) throw InputError("encode_image: image must be square");
    if (image.height % p != 0) throw ConfigError("encode_image: image side not divisible by patch size");
    if (image.channels != 3) throw InputError("encode_image: expected 3 channels");
    const int g = image.height / p;

    ad::Matrix<S> patches(static_cast<Index>(g) * g, static_cast<Index>(p) * p * 3);
    for (int gi = 0; gi < g; ++gi) {
      for (int gj = 0; gj < g; ++gj) {
        Index col = 0;
        for (int y = 0; y < p; ++y) {
          for (int x = 0; x < p; ++x) {
            for (int c = 0; c < 3; ++c) {
              patches(gi * g + gj, col++) = static_cast<S>((image.at(gi * p + y, gj * p + x, c) - 0.5) / 0.25);
            }
          }
        }
      }
    }
    auto tokens = ad::matmul(ad::constant<S>(std::move(patches)), patch_embed_);
    std::vector<ad::Var<S>> rows{class_embedding_, tokens};
    auto x = ad::concat_rows<S>(rows);
    x = ad::add(x, positional_embedding_for(g));
    x = ln_pre_(x);
    for (const auto& block : visual_blocks_) x = block(x);
    x = ad::matmul(ln_post_(x), visual_proj_);
    auto px = ad::slice_rows(x, 1, static_cast<Index>(g) * g);
    return {ad::slice_rows(x, 0, 1), px, g, g};
  }

  /// 1 x D feature taken at the end-of-text position, or averaged over all
  /// positions when the config asks for mean pooling.
  ad::Var<S> encode_text(std::string_view caption) const {
    const std::string text = trim(caption);
    if (text.empty()) throw InputError("encode_text: empty caption");
    std::vector<int> ids = tokenizer_.encode_for_model(text, config_.max_text_length);
    const Index n = static_cast<Index>(ids.size());
    std::vector<Index> rows(ids.begin(), ids.end());
    for (Index r : rows) {
      if (r >= token_embedding_.rows()) throw ConfigError("token id exceeds embedding table; tokenizer mismatch");
    }
    auto x = ad::add(ad::gather_rows(token_embedding_, std::move(rows)), ad::slice_rows(text_positional_, 0, n));
    const auto mask = ad::constant<S>(nn::causal_mask<S>(n));
    for (const auto& block : text_blocks_) x = block(x, mask);
    x = ln_final_(x);
    if (config_.text_pooling == TextPooling::kMean) return ad::matmul(ad::scale(ad::col_sums(x), S(1) / S(n)), text_proj_);
    return ad::matmul(ad::slice_rows(x, n - 1, 1), text_proj_);
  }

  /// Stacks encode_text over captions into b x D.
  ad::Var<S> encode_texts(std::span<const std::string> captions) const {
    std::vector<ad::Var<S>> rows;
    rows.reserve(captions.size());
    for (const auto& c : captions) rows.push_back(encode_text(c));
    return ad::concat_rows<S>(rows);
  }

  /// Row-wise softmax(linear(features)) onto the P-simplex.
  ad::Var<S> project(const ad::Var<S>& features) const { return ad::softmax_rows(projection_head_(features)); }

  /// Row-wise softmax over C clusters; each row depends only on its own embedding.
  ad::Var<S> cluster_posteriors(const ad::Var<S>& pixels) const { return ad::softmax_rows(cluster_head_(pixels)); }

  const ad::Var<S>& log_temperature() const { return log_temperature_; }
  S temperature() const { return std::exp(log_temperature_.item()); }

 private:
  ad::Var<S> positional_embedding_for(int g) const {
    const int base = config_.grid_size();
    if (g == base) return visual_positional_;
    const Index n = static_cast<Index>(base) * base;
    auto op = ad::constant<S>(nn::bilinear_grid_operator<S>(g, base));
    std::vector<ad::Var<S>> rows{ad::slice_rows(visual_positional_, 0, 1),
                                 ad::matmul(op, ad::slice_rows(visual_positional_, 1, n))};
    return ad::concat_rows<S>(rows);
  }

  void build_visual(nn::Initializer& init) {
    const Index w = config_.image_width;
    const Index g = config_.grid_size();
    const Index patch_dim = static_cast<Index>(config_.patch_size) * config_.patch_size * 3;
    const double scale = std::pow(static_cast<double>(w), -0.5);
    patch_embed_ = params_.add("visual.patch_embed.weight",
                               init.normal<S>(patch_dim, w, std::pow(static_cast<double>(patch_dim), -0.5)));
    class_embedding_ = params_.add("visual.class_embedding", init.normal<S>(1, w, scale));
    visual_positional_ = params_.add("visual.positional_embedding", init.normal<S>(g * g + 1, w, scale));
    ln_pre_ = nn::LayerNorm<S>::make(params_, "visual.ln_pre", w);
    for (int l = 0; l < config_.image_layers; ++l) {
      visual_blocks_.push_back(nn::ResidualBlock<S>::make(params_, init, "visual.blocks." + std::to_string(l), w,
                                                          config_.image_heads, config_.image_layers));
    }
    ln_post_ = nn::LayerNorm<S>::make(params_, "visual.ln_post", w);
    visual_proj_ = params_.add("visual.proj", init.truncated_normal<S>(w, config_.embed_dim, 0.02));
  }

  void build_text(nn::Initializer& init) {
    const Index w = config_.text_width;
    token_embedding_ = params_.add("text.token_embedding", init.normal<S>(tokenizer_.vocab_size(), w, 0.02));
    text_positional_ = params_.add("text.positional_embedding", init.normal<S>(config_.max_text_length, w, 0.01));
    for (int l = 0; l < config_.text_layers; ++l) {
      text_blocks_.push_back(nn::ResidualBlock<S>::make(params_, init, "text.blocks." + std::to_string(l), w,
                                                        config_.text_heads, config_.text_layers));
    }
    ln_final_ = nn::LayerNorm<S>::make(params_, "text.ln_final", w);
    text_proj_ = params_.add("text.proj", init.truncated_normal<S>(w, config_.embed_dim, 0.02));
  }

  EncoderConfig config_;
  Tokenizer tokenizer_;
  nn::ParameterStore<S> params_;

  ad::Var<S> patch_embed_;
  ad::Var<S> class_embedding_;
  ad::Var<S> visual_positional_;
  nn::LayerNorm<S> ln_pre_;
  std::vector<nn::ResidualBlock<S>> visual_blocks_;
  nn::LayerNorm<S> ln_post_;
  ad::Var<S> visual_proj_;

  ad::Var<S> token_embedding_;
  ad::Var<S> text_positional_;
  std::vector<nn::ResidualBlock<S>> text_blocks_;
  nn::LayerNorm<S> ln_final_;
  ad::Var<S> text_proj_;

  nn::Linear<S> projection_head_;
  nn::Linear<S> cluster_head_;
  ad::Var<S> log_temperature_;
};

// ---------------------------------------------------------------------------
// Value-level wrappers

template <typename S>
ad::Matrix<double> to_double(const ad::Matrix<S>& m) {
  return m.template cast<double>();
}

template <typename S>
PixelEmbeddingMap encode_image(const Model<S>& model, const Image& image) {
  auto f = model.encode_image(image);
  PixelEmbeddingMap map;
  map.global_feature = to_double<S>(f.global.value()).row(0).transpose();
  map.grid = to_double<S>(f.pixels.value());
  map.height = f.height;
  map.width = f.width;
  map.validate();
  return map;
}

template <typename S>
TextEmbedding encode_text(const Model<S>& model, std::string_view caption) {
  auto v = model.encode_text(caption);
  return {to_double<S>(v.value()).row(0).transpose()};
}

template <typename S>
Eigen::VectorXd project(const Model<S>& model, const Eigen::VectorXd& feature) {
  if (!feature.allFinite()) throw InputError("project: non-finite input");
  ad::Matrix<S> row = feature.transpose().template cast<S>();
  return to_double<S>(model.project(ad::constant<S>(std::move(row))).value()).row(0).transpose();
}

template <typename S>
ClusterPosterior cluster_posteriors(const Model<S>& model, const PixelEmbeddingMap& map) {
  if (map.dim() != model.config().embed_dim) throw InputError("cluster_posteriors: embedding dimension mismatch");
  map.validate();
  auto probs = model.cluster_posteriors(ad::constant<S>(map.grid.template cast<S>()));
  return {to_double<S>(probs.value()), map.height, map.width};
}

}  // namespace vilseg
