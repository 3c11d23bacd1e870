#pragma once

// The two augmentation families used in training: multi-crop views for the
// global/local consistency loss, and invertible colour + flip transforms for
// the clustering pair.

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "vilseg/autodiff.hpp"
#include "vilseg/errors.hpp"
#include "vilseg/image.hpp"

namespace vilseg {

struct ScaleRange {
  double min = 0.0;  // exclusive
  double max = 1.0;  // inclusive
};

struct AugmentConfig {
  int local_views = 6;
  int global_size = 224;
  int local_size = 96;
  ScaleRange global_scale{0.4, 1.0};
  ScaleRange local_scale{0.05, 0.4};
  double offset_range = 0.2;  // additive offset drawn from [-r, r]
  double gain_min = 0.8;
  double gain_max = 1.25;
  double flip_probability = 0.5;

  void validate() const {
    if (local_views < 1) throw ConfigError("local_views must be >= 1");
    if (local_size < 1 || local_size >= global_size) throw ConfigError("local_size must satisfy 1 <= L < G");
    for (const auto& r : {global_scale, local_scale}) {
      if (!(r.min >= 0 && r.min < r.max && r.max <= 1)) throw ConfigError("crop scale range must satisfy 0 <= min < max <= 1");
    }
    if (!(gain_min > 0 && gain_min <= gain_max)) throw ConfigError("gain range must be positive");
    if (offset_range < 0) throw ConfigError("offset_range must be >= 0");
  }
};

struct ViewSet {
  Image global_view;
  std::vector<Image> local_views;
  Box global_box;
  std::vector<Box> local_boxes;  // in source-image coordinates

  int k() const { return static_cast<int>(local_views.size()); }
};

namespace detail {

inline Box sample_square_box(std::mt19937_64& rng, int height, int width, ScaleRange scale, int min_side) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int short_side = std::min(height, width);
  // (min, max]: draw from [0,1) and flip so the upper end is reachable.
  const double s = scale.max - (scale.max - scale.min) * unit(rng);
  int side = static_cast<int>(std::lround(std::sqrt(s) * short_side));
  side = std::clamp(side, std::min(min_side, short_side), short_side);
  Box box;
  box.width = box.height = side;
  box.x = static_cast<int>(rng() % static_cast<std::uint64_t>(width - side + 1));
  box.y = static_cast<int>(rng() % static_cast<std::uint64_t>(height - side + 1));
  return box;
}

}  // namespace detail

/// One global crop resized to GxG plus k local crops resized to LxL. Deterministic in `seed`.
inline ViewSet multi_crop(const Image& image, int k, int global_size, int local_size, std::uint64_t seed,
                          ScaleRange global_scale = {0.4, 1.0}, ScaleRange local_scale = {0.05, 0.4}) {
  if (k < 1) throw InputError("multi_crop: k must be >= 1");
  if (local_size >= global_size) throw InputError("multi_crop: local size must be smaller than global size");
  if (image.height < local_size || image.width < local_size) {
    throw InputError("multi_crop: image smaller than the local crop size");
  }
  std::mt19937_64 rng(seed);
  ViewSet views;
  views.global_box = detail::sample_square_box(rng, image.height, image.width, global_scale, local_size);
  views.global_view = resize_bilinear(crop(image, views.global_box), global_size, global_size);
  for (int i = 0; i < k; ++i) {
    Box box = detail::sample_square_box(rng, image.height, image.width, local_scale, 1);
    views.local_boxes.push_back(box);
    views.local_views.push_back(resize_bilinear(crop(image, box), local_size, local_size));
  }
  return views;
}

inline ViewSet multi_crop(const Image& image, const AugmentConfig& cfg, std::uint64_t seed) {
  return multi_crop(image, cfg.local_views, cfg.global_size, cfg.local_size, seed, cfg.global_scale, cfg.local_scale);
}

/// Parameters of one colour + flip transform. Fully determines the output.
struct TransformRecord {
  bool flip = false;
  std::array<float, 3> additive_offset{0.0f, 0.0f, 0.0f};
  std::array<float, 3> multiplicative_gain{1.0f, 1.0f, 1.0f};
  std::uint64_t seed = 0;

  void validate() const {
    for (float g : multiplicative_gain) {
      if (!(g > 0.0f)) throw InputError("transform gain must be positive");
    }
  }

  static TransformRecord identity() { return {}; }
};

inline TransformRecord sample_transform_record(std::uint64_t seed, const AugmentConfig& cfg) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  TransformRecord rec;
  rec.seed = seed;
  rec.flip = unit(rng) < cfg.flip_probability;
  for (int c = 0; c < 3; ++c) {
    rec.additive_offset[c] = static_cast<float>(cfg.offset_range * (2 * unit(rng) - 1));
    // Log-uniform so gains above and below 1 are equally likely.
    const double lg = std::log(cfg.gain_min) + (std::log(cfg.gain_max) - std::log(cfg.gain_min)) * unit(rng);
    rec.multiplicative_gain[c] = static_cast<float>(std::exp(lg));
  }
  return rec;
}

/// clip(gain * x + offset, 0, 1) per channel, then a horizontal flip when requested.
inline Image photometric_flip(const Image& image, const TransformRecord& record) {
  record.validate();
  Image out(image.height, image.width, image.channels);
  for (int y = 0; y < image.height; ++y) {
    for (int x = 0; x < image.width; ++x) {
      const int sx = record.flip ? image.width - 1 - x : x;
      for (int c = 0; c < image.channels; ++c) {
        const float v = record.multiplicative_gain[c % 3] * image.at(y, sx, c) + record.additive_offset[c % 3];
        out.at(y, x, c) = std::clamp(v, 0.0f, 1.0f);
      }
    }
  }
  return out;
}

/// Row permutation that undoes the geometric part of `record` on an h x w
/// feature grid stored row-major (row index = i * w + j).
inline std::vector<ad::Index> geometric_inverse_permutation(int h, int w, const TransformRecord& record) {
  std::vector<ad::Index> perm(static_cast<std::size_t>(h) * w);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) perm[static_cast<std::size_t>(i) * w + j] = i * w + (record.flip ? w - 1 - j : j);
  }
  return perm;
}

/// Applies the geometric inverse to a feature grid (rows = positions). Colour
/// components act on pixel values only and need no spatial inverse.
template <typename Derived>
auto invert_geometric(const Eigen::MatrixBase<Derived>& grid, int h, int w, const TransformRecord& record) {
  using Result = Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  if (grid.rows() != static_cast<Eigen::Index>(h) * w) throw InputError("invert_geometric: grid size mismatch");
  const auto perm = geometric_inverse_permutation(h, w, record);
  Result out(grid.rows(), grid.cols());
  for (std::size_t r = 0; r < perm.size(); ++r) out.row(static_cast<Eigen::Index>(r)) = grid.row(perm[r]);
  return out;
}

template <typename S>
ad::Var<S> invert_geometric(const ad::Var<S>& grid, int h, int w, const TransformRecord& record) {
  if (grid.rows() != static_cast<ad::Index>(h) * w) throw InputError("invert_geometric: grid size mismatch");
  if (!record.flip) return grid;
  return ad::gather_rows(grid, geometric_inverse_permutation(h, w, record));
}

}  // namespace vilseg
