#pragma once

// Open-vocabulary segmentation at inference time: cluster the per-pixel
// embeddings, average-pool each cluster region, and name each region by
// cosine similarity against prompt text embeddings. Also hosts the offline
// k-means alternative to the clustering head.

#include <Eigen/Dense>

#include <algorithm>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "vilseg/errors.hpp"
#include "vilseg/image.hpp"
#include "vilseg/model.hpp"

namespace vilseg {

/// Integer id grid (cluster ids or class ids), row-major.
struct SegmentationMask {
  int height = 0;
  int width = 0;
  std::vector<int> ids;

  SegmentationMask() = default;
  SegmentationMask(int h, int w, int fill = 0) : height(h), width(w), ids(static_cast<std::size_t>(h) * w, fill) {}

  int& at(int y, int x) { return ids[static_cast<std::size_t>(y) * width + x]; }
  int at(int y, int x) const { return ids[static_cast<std::size_t>(y) * width + x]; }
  std::size_t size() const { return ids.size(); }

  LabelImage to_label_image() const {
    LabelImage out(height, width);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] > 255) throw InputError("mask id does not fit in 8 bits");
      out.data[i] = static_cast<std::uint8_t>(ids[i]);
    }
    return out;
  }

  friend bool operator==(const SegmentationMask&, const SegmentationMask&) = default;
};

/// Per-pixel argmax; ties resolve to the lowest cluster index.
inline SegmentationMask cluster_mask(const ClusterPosterior& posterior) {
  if (posterior.probs.rows() != static_cast<Index>(posterior.height) * posterior.width) {
    throw InputError("cluster_mask: posterior grid shape mismatch");
  }
  SegmentationMask mask(posterior.height, posterior.width);
  for (Index r = 0; r < posterior.probs.rows(); ++r) {
    Index best = 0;
    for (Index c = 1; c < posterior.probs.cols(); ++c) {
      if (posterior.probs(r, c) > posterior.probs(r, best)) best = c;
    }
    mask.ids[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return mask;
}

/// Mean pixel embedding over positions where mask == cluster.
inline Eigen::VectorXd region_pool(const PixelEmbeddingMap& map, const SegmentationMask& mask, int cluster) {
  if (mask.height != map.height || mask.width != map.width) throw InputError("region_pool: mask/grid shape mismatch");
  Eigen::VectorXd acc = Eigen::VectorXd::Zero(map.dim());
  long count = 0;
  for (std::size_t i = 0; i < mask.ids.size(); ++i) {
    if (mask.ids[i] == cluster) {
      acc += map.grid.row(static_cast<Index>(i)).transpose();
      ++count;
    }
  }
  if (count == 0) throw RegionAbsent(cluster);
  return acc / static_cast<double>(count);
}

struct ClassVocabulary {
  std::vector<std::string> names;
  std::string prompt_template = "a photo of a {}";
  ad::Matrix<double> embeddings;  // one row per class

  std::string prompt(const std::string& name) const {
    std::string out = prompt_template;
    const auto pos = out.find("{}");
    if (pos == std::string::npos) return out + " " + name;
    return out.replace(pos, 2, name);
  }
  int size() const { return static_cast<int>(names.size()); }
};

/// Encodes every class prompt once.
template <typename S>
ClassVocabulary build_vocabulary(const Model<S>& model, std::vector<std::string> names,
                                 std::string prompt_template = "a photo of a {}") {
  if (names.empty()) throw InputError("class vocabulary is empty");
  std::set<std::string> seen;
  for (auto& n : names) {
    n = trim(n);
    if (n.empty()) throw InputError("class names must be non-empty");
    if (!seen.insert(n).second) throw InputError("duplicate class name: " + n);
  }
  ClassVocabulary vocab;
  vocab.names = std::move(names);
  vocab.prompt_template = std::move(prompt_template);
  vocab.embeddings.resize(vocab.size(), model.config().embed_dim);
  for (int i = 0; i < vocab.size(); ++i) {
    vocab.embeddings.row(i) = encode_text(model, vocab.prompt(vocab.names[static_cast<std::size_t>(i)])).feature.transpose();
  }
  if (!vocab.embeddings.allFinite()) throw NumericError("non-finite class embeddings");
  return vocab;
}

struct RegionScore {
  int cluster = 0;
  int label = 0;
  long pixels = 0;
  Eigen::VectorXd similarities;  // cosine similarity per class
};

struct RegionLabeling {
  SegmentationMask labels;  // class ids at feature resolution
  std::vector<RegionScore> regions;
};

inline double cosine(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  const double denom = a.norm() * b.norm();
  return denom > 0 ? a.dot(b) / denom : 0.0;
}

/// Each non-empty cluster region takes the class whose text embedding is most
/// cosine-similar to its pooled feature (ties to the lowest class index).
inline RegionLabeling classify_regions(const PixelEmbeddingMap& map, const SegmentationMask& clusters,
                                       const ClassVocabulary& vocab) {
  if (vocab.size() == 0) throw InputError("classify_regions: empty vocabulary");
  if (vocab.embeddings.cols() != map.dim()) throw InputError("classify_regions: embedding dimension mismatch");
  RegionLabeling out;
  out.labels = SegmentationMask(clusters.height, clusters.width);
  std::set<int> present(clusters.ids.begin(), clusters.ids.end());
  std::vector<int> label_of(present.empty() ? 0 : static_cast<std::size_t>(*present.rbegin()) + 1, 0);
  for (int c : present) {
    RegionScore score;
    score.cluster = c;
    score.pixels = std::count(clusters.ids.begin(), clusters.ids.end(), c);
    const Eigen::VectorXd feature = region_pool(map, clusters, c);
    score.similarities.resize(vocab.size());
    for (int k = 0; k < vocab.size(); ++k) score.similarities(k) = cosine(feature, vocab.embeddings.row(k).transpose());
    Eigen::Index best = 0;
    for (Eigen::Index k = 1; k < score.similarities.size(); ++k) {
      if (score.similarities(k) > score.similarities(best)) best = k;
    }
    score.label = static_cast<int>(best);
    label_of[static_cast<std::size_t>(c)] = score.label;
    out.regions.push_back(std::move(score));
  }
  for (std::size_t i = 0; i < clusters.ids.size(); ++i) out.labels.ids[i] = label_of[static_cast<std::size_t>(clusters.ids[i])];
  return out;
}

inline SegmentationMask upsample_nearest(const SegmentationMask& mask, int height, int width) {
  SegmentationMask out(height, width);
  for (int y = 0; y < height; ++y) {
    const int sy = std::min(mask.height - 1, static_cast<int>((y + 0.5) * mask.height / height));
    for (int x = 0; x < width; ++x) {
      const int sx = std::min(mask.width - 1, static_cast<int>((x + 0.5) * mask.width / width));
      out.at(y, x) = mask.at(sy, sx);
    }
  }
  return out;
}

/// Reassigns every cluster region smaller than `min_pixels` to the cluster it
/// borders most (4-neighbourhood). min_pixels <= 1 leaves the mask unchanged.
inline SegmentationMask merge_small_regions(SegmentationMask mask, long min_pixels) {
  if (min_pixels <= 1) return mask;
  std::map<int, long> sizes;
  for (int id : mask.ids) ++sizes[id];
  for (const auto& [id, size] : sizes) {
    if (size >= min_pixels) continue;
    std::map<int, long> borders;
    for (int y = 0; y < mask.height; ++y) {
      for (int x = 0; x < mask.width; ++x) {
        if (mask.at(y, x) != id) continue;
        const int dy[] = {-1, 1, 0, 0};
        const int dx[] = {0, 0, -1, 1};
        for (int d = 0; d < 4; ++d) {
          const int ny = y + dy[d];
          const int nx = x + dx[d];
          if (ny < 0 || nx < 0 || ny >= mask.height || nx >= mask.width) continue;
          if (mask.at(ny, nx) != id) ++borders[mask.at(ny, nx)];
        }
      }
    }
    if (borders.empty()) continue;
    const int target = std::max_element(borders.begin(), borders.end(), [](const auto& a, const auto& b) {
                         return a.second < b.second;
                       })->first;
    std::replace(mask.ids.begin(), mask.ids.end(), id, target);
  }
  return mask;
}

// ---------------------------------------------------------------------------
// Offline k-means over pixel embeddings

struct KMeansResult {
  SegmentationMask mask;
  ad::Matrix<double> centroids;
  std::vector<double> objective_trace;  // within-cluster sum of squares after each assignment
  int iterations = 0;
};

/// Lloyd's algorithm with k-means++ seeding. Stops after 100 iterations or
/// when no centroid moves by 1e-6 or more.
inline KMeansResult kmeans(const ad::Matrix<double>& points, int height, int width, int clusters, std::uint64_t seed,
                           int max_iterations = 100, double tolerance = 1e-6) {
  const Index n = points.rows();
  if (clusters < 1) throw InputError("kmeans: need at least one cluster");
  if (n < clusters) throw InputError("kmeans: fewer pixels than clusters");
  if (n != static_cast<Index>(height) * width) throw InputError("kmeans: grid shape mismatch");
  std::mt19937_64 rng(seed);
  KMeansResult result;
  result.centroids.resize(clusters, points.cols());

  std::vector<double> nearest(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  Index first = static_cast<Index>(rng() % static_cast<std::uint64_t>(n));
  result.centroids.row(0) = points.row(first);
  for (int c = 1; c < clusters; ++c) {
    double total = 0;
    for (Index i = 0; i < n; ++i) {
      nearest[static_cast<std::size_t>(i)] =
          std::min(nearest[static_cast<std::size_t>(i)], (points.row(i) - result.centroids.row(c - 1)).squaredNorm());
      total += nearest[static_cast<std::size_t>(i)];
    }
    Index chosen = 0;
    if (total > 0) {
      std::uniform_real_distribution<double> unit(0.0, total);
      const double target = unit(rng);
      double acc = 0;
      for (Index i = 0; i < n; ++i) {
        const double d = nearest[static_cast<std::size_t>(i)];
        if (d == 0) continue;
        acc += d;
        chosen = i;
        if (acc >= target) break;
      }
    }
    result.centroids.row(c) = points.row(chosen);
  }

  result.mask = SegmentationMask(height, width);
  for (int iter = 0; iter < max_iterations; ++iter) {
    double objective = 0;
    for (Index i = 0; i < n; ++i) {
      int best = 0;
      double best_d = (points.row(i) - result.centroids.row(0)).squaredNorm();
      for (int c = 1; c < clusters; ++c) {
        const double d = (points.row(i) - result.centroids.row(c)).squaredNorm();
        if (d < best_d) {
          best_d = d;
          best = c;
        }
      }
      result.mask.ids[static_cast<std::size_t>(i)] = best;
      objective += best_d;
    }
    result.objective_trace.push_back(objective);
    result.iterations = iter + 1;

    ad::Matrix<double> sums = ad::Matrix<double>::Zero(clusters, points.cols());
    std::vector<long> counts(static_cast<std::size_t>(clusters), 0);
    for (Index i = 0; i < n; ++i) {
      const int c = result.mask.ids[static_cast<std::size_t>(i)];
      sums.row(c) += points.row(i);
      ++counts[static_cast<std::size_t>(c)];
    }
    double movement = 0;
    for (int c = 0; c < clusters; ++c) {
      if (counts[static_cast<std::size_t>(c)] == 0) continue;  // empty cluster keeps its centroid
      const Eigen::RowVectorXd updated = sums.row(c) / static_cast<double>(counts[static_cast<std::size_t>(c)]);
      movement = std::max(movement, (updated - result.centroids.row(c)).norm());
      result.centroids.row(c) = updated;
    }
    if (movement < tolerance) break;
  }
  return result;
}

inline SegmentationMask kmeans_cluster(const PixelEmbeddingMap& map, int clusters, std::uint64_t seed) {
  return kmeans(map.grid, map.height, map.width, clusters, seed).mask;
}

// ---------------------------------------------------------------------------
// End-to-end

enum class ClusteringMethod { kOnlineHead, kKMeans };

struct SegmentOptions {
  ClusteringMethod method = ClusteringMethod::kOnlineHead;
  int kmeans_clusters = 0;  // 0: use the model's cluster_count
  std::uint64_t seed = 0;
  long min_region_pixels = 1;
};

struct SegmentResult {
  SegmentationMask labels;          // class ids at the input image resolution
  SegmentationMask clusters;        // cluster ids at feature resolution
  std::vector<RegionScore> regions;
};

/// encode -> cluster -> pool -> classify, then nearest-neighbour upsampling to
/// the input size. Inputs at other sizes are resized to the model resolution first.
template <typename S>
SegmentResult segment(const Image& image, const ClassVocabulary& vocab, const Model<S>& model,
                      const SegmentOptions& opts = {}) {
  const int res = model.config().image_resolution;
  const Image input = (image.height == res && image.width == res) ? image : resize_bilinear(image, res, res);
  const PixelEmbeddingMap map = encode_image(model, input);
  SegmentationMask clusters;
  if (opts.method == ClusteringMethod::kKMeans) {
    const int k = opts.kmeans_clusters > 0 ? opts.kmeans_clusters : model.config().cluster_count;
    clusters = kmeans_cluster(map, std::min<int>(k, map.height * map.width), opts.seed);
  } else {
    clusters = cluster_mask(cluster_posteriors(model, map));
  }
  clusters = merge_small_regions(std::move(clusters), opts.min_region_pixels);
  RegionLabeling labeled = classify_regions(map, clusters, vocab);
  return {upsample_nearest(labeled.labels, image.height, image.width), std::move(clusters),
          std::move(labeled.regions)};
}

}  // namespace vilseg
