#pragma once

// Image-caption manifests and the synthetic shapes dataset.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "vilseg/errors.hpp"
#include "vilseg/image.hpp"

namespace vilseg {

inline std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r\n\v\f");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n\v\f");
  return std::string(s.substr(first, last - first + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

struct ImageCaptionPair {
  Image image;
  std::string caption;
  std::string id;

  void validate() const {
    if (image.channels != 3) throw InputError("image must have 3 channels: " + id);
    for (float v : image.data) {
      if (!(v >= 0.0f && v <= 1.0f)) throw InputError("pixel value outside [0,1]: " + id);
    }
    if (trim(caption).empty()) throw InputError("empty caption: " + id);
  }
};

struct ManifestEntry {
  std::string image_path;  // relative to the manifest's directory
  std::string caption;

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

struct DatasetManifest {
  static constexpr int kFormatVersion = 1;

  std::vector<ManifestEntry> entries;
  int format_version = kFormatVersion;
  std::filesystem::path base_dir;  // not serialized

  std::filesystem::path resolve(const ManifestEntry& e) const { return base_dir / e.image_path; }

  friend bool operator==(const DatasetManifest& a, const DatasetManifest& b) {
    return a.entries == b.entries && a.format_version == b.format_version;
  }
};

inline constexpr std::string_view kManifestVersionTag = "# format_version=";

/// Parses manifest text. Comment lines start with '#'; the first may carry the format version.
inline DatasetManifest parse_manifest(std::istream& in) {
  DatasetManifest manifest;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.rfind(kManifestVersionTag, 0) == 0) {
      try {
        manifest.format_version = std::stoi(line.substr(kManifestVersionTag.size()));
      } catch (const std::exception&) {
        throw ParseError(number, "bad format_version");
      }
      if (manifest.format_version != DatasetManifest::kFormatVersion) {
        throw ParseError(number, "unsupported format_version " + std::to_string(manifest.format_version));
      }
      continue;
    }
    if (trim(line).empty() || line.front() == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError(number, "expected <image path>\\t<caption>");
    ManifestEntry entry{trim(line.substr(0, tab)), trim(line.substr(tab + 1))};
    if (entry.image_path.empty()) throw ParseError(number, "empty image path");
    if (entry.caption.empty()) throw ParseError(number, "empty caption");
    manifest.entries.push_back(std::move(entry));
  }
  return manifest;
}

/// Reads a manifest from disk and checks that every image file exists.
inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest: " + path.string());
  DatasetManifest manifest = parse_manifest(in);
  manifest.base_dir = path.parent_path();
  if (manifest.entries.empty()) log::warn("manifest has no entries: " + path.string());
  std::vector<std::string> missing;
  for (const auto& e : manifest.entries) {
    if (!std::filesystem::is_regular_file(manifest.resolve(e))) missing.push_back(manifest.resolve(e).string());
  }
  if (!missing.empty()) throw ValidationError("manifest references missing images", std::move(missing));
  return manifest;
}

inline void write_manifest(std::ostream& out, const DatasetManifest& manifest) {
  out << kManifestVersionTag << manifest.format_version << '\n';
  for (const auto& e : manifest.entries) out << e.image_path << '\t' << e.caption << '\n';
}

inline void write_manifest(const std::filesystem::path& path, const DatasetManifest& manifest) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest: " + path.string());
  write_manifest(out, manifest);
}

/// Decodes every image in the manifest, optionally on several threads. Output
/// order follows the manifest regardless of `workers`. Decode failures are
/// collected and reported together.
inline std::vector<ImageCaptionPair> load_pairs(const DatasetManifest& manifest, int workers = 1) {
  const std::size_t n = manifest.entries.size();
  std::vector<ImageCaptionPair> pairs(n);
  std::vector<std::string> errors(n);
  auto work = [&](std::size_t first, std::size_t stride) {
    for (std::size_t i = first; i < n; i += stride) {
      const auto& e = manifest.entries[i];
      try {
        pairs[i] = {read_png(manifest.resolve(e)), e.caption, e.image_path};
      } catch (const IoError& err) {
        errors[i] = err.what();
      }
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(static_cast<std::size_t>(std::max(workers, 1)), 1, std::max<std::size_t>(n, 1));
  if (threads == 1) {
    work(0, 1);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
    for (auto& t : pool) t.join();
  }
  std::vector<std::string> bad;
  for (auto& e : errors) {
    if (!e.empty()) bad.push_back(std::move(e));
  }
  if (!bad.empty()) throw ValidationError("manifest images failed to decode", std::move(bad));
  return pairs;
}

// ---------------------------------------------------------------------------
// Class-name files: one name per line, line index = class id.

inline void write_class_names(const std::filesystem::path& path, const std::vector<std::string>& names) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write: " + path.string());
  for (const auto& n : names) out << n << '\n';
}

inline std::vector<std::string> read_class_names(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open class names: " + path.string());
  std::vector<std::string> names;
  std::string line;
  while (std::getline(in, line)) {
    auto name = trim(line);
    if (!name.empty()) names.push_back(std::move(name));
  }
  return names;
}

// ---------------------------------------------------------------------------
// Synthetic shapes

struct SyntheticSpec {
  std::vector<std::string> shapes{"circle", "square", "triangle"};
  std::vector<std::string> colors{"red", "green", "blue"};
  int count = 300;
  int image_size = 64;
  std::uint64_t seed = 7;
  double min_area = 0.08;  // shape pixels / image pixels
  double max_area = 0.30;
};

inline const std::map<std::string, std::array<float, 3>>& named_colors() {
  static const std::map<std::string, std::array<float, 3>> colors{
      {"red", {0.85f, 0.12f, 0.10f}},   {"green", {0.12f, 0.75f, 0.15f}}, {"blue", {0.12f, 0.20f, 0.85f}},
      {"yellow", {0.90f, 0.85f, 0.10f}}, {"purple", {0.55f, 0.15f, 0.75f}}, {"orange", {0.95f, 0.55f, 0.08f}},
      {"cyan", {0.10f, 0.80f, 0.85f}},   {"white", {0.97f, 0.97f, 0.97f}},  {"black", {0.03f, 0.03f, 0.03f}},
  };
  return colors;
}

inline const std::vector<std::string>& supported_shapes() {
  static const std::vector<std::string> shapes{"circle", "square", "triangle", "diamond"};
  return shapes;
}

/// One rendered sample: image, ground-truth mask (0 = background, i+1 = shapes[i]) and caption.
struct SyntheticSample {
  Image image;
  LabelImage mask;
  std::string caption;
  std::size_t shape_index = 0;
  std::size_t color_index = 0;
};

namespace detail {

inline bool inside_shape(const std::string& shape, double px, double py, double cx, double cy, double size) {
  const double dx = px - cx;
  const double dy = py - cy;
  if (shape == "circle") return dx * dx + dy * dy <= size * size;
  if (shape == "square") return std::abs(dx) <= size / 2 && std::abs(dy) <= size / 2;
  if (shape == "diamond") return std::abs(dx) + std::abs(dy) <= size / 2;
  // Upright equilateral triangle with side `size`, centered on its bounding box.
  const double h = size * std::sqrt(3.0) / 2;
  const double top = cy - h / 2;
  const double t = (py - top) / h;
  if (t < 0 || t > 1) return false;
  return std::abs(dx) <= t * size / 2;
}

/// Shape extent parameter giving the requested area (circle: radius, others: side).
inline double size_for_area(const std::string& shape, double area) {
  if (shape == "circle") return std::sqrt(area / std::numbers::pi);
  if (shape == "square") return std::sqrt(area);
  if (shape == "diamond") return std::sqrt(2 * area);
  return std::sqrt(4 * area / std::sqrt(3.0));
}

inline double half_extent(const std::string& shape, double size) {
  if (shape == "circle") return size;
  if (shape == "triangle") return std::max(size / 2, size * std::sqrt(3.0) / 4);
  return size / 2;
}

}  // namespace detail

inline void validate(const SyntheticSpec& spec) {
  if (spec.count < 1) throw ConfigError("synthetic count must be >= 1");
  if (spec.shapes.empty() || spec.colors.empty()) throw ConfigError("shape and color vocabularies must be non-empty");
  if (spec.image_size < 8) throw ConfigError("synthetic image_size must be >= 8");
  if (!(spec.min_area > 0 && spec.min_area < spec.max_area && spec.max_area < 0.7)) {
    throw ConfigError("synthetic area bounds must satisfy 0 < min < max < 0.7");
  }
  for (const auto& s : spec.shapes) {
    if (std::find(supported_shapes().begin(), supported_shapes().end(), s) == supported_shapes().end()) {
      throw ConfigError("unknown shape: " + s);
    }
  }
  for (const auto& c : spec.colors) {
    if (!named_colors().count(c)) throw ConfigError("unknown color: " + c);
  }
}

/// Renders sample `index`. Pure function of (spec, index).
inline SyntheticSample render_synthetic_sample(const SyntheticSpec& spec, std::size_t index) {
  std::seed_seq seq{static_cast<std::uint32_t>(spec.seed), static_cast<std::uint32_t>(spec.seed >> 32),
                    static_cast<std::uint32_t>(index), 0x5eed5u};
  std::mt19937_64 rng(seq);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int n = spec.image_size;

  SyntheticSample sample;
  sample.shape_index = static_cast<std::size_t>(rng() % spec.shapes.size());
  sample.color_index = static_cast<std::size_t>(rng() % spec.colors.size());
  const std::string& shape = spec.shapes[sample.shape_index];
  const std::string& color_name = spec.colors[sample.color_index];
  const auto base = named_colors().at(color_name);

  // Muted, low-saturation backgrounds keep the saturated shape colors distinct.
  const double gray = 0.35 + 0.3 * unit(rng);
  std::array<float, 3> background{};
  for (auto& v : background) v = static_cast<float>(gray + 0.08 * (unit(rng) - 0.5));
  std::array<float, 3> foreground{};
  for (int c = 0; c < 3; ++c) foreground[c] = static_cast<float>(base[c] + 0.08 * (unit(rng) - 0.5));

  const double total = static_cast<double>(n) * n;
  LabelImage mask;
  for (int attempt = 0;; ++attempt) {
    const double area = (spec.min_area + (spec.max_area - spec.min_area) * unit(rng)) * total;
    const double size = detail::size_for_area(shape, area);
    const double reach = detail::half_extent(shape, size);
    const double lo = reach;
    const double hi = n - reach;
    const double cx = lo < hi ? lo + (hi - lo) * unit(rng) : n / 2.0;
    const double cy = lo < hi ? lo + (hi - lo) * unit(rng) : n / 2.0;
    mask = LabelImage(n, n, 0);
    std::size_t count = 0;
    for (int y = 0; y < n; ++y) {
      for (int x = 0; x < n; ++x) {
        if (detail::inside_shape(shape, x + 0.5, y + 0.5, cx, cy, size)) {
          mask.at(y, x) = static_cast<std::uint8_t>(sample.shape_index + 1);
          ++count;
        }
      }
    }
    const double fraction = count / total;
    if (fraction >= spec.min_area && fraction <= spec.max_area) break;
    if (attempt > 200) throw ConfigError("cannot place shape within area bounds at this image size");
  }

  sample.image = Image(n, n, 3);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const auto& rgb = mask.at(y, x) ? foreground : background;
      for (int c = 0; c < 3; ++c) {
        const double noise = 0.06 * (unit(rng) - 0.5);
        sample.image.at(y, x, c) = std::clamp(static_cast<float>(rgb[c] + noise), 0.0f, 1.0f);
      }
    }
  }
  sample.image = quantize_8bit(std::move(sample.image));
  sample.mask = std::move(mask);
  sample.caption = "a photo of a " + color_name + " " + shape;
  return sample;
}

/// Class names of a synthetic dataset: background first, then the shapes.
inline std::vector<std::string> synthetic_class_names(const SyntheticSpec& spec) {
  std::vector<std::string> names{"background"};
  names.insert(names.end(), spec.shapes.begin(), spec.shapes.end());
  return names;
}

inline std::string sample_stem(std::size_t index) {
  std::ostringstream s;
  s.width(6);
  s.fill('0');
  s << index;
  return s.str();
}

/// Writes images/, masks/, manifest.tsv and classes.txt under `out_dir`.
inline DatasetManifest generate_synthetic_dataset(const SyntheticSpec& spec, const std::filesystem::path& out_dir) {
  validate(spec);
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  std::filesystem::create_directories(out_dir / "masks", ec);
  if (ec || !std::filesystem::is_directory(out_dir / "masks")) {
    throw IoError("cannot create output directory: " + out_dir.string());
  }
  DatasetManifest manifest;
  manifest.base_dir = out_dir;
  for (int i = 0; i < spec.count; ++i) {
    const auto sample = render_synthetic_sample(spec, static_cast<std::size_t>(i));
    const std::string name = sample_stem(static_cast<std::size_t>(i)) + ".png";
    write_png(out_dir / "images" / name, sample.image);
    write_png(out_dir / "masks" / name, sample.mask);
    manifest.entries.push_back({"images/" + name, sample.caption});
  }
  write_manifest(out_dir / "manifest.tsv", manifest);
  write_class_names(out_dir / "classes.txt", synthetic_class_names(spec));
  return manifest;
}

/// Ground-truth mask path for a manifest entry written by generate_synthetic_dataset.
inline std::filesystem::path mask_path_for(const DatasetManifest& manifest, const ManifestEntry& entry) {
  return manifest.base_dir / "masks" / std::filesystem::path(entry.image_path).filename();
}

}  // namespace vilseg
