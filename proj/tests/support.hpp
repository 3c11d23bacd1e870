#pragma once

#include <gtest/gtest.h>

#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "vilseg/vilseg.hpp"

namespace vstest {

using Mat = vilseg::ad::Matrix<double>;
using VarD = vilseg::ad::Var<double>;

inline const vilseg::Tokenizer& shipped_tokenizer() {
  static const vilseg::Tokenizer tok = vilseg::Tokenizer::from_file(std::filesystem::path(VILSEG_DATA_DIR) / "bpe_merges.txt");
  return tok;
}

/// Fresh, empty scratch directory unique to this test.
inline std::filesystem::path scratch_dir() {
  const auto* info = ::testing::UnitTest::GetInstance()->current_test_info();
  auto dir = std::filesystem::temp_directory_path() /
             ("vilseg_" + std::string(info->test_suite_name()) + "_" + info->name());
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline Mat random_matrix(vilseg::ad::Index rows, vilseg::ad::Index cols, std::uint64_t seed, double lo = -1, double hi = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  Mat m(rows, cols);
  for (vilseg::ad::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

/// Rows drawn from a softmax of random logits: strictly positive simplex rows.
inline Mat random_simplex_rows(vilseg::ad::Index rows, vilseg::ad::Index cols, std::uint64_t seed, double spread = 2.0) {
  Mat m = random_matrix(rows, cols, seed, -spread, spread).array().exp().matrix();
  for (vilseg::ad::Index r = 0; r < rows; ++r) m.row(r) /= m.row(r).sum();
  return m;
}

struct GradCheck {
  long checked = 0;
  long failed = 0;
  double worst = 0;
  double pass_fraction() const { return checked ? 1.0 - static_cast<double>(failed) / checked : 1.0; }
};

/// Compares backward() against central differences for every entry of every
/// input. Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheck check_gradients(const std::function<VarD()>& loss, const std::vector<VarD>& inputs,
                                 double tol = 1e-5, double h = 1e-6, double floor = 1e-6) {
  for (auto v : inputs) v.zero_grad();
  vilseg::ad::backward(loss());
  std::vector<Mat> analytic;
  for (const auto& v : inputs) analytic.push_back(v.grad());
  GradCheck out;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    VarD v = inputs[i];
    Mat& value = v.mutable_value();
    for (vilseg::ad::Index k = 0; k < value.size(); ++k) {
      const double old = value.data()[k];
      value.data()[k] = old + h;
      const double up = loss().item();
      value.data()[k] = old - h;
      const double down = loss().item();
      value.data()[k] = old;
      const double numeric = (up - down) / (2 * h);
      const double a = analytic[i].data()[k];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++out.checked;
      if (rel >= tol) ++out.failed;
      out.worst = std::max(out.worst, rel);
    }
  }
  return out;
}

/// Small model used across tests: 16x16 input, 4x4 grid.
inline vilseg::EncoderConfig micro_config() {
  vilseg::EncoderConfig c = vilseg::EncoderConfig::tiny();
  c.image_resolution = 16;
  c.patch_size = 4;
  c.image_layers = 1;
  c.image_width = 8;
  c.image_heads = 2;
  c.text_layers = 1;
  c.text_width = 8;
  c.text_heads = 2;
  c.embed_dim = 16;
  c.projection_dim = 32;
  c.cluster_count = 4;
  return c;
}

inline vilseg::Image constant_image(int h, int w, float r, float g, float b) {
  vilseg::Image img(h, w, 3);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      img.at(y, x, 0) = r;
      img.at(y, x, 1) = g;
      img.at(y, x, 2) = b;
    }
  }
  return img;
}

inline vilseg::Image random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  vilseg::Image img(h, w, 3);
  for (auto& v : img.data) v = u(rng);
  return img;
}

}  // namespace vstest
