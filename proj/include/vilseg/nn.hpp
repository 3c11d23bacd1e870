#pragma once

// Parameter storage and the transformer building blocks shared by the image
// and text encoders.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "vilseg/autodiff.hpp"

namespace vilseg::nn {

using ad::Index;
using ad::Matrix;
using ad::Var;

/// Named, ordered collection of trainable tensors.
template <typename S>
class ParameterStore {
 public:
  Var<S> add(const std::string& name, Matrix<S> init) {
    if (params_.count(name)) throw InputError("duplicate parameter name: " + name);
    auto v = ad::parameter<S>(std::move(init));
    params_.emplace(name, v);
    return v;
  }

  const std::map<std::string, Var<S>>& all() const { return params_; }
  Var<S>& at(const std::string& name) { return params_.at(name); }
  const Var<S>& at(const std::string& name) const { return params_.at(name); }
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, v] : params_) n += static_cast<std::size_t>(v.value().size());
    return n;
  }

  void zero_grad() {
    for (auto& [_, v] : params_) v.zero_grad();
  }

  /// Biases, norm gains and the temperature are excluded from weight decay.
  static bool decays(const std::string& name) {
    auto ends_with = [&](std::string_view suffix) {
      return name.size() >= suffix.size() && name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0;
    };
    return !(ends_with(".bias") || ends_with(".gain") || name == "log_temperature");
  }

 private:
  std::map<std::string, Var<S>> params_;
};

/// Deterministic initializers drawing from one engine.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  template <typename S>
  Matrix<S> normal(Index rows, Index cols, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix<S> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<S>(dist(rng_));
    return m;
  }

  /// Normal resampled until it falls within two standard deviations.
  template <typename S>
  Matrix<S> truncated_normal(Index rows, Index cols, double stddev) {
    std::normal_distribution<double> dist(0.0, 1.0);
    Matrix<S> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) {
      double z = dist(rng_);
      while (std::abs(z) > 2.0) z = dist(rng_);
      m.data()[i] = static_cast<S>(z * stddev);
    }
    return m;
  }

 private:
  std::mt19937_64 rng_;
};

template <typename S>
struct Linear {
  Var<S> weight;  // in x out
  Var<S> bias;    // 1 x out, undefined when the layer has no bias

  Var<S> operator()(const Var<S>& x) const {
    auto y = ad::matmul(x, weight);
    return bias.defined() ? ad::add_row(y, bias) : y;
  }

  static Linear make(ParameterStore<S>& store, const std::string& name, Matrix<S> weight_init, bool with_bias = true) {
    Linear l;
    const Index out = weight_init.cols();
    l.weight = store.add(name + ".weight", std::move(weight_init));
    if (with_bias) l.bias = store.add(name + ".bias", Matrix<S>::Zero(1, out));
    return l;
  }
};

template <typename S>
struct LayerNorm {
  Var<S> gain;
  Var<S> bias;

  Var<S> operator()(const Var<S>& x) const { return ad::layer_norm_rows(x, gain, bias); }

  static LayerNorm make(ParameterStore<S>& store, const std::string& name, Index width) {
    return {store.add(name + ".gain", Matrix<S>::Ones(1, width)), store.add(name + ".bias", Matrix<S>::Zero(1, width))};
  }
};

/// Pre-norm residual attention block: x + attn(ln_1(x)), then x + mlp(ln_2(x)).
template <typename S>
struct ResidualBlock {
  LayerNorm<S> ln_1;
  LayerNorm<S> ln_2;
  Linear<S> in_proj;   // width -> 3 * width (q, k, v)
  Linear<S> out_proj;
  Linear<S> c_fc;      // width -> 4 * width
  Linear<S> c_proj;
  int heads = 1;
  Index width = 0;

  static ResidualBlock make(ParameterStore<S>& store, Initializer& init, const std::string& name, Index width,
                            int heads, int layers) {
    const double attn_std = std::pow(static_cast<double>(width), -0.5);
    const double proj_std = attn_std * std::pow(2.0 * layers, -0.5);
    const double fc_std = std::pow(2.0 * width, -0.5);
    ResidualBlock b;
    b.heads = heads;
    b.width = width;
    b.ln_1 = LayerNorm<S>::make(store, name + ".ln_1", width);
    b.in_proj = Linear<S>::make(store, name + ".attn.in_proj", init.normal<S>(width, 3 * width, attn_std));
    b.out_proj = Linear<S>::make(store, name + ".attn.out_proj", init.normal<S>(width, width, proj_std));
    b.ln_2 = LayerNorm<S>::make(store, name + ".ln_2", width);
    b.c_fc = Linear<S>::make(store, name + ".mlp.c_fc", init.normal<S>(width, 4 * width, fc_std));
    b.c_proj = Linear<S>::make(store, name + ".mlp.c_proj", init.normal<S>(4 * width, width, proj_std));
    return b;
  }

  /// `mask` is an additive TxT constant (e.g. causal); pass an undefined Var for none.
  Var<S> operator()(const Var<S>& x, const Var<S>& mask = {}) const {
    const Index head_dim = width / heads;
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(head_dim));
    auto qkv = in_proj(ln_1(x));
    std::vector<Var<S>> outputs;
    outputs.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      auto q = ad::slice_cols(qkv, h * head_dim, head_dim);
      auto k = ad::slice_cols(qkv, width + h * head_dim, head_dim);
      auto v = ad::slice_cols(qkv, 2 * width + h * head_dim, head_dim);
      auto scores = ad::scale(ad::matmul(q, ad::transpose(k)), inv_sqrt);
      if (mask.defined()) scores = ad::add(scores, mask);
      outputs.push_back(ad::matmul(ad::softmax_rows(scores), v));
    }
    auto attended = heads == 1 ? outputs.front() : ad::concat_cols<S>(outputs);
    auto h1 = ad::add(x, out_proj(attended));
    return ad::add(h1, c_proj(ad::quick_gelu(c_fc(ln_2(h1)))));
  }
};

/// Additive causal mask: position i may attend to positions <= i.
template <typename S>
Matrix<S> causal_mask(Index n) {
  Matrix<S> m = Matrix<S>::Zero(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = i + 1; j < n; ++j) m(i, j) = -std::numeric_limits<S>::infinity();
  }
  return m;
}

/// 1-D linear interpolation weights (out x in) with half-pixel centers.
template <typename S>
Matrix<S> interpolation_weights_1d(Index out, Index in) {
  Matrix<S> w = Matrix<S>::Zero(out, in);
  for (Index o = 0; o < out; ++o) {
    double f = (o + 0.5) * static_cast<double>(in) / static_cast<double>(out) - 0.5;
    f = std::clamp(f, 0.0, static_cast<double>(in - 1));
    const Index i0 = static_cast<Index>(f);
    const Index i1 = std::min(i0 + 1, in - 1);
    const double t = f - static_cast<double>(i0);
    w(o, i0) += static_cast<S>(1 - t);
    w(o, i1) += static_cast<S>(t);
  }
  return w;
}

/// Bilinear resampling operator between square grids stored row-major:
/// out_grid (out*out x C) = W * in_grid (in*in x C).
template <typename S>
Matrix<S> bilinear_grid_operator(Index out, Index in) {
  const Matrix<S> w = interpolation_weights_1d<S>(out, in);
  Matrix<S> op(out * out, in * in);
  for (Index oi = 0; oi < out; ++oi) {
    for (Index oj = 0; oj < out; ++oj) {
      for (Index ii = 0; ii < in; ++ii) {
        for (Index ij = 0; ij < in; ++ij) op(oi * out + oj, ii * in + ij) = w(oi, ii) * w(oj, ij);
      }
    }
  }
  return op;
}

}  // namespace vilseg::nn
