#pragma once

// Training objectives: global/local consistency cross-entropy, image-to-text
// contrastive loss with a learnable temperature, and the mutual-information
// clustering loss over the joint cluster-assignment matrix.

#include <Eigen/Dense>

#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "vilseg/autodiff.hpp"
#include "vilseg/errors.hpp"

namespace vilseg {

/// Floor applied inside every logarithm.
inline constexpr double kLogFloor = 1e-12;

namespace detail {

inline std::vector<ad::Index> diagonal_columns(ad::Index n) {
  std::vector<ad::Index> cols(static_cast<std::size_t>(n));
  std::iota(cols.begin(), cols.end(), ad::Index{0});
  return cols;
}

}  // namespace detail

/// Mean over local views of H(target, local). The global distribution (1 x P)
/// is detached; locals are k x P.
template <typename S>
ad::Var<S> vision_contrastive_loss(const ad::Var<S>& global_dist, const ad::Var<S>& local_dists) {
  if (global_dist.rows() != 1 || global_dist.cols() != local_dists.cols()) {
    throw InputError("vision_contrastive_loss: distribution widths differ");
  }
  if (local_dists.rows() < 1) throw InputError("vision_contrastive_loss: need at least one local view");
  const ad::Index k = local_dists.rows();
  auto target = ad::constant<S>(global_dist.value().replicate(k, 1));
  auto ce = ad::mul(target, ad::log_floor(local_dists, static_cast<S>(kLogFloor)));
  return ad::scale(ad::sum(ce), S(-1) / static_cast<S>(k));
}

/// Image-to-text InfoNCE: mean over m of -log softmax_n(cos(x_m, t_n) / tau)[m].
/// With `symmetric`, averages in the text-to-image direction as well.
template <typename S>
ad::Var<S> cross_modal_loss(const ad::Var<S>& image_feats, const ad::Var<S>& text_feats,
                            const ad::Var<S>& log_temperature, bool symmetric = false) {
  if (image_feats.rows() != text_feats.rows() || image_feats.cols() != text_feats.cols()) {
    throw InputError("cross_modal_loss: feature batches differ in shape");
  }
  if (image_feats.rows() < 1) throw InputError("cross_modal_loss: empty batch");
  const ad::Index b = image_feats.rows();
  auto sims = ad::matmul(ad::l2_normalize_rows(image_feats), ad::transpose(ad::l2_normalize_rows(text_feats)));
  auto logits = ad::scale_by(sims, ad::reciprocal(ad::exp(log_temperature)));
  auto i2t = ad::sum(ad::pick(ad::log_softmax_rows(logits), detail::diagonal_columns(b)));
  auto loss = ad::scale(i2t, S(-1) / static_cast<S>(b));
  if (!symmetric) return loss;
  auto t2i = ad::sum(ad::pick(ad::log_softmax_rows(ad::transpose(logits)), detail::diagonal_columns(b)));
  return ad::scale(ad::add(loss, ad::scale(t2i, S(-1) / static_cast<S>(b))), S(0.5));
}

/// J = mean over pixel pairs of p_i p'_i^T, symmetrized and renormalized.
/// Both inputs are N x C with rows already aligned.
template <typename S>
ad::Var<S> joint_distribution(const ad::Var<S>& post_a, const ad::Var<S>& post_b) {
  if (post_a.rows() != post_b.rows() || post_a.cols() != post_b.cols()) {
    throw InputError("joint_distribution: posterior shapes differ");
  }
  if (post_a.rows() == 0) throw InputError("joint_distribution: no pixels");
  auto joint = ad::scale(ad::matmul(ad::transpose(post_a), post_b), S(1) / static_cast<S>(post_a.rows()));
  auto symmetric = ad::scale(ad::add(joint, ad::transpose(joint)), S(0.5));
  return ad::scale_by(symmetric, ad::reciprocal(ad::sum(symmetric)));
}

/// I(J) = sum J ln J - sum_c J^c ln J^c - sum_c' J^c' ln J^c'
/// (equal to the double sum of J ln(J / (J^c J^c')) with 0 ln 0 = 0).
template <typename S>
ad::Var<S> mutual_information(const ad::Var<S>& joint) {
  if (joint.rows() != joint.cols()) throw InputError("mutual_information: J must be square");
  const S floor = static_cast<S>(kLogFloor);
  auto rows = ad::row_sums(joint);
  auto cols = ad::col_sums(joint);
  auto joint_term = ad::sum(ad::mul(joint, ad::log_floor(joint, floor)));
  auto row_term = ad::sum(ad::mul(rows, ad::log_floor(rows, floor)));
  auto col_term = ad::sum(ad::mul(cols, ad::log_floor(cols, floor)));
  return ad::sub(ad::sub(joint_term, row_term), col_term);
}

template <typename S>
ad::Var<S> clustering_loss(const ad::Var<S>& post_a, const ad::Var<S>& post_b) {
  return ad::scale(mutual_information(joint_distribution(post_a, post_b)), S(-1));
}

struct LossWeights {
  double vision = 1.0;
  double cross = 1.0;
  double cluster = 1.0;
};

template <typename S>
struct TotalLoss {
  ad::Var<S> total;
  double vision = 0;
  double cross = 0;
  double cluster = 0;
};

/// Weighted sum of the three terms (unit weights by default). Throws
/// NumericError naming the first non-finite term.
template <typename S>
TotalLoss<S> total_loss(const ad::Var<S>& vision, const ad::Var<S>& cross, const ad::Var<S>& cluster,
                        const LossWeights& weights = {}) {
  const std::pair<const char*, const ad::Var<S>*> terms[] = {{"vision", &vision}, {"cross", &cross}, {"cluster", &cluster}};
  for (const auto& [name, term] : terms) {
    if (!std::isfinite(static_cast<double>(term->item()))) {
      throw NumericError(std::string("non-finite loss term: ") + name);
    }
  }
  auto total = ad::add(ad::add(ad::scale(vision, static_cast<S>(weights.vision)), ad::scale(cross, static_cast<S>(weights.cross))),
                       ad::scale(cluster, static_cast<S>(weights.cluster)));
  return {total, static_cast<double>(vision.item()), static_cast<double>(cross.item()),
          static_cast<double>(cluster.item())};
}

// ---------------------------------------------------------------------------
// Plain-value entry points

using RowMatrix = ad::Matrix<double>;

inline double vision_contrastive_loss(const Eigen::VectorXd& global_dist, const std::vector<Eigen::VectorXd>& local_dists) {
  if (local_dists.empty()) throw InputError("vision_contrastive_loss: need at least one local view");
  RowMatrix locals(static_cast<ad::Index>(local_dists.size()), global_dist.size());
  for (std::size_t i = 0; i < local_dists.size(); ++i) {
    if (local_dists[i].size() != global_dist.size()) throw InputError("vision_contrastive_loss: widths differ");
    locals.row(static_cast<ad::Index>(i)) = local_dists[i].transpose();
  }
  RowMatrix g = global_dist.transpose();
  return vision_contrastive_loss<double>(ad::constant<double>(g), ad::constant<double>(locals)).item();
}

inline double cross_modal_loss(const RowMatrix& image_feats, const RowMatrix& text_feats, double temperature,
                               bool symmetric = false) {
  if (!(temperature > 0)) throw InputError("cross_modal_loss: temperature must be positive");
  return cross_modal_loss<double>(ad::constant<double>(image_feats), ad::constant<double>(text_feats),
                                  ad::scalar_constant<double>(std::log(temperature)), symmetric)
      .item();
}

inline RowMatrix joint_distribution(const RowMatrix& post_a, const RowMatrix& post_b) {
  return joint_distribution<double>(ad::constant<double>(post_a), ad::constant<double>(post_b)).value();
}

inline double mutual_information(const RowMatrix& joint) {
  return mutual_information<double>(ad::constant<double>(joint)).item();
}

inline double clustering_loss(const RowMatrix& post_a, const RowMatrix& post_b) {
  return clustering_loss<double>(ad::constant<double>(post_a), ad::constant<double>(post_b)).item();
}

/// Shannon entropy (nats) with 0 ln 0 = 0.
inline double entropy(const Eigen::Ref<const Eigen::VectorXd>& p) {
  double h = 0;
  for (Eigen::Index i = 0; i < p.size(); ++i) {
    if (p(i) > 0) h -= p(i) * std::log(p(i));
  }
  return h;
}

}  // namespace vilseg
