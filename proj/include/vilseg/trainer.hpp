#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "vilseg/checkpoint.hpp"
#include "vilseg/config.hpp"
#include "vilseg/data.hpp"
#include "vilseg/losses.hpp"
#include "vilseg/model.hpp"
#include "vilseg/optim.hpp"
#include "vilseg/transforms.hpp"

namespace vilseg {

/// Everything one sample contributes to a step: the global view and its local
/// crops, plus the colour/flip-transformed global view for the clustering pair.
struct SampleViews {
  Image global_view;
  std::vector<Image> local_views;
  Image transformed_view;
  TransformRecord record;
  std::string caption;
};

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  // splitmix64 finalizer over a combined word
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull + b + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline SampleViews build_sample_views(const ImageCaptionPair& pair, const AugmentConfig& cfg, std::uint64_t seed) {
  ViewSet views = multi_crop(pair.image, cfg, mix_seed(seed, 1));
  SampleViews out;
  out.record = sample_transform_record(mix_seed(seed, 2), cfg);
  out.transformed_view = photometric_flip(views.global_view, out.record);
  out.global_view = std::move(views.global_view);
  out.local_views = std::move(views.local_views);
  out.caption = pair.caption;
  return out;
}

struct ForwardOptions {
  bool symmetric_cross = false;
  bool cluster_grad_to_encoder = true;
};

template <typename S>
struct BatchOutputs {
  ad::Var<S> vision;
  ad::Var<S> cross;
  ad::Var<S> cluster;
  double cluster_entropy = 0;
  std::vector<ad::Matrix<S>> global_targets;  // per-sample detached global distributions
};

/// Forward pass of all three objectives on one batch. `frozen_targets`, when
/// given, replaces the global-view distributions used as consistency targets
/// (gradient checking holds them fixed while perturbing parameters).
template <typename S>
BatchOutputs<S> forward_batch(const Model<S>& model, std::span<const SampleViews> batch, const ForwardOptions& opts,
                              const std::vector<ad::Matrix<S>>* frozen_targets = nullptr) {
  if (batch.empty()) throw InputError("forward_batch: empty batch");
  BatchOutputs<S> out;
  std::vector<ad::Var<S>> globals, vision_terms, posts_a, posts_b;
  std::vector<std::string> captions;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const SampleViews& s = batch[i];
    auto f = model.encode_image(s.global_view);
    globals.push_back(f.global);
    captions.push_back(s.caption);

    auto global_dist = model.project(f.global);
    out.global_targets.push_back(global_dist.value());
    auto target = frozen_targets ? ad::constant<S>(frozen_targets->at(i)) : global_dist;
    std::vector<ad::Var<S>> local_feats;
    for (const auto& local : s.local_views) local_feats.push_back(model.encode_image(local).global);
    auto local_dists = model.project(ad::concat_rows<S>(local_feats));
    vision_terms.push_back(vision_contrastive_loss(target, local_dists));

    auto t = model.encode_image(s.transformed_view);
    auto aligned = invert_geometric(t.pixels, t.height, t.width, s.record);
    auto pixels = f.pixels;
    if (!opts.cluster_grad_to_encoder) {
      pixels = ad::detach(pixels);
      aligned = ad::detach(aligned);
    }
    posts_a.push_back(model.cluster_posteriors(pixels));
    posts_b.push_back(model.cluster_posteriors(aligned));
  }
  const S inv_b = S(1) / static_cast<S>(batch.size());
  out.vision = ad::scale(ad::sum(ad::concat_rows<S>(vision_terms)), inv_b);
  out.cross = cross_modal_loss(ad::concat_rows<S>(globals), model.encode_texts(captions), model.log_temperature(),
                               opts.symmetric_cross);
  auto all_a = ad::concat_rows<S>(posts_a);
  out.cluster = clustering_loss(all_a, ad::concat_rows<S>(posts_b));
  const Eigen::VectorXd usage = all_a.value().template cast<double>().colwise().mean().transpose();
  out.cluster_entropy = entropy(usage);
  return out;
}

struct StepMetrics {
  long step = 0;
  double lr = 0;
  double weight_decay = 0;
  double l_vision = 0;
  double l_cross = 0;
  double l_cluster = 0;
  double total = 0;
  double cluster_entropy = 0;
};

inline constexpr std::string_view kMetricsHeader = "step,lr,wd,l_vision,l_cross,l_cluster,total,cluster_entropy";

inline std::string format_metrics_row(const StepMetrics& m) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "%ld,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g,%.10g", m.step, m.lr, m.weight_decay,
                m.l_vision, m.l_cross, m.l_cluster, m.total, m.cluster_entropy);
  return buf;
}

inline void write_metrics_csv(const std::filesystem::path& path, const std::vector<StepMetrics>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write metrics: " + path.string());
  out << kMetricsHeader << '\n';
  for (const auto& r : rows) out << format_metrics_row(r) << '\n';
}

template <typename S>
class Trainer {
 public:
  Trainer(Model<S>& model, TrainConfig config, std::vector<ImageCaptionPair> data)
      : model_(model),
        config_(std::move(config)),
        data_(std::move(data)),
        optimizer_(config_.beta1, config_.beta2, config_.adam_eps) {
    config_.augment.global_size = model_.config().image_resolution;
    config_.validate();
    if (data_.empty()) throw ConfigError("training set is empty");
    for (const auto& p : data_) p.validate();
    if (config_.augment.local_size % model_.config().patch_size != 0) {
      throw ConfigError("local_size must be divisible by patch_size");
    }
    steps_per_epoch_ = static_cast<long>((data_.size() + config_.batch_size - 1) / config_.batch_size);
    total_steps_ = config_.max_steps > 0 ? config_.max_steps : steps_per_epoch_ * config_.epochs;
  }

  long total_steps() const { return total_steps_; }
  long steps_done() const { return step_; }
  const TrainConfig& config() const { return config_; }

  /// Sample indices of step `s`: epoch-wise seeded shuffles, last batch may be short.
  std::vector<std::size_t> batch_indices(long s) const {
    const long epoch = s / steps_per_epoch_;
    const long within = s % steps_per_epoch_;
    std::vector<std::size_t> order(data_.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(mix_seed(config_.seed, 0xE90C0000ull + static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t begin = static_cast<std::size_t>(within) * config_.batch_size;
    const std::size_t end = std::min(order.size(), begin + config_.batch_size);
    return {order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end)};
  }

  std::vector<SampleViews> batch_views(long s) const {
    std::vector<SampleViews> views;
    for (std::size_t idx : batch_indices(s)) {
      const std::uint64_t seed = mix_seed(mix_seed(config_.seed, static_cast<std::uint64_t>(s)), idx);
      views.push_back(build_sample_views(data_[idx], config_.augment, seed));
    }
    return views;
  }

  /// One optimization step. Throws NumericError before touching parameters if
  /// the loss or gradients are non-finite.
  StepMetrics step() {
    const auto views = batch_views(step_);
    const ForwardOptions opts{config_.symmetric_cross, config_.cluster_grad_to_encoder};
    auto outputs = forward_batch<S>(model_, views, opts);
    auto loss = total_loss(outputs.vision, outputs.cross, outputs.cluster,
                           {config_.weight_vision, config_.weight_cross, config_.weight_cluster});
    auto& params = model_.parameters();
    params.zero_grad();
    ad::backward(loss.total);
    const double grad_norm = AdamW<S>::clip_grad_norm(params, config_.grad_clip);
    if (!std::isfinite(grad_norm)) throw NumericError("non-finite gradient at step " + std::to_string(step_));

    const auto sched = schedule(step_, config_, total_steps_);
    optimizer_.step(params, sched);

    StepMetrics m;
    m.step = step_;
    m.lr = sched.lr;
    m.weight_decay = sched.weight_decay;
    m.l_vision = loss.vision;
    m.l_cross = loss.cross;
    m.l_cluster = loss.cluster;
    m.total = static_cast<double>(loss.total.item());
    m.cluster_entropy = outputs.cluster_entropy;
    if (m.cluster_entropy < 1e-6) log::warn("step " + std::to_string(step_) + ": all pixels assigned to one cluster");
    ++step_;
    return m;
  }

 private:
  Model<S>& model_;
  TrainConfig config_;
  std::vector<ImageCaptionPair> data_;
  AdamW<S> optimizer_;
  long steps_per_epoch_ = 1;
  long total_steps_ = 0;
  long step_ = 0;
};

struct TrainOutputs {
  std::filesystem::path checkpoint;
  std::filesystem::path metrics;
  std::vector<StepMetrics> history;
};

/// Full training run: writes <out_dir>/checkpoint.vsck and <out_dir>/metrics.csv.
/// On a non-finite loss the last good parameters are saved before rethrowing.
template <typename S = double>
TrainOutputs train(const DatasetManifest& manifest, const EncoderConfig& enc, const TrainConfig& cfg,
                   const Tokenizer& tokenizer, const std::filesystem::path& out_dir,
                   const std::function<void(const StepMetrics&)>& on_step = {}, int load_workers = 1) {
  if (manifest.entries.empty()) throw ConfigError("manifest has no entries");
  std::filesystem::create_directories(out_dir);
  Model<S> model(enc, tokenizer, cfg.seed);
  Trainer<S> trainer(model, cfg, load_pairs(manifest, load_workers));
  TrainOutputs out{out_dir / "checkpoint.vsck", out_dir / "metrics.csv", {}};
  auto extra = [&] { return nlohmann::json{{"steps", trainer.steps_done()}, {"seed", cfg.seed}}; };
  try {
    while (trainer.steps_done() < trainer.total_steps()) {
      out.history.push_back(trainer.step());
      if (on_step) on_step(out.history.back());
      if (cfg.checkpoint_every > 0 && trainer.steps_done() % cfg.checkpoint_every == 0) {
        save_checkpoint(out.checkpoint, model, extra());
      }
    }
  } catch (const NumericError&) {
    save_checkpoint(out.checkpoint, model, extra());
    write_metrics_csv(out.metrics, out.history);
    throw;
  }
  save_checkpoint(out.checkpoint, model, extra());
  write_metrics_csv(out.metrics, out.history);
  return out;
}

}  // namespace vilseg
