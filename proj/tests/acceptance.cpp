// Acceptance gate: one PASS/FAIL line per criterion, non-zero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "vilseg/vilseg.hpp"

using namespace vilseg;
namespace fs = std::filesystem;
using Mat = ad::Matrix<double>;
using Clock = std::chrono::steady_clock;

namespace {

// Random-assignment baseline for the toy segmentation protocol below, from a
// reference run of random_baseline() (uniform labels, seed 123). The test
// recomputes it and refuses to proceed if the frozen value has drifted.
constexpr double kFrozenRandomMiou = 0.16404175913014754;
constexpr double kBaselineMultiple = 2.0;
constexpr double kAblationSlack = 0.02;

constexpr int kToyClusters = 8;
constexpr int kCollapseSteps = 500;
constexpr int kToySteps = 2000;

struct Outcome {
  bool pass = false;
  std::string detail;
};

int failures = 0;

void report(int id, const std::string& name, const Outcome& o, Clock::time_point start) {
  const double secs = std::chrono::duration<double>(Clock::now() - start).count();
  std::printf("[%s] criterion %d: %s | %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(), secs);
  std::fflush(stdout);
  if (!o.pass) ++failures;
}

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

const Tokenizer& tokenizer() {
  static const Tokenizer tok = Tokenizer::from_file(fs::path(VILSEG_DATA_DIR) / "bpe_merges.txt");
  return tok;
}

// Symmetric, non-negative, unit-sum C x C matrices with a few exact zeros.
std::vector<Mat> random_joints() {
  std::vector<Mat> out;
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int c : {2, 5, 20}) {
    for (int n = 0; n < 17; ++n) {
      Mat m(c, c);
      for (int i = 0; i < c; ++i) {
        for (int j = 0; j < c; ++j) m(i, j) = u(rng) < 0.1 ? 0.0 : u(rng);
      }
      Mat s = m + m.transpose();
      if (s.sum() == 0) s(0, 0) = 1;
      out.push_back(s / s.sum());
    }
  }
  out.resize(50);
  return out;
}

double brute_force_mi(const Mat& j) {
  const int c = static_cast<int>(j.rows());
  std::vector<double> row(c, 0.0), col(c, 0.0);
  for (int a = 0; a < c; ++a) {
    for (int b = 0; b < c; ++b) {
      row[a] += j(a, b);
      col[b] += j(a, b);
    }
  }
  double mi = 0;
  for (int a = 0; a < c; ++a) {
    for (int b = 0; b < c; ++b) {
      if (j(a, b) > 0) mi += j(a, b) * std::log(j(a, b) / (row[a] * col[b]));
    }
  }
  return mi;
}

double shannon(const std::vector<double>& p) {
  double h = 0;
  for (double v : p) {
    if (v > 0) h -= v * std::log(v);
  }
  return h;
}

Outcome mi_oracle() {
  double worst = 0;
  for (const Mat& j : random_joints()) worst = std::max(worst, std::abs(mutual_information(j) - brute_force_mi(j)));
  return {worst <= 1e-9, fmt("50 matrices, max |I - oracle| = %.2e", worst)};
}

Outcome entropy_decomposition() {
  double worst = 0;
  for (const Mat& j : random_joints()) {
    const int c = static_cast<int>(j.rows());
    std::vector<double> marginal(c, 0.0);
    double joint_h = 0;
    for (int a = 0; a < c; ++a) {
      for (int b = 0; b < c; ++b) {
        marginal[a] += j(a, b);
        if (j(a, b) > 0) joint_h -= j(a, b) * std::log(j(a, b));
      }
    }
    // J is symmetric, so both marginals coincide; H(Y|X) = H(X,Y) - H(X).
    const double conditional = joint_h - shannon(marginal);
    worst = std::max(worst, std::abs(mutual_information(j) - (shannon(marginal) - conditional)));
  }
  return {worst <= 1e-9, fmt("max |I - (H(m) - H(m|m'))| = %.2e", worst)};
}

Outcome gradient_checks() {
  EncoderConfig enc = EncoderConfig::tiny();
  enc.image_resolution = 16;
  enc.patch_size = 4;
  enc.image_layers = 1;
  enc.image_width = 8;
  enc.text_width = 8;
  enc.embed_dim = 16;
  enc.projection_dim = 32;
  enc.cluster_count = 4;
  Model<double> model(enc, tokenizer(), 3);
  SyntheticSpec spec;
  spec.image_size = 32;
  AugmentConfig aug;
  aug.global_size = 16;
  aug.local_size = 8;
  aug.local_views = 2;
  std::vector<SampleViews> batch;
  for (int i = 0; i < 3; ++i) {
    const auto s = render_synthetic_sample(spec, static_cast<std::size_t>(i));
    batch.push_back(build_sample_views({s.image, s.caption, "g"}, aug, 11 + static_cast<std::uint64_t>(i)));
  }
  const auto frozen = forward_batch<double>(model, batch, {}).global_targets;
  auto loss = [&](int which) {
    auto o = forward_batch<double>(model, batch, {}, &frozen);
    switch (which) {
      case 0: return o.vision;
      case 1: return o.cross;
      case 2: return o.cluster;
      default: return total_loss(o.vision, o.cross, o.cluster).total;
    }
  };
  const char* names[] = {"vision", "cross", "cluster", "total"};
  bool ok = true;
  std::ostringstream detail;
  auto& params = model.parameters();
  for (int which = 0; which < 4; ++which) {
    params.zero_grad();
    ad::backward(loss(which));
    long checked = 0, failed = 0;
    for (auto [name, var] : params.all()) {
      const Mat analytic = var.grad();
      Mat& value = var.mutable_value();
      for (Eigen::Index k = 0; k < value.size(); ++k) {
        const double old = value.data()[k];
        const double h = 1e-5;
        value.data()[k] = old + h;
        const double up = loss(which).item();
        value.data()[k] = old - h;
        const double down = loss(which).item();
        value.data()[k] = old;
        const double numeric = (up - down) / (2 * h);
        const double a = analytic.data()[k];
        const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-6});
        ++checked;
        if (rel >= 1e-4) ++failed;
      }
    }
    const double frac = 1.0 - static_cast<double>(failed) / static_cast<double>(checked);
    ok = ok && frac >= 0.99;
    detail << names[which] << " " << fmt("%.4f", frac) << (which < 3 ? ", " : "");
  }
  return {ok, "fraction within 1e-4: " + detail.str()};
}

Outcome closed_forms() {
  Mat one = Mat::Random(1, 8);
  const double b1 = cross_modal_loss(one, Mat::Random(1, 8), 0.07);
  Mat same = Mat::Constant(2, 4, 0.5);
  const double b2 = cross_modal_loss(same, same, 0.07);
  const double diag = mutual_information(Mat(Mat::Identity(20, 20) / 20.0));
  const double worked = mutual_information(Mat{{0.4, 0.1}, {0.1, 0.4}});
  const bool ok = std::abs(b1) <= 1e-12 && std::abs(b2 - std::log(2.0)) <= 1e-9 &&
                  std::abs(diag - std::log(20.0)) <= 1e-9 && std::abs(worked - 0.1927) <= 1e-3;
  return {ok, fmt("b=1 %.3g, b=2 %.10f, diag(1/20) %.10f, 2x2 %.5f", b1, b2, diag, worked)};
}

Outcome alignment_exactness() {
  bool ok = true;
  std::mt19937_64 rng(5);
  for (auto [h, w] : {std::pair{4, 4}, {3, 7}, {14, 14}}) {
    Mat grid(h * w, 6);
    for (Eigen::Index i = 0; i < grid.size(); ++i) grid.data()[i] = std::ldexp(static_cast<double>(rng() >> 11), -53);
    TransformRecord flip;
    flip.flip = true;
    const Mat once = invert_geometric(grid, h, w, flip);
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) ok = ok && once.row(i * w + j) == grid.row(i * w + (w - 1 - j));
    }
    ok = ok && invert_geometric(once, h, w, flip) == grid;
    ok = ok && invert_geometric(grid, h, w, TransformRecord::identity()) == grid;
  }
  return {ok, "flip permutation bit-exact, involution holds on 4x4, 3x7, 14x14"};
}

struct ToyData {
  SyntheticSpec train_spec;
  SyntheticSpec held_spec;
  std::vector<ImageCaptionPair> train;
  std::vector<SyntheticSample> held;
  std::vector<std::string> class_names;
};

ToyData toy_data() {
  ToyData d;
  d.train_spec.count = 300;
  d.train_spec.seed = 7;
  d.held_spec = d.train_spec;
  d.held_spec.count = 60;
  d.held_spec.seed = 8;
  for (int i = 0; i < d.train_spec.count; ++i) {
    auto s = render_synthetic_sample(d.train_spec, static_cast<std::size_t>(i));
    d.train.push_back({s.image, s.caption, std::to_string(i)});
  }
  for (int i = 0; i < d.held_spec.count; ++i) d.held.push_back(render_synthetic_sample(d.held_spec, static_cast<std::size_t>(i)));
  d.class_names = synthetic_class_names(d.train_spec);
  return d;
}

// Ground truth for the scored protocol: background pixels are ignored, so the
// score measures whether each object is named correctly. The vocabulary still
// offers "background" to the model.
std::vector<LabelImage> foreground_truth(const ToyData& d) {
  std::vector<LabelImage> out;
  for (const auto& s : d.held) {
    LabelImage gt = s.mask;
    for (auto& v : gt.data) {
      if (v == 0) v = kIgnoreLabel;
    }
    out.push_back(std::move(gt));
  }
  return out;
}

std::vector<int> shape_ids(const ToyData& d) {
  std::vector<int> ids;
  for (int c = 1; c < static_cast<int>(d.class_names.size()); ++c) ids.push_back(c);
  return ids;
}

double random_baseline(const ToyData& d) {
  std::mt19937_64 rng(123);
  std::vector<LabelImage> preds;
  for (const auto& s : d.held) {
    LabelImage r(s.mask.height, s.mask.width);
    for (auto& v : r.data) v = static_cast<std::uint8_t>(rng() % d.class_names.size());
    preds.push_back(std::move(r));
  }
  return evaluate(preds, foreground_truth(d), d.class_names, shape_ids(d)).mean_iou;
}

struct ToyRun {
  ToyData data;
  std::unique_ptr<Model<double>> model;
  std::vector<StepMetrics> history;
};

Outcome collapse_avoidance(ToyRun& run) {
  run.data = toy_data();
  EncoderConfig enc = EncoderConfig::toy();
  enc.cluster_count = kToyClusters;
  TrainConfig cfg = TrainConfig::toy();
  cfg.max_steps = kToySteps;
  run.model = std::make_unique<Model<double>>(enc, tokenizer(), 1);
  Trainer<double> trainer(*run.model, cfg, run.data.train);
  while (trainer.steps_done() < kCollapseSteps) run.history.push_back(trainer.step());
  double tail = 0;
  for (int i = kCollapseSteps - 50; i < kCollapseSteps; ++i) tail += run.history[static_cast<std::size_t>(i)].cluster_entropy;
  tail /= 50;
  const double final_h = run.history.back().cluster_entropy;
  const double threshold = 0.5 * std::log(static_cast<double>(kToyClusters));
  // Keep training for the segmentation criteria.
  while (trainer.steps_done() < trainer.total_steps()) run.history.push_back(trainer.step());
  return {final_h >= threshold && tail >= threshold,
          fmt("usage entropy at step 500 %.3f, mean of last 50 steps %.3f, threshold %.3f", final_h, tail, threshold)};
}

struct SegScores {
  double online = 0;
  double kmeans = 0;
  double online_all = 0;
  double kmeans_all = 0;
  double baseline = 0;
};

SegScores score_segmentation(const ToyRun& run) {
  const auto vocab = build_vocabulary(*run.model, run.data.class_names);
  std::vector<LabelImage> online, km, full_gt;
  for (const auto& s : run.data.held) {
    online.push_back(segment(s.image, vocab, *run.model).labels.to_label_image());
    SegmentOptions opts;
    opts.method = ClusteringMethod::kKMeans;
    opts.kmeans_clusters = kToyClusters;
    km.push_back(segment(s.image, vocab, *run.model, opts).labels.to_label_image());
    full_gt.push_back(s.mask);
  }
  const auto fg = foreground_truth(run.data);
  const auto shapes = shape_ids(run.data);
  SegScores out;
  out.online = evaluate(online, fg, run.data.class_names, shapes).mean_iou;
  out.kmeans = evaluate(km, fg, run.data.class_names, shapes).mean_iou;
  out.online_all = evaluate(online, full_gt, run.data.class_names).mean_iou;
  out.kmeans_all = evaluate(km, full_gt, run.data.class_names).mean_iou;
  out.baseline = random_baseline(run.data);
  return out;
}

Outcome toy_segmentation(const SegScores& s) {
  if (std::abs(s.baseline - kFrozenRandomMiou) > 1e-12) {
    return {false, fmt("random baseline %.17g differs from frozen %.17g", s.baseline, kFrozenRandomMiou)};
  }
  const double threshold = kBaselineMultiple * kFrozenRandomMiou;
  return {s.online >= threshold,
          fmt("held-out object mIoU %.4f vs threshold %.4f (random %.4f); all-class mIoU %.4f", s.online, threshold,
              kFrozenRandomMiou, s.online_all)};
}

Outcome ablation_direction(const SegScores& s) {
  return {s.online >= s.kmeans - kAblationSlack,
          fmt("online %.4f vs k-means %.4f (all-class: online %.4f, k-means %.4f)", s.online, s.kmeans, s.online_all,
              s.kmeans_all)};
}

Outcome metric_oracle() {
  std::mt19937_64 rng(99);
  const std::vector<std::string> names{"a", "b", "c", "d", "e"};
  int mismatches = 0;
  for (int t = 0; t < 100; ++t) {
    LabelImage pred(8, 8), gt(8, 8);
    for (auto& v : pred.data) v = static_cast<std::uint8_t>(rng() % names.size());
    for (auto& v : gt.data) v = static_cast<std::uint8_t>(rng() % names.size());
    const EvalReport r = evaluate({pred}, {gt}, names);
    double sum = 0;
    int present = 0;
    long correct = 0;
    for (std::size_t c = 0; c < names.size(); ++c) {
      long tp = 0, fp = 0, fn = 0;
      for (std::size_t p = 0; p < 64; ++p) {
        const bool in_gt = gt.data[p] == c;
        const bool in_pred = pred.data[p] == c;
        tp += in_gt && in_pred;
        fp += !in_gt && in_pred;
        fn += in_gt && !in_pred;
      }
      if (tp + fp + fn == 0) continue;
      sum += static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
      ++present;
    }
    for (std::size_t p = 0; p < 64; ++p) correct += pred.data[p] == gt.data[p];
    const double miou = sum / present;
    const double acc = static_cast<double>(correct) / 64.0;
    if (r.mean_iou != miou || r.pixel_accuracy != acc) ++mismatches;
  }
  return {mismatches == 0, std::to_string(mismatches) + " of 100 random 8x8 pairs differ from the brute-force count"};
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

Outcome determinism() {
  const fs::path root = fs::temp_directory_path() / "vilseg_acceptance_determinism";
  fs::remove_all(root);
  SyntheticSpec spec;
  spec.count = 40;
  const auto manifest = generate_synthetic_dataset(spec, root / "data");
  TrainConfig cfg = TrainConfig::toy();
  cfg.max_steps = 10;
  cfg.batch_size = 8;
  const EncoderConfig enc = EncoderConfig::tiny();
  const auto a = train<double>(manifest, enc, cfg, tokenizer(), root / "a");
  const auto b = train<double>(manifest, enc, cfg, tokenizer(), root / "b");
  const bool csv_same = read_bytes(a.metrics) == read_bytes(b.metrics);

  Model<double> original(enc, tokenizer(), 17);
  save_checkpoint(root / "rt.vsck", original);
  const Model<double> loaded = load_checkpoint<double>(root / "rt.vsck");
  const Image img = resize_bilinear(render_synthetic_sample(spec, 3).image, 32, 32);
  const auto f1 = original.encode_image(img);
  const auto f2 = loaded.encode_image(img);
  const bool forward_same = f1.global.value() == f2.global.value() && f1.pixels.value() == f2.pixels.value() &&
                            original.encode_text("a photo of a red circle").value() ==
                                loaded.encode_text("a photo of a red circle").value() &&
                            original.cluster_posteriors(f1.pixels).value() == loaded.cluster_posteriors(f2.pixels).value();
  fs::remove_all(root);
  return {csv_same && forward_same, std::string("metrics CSVs ") + (csv_same ? "identical" : "differ") +
                                        ", checkpoint forward " + (forward_same ? "bit-exact" : "differs")};
}

}  // namespace

int main(int argc, char** argv) {
  if (argc > 1 && std::string(argv[1]) == "--print-baseline") {
    std::printf("%.17g\n", random_baseline(toy_data()));
    return 0;
  }
  std::printf("acceptance: 10 criteria\n");
  auto t = Clock::now();
  report(1, "MI oracle equivalence", mi_oracle(), t);
  t = Clock::now();
  report(2, "entropy decomposition", entropy_decomposition(), t);
  t = Clock::now();
  report(3, "gradient checks", gradient_checks(), t);
  t = Clock::now();
  report(4, "closed-form loss values", closed_forms(), t);
  t = Clock::now();
  report(5, "alignment exactness", alignment_exactness(), t);

  t = Clock::now();
  ToyRun run;
  report(6, "collapse avoidance", collapse_avoidance(run), t);
  t = Clock::now();
  const SegScores scores = score_segmentation(run);
  report(7, "toy segmentation vs random", toy_segmentation(scores), t);
  t = Clock::now();
  report(8, "online head vs k-means", ablation_direction(scores), t);

  t = Clock::now();
  report(9, "metric oracle", metric_oracle(), t);
  t = Clock::now();
  report(10, "determinism", determinism(), t);

  std::printf("%d of 10 criteria failed\n", failures);
  return failures == 0 ? 0 : 1;
}
