// vilseg: dataset generation, training, segmentation, evaluation and the
// cluster-count sweep. Exit codes: 0 success, 1 runtime failure, 2 usage or
// configuration error.

#include <CLI11.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vilseg/vilseg.hpp"

namespace fs = std::filesystem;
using namespace vilseg;

namespace {

struct ModelOptions {
  std::string preset = "tiny";
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  std::optional<int> clusters;
  std::optional<int> steps;
  std::optional<int> epochs;
  std::optional<int> batch_size;
  std::optional<double> lr;
};

void add_model_options(CLI::App* cmd, ModelOptions& o, bool cluster_flag = true) {
  cmd->add_option("--preset", o.preset, "Base configuration")->check(CLI::IsMember({"tiny", "toy", "paper"}))->capture_default_str();
  cmd->add_option("--config", o.config_path, "Flat key = value config file applied on top of the preset");
  cmd->add_option("--set", o.overrides, "Extra key=value override (repeatable)");
  cmd->add_option("--seed", o.seed, "Training seed");
  if (cluster_flag) cmd->add_option("--clusters", o.clusters, "Cluster count C");
  cmd->add_option("--steps", o.steps, "Number of optimization steps (overrides epochs)");
  cmd->add_option("--epochs", o.epochs, "Number of epochs");
  cmd->add_option("--batch-size", o.batch_size, "Batch size");
  cmd->add_option("--lr", o.lr, "Peak learning rate");
}

std::pair<EncoderConfig, TrainConfig> resolve_configs(const ModelOptions& o) {
  EncoderConfig enc;
  TrainConfig train;
  if (o.preset == "tiny") enc = EncoderConfig::tiny();
  if (o.preset == "toy") enc = EncoderConfig::toy();
  if (o.preset != "paper") train = TrainConfig::toy();
  if (!o.config_path.empty()) apply_config(load_config_file(o.config_path), enc, train);
  ConfigMap extra;
  for (const auto& kv : o.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
    extra[trim(kv.substr(0, eq))] = trim(kv.substr(eq + 1));
  }
  apply_config(extra, enc, train);
  if (o.seed) train.seed = *o.seed;
  if (o.clusters) enc.cluster_count = *o.clusters;
  if (o.steps) train.max_steps = *o.steps;
  if (o.epochs) train.epochs = *o.epochs;
  if (o.batch_size) train.batch_size = *o.batch_size;
  if (o.lr) train.peak_lr = *o.lr;
  train.augment.global_size = enc.image_resolution;
  enc.validate();
  train.validate();
  return {enc, train};
}

int worker_count() {
  const char* env = std::getenv("VILSEG_NUM_WORKERS");
  if (!env || !*env) return 1;
  try {
    std::size_t used = 0;
    const int n = std::stoi(env, &used);
    if (used != std::string(env).size() || n < 1) throw std::invalid_argument(env);
    return n;
  } catch (const std::exception&) {
    throw ConfigError(std::string("VILSEG_NUM_WORKERS must be a positive integer, got '") + env + "'");
  }
}

// Manifest problems are the caller's input, so they surface as configuration errors.
DatasetManifest open_manifest(const fs::path& path) {
  try {
    return load_manifest(path);
  } catch (const ValidationError& e) {
    std::string msg = e.what();
    for (const auto& item : e.items()) msg += "\n  " + item;
    throw ConfigError(msg);
  } catch (const IoError& e) {
    throw ConfigError(e.what());
  } catch (const ParseError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  for (auto& item : split(text, ',')) {
    auto t = trim(item);
    if (!t.empty()) out.push_back(std::move(t));
  }
  return out;
}

std::vector<fs::path> png_files(const fs::path& dir) {
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".png") files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());
  return files;
}

Image overlay(const Image& image, const LabelImage& labels) {
  Image out = image;
  const auto& colors = plot::palette();
  for (int y = 0; y < out.height; ++y) {
    for (int x = 0; x < out.width; ++x) {
      const auto& c = colors[labels.at(y, x) % colors.size()];
      for (int k = 0; k < 3; ++k) out.at(y, x, k) = 0.55f * out.at(y, x, k) + 0.45f * c[k];
    }
  }
  return out;
}

// Mean cluster posterior over a set of images, i.e. how often each cluster is used.
Eigen::VectorXd cluster_usage(const Model<double>& model, const std::vector<ImageCaptionPair>& pairs) {
  const int res = model.config().image_resolution;
  Eigen::VectorXd usage = Eigen::VectorXd::Zero(model.config().cluster_count);
  for (const auto& p : pairs) {
    const Image input = resize_bilinear(p.image, res, res);
    usage += cluster_posteriors(model, encode_image(model, input)).probs.colwise().mean().transpose();
  }
  if (!pairs.empty()) usage /= static_cast<double>(pairs.size());
  return usage;
}

void write_training_plots(const fs::path& out, const std::vector<StepMetrics>& history) {
  std::vector<std::vector<double>> series(4);
  for (const auto& m : history) {
    series[0].push_back(m.total);
    series[1].push_back(m.l_vision);
    series[2].push_back(m.l_cross);
    series[3].push_back(m.l_cluster);
  }
  write_png(out / "loss_curve.png", plot::line_chart(series));
}

// Segments every held-out image and scores it against its ground-truth mask.
EvalReport evaluate_on_manifest(const Model<double>& model, const DatasetManifest& manifest,
                                const std::vector<std::string>& class_names, const SegmentOptions& opts) {
  const auto vocab = build_vocabulary(model, class_names);
  std::vector<LabelImage> preds, gts;
  for (const auto& entry : manifest.entries) {
    const Image image = read_png(manifest.resolve(entry));
    preds.push_back(segment(image, vocab, model, opts).labels.to_label_image());
    gts.push_back(read_label_png(mask_path_for(manifest, entry)));
  }
  return evaluate(preds, gts, class_names);
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
  fs::path out;
  SyntheticSpec spec;
  std::string shapes = "circle,square,triangle";
  std::string colors = "red,green,blue";
};

int run_generate(GenerateArgs& a) {
  a.spec.shapes = split_list(a.shapes);
  a.spec.colors = split_list(a.colors);
  try {
    validate(a.spec);
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
  const auto manifest = generate_synthetic_dataset(a.spec, a.out);
  std::cout << "wrote " << manifest.entries.size() << " samples to " << a.out.string() << '\n';
  return 0;
}

struct TrainArgs {
  fs::path manifest;
  fs::path out;
  ModelOptions model;
  bool quiet = false;
};

int run_train(TrainArgs& a) {
  auto [enc, cfg] = resolve_configs(a.model);
  const int workers = worker_count();
  const auto manifest = open_manifest(a.manifest);
  if (manifest.entries.empty()) throw ConfigError("manifest has no entries: " + a.manifest.string());
  const auto tokenizer = Tokenizer::from_file(fs::path(VILSEG_DATA_DIR) / "bpe_merges.txt");
  auto on_step = [&](const StepMetrics& m) {
    if (!a.quiet && (m.step % 50 == 0)) {
      std::cout << "step " << m.step << "  total " << std::setprecision(5) << m.total << "  cluster entropy "
                << m.cluster_entropy << '\n';
    }
  };
  const auto result = train<double>(manifest, enc, cfg, tokenizer, a.out, on_step, workers);
  write_training_plots(a.out, result.history);

  const auto model = load_checkpoint<double>(result.checkpoint);
  const Eigen::VectorXd usage = cluster_usage(model, load_pairs(manifest, workers));
  std::ofstream csv(a.out / "cluster_usage.csv", std::ios::binary);
  csv << "cluster,usage\n";
  for (Eigen::Index c = 0; c < usage.size(); ++c) csv << c << ',' << std::setprecision(10) << usage(c) << '\n';
  write_png(a.out / "cluster_usage.png", plot::bar_chart({usage.data(), usage.data() + usage.size()}));
  std::cout << "checkpoint: " << result.checkpoint.string() << "\nmetrics: " << result.metrics.string() << '\n';
  return 0;
}

struct SegmentArgs {
  fs::path checkpoint;
  fs::path input;
  fs::path out;
  std::string classes;
  std::string classes_file;
  std::string method = "online";
  std::string prompt = "a photo of a {}";
  std::uint64_t seed = 0;
  long min_region = 1;
  bool no_background = false;
};

int run_segment(SegmentArgs& a) {
  std::vector<std::string> names =
      a.classes_file.empty() ? split_list(a.classes) : read_class_names(a.classes_file);
  if (names.empty()) throw ConfigError("no classes given (use --classes or --classes-file)");
  if (!a.no_background && std::find(names.begin(), names.end(), "background") == names.end()) {
    names.insert(names.begin(), "background");
  }
  if (!fs::exists(a.input)) throw ConfigError("input does not exist: " + a.input.string());
  std::vector<fs::path> inputs = fs::is_directory(a.input) ? png_files(a.input) : std::vector<fs::path>{a.input};
  if (inputs.empty()) throw ConfigError("no PNG images found in " + a.input.string());

  const auto model = load_checkpoint<double>(a.checkpoint);
  ClassVocabulary vocab;
  try {
    vocab = build_vocabulary(model, names, a.prompt);
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
  SegmentOptions opts;
  opts.method = a.method == "kmeans" ? ClusteringMethod::kKMeans : ClusteringMethod::kOnlineHead;
  opts.seed = a.seed;
  opts.min_region_pixels = a.min_region;

  fs::create_directories(a.out / "masks");
  fs::create_directories(a.out / "overlays");
  write_class_names(a.out / "masks" / "classes.txt", vocab.names);
  for (const auto& path : inputs) {
    const Image image = read_png(path);
    const auto result = segment(image, vocab, model, opts);
    const LabelImage labels = result.labels.to_label_image();
    write_png(a.out / "masks" / path.filename(), labels);
    write_png(a.out / "overlays" / path.filename(), overlay(image, labels));
  }
  std::cout << "segmented " << inputs.size() << " image(s) into " << (a.out / "masks").string() << '\n';
  return 0;
}

struct EvaluateArgs {
  fs::path pred;
  fs::path gt;
  fs::path out;
  std::string class_names;
  std::string subset;
};

int run_evaluate(EvaluateArgs& a) {
  for (const auto& dir : {a.pred, a.gt}) {
    if (!fs::is_directory(dir)) throw ConfigError("not a directory: " + dir.string());
  }
  fs::path names_path = a.class_names;
  if (names_path.empty()) {
    for (const auto& candidate : {a.pred / "classes.txt", a.gt / "classes.txt", a.gt.parent_path() / "classes.txt"}) {
      if (fs::is_regular_file(candidate)) {
        names_path = candidate;
        break;
      }
    }
  }
  if (names_path.empty()) throw ConfigError("class names not found; pass --class-names");
  const auto names = read_class_names(names_path);

  std::vector<LabelImage> preds, gts;
  std::vector<std::string> problems;
  for (const auto& pred_path : png_files(a.pred)) {
    const fs::path gt_path = a.gt / pred_path.filename();
    if (!fs::is_regular_file(gt_path)) {
      problems.push_back(pred_path.filename().string() + ": no ground truth");
      continue;
    }
    LabelImage p = read_label_png(pred_path);
    LabelImage g = read_label_png(gt_path);
    if (p.height != g.height || p.width != g.width) {
      problems.push_back(pred_path.filename().string() + ": prediction " + std::to_string(p.height) + "x" +
                         std::to_string(p.width) + " vs ground truth " + std::to_string(g.height) + "x" +
                         std::to_string(g.width));
      continue;
    }
    preds.push_back(std::move(p));
    gts.push_back(std::move(g));
  }
  for (const auto& gt_path : png_files(a.gt)) {
    if (!fs::is_regular_file(a.pred / gt_path.filename())) problems.push_back(gt_path.filename().string() + ": no prediction");
  }
  if (!problems.empty()) {
    std::cerr << "error: " << problems.size() << " prediction file(s) could not be evaluated\n";
    for (const auto& p : problems) std::cerr << "  " << p << '\n';
    return 1;
  }
  if (preds.empty()) throw ConfigError("no prediction PNGs in " + a.pred.string());

  std::vector<int> subset;
  try {
    subset = class_ids(names, split_list(a.subset));
  } catch (const InputError& e) {
    throw ConfigError(e.what());
  }
  const auto report = evaluate(preds, gts, names, subset);
  print_report(std::cout, report);
  const fs::path out = a.out.empty() ? fs::path("eval_report.csv") : a.out;
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  write_report_csv(out, report);
  return 0;
}

struct SweepArgs {
  fs::path manifest;
  fs::path eval_manifest;
  fs::path out;
  std::string clusters = "5,10,15,20,25,35";
  std::string method = "online";
  ModelOptions model;
};

int run_sweep(SweepArgs& a) {
  std::vector<int> values;
  for (const auto& item : split_list(a.clusters)) {
    try {
      values.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw ConfigError("bad cluster count: " + item);
    }
    if (values.back() < 2) throw ConfigError("cluster counts must be >= 2");
  }
  if (values.empty()) throw ConfigError("empty cluster list");
  auto [enc, cfg] = resolve_configs(a.model);
  const int workers = worker_count();
  const auto manifest = open_manifest(a.manifest);
  const auto held_out = a.eval_manifest.empty() ? manifest : open_manifest(a.eval_manifest);
  const fs::path names_path = held_out.base_dir / "classes.txt";
  if (!fs::is_regular_file(names_path)) throw ConfigError("missing " + names_path.string());
  const auto names = read_class_names(names_path);
  const auto tokenizer = Tokenizer::from_file(fs::path(VILSEG_DATA_DIR) / "bpe_merges.txt");
  SegmentOptions opts;
  opts.method = a.method == "kmeans" ? ClusteringMethod::kKMeans : ClusteringMethod::kOnlineHead;

  fs::create_directories(a.out);
  std::ofstream table(a.out / "sweep.csv", std::ios::binary);
  table << "clusters,mean_iou,pixel_accuracy\n";
  std::vector<double> xs, miou;
  std::cout << "clusters  mIoU    pixel acc.\n";
  for (int c : values) {
    EncoderConfig e = enc;
    e.cluster_count = c;
    const auto run = train<double>(manifest, e, cfg, tokenizer, a.out / ("c" + std::to_string(c)), {}, workers);
    const auto model = load_checkpoint<double>(run.checkpoint);
    const auto report = evaluate_on_manifest(model, held_out, names, opts);
    table << c << ',' << std::setprecision(10) << report.mean_iou << ',' << report.pixel_accuracy << '\n';
    std::cout << std::left << std::setw(10) << c << std::fixed << std::setprecision(4) << std::setw(8)
              << report.mean_iou << report.pixel_accuracy << '\n';
    std::cout.unsetf(std::ios::fixed);
    xs.push_back(c);
    miou.push_back(report.mean_iou);
  }
  write_png(a.out / "sweep.png", plot::line_chart({miou}, xs));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Open-vocabulary segmentation from image-caption pairs"};
  app.require_subcommand(1);

  GenerateArgs gen;
  auto* gen_cmd = app.add_subcommand("generate-data", "Render the synthetic shapes dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--count", gen.spec.count, "Number of samples")->capture_default_str();
  gen_cmd->add_option("--seed", gen.spec.seed, "Generation seed")->capture_default_str();
  gen_cmd->add_option("--image-size", gen.spec.image_size, "Image side in pixels")->capture_default_str();
  gen_cmd->add_option("--shapes", gen.shapes, "Comma-separated shape vocabulary")->capture_default_str();
  gen_cmd->add_option("--colors", gen.colors, "Comma-separated color vocabulary")->capture_default_str();
  gen_cmd->add_option("--min-area", gen.spec.min_area, "Minimum shape area fraction")->capture_default_str();
  gen_cmd->add_option("--max-area", gen.spec.max_area, "Maximum shape area fraction")->capture_default_str();

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a model on an image-caption manifest");
  train_cmd->add_option("--manifest", tr.manifest, "Manifest (TSV)")->required();
  train_cmd->add_option("--out", tr.out, "Output directory")->required();
  train_cmd->add_flag("--quiet", tr.quiet, "Suppress progress lines");
  add_model_options(train_cmd, tr.model);

  SegmentArgs seg;
  auto* seg_cmd = app.add_subcommand("segment", "Segment images with a trained checkpoint");
  seg_cmd->add_option("--checkpoint", seg.checkpoint, "Checkpoint file")->required();
  seg_cmd->add_option("--input", seg.input, "PNG image or directory of PNGs")->required();
  seg_cmd->add_option("--out", seg.out, "Output directory")->required();
  seg_cmd->add_option("--classes", seg.classes, "Comma-separated class names");
  seg_cmd->add_option("--classes-file", seg.classes_file, "File with one class name per line");
  seg_cmd->add_option("--method", seg.method, "Clustering method")->check(CLI::IsMember({"online", "kmeans"}))->capture_default_str();
  seg_cmd->add_option("--prompt", seg.prompt, "Prompt template; {} is replaced by the class name")->capture_default_str();
  seg_cmd->add_option("--seed", seg.seed, "k-means seed")->capture_default_str();
  seg_cmd->add_option("--min-region", seg.min_region, "Merge cluster regions smaller than this many cells")->capture_default_str();
  seg_cmd->add_flag("--no-background", seg.no_background, "Do not add the background class");

  EvaluateArgs ev;
  auto* eval_cmd = app.add_subcommand("evaluate", "Score predicted masks against ground truth");
  eval_cmd->add_option("--pred", ev.pred, "Directory of predicted mask PNGs")->required();
  eval_cmd->add_option("--gt", ev.gt, "Directory of ground-truth mask PNGs")->required();
  eval_cmd->add_option("--out", ev.out, "Report CSV path")->capture_default_str();
  eval_cmd->add_option("--class-names", ev.class_names, "Class names file (default: classes.txt next to the masks)");
  eval_cmd->add_option("--classes", ev.subset, "Comma-separated subset to average over (default: all)");

  SweepArgs sw;
  auto* sweep_cmd = app.add_subcommand("sweep-clusters", "Train and evaluate over several cluster counts");
  sweep_cmd->add_option("--manifest", sw.manifest, "Training manifest")->required();
  sweep_cmd->add_option("--eval-manifest", sw.eval_manifest, "Held-out manifest with masks/ (default: training set)");
  sweep_cmd->add_option("--out", sw.out, "Output directory")->required();
  sweep_cmd->add_option("--clusters", sw.clusters, "Comma-separated cluster counts")->capture_default_str();
  sweep_cmd->add_option("--method", sw.method, "Clustering method")->check(CLI::IsMember({"online", "kmeans"}))->capture_default_str();
  add_model_options(sweep_cmd, sw.model, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    if (*gen_cmd) return run_generate(gen);
    if (*train_cmd) return run_train(tr);
    if (*seg_cmd) return run_segment(seg);
    if (*eval_cmd) return run_evaluate(ev);
    if (*sweep_cmd) return run_sweep(sw);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    for (const auto& item : e.items()) std::cerr << "  " << item << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
