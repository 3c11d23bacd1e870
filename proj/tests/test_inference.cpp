#include "support.hpp"

using namespace vilseg;
using vstest::Mat;

namespace {

PixelEmbeddingMap map_from(const Mat& grid, int h, int w) {
  PixelEmbeddingMap m;
  m.grid = grid;
  m.height = h;
  m.width = w;
  m.global_feature = grid.colwise().mean().transpose();
  return m;
}

ClassVocabulary vocab_from(std::vector<std::string> names, const Mat& embeddings) {
  ClassVocabulary v;
  v.names = std::move(names);
  v.embeddings = embeddings;
  return v;
}

LabelImage labels(int h, int w, std::initializer_list<int> values) {
  LabelImage out(h, w);
  std::size_t i = 0;
  for (int v : values) out.data[i++] = static_cast<std::uint8_t>(v);
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// Cluster masks and region pooling

TEST(ClusterMask, ArgmaxWithLowestIndexTieBreak) {
  ClusterPosterior post{Mat{{0.2, 0.5, 0.3}, {0.4, 0.4, 0.2}, {0.1, 0.45, 0.45}, {0.0, 0.0, 1.0}}, 2, 2};
  const SegmentationMask m = cluster_mask(post);
  EXPECT_EQ(m.ids, (std::vector<int>{1, 0, 1, 2}));
  post.height = 3;
  EXPECT_THROW(cluster_mask(post), InputError);
}

TEST(RegionPool, AveragesMemberPixels) {
  const auto map = map_from(Mat{{1, 0}, {3, 2}, {5, 4}, {0, 9}}, 2, 2);
  SegmentationMask mask(2, 2);
  mask.ids = {0, 0, 1, 0};
  EXPECT_EQ(region_pool(map, mask, 0), (Eigen::VectorXd(2) << 4.0 / 3, 11.0 / 3).finished());
  EXPECT_EQ(region_pool(map, mask, 1), (Eigen::VectorXd(2) << 5, 4).finished());
}

TEST(RegionPool, AbsentClusterIsReported) {
  const auto map = map_from(Mat::Ones(4, 2), 2, 2);
  SegmentationMask mask(2, 2);
  try {
    region_pool(map, mask, 3);
    FAIL() << "expected RegionAbsent";
  } catch (const RegionAbsent& e) {
    EXPECT_EQ(e.cluster(), 3);
  }
  EXPECT_THROW(region_pool(map, SegmentationMask(1, 4), 0), InputError);
}

// ---------------------------------------------------------------------------
// Region classification

TEST(ClassifyRegions, PicksMostSimilarClass) {
  const auto map = map_from(Mat{{1, 0}, {0.9, 0.1}, {0, 1}, {0.1, 0.8}}, 2, 2);
  SegmentationMask clusters(2, 2);
  clusters.ids = {0, 0, 1, 1};
  const auto vocab = vocab_from({"background", "cat"}, Mat{{1, 0}, {0, 1}});
  const auto out = classify_regions(map, clusters, vocab);
  EXPECT_EQ(out.labels.ids, (std::vector<int>{0, 0, 1, 1}));
  ASSERT_EQ(out.regions.size(), 2u);
  EXPECT_EQ(out.regions[1].pixels, 2);
}

TEST(ClassifyRegions, TiesGoToTheLowestClass) {
  const auto map = map_from(Mat{{1, 1}}, 1, 1);
  SegmentationMask clusters(1, 1);
  const auto vocab = vocab_from({"a", "b"}, Mat{{1, 0}, {0, 1}});
  EXPECT_EQ(classify_regions(map, clusters, vocab).labels.ids[0], 0);
}

TEST(ClassifyRegions, InvariantToPositiveRescaling) {
  const Mat grid = vstest::random_matrix(9, 4, 1);
  SegmentationMask clusters(3, 3);
  clusters.ids = {0, 1, 2, 0, 1, 2, 3, 3, 3};
  const Mat text = vstest::random_matrix(5, 4, 2);
  const auto base = classify_regions(map_from(grid, 3, 3), clusters, vocab_from({"a", "b", "c", "d", "e"}, text));
  Mat scaled_text = text;
  scaled_text.row(1) *= 40;
  scaled_text.row(3) *= 0.02;
  const auto scaled = classify_regions(map_from(grid * 7.5, 3, 3), clusters, vocab_from({"a", "b", "c", "d", "e"}, scaled_text));
  EXPECT_EQ(base.labels, scaled.labels);
}

TEST(ClassifyRegions, DimensionMismatchIsRejected) {
  const auto map = map_from(Mat::Ones(4, 3), 2, 2);
  EXPECT_THROW(classify_regions(map, SegmentationMask(2, 2), vocab_from({"a"}, Mat::Ones(1, 2))), InputError);
  EXPECT_THROW(classify_regions(map, SegmentationMask(2, 2), ClassVocabulary{}), InputError);
}

TEST(Vocabulary, PromptsAndValidation) {
  Model<double> model(vstest::micro_config(), vstest::shipped_tokenizer(), 1);
  const auto vocab = build_vocabulary(model, {"background", " cat "});
  EXPECT_EQ(vocab.names[1], "cat");
  EXPECT_EQ(vocab.prompt("cat"), "a photo of a cat");
  EXPECT_EQ(vocab.embeddings.rows(), 2);
  EXPECT_EQ(vocab.embeddings.row(1).transpose(), encode_text(model, "a photo of a cat").feature);
  EXPECT_THROW(build_vocabulary(model, {}), InputError);
  EXPECT_THROW(build_vocabulary(model, {"cat", "cat"}), InputError);
  EXPECT_THROW(build_vocabulary(model, {"cat", " "}), InputError);
}

// ---------------------------------------------------------------------------
// Upsampling and region merging

TEST(Upsample, NearestNeighbourBlocks) {
  SegmentationMask m(2, 2);
  m.ids = {0, 1, 2, 3};
  const auto up = upsample_nearest(m, 4, 4);
  EXPECT_EQ(up.ids, (std::vector<int>{0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3}));
}

TEST(MergeSmallRegions, OffByDefaultAndMergesIntoDominantNeighbour) {
  SegmentationMask m(3, 3);
  m.ids = {0, 0, 0, 0, 2, 1, 0, 1, 1};
  EXPECT_EQ(merge_small_regions(m, 1), m);
  const auto merged = merge_small_regions(m, 2);
  EXPECT_EQ(merged.ids, (std::vector<int>{0, 0, 0, 0, 0, 1, 0, 1, 1}));
}

// ---------------------------------------------------------------------------
// K-means

TEST(KMeans, SingleClusterIsTheWholeGrid) {
  const auto r = kmeans(vstest::random_matrix(16, 3, 1), 4, 4, 1, 0);
  EXPECT_TRUE(std::all_of(r.mask.ids.begin(), r.mask.ids.end(), [](int v) { return v == 0; }));
}

TEST(KMeans, SeparatesTwoClouds) {
  Mat points(20, 2);
  std::mt19937_64 rng(4);
  std::normal_distribution<double> noise(0.0, 0.05);
  for (int i = 0; i < 20; ++i) {
    const double cx = i < 10 ? -5.0 : 5.0;
    points(i, 0) = cx + noise(rng);
    points(i, 1) = noise(rng);
  }
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto r = kmeans(points, 4, 5, 2, seed);
    for (int i = 1; i < 10; ++i) EXPECT_EQ(r.mask.ids[static_cast<std::size_t>(i)], r.mask.ids[0]);
    for (int i = 11; i < 20; ++i) EXPECT_EQ(r.mask.ids[static_cast<std::size_t>(i)], r.mask.ids[10]);
    EXPECT_NE(r.mask.ids[0], r.mask.ids[10]);
  }
}

TEST(KMeans, ObjectiveNeverIncreases) {
  const Mat points = vstest::random_matrix(64, 5, 9);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto r = kmeans(points, 8, 8, 6, seed);
    for (std::size_t i = 1; i < r.objective_trace.size(); ++i) {
      EXPECT_LE(r.objective_trace[i], r.objective_trace[i - 1] + 1e-12);
    }
    EXPECT_LE(r.iterations, 100);
  }
}

TEST(KMeans, DeterministicAndDegenerateCases) {
  const Mat points = vstest::random_matrix(16, 3, 2);
  EXPECT_EQ(kmeans(points, 4, 4, 3, 7).mask, kmeans(points, 4, 4, 3, 7).mask);
  const auto same = kmeans(Mat::Constant(9, 2, 0.3), 3, 3, 3, 1);
  for (int id : same.mask.ids) EXPECT_EQ(id, 0);
  EXPECT_THROW(kmeans(points, 4, 4, 17, 0), InputError);
  EXPECT_THROW(kmeans(points, 4, 4, 0, 0), InputError);
}

// ---------------------------------------------------------------------------
// Evaluation

TEST(Evaluate, WorkedExample) {
  // Class 1 covers 8 ground-truth pixels and 8 predicted pixels, 4 shared.
  const auto gt = labels(4, 4, {1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0});
  const auto pred = labels(4, 4, {0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0, 0});
  const auto r = evaluate({pred}, {gt}, {"background", "thing"});
  EXPECT_DOUBLE_EQ(*r.iou[1], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(*r.iou[0], 1.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.pixel_accuracy, 0.5);
  const auto disjoint = evaluate({labels(1, 2, {0, 0})}, {labels(1, 2, {1, 1})}, {"a", "b"});
  EXPECT_EQ(*disjoint.iou[1], 0.0);
}

TEST(Evaluate, PerfectPredictionAndMissingClasses) {
  const auto gt = labels(2, 2, {0, 1, 1, 0});
  std::vector<std::string> warnings;
  log::ScopedSink sink([&](const std::string& w) { warnings.push_back(w); });
  const auto r = evaluate({gt}, {gt}, {"a", "b", "c"});
  EXPECT_EQ(r.mean_iou, 1.0);
  EXPECT_EQ(r.pixel_accuracy, 1.0);
  EXPECT_FALSE(r.iou[2].has_value());
  EXPECT_EQ(r.evaluated, (std::vector<int>{0, 1}));
  EXPECT_EQ(warnings.size(), 1u);
}

TEST(Evaluate, IgnoreLabelAndSubset) {
  const auto gt = labels(1, 4, {0, 1, 255, 2});
  const auto pred = labels(1, 4, {0, 2, 2, 2});
  const auto r = evaluate({pred}, {gt}, {"a", "b", "c"}, {1, 2});
  EXPECT_EQ(r.evaluated, (std::vector<int>{1, 2}));
  EXPECT_DOUBLE_EQ(r.mean_iou, 0.25);
  EXPECT_DOUBLE_EQ(r.pixel_accuracy, 2.0 / 3.0);
}

TEST(Evaluate, SymmetricUnderConsistentRelabeling) {
  std::mt19937_64 rng(3);
  LabelImage gt(8, 8), pred(8, 8);
  for (auto& v : gt.data) v = static_cast<std::uint8_t>(rng() % 4);
  for (auto& v : pred.data) v = static_cast<std::uint8_t>(rng() % 4);
  const std::vector<std::uint8_t> perm{2, 0, 3, 1};
  LabelImage gt2 = gt, pred2 = pred;
  for (auto& v : gt2.data) v = perm[v];
  for (auto& v : pred2.data) v = perm[v];
  const auto a = evaluate({pred}, {gt}, {"a", "b", "c", "d"});
  const auto b = evaluate({pred2}, {gt2}, {"a", "b", "c", "d"});
  EXPECT_NEAR(a.mean_iou, b.mean_iou, 1e-15);
  EXPECT_EQ(a.pixel_accuracy, b.pixel_accuracy);
}

TEST(Evaluate, MatchesBruteForceConfusion) {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 100; ++t) {
    LabelImage gt(8, 8), pred(8, 8);
    for (auto& v : gt.data) v = static_cast<std::uint8_t>(rng() % 3);
    for (auto& v : pred.data) v = static_cast<std::uint8_t>(rng() % 3);
    const auto r = evaluate({pred}, {gt}, {"a", "b", "c"});
    for (int c = 0; c < 3; ++c) {
      long tp = 0, fp = 0, fn = 0;
      for (std::size_t p = 0; p < 64; ++p) {
        tp += gt.data[p] == c && pred.data[p] == c;
        fp += gt.data[p] != c && pred.data[p] == c;
        fn += gt.data[p] == c && pred.data[p] != c;
      }
      if (tp + fp + fn) EXPECT_EQ(*r.iou[static_cast<std::size_t>(c)], static_cast<double>(tp) / (tp + fp + fn));
    }
  }
}

TEST(Evaluate, ErrorCases) {
  const auto a = labels(2, 2, {0, 0, 0, 0});
  try {
    evaluate({a, a}, {a, LabelImage(3, 2)}, {"x"});
    FAIL() << "expected a validation error";
  } catch (const ValidationError& e) {
    EXPECT_EQ(e.items(), (std::vector<std::string>{"1"}));
  }
  EXPECT_THROW(evaluate({a}, {a, a}, {"x"}), InputError);
  EXPECT_THROW(evaluate({labels(1, 1, {4})}, {labels(1, 1, {0})}, {"x"}), InputError);
  EXPECT_THROW(class_ids({"x", "y"}, {"z"}), InputError);
  EXPECT_EQ(class_ids({"x", "y"}, {"y"}), (std::vector<int>{1}));
}

// ---------------------------------------------------------------------------
// End to end

TEST(Segment, OutputMatchesInputSizeAndIsDeterministic) {
  Model<double> model(vstest::micro_config(), vstest::shipped_tokenizer(), 1);
  const auto vocab = build_vocabulary(model, {"background", "circle", "square"});
  const Image img = vstest::random_image(40, 40, 5);
  const auto a = segment(img, vocab, model);
  const auto b = segment(img, vocab, model);
  EXPECT_EQ(a.labels.height, 40);
  EXPECT_EQ(a.labels.width, 40);
  EXPECT_EQ(a.labels, b.labels);
  EXPECT_EQ(a.clusters.height, 4);
  for (int id : a.labels.ids) EXPECT_TRUE(id >= 0 && id < 3);
  SegmentOptions km;
  km.method = ClusteringMethod::kKMeans;
  km.kmeans_clusters = 3;
  const auto c = segment(img, vocab, model, km);
  EXPECT_LE(*std::max_element(c.clusters.ids.begin(), c.clusters.ids.end()), 2);
}
