#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "vilseg/errors.hpp"
#include "vilseg/image.hpp"

namespace vilseg {

inline constexpr std::uint8_t kIgnoreLabel = 255;

struct EvalReport {
  std::vector<std::string> class_names;
  std::vector<std::optional<double>> iou;  // per class; empty when undefined
  std::vector<int> evaluated;              // class ids averaged into mean_iou
  double mean_iou = 0;
  double pixel_accuracy = 0;
  std::vector<std::vector<std::uint64_t>> confusion;  // [gt][pred]
};

/// Accumulates a confusion matrix over all pairs (gt 255 ignored). IoU is
/// TP/(TP+FP+FN) per class; mean_iou averages over `subset` (all classes when
/// empty), skipping classes absent from both prediction and ground truth.
inline EvalReport evaluate(const std::vector<LabelImage>& predictions, const std::vector<LabelImage>& ground_truths,
                           const std::vector<std::string>& class_names, const std::vector<int>& subset = {}) {
  if (predictions.size() != ground_truths.size()) throw InputError("evaluate: prediction/ground-truth count mismatch");
  if (class_names.empty()) throw InputError("evaluate: no classes");
  const std::size_t k = class_names.size();
  EvalReport report;
  report.class_names = class_names;
  report.confusion.assign(k, std::vector<std::uint64_t>(k, 0));
  std::vector<std::string> mismatched;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    if (predictions[i].height != ground_truths[i].height || predictions[i].width != ground_truths[i].width) {
      mismatched.push_back(std::to_string(i));
    }
  }
  if (!mismatched.empty()) throw ValidationError("prediction/ground-truth shape mismatch", std::move(mismatched));

  std::uint64_t correct = 0;
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    const auto& pred = predictions[i].data;
    const auto& gt = ground_truths[i].data;
    for (std::size_t p = 0; p < gt.size(); ++p) {
      if (gt[p] == kIgnoreLabel) continue;
      if (gt[p] >= k) throw InputError("evaluate: ground-truth label " + std::to_string(gt[p]) + " out of range");
      if (pred[p] >= k) throw InputError("evaluate: predicted label " + std::to_string(pred[p]) + " out of range");
      ++report.confusion[gt[p]][pred[p]];
      ++total;
      if (gt[p] == pred[p]) ++correct;
    }
  }
  report.pixel_accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;

  report.iou.resize(k);
  for (std::size_t c = 0; c < k; ++c) {
    std::uint64_t fp = 0, fn = 0;
    for (std::size_t o = 0; o < k; ++o) {
      if (o == c) continue;
      fn += report.confusion[c][o];
      fp += report.confusion[o][c];
    }
    const std::uint64_t tp = report.confusion[c][c];
    if (tp + fp + fn > 0) report.iou[c] = static_cast<double>(tp) / static_cast<double>(tp + fp + fn);
  }

  std::vector<int> classes = subset;
  if (classes.empty()) {
    for (std::size_t c = 0; c < k; ++c) classes.push_back(static_cast<int>(c));
  }
  double sum = 0;
  for (int c : classes) {
    if (c < 0 || static_cast<std::size_t>(c) >= k) throw InputError("evaluate: subset class out of range");
    if (!report.iou[static_cast<std::size_t>(c)]) {
      log::warn("class '" + class_names[static_cast<std::size_t>(c)] + "' absent from predictions and ground truth");
      continue;
    }
    sum += *report.iou[static_cast<std::size_t>(c)];
    report.evaluated.push_back(c);
  }
  report.mean_iou = report.evaluated.empty() ? 0.0 : sum / static_cast<double>(report.evaluated.size());
  return report;
}

/// Resolves class names to ids; unknown names are an error.
inline std::vector<int> class_ids(const std::vector<std::string>& class_names, const std::vector<std::string>& subset) {
  std::vector<int> ids;
  for (const auto& name : subset) {
    auto it = std::find(class_names.begin(), class_names.end(), name);
    if (it == class_names.end()) throw InputError("unknown class in subset: " + name);
    ids.push_back(static_cast<int>(it - class_names.begin()));
  }
  return ids;
}

inline void write_report_csv(std::ostream& out, const EvalReport& r) {
  out << "class,iou\n";
  for (int c : r.evaluated) {
    out << r.class_names[static_cast<std::size_t>(c)] << ',' << std::setprecision(10) << *r.iou[static_cast<std::size_t>(c)] << '\n';
  }
  out << "mean_iou," << std::setprecision(10) << r.mean_iou << '\n';
  out << "pixel_accuracy," << std::setprecision(10) << r.pixel_accuracy << '\n';
}

inline void write_report_csv(const std::filesystem::path& path, const EvalReport& r) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write report: " + path.string());
  write_report_csv(out, r);
}

inline void print_report(std::ostream& out, const EvalReport& r) {
  std::size_t width = 14;
  for (const auto& n : r.class_names) width = std::max(width, n.size() + 2);
  out << std::left << std::setw(static_cast<int>(width)) << "class" << "IoU\n";
  for (int c : r.evaluated) {
    out << std::left << std::setw(static_cast<int>(width)) << r.class_names[static_cast<std::size_t>(c)] << std::fixed
        << std::setprecision(4) << *r.iou[static_cast<std::size_t>(c)] << '\n';
  }
  out << std::left << std::setw(static_cast<int>(width)) << "mIoU" << std::fixed << std::setprecision(4) << r.mean_iou << '\n';
  out << std::left << std::setw(static_cast<int>(width)) << "pixel acc." << std::fixed << std::setprecision(4)
      << r.pixel_accuracy << '\n';
  out.unsetf(std::ios::fixed);
}

}  // namespace vilseg
