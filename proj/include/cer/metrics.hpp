#pragma once

// Classification metrics: confusion matrix, per-class precision / recall /
// F1, accuracy and the unweighted macro-F1, all as percentages. Any ratio
// with a zero denominator is defined as 0.

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cer/csv.hpp"
#include "cer/data.hpp"
#include "cer/error.hpp"
#include "cer/io.hpp"
#include "cer/label_space.hpp"

namespace cer {

/// counts[i][j]: samples of true class i predicted as class j.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes) : classes_(classes), counts_(classes * classes, 0) {}

  std::size_t classes() const { return classes_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_.at(truth * classes_ + pred); }
  std::uint64_t& at(std::size_t truth, std::size_t pred) { return counts_.at(truth * classes_ + pred); }

  std::uint64_t row_sum(std::size_t i) const {
    std::uint64_t s = 0;
    for (std::size_t j = 0; j < classes_; ++j) s += at(i, j);
    return s;
  }

  std::uint64_t col_sum(std::size_t j) const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < classes_; ++i) s += at(i, j);
    return s;
  }

  std::uint64_t trace() const {
    std::uint64_t s = 0;
    for (std::size_t i = 0; i < classes_; ++i) s += at(i, i);
    return s;
  }

  std::uint64_t total() const { return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0}); }

  ConfusionMatrix& operator+=(const ConfusionMatrix& other) {
    if (other.classes_ != classes_) throw ShapeError("cannot add confusion matrices of different sizes");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
    return *this;
  }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;

 private:
  std::size_t classes_;
  std::vector<std::uint64_t> counts_;
};

inline ConfusionMatrix confusion_matrix(std::span<const std::size_t> y_true, std::span<const std::size_t> y_pred,
                                        std::size_t classes) {
  if (y_true.size() != y_pred.size()) {
    throw ShapeError("confusion_matrix: " + std::to_string(y_true.size()) + " labels vs " +
                     std::to_string(y_pred.size()) + " predictions");
  }
  ConfusionMatrix cm(classes);
  for (std::size_t n = 0; n < y_true.size(); ++n) {
    if (y_true[n] >= classes || y_pred[n] >= classes) {
      throw IndexError("confusion_matrix: label out of range at position " + std::to_string(n));
    }
    ++cm.at(y_true[n], y_pred[n]);
  }
  return cm;
}

namespace detail {
inline double ratio_percent(std::uint64_t num, std::uint64_t den) {
  return den == 0 ? 0.0 : 100.0 * static_cast<double>(num) / static_cast<double>(den);
}
}  // namespace detail

inline std::vector<double> per_class_precision(const ConfusionMatrix& cm) {
  std::vector<double> out(cm.classes());
  for (std::size_t i = 0; i < cm.classes(); ++i) out[i] = detail::ratio_percent(cm.at(i, i), cm.col_sum(i));
  return out;
}

inline std::vector<double> per_class_recall(const ConfusionMatrix& cm) {
  std::vector<double> out(cm.classes());
  for (std::size_t i = 0; i < cm.classes(); ++i) out[i] = detail::ratio_percent(cm.at(i, i), cm.row_sum(i));
  return out;
}

inline std::vector<double> per_class_f1(const ConfusionMatrix& cm) {
  const auto p = per_class_precision(cm);
  const auto r = per_class_recall(cm);
  std::vector<double> out(cm.classes());
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    const double denom = p[i] + r[i];
    out[i] = denom == 0.0 ? 0.0 : 2.0 * p[i] * r[i] / denom;
  }
  return out;
}

/// Unweighted mean of the per-class F1 scores.
inline double macro_f1(std::span<const double> per_class) {
  if (per_class.empty()) return 0.0;
  double s = 0.0;
  for (double v : per_class) s += v;
  return s / static_cast<double>(per_class.size());
}

inline double accuracy(const ConfusionMatrix& cm) { return detail::ratio_percent(cm.trace(), cm.total()); }

struct EvalReport {
  std::vector<std::string> labels;
  std::vector<double> per_class_recall;
  std::vector<double> per_class_precision;
  std::vector<double> per_class_f1;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  ConfusionMatrix confusion{0};
};

inline EvalReport make_report(const ConfusionMatrix& cm, const LabelSpace& labels) {
  if (cm.classes() != labels.size()) {
    throw ShapeError("confusion matrix has " + std::to_string(cm.classes()) + " classes but taxonomy is " +
                     labels.describe());
  }
  EvalReport r;
  r.labels = labels.names();
  r.per_class_recall = per_class_recall(cm);
  r.per_class_precision = per_class_precision(cm);
  r.per_class_f1 = per_class_f1(cm);
  r.accuracy = accuracy(cm);
  r.macro_f1 = macro_f1(r.per_class_f1);
  r.confusion = cm;
  return r;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
  std::vector<std::vector<std::uint64_t>> rows(r.confusion.classes());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows.size(); ++j) rows[i].push_back(r.confusion.at(i, j));
  return {{"labels", r.labels},         {"per_class_recall", r.per_class_recall},
          {"per_class_precision", r.per_class_precision}, {"per_class_f1", r.per_class_f1},
          {"accuracy", r.accuracy},     {"macro_f1", r.macro_f1},
          {"confusion", rows}};
}

inline EvalReport report_from_json(const nlohmann::json& j) {
  EvalReport r;
  j.at("labels").get_to(r.labels);
  j.at("per_class_recall").get_to(r.per_class_recall);
  j.at("per_class_precision").get_to(r.per_class_precision);
  j.at("per_class_f1").get_to(r.per_class_f1);
  j.at("accuracy").get_to(r.accuracy);
  j.at("macro_f1").get_to(r.macro_f1);
  const auto rows = j.at("confusion").get<std::vector<std::vector<std::uint64_t>>>();
  r.confusion = ConfusionMatrix(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != rows.size()) throw ParseError("confusion matrix in report is not square");
    for (std::size_t j2 = 0; j2 < rows.size(); ++j2) r.confusion.at(i, j2) = rows[i][j2];
  }
  return r;
}

/// Runs a predictor over the manifest in batches and scores it. The
/// predictor maps record indices to predicted class indices.
template <typename Predict>
EvalReport evaluate(Predict&& predict, const DatasetManifest& manifest, std::size_t batch_size) {
  ConfusionMatrix cm(manifest.label_space.size());
  for (const auto& batch : make_batches(manifest, batch_size, false, 0)) {
    const std::vector<std::size_t> pred = predict(std::span<const std::size_t>(batch));
    if (pred.size() != batch.size()) throw ShapeError("evaluate: predictor returned the wrong number of labels");
    std::vector<std::size_t> truth;
    for (std::size_t i : batch) truth.push_back(manifest.records[i].label_index);
    cm += confusion_matrix(truth, pred, manifest.label_space.size());
  }
  return make_report(cm, manifest.label_space);
}

/// Two-decimal rendering used by every report.
inline std::string format_percent(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

/// `row_name,value`: per-class recall in taxonomy order, then acc and F1.
inline std::string metrics_table_csv(const EvalReport& r) {
  std::string out = "row_name,value\n";
  for (std::size_t i = 0; i < r.labels.size(); ++i) {
    out += csv::escape(r.labels[i]) + "," + format_percent(r.per_class_recall[i]) + "\n";
  }
  out += "acc," + format_percent(r.accuracy) + "\n";
  out += "F1," + format_percent(r.macro_f1) + "\n";
  return out;
}

inline std::string confusion_csv(const ConfusionMatrix& cm, const std::vector<std::string>& labels) {
  std::string out = "true\\pred";
  for (const auto& l : labels) out += "," + csv::escape(l);
  out += "\n";
  for (std::size_t i = 0; i < cm.classes(); ++i) {
    out += csv::escape(labels.at(i));
    for (std::size_t j = 0; j < cm.classes(); ++j) out += "," + std::to_string(cm.at(i, j));
    out += "\n";
  }
  return out;
}

inline ConfusionMatrix read_confusion_csv(const fs::path& path) {
  std::istringstream in(read_text_file(path));
  std::string line;
  if (!std::getline(in, line)) throw ParseError("'" + path.string() + "' is empty");
  const std::size_t classes = csv::split(line).size() - 1;
  ConfusionMatrix cm(classes);
  std::size_t i = 0;
  while (std::getline(in, line)) {
    if (csv::trim(line).empty()) continue;
    const auto fields = csv::split(line);
    if (fields.size() != classes + 1 || i >= classes) throw ParseError("malformed confusion CSV '" + path.string() + "'");
    for (std::size_t j = 0; j < classes; ++j) cm.at(i, j) = std::stoull(fields[j + 1]);
    ++i;
  }
  if (i != classes) throw ParseError("confusion CSV '" + path.string() + "' has " + std::to_string(i) + " rows");
  return cm;
}

/// Row-normalised heat map with the raw count printed in every cell.
inline cv::Mat render_confusion_heatmap(const ConfusionMatrix& cm, const std::vector<std::string>& labels) {
  const int n = static_cast<int>(cm.classes());
  const int cell = 64, left = 220, top = 60, right = 20, bottom = 40;
  cv::Mat img(top + n * cell + bottom, left + n * cell + right, CV_8UC3, cv::Scalar(255, 255, 255));
  const int font = cv::FONT_HERSHEY_SIMPLEX;
  cv::putText(img, "Confusion matrix (rows: true, cols: predicted)", {10, 24}, font, 0.5, {0, 0, 0}, 1, cv::LINE_AA);
  for (int i = 0; i < n; ++i) {
    const std::uint64_t row = cm.row_sum(static_cast<std::size_t>(i));
    cv::putText(img, std::to_string(i) + " " + labels.at(static_cast<std::size_t>(i)),
                {8, top + i * cell + cell / 2 + 5}, font, 0.45, {0, 0, 0}, 1, cv::LINE_AA);
    cv::putText(img, std::to_string(i), {left + i * cell + cell / 2 - 5, top - 10}, font, 0.45, {0, 0, 0}, 1,
                cv::LINE_AA);
    for (int j = 0; j < n; ++j) {
      const std::uint64_t c = cm.at(static_cast<std::size_t>(i), static_cast<std::size_t>(j));
      const double frac = row == 0 ? 0.0 : static_cast<double>(c) / static_cast<double>(row);
      // white -> dark blue (BGR)
      const cv::Scalar color(255.0 - 100.0 * frac, 255.0 - 200.0 * frac, 255.0 - 225.0 * frac);
      const cv::Point p0(left + j * cell, top + i * cell);
      cv::rectangle(img, p0, p0 + cv::Point(cell, cell), color, cv::FILLED);
      cv::rectangle(img, p0, p0 + cv::Point(cell, cell), cv::Scalar(160, 160, 160), 1);
      const std::string text = std::to_string(c);
      int baseline = 0;
      const cv::Size ts = cv::getTextSize(text, font, 0.5, 1, &baseline);
      const cv::Scalar ink = frac > 0.5 ? cv::Scalar(255, 255, 255) : cv::Scalar(0, 0, 0);
      cv::putText(img, text, p0 + cv::Point((cell - ts.width) / 2, (cell + ts.height) / 2), font, 0.5, ink, 1,
                  cv::LINE_AA);
    }
  }
  return img;
}

struct ReportFiles {
  fs::path metrics_table;
  fs::path confusion_csv;
  fs::path heatmap;
};

inline ReportFiles export_report(const EvalReport& r, const fs::path& out_dir) {
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (!fs::is_directory(out_dir)) throw IoError("cannot create output directory '" + out_dir.string() + "'");
  ReportFiles files{out_dir / "metrics.csv", out_dir / "confusion.csv", out_dir / "confusion.png"};
  write_text_file(files.metrics_table, metrics_table_csv(r));
  write_text_file(files.confusion_csv, confusion_csv(r.confusion, r.labels));
  bool ok = false;
  try {
    ok = cv::imwrite(files.heatmap.string(), render_confusion_heatmap(r.confusion, r.labels));
  } catch (const cv::Exception& e) {
    throw IoError("cannot write heat map '" + files.heatmap.string() + "': " + e.what());
  }
  if (!ok) throw IoError("cannot write heat map '" + files.heatmap.string() + "'");
  return files;
}

/// Human-readable table: class, recall, F1, then acc and macro-F1.
inline std::string format_report(const EvalReport& r) {
  std::size_t width = 6;
  for (const auto& l : r.labels) width = std::max(width, l.size());
  std::ostringstream os;
  auto pad = [&](const std::string& s) { return s + std::string(width - s.size() + 2, ' '); };
  os << pad("class") << "recall    F1\n";
  for (std::size_t i = 0; i < r.labels.size(); ++i) {
    std::string rec = format_percent(r.per_class_recall[i]);
    os << pad(r.labels[i]) << rec << std::string(10 - std::min<std::size_t>(rec.size(), 9), ' ')
       << format_percent(r.per_class_f1[i]) << "\n";
  }
  os << pad("acc") << format_percent(r.accuracy) << "\n";
  os << pad("F1") << format_percent(r.macro_f1) << "\n";
  return os.str();
}

}  // namespace cer
