#pragma once

// Manifest ingestion, the Unity train/val merge, image decoding and
// preprocessing, flip augmentation and batch planning.

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "cer/csv.hpp"
#include "cer/error.hpp"
#include "cer/io.hpp"
#include "cer/label_space.hpp"
#include "cer/random.hpp"
#include "cer/tensor.hpp"

namespace cer {

enum class Split { train, val, test };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(std::string_view s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + std::string(s) + "'");
}

struct SampleRecord {
  std::string image_path;  ///< resolved against the manifest's directory
  std::size_t label_index = 0;
  std::string source;

  friend bool operator==(const SampleRecord&, const SampleRecord&) = default;
};

struct DatasetManifest {
  std::vector<SampleRecord> records;
  Split split = Split::train;
  LabelSpace label_space = LabelSpace::single();

  std::size_t size() const { return records.size(); }

  void validate() const {
    for (std::size_t i = 0; i < records.size(); ++i) {
      if (records[i].image_path.empty()) throw ValidationError("record " + std::to_string(i) + " has an empty path");
      if (records[i].label_index >= label_space.size()) {
        throw ValidationError("record " + std::to_string(i) + " has label index " +
                              std::to_string(records[i].label_index) + " outside " + label_space.describe());
      }
    }
  }

  std::vector<std::size_t> labels() const {
    std::vector<std::size_t> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(r.label_index);
    return out;
  }
};

namespace detail {

inline bool is_header(const std::vector<std::string>& fields) {
  if (fields.size() < 2) return false;
  const auto label = csv::trim(fields[1]);
  return label == "label" || label == "label_name";
}

/// Non-comment, non-blank lines with their 1-based line numbers.
inline std::vector<std::pair<std::size_t, std::string>> data_lines(const std::string& text) {
  std::vector<std::pair<std::size_t, std::string>> out;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (number == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    const auto t = csv::trim(line);
    if (t.empty() || t.front() == '#') continue;
    out.emplace_back(number, std::string(t));
  }
  return out;
}

}  // namespace detail

/// Reads a `relative_image_path,label_name[,source]` manifest. Relative
/// image paths are resolved against the manifest's directory.
inline DatasetManifest load_manifest(const fs::path& path, const LabelSpace& label_space, Split split) {
  if (!fs::exists(path)) throw IoError("manifest '" + path.string() + "' does not exist");
  const std::string text = read_text_file(path);
  const fs::path base = fs::absolute(path).parent_path();
  DatasetManifest m{{}, split, label_space};
  const std::string default_source = path.stem().string();
  bool first = true;
  for (const auto& [number, line] : detail::data_lines(text)) {
    std::vector<std::string> fields;
    try {
      fields = csv::split(line);
    } catch (const ParseError& e) {
      throw ParseError(path.string() + ":" + std::to_string(number) + ": " + e.what());
    }
    if (first && detail::is_header(fields)) {
      first = false;
      continue;
    }
    first = false;
    if (fields.size() < 2 || fields.size() > 3) {
      throw ParseError("malformed manifest line " + std::to_string(number) + " in '" + path.string() +
                       "': expected path,label[,source]");
    }
    const std::string rel(csv::trim(fields[0]));
    const std::string label(csv::trim(fields[1]));
    if (rel.empty()) throw ParseError("empty image path at line " + std::to_string(number));
    const auto index = label_space.find(label);
    if (!index) throw ParseError("unknown label '" + label + "' at line " + std::to_string(number));
    fs::path p(rel);
    if (p.is_relative()) p = base / p;
    std::string source = fields.size() == 3 ? std::string(csv::trim(fields[2])) : default_source;
    m.records.push_back({p.lexically_normal().string(), *index, std::move(source)});
  }
  if (m.records.empty()) throw ValidationError("manifest '" + path.string() + "' has no records");
  return m;
}

/// Serialises a manifest with image paths relative to base_dir.
inline std::string manifest_csv(const DatasetManifest& m, const fs::path& base_dir) {
  const fs::path base = fs::absolute(base_dir).lexically_normal();
  std::string out = "image_path,label_name,source\n";
  for (const auto& r : m.records) {
    const fs::path rel = fs::path(r.image_path).lexically_proximate(base);
    out += csv::escape(rel.generic_string()) + "," + csv::escape(m.label_space.name(r.label_index)) + "," +
           csv::escape(r.source) + "\n";
  }
  return out;
}

inline void write_manifest(const DatasetManifest& m, const fs::path& path) {
  write_text_file(path, manifest_csv(m, fs::absolute(path).parent_path()));
}

/// The built-in taxonomy containing every label named in a manifest file.
inline const LabelSpace& detect_label_space(const fs::path& path) {
  if (!fs::exists(path)) throw IoError("manifest '" + path.string() + "' does not exist");
  const std::string text = read_text_file(path);
  bool single_ok = true, compound_ok = true, first = true, any = false;
  for (const auto& [number, line] : detail::data_lines(text)) {
    const auto fields = csv::split(line);
    if (first && detail::is_header(fields)) {
      first = false;
      continue;
    }
    first = false;
    if (fields.size() < 2) continue;
    const auto label = csv::trim(fields[1]);
    any = true;
    single_ok = single_ok && LabelSpace::single().find(label).has_value();
    compound_ok = compound_ok && LabelSpace::compound().find(label).has_value();
  }
  if (any && compound_ok) return LabelSpace::compound();
  if (any && single_ok) return LabelSpace::single();
  throw ValidationError("manifest '" + path.string() + "' does not match the compound or single taxonomy");
}

/// Concatenates the inputs, shuffles deterministically by seed, and sends
/// round(N * val_fraction) records to val and the rest to train.
inline std::pair<DatasetManifest, DatasetManifest> merge_unity(const std::vector<DatasetManifest>& inputs,
                                                               double val_fraction, std::uint64_t seed) {
  if (inputs.empty()) throw ValidationError("merge_unity: no input manifests");
  if (!(val_fraction >= 0.0 && val_fraction <= 1.0)) {
    throw ConfigError("val_fraction must lie in [0, 1], got " + std::to_string(val_fraction));
  }
  const LabelSpace& space = inputs.front().label_space;
  std::vector<SampleRecord> all;
  for (const auto& m : inputs) {
    if (!(m.label_space == space)) {
      throw ValidationError("merge_unity: mixed label spaces (" + space.describe() + " vs " +
                            m.label_space.describe() + ")");
    }
    m.validate();
    all.insert(all.end(), m.records.begin(), m.records.end());
  }
  Rng rng(seed);
  seeded_shuffle(all.begin(), all.end(), rng);
  const auto n_val = static_cast<std::size_t>(std::llround(static_cast<double>(all.size()) * val_fraction));
  DatasetManifest val{{all.begin(), all.begin() + static_cast<std::ptrdiff_t>(n_val)}, Split::val, space};
  DatasetManifest train{{all.begin() + static_cast<std::ptrdiff_t>(n_val), all.end()}, Split::train, space};
  return {std::move(train), std::move(val)};
}

struct ImageOptions {
  std::size_t image_size = 224;
  std::array<double, 3> mean{0.485, 0.456, 0.406};
  std::array<double, 3> std{0.229, 0.224, 0.225};

  void validate() const {
    if (image_size == 0) throw ConfigError("image_size must be >= 1");
    for (double s : std) {
      if (!(s > 0.0)) throw ConfigError("normalisation std must be positive");
    }
  }
};

/// Decodes an image as RGB, bilinear-resizes it to size x size and scales
/// it to [0,1]. Layout is [3, size, size].
template <typename T>
std::vector<T> load_image_raw(const std::string& path, std::size_t size) {
  cv::Mat bgr;
  try {
    bgr = cv::imread(path, cv::IMREAD_COLOR);
  } catch (const cv::Exception& e) {
    throw IoError("cannot decode image '" + path + "': " + e.what());
  }
  if (bgr.empty()) throw IoError("cannot decode image '" + path + "'");
  const int s = static_cast<int>(size);
  if (bgr.rows != s || bgr.cols != s) {
    cv::Mat resized;
    // 8-bit bilinear resize uses fixed-point weights that sum exactly to
    // one, so constant regions stay exactly constant.
    cv::resize(bgr, resized, cv::Size(s, s), 0.0, 0.0, cv::INTER_LINEAR);
    bgr = resized;
  }
  std::vector<T> out(3 * size * size);
  for (int y = 0; y < s; ++y) {
    const auto* row = bgr.ptr<cv::Vec3b>(y);
    for (int x = 0; x < s; ++x) {
      for (int c = 0; c < 3; ++c) {
        // BGR -> RGB
        out[(static_cast<std::size_t>(c) * size + static_cast<std::size_t>(y)) * size + static_cast<std::size_t>(x)] =
            static_cast<T>(static_cast<double>(row[x][2 - c]) / 255.0);
      }
    }
  }
  return out;
}

template <typename T>
void normalize_image(std::span<T> chw, const ImageOptions& opts) {
  const std::size_t plane = chw.size() / 3;
  for (std::size_t c = 0; c < 3; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      T& v = chw[c * plane + i];
      v = static_cast<T>((static_cast<double>(v) - opts.mean[c]) / opts.std[c]);
    }
  }
}

/// Preprocessed image: decode, resize, scale to [0,1], normalise.
template <typename T>
std::vector<T> load_image(const SampleRecord& record, const ImageOptions& opts) {
  auto img = load_image_raw<T>(record.image_path, opts.image_size);
  normalize_image<T>(img, opts);
  return img;
}

template <typename T>
struct ImageBatch {
  Tensor<T> pixels;                  ///< [B,3,H,W]
  std::vector<std::size_t> labels;   ///< empty for unlabeled frames
  std::vector<std::size_t> indices;  ///< record indices within the manifest

  std::size_t size() const { return pixels.dim(0); }
};

/// Loads the listed records into one batch. Workers decode disjoint slots
/// of a preallocated buffer, so the result does not depend on worker count.
template <typename T>
ImageBatch<T> load_batch(const DatasetManifest& manifest, std::span<const std::size_t> indices,
                         const ImageOptions& opts, std::size_t workers = 1) {
  if (indices.empty()) throw ValidationError("load_batch: empty index list");
  const std::size_t S = opts.image_size, per = 3 * S * S, n = indices.size();
  std::vector<T> pixels(n * per);
  std::vector<std::exception_ptr> errors(n);
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t i = begin; i < end; ++i) {
      try {
        const auto img = load_image<T>(manifest.records.at(indices[i]), opts);
        std::copy(img.begin(), img.end(), pixels.begin() + static_cast<std::ptrdiff_t>(i * per));
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, n);
  if (workers == 1) {
    work(0, n);
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w * n / workers, (w + 1) * n / workers);
  }
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  ImageBatch<T> batch{Tensor<T>({n, 3, S, S}, std::move(pixels)), {}, {indices.begin(), indices.end()}};
  for (std::size_t i : indices) batch.labels.push_back(manifest.records[i].label_index);
  return batch;
}

/// Independent Bernoulli(p) flip decisions, one per image.
inline std::vector<bool> draw_flips(std::size_t n, double flip_prob, Rng& rng) {
  std::vector<bool> flips(n);
  for (std::size_t i = 0; i < n; ++i) flips[i] = uniform01(rng) < flip_prob;
  return flips;
}

/// Mirrors every flagged image: column j maps to column W-1-j.
template <typename T>
void apply_flips(Tensor<T>& pixels, const std::vector<bool>& flips) {
  const std::size_t B = pixels.dim(0), C = pixels.dim(1), H = pixels.dim(2), W = pixels.dim(3);
  if (flips.size() != B) throw ShapeError("apply_flips: one flag per image required");
  auto data = pixels.data();
  for (std::size_t b = 0; b < B; ++b) {
    if (!flips[b]) continue;
    for (std::size_t r = 0; r < C * H; ++r) {
      T* row = data.data() + (b * C * H + r) * W;
      std::reverse(row, row + W);
    }
  }
}

/// Training-time augmentation: horizontal flip with probability flip_prob.
template <typename T>
ImageBatch<T> augment(ImageBatch<T> batch, Rng& rng, double flip_prob = 0.5) {
  batch.pixels = batch.pixels.detach();
  apply_flips(batch.pixels, draw_flips(batch.size(), flip_prob, rng));
  return batch;
}

/// Partitions one epoch into batches of record indices. Without shuffling
/// the order is the manifest order; with it, a seed-determined permutation.
inline std::vector<std::vector<std::size_t>> make_batches(const DatasetManifest& manifest, std::size_t batch_size,
                                                          bool shuffle, std::uint64_t seed) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(manifest.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (shuffle) {
    Rng rng(seed);
    seeded_shuffle(order.begin(), order.end(), rng);
  }
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t i = 0; i < order.size(); i += batch_size) {
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + batch_size)));
  }
  return batches;
}

inline bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".png" || ext == ".jpg" || ext == ".jpeg" || ext == ".bmp" || ext == ".tif" || ext == ".tiff" ||
         ext == ".webp" || ext == ".ppm" || ext == ".pgm";
}

/// Image files in a directory, in natural filename order.
inline std::vector<fs::path> list_frames(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("'" + dir.string() + "' is not a directory");
  std::vector<fs::path> frames;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && is_image_file(entry.path())) frames.push_back(entry.path());
  }
  std::sort(frames.begin(), frames.end(), [](const fs::path& a, const fs::path& b) {
    return natural_less(a.filename().string(), b.filename().string());
  });
  return frames;
}

}  // namespace cer
