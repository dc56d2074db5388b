#pragma once

// Shared fixtures: scratch directories, a procedural 7-class image set,
// and a central-difference gradient checker.

#include <cmath>
#include <cstdlib>
#include <string>
#include <vector>

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "cer/cer.hpp"

namespace cer::testing {

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "cer") {
    std::string pattern = (fs::temp_directory_path() / (tag + "-XXXXXX")).string();
    if (!mkdtemp(pattern.data())) throw IoError("mkdtemp failed");
    path_ = pattern;
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  fs::path path_;
};

/// Class k gets its own hue and texture; per-image phase and pixel noise
/// vary within a class.
inline cv::Mat synthetic_image(std::size_t cls, std::size_t side, Rng& rng) {
  static const cv::Vec3b colors[7] = {{40, 40, 200}, {40, 200, 40}, {200, 40, 40}, {40, 200, 200},
                                      {200, 40, 200}, {200, 200, 40}, {120, 120, 120}};
  cv::Mat img(static_cast<int>(side), static_cast<int>(side), CV_8UC3);
  const int phase = static_cast<int>(uniform01(rng) * 8.0);
  const int s = static_cast<int>(side);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      bool on = false;
      switch (cls % 7) {
        case 0: on = ((y + phase) / 8) % 2 == 0; break;
        case 1: on = ((x + phase) / 8) % 2 == 0; break;
        case 2: on = (((x + phase) / 8) + ((y + phase) / 8)) % 2 == 0; break;
        case 3: on = ((x + y + phase) / 6) % 2 == 0; break;
        case 4: on = static_cast<int>(std::hypot(x - s / 2, y - s / 2) + phase) / 6 % 2 == 0; break;
        case 5: on = y < s / 2; break;
        case 6: on = ((x / 4) * 7 + (y / 4) * 13 + phase) % 3 == 0; break;
      }
      cv::Vec3b px = on ? colors[cls % 7] : cv::Vec3b(255 - colors[cls % 7][0] / 2, 255 - colors[cls % 7][1] / 2,
                                                      255 - colors[cls % 7][2] / 2);
      for (int c = 0; c < 3; ++c) {
        const int noise = static_cast<int>((uniform01(rng) - 0.5) * 20.0);
        px[c] = cv::saturate_cast<uchar>(px[c] + noise);
      }
      img.at<cv::Vec3b>(y, x) = px;
    }
  }
  return img;
}

struct SyntheticSet {
  fs::path manifest;
  std::vector<fs::path> images;
};

/// Writes per_class PNGs for each of the 7 compound classes plus a
/// manifest CSV named <name>.csv.
inline SyntheticSet make_synthetic(const fs::path& dir, const std::string& name, std::size_t per_class,
                                   std::uint64_t seed, std::size_t side = 64) {
  Rng rng(seed);
  const LabelSpace& space = LabelSpace::compound();
  SyntheticSet set;
  set.manifest = dir / (name + ".csv");
  fs::create_directories(dir / name);
  std::string csv_text = "image_path,label_name,source\n";
  for (std::size_t c = 0; c < space.size(); ++c) {
    for (std::size_t i = 0; i < per_class; ++i) {
      const fs::path rel = fs::path(name) / ("c" + std::to_string(c) + "_" + std::to_string(i) + ".png");
      if (!cv::imwrite((dir / rel).string(), synthetic_image(c, side, rng))) throw IoError("imwrite failed");
      set.images.push_back(dir / rel);
      csv_text += rel.string() + "," + csv::escape(space.name(c)) + "," + name + "\n";
    }
  }
  write_text_file(set.manifest, csv_text);
  return set;
}

/// Relative gradient error of one tensor: |a - n| / max(|a| + |n|, 1e-2)
/// with L2 norms over the probed elements. The floor keeps parameters
/// whose exact gradient is zero (a bias feeding a shift-invariant softmax
/// or a batch-norm) from dividing rounding noise by rounding noise.
struct GradCheckResult {
  double max_rel_error = 0.0;
  std::string worst;
};

/// Central differences of a random linear probe of forward() against
/// reverse-mode gradients, for each tensor in `wrt`. At most
/// max_elements entries per tensor are probed.
template <typename F>
GradCheckResult gradcheck(F&& forward, const std::vector<std::pair<std::string, Tensor<double>>>& wrt, Rng& rng,
                          double h = 1e-6, std::size_t max_elements = 24) {
  Tensor<double> out = forward();
  const std::vector<double> probe = normal_values<double>(out.numel(), 1.0, rng);
  for (auto [name, t] : wrt) t.zero_grad();
  weighted_sum<double>(out, probe).backward();
  auto eval = [&]() {
    NoGradGuard no_grad;
    const Tensor<double> y = forward();
    double s = 0.0;
    for (std::size_t i = 0; i < probe.size(); ++i) s += y.data()[i] * probe[i];
    return s;
  };
  GradCheckResult result;
  for (auto [name, t] : wrt) {
    const std::vector<double> analytic = t.grad().empty() ? std::vector<double>(t.numel(), 0.0)
                                                          : std::vector<double>(t.grad().begin(), t.grad().end());
    std::vector<std::size_t> idx(t.numel());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    if (idx.size() > max_elements) {
      seeded_shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_elements);
    }
    double diff = 0.0, na = 0.0, nn = 0.0;
    for (std::size_t i : idx) {
      auto v = t.data();
      const double orig = v[i];
      v[i] = orig + h;
      const double up = eval();
      v[i] = orig - h;
      const double down = eval();
      v[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      diff += (analytic[i] - numeric) * (analytic[i] - numeric);
      na += analytic[i] * analytic[i];
      nn += numeric * numeric;
    }
    const double err = std::sqrt(diff) / std::max(std::sqrt(na) + std::sqrt(nn), 1e-2);
    if (err > result.max_rel_error || result.worst.empty()) {
      result.max_rel_error = std::max(result.max_rel_error, err);
      if (err >= result.max_rel_error) result.worst = name;
    }
  }
  return result;
}

/// Re-draws every entry of a parameter store from N(0, std^2) so that
/// zero-initialised scales and biases do not hide gradient paths.
template <typename T>
void randomize(const ParameterStore<T>& store, Rng& rng, double std = 0.5) {
  for (const auto& e : store.entries()) {
    Tensor<T> t = e.tensor;
    auto v = t.data();
    const auto fresh = normal_values<T>(v.size(), std, rng);
    std::copy(fresh.begin(), fresh.end(), v.begin());
    if (e.name.find("running_var") != std::string::npos) {
      for (auto& x : v) x = T(0.5) + std::abs(x);
    }
  }
}

inline Tensor<double> random_tensor(Shape shape, Rng& rng, double std = 1.0) {
  const std::size_t n = shape_numel(shape);
  return Tensor<double>(std::move(shape), normal_values<double>(n, std, rng));
}

}  // namespace cer::testing
