#pragma once

// Multi-scale + local-attention network. A convolutional stem yields a
// mid-level feature map shared by two branches:
//   * multi-scale: one convolution per receptive-field size, summed, pooled
//     and projected to branch_dim;
//   * local attention: the map is split into a grid of regions, each region
//     vector is scored, the scores are softmax-normalised over regions and
//     used to pool the regions, then projected to branch_dim.
// The branches are scaled by softmax(w_ms, w_la) and concatenated.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "cer/encoder.hpp"

namespace cer {

struct MANetConfig {
  std::size_t image_size = 224;
  std::size_t stem_channels = 64;
  std::size_t branch_dim = 512;
  std::vector<std::size_t> scales{1, 3, 5};
  std::size_t attention_regions = 4;

  static MANetConfig base() { return {}; }

  static MANetConfig toy() {
    MANetConfig c;
    c.stem_channels = 8;
    c.branch_dim = 16;
    c.scales = {1, 3};
    return c;
  }

  std::size_t map_channels() const { return 2 * stem_channels; }
  std::size_t output_dim() const { return 2 * branch_dim; }

  /// Spatial side of the stem output for a square input of the given side.
  static std::size_t map_side(std::size_t image_side) {
    std::size_t s = image_side;
    for (int i = 0; i < 3; ++i) s = s == 0 ? 0 : (s - 1) / 2 + 1;
    return s;
  }

  /// Region grid (rows, cols): the most square factorisation of the count.
  std::pair<std::size_t, std::size_t> region_grid() const {
    std::size_t rows = 1;
    for (std::size_t d = 1; d * d <= attention_regions; ++d) {
      if (attention_regions % d == 0) rows = d;
    }
    return {rows, attention_regions / rows};
  }

  void validate() const {
    std::vector<std::string> problems;
    if (stem_channels == 0) problems.push_back("stem_channels must be >= 1");
    if (branch_dim == 0) problems.push_back("branch_dim must be >= 1");
    if (scales.empty()) problems.push_back("scales must be non-empty");
    for (std::size_t s : scales) {
      if (s == 0 || s % 2 == 0) problems.push_back("scale " + std::to_string(s) + " must be a positive odd size");
    }
    if (attention_regions == 0) {
      problems.push_back("attention_regions must be >= 1");
    } else {
      const auto [rows, cols] = region_grid();
      const std::size_t side = map_side(image_size);
      if (rows > side || cols > side) {
        problems.push_back(std::to_string(attention_regions) + " attention regions (" + std::to_string(rows) + "x" +
                           std::to_string(cols) + ") exceed the " + std::to_string(side) + "x" +
                           std::to_string(side) + " feature map");
      }
    }
    if (!problems.empty()) {
      std::string msg = "invalid MANet config:";
      for (const auto& p : problems) msg += " " + p + ";";
      throw ConfigError(msg);
    }
  }
};

inline void to_json(nlohmann::json& j, const MANetConfig& c) {
  j = {{"image_size", c.image_size}, {"stem_channels", c.stem_channels}, {"branch_dim", c.branch_dim},
       {"scales", c.scales},         {"attention_regions", c.attention_regions}};
}

inline void from_json(const nlohmann::json& j, MANetConfig& c) {
  j.at("image_size").get_to(c.image_size);
  j.at("stem_channels").get_to(c.stem_channels);
  j.at("branch_dim").get_to(c.branch_dim);
  j.at("scales").get_to(c.scales);
  j.at("attention_regions").get_to(c.attention_regions);
}

template <typename T>
class MultiScaleBlock {
 public:
  MultiScaleBlock(ParameterStore<T>& store, const std::string& prefix, std::size_t channels,
                  const std::vector<std::size_t>& scales, std::size_t out_dim, Rng& rng) {
    for (std::size_t s : scales) {
      convs_.emplace_back(store, prefix + ".conv" + std::to_string(s), channels, channels, s, 1, s / 2, rng, true);
    }
    proj_ = Linear<T>(store, prefix + ".proj", channels, out_dim, rng);
  }

  Tensor<T> operator()(const Tensor<T>& map) const {
    Tensor<T> fused = relu(convs_.front()(map));
    for (std::size_t i = 1; i < convs_.size(); ++i) fused = add(fused, relu(convs_[i](map)));
    return proj_(global_avg_pool(fused));
  }

 private:
  std::vector<Conv2d<T>> convs_;
  Linear<T> proj_;
};

/// Region-gated pooling over a [B,C,H,W] map, yielding [B,out_dim].
template <typename T>
class LocalAttentionBlock {
 public:
  LocalAttentionBlock(ParameterStore<T>& store, const std::string& prefix, std::size_t channels,
                      std::size_t regions, std::size_t out_dim, Rng& rng)
      : score_(store, prefix + ".score", channels, 1, rng), proj_(store, prefix + ".proj", channels, out_dim, rng) {
    MANetConfig shape;
    shape.attention_regions = regions;
    grid_ = shape.region_grid();
  }

  Tensor<T> operator()(const Tensor<T>& map, AttentionTrace* trace = nullptr) const {
    const std::size_t B = map.dim(0), C = map.dim(1);
    const auto [rows, cols] = grid_;
    if (rows > map.dim(2) || cols > map.dim(3)) {
      throw ConfigError("manet: " + std::to_string(rows * cols) + " attention regions exceed the " +
                        std::to_string(map.dim(2)) + "x" + std::to_string(map.dim(3)) + " feature map");
    }
    const std::size_t R = rows * cols;
    const Tensor<T> regions = region_avg_pool(map, rows, cols);          // [B,R,C]
    const Tensor<T> gates = softmax_lastdim(reshape(score_(regions), {B, R}));
    if (trace) trace->record("manet.local_attention", gates);
    const Tensor<T> pooled = bmm(reshape(gates, {B, 1, R}), regions);    // [B,1,C]
    return proj_(reshape(pooled, {B, C}));
  }

 private:
  Linear<T> score_;
  Linear<T> proj_;
  std::pair<std::size_t, std::size_t> grid_;
};

template <typename T>
class MANet final : public Encoder<T> {
 public:
  MANet(MANetConfig cfg, Rng& rng) : cfg_(std::move(cfg)) {
    cfg_.validate();
    auto& s = this->params_;
    const std::size_t c = cfg_.stem_channels, m = cfg_.map_channels();
    conv1_ = Conv2d<T>(s, "stem.conv1", 3, c, 7, 2, 3, rng);
    bn1_ = BatchNorm2d<T>(s, "stem.bn1", c);
    conv2_ = Conv2d<T>(s, "stem.conv2", c, m, 3, 2, 1, rng);
    bn2_ = BatchNorm2d<T>(s, "stem.bn2", m);
    multi_scale_.emplace_back(s, "multi_scale", m, cfg_.scales, cfg_.branch_dim, rng);
    local_attention_.emplace_back(s, "local_attention", m, cfg_.attention_regions, cfg_.branch_dim, rng);
    branch_weights_ = s.add("branch_weights", {2}, {T(0), T(0)});
  }

  EncoderKind kind() const override { return EncoderKind::manet; }
  std::size_t output_dim() const override { return cfg_.output_dim(); }
  nlohmann::json config_json() const override { return cfg_; }
  const MANetConfig& config() const { return cfg_; }

  /// softmax(w_ms, w_la) as currently parameterised.
  std::pair<T, T> branch_scales() const {
    const Tensor<T> w = softmax_lastdim(branch_weights_.detach());
    return {w.data()[0], w.data()[1]};
  }

  Tensor<T> stem(const Tensor<T>& images, bool training) {
    Tensor<T> x = max_pool2d(relu(bn1_(conv1_(images), training)), 3, 2, 1);
    return relu(bn2_(conv2_(x), training));
  }

  Tensor<T> forward(const Tensor<T>& images, bool training, AttentionTrace* trace = nullptr) override {
    this->check_images(images, "manet");
    const Tensor<T> map = stem(images, training);
    const Tensor<T> weights = softmax_lastdim(branch_weights_);
    if (trace) trace->record("manet.branch_weights", weights);
    const Tensor<T> ms = scale_by_element(multi_scale_.front()(map), weights, 0);
    const Tensor<T> la = scale_by_element(local_attention_.front()(map, trace), weights, 1);
    return this->finish(concat_cols<T>({ms, la}), images.dim(0));
  }

 private:
  MANetConfig cfg_;
  Conv2d<T> conv1_, conv2_;
  BatchNorm2d<T> bn1_, bn2_;
  std::vector<MultiScaleBlock<T>> multi_scale_;
  std::vector<LocalAttentionBlock<T>> local_attention_;
  Tensor<T> branch_weights_;
};

template <typename T>
EncoderOutput<T> manet_forward(MANet<T>& model, const Tensor<T>& batch, bool training = false,
                               AttentionTrace* trace = nullptr) {
  return model.encode(batch, training, trace);
}

}  // namespace cer
