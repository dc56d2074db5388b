#pragma once

// Bottleneck residual CNN with a linear projection of the pooled backbone
// vector. At full width the pooled vector is 2048-dim and the projection
// brings it to the 512-dim feature the fusion head consumes.

#include <array>
#include <string>
#include <vector>

#include "cer/encoder.hpp"

namespace cer {

struct ResNetConfig {
  static constexpr std::size_t expansion = 4;

  std::size_t image_size = 224;
  std::array<std::size_t, 4> stage_blocks{3, 4, 6, 3};
  std::size_t base_width = 64;
  std::size_t projection_dim = 512;

  static ResNetConfig base() { return {}; }

  static ResNetConfig toy() {
    ResNetConfig c;
    c.stage_blocks = {1, 1, 1, 1};
    c.base_width = 8;
    c.projection_dim = 16;
    return c;
  }

  std::size_t stage_width(std::size_t stage) const { return base_width << stage; }
  /// Channel width of the last stage, i.e. the pooled vector's length.
  std::size_t backbone_dim() const { return stage_width(3) * expansion; }
  std::size_t output_dim() const { return projection_dim; }

  void validate() const {
    std::vector<std::string> problems;
    if (base_width == 0) problems.push_back("base_width must be >= 1");
    if (projection_dim == 0) problems.push_back("projection_dim must be >= 1");
    for (std::size_t n : stage_blocks) {
      if (n == 0) problems.push_back("every stage needs at least one block");
    }
    if (!problems.empty()) {
      std::string msg = "invalid ResNet config:";
      for (const auto& p : problems) msg += " " + p + ";";
      throw ConfigError(msg);
    }
  }
};

inline void to_json(nlohmann::json& j, const ResNetConfig& c) {
  j = {{"image_size", c.image_size},
       {"stage_blocks", c.stage_blocks},
       {"base_width", c.base_width},
       {"projection_dim", c.projection_dim}};
}

inline void from_json(const nlohmann::json& j, ResNetConfig& c) {
  j.at("image_size").get_to(c.image_size);
  j.at("stage_blocks").get_to(c.stage_blocks);
  j.at("base_width").get_to(c.base_width);
  j.at("projection_dim").get_to(c.projection_dim);
}

/// 1x1 reduce, 3x3 (strided), 1x1 expand, plus identity or projection
/// shortcut. The last batch-norm scale starts at zero so a fresh block is
/// the identity on its shortcut path.
template <typename T>
class Bottleneck {
 public:
  Bottleneck(ParameterStore<T>& s, const std::string& prefix, std::size_t in, std::size_t mid, std::size_t stride,
             Rng& rng)
      : conv1_(s, prefix + ".conv1", in, mid, 1, 1, 0, rng),
        bn1_(s, prefix + ".bn1", mid),
        conv2_(s, prefix + ".conv2", mid, mid, 3, stride, 1, rng),
        bn2_(s, prefix + ".bn2", mid),
        conv3_(s, prefix + ".conv3", mid, mid * ResNetConfig::expansion, 1, 1, 0, rng),
        bn3_(s, prefix + ".bn3", mid * ResNetConfig::expansion, T(0)) {
    if (stride != 1 || in != mid * ResNetConfig::expansion) {
      down_conv_.emplace_back(s, prefix + ".downsample.conv", in, mid * ResNetConfig::expansion, 1, stride, 0, rng);
      down_bn_.emplace_back(s, prefix + ".downsample.bn", mid * ResNetConfig::expansion);
    }
  }

  Tensor<T> operator()(const Tensor<T>& x, bool training) {
    Tensor<T> h = relu(bn1_(conv1_(x), training));
    h = relu(bn2_(conv2_(h), training));
    h = bn3_(conv3_(h), training);
    const Tensor<T> shortcut = down_conv_.empty() ? x : down_bn_.front()(down_conv_.front()(x), training);
    return relu(add(h, shortcut));
  }

 private:
  Conv2d<T> conv1_;
  BatchNorm2d<T> bn1_;
  Conv2d<T> conv2_;
  BatchNorm2d<T> bn2_;
  Conv2d<T> conv3_;
  BatchNorm2d<T> bn3_;
  std::vector<Conv2d<T>> down_conv_;
  std::vector<BatchNorm2d<T>> down_bn_;
};

template <typename T>
class ResNet final : public Encoder<T> {
 public:
  ResNet(ResNetConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    auto& s = this->params_;
    stem_conv_ = Conv2d<T>(s, "stem.conv", 3, cfg_.base_width, 7, 2, 3, rng);
    stem_bn_ = BatchNorm2d<T>(s, "stem.bn", cfg_.base_width);
    std::size_t in = cfg_.base_width;
    for (std::size_t stage = 0; stage < 4; ++stage) {
      const std::size_t mid = cfg_.stage_width(stage);
      for (std::size_t b = 0; b < cfg_.stage_blocks[stage]; ++b) {
        const std::size_t stride = (stage > 0 && b == 0) ? 2 : 1;
        blocks_.emplace_back(s, "layer" + std::to_string(stage + 1) + "." + std::to_string(b), in, mid, stride, rng);
        in = mid * ResNetConfig::expansion;
      }
    }
    projection_ = Linear<T>(s, "projection", cfg_.backbone_dim(), cfg_.projection_dim, rng);
  }

  EncoderKind kind() const override { return EncoderKind::resnet; }
  std::size_t output_dim() const override { return cfg_.output_dim(); }
  nlohmann::json config_json() const override { return cfg_; }
  const ResNetConfig& config() const { return cfg_; }

  /// Globally pooled final-stage features, [B, backbone_dim].
  Tensor<T> backbone(const Tensor<T>& images, bool training) {
    Tensor<T> x = max_pool2d(relu(stem_bn_(stem_conv_(images), training)), 3, 2, 1);
    for (auto& block : blocks_) x = block(x, training);
    return global_avg_pool(x);
  }

  Tensor<T> forward(const Tensor<T>& images, bool training, AttentionTrace* /*trace*/ = nullptr) override {
    this->check_images(images, "resnet");
    return this->finish(projection_(backbone(images, training)), images.dim(0));
  }

 private:
  ResNetConfig cfg_;
  Conv2d<T> stem_conv_;
  BatchNorm2d<T> stem_bn_;
  std::vector<Bottleneck<T>> blocks_;
  Linear<T> projection_;
};

template <typename T>
EncoderOutput<T> resnet_forward(ResNet<T>& model, const Tensor<T>& batch, bool training = false) {
  return model.encode(batch, training);
}

}  // namespace cer
