#pragma once

// Patch-based transformer encoder: patch embedding, learned positional
// encoding, pre-norm encoder blocks, mean pooling over patch tokens.

#include <cmath>
#include <string>
#include <vector>

#include "cer/encoder.hpp"

namespace cer {

struct ViTConfig {
  std::size_t image_size = 224;
  std::size_t patch_size = 16;
  std::size_t embed_dim = 768;
  std::size_t depth = 12;
  std::size_t num_heads = 12;
  double mlp_ratio = 4.0;

  /// Base-scale model; its 768-dim embedding is the fusion's first block.
  static ViTConfig base() { return {}; }

  static ViTConfig toy() {
    ViTConfig c;
    c.patch_size = 56;
    c.embed_dim = 32;
    c.depth = 1;
    c.num_heads = 2;
    return c;
  }

  std::size_t grid() const { return image_size / patch_size; }
  std::size_t num_patches() const { return grid() * grid(); }
  std::size_t patch_dim() const { return 3 * patch_size * patch_size; }
  std::size_t head_dim() const { return embed_dim / num_heads; }
  std::size_t mlp_hidden() const {
    return static_cast<std::size_t>(std::lround(static_cast<double>(embed_dim) * mlp_ratio));
  }
  std::size_t output_dim() const { return embed_dim; }

  void validate() const {
    std::vector<std::string> problems;
    if (image_size == 0 || patch_size == 0 || embed_dim == 0 || depth == 0 || num_heads == 0) {
      problems.push_back("all ViT sizes must be >= 1");
    } else {
      if (image_size % patch_size != 0) {
        problems.push_back("image_size " + std::to_string(image_size) + " is not divisible by patch_size " +
                           std::to_string(patch_size));
      }
      if (embed_dim % num_heads != 0) {
        problems.push_back("embed_dim " + std::to_string(embed_dim) + " is not divisible by num_heads " +
                           std::to_string(num_heads));
      }
    }
    if (!(mlp_ratio > 0.0) || mlp_hidden() == 0) problems.push_back("mlp_ratio must be positive");
    if (!problems.empty()) {
      std::string msg = "invalid ViT config:";
      for (const auto& p : problems) msg += " " + p + ";";
      throw ConfigError(msg);
    }
  }
};

inline void to_json(nlohmann::json& j, const ViTConfig& c) {
  j = {{"image_size", c.image_size}, {"patch_size", c.patch_size}, {"embed_dim", c.embed_dim},
       {"depth", c.depth},           {"num_heads", c.num_heads},   {"mlp_ratio", c.mlp_ratio}};
}

inline void from_json(const nlohmann::json& j, ViTConfig& c) {
  j.at("image_size").get_to(c.image_size);
  j.at("patch_size").get_to(c.patch_size);
  j.at("embed_dim").get_to(c.embed_dim);
  j.at("depth").get_to(c.depth);
  j.at("num_heads").get_to(c.num_heads);
  j.at("mlp_ratio").get_to(c.mlp_ratio);
}

/// Pre-norm transformer encoder block over [B,N,D] token sequences.
template <typename T>
class TransformerBlock {
 public:
  TransformerBlock(ParameterStore<T>& store, const std::string& prefix, std::size_t dim, std::size_t heads,
                   std::size_t hidden, Rng& rng)
      : heads_(heads),
        norm1_(store, prefix + ".norm1", dim),
        q_(store, prefix + ".attn.q", dim, dim, rng),
        k_(store, prefix + ".attn.k", dim, dim, rng),
        v_(store, prefix + ".attn.v", dim, dim, rng),
        proj_(store, prefix + ".attn.proj", dim, dim, rng),
        norm2_(store, prefix + ".norm2", dim),
        fc1_(store, prefix + ".mlp.fc1", dim, hidden, rng),
        fc2_(store, prefix + ".mlp.fc2", hidden, dim, rng) {
    if (heads == 0 || dim % heads != 0) throw ConfigError("embed dim must be divisible by the head count");
  }

  Tensor<T> operator()(const Tensor<T>& x, AttentionTrace* trace = nullptr, const std::string& site = {}) const {
    const std::size_t B = x.dim(0), N = x.dim(1), D = x.dim(2), hd = D / heads_;
    auto split = [&](const Tensor<T>& t) {
      return reshape(permute(reshape(t, {B, N, heads_, hd}), {0, 2, 1, 3}), {B * heads_, N, hd});
    };
    const Tensor<T> h = norm1_(x);
    const Tensor<T> q = split(q_(h));
    const Tensor<T> k = split(k_(h));
    const Tensor<T> v = split(v_(h));
    const Tensor<T> scores = scale(bmm(q, k, true), T(1) / std::sqrt(T(hd)));
    const Tensor<T> attn = softmax_lastdim(scores);
    if (trace) trace->record(site, attn);
    const Tensor<T> ctx = reshape(permute(reshape(bmm(attn, v), {B, heads_, N, hd}), {0, 2, 1, 3}), {B, N, D});
    const Tensor<T> y = add(x, proj_(ctx));
    return add(y, fc2_(gelu(fc1_(norm2_(y)))));
  }

 private:
  std::size_t heads_;
  LayerNorm<T> norm1_;
  Linear<T> q_, k_, v_, proj_;
  LayerNorm<T> norm2_;
  Linear<T> fc1_, fc2_;
};

template <typename T>
class VisionTransformer final : public Encoder<T> {
 public:
  VisionTransformer(ViTConfig cfg, Rng& rng) : cfg_(cfg) {
    cfg_.validate();
    auto& store = this->params_;
    patch_embed_ = Linear<T>(store, "patch_embed", cfg_.patch_dim(), cfg_.embed_dim, rng);
    pos_embed_ = store.add("pos_embed", {cfg_.num_patches(), cfg_.embed_dim},
                           trunc_normal<T>(cfg_.num_patches() * cfg_.embed_dim, 0.02, rng));
    for (std::size_t i = 0; i < cfg_.depth; ++i) {
      blocks_.emplace_back(store, "blocks." + std::to_string(i), cfg_.embed_dim, cfg_.num_heads,
                           cfg_.mlp_hidden(), rng);
    }
    norm_ = LayerNorm<T>(store, "norm", cfg_.embed_dim);
  }

  EncoderKind kind() const override { return EncoderKind::vit; }
  std::size_t output_dim() const override { return cfg_.output_dim(); }
  nlohmann::json config_json() const override { return cfg_; }
  const ViTConfig& config() const { return cfg_; }

  Tensor<T> forward(const Tensor<T>& images, bool /*training*/, AttentionTrace* trace = nullptr) override {
    this->check_images(images, "vit");
    if (images.dim(2) != cfg_.image_size || images.dim(3) != cfg_.image_size) {
      if (images.dim(2) % cfg_.patch_size || images.dim(3) % cfg_.patch_size) {
        throw ConfigError("vit: image " + shape_str(images.shape()) + " is not divisible by patch size " +
                          std::to_string(cfg_.patch_size));
      }
      throw ShapeError("vit: configured for " + std::to_string(cfg_.image_size) + "px images, got " +
                       shape_str(images.shape()));
    }
    Tensor<T> x = add(patch_embed_(patchify(images, cfg_.patch_size)), pos_embed_);
    for (std::size_t i = 0; i < blocks_.size(); ++i) x = blocks_[i](x, trace, "vit.blocks." + std::to_string(i));
    return this->finish(norm_(mean_tokens(x)), images.dim(0));
  }

 private:
  ViTConfig cfg_;
  Linear<T> patch_embed_;
  Tensor<T> pos_embed_;
  std::vector<TransformerBlock<T>> blocks_;
  LayerNorm<T> norm_;
};

/// Functional form: runs a constructed transformer on a batch.
template <typename T>
EncoderOutput<T> vit_forward(VisionTransformer<T>& model, const Tensor<T>& batch, bool training = false,
                             AttentionTrace* trace = nullptr) {
  return model.encode(batch, training, trace);
}

}  // namespace cer
