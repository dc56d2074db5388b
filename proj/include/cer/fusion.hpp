#pragma once

// Late fusion: encoder features are concatenated in the fixed order
// (ViT, MANet, ResNet) and classified by an MLP followed by softmax.

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "cer/encoder.hpp"
#include "cer/label_space.hpp"
#include "cer/manet.hpp"
#include "cer/resnet.hpp"
#include "cer/vit.hpp"

namespace cer {

struct HeadConfig {
  std::vector<std::size_t> hidden_dims{512};
  double dropout = 0.3;

  void validate() const {
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
    for (std::size_t h : hidden_dims) {
      if (h == 0) throw ConfigError("hidden layer widths must be >= 1");
    }
  }
};

inline void to_json(nlohmann::json& j, const HeadConfig& c) {
  j = {{"hidden_dims", c.hidden_dims}, {"dropout", c.dropout}};
}

inline void from_json(const nlohmann::json& j, HeadConfig& c) {
  j.at("hidden_dims").get_to(c.hidden_dims);
  j.at("dropout").get_to(c.dropout);
}

/// MLP classifier: (linear -> GELU -> dropout) per hidden layer, then a
/// final linear map to class logits.
template <typename T>
class FusionHead {
 public:
  FusionHead(std::size_t input_dim, HeadConfig cfg, std::size_t num_classes, Rng& rng)
      : input_dim_(input_dim), num_classes_(num_classes), cfg_(std::move(cfg)) {
    cfg_.validate();
    if (input_dim == 0 || num_classes == 0) throw ConfigError("fusion head needs positive input and class counts");
    std::size_t in = input_dim;
    for (std::size_t i = 0; i < cfg_.hidden_dims.size(); ++i) {
      layers_.emplace_back(params_, "hidden." + std::to_string(i), in, cfg_.hidden_dims[i], rng);
      in = cfg_.hidden_dims[i];
    }
    output_ = Linear<T>(params_, "output", in, num_classes, rng);
  }

  std::size_t input_dim() const { return input_dim_; }
  std::size_t num_classes() const { return num_classes_; }
  const HeadConfig& config() const { return cfg_; }
  ParameterStore<T>& parameters() { return params_; }
  const ParameterStore<T>& parameters() const { return params_; }
  const Linear<T>& output_layer() const { return output_; }

  Tensor<T> logits(const Tensor<T>& features, bool training, Rng* rng = nullptr) const {
    if (features.rank() != 2 || features.dim(1) != input_dim_) {
      throw ShapeError("fusion head expects [B," + std::to_string(input_dim_) + "] features, got " +
                       shape_str(features.shape()));
    }
    Tensor<T> h = features;
    for (const auto& layer : layers_) h = dropout(gelu(layer(h)), cfg_.dropout, training, rng);
    return output_(h);
  }

 private:
  std::size_t input_dim_;
  std::size_t num_classes_;
  HeadConfig cfg_;
  ParameterStore<T> params_;
  std::vector<Linear<T>> layers_;
  Linear<T> output_;
};

/// Row-stochastic class probabilities, [rows x cols].
template <typename T>
struct Probabilities {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<T> values;

  std::span<const T> row(std::size_t r) const { return {values.data() + r * cols, cols}; }
};

/// Row-wise softmax of [B,C] logits in max-subtracted form.
template <typename T>
Probabilities<T> softmax(const Tensor<T>& logits) {
  if (logits.rank() != 2) throw ShapeError("softmax: expected [B,C] logits, got " + shape_str(logits.shape()));
  if (!all_finite<T>(logits.data())) throw NumericError("softmax: non-finite logits");
  NoGradGuard no_grad;
  const Tensor<T> p = softmax_lastdim(logits);
  return {logits.dim(0), logits.dim(1), std::vector<T>(p.data().begin(), p.data().end())};
}

template <typename T>
Tensor<T> concat_features(const EncoderOutput<T>& f1, const EncoderOutput<T>& f2, const EncoderOutput<T>& f3) {
  return concat_cols<T>({f1.features, f2.features, f3.features});
}

template <typename T>
Tensor<T> concat_features(const std::vector<EncoderOutput<T>>& parts) {
  std::vector<Tensor<T>> tensors;
  for (const auto& p : parts) tensors.push_back(p.features);
  return concat_cols<T>(tensors);
}

enum class Mode { train, eval };

template <typename T>
Probabilities<T> ensemble_forward(Encoder<T>& vit, Encoder<T>& manet, Encoder<T>& resnet, const FusionHead<T>& head,
                                  const Tensor<T>& batch, Mode mode, Rng* rng = nullptr) {
  const std::size_t dims = vit.output_dim() + manet.output_dim() + resnet.output_dim();
  if (head.input_dim() != dims) {
    throw ShapeError("fusion head input_dim " + std::to_string(head.input_dim()) + " != encoder dims sum " +
                     std::to_string(dims));
  }
  const bool training = mode == Mode::train;
  const Tensor<T> features = concat_features(vit.encode(batch, training), manet.encode(batch, training),
                                             resnet.encode(batch, training));
  return softmax(head.logits(features, training, rng));
}

template <typename T>
Probabilities<T> single_head_forward(Encoder<T>& encoder, const FusionHead<T>& head, const Tensor<T>& batch, Mode mode,
                                     Rng* rng = nullptr) {
  if (head.input_dim() != encoder.output_dim()) {
    throw ShapeError("head input_dim " + std::to_string(head.input_dim()) + " does not match " +
                     std::string(to_string(encoder.kind())) + " output dim " + std::to_string(encoder.output_dim()));
  }
  const bool training = mode == Mode::train;
  return softmax(head.logits(encoder.forward(batch, training), training, rng));
}

struct Prediction {
  std::size_t label_index;
  std::string label_name;
  double confidence;
};

/// Arg-max per row, ties to the lowest index.
template <typename T>
std::vector<Prediction> predict_labels(const Probabilities<T>& probs, const LabelSpace& labels) {
  if (probs.cols != labels.size()) {
    throw ShapeError("predict_labels: " + std::to_string(probs.cols) + " columns vs " + labels.describe());
  }
  std::vector<Prediction> out;
  out.reserve(probs.rows);
  for (std::size_t r = 0; r < probs.rows; ++r) {
    const auto row = probs.row(r);
    std::size_t best = 0;
    for (std::size_t c = 1; c < row.size(); ++c) {
      if (row[c] > row[best]) best = c;
    }
    out.push_back({best, labels.name(best), static_cast<double>(row[best])});
  }
  return out;
}

enum class ModelKind { vit, manet, resnet, ensemble };

inline std::string_view to_string(ModelKind k) {
  switch (k) {
    case ModelKind::vit: return "vit";
    case ModelKind::manet: return "manet";
    case ModelKind::resnet: return "resnet";
    case ModelKind::ensemble: return "ensemble";
  }
  return "?";
}

inline ModelKind parse_model_kind(std::string_view s) {
  if (s == "vit") return ModelKind::vit;
  if (s == "manet") return ModelKind::manet;
  if (s == "resnet") return ModelKind::resnet;
  if (s == "ensemble") return ModelKind::ensemble;
  throw ConfigError("unknown model '" + std::string(s) + "' (expected vit, manet, resnet or ensemble)");
}

struct ModelConfig {
  ModelKind kind = ModelKind::ensemble;
  ViTConfig vit = ViTConfig::base();
  MANetConfig manet = MANetConfig::base();
  ResNetConfig resnet = ResNetConfig::base();
  HeadConfig head;
  std::size_t num_classes = 7;
  std::uint64_t seed = 0;

  static ModelConfig full(ModelKind kind = ModelKind::ensemble) {
    ModelConfig c;
    c.kind = kind;
    return c;
  }

  /// Toy-scale encoders and head, used by tests and the `toy` preset.
  static ModelConfig toy(ModelKind kind = ModelKind::ensemble) {
    ModelConfig c;
    c.kind = kind;
    c.vit = ViTConfig::toy();
    c.manet = MANetConfig::toy();
    c.resnet = ResNetConfig::toy();
    c.head.hidden_dims = {64};
    return c;
  }

  /// Encoders in concatenation order.
  std::vector<EncoderKind> encoders() const {
    switch (kind) {
      case ModelKind::vit: return {EncoderKind::vit};
      case ModelKind::manet: return {EncoderKind::manet};
      case ModelKind::resnet: return {EncoderKind::resnet};
      case ModelKind::ensemble: return {EncoderKind::vit, EncoderKind::manet, EncoderKind::resnet};
    }
    return {};
  }

  std::size_t encoder_dim(EncoderKind e) const {
    switch (e) {
      case EncoderKind::vit: return vit.output_dim();
      case EncoderKind::manet: return manet.output_dim();
      case EncoderKind::resnet: return resnet.output_dim();
    }
    return 0;
  }

  /// Width of the concatenated feature, computed without building weights.
  std::size_t feature_dim() const {
    std::size_t d = 0;
    for (EncoderKind e : encoders()) d += encoder_dim(e);
    return d;
  }

  std::size_t image_size_of(EncoderKind e) const {
    switch (e) {
      case EncoderKind::vit: return vit.image_size;
      case EncoderKind::manet: return manet.image_size;
      case EncoderKind::resnet: return resnet.image_size;
    }
    return 0;
  }

  /// Input side shared by every encoder in use.
  std::size_t image_size() const { return image_size_of(encoders().front()); }

  void validate() const {
    for (EncoderKind e : encoders()) {
      if (e == EncoderKind::vit) vit.validate();
      if (e == EncoderKind::manet) manet.validate();
      if (e == EncoderKind::resnet) resnet.validate();
    }
    for (EncoderKind e : encoders()) {
      if (image_size_of(e) != image_size()) {
        throw ConfigError("encoders disagree on image_size: " + std::string(to_string(e)) + " uses " +
                          std::to_string(image_size_of(e)) + ", " + std::string(to_string(encoders().front())) +
                          " uses " + std::to_string(image_size()));
      }
    }
    head.validate();
    if (num_classes == 0) throw ConfigError("num_classes must be >= 1");
  }
};

inline nlohmann::json model_config_json(const ModelConfig& c) {
  nlohmann::json feature_order = nlohmann::json::array();
  for (EncoderKind e : c.encoders()) feature_order.push_back(std::string(to_string(e)));
  return {{"kind", std::string(to_string(c.kind))},
          {"vit", c.vit},
          {"manet", c.manet},
          {"resnet", c.resnet},
          {"head", c.head},
          {"num_classes", c.num_classes},
          {"seed", c.seed},
          {"feature_order", feature_order}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.kind = parse_model_kind(j.at("kind").get<std::string>());
  c.vit = j.at("vit").get<ViTConfig>();
  c.manet = j.at("manet").get<MANetConfig>();
  c.resnet = j.at("resnet").get<ResNetConfig>();
  c.head = j.at("head").get<HeadConfig>();
  c.num_classes = j.at("num_classes").get<std::size_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  std::vector<std::string> expected;
  for (EncoderKind e : c.encoders()) expected.emplace_back(to_string(e));
  if (j.at("feature_order").get<std::vector<std::string>>() != expected) {
    throw FormatError("checkpoint feature order " + j.at("feature_order").dump() +
                      " does not match the fixed (vit, manet, resnet) concatenation order");
  }
  return c;
}

template <typename T>
std::unique_ptr<Encoder<T>> make_encoder(EncoderKind kind, const ModelConfig& cfg, Rng& rng) {
  switch (kind) {
    case EncoderKind::vit: return std::make_unique<VisionTransformer<T>>(cfg.vit, rng);
    case EncoderKind::manet: return std::make_unique<MANet<T>>(cfg.manet, rng);
    case EncoderKind::resnet: return std::make_unique<ResNet<T>>(cfg.resnet, rng);
  }
  throw ConfigError("unknown encoder kind");
}

/// One or three encoders plus a fusion head. Parameter names are prefixed
/// with the owning component: "vit.", "manet.", "resnet.", "head.".
template <typename T>
class Classifier {
 public:
  explicit Classifier(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    Rng rng(cfg_.seed);
    for (EncoderKind e : cfg_.encoders()) encoders_.push_back(make_encoder<T>(e, cfg_, rng));
    head_ = std::make_unique<FusionHead<T>>(cfg_.feature_dim(), cfg_.head, cfg_.num_classes, rng);
  }

  Classifier(const Classifier&) = delete;
  Classifier& operator=(const Classifier&) = delete;
  Classifier(Classifier&&) noexcept = default;
  Classifier& operator=(Classifier&&) noexcept = default;

  const ModelConfig& config() const { return cfg_; }
  std::size_t num_classes() const { return cfg_.num_classes; }
  std::size_t feature_dim() const { return head_->input_dim(); }
  FusionHead<T>& head() { return *head_; }
  const FusionHead<T>& head() const { return *head_; }
  std::vector<std::unique_ptr<Encoder<T>>>& encoders() { return encoders_; }

  Encoder<T>* encoder(EncoderKind kind) {
    for (auto& e : encoders_) {
      if (e->kind() == kind) return e.get();
    }
    return nullptr;
  }

  /// Every parameter and buffer with its component-prefixed name.
  std::vector<std::pair<std::string, Tensor<T>>> named_tensors() const {
    std::vector<std::pair<std::string, Tensor<T>>> out;
    for (const auto& e : encoders_) {
      for (const auto& entry : e->parameters().entries()) {
        out.emplace_back(std::string(to_string(e->kind())) + "." + entry.name, entry.tensor);
      }
    }
    for (const auto& entry : head_->parameters().entries()) out.emplace_back("head." + entry.name, entry.tensor);
    return out;
  }

  void set_encoders_trainable(bool on) {
    for (auto& e : encoders_) e->parameters().set_trainable(on);
  }

  std::vector<Tensor<T>> trainable_parameters(bool include_encoders) const {
    std::vector<Tensor<T>> out;
    if (include_encoders) {
      for (const auto& e : encoders_) {
        auto p = e->parameters().trainable();
        out.insert(out.end(), p.begin(), p.end());
      }
    }
    auto h = head_->parameters().trainable();
    out.insert(out.end(), h.begin(), h.end());
    return out;
  }

  void zero_grad() {
    for (auto& e : encoders_) e->parameters().zero_grad();
    head_->parameters().zero_grad();
  }

  /// Concatenated encoder features for a [B,3,H,W] batch.
  Tensor<T> features(const Tensor<T>& images, bool training) {
    std::vector<Tensor<T>> parts;
    for (auto& e : encoders_) parts.push_back(e->forward(images, training));
    return parts.size() == 1 ? parts.front() : concat_cols<T>(parts);
  }

  Tensor<T> logits(const Tensor<T>& images, Mode mode, Rng* rng = nullptr) {
    const bool training = mode == Mode::train;
    return head_->logits(features(images, training), training, rng);
  }

  Probabilities<T> predict_proba(const Tensor<T>& images) {
    NoGradGuard no_grad;
    if (encoders_.size() == 3) {
      return ensemble_forward(*encoders_[0], *encoders_[1], *encoders_[2], *head_, images, Mode::eval);
    }
    return single_head_forward(*encoders_[0], *head_, images, Mode::eval);
  }

 private:
  ModelConfig cfg_;
  std::vector<std::unique_ptr<Encoder<T>>> encoders_;
  std::unique_ptr<FusionHead<T>> head_;
};

}  // namespace cer
