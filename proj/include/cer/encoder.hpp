#pragma once

#include <nlohmann/json.hpp>

#include <string>
#include <string_view>

#include "cer/error.hpp"
#include "cer/nn.hpp"
#include "cer/tensor.hpp"

namespace cer {

enum class EncoderKind { vit, manet, resnet };

inline std::string_view to_string(EncoderKind kind) {
  switch (kind) {
    case EncoderKind::vit: return "vit";
    case EncoderKind::manet: return "manet";
    case EncoderKind::resnet: return "resnet";
  }
  return "?";
}

inline EncoderKind parse_encoder_kind(std::string_view s) {
  if (s == "vit") return EncoderKind::vit;
  if (s == "manet") return EncoderKind::manet;
  if (s == "resnet") return EncoderKind::resnet;
  throw ConfigError("unknown encoder '" + std::string(s) + "'");
}

/// Batch-major features with the dimension the producing encoder declares.
template <typename T>
struct EncoderOutput {
  Tensor<T> features;
  std::size_t dim = 0;

  std::size_t batch() const { return features.dim(0); }
};

/// A feature extractor mapping [B,3,H,W] images to [B,D] features.
template <typename T>
class Encoder {
 public:
  virtual ~Encoder() = default;

  virtual EncoderKind kind() const = 0;
  virtual std::size_t output_dim() const = 0;
  virtual nlohmann::json config_json() const = 0;
  virtual Tensor<T> forward(const Tensor<T>& images, bool training, AttentionTrace* trace = nullptr) = 0;

  EncoderOutput<T> encode(const Tensor<T>& images, bool training, AttentionTrace* trace = nullptr) {
    return {forward(images, training, trace), output_dim()};
  }

  ParameterStore<T>& parameters() { return params_; }
  const ParameterStore<T>& parameters() const { return params_; }

 protected:
  static void check_images(const Tensor<T>& images, std::string_view who) {
    if (images.rank() != 4 || images.dim(1) != 3 || images.dim(0) == 0) {
      throw ShapeError(std::string(who) + ": expected a [B,3,H,W] batch with B >= 1, got " +
                       shape_str(images.shape()));
    }
    if (!all_finite<T>(images.data())) throw NumericError(std::string(who) + ": non-finite values in input batch");
  }

  Tensor<T> finish(Tensor<T> features, std::size_t batch) const {
    if (features.rank() != 2 || features.dim(0) != batch || features.dim(1) != output_dim()) {
      throw ShapeError(std::string(to_string(kind())) + ": produced " + shape_str(features.shape()));
    }
    if (!all_finite<T>(features.data())) {
      throw NumericError(std::string(to_string(kind())) + ": non-finite activations in encoder output");
    }
    return features;
  }

  ParameterStore<T> params_;
};

}  // namespace cer
