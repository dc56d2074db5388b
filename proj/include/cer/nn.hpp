#pragma once

// Parameter storage and the small layer vocabulary the encoders and the
// fusion head are built from.

#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "cer/ops.hpp"
#include "cer/random.hpp"
#include "cer/tensor.hpp"

namespace cer {

/// Ordered collection of named tensors. Trainable entries require gradients;
/// buffers (e.g. batch-norm running statistics) do not.
template <typename T>
class ParameterStore {
 public:
  struct Entry {
    std::string name;
    Tensor<T> tensor;
    bool trainable;
  };

  Tensor<T> add(std::string name, Shape shape, std::vector<T> values, bool trainable = true) {
    if (index_.count(name)) throw ConfigError("duplicate parameter name '" + name + "'");
    Tensor<T> t = trainable ? Tensor<T>::parameter(std::move(shape), std::move(values))
                            : Tensor<T>(std::move(shape), std::move(values));
    index_.emplace(name, entries_.size());
    entries_.push_back({std::move(name), t, trainable});
    return t;
  }

  const std::vector<Entry>& entries() const { return entries_; }

  const Entry* find(std::string_view name) const {
    auto it = index_.find(std::string(name));
    return it == index_.end() ? nullptr : &entries_[it->second];
  }

  std::vector<Tensor<T>> trainable() const {
    std::vector<Tensor<T>> out;
    for (const auto& e : entries_) {
      if (e.trainable) out.push_back(e.tensor);
    }
    return out;
  }

  /// Turns gradient tracking on or off for every trainable entry.
  void set_trainable(bool on) {
    for (auto& e : entries_) {
      if (e.trainable) e.tensor.set_requires_grad(on);
    }
  }

  void zero_grad() {
    for (auto& e : entries_) e.tensor.zero_grad();
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& e : entries_) {
      if (e.trainable) n += e.tensor.numel();
    }
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> index_;
};

inline std::string join_name(const std::string& prefix, const std::string& leaf) {
  return prefix.empty() ? leaf : prefix + "." + leaf;
}

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(ParameterStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out, Rng& rng,
         bool with_bias = true) {
    weight_ = store.add(join_name(prefix, "weight"), {out, in}, trunc_normal<T>(out * in, 0.02, rng));
    if (with_bias) bias_ = store.add(join_name(prefix, "bias"), {out}, std::vector<T>(out, T(0)));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight_, bias_); }

  std::size_t in_features() const { return weight_.dim(1); }
  std::size_t out_features() const { return weight_.dim(0); }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
};

template <typename T>
class LayerNorm {
 public:
  LayerNorm() = default;
  LayerNorm(ParameterStore<T>& store, const std::string& prefix, std::size_t dim) {
    gamma_ = store.add(join_name(prefix, "weight"), {dim}, std::vector<T>(dim, T(1)));
    beta_ = store.add(join_name(prefix, "bias"), {dim}, std::vector<T>(dim, T(0)));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gamma_, beta_); }

 private:
  Tensor<T> gamma_;
  Tensor<T> beta_;
};

/// Square-kernel convolution, He (fan-out) initialised.
template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(ParameterStore<T>& store, const std::string& prefix, std::size_t in, std::size_t out,
         std::size_t kernel, std::size_t stride, std::size_t pad, Rng& rng, bool with_bias = false)
      : stride_(stride), pad_(pad) {
    const double std = std::sqrt(2.0 / static_cast<double>(out * kernel * kernel));
    weight_ = store.add(join_name(prefix, "weight"), {out, in, kernel, kernel},
                        normal_values<T>(out * in * kernel * kernel, std, rng));
    if (with_bias) bias_ = store.add(join_name(prefix, "bias"), {out}, std::vector<T>(out, T(0)));
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight_, bias_, stride_, pad_); }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
  std::size_t stride_ = 1;
  std::size_t pad_ = 0;
};

template <typename T>
class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  BatchNorm2d(ParameterStore<T>& store, const std::string& prefix, std::size_t channels, T gamma_init = T(1)) {
    gamma_ = store.add(join_name(prefix, "weight"), {channels}, std::vector<T>(channels, gamma_init));
    beta_ = store.add(join_name(prefix, "bias"), {channels}, std::vector<T>(channels, T(0)));
    running_mean_ = store.add(join_name(prefix, "running_mean"), {channels}, std::vector<T>(channels, T(0)), false);
    running_var_ = store.add(join_name(prefix, "running_var"), {channels}, std::vector<T>(channels, T(1)), false);
  }

  Tensor<T> operator()(const Tensor<T>& x, bool training) {
    return batch_norm2d(x, gamma_, beta_, running_mean_, running_var_, training);
  }

 private:
  Tensor<T> gamma_;
  Tensor<T> beta_;
  Tensor<T> running_mean_;
  Tensor<T> running_var_;
};

/// Softmax rows observed during a forward pass, for normalisation checks.
struct AttentionTrace {
  struct Map {
    std::string site;
    std::size_t row_length;
    std::vector<double> values;
  };
  std::vector<Map> maps;

  template <typename T>
  void record(std::string site, const Tensor<T>& probs) {
    maps.push_back({std::move(site), probs.shape().back(),
                    std::vector<double>(probs.data().begin(), probs.data().end())});
  }
};

}  // namespace cer
