#pragma once

// Supervised training: cross-entropy on logits, Adam, linear warmup then a
// constant learning rate, best-macro-F1 model selection and checkpointing.

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "cer/checkpoint.hpp"
#include "cer/data.hpp"
#include "cer/fusion.hpp"
#include "cer/metrics.hpp"

namespace cer {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 128;
  double base_lr = 5e-5;
  /// Warmup length as a fraction of all optimisation steps; used unless
  /// warmup_steps is set explicitly.
  double warmup_frac = 0.05;
  std::optional<std::size_t> warmup_steps;
  AdamConfig adam;
  std::uint64_t seed = 0;
  bool freeze_encoders = true;
  double grad_clip = 0.0;  ///< global-norm clip; 0 disables
  double flip_prob = 0.5;
  std::size_t workers = 1;

  void validate() const {
    std::vector<std::string> problems;
    if (epochs < 1) problems.push_back("epochs must be >= 1");
    if (batch_size < 1) problems.push_back("batch_size must be >= 1");
    if (!(base_lr > 0.0)) problems.push_back("base_lr must be > 0");
    if (!(warmup_frac >= 0.0 && warmup_frac <= 1.0)) problems.push_back("warmup_frac must lie in [0, 1]");
    if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0) || !(adam.beta2 >= 0.0 && adam.beta2 < 1.0)) {
      problems.push_back("Adam betas must lie in [0, 1)");
    }
    if (!(adam.eps > 0.0)) problems.push_back("Adam eps must be > 0");
    if (!(grad_clip >= 0.0)) problems.push_back("grad_clip must be >= 0");
    if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) problems.push_back("flip_prob must lie in [0, 1]");
    if (!problems.empty()) {
      std::string msg = "invalid training config:";
      for (const auto& p : problems) msg += " " + p + ";";
      throw ConfigError(msg);
    }
  }

  std::size_t resolved_warmup(std::size_t total_steps) const {
    if (warmup_steps) return *warmup_steps;
    return static_cast<std::size_t>(std::llround(warmup_frac * static_cast<double>(total_steps)));
  }
};

inline nlohmann::json train_config_json(const TrainConfig& c) {
  nlohmann::json j = {{"epochs", c.epochs},
                      {"batch_size", c.batch_size},
                      {"base_lr", c.base_lr},
                      {"warmup_frac", c.warmup_frac},
                      {"beta1", c.adam.beta1},
                      {"beta2", c.adam.beta2},
                      {"eps", c.adam.eps},
                      {"seed", c.seed},
                      {"freeze_encoders", c.freeze_encoders},
                      {"grad_clip", c.grad_clip},
                      {"flip_prob", c.flip_prob}};
  if (c.warmup_steps) j["warmup_steps"] = *c.warmup_steps;
  return j;
}

/// Linear ramp from 0 to base_lr over warmup_steps, then constant.
inline double lr_schedule(const TrainConfig& cfg, std::size_t step) {
  const std::size_t warmup = cfg.warmup_steps.value_or(0);
  if (warmup == 0 || step >= warmup) return cfg.base_lr;
  return cfg.base_lr * static_cast<double>(step) / static_cast<double>(warmup);
}

/// Adam with bias correction and no weight decay. Moments are kept in
/// double regardless of the parameter type.
template <typename T>
class Adam {
 public:
  Adam(std::vector<Tensor<T>> params, AdamConfig cfg = {}) : params_(std::move(params)), cfg_(cfg) {
    for (const auto& p : params_) {
      m_.emplace_back(p.numel(), 0.0);
      v_.emplace_back(p.numel(), 0.0);
    }
  }

  std::size_t steps() const { return t_; }

  void step(double lr) {
    ++t_;
    const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (std::size_t k = 0; k < params_.size(); ++k) {
      Tensor<T>& p = params_[k];
      const auto g = p.grad();
      auto values = p.data();
      for (std::size_t i = 0; i < values.size(); ++i) {
        const double gi = g.empty() ? 0.0 : static_cast<double>(g[i]);
        m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * gi;
        v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * gi * gi;
        const double update = lr * (m_[k][i] / c1) / (std::sqrt(v_[k][i] / c2) + cfg_.eps);
        values[i] = static_cast<T>(static_cast<double>(values[i]) - update);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  /// Scales all gradients so their global L2 norm is at most max_norm.
  void clip_grad_norm(double max_norm) {
    double sq = 0.0;
    for (const auto& p : params_) {
      for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
    }
    const double norm = std::sqrt(sq);
    if (norm <= max_norm || norm == 0.0) return;
    const double s = max_norm / norm;
    for (auto& p : params_) {
      if (p.grad().empty()) continue;
      for (T& g : p.mutable_grad()) g = static_cast<T>(static_cast<double>(g) * s);
    }
  }

 private:
  std::vector<Tensor<T>> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

struct TrainState {
  std::size_t step = 0;
  std::size_t epoch = 0;
  double current_lr = 0.0;
  double running_loss = 0.0;  ///< mean loss of the last epoch
  double best_val_f1 = -1.0;
  std::string rng_state;
};

struct HistoryRow {
  std::size_t epoch;
  double loss;
  double val_acc;
  double val_f1;
  double lr;
};

inline std::string history_csv(const std::vector<HistoryRow>& rows) {
  std::string out = "epoch,loss,val_acc,val_f1,lr\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g\n", r.epoch, r.loss, r.val_acc, r.val_f1, r.lr);
    out += buf;
  }
  return out;
}

struct FitResult {
  fs::path best_checkpoint;
  fs::path last_checkpoint;
  fs::path history_file;
  std::vector<HistoryRow> history;
  TrainState state;
};

template <typename T>
class Trainer {
 public:
  Trainer(Classifier<T>& model, TrainConfig cfg, ImageOptions images)
      : model_(model), cfg_(std::move(cfg)), images_(images), adam_(init_adam(model, cfg_)), rng_(cfg_.seed) {
    cfg_.validate();
    images_.validate();
    if (images_.image_size != model.config().image_size()) {
      throw ConfigError("image_size " + std::to_string(images_.image_size) + " differs from the model's " +
                        std::to_string(model.config().image_size()));
    }
  }

  const TrainConfig& config() const { return cfg_; }
  TrainConfig& config() { return cfg_; }

  /// One pass over the planned batches: forward in train mode, cross
  /// entropy, backward, one Adam step at lr_schedule(step) per batch.
  TrainState train_epoch(const DatasetManifest& data, const std::vector<std::vector<std::size_t>>& batches,
                         TrainState state) {
    if (data.label_space.size() != model_.num_classes()) {
      throw ValidationError("model has " + std::to_string(model_.num_classes()) + " classes but data uses " +
                            data.label_space.describe());
    }
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t bi = 0; bi < batches.size(); ++bi) {
      const auto& idx = batches[bi];
      const std::vector<bool> flips = draw_flips(idx.size(), cfg_.flip_prob, rng_);
      std::vector<std::size_t> labels;
      for (std::size_t i : idx) labels.push_back(data.records[i].label_index);
      Tensor<T> logits;
      if (cfg_.freeze_encoders) {
        logits = model_.head().logits(cached_features(data, idx, flips), true, &rng_);
      } else {
        ImageBatch<T> batch = load_batch<T>(data, idx, images_, cfg_.workers);
        apply_flips(batch.pixels, flips);
        logits = model_.logits(batch.pixels, Mode::train, &rng_);
      }
      const Tensor<T> loss = cross_entropy<T>(logits, labels);
      const double lr = lr_schedule(cfg_, state.step);
      const double value = static_cast<double>(loss.item());
      if (!std::isfinite(value)) {
        throw NumericError("non-finite loss at batch " + std::to_string(bi) + " of epoch " +
                           std::to_string(state.epoch + 1) + " (lr=" + std::to_string(lr) +
                           ", loss=" + std::to_string(value) + ")");
      }
      model_.zero_grad();
      loss.backward();
      if (cfg_.grad_clip > 0.0) adam_.clip_grad_norm(cfg_.grad_clip);
      adam_.step(lr);
      model_.zero_grad();
      state.current_lr = lr;
      ++state.step;
      loss_sum += value * static_cast<double>(idx.size());
      seen += idx.size();
    }
    state.running_loss = seen ? loss_sum / static_cast<double>(seen) : 0.0;
    ++state.epoch;
    state.rng_state = rng_state(rng_);
    return state;
  }

  /// Eval-mode class predictions for the given records.
  std::vector<std::size_t> predict(const DatasetManifest& data, std::span<const std::size_t> idx) {
    NoGradGuard no_grad;
    Tensor<T> logits;
    if (cfg_.freeze_encoders) {
      logits = model_.head().logits(cached_features(data, idx, std::vector<bool>(idx.size(), false)), false);
    } else {
      logits = model_.logits(load_batch<T>(data, idx, images_, cfg_.workers).pixels, Mode::eval);
    }
    std::vector<std::size_t> out;
    for (const auto& p : predict_labels(softmax(logits), data.label_space)) out.push_back(p.label_index);
    return out;
  }

  EvalReport evaluate(const DatasetManifest& data) {
    return cer::evaluate([&](std::span<const std::size_t> idx) { return predict(data, idx); }, data,
                         cfg_.batch_size);
  }

  /// Runs cfg.epochs epochs, scoring val macro-F1 after each; writes
  /// best.ckpt (highest val macro-F1), last.ckpt and history.csv.
  FitResult fit(const DatasetManifest& train, const DatasetManifest& val, const fs::path& out_dir,
                const std::function<void(const HistoryRow&)>& on_epoch = {}) {
    if (!(train.label_space == val.label_space)) {
      throw ValidationError("train and val manifests use different taxonomies");
    }
    train.validate();
    val.validate();
    if (train.size() == 0 || val.size() == 0) throw ValidationError("fit needs non-empty train and val manifests");
    const std::size_t per_epoch = (train.size() + cfg_.batch_size - 1) / cfg_.batch_size;
    cfg_.warmup_steps = cfg_.resolved_warmup(per_epoch * cfg_.epochs);
    FitResult result{out_dir / "best.ckpt", out_dir / "last.ckpt", out_dir / "history.csv", {}, {}};
    TrainState state;
    for (std::size_t e = 0; e < cfg_.epochs; ++e) {
      const auto batches = make_batches(train, cfg_.batch_size, true, cfg_.seed * 1000003ULL + e);
      state = train_epoch(train, batches, state);
      const EvalReport report = evaluate(val);
      const HistoryRow row{state.epoch, state.running_loss, report.accuracy, report.macro_f1, state.current_lr};
      result.history.push_back(row);
      if (report.macro_f1 > state.best_val_f1) {
        state.best_val_f1 = report.macro_f1;
        save_classifier(result.best_checkpoint, model_, train.label_space, checkpoint_extra(row));
      }
      write_text_file(result.history_file, history_csv(result.history));
      if (on_epoch) on_epoch(row);
    }
    save_classifier(result.last_checkpoint, model_, train.label_space, checkpoint_extra(result.history.back()));
    result.state = state;
    return result;
  }

 private:
  static Adam<T> init_adam(Classifier<T>& model, const TrainConfig& cfg) {
    model.set_encoders_trainable(!cfg.freeze_encoders);
    return Adam<T>(model.trainable_parameters(!cfg.freeze_encoders), cfg.adam);
  }

  nlohmann::json checkpoint_extra(const HistoryRow& row) const {
    return {{"train", train_config_json(cfg_)},
            {"epoch", row.epoch},
            {"val_acc", row.val_acc},
            {"val_f1", row.val_f1},
            {"image", {{"image_size", images_.image_size}, {"mean", images_.mean}, {"std", images_.std}}}};
  }

  /// Frozen encoders in eval mode make features a pure function of
  /// (image, flip), so they are computed once and reused across epochs.
  Tensor<T> cached_features(const DatasetManifest& data, std::span<const std::size_t> idx,
                            const std::vector<bool>& flips) {
    NoGradGuard no_grad;
    std::vector<std::size_t> missing;
    std::vector<bool> missing_flips;
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const std::string key = cache_key(data.records[idx[k]], flips[k]);
      if (!cache_.count(key) && std::find(pending_.begin(), pending_.end(), key) == pending_.end()) {
        missing.push_back(idx[k]);
        missing_flips.push_back(flips[k]);
        pending_.push_back(key);
      }
    }
    pending_.clear();
    for (std::size_t start = 0; start < missing.size(); start += cfg_.batch_size) {
      const std::size_t end = std::min(missing.size(), start + cfg_.batch_size);
      std::span<const std::size_t> chunk(missing.data() + start, end - start);
      ImageBatch<T> batch = load_batch<T>(data, chunk, images_, cfg_.workers);
      std::vector<bool> chunk_flips(missing_flips.begin() + static_cast<std::ptrdiff_t>(start),
                                    missing_flips.begin() + static_cast<std::ptrdiff_t>(end));
      apply_flips(batch.pixels, chunk_flips);
      const Tensor<T> feats = model_.features(batch.pixels, false);
      const std::size_t D = feats.dim(1);
      for (std::size_t k = 0; k < chunk.size(); ++k) {
        const auto first = feats.data().begin() + static_cast<std::ptrdiff_t>(k * D);
        cache_.emplace(cache_key(data.records[chunk[k]], chunk_flips[k]), std::vector<T>(first, first + D));
      }
    }
    const std::size_t D = model_.feature_dim();
    std::vector<T> out;
    out.reserve(idx.size() * D);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto& f = cache_.at(cache_key(data.records[idx[k]], flips[k]));
      out.insert(out.end(), f.begin(), f.end());
    }
    return Tensor<T>({idx.size(), D}, std::move(out));
  }

  static std::string cache_key(const SampleRecord& r, bool flipped) {
    return r.image_path + (flipped ? "|f" : "|n");
  }

  Classifier<T>& model_;
  TrainConfig cfg_;
  ImageOptions images_;
  Adam<T> adam_;
  Rng rng_;
  std::unordered_map<std::string, std::vector<T>> cache_;
  std::vector<std::string> pending_;
};

}  // namespace cer
