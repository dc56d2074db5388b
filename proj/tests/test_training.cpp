#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "support.hpp"

using namespace cer;
using cer::testing::TempDir;

namespace {

struct Sets {
  DatasetManifest train, val;
};

Sets small_sets(const TempDir& dir, std::size_t per_class) {
  const auto tr = cer::testing::make_synthetic(dir.path(), "train", per_class, 1);
  const auto va = cer::testing::make_synthetic(dir.path(), "val", 1, 2);
  return {load_manifest(tr.manifest, LabelSpace::compound(), Split::train),
          load_manifest(va.manifest, LabelSpace::compound(), Split::val)};
}

TrainConfig toy_train(std::size_t epochs) {
  TrainConfig c;
  c.epochs = epochs;
  c.batch_size = 4;
  c.base_lr = 1e-3;
  c.seed = 3;
  return c;
}

std::vector<float> snapshot(const Classifier<float>& m, bool encoders_only) {
  std::vector<float> out;
  for (const auto& [name, t] : m.named_tensors()) {
    if (encoders_only && name.rfind("head.", 0) == 0) continue;
    out.insert(out.end(), t.data().begin(), t.data().end());
  }
  return out;
}

}  // namespace

TEST(Schedule, WarmupRampThenConstant) {
  TrainConfig c;
  c.warmup_steps = 100;
  EXPECT_EQ(lr_schedule(c, 0), 0.0);
  EXPECT_DOUBLE_EQ(lr_schedule(c, 50), 2.5e-5);
  EXPECT_EQ(lr_schedule(c, 100), 5e-5);
  EXPECT_EQ(lr_schedule(c, 101), 5e-5);
  EXPECT_EQ(lr_schedule(c, 100000), 5e-5);
  for (std::size_t s = 1; s < 100; ++s) EXPECT_LT(lr_schedule(c, s - 1), lr_schedule(c, s));
}

TEST(Schedule, DefaultWarmupIsFivePercent) {
  const TrainConfig c;
  EXPECT_EQ(c.resolved_warmup(2000), 100u);
  EXPECT_EQ(c.resolved_warmup(10), 1u);  // 0.5 rounds away from zero
  TrainConfig d;
  d.warmup_steps = 7;
  EXPECT_EQ(d.resolved_warmup(2000), 7u);
}

TEST(Schedule, NoWarmupMeansConstant) {
  TrainConfig c;
  c.warmup_steps = 0;
  EXPECT_EQ(lr_schedule(c, 0), 5e-5);
}

TEST(TrainConfigValidation, ReportsEveryProblem) {
  TrainConfig c;
  c.epochs = 0;
  c.base_lr = -1;
  c.flip_prob = 2;
  try {
    c.validate();
    FAIL();
  } catch (const ConfigError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("epochs"), std::string::npos);
    EXPECT_NE(m.find("base_lr"), std::string::npos);
    EXPECT_NE(m.find("flip_prob"), std::string::npos);
  }
}

TEST(AdamOptimizer, MatchesScalarOracleForTenSteps) {
  // minimise (w - 3)^2 from w = 0
  Tensor<double> w({1}, 0.0);
  w.set_requires_grad(true);
  Adam<double> opt({w});
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  double ow = 0.0, m = 0.0, v = 0.0;
  for (int t = 1; t <= 10; ++t) {
    w.zero_grad();
    w.mutable_grad()[0] = 2.0 * (w.data()[0] - 3.0);
    opt.step(lr);

    const double g = 2.0 * (ow - 3.0);
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t));
    const double vh = v / (1 - std::pow(b2, t));
    ow -= lr * mh / (std::sqrt(vh) + eps);
    EXPECT_NEAR(w.data()[0], ow, 1e-9) << "step " << t;
  }
  EXPECT_EQ(opt.steps(), 10u);
}

TEST(AdamOptimizer, ZeroLearningRateIsBitwiseNoOp) {
  Rng rng(1);
  Tensor<float> w({16}, normal_values<float>(16, 1.0, rng));
  const std::vector<float> before(w.data().begin(), w.data().end());
  Adam<float> opt({w});
  for (int t = 0; t < 3; ++t) {
    w.zero_grad();
    for (auto& g : w.mutable_grad()) g = 1.5f;
    opt.step(0.0);
  }
  EXPECT_EQ(std::memcmp(before.data(), w.data().data(), before.size() * sizeof(float)), 0);
}

TEST(AdamOptimizer, ClipScalesToMaxNorm) {
  Tensor<double> w({2}, 0.0);
  Adam<double> opt({w});
  w.mutable_grad()[0] = 3.0;
  w.mutable_grad()[1] = 4.0;
  opt.clip_grad_norm(1.0);
  EXPECT_NEAR(w.grad()[0], 0.6, 1e-15);
  EXPECT_NEAR(w.grad()[1], 0.8, 1e-15);
}

TEST(TrainerEpoch, TenSamplesBatchFourIsThreeSteps) {
  TempDir dir;
  auto sets = small_sets(dir, 2);
  sets.train.records.resize(10);
  Classifier<float> model(ModelConfig::toy());
  TrainConfig cfg = toy_train(1);
  cfg.warmup_steps = 0;
  Trainer<float> trainer(model, cfg, ImageOptions{});
  const auto state = trainer.train_epoch(sets.train, make_batches(sets.train, 4, true, 1), TrainState{});
  EXPECT_EQ(state.step, 3u);
  EXPECT_EQ(state.epoch, 1u);
  EXPECT_TRUE(std::isfinite(state.running_loss));
}

TEST(TrainerFit, OneEpochHistoryAndBestCheckpointReload) {
  TempDir dir;
  const auto sets = small_sets(dir, 2);
  Classifier<float> model(ModelConfig::toy());
  Trainer<float> trainer(model, toy_train(1), ImageOptions{});
  const auto res = trainer.fit(sets.train, sets.val, dir / "run");
  ASSERT_EQ(res.history.size(), 1u);
  const std::string hist = read_text_file(res.history_file);
  EXPECT_EQ(std::count(hist.begin(), hist.end(), '\n'), 2);
  EXPECT_EQ(hist.rfind("epoch,loss,val_acc,val_f1,lr\n", 0), 0u);
  EXPECT_TRUE(fs::exists(res.last_checkpoint));

  auto loaded = load_classifier<float>(res.best_checkpoint);
  Trainer<float> again(loaded.model, toy_train(1), ImageOptions{});
  const double f1 = again.evaluate(sets.val).macro_f1;
  EXPECT_NEAR(f1, loaded.metadata.at("val_f1").get<double>(), 1e-9);
  EXPECT_NEAR(f1, res.history[0].val_f1, 1e-9);
}

TEST(TrainerFit, FrozenEncodersStayBitwiseIdentical) {
  TempDir dir;
  const auto sets = small_sets(dir, 2);
  Classifier<float> model(ModelConfig::toy());
  const auto enc_before = snapshot(model, true);
  const auto all_before = snapshot(model, false);
  Trainer<float> trainer(model, toy_train(2), ImageOptions{});
  trainer.fit(sets.train, sets.val, dir / "run");
  EXPECT_EQ(snapshot(model, true), enc_before);
  EXPECT_NE(snapshot(model, false), all_before);
}

TEST(TrainerFit, RerunWithSameSeedIsIdentical) {
  TempDir dir;
  const auto sets = small_sets(dir, 2);
  std::vector<std::vector<HistoryRow>> histories;
  std::vector<std::string> bytes;
  for (int run = 0; run < 2; ++run) {
    Classifier<float> model(ModelConfig::toy());
    Trainer<float> trainer(model, toy_train(3), ImageOptions{});
    const auto res = trainer.fit(sets.train, sets.val, dir / ("run" + std::to_string(run)));
    histories.push_back(res.history);
    bytes.push_back(read_text_file(res.last_checkpoint));
  }
  ASSERT_EQ(histories[0].size(), 3u);
  for (std::size_t e = 0; e < 3; ++e) {
    EXPECT_EQ(histories[0][e].loss, histories[1][e].loss);
    EXPECT_EQ(histories[0][e].val_f1, histories[1][e].val_f1);
  }
  EXPECT_EQ(bytes[0], bytes[1]);
}

TEST(TrainerFit, LoggedRateFollowsSchedule) {
  TempDir dir;
  const auto sets = small_sets(dir, 2);  // 14 samples, batch 4: 4 steps per epoch
  Classifier<float> model(ModelConfig::toy());
  TrainConfig cfg = toy_train(5);
  cfg.warmup_frac = 0.5;
  Trainer<float> trainer(model, cfg, ImageOptions{});
  const auto res = trainer.fit(sets.train, sets.val, dir / "run");
  const TrainConfig& used = trainer.config();
  ASSERT_EQ(used.warmup_steps.value(), 10u);
  for (const auto& row : res.history) EXPECT_EQ(row.lr, lr_schedule(used, row.epoch * 4 - 1));
  EXPECT_EQ(res.history.back().lr, 1e-3);
}

TEST(TrainerFit, FinetuneMovesEncoders) {
  TempDir dir;
  auto sets = small_sets(dir, 1);
  Classifier<float> model(ModelConfig::toy());
  const auto before = snapshot(model, true);
  TrainConfig cfg = toy_train(1);
  cfg.freeze_encoders = false;
  Trainer<float> trainer(model, cfg, ImageOptions{});
  trainer.train_epoch(sets.train, make_batches(sets.train, 4, false, 0), TrainState{});
  EXPECT_NE(snapshot(model, true), before);
}

TEST(TrainerFit, NonFiniteLossNamesBatchAndEpoch) {
  TempDir dir;
  const auto sets = small_sets(dir, 1);
  Classifier<float> model(ModelConfig::toy());
  Tensor<float> b = model.head().output_layer().bias();
  b.data()[0] = std::numeric_limits<float>::quiet_NaN();
  Trainer<float> trainer(model, toy_train(1), ImageOptions{});
  try {
    trainer.fit(sets.train, sets.val, dir / "run");
    FAIL();
  } catch (const NumericError& e) {
    const std::string m = e.what();
    EXPECT_NE(m.find("batch 0"), std::string::npos) << m;
    EXPECT_NE(m.find("epoch 1"), std::string::npos) << m;
  }
}

TEST(TrainerFit, TaxonomyMismatchRejected) {
  TempDir dir;
  const auto sets = small_sets(dir, 1);
  ModelConfig mc = ModelConfig::toy();
  mc.num_classes = 8;
  Classifier<float> model(mc);
  Trainer<float> trainer(model, toy_train(1), ImageOptions{});
  EXPECT_THROW(trainer.fit(sets.train, sets.val, dir / "run"), ValidationError);
}

TEST(TrainerFit, ImageSizeMismatchRejected) {
  Classifier<float> model(ModelConfig::toy());
  ImageOptions io;
  io.image_size = 112;
  EXPECT_THROW(Trainer<float>(model, toy_train(1), io), ConfigError);
}
