// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 if any
// criterion fails or exceeds its time budget.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <sstream>

#include "cli_support.hpp"
#include "oracle.hpp"
#include "support.hpp"

using namespace cer;
using cer::testing::run_cli;
using cer::testing::shell_quote;
using cer::testing::TempDir;

namespace {

/// Thrown by check() with the first violated condition.
struct Failed {
  std::string why;
};

void check(bool ok, const std::string& why) {
  if (!ok) throw Failed{why};
}

std::string q(const fs::path& p) { return shell_quote(p.string()); }

std::vector<std::vector<std::string>> read_rows(const fs::path& p) {
  std::istringstream in(read_text_file(p));
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);) rows.push_back(csv::split(line));
  return rows;
}

std::string fmt(const char* f, double v) {
  char buf[96];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

// 1 -----------------------------------------------------------------------

std::string metric_oracle() {
  Rng rng(31337);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto [t, p] = cer::testing::random_labels(rng, 7);
    const auto cm = confusion_matrix(t, p, 7);
    const auto o = cer::testing::oracle_metrics(t, p, 7);
    for (std::size_t i = 0; i < 7; ++i)
      for (std::size_t j = 0; j < 7; ++j) check(cm.at(i, j) == o.counts[i][j], "confusion count differs");
    const auto pr = per_class_precision(cm), rc = per_class_recall(cm), f1 = per_class_f1(cm);
    for (std::size_t i = 0; i < 7; ++i) {
      worst = std::max({worst, std::abs(pr[i] - o.precision[i]), std::abs(rc[i] - o.recall[i]),
                        std::abs(f1[i] - o.f1[i])});
    }
    worst = std::max({worst, std::abs(accuracy(cm) - o.accuracy), std::abs(macro_f1(f1) - o.macro_f1)});
  }
  check(worst <= 1e-9, "max deviation " + fmt("%.3g", worst));
  return "1000 pairs, max deviation " + fmt("%.2g", worst);
}

// 2 -----------------------------------------------------------------------

std::string fusion_contracts() {
  const ModelConfig full = ModelConfig::full();
  check(full.encoder_dim(EncoderKind::vit) == 768 && full.encoder_dim(EncoderKind::manet) == 1024 &&
            full.encoder_dim(EncoderKind::resnet) == 512,
        "full-scale encoder dims");
  check(full.feature_dim() == 2304, "full-scale feature dim " + std::to_string(full.feature_dim()));
  const ModelConfig toy = ModelConfig::toy();
  Classifier<float> model(toy);
  const std::size_t sum = toy.encoder_dim(EncoderKind::vit) + toy.encoder_dim(EncoderKind::manet) +
                          toy.encoder_dim(EncoderKind::resnet);
  check(model.feature_dim() == sum, "toy head input dim");
  Rng rng(2);
  double worst = 0.0;
  for (int b = 0; b < 100; ++b) {
    const std::size_t n = 1 + b % 3;
    Tensor<float> x({n, 3, 224, 224}, normal_values<float>(n * 3 * 224 * 224, 1.0, rng));
    const auto probs = model.predict_proba(x);
    check(probs.rows == n && probs.cols == 7, "probability shape");
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0.0;
      for (float v : probs.row(r)) {
        check(v >= 0.0f && v <= 1.0f, "probability outside [0,1]");
        s += v;
      }
      worst = std::max(worst, std::abs(s - 1.0));
    }
  }
  check(worst <= 1e-6, "row sum off by " + fmt("%.3g", worst));
  return "2304 = 768+1024+512; 100 batches, max |row sum - 1| " + fmt("%.2g", worst);
}

// 3 -----------------------------------------------------------------------

template <typename T>
std::vector<std::pair<std::string, Tensor<double>>> trainable(const ParameterStore<T>& store) {
  std::vector<std::pair<std::string, Tensor<double>>> out;
  for (const auto& e : store.entries()) {
    if (e.trainable) out.emplace_back(e.name, e.tensor);
  }
  return out;
}

std::string gradient_checks() {
  using cer::testing::gradcheck;
  using cer::testing::random_tensor;
  using cer::testing::randomize;
  double worst = 0.0;
  std::string where;
  auto note = [&](const cer::testing::GradCheckResult& r, const std::string& block, int seed) {
    if (r.max_rel_error > worst) {
      worst = r.max_rel_error;
      where = block + "/" + r.worst + " seed " + std::to_string(seed);
    }
  };
  for (int seed = 0; seed < 20; ++seed) {
    {
      Rng rng(1000 + seed);
      HeadConfig hc;
      hc.hidden_dims = {6, 5};
      FusionHead<double> head(9, hc, 7, rng);
      randomize(head.parameters(), rng, 0.5);
      auto x = random_tensor({3, 9}, rng);
      x.set_requires_grad(true);
      auto wrt = trainable(head.parameters());
      wrt.emplace_back("x", x);
      note(gradcheck([&] { return head.logits(x, false); }, wrt, rng), "mlp_head", seed);
    }
    {
      Rng rng(2000 + seed);
      ParameterStore<double> store;
      LocalAttentionBlock<double> block(store, "la", 6, 4, 5, rng);
      randomize(store, rng, 0.5);
      auto x = random_tensor({2, 6, 6, 6}, rng);
      x.set_requires_grad(true);
      auto wrt = trainable(store);
      wrt.emplace_back("x", x);
      note(gradcheck([&] { return block(x); }, wrt, rng), "local_attention", seed);
    }
    {
      Rng rng(3000 + seed);
      ParameterStore<double> store;
      TransformerBlock<double> block(store, "blk", 8, 2, 16, rng);
      randomize(store, rng, 0.4);
      auto x = random_tensor({2, 5, 8}, rng);
      x.set_requires_grad(true);
      auto wrt = trainable(store);
      wrt.emplace_back("x", x);
      note(gradcheck([&] { return block(x); }, wrt, rng), "transformer_block", seed);
    }
    {
      Rng rng(4000 + seed);
      ParameterStore<double> store;
      Bottleneck<double> block(store, "b", 8, 4, 2, rng);
      randomize(store, rng, 0.5);
      auto x = random_tensor({2, 8, 6, 6}, rng);
      x.set_requires_grad(true);
      auto wrt = trainable(store);
      wrt.emplace_back("x", x);
      note(gradcheck([&] { return block(x, true); }, wrt, rng), "bottleneck", seed);
    }
  }
  check(worst < 1e-4, "max relative error " + fmt("%.3g", worst) + " at " + where);
  return "4 blocks x 20 seeds, max relative error " + fmt("%.2g", worst) + " (" + where + ")";
}

// 4 -----------------------------------------------------------------------

std::string overfit_smoke() {
  TempDir dir("cer-overfit");
  const auto tr = cer::testing::make_synthetic(dir.path(), "overfit", 16, 11);
  const auto va = cer::testing::make_synthetic(dir.path(), "holdout", 2, 12);
  const auto train = load_manifest(tr.manifest, LabelSpace::compound(), Split::train);
  const auto val = load_manifest(va.manifest, LabelSpace::compound(), Split::val);
  check(train.size() == 112, "train set has " + std::to_string(train.size()) + " samples");

  ConfigMap cfg = default_config();
  overlay(cfg, preset_config("toy"));
  cfg["epochs"] = "200";
  cfg["seed"] = "7";
  const ResolvedConfig rc = resolve_config(cfg);
  ModelConfig mc = ModelConfig::toy();
  mc.head.dropout = rc.dropout;
  mc.seed = rc.train.seed;
  Classifier<float> model(mc);
  Trainer<float> trainer(model, rc.train, ImageOptions{});
  const FitResult res = trainer.fit(train, val, dir / "run");
  check(res.history.size() <= 200, "more than 200 epochs");
  check(res.history.back().loss < res.history.front().loss, "loss did not decrease");

  const double train_acc = trainer.evaluate(train).accuracy;
  check(train_acc >= 95.0, "train accuracy " + format_percent(train_acc));

  auto best = load_classifier<float>(res.best_checkpoint);
  const double logged = best.metadata.at("val_f1").get<double>();
  Trainer<float> reload(best.model, rc.train, ImageOptions{});
  const double again = reload.evaluate(val).macro_f1;
  check(std::abs(again - logged) <= 1e-9, "reloaded val F1 " + fmt("%.12g", again) + " vs " + fmt("%.12g", logged));
  return "train acc " + format_percent(train_acc) + " after " + std::to_string(res.history.size()) +
         " epochs, loss " + fmt("%.3f", res.history.front().loss) + " -> " + fmt("%.3f", res.history.back().loss) +
         ", best val F1 " + format_percent(logged) + " reproduced";
}

// 5 -----------------------------------------------------------------------

std::string schedule_and_loss() {
  TrainConfig cfg;
  cfg.warmup_steps = cfg.resolved_warmup(1000);
  check(cfg.base_lr == 5e-5, "default base_lr");
  check(lr_schedule(cfg, *cfg.warmup_steps) == 5e-5, "lr at warmup_steps");
  const Tensor<double> zeros({1, 7}, 0.0);
  const std::vector<std::size_t> label{3};
  const double ce = cross_entropy<double>(zeros, label).item();
  check(std::abs(ce - std::log(7.0)) <= 1e-12, "cross entropy " + fmt("%.17g", ce));

  Tensor<double> w({1}, 0.0);
  w.set_requires_grad(true);
  Adam<double> opt({w});
  double ow = 0.0, m = 0.0, v = 0.0, worst = 0.0;
  for (int t = 1; t <= 10; ++t) {
    w.zero_grad();
    w.mutable_grad()[0] = 2.0 * (w.data()[0] - 3.0);
    opt.step(0.1);
    const double g = 2.0 * (ow - 3.0);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    ow -= 0.1 * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
    worst = std::max(worst, std::abs(w.data()[0] - ow));
  }
  check(worst <= 1e-9, "Adam deviates by " + fmt("%.3g", worst));
  return "lr(warmup_steps)=5e-05, CE(0)=ln 7, Adam max deviation " + fmt("%.2g", worst);
}

// 6 and 7 share a CLI workspace --------------------------------------------

struct Workspace {
  TempDir dir{"cer-accept"};
  fs::path frames;

  Workspace() {
    cer::testing::make_synthetic(dir.path(), "src_a", 3, 21);
    cer::testing::make_synthetic(dir.path(), "src_b", 2, 22);
    frames = dir / "frames";
    fs::create_directories(frames);
    Rng rng(23);
    for (int i = 0; i < 10; ++i) {
      char name[32];
      std::snprintf(name, sizeof name, "frame_%02d.png", i);
      cv::imwrite((frames / name).string(), cer::testing::synthetic_image(static_cast<std::size_t>(i % 7), 64, rng));
    }
  }

  fs::path operator/(const std::string& leaf) const { return dir / leaf; }
};

void expect_ok(const cer::testing::CliResult& r, const std::string& what) {
  check(r.code == 0, what + " exited " + std::to_string(r.code) + ": " + r.output.substr(0, 400));
}

std::string merge_args(const Workspace& w, const fs::path& out) {
  return "--seed 4 --set val_fraction=0.3 --out " + q(out) + " merge-datasets " + q(w / "src_a.csv") + " " +
         q(w / "src_b.csv");
}

std::string train_args(const Workspace& w, const fs::path& out, int epochs) {
  return "--preset toy --deterministic --seed 9 --epochs " + std::to_string(epochs) + " --out " + q(out) +
         " train --model ensemble --train " + q(w / "merged/train.csv") + " --val " + q(w / "merged/val.csv");
}

std::string predict_args(const fs::path& ckpt, const fs::path& frames, const fs::path& out) {
  return "--deterministic --seed 9 predict --checkpoint " + q(ckpt) + " --frames " + q(frames) + " --output " + q(out);
}

bool same_files(const fs::path& a, const fs::path& b, std::string& diff) {
  for (const auto& e : fs::directory_iterator(a)) {
    const fs::path other = b / e.path().filename();
    if (!fs::exists(other) || read_text_file(e.path()) != read_text_file(other)) {
      diff = e.path().filename().string();
      return false;
    }
  }
  return true;
}

std::string determinism(Workspace& w) {
  expect_ok(run_cli(merge_args(w, w / "merged"), w / "m1.log"), "merge");
  expect_ok(run_cli(merge_args(w, w / "merged_again"), w / "m2.log"), "merge rerun");
  std::string diff;
  check(same_files(w / "merged", w / "merged_again", diff), "merge output differs: " + diff);

  expect_ok(run_cli(train_args(w, w / "det1", 3), w / "t1.log"), "train");
  expect_ok(run_cli(train_args(w, w / "det2", 3), w / "t2.log"), "train rerun");
  check(same_files(w / "det1", w / "det2", diff), "train output differs: " + diff);

  expect_ok(run_cli(predict_args(w / "det1/best.ckpt", w.frames, w / "p1.csv"), w / "p1.log"), "predict");
  expect_ok(run_cli(predict_args(w / "det1/best.ckpt", w.frames, w / "p2.csv"), w / "p2.log"), "predict rerun");
  check(read_text_file(w / "p1.csv") == read_text_file(w / "p2.csv"), "predict output differs");
  return "merge, train (3 epochs) and predict reruns are byte-identical";
}

void check_manifest(const fs::path& p) {
  const auto rows = read_rows(p);
  check(!rows.empty() && rows[0] == std::vector<std::string>{"image_path", "label_name", "source"},
        p.filename().string() + " header");
  load_manifest(p, LabelSpace::compound(), Split::train);
}

std::string end_to_end(Workspace& w) {
  if (!fs::exists(w / "merged/train.csv")) expect_ok(run_cli(merge_args(w, w / "merged"), w / "m.log"), "merge");
  check_manifest(w / "merged/train.csv");
  check_manifest(w / "merged/val.csv");
  const auto provenance = nlohmann::json::parse(read_text_file(w / "merged/merge.json"));
  check(provenance.at("train_count").get<int>() + provenance.at("val_count").get<int>() == 35, "merge counts");

  expect_ok(run_cli(train_args(w, w / "e2e", 5), w / "e2e_train.log"), "train");
  const auto hist = read_rows(w / "e2e/history.csv");
  check(hist.size() == 6 && hist[0] == std::vector<std::string>{"epoch", "loss", "val_acc", "val_f1", "lr"},
        "history.csv schema");
  check(fs::exists(w / "e2e/best.ckpt") && fs::exists(w / "e2e/last.ckpt"), "checkpoints");

  expect_ok(run_cli("--out " + q(w / "e2e_eval") + " evaluate --checkpoint " + q(w / "e2e/best.ckpt") +
                        " --manifest " + q(w / "merged/val.csv"),
                    w / "e2e_eval.log"),
            "evaluate");
  const auto table = read_rows(w / "e2e_eval/metrics.csv");
  check(table.size() == 10 && table[0] == std::vector<std::string>{"row_name", "value"}, "metrics table header");
  check(table[8][0] == "acc" && table[9][0] == "F1", "metrics table acc/F1 rows");
  const auto conf = read_rows(w / "e2e_eval/confusion.csv");
  check(conf.size() == 8 && conf[0].size() == 8 && conf[0][0] == "true\\pred", "confusion CSV shape");
  std::uint64_t total = 0;
  for (std::size_t i = 1; i < 8; ++i)
    for (std::size_t j = 1; j < 8; ++j) total += std::stoull(conf[i][j]);
  check(total == static_cast<std::uint64_t>(provenance.at("val_count").get<int>()), "confusion total");
  check(!cv::imread((w / "e2e_eval/confusion.png").string()).empty(), "heatmap PNG");

  expect_ok(run_cli(predict_args(w / "e2e/best.ckpt", w.frames, w / "e2e_pred.csv"), w / "e2e_pred.log"), "predict");
  const auto pred = read_rows(w / "e2e_pred.csv");
  check(pred.size() == 11, "prediction CSV has " + std::to_string(pred.size() - 1) + " rows");
  std::vector<std::string> header{"frame", "pred_label", "confidence"};
  for (int c = 0; c < 7; ++c) header.push_back("p_" + std::to_string(c));
  check(pred[0] == header, "prediction CSV header");
  for (std::size_t r = 1; r < pred.size(); ++r) {
    check(pred[r].size() == 10, "prediction row width");
    double s = 0.0;
    for (std::size_t c = 3; c < 10; ++c) s += std::stod(pred[r][c]);
    check(std::abs(s - 1.0) <= 1e-6, "prediction row sums to " + fmt("%.9f", s));
    check(LabelSpace::compound().find(pred[r][1]).has_value(), "unknown predicted label");
  }
  return "merge -> train (5 epochs) -> evaluate -> predict (10 frames): all exit 0, outputs well-formed";
}

// 8 -----------------------------------------------------------------------

std::string degenerate_predictor() {
  TempDir dir("cer-degenerate");
  const auto set = cer::testing::make_synthetic(dir.path(), "balanced", 5, 3, 16);
  const auto val = load_manifest(set.manifest, LabelSpace::compound(), Split::val);
  const auto report =
      evaluate([](std::span<const std::size_t> idx) { return std::vector<std::size_t>(idx.size(), 0); }, val, 8);
  const double closed_acc = 100.0 / 7.0, closed_f1 = (2.0 / 8.0 * 100.0) / 7.0;
  const auto o = cer::testing::oracle_metrics(val.labels(), std::vector<std::size_t>(val.size(), 0), 7);
  check(std::abs(report.accuracy - closed_acc) <= 1e-6, "accuracy " + fmt("%.9g", report.accuracy));
  check(std::abs(report.macro_f1 - closed_f1) <= 1e-6, "macro-F1 " + fmt("%.9g", report.macro_f1));
  check(std::abs(report.macro_f1 - o.macro_f1) <= 1e-6 && std::abs(report.accuracy - o.accuracy) <= 1e-6,
        "disagrees with oracle");
  return "acc " + fmt("%.4f", report.accuracy) + " (=100/7), macro-F1 " + fmt("%.4f", report.macro_f1) + " (=25/7)";
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double budget_s;
    std::function<std::string()> run;
  };
  Workspace* ws = nullptr;
  auto workspace = [&]() -> Workspace& {
    if (!ws) ws = new Workspace();
    return *ws;
  };
  const std::vector<Criterion> criteria = {
      {1, "metric oracle equivalence", 10, metric_oracle},
      {2, "fusion contracts", 30, fusion_contracts},
      {3, "gradient checks", 120, gradient_checks},
      {4, "overfit smoke test", 300, overfit_smoke},
      {5, "schedule and loss identities", 5, schedule_and_loss},
      {6, "determinism", 360, [&] { return determinism(workspace()); }},
      {7, "end-to-end CLI", 180, [&] { return end_to_end(workspace()); }},
      {8, "degenerate predictor closed form", 60, degenerate_predictor},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = true;
    try {
      detail = c.run();
    } catch (const Failed& f) {
      ok = false;
      detail = f.why;
    } catch (const std::exception& e) {
      ok = false;
      detail = std::string("exception: ") + e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (ok && secs > c.budget_s) {
      ok = false;
      detail += "; took longer than the " + fmt("%.0f", c.budget_s) + " s budget";
    }
    failures += ok ? 0 : 1;
    std::printf("%s criterion %d (%s) [%.1f s]: %s\n", ok ? "PASS" : "FAIL", c.id, c.name, secs, detail.c_str());
    std::fflush(stdout);
  }
  delete ws;
  std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failures, criteria.size());
  return failures == 0 ? 0 : 1;
}
