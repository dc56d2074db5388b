// cer: dataset merging, training, evaluation and frame prediction.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cer/cer.hpp"

namespace {

using namespace cer;

struct Globals {
  std::string config_file;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string preset = "full";
  bool deterministic = false;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<double> base_lr;
  std::optional<std::size_t> workers;
  std::vector<std::string> sets;
};

/// defaults < preset < config file < CER_* environment < flags
ConfigMap merged_config(const Globals& g) {
  ConfigMap cfg = default_config();
  overlay(cfg, preset_config(g.preset));
  if (!g.config_file.empty()) overlay(cfg, load_config_file(g.config_file));
  overlay(cfg, env_config());
  ConfigMap flags;
  for (const auto& kv : g.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects key=value, got '" + kv + "'");
    flags[kv.substr(0, eq)] = kv.substr(eq + 1);
  }
  std::ostringstream lr;
  if (g.seed) flags["seed"] = std::to_string(*g.seed);
  if (g.epochs) flags["epochs"] = std::to_string(*g.epochs);
  if (g.batch_size) flags["batch_size"] = std::to_string(*g.batch_size);
  if (g.base_lr) {
    lr << std::setprecision(17) << *g.base_lr;
    flags["base_lr"] = lr.str();
  }
  if (g.workers) flags["workers"] = std::to_string(*g.workers);
  if (g.deterministic) flags["workers"] = "1";
  overlay(cfg, flags);
  return cfg;
}

/// --out if given, otherwise runs/<timestamp>-<config hash>. Deterministic
/// runs drop the timestamp so reruns land in the same place.
fs::path run_dir(const Globals& g, const std::string& command, const ConfigMap& cfg) {
  if (!g.out.empty()) return g.out;
  ConfigMap keyed = cfg;
  keyed["command"] = command;
  const std::string hash = config_hash(keyed);
  if (g.deterministic) return fs::path("runs") / hash;
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y%m%d-%H%M%S") << "-" << hash;
  return fs::path("runs") / os.str();
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw IoError("cannot create directory '" + dir.string() + "'");
}

std::string file_hash(const fs::path& p) { return hex64(fnv1a64(read_text_file(p))); }

ImageOptions image_options_from(const nlohmann::json& metadata, const ModelConfig& mc) {
  ImageOptions io;
  io.image_size = mc.image_size();
  if (metadata.contains("image")) {
    const auto& im = metadata.at("image");
    io.image_size = im.value("image_size", io.image_size);
    if (im.contains("mean")) im.at("mean").get_to(io.mean);
    if (im.contains("std")) im.at("std").get_to(io.std);
  }
  io.validate();
  return io;
}

// merge-datasets --------------------------------------------------------

struct MergeArgs {
  std::vector<std::string> inputs;
  bool force = false;
};

int cmd_merge(const Globals& g, const MergeArgs& a) {
  const ConfigMap cfg = merged_config(g);
  const ResolvedConfig rc = resolve_config(cfg);
  const fs::path out = run_dir(g, "merge-datasets", cfg);
  const fs::path train_csv = out / "train.csv", val_csv = out / "val.csv", merge_json = out / "merge.json";
  if (!a.force) {
    for (const auto& p : {train_csv, val_csv, merge_json}) {
      if (fs::exists(p)) throw IoError("'" + p.string() + "' already exists (use --force to overwrite)");
    }
  }
  const LabelSpace& space = detect_label_space(a.inputs.front());
  std::vector<DatasetManifest> manifests;
  nlohmann::json inputs = nlohmann::json::array();
  for (const auto& in : a.inputs) {
    const LabelSpace& s = detect_label_space(in);
    if (!(s == space)) {
      throw ValidationError("'" + in + "' uses " + s.describe() + " but '" + a.inputs.front() + "' uses " +
                            space.describe());
    }
    manifests.push_back(load_manifest(in, space, Split::train));
    inputs.push_back({{"path", in}, {"fnv1a64", file_hash(in)}, {"records", manifests.back().size()}});
  }
  const auto [train, val] = merge_unity(manifests, rc.val_fraction, rc.train.seed);
  ensure_dir(out);
  write_manifest(train, train_csv);
  write_manifest(val, val_csv);
  const nlohmann::json record = {{"inputs", inputs},
                                 {"seed", rc.train.seed},
                                 {"val_fraction", rc.val_fraction},
                                 {"label_space", space.id()},
                                 {"train_count", train.size()},
                                 {"val_count", val.size()}};
  write_text_file(merge_json, record.dump(2) + "\n");
  std::printf("merged %zu records: %zu train, %zu val -> %s\n", train.size() + val.size(), train.size(), val.size(),
              out.string().c_str());
  return 0;
}

// train -----------------------------------------------------------------

struct TrainArgs {
  std::string model = "ensemble";
  std::string train;
  std::string val;
  std::vector<std::string> pretrained;
  bool strict = false;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  const ConfigMap cfg = merged_config(g);
  const ResolvedConfig rc = resolve_config(cfg);
  const ModelKind kind = parse_model_kind(a.model);
  ModelConfig mc = g.preset == "toy" ? ModelConfig::toy(kind) : ModelConfig::full(kind);
  mc.head.dropout = rc.dropout;
  mc.seed = rc.train.seed;

  const LabelSpace& space = detect_label_space(a.train);
  const LabelSpace& val_space = detect_label_space(a.val);
  if (!(space == val_space)) {
    throw ValidationError("train manifest uses " + space.describe() + " but val manifest uses " +
                          val_space.describe());
  }
  mc.num_classes = space.size();
  const DatasetManifest train = load_manifest(a.train, space, Split::train);
  const DatasetManifest val = load_manifest(a.val, space, Split::val);

  Classifier<float> model(mc);
  for (const auto& entry : a.pretrained) {
    const auto eq = entry.find('=');
    if (eq == std::string::npos) throw ConfigError("--pretrained expects encoder=path, got '" + entry + "'");
    const std::string name = entry.substr(0, eq);
    Encoder<float>* enc = nullptr;
    for (auto& e : model.encoders()) {
      if (to_string(e->kind()) == name) enc = e.get();
    }
    if (!enc) throw ConfigError("--pretrained: model '" + a.model + "' has no '" + name + "' encoder");
    const LoadReport rep = load_pretrained(*enc, entry.substr(eq + 1), a.strict);
    std::printf("%s: loaded %zu tensors, skipped %zu, missing %zu\n", name.c_str(), rep.loaded.size(),
                rep.skipped.size(), rep.missing.size());
  }

  ImageOptions io;
  io.image_size = mc.image_size();
  const fs::path out = run_dir(g, "train", cfg);
  ensure_dir(out);
  nlohmann::json resolved(cfg);
  resolved["model"] = a.model;
  resolved["preset"] = g.preset;
  resolved["train"] = a.train;
  resolved["val"] = a.val;
  write_text_file(out / "config.json", resolved.dump(2) + "\n");

  Trainer<float> trainer(model, rc.train, io);
  const std::size_t epochs = rc.train.epochs;
  const FitResult res = trainer.fit(train, val, out, [&](const HistoryRow& r) {
    std::printf("epoch %zu/%zu  loss %.4f  val_acc %s  val_f1 %s  lr %.3g\n", r.epoch, epochs, r.loss,
                format_percent(r.val_acc).c_str(), format_percent(r.val_f1).c_str(), r.lr);
    std::fflush(stdout);
  });
  std::printf("best val_f1 %s -> %s\n", format_percent(res.state.best_val_f1).c_str(),
              res.best_checkpoint.string().c_str());
  return 0;
}

// evaluate --------------------------------------------------------------

struct EvalArgs {
  std::string checkpoint;
  std::string manifest;
};

int cmd_evaluate(const Globals& g, const EvalArgs& a) {
  const ConfigMap cfg = merged_config(g);
  const ResolvedConfig rc = resolve_config(cfg);
  auto loaded = load_classifier<float>(a.checkpoint);
  const LabelSpace& space = detect_label_space(a.manifest);
  if (!(space == loaded.labels)) {
    throw ValidationError("checkpoint taxonomy " + loaded.labels.describe() + " does not match manifest taxonomy " +
                          space.describe());
  }
  const DatasetManifest data = load_manifest(a.manifest, loaded.labels, Split::val);
  const ImageOptions io = image_options_from(loaded.metadata, loaded.model.config());
  const EvalReport report = evaluate(
      [&](std::span<const std::size_t> idx) {
        const auto batch = load_batch<float>(data, idx, io, rc.workers);
        std::vector<std::size_t> out;
        for (const auto& p : predict_labels(loaded.model.predict_proba(batch.pixels), loaded.labels)) {
          out.push_back(p.label_index);
        }
        return out;
      },
      data, rc.train.batch_size);
  const fs::path out = run_dir(g, "evaluate", cfg);
  const ReportFiles files = export_report(report, out);
  std::fputs(format_report(report).c_str(), stdout);
  std::printf("wrote %s, %s, %s\n", files.metrics_table.string().c_str(), files.confusion_csv.string().c_str(),
              files.heatmap.string().c_str());
  return 0;
}

// predict ---------------------------------------------------------------

struct PredictArgs {
  std::string checkpoint;
  std::string frames;
  std::string output;
  bool strict = false;
};

int cmd_predict(const Globals& g, const PredictArgs& a) {
  const ConfigMap cfg = merged_config(g);
  const ResolvedConfig rc = resolve_config(cfg);
  auto loaded = load_classifier<float>(a.checkpoint);
  const ImageOptions io = image_options_from(loaded.metadata, loaded.model.config());
  const std::vector<fs::path> frames = list_frames(a.frames);
  if (frames.empty()) throw ValidationError("'" + a.frames + "' contains no image files");

  const std::size_t C = loaded.labels.size();
  std::vector<std::string> rows(frames.size());
  std::vector<std::size_t> pending;
  std::vector<float> pixels;
  std::size_t failures = 0;
  const std::size_t plane = 3 * io.image_size * io.image_size;

  auto flush = [&] {
    if (pending.empty()) return;
    const Tensor<float> batch({pending.size(), 3, io.image_size, io.image_size}, std::move(pixels));
    pixels = {};
    const auto probs = loaded.model.predict_proba(batch);
    const auto preds = predict_labels(probs, loaded.labels);
    char buf[64];
    for (std::size_t k = 0; k < pending.size(); ++k) {
      std::string& row = rows[pending[k]];
      std::snprintf(buf, sizeof buf, ",%.9f", preds[k].confidence);
      row += "," + csv::escape(preds[k].label_name) + buf;
      for (float p : probs.row(k)) {
        std::snprintf(buf, sizeof buf, ",%.9f", static_cast<double>(p));
        row += buf;
      }
    }
    pending.clear();
  };

  for (std::size_t i = 0; i < frames.size(); ++i) {
    rows[i] = csv::escape(frames[i].filename().string());
    std::vector<float> img;
    try {
      img = load_image_raw<float>(frames[i].string(), io.image_size);
    } catch (const IoError& e) {
      if (a.strict) throw;
      ++failures;
      std::fprintf(stderr, "warning: %s\n", e.what());
      rows[i] += std::string(C + 2, ',');
      continue;
    }
    normalize_image<float>(img, io);
    if (img.size() != plane) throw ShapeError("decoded frame has the wrong size");
    pixels.insert(pixels.end(), img.begin(), img.end());
    pending.push_back(i);
    if (pending.size() == rc.train.batch_size) flush();
  }
  flush();

  std::string text = "frame,pred_label,confidence";
  for (std::size_t c = 0; c < C; ++c) text += ",p_" + std::to_string(c);
  text += "\n";
  for (const auto& r : rows) text += r + "\n";

  fs::path out_csv = a.output;
  if (out_csv.empty()) out_csv = run_dir(g, "predict", cfg) / "predictions.csv";
  if (out_csv.has_parent_path()) ensure_dir(out_csv.parent_path());
  write_text_file(out_csv, text);
  std::printf("predicted %zu frames (%zu undecodable) -> %s\n", frames.size() - failures, failures,
              out_csv.string().c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compound expression recognition toolkit"};
  app.require_subcommand(1);
  app.fallthrough();

  Globals g;
  app.add_option("--config", g.config_file, "key = value config file")->check(CLI::ExistingFile);
  app.add_option("--seed", g.seed, "seed for initialisation, shuffling, augmentation and splitting");
  app.add_option("--out", g.out, "output directory (default runs/<timestamp>-<hash>)");
  app.add_option("--preset", g.preset, "model and hyperparameter scale")->check(CLI::IsMember({"toy", "full"}));
  app.add_flag("--deterministic", g.deterministic, "single-threaded, batch-invariant arithmetic");
  app.add_option("--epochs", g.epochs, "training epochs");
  app.add_option("--batch-size", g.batch_size, "batch size");
  app.add_option("--base-lr", g.base_lr, "learning rate after warmup");
  app.add_option("--workers", g.workers, "image decoding threads");
  app.add_option("--set", g.sets, "override any config key (key=value), repeatable");

  MergeArgs merge;
  auto* m = app.add_subcommand("merge-datasets", "merge manifests and split into train/val");
  m->add_option("inputs", merge.inputs, "input manifest CSVs")->required()->check(CLI::ExistingFile);
  m->add_flag("--force", merge.force, "overwrite existing outputs");

  TrainArgs train;
  auto* t = app.add_subcommand("train", "train a classifier");
  t->add_option("--model", train.model, "vit, manet, resnet or ensemble")
      ->check(CLI::IsMember({"vit", "manet", "resnet", "ensemble"}));
  t->add_option("--train", train.train, "training manifest")->required()->check(CLI::ExistingFile);
  t->add_option("--val", train.val, "validation manifest")->required()->check(CLI::ExistingFile);
  t->add_option("--pretrained", train.pretrained, "encoder=checkpoint initialisation, repeatable");
  t->add_flag("--strict", train.strict, "reject pretrained checkpoints with unmatched tensors");

  EvalArgs ev;
  auto* e = app.add_subcommand("evaluate", "score a checkpoint on a labelled manifest");
  e->add_option("--checkpoint", ev.checkpoint, "classifier checkpoint")->required()->check(CLI::ExistingFile);
  e->add_option("--manifest", ev.manifest, "labelled manifest")->required()->check(CLI::ExistingFile);

  PredictArgs pr;
  auto* p = app.add_subcommand("predict", "predict every frame in a directory");
  p->add_option("--checkpoint", pr.checkpoint, "classifier checkpoint")->required()->check(CLI::ExistingFile);
  p->add_option("--frames", pr.frames, "directory of frames")->required()->check(CLI::ExistingDirectory);
  p->add_option("--output", pr.output, "prediction CSV (default <out>/predictions.csv)");
  p->add_flag("--strict", pr.strict, "abort on the first undecodable frame");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return 2;
  }

  DeterministicGuard det(g.deterministic);
  try {
    if (*m) return cmd_merge(g, merge);
    if (*t) return cmd_train(g, train);
    if (*e) return cmd_evaluate(g, ev);
    if (*p) return cmd_predict(g, pr);
  } catch (const ConfigError& ex) {
    std::fprintf(stderr, "configuration error: %s\n", ex.what());
    return 2;
  } catch (const std::exception& ex) {
    std::fprintf(stderr, "error: %s\n", ex.what());
    return 1;
  }
  return 2;
}
