#pragma once

// Checkpoint archive: a single binary file holding a JSON metadata record
// and a list of named, shape-tagged numeric arrays.
//
//   magic     8 bytes  "CERCKPT1"
//   meta_len  u64      followed by meta_len bytes of UTF-8 JSON
//   count     u64      number of entries, then per entry:
//     name_len u32, name bytes, dtype u8 (0 = f32, 1 = f64),
//     rank u32, rank x u64 dims, raw little-endian values
//   checksum  u64      FNV-1a over every preceding byte
//
// Values are stored verbatim, so a save/load round trip is bit-exact.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <string>
#include <type_traits>
#include <vector>

#include <nlohmann/json.hpp>

#include "cer/encoder.hpp"
#include "cer/error.hpp"
#include "cer/fusion.hpp"
#include "cer/io.hpp"
#include "cer/label_space.hpp"

namespace cer {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr const char* kToolkitVersion = "0.1.0";
inline constexpr char kCheckpointMagic[8] = {'C', 'E', 'R', 'C', 'K', 'P', 'T', '1'};

enum class DType : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
constexpr DType dtype_of() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? DType::f32 : DType::f64;
}

inline std::size_t dtype_size(DType d) { return d == DType::f32 ? 4 : 8; }

struct CheckpointEntry {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> bytes;

  template <typename T>
  std::vector<T> values() const {
    const std::size_t n = shape_numel(shape);
    std::vector<T> out(n);
    if (dtype == dtype_of<T>()) {
      std::memcpy(out.data(), bytes.data(), n * sizeof(T));
    } else if (dtype == DType::f32) {
      for (std::size_t i = 0; i < n; ++i) {
        float v;
        std::memcpy(&v, bytes.data() + i * 4, 4);
        out[i] = static_cast<T>(v);
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        double v;
        std::memcpy(&v, bytes.data() + i * 8, 8);
        out[i] = static_cast<T>(v);
      }
    }
    return out;
  }
};

template <typename T>
CheckpointEntry make_entry(std::string name, const Tensor<T>& t) {
  CheckpointEntry e{std::move(name), dtype_of<T>(), t.shape(), {}};
  e.bytes.resize(t.numel() * sizeof(T));
  std::memcpy(e.bytes.data(), t.data().data(), e.bytes.size());
  return e;
}

struct Checkpoint {
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const {
    for (const auto& e : entries) {
      if (e.name == name) return &e;
    }
    return nullptr;
  }
};

namespace detail {

template <typename U>
void put(std::string& out, U v) {
  char buf[sizeof(U)];
  std::memcpy(buf, &v, sizeof(U));
  out.append(buf, sizeof(U));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <typename U>
  U get() {
    need(sizeof(U));
    U v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::string_view take(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (n > bytes_.size() - pos_) throw FormatError("checkpoint is truncated");
  }

  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_checkpoint(const Checkpoint& ckpt) {
  std::string out(kCheckpointMagic, 8);
  const std::string meta = ckpt.metadata.dump();
  detail::put<std::uint64_t>(out, meta.size());
  out += meta;
  detail::put<std::uint64_t>(out, ckpt.entries.size());
  for (const auto& e : ckpt.entries) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.name.size()));
    out += e.name;
    detail::put<std::uint8_t>(out, static_cast<std::uint8_t>(e.dtype));
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.shape.size()));
    for (std::size_t d : e.shape) detail::put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(e.bytes.data()), e.bytes.size());
  }
  detail::put<std::uint64_t>(out, fnv1a64(out));
  return out;
}

inline Checkpoint parse_checkpoint(std::string_view bytes) {
  if (bytes.size() < 16 || bytes.substr(0, 8) != std::string_view(kCheckpointMagic, 8)) {
    throw FormatError("not a checkpoint archive (bad magic)");
  }
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 8, 8);
  const std::string_view body = bytes.substr(0, bytes.size() - 8);
  if (fnv1a64(body) != stored) throw FormatError("checkpoint checksum mismatch (file is corrupted)");
  detail::Reader in(body);
  in.take(8);
  Checkpoint ckpt;
  const auto meta_len = in.get<std::uint64_t>();
  try {
    ckpt.metadata = nlohmann::json::parse(in.take(meta_len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata is not valid JSON: ") + e.what());
  }
  const auto count = in.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    CheckpointEntry e;
    e.name = std::string(in.take(in.get<std::uint32_t>()));
    const auto dt = in.get<std::uint8_t>();
    if (dt > 1) throw FormatError("entry '" + e.name + "' has unknown dtype " + std::to_string(dt));
    e.dtype = static_cast<DType>(dt);
    const auto rank = in.get<std::uint32_t>();
    if (rank > 8) throw FormatError("entry '" + e.name + "' has implausible rank " + std::to_string(rank));
    for (std::uint32_t r = 0; r < rank; ++r) e.shape.push_back(static_cast<std::size_t>(in.get<std::uint64_t>()));
    const auto raw = in.take(shape_numel(e.shape) * dtype_size(e.dtype));
    e.bytes.assign(raw.begin(), raw.end());
    ckpt.entries.push_back(std::move(e));
  }
  if (in.pos() != body.size()) throw FormatError("trailing bytes after the last checkpoint entry");
  return ckpt;
}

inline void write_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  write_text_file(path, serialize_checkpoint(ckpt));
}

inline Checkpoint read_checkpoint(const fs::path& path) { return parse_checkpoint(read_text_file(path)); }

struct LoadReport {
  std::vector<std::string> loaded;
  std::vector<std::string> skipped;  ///< "name: reason"
  std::vector<std::string> missing;  ///< targets absent from the checkpoint
};

/// Copies matching entries into target tensors. `prefix` (e.g. "vit.") is
/// stripped from checkpoint names before matching. With strict on, any
/// unmatched, missing or mis-shaped entry is an error listing the names.
template <typename T>
LoadReport load_into(const std::vector<std::pair<std::string, Tensor<T>>>& targets, const Checkpoint& ckpt,
                     bool strict, const std::string& prefix = {}) {
  LoadReport report;
  std::vector<bool> hit(targets.size(), false);
  for (const auto& e : ckpt.entries) {
    std::string local = e.name;
    if (!prefix.empty() && local.rfind(prefix, 0) == 0) local = local.substr(prefix.size());
    std::size_t idx = targets.size();
    for (std::size_t i = 0; i < targets.size(); ++i) {
      if (targets[i].first == local) idx = i;
    }
    if (idx == targets.size()) {
      report.skipped.push_back(e.name + ": not a parameter of the target");
      continue;
    }
    Tensor<T> t = targets[idx].second;
    if (t.shape() != e.shape) {
      report.skipped.push_back(e.name + ": shape " + shape_str(e.shape) + " != expected " + shape_str(t.shape()));
      continue;
    }
    const auto values = e.values<T>();
    std::copy(values.begin(), values.end(), t.data().begin());
    hit[idx] = true;
    report.loaded.push_back(e.name);
  }
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!hit[i]) report.missing.push_back(targets[i].first);
  }
  if (strict && (!report.skipped.empty() || !report.missing.empty())) {
    std::string msg = "strict checkpoint load failed;";
    for (const auto& s : report.skipped) msg += " mismatched " + s + ";";
    for (const auto& s : report.missing) msg += " missing " + s + ";";
    throw ShapeError(msg);
  }
  return report;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>>> named_tensors(const ParameterStore<T>& store) {
  std::vector<std::pair<std::string, Tensor<T>>> out;
  for (const auto& e : store.entries()) out.emplace_back(e.name, e.tensor);
  return out;
}

/// Saves one encoder's parameters under the "<encoder>." prefix.
template <typename T>
void save_encoder(const fs::path& path, const Encoder<T>& encoder) {
  Checkpoint ckpt;
  const std::string prefix = std::string(to_string(encoder.kind())) + ".";
  ckpt.metadata = {{"format", "cer-checkpoint"},
                   {"toolkit_version", kToolkitVersion},
                   {"content", "encoder"},
                   {"encoder", std::string(to_string(encoder.kind()))},
                   {"config", encoder.config_json()}};
  for (const auto& e : encoder.parameters().entries()) ckpt.entries.push_back(make_entry(prefix + e.name, e.tensor));
  write_checkpoint(path, ckpt);
}

/// Initialises an encoder from a checkpoint. Entries named "<encoder>.x"
/// or plain "x" match parameter x; everything else (typically a classifier
/// head) is reported as skipped, or rejected when strict.
template <typename T>
LoadReport load_pretrained(Encoder<T>& encoder, const fs::path& path, bool strict) {
  const Checkpoint ckpt = read_checkpoint(path);
  return load_into<T>(named_tensors(encoder.parameters()), ckpt, strict,
                      std::string(to_string(encoder.kind())) + ".");
}

template <typename T>
Checkpoint classifier_checkpoint(const Classifier<T>& model, const LabelSpace& labels,
                                 const nlohmann::json& extra = nlohmann::json::object()) {
  if (labels.size() != model.num_classes()) {
    throw ValidationError("classifier has " + std::to_string(model.num_classes()) + " classes but taxonomy is " +
                          labels.describe());
  }
  Checkpoint ckpt;
  ckpt.metadata = {{"format", "cer-checkpoint"},
                   {"toolkit_version", kToolkitVersion},
                   {"content", "classifier"},
                   {"dtype", dtype_of<T>() == DType::f32 ? "f32" : "f64"},
                   {"model", model_config_json(model.config())},
                   {"labels", {{"id", labels.id()}, {"names", labels.names()}}}};
  for (const auto& [k, v] : extra.items()) ckpt.metadata[k] = v;
  for (const auto& [name, t] : model.named_tensors()) ckpt.entries.push_back(make_entry(name, t));
  return ckpt;
}

template <typename T>
void save_classifier(const fs::path& path, const Classifier<T>& model, const LabelSpace& labels,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  write_checkpoint(path, classifier_checkpoint(model, labels, extra));
}

template <typename T>
struct LoadedClassifier {
  Classifier<T> model;
  LabelSpace labels;
  nlohmann::json metadata;
};

/// Rebuilds a classifier from its own metadata and loads it strictly.
template <typename T>
LoadedClassifier<T> load_classifier(const fs::path& path) {
  const Checkpoint ckpt = read_checkpoint(path);
  if (ckpt.metadata.value("content", "") != "classifier") {
    throw FormatError("'" + path.string() + "' is not a classifier checkpoint");
  }
  ModelConfig cfg;
  LabelSpace labels = LabelSpace::compound();
  try {
    cfg = model_config_from_json(ckpt.metadata.at("model"));
    const auto& lab = ckpt.metadata.at("labels");
    labels = LabelSpace(lab.at("id").get<std::string>(), lab.at("names").get<std::vector<std::string>>());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("checkpoint metadata is incomplete: " + std::string(e.what()));
  }
  Classifier<T> model(cfg);
  load_into<T>(model.named_tensors(), ckpt, /*strict=*/true);
  return {std::move(model), std::move(labels), ckpt.metadata};
}

}  // namespace cer
