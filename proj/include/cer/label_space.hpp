#pragma once

#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "cer/error.hpp"

namespace cer {

/// Fixed, ordered class taxonomy with a bijective name <-> index mapping.
class LabelSpace {
 public:
  LabelSpace(std::string id, std::vector<std::string> names) : id_(std::move(id)), names_(std::move(names)) {
    if (names_.empty()) throw ValidationError("label space '" + id_ + "' has no classes");
    std::set<std::string> seen;
    for (const auto& n : names_) {
      if (n.empty()) throw ValidationError("label space '" + id_ + "' contains an empty class name");
      if (!seen.insert(n).second) throw ValidationError("label space '" + id_ + "' repeats class '" + n + "'");
    }
  }

  /// The seven compound expressions, in table order.
  static const LabelSpace& compound() {
    static const LabelSpace space("compound", {"Angrily Surprised", "Disgustedly Surprised", "Fearfully Surprised",
                                               "Happily Surprised", "Sadly Angry", "Sadly Fearful", "Sadly Surprised"});
    return space;
  }

  /// The eight single (basic) expressions, in table order.
  static const LabelSpace& single() {
    static const LabelSpace space(
        "single", {"Anger", "Contempt", "Disgust", "Fear", "Happiness", "Neutral", "Sadness", "Surprise"});
    return space;
  }

  static const LabelSpace& builtin(std::string_view id) {
    if (id == "compound") return compound();
    if (id == "single") return single();
    throw ConfigError("unknown label space '" + std::string(id) + "' (expected compound or single)");
  }

  const std::string& id() const { return id_; }
  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }

  const std::string& name(std::size_t index) const {
    if (index >= names_.size()) {
      throw IndexError("class index " + std::to_string(index) + " out of range for " + describe());
    }
    return names_[index];
  }

  std::optional<std::size_t> find(std::string_view name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return i;
    }
    return std::nullopt;
  }

  std::size_t index(std::string_view name) const {
    if (auto i = find(name)) return *i;
    throw ValidationError("unknown label '" + std::string(name) + "' in " + describe());
  }

  std::string describe() const { return id_ + " (" + std::to_string(names_.size()) + " classes)"; }

  friend bool operator==(const LabelSpace& a, const LabelSpace& b) { return a.names_ == b.names_; }

 private:
  std::string id_;
  std::vector<std::string> names_;
};

}  // namespace cer
