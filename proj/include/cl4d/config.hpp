#pragma once

// Flat key-value config files: one `key = value` per line, # comments.
// Unknown keys are hard errors. CLI flags override file values.

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "cl4d/common.hpp"
#include "cl4d/contrastive.hpp"
#include "cl4d/corpus.hpp"
#include "cl4d/model.hpp"

namespace cl4d::config {

inline const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      // shared
      "seed", "threads",
      // model
      "n_layers", "n_heads", "d_model", "d_ff", "max_len", "pooling",
      "pad_side", "pad_policy",
      // tokenizer
      "vocab_size",
      // train
      "temperature", "lr", "weight_decay", "beta1", "beta2", "adam_eps",
      "batch_size", "epochs", "use_in_batch", "use_hard_negatives",
      "grad_clip_norm",
      // filters
      "min_query_tokens", "min_code_lines", "max_code_chars",
      "reject_test_and_ctor_names", "max_non_ascii_ratio",
      "reject_query_in_code",
      // split
      "ratios",
      // miner
      "miner", "near_dup_threshold",
      // pipeline io
      "input_dir", "language", "pairs", "out_dir",
  };
  return keys;
}

class Config {
 public:
  Config() = default;

  static Config parse(std::string_view text, const std::string& origin = "") {
    Config cfg;
    std::size_t line_no = 0;
    for (const auto& raw : split_lines(text)) {
      ++line_no;
      std::string_view line = trim_view(raw);
      if (line.empty() || line[0] == '#') continue;
      std::size_t eq = line.find('=');
      if (eq == std::string_view::npos)
        throw ConfigError(origin + ":" + std::to_string(line_no) +
                          ": expected 'key = value'");
      std::string key = trim(line.substr(0, eq));
      std::string value = trim(line.substr(eq + 1));
      if (!known_keys().count(key))
        throw ConfigError(origin + ":" + std::to_string(line_no) +
                          ": unknown config key '" + key + "'");
      cfg.values_[key] = value;
    }
    return cfg;
  }

  static Config load(const std::filesystem::path& path) {
    return parse(read_file(path), path.string());
  }

  void set(const std::string& key, const std::string& value) {
    if (!known_keys().count(key))
      throw ConfigError("unknown config key '" + key + "'");
    values_[key] = value;
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  std::string get_string(const std::string& key,
                         const std::string& fallback) const {
    auto it = values_.find(key);
    return it == values_.end() ? fallback : it->second;
  }

  double get_double(const std::string& key, double fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t used = 0;
      double v = std::stod(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' is not a number: " +
                        it->second);
    }
  }

  long long get_int(const std::string& key, long long fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    try {
      std::size_t used = 0;
      long long v = std::stoll(it->second, &used);
      if (used != it->second.size()) throw std::invalid_argument("trailing");
      return v;
    } catch (const std::exception&) {
      throw ConfigError("config key '" + key + "' is not an integer: " +
                        it->second);
    }
  }

  bool get_bool(const std::string& key, bool fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    if (it->second == "true" || it->second == "1") return true;
    if (it->second == "false" || it->second == "0") return false;
    throw ConfigError("config key '" + key + "' is not a bool: " + it->second);
  }

  // "a,b,c" -> three positive doubles
  std::vector<double> get_ratios(const std::string& key,
                                 std::vector<double> fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    std::vector<double> out;
    std::string cur;
    for (char c : it->second + ",") {
      if (c == ',') {
        if (!trim(cur).empty()) out.push_back(std::stod(trim(cur)));
        cur.clear();
      } else {
        cur.push_back(c);
      }
    }
    return out;
  }

  model::ModelConfig model_config(int vocab_size) const {
    model::ModelConfig mc;
    mc.n_layers = static_cast<int>(get_int("n_layers", mc.n_layers));
    mc.n_heads = static_cast<int>(get_int("n_heads", mc.n_heads));
    mc.d_model = static_cast<int>(get_int("d_model", mc.d_model));
    mc.d_ff = static_cast<int>(get_int("d_ff", mc.d_ff));
    mc.max_len = static_cast<int>(get_int("max_len", mc.max_len));
    mc.pooling = model::pooling_from_name(
        get_string("pooling", model::pooling_name(mc.pooling)));
    mc.pad_side = bpe::pad_side_from_name(
        get_string("pad_side", bpe::pad_side_name(mc.pad_side)));
    mc.pad_policy = model::pad_policy_from_name(
        get_string("pad_policy", model::pad_policy_name(mc.pad_policy)));
    mc.seed = static_cast<std::uint64_t>(get_int("seed", 0));
    mc.vocab_size = vocab_size;
    mc.validate();
    return mc;
  }

  train::TrainConfig train_config() const {
    train::TrainConfig tc;
    tc.temperature = get_double("temperature", tc.temperature);
    tc.lr = get_double("lr", tc.lr);
    tc.weight_decay = get_double("weight_decay", tc.weight_decay);
    tc.beta1 = get_double("beta1", tc.beta1);
    tc.beta2 = get_double("beta2", tc.beta2);
    tc.adam_eps = get_double("adam_eps", tc.adam_eps);
    tc.batch_size = static_cast<int>(get_int("batch_size", tc.batch_size));
    tc.epochs = static_cast<int>(get_int("epochs", tc.epochs));
    tc.use_in_batch = get_bool("use_in_batch", tc.use_in_batch);
    tc.use_hard_negatives =
        get_bool("use_hard_negatives", tc.use_hard_negatives);
    tc.seed = static_cast<std::uint64_t>(get_int("seed", 0));
    tc.grad_clip_norm = get_double("grad_clip_norm", tc.grad_clip_norm);
    tc.validate();
    return tc;
  }

  corpus::FilterConfig filter_config() const {
    corpus::FilterConfig fc;
    fc.min_query_tokens = static_cast<std::size_t>(
        get_int("min_query_tokens", static_cast<long long>(fc.min_query_tokens)));
    fc.min_code_lines = static_cast<std::size_t>(
        get_int("min_code_lines", static_cast<long long>(fc.min_code_lines)));
    fc.max_code_chars = static_cast<std::size_t>(
        get_int("max_code_chars", static_cast<long long>(fc.max_code_chars)));
    fc.reject_test_and_ctor_names =
        get_bool("reject_test_and_ctor_names", fc.reject_test_and_ctor_names);
    fc.max_non_ascii_ratio =
        get_double("max_non_ascii_ratio", fc.max_non_ascii_ratio);
    fc.reject_query_in_code =
        get_bool("reject_query_in_code", fc.reject_query_in_code);
    return fc;
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    for (const auto& [k, v] : values_) j[k] = v;
    return j;
  }

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace cl4d::config
