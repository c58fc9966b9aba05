#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "molre/data.hpp"
#include "molre/errors.hpp"
#include "molre/model.hpp"
#include "molre/train.hpp"

namespace molre {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

/// Shared-expert rank setting: a uniform rank, an explicit per-expert list,
/// or an arithmetic progression "a+bn" evaluated at n = 0..N-1.
struct RankSetting {
  enum class Mode { Uniform, List, Progression };
  Mode mode = Mode::Uniform;
  std::size_t uniform = 128;
  std::vector<std::size_t> list;
  std::size_t prog_base = 16;
  std::size_t prog_step = 8;

  static RankSetting from_uniform(std::size_t r) {
    RankSetting s;
    s.mode = Mode::Uniform;
    s.uniform = r;
    return s;
  }

  /// Accepts "128" or "16+8n".
  static RankSetting parse_token(const std::string& tok) {
    RankSetting s;
    const std::size_t plus = tok.find('+');
    if (plus == std::string::npos) {
      try {
        s.uniform = static_cast<std::size_t>(std::stoull(tok));
      } catch (const std::exception&) {
        throw ConfigError("model.shared_ranks: cannot parse rank token '" + tok + "'");
      }
      s.mode = Mode::Uniform;
      return s;
    }
    if (tok.empty() || tok.back() != 'n') {
      throw ConfigError("model.shared_ranks: progression token '" + tok +
                        "' must look like '16+8n'");
    }
    try {
      s.prog_base = static_cast<std::size_t>(std::stoull(tok.substr(0, plus)));
      s.prog_step = static_cast<std::size_t>(
          std::stoull(tok.substr(plus + 1, tok.size() - plus - 2)));
    } catch (const std::exception&) {
      throw ConfigError("model.shared_ranks: cannot parse progression token '" + tok + "'");
    }
    s.mode = Mode::Progression;
    return s;
  }

  static RankSetting from_json(const json& j) {
    RankSetting s;
    if (j.is_number_unsigned() || j.is_number_integer()) {
      s.mode = Mode::Uniform;
      s.uniform = j.get<std::size_t>();
      return s;
    }
    if (j.is_string()) return parse_token(j.get<std::string>());
    if (j.is_array()) {
      s.mode = Mode::List;
      for (const auto& v : j) {
        if (!v.is_number_integer() && !v.is_number_unsigned()) {
          throw ConfigError("model.shared_ranks: list entries must be integers");
        }
        s.list.push_back(v.get<std::size_t>());
      }
      return s;
    }
    throw ConfigError("model.shared_ranks: expected integer, list, or 'a+bn' string");
  }

  std::vector<std::size_t> resolve(std::size_t n) const {
    switch (mode) {
      case Mode::Uniform: return std::vector<std::size_t>(n, uniform);
      case Mode::List:
        if (list.size() != n) {
          throw ConfigError("model.shared_ranks: list has " + std::to_string(list.size()) +
                            " entries, n_experts is " + std::to_string(n));
        }
        return list;
      case Mode::Progression: {
        std::vector<std::size_t> out(n);
        for (std::size_t i = 0; i < n; ++i) out[i] = prog_base + prog_step * i;
        return out;
      }
    }
    return {};
  }

  ordered_json to_json() const {
    switch (mode) {
      case Mode::Uniform: return uniform;
      case Mode::List: return list;
      case Mode::Progression: return label();
    }
    return nullptr;
  }

  std::string label() const {
    switch (mode) {
      case Mode::Uniform: return std::to_string(uniform);
      case Mode::List: {
        std::string s = "[";
        for (std::size_t i = 0; i < list.size(); ++i) {
          if (i) s += ",";
          s += std::to_string(list[i]);
        }
        return s + "]";
      }
      case Mode::Progression:
        return std::to_string(prog_base) + "+" + std::to_string(prog_step) + "n";
    }
    return "?";
  }
};

/// The four rank settings the sweep command offers by default.
inline std::vector<std::string> default_rank_sweep() { return {"16", "64", "128", "16+8n"}; }

/// Everything one run needs: variant, model dims, training, data source.
struct RunConfig {
  std::string preset = "desk";
  VariantId variant = VariantId::Mmolre;
  ModelConfig model;  // molre.shared_ranks left empty; filled via rank_setting
  RankSetting rank_setting = RankSetting::from_uniform(128);
  TrainConfig train;
  DatasetConfig data;
  std::string feature_file;  // when set, features are read instead of generated
  std::string out_dir = "molre_out";

  /// Model config with ranks resolved; feature width and class count are
  /// owned by the model section and mirrored into the dataset config.
  ModelConfig resolved_model() const {
    ModelConfig m = model;
    m.molre.shared_ranks = rank_setting.resolve(m.molre.n_experts);
    return m;
  }

  DatasetConfig resolved_data() const {
    DatasetConfig d = data;
    d.d = model.molre.d;
    d.classes = model.classes;
    return d;
  }

  void validate() const {
    resolved_model().validate();
    train.validate();
    resolved_data().validate();
  }
};

namespace detail {

inline void reject_unknown_keys(const json& j, const std::string& section,
                                const std::vector<std::string>& known) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const std::string& k : known) {
      if (it.key() == k) {
        ok = true;
        break;
      }
    }
    if (!ok) {
      throw ConfigError(section.empty() ? it.key() + ": unknown field"
                                        : section + "." + it.key() + ": unknown field");
    }
  }
}

template <typename T>
void get_field(const json& j, const char* section, const char* key, T& target) {
  if (!j.contains(key)) return;
  try {
    target = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(std::string(section) + "." + key + ": wrong type");
  }
}

}  // namespace detail

inline ordered_json to_json(const RunConfig& cfg) {
  ordered_json j;
  j["preset"] = cfg.preset;
  j["variant"] = to_string(cfg.variant);
  ordered_json m;
  m["d"] = cfg.model.molre.d;
  m["n_experts"] = cfg.model.molre.n_experts;
  m["top_k"] = cfg.model.molre.top_k;
  m["shared_ranks"] = cfg.rank_setting.to_json();
  m["task_rank"] = cfg.model.molre.task_rank;
  m["kernel_sizes"] = {cfg.model.molre.kernels.k1, cfg.model.molre.kernels.k2};
  m["num_blocks"] = cfg.model.molre.num_blocks;
  m["residual"] = cfg.model.molre.residual;
  m["fusion_layers"] = cfg.model.fusion_layers;
  m["ffn_dim"] = cfg.model.ffn_dim;
  m["head_hidden"] = cfg.model.head_hidden;
  m["classes"] = cfg.model.classes;
  m["prenorm"] = cfg.model.prenorm;
  m["loss"] = to_string(cfg.model.emotion_loss);
  j["model"] = m;
  ordered_json t;
  t["batch_size"] = cfg.train.batch_size;
  t["learning_rate"] = cfg.train.learning_rate;
  t["beta1"] = cfg.train.beta1;
  t["beta2"] = cfg.train.beta2;
  t["adam_eps"] = cfg.train.adam_eps;
  t["weight_decay"] = cfg.train.weight_decay;
  t["max_steps"] = cfg.train.max_steps;
  t["early_stop_patience"] = cfg.train.early_stop_patience;
  t["val_fraction"] = cfg.train.val_fraction;
  t["eval_every"] = cfg.train.eval_every;
  t["seed"] = cfg.train.seed;
  t["shuffle"] = cfg.train.shuffle;
  j["train"] = t;
  ordered_json d;
  d["num_utterances"] = cfg.data.num_utterances;
  d["t_text"] = cfg.data.t_text;
  d["t_audio"] = cfg.data.t_audio;
  d["latent_dim"] = cfg.data.latent_dim;
  d["task_correlation"] = cfg.data.task_correlation;
  d["noise_std"] = cfg.data.noise_std;
  d["seed"] = cfg.data.seed;
  j["data"] = d;
  j["feature_file"] = cfg.feature_file;
  j["out_dir"] = cfg.out_dir;
  return j;
}

/// Overlays JSON fields onto an existing config (partial configs allowed;
/// unknown fields are rejected by name).
inline void apply_json(RunConfig& cfg, const json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  detail::reject_unknown_keys(
      j, "", {"preset", "variant", "model", "train", "data", "feature_file", "out_dir"});
  if (j.contains("preset")) cfg.preset = j.at("preset").get<std::string>();
  if (j.contains("variant")) cfg.variant = parse_variant(j.at("variant").get<std::string>());
  if (j.contains("model")) {
    const json& m = j.at("model");
    detail::reject_unknown_keys(
        m, "model",
        {"d", "n_experts", "top_k", "shared_ranks", "task_rank", "kernel_sizes", "num_blocks",
         "residual", "fusion_layers", "ffn_dim", "head_hidden", "classes", "prenorm", "loss"});
    detail::get_field(m, "model", "d", cfg.model.molre.d);
    detail::get_field(m, "model", "n_experts", cfg.model.molre.n_experts);
    detail::get_field(m, "model", "top_k", cfg.model.molre.top_k);
    if (m.contains("shared_ranks")) cfg.rank_setting = RankSetting::from_json(m.at("shared_ranks"));
    detail::get_field(m, "model", "task_rank", cfg.model.molre.task_rank);
    if (m.contains("kernel_sizes")) {
      const json& k = m.at("kernel_sizes");
      if (!k.is_array() || k.size() != 2) {
        throw ConfigError("model.kernel_sizes: expected a pair, e.g. [3, 1]");
      }
      cfg.model.molre.kernels.k1 = k.at(0).get<std::size_t>();
      cfg.model.molre.kernels.k2 = k.at(1).get<std::size_t>();
    }
    detail::get_field(m, "model", "num_blocks", cfg.model.molre.num_blocks);
    detail::get_field(m, "model", "residual", cfg.model.molre.residual);
    detail::get_field(m, "model", "fusion_layers", cfg.model.fusion_layers);
    detail::get_field(m, "model", "ffn_dim", cfg.model.ffn_dim);
    detail::get_field(m, "model", "head_hidden", cfg.model.head_hidden);
    detail::get_field(m, "model", "classes", cfg.model.classes);
    detail::get_field(m, "model", "prenorm", cfg.model.prenorm);
    if (m.contains("loss")) {
      cfg.model.emotion_loss = parse_emotion_loss_mode(m.at("loss").get<std::string>());
    }
  }
  if (j.contains("train")) {
    const json& t = j.at("train");
    detail::reject_unknown_keys(
        t, "train",
        {"batch_size", "learning_rate", "beta1", "beta2", "adam_eps", "weight_decay", "max_steps",
         "early_stop_patience", "val_fraction", "eval_every", "seed", "shuffle"});
    detail::get_field(t, "train", "batch_size", cfg.train.batch_size);
    detail::get_field(t, "train", "learning_rate", cfg.train.learning_rate);
    detail::get_field(t, "train", "beta1", cfg.train.beta1);
    detail::get_field(t, "train", "beta2", cfg.train.beta2);
    detail::get_field(t, "train", "adam_eps", cfg.train.adam_eps);
    detail::get_field(t, "train", "weight_decay", cfg.train.weight_decay);
    detail::get_field(t, "train", "max_steps", cfg.train.max_steps);
    detail::get_field(t, "train", "early_stop_patience", cfg.train.early_stop_patience);
    detail::get_field(t, "train", "val_fraction", cfg.train.val_fraction);
    detail::get_field(t, "train", "eval_every", cfg.train.eval_every);
    detail::get_field(t, "train", "seed", cfg.train.seed);
    detail::get_field(t, "train", "shuffle", cfg.train.shuffle);
  }
  if (j.contains("data")) {
    const json& d = j.at("data");
    detail::reject_unknown_keys(d, "data",
                                {"num_utterances", "t_text", "t_audio", "latent_dim",
                                 "task_correlation", "noise_std", "seed"});
    detail::get_field(d, "data", "num_utterances", cfg.data.num_utterances);
    detail::get_field(d, "data", "t_text", cfg.data.t_text);
    detail::get_field(d, "data", "t_audio", cfg.data.t_audio);
    detail::get_field(d, "data", "latent_dim", cfg.data.latent_dim);
    detail::get_field(d, "data", "task_correlation", cfg.data.task_correlation);
    detail::get_field(d, "data", "noise_std", cfg.data.noise_std);
    detail::get_field(d, "data", "seed", cfg.data.seed);
  }
  detail::get_field(j, "config", "feature_file", cfg.feature_file);
  detail::get_field(j, "config", "out_dir", cfg.out_dir);
}

/// Named presets. "desk" is sized so the full suite runs in minutes on a
/// laptop; the "paper-*" presets carry the reference hyperparameters for
/// CMU-MOSEI / CMU-MOSI scale runs.
inline RunConfig preset_config(const std::string& name) {
  RunConfig cfg;
  cfg.preset = name;
  if (name == "desk") {
    cfg.model.molre.d = 32;
    cfg.model.molre.n_experts = 4;
    cfg.model.molre.top_k = 2;
    cfg.rank_setting = RankSetting::from_uniform(8);
    cfg.model.molre.task_rank = 8;
    cfg.model.molre.num_blocks = 2;
    cfg.model.fusion_layers = 2;
    cfg.model.classes = 6;
    cfg.train.batch_size = 8;
    cfg.train.learning_rate = 1e-3;
    cfg.train.max_steps = 300;
    cfg.train.early_stop_patience = 8;
    cfg.train.seed = 7;
    cfg.data.num_utterances = 64;
    cfg.data.t_text = 6;
    cfg.data.t_audio = 5;
    cfg.data.latent_dim = 8;
    cfg.data.task_correlation = 0.7;
    cfg.data.noise_std = 0.1;
    cfg.data.seed = 1;
    return cfg;
  }
  if (name == "paper-mosei" || name == "paper-mosi") {
    cfg.model.molre.d = 768;
    cfg.model.molre.n_experts = 15;
    cfg.model.molre.top_k = name == "paper-mosei" ? 8 : 11;
    cfg.rank_setting = RankSetting::from_uniform(name == "paper-mosei" ? 128 : 64);
    cfg.model.molre.task_rank = 128;
    cfg.model.molre.num_blocks = 2;
    cfg.model.fusion_layers = 5;
    cfg.model.classes = 6;
    cfg.train.batch_size = 8;
    cfg.train.learning_rate = 1e-5;
    cfg.train.max_steps = 1000;
    cfg.train.early_stop_patience = 8;
    cfg.train.seed = 7;
    cfg.data.num_utterances = 256;
    cfg.data.t_text = 50;
    cfg.data.t_audio = 50;
    cfg.data.latent_dim = 16;
    cfg.data.task_correlation = 0.7;
    cfg.data.noise_std = 0.1;
    cfg.data.seed = 1;
    return cfg;
  }
  throw ConfigError("preset: unknown preset '" + name +
                    "' (expected desk, paper-mosei, paper-mosi)");
}

/// Applies one KEY.PATH=VALUE override onto the JSON form of a config.
inline void apply_set(ordered_json& j, const std::string& kv) {
  const std::size_t eq = kv.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ConfigError("--set: expected KEY=VALUE, got '" + kv + "'");
  }
  const std::string key = kv.substr(0, eq);
  const std::string value = kv.substr(eq + 1);

  ordered_json* node = &j;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
    if (part.empty()) throw ConfigError("--set: empty path segment in '" + key + "'");
    if (dot == std::string::npos) {
      json parsed = json::parse(value, nullptr, false);
      if (parsed.is_discarded()) {
        (*node)[part] = value;  // bare string (e.g. variant names, rank tokens)
      } else {
        (*node)[part] = parsed;
      }
      return;
    }
    if (node->contains(part) && !(*node)[part].is_object()) {
      throw ConfigError("--set: '" + part + "' in '" + key + "' is not a section");
    }
    if (!node->contains(part)) (*node)[part] = ordered_json::object();
    node = &(*node)[part];
    start = dot + 1;
  }
}

}  // namespace molre
