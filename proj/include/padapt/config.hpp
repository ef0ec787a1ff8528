#pragma once

#include <array>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "padapt/model.hpp"
#include "padapt/synth.hpp"
#include "padapt/training.hpp"

namespace padapt {

/// Everything one pipeline run needs. Built from an INI file with sections
/// [run] [model] [pool] [stage1] [stage2] [stage3] [data] [eval]; any key can
/// be overridden through PADAPT_<SECTION>_<KEY> (upper case).
struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "runs/default";
  ModelConfig model;
  std::array<StageConfig, 3> stages{StageConfig::defaults(1), StageConfig::defaults(2), StageConfig::defaults(3)};
  DataConfig data;
  std::string data_dir;  // empty: generate in memory from [data]

  std::string eval_split = "test";
  std::size_t eval_resolution = 64;
  std::size_t eval_max_new = 48;
  std::size_t eval_max_per_task = 0;

  void validate() const {
    model.validate();
    for (int s = 0; s < 3; ++s) {
      stages[s].validate();
      if (stages[s].stage != s + 1) throw ConfigError("stage sections out of order");
      model.grid_side(stages[s].image_resolution);
    }
    model.grid_side(eval_resolution);
    if (eval_max_new == 0) throw ConfigError("eval: max_new must be >= 1");
    if (eval_split != "train" && eval_split != "val" && eval_split != "test")
      throw ConfigError("eval: unknown split '" + eval_split + "'");
    if (!data_dir.empty() && !std::filesystem::exists(std::filesystem::path(data_dir) / "manifest.json"))
      throw ConfigError("data: no dataset manifest under '" + data_dir + "'");
    std::set<std::size_t> res(model.vision.resolutions.begin(), model.vision.resolutions.end());
    for (const auto& s : stages)
      if (!res.count(s.image_resolution))
        throw ConfigError("stage" + std::to_string(s.stage) + ": resolution " + std::to_string(s.image_resolution) +
                          " has no encoder position table");
    if (!res.count(eval_resolution)) throw ConfigError("eval: resolution has no encoder position table");
  }
};

namespace detail {

using RawConfig = std::map<std::string, std::map<std::string, std::string>>;

inline std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

inline std::string upper(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (c == ',' || c == '+' || std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

class Reader {
 public:
  explicit Reader(RawConfig raw) : raw_(std::move(raw)) {}

  bool has(const std::string& sec, const std::string& key) const {
    auto it = raw_.find(sec);
    return it != raw_.end() && it->second.count(key);
  }

  const std::string& str(const std::string& sec, const std::string& key) {
    used_.insert(sec + "." + key);
    return raw_.at(sec).at(key);
  }

  template <class T>
  void get(const std::string& sec, const std::string& key, T& out) {
    if (!has(sec, key)) return;
    const std::string v = str(sec, key);
    const std::string where = "[" + sec + "] " + key;
    try {
      if constexpr (std::is_same_v<T, std::string>) {
        out = v;
      } else if constexpr (std::is_same_v<T, bool>) {
        const std::string l = lower(v);
        if (l == "true" || l == "1" || l == "yes" || l == "on") out = true;
        else if (l == "false" || l == "0" || l == "no" || l == "off") out = false;
        else throw ConfigError(where + ": expected a boolean, got '" + v + "'");
      } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
        out.clear();
        for (const auto& item : split_list(v)) out.push_back(parse_unsigned(item, where));
      } else if constexpr (std::is_floating_point_v<T>) {
        std::size_t pos = 0;
        out = std::stod(v, &pos);
        if (pos != v.size()) throw ConfigError(where + ": trailing characters in '" + v + "'");
      } else {
        out = static_cast<T>(parse_unsigned(v, where));
      }
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception&) {
      throw ConfigError(where + ": cannot parse '" + v + "'");
    }
  }

  void require_all_used() const {
    for (const auto& [sec, kv] : raw_)
      for (const auto& [k, _] : kv)
        if (!used_.count(sec + "." + k)) throw ConfigError("unknown config key [" + sec + "] " + k);
  }

 private:
  static std::uint64_t parse_unsigned(const std::string& v, const std::string& where) {
    if (v.empty() || v[0] == '-') throw ConfigError(where + ": expected a nonnegative integer, got '" + v + "'");
    std::size_t pos = 0;
    const auto x = std::stoull(v, &pos);
    if (pos != v.size()) throw ConfigError(where + ": expected an integer, got '" + v + "'");
    return x;
  }

  RawConfig raw_;
  std::set<std::string> used_;
};

inline const std::map<std::string, std::vector<std::string>>& known_keys() {
  static const std::vector<std::string> stage_keys = {"batch_size", "peak_lr",      "min_lr",     "warmup_steps",
                                                      "total_steps", "image_resolution", "weight_decay", "beta1",
                                                      "beta2",       "eps",          "random_scale"};
  static const std::map<std::string, std::vector<std::string>> keys = {
      {"run", {"seed", "output_dir"}},
      {"model",
       {"adapter", "patch_size", "vision_width", "vision_depth", "vision_heads", "vision_mlp_ratio", "resolutions",
        "lm_width", "lm_depth", "lm_heads", "lm_mlp_ratio", "context", "num_queries", "query_mlp_hidden"}},
      {"pool", {"scales", "mlp_hidden", "shared_mlp"}},
      {"stage1", stage_keys},
      {"stage2", stage_keys},
      {"stage3", stage_keys},
      {"data", {"dir", "train", "val", "test", "cells", "jitter"}},
      {"eval", {"split", "resolution", "max_new", "max_per_task"}},
  };
  return keys;
}

}  // namespace detail

/// Parses INI text into sections. Keys outside any section land in [run].
inline detail::RawConfig parse_ini(std::istream& is) {
  detail::RawConfig raw;
  std::vector<CLI::ConfigItem> items;
  try {
    items = CLI::ConfigINI().from_config(is);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  for (const auto& it : items) {
    if (it.name == "++" || it.name == "--") continue;
    if (it.parents.size() > 1) throw ConfigError("nested config section " + it.fullname());
    const std::string sec = it.parents.empty() ? "run" : detail::lower(it.parents[0]);
    std::string value;
    for (const auto& v : it.inputs) value += (value.empty() ? "" : ",") + v;
    raw[sec][detail::lower(it.name)] = value;
  }
  return raw;
}

using EnvLookup = std::function<const char*(const std::string&)>;

inline const char* process_env(const std::string& name) { return std::getenv(name.c_str()); }

inline RunConfig build_run_config(detail::RawConfig raw, const EnvLookup& env = process_env) {
  const auto& known = detail::known_keys();
  for (const auto& [sec, kv] : raw) {
    auto k = known.find(sec);
    if (k == known.end()) throw ConfigError("unknown config section [" + sec + "]");
    for (const auto& [key, _] : kv)
      if (std::find(k->second.begin(), k->second.end(), key) == k->second.end())
        throw ConfigError("unknown config key [" + sec + "] " + key);
  }
  if (env)
    for (const auto& [sec, keys] : known)
      for (const auto& key : keys)
        if (const char* v = env("PADAPT_" + detail::upper(sec) + "_" + detail::upper(key))) raw[sec][key] = v;

  detail::Reader r(std::move(raw));
  RunConfig c;
  r.get("run", "seed", c.seed);
  r.get("run", "output_dir", c.output_dir);

  auto& m = c.model;
  if (r.has("model", "adapter")) m.adapter = parse_adapter_kind(r.str("model", "adapter"));
  r.get("model", "patch_size", m.vision.patch_size);
  r.get("model", "vision_width", m.vision.width);
  r.get("model", "vision_depth", m.vision.depth);
  r.get("model", "vision_heads", m.vision.heads);
  r.get("model", "vision_mlp_ratio", m.vision.mlp_ratio);
  r.get("model", "resolutions", m.vision.resolutions);
  r.get("model", "lm_width", m.lm.width);
  r.get("model", "lm_depth", m.lm.depth);
  r.get("model", "lm_heads", m.lm.heads);
  r.get("model", "lm_mlp_ratio", m.lm.mlp_ratio);
  r.get("model", "context", m.lm.context);
  r.get("model", "num_queries", m.query.num_queries);
  r.get("model", "query_mlp_hidden", m.query.mlp_hidden);
  r.get("pool", "scales", m.pool.scales);
  r.get("pool", "mlp_hidden", m.pool.mlp_hidden);
  r.get("pool", "shared_mlp", m.pool.shared_mlp);
  m.pool.llm_width = m.lm.width;
  m.query.llm_width = m.lm.width;

  for (int s = 0; s < 3; ++s) {
    const std::string sec = "stage" + std::to_string(s + 1);
    auto& st = c.stages[s];
    r.get(sec, "batch_size", st.batch_size);
    const bool min_given = r.has(sec, "min_lr");
    r.get(sec, "peak_lr", st.peak_lr);
    st.min_lr = st.peak_lr / 10;
    if (min_given) r.get(sec, "min_lr", st.min_lr);
    if (r.has(sec, "warmup_steps")) {
      std::size_t w = 0;
      r.get(sec, "warmup_steps", w);
      st.warmup_steps = w;
    }
    r.get(sec, "total_steps", st.total_steps);
    r.get(sec, "image_resolution", st.image_resolution);
    r.get(sec, "weight_decay", st.weight_decay);
    r.get(sec, "beta1", st.beta1);
    r.get(sec, "beta2", st.beta2);
    r.get(sec, "eps", st.eps);
    r.get(sec, "random_scale", st.random_scale);
  }

  r.get("data", "dir", c.data_dir);
  r.get("data", "train", c.data.train);
  r.get("data", "val", c.data.val);
  r.get("data", "test", c.data.test);
  r.get("data", "cells", c.data.cells);
  r.get("data", "jitter", c.data.jitter);
  c.data.seed = c.seed;
  c.data.resolutions = m.vision.resolutions;

  r.get("eval", "split", c.eval_split);
  r.get("eval", "resolution", c.eval_resolution);
  r.get("eval", "max_new", c.eval_max_new);
  r.get("eval", "max_per_task", c.eval_max_per_task);
  r.require_all_used();
  return c;
}

inline RunConfig load_run_config(const std::string& path, const EnvLookup& env = process_env) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file " + path);
  return build_run_config(parse_ini(is), env);
}

inline RunConfig parse_run_config(const std::string& text, const EnvLookup& env = process_env) {
  std::istringstream is(text);
  return build_run_config(parse_ini(is), env);
}

}  // namespace padapt
