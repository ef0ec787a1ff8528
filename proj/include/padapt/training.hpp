#pragma once

#include <array>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "padapt/checkpoint.hpp"
#include "padapt/log.hpp"
#include "padapt/model.hpp"
#include "padapt/synth.hpp"

namespace padapt {

class StageOrderError : public Error {
 public:
  using Error::Error;
};

class FreezeViolation : public Error {
 public:
  using Error::Error;
};

struct StageConfig {
  int stage = 1;
  std::size_t batch_size = 32;
  double peak_lr = 1e-3;
  double min_lr = 1e-4;
  std::optional<std::size_t> warmup_steps;  // unset: 3% of total
  std::size_t total_steps = 100;
  std::size_t image_resolution = 32;
  double weight_decay = 0.05;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  bool random_scale = false;  // one random scale per sample instead of all

  static StageConfig defaults(int stage) {
    StageConfig c;
    c.stage = stage;
    c.batch_size = stage == 1 ? 32 : stage == 2 ? 16 : 8;
    c.image_resolution = stage == 1 ? 32 : 64;
    c.peak_lr = 1e-3;
    c.min_lr = c.peak_lr / 10;
    return c;
  }

  std::size_t warmup() const {
    return warmup_steps ? *warmup_steps : static_cast<std::size_t>(std::floor(0.03 * static_cast<double>(total_steps)));
  }

  void validate() const {
    const std::string s = "stage" + std::to_string(stage) + ": ";
    if (stage < 1 || stage > 3) throw ConfigError("unknown stage " + std::to_string(stage));
    if (batch_size == 0) throw ConfigError(s + "batch_size must be positive");
    if (!(peak_lr > 0) || !(min_lr >= 0) || min_lr > peak_lr) throw ConfigError(s + "need 0 <= min_lr <= peak_lr");
    if (warmup() > total_steps) throw ConfigError(s + "warmup exceeds total steps");
    if (!(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1)) throw ConfigError(s + "betas must lie in [0,1)");
    if (!(eps > 0) || !(weight_decay >= 0)) throw ConfigError(s + "eps must be positive, weight decay nonnegative");
    if (image_resolution == 0) throw ConfigError(s + "image_resolution must be positive");
  }
};

// ---------------------------------------------------------------------------
// Freezing
// ---------------------------------------------------------------------------

using FreezeMask = std::map<std::string, bool>;  // name -> trainable

inline bool is_vision_param(std::string_view n) { return starts_with(n, "vision."); }
inline bool is_adapter_param(std::string_view n) { return starts_with(n, "adapter.") || starts_with(n, "qadapter."); }
inline bool is_lm_param(std::string_view n) { return starts_with(n, "lm."); }

inline bool stage_trainable(int stage, const std::string& name) {
  if (!is_vision_param(name) && !is_adapter_param(name) && !is_lm_param(name))
    throw ConfigError("parameter '" + name + "' belongs to no known module");
  switch (stage) {
    case 1: return is_adapter_param(name);
    case 2: return is_vision_param(name) || is_adapter_param(name) || (is_lm_param(name) && is_qv_projection(name));
    case 3: return !is_vision_param(name);
  }
  throw ConfigError("unknown stage " + std::to_string(stage));
}

inline FreezeMask build_freeze_mask(int stage, const ParamStore& params) {
  if (stage < 1 || stage > 3) throw ConfigError("unknown stage " + std::to_string(stage));
  FreezeMask mask;
  for (const auto& [name, _] : params) mask[name] = stage_trainable(stage, name);
  return mask;
}

inline void apply_freeze_mask(ParamStore& params, const FreezeMask& mask) {
  for (auto& [name, t] : params) {
    auto it = mask.find(name);
    if (it == mask.end()) throw ConfigError("freeze mask has no entry for '" + name + "'");
    t.requires_grad = it->second;
  }
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct AdamSlot {
  std::vector<double> m, v;
  std::uint64_t t = 0;
};

using OptimizerState = std::map<std::string, AdamSlot>;

struct AdamHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.05;
};

/// Decoupled-decay Adam on every trainable tensor. A missing gradient counts
/// as zero. Frozen tensors and their slots are not touched at all. Each slot
/// keeps its own step count, so bias correction restarts for tensors that
/// first become trainable in a later stage.
inline void adamw_step(ParamStore& params, const FreezeMask& mask, OptimizerState& state, const AdamHyper& h) {
  for (auto& [name, t] : params) {
    auto mit = mask.find(name);
    if (mit == mask.end()) throw ConfigError("freeze mask has no entry for '" + name + "'");
    if (!mit->second) continue;
    if (t.grad) {
      for (std::size_t i = 0; i < t.grad->size(); ++i)
        if (!std::isfinite((*t.grad)[i]))
          throw NumericError("non-finite gradient in '" + name + "' at element " + std::to_string(i));
    }
  }
  for (auto& [name, t] : params) {
    if (!mask.at(name)) continue;
    AdamSlot& s = state[name];
    const std::size_t n = t.numel();
    if (s.m.empty()) {
      s.m.assign(n, 0.0);
      s.v.assign(n, 0.0);
    }
    if (s.m.size() != n || s.v.size() != n) throw ShapeError("optimizer state for '" + name + "' has the wrong size");
    ++s.t;
    const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(s.t));
    const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(s.t));
    auto w = t.data();
    for (std::size_t i = 0; i < n; ++i) {
      const double g = t.grad ? (*t.grad)[i] : 0.0;
      s.m[i] = h.beta1 * s.m[i] + (1.0 - h.beta1) * g;
      s.v[i] = h.beta2 * s.v[i] + (1.0 - h.beta2) * g * g;
      const double mhat = s.m[i] / c1, vhat = s.v[i] / c2;
      w[i] -= h.lr * h.weight_decay * w[i] + h.lr * mhat / (std::sqrt(vhat) + h.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Schedule and sampling
// ---------------------------------------------------------------------------

inline double cosine_lr(std::size_t step, const StageConfig& cfg) {
  if (step > cfg.total_steps) throw ConfigError("cosine_lr: step beyond total_steps");
  const std::size_t w = cfg.warmup();
  if (step < w) return cfg.peak_lr * static_cast<double>(step) / static_cast<double>(w);
  if (cfg.total_steps == w) return cfg.peak_lr;
  const double frac = static_cast<double>(step - w) / static_cast<double>(cfg.total_steps - w);
  return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + std::cos(std::numbers::pi * frac));
}

/// Training records per task (indexed by Task).
using TaskData = std::array<const std::vector<PromptRecord>*, 3>;

/// Task uniform over the three tasks (captions only in stage 1), then a
/// record uniform within the task.
inline std::vector<const PromptRecord*> sample_batch(const TaskData& data, int stage, std::size_t batch, Rng& rng) {
  for (Task t : kAllTasks) {
    if (stage == 1 && t != Task::caption) continue;
    if (!data[static_cast<int>(t)] || data[static_cast<int>(t)]->empty())
      throw ConfigError("sample_batch: no " + task_name(t) + " records");
  }
  std::vector<const PromptRecord*> out;
  out.reserve(batch);
  for (std::size_t b = 0; b < batch; ++b) {
    const int task = stage == 1 ? 0 : static_cast<int>(rng.below(3));
    const auto& recs = *data[task];
    out.push_back(&recs[rng.below(recs.size())]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint bundle: model tensors, optimizer slots and run metadata
// ---------------------------------------------------------------------------

struct TrainState {
  ParamStore params;
  OptimizerState optim;
  int stage_done = 0;
  std::uint64_t seed = 0;
  std::vector<std::size_t> scales;  // concatenation order used in training
};

inline ParamStore bundle(const TrainState& st) {
  ParamStore out;
  for (const auto& [name, t] : st.params) out.add(name, Tensor(t.shape(), t.vec()));
  for (const auto& [name, s] : st.optim) {
    const Shape shape = st.params.get(name).shape();
    out.add("optim.m." + name, Tensor(shape, s.m));
    out.add("optim.v." + name, Tensor(shape, s.v));
    out.add("optim.t." + name, Tensor(Shape{1}, std::vector<double>{static_cast<double>(s.t)}));
  }
  out.add("meta.stage", Tensor(Shape{1}, std::vector<double>{static_cast<double>(st.stage_done)}));
  // The seed is split into two 32-bit halves, each exact in a double.
  out.add("meta.seed", Tensor(Shape{2}, std::vector<double>{static_cast<double>(st.seed >> 32),
                                                            static_cast<double>(st.seed & 0xffffffffULL)}));
  if (!st.scales.empty()) {
    std::vector<double> s(st.scales.begin(), st.scales.end());
    out.add("meta.scales", Tensor(Shape{s.size()}, s));
  }
  return out;
}

inline TrainState unbundle(const ParamStore& all) {
  TrainState st;
  for (const auto& [name, t] : all) {
    if (starts_with(name, "optim.m.")) {
      st.optim[name.substr(8)].m = t.vec();
    } else if (starts_with(name, "optim.v.")) {
      st.optim[name.substr(8)].v = t.vec();
    } else if (starts_with(name, "optim.t.")) {
      st.optim[name.substr(8)].t = static_cast<std::uint64_t>(t.item());
    } else if (name == "meta.stage") {
      st.stage_done = static_cast<int>(t.item());
    } else if (name == "meta.seed") {
      if (t.numel() != 2) throw IoError("checkpoint: malformed meta.seed");
      st.seed = (static_cast<std::uint64_t>(t[0]) << 32) | static_cast<std::uint64_t>(t[1]);
    } else if (name == "meta.scales") {
      for (double v : t.data()) st.scales.push_back(static_cast<std::size_t>(v));
    } else {
      st.params.add(name, Tensor(t.shape(), t.vec()));
    }
  }
  for (const auto& [name, s] : st.optim) {
    if (!st.params.contains(name)) throw IoError("checkpoint: optimizer slot for unknown tensor '" + name + "'");
    const auto n = st.params.get(name).numel();
    if (s.m.size() != n || s.v.size() != n) throw IoError("checkpoint: optimizer slot size mismatch for '" + name + "'");
  }
  return st;
}

inline void save_state(const std::string& path, const TrainState& st) { save_checkpoint(path, bundle(st)); }
inline TrainState load_state(const std::string& path) { return unbundle(load_checkpoint(path)); }

/// Verifies that a loaded checkpoint has exactly the tensors a fresh model
/// of `cfg` would have, with identical shapes.
inline void check_compatible(const ParamStore& params, const ModelConfig& cfg_in, const Vocabulary& vocab) {
  ModelConfig cfg = cfg_in;
  ParamStore fresh;
  Rng rng(0);
  init_model(fresh, cfg, vocab, rng);
  for (const auto& [name, t] : fresh) {
    if (!params.contains(name)) throw IoError("checkpoint is missing tensor '" + name + "'");
    if (params.get(name).shape() != t.shape())
      throw IoError("checkpoint tensor '" + name + "' has shape " + shape_str(params.get(name).shape()) +
                    ", model expects " + shape_str(t.shape()));
  }
  for (const auto& [name, _] : params)
    if (!fresh.contains(name)) throw IoError("checkpoint has unexpected tensor '" + name + "'");
}

// ---------------------------------------------------------------------------
// Stage runner
// ---------------------------------------------------------------------------

struct LossRow {
  std::size_t step = 0;
  double lr = 0;
  double loss = 0;
  std::array<std::size_t, 3> task_mix{};
};

struct StageResult {
  std::vector<LossRow> log;
  std::map<std::string, std::uint64_t> frozen_before, frozen_after;
  std::size_t frozen_count = 0;
  std::size_t trainable_count = 0;
};

inline std::string loss_csv(const std::vector<LossRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "step,lr,loss,task_mix\n";
  for (const auto& r : rows)
    os << r.step << ',' << r.lr << ',' << r.loss << ',' << r.task_mix[0] << '/' << r.task_mix[1] << '/'
       << r.task_mix[2] << '\n';
  return os.str();
}

inline std::uint64_t slot_hash(const AdamSlot& s) {
  std::uint64_t h = fnv1a(s.m.data(), s.m.size() * sizeof(double));
  h = fnv1a(s.v.data(), s.v.size() * sizeof(double), h);
  return fnv1a(&s.t, sizeof s.t, h);
}

/// Hashes of every frozen tensor and of its optimizer slot (when one exists).
inline std::map<std::string, std::uint64_t> frozen_hashes(const TrainState& st, const FreezeMask& mask) {
  std::map<std::string, std::uint64_t> out;
  for (const auto& [name, trainable] : mask) {
    if (trainable) continue;
    out["param:" + name] = hash_tensor(st.params.get(name));
    auto it = st.optim.find(name);
    if (it != st.optim.end()) out["optim:" + name] = slot_hash(it->second);
  }
  return out;
}

struct StageHooks {
  std::function<void(const LossRow&)> on_step;
  std::string nan_dump_path;  // where to dump parameters when training diverges
};

/// Runs one stage in place on `st`. Stage k > 1 requires a state whose last
/// completed stage is k-1. Frozen tensors and slots are audited afterwards
/// and any change raises FreezeViolation.
inline StageResult run_stage(const StageConfig& cfg, const ModelConfig& model, TrainState& st, const TaskData& data,
                             const ImageSource& images, const Vocabulary& vocab, Rng& sampler,
                             const StageHooks& hooks = {}) {
  cfg.validate();
  if (st.stage_done != cfg.stage - 1)
    throw StageOrderError("stage " + std::to_string(cfg.stage) + " needs a completed stage " +
                          std::to_string(cfg.stage - 1) + " checkpoint (have stage " + std::to_string(st.stage_done) +
                          ")");
  const FreezeMask mask = build_freeze_mask(cfg.stage, st.params);
  apply_freeze_mask(st.params, mask);
  StageResult res;
  for (const auto& [_, tr] : mask) (tr ? res.trainable_count : res.frozen_count)++;
  res.frozen_before = frozen_hashes(st, mask);

  std::vector<std::size_t> scales = model.adapter == AdapterKind::pool ? model.pool.scales : std::vector<std::size_t>{};
  const AdamHyper base{cfg.peak_lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay};
  try {
    for (std::size_t step = 1; step <= cfg.total_steps; ++step) {
      const auto batch = sample_batch(data, cfg.stage, cfg.batch_size, sampler);
      st.params.zero_grads();
      LossRow row;
      row.step = step;
      double total = 0.0;
      for (const PromptRecord* rec : batch) {
        ++row.task_mix[static_cast<int>(rec->task)];
        std::vector<std::size_t> one;
        const std::vector<std::size_t>* sel = nullptr;
        if (cfg.random_scale && scales.size() > 1) {
          one = {scales[sampler.below(scales.size())]};
          sel = &one;
        }
        const Image img = images.load(rec->image, cfg.image_resolution);
        Tape tape;
        Bound p(tape, st.params);
        Var loss = sample_loss(p, *rec, img, cfg.stage, vocab, model, sel);
        total += loss.value().item();
        tape.backward(scale(loss, 1.0 / static_cast<double>(batch.size())));
      }
      row.loss = total / static_cast<double>(batch.size());
      if (!std::isfinite(row.loss)) throw NumericError("non-finite loss at step " + std::to_string(step));
      AdamHyper h = base;
      h.lr = row.lr = cosine_lr(step, cfg);
      adamw_step(st.params, mask, st.optim, h);
      res.log.push_back(row);
      if (hooks.on_step) hooks.on_step(row);
    }
  } catch (const NumericError& e) {
    if (!hooks.nan_dump_path.empty()) {
      save_state(hooks.nan_dump_path, st);
      log_warn("training diverged; state dumped to " + hooks.nan_dump_path);
    }
    throw;
  }
  for (auto& [_, t] : st.params) {
    t.requires_grad = false;
    t.grad.reset();
  }
  st.stage_done = cfg.stage;
  if (model.adapter == AdapterKind::pool) st.scales = model.pool.scales;

  res.frozen_after = frozen_hashes(st, mask);
  for (const auto& [name, h] : res.frozen_before) {
    auto it = res.frozen_after.find(name);
    if (it == res.frozen_after.end() || it->second != h)
      throw FreezeViolation("stage " + std::to_string(cfg.stage) + " modified frozen " + name);
  }
  log_info("stage " + std::to_string(cfg.stage) + " done: " + std::to_string(res.trainable_count) + " trainable, " +
           std::to_string(res.frozen_count) + " frozen tensors, freeze audit passed (" +
           std::to_string(res.frozen_before.size()) + " hashes)");
  return res;
}

}  // namespace padapt
