#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>
#include <variant>

#include "padapt/config.hpp"
#include "padapt/eval.hpp"
#include "padapt/training.hpp"

namespace padapt {

/// Records and pixels for a run: either a dataset directory written by
/// gen-data or an in-memory dataset generated from the [data] section.
class RunData {
 public:
  static RunData from_config(const RunConfig& cfg) {
    RunData d;
    if (cfg.data_dir.empty())
      d.src_ = std::make_shared<SynthDataset>(SynthDataset::generate(cfg.data));
    else
      d.src_ = std::make_shared<DirectoryDataset>(cfg.data_dir);
    return d;
  }

  const ImageSource& images() const {
    return std::visit([](const auto& p) -> const ImageSource& { return *p; }, src_);
  }

  const std::vector<PromptRecord>& records(const std::string& split, Task t) const {
    return std::visit([&](const auto& p) -> const std::vector<PromptRecord>& { return p->records(split, t); }, src_);
  }

  TaskData train() const {
    return {&records("train", Task::caption), &records("train", Task::vqa), &records("train", Task::grounding)};
  }

  std::map<Task, const std::vector<PromptRecord>*> split(const std::string& name) const {
    std::map<Task, const std::vector<PromptRecord>*> m;
    for (Task t : kAllTasks) m[t] = &records(name, t);
    return m;
  }

 private:
  std::variant<std::shared_ptr<SynthDataset>, std::shared_ptr<DirectoryDataset>> src_;
};

inline Rng stage_sampler(std::uint64_t seed, int stage) {
  return Rng::substream(Rng::substream(seed, "sampler").next_u64(), "stage" + std::to_string(stage));
}

/// Fresh model for a run; the vocabulary size is fixed by the tokenizer.
inline TrainState init_state(RunConfig& cfg, const Vocabulary& vocab) {
  TrainState st;
  st.seed = cfg.seed;
  Rng init = Rng::substream(cfg.seed, "init");
  init_model(st.params, cfg.model, vocab, init);
  if (cfg.model.adapter == AdapterKind::pool) st.scales = cfg.model.pool.scales;
  return st;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << text;
  if (!os) throw IoError("write failed for " + path.string());
}

struct PipelineResult {
  TrainState state;
  std::vector<StageResult> stages;
  double seconds = 0.0;
};

/// Stages `first..last` in order. Files go to `out_dir` when it is set:
/// stage<k>.padt and stage<k>_loss.csv.
inline PipelineResult train_stages(RunConfig& cfg, const RunData& data, const Vocabulary& vocab, TrainState st,
                                   int first, int last, const std::string& out_dir = {}) {
  namespace fs = std::filesystem;
  if (first < 1 || last > 3 || first > last) throw ConfigError("invalid stage range");
  if (!out_dir.empty()) fs::create_directories(out_dir);
  PipelineResult res;
  const auto t0 = std::chrono::steady_clock::now();
  const TaskData train = data.train();
  for (int s = first; s <= last; ++s) {
    Rng sampler = stage_sampler(cfg.seed, s);
    StageHooks hooks;
    if (!out_dir.empty()) hooks.nan_dump_path = (fs::path(out_dir) / ("stage" + std::to_string(s) + "_nan_dump.padt")).string();
    const auto& sc = cfg.stages[s - 1];
    const std::size_t every = std::max<std::size_t>(1, sc.total_steps / 10);
    hooks.on_step = [&, s](const LossRow& r) {
      if (r.step % every == 0 || r.step == sc.total_steps)
        log_info("stage " + std::to_string(s) + " step " + std::to_string(r.step) + "/" + std::to_string(sc.total_steps) +
                 " loss " + std::to_string(r.loss));
    };
    res.stages.push_back(run_stage(sc, cfg.model, st, train, data.images(), vocab, sampler, hooks));
    if (!out_dir.empty()) {
      save_state((fs::path(out_dir) / ("stage" + std::to_string(s) + ".padt")).string(), st);
      write_text(fs::path(out_dir) / ("stage" + std::to_string(s) + "_loss.csv"), loss_csv(res.stages.back().log));
    }
  }
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  res.state = std::move(st);
  return res;
}

inline PipelineResult train_pipeline(RunConfig& cfg, const RunData& data, const Vocabulary& vocab,
                                     const std::string& out_dir = {}) {
  return train_stages(cfg, data, vocab, init_state(cfg, vocab), 1, 3, out_dir);
}

inline EvalOptions eval_options(const RunConfig& cfg) {
  EvalOptions o;
  o.resolution = cfg.eval_resolution;
  o.max_new = cfg.eval_max_new;
  o.max_per_task = cfg.eval_max_per_task;
  return o;
}

}  // namespace padapt
