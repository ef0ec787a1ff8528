#pragma once

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "padapt/model.hpp"
#include "padapt/synth.hpp"

namespace padapt {

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Intersection over union. Zero-area boxes score 0 unless both are the same
/// degenerate box.
inline double iou(const BoundingBox& a, const BoundingBox& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  if (uni <= 0.0) return (a.x1 == b.x1 && a.y1 == b.y1 && a.x2 == b.x2 && a.y2 == b.y2) ? 1.0 : 0.0;
  return inter / uni;
}

struct GroundingScore {
  std::size_t total = 0;
  std::size_t correct = 0;
  std::size_t parse_failures = 0;
  double accuracy() const { return total == 0 ? 0.0 : static_cast<double>(correct) / static_cast<double>(total); }
};

inline bool grounding_correct(const std::string& pred, const BoundingBox& gold, double threshold, bool* parsed) {
  const BoxParse bp = parse_box(pred);
  if (parsed) *parsed = bp.ok();
  return bp.ok() && iou(bp.box, gold) >= threshold;
}

inline GroundingScore grounding_accuracy(const std::vector<std::string>& preds, const std::vector<BoundingBox>& golds,
                                         double threshold = 0.5) {
  if (preds.size() != golds.size()) throw ShapeError("grounding_accuracy: prediction/gold count mismatch");
  GroundingScore s;
  s.total = preds.size();
  for (std::size_t i = 0; i < preds.size(); ++i) {
    bool parsed = false;
    s.correct += grounding_correct(preds[i], golds[i], threshold, &parsed);
    s.parse_failures += !parsed;
  }
  return s;
}

/// Lowercase, punctuation removed, whitespace runs collapsed and trimmed.
inline std::string normalize_answer(std::string_view s) {
  std::string out;
  bool pending_space = false;
  for (unsigned char c : s) {
    if (std::isspace(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (std::ispunct(c)) continue;
    if (pending_space) out.push_back(' ');
    pending_space = false;
    out.push_back(static_cast<char>(std::tolower(c)));
  }
  return out;
}

inline int exact_match(std::string_view pred, std::string_view gold) {
  return normalize_answer(pred) == normalize_answer(gold) ? 1 : 0;
}

inline double exact_match_mean(const std::vector<std::string>& preds, const std::vector<std::string>& golds) {
  if (preds.size() != golds.size()) throw ShapeError("exact_match: prediction/gold count mismatch");
  if (preds.empty()) return 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) n += exact_match(preds[i], golds[i]);
  return static_cast<double>(n) / static_cast<double>(preds.size());
}

inline double vqa_soft_score(std::string_view pred, const std::vector<std::string>& answers) {
  if (answers.empty()) throw ConfigError("vqa_soft_score needs at least one annotator answer");
  const std::string p = normalize_answer(pred);
  std::size_t matches = 0;
  for (const auto& a : answers) matches += normalize_answer(a) == p;
  return std::min(static_cast<double>(matches) / 3.0, 1.0);
}

// ---------------------------------------------------------------------------
// Model evaluation
// ---------------------------------------------------------------------------

struct Prediction {
  Task task = Task::caption;
  std::string image;
  std::string prompt;
  std::string target;
  std::string output;
  double score = 0.0;
  bool parse_failed = false;
};

struct TaskMetric {
  std::string metric;  // "em", "vqa_score", "grounding_acc"
  double value = 0.0;
  std::size_t scored = 0;
  std::size_t parse_failures = 0;
};

struct EvalReport {
  std::map<Task, TaskMetric> tasks;
  std::vector<Prediction> predictions;
  std::string checkpoint_id;
  std::vector<std::size_t> scales;
  std::uint64_t seed = 0;
  std::size_t dataset_size = 0;

  double mean() const {
    if (tasks.empty()) return 0.0;
    double s = 0.0;
    for (const auto& [_, m] : tasks) s += m.value;
    return s / static_cast<double>(tasks.size());
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["checkpoint"] = checkpoint_id;
    j["scales"] = scales;
    j["seed"] = seed;
    j["dataset_size"] = dataset_size;
    for (const auto& [t, m] : tasks)
      j["tasks"][task_name(t)] = {
          {"metric", m.metric}, {"value", m.value}, {"scored", m.scored}, {"parse_failures", m.parse_failures}};
    j["mean"] = mean();
    return j;
  }

  std::string table() const {
    std::ostringstream os;
    os << std::left << std::setw(12) << "task" << std::setw(16) << "metric" << std::right << std::setw(10) << "value"
       << std::setw(8) << "n" << std::setw(14) << "parse_fail" << '\n';
    for (const auto& [t, m] : tasks)
      os << std::left << std::setw(12) << task_name(t) << std::setw(16) << m.metric << std::right << std::setw(10)
         << std::fixed << std::setprecision(4) << m.value << std::setw(8) << m.scored << std::setw(14)
         << m.parse_failures << '\n';
    os << std::left << std::setw(28) << "mean" << std::right << std::setw(10) << std::fixed << std::setprecision(4)
       << mean() << '\n';
    return os.str();
  }

  std::string predictions_jsonl() const {
    std::string out;
    for (const auto& p : predictions) {
      nlohmann::json j{{"task", task_name(p.task)}, {"image", p.image},   {"prompt", p.prompt},
                       {"target", p.target},        {"output", p.output}, {"score", p.score},
                       {"parse_failed", p.parse_failed}};
      out += j.dump() + "\n";
    }
    return out;
  }
};

struct EvalOptions {
  std::size_t resolution = 64;
  std::size_t max_new = 48;
  std::size_t max_per_task = 0;  // 0: all records
  std::vector<Task> tasks{kAllTasks.begin(), kAllTasks.end()};
  const std::vector<std::size_t>* selected = nullptr;  // pool scales to splice; null: all
};

inline std::string task_metric_name(Task t) {
  return t == Task::grounding ? "grounding_acc" : t == Task::vqa ? "vqa_score" : "em";
}

/// Greedy generation on each record followed by the task metric: caption EM,
/// VQA soft score against the single gold answer, grounding IoU >= 0.5.
inline EvalReport evaluate(ParamStore& params, const ModelConfig& cfg, const Vocabulary& vocab,
                           const std::map<Task, const std::vector<PromptRecord>*>& data, const ImageSource& images,
                           const EvalOptions& opt) {
  EvalReport rep;
  if (cfg.adapter == AdapterKind::pool) rep.scales = opt.selected ? *opt.selected : cfg.pool.scales;
  for (Task t : opt.tasks) {
    auto it = data.find(t);
    if (it == data.end() || !it->second) throw ConfigError("evaluate: no records for task " + task_name(t));
    const auto& recs = *it->second;
    const std::size_t n = opt.max_per_task ? std::min(opt.max_per_task, recs.size()) : recs.size();
    TaskMetric m;
    m.metric = task_metric_name(t);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const PromptRecord& rec = recs[i];
      Prediction pr;
      pr.task = t;
      pr.image = rec.image;
      pr.prompt = render_prompt(rec, 3);
      pr.target = rec.target;
      pr.output = generate(params, rec, images.load(rec.image, opt.resolution), vocab, cfg, opt.max_new, opt.selected);
      if (t == Task::grounding) {
        const BoxParse gold = parse_box(rec.target);
        if (!gold.ok()) throw ParseError("grounding target is not a valid box: " + rec.target);
        bool parsed = false;
        pr.score = grounding_correct(pr.output, gold.box, 0.5, &parsed) ? 1.0 : 0.0;
        pr.parse_failed = !parsed;
        if (parsed) ++m.scored;
        else ++m.parse_failures;
      } else {
        pr.score = t == Task::vqa ? vqa_soft_score(pr.output, {rec.target}) : exact_match(pr.output, rec.target);
        ++m.scored;
      }
      sum += pr.score;
      rep.predictions.push_back(std::move(pr));
    }
    m.value = n ? sum / static_cast<double>(n) : 0.0;
    rep.dataset_size += n;
    rep.tasks[t] = m;
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Scale ablation and online subset evaluation
// ---------------------------------------------------------------------------

inline std::string scale_label(const std::vector<std::size_t>& scales) {
  std::string s;
  for (auto p : scales) s += (s.empty() ? "" : "+") + std::to_string(p);
  return s;
}

struct AblationRow {
  std::string config;
  std::map<Task, double> values;  // percentage points
  double mean = 0.0;
};

struct AblationTable {
  std::vector<Task> tasks;
  std::vector<AblationRow> rows;

  // Rank marks per column ("mean" included): 1 best, 2 second best, 0 other.
  // Equal values share a rank.
  std::map<std::string, std::vector<int>> ranks() const {
    std::map<std::string, std::vector<int>> out;
    auto mark = [&](const std::string& col, const std::vector<double>& vals) {
      std::vector<double> distinct(vals);
      std::sort(distinct.begin(), distinct.end(), std::greater<>());
      distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
      auto& r = out[col];
      for (double v : vals) r.push_back(v == distinct[0] ? 1 : (distinct.size() > 1 && v == distinct[1]) ? 2 : 0);
    };
    if (rows.empty()) return out;
    for (Task t : tasks) {
      std::vector<double> v;
      for (const auto& r : rows) v.push_back(r.values.at(t));
      mark(task_name(t), v);
    }
    std::vector<double> v;
    for (const auto& r : rows) v.push_back(r.mean);
    mark("mean", v);
    return out;
  }

  std::string text() const {
    const auto rk = ranks();
    auto cell = [&](double v, const std::string& col, std::size_t row) {
      char buf[32];
      const int r = rk.at(col)[row];
      std::snprintf(buf, sizeof buf, "%.2f%s", v, r == 1 ? "*" : r == 2 ? "_" : " ");
      return std::string(buf);
    };
    std::ostringstream os;
    os << std::left << std::setw(14) << "p";
    for (Task t : tasks) os << std::right << std::setw(14) << task_name(t);
    os << std::setw(14) << "Mean" << '\n';
    for (std::size_t i = 0; i < rows.size(); ++i) {
      os << std::left << std::setw(14) << rows[i].config;
      for (Task t : tasks) os << std::right << std::setw(14) << cell(rows[i].values.at(t), task_name(t), i);
      os << std::setw(14) << cell(rows[i].mean, "mean", i) << '\n';
    }
    os << "(* best, _ second best per column)\n";
    return os.str();
  }

  nlohmann::json to_json() const {
    nlohmann::json j = nlohmann::json::array();
    const auto rk = ranks();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      nlohmann::json r{{"config", rows[i].config}, {"mean", rows[i].mean}, {"mean_rank", rk.at("mean")[i]}};
      for (Task t : tasks) {
        r[task_name(t)] = rows[i].values.at(t);
        r[task_name(t) + "_rank"] = rk.at(task_name(t))[i];
      }
      j.push_back(r);
    }
    return j;
  }
};

/// One row per trained configuration, metric values in percentage points and
/// the cross-task mean, mirroring a per-task ablation table.
inline AblationTable scale_ablation(const std::vector<std::pair<std::string, const EvalReport*>>& runs) {
  AblationTable tab;
  for (const auto& [label, rep] : runs) {
    if (!rep) throw ConfigError("scale_ablation: missing report for " + label);
    if (tab.tasks.empty())
      for (const auto& [t, _] : rep->tasks) tab.tasks.push_back(t);
    AblationRow row;
    row.config = label;
    for (Task t : tab.tasks) {
      auto it = rep->tasks.find(t);
      if (it == rep->tasks.end()) throw ConfigError("scale_ablation: " + label + " lacks task " + task_name(t));
      row.values[t] = 100.0 * it->second.value;
    }
    row.mean = 100.0 * rep->mean();
    tab.rows.push_back(row);
  }
  return tab;
}

struct SubsetResult {
  std::vector<std::size_t> subset;
  EvalReport report;
  double delta_mean = 0.0;           // points vs full set
  std::map<Task, double> delta;      // points vs full set
};

/// Evaluates a multi-scale checkpoint with subsets of its trained scales
/// spliced at inference. The first result is always the full set.
inline std::vector<SubsetResult> online_subset_eval(ParamStore& params, const ModelConfig& cfg,
                                                    const Vocabulary& vocab,
                                                    const std::map<Task, const std::vector<PromptRecord>*>& data,
                                                    const ImageSource& images, EvalOptions opt,
                                                    const std::vector<std::vector<std::size_t>>& subsets) {
  if (cfg.adapter != AdapterKind::pool) throw ConfigError("online subset evaluation needs a pool-adapter model");
  const std::set<std::size_t> trained(cfg.pool.scales.begin(), cfg.pool.scales.end());
  for (const auto& s : subsets) {
    if (s.empty()) throw SelectionError("empty scale subset");
    for (auto p : s)
      if (!trained.count(p))
        throw ConfigError("scale " + std::to_string(p) + " is not among the trained scales " +
                          scale_label(cfg.pool.scales));
  }
  std::vector<SubsetResult> out;
  opt.selected = nullptr;
  out.push_back({cfg.pool.scales, evaluate(params, cfg, vocab, data, images, opt), 0.0, {}});
  for (const auto& s : subsets) {
    SubsetResult r;
    // Selection follows config order whatever order the subset lists.
    for (auto p : cfg.pool.scales)
      if (std::find(s.begin(), s.end(), p) != s.end()) r.subset.push_back(p);
    opt.selected = &r.subset;
    r.report = evaluate(params, cfg, vocab, data, images, opt);
    for (const auto& [t, m] : r.report.tasks) r.delta[t] = 100.0 * (m.value - out[0].report.tasks.at(t).value);
    r.delta_mean = 100.0 * (r.report.mean() - out[0].report.mean());
    out.push_back(std::move(r));
  }
  return out;
}

inline std::string subset_table(const std::vector<SubsetResult>& results) {
  std::ostringstream os;
  if (results.empty()) return {};
  os << std::left << std::setw(14) << "p";
  for (const auto& [t, _] : results[0].report.tasks) os << std::right << std::setw(14) << task_name(t);
  os << std::setw(10) << "Mean" << std::setw(12) << "delta" << '\n';
  for (std::size_t i = 0; i < results.size(); ++i) {
    const auto& r = results[i];
    os << std::left << std::setw(14) << (scale_label(r.subset) + (i == 0 ? " (full)" : ""));
    for (const auto& [t, m] : r.report.tasks) os << std::right << std::setw(14) << std::fixed << std::setprecision(2) << 100.0 * m.value;
    os << std::setw(10) << 100.0 * r.report.mean() << std::setw(12) << std::showpos << r.delta_mean << std::noshowpos
       << '\n';
  }
  return os.str();
}

}  // namespace padapt
