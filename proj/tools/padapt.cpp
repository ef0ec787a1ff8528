// padapt command-line driver: gen-data | train | eval | ablate | gradcheck | demo

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "padapt/padapt.hpp"

namespace fs = std::filesystem;
using namespace padapt;

namespace {

enum Exit { kOk = 0, kUsage = 1, kValidation = 2, kRuntime = 3 };

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  std::string log_level = "info";
};

RunConfig load(const Common& c) {
  RunConfig cfg = c.config.empty() ? build_run_config({}) : load_run_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
    cfg.data.seed = *c.seed;
  }
  if (!c.out.empty()) cfg.output_dir = c.out;
  cfg.model.lm.vocab_size = Vocabulary().size();
  cfg.validate();
  return cfg;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string file_id(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  std::string bytes((std::istreambuf_iterator<char>(is)), {});
  return hex64(hash_string(bytes));
}

std::vector<std::size_t> parse_scales(const std::string& s, const ModelConfig& m) {
  if (s.empty() || s == "full") return m.pool.scales;
  std::vector<std::size_t> out;
  for (const auto& tok : detail::split_list(s)) {
    try {
      out.push_back(std::stoul(tok));
    } catch (const std::exception&) {
      throw ConfigError("bad scale '" + tok + "'");
    }
  }
  if (out.empty()) throw SelectionError("empty scale selection");
  return out;
}

int cmd_gen_data(const Common& c, const std::string& dir_opt) {
  RunConfig cfg = load(c);
  const std::string dir = !dir_opt.empty() ? dir_opt : (fs::path(cfg.output_dir) / "data").string();
  const auto ds = SynthDataset::generate(cfg.data);
  ds.write(dir);
  std::cout << "wrote dataset to " << dir << " (manifest " << hex64(hash_string(ds.manifest().dump())) << ")\n";
  for (const auto& s : ds.splits())
    std::cout << "  " << s.name << ": " << s.count << " scenes, seeds [" << s.seed_begin << ", " << s.seed_end << ")\n";
  return kOk;
}

int cmd_train(const Common& c, const std::string& stage_opt, const std::string& from) {
  RunConfig cfg = load(c);
  Vocabulary vocab;
  int first = 1, last = 3;
  if (stage_opt != "all") {
    try {
      first = last = std::stoi(stage_opt);
    } catch (const std::exception&) {
      throw ConfigError("--stage must be 1, 2, 3 or all");
    }
    if (first < 1 || first > 3) throw ConfigError("--stage must be 1, 2, 3 or all");
  }
  TrainState st;
  if (first == 1) {
    st = init_state(cfg, vocab);
  } else {
    const std::string prior =
        !from.empty() ? from : (fs::path(cfg.output_dir) / ("stage" + std::to_string(first - 1) + ".padt")).string();
    if (!fs::exists(prior))
      throw StageOrderError("stage " + std::to_string(first) + " needs the stage " + std::to_string(first - 1) +
                            " checkpoint; not found at " + prior);
    st = load_state(prior);
    check_compatible(st.params, cfg.model, vocab);
    if (st.seed != cfg.seed) log_warn("checkpoint seed differs from config seed");
  }
  const RunData data = RunData::from_config(cfg);
  auto res = train_stages(cfg, data, vocab, std::move(st), first, last, cfg.output_dir);
  std::cout << "trained stages " << first << ".." << last << " in " << res.seconds << " s; checkpoint "
            << (fs::path(cfg.output_dir) / ("stage" + std::to_string(last) + ".padt")).string() << "\n";
  return kOk;
}

void write_report(const fs::path& dir, const std::string& stem, const EvalReport& rep) {
  fs::create_directories(dir);
  write_text(dir / (stem + ".json"), rep.to_json().dump(2) + "\n");
  write_text(dir / (stem + ".txt"), rep.table());
  write_text(dir / (stem + "_predictions.jsonl"), rep.predictions_jsonl());
}

int cmd_eval(const Common& c, const std::string& ckpt_opt, const std::string& scales_opt, const std::string& split) {
  RunConfig cfg = load(c);
  Vocabulary vocab;
  const std::string ckpt = !ckpt_opt.empty() ? ckpt_opt : (fs::path(cfg.output_dir) / "stage3.padt").string();
  TrainState st = load_state(ckpt);
  check_compatible(st.params, cfg.model, vocab);
  if (cfg.model.adapter == AdapterKind::pool && !st.scales.empty() && st.scales != cfg.model.pool.scales)
    throw ConfigError("checkpoint was trained with scales " + scale_label(st.scales) + " but config lists " +
                      scale_label(cfg.model.pool.scales));
  const RunData data = RunData::from_config(cfg);
  EvalOptions opt = eval_options(cfg);
  const auto split_map = data.split(split.empty() ? cfg.eval_split : split);
  const fs::path out = fs::path(cfg.output_dir) / "eval";
  const auto selected = parse_scales(scales_opt, cfg.model);
  const bool full = cfg.model.adapter != AdapterKind::pool || selected == cfg.model.pool.scales;
  if (full) {
    EvalReport rep = evaluate(st.params, cfg.model, vocab, split_map, data.images(), opt);
    rep.checkpoint_id = file_id(ckpt);
    rep.seed = cfg.seed;
    write_report(out, "report", rep);
    std::cout << rep.table();
    return kOk;
  }
  auto results = online_subset_eval(st.params, cfg.model, vocab, split_map, data.images(), opt, {selected});
  for (auto& r : results) {
    r.report.checkpoint_id = file_id(ckpt);
    r.report.seed = cfg.seed;
  }
  write_report(out, "report", results[0].report);
  write_report(out, "report_p" + scale_label(results[1].subset), results[1].report);
  nlohmann::json deltas;
  for (const auto& [t, d] : results[1].delta) deltas[task_name(t)] = d;
  deltas["mean"] = results[1].delta_mean;
  write_text(out / ("delta_p" + scale_label(results[1].subset) + ".json"), deltas.dump(2) + "\n");
  std::cout << subset_table(results);
  return kOk;
}

int cmd_ablate(const Common& c, const std::string& configs, bool online) {
  RunConfig base = load(c);
  Vocabulary vocab;
  const RunData data = RunData::from_config(base);
  std::vector<std::vector<std::size_t>> runs;
  std::stringstream ss(configs);
  for (std::string item; std::getline(ss, item, ';');)
    if (!item.empty()) runs.push_back(parse_scales(item, base.model));
  if (runs.empty()) throw ConfigError("--configs lists no scale configuration");
  std::vector<EvalReport> reports;
  std::vector<std::string> labels;
  std::optional<TrainState> multi;
  RunConfig multi_cfg;
  for (const auto& scales : runs) {
    RunConfig cfg = base;
    cfg.model.adapter = AdapterKind::pool;
    cfg.model.pool.scales = scales;
    cfg.validate();
    const std::string label = scale_label(scales);
    const fs::path dir = fs::path(base.output_dir) / ("ablate_p" + label);
    auto res = train_pipeline(cfg, data, vocab, dir.string());
    EvalReport rep = evaluate(res.state.params, cfg.model, vocab, data.split(cfg.eval_split), data.images(),
                              eval_options(cfg));
    rep.checkpoint_id = file_id((dir / "stage3.padt").string());
    rep.seed = cfg.seed;
    write_report(dir, "report", rep);
    reports.push_back(std::move(rep));
    labels.push_back(label);
    if (scales.size() > 1 && !multi) {
      multi = std::move(res.state);
      multi_cfg = cfg;
    }
  }
  std::vector<std::pair<std::string, const EvalReport*>> rows;
  for (std::size_t i = 0; i < reports.size(); ++i) rows.emplace_back(labels[i], &reports[i]);
  const AblationTable tab = scale_ablation(rows);
  write_text(fs::path(base.output_dir) / "ablation.json", tab.to_json().dump(2) + "\n");
  write_text(fs::path(base.output_dir) / "ablation.txt", tab.text());
  std::cout << tab.text();
  if (online && multi) {
    std::vector<std::vector<std::size_t>> subsets;
    for (auto p : multi_cfg.model.pool.scales) subsets.push_back({p});
    const auto results = online_subset_eval(multi->params, multi_cfg.model, vocab, data.split(multi_cfg.eval_split),
                                            data.images(), eval_options(multi_cfg), subsets);
    const std::string table = subset_table(results);
    write_text(fs::path(base.output_dir) / "online_subsets.txt", table);
    std::cout << "\nonline scale selection\n" << table;
  }
  return kOk;
}

int cmd_gradcheck(const Common& c, std::size_t seeds) {
  RunConfig cfg = load(c);
  const std::vector<GradCheckResult> results = {gradcheck_pool_adapter(cfg.seed, seeds),
                                                gradcheck_query_adapter(cfg.seed, seeds), gradcheck_lm(cfg.seed, seeds)};
  bool ok = true;
  for (const auto& r : results) {
    std::printf("%-16s max_rel_error %.3e over %zu seeds (%zu tensors)  %s\n", r.module.c_str(), r.max_rel_error,
                r.seeds, r.tensors, r.pass() ? "PASS" : "FAIL");
    ok = ok && r.pass();
  }
  return ok ? kOk : kRuntime;
}

int cmd_demo(const Common& c, const std::string& ckpt_opt, const std::string& image, const std::string& task_s,
             const std::string& query, const std::string& gold, std::size_t max_new) {
  RunConfig cfg = load(c);
  Vocabulary vocab;
  const std::string ckpt = !ckpt_opt.empty() ? ckpt_opt : (fs::path(cfg.output_dir) / "stage3.padt").string();
  TrainState st = load_state(ckpt);
  check_compatible(st.params, cfg.model, vocab);
  const Image img = read_ppm(image);
  PromptRecord rec;
  rec.task = parse_task(task_s);
  if (rec.task == Task::vqa) rec.question = query;
  if (rec.task == Task::grounding) rec.expr = query;
  const std::string prompt = render_prompt(rec, 3);
  const auto ids = generate_ids(st.params, rec, img, vocab, cfg.model, max_new);
  const std::string text = vocab.detokenize(ids);
  std::cout << "prompt:     " << prompt << "\n";
  std::cout << "generation: " << text << (ids.size() == max_new ? "  [max_new reached]" : "  [<eos>]") << "\n";
  if (rec.task == Task::grounding) {
    const BoxParse bp = parse_box(text);
    if (!bp.ok()) {
      std::cout << "box:        parse failure (" << (bp.status == BoxParseStatus::malformed ? "malformed" : "not found")
                << ")\n";
      return kOk;
    }
    std::cout << "box:        (" << bp.box.x1 << ", " << bp.box.y1 << ", " << bp.box.x2 << ", " << bp.box.y2 << ")\n";
    if (!gold.empty()) {
      const BoxParse g = parse_box(gold);
      if (!g.ok()) throw ConfigError("--gold is not a valid box string");
      std::cout << "iou:        " << iou(bp.box, g.box) << "\n";
    }
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"padapt: pool-adapter multimodal testbed"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("-c,--config", common.config, "INI config file")->check(CLI::ExistingFile);
    sub->add_option("-o,--out", common.out, "output directory (overrides [run] output_dir)");
    sub->add_option("--seed", common.seed, "root seed (overrides [run] seed)");
    sub->add_option("--log-level", common.log_level, "debug|info|warn|error|off")
        ->check(CLI::IsMember({"debug", "info", "warn", "error", "off"}));
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic dataset");
  add_common(gen);
  std::string data_dir;
  gen->add_option("--dir", data_dir, "dataset directory (default <out>/data)");

  auto* train = app.add_subcommand("train", "run training stages");
  add_common(train);
  std::string stage = "all", from;
  train->add_option("-s,--stage", stage, "1, 2, 3 or all");
  train->add_option("--from", from, "prior-stage checkpoint (default <out>/stage<k-1>.padt)");

  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval);
  std::string ckpt, scales, split;
  eval->add_option("--checkpoint", ckpt, "checkpoint (default <out>/stage3.padt)");
  eval->add_option("--scales", scales, "scale subset, e.g. 8 or 4,8 (default: full)");
  eval->add_option("--split", split, "train|val|test (default [eval] split)");

  auto* ablate = app.add_subcommand("ablate", "train and evaluate several scale configurations");
  add_common(ablate);
  std::string configs = "2;4;8;2,4,8";
  bool online = false;
  ablate->add_option("--configs", configs, "semicolon-separated scale lists");
  ablate->add_flag("--online", online, "also evaluate single-scale subsets of the first multi-scale model");

  auto* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  add_common(grad);
  std::size_t seeds = 20;
  grad->add_option("--seeds", seeds, "random configurations per module");

  auto* demo = app.add_subcommand("demo", "single-image inference");
  add_common(demo);
  std::string image, task = "caption", query, gold;
  std::size_t max_new = 48;
  demo->add_option("--checkpoint", ckpt, "checkpoint (default <out>/stage3.padt)");
  demo->add_option("--image", image, "PPM image")->required();
  demo->add_option("--task", task, "caption|vqa|grounding")->check(CLI::IsMember({"caption", "vqa", "grounding"}));
  demo->add_option("--query", query, "question (vqa) or referring expression (grounding)");
  demo->add_option("--gold", gold, "gold box string for IoU (grounding)");
  demo->add_option("--max-new", max_new, "generation limit")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  static const std::map<std::string, LogLevel> levels = {{"debug", LogLevel::debug}, {"info", LogLevel::info},
                                                         {"warn", LogLevel::warn},   {"error", LogLevel::error},
                                                         {"off", LogLevel::off}};
  log_level() = levels.at(common.log_level);

  try {
    if (*gen) return cmd_gen_data(common, data_dir);
    if (*train) return cmd_train(common, stage, from);
    if (*eval) return cmd_eval(common, ckpt, scales, split);
    if (*ablate) return cmd_ablate(common, configs, online);
    if (*grad) return cmd_gradcheck(common, seeds);
    if (*demo) return cmd_demo(common, ckpt, image, task, query, gold, max_new);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kValidation;
  } catch (const SelectionError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kValidation;
  } catch (const StageOrderError& e) {
    std::cerr << "stage order error: " << e.what() << "\n";
    return kValidation;
  } catch (const TemplateError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kValidation;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntime;
  }
  return kUsage;
}
