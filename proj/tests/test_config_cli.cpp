#include <gtest/gtest.h>

#include <sys/wait.h>

#include <filesystem>
#include <fstream>

#include "padapt/config.hpp"
#include "padapt/synth.hpp"

using namespace padapt;
namespace fs = std::filesystem;

namespace {

const EnvLookup no_env = [](const std::string&) -> const char* { return nullptr; };

constexpr const char* kTinyIni = R"(seed = 11

[model]
vision_width = 8
vision_heads = 2
lm_width = 16
lm_heads = 2
lm_mlp_ratio = 2

[pool]
scales = 1,2

[stage1]
total_steps = 3
batch_size = 2

[stage2]
total_steps = 3
batch_size = 2

[stage3]
total_steps = 3
batch_size = 2

[data]
train = 8
val = 2
test = 2

[eval]
max_new = 4
)";

fs::path scratch(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("padapt_cli_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

fs::path write_ini(const fs::path& dir, const std::string& text = kTinyIni) {
  const auto p = dir / "run.ini";
  std::ofstream(p) << text;
  return p;
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(PADAPT_CLI_PATH) + " " + args + " > /dev/null 2>&1";
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

}  // namespace

TEST(Config, ParsesSectionsAndLists) {
  const auto c = parse_run_config(kTinyIni, no_env);
  EXPECT_EQ(c.seed, 11u);
  EXPECT_EQ(c.data.seed, 11u);
  EXPECT_EQ(c.model.lm.width, 16u);
  EXPECT_EQ(c.model.pool.llm_width, 16u);
  EXPECT_EQ(c.model.pool.scales, (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(c.stages[1].total_steps, 3u);
  EXPECT_EQ(c.stages[0].stage, 1);
  EXPECT_EQ(c.stages[2].stage, 3);
  EXPECT_EQ(c.data.train, 8u);
  EXPECT_EQ(c.eval_max_new, 4u);
  const auto plus = parse_run_config("[pool]\nscales = 8+16+32\n", no_env);
  EXPECT_EQ(plus.model.pool.scales, (std::vector<std::size_t>{8, 16, 32}));
}

TEST(Config, DefaultsWithoutFile) {
  const auto c = build_run_config({}, no_env);
  EXPECT_EQ(c.stages[0].batch_size, 32u);
  EXPECT_EQ(c.stages[1].batch_size, 16u);
  EXPECT_EQ(c.stages[2].batch_size, 8u);
  EXPECT_EQ(c.stages[1].min_lr, c.stages[1].peak_lr / 10);
  EXPECT_EQ(c.model.lm.width, 64u);
  EXPECT_EQ(c.data.train, 8000u);
}

TEST(Config, EnvironmentOverridesFile) {
  const EnvLookup env = [](const std::string& k) -> const char* {
    if (k == "PADAPT_STAGE2_TOTAL_STEPS") return "42";
    if (k == "PADAPT_POOL_SCALES") return "4,8";
    return nullptr;
  };
  const auto c = parse_run_config(kTinyIni, env);
  EXPECT_EQ(c.stages[1].total_steps, 42u);
  EXPECT_EQ(c.model.pool.scales, (std::vector<std::size_t>{4, 8}));
  EXPECT_EQ(c.stages[0].total_steps, 3u);
}

TEST(Config, RejectsUnknownAndInvalid) {
  EXPECT_THROW(parse_run_config("[model]\nlm_wdith = 3\n", no_env), ConfigError);
  EXPECT_THROW(parse_run_config("[decoder]\nx = 1\n", no_env), ConfigError);
  EXPECT_THROW(parse_run_config("[stage2]\ntotal_steps = many\n", no_env), ConfigError);
  auto dup = parse_run_config("[pool]\nscales = 2,4,2\n", no_env);
  EXPECT_THROW(dup.validate(), ConfigError);
  auto odd = parse_run_config("[model]\nlm_width = 10\nlm_heads = 4\n", no_env);
  EXPECT_THROW(odd.validate(), ConfigError);
  EXPECT_THROW(load_run_config("/nonexistent/run.ini", no_env), IoError);
}

TEST(Cli, UsageErrorsExitOne) {
  EXPECT_EQ(run_cli(""), 1);
  EXPECT_EQ(run_cli("frobnicate"), 1);
  EXPECT_EQ(run_cli("demo"), 1);  // --image is required
  EXPECT_EQ(run_cli("--help"), 0);
}

TEST(Cli, ValidationErrorsExitTwo) {
  const auto d = scratch("validation");
  const auto bad = write_ini(d, "[pool]\nscales = 2,2\n");
  EXPECT_EQ(run_cli("train -c " + bad.string() + " -o " + (d / "out").string()), 2);
  const auto ini = write_ini(d);
  EXPECT_EQ(run_cli("train --stage 2 -c " + ini.string() + " -o " + (d / "out").string()), 2);
  EXPECT_FALSE(fs::exists(d / "out" / "stage2.padt"));
  EXPECT_EQ(run_cli("train --stage 7 -c " + ini.string() + " -o " + (d / "out").string()), 2);
}

TEST(Cli, GenDataIsReproducible) {
  const auto d = scratch("gendata");
  const auto ini = write_ini(d);
  ASSERT_EQ(run_cli("gen-data -c " + ini.string() + " --dir " + (d / "a").string()), 0);
  ASSERT_EQ(run_cli("gen-data -c " + ini.string() + " --dir " + (d / "b").string()), 0);
  for (const char* split : kSplitNames)
    for (Task t : kAllTasks) EXPECT_TRUE(fs::exists(d / "a" / (std::string(split) + "_" + task_name(t) + ".jsonl")));
  EXPECT_EQ(slurp(d / "a" / "manifest.json"), slurp(d / "b" / "manifest.json"));
  EXPECT_EQ(slurp(d / "a" / "train_grounding.jsonl"), slurp(d / "b" / "train_grounding.jsonl"));
}

TEST(Cli, TrainEvalDemoRoundTrip) {
  const auto d = scratch("pipeline");
  const auto ini = write_ini(d);
  const std::string base = " -c " + ini.string() + " -o " + (d / "out").string() + " --log-level off";
  ASSERT_EQ(run_cli("train --stage 1" + base), 0);
  ASSERT_TRUE(fs::exists(d / "out" / "stage1.padt"));
  ASSERT_TRUE(fs::exists(d / "out" / "stage1_loss.csv"));
  EXPECT_EQ(slurp(d / "out" / "stage1_loss.csv").rfind("step,lr,loss,task_mix\n", 0), 0u);
  ASSERT_EQ(run_cli("train --stage 2" + base), 0);
  ASSERT_EQ(run_cli("train --stage 3" + base), 0);
  ASSERT_EQ(run_cli("eval" + base), 0);
  ASSERT_EQ(run_cli("eval --scales 2" + base), 0);
  EXPECT_EQ(run_cli("eval --scales 8" + base), 2);
  // corrupt checkpoint -> runtime error
  std::ofstream(d / "broken.padt") << "PADTgarbage";
  EXPECT_EQ(run_cli("eval --checkpoint " + (d / "broken.padt").string() + base), 3);
  // demo
  const auto img = d / "img.ppm";
  write_ppm(img.string(), render_scene(gen_scene_spec(3), 64));
  EXPECT_EQ(run_cli("demo --image " + img.string() + " --task grounding --query \"the red square\"" + base), 0);
  EXPECT_EQ(run_cli("demo --image " + img.string() + " --task caption" + base), 0);
  EXPECT_EQ(run_cli("demo --image " + (d / "missing.ppm").string() + " --task caption" + base), 3);
}

TEST(Cli, GradcheckPasses) {
  EXPECT_EQ(run_cli("gradcheck --seeds 3 --log-level off"), 0);
}
