#include <gtest/gtest.h>

#include <filesystem>

#include "padapt/synth.hpp"

using namespace padapt;

namespace {

DataConfig small_data(std::uint64_t seed = 1) {
  DataConfig c;
  c.seed = seed;
  c.train = 200;
  c.val = 50;
  c.test = 50;
  return c;
}

}  // namespace

TEST(Scene, DeterministicPerSeed) {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto a = gen_scene(s, 64), b = gen_scene(s, 64);
    EXPECT_EQ(a.first, b.first);
    EXPECT_EQ(scene_hash(a.second), scene_hash(b.second));
  }
  EXPECT_NE(scene_hash(gen_scene_spec(1)), scene_hash(gen_scene_spec(2)));
}

TEST(Scene, SquareOnPixelRangeGivesEighthBox) {
  // a square covering pixels [8,16) on both axes of a 64 canvas
  SceneSpec scene;
  scene.shapes.push_back(place_shape(ShapeKind::square, 0, 1, 1, 1, 1, 8));
  const Image img = render_scene(scene, 64);
  for (std::size_t y = 0; y < 64; ++y)
    for (std::size_t x = 0; x < 64; ++x) {
      const bool in = x >= 8 && x < 16 && y >= 8 && y < 16;
      EXPECT_EQ(img.at(y, x, 0), in ? 230 / 255.0 : 1.0) << y << "," << x;
    }
  const auto recs = gen_records(scene, Task::grounding, "img");
  ASSERT_EQ(recs.size(), 1u);
  EXPECT_EQ(recs[0].target, "<box>(0.125,0.125),(0.250,0.250)</box>");
  EXPECT_EQ(recs[0].expr, "the red square");
}

TEST(Scene, ShapesRespectGridAndDoNotOverlap) {
  for (std::uint64_t s = 0; s < 300; ++s) {
    const auto scene = gen_scene_spec(s);
    ASSERT_GE(scene.shapes.size(), 1u);
    ASSERT_LE(scene.shapes.size(), 3u);
    std::set<std::size_t> colors;
    std::vector<std::vector<int>> occ(8, std::vector<int>(8, 0));
    for (const auto& sh : scene.shapes) {
      colors.insert(sh.color);
      EXPECT_LE(sh.col + sh.w, 8u);
      EXPECT_LE(sh.row + sh.h, 8u);
      for (std::size_t y = sh.row; y < sh.row + sh.h; ++y)
        for (std::size_t x = sh.col; x < sh.col + sh.w; ++x) EXPECT_EQ(occ[y][x]++, 0);
      // on-grid corners are exact multiples of 1/8
      EXPECT_EQ(sh.box.x1 * 8, static_cast<double>(sh.col));
      EXPECT_EQ(sh.box.y2 * 8, static_cast<double>(sh.row + sh.h));
    }
    EXPECT_EQ(colors.size(), scene.shapes.size());
  }
}

TEST(Scene, JitterStaysInsideCanvas) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto scene = gen_scene_spec(s, {8, 3, true});
    for (const auto& sh : scene.shapes) {
      EXPECT_GE(sh.box.x1, 0.0);
      EXPECT_GE(sh.box.y1, 0.0);
      EXPECT_LE(sh.box.x2, 1.0);
      EXPECT_LE(sh.box.y2, 1.0);
      EXPECT_NEAR(sh.box.x2 - sh.box.x1, sh.w / 8.0, 1e-12);
    }
  }
}

TEST(Records, CaptionMentionsEachColorOnce) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto scene = gen_scene_spec(s);
    const auto cap = gen_records(scene, Task::caption, "x");
    ASSERT_EQ(cap.size(), 1u);
    for (const auto& c : kPalette) {
      const bool present = std::any_of(scene.shapes.begin(), scene.shapes.end(),
                                       [&](const ShapeSpec& sh) { return kPalette[sh.color].name == c.name; });
      std::size_t count = 0;
      for (auto pos = cap[0].target.find(c.name); pos != std::string::npos; pos = cap[0].target.find(c.name, pos + 1))
        ++count;
      EXPECT_EQ(count, present ? 1u : 0u) << cap[0].target;
    }
  }
}

TEST(Records, GroundingLabelsMatchBoxes) {
  for (std::uint64_t s = 0; s < 300; ++s) {
    for (bool jitter : {false, true}) {
      const auto scene = gen_scene_spec(s, {8, 3, jitter});
      const auto recs = gen_records(scene, Task::grounding, "x");
      ASSERT_EQ(recs.size(), scene.shapes.size());
      for (const auto& r : recs) {
        const auto it = std::find_if(scene.shapes.begin(), scene.shapes.end(),
                                     [&](const ShapeSpec& sh) { return "the " + sh.label() == r.expr; });
        ASSERT_NE(it, scene.shapes.end());
        const auto p = parse_box(r.target);
        ASSERT_TRUE(p.ok());
        EXPECT_LE(std::abs(p.box.x1 - it->box.x1), 5e-4);
        EXPECT_LE(std::abs(p.box.y1 - it->box.y1), 5e-4);
        EXPECT_LE(std::abs(p.box.x2 - it->box.x2), 5e-4);
        EXPECT_LE(std::abs(p.box.y2 - it->box.y2), 5e-4);
      }
    }
  }
}

TEST(Records, VqaAnswersAreConsistent) {
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto scene = gen_scene_spec(s);
    for (const auto& r : gen_records(scene, Task::vqa, "x")) {
      EXPECT_FALSE(r.question.empty());
      if (r.question == "how many shapes are there?") {
        const char* words[] = {"zero", "one", "two", "three"};
        EXPECT_EQ(r.target, words[scene.shapes.size()]);
      }
    }
  }
}

TEST(Records, EmptySceneIsGenerationError) {
  SceneSpec empty;
  EXPECT_THROW(gen_records(empty, Task::caption, "x"), GenerationError);
  EXPECT_THROW(gen_scene_spec(1, {2, 3, false}), GenerationError);
}

TEST(Dataset, LexiconClosure) {
  const auto ds = SynthDataset::generate(small_data());
  Vocabulary v;
  for (const char* split : kSplitNames)
    for (Task t : kAllTasks)
      for (const auto& r : ds.records(split, t))
        for (int stage = (t == Task::caption ? 1 : 2); stage <= 3; ++stage) {
          const std::string text = render_prompt(r, stage) + r.target;
          for (auto id : v.tokenize(text)) ASSERT_NE(id, v.unk_id()) << text;
        }
}

TEST(Dataset, SplitsAreDisjoint) {
  const auto ds = SynthDataset::generate(small_data(4));
  std::map<std::string, std::set<std::uint64_t>> hashes;
  for (const auto& info : ds.splits()) {
    EXPECT_EQ(info.seed_begin % kSplitStride, 0u);
    for (const auto& r : ds.records(info.name, Task::caption)) {
      EXPECT_EQ(r.image.rfind(info.name + "/", 0), 0u);
      hashes[info.name].insert(scene_hash(ds.scene(r.image)));
    }
  }
  for (auto h : hashes["test"]) {
    EXPECT_FALSE(hashes["train"].count(h));
    EXPECT_FALSE(hashes["val"].count(h));
  }
  for (auto h : hashes["val"]) EXPECT_FALSE(hashes["train"].count(h));
  EXPECT_EQ(ds.records("train", Task::grounding).size(), 200u);
  EXPECT_EQ(ds.records("test", Task::vqa).size(), 50u);
}

TEST(Dataset, DeterministicGeneration) {
  const auto a = SynthDataset::generate(small_data(9)), b = SynthDataset::generate(small_data(9));
  for (Task t : kAllTasks) EXPECT_EQ(a.records("train", t), b.records("train", t));
  EXPECT_EQ(a.manifest(), b.manifest());
  const auto c = SynthDataset::generate(small_data(10));
  EXPECT_NE(a.records("train", Task::caption), c.records("train", Task::caption));
}

TEST(Dataset, WriteAndReadBack) {
  auto cfg = small_data(2);
  cfg.train = 6;
  cfg.val = 2;
  cfg.test = 2;
  const auto ds = SynthDataset::generate(cfg);
  const auto dir = std::filesystem::temp_directory_path() / "padapt_synth_rt";
  std::filesystem::remove_all(dir);
  ds.write(dir);
  const DirectoryDataset back(dir);
  for (const char* split : kSplitNames)
    for (Task t : kAllTasks) EXPECT_EQ(back.records(split, t), ds.records(split, t));
  const auto& id = ds.records("val", Task::caption)[0].image;
  EXPECT_EQ(back.load(id, 64), ds.load(id, 64));
  EXPECT_EQ(back.load(id, 32), ds.load(id, 32));
  EXPECT_EQ(back.manifest()["splits"].size(), 3u);
  EXPECT_THROW(back.records("holdout", Task::vqa), ConfigError);
  EXPECT_THROW(DirectoryDataset(dir / "missing"), IoError);
}

TEST(Dataset, ZeroSizedSplitIsEmpty) {
  auto cfg = small_data();
  cfg.val = 0;
  const auto ds = SynthDataset::generate(cfg);
  EXPECT_TRUE(ds.records("val", Task::caption).empty());
  EXPECT_THROW(ds.load("val/nothing", 64), IoError);
}

TEST(Records, RedSquareColorQuestion) {
  SceneSpec scene;
  scene.shapes.push_back(place_shape(ShapeKind::square, 0, 2, 2, 2, 2, 8));
  const auto recs = gen_records(scene, Task::vqa, "img");
  const auto it = std::find_if(recs.begin(), recs.end(),
                               [](const PromptRecord& r) { return r.question == "what color is the square?"; });
  ASSERT_NE(it, recs.end());
  EXPECT_EQ(it->target, "red");
}
