#pragma once

#include <algorithm>
#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <numeric>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "padapt/prompt.hpp"
#include "padapt/rng.hpp"
#include "padapt/vision.hpp"

namespace padapt {

class GenerationError : public Error {
 public:
  using Error::Error;
};

enum class ShapeKind { square = 0, circle = 1, bar = 2 };

inline std::string kind_name(ShapeKind k) {
  static const char* names[] = {"square", "circle", "bar"};
  return names[static_cast<int>(k)];
}

struct PaletteColor {
  const char* name;
  unsigned char r, g, b;
};

inline constexpr std::array<PaletteColor, 8> kPalette{{
    {"red", 230, 20, 20},
    {"green", 20, 160, 40},
    {"blue", 30, 60, 230},
    {"yellow", 240, 210, 0},
    {"cyan", 0, 200, 210},
    {"magenta", 210, 0, 200},
    {"orange", 250, 130, 0},
    {"purple", 120, 20, 160},
}};

struct ShapeSpec {
  ShapeKind kind = ShapeKind::square;
  std::size_t color = 0;  // palette index
  BoundingBox box;        // normalized, exact for on-grid shapes
  // Placement in grid cells (top-left column/row, extent).
  std::size_t col = 0, row = 0, w = 1, h = 1;

  std::string color_name() const { return kPalette[color].name; }
  std::string label() const { return color_name() + " " + kind_name(kind); }
};

struct SceneSpec {
  std::size_t cells = 8;  // placement grid per side
  std::vector<ShapeSpec> shapes;
};

struct SceneOptions {
  std::size_t cells = 8;
  std::size_t max_shapes = 3;
  bool jitter = false;
};

inline ShapeSpec place_shape(ShapeKind kind, std::size_t color, std::size_t col, std::size_t row, std::size_t w,
                             std::size_t h, std::size_t cells) {
  const double c = static_cast<double>(cells);
  ShapeSpec s;
  s.kind = kind;
  s.color = color;
  s.col = col;
  s.row = row;
  s.w = w;
  s.h = h;
  s.box = {col / c, row / c, (col + w) / c, (row + h) / c};
  return s;
}

/// Draws a scene of 1..max_shapes non-overlapping shapes with distinct
/// colors. Shapes snap to the placement grid unless jitter is enabled, in
/// which case each shape is shifted by up to half a cell.
inline SceneSpec gen_scene_spec(std::uint64_t seed, const SceneOptions& opt = {}) {
  if (opt.cells < 4 || opt.max_shapes == 0) throw GenerationError("scene options too small");
  Rng rng(splitmix64(seed));
  SceneSpec scene;
  scene.cells = opt.cells;
  const std::size_t n = 1 + rng.below(std::min<std::size_t>(opt.max_shapes, kPalette.size()));
  std::vector<std::size_t> colors(kPalette.size());
  std::iota(colors.begin(), colors.end(), std::size_t{0});
  std::vector<std::vector<bool>> used(opt.cells, std::vector<bool>(opt.cells, false));
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t ci = k + rng.below(colors.size() - k);
    std::swap(colors[k], colors[ci]);
    const auto kind = static_cast<ShapeKind>(rng.below(3));
    std::size_t w, h;
    if (kind == ShapeKind::bar) {
      const bool horizontal = rng.below(2) == 0;
      w = horizontal ? 4 : 2;
      h = horizontal ? 2 : 4;
    } else {
      w = h = 2 + rng.below(2);
    }
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const std::size_t col = rng.below(opt.cells - w + 1), row = rng.below(opt.cells - h + 1);
      bool free = true;
      for (std::size_t y = row; y < row + h && free; ++y)
        for (std::size_t x = col; x < col + w && free; ++x) free = !used[y][x];
      if (!free) continue;
      for (std::size_t y = row; y < row + h; ++y)
        for (std::size_t x = col; x < col + w; ++x) used[y][x] = true;
      scene.shapes.push_back(place_shape(kind, colors[k], col, row, w, h, opt.cells));
      placed = true;
    }
  }
  if (opt.jitter) {
    const double c = static_cast<double>(opt.cells);
    for (auto& s : scene.shapes) {
      const double dx = std::clamp(rng.uniform(-0.5, 0.5) / c, -s.box.x1, 1.0 - s.box.x2);
      const double dy = std::clamp(rng.uniform(-0.5, 0.5) / c, -s.box.y1, 1.0 - s.box.y2);
      s.box = {s.box.x1 + dx, s.box.y1 + dy, s.box.x2 + dx, s.box.y2 + dy};
    }
  }
  return scene;
}

/// Rasterizes a scene on a white square canvas. A pixel takes a shape's
/// color when its center lies inside the shape.
inline Image render_scene(const SceneSpec& scene, std::size_t canvas) {
  Image img(canvas, canvas, 1.0);
  const double n = static_cast<double>(canvas);
  for (std::size_t y = 0; y < canvas; ++y) {
    const double v = (y + 0.5) / n;
    for (std::size_t x = 0; x < canvas; ++x) {
      const double u = (x + 0.5) / n;
      for (const auto& s : scene.shapes) {
        const auto& b = s.box;
        bool inside = u >= b.x1 && u < b.x2 && v >= b.y1 && v < b.y2;
        if (inside && s.kind == ShapeKind::circle) {
          const double rx = (b.x2 - b.x1) / 2, ry = (b.y2 - b.y1) / 2;
          const double du = (u - (b.x1 + rx)) / rx, dv = (v - (b.y1 + ry)) / ry;
          inside = du * du + dv * dv <= 1.0;
        }
        if (!inside) continue;
        const auto& c = kPalette[s.color];
        img.at(y, x, 0) = c.r / 255.0;
        img.at(y, x, 1) = c.g / 255.0;
        img.at(y, x, 2) = c.b / 255.0;
      }
    }
  }
  return img;
}

inline std::pair<Image, SceneSpec> gen_scene(std::uint64_t seed, std::size_t canvas, const SceneOptions& opt = {}) {
  SceneSpec spec = gen_scene_spec(seed, opt);
  return {render_scene(spec, canvas), spec};
}

inline std::uint64_t scene_hash(const SceneSpec& scene) {
  std::uint64_t h = hash_string("scene");
  for (const auto& s : scene.shapes) {
    const std::int64_t q[6] = {static_cast<std::int64_t>(s.kind), static_cast<std::int64_t>(s.color),
                               std::llround(s.box.x1 * 1e6), std::llround(s.box.y1 * 1e6),
                               std::llround(s.box.x2 * 1e6), std::llround(s.box.y2 * 1e6)};
    h = fnv1a(q, sizeof q, h);
  }
  return h;
}

namespace detail {

inline std::vector<const ShapeSpec*> reading_order(const SceneSpec& scene) {
  std::vector<const ShapeSpec*> out;
  for (const auto& s : scene.shapes) out.push_back(&s);
  std::stable_sort(out.begin(), out.end(), [](const ShapeSpec* a, const ShapeSpec* b) {
    return std::tie(a->box.y1, a->box.x1) < std::tie(b->box.y1, b->box.x1);
  });
  return out;
}

inline const char* number_word(std::size_t n) {
  static const char* words[] = {"zero", "one", "two", "three"};
  return n <= 3 ? words[n] : "many";
}

}  // namespace detail

/// Every record the scene supports for one task.
///  caption:   "a red square and a blue bar on a white background" (reading order)
///  vqa:       color-of-kind, side, count and presence questions, one-word answers
///  grounding: "the <color> <kind>" -> serialized true box, one per shape
inline std::vector<PromptRecord> gen_records(const SceneSpec& scene, Task task, const std::string& image_id) {
  std::vector<PromptRecord> out;
  auto make = [&](std::string target) {
    PromptRecord r;
    r.task = task;
    r.image = image_id;
    r.target = std::move(target);
    return r;
  };
  if (scene.shapes.empty()) throw GenerationError("scene has no shapes to describe");
  switch (task) {
    case Task::caption: {
      std::string text;
      for (const auto* s : detail::reading_order(scene)) text += (text.empty() ? "a " : " and a ") + s->label();
      out.push_back(make(text + " on a white background"));
      break;
    }
    case Task::vqa: {
      std::map<ShapeKind, std::size_t> kind_count;
      for (const auto& s : scene.shapes) ++kind_count[s.kind];
      for (const auto* s : detail::reading_order(scene)) {
        if (kind_count[s->kind] == 1) {
          auto r = make(s->color_name());
          r.question = "what color is the " + kind_name(s->kind) + "?";
          out.push_back(r);
        }
      }
      for (const auto* s : detail::reading_order(scene)) {
        const double cx = (s->box.x1 + s->box.x2) / 2;
        if (cx == 0.5) continue;
        auto r = make(cx < 0.5 ? "left" : "right");
        r.question = "which side is the " + s->label() + " on?";
        out.push_back(r);
      }
      {
        auto r = make(detail::number_word(scene.shapes.size()));
        r.question = "how many shapes are there?";
        out.push_back(r);
      }
      {
        auto r = make("yes");
        r.question = "is there a " + detail::reading_order(scene)[0]->color_name() + " shape?";
        out.push_back(r);
        for (std::size_t c = 0; c < kPalette.size(); ++c) {
          const bool present = std::any_of(scene.shapes.begin(), scene.shapes.end(),
                                           [c](const ShapeSpec& s) { return s.color == c; });
          if (present) continue;
          auto n = make("no");
          n.question = std::string("is there a ") + kPalette[c].name + " shape?";
          out.push_back(n);
          break;
        }
      }
      break;
    }
    case Task::grounding:
      for (const auto* s : detail::reading_order(scene)) {
        auto r = make(serialize_box(s->box));
        r.expr = "the " + s->label();
        out.push_back(r);
      }
      break;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Source of pixels for a record's image id at a given square resolution.
class ImageSource {
 public:
  virtual ~ImageSource() = default;
  virtual Image load(const std::string& id, std::size_t resolution) const = 0;
};

struct SplitInfo {
  std::string name;
  std::uint64_t seed_begin = 0;
  std::uint64_t seed_end = 0;  // exclusive
  std::size_t count = 0;
  std::size_t skipped = 0;     // seeds rejected for colliding with an earlier split
};

struct DataConfig {
  std::uint64_t seed = 0;
  std::size_t train = 8000;
  std::size_t val = 1000;
  std::size_t test = 1000;
  std::size_t cells = 8;
  bool jitter = false;
  std::vector<std::size_t> resolutions{32, 64};
};

inline constexpr std::array<const char*, 3> kSplitNames{"train", "val", "test"};

// Disjoint seed-index ranges per split.
inline constexpr std::uint64_t kSplitStride = 100'000'000ULL;

inline std::string image_id(const std::string& split, std::uint64_t seed_index) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%010llu", static_cast<unsigned long long>(seed_index));
  return split + "/" + buf;
}

/// In-memory synthetic dataset: scenes by image id and records by split and
/// task. Every split draws `count` scenes; each scene contributes one record
/// per task, picked deterministically among the records it supports.
class SynthDataset : public ImageSource {
 public:
  static SynthDataset generate(const DataConfig& cfg) {
    SynthDataset ds;
    ds.cfg_ = cfg;
    std::set<std::uint64_t> earlier;
    const std::size_t counts[3] = {cfg.train, cfg.val, cfg.test};
    const std::uint64_t scene_root = Rng::substream(cfg.seed, "data").next_u64();
    for (std::size_t si = 0; si < 3; ++si) {
      SplitInfo info;
      info.name = kSplitNames[si];
      info.seed_begin = si * kSplitStride;
      info.count = counts[si];
      std::set<std::uint64_t> mine;
      auto& recs = ds.records_[info.name];
      std::uint64_t idx = info.seed_begin;
      while (recs[0].size() < info.count) {
        if (idx >= info.seed_begin + kSplitStride) throw GenerationError("split seed range exhausted");
        const std::uint64_t seed_index = idx++;
        SceneSpec scene = gen_scene_spec(scene_root ^ splitmix64(seed_index), {cfg.cells, 3, cfg.jitter});
        const auto h = scene_hash(scene);
        if (earlier.count(h)) {
          ++info.skipped;
          continue;
        }
        mine.insert(h);
        const std::string id = image_id(info.name, seed_index);
        Rng pick(splitmix64(scene_root ^ splitmix64(seed_index) ^ 0x5eedULL));
        for (Task t : kAllTasks) {
          auto options = gen_records(scene, t, id);
          recs[static_cast<int>(t)].push_back(options[pick.below(options.size())]);
        }
        ds.scenes_.emplace(id, std::move(scene));
      }
      info.seed_end = idx;
      earlier.insert(mine.begin(), mine.end());
      ds.splits_.push_back(info);
    }
    return ds;
  }

  Image load(const std::string& id, std::size_t resolution) const override {
    auto it = scenes_.find(id);
    if (it == scenes_.end()) throw IoError("unknown image id: " + id);
    return render_scene(it->second, resolution);
  }

  const SceneSpec& scene(const std::string& id) const { return scenes_.at(id); }

  const std::vector<PromptRecord>& records(const std::string& split, Task t) const {
    return records_.at(split)[static_cast<int>(t)];
  }

  const std::vector<SplitInfo>& splits() const { return splits_; }
  const DataConfig& config() const { return cfg_; }

  nlohmann::json manifest() const {
    nlohmann::json m;
    m["seed"] = cfg_.seed;
    m["cells"] = cfg_.cells;
    m["jitter"] = cfg_.jitter;
    m["resolutions"] = cfg_.resolutions;
    m["splits"] = nlohmann::json::array();
    for (const auto& s : splits_)
      m["splits"].push_back({{"name", s.name},
                             {"seed_begin", s.seed_begin},
                             {"seed_end", s.seed_end},
                             {"count", s.count},
                             {"skipped", s.skipped}});
    return m;
  }

  /// Writes manifest.json, <split>_<task>.jsonl and
  /// images_<res>/<split>/<id>.ppm for every configured resolution.
  void write(const std::filesystem::path& dir) const {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create dataset directory " + dir.string() + ": " + ec.message());
    for (const auto& s : splits_) {
      for (Task t : kAllTasks)
        write_records((dir / (s.name + "_" + task_name(t) + ".jsonl")).string(), records(s.name, t));
      for (auto res : cfg_.resolutions) fs::create_directories(dir / ("images_" + std::to_string(res)) / s.name, ec);
    }
    for (const auto& [id, scene] : scenes_)
      for (auto res : cfg_.resolutions)
        write_ppm((dir / ("images_" + std::to_string(res)) / (id + ".ppm")).string(), render_scene(scene, res));
    std::ofstream os(dir / "manifest.json");
    if (!os) throw IoError("cannot write manifest in " + dir.string());
    os << manifest().dump(2) << '\n';
  }

 private:
  DataConfig cfg_;
  std::map<std::string, SceneSpec> scenes_;
  std::map<std::string, std::array<std::vector<PromptRecord>, 3>> records_;
  std::vector<SplitInfo> splits_;
};

/// Dataset previously written by SynthDataset::write.
class DirectoryDataset : public ImageSource {
 public:
  explicit DirectoryDataset(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::ifstream m(dir_ / "manifest.json");
    if (!m) throw IoError("dataset manifest missing: " + (dir_ / "manifest.json").string());
    try {
      manifest_ = nlohmann::json::parse(m);
    } catch (const std::exception& e) {
      throw ParseError("malformed manifest in " + dir_.string() + ": " + e.what());
    }
    for (const char* split : kSplitNames)
      for (Task t : kAllTasks) {
        const auto path = dir_ / (std::string(split) + "_" + task_name(t) + ".jsonl");
        records_[split][static_cast<int>(t)] = read_records(path.string());
      }
  }

  Image load(const std::string& id, std::size_t resolution) const override {
    return read_ppm((dir_ / ("images_" + std::to_string(resolution)) / (id + ".ppm")).string());
  }

  const std::vector<PromptRecord>& records(const std::string& split, Task t) const {
    auto it = records_.find(split);
    if (it == records_.end()) throw ConfigError("unknown split: " + split);
    return it->second[static_cast<int>(t)];
  }

  const nlohmann::json& manifest() const { return manifest_; }

 private:
  std::filesystem::path dir_;
  nlohmann::json manifest_;
  std::map<std::string, std::array<std::vector<PromptRecord>, 3>> records_;
};

}  // namespace padapt
