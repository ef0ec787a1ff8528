#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <string>
#include <vector>

#include "padapt/layers.hpp"

namespace padapt {

/// RGB image, row-major HxWx3, values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;

  static constexpr std::size_t channels = 3;

  Image() = default;
  Image(std::size_t h, std::size_t w, double fill = 0.0) : height(h), width(w), data(h * w * 3, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c) { return data[(y * width + x) * 3 + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c) const { return data[(y * width + x) * 3 + c]; }

  friend bool operator==(const Image&, const Image&) = default;
};

// Binary PPM (P6, maxval 255). Values are quantized to k/255 on write.
inline void write_ppm(const std::string& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open image for writing: " + path);
  os << "P6\n" << img.width << ' ' << img.height << "\n255\n";
  std::vector<unsigned char> bytes(img.data.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = static_cast<unsigned char>(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
  os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw IoError("failed writing image: " + path);
}

inline Image read_ppm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open image: " + path);
  auto token = [&]() {
    std::string tok;
    char c;
    while (is.get(c)) {
      if (c == '#') {
        std::string skip;
        std::getline(is, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(c))) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(c);
    }
    return tok;
  };
  if (token() != "P6") throw IoError(path + ": not a binary PPM (P6)");
  std::size_t w = 0, h = 0, maxval = 0;
  try {
    w = std::stoul(token());
    h = std::stoul(token());
    maxval = std::stoul(token());
  } catch (const std::exception&) {
    throw IoError(path + ": malformed PPM header");
  }
  if (w == 0 || h == 0 || maxval != 255) throw IoError(path + ": unsupported PPM dimensions or maxval");
  Image img(h, w);
  std::vector<unsigned char> bytes(img.data.size());
  if (!is.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size())))
    throw IoError(path + ": truncated PPM pixel data");
  for (std::size_t i = 0; i < bytes.size(); ++i) img.data[i] = bytes[i] / 255.0;
  return img;
}

struct VisionConfig {
  std::size_t patch_size = 8;
  std::size_t width = 32;
  std::size_t depth = 2;
  std::size_t heads = 2;
  std::size_t mlp_ratio = 4;
  // Square input resolutions the encoder keeps position tables for.
  std::vector<std::size_t> resolutions{32, 64};

  /// Blocks actually evaluated: the last block's output is discarded, so the
  /// emitted features are the penultimate representation.
  std::size_t evaluated_blocks() const { return depth == 0 ? 0 : depth - 1; }
};

inline std::string position_table_name(std::size_t rows, std::size_t cols) {
  return "vision.pos_" + std::to_string(rows) + "x" + std::to_string(cols);
}

inline void init_vision(ParamStore& store, const VisionConfig& cfg, Rng& rng) {
  const std::size_t patch_dim = cfg.patch_size * cfg.patch_size * Image::channels;
  store.add("vision.patch_proj.w", xavier_uniform(patch_dim, cfg.width, rng));
  store.add("vision.patch_proj.b", Tensor({cfg.width}));
  for (std::size_t res : cfg.resolutions) {
    if (res % cfg.patch_size != 0) throw ConfigError("resolution " + std::to_string(res) + " not divisible by patch size");
    const std::size_t g = res / cfg.patch_size;
    store.add(position_table_name(g, g), normal_tensor({g * g, cfg.width}, rng, 0.5));
  }
  const BlockDims dims{cfg.width, cfg.heads, cfg.width * cfg.mlp_ratio};
  for (std::size_t b = 0; b < cfg.depth; ++b) init_block(store, "vision.block" + std::to_string(b), dims, rng);
}

/// Patch rows of an image: (H/P * W/P) x (P*P*3), patches row-major, pixels
/// within a patch row-major with channels innermost.
inline Tensor patchify(const Image& img, std::size_t patch) {
  if (patch == 0 || img.height % patch != 0 || img.width % patch != 0)
    throw ShapeError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                     " not divisible by patch size " + std::to_string(patch));
  const std::size_t gh = img.height / patch, gw = img.width / patch, pd = patch * patch * 3;
  Tensor out({gh * gw, pd});
  for (std::size_t r = 0; r < gh; ++r)
    for (std::size_t c = 0; c < gw; ++c) {
      double* row = out.data().data() + (r * gw + c) * pd;
      std::size_t k = 0;
      for (std::size_t y = 0; y < patch; ++y)
        for (std::size_t x = 0; x < patch; ++x)
          for (std::size_t ch = 0; ch < 3; ++ch) row[k++] = img.at(r * patch + y, c * patch + x, ch);
    }
  return out;
}

/// Feature grid of patch features (no class-token slot): a [rows x cols x C]
/// value on a tape.
struct FeatureGrid {
  Var values;

  std::size_t rows() const { return values.shape()[0]; }
  std::size_t cols() const { return values.shape()[1]; }
  std::size_t channels() const { return values.shape()[2]; }
};

inline FeatureGrid make_grid(Var v) {
  if (v.shape().size() != 3) throw ShapeError("feature grid must be rank 3, got " + shape_str(v.shape()));
  return FeatureGrid{v};
}

/// Toy ViT: patchify, project, add the grid's learned 2-D position table,
/// run all but the last transformer block.
inline FeatureGrid encode(Bound& p, const Image& img, const VisionConfig& cfg) {
  Tensor patches = patchify(img, cfg.patch_size);
  const std::size_t gh = img.height / cfg.patch_size, gw = img.width / cfg.patch_size;
  const std::string pos_name = position_table_name(gh, gw);
  if (!p.store().contains(pos_name))
    throw ConfigError("encoder has no position table for a " + std::to_string(gh) + "x" + std::to_string(gw) + " grid");
  Var x = linear(p, p.tape().constant(std::move(patches)), "vision.patch_proj.w", "vision.patch_proj.b");
  x = add(x, p(pos_name));
  for (std::size_t b = 0; b < cfg.evaluated_blocks(); ++b)
    x = transformer_block(p, x, "vision.block" + std::to_string(b), cfg.heads, false);
  return make_grid(reshape(x, {gh, gw, cfg.width}));
}

}  // namespace padapt
