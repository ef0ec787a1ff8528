#pragma once

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "padapt/layers.hpp"
#include "padapt/vision.hpp"

namespace padapt {

class SelectionError : public Error {
 public:
  using Error::Error;
};

/// Half-open window [begin, end) of output cell `i` when `n` inputs are
/// pooled to `p` outputs: [floor(i*n/p), ceil((i+1)*n/p)).
struct PoolWindow {
  std::size_t begin, end;
};

inline PoolWindow pool_window(std::size_t i, std::size_t n, std::size_t p) {
  return {(i * n) / p, ((i + 1) * n + p - 1) / p};
}

/// Adaptive average pooling of an H x W x C grid down to p x p x C.
///
/// Each output cell is the plain mean over its window, summed in row-major
/// order. When p exceeds H or W, neighbouring windows overlap and cells
/// repeat.
inline Var adaptive_pool(const FeatureGrid& grid, std::size_t p) {
  const Tensor& G = grid.values.value();
  if (G.rank() != 3) throw ShapeError("adaptive_pool: grid must be H x W x C");
  if (p == 0) throw ShapeError("adaptive_pool: p must be positive");
  const std::size_t H = G.dim(0), W = G.dim(1), C = G.dim(2);
  Tensor out({p, p, C});
  for (std::size_t i = 0; i < p; ++i) {
    const auto rw = pool_window(i, H, p);
    for (std::size_t j = 0; j < p; ++j) {
      const auto cw = pool_window(j, W, p);
      const double count = static_cast<double>((rw.end - rw.begin) * (cw.end - cw.begin));
      double* o = out.data().data() + (i * p + j) * C;
      for (std::size_t r = rw.begin; r < rw.end; ++r)
        for (std::size_t c = cw.begin; c < cw.end; ++c) {
          const double* g = G.data().data() + (r * W + c) * C;
          for (std::size_t k = 0; k < C; ++k) o[k] += g[k];
        }
      for (std::size_t k = 0; k < C; ++k) o[k] /= count;
    }
  }
  Var src = grid.values;
  return src.tape->record("adaptive_pool", std::move(out), {src}, [src, H, W, C, p](Tape& t, std::size_t self) {
    auto g = t.grad(self);
    auto gg = t.grad(src);
    for (std::size_t i = 0; i < p; ++i) {
      const auto rw = pool_window(i, H, p);
      for (std::size_t j = 0; j < p; ++j) {
        const auto cw = pool_window(j, W, p);
        const double inv = 1.0 / static_cast<double>((rw.end - rw.begin) * (cw.end - cw.begin));
        const double* go = g.data() + (i * p + j) * C;
        for (std::size_t r = rw.begin; r < rw.end; ++r)
          for (std::size_t c = cw.begin; c < cw.end; ++c) {
            double* d = gg.data() + (r * W + c) * C;
            for (std::size_t k = 0; k < C; ++k) d[k] += go[k] * inv;
          }
      }
    }
  });
}

struct PoolConfig {
  std::vector<std::size_t> scales{2};
  std::size_t llm_width = 64;
  std::size_t mlp_hidden = 0;  // 0 means "same as llm_width"
  bool shared_mlp = false;

  std::size_t hidden() const { return mlp_hidden == 0 ? llm_width : mlp_hidden; }

  void validate() const {
    if (scales.empty()) throw ConfigError("pool config: scale list is empty");
    std::set<std::size_t> seen;
    for (auto p : scales) {
      if (p == 0) throw ConfigError("pool config: scale must be >= 1");
      if (!seen.insert(p).second) throw ConfigError("pool config: duplicate scale " + std::to_string(p));
    }
    if (llm_width == 0) throw ConfigError("pool config: llm width must be positive");
  }

  std::size_t count(const std::vector<std::size_t>& selected) const {
    std::size_t n = 0;
    for (auto p : selected) n += p * p;
    return n;
  }
};

inline std::string adapter_prefix(const PoolConfig& cfg, std::size_t p) {
  return cfg.shared_mlp ? std::string("adapter.shared") : "adapter.p" + std::to_string(p);
}

inline void init_pool_adapter(ParamStore& store, const PoolConfig& cfg, std::size_t grid_channels, Rng& rng) {
  cfg.validate();
  if (cfg.shared_mlp) {
    init_mlp2(store, "adapter.shared", grid_channels, cfg.hidden(), cfg.llm_width, rng);
    return;
  }
  for (auto p : cfg.scales) init_mlp2(store, adapter_prefix(cfg, p), grid_channels, cfg.hidden(), cfg.llm_width, rng);
}

/// Flattens a pooled p x p x C block row-major to p^2 x C and applies the
/// two-layer alignment MLP. Row order carries the spatial position.
inline Var mlp_project(Bound& params, Var pooled, const std::string& prefix) {
  const Shape& s = pooled.shape();
  if (s.size() != 3) throw ShapeError("mlp_project: expected p x p x C input");
  const Tensor& w1 = params.store().get(prefix + ".w1");
  if (w1.dim(0) != s[2])
    throw ShapeError("mlp_project: feature width " + std::to_string(s[2]) + " does not match MLP input " +
                     std::to_string(w1.dim(0)));
  return mlp2(params, reshape(pooled, {s[0] * s[1], s[2]}), prefix);
}

struct Provenance {
  std::size_t scale = 0;
  std::size_t row = 0;
  std::size_t col = 0;

  friend bool operator==(const Provenance&, const Provenance&) = default;
};

/// Visual embeddings ready for splicing: N x d rows plus where each row came
/// from.
struct VisualEmbeddingSeq {
  Var embeddings;
  std::vector<Provenance> provenance;

  std::size_t size() const { return provenance.size(); }
  std::size_t width() const { return embeddings.shape()[1]; }
};

/// Pools and projects the grid at every selected scale and concatenates the
/// results in the order the config lists the scales.
inline VisualEmbeddingSeq multi_scale_embed(Bound& params, const FeatureGrid& grid, const PoolConfig& cfg,
                                            const std::vector<std::size_t>& selected) {
  if (selected.empty()) throw SelectionError("scale selection is empty");
  for (auto p : selected)
    if (std::find(cfg.scales.begin(), cfg.scales.end(), p) == cfg.scales.end())
      throw ConfigError("selected scale " + std::to_string(p) + " is not configured");
  std::vector<Var> parts;
  VisualEmbeddingSeq out;
  for (auto p : cfg.scales) {
    if (std::find(selected.begin(), selected.end(), p) == selected.end()) continue;
    parts.push_back(mlp_project(params, adaptive_pool(grid, p), adapter_prefix(cfg, p)));
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < p; ++j) out.provenance.push_back({p, i, j});
  }
  out.embeddings = parts.size() == 1 ? parts[0] : concat(parts, 0);
  return out;
}

inline VisualEmbeddingSeq multi_scale_embed(Bound& params, const FeatureGrid& grid, const PoolConfig& cfg) {
  return multi_scale_embed(params, grid, cfg, cfg.scales);
}

}  // namespace padapt
