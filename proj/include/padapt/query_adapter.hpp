#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "padapt/layers.hpp"
#include "padapt/pool_adapter.hpp"

namespace padapt {

/// Learned-query condenser: K query vectors cross-attend to the flattened
/// feature grid, then a two-layer MLP maps each attended vector to LM width.
/// This is the comparison baseline for the pool adapter.
struct QueryConfig {
  std::size_t num_queries = 4;
  std::size_t llm_width = 64;
  std::size_t mlp_hidden = 0;  // 0 means "same as llm_width"
  bool key_positions = false;

  std::size_t hidden() const { return mlp_hidden == 0 ? llm_width : mlp_hidden; }
};

inline std::string key_position_name(std::size_t rows, std::size_t cols) {
  return "qadapter.key_pos_" + std::to_string(rows) + "x" + std::to_string(cols);
}

/// `grids` lists the (rows, cols) extents that need a key-position table when
/// key_positions is enabled.
inline void init_query_adapter(ParamStore& store, const QueryConfig& cfg, std::size_t channels,
                               const std::vector<std::pair<std::size_t, std::size_t>>& grids, Rng& rng) {
  if (cfg.num_queries == 0) throw ConfigError("query adapter needs at least one query");
  store.add("qadapter.queries", normal_tensor({cfg.num_queries, channels}, rng, 1.0));
  for (const char* proj : {"qadapter.q_proj", "qadapter.k_proj", "qadapter.v_proj", "qadapter.o_proj"})
    store.add(proj, xavier_uniform(channels, channels, rng));
  init_mlp2(store, "qadapter.mlp", channels, cfg.hidden(), cfg.llm_width, rng);
  if (cfg.key_positions)
    for (auto [r, c] : grids) store.add(key_position_name(r, c), normal_tensor({r * c, channels}, rng, 0.5));
}

namespace detail {

// Row order that sorts cells lexicographically by their key input, then by
// their value input. Attention is a sum over keys, so evaluating it in this
// canonical order makes the result bitwise independent of where each cell
// sat in the grid.
inline std::vector<std::size_t> canonical_key_order(const Tensor& keys, const Tensor& values) {
  const std::size_t n = keys.dim(0), c = keys.dim(1);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  auto row_less = [c](const Tensor& t, std::size_t a, std::size_t b) {
    const double* ra = t.data().data() + a * c;
    const double* rb = t.data().data() + b * c;
    return std::lexicographical_compare(ra, ra + c, rb, rb + c);
  };
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (row_less(keys, a, b)) return true;
    if (row_less(keys, b, a)) return false;
    return row_less(values, a, b);
  });
  return order;
}

}  // namespace detail

/// Single-head cross-attention of the learned queries over the grid cells:
/// K x C, before the output MLP.
inline Var cross_attend(Bound& p, const FeatureGrid& grid, const QueryConfig& cfg) {
  const std::size_t H = grid.rows(), W = grid.cols(), C = grid.channels();
  const Tensor& q = p.store().get("qadapter.queries");
  if (q.dim(1) != C)
    throw ShapeError("query adapter width " + std::to_string(q.dim(1)) + " does not match grid channels " +
                     std::to_string(C));
  Var cells = reshape(grid.values, {H * W, C});
  Var key_in = cells;
  if (cfg.key_positions) {
    const std::string name = key_position_name(H, W);
    if (!p.store().contains(name))
      throw ConfigError("query adapter has no key-position table for a " + std::to_string(H) + "x" +
                        std::to_string(W) + " grid");
    key_in = add(cells, p(name));
  }
  const auto order = detail::canonical_key_order(key_in.value(), cells.value());
  Var keys = embedding_lookup(key_in, order);
  Var vals = cfg.key_positions ? embedding_lookup(cells, order) : keys;

  Var qp = matmul(p("qadapter.queries"), p("qadapter.q_proj"));
  Var kp = matmul(keys, p("qadapter.k_proj"));
  Var vp = matmul(vals, p("qadapter.v_proj"));
  Var scores = scale(matmul(qp, transpose(kp)), 1.0 / std::sqrt(static_cast<double>(C)));
  Var attn = softmax(scores, 1);
  return matmul(matmul(attn, vp), p("qadapter.o_proj"));
}

inline VisualEmbeddingSeq query_embed(Bound& p, const FeatureGrid& grid, const QueryConfig& cfg) {
  VisualEmbeddingSeq out;
  out.embeddings = mlp2(p, cross_attend(p, grid, cfg), "qadapter.mlp");
  for (std::size_t k = 0; k < out.embeddings.shape()[0]; ++k) out.provenance.push_back({0, k, 0});
  return out;
}

}  // namespace padapt
