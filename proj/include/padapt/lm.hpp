#pragma once

#include <string>
#include <vector>

#include "padapt/layers.hpp"
#include "padapt/pool_adapter.hpp"

namespace padapt {

struct LmConfig {
  std::size_t vocab_size = 0;
  std::size_t width = 64;
  std::size_t depth = 2;
  std::size_t heads = 4;
  std::size_t context = 512;
  std::size_t mlp_ratio = 4;
};

inline std::string lm_block_prefix(std::size_t b) { return "lm.block" + std::to_string(b); }

inline void init_lm(ParamStore& store, const LmConfig& cfg, Rng& rng) {
  if (cfg.vocab_size == 0) throw ConfigError("lm: vocabulary size must be positive");
  store.add("lm.tok_emb", normal_tensor({cfg.vocab_size, cfg.width}, rng, 1.0));
  store.add("lm.pos_emb", normal_tensor({cfg.context, cfg.width}, rng, 0.3));
  const BlockDims dims{cfg.width, cfg.heads, cfg.width * cfg.mlp_ratio};
  for (std::size_t b = 0; b < cfg.depth; ++b) init_block(store, lm_block_prefix(b), dims, rng);
  store.add("lm.head.w", xavier_uniform(cfg.width, cfg.vocab_size, rng));
  store.add("lm.head.b", Tensor({cfg.vocab_size}));
}

/// One input position: a vocabulary token or a row of the visual sequence.
struct SeqItem {
  enum class Kind { token, visual };
  Kind kind = Kind::token;
  std::size_t index = 0;
  bool target = false;  // contributes to the loss

  static SeqItem token(std::size_t id, bool is_target = false) { return {Kind::token, id, is_target}; }
  static SeqItem visual(std::size_t row) { return {Kind::visual, row, false}; }

  friend bool operator==(const SeqItem&, const SeqItem&) = default;
};

/// Mixed text/visual input under a causal mask.
struct MixedSequence {
  std::vector<SeqItem> items;

  std::size_t size() const { return items.size(); }

  void append_tokens(const std::vector<std::size_t>& ids, bool is_target) {
    for (auto id : ids) items.push_back(SeqItem::token(id, is_target));
  }

  std::size_t visual_count() const {
    std::size_t n = 0;
    for (const auto& it : items) n += it.kind == SeqItem::Kind::visual;
    return n;
  }
};

/// Next-token logits at every position (T x V). Visual rows enter the
/// residual stream directly and receive position embeddings like tokens.
/// `visual` may be an invalid Var when the sequence has no visual rows.
inline Var lm_forward(Bound& p, const MixedSequence& seq, Var visual, const LmConfig& cfg) {
  const std::size_t T = seq.size();
  if (T == 0) throw ShapeError("lm_forward: empty sequence");
  if (T > cfg.context) throw ShapeError("lm_forward: sequence length " + std::to_string(T) + " exceeds context");
  const std::size_t n_visual_rows = visual.tape ? visual.shape()[0] : 0;

  std::vector<Var> parts;
  std::size_t i = 0;
  while (i < T) {
    const auto kind = seq.items[i].kind;
    std::vector<std::size_t> ids;
    while (i < T && seq.items[i].kind == kind) ids.push_back(seq.items[i++].index);
    if (kind == SeqItem::Kind::token) {
      parts.push_back(embedding_lookup(p("lm.tok_emb"), ids));
      continue;
    }
    for (auto r : ids)
      if (r >= n_visual_rows)
        throw ShapeError("lm_forward: visual row " + std::to_string(r) + " out of range (have " +
                         std::to_string(n_visual_rows) + ")");
    bool whole = ids.size() == n_visual_rows;
    for (std::size_t k = 0; whole && k < ids.size(); ++k) whole = ids[k] == k;
    parts.push_back(whole ? visual : embedding_lookup(visual, ids));
  }
  Var x = parts.size() == 1 ? parts[0] : concat(parts, 0);
  if (x.shape()[1] != cfg.width)
    throw ShapeError("lm_forward: input width " + std::to_string(x.shape()[1]) + " does not match LM width");
  x = add(x, slice(p("lm.pos_emb"), 0, 0, T));
  for (std::size_t b = 0; b < cfg.depth; ++b) x = transformer_block(p, x, lm_block_prefix(b), cfg.heads, true);
  return linear(p, x, "lm.head.w", "lm.head.b");
}

/// Loss over target positions only: logits at t predict the item at t+1.
inline Var lm_loss(Var logits, const MixedSequence& seq) {
  const std::size_t T = seq.size();
  std::vector<std::size_t> targets(T, 0);
  std::vector<double> mask(T, 0.0);
  for (std::size_t t = 0; t + 1 < T; ++t) {
    const auto& next = seq.items[t + 1];
    if (!next.target) continue;
    if (next.kind != SeqItem::Kind::token) throw ConfigError("lm_loss: visual rows cannot be targets");
    targets[t] = next.index;
    mask[t] = 1.0;
  }
  return cross_entropy(logits, targets, mask);
}

/// Index of the largest entry; ties go to the lowest index.
inline std::size_t argmax_lowest(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t v = 1; v < row.size(); ++v)
    if (row[v] > row[best]) best = v;
  return best;
}

/// Greedy decoding by full recomputation. Each step evaluates the whole
/// prefix on a fresh tape with `visual_rows` as a constant, so results are
/// identical to a single lm_forward over the same prefix.
inline std::vector<std::size_t> greedy_decode(ParamStore& params, const MixedSequence& prompt,
                                              const Tensor* visual_rows, const LmConfig& cfg, std::size_t max_new,
                                              std::size_t stop_token) {
  if (max_new == 0) throw ConfigError("greedy_decode: max_new must be >= 1");
  MixedSequence seq = prompt;
  std::vector<std::size_t> out;
  for (std::size_t step = 0; step < max_new && seq.size() < cfg.context; ++step) {
    Tape tape;
    Bound p(tape, params);
    Var vis = visual_rows ? tape.constant(*visual_rows) : Var{};
    Var logits = lm_forward(p, seq, vis, cfg);
    const std::size_t T = seq.size(), V = logits.shape()[1];
    const std::size_t next = argmax_lowest(logits.value().data().subspan((T - 1) * V, V));
    if (next == stop_token) break;
    out.push_back(next);
    seq.items.push_back(SeqItem::token(next));
  }
  return out;
}

struct ParameterGroups {
  std::vector<std::string> all;
  std::vector<std::string> qv_only;
  std::vector<std::string> non_qv;
};

inline bool is_qv_projection(std::string_view name) {
  return ends_with(name, "attn.q_proj") || ends_with(name, "attn.v_proj");
}

/// Partition of the LM's parameters ("lm.*") into the query/value
/// projections and everything else.
inline ParameterGroups parameter_groups(const ParamStore& store) {
  ParameterGroups g;
  for (const auto& [name, _] : store) {
    if (!starts_with(name, "lm.")) continue;
    g.all.push_back(name);
    (is_qv_projection(name) ? g.qv_only : g.non_qv).push_back(name);
  }
  return g;
}

}  // namespace padapt
