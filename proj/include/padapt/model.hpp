#pragma once

#include <optional>
#include <string>
#include <vector>

#include "padapt/lm.hpp"
#include "padapt/pool_adapter.hpp"
#include "padapt/prompt.hpp"
#include "padapt/query_adapter.hpp"
#include "padapt/vision.hpp"

namespace padapt {

enum class AdapterKind { pool, query, query_pos };

inline std::string adapter_kind_name(AdapterKind k) {
  switch (k) {
    case AdapterKind::pool: return "pool";
    case AdapterKind::query: return "query";
    case AdapterKind::query_pos: return "query_pos";
  }
  return "?";
}

inline AdapterKind parse_adapter_kind(std::string_view s) {
  if (s == "pool") return AdapterKind::pool;
  if (s == "query") return AdapterKind::query;
  if (s == "query_pos") return AdapterKind::query_pos;
  throw ConfigError("unknown adapter kind: " + std::string(s));
}

/// Encoder + adapter + LM. The LM vocabulary size is filled in from the
/// tokenizer at init time when left at zero.
struct ModelConfig {
  VisionConfig vision;
  AdapterKind adapter = AdapterKind::pool;
  PoolConfig pool;
  QueryConfig query;
  LmConfig lm;

  std::size_t grid_side(std::size_t resolution) const {
    if (resolution % vision.patch_size != 0)
      throw ConfigError("resolution " + std::to_string(resolution) + " is not a multiple of the patch size");
    return resolution / vision.patch_size;
  }

  void validate() const {
    if (vision.patch_size == 0 || vision.width == 0 || vision.heads == 0 || vision.width % vision.heads != 0)
      throw ConfigError("vision: width must be a positive multiple of heads");
    if (vision.resolutions.empty()) throw ConfigError("vision: at least one resolution is required");
    for (auto r : vision.resolutions) grid_side(r);
    if (lm.width == 0 || lm.heads == 0 || lm.width % lm.heads != 0)
      throw ConfigError("lm: width must be a positive multiple of heads");
    if (adapter == AdapterKind::pool) {
      pool.validate();
      if (pool.llm_width != lm.width) throw ConfigError("pool adapter output width must equal the LM width");
    } else {
      if (query.num_queries == 0) throw ConfigError("query adapter needs at least one query");
      if (query.llm_width != lm.width) throw ConfigError("query adapter output width must equal the LM width");
    }
  }

  /// Number of visual rows spliced for one image.
  std::size_t visual_count(const std::vector<std::size_t>* selected = nullptr) const {
    if (adapter != AdapterKind::pool) return query.num_queries;
    return pool.count(selected ? *selected : pool.scales);
  }
};

inline void init_model(ParamStore& store, ModelConfig& cfg, const Vocabulary& vocab, Rng& rng) {
  if (cfg.lm.vocab_size == 0) cfg.lm.vocab_size = vocab.size();
  if (cfg.lm.vocab_size != vocab.size()) throw ConfigError("lm vocabulary size does not match the tokenizer");
  cfg.validate();
  init_vision(store, cfg.vision, rng);
  if (cfg.adapter == AdapterKind::pool) {
    init_pool_adapter(store, cfg.pool, cfg.vision.width, rng);
  } else {
    QueryConfig q = cfg.query;
    q.key_positions = cfg.adapter == AdapterKind::query_pos;
    std::vector<std::pair<std::size_t, std::size_t>> grids;
    for (auto r : cfg.vision.resolutions) grids.emplace_back(cfg.grid_side(r), cfg.grid_side(r));
    init_query_adapter(store, q, cfg.vision.width, grids, rng);
  }
  init_lm(store, cfg.lm, rng);
}

inline VisualEmbeddingSeq visual_embed(Bound& p, const Image& img, const ModelConfig& cfg,
                                       const std::vector<std::size_t>* selected = nullptr) {
  FeatureGrid grid = encode(p, img, cfg.vision);
  if (cfg.adapter == AdapterKind::pool)
    return selected ? multi_scale_embed(p, grid, cfg.pool, *selected) : multi_scale_embed(p, grid, cfg.pool);
  QueryConfig q = cfg.query;
  q.key_positions = cfg.adapter == AdapterKind::query_pos;
  return query_embed(p, grid, q);
}

/// Prompt tokens with the placeholder spliced out; when `with_target` is set
/// the target text and <eos> follow as loss positions.
inline MixedSequence build_sequence(const PromptRecord& rec, int stage, const Vocabulary& vocab,
                                    std::size_t n_visual, bool with_target) {
  const auto prompt = vocab.tokenize(render_prompt(rec, stage));
  MixedSequence seq = splice_plan(prompt, n_visual, vocab);
  if (with_target) {
    seq.append_tokens(vocab.tokenize(rec.target), true);
    seq.items.push_back(SeqItem::token(vocab.eos_id(), true));
  }
  return seq;
}

inline Var sample_loss(Bound& p, const PromptRecord& rec, const Image& img, int stage, const Vocabulary& vocab,
                       const ModelConfig& cfg, const std::vector<std::size_t>* selected = nullptr) {
  VisualEmbeddingSeq vis = visual_embed(p, img, cfg, selected);
  MixedSequence seq = build_sequence(rec, stage, vocab, vis.size(), true);
  return lm_loss(lm_forward(p, seq, vis.embeddings, cfg.lm), seq);
}

/// Visual rows for inference, computed once per image.
inline Tensor visual_rows(ParamStore& params, const Image& img, const ModelConfig& cfg,
                          const std::vector<std::size_t>* selected = nullptr) {
  Tape tape;
  Bound p(tape, params);
  return visual_embed(p, img, cfg, selected).embeddings.value();
}

inline std::vector<std::size_t> generate_ids(ParamStore& params, const PromptRecord& rec, const Image& img,
                                             const Vocabulary& vocab, const ModelConfig& cfg, std::size_t max_new,
                                             const std::vector<std::size_t>* selected = nullptr, int stage = 3) {
  const Tensor rows = visual_rows(params, img, cfg, selected);
  MixedSequence seq = build_sequence(rec, stage, vocab, rows.dim(0), false);
  return greedy_decode(params, seq, &rows, cfg.lm, max_new, vocab.eos_id());
}

inline std::string generate(ParamStore& params, const PromptRecord& rec, const Image& img, const Vocabulary& vocab,
                            const ModelConfig& cfg, std::size_t max_new,
                            const std::vector<std::size_t>* selected = nullptr, int stage = 3) {
  const auto ids = generate_ids(params, rec, img, vocab, cfg, max_new, selected, stage);
  return vocab.detokenize(ids);
}

}  // namespace padapt
