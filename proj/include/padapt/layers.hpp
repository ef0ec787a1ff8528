#pragma once

#include <cmath>
#include <string>
#include <unordered_map>
#include <vector>

#include "padapt/autodiff.hpp"
#include "padapt/rng.hpp"

namespace padapt {

/// Parameters of a store bound to one tape. Each name becomes a single leaf
/// no matter how often it is used in the forward pass.
class Bound {
 public:
  Bound(Tape& tape, ParamStore& store) : tape_(tape), store_(store) {}

  Var operator()(const std::string& name) {
    auto it = cache_.find(name);
    if (it != cache_.end()) return it->second;
    Var v = tape_.leaf(store_.get(name));
    cache_.emplace(name, v);
    return v;
  }

  Tape& tape() { return tape_; }
  ParamStore& store() { return store_; }

 private:
  Tape& tape_;
  ParamStore& store_;
  std::unordered_map<std::string, Var> cache_;
};

inline Var linear(Bound& p, Var x, const std::string& w, const std::string& b) {
  return add_bias(matmul(x, p(w)), p(b));
}

// Two-layer GELU MLP: w2 . gelu(w1 . x + b1) + b2, row-wise.
inline void init_mlp2(ParamStore& store, const std::string& prefix, std::size_t in, std::size_t hidden,
                      std::size_t out, Rng& rng) {
  store.add(prefix + ".w1", xavier_uniform(in, hidden, rng));
  store.add(prefix + ".b1", Tensor({hidden}));
  store.add(prefix + ".w2", xavier_uniform(hidden, out, rng));
  store.add(prefix + ".b2", Tensor({out}));
}

inline Var mlp2(Bound& p, Var x, const std::string& prefix) {
  return linear(p, gelu(linear(p, x, prefix + ".w1", prefix + ".b1")), prefix + ".w2", prefix + ".b2");
}

struct BlockDims {
  std::size_t width = 0;
  std::size_t heads = 1;
  std::size_t mlp_hidden = 0;
};

inline void init_block(ParamStore& store, const std::string& prefix, const BlockDims& d, Rng& rng) {
  store.add(prefix + ".ln1.g", Tensor({d.width}, 1.0));
  store.add(prefix + ".ln1.b", Tensor({d.width}));
  for (const char* proj : {".attn.q_proj", ".attn.k_proj", ".attn.v_proj", ".attn.o_proj"})
    store.add(prefix + proj, xavier_uniform(d.width, d.width, rng));
  store.add(prefix + ".ln2.g", Tensor({d.width}, 1.0));
  store.add(prefix + ".ln2.b", Tensor({d.width}));
  store.add(prefix + ".mlp.fc1.w", xavier_uniform(d.width, d.mlp_hidden, rng));
  store.add(prefix + ".mlp.fc1.b", Tensor({d.mlp_hidden}));
  store.add(prefix + ".mlp.fc2.w", xavier_uniform(d.mlp_hidden, d.width, rng));
  store.add(prefix + ".mlp.fc2.b", Tensor({d.width}));
}

/// Multi-head self-attention over rows of x (T x width).
inline Var self_attention(Bound& p, Var x, const std::string& prefix, std::size_t heads, bool causal) {
  const std::size_t width = x.shape()[1];
  if (heads == 0 || width % heads != 0) throw ConfigError(prefix + ": width not divisible by head count");
  const std::size_t dh = width / heads;
  Var q = matmul(x, p(prefix + ".attn.q_proj"));
  Var k = matmul(x, p(prefix + ".attn.k_proj"));
  Var v = matmul(x, p(prefix + ".attn.v_proj"));
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Var> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    Var qh = heads == 1 ? q : slice(q, 1, h * dh, dh);
    Var kh = heads == 1 ? k : slice(k, 1, h * dh, dh);
    Var vh = heads == 1 ? v : slice(v, 1, h * dh, dh);
    Var scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    Var attn = causal ? softmax_causal(scores) : softmax(scores, 1);
    outs.push_back(matmul(attn, vh));
  }
  Var o = heads == 1 ? outs[0] : concat(outs, 1);
  return matmul(o, p(prefix + ".attn.o_proj"));
}

/// Pre-norm transformer block.
inline Var transformer_block(Bound& p, Var x, const std::string& prefix, std::size_t heads, bool causal) {
  Var a = self_attention(p, layer_norm(x, p(prefix + ".ln1.g"), p(prefix + ".ln1.b")), prefix, heads, causal);
  Var h = add(x, a);
  Var n2 = layer_norm(h, p(prefix + ".ln2.g"), p(prefix + ".ln2.b"));
  Var m = linear(p, gelu(linear(p, n2, prefix + ".mlp.fc1.w", prefix + ".mlp.fc1.b")), prefix + ".mlp.fc2.w",
                 prefix + ".mlp.fc2.b");
  return add(h, m);
}

}  // namespace padapt
