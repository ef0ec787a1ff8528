#pragma once

#include <functional>
#include <string>
#include <vector>

#include "padapt/log.hpp"
#include "padapt/model.hpp"

namespace padapt {

inline constexpr double kGradTolerance = 1e-4;

using StoreLossFn = std::function<Var(Bound&)>;

/// Central-difference check of d loss / d param for every element of the
/// named tensors. Returns max |analytic - numeric| / max(1, |analytic|).
inline double param_grad_check(ParamStore& store, const std::vector<std::string>& names, const StoreLossFn& loss,
                               double h = 1e-5) {
  for (auto& [_, t] : store) {
    t.requires_grad = false;
    t.grad.reset();
  }
  for (const auto& n : names) store.get(n).requires_grad = true;
  {
    Tape tape;
    Bound p(tape, store);
    Var y = loss(p);
    if (y.value().numel() != 1) throw ShapeError("param_grad_check: loss must be scalar");
    tape.backward(y);
  }
  auto eval = [&] {
    Tape tape;
    Bound p(tape, store);
    return loss(p).value().item();
  };
  double worst = 0.0;
  for (const auto& n : names) {
    Tensor& t = store.get(n);
    const std::vector<double> analytic = t.grad ? *t.grad : std::vector<double>(t.numel(), 0.0);
    t.requires_grad = false;
    auto d = t.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      const double orig = d[i];
      d[i] = orig + h;
      const double fp = eval();
      d[i] = orig - h;
      const double fm = eval();
      d[i] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
    }
    t.grad.reset();
  }
  return worst;
}

struct GradCheckResult {
  std::string module;
  double max_rel_error = 0.0;
  std::size_t seeds = 0;
  std::size_t tensors = 0;
  bool pass() const { return max_rel_error < kGradTolerance; }
};

namespace detail {

// Random linear read-out of a matrix so no gradient vanishes by symmetry.
inline Var readout(Var x, Rng& rng) {
  Tensor w = uniform_tensor(x.shape(), rng, -1.0, 1.0);
  return sum(multiply(x, x.tape->constant(std::move(w))));
}

inline std::vector<std::string> names_with_prefix(const ParamStore& s, std::string_view prefix) {
  std::vector<std::string> out;
  for (const auto& [n, _] : s)
    if (starts_with(n, prefix)) out.push_back(n);
  return out;
}

}  // namespace detail

/// Pool adapter: random grid and scales, loss through pool -> MLP -> concat.
/// The grid itself is checked as an input alongside the adapter weights.
inline GradCheckResult gradcheck_pool_adapter(std::uint64_t seed, std::size_t seeds, double h = 1e-5) {
  GradCheckResult r{"pool_adapter", 0.0, seeds, 0};
  for (std::size_t k = 0; k < seeds; ++k) {
    Rng rng(splitmix64(seed + k));
    const std::size_t H = 1 + rng.below(6), W = 1 + rng.below(6), C = 1 + rng.below(4);
    PoolConfig cfg;
    cfg.scales = {1 + rng.below(4)};
    if (rng.below(2)) {
      const std::size_t q = 1 + rng.below(5);
      if (q != cfg.scales[0]) cfg.scales.push_back(q);
    }
    cfg.llm_width = 1 + rng.below(5);
    cfg.mlp_hidden = 1 + rng.below(6);
    cfg.shared_mlp = rng.below(4) == 0;
    ParamStore store;
    init_pool_adapter(store, cfg, C, rng);
    for (auto& [n, t] : store)  // nonzero biases exercise every path
      if (ends_with(n, ".b1") || ends_with(n, ".b2")) t = uniform_tensor(t.shape(), rng, -0.5, 0.5);
    store.add("grid", normal_tensor({H, W, C}, rng, 1.0));
    const std::uint64_t ro = rng.next_u64();
    auto loss = [&](Bound& p) {
      Rng rr(ro);
      return detail::readout(multi_scale_embed(p, make_grid(p("grid")), cfg).embeddings, rr);
    };
    auto names = detail::names_with_prefix(store, "adapter.");
    names.push_back("grid");
    r.tensors += names.size();
    r.max_rel_error = std::max(r.max_rel_error, param_grad_check(store, names, loss, h));
  }
  return r;
}

inline GradCheckResult gradcheck_query_adapter(std::uint64_t seed, std::size_t seeds, double h = 1e-5) {
  GradCheckResult r{"query_adapter", 0.0, seeds, 0};
  for (std::size_t k = 0; k < seeds; ++k) {
    Rng rng(splitmix64(seed + 1000 + k));
    const std::size_t H = 1 + rng.below(4), W = 1 + rng.below(4), C = 1 + rng.below(4);
    QueryConfig cfg;
    cfg.num_queries = 1 + rng.below(4);
    cfg.llm_width = 1 + rng.below(5);
    cfg.mlp_hidden = 1 + rng.below(5);
    cfg.key_positions = rng.below(2) == 1;
    ParamStore store;
    init_query_adapter(store, cfg, C, {{H, W}}, rng);
    store.add("grid", normal_tensor({H, W, C}, rng, 1.0));
    const std::uint64_t ro = rng.next_u64();
    auto loss = [&](Bound& p) {
      Rng rr(ro);
      return detail::readout(query_embed(p, make_grid(p("grid")), cfg).embeddings, rr);
    };
    auto names = detail::names_with_prefix(store, "qadapter.");
    names.push_back("grid");
    r.tensors += names.size();
    r.max_rel_error = std::max(r.max_rel_error, param_grad_check(store, names, loss, h));
  }
  return r;
}

/// Tiny LM over a mixed token/visual sequence with the masked target loss.
/// Visual rows are checked as an input too.
inline GradCheckResult gradcheck_lm(std::uint64_t seed, std::size_t seeds, double h = 1e-5) {
  GradCheckResult r{"lm", 0.0, seeds, 0};
  for (std::size_t k = 0; k < seeds; ++k) {
    Rng rng(splitmix64(seed + 2000 + k));
    LmConfig cfg;
    cfg.vocab_size = 3 + rng.below(5);
    cfg.heads = 1 + rng.below(2);
    cfg.width = cfg.heads * (1 + rng.below(3));
    cfg.depth = 1 + rng.below(2);
    cfg.context = 12;
    cfg.mlp_ratio = 2;
    ParamStore store;
    init_lm(store, cfg, rng);
    for (auto& [n, t] : store)
      if (ends_with(n, ".b") || ends_with(n, "fc1.b") || ends_with(n, "fc2.b"))
        t = uniform_tensor(t.shape(), rng, -0.3, 0.3);
    const std::size_t nv = 1 + rng.below(3);
    store.add("visual", normal_tensor({nv, cfg.width}, rng, 1.0));
    MixedSequence seq;
    seq.items.push_back(SeqItem::token(rng.below(cfg.vocab_size)));
    for (std::size_t v = 0; v < nv; ++v) seq.items.push_back(SeqItem::visual(v));
    const std::size_t nt = 1 + rng.below(4);
    for (std::size_t t = 0; t < nt; ++t) seq.items.push_back(SeqItem::token(rng.below(cfg.vocab_size), true));
    auto loss = [&](Bound& p) { return lm_loss(lm_forward(p, seq, p("visual"), cfg), seq); };
    std::vector<std::string> names;
    for (const auto& [n, _] : store) names.push_back(n);
    r.tensors += names.size();
    r.max_rel_error = std::max(r.max_rel_error, param_grad_check(store, names, loss, h));
  }
  return r;
}

/// Checks every trainable tensor of a full model on one sample. An empty
/// parameter list passes vacuously with a warning.
inline GradCheckResult gradcheck_model(ParamStore& store, const std::vector<std::string>& names,
                                       const StoreLossFn& loss, double h = 1e-5) {
  GradCheckResult r{"model", 0.0, 1, names.size()};
  if (names.empty()) {
    log_warn("gradcheck: no parameters to check; passing vacuously");
    return r;
  }
  r.max_rel_error = param_grad_check(store, names, loss, h);
  return r;
}

}  // namespace padapt
