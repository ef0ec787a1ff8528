#include <gtest/gtest.h>

#include <algorithm>

#include "padapt/gradcheck.hpp"
#include "padapt/pool_adapter.hpp"

using namespace padapt;

namespace {

// Window mean written out directly from the floor/ceil rule.
Tensor pool_oracle(const Tensor& g, std::size_t p) {
  const std::size_t H = g.dim(0), W = g.dim(1), C = g.dim(2);
  Tensor out({p, p, C});
  for (std::size_t i = 0; i < p; ++i)
    for (std::size_t j = 0; j < p; ++j) {
      const std::size_t r0 = i * H / p, r1 = ((i + 1) * H + p - 1) / p;
      const std::size_t c0 = j * W / p, c1 = ((j + 1) * W + p - 1) / p;
      for (std::size_t k = 0; k < C; ++k) {
        double s = 0;
        for (std::size_t r = r0; r < r1; ++r)
          for (std::size_t c = c0; c < c1; ++c) s += g[(r * W + c) * C + k];
        out[(i * p + j) * C + k] = s / static_cast<double>((r1 - r0) * (c1 - c0));
      }
    }
  return out;
}

Tensor pool(const Tensor& g, std::size_t p) {
  Tape tape;
  return adaptive_pool(make_grid(tape.constant(g)), p).value();
}

}  // namespace

TEST(AdaptivePool, QuadrantExample) {
  std::vector<double> v(16);
  for (int i = 0; i < 16; ++i) v[i] = i + 1;
  const Tensor out = pool(Tensor({4, 4, 1}, v), 2);
  EXPECT_EQ(out.vec(), (std::vector<double>{3.5, 5.5, 11.5, 13.5}));
}

TEST(AdaptivePool, IdentityAndGlobalMean) {
  Rng rng(1);
  const Tensor g = uniform_tensor({5, 5, 3}, rng, -1, 1);
  EXPECT_TRUE(bitwise_equal(pool(g, 5), g));
  const Tensor one = pool(g, 1);
  for (std::size_t k = 0; k < 3; ++k) {
    double s = 0;
    for (std::size_t i = 0; i < 25; ++i) s += g[i * 3 + k];
    EXPECT_NEAR(one[k], s / 25, 1e-15);
  }
}

TEST(AdaptivePool, MatchesOracleBitwise) {
  for (std::size_t H = 1; H <= 12; ++H)
    for (std::size_t W = 1; W <= 12; ++W)
      for (std::size_t p = 1; p <= 8; ++p) {
        Rng rng(H * 1000 + W * 10 + p);
        const Tensor g = uniform_tensor({H, W, 2}, rng, -1, 1);
        ASSERT_TRUE(bitwise_equal(pool(g, p), pool_oracle(g, p))) << H << "x" << W << " p=" << p;
      }
}

TEST(AdaptivePool, OverlappingWindowsWhenPExceedsGrid) {
  const Tensor g({2, 1, 1}, std::vector<double>{1, 3});
  // rows: windows [0,1) [0,2) [1,2) ; cols repeat the single column
  EXPECT_EQ(pool(g, 3).vec(), (std::vector<double>{1, 1, 1, 2, 2, 2, 3, 3, 3}));
}

TEST(AdaptivePool, MeanPreservationWhenPDivides) {
  for (std::uint64_t s = 0; s < 40; ++s) {
    Rng rng(s);
    const std::size_t p = 1 + rng.below(4);
    const std::size_t H = p * (1 + rng.below(3)), W = p * (1 + rng.below(3));
    const Tensor g = uniform_tensor({H, W, 1}, rng, -5, 5);
    const Tensor o = pool(g, p);
    double mg = 0, mo = 0;
    for (double v : g.vec()) mg += v;
    for (double v : o.vec()) mo += v;
    EXPECT_NEAR(mg / static_cast<double>(g.numel()), mo / static_cast<double>(o.numel()), 1e-12);
  }
}

TEST(AdaptivePool, HorizontalFlipReversesColumns) {
  // Dyadic values make every partial sum exact, so the comparison is bitwise
  // even though the flip reverses summation order.
  for (std::uint64_t s = 0; s < 30; ++s) {
    Rng rng(s);
    const std::size_t p = 1 + rng.below(4), H = 1 + rng.below(8), W = p * (1 + rng.below(3)), C = 2;
    Tensor g({H, W, C});
    for (auto& v : g.data()) v = static_cast<double>(static_cast<int>(rng.below(64)) - 32) / 8.0;
    Tensor f({H, W, C});
    for (std::size_t r = 0; r < H; ++r)
      for (std::size_t c = 0; c < W; ++c)
        for (std::size_t k = 0; k < C; ++k) f[(r * W + c) * C + k] = g[(r * W + (W - 1 - c)) * C + k];
    const Tensor a = pool(g, p), b = pool(f, p);
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < p; ++j)
        for (std::size_t k = 0; k < C; ++k) ASSERT_EQ(b[(i * p + j) * C + k], a[(i * p + (p - 1 - j)) * C + k]);
  }
}

TEST(AdaptivePool, ZeroScaleIsShapeError) {
  Tape tape;
  EXPECT_THROW(adaptive_pool(make_grid(tape.constant(Tensor({2, 2, 1}))), 0), ShapeError);
  EXPECT_THROW(make_grid(tape.constant(Tensor({2, 2}))), ShapeError);
}

TEST(PoolConfig, Validation) {
  PoolConfig c;
  c.scales = {};
  EXPECT_THROW(c.validate(), ConfigError);
  c.scales = {2, 0};
  EXPECT_THROW(c.validate(), ConfigError);
  c.scales = {4, 2, 4};
  EXPECT_THROW(c.validate(), ConfigError);
  c.scales = {8, 16, 32};
  EXPECT_NO_THROW(c.validate());
}

namespace {

struct Fixture {
  PoolConfig cfg;
  ParamStore store;
  Tensor grid;

  Fixture(std::vector<std::size_t> scales, std::size_t H, std::size_t W, std::size_t C, std::size_t d,
          std::uint64_t seed = 1) {
    cfg.scales = std::move(scales);
    cfg.llm_width = d;
    Rng rng(seed);
    init_pool_adapter(store, cfg, C, rng);
    grid = uniform_tensor({H, W, C}, rng, -1, 1);
  }

  VisualEmbeddingSeq run(const std::vector<std::size_t>* sel, Tape& tape) {
    Bound p(tape, store);
    const FeatureGrid g = make_grid(tape.constant(grid));
    return sel ? multi_scale_embed(p, g, cfg, *sel) : multi_scale_embed(p, g, cfg);
  }
};

}  // namespace

TEST(MlpProject, ZeroWeightsGiveOutputBias) {
  Fixture f({1}, 3, 3, 2, 4);
  for (auto& [n, t] : f.store) t = Tensor(t.shape(), 0.0);
  f.store.get("adapter.p1.b2") = Tensor({4}, std::vector<double>{1, -2, 3, 0.5});
  f.grid = Tensor({3, 3, 2}, 0.7);
  Tape tape;
  const auto out = f.run(nullptr, tape);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out.embeddings.value().vec(), (std::vector<double>{1, -2, 3, 0.5}));
}

TEST(MlpProject, RowCountAndWidthMismatch) {
  Fixture f({2}, 4, 4, 1, 1);
  Tape tape;
  EXPECT_EQ(f.run(nullptr, tape).embeddings.shape(), (Shape{4, 1}));
  Bound p(tape, f.store);
  EXPECT_THROW(mlp_project(p, tape.constant(Tensor({2, 2, 3})), "adapter.p2"), ShapeError);
}

TEST(MultiScale, ReferenceCounts) {
  Fixture f({8, 16, 32}, 32, 32, 2, 3);
  Tape t1;
  EXPECT_EQ(f.run(nullptr, t1).size(), 1344u);
  Fixture g({32, 16, 8}, 32, 32, 2, 3);
  const std::vector<std::size_t> only{32};
  Tape t2;
  EXPECT_EQ(g.run(&only, t2).embeddings.shape(), (Shape{1024, 3}));
}

TEST(MultiScale, ProvenanceOrder) {
  Fixture f({3, 1, 2}, 5, 4, 2, 3);
  const std::vector<std::size_t> sel{2, 3};  // listed out of config order
  Tape tape;
  const auto out = f.run(&sel, tape);
  std::vector<Provenance> expect;
  for (std::size_t p : {3, 2})
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = 0; j < p; ++j) expect.push_back({p, i, j});
  EXPECT_EQ(out.provenance, expect);
}

TEST(MultiScale, SelectionErrors) {
  Fixture f({2, 4}, 4, 4, 2, 3);
  Tape tape;
  const std::vector<std::size_t> empty, unknown{3};
  EXPECT_THROW(f.run(&empty, tape), SelectionError);
  EXPECT_THROW(f.run(&unknown, tape), ConfigError);
}

TEST(MultiScale, SingleScaleConstantGridZeroMlp) {
  Fixture f({1}, 4, 4, 3, 2);
  for (auto& [n, t] : f.store) t = Tensor(t.shape(), 0.0);
  f.store.get("adapter.p1.b2") = Tensor({2}, std::vector<double>{0.25, -4});
  f.grid = Tensor({4, 4, 3}, 9.0);
  Tape tape;
  EXPECT_EQ(f.run(nullptr, tape).embeddings.value().vec(), (std::vector<double>{0.25, -4}));
}

TEST(MultiScale, CountLawProperty) {
  for (std::uint64_t s = 0; s < 60; ++s) {
    Rng rng(s);
    const std::size_t H = 1 + rng.below(16), W = 1 + rng.below(16);
    std::vector<std::size_t> all{1, 2, 3, 4, 5, 6, 7, 8};
    for (std::size_t i = all.size(); i > 1; --i) std::swap(all[i - 1], all[rng.below(i)]);
    std::vector<std::size_t> scales(all.begin(), all.begin() + 1 + rng.below(3));
    std::vector<std::size_t> sel;
    for (auto p : scales)
      if (rng.below(2)) sel.push_back(p);
    if (sel.empty()) sel.push_back(scales[0]);
    Fixture f(scales, H, W, 2, 3, s);
    Tape tape;
    const auto out = f.run(&sel, tape);
    std::size_t expect = 0;
    for (auto p : sel) expect += p * p;
    EXPECT_EQ(out.size(), expect);
    EXPECT_EQ(out.embeddings.shape()[0], expect);
    EXPECT_EQ(f.cfg.count(sel), expect);
  }
}

TEST(MultiScale, ScaleIndependence) {
  Fixture f({2, 3, 4}, 6, 6, 3, 4);
  Tape t1, t2;
  const auto all = f.run(nullptr, t1);
  const std::vector<std::size_t> only{3};
  const auto one = f.run(&only, t2);
  const Tensor& a = all.embeddings.value();
  const Tensor& b = one.embeddings.value();
  // rows for p=3 start after the 4 rows of p=2
  EXPECT_EQ(std::memcmp(a.vec().data() + 4 * 4, b.vec().data(), 9 * 4 * sizeof(double)), 0);
}

TEST(MultiScale, SharedMlpMode) {
  PoolConfig c;
  c.scales = {1, 2};
  c.llm_width = 3;
  c.shared_mlp = true;
  ParamStore s;
  Rng rng(1);
  init_pool_adapter(s, c, 2, rng);
  EXPECT_TRUE(s.contains("adapter.shared.w1"));
  EXPECT_FALSE(s.contains("adapter.p1.w1"));
  Tape tape;
  Bound p(tape, s);
  EXPECT_EQ(multi_scale_embed(p, make_grid(tape.constant(Tensor({3, 3, 2}, 1.0))), c).size(), 5u);
}

TEST(MultiScale, CheckpointNames) {
  Fixture f({2, 8}, 4, 4, 2, 3);
  for (const char* n : {"adapter.p2.w1", "adapter.p2.b1", "adapter.p2.w2", "adapter.p2.b2", "adapter.p8.w1"})
    EXPECT_TRUE(f.store.contains(n)) << n;
  // zero biases, fan-in scaled uniform weights
  for (double v : f.store.get("adapter.p2.b1").vec()) EXPECT_EQ(v, 0.0);
  const double a = std::sqrt(6.0 / (2 + 3));
  for (double v : f.store.get("adapter.p2.w1").vec()) EXPECT_LE(std::abs(v), a);
}

TEST(PoolGradient, CompositeMatchesFiniteDifferences) {
  const auto r = gradcheck_pool_adapter(7, 20);
  EXPECT_LT(r.max_rel_error, 1e-4);
  EXPECT_EQ(r.seeds, 20u);
}
