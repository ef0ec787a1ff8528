#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "padapt/autodiff.hpp"
#include "padapt/checkpoint.hpp"
#include "padapt/rng.hpp"

using namespace padapt;

namespace {

Tensor mat(std::size_t r, std::size_t c, std::vector<double> v) { return Tensor({r, c}, std::move(v)); }

// Naive log-sum-exp cross entropy, written independently of the op.
double ce_oracle(const Tensor& logits, const std::vector<std::size_t>& tg, const std::vector<double>& mask) {
  const std::size_t T = logits.dim(0), V = logits.dim(1);
  double total = 0, n = 0;
  for (std::size_t t = 0; t < T; ++t) {
    if (mask[t] == 0) continue;
    double mx = -INFINITY;
    for (std::size_t v = 0; v < V; ++v) mx = std::max(mx, logits.at(t, v));
    double s = 0;
    for (std::size_t v = 0; v < V; ++v) s += std::exp(logits.at(t, v) - mx);
    total += (mx + std::log(s)) - logits.at(t, tg[t]);
    n += 1;
  }
  return total / n;
}

}  // namespace

TEST(Tensor, ShapeInvariants) {
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  Tensor t({2, 3}, 1.5);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_TRUE(t.all_finite());
  t[4] = NAN;
  EXPECT_FALSE(t.all_finite());
}

TEST(Matmul, IdentityAndDotProduct) {
  Tape tape;
  Var I = tape.constant(mat(2, 2, {1, 0, 0, 1}));
  Var B = tape.constant(mat(2, 2, {1, 2, 3, 4}));
  EXPECT_EQ(matmul(I, B).value().vec(), (std::vector<double>{1, 2, 3, 4}));
  Var r = tape.constant(mat(1, 2, {1, 2}));
  Var c = tape.constant(mat(2, 1, {3, 4}));
  EXPECT_EQ(matmul(r, c).value().vec(), (std::vector<double>{11}));
}

TEST(Matmul, ShapeMismatch) {
  Tape tape;
  Var a = tape.constant(Tensor({2, 3}));
  Var b = tape.constant(Tensor({2, 3}));
  EXPECT_THROW(matmul(a, b), ShapeError);
}

TEST(Matmul, GradientMatchesFiniteDifferences) {
  Rng rng(11);
  const Tensor b = uniform_tensor({4, 2}, rng, -1, 1);
  const Tensor w = uniform_tensor({3, 2}, rng, -1, 1);
  auto f = [&](Tape& t, Var x) { return sum(multiply(matmul(x, t.constant(b)), t.constant(w))); };
  EXPECT_LT(grad_check(f, uniform_tensor({3, 4}, rng, -1, 1)), 1e-6);
  const Tensor a = uniform_tensor({3, 4}, rng, -1, 1);
  auto g = [&](Tape& t, Var x) { return sum(multiply(matmul(t.constant(a), x), t.constant(w))); };
  EXPECT_LT(grad_check(g, b), 1e-6);
}

TEST(Softmax, Examples) {
  Tape tape;
  auto sm = [&](std::vector<double> v) { return softmax(tape.constant(Tensor({v.size()}, v)), 0).value().vec(); };
  for (double p : sm({0, 0, 0})) EXPECT_NEAR(p, 1.0 / 3.0, 1e-15);
  const auto sat = sm({1000, 0, 0});
  EXPECT_NEAR(sat[0], 1.0, 1e-12);
  EXPECT_NEAR(sat[1], 0.0, 1e-12);
  const auto r = sm({1, 2, 3});
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) EXPECT_NEAR(r[i], std::exp(i + 1.0) / z, 1e-15);
  EXPECT_NEAR(r[0], 0.09003057, 1e-8);
  EXPECT_NEAR(r[1], 0.24472847, 1e-8);
  EXPECT_NEAR(r[2], 0.66524096, 1e-8);
}

TEST(Softmax, RowsSumToOneProperty) {
  for (std::uint64_t s = 0; s < 30; ++s) {
    Rng rng(s);
    const std::size_t r = 1 + rng.below(5), c = 1 + rng.below(7);
    Tape tape;
    Var y = softmax(tape.constant(uniform_tensor({r, c}, rng, -50, 50)), 1);
    for (std::size_t i = 0; i < r; ++i) {
      double sum = 0;
      for (std::size_t j = 0; j < c; ++j) {
        const double p = y.value().at(i, j);
        EXPECT_GE(p, 0.0);
        EXPECT_LE(p, 1.0);
        sum += p;
      }
      EXPECT_NEAR(sum, 1.0, 1e-12);
    }
  }
}

TEST(Softmax, AxisZeroMatchesTransposedAxisOne) {
  Rng rng(3);
  Tape tape;
  Var x = tape.constant(uniform_tensor({3, 4}, rng, -2, 2));
  const Tensor a = softmax(x, 0).value();
  const Tensor b = transpose(softmax(transpose(x), 1)).value();
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], b[i], 1e-15);
}

TEST(SoftmaxCausal, MasksFutureExactly) {
  Rng rng(5);
  Tape tape;
  Var y = softmax_causal(tape.constant(uniform_tensor({3, 5}, rng, -1, 1)));
  // 3 queries over 5 keys: query i sees keys j <= i + 2
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j)
      if (j > i + 2) EXPECT_EQ(y.value().at(i, j), 0.0);
      else EXPECT_GT(y.value().at(i, j), 0.0);
}

TEST(LayerNorm, Examples) {
  Tape tape;
  Var g = tape.constant(Tensor({2}, 1.0));
  Var b = tape.constant(Tensor({2}, 0.0));
  Var y = layer_norm(tape.constant(mat(1, 2, {1, 3})), g, b);
  EXPECT_NEAR(y.value()[0], -1.0, 1e-4);
  EXPECT_NEAR(y.value()[1], 1.0, 1e-4);
  Var g3 = tape.constant(Tensor({3}, 1.0));
  Var b3 = tape.constant(Tensor({3}, 0.0));
  Var c = layer_norm(tape.constant(mat(1, 3, {4, 4, 4})), g3, b3);
  for (double v : c.value().vec()) EXPECT_EQ(v, 0.0);
}

TEST(LayerNorm, WidthMismatch) {
  Tape tape;
  EXPECT_THROW(layer_norm(tape.constant(Tensor({2, 3})), tape.constant(Tensor({2})), tape.constant(Tensor({3}))),
               ShapeError);
}

TEST(CrossEntropy, Examples) {
  Tape tape;
  const std::vector<std::size_t> tg{2};
  const std::vector<double> m{1.0};
  EXPECT_NEAR(cross_entropy(tape.constant(Tensor({1, 4}, 0.3)), tg, m).value().item(), std::log(4.0), 1e-12);
  Var peaked = tape.constant(mat(1, 4, {0, 0, 40, 0}));
  EXPECT_LT(cross_entropy(peaked, tg, m).value().item(), 1e-6);
}

TEST(CrossEntropy, MatchesLogSumExpOracle) {
  Rng rng(7);
  const Tensor logits = uniform_tensor({5, 7}, rng, -3, 3);
  std::vector<std::size_t> tg(5);
  for (auto& t : tg) t = rng.below(7);
  const std::vector<double> mask{1, 0, 1, 1, 0};
  Tape tape;
  EXPECT_NEAR(cross_entropy(tape.constant(logits), tg, mask).value().item(), ce_oracle(logits, tg, mask), 1e-10);
}

TEST(CrossEntropy, Errors) {
  Tape tape;
  Var x = tape.constant(Tensor({2, 3}));
  const std::vector<std::size_t> tg{0, 1};
  EXPECT_THROW(cross_entropy(x, tg, std::vector<double>{0, 0}), ConfigError);
  EXPECT_THROW(cross_entropy(x, tg, std::vector<double>{0.5, 1}), ConfigError);
  EXPECT_THROW(cross_entropy(x, std::vector<std::size_t>{0, 3}, std::vector<double>{1, 1}), ShapeError);
}

TEST(GradCheck, Examples) {
  auto sq = [](Tape&, Var x) { return sum(multiply(x, x)); };
  EXPECT_LT(grad_check(sq, Tensor({2}, std::vector<double>{1, 2})), 1e-8);
  {
    Tape tape;
    Var x = tape.input(Tensor({2}, std::vector<double>{1, 2}), true);
    tape.backward(sum(multiply(x, x)));
    EXPECT_NEAR(tape.grad_of(x)[0], 2.0, 1e-12);
    EXPECT_NEAR(tape.grad_of(x)[1], 4.0, 1e-12);
  }
  auto constant = [](Tape& t, Var) { return t.constant(Tensor::scalar(3.0)); };
  EXPECT_EQ(grad_check(constant, Tensor({3}, 1.0)), 0.0);
}

TEST(GradCheck, DetectsBrokenBackwardRule) {
  // x^2 with a backward rule that forgets the factor 2
  auto broken = [](Tape& t, Var x) {
    Tensor out = x.value();
    for (auto& v : out.data()) v *= v;
    Var y = t.record("bad_square", std::move(out), {x}, [x](Tape& tp, std::size_t self) {
      auto g = tp.grad(self);
      auto gx = tp.grad(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * x.value()[i];
    });
    return sum(y);
  };
  EXPECT_GT(grad_check(broken, Tensor({2}, std::vector<double>{1, 2})), 0.1);
}

// Every differentiable op against central differences on random small
// shapes, 20+ seeds each.
TEST(GradCheck, AllOpsProperty) {
  for (std::uint64_t s = 0; s < 24; ++s) {
    Rng rng(100 + s);
    const std::size_t r = 1 + rng.below(4), c = 1 + rng.below(4), k = 1 + rng.below(4);
    const Tensor w = uniform_tensor({r, c}, rng, -1, 1);
    auto ro = [&](Tape& t, Var y) {  // random read-out matching y's shape
      Rng rr(s);
      return sum(multiply(y, t.constant(uniform_tensor(y.shape(), rr, -1, 1))));
    };
    const Tensor x = uniform_tensor({r, c}, rng, -2, 2);
    const Tensor other = uniform_tensor({r, c}, rng, -2, 2);
    const Tensor right = uniform_tensor({c, k}, rng, -1, 1);
    const Tensor bias = uniform_tensor({c}, rng, -1, 1);
    const Tensor gain = uniform_tensor({c}, rng, 0.5, 1.5);
    std::vector<std::pair<const char*, ScalarFn>> fns = {
        {"add", [&](Tape& t, Var v) { return ro(t, add(v, t.constant(other))); }},
        {"multiply", [&](Tape& t, Var v) { return ro(t, multiply(v, t.constant(other))); }},
        {"self_multiply", [&](Tape& t, Var v) { return ro(t, multiply(v, v)); }},
        {"scale", [&](Tape& t, Var v) { return ro(t, scale(v, -1.7)); }},
        {"gelu", [&](Tape& t, Var v) { return ro(t, gelu(v)); }},
        {"transpose", [&](Tape& t, Var v) { return ro(t, transpose(v)); }},
        {"matmul", [&](Tape& t, Var v) { return ro(t, matmul(v, t.constant(right))); }},
        {"add_bias", [&](Tape& t, Var v) { return ro(t, add_bias(v, t.constant(bias))); }},
        {"softmax1", [&](Tape& t, Var v) { return ro(t, softmax(v, 1)); }},
        {"softmax0", [&](Tape& t, Var v) { return ro(t, softmax(v, 0)); }},
        {"layer_norm", [&](Tape& t, Var v) { return ro(t, layer_norm(v, t.constant(gain), t.constant(bias))); }},
        {"reshape", [&](Tape& t, Var v) { return ro(t, reshape(v, {r * c})); }},
        {"concat0", [&](Tape& t, Var v) { return ro(t, concat({v, t.constant(other), v}, 0)); }},
        {"concat1", [&](Tape& t, Var v) { return ro(t, concat({t.constant(other), v}, 1)); }},
        {"slice", [&](Tape& t, Var v) { return ro(t, slice(v, 1, c / 2, c - c / 2)); }},
        {"mean0", [&](Tape& t, Var v) { return ro(t, mean(v, 0)); }},
        {"mean1", [&](Tape& t, Var v) { return ro(t, mean(v, 1)); }},
        {"embedding", [&](Tape& t, Var v) {
           std::vector<std::size_t> ids{0, r - 1, 0};
           return ro(t, embedding_lookup(v, ids));
         }},
        {"cross_entropy", [&](Tape&, Var v) {
           std::vector<std::size_t> tg(r, c - 1);
           std::vector<double> m(r, 1.0);
           return cross_entropy(v, tg, m);
         }},
    };
    if (c == r) fns.emplace_back("softmax_causal", [&](Tape& t, Var v) { return ro(t, softmax_causal(v)); });
    for (const auto& [name, f] : fns) EXPECT_LT(grad_check(f, x), 1e-4) << name << " seed " << s;
    // gain and bias of layer_norm
    auto ln_gain = [&](Tape& t, Var g) { return ro(t, layer_norm(t.constant(x), g, t.constant(bias))); };
    EXPECT_LT(grad_check(ln_gain, gain), 1e-4);
    auto ln_bias = [&](Tape& t, Var b) { return ro(t, layer_norm(t.constant(x), t.constant(gain), b)); };
    EXPECT_LT(grad_check(ln_bias, bias), 1e-4);
  }
}

TEST(Gelu, TanhApproximation) {
  for (double x : {-3.0, -0.5, 0.0, 0.7, 2.5}) {
    const double ref = 0.5 * x * (1 + std::tanh(std::sqrt(2 / M_PI) * (x + 0.044715 * x * x * x)));
    EXPECT_DOUBLE_EQ(gelu_value(x), ref);
  }
}

TEST(Concat, BackwardSplitsUpstreamBitwise) {
  Rng rng(9);
  Tape tape;
  Var a = tape.input(uniform_tensor({2, 3}, rng, -1, 1), true);
  Var b = tape.input(uniform_tensor({1, 3}, rng, -1, 1), true);
  Var c = tape.input(uniform_tensor({4, 3}, rng, -1, 1), true);
  Var y = concat({a, b, c}, 0);
  const Tensor up = uniform_tensor(y.shape(), rng, -1, 1);
  tape.backward(sum(multiply(y, tape.constant(up))));
  std::vector<double> re;
  for (Var v : {a, b, c}) {
    auto g = tape.grad_of(v);
    re.insert(re.end(), g.begin(), g.end());
  }
  EXPECT_EQ(std::memcmp(re.data(), up.vec().data(), re.size() * sizeof(double)), 0);
}

TEST(Tape, NonFiniteValuesAreRejected) {
  Tape tape;
  Var x = tape.constant(Tensor({1}, 1e300));
  EXPECT_THROW(multiply(x, x), NumericError);
}

TEST(Tape, ReplayIsDeterministic) {
  auto run = [] {
    Rng rng(42);
    Tape tape;
    Var x = tape.input(uniform_tensor({3, 4}, rng, -1, 1), true);
    Var w = tape.input(uniform_tensor({4, 4}, rng, -1, 1), true);
    Var y = softmax(gelu(matmul(x, w)), 1);
    Var loss = sum(multiply(y, y));
    tape.backward(loss);
    Tensor gx({3, 4}, tape.grad_of(x)), gw({4, 4}, tape.grad_of(w));
    return std::make_tuple(loss.value(), gx, gw);
  };
  auto [l1, x1, w1] = run();
  auto [l2, x2, w2] = run();
  EXPECT_TRUE(bitwise_equal(l1, l2));
  EXPECT_TRUE(bitwise_equal(x1, x2));
  EXPECT_TRUE(bitwise_equal(w1, w2));
}

TEST(Tape, FrozenLeavesReceiveNoGradient) {
  ParamStore store;
  Tensor& w = store.add("w", Tensor({2, 2}, 1.0));
  Tensor& v = store.add("v", Tensor({2, 2}, 2.0));
  v.requires_grad = true;
  Tape tape;
  tape.backward(sum(matmul(tape.leaf(w), tape.leaf(v))));
  EXPECT_FALSE(w.grad.has_value());
  ASSERT_TRUE(v.grad.has_value());
  for (double g : *v.grad) EXPECT_EQ(g, 2.0);
}

TEST(Checkpoint, RoundTripAndByteLayout) {
  ParamStore s;
  s.add("a", Tensor({2, 3}, std::vector<double>{1, 2, 3, 4, 5, 6.5}));
  s.add("lm.block0.attn.q_proj", Tensor({1}, -0.25));
  std::stringstream ss;
  write_checkpoint(ss, s);
  const std::string bytes = ss.str();
  EXPECT_EQ(bytes.substr(0, 4), "PADT");
  std::uint32_t version;
  std::memcpy(&version, bytes.data() + 4, 4);
  EXPECT_EQ(version, 1u);
  std::uint64_t count;
  std::memcpy(&count, bytes.data() + 8, 8);
  EXPECT_EQ(count, 2u);
  // header 16 + "a": 4 + 1 + 4 + 2*8 + 6*8 ; q_proj: 4 + 21 + 4 + 8 + 8
  EXPECT_EQ(bytes.size(), 16u + (4 + 1 + 4 + 16 + 48) + (4 + 21 + 4 + 8 + 8));
  ParamStore r = read_checkpoint(ss);
  ASSERT_EQ(r.size(), 2u);
  EXPECT_TRUE(bitwise_equal(r.get("a"), s.get("a")));
  EXPECT_TRUE(bitwise_equal(r.get("lm.block0.attn.q_proj"), s.get("lm.block0.attn.q_proj")));
  EXPECT_EQ(hash_store(r), hash_store(s));
}

TEST(Checkpoint, RejectsCorruptInput) {
  std::stringstream bad("XXXX");
  EXPECT_THROW(read_checkpoint(bad), IoError);
  ParamStore s;
  s.add("a", Tensor({4}, 1.0));
  std::stringstream ss;
  write_checkpoint(ss, s);
  std::stringstream truncated(ss.str().substr(0, ss.str().size() - 5));
  EXPECT_THROW(read_checkpoint(truncated), IoError);
  EXPECT_THROW(load_checkpoint("/nonexistent/dir/x.padt"), IoError);
}

TEST(Rng, SubstreamsAreIndependentAndReproducible) {
  Rng a = Rng::substream(1, "data"), b = Rng::substream(1, "data"), c = Rng::substream(1, "init");
  const auto x = a.next_u64();
  EXPECT_EQ(x, b.next_u64());
  EXPECT_NE(x, c.next_u64());
  Rng r(5);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(r.below(7), 7u);
  }
}
