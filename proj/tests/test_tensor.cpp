#include <cmath>
#include <random>

#include "doctest.h"
#include "gridformer/error.hpp"
#include "gridformer/gradcheck.hpp"
#include "gridformer/nn.hpp"
#include "gridformer/ops.hpp"

using namespace gridformer;

namespace {

Tensor random_tensor(Shape shape, std::mt19937_64& rng, bool requires_grad = true, double scale = 1.0) {
  std::normal_distribution<double> normal(0.0, scale);
  std::vector<double> values(numel(shape));
  for (auto& v : values) v = normal(rng);
  return Tensor::from(std::move(shape), std::move(values), requires_grad);
}

// Contracts a tensor output with fixed random weights so every element
// contributes a distinct amount to the scalar.
Tensor contract(const Tensor& y, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  Tensor w = random_tensor(y.shape(), rng, false);
  return ops::sum_all(ops::mul(y, w));
}

double check_primitive(ParamStore& params, const std::function<Tensor(const ParamStore&)>& f) {
  return gradient_check(params, f).max_relative_error;
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
  Tensor y = ops::softmax(Tensor::from({3}, {0, 0, 0}));
  for (double v : y.data()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-7));
}

TEST_CASE("softmax rows sum to one for arbitrary finite input") {
  PrecisionScope scope(Precision::f64);
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor x = random_tensor({4, 7}, rng, false, 20.0);
    Tensor y = ops::softmax(x);
    for (std::size_t r = 0; r < 4; ++r) {
      double total = 0.0;
      for (std::size_t c = 0; c < 7; ++c) total += y.at(r * 7 + c);
      CHECK(std::abs(total - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("layer norm of a constant vector is zero before the affine part") {
  Tensor x = Tensor::full({5}, 3.25);
  Tensor y = ops::layer_norm(x, Tensor::full({5}, 1.0), Tensor::zeros({5}));
  for (double v : y.data()) CHECK(v == 0.0);
  Tensor shifted = ops::layer_norm(x, Tensor::full({5}, 2.0), Tensor::full({5}, 0.5));
  for (double v : shifted.data()) CHECK(v == 0.5);
}

TEST_CASE("matmul with identity returns the operand") {
  std::mt19937_64 rng(1);
  Tensor a = random_tensor({3, 3}, rng, false);
  Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor y = ops::matmul(eye, a);
  for (std::size_t i = 0; i < 9; ++i) CHECK(y.at(i) == a.at(i));
}

TEST_CASE("shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({4, 5});
  try {
    ops::add(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2, 3]") != std::string::npos);
    CHECK(msg.find("[4, 5]") != std::string::npos);
  }
  CHECK_THROWS_AS(ops::matmul(a, b), ShapeError);
}

TEST_CASE("non-finite output is rejected") {
  PrecisionScope scope(Precision::f64);
  Tensor big = Tensor::from({1}, {1e308});
  CHECK_THROWS_AS(ops::scale(big, 10.0), NumericError);
}

TEST_CASE("f32 mode rounds op outputs to float") {
  PrecisionScope scope(Precision::f32);
  Tensor x = Tensor::from({1}, {0.1});
  CHECK(x.at(0) == static_cast<double>(0.1f));
  Tensor y = ops::scale(x, 3.0);
  CHECK(y.at(0) == static_cast<double>(static_cast<float>(3.0 * static_cast<double>(0.1f))));
}

TEST_CASE("broadcasting add and its gradient") {
  PrecisionScope scope(Precision::f64);
  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
  Tensor b = Tensor::from({3}, {10, 20, 30}, true);
  Tensor y = ops::add(a, b);
  CHECK(y.shape() == Shape{2, 3});
  CHECK(y.at(4) == 25.0);
  ops::sum_all(y).backward();
  for (double g : b.grad()) CHECK(g == 2.0);
  for (double g : a.grad()) CHECK(g == 1.0);
}

TEST_CASE("dropout and drop path are identity in eval mode") {
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({4, 6}, rng, false);
  CHECK(ops::dropout(x, 0.5, rng, false).node() == x.node());
  CHECK(ops::drop_path(x, 0.5, rng, false).node() == x.node());
  std::mt19937_64 r1(11), r2(11);
  Tensor d1 = ops::dropout(x, 0.5, r1, true);
  Tensor d2 = ops::dropout(x, 0.5, r2, true);
  for (std::size_t i = 0; i < x.numel(); ++i) CHECK(d1.at(i) == d2.at(i));
}

TEST_CASE("gradient check on a quadratic") {
  PrecisionScope scope(Precision::f64);
  ParamStore params;
  params.add("x", Tensor::from({2}, {1, 2}, true));
  auto f = [](const ParamStore& p) { return ops::sum_all(ops::mul(p.at("x"), p.at("x"))); };
  Tensor loss = f(params);
  loss.backward();
  CHECK(params.at("x").grad()[0] == 2.0);
  CHECK(params.at("x").grad()[1] == 4.0);
  auto result = gradient_check(params, f);
  CHECK(result.max_relative_error < 1e-7);
}

TEST_CASE("gradient check of a constant function is exactly zero") {
  PrecisionScope scope(Precision::f64);
  ParamStore params;
  params.add("x", Tensor::from({3}, {1, 2, 3}, true));
  auto f = [](const ParamStore&) { return Tensor::scalar(4.0); };
  auto result = gradient_check(params, f);
  CHECK(result.max_relative_error == 0.0);
  CHECK_FALSE(params.at("x").has_grad());
}

TEST_CASE("sampled gradient check perturbs at most the requested coordinates") {
  PrecisionScope scope(Precision::f64);
  ParamStore params;
  std::vector<double> v(100);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.01 * static_cast<double>(i) - 0.3;
  params.add("x", Tensor::from({100}, v, true));
  auto f = [](const ParamStore& p) { return ops::sum_all(ops::mul(ops::mul(p.at("x"), p.at("x")), p.at("x"))); };
  auto sampled = gradient_check(params, f, 1e-5, 8);
  CHECK(sampled.evaluations <= 1 + 2 * 8);
  CHECK(sampled.max_relative_error < 1e-7);
  CHECK(gradient_check(params, f).evaluations == 1 + 2 * 100);
}

TEST_CASE("gradient check rejects 32-bit mode") {
  PrecisionScope scope(Precision::f32);
  ParamStore params;
  params.add("x", Tensor::from({1}, {1}, true));
  CHECK_THROWS_AS(gradient_check(params, [](const ParamStore& p) { return ops::sum_all(p.at("x")); }),
                  ValidationError);
}

TEST_CASE("every primitive passes the finite-difference check") {
  PrecisionScope scope(Precision::f64);
  std::mt19937_64 rng(2024);
  ParamStore params;
  params.add("a", random_tensor({2, 3, 4}, rng));
  params.add("b", random_tensor({3, 4}, rng));
  params.add("m", random_tensor({2, 4, 5}, rng));
  params.add("w", random_tensor({4, 5}, rng));
  params.add("g", random_tensor({4}, rng));
  params.add("s", random_tensor({4}, rng));

  std::vector<std::pair<const char*, std::function<Tensor(const ParamStore&)>>> cases = {
      {"add", [](const ParamStore& p) { return contract(ops::add(p.at("a"), p.at("b"))); }},
      {"sub", [](const ParamStore& p) { return contract(ops::sub(p.at("a"), p.at("b"))); }},
      {"mul", [](const ParamStore& p) { return contract(ops::mul(p.at("a"), p.at("b"))); }},
      {"scale", [](const ParamStore& p) { return contract(ops::scale(p.at("a"), -1.5)); }},
      {"add_scalar", [](const ParamStore& p) { return contract(ops::add_scalar(p.at("a"), 2.0)); }},
      {"matmul batched", [](const ParamStore& p) { return contract(ops::matmul(p.at("a"), p.at("m"))); }},
      {"matmul shared rhs", [](const ParamStore& p) { return contract(ops::matmul(p.at("a"), p.at("w"))); }},
      {"reshape", [](const ParamStore& p) { return contract(ops::reshape(p.at("a"), {6, 4})); }},
      {"permute", [](const ParamStore& p) { return contract(ops::permute(p.at("a"), {2, 0, 1})); }},
      {"concat", [](const ParamStore& p) {
         return contract(ops::concat({p.at("a"), ops::reshape(p.at("b"), {1, 3, 4})}, 0));
       }},
      {"slice", [](const ParamStore& p) { return contract(ops::slice(p.at("a"), 1, 1, 3)); }},
      {"index_select", [](const ParamStore& p) {
         std::vector<std::size_t> idx{2, 0, 2};
         return contract(ops::index_select(p.at("a"), 1, idx));
       }},
      {"broadcast_to", [](const ParamStore& p) { return contract(ops::broadcast_to(p.at("b"), {2, 3, 4})); }},
      {"sum axis", [](const ParamStore& p) { return contract(ops::sum(p.at("a"), 1)); }},
      {"mean axis", [](const ParamStore& p) { return contract(ops::mean(p.at("a"), 2, true)); }},
      {"mean_all", [](const ParamStore& p) { return ops::mean_all(ops::mul(p.at("a"), p.at("a"))); }},
      {"softmax", [](const ParamStore& p) { return contract(ops::softmax(p.at("a"))); }},
      {"layer_norm", [](const ParamStore& p) {
         return contract(ops::layer_norm(p.at("a"), p.at("g"), p.at("s")));
       }},
      {"gelu", [](const ParamStore& p) { return contract(ops::gelu(p.at("a"))); }},
      {"tanh", [](const ParamStore& p) { return contract(ops::tanh(p.at("a"))); }},
      {"dropout (train, fixed seed)", [](const ParamStore& p) {
         std::mt19937_64 r(7);
         return contract(ops::dropout(p.at("a"), 0.3, r, true));
       }},
      {"drop_path (train, fixed seed)", [](const ParamStore& p) {
         std::mt19937_64 r(8);
         return contract(ops::drop_path(p.at("a"), 0.3, r, true));
       }},
  };
  for (const auto& [name, f] : cases) {
    CAPTURE(name);
    CHECK(check_primitive(params, f) <= 1e-5);
  }
}

TEST_CASE("attention over a single key puts weight exactly one on it") {
  std::mt19937_64 rng(4);
  ParamStore params;
  nn::add_attention(params, "attn", 8, rng);
  Tensor q = random_tensor({3, 5, 8}, rng, false);
  Tensor kv = random_tensor({3, 1, 8}, rng, false);
  nn::AttentionProbe probe;
  nn::multi_head_attention(params, "attn", q, kv, kv, 2, &probe);
  CHECK(probe.key_length == 1);
  for (double w : probe.weights) CHECK(w == 1.0);
}

TEST_CASE("attention rejects heads that do not divide the width") {
  std::mt19937_64 rng(4);
  ParamStore params;
  nn::add_attention(params, "attn", 8, rng);
  Tensor x = random_tensor({1, 2, 8}, rng, false);
  CHECK_THROWS_AS(nn::multi_head_attention(params, "attn", x, x, x, 3), ValidationError);
}

TEST_CASE("attention output is invariant to permuting key/value positions") {
  std::mt19937_64 rng(6);
  ParamStore params;
  nn::add_attention(params, "attn", 8, rng);
  // Non-trivial projections.
  for (auto& [name, t] : params) {
    std::normal_distribution<double> normal(0.0, 0.4);
    for (auto& v : t.mutable_data()) v = normal(rng);
  }
  Tensor q = random_tensor({2, 3, 8}, rng, false);
  Tensor kv = random_tensor({2, 4, 8}, rng, false);
  std::vector<std::size_t> perm{2, 0, 3, 1};
  Tensor kv_perm = ops::index_select(kv, 1, perm);
  Tensor a = nn::multi_head_attention(params, "attn", q, kv, kv, 2);
  Tensor b = nn::multi_head_attention(params, "attn", q, kv_perm, kv_perm, 2);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(std::abs(a.at(i) - b.at(i)) < 1e-5);
}

TEST_CASE("multi-head attention matches a naive per-head loop") {
  PrecisionScope scope(Precision::f64);
  std::mt19937_64 rng(12);
  const std::size_t D = 8, H = 2, dh = D / H, N = 2, Lq = 3, Lk = 5;
  ParamStore params;
  nn::add_attention(params, "attn", D, rng);
  for (auto& [name, t] : params) {
    std::normal_distribution<double> normal(0.0, 0.5);
    for (auto& v : t.mutable_data()) v = normal(rng);
  }
  Tensor q = random_tensor({N, Lq, D}, rng, false);
  Tensor k = random_tensor({N, Lk, D}, rng, false);
  Tensor v = random_tensor({N, Lk, D}, rng, false);
  Tensor out = nn::multi_head_attention(params, "attn", q, k, v, H);

  auto W = [&](const std::string& n, std::size_t i, std::size_t j) { return params.at(n).at(i * D + j); };
  auto B = [&](const std::string& n, std::size_t j) {
    return params.contains(n) ? params.at(n).at(j) : 0.0;
  };
  auto project = [&](const Tensor& x, std::size_t b, std::size_t pos, const std::string& name) {
    std::vector<double> y(D);
    for (std::size_t j = 0; j < D; ++j) {
      double acc = B(name + ".bias", j);
      for (std::size_t i = 0; i < D; ++i) acc += x.at((b * x.dim(1) + pos) * D + i) * W(name + ".weight", i, j);
      y[j] = acc;
    }
    return y;
  };
  for (std::size_t b = 0; b < N; ++b) {
    for (std::size_t i = 0; i < Lq; ++i) {
      auto qi = project(q, b, i, "attn.q_proj");
      std::vector<double> concat(D, 0.0);
      for (std::size_t h = 0; h < H; ++h) {
        std::vector<double> logits(Lk);
        for (std::size_t j = 0; j < Lk; ++j) {
          auto kj = project(k, b, j, "attn.k_proj");
          double dot = 0.0;
          for (std::size_t c = 0; c < dh; ++c) dot += qi[h * dh + c] * kj[h * dh + c];
          logits[j] = dot / std::sqrt(static_cast<double>(dh));
        }
        double mx = *std::max_element(logits.begin(), logits.end());
        double z = 0.0;
        for (auto& l : logits) z += (l = std::exp(l - mx));
        for (std::size_t j = 0; j < Lk; ++j) {
          auto vj = project(v, b, j, "attn.v_proj");
          for (std::size_t c = 0; c < dh; ++c) concat[h * dh + c] += logits[j] / z * vj[h * dh + c];
        }
      }
      for (std::size_t j = 0; j < D; ++j) {
        double acc = B("attn.out_proj.bias", j);
        for (std::size_t c = 0; c < D; ++c) acc += concat[c] * W("attn.out_proj.weight", c, j);
        CHECK(std::abs(out.at((b * Lq + i) * D + j) - acc) < 1e-6);
      }
    }
  }
}

TEST_CASE("attention gradient check") {
  PrecisionScope scope(Precision::f64);
  std::mt19937_64 rng(21);
  ParamStore params;
  nn::add_attention(params, "attn", 8, rng);
  for (auto& [name, t] : params) {
    std::normal_distribution<double> normal(0.0, 0.3);
    for (auto& v : t.mutable_data()) v = normal(rng);
  }
  params.add("x", random_tensor({2, 3, 8}, rng));
  auto f = [](const ParamStore& p) {
    const Tensor& x = p.at("x");
    return contract(nn::multi_head_attention(p, "attn", x, x, x, 2));
  };
  CHECK(gradient_check(params, f).max_relative_error <= 1e-5);
}

TEST_CASE("forward is bit-identical across runs") {
  std::mt19937_64 rng(31);
  ParamStore params;
  nn::add_attention(params, "attn", 8, rng);
  Tensor x = random_tensor({2, 3, 8}, rng, false);
  Tensor a = nn::multi_head_attention(params, "attn", x, x, x, 2);
  Tensor b = nn::multi_head_attention(params, "attn", x, x, x, 2);
  for (std::size_t i = 0; i < a.numel(); ++i) CHECK(a.at(i) == b.at(i));
}
