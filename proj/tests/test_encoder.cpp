#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "stmamba/encoder.hpp"
#include "stmamba/gradcheck.hpp"

using namespace stm;
using T = double;

TEST_CASE("encoder preserves shape and rejects width mismatch") {
  Rng rng(1);
  EncoderParams<T> p;
  p.init(8, 2, 2, 4, 4, 0.3, rng);
  Tensor<T> x = randn<T>({2, 6, 8}, rng);
  Rng drng(0);
  Tensor<T> y = encoder_forward(x, p, false, drng);
  CHECK(y.shape == x.shape);
  Tensor<T> bad = randn<T>({2, 6, 7}, rng);
  CHECK_THROWS_AS(encoder_forward(bad, p, false, drng), std::invalid_argument);
}

TEST_CASE("residual identity: zeroed branch projections give the identity map bitwise") {
  Rng rng(2);
  EncoderParams<T> p;
  p.init(8, 2, 2, 4, 4, 0.0, rng);
  std::fill(p.mamba.out_proj_w.ptr(), p.mamba.out_proj_w.ptr() + p.mamba.out_proj_w.size(), T(0));
  std::fill(p.ffn_w2.ptr(), p.ffn_w2.ptr() + p.ffn_w2.size(), T(0));
  std::fill(p.ffn_b2.ptr(), p.ffn_b2.ptr() + p.ffn_b2.size(), T(0));
  Tensor<T> x = randn<T>({3, 5, 8}, rng);
  Rng drng(0);
  Tensor<T> y = encoder_forward(x, p, false, drng);
  for (int64_t i = 0; i < x.size(); ++i) CHECK(y.ptr()[i] == x.ptr()[i]);  // bitwise
}

TEST_CASE("dropout inactive in inference mode regardless of p") {
  Rng rng(3);
  EncoderParams<T> p;
  p.init(4, 2, 2, 4, 4, 0.9, rng);
  Tensor<T> x = randn<T>({1, 4, 4}, rng);
  Rng r1(7), r2(99);
  Tensor<T> y1 = encoder_forward(x, p, false, r1);
  Tensor<T> y2 = encoder_forward(x, p, false, r2);
  for (int64_t i = 0; i < y1.size(); ++i) CHECK(y1.ptr()[i] == y2.ptr()[i]);
}

TEST_CASE("train mode with active dropout is seed-deterministic and seed-sensitive") {
  Rng rng(4);
  EncoderParams<T> p;
  p.init(6, 2, 2, 4, 4, 0.5, rng);
  Tensor<T> x = randn<T>({2, 5, 6}, rng);
  Rng ra(11), rb(11), rc(12);
  Tensor<T> ya = encoder_forward(x, p, true, ra);
  Tensor<T> yb = encoder_forward(x, p, true, rb);
  Tensor<T> yc = encoder_forward(x, p, true, rc);
  double same = 0, diff = 0;
  for (int64_t i = 0; i < ya.size(); ++i) {
    same += std::abs(ya.ptr()[i] - yb.ptr()[i]);
    diff += std::abs(ya.ptr()[i] - yc.ptr()[i]);
  }
  CHECK(same == 0.0);
  CHECK(diff > 0.0);
}

TEST_CASE("stack of depth N composes single layers in order") {
  Rng rng(5);
  EncoderStack<T> s;
  s.init(3, 6, 2, 2, 4, 4, 0.0, rng);
  Tensor<T> x = randn<T>({2, 4, 6}, rng);
  Rng r1(0), r2(0);
  Tensor<T> y = stack_forward(x, s, false, r1);
  Tensor<T> m = x;
  for (auto& l : s.layers) m = encoder_forward(m, l, false, r2);
  for (int64_t i = 0; i < y.size(); ++i) CHECK(y.ptr()[i] == m.ptr()[i]);
  EncoderStack<T> bad;
  CHECK_THROWS_AS(bad.init(0, 6, 2, 2, 4, 4, 0.0, rng), std::invalid_argument);
}

TEST_CASE("shared dual forward uses one parameter set; variance stream draws masks first") {
  Rng rng(6);
  EncoderStack<T> s;
  s.init(1, 6, 2, 2, 4, 4, 0.5, rng);
  Tensor<T> x = randn<T>({1, 4, 6}, rng);

  // inference: identical inputs -> identical outputs (same weights)
  Rng r0(0);
  auto [v0, a0] = shared_dual_forward(x, x, s, false, r0);
  for (int64_t i = 0; i < v0.size(); ++i) CHECK(v0.ptr()[i] == a0.ptr()[i]);

  // training: identical inputs diverge because the avg stream consumes later masks
  Rng r1(42);
  auto [v1, a1] = shared_dual_forward(x, x, s, true, r1);
  double d = 0;
  for (int64_t i = 0; i < v1.size(); ++i) d += std::abs(v1.ptr()[i] - a1.ptr()[i]);
  CHECK(d > 0.0);

  // and the var stream alone reproduces stack_forward on a fresh rng with the same seed
  Rng r2(42);
  Tensor<T> v2 = stack_forward(x, s, true, r2);
  for (int64_t i = 0; i < v1.size(); ++i) CHECK(v1.ptr()[i] == v2.ptr()[i]);

  Tensor<T> wrong = randn<T>({1, 5, 6}, rng);
  Rng r3(0);
  CHECK_THROWS_AS(shared_dual_forward(x, wrong, s, false, r3), std::invalid_argument);
}

TEST_CASE("encoder layer gradients pass finite differences") {
  Rng rng(7);
  EncoderParams<T> p;
  p.init(5, 2, 2, 3, 4, 0.0, rng);
  Tensor<T> x = randn<T>({1, 4, 5}, rng, 1.0, true);
  auto f = [&]() {
    Rng drng(0);
    Tensor<T> y = encoder_forward(x, p, false, drng);
    return sum(mul(y, y));
  };
  std::vector<std::pair<std::string, Tensor<T>>> params = {{"x", x}};
  p.visit("enc", [&](const std::string& n, Tensor<T>& t, bool) { params.push_back({n, t}); });
  auto rep = grad_check<T>(f, params, 1e-6, 1e-4, 16, 5);
  for (const auto& e : rep.entries) {
    INFO(e.name, " rel err ", e.rel_err);
    CHECK(e.pass);
  }
}

TEST_CASE("gradients flow through dropout masks consistently when training") {
  // with a fixed mask per forward, the recorded graph must scale surviving
  // activations by 1/(1-p); check against finite differences on the input only
  Rng rng(8);
  EncoderParams<T> p;
  p.init(4, 2, 2, 3, 4, 0.5, rng);
  Tensor<T> x = randn<T>({1, 3, 4}, rng, 1.0, true);
  auto f = [&]() {
    Rng drng(123);  // identical masks on every invocation
    Tensor<T> y = encoder_forward(x, p, true, drng);
    return sum(mul(y, y));
  };
  auto rep = grad_check<T>(f, {{"x", x}}, 1e-6, 1e-4);
  CHECK(rep.pass);
}
