#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "stmamba/gradcheck.hpp"
#include "stmamba/ops.hpp"

using namespace stm;
using T = double;

namespace {

// direct O(L*k) convolution oracle, symmetric padding
std::vector<double> conv1d_oracle(const std::vector<double>& x, const std::vector<double>& k, int pad) {
  const int L = (int)x.size(), K = (int)k.size();
  std::vector<double> y(L + 2 * pad - K + 1, 0.0);
  for (size_t o = 0; o < y.size(); ++o)
    for (int j = 0; j < K; ++j) {
      const int t = (int)o + j - pad;
      if (t >= 0 && t < L) y[o] += k[j] * x[t];
    }
  return y;
}

}  // namespace

TEST_CASE("conv2d basic examples") {
  Tensor<T> x = Tensor<T>::from({1, 1, 1, 4}, {1, 1, 1, 1});
  Tensor<T> w = Tensor<T>::from({1, 1, 1, 2}, {1, 1});
  Tensor<T> y = conv2d<T>(x, w, nullptr, 0, 0);
  REQUIRE(y.shape == Shape{1, 1, 1, 3});
  for (int i = 0; i < 3; ++i) CHECK(y.ptr()[i] == doctest::Approx(2.0));
}

TEST_CASE("conv2d delta input matches direct loop oracle under same padding") {
  std::vector<double> xs(8, 0.0);
  xs[0] = 1.0;  // delta at t=0
  std::vector<double> ks = {0.3, -1.2, 0.7};
  Tensor<T> x = Tensor<T>::from({1, 1, 1, 8}, std::vector<T>(xs.begin(), xs.end()));
  Tensor<T> w = Tensor<T>::from({1, 1, 1, 3}, std::vector<T>(ks.begin(), ks.end()));
  Tensor<T> y = conv2d<T>(x, w, nullptr, 0, 1);
  auto ref = conv1d_oracle(xs, ks, 1);
  REQUIRE(y.size() == (int64_t)ref.size());
  for (size_t i = 0; i < ref.size(); ++i) CHECK(y.ptr()[i] == doctest::Approx(ref[i]));
  // delta response: kernel appears (reversed cross-correlation window) at t in {0,1}
  CHECK(y.ptr()[0] == doctest::Approx(ks[1]));
  CHECK(y.ptr()[1] == doctest::Approx(ks[0]));
}

TEST_CASE("conv2d rejects non-integer output extents and shape mismatch") {
  Tensor<T> x(Shape{1, 1, 1, 5});
  Tensor<T> w(Shape{1, 1, 1, 2});
  CHECK_THROWS_AS(conv2d<T>(x, w, nullptr, 0, 0, 1, 2), std::invalid_argument);
  Tensor<T> w2(Shape{1, 2, 1, 2});
  CHECK_THROWS_AS(conv2d<T>(x, w2, nullptr, 0, 0), std::invalid_argument);
}

TEST_CASE("conv2d weight gradient matches finite differences") {
  Rng rng(3);
  Tensor<T> x = randn<T>({2, 2, 3, 6}, rng, 1.0, true);
  Tensor<T> w = randn<T>({3, 2, 2, 3}, rng, 0.5, true);
  Tensor<T> b = randn<T>({3}, rng, 0.5, true);
  auto f = [&]() { return sum(conv2d<T>(x, w, &b, 1, 1)); };
  auto rep = grad_check<T>(f, {{"w", w}, {"x", x}, {"b", b}}, 1e-5, 1e-4);
  CHECK(rep.pass);
}

TEST_CASE("causal depthwise conv: delta kernel is identity, shifted kernel is delay") {
  Rng rng(5);
  Tensor<T> x = randn<T>({1, 2, 10}, rng);
  Tensor<T> wid = Tensor<T>::from({2, 4}, {0, 0, 0, 1, 0, 0, 0, 1});
  Tensor<T> y = causal_conv1d_depthwise(x, wid);
  for (int64_t i = 0; i < x.size(); ++i) CHECK(y.ptr()[i] == doctest::Approx(x.ptr()[i]));

  Tensor<T> wdel = Tensor<T>::from({2, 4}, {1, 0, 0, 0, 1, 0, 0, 0});
  Tensor<T> yd = causal_conv1d_depthwise(x, wdel);
  for (int d = 0; d < 2; ++d)
    for (int t = 0; t < 10; ++t) {
      const double expect = t >= 3 ? x.ptr()[d * 10 + t - 3] : 0.0;
      CHECK(yd.ptr()[d * 10 + t] == doctest::Approx(expect));
    }
}

TEST_CASE("causal depthwise conv equals zero-padded full convolution truncated to L") {
  Rng rng(11);
  const int L = 16, k = 4;
  Tensor<T> x = randn<T>({1, 1, L}, rng);
  Tensor<T> w = randn<T>({1, k}, rng);
  Tensor<T> y = causal_conv1d_depthwise(x, w);
  // naive padded convolution oracle: pad left with k-1 zeros
  for (int t = 0; t < L; ++t) {
    double acc = 0;
    for (int j = 0; j < k; ++j) {
      const int src = t - (k - 1) + j;
      if (src >= 0) acc += w.ptr()[j] * x.ptr()[src];
    }
    CHECK(y.ptr()[t] == doctest::Approx(acc));
  }
}

TEST_CASE("causal conv rejects channel mismatch") {
  Tensor<T> x(Shape{1, 2, 8});
  Tensor<T> w(Shape{3, 4});
  CHECK_THROWS_AS(causal_conv1d_depthwise(x, w), std::invalid_argument);
}

TEST_CASE("batch_norm train mode normalizes, affine contract holds") {
  Rng rng(9);
  const int B = 8, C = 3, L = 50;
  Tensor<T> x(Shape{B, C, L});
  std::normal_distribution<double> d(5.0, 2.0);
  for (int64_t i = 0; i < x.size(); ++i) x.ptr()[i] = d(rng);
  Tensor<T> g(Shape{C}, 1.0), b(Shape{C}, 0.0);
  BatchNormState<T> st;
  Tensor<T> y = batch_norm(x, g, b, st, true);
  for (int c = 0; c < C; ++c) {
    double s = 0, s2 = 0;
    for (int n = 0; n < B; ++n)
      for (int t = 0; t < L; ++t) {
        const T v = y.ptr()[((int64_t)n * C + c) * L + t];
        s += v;
        s2 += v * v;
      }
    const double m = s / (B * L), var = s2 / (B * L) - m * m;
    CHECK(std::abs(m) < 1e-6);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }

  // gamma=2, beta=3 on a standardized channel
  Tensor<T> g2(Shape{C}, 2.0), b2(Shape{C}, 3.0);
  BatchNormState<T> st2;
  Tensor<T> y2 = batch_norm(x, g2, b2, st2, true);
  double s = 0, s2sum = 0;
  for (int n = 0; n < B; ++n)
    for (int t = 0; t < L; ++t) {
      const T v = y2.ptr()[((int64_t)n * C + 0) * L + t];
      s += v;
      s2sum += v * v;
    }
  const double m = s / (B * L);
  CHECK(m == doctest::Approx(3.0).epsilon(1e-6));
  CHECK(std::sqrt(s2sum / (B * L) - m * m) == doctest::Approx(2.0).epsilon(1e-4));
}

TEST_CASE("batch_norm constant input maps to zero; infer before stats errors") {
  Tensor<T> x(Shape{4, 2, 3}, 7.0);
  Tensor<T> g(Shape{2}, 1.0), b(Shape{2}, 0.0);
  BatchNormState<T> st;
  Tensor<T> y = batch_norm(x, g, b, st, true);
  for (int64_t i = 0; i < y.size(); ++i) CHECK(y.ptr()[i] == doctest::Approx(0.0));

  BatchNormState<T> fresh;
  CHECK_THROWS_AS(batch_norm(x, g, b, fresh, false), std::runtime_error);
}

TEST_CASE("layer_norm examples and gradient") {
  Tensor<T> g(Shape{3}, 1.0), b(Shape{3}, 0.0);
  Tensor<T> x = Tensor<T>::from({1, 3}, {1, 1, 1});
  Tensor<T> y = layer_norm(x, g, b);
  for (int i = 0; i < 3; ++i) CHECK(y.ptr()[i] == doctest::Approx(0.0));

  Tensor<T> g2(Shape{2}, 1.0), b2(Shape{2}, 0.0);
  Tensor<T> x2 = Tensor<T>::from({1, 2}, {0, 2});
  Tensor<T> y2 = layer_norm(x2, g2, b2);
  CHECK(y2.ptr()[0] == doctest::Approx(-1.0).epsilon(1e-4));
  CHECK(y2.ptr()[1] == doctest::Approx(1.0).epsilon(1e-4));

  Rng rng(21);
  Tensor<T> xr = randn<T>({3, 5}, rng, 1.0, true);
  Tensor<T> gr = randn<T>({5}, rng, 0.3, true);
  Tensor<T> br = randn<T>({5}, rng, 0.3, true);
  auto f = [&]() { return sum(mul(layer_norm(xr, gr, br), layer_norm(xr, gr, br))); };
  auto rep = grad_check<T>(f, {{"x", xr}, {"g", gr}, {"b", br}}, 1e-6, 1e-4);
  CHECK(rep.pass);
}

TEST_CASE("activation definitions and limits") {
  Tensor<T> x = Tensor<T>::from({3}, {0.0, 1.0, -40.0});
  Tensor<T> y = elu(x);
  CHECK(y.ptr()[0] == doctest::Approx(0.0));
  CHECK(y.ptr()[1] == doctest::Approx(1.0));
  CHECK(y.ptr()[2] == doctest::Approx(-1.0).epsilon(1e-12));

  Tensor<T> a(Shape{1, 4}, 3.7);
  Tensor<T> sm = softmax(a, 1);
  for (int i = 0; i < 4; ++i) CHECK(sm.ptr()[i] == doctest::Approx(0.25));

  Rng rng(2);
  Tensor<T> xr = randn<T>({20}, rng, 2.0, true);
  auto f = [&]() { return sum(mul(silu(xr), silu(xr))); };
  auto rep = grad_check<T>(f, {{"x", xr}}, 1e-6, 1e-6);
  CHECK(rep.pass);
}

TEST_CASE("softmax rows sum to 1; ELU monotone on a grid") {
  Rng rng(4);
  Tensor<T> x = randn<T>({5, 7}, rng, 3.0);
  Tensor<T> y = softmax(x, 1);
  for (int r = 0; r < 5; ++r) {
    double s = 0;
    for (int c = 0; c < 7; ++c) s += y.ptr()[r * 7 + c];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-6));
  }
  Tensor<T> grid(Shape{201});
  for (int i = 0; i < 201; ++i) grid.ptr()[i] = -5.0 + 0.05 * i;
  Tensor<T> eg = elu(grid);
  for (int i = 1; i < 201; ++i) CHECK(eg.ptr()[i] > eg.ptr()[i - 1]);
}

TEST_CASE("sliding pooling hand examples and invariances") {
  Tensor<T> c(Shape{1, 1, 1, 8}, 4.2);
  Tensor<T> ca = sliding_pool(PoolKind::Avg, c, 4, 2);
  Tensor<T> cv = sliding_pool(PoolKind::Var, c, 4, 2);
  for (int64_t i = 0; i < ca.size(); ++i) {
    CHECK(ca.ptr()[i] == doctest::Approx(4.2));
    CHECK(cv.ptr()[i] == doctest::Approx(0.0));
  }

  Tensor<T> x = Tensor<T>::from({1, 1, 1, 4}, {1, 2, 3, 4});
  Tensor<T> av = sliding_pool(PoolKind::Avg, x, 2, 2);
  Tensor<T> vv = sliding_pool(PoolKind::Var, x, 2, 2);
  CHECK(av.ptr()[0] == doctest::Approx(1.5));
  CHECK(av.ptr()[1] == doctest::Approx(3.5));
  CHECK(vv.ptr()[0] == doctest::Approx(0.25));
  CHECK(vv.ptr()[1] == doctest::Approx(0.25));

  // translation invariance of the variance pool
  Rng rng(8);
  Tensor<T> r = randn<T>({1, 2, 1, 90}, rng);
  Tensor<T> shifted = r.clone();
  for (int64_t i = 0; i < shifted.size(); ++i) shifted.ptr()[i] += 13.7;
  Tensor<T> v1 = sliding_pool(PoolKind::Var, r, 75, 15);
  Tensor<T> v2 = sliding_pool(PoolKind::Var, shifted, 75, 15);
  for (int64_t i = 0; i < v1.size(); ++i) CHECK(v1.ptr()[i] == doctest::Approx(v2.ptr()[i]).epsilon(1e-5));
}

TEST_CASE("sliding var pool matches direct two-pass variance") {
  Rng rng(13);
  Tensor<T> x = randn<T>({1, 1, 1, 165}, rng);
  Tensor<T> v = sliding_pool(PoolKind::Var, x, 75, 15);
  REQUIRE(v.dim(3) == 7);
  for (int o = 0; o < 7; ++o) {
    const T* p = x.ptr() + o * 15;
    double m = 0;
    for (int i = 0; i < 75; ++i) m += p[i];
    m /= 75;
    double var = 0;
    for (int i = 0; i < 75; ++i) var += (p[i] - m) * (p[i] - m);
    var /= 75;
    CHECK(v.ptr()[o] == doctest::Approx(var).epsilon(1e-5));
  }
}

TEST_CASE("linear examples and gradient") {
  Tensor<T> x = Tensor<T>::from({1, 2}, {1, 1});
  Tensor<T> w = Tensor<T>::from({2, 2}, {1, 2, 3, 4});
  Tensor<T> b = Tensor<T>::from({2}, {0, 1});
  Tensor<T> y = linear(x, w, &b);
  CHECK(y.ptr()[0] == doctest::Approx(3.0));
  CHECK(y.ptr()[1] == doctest::Approx(8.0));

  Tensor<T> eye = Tensor<T>::from({2, 2}, {1, 0, 0, 1});
  Tensor<T> z(Shape{2}, 0.0);
  Tensor<T> id = linear(x, eye, &z);
  CHECK(id.ptr()[0] == doctest::Approx(1.0));
  CHECK(id.ptr()[1] == doctest::Approx(1.0));

  Rng rng(6);
  Tensor<T> xr = randn<T>({3, 4}, rng, 1.0, true);
  Tensor<T> wr = randn<T>({5, 4}, rng, 1.0, true);
  Tensor<T> br = randn<T>({5}, rng, 1.0, true);
  auto f = [&]() { return sum(mul(linear(xr, wr, &br), linear(xr, wr, &br))); };
  auto rep = grad_check<T>(f, {{"x", xr}, {"w", wr}, {"b", br}}, 1e-5, 1e-4);
  CHECK(rep.pass);
}

TEST_CASE("dropout contract") {
  Rng rng(17);
  Tensor<T> x = randn<T>({4000}, rng);
  Rng drng(1);
  Tensor<T> y0 = dropout(x, 0.0, true, drng);
  for (int64_t i = 0; i < x.size(); ++i) CHECK(y0.ptr()[i] == x.ptr()[i]);
  Tensor<T> yi = dropout(x, 0.5, false, drng);
  for (int64_t i = 0; i < x.size(); ++i) CHECK(yi.ptr()[i] == x.ptr()[i]);
  CHECK_THROWS_AS(dropout(x, 1.0, true, drng), std::invalid_argument);

  Tensor<T> ones(Shape{4000}, 1.0);
  Rng drng2(42);
  Tensor<T> yh = dropout(ones, 0.5, true, drng2);
  double s = 0;
  int zeroed = 0;
  for (int64_t i = 0; i < yh.size(); ++i) {
    s += yh.ptr()[i];
    zeroed += yh.ptr()[i] == 0.0;
  }
  CHECK(s / 4000 == doctest::Approx(1.0).epsilon(0.02));
  CHECK((double)zeroed / 4000 == doctest::Approx(0.5).epsilon(0.04));
}

TEST_CASE("backward basics") {
  Rng rng(1);
  Tensor<T> x = randn<T>({10}, rng, 1.0, true);
  {
    typename Tape<T>::Scope scope;
    Tensor<T> loss = sum(x);
    scope.tape.backward(loss);
    for (int64_t i = 0; i < x.size(); ++i) CHECK(x.gptr()[i] == doctest::Approx(1.0));
    CHECK_THROWS_AS(scope.tape.backward(loss), std::runtime_error);
  }
  x.zero_grad();
  {
    typename Tape<T>::Scope scope;
    Tensor<T> loss = sum(mul(x, x));
    scope.tape.backward(loss);
    for (int64_t i = 0; i < x.size(); ++i) CHECK(x.gptr()[i] == doctest::Approx(2.0 * x.ptr()[i]));
  }
  {
    typename Tape<T>::Scope scope;
    Tensor<T> v = mul(x, x);
    CHECK_THROWS_AS(scope.tape.backward(v), std::invalid_argument);  // non-scalar loss
  }
}

TEST_CASE("grad_check negative control: corrupted backward fails") {
  Rng rng(19);
  Tensor<T> x = randn<T>({3, 4}, rng, 1.0, true);
  Tensor<T> w = randn<T>({2, 4}, rng, 1.0, true);
  auto f = [&]() { return sum(mul(linear<T>(x, w), linear<T>(x, w))); };
  auto clean = grad_check<T>(f, {{"w", w}}, 1e-6, 1e-6);
  CHECK(clean.pass);
  fault_injection() = true;
  auto dirty = grad_check<T>(f, {{"w", w}}, 1e-6, 1e-6);
  fault_injection() = false;
  CHECK_FALSE(dirty.pass);
}

TEST_CASE("linearity of conv, causal conv and linear in the input argument") {
  Rng rng(23);
  Tensor<T> x1 = randn<T>({1, 2, 3, 8}, rng);
  Tensor<T> x2 = randn<T>({1, 2, 3, 8}, rng);
  Tensor<T> w = randn<T>({2, 2, 2, 3}, rng);
  const T a = 1.7, b = -0.4;
  Tensor<T> combo(Shape{1, 2, 3, 8});
  for (int64_t i = 0; i < combo.size(); ++i) combo.ptr()[i] = a * x1.ptr()[i] + b * x2.ptr()[i];
  Tensor<T> lhs = conv2d<T>(combo, w, nullptr, 0, 1);
  Tensor<T> r1 = conv2d<T>(x1, w, nullptr, 0, 1);
  Tensor<T> r2 = conv2d<T>(x2, w, nullptr, 0, 1);
  for (int64_t i = 0; i < lhs.size(); ++i)
    CHECK(lhs.ptr()[i] == doctest::Approx(a * r1.ptr()[i] + b * r2.ptr()[i]).epsilon(1e-5));
}

TEST_CASE("shape algebra property: conv2d output extents follow the formula") {
  Rng rng(29);
  std::uniform_int_distribution<int> di(1, 4);
  for (int it = 0; it < 30; ++it) {
    const int B = di(rng), Ci = di(rng), kh = di(rng), kw = di(rng);
    const int ph = di(rng) - 1, pw = di(rng) - 1, sh = di(rng), sw = di(rng);
    std::uniform_int_distribution<int> dh(kh, kh + 9);
    // choose H,W so the stride divides exactly
    int H = dh(rng), W = dh(rng);
    H = kh + ((H + 2 * ph - kh) / sh) * sh - 2 * ph;
    W = kw + ((W + 2 * pw - kw) / sw) * sw - 2 * pw;
    if (H < 1 || W < 1) continue;
    Tensor<T> x = randn<T>({B, Ci, H, W}, rng);
    Tensor<T> w = randn<T>({2, Ci, kh, kw}, rng);
    Tensor<T> y = conv2d<T>(x, w, nullptr, ph, pw, sh, sw);
    CHECK(y.dim(2) == (H + 2 * ph - kh) / sh + 1);
    CHECK(y.dim(3) == (W + 2 * pw - kw) / sw + 1);
  }
}

TEST_CASE("finite checks flag NaN-producing ops") {
  Tensor<T> x = Tensor<T>::from({2}, {1.0, std::numeric_limits<T>::max()});
  CHECK_THROWS_AS(mul(x, x), std::runtime_error);
}
