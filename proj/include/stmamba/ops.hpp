#pragma once

// Layer-level operations: linear, convolutions, normalization, activations,
// sliding pooling, dropout, softmax and cross-entropy. GEMM-heavy paths go
// through Eigen.

#include <Eigen/Dense>

#include "stmamba/tensor.hpp"

namespace stm {

template <class T>
using MatRM = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapM = Eigen::Map<MatRM<T>>;
template <class T>
using MapCM = Eigen::Map<const MatRM<T>>;

// ---- linear: x (..., Din) * w(Dout, Din)^T + b(Dout) ----

template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b = nullptr) {
  if (w.ndim() != 2) throw std::invalid_argument("linear: weight must be 2-d");
  const int din = w.dim(1), dout = w.dim(0);
  if (x.dim(-1) != din)
    throw std::invalid_argument("linear: inner dimension mismatch " + shape_str(x.shape) + " vs " +
                                shape_str(w.shape));
  if (b && (b->ndim() != 1 || b->dim(0) != dout)) throw std::invalid_argument("linear: bias shape");
  const int64_t rows = x.size() / din;
  Shape os = x.shape;
  os.back() = dout;
  Tensor<T> y(os);
  {
    MapCM<T> X(x.ptr(), rows, din);
    MapCM<T> W(w.ptr(), dout, din);
    MapM<T> Y(y.ptr(), rows, dout);
    Y.noalias() = X * W.transpose();
    if (b) Y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b->ptr(), dout);
  }
  check_finite(y, "linear");
  bool rg = b ? tracing<T>({&x, &w, b}) : tracing<T>({&x, &w});
  if (rg) {
    mark_output(y);
    Tensor<T> bias = b ? *b : Tensor<T>();
    Tape<T>::active()->record([x, w, bias, y, rows, din, dout]() mutable {
      MapCM<T> G(y.gptr(), rows, dout);
      if (x.requires_grad) {
        MapM<T> GX(x.gptr(), rows, din);
        MapCM<T> W(w.ptr(), dout, din);
        GX.noalias() += G * W;
      }
      if (w.requires_grad) {
        MapM<T> GW(w.gptr(), dout, din);
        MapCM<T> X(x.ptr(), rows, din);
        if (fault_injection())
          GW.noalias() += (G.transpose() * X) * T(1.01);
        else
          GW.noalias() += G.transpose() * X;
      }
      if (bias.defined() && bias.requires_grad) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> GB(bias.gptr(), dout);
        GB += G.colwise().sum();
      }
    });
  }
  return y;
}

// ---- conv2d: x (B,Ci,H,W), w (Co,Ci,kh,kw); cross-correlation ----
// Output extents must divide exactly; a non-integer extent is an error.

namespace detail {

template <class T>
void im2col(const T* src, int ci, int h, int w, int kh, int kw, int ph, int pw, int sh, int sw,
            int ho, int wo, T* col) {
  // col is (ci*kh*kw) x (ho*wo)
  for (int c = 0; c < ci; ++c)
    for (int a = 0; a < kh; ++a)
      for (int b = 0; b < kw; ++b) {
        T* row = col + (((int64_t)c * kh + a) * kw + b) * ho * wo;
        for (int i = 0; i < ho; ++i) {
          const int yi = i * sh + a - ph;
          if (yi < 0 || yi >= h) {
            std::fill_n(row + (int64_t)i * wo, wo, T(0));
            continue;
          }
          const T* srow = src + ((int64_t)c * h + yi) * w;
          for (int j = 0; j < wo; ++j) {
            const int xj = j * sw + b - pw;
            row[(int64_t)i * wo + j] = (xj >= 0 && xj < w) ? srow[xj] : T(0);
          }
        }
      }
}

template <class T>
void col2im(const T* col, int ci, int h, int w, int kh, int kw, int ph, int pw, int sh, int sw,
            int ho, int wo, T* dst) {
  for (int c = 0; c < ci; ++c)
    for (int a = 0; a < kh; ++a)
      for (int b = 0; b < kw; ++b) {
        const T* row = col + (((int64_t)c * kh + a) * kw + b) * ho * wo;
        for (int i = 0; i < ho; ++i) {
          const int yi = i * sh + a - ph;
          if (yi < 0 || yi >= h) continue;
          T* drow = dst + ((int64_t)c * h + yi) * w;
          for (int j = 0; j < wo; ++j) {
            const int xj = j * sw + b - pw;
            if (xj >= 0 && xj < w) drow[xj] += row[(int64_t)i * wo + j];
          }
        }
      }
}

}  // namespace detail

template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b, int pad_h, int pad_w,
                 int stride_h = 1, int stride_w = 1) {
  if (x.ndim() != 4 || w.ndim() != 4) throw std::invalid_argument("conv2d: need 4-d input and weight");
  const int B = x.dim(0), Ci = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Co = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != Ci) throw std::invalid_argument("conv2d: channel mismatch");
  if (kh > H + 2 * pad_h || kw > W + 2 * pad_w) throw std::invalid_argument("conv2d: kernel exceeds padded input");
  if ((H + 2 * pad_h - kh) % stride_h || (W + 2 * pad_w - kw) % stride_w)
    throw std::invalid_argument("conv2d: non-integer output extent");
  const int Ho = (H + 2 * pad_h - kh) / stride_h + 1;
  const int Wo = (W + 2 * pad_w - kw) / stride_w + 1;
  if (b && (b->ndim() != 1 || b->dim(0) != Co)) throw std::invalid_argument("conv2d: bias shape");

  Tensor<T> y(Shape{B, Co, Ho, Wo});
  const int K = Ci * kh * kw;
  const int64_t P = (int64_t)Ho * Wo;
  std::vector<T> col((size_t)K * P);
  MapCM<T> Wm(w.ptr(), Co, K);
  for (int n = 0; n < B; ++n) {
    detail::im2col(x.ptr() + (int64_t)n * Ci * H * W, Ci, H, W, kh, kw, pad_h, pad_w, stride_h, stride_w,
                   Ho, Wo, col.data());
    MapCM<T> C(col.data(), K, P);
    MapM<T> Y(y.ptr() + (int64_t)n * Co * P, Co, P);
    Y.noalias() = Wm * C;
    if (b)
      for (int c = 0; c < Co; ++c) Y.row(c).array() += b->ptr()[c];
  }
  check_finite(y, "conv2d");
  bool rg = b ? tracing<T>({&x, &w, b}) : tracing<T>({&x, &w});
  if (rg) {
    mark_output(y);
    Tensor<T> bias = b ? *b : Tensor<T>();
    Tape<T>::active()->record(
        [x, w, bias, y, B, Ci, H, W, Co, kh, kw, pad_h, pad_w, stride_h, stride_w, Ho, Wo, K, P]() mutable {
          std::vector<T> col((size_t)K * P);
          MapCM<T> Wm(w.ptr(), Co, K);
          for (int n = 0; n < B; ++n) {
            MapCM<T> G(y.gptr() + (int64_t)n * Co * P, Co, P);
            if (w.requires_grad || bias.defined()) {
              detail::im2col(x.ptr() + (int64_t)n * Ci * H * W, Ci, H, W, kh, kw, pad_h, pad_w,
                             stride_h, stride_w, Ho, Wo, col.data());
              if (w.requires_grad) {
                MapCM<T> C(col.data(), K, P);
                MapM<T> GW(w.gptr(), Co, K);
                GW.noalias() += G * C.transpose();
              }
              if (bias.defined() && bias.requires_grad)
                for (int c = 0; c < Co; ++c) bias.gptr()[c] += G.row(c).sum();
            }
            if (x.requires_grad) {
              MapM<T> C(col.data(), K, P);
              C.noalias() = Wm.transpose() * G;
              detail::col2im(col.data(), Ci, H, W, kh, kw, pad_h, pad_w, stride_h, stride_w, Ho, Wo,
                             x.gptr() + (int64_t)n * Ci * H * W);
            }
          }
        });
  }
  return y;
}

// ---- causal depthwise 1-d conv: x (B,D,L), w (D,k); left pad k-1 zeros ----

template <class T>
Tensor<T> causal_conv1d_depthwise(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>* b = nullptr) {
  if (x.ndim() != 3 || w.ndim() != 2) throw std::invalid_argument("causal_conv1d: need (B,D,L) and (D,k)");
  const int B = x.dim(0), D = x.dim(1), L = x.dim(2), k = w.dim(1);
  if (w.dim(0) != D) throw std::invalid_argument("causal_conv1d: channel count mismatch between x and w");
  if (k < 1) throw std::invalid_argument("causal_conv1d: k >= 1 required");
  Tensor<T> y(x.shape);
  for (int n = 0; n < B; ++n)
    for (int d = 0; d < D; ++d) {
      const T* xs = x.ptr() + ((int64_t)n * D + d) * L;
      const T* ws = w.ptr() + (int64_t)d * k;
      T* ys = y.ptr() + ((int64_t)n * D + d) * L;
      for (int t = 0; t < L; ++t) {
        T acc = b ? b->ptr()[d] : T(0);
        const int j0 = std::max(0, (k - 1) - t);
        for (int j = j0; j < k; ++j) acc += ws[j] * xs[t - (k - 1) + j];
        ys[t] = acc;
      }
    }
  check_finite(y, "causal_conv1d");
  bool rg = b ? tracing<T>({&x, &w, b}) : tracing<T>({&x, &w});
  if (rg) {
    mark_output(y);
    Tensor<T> bias = b ? *b : Tensor<T>();
    Tape<T>::active()->record([x, w, bias, y, B, D, L, k]() mutable {
      for (int n = 0; n < B; ++n)
        for (int d = 0; d < D; ++d) {
          const T* xs = x.ptr() + ((int64_t)n * D + d) * L;
          const T* ws = w.ptr() + (int64_t)d * k;
          const T* g = y.gptr() + ((int64_t)n * D + d) * L;
          T* gx = x.requires_grad ? x.gptr() + ((int64_t)n * D + d) * L : nullptr;
          T* gw = w.requires_grad ? w.gptr() + (int64_t)d * k : nullptr;
          for (int t = 0; t < L; ++t) {
            const int j0 = std::max(0, (k - 1) - t);
            for (int j = j0; j < k; ++j) {
              if (gx) gx[t - (k - 1) + j] += g[t] * ws[j];
              if (gw) gw[j] += g[t] * xs[t - (k - 1) + j];
            }
            if (bias.defined() && bias.requires_grad) bias.gptr()[d] += g[t];
          }
        }
    });
  }
  return y;
}

// ---- batch norm over channel axis 1 of (B,C,spatial...) ----

template <class T>
struct BatchNormState {
  std::vector<T> running_mean, running_var;
  bool initialized = false;
};

template <class T>
Tensor<T> batch_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     BatchNormState<T>& state, bool train, T eps = T(1e-5), T momentum = T(0.1)) {
  if (x.ndim() < 2) throw std::invalid_argument("batch_norm: need channel axis");
  const int B = x.dim(0), C = x.dim(1);
  const int64_t spatial = x.size() / ((int64_t)B * C);
  const int64_t n = (int64_t)B * spatial;
  if (gamma.size() != C || beta.size() != C) throw std::invalid_argument("batch_norm: affine param shape");
  if (train && n < 2) throw std::invalid_argument("batch_norm: train mode needs batch*spatial >= 2");
  if (!train && !state.initialized)
    throw std::runtime_error("batch_norm: infer mode before any running stats exist");

  if (state.running_mean.empty()) {
    state.running_mean.assign(C, T(0));
    state.running_var.assign(C, T(1));
  }

  std::vector<T> mu(C), var(C);
  if (train) {
    for (int c = 0; c < C; ++c) {
      double s = 0, s2 = 0;
      for (int nb = 0; nb < B; ++nb) {
        const T* p = x.ptr() + ((int64_t)nb * C + c) * spatial;
        for (int64_t i = 0; i < spatial; ++i) {
          s += p[i];
          s2 += (double)p[i] * p[i];
        }
      }
      mu[c] = (T)(s / n);
      var[c] = (T)(s2 / n - (s / n) * (s / n));
      if (var[c] < 0) var[c] = 0;
      state.running_mean[c] = (T(1) - momentum) * state.running_mean[c] + momentum * mu[c];
      // unbiased variance for the running estimate
      T uv = n > 1 ? var[c] * (T)n / (T)(n - 1) : var[c];
      state.running_var[c] = (T(1) - momentum) * state.running_var[c] + momentum * uv;
    }
    state.initialized = true;
  } else {
    mu = state.running_mean;
    var = state.running_var;
  }

  Tensor<T> y(x.shape);
  std::vector<T> istd(C);
  for (int c = 0; c < C; ++c) istd[c] = T(1) / std::sqrt(var[c] + eps);
  for (int nb = 0; nb < B; ++nb)
    for (int c = 0; c < C; ++c) {
      const T* p = x.ptr() + ((int64_t)nb * C + c) * spatial;
      T* q = y.ptr() + ((int64_t)nb * C + c) * spatial;
      const T g = gamma.ptr()[c], bta = beta.ptr()[c], m = mu[c], is = istd[c];
      for (int64_t i = 0; i < spatial; ++i) q[i] = (p[i] - m) * is * g + bta;
    }
  check_finite(y, "batch_norm");

  if (tracing<T>({&x, &gamma, &beta})) {
    mark_output(y);
    Tape<T>::active()->record([x, gamma, beta, y, mu, istd, B, C, spatial, n, train]() mutable {
      // xhat = (x - mu) * istd ; y = gamma*xhat + beta
      for (int c = 0; c < C; ++c) {
        double sg = 0, sgx = 0;
        for (int nb = 0; nb < B; ++nb) {
          const T* p = x.ptr() + ((int64_t)nb * C + c) * spatial;
          const T* g = y.gptr() + ((int64_t)nb * C + c) * spatial;
          for (int64_t i = 0; i < spatial; ++i) {
            const T xh = (p[i] - mu[c]) * istd[c];
            sg += g[i];
            sgx += (double)g[i] * xh;
          }
        }
        if (gamma.requires_grad) gamma.gptr()[c] += (T)sgx;
        if (beta.requires_grad) beta.gptr()[c] += (T)sg;
        if (x.requires_grad) {
          const T gam = gamma.ptr()[c];
          for (int nb = 0; nb < B; ++nb) {
            const T* p = x.ptr() + ((int64_t)nb * C + c) * spatial;
            const T* g = y.gptr() + ((int64_t)nb * C + c) * spatial;
            T* gx = x.gptr() + ((int64_t)nb * C + c) * spatial;
            for (int64_t i = 0; i < spatial; ++i) {
              const T xh = (p[i] - mu[c]) * istd[c];
              if (train)
                gx[i] += gam * istd[c] * (g[i] - (T)(sg / n) - xh * (T)(sgx / n));
              else
                gx[i] += gam * istd[c] * g[i];
            }
          }
        }
      }
    });
  }
  return y;
}

// ---- layer norm over the last axis ----

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const int D = x.dim(-1);
  if (D < 1) throw std::invalid_argument("layer_norm: D >= 1");
  if (gamma.size() != D || beta.size() != D) throw std::invalid_argument("layer_norm: affine param shape");
  const int64_t rows = x.size() / D;
  Tensor<T> y(x.shape);
  std::vector<T> mu(rows), istd(rows);
  for (int64_t r = 0; r < rows; ++r) {
    const T* p = x.ptr() + r * D;
    double s = 0, s2 = 0;
    for (int i = 0; i < D; ++i) {
      s += p[i];
      s2 += (double)p[i] * p[i];
    }
    const double m = s / D;
    double v = s2 / D - m * m;
    if (v < 0) v = 0;
    mu[r] = (T)m;
    istd[r] = (T)(1.0 / std::sqrt(v + (double)eps));
    T* q = y.ptr() + r * D;
    for (int i = 0; i < D; ++i) q[i] = ((p[i] - mu[r]) * istd[r]) * gamma.ptr()[i] + beta.ptr()[i];
  }
  check_finite(y, "layer_norm");
  if (tracing<T>({&x, &gamma, &beta})) {
    mark_output(y);
    Tape<T>::active()->record([x, gamma, beta, y, mu, istd, rows, D]() mutable {
      for (int64_t r = 0; r < rows; ++r) {
        const T* p = x.ptr() + r * D;
        const T* g = y.gptr() + r * D;
        double sg = 0, sgx = 0;
        for (int i = 0; i < D; ++i) {
          const T xh = (p[i] - mu[r]) * istd[r];
          const T gg = g[i] * gamma.ptr()[i];
          sg += gg;
          sgx += (double)gg * xh;
          if (gamma.requires_grad) gamma.gptr()[i] += g[i] * xh;
          if (beta.requires_grad) beta.gptr()[i] += g[i];
        }
        if (x.requires_grad) {
          T* gx = x.gptr() + r * D;
          for (int i = 0; i < D; ++i) {
            const T xh = (p[i] - mu[r]) * istd[r];
            const T gg = g[i] * gamma.ptr()[i];
            gx[i] += istd[r] * (gg - (T)(sg / D) - xh * (T)(sgx / D));
          }
        }
      }
    });
  }
  return y;
}

// ---- elementwise activations ----

namespace detail {

template <class T, class F, class DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df, const char* name) {
  Tensor<T> y(x.shape);
  for (int64_t i = 0; i < x.size(); ++i) y.ptr()[i] = f(x.ptr()[i]);
  check_finite(y, name);
  if (tracing<T>({&x})) {
    mark_output(y);
    Tape<T>::active()->record([x, y, df]() mutable {
      for (int64_t i = 0; i < x.size(); ++i) x.gptr()[i] += y.gptr()[i] * df(x.ptr()[i], y.ptr()[i]);
    });
  }
  return y;
}

}  // namespace detail

template <class T>
Tensor<T> elu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v >= 0 ? v : (T)std::expm1((double)v); },
      [](T v, T yv) { return v >= 0 ? T(1) : yv + T(1); }, "elu");
}

template <class T>
inline T sigmoid_scalar(T v) {
  return v >= 0 ? T(1) / (T(1) + (T)std::exp(-(double)v))
                : (T)(std::exp((double)v) / (1.0 + std::exp((double)v)));
}

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return sigmoid_scalar(v); }, [](T, T yv) { return yv * (T(1) - yv); }, "sigmoid");
}

template <class T>
Tensor<T> silu(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v * sigmoid_scalar(v); },
      [](T v, T) {
        const T s = sigmoid_scalar(v);
        return s + v * s * (T(1) - s);
      },
      "silu");
}

template <class T>
Tensor<T> softplus(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return v > T(20) ? v : (T)std::log1p(std::exp((double)v)); },
      [](T v, T) { return sigmoid_scalar(v); }, "softplus");
}

// y = -exp(x); used for the log-parameterized state matrix.
template <class T>
Tensor<T> negexp(const Tensor<T>& x) {
  return detail::unary(
      x, [](T v) { return -(T)std::exp((double)v); }, [](T, T yv) { return yv; }, "negexp");
}

// ---- softmax along an axis ----

template <class T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  const int nd = x.ndim();
  if (axis < 0) axis += nd;
  int64_t outer = 1, inner = 1;
  const int A = x.shape[axis];
  for (int i = 0; i < axis; ++i) outer *= x.shape[i];
  for (int i = axis + 1; i < nd; ++i) inner *= x.shape[i];
  Tensor<T> y(x.shape);
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t in = 0; in < inner; ++in) {
      const T* p = x.ptr() + o * A * inner + in;
      T* q = y.ptr() + o * A * inner + in;
      T mx = p[0];
      for (int a = 1; a < A; ++a) mx = std::max(mx, p[(int64_t)a * inner]);
      double z = 0;
      for (int a = 0; a < A; ++a) {
        const double e = std::exp((double)(p[(int64_t)a * inner] - mx));
        q[(int64_t)a * inner] = (T)e;
        z += e;
      }
      for (int a = 0; a < A; ++a) q[(int64_t)a * inner] = (T)(q[(int64_t)a * inner] / z);
    }
  check_finite(y, "softmax");
  if (tracing<T>({&x})) {
    mark_output(y);
    Tape<T>::active()->record([x, y, outer, inner, A]() mutable {
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t in = 0; in < inner; ++in) {
          const T* q = y.ptr() + o * A * inner + in;
          const T* g = y.gptr() + o * A * inner + in;
          double dot = 0;
          for (int a = 0; a < A; ++a) dot += (double)g[(int64_t)a * inner] * q[(int64_t)a * inner];
          T* gx = x.gptr() + o * A * inner + in;
          for (int a = 0; a < A; ++a)
            gx[(int64_t)a * inner] += q[(int64_t)a * inner] * (g[(int64_t)a * inner] - (T)dot);
        }
    });
  }
  return y;
}

// ---- sliding avg/var pooling on (B,C,1,L) ----

enum class PoolKind { Avg, Var };

template <class T>
Tensor<T> sliding_pool(PoolKind kind, const Tensor<T>& x, int window, int stride) {
  if (x.ndim() != 4 || x.dim(2) != 1) throw std::invalid_argument("sliding_pool: need (B,C,1,L)");
  const int B = x.dim(0), C = x.dim(1), L = x.dim(3);
  if (window > L) throw std::invalid_argument("sliding_pool: window exceeds length");
  if ((L - window) % stride) throw std::invalid_argument("sliding_pool: non-integer output extent");
  const int Lo = (L - window) / stride + 1;
  Tensor<T> y(Shape{B, C, 1, Lo});
  const int64_t BC = (int64_t)B * C;
  for (int64_t bc = 0; bc < BC; ++bc) {
    const T* p = x.ptr() + bc * L;
    T* q = y.ptr() + bc * Lo;
    for (int o = 0; o < Lo; ++o) {
      const T* wv = p + (int64_t)o * stride;
      double s = 0, s2 = 0;
      bool flat = true;
      for (int i = 0; i < window; ++i) {
        s += wv[i];
        s2 += (double)wv[i] * wv[i];
        flat &= wv[i] == wv[0];
      }
      const double m = s / window;
      if (kind == PoolKind::Avg) {
        q[o] = (T)m;
      } else if (flat) {
        q[o] = T(0);  // a constant window has exactly zero variance
      } else {
        double v = s2 / window - m * m;
        if (v < 0) v = 0;  // mean-of-squares identity can dip below zero
        q[o] = (T)v;
      }
    }
  }
  check_finite(y, "sliding_pool");
  if (tracing<T>({&x})) {
    mark_output(y);
    Tape<T>::active()->record([x, y, kind, window, stride, BC, L, Lo]() mutable {
      const T invw = T(1) / (T)window;
      for (int64_t bc = 0; bc < BC; ++bc) {
        const T* p = x.ptr() + bc * L;
        const T* g = y.gptr() + bc * Lo;
        T* gx = x.gptr() + bc * L;
        for (int o = 0; o < Lo; ++o) {
          const int64_t base = (int64_t)o * stride;
          if (kind == PoolKind::Avg) {
            const T gv = g[o] * invw;
            for (int i = 0; i < window; ++i) gx[base + i] += gv;
          } else {
            double s = 0;
            for (int i = 0; i < window; ++i) s += p[base + i];
            const T m = (T)(s / window);
            const T c = g[o] * T(2) * invw;
            for (int i = 0; i < window; ++i) gx[base + i] += c * (p[base + i] - m);
          }
        }
      }
    });
  }
  return y;
}

// ---- dropout (inverted) ----

template <class T>
Tensor<T> dropout(const Tensor<T>& x, double p, bool train, Rng& rng) {
  if (p < 0 || p >= 1) throw std::invalid_argument("dropout: need 0 <= p < 1");
  if (!train || p == 0) return x;
  Tensor<T> y(x.shape);
  auto mask = std::make_shared<std::vector<uint8_t>>(x.size());
  std::uniform_real_distribution<double> d(0.0, 1.0);
  const T s = T(1.0 / (1.0 - p));
  for (int64_t i = 0; i < x.size(); ++i) {
    const bool keep = d(rng) >= p;
    (*mask)[i] = keep;
    y.ptr()[i] = keep ? x.ptr()[i] * s : T(0);
  }
  if (tracing<T>({&x})) {
    mark_output(y);
    Tape<T>::active()->record([x, y, mask, s]() mutable {
      for (int64_t i = 0; i < x.size(); ++i)
        if ((*mask)[i]) x.gptr()[i] += y.gptr()[i] * s;
    });
  }
  return y;
}

// ---- cross entropy: mean over batch of -log softmax(logits)[label] ----

template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<int>& labels) {
  if (logits.ndim() != 2) throw std::invalid_argument("cross_entropy: logits must be (B,K)");
  const int B = logits.dim(0), K = logits.dim(1);
  if ((int)labels.size() != B) throw std::invalid_argument("cross_entropy: label count mismatch");
  auto probs = std::make_shared<std::vector<T>>((size_t)B * K);
  double loss = 0;
  for (int b = 0; b < B; ++b) {
    if (labels[b] < 0 || labels[b] >= K)
      throw std::invalid_argument("cross_entropy: label out of range at index " + std::to_string(b));
    const T* p = logits.ptr() + (int64_t)b * K;
    T mx = p[0];
    for (int k = 1; k < K; ++k) mx = std::max(mx, p[k]);
    double z = 0;
    for (int k = 0; k < K; ++k) z += std::exp((double)(p[k] - mx));
    const double logz = std::log(z) + mx;
    for (int k = 0; k < K; ++k) (*probs)[(size_t)b * K + k] = (T)std::exp((double)p[k] - logz);
    loss += logz - p[labels[b]];
  }
  Tensor<T> y(Shape{1});
  y.ptr()[0] = (T)(loss / B);
  check_finite(y, "cross_entropy");
  if (tracing<T>({&logits})) {
    mark_output(y);
    auto lab = std::make_shared<std::vector<int>>(labels);
    Tape<T>::active()->record([logits, y, probs, lab, B, K]() mutable {
      const T g = y.gptr()[0] / (T)B;
      for (int b = 0; b < B; ++b) {
        T* gx = logits.gptr() + (int64_t)b * K;
        for (int k = 0; k < K; ++k) gx[k] += g * ((*probs)[(size_t)b * K + k] - (k == (*lab)[b] ? T(1) : T(0)));
      }
    });
  }
  return y;
}

}  // namespace stm
