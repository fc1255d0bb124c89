#pragma once

// Embedding pipeline: six parallel temporal conv branches with increasing
// kernel sizes, concat, batch norm, spatial conv collapsing the electrode
// axis, batch norm, ELU, then dual variance/average sliding pooling.

#include "stmamba/ops.hpp"

namespace stm {

struct EmbeddingConfig {
  int n_electrodes = 22;
  std::vector<int> kernels = {15, 25, 35, 45, 55, 65};  // strictly increasing, odd
  int f1 = 4;            // filters per temporal branch
  int c_prime = 32;      // spatial conv output channels (model width)
  int pool_window = 75;
  int pool_stride = 15;

  int n_branch_channels() const { return f1 * (int)kernels.size(); }
  int pooled_length(int L) const {
    if ((L - pool_window) % pool_stride)
      throw std::invalid_argument("embedding: (L - window) not divisible by stride");
    return (L - pool_window) / pool_stride + 1;
  }
  void validate() const {
    for (size_t i = 0; i < kernels.size(); ++i) {
      if (kernels[i] % 2 == 0) throw std::invalid_argument("embedding: kernel lengths must be odd");
      if (i && kernels[i] <= kernels[i - 1])
        throw std::invalid_argument("embedding: kernel lengths must be strictly increasing");
    }
  }
};

template <class T>
struct EmbeddingParams {
  EmbeddingConfig cfg;
  std::vector<Tensor<T>> tconv_w;  // each (F1, 1, 1, k_i), no bias (bn follows)
  Tensor<T> bn1_g, bn1_b;
  BatchNormState<T> bn1_state;
  Tensor<T> sconv_w;               // (C', 6*F1, C, 1), no bias
  Tensor<T> bn2_g, bn2_b;
  BatchNormState<T> bn2_state;

  void init(const EmbeddingConfig& c, Rng& rng) {
    c.validate();
    cfg = c;
    tconv_w.clear();
    for (int k : cfg.kernels) {
      const int fi = k;
      tconv_w.push_back(uniform<T>(Shape{cfg.f1, 1, 1, k}, rng, (T)(-1.0 / std::sqrt((double)fi)),
                                   (T)(1.0 / std::sqrt((double)fi)), true));
    }
    const int cc = cfg.n_branch_channels();
    bn1_g = Tensor<T>(Shape{cc}, T(1), true);
    bn1_b = Tensor<T>(Shape{cc}, T(0), true);
    bn1_state = {};
    const int fi = cc * cfg.n_electrodes;
    sconv_w = uniform<T>(Shape{cfg.c_prime, cc, cfg.n_electrodes, 1}, rng,
                         (T)(-1.0 / std::sqrt((double)fi)), (T)(1.0 / std::sqrt((double)fi)), true);
    bn2_g = Tensor<T>(Shape{cfg.c_prime}, T(1), true);
    bn2_b = Tensor<T>(Shape{cfg.c_prime}, T(0), true);
    bn2_state = {};
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (size_t i = 0; i < tconv_w.size(); ++i) f(prefix + ".tconv" + std::to_string(i) + "_w", tconv_w[i], true);
    f(prefix + ".bn1_g", bn1_g, false);
    f(prefix + ".bn1_b", bn1_b, false);
    f(prefix + ".sconv_w", sconv_w, true);
    f(prefix + ".bn2_g", bn2_g, false);
    f(prefix + ".bn2_b", bn2_b, false);
  }
};

template <class T>
struct EmbeddedPair {
  Tensor<T> x_var;  // (B, L', C')
  Tensor<T> x_avg;  // (B, L', C')
};

template <class T>
Tensor<T> concat_branches(const std::vector<Tensor<T>>& branches) {
  return concat(branches, 1);
}

template <class T>
EmbeddedPair<T> embed_forward(const Tensor<T>& x, EmbeddingParams<T>& p, bool train) {
  if (x.ndim() != 3) throw std::invalid_argument("embed_forward: need (B,C,L)");
  const int B = x.dim(0), C = x.dim(1), L = x.dim(2);
  if (C != p.cfg.n_electrodes)
    throw std::invalid_argument("embed_forward: electrode count mismatch (" + std::to_string(C) +
                                " vs configured " + std::to_string(p.cfg.n_electrodes) + ")");
  if (L < p.cfg.kernels.back() || L < p.cfg.pool_window)
    throw std::invalid_argument("embed_forward: trial too short for kernels/pooling");

  Tensor<T> x4 = x.reshaped(Shape{B, 1, C, L});
  std::vector<Tensor<T>> branches;
  for (size_t i = 0; i < p.tconv_w.size(); ++i) {
    const int k = p.cfg.kernels[i];
    branches.push_back(conv2d<T>(x4, p.tconv_w[i], nullptr, 0, (k - 1) / 2));  // same pad along time
  }
  Tensor<T> xc = concat_branches(branches);                                    // (B, 6F1, C, L)
  Tensor<T> xb1 = batch_norm(xc, p.bn1_g, p.bn1_b, p.bn1_state, train);
  Tensor<T> xs = conv2d<T>(xb1, p.sconv_w, nullptr, 0, 0);                     // (B, C', 1, L)
  Tensor<T> xb2 = batch_norm(xs, p.bn2_g, p.bn2_b, p.bn2_state, train);
  Tensor<T> xe = elu(xb2);
  Tensor<T> xv = sliding_pool(PoolKind::Var, xe, p.cfg.pool_window, p.cfg.pool_stride);
  Tensor<T> xa = sliding_pool(PoolKind::Avg, xe, p.cfg.pool_window, p.cfg.pool_stride);
  const int Lp = xv.dim(3);
  EmbeddedPair<T> out;
  out.x_var = transpose_last2(xv.reshaped(Shape{B, p.cfg.c_prime, Lp}));
  out.x_avg = transpose_last2(xa.reshaped(Shape{B, p.cfg.c_prime, Lp}));
  return out;
}

}  // namespace stm
