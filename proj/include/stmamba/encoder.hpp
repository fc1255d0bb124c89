#pragma once

// Pre-norm Mamba encoder: x1 = x + dropout(mamba(norm1(x)));
// out = x1 + ffn(norm2(x1)). Stacked to depth N and shared between the
// variance- and average-pooled streams.

#include "stmamba/ssm.hpp"

namespace stm {

template <class T>
struct EncoderParams {
  int width = 0;
  double dropout_p = 0.3;
  Tensor<T> norm1_g, norm1_b;
  MambaBlockParams<T> mamba;
  Tensor<T> norm2_g, norm2_b;
  Tensor<T> ffn_w1, ffn_b1;  // (r*D, D)
  Tensor<T> ffn_w2, ffn_b2;  // (D, r*D)

  void init(int D, int ffn_ratio, int expand, int d_state, int d_conv, double p, Rng& rng) {
    width = D;
    dropout_p = p;
    norm1_g = Tensor<T>(Shape{D}, T(1), true);
    norm1_b = Tensor<T>(Shape{D}, T(0), true);
    mamba.init(D, expand, d_state, d_conv, rng);
    norm2_g = Tensor<T>(Shape{D}, T(1), true);
    norm2_b = Tensor<T>(Shape{D}, T(0), true);
    const int H = ffn_ratio * D;
    auto fanin = [&](Shape s, int fi) {
      return uniform<T>(s, rng, (T)(-1.0 / std::sqrt((double)fi)), (T)(1.0 / std::sqrt((double)fi)), true);
    };
    ffn_w1 = fanin(Shape{H, D}, D);
    ffn_b1 = fanin(Shape{H}, D);
    ffn_w2 = fanin(Shape{D, H}, H);
    ffn_b2 = fanin(Shape{D}, H);
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".norm1_g", norm1_g, false);
    f(prefix + ".norm1_b", norm1_b, false);
    mamba.visit(prefix + ".mamba", f);
    f(prefix + ".norm2_g", norm2_g, false);
    f(prefix + ".norm2_b", norm2_b, false);
    f(prefix + ".ffn_w1", ffn_w1, true);
    f(prefix + ".ffn_b1", ffn_b1, false);
    f(prefix + ".ffn_w2", ffn_w2, true);
    f(prefix + ".ffn_b2", ffn_b2, false);
  }
};

template <class T>
Tensor<T> encoder_forward(const Tensor<T>& x, EncoderParams<T>& p, bool train, Rng& rng) {
  if (x.dim(-1) != p.width) throw std::invalid_argument("encoder_forward: width mismatch");
  Tensor<T> branch = mamba_block_forward(layer_norm(x, p.norm1_g, p.norm1_b), p.mamba, train);
  Tensor<T> x1 = add(x, dropout(branch, p.dropout_p, train, rng));
  Tensor<T> n2 = layer_norm(x1, p.norm2_g, p.norm2_b);
  Tensor<T> hidden = dropout(elu(linear(n2, p.ffn_w1, &p.ffn_b1)), p.dropout_p, train, rng);
  Tensor<T> ff = linear(hidden, p.ffn_w2, &p.ffn_b2);
  return add(x1, ff);
}

template <class T>
struct EncoderStack {
  std::vector<EncoderParams<T>> layers;

  void init(int depth, int D, int ffn_ratio, int expand, int d_state, int d_conv, double p, Rng& rng) {
    if (depth < 1) throw std::invalid_argument("EncoderStack: depth >= 1");
    layers.resize(depth);
    for (auto& l : layers) l.init(D, ffn_ratio, expand, d_state, d_conv, p, rng);
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    for (size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + ".layer" + std::to_string(i), f);
  }
};

template <class T>
Tensor<T> stack_forward(const Tensor<T>& x, EncoderStack<T>& s, bool train, Rng& rng) {
  Tensor<T> y = x;
  for (auto& l : s.layers) y = encoder_forward(y, l, train, rng);
  return y;
}

// Both streams through the identical parameter set; the variance stream draws
// its dropout masks first.
template <class T>
std::pair<Tensor<T>, Tensor<T>> shared_dual_forward(const Tensor<T>& x_var, const Tensor<T>& x_avg,
                                                    EncoderStack<T>& s, bool train, Rng& rng) {
  require_same_shape(x_var, x_avg, "shared_dual_forward");
  Tensor<T> yv = stack_forward(x_var, s, train, rng);
  Tensor<T> ya = stack_forward(x_avg, s, train, rng);
  return {yv, ya};
}

}  // namespace stm
