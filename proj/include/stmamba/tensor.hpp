#pragma once

// Dense tensors with reverse-mode automatic differentiation on a tape.
// Tensors share storage on copy; ops are free functions that record
// backward closures onto the thread-local active tape.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace stm {

using Shape = std::vector<int>;
using Rng = std::mt19937_64;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ")";
  return os.str();
}

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw std::invalid_argument("non-positive extent in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

// Global toggle: verify every op output is finite (NaN/Inf is an error state).
inline bool& finite_checks() {
  static bool on = true;
  return on;
}

// Self-test fault injection: corrupts the linear-layer weight gradient by a
// factor 1.01 so grad_check's negative control has something to catch.
inline bool& fault_injection() {
  static bool on = false;
  return on;
}

template <class T>
class Tensor {
 public:
  Shape shape;
  std::shared_ptr<std::vector<T>> data;
  std::shared_ptr<std::vector<T>> grad;  // allocated iff requires_grad
  bool requires_grad = false;

  Tensor() = default;

  explicit Tensor(Shape s, T fill = T(0), bool rg = false) : shape(std::move(s)) {
    data = std::make_shared<std::vector<T>>(shape_numel(shape), fill);
    set_requires_grad(rg);
  }

  static Tensor from(Shape s, std::vector<T> values, bool rg = false) {
    if ((int64_t)values.size() != shape_numel(s))
      throw std::invalid_argument("value count does not match shape " + shape_str(s));
    Tensor t;
    t.shape = std::move(s);
    t.data = std::make_shared<std::vector<T>>(std::move(values));
    t.set_requires_grad(rg);
    return t;
  }

  bool defined() const { return (bool)data; }
  int64_t size() const { return data ? (int64_t)data->size() : 0; }
  int dim(int i) const { return shape[i < 0 ? (int)shape.size() + i : i]; }
  int ndim() const { return (int)shape.size(); }

  // Storage is shared (shared_ptr), so accessors hand out mutable pointers
  // even through const handles; the recorded backward closures rely on this.
  T* ptr() const { return data->data(); }
  T* gptr() const { return grad->data(); }

  void set_requires_grad(bool rg) {
    requires_grad = rg;
    if (rg && !grad) grad = std::make_shared<std::vector<T>>(data->size(), T(0));
    if (!rg) grad.reset();
  }

  void zero_grad() {
    if (grad) std::fill(grad->begin(), grad->end(), T(0));
  }

  T item() const {
    if (size() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape));
    return (*data)[0];
  }

  // Same storage (data and grad), new shape.
  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != size())
      throw std::invalid_argument("reshape " + shape_str(shape) + " -> " + shape_str(s));
    Tensor t = *this;
    t.shape = std::move(s);
    return t;
  }

  Tensor clone() const {
    Tensor t;
    t.shape = shape;
    t.data = std::make_shared<std::vector<T>>(*data);
    t.set_requires_grad(requires_grad);
    return t;
  }
};

template <class T>
inline void check_finite(const Tensor<T>& t, const char* op) {
  if (!finite_checks()) return;
  for (T v : *t.data)
    if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite value produced by ") + op);
}

// Tape of backward closures, executed in reverse recording order (which is a
// reverse topological order of the forward graph).
template <class T>
class Tape {
 public:
  static Tape*& active() {
    thread_local Tape* cur = nullptr;
    return cur;
  }

  void record(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }
  size_t num_nodes() const { return nodes_.size(); }

  void backward(Tensor<T>& loss) {
    if (loss.size() != 1) throw std::invalid_argument("backward requires a scalar loss");
    if (used_) throw std::runtime_error("backward called twice on the same graph");
    if (!loss.requires_grad) throw std::runtime_error("loss does not require grad (no recorded graph)");
    used_ = true;
    (*loss.grad)[0] = T(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

  struct Scope {
    Tape tape;
    Tape* prev;
    Scope() : prev(active()) { active() = &tape; }
    ~Scope() { active() = prev; }
    Scope(const Scope&) = delete;
  };

 private:
  std::vector<std::function<void()>> nodes_;
  bool used_ = false;
};

template <class T>
inline bool tracing(std::initializer_list<const Tensor<T>*> ins) {
  if (!Tape<T>::active()) return false;
  for (auto* p : ins)
    if (p->requires_grad) return true;
  return false;
}

template <class T>
inline void mark_output(Tensor<T>& y) {
  y.set_requires_grad(true);
}

// ---- basic ops ----

template <class T>
inline void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape != b.shape)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape) + " vs " +
                                shape_str(b.shape));
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  Tensor<T> y(a.shape);
  const T* pa = a.ptr();
  const T* pb = b.ptr();
  T* py = y.ptr();
  for (int64_t i = 0; i < y.size(); ++i) py[i] = pa[i] + pb[i];
  check_finite(y, "add");
  if (tracing<T>({&a, &b})) {
    mark_output(y);
    Tape<T>::active()->record([a, b, y]() mutable {
      const T* g = y.gptr();
      if (a.requires_grad) {
        T* ga = a.gptr();
        for (int64_t i = 0; i < y.size(); ++i) ga[i] += g[i];
      }
      if (b.requires_grad) {
        T* gb = b.gptr();
        for (int64_t i = 0; i < y.size(); ++i) gb[i] += g[i];
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  Tensor<T> y(a.shape);
  for (int64_t i = 0; i < y.size(); ++i) y.ptr()[i] = a.ptr()[i] - b.ptr()[i];
  check_finite(y, "sub");
  if (tracing<T>({&a, &b})) {
    mark_output(y);
    Tape<T>::active()->record([a, b, y]() mutable {
      const T* g = y.gptr();
      if (a.requires_grad)
        for (int64_t i = 0; i < y.size(); ++i) a.gptr()[i] += g[i];
      if (b.requires_grad)
        for (int64_t i = 0; i < y.size(); ++i) b.gptr()[i] -= g[i];
    });
  }
  return y;
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  Tensor<T> y(a.shape);
  for (int64_t i = 0; i < y.size(); ++i) y.ptr()[i] = a.ptr()[i] * b.ptr()[i];
  check_finite(y, "mul");
  if (tracing<T>({&a, &b})) {
    mark_output(y);
    Tape<T>::active()->record([a, b, y]() mutable {
      const T* g = y.gptr();
      if (a.requires_grad)
        for (int64_t i = 0; i < y.size(); ++i) a.gptr()[i] += g[i] * b.ptr()[i];
      if (b.requires_grad)
        for (int64_t i = 0; i < y.size(); ++i) b.gptr()[i] += g[i] * a.ptr()[i];
    });
  }
  return y;
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  Tensor<T> y(a.shape);
  for (int64_t i = 0; i < y.size(); ++i) y.ptr()[i] = a.ptr()[i] * c;
  check_finite(y, "scale");
  if (tracing<T>({&a})) {
    mark_output(y);
    Tape<T>::active()->record([a, y, c]() mutable {
      for (int64_t i = 0; i < y.size(); ++i) a.gptr()[i] += y.gptr()[i] * c;
    });
  }
  return y;
}

// x (..., D) + row vector b (D), broadcast over leading axes.
template <class T>
Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b) {
  if (b.ndim() != 1 || x.dim(-1) != b.dim(0))
    throw std::invalid_argument("add_rowvec: last axis " + shape_str(x.shape) + " vs " + shape_str(b.shape));
  const int64_t d = b.dim(0);
  const int64_t rows = x.size() / d;
  Tensor<T> y(x.shape);
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t j = 0; j < d; ++j) y.ptr()[r * d + j] = x.ptr()[r * d + j] + b.ptr()[j];
  check_finite(y, "add_rowvec");
  if (tracing<T>({&x, &b})) {
    mark_output(y);
    Tape<T>::active()->record([x, b, y, rows, d]() mutable {
      const T* g = y.gptr();
      if (x.requires_grad)
        for (int64_t i = 0; i < y.size(); ++i) x.gptr()[i] += g[i];
      if (b.requires_grad)
        for (int64_t r = 0; r < rows; ++r)
          for (int64_t j = 0; j < d; ++j) b.gptr()[j] += g[r * d + j];
    });
  }
  return y;
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  Tensor<T> y(Shape{1});
  T acc = T(0);
  for (int64_t i = 0; i < a.size(); ++i) acc += a.ptr()[i];
  y.ptr()[0] = acc;
  check_finite(y, "sum");
  if (tracing<T>({&a})) {
    mark_output(y);
    Tape<T>::active()->record([a, y]() mutable {
      const T g = y.gptr()[0];
      for (int64_t i = 0; i < a.size(); ++i) a.gptr()[i] += g;
    });
  }
  return y;
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  Tensor<T> s = sum(a);
  return scale(s, T(1) / T(a.size()));
}

// (..., X, Y) -> (..., Y, X)
template <class T>
Tensor<T> transpose_last2(const Tensor<T>& a) {
  if (a.ndim() < 2) throw std::invalid_argument("transpose_last2: need >=2 dims");
  const int X = a.dim(-2), Y = a.dim(-1);
  Shape os = a.shape;
  os[os.size() - 2] = Y;
  os[os.size() - 1] = X;
  const int64_t outer = a.size() / ((int64_t)X * Y);
  Tensor<T> y(os);
  for (int64_t o = 0; o < outer; ++o) {
    const T* src = a.ptr() + o * X * Y;
    T* dst = y.ptr() + o * X * Y;
    for (int i = 0; i < X; ++i)
      for (int j = 0; j < Y; ++j) dst[(int64_t)j * X + i] = src[(int64_t)i * Y + j];
  }
  if (tracing<T>({&a})) {
    mark_output(y);
    Tape<T>::active()->record([a, y, outer, X, Y]() mutable {
      for (int64_t o = 0; o < outer; ++o) {
        const T* g = y.gptr() + o * X * Y;
        T* ga = a.gptr() + o * X * Y;
        for (int i = 0; i < X; ++i)
          for (int j = 0; j < Y; ++j) ga[(int64_t)i * Y + j] += g[(int64_t)j * X + i];
      }
    });
  }
  return y;
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const int nd = parts[0].ndim();
  if (axis < 0) axis += nd;
  Shape os = parts[0].shape;
  int total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != nd) throw std::invalid_argument("concat: rank mismatch");
    for (int i = 0; i < nd; ++i)
      if (i != axis && p.shape[i] != os[i])
        throw std::invalid_argument("concat: extent mismatch on axis " + std::to_string(i));
    total += p.shape[axis];
  }
  os[axis] = total;
  Tensor<T> y(os);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= os[i];
  for (int i = axis + 1; i < nd; ++i) inner *= os[i];
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t block = (int64_t)p.shape[axis] * inner;
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(p.ptr() + o * block, block, y.ptr() + o * (int64_t)total * inner + off);
    off += block;
  }
  bool any = false;
  for (const auto& p : parts) any |= p.requires_grad;
  if (Tape<T>::active() && any) {
    mark_output(y);
    auto parts_copy = parts;
    Tape<T>::active()->record([parts_copy, y, outer, inner, total]() mutable {
      int64_t off = 0;
      for (auto& p : parts_copy) {
        const int64_t block = p.size() / outer;
        if (p.requires_grad)
          for (int64_t o = 0; o < outer; ++o) {
            const T* g = y.gptr() + o * (int64_t)total * inner + off;
            T* gp = p.gptr() + o * block;
            for (int64_t i = 0; i < block; ++i) gp[i] += g[i];
          }
        off += block;
      }
    });
  }
  return y;
}

// Contiguous slice along an axis.
template <class T>
Tensor<T> slice(const Tensor<T>& a, int axis, int start, int len) {
  const int nd = a.ndim();
  if (axis < 0) axis += nd;
  if (start < 0 || len <= 0 || start + len > a.shape[axis])
    throw std::invalid_argument("slice: range out of bounds");
  Shape os = a.shape;
  os[axis] = len;
  Tensor<T> y(os);
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.shape[i];
  for (int i = axis + 1; i < nd; ++i) inner *= a.shape[i];
  const int64_t in_block = (int64_t)a.shape[axis] * inner;
  const int64_t out_block = (int64_t)len * inner;
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(a.ptr() + o * in_block + (int64_t)start * inner, out_block, y.ptr() + o * out_block);
  if (tracing<T>({&a})) {
    mark_output(y);
    Tape<T>::active()->record([a, y, outer, inner, in_block, out_block, start]() mutable {
      for (int64_t o = 0; o < outer; ++o) {
        T* ga = a.gptr() + o * in_block + (int64_t)start * inner;
        const T* g = y.gptr() + o * out_block;
        for (int64_t i = 0; i < out_block; ++i) ga[i] += g[i];
      }
    });
  }
  return y;
}

// Reshape that participates in the graph (copies; keeps grad routing simple
// when the input is an op output whose storage is shared).
template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape s) {
  return a.reshaped(std::move(s));
}

// ---- init helpers ----

template <class T>
Tensor<T> zeros(Shape s, bool rg = false) {
  return Tensor<T>(std::move(s), T(0), rg);
}

template <class T>
Tensor<T> full(Shape s, T v, bool rg = false) {
  return Tensor<T>(std::move(s), v, rg);
}

template <class T>
Tensor<T> randn(Shape s, Rng& rng, T stddev = T(1), bool rg = false) {
  Tensor<T> t(std::move(s), T(0), rg);
  std::normal_distribution<double> d(0.0, (double)stddev);
  for (int64_t i = 0; i < t.size(); ++i) t.ptr()[i] = (T)d(rng);
  return t;
}

template <class T>
Tensor<T> uniform(Shape s, Rng& rng, T lo, T hi, bool rg = false) {
  Tensor<T> t(std::move(s), T(0), rg);
  std::uniform_real_distribution<double> d((double)lo, (double)hi);
  for (int64_t i = 0; i < t.size(); ++i) t.ptr()[i] = (T)d(rng);
  return t;
}

}  // namespace stm
