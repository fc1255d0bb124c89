#pragma once

// Central-finite-difference gradient checking. Meant to run in 64-bit mode;
// finite differences are unreliable in 32-bit.

#include <functional>

#include "stmamba/tensor.hpp"

namespace stm {

struct GradCheckEntry {
  std::string name;
  double rel_err;
  bool pass;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool pass = true;
  double max_rel_err = 0;
};

// f() must run the forward pass and return the scalar loss tensor; it is
// invoked repeatedly with perturbed parameter values. Analytic gradients come
// from one recorded forward/backward. max_elems_per_param caps the number of
// sampled elements per parameter (0 = all).
template <class T>
GradCheckReport grad_check(const std::function<Tensor<T>()>& f,
                           std::vector<std::pair<std::string, Tensor<T>>> params, double h = 1e-5,
                           double tol = 1e-4, int max_elems_per_param = 0, uint64_t sample_seed = 0) {
  GradCheckReport rep;
  for (auto& [name, p] : params) p.zero_grad();
  {
    typename Tape<T>::Scope scope;
    Tensor<T> loss = f();
    scope.tape.backward(loss);
  }
  Rng rng(sample_seed);
  for (auto& [name, p] : params) {
    std::vector<int64_t> idx(p.size());
    std::iota(idx.begin(), idx.end(), 0);
    if (max_elems_per_param > 0 && (int64_t)idx.size() > max_elems_per_param) {
      std::shuffle(idx.begin(), idx.end(), rng);
      idx.resize(max_elems_per_param);
    }
    double worst = 0;
    for (int64_t i : idx) {
      const T orig = p.ptr()[i];
      p.ptr()[i] = orig + (T)h;
      const double fp = (double)f().item();
      p.ptr()[i] = orig - (T)h;
      const double fm = (double)f().item();
      p.ptr()[i] = orig;
      const double numeric = (fp - fm) / (2 * h);
      const double analytic = (double)p.gptr()[i];
      const double err = std::abs(analytic - numeric) / std::max(1.0, std::abs(numeric));
      worst = std::max(worst, err);
    }
    const bool ok = worst <= tol;
    rep.entries.push_back({name, worst, ok});
    rep.pass &= ok;
    rep.max_rel_err = std::max(rep.max_rel_err, worst);
  }
  return rep;
}

}  // namespace stm
