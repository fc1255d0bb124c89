#pragma once

// AdamW with decoupled weight decay, the epoch loop with per-epoch
// augmentation and early stopping, and evaluation metrics.

#include <chrono>

#include "stmamba/data.hpp"
#include "stmamba/model.hpp"

namespace stm {

struct TrainConfig {
  double lr = 9e-4;
  double weight_decay = 1e-3;
  int max_epochs = 2000;
  int patience = 200;
  int batch_size = 64;
  uint64_t seed = 0;
  double beta1 = 0.9, beta2 = 0.999;
  double eps = 1e-8;
  int augment_multiplier = 1;
  int augment_segments = 8;

  void validate() const {
    if (lr <= 0) throw std::invalid_argument("TrainConfig: lr > 0 required");
    if (patience > max_epochs) throw std::invalid_argument("TrainConfig: patience <= max_epochs required");
  }

  nlohmann::json to_json() const {
    return {{"lr", lr}, {"weight_decay", weight_decay}, {"max_epochs", max_epochs},
            {"patience", patience}, {"batch_size", batch_size}, {"seed", seed},
            {"beta1", beta1}, {"beta2", beta2}, {"eps", eps},
            {"augment_multiplier", augment_multiplier}, {"augment_segments", augment_segments}};
  }
};

template <class T>
class AdamW {
 public:
  explicit AdamW(const TrainConfig& cfg) : cfg_(cfg) {}

  void step(std::vector<NamedParam<T>>& params) {
    if (m_.empty()) {
      m_.resize(params.size());
      v_.resize(params.size());
      for (size_t i = 0; i < params.size(); ++i) {
        m_[i].assign(params[i].tensor.size(), T(0));
        v_[i].assign(params[i].tensor.size(), T(0));
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, t_);
    const double bc2 = 1.0 - std::pow(cfg_.beta2, t_);
    for (size_t i = 0; i < params.size(); ++i) {
      Tensor<T>& p = params[i].tensor;
      const T* g = p.gptr();
      for (int64_t j = 0; j < p.size(); ++j)
        if (!std::isfinite((double)g[j]))
          throw std::runtime_error("adamw_step: NaN/Inf gradient in parameter '" + params[i].name + "'");
      // decoupled decay, separate from the adaptive step
      if (params[i].decay && cfg_.weight_decay > 0)
        for (int64_t j = 0; j < p.size(); ++j) p.ptr()[j] -= (T)(cfg_.lr * cfg_.weight_decay) * p.ptr()[j];
      T* m = m_[i].data();
      T* v = v_[i].data();
      for (int64_t j = 0; j < p.size(); ++j) {
        m[j] = (T)cfg_.beta1 * m[j] + (T)(1.0 - cfg_.beta1) * g[j];
        v[j] = (T)cfg_.beta2 * v[j] + (T)(1.0 - cfg_.beta2) * g[j] * g[j];
        const double mhat = (double)m[j] / bc1;
        const double vhat = (double)v[j] / bc2;
        p.ptr()[j] -= (T)(cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
  }

  int64_t step_count() const { return t_; }

 private:
  TrainConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  int64_t t_ = 0;
};

struct Metrics {
  double accuracy = 0;  // percent
  std::vector<double> per_class_accuracy;
  std::vector<std::vector<int>> confusion;  // [true][pred]
  double mean_loss = 0;
};

template <class T>
Tensor<T> batch_tensor(const EEGTrialSet& set, const std::vector<size_t>& idx) {
  const int C = set.n_channels, L = set.n_samples;
  Tensor<T> x(Shape{(int)idx.size(), C, L});
  for (size_t b = 0; b < idx.size(); ++b) {
    const float* src = set.trial(idx[b]);
    T* dst = x.ptr() + b * (size_t)C * L;
    for (size_t i = 0; i < (size_t)C * L; ++i) dst[i] = (T)src[i];
  }
  return x;
}

template <class T>
Metrics evaluate(Model<T>& model, const EEGTrialSet& set, int batch_size = 64) {
  if (set.n_trials() == 0) throw std::invalid_argument("evaluate: empty set");
  const int K = model.cfg.n_classes;
  Metrics m;
  m.confusion.assign(K, std::vector<int>(K, 0));
  size_t correct = 0;
  double loss_sum = 0;
  Rng rng(0);
  for (size_t start = 0; start < set.n_trials(); start += batch_size) {
    std::vector<size_t> idx;
    for (size_t i = start; i < std::min(set.n_trials(), start + batch_size); ++i) idx.push_back(i);
    Tensor<T> x = batch_tensor<T>(set, idx);
    Tensor<T> logits = model.forward(x, false, rng);
    std::vector<int> labels;
    for (size_t i : idx) labels.push_back(set.labels[i]);
    loss_sum += (double)cross_entropy(logits, labels).item() * idx.size();
    for (size_t b = 0; b < idx.size(); ++b) {
      const T* p = logits.ptr() + (int64_t)b * K;
      const int pred = (int)(std::max_element(p, p + K) - p);
      m.confusion[labels[b]][pred]++;
      correct += pred == labels[b];
    }
  }
  m.accuracy = 100.0 * correct / set.n_trials();
  m.mean_loss = loss_sum / set.n_trials();
  m.per_class_accuracy.assign(K, 0);
  for (int k = 0; k < K; ++k) {
    int row = 0;
    for (int j = 0; j < K; ++j) row += m.confusion[k][j];
    m.per_class_accuracy[k] = row ? 100.0 * m.confusion[k][k] / row : 0.0;
  }
  return m;
}

struct EpochRecord {
  int epoch;
  double train_loss, train_acc, val_acc, lr, seconds;

  nlohmann::json to_json() const {
    return {{"epoch", epoch}, {"train_loss", train_loss}, {"train_acc", train_acc},
            {"val_acc", val_acc}, {"lr", lr}, {"seconds", seconds}};
  }
};

struct TrainResult {
  std::vector<EpochRecord> history;
  double best_val_acc = 0;
  double best_val_loss = 0;
  int best_epoch = 0;
  int stopped_epoch = 0;
};

// Per epoch: regenerate augmentation (epoch-derived seed), shuffle, minibatch
// AdamW steps, evaluate on validation. Early stop after `patience` epochs
// without a new best; counter semantics: the run halts at the end of epoch
// best_epoch + patience. Returns the model restored to its BEST snapshot.
template <class T>
TrainResult train_loop(Model<T>& model, const EEGTrialSet& train_set, const EEGTrialSet& val_set,
                       const TrainConfig& cfg, bool verbose = false) {
  cfg.validate();
  if (train_set.n_trials() == 0) throw std::invalid_argument("train_loop: empty training split");
  AdamW<T> opt(cfg);
  auto params = model.params();
  TrainResult res;
  std::vector<T> best_snap = model.snapshot();
  res.best_val_acc = -1;
  res.best_val_loss = 1e300;
  int since_improve = 0;
  Rng shuffle_rng(cfg.seed ^ 0x5b1ce5u);
  Rng dropout_rng(cfg.seed ^ 0xd209u);

  for (int epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EEGTrialSet aug = cfg.augment_multiplier > 0
                          ? augment_recombine(train_set, cfg.augment_segments, cfg.augment_multiplier,
                                              cfg.seed + (uint64_t)epoch * 0x9e3779b97f4a7c15ull)
                          : train_set;
    std::vector<size_t> order(aug.n_trials());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double loss_sum = 0;
    size_t correct = 0, seen = 0;
    for (size_t start = 0; start < order.size(); start += cfg.batch_size) {
      std::vector<size_t> idx(order.begin() + start,
                              order.begin() + std::min(order.size(), start + cfg.batch_size));
      if (idx.size() < 2) continue;  // batch norm needs at least two samples
      Tensor<T> x = batch_tensor<T>(aug, idx);
      std::vector<int> labels;
      for (size_t i : idx) labels.push_back(aug.labels[i]);
      model.zero_grads();
      typename Tape<T>::Scope scope;
      Tensor<T> logits = model.forward(x, true, dropout_rng);
      Tensor<T> loss = cross_entropy(logits, labels);
      const double lv = (double)loss.item();
      if (!std::isfinite(lv)) {
        model.restore(best_snap);
        throw std::runtime_error("train_loop: loss diverged (NaN) at epoch " + std::to_string(epoch) +
                                 "; best checkpoint restored");
      }
      scope.tape.backward(loss);
      opt.step(params);
      loss_sum += lv * idx.size();
      seen += idx.size();
      const int K = model.cfg.n_classes;
      for (size_t b = 0; b < idx.size(); ++b) {
        const T* p = logits.ptr() + (int64_t)b * K;
        correct += (int)(std::max_element(p, p + K) - p) == labels[b];
      }
    }

    Metrics vm = evaluate(model, val_set, cfg.batch_size);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    res.history.push_back({epoch, loss_sum / std::max<size_t>(1, seen),
                           100.0 * correct / std::max<size_t>(1, seen), vm.accuracy, cfg.lr, secs});
    if (verbose)
      std::fprintf(stderr, "epoch %4d  loss %.4f  train %.1f%%  val %.1f%%  (%.1fs)\n", epoch,
                   res.history.back().train_loss, res.history.back().train_acc, vm.accuracy, secs);

    if (vm.accuracy > res.best_val_acc) {
      res.best_val_acc = vm.accuracy;
      res.best_val_loss = vm.mean_loss;
      res.best_epoch = epoch;
      best_snap = model.snapshot();
      since_improve = 0;
    } else {
      // equal accuracy with lower loss refreshes the snapshot but does not
      // count as improvement, so patience still measures accuracy progress
      if (vm.accuracy == res.best_val_acc && vm.mean_loss < res.best_val_loss) {
        res.best_val_loss = vm.mean_loss;
        best_snap = model.snapshot();
      }
      ++since_improve;
    }
    res.stopped_epoch = epoch;
    if (since_improve >= cfg.patience) break;
  }
  model.restore(best_snap);
  return res;
}

}  // namespace stm
