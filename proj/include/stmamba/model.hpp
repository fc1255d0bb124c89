#pragma once

// Full model assembly: embedding -> temporal path || spatial path ->
// classifier head, with ablation switches that drop either or both Mamba
// stacks while keeping the rest trainable.

#include <nlohmann/json.hpp>

#include <fstream>
#include <map>

#include "stmamba/embedding.hpp"
#include "stmamba/encoder.hpp"

namespace stm {

enum class Ablation { Full, TemporalOnly, SpatialOnly, None };

inline std::string ablation_name(Ablation a) {
  switch (a) {
    case Ablation::Full: return "full";
    case Ablation::TemporalOnly: return "temporal";
    case Ablation::SpatialOnly: return "spatial";
    default: return "none";
  }
}

inline Ablation ablation_from(const std::string& s) {
  if (s == "full") return Ablation::Full;
  if (s == "temporal") return Ablation::TemporalOnly;
  if (s == "spatial") return Ablation::SpatialOnly;
  if (s == "none") return Ablation::None;
  throw std::invalid_argument("unknown ablation '" + s + "'");
}

struct ModelConfig {
  int n_electrodes = 22;
  int n_samples = 960;     // cropped trial length (L_eff)
  int n_classes = 4;
  EmbeddingConfig embedding;
  int depth = 2;           // encoder stack depth N
  int d_state = 16;
  int expand = 2;
  int d_conv = 4;
  int ffn_ratio = 2;
  double dropout_p = 0.3;
  int head_kernel = 8;     // classifier conv over the token axis
  int head_stride = 8;
  int head_fc = 64;
  Ablation ablation = Ablation::Full;

  int pooled_length() const { return embedding.pooled_length(n_samples); }

  void validate() const {
    if (n_classes < 2) throw std::invalid_argument("ModelConfig: n_classes >= 2");
    if (depth < 1) throw std::invalid_argument("ModelConfig: depth >= 1");
    embedding.validate();
    if (embedding.n_electrodes != n_electrodes)
      throw std::invalid_argument("ModelConfig: electrode count disagrees with embedding config");
    (void)pooled_length();
  }

  nlohmann::json to_json() const {
    return {{"n_electrodes", n_electrodes}, {"n_samples", n_samples}, {"n_classes", n_classes},
            {"kernels", embedding.kernels}, {"f1", embedding.f1}, {"c_prime", embedding.c_prime},
            {"pool_window", embedding.pool_window}, {"pool_stride", embedding.pool_stride},
            {"depth", depth}, {"d_state", d_state}, {"expand", expand}, {"d_conv", d_conv},
            {"ffn_ratio", ffn_ratio}, {"dropout_p", dropout_p}, {"head_kernel", head_kernel},
            {"head_stride", head_stride}, {"head_fc", head_fc}, {"ablation", ablation_name(ablation)}};
  }

  static ModelConfig from_json(const nlohmann::json& j) {
    ModelConfig c;
    c.n_electrodes = j.at("n_electrodes");
    c.n_samples = j.at("n_samples");
    c.n_classes = j.at("n_classes");
    c.embedding.n_electrodes = c.n_electrodes;
    c.embedding.kernels = j.at("kernels").get<std::vector<int>>();
    c.embedding.f1 = j.at("f1");
    c.embedding.c_prime = j.at("c_prime");
    c.embedding.pool_window = j.at("pool_window");
    c.embedding.pool_stride = j.at("pool_stride");
    c.depth = j.at("depth");
    c.d_state = j.at("d_state");
    c.expand = j.at("expand");
    c.d_conv = j.at("d_conv");
    c.ffn_ratio = j.at("ffn_ratio");
    c.dropout_p = j.at("dropout_p");
    c.head_kernel = j.at("head_kernel");
    c.head_stride = j.at("head_stride");
    c.head_fc = j.at("head_fc");
    c.ablation = ablation_from(j.at("ablation").get<std::string>());
    return c;
  }
};

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;  // shares storage with the layer's tensor
  bool decay;        // weight decay applies (2-d+ weights only)
};

// Classifier branch: conv over tokens (channels = feature width), batch norm,
// ELU, flatten, FC.
template <class T>
struct HeadParams {
  int width = 0, tokens = 0, tokens_used = 0, tokens_out = 0;
  Tensor<T> conv_w;  // (width, width, 1, kernel)
  Tensor<T> conv_b;
  Tensor<T> bn_g, bn_b;
  BatchNormState<T> bn_state;
  Tensor<T> fc_w, fc_b;  // (head_fc, width*tokens_out)

  void init(int width_, int tokens_, int kernel, int stride, int head_fc, Rng& rng) {
    width = width_;
    tokens = tokens_;
    tokens_out = (tokens - kernel) / stride + 1;  // leftover tokens < stride are cropped
    tokens_used = (tokens_out - 1) * stride + kernel;
    if (tokens_out < 1) throw std::invalid_argument("head: token axis shorter than conv kernel");
    auto fanin = [&](Shape s, int fi) {
      return uniform<T>(s, rng, (T)(-1.0 / std::sqrt((double)fi)), (T)(1.0 / std::sqrt((double)fi)), true);
    };
    conv_w = fanin(Shape{width, width, 1, kernel}, width * kernel);
    conv_b = fanin(Shape{width}, width * kernel);
    bn_g = Tensor<T>(Shape{width}, T(1), true);
    bn_b = Tensor<T>(Shape{width}, T(0), true);
    bn_state = {};
    fc_w = fanin(Shape{head_fc, width * tokens_out}, width * tokens_out);
    fc_b = fanin(Shape{head_fc}, width * tokens_out);
  }

  template <class F>
  void visit(const std::string& prefix, F&& f) {
    f(prefix + ".conv_w", conv_w, true);
    f(prefix + ".conv_b", conv_b, false);
    f(prefix + ".bn_g", bn_g, false);
    f(prefix + ".bn_b", bn_b, false);
    f(prefix + ".fc_w", fc_w, true);
    f(prefix + ".fc_b", fc_b, false);
  }
};

// x (B, tokens, width) -> (B, head_fc)
template <class T>
Tensor<T> head_forward(const Tensor<T>& x, HeadParams<T>& p, int kernel, int stride, bool train) {
  if (x.dim(1) != p.tokens || x.dim(2) != p.width)
    throw std::invalid_argument("head_forward: flattened-size mismatch vs FC weights");
  const int B = x.dim(0);
  Tensor<T> xt = transpose_last2(x);  // (B, width, tokens)
  if (p.tokens_used != p.tokens) xt = slice(xt, 2, 0, p.tokens_used);
  Tensor<T> x4 = xt.reshaped(Shape{B, p.width, 1, p.tokens_used});
  Tensor<T> c = conv2d<T>(x4, p.conv_w, &p.conv_b, 0, 0, 1, stride);  // (B, width, 1, tokens_out)
  (void)kernel;
  Tensor<T> n = batch_norm(c, p.bn_g, p.bn_b, p.bn_state, train);
  Tensor<T> a = elu(n);
  Tensor<T> flat = a.reshaped(Shape{B, p.width * p.tokens_out});
  return linear(flat, p.fc_w, &p.fc_b);
}

template <class T>
struct Model {
  ModelConfig cfg;
  EmbeddingParams<T> embedding;
  EncoderStack<T> stack_t, stack_s;  // present per ablation switch
  HeadParams<T> head_t, head_s;
  Tensor<T> fc_w, fc_b;              // final classifier
  mutable int64_t embed_calls = 0;   // structural check: one embedding per forward

  bool has_temporal_stack() const {
    return cfg.ablation == Ablation::Full || cfg.ablation == Ablation::TemporalOnly;
  }
  bool has_spatial_stack() const {
    return cfg.ablation == Ablation::Full || cfg.ablation == Ablation::SpatialOnly;
  }

  void init(const ModelConfig& c, uint64_t seed) {
    cfg = c;
    cfg.validate();
    Rng rng(seed);
    embedding.init(cfg.embedding, rng);
    const int Lp = cfg.pooled_length();
    const int Cp = cfg.embedding.c_prime;
    if (has_temporal_stack())
      stack_t.init(cfg.depth, Cp, cfg.ffn_ratio, cfg.expand, cfg.d_state, cfg.d_conv, cfg.dropout_p, rng);
    if (has_spatial_stack())
      stack_s.init(cfg.depth, Lp, cfg.ffn_ratio, cfg.expand, cfg.d_state, cfg.d_conv, cfg.dropout_p, rng);
    head_t.init(Cp, 2 * Lp, cfg.head_kernel, cfg.head_stride, cfg.head_fc, rng);
    head_s.init(Lp, 2 * Cp, cfg.head_kernel, cfg.head_stride, cfg.head_fc, rng);
    const int fi = 2 * cfg.head_fc;
    fc_w = uniform<T>(Shape{cfg.n_classes, fi}, rng, (T)(-1.0 / std::sqrt((double)fi)),
                      (T)(1.0 / std::sqrt((double)fi)), true);
    fc_b = uniform<T>(Shape{cfg.n_classes}, rng, (T)(-1.0 / std::sqrt((double)fi)),
                      (T)(1.0 / std::sqrt((double)fi)), true);
  }

  template <class F>
  void visit(F&& f) {
    embedding.visit("embedding", f);
    if (has_temporal_stack()) stack_t.visit("stack_t", f);
    if (has_spatial_stack()) stack_s.visit("stack_s", f);
    head_t.visit("head_t", f);
    head_s.visit("head_s", f);
    f("fc_w", fc_w, true);
    f("fc_b", fc_b, false);
  }

  std::vector<NamedParam<T>> params() {
    std::vector<NamedParam<T>> out;
    visit([&](const std::string& n, Tensor<T>& t, bool decay) { out.push_back({n, t, decay}); });
    return out;
  }

  int64_t param_count() {
    int64_t n = 0;
    visit([&](const std::string&, Tensor<T>& t, bool) { n += t.size(); });
    return n;
  }

  Tensor<T> temporal_path(const EmbeddedPair<T>& pair, bool train, Rng& rng) {
    Tensor<T> yv = pair.x_var, ya = pair.x_avg;
    if (has_temporal_stack()) {
      auto [v, a] = shared_dual_forward(pair.x_var, pair.x_avg, stack_t, train, rng);
      yv = v;
      ya = a;
    }
    return concat<T>({yv, ya}, 1);  // (B, 2L', C')
  }

  Tensor<T> spatial_path(const EmbeddedPair<T>& pair, bool train, Rng& rng) {
    Tensor<T> xv = transpose_last2(pair.x_var);  // (B, C', L')
    Tensor<T> xa = transpose_last2(pair.x_avg);
    if (has_spatial_stack()) {
      auto [v, a] = shared_dual_forward(xv, xa, stack_s, train, rng);
      xv = v;
      xa = a;
    }
    return concat<T>({xv, xa}, 1);  // (B, 2C', L')
  }

  Tensor<T> classify(const Tensor<T>& x_s, const Tensor<T>& x_t, bool train) {
    Tensor<T> hs = head_forward(x_s, head_s, cfg.head_kernel, cfg.head_stride, train);
    Tensor<T> ht = head_forward(x_t, head_t, cfg.head_kernel, cfg.head_stride, train);
    Tensor<T> h = concat<T>({hs, ht}, 1);
    return linear(h, fc_w, &fc_b);
  }

  Tensor<T> forward(const Tensor<T>& x, bool train, Rng& rng) {
    if (x.ndim() != 3 || x.dim(1) != cfg.n_electrodes || x.dim(2) != cfg.n_samples)
      throw std::invalid_argument("model_forward: geometry mismatch, expected (B," +
                                  std::to_string(cfg.n_electrodes) + "," + std::to_string(cfg.n_samples) +
                                  ") got " + shape_str(x.shape));
    EmbeddedPair<T> pair = embed_forward(x, embedding, train);
    ++embed_calls;
    Tensor<T> xt = temporal_path(pair, train, rng);
    Tensor<T> xs = spatial_path(pair, train, rng);
    return classify(xs, xt, train);
  }

  std::vector<int> predict(const Tensor<T>& x) {
    Rng rng(0);
    Tensor<T> logits = forward(x, false, rng);
    std::vector<int> out(logits.dim(0));
    const int K = logits.dim(1);
    for (int b = 0; b < logits.dim(0); ++b) {
      const T* p = logits.ptr() + (int64_t)b * K;
      out[b] = (int)(std::max_element(p, p + K) - p);
    }
    return out;
  }

  // Flat parameter snapshot (includes batch-norm running stats).
  std::vector<T> snapshot() {
    std::vector<T> out;
    visit([&](const std::string&, Tensor<T>& t, bool) { out.insert(out.end(), t.data->begin(), t.data->end()); });
    for (auto* st : bn_states()) {
      out.insert(out.end(), st->running_mean.begin(), st->running_mean.end());
      out.insert(out.end(), st->running_var.begin(), st->running_var.end());
      out.push_back(st->initialized ? T(1) : T(0));
    }
    return out;
  }

  void restore(const std::vector<T>& snap) {
    size_t off = 0;
    visit([&](const std::string&, Tensor<T>& t, bool) {
      std::copy_n(snap.begin() + off, t.size(), t.data->begin());
      off += t.size();
    });
    for (auto* st : bn_states()) {
      std::copy_n(snap.begin() + off, st->running_mean.size(), st->running_mean.begin());
      off += st->running_mean.size();
      std::copy_n(snap.begin() + off, st->running_var.size(), st->running_var.begin());
      off += st->running_var.size();
      st->initialized = snap[off++] != T(0);
    }
    if (off != snap.size()) throw std::runtime_error("restore: snapshot size mismatch");
  }

  std::vector<BatchNormState<T>*> bn_states() {
    // running stats are created lazily; force allocation so snapshots line up
    auto ensure = [](BatchNormState<T>& s, int c) {
      if (s.running_mean.empty()) {
        s.running_mean.assign(c, T(0));
        s.running_var.assign(c, T(1));
      }
    };
    ensure(embedding.bn1_state, embedding.cfg.n_branch_channels());
    ensure(embedding.bn2_state, embedding.cfg.c_prime);
    ensure(head_t.bn_state, head_t.width);
    ensure(head_s.bn_state, head_s.width);
    return {&embedding.bn1_state, &embedding.bn2_state, &head_t.bn_state, &head_s.bn_state};
  }

  void zero_grads() {
    visit([](const std::string&, Tensor<T>& t, bool) { t.zero_grad(); });
  }

  // ---- checkpoint IO: JSON header line, then length-prefixed named blobs of
  // 32-bit little-endian values ----

  void save(const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint for writing: " + path);
    nlohmann::json hdr = {{"format_version", 1}, {"config", cfg.to_json()}};
    f << hdr.dump() << "\n";
    auto write_blob = [&](const std::string& name, const T* data, const Shape& shape, int64_t n) {
      uint32_t nl = (uint32_t)name.size();
      f.write((const char*)&nl, 4);
      f.write(name.data(), nl);
      uint32_t nd = (uint32_t)shape.size();
      f.write((const char*)&nd, 4);
      for (int d : shape) {
        uint32_t v = (uint32_t)d;
        f.write((const char*)&v, 4);
      }
      for (int64_t i = 0; i < n; ++i) {
        float v = (float)data[i];
        f.write((const char*)&v, 4);
      }
    };
    visit([&](const std::string& n, Tensor<T>& t, bool) { write_blob(n, t.ptr(), t.shape, t.size()); });
    int idx = 0;
    for (auto* st : bn_states()) {
      const std::string p = "bn_state" + std::to_string(idx++);
      std::vector<T> flag = {st->initialized ? T(1) : T(0)};
      write_blob(p + ".mean", st->running_mean.data(), Shape{(int)st->running_mean.size()},
                 (int64_t)st->running_mean.size());
      write_blob(p + ".var", st->running_var.data(), Shape{(int)st->running_var.size()},
                 (int64_t)st->running_var.size());
      write_blob(p + ".init", flag.data(), Shape{1}, 1);
    }
  }

  static Model load(const std::string& path, uint64_t seed = 0) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error("checkpoint: missing header");
    nlohmann::json hdr;
    try {
      hdr = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string("checkpoint: malformed header: ") + e.what());
    }
    if (hdr.value("format_version", -1) != 1)
      throw std::runtime_error("checkpoint: unsupported format version");
    Model m;
    m.init(ModelConfig::from_json(hdr.at("config")), seed);

    std::map<std::string, std::vector<float>> blobs;
    std::map<std::string, Shape> shapes;
    while (true) {
      uint32_t nl;
      if (!f.read((char*)&nl, 4)) break;
      std::string name(nl, '\0');
      if (!f.read(name.data(), nl)) throw std::runtime_error("checkpoint: truncated record name");
      uint32_t nd;
      if (!f.read((char*)&nd, 4)) throw std::runtime_error("checkpoint: truncated record rank");
      Shape s(nd);
      int64_t n = 1;
      for (uint32_t i = 0; i < nd; ++i) {
        uint32_t v;
        if (!f.read((char*)&v, 4)) throw std::runtime_error("checkpoint: truncated record shape");
        s[i] = (int)v;
        n *= v;
      }
      std::vector<float> vals(n);
      if (!f.read((char*)vals.data(), n * 4)) throw std::runtime_error("checkpoint: truncated payload");
      blobs[name] = std::move(vals);
      shapes[name] = std::move(s);
    }
    m.visit([&](const std::string& n, Tensor<T>& t, bool) {
      auto it = blobs.find(n);
      if (it == blobs.end()) throw std::runtime_error("checkpoint: missing parameter " + n);
      if (shapes[n] != t.shape) throw std::runtime_error("checkpoint: shape mismatch for " + n);
      for (int64_t i = 0; i < t.size(); ++i) t.ptr()[i] = (T)it->second[i];
    });
    int idx = 0;
    for (auto* st : m.bn_states()) {
      const std::string p = "bn_state" + std::to_string(idx++);
      auto need = [&](const std::string& k) -> std::vector<float>& {
        auto it = blobs.find(k);
        if (it == blobs.end()) throw std::runtime_error("checkpoint: missing blob " + k);
        return it->second;
      };
      auto& mv = need(p + ".mean");
      auto& vv = need(p + ".var");
      st->running_mean.assign(mv.begin(), mv.end());
      st->running_var.assign(vv.begin(), vv.end());
      st->initialized = need(p + ".init")[0] != 0;
    }
    return m;
  }
};

}  // namespace stm
