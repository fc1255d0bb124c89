#include "stmamba/data.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

namespace stm {

namespace fs = std::filesystem;
using nlohmann::json;

void EEGTrialSet::validate() const {
  const size_t n = labels.size();
  if (session_ids.size() != n)
    throw std::invalid_argument("trial set: labels and session_ids lengths differ");
  if (data.size() != n * (size_t)n_channels * n_samples)
    throw std::invalid_argument("trial set: payload size disagrees with geometry");
  for (int l : labels)
    if (l < 0 || l >= n_classes) throw std::invalid_argument("trial set: label out of range");
  if (!channel_names.empty() && (int)channel_names.size() != n_channels)
    throw std::invalid_argument("trial set: channel name count mismatch");
}

// ---- ETA v1 archive ----

void write_archive(const EEGTrialSet& set, const std::string& path) {
  set.validate();
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ArchiveError("cannot open archive for writing: " + path);
  json hdr = {{"version", 1},
              {"n_trials", set.n_trials()},
              {"n_channels", set.n_channels},
              {"n_samples", set.n_samples},
              {"sampling_rate_hz", set.sampling_rate_hz},
              {"n_classes", set.n_classes},
              {"labels", set.labels},
              {"session_ids", set.session_ids},
              {"channel_names", set.channel_names}};
  f << hdr.dump() << "\n";
  static_assert(sizeof(float) == 4);
  f.write(reinterpret_cast<const char*>(set.data.data()), (std::streamsize)set.data.size() * 4);
  if (!f) throw ArchiveError("write failed: " + path);
}

EEGTrialSet read_archive(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ArchiveError("cannot open archive: " + path);
  std::string line;
  if (!std::getline(f, line)) throw MalformedHeaderError("archive header line missing: " + path);
  json hdr;
  try {
    hdr = json::parse(line);
  } catch (const std::exception& e) {
    throw MalformedHeaderError(std::string("archive header is not valid JSON: ") + e.what());
  }
  if (!hdr.contains("version")) throw MalformedHeaderError("archive header lacks a version field");
  if (hdr["version"] != 1)
    throw VersionMismatchError("archive version " + hdr["version"].dump() + " unsupported (expected 1)");
  EEGTrialSet set;
  try {
    set.n_channels = hdr.at("n_channels");
    set.n_samples = hdr.at("n_samples");
    set.n_classes = hdr.at("n_classes");
    set.sampling_rate_hz = hdr.at("sampling_rate_hz");
    set.labels = hdr.at("labels").get<std::vector<int>>();
    set.session_ids = hdr.at("session_ids").get<std::vector<std::string>>();
    set.channel_names = hdr.at("channel_names").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw MalformedHeaderError(std::string("archive header field error: ") + e.what());
  }
  const size_t n_trials = hdr.at("n_trials");
  if (n_trials != set.labels.size())
    throw MalformedHeaderError("archive n_trials disagrees with labels length");
  const size_t expect = n_trials * (size_t)set.n_channels * set.n_samples;
  set.data.resize(expect);
  f.read(reinterpret_cast<char*>(set.data.data()), (std::streamsize)expect * 4);
  const size_t got = (size_t)f.gcount();
  if (got != expect * 4)
    throw TruncatedPayloadError("archive payload truncated: expected " + std::to_string(expect * 4) +
                                " bytes, got " + std::to_string(got));
  set.validate();
  return set;
}

// ---- CSV import ----

EEGTrialSet import_csv(const std::string& dir) {
  const fs::path root(dir);
  const fs::path manifest_path = root / "manifest.json";
  if (!fs::exists(manifest_path)) throw std::runtime_error("manifest.json not found in " + dir);
  json man;
  {
    std::ifstream mf(manifest_path);
    try {
      mf >> man;
    } catch (const std::exception& e) {
      throw std::runtime_error(std::string("manifest.json parse error: ") + e.what());
    }
  }
  EEGTrialSet set;
  set.sampling_rate_hz = man.at("sampling_rate_hz");
  set.n_classes = man.at("n_classes");
  if (man.contains("channel_names"))
    set.channel_names = man.at("channel_names").get<std::vector<std::string>>();

  std::set<std::string> listed;
  for (const auto& t : man.at("trials")) listed.insert(t.at("file").get<std::string>());
  for (const auto& e : fs::directory_iterator(root)) {
    const std::string name = e.path().filename().string();
    if (e.path().extension() == ".csv" && !listed.count(name))
      throw std::runtime_error("CSV file not listed in manifest (orphan): " + name);
  }

  for (const auto& t : man.at("trials")) {
    const fs::path p = root / t.at("file").get<std::string>();
    std::ifstream f(p);
    if (!f) throw std::runtime_error("trial file missing: " + p.string());
    std::vector<std::vector<float>> rows;
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
      ++lineno;
      if (line.empty()) continue;
      std::vector<float> row;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) row.push_back(std::stof(cell));
      if (!rows.empty() && row.size() != rows[0].size())
        throw std::runtime_error("ragged CSV row in " + p.filename().string() + " at line " +
                                 std::to_string(lineno));
      rows.push_back(std::move(row));
    }
    if (rows.empty()) throw std::runtime_error("empty CSV: " + p.string());
    const int L = (int)rows.size();
    const int C = (int)rows[0].size();
    if (set.n_trials() == 0) {
      set.n_channels = C;
      set.n_samples = L;
    } else if (C != set.n_channels || L != set.n_samples) {
      throw std::runtime_error("trial geometry mismatch in " + p.filename().string());
    }
    // rows = samples, cols = channels; store channel-then-sample
    const size_t base = set.data.size();
    set.data.resize(base + (size_t)C * L);
    for (int s = 0; s < L; ++s)
      for (int c = 0; c < C; ++c) set.data[base + (size_t)c * L + s] = rows[s][c];
    set.labels.push_back(t.at("label"));
    set.session_ids.push_back(t.at("session"));
  }
  set.validate();
  return set;
}

// ---- crop rule ----

int crop_length(int L, int pool_window, int pool_stride, int n_segments) {
  for (int l = L; l >= std::max(pool_window, n_segments); --l)
    if (l % n_segments == 0 && (l - pool_window) % pool_stride == 0) return l;
  throw std::invalid_argument("no valid crop length for L=" + std::to_string(L));
}

EEGTrialSet crop_to(const EEGTrialSet& set, int L_eff) {
  if (L_eff > set.n_samples) throw std::invalid_argument("crop_to: L_eff exceeds trial length");
  if (L_eff == set.n_samples) return set;
  EEGTrialSet out = set;
  out.n_samples = L_eff;
  out.data.resize(set.n_trials() * (size_t)set.n_channels * L_eff);
  for (size_t i = 0; i < set.n_trials(); ++i)
    for (int c = 0; c < set.n_channels; ++c)
      std::copy_n(set.trial(i) + (size_t)c * set.n_samples, L_eff,
                  out.data.data() + (i * (size_t)set.n_channels + c) * L_eff);
  return out;
}

// ---- augmentation ----

EEGTrialSet augment_recombine(const EEGTrialSet& train, int n_segments, int multiplier, uint64_t seed,
                              std::vector<std::string>* warnings) {
  train.validate();
  if (train.n_samples % n_segments)
    throw std::invalid_argument("augment_recombine: L not divisible by n_segments");
  std::map<int, std::vector<size_t>> by_class;
  for (size_t i = 0; i < train.n_trials(); ++i) by_class[train.labels[i]].push_back(i);

  EEGTrialSet out = train;
  std::mt19937_64 rng(seed);
  const int seg_len = train.n_samples / n_segments;
  const size_t trial_sz = (size_t)train.n_channels * train.n_samples;
  for (int m = 0; m < multiplier; ++m) {
    for (size_t i = 0; i < train.n_trials(); ++i) {
      const auto& pool = by_class[train.labels[i]];
      if (pool.size() < 2) {
        if (warnings)
          warnings->push_back("class " + std::to_string(train.labels[i]) +
                              " has a single trial; copied through without recombination");
        out.data.insert(out.data.end(), train.trial(i), train.trial(i) + trial_sz);
      } else {
        std::vector<float> art(trial_sz);
        std::uniform_int_distribution<size_t> pick(0, pool.size() - 1);
        for (int s = 0; s < n_segments; ++s) {
          const float* src = train.trial(pool[pick(rng)]);
          for (int c = 0; c < train.n_channels; ++c)
            std::copy_n(src + (size_t)c * train.n_samples + (size_t)s * seg_len, seg_len,
                        art.data() + (size_t)c * train.n_samples + (size_t)s * seg_len);
        }
        out.data.insert(out.data.end(), art.begin(), art.end());
      }
      out.labels.push_back(train.labels[i]);
      out.session_ids.push_back(train.session_ids[i] + "+aug");
    }
  }
  out.validate();
  return out;
}

// ---- standardization ----

ChannelStats standardize(EEGTrialSet& train, std::vector<EEGTrialSet*> others) {
  if (train.n_trials() == 0) throw std::invalid_argument("standardize: empty training set");
  const int C = train.n_channels, L = train.n_samples;
  ChannelStats st;
  st.mean.assign(C, 0.f);
  st.std.assign(C, 1.f);
  const size_t n = train.n_trials() * (size_t)L;
  for (int c = 0; c < C; ++c) {
    double s = 0, s2 = 0;
    for (size_t i = 0; i < train.n_trials(); ++i) {
      const float* p = train.trial(i) + (size_t)c * L;
      for (int t = 0; t < L; ++t) {
        s += p[t];
        s2 += (double)p[t] * p[t];
      }
    }
    const double m = s / n;
    double v = s2 / n - m * m;
    if (v < 0) v = 0;
    st.mean[c] = (float)m;
    st.std[c] = std::max(1e-6f, (float)std::sqrt(v));
  }
  auto apply = [&](EEGTrialSet& set) {
    if (set.n_channels != C) throw std::invalid_argument("standardize: channel count mismatch");
    for (size_t i = 0; i < set.n_trials(); ++i)
      for (int c = 0; c < C; ++c) {
        float* p = set.trial(i) + (size_t)c * set.n_samples;
        for (int t = 0; t < set.n_samples; ++t) p[t] = (p[t] - st.mean[c]) / st.std[c];
      }
  };
  apply(train);
  for (auto* o : others) apply(*o);
  return st;
}

// ---- session splits ----

namespace {

EEGTrialSet select(const EEGTrialSet& set, const std::vector<size_t>& idx) {
  EEGTrialSet out;
  out.n_channels = set.n_channels;
  out.n_samples = set.n_samples;
  out.n_classes = set.n_classes;
  out.sampling_rate_hz = set.sampling_rate_hz;
  out.channel_names = set.channel_names;
  const size_t sz = (size_t)set.n_channels * set.n_samples;
  for (size_t i : idx) {
    out.data.insert(out.data.end(), set.trial(i), set.trial(i) + sz);
    out.labels.push_back(set.labels[i]);
    out.session_ids.push_back(set.session_ids[i]);
  }
  return out;
}

}  // namespace

SessionSplit split_sessions(const EEGTrialSet& set, const SplitSpec& spec) {
  for (const auto& s : spec.train_sessions)
    if (spec.test_sessions.count(s))
      throw std::invalid_argument("split: session '" + s + "' appears in both train and test");
  std::vector<size_t> train_idx, test_idx;
  for (size_t i = 0; i < set.n_trials(); ++i) {
    if (spec.train_sessions.count(set.session_ids[i]))
      train_idx.push_back(i);
    else if (spec.test_sessions.count(set.session_ids[i]))
      test_idx.push_back(i);
  }
  // validation: last val_fraction of training trials per class, in order
  std::map<int, std::vector<size_t>> by_class;
  for (size_t i : train_idx) by_class[set.labels[i]].push_back(i);
  std::set<size_t> val_set;
  if (spec.val_fraction > 0) {
    for (auto& [cls, idx] : by_class) {
      const size_t nv = (size_t)std::floor(idx.size() * spec.val_fraction);
      for (size_t j = idx.size() - nv; j < idx.size(); ++j) val_set.insert(idx[j]);
    }
  }
  std::vector<size_t> tr, va;
  for (size_t i : train_idx) (val_set.count(i) ? va : tr).push_back(i);
  SessionSplit out;
  out.train = select(set, tr);
  out.val = select(set, va);
  out.test = select(set, test_idx);
  return out;
}

// ---- synthetic generator ----

EEGTrialSet synth_generate(int n_per_class, int n_classes, int C, int L, float fs, double snr_db,
                           uint64_t seed, const std::string& session_tag) {
  if (n_classes > C) throw std::invalid_argument("synth_generate: n_classes must be <= C");
  EEGTrialSet set;
  set.n_channels = C;
  set.n_samples = L;
  set.n_classes = n_classes;
  set.sampling_rate_hz = fs;
  for (int c = 0; c < C; ++c) set.channel_names.push_back("ch" + std::to_string(c));
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> freq(8.0, 12.0);
  std::uniform_real_distribution<double> phase(0.0, 2.0 * M_PI);
  const double snr = std::pow(10.0, snr_db / 10.0);

  for (int k = 0; k < n_classes; ++k)
    for (int r = 0; r < n_per_class; ++r) {
      std::vector<float> trial((size_t)C * L);
      // pink-ish noise per channel (Kellet 3-pole filter), unit-power scaled
      for (int c = 0; c < C; ++c) {
        double b0 = 0, b1 = 0, b2 = 0, pw = 0;
        std::vector<double> noise(L);
        for (int t = 0; t < L; ++t) {
          const double w = gauss(rng);
          b0 = 0.99765 * b0 + w * 0.0990460;
          b1 = 0.96300 * b1 + w * 0.2965164;
          b2 = 0.57000 * b2 + w * 1.0526913;
          noise[t] = b0 + b1 + b2 + w * 0.1848;
          pw += noise[t] * noise[t];
        }
        const double scale = 1.0 / std::sqrt(std::max(pw / L, 1e-12));
        for (int t = 0; t < L; ++t) trial[(size_t)c * L + t] = (float)(noise[t] * scale);
      }
      // class burst on channel k, half amplitude on neighbors
      const double f0 = freq(rng);
      const double ph = phase(rng);
      const int active = k % C;
      std::vector<double> burst(L);
      double bp = 0;
      for (int t = 0; t < L; ++t) {
        const double env = 0.5 * (1.0 - std::cos(2.0 * M_PI * t / (L - 1)));  // Hann
        burst[t] = env * std::sin(2.0 * M_PI * f0 * t / fs + ph);
        bp += burst[t] * burst[t];
      }
      const double amp = std::sqrt(snr / std::max(bp / L, 1e-12));
      for (int t = 0; t < L; ++t) {
        trial[(size_t)active * L + t] += (float)(amp * burst[t]);
        if (active > 0) trial[(size_t)(active - 1) * L + t] += (float)(0.5 * amp * burst[t]);
        if (active + 1 < C) trial[(size_t)(active + 1) * L + t] += (float)(0.5 * amp * burst[t]);
      }
      set.data.insert(set.data.end(), trial.begin(), trial.end());
      set.labels.push_back(k);
      set.session_ids.push_back(session_tag);
    }
  set.validate();
  return set;
}

// ---- band-power oracle ----

std::vector<int> band_power_predict(const EEGTrialSet& set, double f_lo, double f_hi) {
  std::vector<int> pred(set.n_trials());
  const int L = set.n_samples, C = set.n_channels;
  const double fs = set.sampling_rate_hz;
  const int k_lo = std::max(1, (int)std::floor(f_lo * L / fs));
  const int k_hi = std::min(L / 2, (int)std::ceil(f_hi * L / fs));
  // class k rides on channel k, so the argmax only needs the class channels
  const int n_active = std::min(C, set.n_classes);
  for (size_t i = 0; i < set.n_trials(); ++i) {
    double best = -1;
    int best_c = 0;
    for (int c = 0; c < n_active; ++c) {
      const float* x = set.trial(i) + (size_t)c * L;
      double power = 0;
      for (int k = k_lo; k <= k_hi; ++k) {
        double re = 0, im = 0;
        for (int t = 0; t < L; ++t) {
          const double a = 2.0 * M_PI * k * t / L;
          re += x[t] * std::cos(a);
          im -= x[t] * std::sin(a);
        }
        power += re * re + im * im;
      }
      if (power > best) {
        best = power;
        best_c = c;
      }
    }
    pred[i] = best_c;
  }
  return pred;
}

double band_power_accuracy(const EEGTrialSet& set) {
  auto pred = band_power_predict(set);
  size_t ok = 0;
  for (size_t i = 0; i < set.n_trials(); ++i) ok += pred[i] == set.labels[i];
  return set.n_trials() ? 100.0 * ok / set.n_trials() : 0.0;
}

}  // namespace stm
