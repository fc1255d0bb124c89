#pragma once

// Trial ingestion, the ETA v1 archive format, CSV import, session splits,
// 8-segment recombination augmentation, standardization and the synthetic
// separable-EEG generator.

#include <cstdint>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace stm {

struct EEGTrialSet {
  int n_channels = 0;
  int n_samples = 0;
  int n_classes = 0;
  float sampling_rate_hz = 250.f;
  std::vector<float> data;  // trial-major, channel-then-sample
  std::vector<int> labels;
  std::vector<std::string> session_ids;
  std::vector<std::string> channel_names;

  size_t n_trials() const { return labels.size(); }
  float* trial(size_t i) { return data.data() + i * (size_t)n_channels * n_samples; }
  const float* trial(size_t i) const { return data.data() + i * (size_t)n_channels * n_samples; }
  void validate() const;
};

struct SplitSpec {
  std::set<std::string> train_sessions;
  std::set<std::string> test_sessions;
  double val_fraction = 0.2;
};

// Archive errors are distinct types so callers can tell them apart.
struct ArchiveError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct MalformedHeaderError : ArchiveError {
  using ArchiveError::ArchiveError;
};
struct VersionMismatchError : ArchiveError {
  using ArchiveError::ArchiveError;
};
struct TruncatedPayloadError : ArchiveError {
  using ArchiveError::ArchiveError;
};

void write_archive(const EEGTrialSet& set, const std::string& path);
EEGTrialSet read_archive(const std::string& path);

// One CSV per trial (rows = samples, cols = channels) plus manifest.json.
EEGTrialSet import_csv(const std::string& dir);

// Largest L_eff <= L with L_eff % n_segments == 0 and
// (L_eff - pool_window) % pool_stride == 0.
int crop_length(int L, int pool_window, int pool_stride, int n_segments = 8);
EEGTrialSet crop_to(const EEGTrialSet& set, int L_eff);

// Per-epoch augmentation: each artificial trial keeps segment slots in
// temporal order, slot i drawn from a uniformly random same-class real trial.
EEGTrialSet augment_recombine(const EEGTrialSet& train, int n_segments, int multiplier, uint64_t seed,
                              std::vector<std::string>* warnings = nullptr);

struct ChannelStats {
  std::vector<float> mean, std;
};

ChannelStats standardize(EEGTrialSet& train, std::vector<EEGTrialSet*> others);

struct SessionSplit {
  EEGTrialSet train, val, test;
};
SessionSplit split_sessions(const EEGTrialSet& set, const SplitSpec& spec);

// Synthetic separable set: class k is an 8-12 Hz burst amplitude-modulated on
// channel (k mod C), attenuated on neighbors, over pink noise at the given SNR.
EEGTrialSet synth_generate(int n_per_class, int n_classes, int C, int L, float fs, double snr_db,
                           uint64_t seed, const std::string& session_tag = "synth");

// Band-power reference classifier (8-12 Hz per channel, argmax channel).
std::vector<int> band_power_predict(const EEGTrialSet& set, double f_lo = 8.0, double f_hi = 12.0);
double band_power_accuracy(const EEGTrialSet& set);

}  // namespace stm
