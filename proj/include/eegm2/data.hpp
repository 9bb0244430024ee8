#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "eegm2/error.hpp"
#include "eegm2/tensor.hpp"

namespace eegm2::data {

// Dataset layout on disk: a JSON manifest plus one raw little-endian
// float32 payload file per record, channel-major ([C][n_samples]).

struct RecordMeta {
  std::string file;
  std::string subject_id;
  std::optional<int> label;
  int64_t n_samples = 0;
};

struct DatasetManifest {
  std::string name;
  double sampling_rate_hz = 0.0;
  int64_t channels = 0;
  std::vector<RecordMeta> records;
};

inline constexpr const char* kManifestFormatTag = "eegm2-dataset-v1";

void save_manifest(const std::string& path, const DatasetManifest& m);
DatasetManifest load_manifest(const std::string& path);

/// One record's samples, channel-major, length channels * n_samples.
struct RecordData {
  RecordMeta meta;
  std::vector<float> samples;
};

void write_payload(const std::string& path, const std::vector<float>& samples);
std::vector<float> read_payload(const std::string& path);

/// Validating reader over a manifest; yields records in manifest order.
class DatasetReader {
 public:
  DatasetReader(std::string manifest_path);

  const DatasetManifest& manifest() const { return manifest_; }
  std::size_t size() const { return manifest_.records.size(); }

  /// Loads record i, checking the payload length against the manifest.
  RecordData load(std::size_t i) const;

 private:
  std::string dir_;
  DatasetManifest manifest_;
};

/// One training example: a [C, T] window with inherited record metadata.
struct WindowRow {
  std::vector<float> x;  // channel-major, C * T
  std::string subject_id;
  std::optional<int> label;
};

/// Cuts [window_len]-sized windows at the given stride (default:
/// non-overlapping). The trailing remainder is dropped; records shorter
/// than the window yield nothing.
std::vector<WindowRow> window(const RecordData& rec, int64_t window_len,
                              int64_t stride = 0);

struct SubjectSplit {
  std::vector<std::size_t> train, val, test;  // record indices
};

/// Partitions records at the subject level, approximating the requested
/// sample-count fractions. No subject appears in more than one split.
SubjectSplit subject_split(const std::vector<RecordMeta>& records,
                           double train_frac, double val_frac, double test_frac,
                           uint64_t seed);

// Synthetic stand-in for the EEG corpora: binary task where class 1 adds a
// subject-specific alpha-band (8-12 Hz) oscillation over a pink-noise
// background, class 0 is background only. Per-subject gain and noise level
// vary to mimic inter-subject variability.
struct SynthConfig {
  int64_t n_subjects = 20;
  int64_t windows_per_subject = 24;
  int64_t channels = 14;
  int64_t samples_per_window = 256;
  double sampling_rate_hz = 128.0;
  uint64_t seed = 0;
  double osc_amplitude = 1.0;  // 0 collapses both classes (null control)
  double osc_freq_lo = 8.0;
  double osc_freq_hi = 12.0;
  double noise_lo = 0.6;
  double noise_hi = 1.6;
  std::string name = "synth-alpha";
};

/// Emotiv-like geometry (14 ch, 2 s windows at 128 Hz).
SynthConfig synth_default_preset();
/// TUAB-like geometry for long-sequence work (16 ch at 128 Hz).
SynthConfig synth_long_preset(int64_t samples_per_window);

/// Generates the dataset under `dir` and returns the manifest (also written
/// to dir/manifest.json). Bit-identical for a fixed config.
DatasetManifest synth_generate(const std::string& dir, const SynthConfig& cfg);

/// Gathers rows into a [B, C, T] tensor plus labels/subjects.
template <class S>
struct SignalBatch {
  Tensor<S> x;
  std::vector<int> labels;
  std::vector<std::string> subjects;
};

template <class S>
SignalBatch<S> to_batch(const std::vector<WindowRow>& rows, int64_t channels,
                        int64_t window_len) {
  if (rows.empty()) throw ConfigError("to_batch: no rows");
  SignalBatch<S> out;
  out.x = Tensor<S>({static_cast<int64_t>(rows.size()), channels, window_len});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (static_cast<int64_t>(rows[i].x.size()) != channels * window_len) {
      throw ShapeError("to_batch: row " + std::to_string(i) + " has wrong size");
    }
    for (int64_t j = 0; j < channels * window_len; ++j) {
      out.x.data()[static_cast<int64_t>(i) * channels * window_len + j] =
          static_cast<S>(rows[i].x[static_cast<std::size_t>(j)]);
    }
    out.labels.push_back(rows[i].label.value_or(-1));
    out.subjects.push_back(rows[i].subject_id);
  }
  return out;
}

/// Windows every record of a split into rows (non-overlapping).
std::vector<WindowRow> load_windows(const DatasetReader& reader,
                                    const std::vector<std::size_t>& record_idx,
                                    int64_t window_len);

}  // namespace eegm2::data
