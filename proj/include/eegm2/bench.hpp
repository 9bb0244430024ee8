#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "eegm2/error.hpp"

namespace eegm2::bench {

inline constexpr std::size_t kDefaultMemCap = 48ull * 1024 * 1024 * 1024;  // 48 GiB

inline const std::vector<int64_t>& default_seq_lens() {
  static const std::vector<int64_t> lens = {50, 128, 512, 1024, 2048, 4096, 8192, 12000};
  return lens;
}

struct BenchRecord {
  std::string variant;
  int64_t seq_len = 0;
  std::size_t peak_mem_bytes = 0;
  double samples_per_ms = 0.0;
  int64_t param_count = 0;
  bool oom = false;
};

/// A model under measurement: "full" and "s5" run the reconstruction
/// network, "light" runs the encoder + statistics + MLP classifier path.
class Harness {
 public:
  Harness(const std::string& variant, uint64_t seed, int64_t channels = 16);
  ~Harness();
  Harness(Harness&&) noexcept;
  Harness& operator=(Harness&&) noexcept;

  const std::string& variant() const { return variant_; }
  int64_t param_count() const;
  int64_t channels() const;

  /// One inference forward over a [1, C, seq_len] input already built by the
  /// caller (see make_input); no gradient recording.
  void run_forward(const void* input_tensor) const;

  /// Deterministic random input for the given length (owned opaque tensor).
  std::shared_ptr<void> make_input(int64_t seq_len, uint64_t seed) const;

 private:
  std::string variant_;
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

struct MemoryResult {
  std::size_t peak_bytes = 0;
  bool oom = false;
};

/// Peak live tensor bytes allocated within one forward pass (measured above
/// the pre-forward baseline, so persistent parameters are excluded from the
/// reported number while still counting toward the cap).
MemoryResult measure_peak_memory(const Harness& h, int64_t seq_len,
                                 std::size_t cap_bytes = kDefaultMemCap);

struct SpeedResult {
  double samples_per_ms = 0.0;
  bool oom = false;
  int timed_runs = 0;
};

/// Samples per millisecond as the reciprocal of the mean per-sample forward
/// latency; `warmup` untimed runs precede `runs` timed ones.
SpeedResult measure_speed(const Harness& h, int64_t seq_len,
                          std::size_t cap_bytes = kDefaultMemCap, int warmup = 15,
                          int runs = 10);

struct SweepOptions {
  std::vector<std::string> variants = {"full", "light", "s5"};
  std::vector<int64_t> seq_lens = default_seq_lens();
  std::size_t cap_bytes = kDefaultMemCap;
  uint64_t seed = 0;
  int warmup = 15;
  int runs = 10;
  bool measure_speed = true;
};

/// Full cross-product sweep; OOM points are recorded, not fatal.
std::vector<BenchRecord> sweep(const SweepOptions& opts);

void write_csv(const std::string& path, const std::vector<BenchRecord>& records);
void write_metadata(const std::string& path, const SweepOptions& opts);

/// Least-squares slope of log(metric) vs log(seq_len) over the largest
/// decade of non-OOM lengths for one variant. Needs >= 4 such points.
double loglog_slope(const std::vector<BenchRecord>& records, const std::string& variant,
                    const std::string& metric = "peak_mem");

}  // namespace eegm2::bench
