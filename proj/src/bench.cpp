#include "eegm2/bench.hpp"

#include <chrono>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "eegm2/arch.hpp"
#include "eegm2/memory.hpp"
#include "eegm2/repr.hpp"

namespace eegm2::bench {

namespace {
constexpr int64_t kMlpClasses = 2;
}

struct Harness::Impl {
  std::unique_ptr<Model<float>> model;
  std::unique_ptr<MlpProbe<float>> head;  // light classifier head
  int64_t channels = 16;
};

Harness::Harness(const std::string& variant, uint64_t seed, int64_t channels)
    : variant_(variant), impl_(std::make_unique<Impl>()) {
  impl_->channels = channels;
  if (variant == "full") {
    impl_->model = std::make_unique<Model<float>>(full_preset(channels), seed);
  } else if (variant == "s5") {
    ArchConfig cfg = full_preset(channels);
    cfg.variant = Variant::S5;
    impl_->model = std::make_unique<Model<float>>(cfg, seed);
  } else if (variant == "light") {
    impl_->model = std::make_unique<Model<float>>(light_preset(channels), seed);
    const int64_t d3 = impl_->model->config().stage_widths[2];
    impl_->head = std::make_unique<MlpProbe<float>>(d3 * kReprStats, kMlpClasses, seed);
  } else {
    throw ConfigError("bench: unknown variant '" + variant + "' (full|light|s5)");
  }
}

Harness::~Harness() = default;
Harness::Harness(Harness&&) noexcept = default;
Harness& Harness::operator=(Harness&&) noexcept = default;

int64_t Harness::param_count() const {
  int64_t n = impl_->model->params().count_scalars();
  if (impl_->head) n += impl_->head->param_count();
  return n;
}

int64_t Harness::channels() const { return impl_->channels; }

std::shared_ptr<void> Harness::make_input(int64_t seq_len, uint64_t seed) const {
  Rng rng = Rng(seed).fork("bench-input");
  auto t = std::make_shared<Tensor<float>>(Shape{1, impl_->channels, seq_len});
  for (int64_t i = 0; i < t->numel(); ++i)
    t->data()[i] = static_cast<float>(rng.uniform(-1.0, 1.0));
  return t;
}

void Harness::run_forward(const void* input_tensor) const {
  const auto& x = *static_cast<const Tensor<float>*>(input_tensor);
  NoGradGuard ng;
  if (impl_->head) {
    // Light deployment path: encoder -> statistics -> classifier.
    const int64_t ptot = impl_->model->config().pool_total();
    const int64_t T = x.size(2);
    const int64_t t_pad = (T + ptot - 1) / ptot * ptot;
    auto enc = impl_->model->encode(pad_time(Var<float>::constant(x), t_pad));
    Var<float> z = extract_stats(enc.z);
    Var<float> flat = reshape(z, {z.shape()[0], z.shape()[1] * z.shape()[2]});
    impl_->head->forward(flat);
  } else {
    impl_->model->forward(Var<float>::constant(x));
  }
}

MemoryResult measure_peak_memory(const Harness& h, int64_t seq_len, std::size_t cap_bytes) {
  auto& meter = memory::Meter::instance();
  MemoryResult res;
  memory::CapGuard cap(cap_bytes);
  const std::size_t baseline = meter.current();
  meter.reset_peak();
  try {
    auto x = h.make_input(seq_len, 0);
    h.run_forward(x.get());
    res.peak_bytes = meter.peak() - baseline;
  } catch (const OomError&) {
    res.oom = true;
    res.peak_bytes = 0;
  }
  return res;
}

SpeedResult measure_speed(const Harness& h, int64_t seq_len, std::size_t cap_bytes,
                          int warmup, int runs) {
  SpeedResult res;
  memory::CapGuard cap(cap_bytes);
  try {
    auto x = h.make_input(seq_len, 0);
    for (int i = 0; i < warmup; ++i) h.run_forward(x.get());
    double total_ms = 0.0;
    for (int i = 0; i < runs; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      h.run_forward(x.get());
      const auto t1 = std::chrono::steady_clock::now();
      total_ms += std::chrono::duration<double, std::milli>(t1 - t0).count();
    }
    res.timed_runs = runs;
    const double mean_ms = total_ms / static_cast<double>(runs);  // batch size 1
    res.samples_per_ms = 1.0 / mean_ms;
  } catch (const OomError&) {
    res.oom = true;
  }
  return res;
}

std::vector<BenchRecord> sweep(const SweepOptions& opts) {
  std::vector<BenchRecord> records;
  for (const auto& variant : opts.variants) {
    Harness h(variant, opts.seed);
    for (int64_t len : opts.seq_lens) {
      BenchRecord rec;
      rec.variant = variant;
      rec.seq_len = len;
      rec.param_count = h.param_count();
      MemoryResult mem = measure_peak_memory(h, len, opts.cap_bytes);
      rec.oom = mem.oom;
      rec.peak_mem_bytes = mem.peak_bytes;
      if (!mem.oom && opts.measure_speed) {
        SpeedResult sp = measure_speed(h, len, opts.cap_bytes, opts.warmup, opts.runs);
        rec.oom = rec.oom || sp.oom;
        rec.samples_per_ms = sp.samples_per_ms;
      }
      records.push_back(rec);
    }
  }
  return records;
}

void write_csv(const std::string& path, const std::vector<BenchRecord>& records) {
  std::ofstream os(path);
  if (!os) throw ConfigError("bench: cannot open " + path);
  os << "variant,seq_len,peak_mem_bytes,samples_per_ms,param_count,oom\n";
  for (const auto& r : records) {
    os << r.variant << "," << r.seq_len << "," << r.peak_mem_bytes << ","
       << r.samples_per_ms << "," << r.param_count << "," << (r.oom ? 1 : 0) << "\n";
  }
}

void write_metadata(const std::string& path, const SweepOptions& opts) {
  nlohmann::json j = {{"engine", "eegm2"},
                      {"dtype", "real32"},
                      {"batch", 1},
                      {"cap_bytes", opts.cap_bytes},
                      {"seed", opts.seed},
                      {"warmup_runs", opts.warmup},
                      {"timed_runs", opts.runs},
                      {"seq_lens", opts.seq_lens},
                      {"variants", opts.variants}};
  std::ofstream os(path);
  if (!os) throw ConfigError("bench: cannot open " + path);
  os << j.dump(2) << "\n";
}

double loglog_slope(const std::vector<BenchRecord>& records, const std::string& variant,
                    const std::string& metric) {
  std::vector<std::pair<double, double>> pts;
  int64_t max_len = 0;
  for (const auto& r : records) {
    if (r.variant == variant && !r.oom) max_len = std::max(max_len, r.seq_len);
  }
  for (const auto& r : records) {
    if (r.variant != variant || r.oom) continue;
    if (static_cast<double>(r.seq_len) < static_cast<double>(max_len) / 10.0) continue;
    const double v = metric == "speed" ? r.samples_per_ms
                                       : static_cast<double>(r.peak_mem_bytes);
    if (v <= 0.0) throw ConfigError("loglog_slope: non-positive metric value");
    pts.emplace_back(std::log(static_cast<double>(r.seq_len)), std::log(v));
  }
  if (pts.size() < 4) {
    throw ConfigError("loglog_slope: need >= 4 non-oom points in the top decade, got " +
                      std::to_string(pts.size()));
  }
  double sx = 0, sy = 0;
  for (auto& [x, y] : pts) {
    sx += x;
    sy += y;
  }
  const double mx = sx / static_cast<double>(pts.size());
  const double my = sy / static_cast<double>(pts.size());
  double num = 0, den = 0;
  for (auto& [x, y] : pts) {
    num += (x - mx) * (y - my);
    den += (x - mx) * (x - mx);
  }
  return num / den;
}

}  // namespace eegm2::bench
