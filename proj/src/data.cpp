#include "eegm2/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>

#include <json.hpp>

#include "eegm2/rng.hpp"

namespace eegm2::data {

namespace fs = std::filesystem;
using nlohmann::json;

void save_manifest(const std::string& path, const DatasetManifest& m) {
  json j = {{"format", kManifestFormatTag},
            {"name", m.name},
            {"sampling_rate_hz", m.sampling_rate_hz},
            {"channels", m.channels},
            {"records", json::array()}};
  for (const auto& r : m.records) {
    json rec = {{"file", r.file}, {"subject_id", r.subject_id}, {"n_samples", r.n_samples}};
    if (r.label) rec["label"] = *r.label;
    j["records"].push_back(rec);
  }
  std::ofstream os(path);
  if (!os) throw ConfigError("save_manifest: cannot open " + path);
  os << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("load_manifest: cannot open " + path);
  json j;
  try {
    is >> j;
  } catch (const json::exception& e) {
    throw ConfigError("load_manifest: parse error in " + path + ": " + e.what());
  }
  if (j.value("format", "") != kManifestFormatTag) {
    throw ConfigError("load_manifest: unknown format tag in " + path);
  }
  DatasetManifest m;
  m.name = j.at("name").get<std::string>();
  m.sampling_rate_hz = j.at("sampling_rate_hz").get<double>();
  m.channels = j.at("channels").get<int64_t>();
  for (const auto& rec : j.at("records")) {
    RecordMeta r;
    r.file = rec.at("file").get<std::string>();
    r.subject_id = rec.at("subject_id").get<std::string>();
    r.n_samples = rec.at("n_samples").get<int64_t>();
    if (r.subject_id.empty()) {
      throw ConfigError("load_manifest: empty subject_id for record " + r.file);
    }
    if (rec.contains("label")) r.label = rec.at("label").get<int>();
    m.records.push_back(std::move(r));
  }
  return m;
}

void write_payload(const std::string& path, const std::vector<float>& samples) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("write_payload: cannot open " + path);
  os.write(reinterpret_cast<const char*>(samples.data()),
           static_cast<std::streamsize>(samples.size() * sizeof(float)));
  if (!os) throw ConfigError("write_payload: write failed for " + path);
}

std::vector<float> read_payload(const std::string& path) {
  std::ifstream is(path, std::ios::binary | std::ios::ate);
  if (!is) throw ConfigError("read_payload: cannot open " + path);
  const std::streamoff bytes = is.tellg();
  if (bytes % sizeof(float) != 0) {
    throw ConfigError("read_payload: " + path + " size is not a float multiple");
  }
  std::vector<float> out(static_cast<std::size_t>(bytes) / sizeof(float));
  is.seekg(0);
  is.read(reinterpret_cast<char*>(out.data()), bytes);
  if (!is) throw ConfigError("read_payload: read failed for " + path);
  return out;
}

DatasetReader::DatasetReader(std::string manifest_path)
    : dir_(fs::path(manifest_path).parent_path().string()),
      manifest_(load_manifest(manifest_path)) {}

RecordData DatasetReader::load(std::size_t i) const {
  if (i >= manifest_.records.size()) throw ConfigError("DatasetReader: record index out of range");
  const RecordMeta& meta = manifest_.records[i];
  RecordData rec;
  rec.meta = meta;
  const std::string path = dir_.empty() ? meta.file : dir_ + "/" + meta.file;
  rec.samples = read_payload(path);
  const int64_t expect = manifest_.channels * meta.n_samples;
  if (static_cast<int64_t>(rec.samples.size()) != expect) {
    throw ConfigError("record '" + meta.file + "': payload has " +
                      std::to_string(rec.samples.size() / manifest_.channels) +
                      " samples/channel, manifest declares " +
                      std::to_string(meta.n_samples));
  }
  return rec;
}

std::vector<WindowRow> window(const RecordData& rec, int64_t window_len, int64_t stride) {
  if (window_len < 1) throw ConfigError("window: window_len must be >= 1");
  if (stride <= 0) stride = window_len;
  const int64_t len = rec.meta.n_samples;
  const int64_t channels =
      len > 0 ? static_cast<int64_t>(rec.samples.size()) / len : 0;
  std::vector<WindowRow> out;
  if (window_len > len) {
    std::cerr << "warning: record '" << rec.meta.file << "' shorter than window ("
              << len << " < " << window_len << "), skipped\n";
    return out;
  }
  const int64_t count = (len - window_len) / stride + 1;
  out.reserve(static_cast<std::size_t>(count));
  for (int64_t w = 0; w < count; ++w) {
    WindowRow row;
    row.subject_id = rec.meta.subject_id;
    row.label = rec.meta.label;
    row.x.resize(static_cast<std::size_t>(channels * window_len));
    const int64_t start = w * stride;
    for (int64_t c = 0; c < channels; ++c) {
      std::memcpy(row.x.data() + c * window_len, rec.samples.data() + c * len + start,
                  static_cast<std::size_t>(window_len) * sizeof(float));
    }
    out.push_back(std::move(row));
  }
  return out;
}

SubjectSplit subject_split(const std::vector<RecordMeta>& records, double train_frac,
                           double val_frac, double test_frac, uint64_t seed) {
  if (train_frac < 0 || val_frac < 0 || test_frac < 0 ||
      train_frac + val_frac + test_frac <= 0) {
    throw ConfigError("subject_split: fractions must be non-negative and sum > 0");
  }
  std::map<std::string, std::vector<std::size_t>> by_subject;
  std::map<std::string, int64_t> subject_samples;
  for (std::size_t i = 0; i < records.size(); ++i) {
    by_subject[records[i].subject_id].push_back(i);
    subject_samples[records[i].subject_id] += records[i].n_samples;
  }
  if (by_subject.size() < 3) {
    throw ConfigError("subject_split: need at least 3 distinct subjects, got " +
                      std::to_string(by_subject.size()));
  }
  std::vector<std::string> subjects;
  int64_t total = 0;
  for (const auto& [sid, idx] : by_subject) {
    subjects.push_back(sid);
    total += subject_samples[sid];
  }
  Rng rng = Rng(seed).fork("subject-split");
  rng.shuffle(subjects.begin(), subjects.end());

  const double fsum = train_frac + val_frac + test_frac;
  const double target[3] = {train_frac / fsum * static_cast<double>(total),
                            val_frac / fsum * static_cast<double>(total),
                            test_frac / fsum * static_cast<double>(total)};
  double assigned[3] = {0, 0, 0};
  std::vector<std::vector<std::string>> members(3);
  for (const auto& sid : subjects) {
    int best = 0;
    double best_deficit = target[0] - assigned[0];
    for (int s = 1; s < 3; ++s) {
      const double d = target[s] - assigned[s];
      if (d > best_deficit) {
        best_deficit = d;
        best = s;
      }
    }
    members[static_cast<std::size_t>(best)].push_back(sid);
    assigned[best] += static_cast<double>(subject_samples[sid]);
  }
  // A positive-fraction split must not end up empty; donate from the
  // largest one.
  const double fracs[3] = {train_frac, val_frac, test_frac};
  for (int s = 0; s < 3; ++s) {
    if (fracs[s] > 0 && members[static_cast<std::size_t>(s)].empty()) {
      int donor = 0;
      for (int d = 1; d < 3; ++d) {
        if (members[static_cast<std::size_t>(d)].size() >
            members[static_cast<std::size_t>(donor)].size())
          donor = d;
      }
      if (members[static_cast<std::size_t>(donor)].size() > 1) {
        members[static_cast<std::size_t>(s)].push_back(
            members[static_cast<std::size_t>(donor)].back());
        members[static_cast<std::size_t>(donor)].pop_back();
      }
    }
  }
  SubjectSplit out;
  std::vector<std::size_t>* dests[3] = {&out.train, &out.val, &out.test};
  for (int s = 0; s < 3; ++s) {
    for (const auto& sid : members[static_cast<std::size_t>(s)]) {
      for (std::size_t i : by_subject[sid]) dests[s]->push_back(i);
    }
    std::sort(dests[s]->begin(), dests[s]->end());
  }
  return out;
}

SynthConfig synth_default_preset() { return SynthConfig{}; }

SynthConfig synth_long_preset(int64_t samples_per_window) {
  SynthConfig c;
  c.channels = 16;
  c.samples_per_window = samples_per_window;
  c.windows_per_subject = 8;
  return c;
}

namespace {

// Pink-noise window via spectral synthesis: amplitude ~ 1/sqrt(k) per
// harmonic with random phases, normalized to unit variance.
void fill_pink_noise(float* dst, int64_t T, Rng& rng) {
  const int64_t K = T / 2;
  std::vector<double> phases(static_cast<std::size_t>(K));
  double var = 0.0;
  for (int64_t k = 1; k <= K; ++k) {
    phases[static_cast<std::size_t>(k - 1)] = rng.uniform(0.0, 6.283185307179586);
    var += 0.5 / static_cast<double>(k);
  }
  const double norm = 1.0 / std::sqrt(var);
  for (int64_t t = 0; t < T; ++t) dst[t] = 0.0f;
  for (int64_t k = 1; k <= K; ++k) {
    const double amp = norm / std::sqrt(static_cast<double>(k));
    const double w = 6.283185307179586 * static_cast<double>(k) / static_cast<double>(T);
    const double phi = phases[static_cast<std::size_t>(k - 1)];
    for (int64_t t = 0; t < T; ++t) {
      dst[t] += static_cast<float>(amp * std::cos(w * static_cast<double>(t) + phi));
    }
  }
}

}  // namespace

DatasetManifest synth_generate(const std::string& dir, const SynthConfig& cfg) {
  if (!(cfg.sampling_rate_hz > 2.0 * cfg.osc_freq_hi)) {
    throw ConfigError("synth_generate: sampling rate " +
                      std::to_string(cfg.sampling_rate_hz) +
                      " violates Nyquist for " + std::to_string(cfg.osc_freq_hi) + " Hz");
  }
  if (cfg.n_subjects < 1 || cfg.windows_per_subject < 1 || cfg.channels < 1 ||
      cfg.samples_per_window < 2) {
    throw ConfigError("synth_generate: degenerate geometry");
  }
  fs::create_directories(dir);
  DatasetManifest m;
  m.name = cfg.name;
  m.sampling_rate_hz = cfg.sampling_rate_hz;
  m.channels = cfg.channels;

  const int64_t C = cfg.channels, T = cfg.samples_per_window;
  Rng root(cfg.seed);
  for (int64_t s = 0; s < cfg.n_subjects; ++s) {
    Rng srng = root.fork("subject-" + std::to_string(s));
    const double freq = srng.uniform(cfg.osc_freq_lo, cfg.osc_freq_hi);
    const double amp = cfg.osc_amplitude * srng.uniform(0.7, 1.3);
    const double noise = srng.uniform(cfg.noise_lo, cfg.noise_hi);
    std::vector<double> gains(static_cast<std::size_t>(C));
    for (int64_t c = 0; c < C; ++c) gains[static_cast<std::size_t>(c)] = srng.uniform(0.5, 1.5);

    for (int64_t w = 0; w < cfg.windows_per_subject; ++w) {
      const int label = static_cast<int>(w % 2);
      const double phase = srng.uniform(0.0, 6.283185307179586);
      std::vector<float> payload(static_cast<std::size_t>(C * T));
      for (int64_t c = 0; c < C; ++c) {
        float* row = payload.data() + c * T;
        fill_pink_noise(row, T, srng);
        for (int64_t t = 0; t < T; ++t) row[t] = static_cast<float>(row[t] * noise);
        if (label == 1 && amp != 0.0) {
          const double g = amp * gains[static_cast<std::size_t>(c)];
          const double w0 = 6.283185307179586 * freq / cfg.sampling_rate_hz;
          for (int64_t t = 0; t < T; ++t) {
            row[t] += static_cast<float>(g * std::sin(w0 * static_cast<double>(t) + phase));
          }
        }
      }
      RecordMeta meta;
      meta.file = "s" + std::to_string(s) + "_w" + std::to_string(w) + ".f32";
      meta.subject_id = "subj" + std::to_string(s);
      meta.label = label;
      meta.n_samples = T;
      write_payload(dir + "/" + meta.file, payload);
      m.records.push_back(meta);
    }
  }
  save_manifest(dir + "/manifest.json", m);
  return m;
}

std::vector<WindowRow> load_windows(const DatasetReader& reader,
                                    const std::vector<std::size_t>& record_idx,
                                    int64_t window_len) {
  std::vector<WindowRow> rows;
  for (std::size_t i : record_idx) {
    auto w = window(reader.load(i), window_len);
    rows.insert(rows.end(), w.begin(), w.end());
  }
  return rows;
}

}  // namespace eegm2::data
