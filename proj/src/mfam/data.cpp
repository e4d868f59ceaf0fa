#include "mfam/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <sstream>

#include "mfam/error.hpp"
#include "mfam/io.hpp"
#include "mfam/rng.hpp"

namespace mfam {

namespace fs = std::filesystem;

void SynthSpec::validate() const {
  if (num_subjects < 1) fail(ErrorCode::Config, "synth: num_subjects must be >= 1");
  if (recordings_per_subject < 1)
    fail(ErrorCode::Config, "synth: recordings_per_subject must be >= 1");
  if (fs <= 0.0) fail(ErrorCode::Config, "synth: fs must be positive");
  if (duration_s * fs < fs) fail(ErrorCode::Config, "synth: duration must be at least 1 second");
  if (!(burst_density > 0.0) || burst_density > 1.0)
    fail(ErrorCode::Config, "synth: burst_density must lie in (0, 1]");
  if (burst_amplitude < 0.0 || noise_amplitude < 0.0 || background_amplitude < 0.0)
    fail(ErrorCode::Config, "synth: amplitudes must be >= 0");
  if (subject_gain_spread < 0.0 || subject_gain_spread >= 1.0)
    fail(ErrorCode::Config, "synth: subject_gain_spread must lie in [0, 1)");
  if (!(burst_band.f_low >= 0.0) || !(burst_band.f_low < burst_band.f_high) ||
      !(burst_band.f_high <= fs / 2.0))
    fail(ErrorCode::Config, "synth: burst_band must satisfy 0 <= low < high <= fs/2");
}

// --- recording csv ----------------------------------------------------------

Recording load_recording(const fs::path& path) {
  const std::string text = read_file(path);
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) fail(ErrorCode::Format, path.string() + ": empty file");

  const auto header = split(std::string(trim(line)), ',');
  std::vector<std::string> expected = {"time"};
  expected.insert(expected.end(), kChannelNames.begin(), kChannelNames.end());
  for (const std::string& col : expected) {
    if (std::find(header.begin(), header.end(), col) == header.end()) {
      if (col == "time") fail(ErrorCode::Format, path.string() + ": missing time column");
      fail(ErrorCode::Format, path.string() + ": missing channel " + col);
    }
  }
  if (header != expected)
    fail(ErrorCode::Format, path.string() + ": header must be exactly 'time,ax,ay,az,gx,gy,gz'");

  std::vector<double> times;
  std::vector<std::vector<double>> cols(kChannelNames.size());
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    const auto t = trim(line);
    if (t.empty()) continue;
    const auto parts = split(t, ',');
    if (parts.size() != expected.size())
      fail(ErrorCode::Format, path.string() + ":" + std::to_string(line_no) + ": expected " +
                                  std::to_string(expected.size()) + " fields");
    times.push_back(parse_double(parts[0], path.string().c_str()));
    for (std::size_t c = 0; c < cols.size(); ++c)
      cols[c].push_back(parse_double(parts[c + 1], path.string().c_str()));
  }
  if (times.size() < 2) fail(ErrorCode::Length, path.string() + ": need at least 2 samples");
  for (std::size_t i = 1; i < times.size(); ++i)
    if (!(times[i] > times[i - 1]))
      fail(ErrorCode::Format, path.string() + ": time column is not strictly monotone at row " +
                                  std::to_string(i + 1));

  Recording rec;
  const double dt = (times.back() - times.front()) / static_cast<double>(times.size() - 1);
  rec.fs = std::round(1.0 / dt);
  if (!(rec.fs > 0.0)) fail(ErrorCode::Format, path.string() + ": cannot infer sampling rate");
  const std::size_t t_len = times.size();
  rec.samples = Tensor({cols.size(), t_len});
  for (std::size_t c = 0; c < cols.size(); ++c)
    std::copy(cols[c].begin(), cols[c].end(),
              rec.samples.data.begin() + static_cast<long>(c * t_len));

  // filename convention <subject>_<activity>_<label>.csv, when it applies
  const std::string stem = path.stem().string();
  const auto parts = split(stem, '_');
  if (parts.size() >= 3) {
    rec.subject_id = parts.front();
    rec.label = static_cast<int>(parse_long(parts.back(), "filename label"));
    std::string act;
    for (std::size_t i = 1; i + 1 < parts.size(); ++i) {
      if (!act.empty()) act += "_";
      act += parts[i];
    }
    rec.activity = act;
  } else {
    rec.subject_id = stem;
    rec.activity = "unknown";
  }
  return rec;
}

void write_recording(const Recording& rec, const fs::path& path) {
  if (rec.samples.rank() != 2) fail(ErrorCode::Shape, "write_recording: samples must be [C x T]");
  const std::size_t c = rec.channels(), t_len = rec.length();
  if (c != kChannelNames.size())
    fail(ErrorCode::Shape, "write_recording: expected " + std::to_string(kChannelNames.size()) +
                               " channels, got " + std::to_string(c));
  std::ostringstream out;
  out << "time";
  for (const auto& n : kChannelNames) out << "," << n;
  out << "\n";
  char tbuf[32];
  for (std::size_t t = 0; t < t_len; ++t) {
    std::snprintf(tbuf, sizeof(tbuf), "%.6f", static_cast<double>(t) / rec.fs);
    out << tbuf;
    for (std::size_t ci = 0; ci < c; ++ci) out << "," << format_double(rec.samples.at2(ci, t));
    out << "\n";
  }
  write_file_atomic(path, out.str());
}

// --- preprocessing ----------------------------------------------------------

namespace {

std::size_t grid_window(double fs) { return static_cast<std::size_t>(std::llround(fs)); }
std::size_t grid_stride(double fs) { return std::max<std::size_t>(1, grid_window(fs) / 2); }

std::size_t grid_aligned_length(std::size_t t_len, double fs) {
  const std::size_t w = grid_window(fs);
  const std::size_t s = grid_stride(fs);
  if (t_len < w) return 0;
  return w + ((t_len - w) / s) * s;
}

}  // namespace

Recording preprocess(const Recording& rec) {
  const std::size_t t_new = grid_aligned_length(rec.length(), rec.fs);
  if (t_new == 0)
    fail(ErrorCode::Length, "preprocess: recording shorter than one second (" +
                                std::to_string(rec.length()) + " samples at fs=" +
                                std::to_string(rec.fs) + ")");
  Recording out = rec;
  const std::size_t c = rec.channels();
  out.samples = Tensor({c, t_new});
  for (std::size_t ci = 0; ci < c; ++ci) {
    const double* src = &rec.samples.data[ci * rec.length()];
    double mean = 0.0;
    for (std::size_t t = 0; t < t_new; ++t) mean += src[t];
    mean /= static_cast<double>(t_new);
    double var = 0.0;
    for (std::size_t t = 0; t < t_new; ++t) {
      const double d = src[t] - mean;
      var += d * d;
    }
    double sigma = std::sqrt(var / static_cast<double>(t_new));
    if (sigma < 1e-8) sigma = 1.0;
    double* dst = &out.samples.data[ci * t_new];
    for (std::size_t t = 0; t < t_new; ++t) dst[t] = (src[t] - mean) / sigma;
  }
  return out;
}

// --- synthetic generator ----------------------------------------------------

namespace {

struct LevelProfile {
  double amp_scale;
  double density_scale;
};

// severity-scaled burst strength and count; level 0 carries no bursts
LevelProfile level_profile(int label, SynthClasses classes) {
  if (classes == SynthClasses::Binary) return {label == 0 ? 0.0 : 1.0, 1.0};
  switch (label) {
    case 0: return {0.0, 0.0};
    case 1: return {0.6, 1.0};
    case 2: return {1.0, 2.0};
    default: return {1.5, 3.0};
  }
}

}  // namespace

std::vector<SynthItem> synth_generate(const SynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto t_raw = static_cast<std::size_t>(std::llround(spec.duration_s * spec.fs));
  const std::size_t t_len = grid_aligned_length(t_raw, spec.fs);
  if (t_len == 0) fail(ErrorCode::Config, "synth: duration too short for the instance grid");
  const std::size_t w = grid_window(spec.fs);
  const std::size_t s = grid_stride(spec.fs);
  const std::size_t n_grid = (t_len - w) / s + 1;
  const std::size_t c = kChannelNames.size();
  const std::size_t k = spec.num_classes();

  std::vector<SynthItem> items;
  items.reserve(spec.num_subjects * spec.recordings_per_subject);

  Rng rng(seed);
  for (std::size_t subj = 0; subj < spec.num_subjects; ++subj) {
    char sid[16];
    std::snprintf(sid, sizeof(sid), "s%02zu", subj);
    const double gain =
        rng.uniform(1.0 - spec.subject_gain_spread, 1.0 + spec.subject_gain_spread);

    for (std::size_t ri = 0; ri < spec.recordings_per_subject; ++ri) {
      // binary: diagnosis is a subject property; four_level: severity varies
      // per recording session, so every CV fold sees all levels
      const int label = spec.classes == SynthClasses::Binary
                            ? static_cast<int>(subj % k)
                            : static_cast<int>((subj + ri) % k);
      SynthItem item;
      item.rec.subject_id = sid;
      item.rec.activity = "task";
      item.rec.label = label;
      item.rec.fs = spec.fs;
      item.rec.samples = Tensor({c, t_raw});

      // background: 2-3 slow sinusoids per channel plus white noise
      for (std::size_t ci = 0; ci < c; ++ci) {
        const std::size_t nsin = 2 + rng.below(2);
        std::vector<double> freq(nsin), phase(nsin), amp(nsin);
        for (std::size_t i = 0; i < nsin; ++i) {
          freq[i] = rng.uniform(0.5, 2.0);
          phase[i] = rng.uniform(0.0, 6.283185307179586);
          amp[i] = spec.background_amplitude * rng.uniform(0.5, 1.0);
        }
        double* row = &item.rec.samples.data[ci * t_raw];
        for (std::size_t t = 0; t < t_raw; ++t) {
          double v = 0.0;
          const double ts = static_cast<double>(t) / spec.fs;
          for (std::size_t i = 0; i < nsin; ++i)
            v += amp[i] * std::sin(6.283185307179586 * freq[i] * ts + phase[i]);
          row[t] = v + spec.noise_amplitude * rng.normal();
        }
      }

      const LevelProfile prof = level_profile(label, spec.classes);
      if (prof.amp_scale > 0.0) {
        const auto want = static_cast<std::size_t>(std::max<long long>(
            1, std::llround(prof.density_scale * spec.burst_density *
                            static_cast<double>(n_grid))));
        // draw grid slots until `want` non-overlapping spans are placed
        std::vector<std::size_t> starts;
        std::size_t guard = 0;
        while (starts.size() < want && guard < 64 * n_grid) {
          ++guard;
          const std::size_t slot = rng.below(n_grid);
          const std::size_t start = slot * s;
          bool clash = false;
          for (std::size_t st : starts)
            if (start < st + w && st < start + w) clash = true;
          if (!clash) starts.push_back(start);
        }
        std::sort(starts.begin(), starts.end());

        for (std::size_t start : starts) {
          const double f = rng.uniform(spec.burst_band.f_low, spec.burst_band.f_high);
          const double ph = rng.uniform(0.0, 6.283185307179586);
          const double base = spec.burst_amplitude * prof.amp_scale * gain;
          for (std::size_t ci = 0; ci < c; ++ci) {
            const double ch_scale = rng.uniform(0.5, 1.0);
            double* row = &item.rec.samples.data[ci * t_raw];
            for (std::size_t t = 0; t < w; ++t) {
              const double hann =
                  0.5 * (1.0 - std::cos(6.283185307179586 * static_cast<double>(t) /
                                        static_cast<double>(w - 1)));
              const double ts = static_cast<double>(start + t) / spec.fs;
              row[start + t] +=
                  base * ch_scale * hann * std::sin(6.283185307179586 * f * ts + ph);
            }
          }
          item.ann.spans.push_back({start, start + w});
        }
      }
      items.push_back(std::move(item));
    }
  }
  return items;
}

// --- dataset ----------------------------------------------------------------

std::vector<std::string> Dataset::subjects() const {
  std::set<std::string> s;
  for (const Bag& b : bags) s.insert(b.subject_id);
  return {s.begin(), s.end()};
}

std::vector<std::string> Dataset::activities() const {
  std::set<std::string> s;
  for (const Bag& b : bags) s.insert(b.activity);
  return {s.begin(), s.end()};
}

std::vector<int> Dataset::labels() const {
  std::set<int> s;
  for (const Bag& b : bags) s.insert(b.label);
  return {s.begin(), s.end()};
}

Dataset Dataset::filter_activity(const std::string& activity) const {
  Dataset out;
  for (const Bag& b : bags)
    if (b.activity == activity) out.bags.push_back(b);
  return out;
}

Dataset assemble_dataset(const std::vector<SynthItem>& items,
                         const std::optional<std::string>& activity_filter) {
  Dataset ds;
  for (const SynthItem& item : items) {
    if (activity_filter && item.rec.activity != *activity_filter) continue;
    const Recording pre = preprocess(item.rec);
    Bag bag;
    bag.subject_id = pre.subject_id;
    bag.activity = pre.activity;
    bag.label = pre.label;
    bag.fs = pre.fs;
    bag.x = pre.samples;
    // drop burst spans cut off by grid truncation
    const std::size_t t_new = pre.length();
    for (const BurstSpan& sp : item.ann.spans)
      if (sp.end <= t_new) bag.ann.spans.push_back(sp);
    ds.bags.push_back(std::move(bag));
  }
  if (ds.bags.empty())
    fail(ErrorCode::Config, activity_filter
                                ? "no recordings match activity '" + *activity_filter + "'"
                                : std::string("dataset is empty"));
  return ds;
}

void save_dataset(const std::vector<SynthItem>& items, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir / "recordings", ec);
  if (ec) fail(ErrorCode::Io, "cannot create " + (dir / "recordings").string());

  std::map<std::string, std::size_t> index_within;
  std::ostringstream manifest;
  manifest << "subject_id,activity,label,path\n";
  std::ostringstream bursts;
  bursts << "subject,activity,index,start_sample,end_sample\n";
  bool any_bursts = false;

  for (const SynthItem& item : items) {
    const std::string key = item.rec.subject_id + "/" + item.rec.activity;
    const std::size_t idx = index_within[key]++;
    // keeps <subject>_..._<label>.csv parseable; the manifest stays authoritative
    char name[128];
    std::snprintf(name, sizeof(name), "%s_%s_%03zu_%d.csv", item.rec.subject_id.c_str(),
                  item.rec.activity.c_str(), idx, item.rec.label);
    const std::string rel = std::string("recordings/") + name;
    write_recording(item.rec, dir / rel);
    manifest << item.rec.subject_id << "," << item.rec.activity << "," << item.rec.label << ","
             << rel << "\n";
    for (const BurstSpan& sp : item.ann.spans) {
      any_bursts = true;
      bursts << item.rec.subject_id << "," << item.rec.activity << "," << idx << "," << sp.start
             << "," << sp.end << "\n";
    }
  }
  write_file_atomic(dir / "manifest.csv", manifest.str());
  if (any_bursts) write_file_atomic(dir / "bursts.csv", bursts.str());
}

std::vector<SynthItem> load_dataset(const fs::path& manifest_path) {
  fs::path manifest = manifest_path;
  if (fs::is_directory(manifest)) manifest /= "manifest.csv";
  const fs::path dir = manifest.parent_path();
  std::istringstream in(read_file(manifest));
  std::string line;
  if (!std::getline(in, line) || trim(line) != "subject_id,activity,label,path")
    fail(ErrorCode::Format, manifest.string() + ": bad manifest header");

  std::vector<SynthItem> items;
  std::map<std::string, std::size_t> index_within;
  std::map<std::pair<std::string, std::size_t>, std::size_t> item_at;  // (key, idx) -> items pos
  while (std::getline(in, line)) {
    const auto t = trim(line);
    if (t.empty()) continue;
    const auto parts = split(t, ',');
    if (parts.size() != 4) fail(ErrorCode::Format, manifest.string() + ": bad manifest row");
    SynthItem item;
    item.rec = load_recording(dir / parts[3]);
    item.rec.subject_id = parts[0];
    item.rec.activity = parts[1];
    item.rec.label = static_cast<int>(parse_long(parts[2], "manifest label"));
    const std::string key = item.rec.subject_id + "/" + item.rec.activity;
    const std::size_t idx = index_within[key]++;
    item_at[{key, idx}] = items.size();
    items.push_back(std::move(item));
  }
  if (items.empty()) fail(ErrorCode::Format, manifest.string() + ": no recordings listed");

  const fs::path bursts_path = dir / "bursts.csv";
  if (fs::exists(bursts_path)) {
    std::istringstream bin(read_file(bursts_path));
    if (!std::getline(bin, line) || trim(line) != "subject,activity,index,start_sample,end_sample")
      fail(ErrorCode::Format, bursts_path.string() + ": bad bursts header");
    while (std::getline(bin, line)) {
      const auto t = trim(line);
      if (t.empty()) continue;
      const auto parts = split(t, ',');
      if (parts.size() != 5) fail(ErrorCode::Format, bursts_path.string() + ": bad bursts row");
      const std::string key = parts[0] + "/" + parts[1];
      const auto idx = static_cast<std::size_t>(parse_long(parts[2], "bursts index"));
      const auto it = item_at.find({key, idx});
      if (it == item_at.end())
        fail(ErrorCode::Format, bursts_path.string() + ": burst for unknown recording " + key);
      items[it->second].ann.spans.push_back(
          {static_cast<std::size_t>(parse_long(parts[3], "bursts start")),
           static_cast<std::size_t>(parse_long(parts[4], "bursts end"))});
    }
  }
  return items;
}

std::string dataset_summary_json(const std::vector<SynthItem>& items) {
  std::set<std::string> subjects, activities;
  std::map<int, std::size_t> class_counts;
  for (const SynthItem& it : items) {
    subjects.insert(it.rec.subject_id);
    activities.insert(it.rec.activity);
    class_counts[it.rec.label]++;
  }
  std::ostringstream out;
  out << "{\"subjects\": " << subjects.size() << ", \"recordings\": " << items.size()
      << ", \"activities\": [";
  bool first = true;
  for (const auto& a : activities) {
    if (!first) out << ", ";
    out << "\"" << a << "\"";
    first = false;
  }
  out << "], \"class_counts\": {";
  first = true;
  for (const auto& [label, count] : class_counts) {
    if (!first) out << ", ";
    out << "\"" << label << "\": " << count;
    first = false;
  }
  out << "}}";
  return out.str();
}

}  // namespace mfam
