#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "mfam/fdm.hpp"
#include "mfam/tensor.hpp"

namespace mfam {

inline const std::vector<std::string> kChannelNames = {"ax", "ay", "az", "gx", "gy", "gz"};

// One subject x activity multivariate time series.
struct Recording {
  std::string subject_id;
  std::string activity;
  int label = 0;
  double fs = 100.0;
  std::vector<std::string> channel_names = kChannelNames;
  Tensor samples;  // [C x T]

  std::size_t channels() const { return samples.rank() == 2 ? samples.dim(0) : 0; }
  std::size_t length() const { return samples.rank() == 2 ? samples.dim(1) : 0; }
};

struct BurstSpan {
  std::size_t start = 0;  // inclusive sample index
  std::size_t end = 0;    // exclusive
};

struct BurstAnnotation {
  std::vector<BurstSpan> spans;
};

enum class SynthClasses { Binary, FourLevel };

// Sparse band-limited burst generator: low-frequency background plus white
// noise everywhere; positive classes additionally get Hann-windowed tone
// bursts inside 1-second grid windows.
struct SynthSpec {
  std::size_t num_subjects = 8;
  std::size_t recordings_per_subject = 6;
  double duration_s = 10.0;
  double fs = 100.0;
  Band burst_band{3.0, 7.0};
  double burst_density = 0.1;  // fraction of grid windows carrying a burst
  double burst_amplitude = 2.0;
  double noise_amplitude = 0.1;
  double background_amplitude = 1.0;
  double subject_gain_spread = 0.3;  // per-subject burst gain in 1 +- spread
  SynthClasses classes = SynthClasses::Binary;

  void validate() const;
  std::size_t num_classes() const { return classes == SynthClasses::Binary ? 2 : 4; }
};

struct SynthItem {
  Recording rec;
  BurstAnnotation ann;
};

// CSV schema: header "time,ax,ay,az,gx,gy,gz", time in seconds, monotone.
// Subject/activity/label come from the manifest or, for bare files, from the
// "<subject>_<activity>_<label>.csv" filename convention.
Recording load_recording(const std::filesystem::path& path);
void write_recording(const Recording& rec, const std::filesystem::path& path);

// Per-channel z-score (sigma < 1e-8 treated as 1) and truncation to the last
// full position of the 1-second/50%-overlap instance grid.
Recording preprocess(const Recording& rec);

std::vector<SynthItem> synth_generate(const SynthSpec& spec, std::uint64_t seed);

// One bag per recording, preprocessed and ready for the model.
struct Bag {
  std::string subject_id;
  std::string activity;
  int label = 0;
  double fs = 100.0;
  Tensor x;  // preprocessed [C x T]
  BurstAnnotation ann;
};

struct Dataset {
  std::vector<Bag> bags;

  std::vector<std::string> subjects() const;    // sorted unique
  std::vector<std::string> activities() const;  // sorted unique
  std::vector<int> labels() const;              // sorted unique
  Dataset filter_activity(const std::string& activity) const;
};

// Preprocesses and indexes recordings; rejects recordings shorter than one
// second and empty filter results.
Dataset assemble_dataset(const std::vector<SynthItem>& items,
                         const std::optional<std::string>& activity_filter = std::nullopt);

// Directory layout: <dir>/recordings/*.csv + <dir>/manifest.csv
// (+ <dir>/bursts.csv when annotations exist).
void save_dataset(const std::vector<SynthItem>& items, const std::filesystem::path& dir);
std::vector<SynthItem> load_dataset(const std::filesystem::path& manifest_path);

std::string dataset_summary_json(const std::vector<SynthItem>& items);

}  // namespace mfam
