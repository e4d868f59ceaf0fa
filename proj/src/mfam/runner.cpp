#include "mfam/runner.hpp"

#include <cmath>
#include <sstream>

#include "mfam/error.hpp"
#include "mfam/io.hpp"

namespace mfam {

namespace fs = std::filesystem;

TrainResult run_train(const Dataset& dataset, const RunConfig& rc) {
  const FoldPlan plan = subject_folds(dataset.subjects(), 4, rc.train.seed);
  std::vector<const Bag*> train, val;
  for (const Bag& b : dataset.bags) {
    if (plan.assignments.at(b.subject_id) == 0)
      val.push_back(&b);
    else
      train.push_back(&b);
  }
  return train_fold(train, val, rc.bands, rc.model, rc.train);
}

std::string run_explain_csv(const Checkpoint& ckpt, const Recording& raw) {
  const Recording rec = preprocess(raw);
  const std::size_t expected = ckpt.config.in_channels;
  const std::size_t got = rec.channels() * ckpt.bands.size();
  if (got != expected)
    fail(ErrorCode::Config, "expected " + std::to_string(expected) + " channels, got " +
                                std::to_string(got));
  const BagOutput out =
      forward_bag(rec.samples, ckpt.bands, rec.fs, ckpt.params, ckpt.config, 0.0);

  std::size_t pred = 0;
  for (std::size_t c = 1; c < out.bag.probs.numel(); ++c)
    if (out.bag.probs[c] > out.bag.probs[pred]) pred = c;

  std::ostringstream csv;
  csv << "# predicted_class=" << pred << " probs=";
  for (std::size_t c = 0; c < out.bag.probs.numel(); ++c) {
    if (c) csv << ",";
    csv << format_double(out.bag.probs[c]);
  }
  csv << "\n";
  csv << "instance_index,start_sample,end_sample,attention_weight,retained\n";
  for (std::size_t i = 0; i < out.bag.attention.size(); ++i) {
    const double w = out.bag.attention[i];
    csv << i << "," << out.bag.spans[i].start << "," << out.bag.spans[i].end << ","
        << format_double(w) << "," << (w > 0.0 ? 1 : 0) << "\n";
  }
  return csv.str();
}

std::string run_decompose(const Recording& raw, const BandSet& bands, const fs::path& out_dir) {
  bands.validate(raw.fs);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) fail(ErrorCode::Io, "cannot create " + out_dir.string());

  const std::size_t c = raw.channels();
  const std::size_t t_len = raw.length();
  const Tensor decomposed = frequency_decompose(raw.samples, bands, raw.fs);

  double total_energy = 0.0;
  for (std::size_t ci = 0; ci < c; ++ci)
    total_energy +=
        signal_energy(std::span<const double>(&raw.samples.data[ci * t_len], t_len));

  std::ostringstream summary;
  summary << "band,f_low,f_high";
  for (const auto& name : raw.channel_names) summary << "," << name << "_energy_fraction";
  summary << ",band_energy_fraction\n";

  double covered = 0.0;
  for (std::size_t b = 0; b < bands.size(); ++b) {
    Recording band_rec = raw;
    band_rec.samples = Tensor({c, t_len});
    double band_energy = 0.0;
    summary << b << "," << format_double(bands.bands[b].f_low) << ","
            << format_double(bands.bands[b].f_high);
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double* src = &decomposed.data[(b * c + ci) * t_len];
      std::copy(src, src + t_len, &band_rec.samples.data[ci * t_len]);
      const double e = signal_energy(std::span<const double>(src, t_len));
      band_energy += e;
      summary << "," << format_double(total_energy > 0.0 ? e / total_energy : 0.0);
    }
    covered += band_energy;
    summary << "," << format_double(total_energy > 0.0 ? band_energy / total_energy : 0.0)
            << "\n";
    char name[64];
    std::snprintf(name, sizeof(name), "band_%zu_%g_%g.csv", b, bands.bands[b].f_low,
                  bands.bands[b].f_high);
    write_recording(band_rec, out_dir / name);
  }
  summary << "# covered_energy_fraction="
          << format_double(total_energy > 0.0 ? covered / total_energy : 0.0) << "\n";
  return summary.str();
}

}  // namespace mfam
