#pragma once

#include <filesystem>
#include <string>

#include "mfam/config.hpp"
#include "mfam/data.hpp"
#include "mfam/model.hpp"
#include "mfam/train.hpp"

namespace mfam {

// Single-model training with a fixed subject-level split: subjects are dealt
// into 4 groups by the run seed, group 0 is held out for early stopping.
TrainResult run_train(const Dataset& dataset, const RunConfig& rc);

// Attention export for one recording: preprocess, forward, one CSV row per
// instance plus a header comment with the prediction.
std::string run_explain_csv(const Checkpoint& ckpt, const Recording& raw);

// Writes one CSV per band (same schema as recordings, filtered channels)
// and returns the per-band/per-channel energy-fraction summary CSV.
std::string run_decompose(const Recording& raw, const BandSet& bands,
                          const std::filesystem::path& out_dir);

}  // namespace mfam
