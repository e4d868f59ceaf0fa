#pragma once

#include <string>

#include "mfam/data.hpp"
#include "mfam/fdm.hpp"
#include "mfam/model.hpp"
#include "mfam/train.hpp"

namespace mfam {

// Merged run configuration parsed from a JSON document. Unknown keys are
// rejected so a typo cannot silently fall back to a default.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  BandSet bands = BandSet::tremor_defaults();
};

RunConfig parse_run_config(const std::string& json_text);
std::string run_config_json(const RunConfig& rc);

SynthSpec parse_synth_spec(const std::string& json_text);
std::string synth_spec_json(const SynthSpec& spec);

BandSet parse_bands(const std::string& json_text);

}  // namespace mfam
