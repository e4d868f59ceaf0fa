#include "mfam/config.hpp"

#include <set>

#include "json.hpp"
#include "mfam/error.hpp"

namespace mfam {

namespace {

using nlohmann::json;

json parse_json(const std::string& text, const char* what) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) fail(ErrorCode::Config, std::string(what) + ": invalid JSON");
  return j;
}

void check_keys(const json& obj, const std::set<std::string>& allowed, const char* where) {
  if (!obj.is_object()) fail(ErrorCode::Config, std::string(where) + ": expected a JSON object");
  for (const auto& [key, _] : obj.items())
    if (!allowed.count(key))
      fail(ErrorCode::Config, std::string(where) + ": unknown key '" + key + "'");
}

template <typename T>
void get_to(const json& obj, const char* key, T& out, const char* where) {
  if (!obj.contains(key)) return;
  try {
    obj.at(key).get_to(out);
  } catch (const json::exception&) {
    fail(ErrorCode::Config, std::string(where) + ": bad value for '" + key + "'");
  }
}

BandSet bands_from_json(const json& arr, const char* where) {
  if (!arr.is_array() || arr.empty())
    fail(ErrorCode::Config, std::string(where) + ": bands must be a nonempty array of [low, high] pairs");
  BandSet bs;
  for (const auto& entry : arr) {
    if (!entry.is_array() || entry.size() != 2 || !entry[0].is_number() || !entry[1].is_number())
      fail(ErrorCode::Config, std::string(where) + ": each band must be [low, high]");
    bs.bands.push_back({entry[0].get<double>(), entry[1].get<double>()});
  }
  return bs;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  const json j = parse_json(json_text, "run config");
  check_keys(j, {"model", "train", "bands"}, "run config");
  RunConfig rc;

  if (j.contains("model")) {
    const json& m = j.at("model");
    check_keys(m,
               {"hidden_dim", "kernel_size", "dilations", "attention_hidden", "num_classes",
                "instance_window", "instance_stride", "topk_ratio", "channel_attn_reduction",
                "discr_hidden", "aggregator"},
               "model");
    get_to(m, "hidden_dim", rc.model.hidden_dim, "model");
    get_to(m, "kernel_size", rc.model.kernel_size, "model");
    if (m.contains("dilations")) {
      const auto& d = m.at("dilations");
      if (!d.is_array() || d.size() != 3)
        fail(ErrorCode::Config, "model: dilations must be an array of 3 integers");
      for (std::size_t i = 0; i < 3; ++i) rc.model.dilations[i] = d[i].get<int>();
    }
    get_to(m, "attention_hidden", rc.model.attention_hidden, "model");
    get_to(m, "num_classes", rc.model.num_classes, "model");
    get_to(m, "instance_window", rc.model.instance_window, "model");
    get_to(m, "instance_stride", rc.model.instance_stride, "model");
    get_to(m, "topk_ratio", rc.model.topk_ratio, "model");
    get_to(m, "channel_attn_reduction", rc.model.channel_attn_reduction, "model");
    get_to(m, "discr_hidden", rc.model.discr_hidden, "model");
    if (m.contains("aggregator"))
      rc.model.aggregator = aggregator_from_name(m.at("aggregator").get<std::string>());
  }

  if (j.contains("train")) {
    const json& t = j.at("train");
    check_keys(t, {"lr", "max_epochs", "patience", "adv_weight", "grl_gamma", "batch", "seed"},
               "train");
    get_to(t, "lr", rc.train.lr, "train");
    get_to(t, "max_epochs", rc.train.max_epochs, "train");
    get_to(t, "patience", rc.train.patience, "train");
    get_to(t, "adv_weight", rc.train.adv_weight, "train");
    get_to(t, "grl_gamma", rc.train.grl_gamma, "train");
    get_to(t, "batch", rc.train.batch, "train");
    get_to(t, "seed", rc.train.seed, "train");
  }

  if (j.contains("bands")) rc.bands = bands_from_json(j.at("bands"), "run config");
  rc.train.aggregator = rc.model.aggregator;
  rc.train.validate();
  // model.in_channels / num_domains come from data later; validate the rest
  ModelConfig probe = rc.model;
  probe.in_channels = 1;
  probe.num_domains = 1;
  probe.validate();
  return rc;
}

std::string run_config_json(const RunConfig& rc) {
  json m;
  m["hidden_dim"] = rc.model.hidden_dim;
  m["kernel_size"] = rc.model.kernel_size;
  m["dilations"] = rc.model.dilations;
  m["attention_hidden"] = rc.model.attention_hidden;
  m["num_classes"] = rc.model.num_classes;
  m["instance_window"] = rc.model.instance_window;
  m["instance_stride"] = rc.model.instance_stride;
  m["topk_ratio"] = rc.model.topk_ratio;
  m["channel_attn_reduction"] = rc.model.channel_attn_reduction;
  m["discr_hidden"] = rc.model.discr_hidden;
  m["aggregator"] = aggregator_name(rc.model.aggregator);
  json t;
  t["lr"] = rc.train.lr;
  t["max_epochs"] = rc.train.max_epochs;
  t["patience"] = rc.train.patience;
  t["adv_weight"] = rc.train.adv_weight;
  t["grl_gamma"] = rc.train.grl_gamma;
  t["batch"] = rc.train.batch;
  t["seed"] = rc.train.seed;
  json bands = json::array();
  for (const Band& b : rc.bands.bands) bands.push_back({b.f_low, b.f_high});
  json j;
  j["model"] = m;
  j["train"] = t;
  j["bands"] = bands;
  return j.dump(2);
}

SynthSpec parse_synth_spec(const std::string& json_text) {
  const json j = parse_json(json_text, "synth spec");
  check_keys(j,
             {"num_subjects", "recordings_per_subject", "duration_s", "fs", "burst_band",
              "burst_density", "burst_amplitude", "noise_amplitude", "background_amplitude",
              "subject_gain_spread", "classes"},
             "synth spec");
  SynthSpec spec;
  get_to(j, "num_subjects", spec.num_subjects, "synth spec");
  get_to(j, "recordings_per_subject", spec.recordings_per_subject, "synth spec");
  get_to(j, "duration_s", spec.duration_s, "synth spec");
  get_to(j, "fs", spec.fs, "synth spec");
  if (j.contains("burst_band")) {
    const auto& b = j.at("burst_band");
    if (!b.is_array() || b.size() != 2)
      fail(ErrorCode::Config, "synth spec: burst_band must be [low, high]");
    spec.burst_band = {b[0].get<double>(), b[1].get<double>()};
  }
  get_to(j, "burst_density", spec.burst_density, "synth spec");
  get_to(j, "burst_amplitude", spec.burst_amplitude, "synth spec");
  get_to(j, "noise_amplitude", spec.noise_amplitude, "synth spec");
  get_to(j, "background_amplitude", spec.background_amplitude, "synth spec");
  get_to(j, "subject_gain_spread", spec.subject_gain_spread, "synth spec");
  if (j.contains("classes")) {
    const std::string c = j.at("classes").get<std::string>();
    if (c == "binary") spec.classes = SynthClasses::Binary;
    else if (c == "four_level") spec.classes = SynthClasses::FourLevel;
    else fail(ErrorCode::Config, "synth spec: classes must be 'binary' or 'four_level'");
  }
  spec.validate();
  return spec;
}

std::string synth_spec_json(const SynthSpec& spec) {
  json j;
  j["num_subjects"] = spec.num_subjects;
  j["recordings_per_subject"] = spec.recordings_per_subject;
  j["duration_s"] = spec.duration_s;
  j["fs"] = spec.fs;
  j["burst_band"] = {spec.burst_band.f_low, spec.burst_band.f_high};
  j["burst_density"] = spec.burst_density;
  j["burst_amplitude"] = spec.burst_amplitude;
  j["noise_amplitude"] = spec.noise_amplitude;
  j["background_amplitude"] = spec.background_amplitude;
  j["subject_gain_spread"] = spec.subject_gain_spread;
  j["classes"] = spec.classes == SynthClasses::Binary ? "binary" : "four_level";
  return j.dump(2);
}

BandSet parse_bands(const std::string& json_text) {
  const json j = parse_json(json_text, "bands");
  return bands_from_json(j, "bands");
}

}  // namespace mfam
