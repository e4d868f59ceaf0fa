// mfam command-line tool. Talks to the library exclusively through the C API.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "mfam/mfam.h"

namespace {

using nlohmann::json;

int report(mfam_status status) {
  if (status == MFAM_OK) return 0;
  std::cerr << "error (" << mfam_status_name(status) << "): " << mfam_last_error() << "\n";
  return static_cast<int>(status);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    std::cerr << "error (io): cannot open " << path << "\n";
    std::exit(static_cast<int>(MFAM_ERROR_IO));
  }
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  const std::string tmp = path + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) {
      std::cerr << "error (io): cannot write " << tmp << "\n";
      std::exit(static_cast<int>(MFAM_ERROR_IO));
    }
    out << content;
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) {
    std::cerr << "error (io): cannot rename " << tmp << "\n";
    std::exit(static_cast<int>(MFAM_ERROR_IO));
  }
}

json parse_json_or_die(const std::string& text, const std::string& what) {
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded()) {
    std::cerr << "error (config): " << what << " is not valid JSON\n";
    std::exit(static_cast<int>(MFAM_ERROR_CONFIG));
  }
  return j;
}

std::optional<std::uint64_t> env_seed() {
  const char* v = std::getenv("MFAM_SEED");
  if (!v || !*v) return std::nullopt;
  return std::strtoull(v, nullptr, 10);
}

// flags > config file > MFAM_SEED > 0
struct CommonTrainArgs {
  std::string config_path;
  std::optional<double> lr;
  std::optional<std::uint64_t> max_epochs;
  std::optional<std::uint64_t> patience;
  std::optional<double> adv_weight;
  std::optional<double> topk_ratio;
  std::optional<std::uint64_t> seed;
  std::string aggregator;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON run-config file");
    cmd->add_option("--lr", lr, "learning rate override");
    cmd->add_option("--max-epochs", max_epochs, "epoch limit override");
    cmd->add_option("--patience", patience, "early-stopping patience override");
    cmd->add_option("--adv-weight", adv_weight, "adversarial loss weight override");
    cmd->add_option("--topk-ratio", topk_ratio, "attention top-k retention ratio override");
    cmd->add_option("--seed", seed, "run seed override");
    cmd->add_option("--aggregator", aggregator, "attention_mil or gap");
  }

  std::string merged_config() const {
    json j = json::object();
    if (!config_path.empty()) j = parse_json_or_die(read_text_file(config_path), config_path);
    if (!j.contains("model")) j["model"] = json::object();
    if (!j.contains("train")) j["train"] = json::object();
    if (lr) j["train"]["lr"] = *lr;
    if (max_epochs) j["train"]["max_epochs"] = *max_epochs;
    if (patience) j["train"]["patience"] = *patience;
    if (adv_weight) j["train"]["adv_weight"] = *adv_weight;
    if (topk_ratio) j["model"]["topk_ratio"] = *topk_ratio;
    if (!aggregator.empty()) j["model"]["aggregator"] = aggregator;
    if (seed)
      j["train"]["seed"] = *seed;
    else if (!j["train"].contains("seed")) {
      if (const auto es = env_seed()) j["train"]["seed"] = *es;
    }
    return j.dump();
  }
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"mfam: frequency-aware multi-instance classification of wearable recordings"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic burst dataset");
  std::string synth_spec_path, synth_out;
  std::optional<std::uint64_t> synth_seed;
  synth->add_option("--spec", synth_spec_path, "JSON synth spec file (defaults when omitted)");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--out", synth_out, "output dataset directory")->required();

  // train
  auto* train = app.add_subcommand("train", "train one model with a fixed subject split");
  CommonTrainArgs train_args;
  std::string train_data, train_out;
  train_args.add_to(train);
  train->add_option("--data", train_data, "dataset directory or manifest.csv")->required();
  train->add_option("--out", train_out, "output directory")->required();

  // cv
  auto* cv = app.add_subcommand("cv", "subject-level k-fold cross-validation");
  CommonTrainArgs cv_args;
  std::string cv_data, cv_out;
  int cv_folds = 4, cv_jobs = 1;
  cv_args.add_to(cv);
  cv->add_option("--data", cv_data, "dataset directory or manifest.csv")->required();
  cv->add_option("--out", cv_out, "output directory")->required();
  cv->add_option("--folds", cv_folds, "number of folds (default 4)");
  cv->add_option("--jobs", cv_jobs, "parallel fold workers (results are identical)");

  // eval
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on a dataset");
  std::string eval_ckpt, eval_data;
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--data", eval_data, "dataset directory or manifest.csv")->required();

  // decompose
  auto* dec = app.add_subcommand("decompose", "write per-band filtered CSVs for a recording");
  std::string dec_in, dec_bands, dec_out;
  dec->add_option("--in", dec_in, "recording CSV")->required();
  dec->add_option("--bands", dec_bands, "bands as JSON, e.g. [[0.5,3],[3,7],[7,12]]");
  dec->add_option("--out", dec_out, "output directory")->required();

  // explain
  auto* expl = app.add_subcommand("explain", "export per-instance attention for a recording");
  std::string expl_ckpt, expl_rec, expl_out;
  expl->add_option("--checkpoint", expl_ckpt, "checkpoint file")->required();
  expl->add_option("--recording", expl_rec, "recording CSV")->required();
  expl->add_option("--out", expl_out, "output CSV path")->required();

  CLI11_PARSE(app, argc, argv);

  if (synth->parsed()) {
    const std::string spec =
        synth_spec_path.empty() ? std::string("{}") : read_text_file(synth_spec_path);
    std::uint64_t seed = 0;
    if (synth_seed)
      seed = *synth_seed;
    else if (const auto es = env_seed())
      seed = *es;
    mfam_dataset* ds = nullptr;
    if (const int rc = report(mfam_dataset_synth(spec.c_str(), seed, &ds))) return rc;
    if (const int rc = report(mfam_dataset_save(ds, synth_out.c_str()))) {
      mfam_dataset_free(ds);
      return rc;
    }
    char* summary = nullptr;
    if (const int rc = report(mfam_dataset_summary(ds, &summary))) {
      mfam_dataset_free(ds);
      return rc;
    }
    std::cout << summary << "\n";
    mfam_string_free(summary);
    mfam_dataset_free(ds);
    return 0;
  }

  if (train->parsed()) {
    const std::string config = train_args.merged_config();
    mfam_dataset* ds = nullptr;
    if (const int rc = report(mfam_dataset_load(train_data.c_str(), &ds))) return rc;
    const std::string history = train_out + "/history.csv";
    const std::string ckpt = train_out + "/model.ckpt";
    std::error_code ec;
    std::filesystem::create_directories(train_out, ec);
    mfam_model* model = nullptr;
    const int rc = report(mfam_train(config.c_str(), ds, history.c_str(), &model));
    mfam_dataset_free(ds);
    if (rc) return rc;
    const int rc2 = report(mfam_model_save(model, ckpt.c_str()));
    mfam_model_free(model);
    if (rc2) return rc2;
    std::cout << "checkpoint: " << ckpt << "\nhistory: " << history << "\n";
    return 0;
  }

  if (cv->parsed()) {
    const std::string config = cv_args.merged_config();
    mfam_dataset* ds = nullptr;
    if (const int rc = report(mfam_dataset_load(cv_data.c_str(), &ds))) return rc;
    char* metrics = nullptr;
    const int rc = report(mfam_cross_validate(config.c_str(), ds, cv_folds, cv_jobs,
                                              cv_out.c_str(), &metrics));
    mfam_dataset_free(ds);
    if (rc) return rc;
    std::cout << metrics << "\n";
    mfam_string_free(metrics);
    return 0;
  }

  if (eval->parsed()) {
    mfam_model* model = nullptr;
    if (const int rc = report(mfam_model_load(eval_ckpt.c_str(), &model))) return rc;
    mfam_dataset* ds = nullptr;
    if (const int rc = report(mfam_dataset_load(eval_data.c_str(), &ds))) {
      mfam_model_free(model);
      return rc;
    }
    char* metrics = nullptr;
    const int rc = report(mfam_evaluate(model, ds, &metrics));
    mfam_dataset_free(ds);
    mfam_model_free(model);
    if (rc) return rc;
    std::cout << metrics << "\n";
    mfam_string_free(metrics);
    return 0;
  }

  if (dec->parsed()) {
    char* summary = nullptr;
    const int rc = report(mfam_decompose(dec_in.c_str(),
                                         dec_bands.empty() ? nullptr : dec_bands.c_str(),
                                         dec_out.c_str(), &summary));
    if (rc) return rc;
    write_text_file(dec_out + "/energy_summary.csv", summary);
    std::cout << summary;
    mfam_string_free(summary);
    return 0;
  }

  if (expl->parsed()) {
    mfam_model* model = nullptr;
    if (const int rc = report(mfam_model_load(expl_ckpt.c_str(), &model))) return rc;
    char* csv = nullptr;
    const int rc = report(mfam_explain(model, expl_rec.c_str(), &csv));
    mfam_model_free(model);
    if (rc) return rc;
    write_text_file(expl_out, csv);
    std::cout << "explanation: " << expl_out << "\n";
    mfam_string_free(csv);
    return 0;
  }

  return 0;
}
