#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <string>

#include "mfam/mfam.h"
#include "mfam/model.hpp"

using namespace std::string_literals;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const char* tag) {
  const fs::path p = fs::temp_directory_path() / (std::string("mfam_capi_") + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

constexpr const char* kTinySpec =
    R"({"num_subjects": 4, "recordings_per_subject": 2, "duration_s": 4.0, "burst_amplitude": 3.0})";
constexpr const char* kTinyConfig =
    R"({"model": {"hidden_dim": 8, "attention_hidden": 8, "channel_attn_reduction": 4,
        "discr_hidden": 8}, "train": {"max_epochs": 3, "patience": 3, "seed": 1}})";

}  // namespace

TEST_CASE("status names and version") {
  CHECK(mfam_status_name(MFAM_OK) == "ok"s);
  CHECK(mfam_status_name(MFAM_ERROR_CONFIG) == "config"s);
  CHECK(mfam_version() != nullptr);
}

TEST_CASE("synth -> save -> load -> summary") {
  const fs::path dir = temp_dir("synth");
  mfam_dataset* ds = nullptr;
  REQUIRE(mfam_dataset_synth(kTinySpec, 42, &ds) == MFAM_OK);
  REQUIRE(mfam_dataset_save(ds, dir.c_str()) == MFAM_OK);
  CHECK(fs::exists(dir / "manifest.csv"));

  char* summary = nullptr;
  REQUIRE(mfam_dataset_summary(ds, &summary) == MFAM_OK);
  const std::string s(summary);
  mfam_string_free(summary);
  CHECK(s.find("\"subjects\": 4") != std::string::npos);
  CHECK(s.find("\"recordings\": 8") != std::string::npos);

  mfam_dataset* back = nullptr;
  REQUIRE(mfam_dataset_load(dir.c_str(), &back) == MFAM_OK);
  char* summary2 = nullptr;
  REQUIRE(mfam_dataset_summary(back, &summary2) == MFAM_OK);
  CHECK(s == summary2);
  mfam_string_free(summary2);
  mfam_dataset_free(back);
  mfam_dataset_free(ds);
  fs::remove_all(dir);
}

TEST_CASE("invalid synth spec and config are rejected with messages") {
  mfam_dataset* ds = nullptr;
  CHECK(mfam_dataset_synth(R"({"burst_density": 0})", 1, &ds) == MFAM_ERROR_CONFIG);
  CHECK(std::string(mfam_last_error()).find("burst_density") != std::string::npos);
  CHECK(mfam_dataset_synth(R"({"mystery": 1})", 1, &ds) == MFAM_ERROR_CONFIG);
  CHECK(std::string(mfam_last_error()).find("unknown key") != std::string::npos);

  mfam_dataset* tiny = nullptr;
  REQUIRE(mfam_dataset_synth(kTinySpec, 42, &tiny) == MFAM_OK);
  mfam_model* model = nullptr;
  CHECK(mfam_train(R"({"train": {"lr": -1}})", tiny, nullptr, &model) == MFAM_ERROR_CONFIG);
  CHECK(mfam_train(R"({"oops": {}})", tiny, nullptr, &model) == MFAM_ERROR_CONFIG);
  mfam_dataset_free(tiny);
}

TEST_CASE("train, save, load, evaluate, explain") {
  const fs::path dir = temp_dir("train");
  mfam_dataset* ds = nullptr;
  REQUIRE(mfam_dataset_synth(kTinySpec, 42, &ds) == MFAM_OK);
  REQUIRE(mfam_dataset_save(ds, dir.c_str()) == MFAM_OK);

  const fs::path history = dir / "history.csv";
  mfam_model* model = nullptr;
  REQUIRE(mfam_train(kTinyConfig, ds, history.c_str(), &model) == MFAM_OK);
  CHECK(fs::exists(history));

  const fs::path ckpt = dir / "model.ckpt";
  REQUIRE(mfam_model_save(model, ckpt.c_str()) == MFAM_OK);
  mfam_model* loaded = nullptr;
  REQUIRE(mfam_model_load(ckpt.c_str(), &loaded) == MFAM_OK);

  char* metrics1 = nullptr;
  char* metrics2 = nullptr;
  REQUIRE(mfam_evaluate(model, ds, &metrics1) == MFAM_OK);
  REQUIRE(mfam_evaluate(loaded, ds, &metrics2) == MFAM_OK);
  const std::string m1(metrics1), m2(metrics2);
  mfam_string_free(metrics1);
  mfam_string_free(metrics2);
  CHECK(m1 == m2);  // checkpoint round trip preserves behaviour
  for (const char* key : {"accuracy", "macro_precision", "macro_recall", "macro_f1"})
    CHECK(m1.find(key) != std::string::npos);

  // explain one of the saved recordings
  fs::path rec_path;
  for (const auto& e : fs::directory_iterator(dir / "recordings")) {
    rec_path = e.path();
    break;
  }
  char* csv = nullptr;
  REQUIRE(mfam_explain(model, rec_path.c_str(), &csv) == MFAM_OK);
  const std::string explain(csv);
  mfam_string_free(csv);
  CHECK(explain.find("# predicted_class=") == 0);
  CHECK(explain.find("instance_index,start_sample,end_sample,attention_weight,retained") !=
        std::string::npos);
  // 4 s at 100 Hz -> 7 instances -> 7 data rows
  std::size_t rows = 0;
  for (char ch : explain)
    if (ch == '\n') ++rows;
  CHECK(rows == 2 + 7);

  mfam_model_free(loaded);
  mfam_model_free(model);
  mfam_dataset_free(ds);
  fs::remove_all(dir);
}

TEST_CASE("evaluate reports a channel mismatch by both counts") {
  const fs::path dir = temp_dir("mismatch");
  mfam_dataset* ds = nullptr;
  REQUIRE(mfam_dataset_synth(kTinySpec, 7, &ds) == MFAM_OK);

  // checkpoint whose config expects 18 channels but whose band list yields 12
  mfam::ModelConfig mc;
  mc.in_channels = 18;
  mc.hidden_dim = 8;
  mc.attention_hidden = 8;
  mc.channel_attn_reduction = 4;
  mc.discr_hidden = 8;
  mc.num_domains = 2;
  mfam::Checkpoint ckpt;
  ckpt.config = mc;
  ckpt.bands.bands = {{0.5, 3.0}, {3.0, 7.0}};
  ckpt.fs = 100.0;
  ckpt.params = mfam::ModelParams::init(mc, 1);
  const fs::path path = dir / "mismatch.ckpt";
  mfam::save_checkpoint(ckpt, path);

  mfam_model* model = nullptr;
  REQUIRE(mfam_model_load(path.c_str(), &model) == MFAM_OK);
  char* out = nullptr;
  CHECK(mfam_evaluate(model, ds, &out) == MFAM_ERROR_CONFIG);
  CHECK(std::string(mfam_last_error()).find("expected 18 channels, got 12") !=
        std::string::npos);
  mfam_model_free(model);
  mfam_dataset_free(ds);
  fs::remove_all(dir);
}

TEST_CASE("cross_validate via the C API writes checkpoints and metrics") {
  const fs::path dir = temp_dir("cv");
  mfam_dataset* ds = nullptr;
  REQUIRE(mfam_dataset_synth(
              R"({"num_subjects": 8, "recordings_per_subject": 1, "duration_s": 4.0})", 11,
              &ds) == MFAM_OK);
  char* metrics = nullptr;
  REQUIRE(mfam_cross_validate(kTinyConfig, ds, 4, 2, dir.c_str(), &metrics) == MFAM_OK);
  const std::string m(metrics);
  mfam_string_free(metrics);
  CHECK(m.find("\"folds\": [") != std::string::npos);
  CHECK(m.find("\"mean\": ") != std::string::npos);
  CHECK(m.find("\"std\": ") != std::string::npos);
  CHECK(fs::exists(dir / "metrics.json"));
  for (int f = 0; f < 4; ++f) {
    CHECK(fs::exists(dir / ("task_fold" + std::to_string(f) + ".ckpt")));
    CHECK(fs::exists(dir / ("task_fold" + std::to_string(f) + "_history.csv")));
  }

  // identical rerun produces identical bytes
  char* metrics2 = nullptr;
  REQUIRE(mfam_cross_validate(kTinyConfig, ds, 4, 1, nullptr, &metrics2) == MFAM_OK);
  CHECK(m == metrics2);
  mfam_string_free(metrics2);
  mfam_dataset_free(ds);
  fs::remove_all(dir);
}

TEST_CASE("decompose writes per-band files and an energy summary") {
  const fs::path dir = temp_dir("decompose");
  mfam_dataset* ds = nullptr;
  REQUIRE(mfam_dataset_synth(kTinySpec, 13, &ds) == MFAM_OK);
  REQUIRE(mfam_dataset_save(ds, dir.c_str()) == MFAM_OK);
  mfam_dataset_free(ds);

  fs::path rec_path;
  for (const auto& e : fs::directory_iterator(dir / "recordings")) {
    rec_path = e.path();
    break;
  }
  const fs::path out = dir / "bands";
  char* summary = nullptr;
  REQUIRE(mfam_decompose(rec_path.c_str(), nullptr, out.c_str(), &summary) == MFAM_OK);
  const std::string s(summary);
  mfam_string_free(summary);
  CHECK(s.find("band,f_low,f_high") == 0);
  CHECK(s.find("covered_energy_fraction=") != std::string::npos);
  std::size_t files = 0;
  for (const auto& e : fs::directory_iterator(out))
    if (e.path().extension() == ".csv") ++files;
  CHECK(files == 3);

  // out-of-Nyquist band rejected
  char* bad = nullptr;
  CHECK(mfam_decompose(rec_path.c_str(), "[[0.5, 60.0]]", out.c_str(), &bad) ==
        MFAM_ERROR_DOMAIN);
  fs::remove_all(dir);
}
