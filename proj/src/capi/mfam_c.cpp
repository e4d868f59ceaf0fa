#include "mfam/mfam.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <memory>
#include <string>

#include "mfam/config.hpp"
#include "mfam/data.hpp"
#include "mfam/error.hpp"
#include "mfam/io.hpp"
#include "mfam/model.hpp"
#include "mfam/runner.hpp"
#include "mfam/train.hpp"

struct mfam_dataset {
  std::vector<mfam::SynthItem> items;
};

struct mfam_model {
  mfam::Checkpoint ckpt;
};

namespace {

thread_local std::string g_last_error;

mfam_status status_from(mfam::ErrorCode code) {
  using mfam::ErrorCode;
  switch (code) {
    case ErrorCode::InvalidArgument: return MFAM_ERROR_INVALID_ARGUMENT;
    case ErrorCode::Shape: return MFAM_ERROR_SHAPE;
    case ErrorCode::Domain: return MFAM_ERROR_DOMAIN;
    case ErrorCode::Format: return MFAM_ERROR_FORMAT;
    case ErrorCode::Length: return MFAM_ERROR_LENGTH;
    case ErrorCode::Index: return MFAM_ERROR_INDEX;
    case ErrorCode::Config: return MFAM_ERROR_CONFIG;
    case ErrorCode::Io: return MFAM_ERROR_IO;
    case ErrorCode::Numeric: return MFAM_ERROR_NUMERIC;
    case ErrorCode::Contract: return MFAM_ERROR_CONTRACT;
  }
  return MFAM_ERROR_INTERNAL;
}

template <typename Fn>
mfam_status guarded(Fn&& fn) {
  try {
    fn();
    g_last_error.clear();
    return MFAM_OK;
  } catch (const mfam::Error& e) {
    g_last_error = e.what();
    return status_from(e.code());
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return MFAM_ERROR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return MFAM_ERROR_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void require(bool cond, const char* msg) {
  if (!cond) mfam::fail(mfam::ErrorCode::InvalidArgument, msg);
}

mfam::Dataset assemble(const mfam_dataset* ds) { return mfam::assemble_dataset(ds->items); }

}  // namespace

extern "C" {

const char* mfam_status_name(mfam_status status) {
  switch (status) {
    case MFAM_OK: return "ok";
    case MFAM_ERROR_INVALID_ARGUMENT: return "invalid_argument";
    case MFAM_ERROR_SHAPE: return "shape";
    case MFAM_ERROR_DOMAIN: return "domain";
    case MFAM_ERROR_FORMAT: return "format";
    case MFAM_ERROR_LENGTH: return "length";
    case MFAM_ERROR_INDEX: return "index";
    case MFAM_ERROR_CONFIG: return "config";
    case MFAM_ERROR_IO: return "io";
    case MFAM_ERROR_NUMERIC: return "numeric";
    case MFAM_ERROR_CONTRACT: return "contract";
    case MFAM_ERROR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* mfam_last_error(void) { return g_last_error.c_str(); }

const char* mfam_version(void) { return "0.1.0"; }

void mfam_string_free(char* s) { std::free(s); }
void mfam_dataset_free(mfam_dataset* ds) { delete ds; }
void mfam_model_free(mfam_model* m) { delete m; }

mfam_status mfam_dataset_synth(const char* spec_json, uint64_t seed, mfam_dataset** out) {
  return guarded([&] {
    require(spec_json && out, "mfam_dataset_synth: null argument");
    const mfam::SynthSpec spec = mfam::parse_synth_spec(spec_json);
    auto ds = std::make_unique<mfam_dataset>();
    ds->items = mfam::synth_generate(spec, seed);
    *out = ds.release();
  });
}

mfam_status mfam_dataset_load(const char* path, mfam_dataset** out) {
  return guarded([&] {
    require(path && out, "mfam_dataset_load: null argument");
    auto ds = std::make_unique<mfam_dataset>();
    ds->items = mfam::load_dataset(path);
    *out = ds.release();
  });
}

mfam_status mfam_dataset_save(const mfam_dataset* ds, const char* dir) {
  return guarded([&] {
    require(ds && dir, "mfam_dataset_save: null argument");
    mfam::save_dataset(ds->items, dir);
  });
}

mfam_status mfam_dataset_summary(const mfam_dataset* ds, char** json_out) {
  return guarded([&] {
    require(ds && json_out, "mfam_dataset_summary: null argument");
    *json_out = dup_string(mfam::dataset_summary_json(ds->items));
  });
}

mfam_status mfam_model_load(const char* checkpoint_path, mfam_model** out) {
  return guarded([&] {
    require(checkpoint_path && out, "mfam_model_load: null argument");
    auto m = std::make_unique<mfam_model>();
    m->ckpt = mfam::load_checkpoint(checkpoint_path);
    *out = m.release();
  });
}

mfam_status mfam_model_save(const mfam_model* m, const char* checkpoint_path) {
  return guarded([&] {
    require(m && checkpoint_path, "mfam_model_save: null argument");
    mfam::save_checkpoint(m->ckpt, checkpoint_path);
  });
}

mfam_status mfam_train(const char* run_config_json, const mfam_dataset* ds,
                       const char* history_csv_path, mfam_model** out) {
  return guarded([&] {
    require(run_config_json && ds && out, "mfam_train: null argument");
    const mfam::RunConfig rc = mfam::parse_run_config(run_config_json);
    const mfam::Dataset dataset = assemble(ds);
    const mfam::TrainResult tr = mfam::run_train(dataset, rc);
    if (history_csv_path)
      mfam::write_file_atomic(history_csv_path, mfam::history_csv(tr.history));
    auto m = std::make_unique<mfam_model>();
    m->ckpt.config = tr.config;
    m->ckpt.bands = rc.bands;
    m->ckpt.fs = dataset.bags.front().fs;
    m->ckpt.params = tr.params;
    *out = m.release();
  });
}

mfam_status mfam_cross_validate(const char* run_config_json, const mfam_dataset* ds, int folds,
                                int jobs, const char* out_dir, char** metrics_json_out) {
  return guarded([&] {
    require(run_config_json && ds && metrics_json_out, "mfam_cross_validate: null argument");
    require(folds >= 2, "mfam_cross_validate: folds must be >= 2");
    require(jobs >= 1, "mfam_cross_validate: jobs must be >= 1");
    const mfam::RunConfig rc = mfam::parse_run_config(run_config_json);
    const mfam::Dataset all = assemble(ds);

    std::string combined = "{\"activities\": [";
    bool first = true;
    for (const std::string& activity : all.activities()) {
      const mfam::Dataset dataset = all.filter_activity(activity);
      const mfam::CvResult cv =
          mfam::cross_validate(dataset, rc.bands, rc.model, rc.train,
                               static_cast<std::size_t>(folds), static_cast<std::size_t>(jobs));
      if (out_dir) {
        namespace fs = std::filesystem;
        std::error_code ec;
        fs::create_directories(out_dir, ec);
        if (ec) mfam::fail(mfam::ErrorCode::Io, "cannot create " + std::string(out_dir));
        for (const mfam::FoldOutcome& fo : cv.folds) {
          mfam::Checkpoint ckpt{fo.train.config, rc.bands, dataset.bags.front().fs,
                                fo.train.params};
          char name[160];
          std::snprintf(name, sizeof(name), "%s_fold%zu", activity.c_str(), fo.fold);
          mfam::save_checkpoint(ckpt, fs::path(out_dir) / (std::string(name) + ".ckpt"));
          mfam::write_file_atomic(fs::path(out_dir) / (std::string(name) + "_history.csv"),
                                  mfam::history_csv(fo.train.history));
        }
      }
      if (!first) combined += ", ";
      combined += mfam::cv_metrics_json(cv, activity, rc.train);
      first = false;
    }
    combined += "]}";
    if (out_dir)
      mfam::write_file_atomic(std::filesystem::path(out_dir) / "metrics.json", combined);
    *metrics_json_out = dup_string(combined);
  });
}

mfam_status mfam_evaluate(const mfam_model* m, const mfam_dataset* ds, char** metrics_json_out) {
  return guarded([&] {
    require(m && ds && metrics_json_out, "mfam_evaluate: null argument");
    const mfam::Dataset dataset = assemble(ds);
    const std::size_t got = dataset.bags.front().x.dim(0) * m->ckpt.bands.size();
    if (got != m->ckpt.config.in_channels)
      mfam::fail(mfam::ErrorCode::Config,
                 "expected " + std::to_string(m->ckpt.config.in_channels) + " channels, got " +
                     std::to_string(got));
    std::vector<const mfam::Bag*> bags;
    bags.reserve(dataset.bags.size());
    for (const mfam::Bag& b : dataset.bags) bags.push_back(&b);
    const mfam::Metrics metrics =
        mfam::evaluate(m->ckpt.params, bags, m->ckpt.config, m->ckpt.bands);
    *metrics_json_out = dup_string(mfam::metrics_json(metrics));
  });
}

mfam_status mfam_explain(const mfam_model* m, const char* recording_csv_path, char** csv_out) {
  return guarded([&] {
    require(m && recording_csv_path && csv_out, "mfam_explain: null argument");
    const mfam::Recording raw = mfam::load_recording(recording_csv_path);
    *csv_out = dup_string(mfam::run_explain_csv(m->ckpt, raw));
  });
}

mfam_status mfam_decompose(const char* recording_csv_path, const char* bands_json,
                           const char* out_dir, char** energy_summary_out) {
  return guarded([&] {
    require(recording_csv_path && out_dir && energy_summary_out,
            "mfam_decompose: null argument");
    const mfam::Recording raw = mfam::load_recording(recording_csv_path);
    const mfam::BandSet bands =
        bands_json ? mfam::parse_bands(bands_json) : mfam::BandSet::tremor_defaults();
    *energy_summary_out = dup_string(mfam::run_decompose(raw, bands, out_dir));
  });
}

}  // extern "C"
