#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mfam/data.hpp"
#include "mfam/model.hpp"

namespace mfam {

struct TrainConfig {
  double lr = 5e-4;
  std::size_t max_epochs = 200;
  std::size_t patience = 20;
  double adv_weight = 1.0;  // mu
  double grl_gamma = 10.0;
  std::size_t batch = 1;  // bags per optimizer step
  std::uint64_t seed = 0;
  Aggregator aggregator = Aggregator::AttentionMil;

  void validate() const;
};

struct Metrics {
  double accuracy = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  std::vector<std::vector<std::size_t>> confusion;  // [true][pred]
};

Metrics metrics_from_confusion(const std::vector<std::vector<std::size_t>>& confusion);

struct FoldPlan {
  std::map<std::string, std::size_t> assignments;  // subject -> fold
  std::size_t k = 0;
};

// lambda(p) = 2 / (1 + exp(-gamma p)) - 1; zero at p = 0, monotone in p.
double grl_schedule(double progress, double gamma);

// L = CE(cls_logits, y) + mu * CE(domain_logits, subject); the adversarial
// min-max lives in the gradient reversal inside the domain head.
Var joint_loss(Tape& tape, Var cls_logits, std::size_t y, Var domain_logits,
               std::size_t subject_label, double mu);

struct EpochRow {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double cls_loss = 0.0;
  double adv_loss = 0.0;
  double lambda = 0.0;
  double val_macro_f1 = 0.0;
};

struct TrainResult {
  ModelParams params;
  ModelConfig config;  // with in_channels / num_domains filled in
  std::vector<EpochRow> history;
  double best_val_f1 = 0.0;
  std::size_t best_epoch = 0;
};

TrainResult train_fold(const std::vector<const Bag*>& train_bags,
                       const std::vector<const Bag*>& val_bags, const BandSet& bands,
                       ModelConfig config, const TrainConfig& tc);

Metrics evaluate(const ModelParams& params, const std::vector<const Bag*>& bags,
                 const ModelConfig& config, const BandSet& bands);

// Seeded shuffle + round-robin; fold sizes differ by at most one subject.
FoldPlan subject_folds(std::vector<std::string> subjects, std::size_t k, std::uint64_t seed);

struct FoldOutcome {
  std::size_t fold = 0;
  Metrics test_metrics;
  TrainResult train;
  std::vector<std::string> test_subjects;
  std::vector<std::size_t> test_bag_indices;  // into Dataset.bags
};

struct CvResult {
  std::vector<FoldOutcome> folds;
  Metrics mean;  // aggregate means (confusion summed)
  Metrics stdev; // population std over folds, confusion empty
};

// Subject-level k-fold cross-validation. Within each fold one remaining
// subject group is held out for early stopping; test subjects never appear
// in train or validation (asserted on every run).
CvResult cross_validate(const Dataset& dataset, const BandSet& bands, ModelConfig config,
                        const TrainConfig& tc, std::size_t k = 4, std::size_t jobs = 1);

std::string history_csv(const std::vector<EpochRow>& history);
std::string cv_metrics_json(const CvResult& cv, const std::string& activity,
                            const TrainConfig& tc);
std::string metrics_json(const Metrics& m);

}  // namespace mfam
