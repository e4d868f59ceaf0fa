#include "mfam/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include "mfam/adam.hpp"
#include "mfam/error.hpp"
#include "mfam/io.hpp"
#include "mfam/rng.hpp"

namespace mfam {

void TrainConfig::validate() const {
  if (!(lr > 0.0)) fail(ErrorCode::Config, "train: lr must be positive");
  if (max_epochs < 1) fail(ErrorCode::Config, "train: max_epochs must be >= 1");
  if (patience < 1) fail(ErrorCode::Config, "train: patience must be >= 1");
  if (adv_weight < 0.0) fail(ErrorCode::Config, "train: adv_weight must be >= 0");
  if (grl_gamma < 0.0) fail(ErrorCode::Config, "train: grl_gamma must be >= 0");
  if (batch < 1) fail(ErrorCode::Config, "train: batch must be >= 1");
}

double grl_schedule(double progress, double gamma) {
  if (progress < 0.0 || progress > 1.0)
    fail(ErrorCode::Domain, "grl_schedule: progress must lie in [0, 1]");
  return 2.0 / (1.0 + std::exp(-gamma * progress)) - 1.0;
}

Var joint_loss(Tape& tape, Var cls_logits, std::size_t y, Var domain_logits,
               std::size_t subject_label, double mu) {
  const Var cls = tape.cross_entropy(cls_logits, y);
  if (mu == 0.0 || !domain_logits.valid()) return cls;
  const Var adv = tape.cross_entropy(domain_logits, subject_label);
  return tape.add(cls, tape.scale(adv, mu));
}

Metrics metrics_from_confusion(const std::vector<std::vector<std::size_t>>& confusion) {
  Metrics m;
  m.confusion = confusion;
  const std::size_t k = confusion.size();
  std::size_t total = 0, correct = 0;
  std::vector<std::size_t> row_sum(k, 0), col_sum(k, 0);
  for (std::size_t i = 0; i < k; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      total += confusion[i][j];
      row_sum[i] += confusion[i][j];
      col_sum[j] += confusion[i][j];
    }
    correct += confusion[i][i];
  }
  m.accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0;
  double psum = 0.0, rsum = 0.0, fsum = 0.0;
  for (std::size_t i = 0; i < k; ++i) {
    // 0/0 -> 0 throughout
    const double p =
        col_sum[i] ? static_cast<double>(confusion[i][i]) / static_cast<double>(col_sum[i]) : 0.0;
    const double r =
        row_sum[i] ? static_cast<double>(confusion[i][i]) / static_cast<double>(row_sum[i]) : 0.0;
    const double f = (p + r > 0.0) ? 2.0 * p * r / (p + r) : 0.0;
    psum += p;
    rsum += r;
    fsum += f;
  }
  if (k) {
    m.macro_precision = psum / static_cast<double>(k);
    m.macro_recall = rsum / static_cast<double>(k);
    m.macro_f1 = fsum / static_cast<double>(k);
  }
  return m;
}

namespace {

std::vector<Tensor> decompose_bags(const std::vector<const Bag*>& bags, const BandSet& bands) {
  std::vector<Tensor> out;
  out.reserve(bags.size());
  for (const Bag* b : bags) out.push_back(frequency_decompose(b->x, bands, b->fs));
  return out;
}

double ce_value(const Tensor& logits, std::size_t label) {
  Tape tape;
  return tape.value(tape.cross_entropy(tape.leaf(logits), label))[0];
}

Metrics evaluate_fdm(const ModelParams& params, const std::vector<const Bag*>& bags,
                     const std::vector<Tensor>& fdm, const ModelConfig& config) {
  std::vector<std::vector<std::size_t>> confusion(
      config.num_classes, std::vector<std::size_t>(config.num_classes, 0));
  for (std::size_t i = 0; i < bags.size(); ++i) {
    Tape tape;
    const ParamVars pv = push_params(tape, params);
    const ForwardVars fv = forward_from_fdm(tape, fdm[i], pv, config, 0.0, /*want_domain=*/false);
    const Tensor& probs = tape.value(fv.probs);
    std::size_t pred = 0;
    for (std::size_t c = 1; c < probs.numel(); ++c)
      if (probs[c] > probs[pred]) pred = c;  // ties keep the lower index
    const auto label = static_cast<std::size_t>(bags[i]->label);
    if (label >= config.num_classes)
      fail(ErrorCode::Index, "evaluate: label " + std::to_string(label) +
                                 " out of range for K=" + std::to_string(config.num_classes));
    confusion[label][pred]++;
  }
  return metrics_from_confusion(confusion);
}

}  // namespace

Metrics evaluate(const ModelParams& params, const std::vector<const Bag*>& bags,
                 const ModelConfig& config, const BandSet& bands) {
  if (bags.empty()) fail(ErrorCode::Config, "evaluate: no bags");
  return evaluate_fdm(params, bags, decompose_bags(bags, bands), config);
}

TrainResult train_fold(const std::vector<const Bag*>& train_bags,
                       const std::vector<const Bag*>& val_bags, const BandSet& bands,
                       ModelConfig config, const TrainConfig& tc) {
  tc.validate();
  if (train_bags.empty()) fail(ErrorCode::Config, "train_fold: no training bags");
  if (val_bags.empty()) fail(ErrorCode::Config, "train_fold: no validation bags");

  // subject-level domains; validation subjects must be disjoint from training
  std::set<std::string> train_subjects;
  for (const Bag* b : train_bags) train_subjects.insert(b->subject_id);
  for (const Bag* b : val_bags)
    if (train_subjects.count(b->subject_id))
      fail(ErrorCode::Contract, "train_fold: validation subject '" + b->subject_id +
                                    "' also appears in the training set");
  std::map<std::string, std::size_t> domain_of;
  for (const auto& s : train_subjects) domain_of.emplace(s, domain_of.size());

  config.aggregator = tc.aggregator;
  config.in_channels = train_bags.front()->x.dim(0) * bands.size();
  config.num_domains = domain_of.size();
  config.validate();

  std::vector<std::size_t> class_count(config.num_classes, 0);
  for (const Bag* b : train_bags) {
    if (b->label < 0 || static_cast<std::size_t>(b->label) >= config.num_classes)
      fail(ErrorCode::Config, "train_fold: label " + std::to_string(b->label) +
                                  " out of range for K=" + std::to_string(config.num_classes));
    class_count[static_cast<std::size_t>(b->label)]++;
  }
  for (std::size_t c = 0; c < config.num_classes; ++c)
    if (class_count[c] == 0)
      fail(ErrorCode::Config,
           "train_fold: empty class " + std::to_string(c) + " in the training set");

  const std::vector<Tensor> train_fdm = decompose_bags(train_bags, bands);
  const std::vector<Tensor> val_fdm = decompose_bags(val_bags, bands);

  TrainResult result;
  result.config = config;
  result.params = ModelParams::init(config, tc.seed);

  std::vector<Tensor*> param_ptrs;
  result.params.for_each([&](const char*, Tensor& t) { param_ptrs.push_back(&t); });
  std::vector<const Tensor*> param_cptrs(param_ptrs.begin(), param_ptrs.end());
  AdamState adam(param_cptrs, tc.lr);

  Rng shuffle_rng(Rng::mix(tc.seed, 0x51u));
  std::vector<std::size_t> order(train_bags.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  ModelParams best = result.params;
  double best_f1 = -1.0;
  std::size_t best_epoch = 0;
  std::size_t since_best = 0;

  std::vector<Tensor> grad_accum;
  grad_accum.reserve(param_ptrs.size());
  for (Tensor* p : param_ptrs) grad_accum.emplace_back(p->shape, 0.0);
  std::vector<const Tensor*> grad_ptrs;
  for (Tensor& g : grad_accum) grad_ptrs.push_back(&g);

  for (std::size_t epoch = 1; epoch <= tc.max_epochs; ++epoch) {
    const double progress = static_cast<double>(epoch - 1) / static_cast<double>(tc.max_epochs);
    const double lambda = grl_schedule(progress, tc.grl_gamma);
    shuffle_rng.shuffle(order);

    double sum_cls = 0.0, sum_adv = 0.0;
    std::size_t in_batch = 0;
    for (Tensor& g : grad_accum) g.fill(0.0);

    auto apply_step = [&](std::size_t count) {
      if (count == 0) return;
      if (count > 1)
        for (Tensor& g : grad_accum)
          for (double& v : g.data) v /= static_cast<double>(count);
      adam_step(param_ptrs, grad_ptrs, adam);
      for (Tensor& g : grad_accum) g.fill(0.0);
    };

    for (std::size_t oi = 0; oi < order.size(); ++oi) {
      const std::size_t bi = order[oi];
      const Bag* bag = train_bags[bi];
      const bool want_domain = tc.adv_weight > 0.0;
      Tape tape;
      const ParamVars pv = push_params(tape, result.params);
      const ForwardVars fv =
          forward_from_fdm(tape, train_fdm[bi], pv, config, lambda, want_domain);
      const std::size_t dom = domain_of.at(bag->subject_id);
      const Var loss = joint_loss(tape, fv.logits, static_cast<std::size_t>(bag->label),
                                  fv.domain_logits, dom, tc.adv_weight);
      const double loss_v = tape.value(loss)[0];
      if (!std::isfinite(loss_v))
        fail(ErrorCode::Numeric, "train_fold: non-finite loss at epoch " + std::to_string(epoch) +
                                     ", bag " + std::to_string(bi) + " (subject " +
                                     bag->subject_id + ")");
      tape.backward(loss);
      for (std::size_t pi = 0; pi < pv.all.size(); ++pi) {
        const Tensor& g = tape.grad(pv.all[pi].second);
        for (std::size_t j = 0; j < g.numel(); ++j) grad_accum[pi][j] += g[j];
      }
      sum_cls += ce_value(tape.value(fv.logits), static_cast<std::size_t>(bag->label));
      if (want_domain) sum_adv += ce_value(tape.value(fv.domain_logits), dom);

      if (++in_batch == tc.batch || oi + 1 == order.size()) {
        apply_step(in_batch);
        in_batch = 0;
      }
    }

    const Metrics val = evaluate_fdm(result.params, val_bags, val_fdm, config);
    EpochRow row;
    row.epoch = epoch;
    row.cls_loss = sum_cls / static_cast<double>(train_bags.size());
    row.adv_loss = sum_adv / static_cast<double>(train_bags.size());
    row.train_loss = row.cls_loss + tc.adv_weight * row.adv_loss;
    row.lambda = lambda;
    row.val_macro_f1 = val.macro_f1;
    result.history.push_back(row);

    if (val.macro_f1 > best_f1) {
      best_f1 = val.macro_f1;
      best = result.params;
      best_epoch = epoch;
      since_best = 0;
    } else {
      since_best += 1;
      if (since_best >= tc.patience) break;
    }
  }

  result.params = best;
  result.best_val_f1 = best_f1;
  result.best_epoch = best_epoch;
  return result;
}

FoldPlan subject_folds(std::vector<std::string> subjects, std::size_t k, std::uint64_t seed) {
  std::sort(subjects.begin(), subjects.end());
  subjects.erase(std::unique(subjects.begin(), subjects.end()), subjects.end());
  if (k < 2) fail(ErrorCode::Config, "subject_folds: need k >= 2");
  if (subjects.size() < k)
    fail(ErrorCode::Config, "subject_folds: fewer subjects (" + std::to_string(subjects.size()) +
                                ") than folds (" + std::to_string(k) + ")");
  Rng rng(seed);
  rng.shuffle(subjects);
  FoldPlan plan;
  plan.k = k;
  for (std::size_t i = 0; i < subjects.size(); ++i) plan.assignments[subjects[i]] = i % k;
  return plan;
}

CvResult cross_validate(const Dataset& dataset, const BandSet& bands, ModelConfig config,
                        const TrainConfig& tc, std::size_t k, std::size_t jobs) {
  tc.validate();
  const FoldPlan plan = subject_folds(dataset.subjects(), k, tc.seed);

  CvResult cv;
  cv.folds.resize(k);

  // Validation group per fold: among the non-test groups, the one exposing
  // the most distinct class labels (ties to the lowest group index), so a
  // constant predictor cannot saturate the early-stopping signal.
  auto pick_val_group = [&](std::size_t f) {
    std::vector<std::set<int>> classes_in(k);
    for (const Bag& b : dataset.bags)
      classes_in[plan.assignments.at(b.subject_id)].insert(b.label);
    std::size_t best = k, best_count = 0;
    for (std::size_t g = 0; g < k; ++g) {
      if (g == f) continue;
      if (classes_in[g].size() > best_count) {
        best = g;
        best_count = classes_in[g].size();
      }
    }
    return best;
  };

  auto run_fold = [&](std::size_t f) {
    std::vector<const Bag*> train, val, test;
    std::vector<std::size_t> test_idx;
    std::set<std::string> test_subjects, train_subjects;
    const std::size_t val_group = pick_val_group(f);
    for (std::size_t bi = 0; bi < dataset.bags.size(); ++bi) {
      const Bag& b = dataset.bags[bi];
      const std::size_t g = plan.assignments.at(b.subject_id);
      if (g == f) {
        test.push_back(&b);
        test_idx.push_back(bi);
        test_subjects.insert(b.subject_id);
      } else if (g == val_group) {
        val.push_back(&b);
      } else {
        train.push_back(&b);
        train_subjects.insert(b.subject_id);
      }
    }
    // leakage check, always on
    for (const auto& s : test_subjects)
      if (train_subjects.count(s))
        fail(ErrorCode::Contract, "cross_validate: subject '" + s + "' leaks into fold " +
                                      std::to_string(f) + " training set");

    FoldOutcome out;
    out.fold = f;
    out.train = train_fold(train, val, bands, config, tc);
    out.test_metrics = evaluate(out.train.params, test, out.train.config, bands);
    out.test_subjects.assign(test_subjects.begin(), test_subjects.end());
    out.test_bag_indices = std::move(test_idx);
    cv.folds[f] = std::move(out);
  };

  if (jobs <= 1 || k <= 1) {
    for (std::size_t f = 0; f < k; ++f) run_fold(f);
  } else {
    // folds are independent; results land in fold order regardless of timing
    const std::size_t workers = std::min(jobs, k);
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(k);
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (std::size_t f = w; f < k; f += workers) {
          try {
            run_fold(f);
          } catch (...) {
            errors[f] = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
    for (std::size_t f = 0; f < k; ++f)
      if (errors[f]) std::rethrow_exception(errors[f]);
  }

  // mean of the four metrics, population std over folds, confusions summed
  const std::size_t kc = cv.folds.front().test_metrics.confusion.size();
  cv.mean.confusion.assign(kc, std::vector<std::size_t>(kc, 0));
  auto fold_metric = [&](std::size_t f, int which) {
    const Metrics& m = cv.folds[f].test_metrics;
    switch (which) {
      case 0: return m.accuracy;
      case 1: return m.macro_precision;
      case 2: return m.macro_recall;
      default: return m.macro_f1;
    }
  };
  double* mean_fields[4] = {&cv.mean.accuracy, &cv.mean.macro_precision, &cv.mean.macro_recall,
                            &cv.mean.macro_f1};
  double* std_fields[4] = {&cv.stdev.accuracy, &cv.stdev.macro_precision, &cv.stdev.macro_recall,
                           &cv.stdev.macro_f1};
  for (int which = 0; which < 4; ++which) {
    double s = 0.0;
    for (std::size_t f = 0; f < k; ++f) s += fold_metric(f, which);
    const double mean = s / static_cast<double>(k);
    double var = 0.0;
    for (std::size_t f = 0; f < k; ++f) {
      const double d = fold_metric(f, which) - mean;
      var += d * d;
    }
    *mean_fields[which] = mean;
    *std_fields[which] = std::sqrt(var / static_cast<double>(k));
  }
  for (std::size_t f = 0; f < k; ++f)
    for (std::size_t i = 0; i < kc; ++i)
      for (std::size_t j = 0; j < kc; ++j)
        cv.mean.confusion[i][j] += cv.folds[f].test_metrics.confusion[i][j];
  return cv;
}

std::string history_csv(const std::vector<EpochRow>& history) {
  std::ostringstream out;
  out << "epoch,train_loss,cls_loss,adv_loss,lambda,val_macro_f1\n";
  for (const EpochRow& r : history) {
    out << r.epoch << "," << format_double(r.train_loss) << "," << format_double(r.cls_loss)
        << "," << format_double(r.adv_loss) << "," << format_double(r.lambda) << ","
        << format_double(r.val_macro_f1) << "\n";
  }
  return out.str();
}

namespace {

void append_metrics_json(std::ostringstream& out, const Metrics& m, bool with_confusion) {
  out << "{\"accuracy\": " << format_double(m.accuracy)
      << ", \"macro_precision\": " << format_double(m.macro_precision)
      << ", \"macro_recall\": " << format_double(m.macro_recall)
      << ", \"macro_f1\": " << format_double(m.macro_f1);
  if (with_confusion && !m.confusion.empty()) {
    out << ", \"confusion\": [";
    for (std::size_t i = 0; i < m.confusion.size(); ++i) {
      if (i) out << ", ";
      out << "[";
      for (std::size_t j = 0; j < m.confusion[i].size(); ++j) {
        if (j) out << ", ";
        out << m.confusion[i][j];
      }
      out << "]";
    }
    out << "]";
  }
  out << "}";
}

}  // namespace

std::string metrics_json(const Metrics& m) {
  std::ostringstream out;
  append_metrics_json(out, m, true);
  return out.str();
}

std::string cv_metrics_json(const CvResult& cv, const std::string& activity,
                            const TrainConfig& tc) {
  std::ostringstream out;
  out << "{\"activity\": \"" << activity << "\", \"aggregator\": \""
      << aggregator_name(tc.aggregator) << "\", \"seed\": " << tc.seed << ", \"folds\": [";
  for (std::size_t f = 0; f < cv.folds.size(); ++f) {
    if (f) out << ", ";
    out << "{\"fold\": " << f << ", \"test_subjects\": [";
    for (std::size_t i = 0; i < cv.folds[f].test_subjects.size(); ++i) {
      if (i) out << ", ";
      out << "\"" << cv.folds[f].test_subjects[i] << "\"";
    }
    out << "], \"metrics\": ";
    append_metrics_json(out, cv.folds[f].test_metrics, true);
    out << ", \"best_epoch\": " << cv.folds[f].train.best_epoch << "}";
  }
  out << "], \"mean\": ";
  append_metrics_json(out, cv.mean, true);
  out << ", \"std\": ";
  append_metrics_json(out, cv.stdev, false);
  out << "}";
  return out.str();
}

}  // namespace mfam
