#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <set>

#include "mfam/data.hpp"
#include "mfam/error.hpp"
#include "mfam/rng.hpp"
#include "mfam/train.hpp"
#include "support/oracles.hpp"

using namespace mfam;

namespace {

ModelConfig small_model() {
  ModelConfig c;
  c.hidden_dim = 8;
  c.attention_hidden = 8;
  c.num_classes = 2;
  c.channel_attn_reduction = 4;
  c.discr_hidden = 8;
  return c;
}

TrainConfig quick_train(std::uint64_t seed, std::size_t epochs) {
  TrainConfig tc;
  tc.seed = seed;
  tc.max_epochs = epochs;
  tc.patience = epochs;
  tc.lr = 2e-3;
  return tc;
}

struct Toy {
  std::vector<SynthItem> items;
  Dataset ds;
  std::vector<const Bag*> train, val;
};

Toy make_toy(std::uint64_t seed, std::size_t subjects = 4, std::size_t recs = 3) {
  SynthSpec spec;
  spec.num_subjects = subjects;
  spec.recordings_per_subject = recs;
  spec.duration_s = 4.0;
  spec.burst_amplitude = 3.0;
  Toy toy;
  toy.items = synth_generate(spec, seed);
  toy.ds = assemble_dataset(toy.items);
  for (const Bag& b : toy.ds.bags) {
    // hold out the last subject for early stopping
    char last[16];
    std::snprintf(last, sizeof(last), "s%02zu", subjects - 1);
    if (b.subject_id == last)
      toy.val.push_back(&b);
    else
      toy.train.push_back(&b);
  }
  return toy;
}

}  // namespace

TEST_CASE("grl_schedule closed form and monotonicity") {
  CHECK(grl_schedule(0.0, 10.0) == 0.0);
  CHECK(std::fabs(grl_schedule(0.5, 10.0) - 0.9866142981514305) < 1e-12);
  CHECK(std::fabs(grl_schedule(1.0, 10.0) - 0.9999092042625952) < 1e-12);
  CHECK(grl_schedule(1.0, 10.0) < 1.0);

  double prev = -1.0;
  for (int i = 0; i <= 100; ++i) {
    const double v = grl_schedule(i / 100.0, 10.0);
    CHECK(v >= prev);
    prev = v;
  }
  CHECK_THROWS_AS(grl_schedule(1.5, 10.0), Error);
}

TEST_CASE("joint_loss composition") {
  Tape tape;
  const Var cls = tape.leaf(Tensor::vector({0, 0}));
  const Var dom = tape.leaf(Tensor::vector({0, 0, 0, 0}));

  const Var l0 = joint_loss(tape, cls, 0, dom, 0, 0.0);
  CHECK(tape.value(l0)[0] == doctest::Approx(std::log(2.0)).epsilon(1e-15));

  const double mu = 0.7;
  const Var l1 = joint_loss(tape, cls, 0, dom, 1, mu);
  CHECK(tape.value(l1)[0] ==
        doctest::Approx(std::log(2.0) + mu * std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("evaluate worked examples") {
  // all correct
  Metrics perfect = metrics_from_confusion({{5, 0}, {0, 5}});
  CHECK(perfect.accuracy == 1.0);
  CHECK(perfect.macro_f1 == 1.0);

  // balanced binary, everything predicted as class 0
  Metrics skew = metrics_from_confusion({{5, 0}, {5, 0}});
  CHECK(skew.accuracy == 0.5);
  CHECK(skew.macro_f1 == doctest::Approx(1.0 / 3).epsilon(1e-15));
  CHECK(skew.macro_precision == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(skew.macro_recall == doctest::Approx(0.5).epsilon(1e-15));
}

TEST_CASE("metrics match the brute-force recount oracle") {
  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t k = 2 + rng.below(4);
    const std::size_t n = 1 + rng.below(60);
    std::vector<std::size_t> truth(n), pred(n);
    std::vector<std::vector<std::size_t>> cm(k, std::vector<std::size_t>(k, 0));
    for (std::size_t i = 0; i < n; ++i) {
      truth[i] = rng.below(k);
      pred[i] = rng.below(k);
      cm[truth[i]][pred[i]]++;
    }
    const Metrics m = metrics_from_confusion(cm);
    const auto want = test::naive_metrics(truth, pred, k);
    CHECK(std::fabs(m.accuracy - want.accuracy) < 1e-12);
    CHECK(std::fabs(m.macro_precision - want.macro_precision) < 1e-12);
    CHECK(std::fabs(m.macro_recall - want.macro_recall) < 1e-12);
    CHECK(std::fabs(m.macro_f1 - want.macro_f1) < 1e-12);
    CHECK(m.accuracy >= 0.0);
    CHECK(m.accuracy <= 1.0);
    CHECK(m.macro_f1 >= 0.0);
    CHECK(m.macro_f1 <= 1.0);
  }
}

TEST_CASE("subject_folds properties") {
  std::vector<std::string> subjects;
  for (int i = 0; i < 8; ++i) subjects.push_back("s0" + std::to_string(i));

  const FoldPlan plan = subject_folds(subjects, 4, 42);
  CHECK(plan.assignments.size() == 8);
  std::vector<std::size_t> sizes(4, 0);
  for (const auto& [s, f] : plan.assignments) {
    CHECK(f < 4);
    sizes[f]++;
  }
  for (std::size_t f = 0; f < 4; ++f) CHECK(sizes[f] == 2);

  const FoldPlan again = subject_folds(subjects, 4, 42);
  CHECK(plan.assignments == again.assignments);
  const FoldPlan other = subject_folds(subjects, 4, 43);
  CHECK(plan.assignments != other.assignments);

  // uneven split differs by at most one
  std::vector<std::string> nine = subjects;
  nine.push_back("s08");
  const FoldPlan p9 = subject_folds(nine, 4, 1);
  std::vector<std::size_t> sizes9(4, 0);
  for (const auto& [s, f] : p9.assignments) sizes9[f]++;
  const auto [lo, hi] = std::minmax_element(sizes9.begin(), sizes9.end());
  CHECK(*hi - *lo <= 1);

  CHECK_THROWS_AS(subject_folds({"a", "b"}, 4, 1), Error);
}

TEST_CASE("train_fold fits linearly separable toy bags") {
  Toy toy = make_toy(21);
  const TrainConfig tc = quick_train(5, 50);
  const ModelConfig mc = small_model();
  const TrainResult tr = train_fold(toy.train, toy.val, BandSet::tremor_defaults(), mc, tc);
  CHECK(tr.history.size() <= 50);
  const Metrics train_metrics =
      evaluate(tr.params, toy.train, tr.config, BandSet::tremor_defaults());
  CHECK(train_metrics.accuracy == 1.0);
}

TEST_CASE("early stopping halts after patience epochs without improvement") {
  Toy toy = make_toy(22);
  TrainConfig tc = quick_train(5, 30);
  tc.patience = 1;
  tc.lr = 1e-300;  // updates vanish in double precision
  const TrainResult tr =
      train_fold(toy.train, toy.val, BandSet::tremor_defaults(), small_model(), tc);
  CHECK(tr.history.size() == 2);
  CHECK(tr.best_epoch == 1);
}

TEST_CASE("early stopping returns the best-validation parameters") {
  Toy toy = make_toy(23);
  TrainConfig tc = quick_train(7, 12);
  tc.patience = 12;
  const TrainResult tr =
      train_fold(toy.train, toy.val, BandSet::tremor_defaults(), small_model(), tc);
  double best = -1.0;
  for (const EpochRow& row : tr.history) best = std::max(best, row.val_macro_f1);
  CHECK(tr.best_val_f1 == best);
  const Metrics val_now = evaluate(tr.params, toy.val, tr.config, BandSet::tremor_defaults());
  CHECK(val_now.macro_f1 == doctest::Approx(best).epsilon(1e-12));
}

TEST_CASE("training is bit-reproducible for a fixed seed") {
  Toy toy = make_toy(24);
  const TrainConfig tc = quick_train(11, 6);
  const ModelConfig mc = small_model();
  const TrainResult a = train_fold(toy.train, toy.val, BandSet::tremor_defaults(), mc, tc);
  const TrainResult b = train_fold(toy.train, toy.val, BandSet::tremor_defaults(), mc, tc);
  REQUIRE(a.history.size() == b.history.size());
  for (std::size_t i = 0; i < a.history.size(); ++i) {
    CHECK(a.history[i].train_loss == b.history[i].train_loss);
    CHECK(a.history[i].val_macro_f1 == b.history[i].val_macro_f1);
  }
  bool same = true;
  a.params.for_each([&](const char* name, const Tensor& t) {
    b.params.for_each([&](const char* name2, const Tensor& t2) {
      if (std::string(name) == name2 && t.data != t2.data) same = false;
    });
  });
  CHECK(same);
}

TEST_CASE("train_fold rejects bad inputs") {
  Toy toy = make_toy(25);
  const TrainConfig tc = quick_train(3, 4);

  // empty class: drop every label-1 bag
  std::vector<const Bag*> only_zero;
  for (const Bag* b : toy.train)
    if (b->label == 0) only_zero.push_back(b);
  CHECK_THROWS_WITH_AS(
      train_fold(only_zero, toy.val, BandSet::tremor_defaults(), small_model(), tc),
      doctest::Contains("empty class"), Error);

  // leaking validation subject
  CHECK_THROWS_AS(
      train_fold(toy.train, {toy.train.front()}, BandSet::tremor_defaults(), small_model(), tc),
      Error);
}

TEST_CASE("history csv layout") {
  std::vector<EpochRow> rows(2);
  rows[0] = {1, 0.5, 0.4, 0.1, 0.0, 0.75};
  rows[1] = {2, 0.25, 0.2, 0.05, 0.2, 0.8};
  const std::string csv = history_csv(rows);
  CHECK(csv.find("epoch,train_loss,cls_loss,adv_loss,lambda,val_macro_f1\n") == 0);
  CHECK(csv.find("1,0.5,0.4,0.1,0,0.75\n") != std::string::npos);
}

TEST_CASE("cross_validate protocol: coverage, leakage-freedom, determinism, parallel equality") {
  SynthSpec spec;
  spec.num_subjects = 8;
  spec.recordings_per_subject = 1;
  spec.duration_s = 4.0;
  spec.burst_amplitude = 3.0;
  const Dataset ds = assemble_dataset(synth_generate(spec, 31));
  const ModelConfig mc = small_model();
  const TrainConfig tc = quick_train(42, 3);

  const CvResult cv = cross_validate(ds, BandSet::tremor_defaults(), mc, tc, 4, 1);
  REQUIRE(cv.folds.size() == 4);

  // every subject tested exactly once across folds
  std::multiset<std::string> tested;
  for (const FoldOutcome& fo : cv.folds) {
    CHECK(fo.test_subjects.size() == 2);
    for (const auto& s : fo.test_subjects) tested.insert(s);
    // disjoint test bags
    CHECK(fo.test_bag_indices.size() == 2);
  }
  CHECK(tested.size() == 8);
  for (const auto& s : ds.subjects()) CHECK(tested.count(s) == 1);

  // bit-identical rerun
  const CvResult cv2 = cross_validate(ds, BandSet::tremor_defaults(), mc, tc, 4, 1);
  CHECK(cv_metrics_json(cv, "task", tc) == cv_metrics_json(cv2, "task", tc));

  // fold-parallel run gives identical results
  const CvResult cv_par = cross_validate(ds, BandSet::tremor_defaults(), mc, tc, 4, 2);
  CHECK(cv_metrics_json(cv, "task", tc) == cv_metrics_json(cv_par, "task", tc));
}

TEST_CASE("gap ablation trains and reports uniform attention downstream") {
  Toy toy = make_toy(26);
  TrainConfig tc = quick_train(13, 4);
  tc.aggregator = Aggregator::Gap;
  const TrainResult tr =
      train_fold(toy.train, toy.val, BandSet::tremor_defaults(), small_model(), tc);
  CHECK(tr.config.aggregator == Aggregator::Gap);
  const BagOutput out = forward_bag(toy.ds.bags[0].x, BandSet::tremor_defaults(),
                                    toy.ds.bags[0].fs, tr.params, tr.config, 0.0);
  for (double v : out.bag.attention)
    CHECK(v == doctest::Approx(1.0 / out.bag.attention.size()).epsilon(1e-15));
}
