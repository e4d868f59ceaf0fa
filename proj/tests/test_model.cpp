#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>

#include "mfam/error.hpp"
#include "mfam/model.hpp"
#include "mfam/rng.hpp"
#include "support/gradcheck.hpp"

using namespace mfam;
using test::random_tensor;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.in_channels = 6;  // 2 channels x 3 bands
  c.hidden_dim = 8;
  c.attention_hidden = 8;
  c.num_classes = 2;
  c.num_domains = 2;
  c.instance_window = 16;
  c.instance_stride = 8;
  c.channel_attn_reduction = 4;
  c.discr_hidden = 8;
  return c;
}

Tensor random_fdm(const ModelConfig& c, std::size_t t_len, std::uint64_t seed) {
  Rng rng(seed);
  return random_tensor({c.in_channels, t_len}, rng);
}

}  // namespace

TEST_CASE("mscae output shape and zero-parameter behaviour") {
  ModelConfig c;
  c.in_channels = 18;
  c.hidden_dim = 64;
  c.num_domains = 2;
  const ModelParams zero = [&] {
    ModelParams p = ModelParams::init(c, 1);
    p.for_each([](const char*, Tensor& t) { t.fill(0.0); });
    return p;
  }();
  Rng rng(3);
  const Tensor x = random_tensor({18, 500}, rng);
  Tape tape;
  const ParamVars pv = push_params(tape, zero);
  const Var y = mscae_forward(tape, tape.leaf(x), pv, c);
  CHECK(tape.value(y).shape == std::vector<std::size_t>{64, 500});
  for (double v : tape.value(y).data) CHECK(v == 0.0);  // w_ch=0.5 but X_msp=0

  // random params: gate stays inside (0,1), so outputs are finite
  const ModelParams p = ModelParams::init(c, 7);
  Tape t2;
  const ParamVars pv2 = push_params(t2, p);
  const Var y2 = mscae_forward(t2, t2.leaf(x), pv2, c);
  CHECK(t2.value(y2).all_finite());
}

TEST_CASE("build_instances matches the direct mean oracle") {
  Tape tape;
  Rng rng(5);
  const Tensor x = random_tensor({4, 40}, rng);
  const Var xv = tape.leaf(x);
  const auto [z, spans] = build_instances(tape, xv, 16, 8);
  const Tensor& zt = tape.value(z);
  REQUIRE(zt.shape == std::vector<std::size_t>{4, 4});  // floor((40-16)/8)+1
  REQUIRE(spans.size() == 4);
  for (std::size_t i = 0; i < spans.size(); ++i) {
    CHECK(spans[i].start == i * 8);
    CHECK(spans[i].end == i * 8 + 16);
    for (std::size_t d = 0; d < 4; ++d) {
      double mean = 0.0;
      for (std::size_t t = spans[i].start; t < spans[i].end; ++t) mean += x.at2(d, t);
      mean /= 16.0;
      CHECK(std::fabs(zt.at2(i, d) - mean) < 1e-12);
    }
  }

  // constant input -> constant instances
  Tape t2;
  const auto [zc, _] = build_instances(t2, t2.leaf(Tensor({3, 32}, 2.5)), 16, 8);
  for (double v : t2.value(zc).data) CHECK(v == doctest::Approx(2.5).epsilon(1e-15));

  Tape t3;
  CHECK_THROWS_WITH_AS(build_instances(t3, t3.leaf(Tensor({2, 10}, 0.0)), 16, 8),
                       doctest::Contains("shorter than one instance window"), Error);
}

TEST_CASE("attention_scores equals the closed form") {
  ModelConfig c = tiny_config();
  ModelParams p = ModelParams::init(c, 11);
  Rng rng(13);
  const Tensor z = random_tensor({5, c.hidden_dim}, rng);

  Tape tape;
  const ParamVars pv = push_params(tape, p);
  const Tensor s = tape.value(attention_scores(tape, tape.leaf(z), pv));
  REQUIRE(s.shape == std::vector<std::size_t>{5});
  for (std::size_t i = 0; i < 5; ++i) {
    double want = p.attn_b2[0];
    for (std::size_t a = 0; a < c.attention_hidden; ++a) {
      double pre = p.attn_b1[a];
      for (std::size_t d = 0; d < c.hidden_dim; ++d) pre += p.attn_w1.at2(a, d) * z.at2(i, d);
      want += p.attn_w2.at2(0, a) * std::tanh(pre);
    }
    CHECK(std::fabs(s[i] - want) < 1e-12);
  }

  // zero weights give zero scores; b2 shifts all scores equally
  ModelParams pz = p;
  pz.attn_w1.fill(0.0);
  pz.attn_b1.fill(0.0);
  pz.attn_b2.fill(0.0);
  Tape t2;
  const ParamVars pv2 = push_params(t2, pz);
  for (double v : t2.value(attention_scores(t2, t2.leaf(z), pv2)).data) CHECK(v == 0.0);

  ModelParams pb = p;
  pb.attn_b2[0] += 5.0;
  Tape t3;
  const ParamVars pv3 = push_params(t3, pb);
  const Tensor shifted = t3.value(attention_scores(t3, t3.leaf(z), pv3));
  for (std::size_t i = 0; i < 5; ++i)
    CHECK(shifted[i] == doctest::Approx(s[i] + 5.0).epsilon(1e-12));
}

TEST_CASE("topk gate worked examples") {
  Tape tape;
  const Var gated =
      tape.topk_gate(tape.leaf(Tensor::vector({0.4, 0.3, 0.2, 0.1})), 0.5);
  const Tensor& g = tape.value(gated);
  CHECK(g[0] == doctest::Approx(4.0 / 7).epsilon(1e-15));
  CHECK(g[1] == doctest::Approx(3.0 / 7).epsilon(1e-15));
  CHECK(g[2] == 0.0);
  CHECK(g[3] == 0.0);

  CHECK(topk_count(18, 0.3) == 6);
  CHECK(topk_count(10, 0.1) == 1);
  CHECK(topk_count(1, 0.3) == 1);
  CHECK(topk_count(40, 0.3) == 12);

  // ratio 1: exact identity
  const Tensor a = Tensor::vector({0.25, 0.5, 0.25});
  Tape t2;
  CHECK(t2.value(t2.topk_gate(t2.leaf(a), 1.0)).data == a.data);

  // ties keep the lower index
  Tape t3;
  const Tensor tied = t3.value(t3.topk_gate(t3.leaf(Tensor::vector({0.3, 0.3, 0.3, 0.1})), 0.5));
  CHECK(tied[0] > 0.0);
  CHECK(tied[1] > 0.0);
  CHECK(tied[2] == 0.0);
  CHECK(tied[3] == 0.0);
}

TEST_CASE("attention is shift invariant through softmax and gating") {
  Rng rng(17);
  Tensor s({9});
  for (double& v : s.data) v = rng.uniform(-2.0, 2.0);
  Tensor shifted = s;
  for (double& v : shifted.data) v += 41.5;
  auto gate = [](const Tensor& scores) {
    Tape t;
    return t.value(t.topk_gate(t.softmax(t.leaf(scores)), 0.3)).data;
  };
  const auto a = gate(s);
  const auto b = gate(shifted);
  for (std::size_t i = 0; i < a.size(); ++i) CHECK(std::fabs(a[i] - b[i]) < 1e-12);
}

TEST_CASE("gating retains the brute-force top-k set, argmax always kept") {
  Rng rng(19);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 1 + rng.below(40);
    Tensor s({n});
    for (double& v : s.data) v = rng.uniform(-3.0, 3.0);
    Tape t;
    const Tensor gated = t.value(t.topk_gate(t.softmax(t.leaf(s)), 0.3));
    const std::size_t k = topk_count(n, 0.3);
    const auto want = topk_indices(std::span<const double>(s.data), k);

    std::vector<std::size_t> got;
    for (std::size_t i = 0; i < n; ++i)
      if (gated[i] > 0.0) got.push_back(i);
    CHECK(got == want);

    std::size_t argmax = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (s[i] > s[argmax]) argmax = i;
    CHECK(gated[argmax] > 0.0);

    double sum = 0.0;
    for (double v : gated.data) sum += v;
    CHECK(std::fabs(sum - 1.0) < 1e-9);
  }
}

TEST_CASE("aggregate_bag examples and oracle") {
  Rng rng(23);
  const Tensor z = random_tensor({4, 6}, rng);

  // one-hot weights pick that instance
  Tape tape;
  Tensor onehot({4}, 0.0);
  onehot[2] = 1.0;
  const Tensor e = tape.value(aggregate_bag(tape, tape.leaf(z), tape.leaf(onehot)));
  for (std::size_t d = 0; d < 6; ++d) CHECK(e[d] == z.at2(2, d));

  // uniform over two instances is their mean
  Tape t2;
  Tensor z2 = random_tensor({2, 3}, rng);
  const Tensor e2 = t2.value(aggregate_bag(t2, t2.leaf(z2), t2.leaf(Tensor({2}, 0.5))));
  for (std::size_t d = 0; d < 3; ++d)
    CHECK(e2[d] == doctest::Approx((z2.at2(0, d) + z2.at2(1, d)) / 2).epsilon(1e-15));

  // random weights vs direct sum
  Tape t3;
  Tensor w = random_tensor({4}, rng, 0.0, 1.0);
  const Tensor e3 = t3.value(aggregate_bag(t3, t3.leaf(z), t3.leaf(w)));
  for (std::size_t d = 0; d < 6; ++d) {
    double want = 0.0;
    for (std::size_t i = 0; i < 4; ++i) want += w[i] * z.at2(i, d);
    CHECK(std::fabs(e3[d] - want) < 1e-12);
  }
}

TEST_CASE("classify is the affine map") {
  ModelConfig c = tiny_config();
  ModelParams p = ModelParams::init(c, 29);
  Rng rng(31);
  const Tensor e = random_tensor({c.hidden_dim}, rng);
  Tape tape;
  const ParamVars pv = push_params(tape, p);
  const Tensor logits = tape.value(classify(tape, tape.leaf(e), pv));
  const Tensor want = tape.value(tape.affine(tape.leaf(e), tape.leaf(p.cls_w), tape.leaf(p.cls_b)));
  for (std::size_t i = 0; i < logits.numel(); ++i)
    CHECK(std::fabs(logits[i] - want[i]) < 1e-12);

  // equal classifier rows give zero logit differences
  ModelParams peq = p;
  for (std::size_t j = 0; j < c.hidden_dim; ++j)
    peq.cls_w.at2(1, j) = peq.cls_w.at2(0, j);
  peq.cls_b[1] = peq.cls_b[0];
  Tape t2;
  const ParamVars pv2 = push_params(t2, peq);
  const Tensor l2 = t2.value(classify(t2, t2.leaf(e), pv2));
  CHECK(std::fabs(l2[0] - l2[1]) < 1e-15);
}

TEST_CASE("cdan features outer product") {
  Tape tape;
  const Tensor h =
      tape.value(cdan_features(tape, tape.leaf(Tensor::vector({1, 2})),
                               tape.leaf(Tensor::vector({0.5, 0.5}))));
  CHECK(h.data == std::vector<double>{0.5, 0.5, 1.0, 1.0});

  Rng rng(37);
  const Tensor z = random_tensor({64}, rng, 0.0, 1.0);
  Tensor p({4});
  for (double& v : p.data) v = rng.uniform(0.1, 1.0);
  double s = 0.0;
  for (double v : p.data) s += v;
  for (double& v : p.data) v /= s;
  Tape t2;
  const Tensor h2 = t2.value(cdan_features(t2, t2.leaf(z), t2.leaf(p)));
  REQUIRE(h2.numel() == 256);
  // l1 norm preserved for nonnegative z since probs sum to 1
  double l1z = 0.0, l1h = 0.0;
  for (double v : z.data) l1z += std::fabs(v);
  for (double v : h2.data) l1h += std::fabs(v);
  CHECK(l1h == doctest::Approx(l1z).epsilon(1e-12));
  // summing h over the class axis recovers z
  for (std::size_t i = 0; i < 64; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < 4; ++j) row += h2[i * 4 + j];
    CHECK(std::fabs(row - z[i]) < 1e-12);
  }
}

TEST_CASE("domain head forward is independent of lambda") {
  ModelConfig c = tiny_config();
  ModelParams p = ModelParams::init(c, 41);
  Rng rng(43);
  const Tensor h = random_tensor({c.hidden_dim * c.num_classes}, rng);
  auto run = [&](double lambda) {
    Tape t;
    const ParamVars pv = push_params(t, p);
    return t.value(domain_discriminate(t, t.leaf(h), pv, lambda)).data;
  };
  const auto a = run(0.0);
  CHECK(a == run(0.5));
  CHECK(a == run(1.0));

  ModelParams pz = p;
  pz.for_each([](const char* name, Tensor& t) {
    if (ModelParams::is_discriminator(name)) t.fill(0.0);
  });
  Tape t2;
  const ParamVars pv2 = push_params(t2, pz);
  for (double v : t2.value(domain_discriminate(t2, t2.leaf(h), pv2, 1.0)).data)
    CHECK(v == 0.0);
}

TEST_CASE("forward_bag shape trace and invariants") {
  ModelConfig c;
  c.hidden_dim = 64;
  c.attention_hidden = 64;
  c.num_classes = 4;
  c.num_domains = 3;
  c.in_channels = 18;
  Rng rng(47);
  const Tensor x = random_tensor({6, 500}, rng);
  const BandSet bands = BandSet::tremor_defaults();
  const ModelParams p = ModelParams::init(c, 49);
  const BagOutput out = forward_bag(x, bands, 100.0, p, c, 0.7);

  CHECK(out.bag.logits.shape == std::vector<std::size_t>{4});
  CHECK(out.bag.bag_embedding.shape == std::vector<std::size_t>{64});
  CHECK(out.bag.attention.size() == 9);  // floor((500-100)/50)+1
  CHECK(out.domain_logits.shape == std::vector<std::size_t>{3});

  double psum = 0.0;
  for (double v : out.bag.probs.data) psum += v;
  CHECK(std::fabs(psum - 1.0) < 1e-9);

  std::size_t nonzero = 0;
  double asum = 0.0;
  for (double v : out.bag.attention) {
    if (v > 0.0) ++nonzero;
    asum += v;
    CHECK(v >= 0.0);
  }
  CHECK(nonzero == topk_count(9, c.topk_ratio));
  CHECK(std::fabs(asum - 1.0) < 1e-9);

  // whole-network forward is bit-identical across lambda
  const BagOutput l0 = forward_bag(x, bands, 100.0, p, c, 0.0);
  const BagOutput l1 = forward_bag(x, bands, 100.0, p, c, 1.0);
  CHECK(l0.bag.logits.data == l1.bag.logits.data);
  CHECK(l0.bag.probs.data == l1.bag.probs.data);
  CHECK(l0.domain_logits.data == l1.domain_logits.data);
  CHECK(l0.bag.logits.data == out.bag.logits.data);
}

TEST_CASE("instance permutation leaves the bag outputs unchanged") {
  ModelConfig c = tiny_config();
  const ModelParams p = ModelParams::init(c, 53);
  Rng rng(59);
  const Tensor z = random_tensor({10, c.hidden_dim}, rng);

  auto run = [&](const Tensor& instances) {
    Tape t;
    const ParamVars pv = push_params(t, p);
    const Var zv = t.leaf(instances);
    const Var s = attention_scores(t, zv, pv);
    const Var gated = t.topk_gate(t.softmax(s), c.topk_ratio);
    const Var e = aggregate_bag(t, zv, gated);
    const Var logits = classify(t, e, pv);
    return std::tuple{t.value(gated).data, t.value(logits).data, t.value(e).data};
  };

  std::vector<std::size_t> perm(10);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng prng(61);
  prng.shuffle(perm);
  Tensor zp({10, c.hidden_dim});
  for (std::size_t i = 0; i < 10; ++i)
    for (std::size_t d = 0; d < c.hidden_dim; ++d) zp.at2(i, d) = z.at2(perm[i], d);

  const auto [att_a, logits_a, e_a] = run(z);
  const auto [att_b, logits_b, e_b] = run(zp);
  for (std::size_t i = 0; i < 10; ++i)
    CHECK(std::fabs(att_b[i] - att_a[perm[i]]) < 1e-12);
  for (std::size_t i = 0; i < logits_a.size(); ++i)
    CHECK(std::fabs(logits_a[i] - logits_b[i]) < 1e-9);
  for (std::size_t i = 0; i < e_a.size(); ++i) CHECK(std::fabs(e_a[i] - e_b[i]) < 1e-9);
}

TEST_CASE("bag embedding stays in the convex hull of retained instances") {
  ModelConfig c = tiny_config();
  const ModelParams p = ModelParams::init(c, 67);
  Rng rng(71);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.below(20);
    const Tensor z = random_tensor({n, c.hidden_dim}, rng);
    Tape t;
    const ParamVars pv = push_params(t, p);
    const Var zv = t.leaf(z);
    const Var gated = t.topk_gate(t.softmax(attention_scores(t, zv, pv)), c.topk_ratio);
    const Tensor e = t.value(aggregate_bag(t, zv, gated));
    const Tensor& g = t.value(gated);
    for (std::size_t d = 0; d < c.hidden_dim; ++d) {
      double lo = 1e300, hi = -1e300;
      for (std::size_t i = 0; i < n; ++i) {
        if (g[i] <= 0.0) continue;
        lo = std::min(lo, z.at2(i, d));
        hi = std::max(hi, z.at2(i, d));
      }
      CHECK(e[d] >= lo - 1e-9);
      CHECK(e[d] <= hi + 1e-9);
    }
  }
}

TEST_CASE("gap aggregator uses uniform weights over all instances") {
  ModelConfig c = tiny_config();
  c.aggregator = Aggregator::Gap;
  const ModelParams p = ModelParams::init(c, 73);
  Rng rng(79);
  const Tensor x_fdm = random_fdm(c, 64, 81);
  Tape t;
  const ParamVars pv = push_params(t, p);
  const ForwardVars fv = forward_from_fdm(t, x_fdm, pv, c, 0.0);
  const Tensor& g = t.value(fv.gated);
  for (double v : g.data) CHECK(v == doctest::Approx(1.0 / g.numel()).epsilon(1e-15));
}

TEST_CASE("checkpoint save/load round trip is exact") {
  ModelConfig c = tiny_config();
  c.aggregator = Aggregator::Gap;
  Checkpoint ckpt;
  ckpt.config = c;
  ckpt.bands = BandSet::tremor_defaults();
  ckpt.fs = 100.0;
  ckpt.params = ModelParams::init(c, 83);

  const auto path = std::filesystem::temp_directory_path() / "mfam_ckpt_test.ckpt";
  save_checkpoint(ckpt, path);
  const Checkpoint back = load_checkpoint(path);
  CHECK(back.config.hidden_dim == c.hidden_dim);
  CHECK(back.config.aggregator == Aggregator::Gap);
  CHECK(back.config.in_channels == c.in_channels);
  CHECK(back.bands.size() == 3);
  CHECK(back.fs == 100.0);
  bool identical = true;
  back.params.for_each([&](const char* name, const Tensor& t) {
    ckpt.params.for_each([&](const char* name2, const Tensor& t2) {
      if (std::string(name) == name2 && t.data != t2.data) identical = false;
    });
  });
  CHECK(identical);
  std::filesystem::remove(path);
}

TEST_CASE("composed model gradients match finite differences per branch") {
  // The reversal layer makes the joint gradient differ from the derivative
  // of the forward loss by design, so each parameter is checked against the
  // objective its gradient actually follows:
  //   pre-reversal params  : CE_cls - lambda * mu * CE_dom
  //   discriminator params : CE_cls + mu * CE_dom
  ModelConfig c = tiny_config();
  const double lambda = 0.7, mu = 1.0;
  const std::size_t y = 1, dom = 0;
  const Tensor x_fdm = random_fdm(c, 64, 87);
  ModelParams params = ModelParams::init(c, 89);

  // analytic gradients from the real joint graph
  std::map<std::string, Tensor> analytic;
  {
    Tape t;
    const ParamVars pv = push_params(t, params);
    const ForwardVars fv = forward_from_fdm(t, x_fdm, pv, c, lambda);
    const Var loss = t.add(t.cross_entropy(fv.logits, y),
                           t.scale(t.cross_entropy(fv.domain_logits, dom), mu));
    t.backward(loss);
    for (const auto& [name, var] : pv.all) analytic.emplace(name, t.grad(var));
  }

  auto objective = [&](const ModelParams& p, double dom_sign_lambda_mu) {
    Tape t;
    const ParamVars pv = push_params(t, p);
    const ForwardVars fv = forward_from_fdm(t, x_fdm, pv, c, lambda);
    const double cls = t.value(t.cross_entropy(fv.logits, y))[0];
    const double adv = t.value(t.cross_entropy(fv.domain_logits, dom))[0];
    return cls + dom_sign_lambda_mu * adv;
  };

  const double h = 1e-5;
  double worst = 0.0;
  params.for_each([&](const char* name, Tensor& tensor) {
    const bool disc = ModelParams::is_discriminator(name);
    const double coeff = disc ? mu : -lambda * mu;
    const Tensor& g = analytic.at(name);
    // probe a handful of elements per tensor to keep the test quick
    const std::size_t step = std::max<std::size_t>(1, tensor.numel() / 5);
    for (std::size_t j = 0; j < tensor.numel(); j += step) {
      const double orig = tensor[j];
      tensor[j] = orig + h;
      const double fp = objective(params, coeff);
      tensor[j] = orig - h;
      const double fm = objective(params, coeff);
      tensor[j] = orig;
      const double fd = (fp - fm) / (2.0 * h);
      worst = std::max(worst, test::rel_err(g[j], fd));
    }
  });
  CHECK(worst < 1e-4);
}
