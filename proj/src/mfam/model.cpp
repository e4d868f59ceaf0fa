#include "mfam/model.hpp"

#include <cmath>
#include <sstream>

#include "mfam/error.hpp"
#include "mfam/io.hpp"
#include "mfam/rng.hpp"

namespace mfam {

const char* aggregator_name(Aggregator a) {
  return a == Aggregator::AttentionMil ? "attention_mil" : "gap";
}

Aggregator aggregator_from_name(std::string_view name) {
  if (name == "attention_mil") return Aggregator::AttentionMil;
  if (name == "gap") return Aggregator::Gap;
  fail(ErrorCode::Config, "unknown aggregator '" + std::string(name) +
                              "' (expected attention_mil or gap)");
}

void ModelConfig::validate() const {
  if (in_channels < 1) fail(ErrorCode::Config, "model: in_channels must be >= 1");
  if (hidden_dim < 1) fail(ErrorCode::Config, "model: hidden_dim must be >= 1");
  if (kernel_size % 2 == 0 || kernel_size < 1)
    fail(ErrorCode::Config, "model: kernel_size must be odd");
  for (int d : dilations)
    if (d < 1) fail(ErrorCode::Config, "model: dilations must be positive");
  if (attention_hidden < 1) fail(ErrorCode::Config, "model: attention_hidden must be >= 1");
  if (num_classes < 2) fail(ErrorCode::Config, "model: num_classes must be >= 2");
  if (num_domains < 1) fail(ErrorCode::Config, "model: num_domains must be >= 1");
  if (instance_window < 1) fail(ErrorCode::Config, "model: instance_window must be >= 1");
  if (instance_stride < 1) fail(ErrorCode::Config, "model: instance_stride must be >= 1");
  if (!(topk_ratio > 0.0) || topk_ratio > 1.0)
    fail(ErrorCode::Config, "model: topk_ratio must lie in (0, 1]");
  if (channel_attn_reduction < 1 || hidden_dim % channel_attn_reduction != 0)
    fail(ErrorCode::Config, "model: hidden_dim must be divisible by channel_attn_reduction");
  if (discr_hidden < 1) fail(ErrorCode::Config, "model: discr_hidden must be >= 1");
}

namespace {

std::size_t fan_in(const Tensor& t) {
  if (t.rank() == 3) return t.dim(1) * t.dim(2);
  if (t.rank() == 2) return t.dim(1);
  return t.dim(0);
}

}  // namespace

ModelParams ModelParams::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const std::size_t d = config.hidden_dim;
  const std::size_t cin = config.in_channels;
  const std::size_t k = config.kernel_size;
  const std::size_t a = config.attention_hidden;
  const std::size_t red = d / config.channel_attn_reduction;
  const std::size_t kc = config.num_classes;
  const std::size_t h = config.discr_hidden;

  ModelParams p;
  for (auto& w : p.branch_w) w = Tensor({d, cin, k});
  for (auto& b : p.branch_b) b = Tensor({d});
  p.fuse_w = Tensor({d, 3 * d, 1});
  p.fuse_b = Tensor({d});
  p.ca_w1 = Tensor({red, d});
  p.ca_w2 = Tensor({d, red});
  p.attn_w1 = Tensor({a, d});
  p.attn_b1 = Tensor({a});
  p.attn_w2 = Tensor({1, a});
  p.attn_b2 = Tensor({1});
  p.cls_w = Tensor({kc, d});
  p.cls_b = Tensor({kc});
  p.dom_w1 = Tensor({h, d * kc});
  p.dom_b1 = Tensor({h});
  p.dom_w2 = Tensor({config.num_domains, h});
  p.dom_b2 = Tensor({config.num_domains});

  // weights uniform in +-sqrt(1/fan_in), biases zero
  Rng rng(seed);
  p.for_each([&](const char* name, Tensor& t) {
    if (std::string_view(name).find("_w") == std::string_view::npos) return;
    const double bound = std::sqrt(1.0 / static_cast<double>(fan_in(t)));
    for (double& v : t.data) v = rng.uniform(-bound, bound);
  });
  return p;
}

ParamVars push_params(Tape& tape, const ModelParams& params) {
  ParamVars pv;
  std::size_t i = 0;
  params.for_each([&](const char* name, const Tensor& t) {
    const Var v = tape.leaf(t);
    pv.all.emplace_back(name, v);
    switch (i) {
      case 0: pv.branch_w[0] = v; break;
      case 1: pv.branch_b[0] = v; break;
      case 2: pv.branch_w[1] = v; break;
      case 3: pv.branch_b[1] = v; break;
      case 4: pv.branch_w[2] = v; break;
      case 5: pv.branch_b[2] = v; break;
      case 6: pv.fuse_w = v; break;
      case 7: pv.fuse_b = v; break;
      case 8: pv.ca_w1 = v; break;
      case 9: pv.ca_w2 = v; break;
      case 10: pv.attn_w1 = v; break;
      case 11: pv.attn_b1 = v; break;
      case 12: pv.attn_w2 = v; break;
      case 13: pv.attn_b2 = v; break;
      case 14: pv.cls_w = v; break;
      case 15: pv.cls_b = v; break;
      case 16: pv.dom_w1 = v; break;
      case 17: pv.dom_b1 = v; break;
      case 18: pv.dom_w2 = v; break;
      case 19: pv.dom_b2 = v; break;
      default: break;
    }
    ++i;
  });
  return pv;
}

Var mscae_forward(Tape& tape, Var x_fdm, const ParamVars& pv, const ModelConfig& config) {
  const Tensor& x = tape.value(x_fdm);
  if (x.rank() != 2 || x.dim(0) != config.in_channels)
    fail(ErrorCode::Shape, "mscae_forward: expected " + std::to_string(config.in_channels) +
                               " input channels, got " + shape_str(x.shape));
  std::array<Var, 3> branches;
  for (std::size_t i = 0; i < 3; ++i) {
    const Var c = tape.conv1d(x_fdm, pv.branch_w[i], pv.branch_b[i], config.dilations[i]);
    branches[i] = tape.activation(c, Activation::Relu);
  }
  const Var cat = tape.concat_channels(std::span<const Var>(branches.data(), branches.size()));
  const Var x_msp = tape.conv1d(cat, pv.fuse_w, pv.fuse_b, 1);

  // channel gate: shared bias-free MLP over GAP and GMP statistics
  const Var gap = tape.pool_global(x_msp, PoolMode::Mean);
  const Var gmp = tape.pool_global(x_msp, PoolMode::Max);
  const Var m1 = tape.linear(pv.ca_w2, tape.activation(tape.linear(pv.ca_w1, gap), Activation::Relu));
  const Var m2 = tape.linear(pv.ca_w2, tape.activation(tape.linear(pv.ca_w1, gmp), Activation::Relu));
  const Var w_ch = tape.activation(tape.add(m1, m2), Activation::Sigmoid);
  return tape.channel_scale(x_msp, w_ch);
}

std::pair<Var, std::vector<InstanceSpan>> build_instances(Tape& tape, Var x_sca,
                                                          std::size_t window,
                                                          std::size_t stride) {
  const Tensor& x = tape.value(x_sca);
  if (x.rank() != 2) fail(ErrorCode::Shape, "build_instances: expected [D x T]");
  if (window > x.dim(1))
    fail(ErrorCode::Length, "build_instances: recording shorter than one instance window (" +
                                std::to_string(x.dim(1)) + " < " + std::to_string(window) + ")");
  const Var z = tape.pool_windowed(x_sca, PoolMode::Mean, window, stride);
  const std::size_t n = tape.value(z).dim(0);
  std::vector<InstanceSpan> spans(n);
  for (std::size_t i = 0; i < n; ++i) spans[i] = {i * stride, i * stride + window};
  return {z, spans};
}

Var attention_scores(Tape& tape, Var instances, const ParamVars& pv) {
  const Tensor& z = tape.value(instances);
  if (z.rank() != 2) fail(ErrorCode::Shape, "attention_scores: expected [N x D]");
  const std::size_t n = z.dim(0);
  const Var hidden = tape.activation(tape.affine_rows(instances, pv.attn_w1, pv.attn_b1),
                                     Activation::Tanh);
  const Var s = tape.affine_rows(hidden, pv.attn_w2, pv.attn_b2);  // [N x 1]
  return tape.reshape(s, {n});
}

Var aggregate_bag(Tape& tape, Var instances, Var gated_weights) {
  return tape.weighted_rowsum(instances, gated_weights);
}

Var classify(Tape& tape, Var bag_embedding, const ParamVars& pv) {
  return tape.affine(bag_embedding, pv.cls_w, pv.cls_b);
}

Var cdan_features(Tape& tape, Var bag_embedding, Var probs) {
  return tape.outer(bag_embedding, probs);
}

Var domain_discriminate(Tape& tape, Var features, const ParamVars& pv, double lambda,
                        bool apply_grl) {
  Var h = apply_grl ? tape.grad_reverse(features, lambda) : features;
  const Var hidden = tape.activation(tape.affine(h, pv.dom_w1, pv.dom_b1), Activation::Relu);
  return tape.affine(hidden, pv.dom_w2, pv.dom_b2);
}

ForwardVars forward_from_fdm(Tape& tape, const Tensor& x_fdm, const ParamVars& pv,
                             const ModelConfig& config, double lambda, bool want_domain,
                             bool apply_grl) {
  ForwardVars fv;
  const Var x = tape.leaf(x_fdm);
  fv.x_sca = mscae_forward(tape, x, pv, config);
  auto [z, spans] = build_instances(tape, fv.x_sca, config.instance_window, config.instance_stride);
  fv.instances = z;
  fv.spans = std::move(spans);
  const std::size_t n = tape.value(z).dim(0);

  if (config.aggregator == Aggregator::AttentionMil) {
    fv.scores = attention_scores(tape, z, pv);
    const Var att = tape.softmax(fv.scores);
    fv.gated = tape.topk_gate(att, config.topk_ratio);
  } else {
    // ablation arm: uniform mean over instances
    fv.gated = tape.leaf(Tensor({n}, 1.0 / static_cast<double>(n)));
  }
  fv.bag_embedding = aggregate_bag(tape, z, fv.gated);
  fv.logits = classify(tape, fv.bag_embedding, pv);
  fv.probs = tape.softmax(fv.logits);
  if (want_domain) {
    const Var h = cdan_features(tape, fv.bag_embedding, fv.probs);
    fv.domain_logits = domain_discriminate(tape, h, pv, lambda, apply_grl);
  }
  return fv;
}

BagResult bag_result_from(const Tape& tape, const ForwardVars& fv, const ModelConfig& config) {
  BagResult r;
  r.logits = tape.value(fv.logits);
  r.probs = tape.value(fv.probs);
  r.bag_embedding = tape.value(fv.bag_embedding);
  r.attention = tape.value(fv.gated).data;
  r.spans = fv.spans;
  (void)config;
  return r;
}

BagOutput forward_bag(const Tensor& x, const BandSet& bands, double fs,
                      const ModelParams& params, const ModelConfig& config, double lambda) {
  config.validate();
  const Tensor x_fdm = frequency_decompose(x, bands, fs);
  Tape tape;
  const ParamVars pv = push_params(tape, params);
  const ForwardVars fv = forward_from_fdm(tape, x_fdm, pv, config, lambda);
  BagOutput out;
  out.bag = bag_result_from(tape, fv, config);
  out.domain_logits = tape.value(fv.domain_logits);
  return out;
}

// --- checkpoint -------------------------------------------------------------

namespace {
constexpr const char* kMagic = "mfam-checkpoint v1";
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ostringstream out;
  out << kMagic << "\n";
  const ModelConfig& c = ckpt.config;
  out << "in_channels " << c.in_channels << "\n";
  out << "hidden_dim " << c.hidden_dim << "\n";
  out << "kernel_size " << c.kernel_size << "\n";
  out << "dilations " << c.dilations[0] << " " << c.dilations[1] << " " << c.dilations[2] << "\n";
  out << "attention_hidden " << c.attention_hidden << "\n";
  out << "num_classes " << c.num_classes << "\n";
  out << "num_domains " << c.num_domains << "\n";
  out << "instance_window " << c.instance_window << "\n";
  out << "instance_stride " << c.instance_stride << "\n";
  out << "topk_ratio " << format_double(c.topk_ratio) << "\n";
  out << "channel_attn_reduction " << c.channel_attn_reduction << "\n";
  out << "discr_hidden " << c.discr_hidden << "\n";
  out << "aggregator " << aggregator_name(c.aggregator) << "\n";
  out << "fs " << format_double(ckpt.fs) << "\n";
  out << "bands " << ckpt.bands.size() << "\n";
  for (const Band& b : ckpt.bands.bands)
    out << format_double(b.f_low) << " " << format_double(b.f_high) << "\n";
  ckpt.params.for_each([&](const char* name, const Tensor& t) {
    out << "tensor " << name << " " << t.rank();
    for (std::size_t d : t.shape) out << " " << d;
    out << "\n";
    for (std::size_t i = 0; i < t.numel(); ++i) {
      if (i) out << " ";
      out << format_double(t[i]);
    }
    out << "\n";
  });
  out << "end\n";
  write_file_atomic(path, out.str());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line) || trim(line) != kMagic)
    fail(ErrorCode::Format, "checkpoint: bad magic in " + path.string());

  Checkpoint ckpt;
  auto next_line = [&](const char* what) {
    if (!std::getline(in, line)) fail(ErrorCode::Format, std::string("checkpoint: truncated at ") + what);
    return std::string(trim(line));
  };
  auto kv = [&](const char* key) {
    const std::string l = next_line(key);
    const auto sp = l.find(' ');
    if (sp == std::string::npos || l.substr(0, sp) != key)
      fail(ErrorCode::Format, "checkpoint: expected '" + std::string(key) + "', got '" + l + "'");
    return l.substr(sp + 1);
  };

  ModelConfig& c = ckpt.config;
  c.in_channels = static_cast<std::size_t>(parse_long(kv("in_channels"), "checkpoint"));
  c.hidden_dim = static_cast<std::size_t>(parse_long(kv("hidden_dim"), "checkpoint"));
  c.kernel_size = static_cast<std::size_t>(parse_long(kv("kernel_size"), "checkpoint"));
  {
    const auto parts = split(kv("dilations"), ' ');
    if (parts.size() != 3) fail(ErrorCode::Format, "checkpoint: dilations must have 3 entries");
    for (std::size_t i = 0; i < 3; ++i)
      c.dilations[i] = static_cast<int>(parse_long(parts[i], "checkpoint"));
  }
  c.attention_hidden = static_cast<std::size_t>(parse_long(kv("attention_hidden"), "checkpoint"));
  c.num_classes = static_cast<std::size_t>(parse_long(kv("num_classes"), "checkpoint"));
  c.num_domains = static_cast<std::size_t>(parse_long(kv("num_domains"), "checkpoint"));
  c.instance_window = static_cast<std::size_t>(parse_long(kv("instance_window"), "checkpoint"));
  c.instance_stride = static_cast<std::size_t>(parse_long(kv("instance_stride"), "checkpoint"));
  c.topk_ratio = parse_double(kv("topk_ratio"), "checkpoint");
  c.channel_attn_reduction =
      static_cast<std::size_t>(parse_long(kv("channel_attn_reduction"), "checkpoint"));
  c.discr_hidden = static_cast<std::size_t>(parse_long(kv("discr_hidden"), "checkpoint"));
  c.aggregator = aggregator_from_name(kv("aggregator"));
  ckpt.fs = parse_double(kv("fs"), "checkpoint");
  const long nbands = parse_long(kv("bands"), "checkpoint");
  for (long i = 0; i < nbands; ++i) {
    const auto parts = split(next_line("band"), ' ');
    if (parts.size() != 2) fail(ErrorCode::Format, "checkpoint: band line must have 2 numbers");
    ckpt.bands.bands.push_back(
        {parse_double(parts[0], "checkpoint"), parse_double(parts[1], "checkpoint")});
  }

  ckpt.params = ModelParams::init(c, 0);  // allocates shapes; values overwritten below
  ckpt.params.for_each([&](const char* name, Tensor& t) {
    const auto header = split(next_line("tensor header"), ' ');
    if (header.size() < 3 || header[0] != "tensor" || header[1] != name)
      fail(ErrorCode::Format, "checkpoint: expected tensor '" + std::string(name) + "'");
    const auto rank = static_cast<std::size_t>(parse_long(header[2], "checkpoint"));
    if (header.size() != 3 + rank) fail(ErrorCode::Format, "checkpoint: bad tensor header");
    std::vector<std::size_t> shape(rank);
    for (std::size_t i = 0; i < rank; ++i)
      shape[i] = static_cast<std::size_t>(parse_long(header[3 + i], "checkpoint"));
    if (shape != t.shape)
      fail(ErrorCode::Format, "checkpoint: tensor '" + std::string(name) + "' has shape " +
                                  shape_str(shape) + ", expected " + shape_str(t.shape));
    const auto values = split(next_line("tensor data"), ' ');
    if (values.size() != t.numel())
      fail(ErrorCode::Format, "checkpoint: tensor '" + std::string(name) + "' has " +
                                  std::to_string(values.size()) + " values, expected " +
                                  std::to_string(t.numel()));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = parse_double(values[i], "checkpoint");
  });
  if (next_line("end") != "end") fail(ErrorCode::Format, "checkpoint: missing end marker");
  return ckpt;
}

}  // namespace mfam
