#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mfam/fdm.hpp"
#include "mfam/tape.hpp"
#include "mfam/tensor.hpp"

namespace mfam {

enum class Aggregator { AttentionMil, Gap };

const char* aggregator_name(Aggregator a);
Aggregator aggregator_from_name(std::string_view name);

struct ModelConfig {
  std::size_t in_channels = 0;  // C * |B|, filled from data
  std::size_t hidden_dim = 64;
  std::size_t kernel_size = 3;
  std::array<int, 3> dilations{1, 2, 4};
  std::size_t attention_hidden = 64;
  std::size_t num_classes = 2;
  std::size_t num_domains = 1;  // training subjects, filled per fold
  std::size_t instance_window = 100;
  std::size_t instance_stride = 50;
  double topk_ratio = 0.3;
  std::size_t channel_attn_reduction = 4;
  std::size_t discr_hidden = 128;
  Aggregator aggregator = Aggregator::AttentionMil;

  void validate() const;
};

// All learnable weights. Iteration order of for_each is the canonical
// parameter order used by the optimizer, checkpoints and gradient maps.
struct ModelParams {
  std::array<Tensor, 3> branch_w;  // [D x Cin x k]
  std::array<Tensor, 3> branch_b;  // [D]
  Tensor fuse_w;                   // [D x 3D x 1]
  Tensor fuse_b;                   // [D]
  Tensor ca_w1;                    // [D/r x D], shared MLP, no biases
  Tensor ca_w2;                    // [D x D/r]
  Tensor attn_w1;                  // [A x D]
  Tensor attn_b1;                  // [A]
  Tensor attn_w2;                  // [1 x A]
  Tensor attn_b2;                  // [1]
  Tensor cls_w;                    // [K x D]
  Tensor cls_b;                    // [K]
  Tensor dom_w1;                   // [H x D*K]
  Tensor dom_b1;                   // [H]
  Tensor dom_w2;                   // [num_domains x H]
  Tensor dom_b2;                   // [num_domains]

  static ModelParams init(const ModelConfig& config, std::uint64_t seed);

  template <typename Fn>
  void for_each(Fn&& fn) {
    fn("branch0_w", branch_w[0]); fn("branch0_b", branch_b[0]);
    fn("branch1_w", branch_w[1]); fn("branch1_b", branch_b[1]);
    fn("branch2_w", branch_w[2]); fn("branch2_b", branch_b[2]);
    fn("fuse_w", fuse_w); fn("fuse_b", fuse_b);
    fn("ca_w1", ca_w1); fn("ca_w2", ca_w2);
    fn("attn_w1", attn_w1); fn("attn_b1", attn_b1);
    fn("attn_w2", attn_w2); fn("attn_b2", attn_b2);
    fn("cls_w", cls_w); fn("cls_b", cls_b);
    fn("dom_w1", dom_w1); fn("dom_b1", dom_b1);
    fn("dom_w2", dom_w2); fn("dom_b2", dom_b2);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    const_cast<ModelParams*>(this)->for_each(
        [&](const char* name, Tensor& t) { fn(name, static_cast<const Tensor&>(t)); });
  }

  static bool is_discriminator(std::string_view name) { return name.starts_with("dom_"); }
};

struct InstanceSpan {
  std::size_t start = 0;  // inclusive frame index
  std::size_t end = 0;    // exclusive
};

// Per-recording output of the forward pass.
struct BagResult {
  Tensor logits;                    // [K]
  Tensor probs;                     // [K]
  std::vector<double> attention;    // N post-gating weights
  std::vector<InstanceSpan> spans;  // N instance extents on the time axis
  Tensor bag_embedding;             // [D]
};

// Leaf handles for every parameter on a tape, plus the canonical flat list.
struct ParamVars {
  std::array<Var, 3> branch_w, branch_b;
  Var fuse_w, fuse_b, ca_w1, ca_w2;
  Var attn_w1, attn_b1, attn_w2, attn_b2;
  Var cls_w, cls_b;
  Var dom_w1, dom_b1, dom_w2, dom_b2;
  std::vector<std::pair<std::string, Var>> all;
};

ParamVars push_params(Tape& tape, const ModelParams& params);

// Dilated branches -> concat -> 1x1 fuse -> channel attention gate.
Var mscae_forward(Tape& tape, Var x_fdm, const ParamVars& pv, const ModelConfig& config);

// Sliding mean pool over the feature map; one instance per window.
std::pair<Var, std::vector<InstanceSpan>> build_instances(Tape& tape, Var x_sca,
                                                          std::size_t window,
                                                          std::size_t stride);

Var attention_scores(Tape& tape, Var instances, const ParamVars& pv);
Var aggregate_bag(Tape& tape, Var instances, Var gated_weights);
Var classify(Tape& tape, Var bag_embedding, const ParamVars& pv);
Var cdan_features(Tape& tape, Var bag_embedding, Var probs);
Var domain_discriminate(Tape& tape, Var features, const ParamVars& pv, double lambda,
                        bool apply_grl = true);

// Everything the losses and the explanation export need, as tape handles.
struct ForwardVars {
  Var x_sca, instances, gated, bag_embedding, logits, probs;
  Var scores;         // invalid in gap mode
  Var domain_logits;  // invalid when the domain head is skipped
  std::vector<InstanceSpan> spans;
};

ForwardVars forward_from_fdm(Tape& tape, const Tensor& x_fdm, const ParamVars& pv,
                             const ModelConfig& config, double lambda,
                             bool want_domain = true, bool apply_grl = true);

struct BagOutput {
  BagResult bag;
  Tensor domain_logits;
};

// Full pipeline on one recording: frequency decomposition, encoder,
// instance aggregation, classifier and domain head.
BagOutput forward_bag(const Tensor& x, const BandSet& bands, double fs,
                      const ModelParams& params, const ModelConfig& config, double lambda);

BagResult bag_result_from(const Tape& tape, const ForwardVars& fv, const ModelConfig& config);

// Checkpoint: plain-text header + exact round-trip doubles.
struct Checkpoint {
  ModelConfig config;
  BandSet bands;
  double fs = 100.0;
  ModelParams params;
};

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mfam
