#pragma once

#include <cstddef>
#include <vector>

#include "mfam/tensor.hpp"

namespace mfam {

// Bias-corrected Adam over a fixed, ordered parameter list.
struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  long t = 0;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  AdamState() = default;
  AdamState(const std::vector<const Tensor*>& params, double lr);
};

// One update step; increments state.t even when all gradients are zero.
void adam_step(const std::vector<Tensor*>& params,
               const std::vector<const Tensor*>& grads, AdamState& state);

}  // namespace mfam
