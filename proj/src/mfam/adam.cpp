#include "mfam/adam.hpp"

#include <cmath>

#include "mfam/error.hpp"

namespace mfam {

AdamState::AdamState(const std::vector<const Tensor*>& params, double lr_) {
  lr = lr_;
  m.reserve(params.size());
  v.reserve(params.size());
  for (const Tensor* p : params) {
    m.emplace_back(p->shape, 0.0);
    v.emplace_back(p->shape, 0.0);
  }
}

void adam_step(const std::vector<Tensor*>& params,
               const std::vector<const Tensor*>& grads, AdamState& state) {
  if (params.size() != grads.size() || params.size() != state.m.size())
    fail(ErrorCode::Shape, "adam_step: parameter/gradient/state counts differ");
  state.t += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    const Tensor& g = *grads[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    if (!p.same_shape(g) || !p.same_shape(m))
      fail(ErrorCode::Shape, "adam_step: shape mismatch at parameter " + std::to_string(i) +
                                 ": " + shape_str(p.shape) + " vs " + shape_str(g.shape));
    for (std::size_t j = 0; j < p.numel(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

}  // namespace mfam
