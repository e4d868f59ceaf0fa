#include "mfam/tensor.hpp"

#include <cmath>
#include <sstream>

#include "mfam/error.hpp"

namespace mfam {

Tensor::Tensor(std::vector<std::size_t> s, double fill)
    : shape(std::move(s)), data(shape_numel(shape), fill) {
  for (std::size_t d : shape) {
    if (d == 0) fail(ErrorCode::Shape, "tensor extents must be positive, got " + shape_str(shape));
  }
}

Tensor Tensor::scalar(double v) {
  Tensor t;
  t.shape = {1};
  t.data = {v};
  return t;
}

Tensor Tensor::vector(std::vector<double> v) {
  Tensor t;
  t.shape = {v.size()};
  t.data = std::move(v);
  return t;
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
  if (rows * cols != v.size())
    fail(ErrorCode::Shape, "matrix data length " + std::to_string(v.size()) +
                               " does not match " + std::to_string(rows) + "x" +
                               std::to_string(cols));
  Tensor t;
  t.shape = {rows, cols};
  t.data = std::move(v);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

void Tensor::fill(double v) {
  for (double& x : data) x = v;
}

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return shape.empty() ? 0 : n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << "x";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

}  // namespace mfam
