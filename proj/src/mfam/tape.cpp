#include "mfam/tape.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <utility>

#include "mfam/error.hpp"

namespace mfam {

std::size_t topk_count(std::size_t n, double ratio) {
  if (!(ratio > 0.0) || ratio > 1.0)
    fail(ErrorCode::Domain, "top-k ratio must lie in (0, 1], got " + std::to_string(ratio));
  if (n == 0) return 0;
  const double raw = ratio * static_cast<double>(n);
  auto k = static_cast<std::size_t>(std::ceil(raw - 1e-9));
  if (k < 1) k = 1;
  return std::min(k, n);
}

std::vector<std::size_t> topk_indices(std::span<const double> values, std::size_t k) {
  std::vector<std::size_t> order(values.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] > values[b]; });
  order.resize(std::min(k, order.size()));
  std::sort(order.begin(), order.end());
  return order;
}

Var Tape::push(Tensor value, std::vector<int> inputs,
               std::function<void(Tape&, const Node&)> backprop) {
  Node n;
  n.value = std::move(value);
  n.inputs = std::move(inputs);
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const Tape::Node& Tape::node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

Tensor& Tape::grad_ref(int id) { return nodes_[static_cast<std::size_t>(id)].grad; }

void Tape::check_var(Var v, const char* who) const {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
    fail(ErrorCode::InvalidArgument, std::string(who) + ": variable is not on this tape");
}

const Tensor& Tape::value(Var v) const {
  check_var(v, "value");
  return node(v.id).value;
}

const Tensor& Tape::grad(Var v) const {
  check_var(v, "grad");
  return node(v.id).grad;
}

Var Tape::leaf(Tensor value) { return push(std::move(value), {}, nullptr); }

Var Tape::add(Var a, Var b) {
  check_var(a, "add");
  check_var(b, "add");
  const Tensor& va = val(a.id);
  const Tensor& vb = val(b.id);
  if (!va.same_shape(vb))
    fail(ErrorCode::Shape, "add: shapes differ " + shape_str(va.shape) + " vs " + shape_str(vb.shape));
  Tensor out = va;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] += vb[i];
  return push(std::move(out), {a.id, b.id}, [](Tape& t, const Node& n) {
    Tensor& ga = t.grad_ref(n.inputs[0]);
    Tensor& gb = t.grad_ref(n.inputs[1]);
    for (std::size_t i = 0; i < n.grad.numel(); ++i) {
      ga[i] += n.grad[i];
      gb[i] += n.grad[i];
    }
  });
}

Var Tape::mul(Var a, Var b) {
  check_var(a, "mul");
  check_var(b, "mul");
  const Tensor& va = val(a.id);
  const Tensor& vb = val(b.id);
  if (!va.same_shape(vb))
    fail(ErrorCode::Shape, "mul: shapes differ " + shape_str(va.shape) + " vs " + shape_str(vb.shape));
  Tensor out = va;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= vb[i];
  return push(std::move(out), {a.id, b.id}, [](Tape& t, const Node& n) {
    const Tensor& va = t.val(n.inputs[0]);
    const Tensor& vb = t.val(n.inputs[1]);
    Tensor& ga = t.grad_ref(n.inputs[0]);
    Tensor& gb = t.grad_ref(n.inputs[1]);
    for (std::size_t i = 0; i < n.grad.numel(); ++i) {
      ga[i] += n.grad[i] * vb[i];
      gb[i] += n.grad[i] * va[i];
    }
  });
}

Var Tape::scale(Var a, double c) {
  check_var(a, "scale");
  Tensor out = val(a.id);
  for (double& v : out.data) v *= c;
  return push(std::move(out), {a.id}, [c](Tape& t, const Node& n) {
    Tensor& ga = t.grad_ref(n.inputs[0]);
    for (std::size_t i = 0; i < n.grad.numel(); ++i) ga[i] += c * n.grad[i];
  });
}

Var Tape::sum(Var a) {
  check_var(a, "sum");
  const Tensor& va = val(a.id);
  double s = 0.0;
  for (double v : va.data) s += v;
  return push(Tensor::scalar(s), {a.id}, [](Tape& t, const Node& n) {
    Tensor& ga = t.grad_ref(n.inputs[0]);
    for (double& g : ga.data) g += n.grad[0];
  });
}

Var Tape::pick(Var a, std::size_t flat_index) {
  check_var(a, "pick");
  const Tensor& va = val(a.id);
  if (flat_index >= va.numel())
    fail(ErrorCode::Index, "pick: index " + std::to_string(flat_index) + " out of range for " +
                               shape_str(va.shape));
  return push(Tensor::scalar(va[flat_index]), {a.id}, [flat_index](Tape& t, const Node& n) {
    t.grad_ref(n.inputs[0])[flat_index] += n.grad[0];
  });
}

Var Tape::reshape(Var a, std::vector<std::size_t> new_shape) {
  check_var(a, "reshape");
  const Tensor& va = val(a.id);
  if (shape_numel(new_shape) != va.numel())
    fail(ErrorCode::Shape, "reshape: cannot view " + shape_str(va.shape) + " as " + shape_str(new_shape));
  Tensor out = va;
  out.shape = std::move(new_shape);
  return push(std::move(out), {a.id}, [](Tape& t, const Node& n) {
    Tensor& ga = t.grad_ref(n.inputs[0]);
    for (std::size_t i = 0; i < n.grad.numel(); ++i) ga[i] += n.grad[i];
  });
}

Var Tape::concat_channels(std::span<const Var> parts) {
  if (parts.empty()) fail(ErrorCode::InvalidArgument, "concat_channels: no inputs");
  std::size_t total_c = 0;
  std::size_t t_len = 0;
  std::vector<int> ids;
  for (Var p : parts) {
    check_var(p, "concat_channels");
    const Tensor& v = val(p.id);
    if (v.rank() != 2) fail(ErrorCode::Shape, "concat_channels: expected rank-2, got " + shape_str(v.shape));
    if (t_len == 0) t_len = v.dim(1);
    if (v.dim(1) != t_len)
      fail(ErrorCode::Shape, "concat_channels: time lengths differ");
    total_c += v.dim(0);
    ids.push_back(p.id);
  }
  Tensor out({total_c, t_len});
  std::size_t row = 0;
  for (Var p : parts) {
    const Tensor& v = val(p.id);
    std::copy(v.data.begin(), v.data.end(), out.data.begin() + static_cast<long>(row * t_len));
    row += v.dim(0);
  }
  return push(std::move(out), std::move(ids), [](Tape& t, const Node& n) {
    std::size_t offset = 0;
    for (int in : n.inputs) {
      Tensor& g = t.grad_ref(in);
      for (std::size_t i = 0; i < g.numel(); ++i) g[i] += n.grad[offset + i];
      offset += g.numel();
    }
  });
}

Var Tape::affine(Var x, Var w, Var b) {
  check_var(x, "affine");
  check_var(w, "affine");
  check_var(b, "affine");
  const Tensor& vx = val(x.id);
  const Tensor& vw = val(w.id);
  const Tensor& vb = val(b.id);
  if (vx.rank() != 1 || vw.rank() != 2 || vb.rank() != 1 || vw.dim(1) != vx.dim(0) ||
      vw.dim(0) != vb.dim(0))
    fail(ErrorCode::Shape, "affine: incompatible shapes x=" + shape_str(vx.shape) + " w=" +
                               shape_str(vw.shape) + " b=" + shape_str(vb.shape));
  const std::size_t m = vw.dim(0), n = vw.dim(1);
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i) {
    double s = vb[i];
    const double* wr = &vw.data[i * n];
    for (std::size_t j = 0; j < n; ++j) s += wr[j] * vx[j];
    out[i] = s;
  }
  return push(std::move(out), {x.id, w.id, b.id}, [m, n](Tape& t, const Node& nd) {
    const Tensor& vx = t.val(nd.inputs[0]);
    const Tensor& vw = t.val(nd.inputs[1]);
    Tensor& gx = t.grad_ref(nd.inputs[0]);
    Tensor& gw = t.grad_ref(nd.inputs[1]);
    Tensor& gb = t.grad_ref(nd.inputs[2]);
    for (std::size_t i = 0; i < m; ++i) {
      const double g = nd.grad[i];
      const double* wr = &vw.data[i * n];
      double* gwr = &gw.data[i * n];
      for (std::size_t j = 0; j < n; ++j) {
        gx[j] += g * wr[j];
        gwr[j] += g * vx[j];
      }
      gb[i] += g;
    }
  });
}

Var Tape::linear(Var w, Var x) {
  check_var(w, "linear");
  check_var(x, "linear");
  const Tensor& vw = val(w.id);
  const Tensor& vx = val(x.id);
  if (vw.rank() != 2 || vx.rank() != 1 || vw.dim(1) != vx.dim(0))
    fail(ErrorCode::Shape, "linear: incompatible shapes w=" + shape_str(vw.shape) + " x=" +
                               shape_str(vx.shape));
  const std::size_t m = vw.dim(0), n = vw.dim(1);
  Tensor out({m});
  for (std::size_t i = 0; i < m; ++i) {
    double s = 0.0;
    const double* wr = &vw.data[i * n];
    for (std::size_t j = 0; j < n; ++j) s += wr[j] * vx[j];
    out[i] = s;
  }
  return push(std::move(out), {w.id, x.id}, [m, n](Tape& t, const Node& nd) {
    const Tensor& vw = t.val(nd.inputs[0]);
    const Tensor& vx = t.val(nd.inputs[1]);
    Tensor& gw = t.grad_ref(nd.inputs[0]);
    Tensor& gx = t.grad_ref(nd.inputs[1]);
    for (std::size_t i = 0; i < m; ++i) {
      const double g = nd.grad[i];
      const double* wr = &vw.data[i * n];
      double* gwr = &gw.data[i * n];
      for (std::size_t j = 0; j < n; ++j) {
        gx[j] += g * wr[j];
        gwr[j] += g * vx[j];
      }
    }
  });
}

Var Tape::affine_rows(Var z, Var w, Var b) {
  check_var(z, "affine_rows");
  check_var(w, "affine_rows");
  check_var(b, "affine_rows");
  const Tensor& vz = val(z.id);
  const Tensor& vw = val(w.id);
  const Tensor& vb = val(b.id);
  if (vz.rank() != 2 || vw.rank() != 2 || vb.rank() != 1 || vw.dim(1) != vz.dim(1) ||
      vw.dim(0) != vb.dim(0))
    fail(ErrorCode::Shape, "affine_rows: incompatible shapes z=" + shape_str(vz.shape) + " w=" +
                               shape_str(vw.shape) + " b=" + shape_str(vb.shape));
  const std::size_t rows = vz.dim(0), n = vz.dim(1), m = vw.dim(0);
  Tensor out({rows, m});
  for (std::size_t r = 0; r < rows; ++r) {
    const double* zr = &vz.data[r * n];
    for (std::size_t i = 0; i < m; ++i) {
      double s = vb[i];
      const double* wr = &vw.data[i * n];
      for (std::size_t j = 0; j < n; ++j) s += wr[j] * zr[j];
      out.at2(r, i) = s;
    }
  }
  return push(std::move(out), {z.id, w.id, b.id}, [rows, n, m](Tape& t, const Node& nd) {
    const Tensor& vz = t.val(nd.inputs[0]);
    const Tensor& vw = t.val(nd.inputs[1]);
    Tensor& gz = t.grad_ref(nd.inputs[0]);
    Tensor& gw = t.grad_ref(nd.inputs[1]);
    Tensor& gb = t.grad_ref(nd.inputs[2]);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* zr = &vz.data[r * n];
      double* gzr = &gz.data[r * n];
      for (std::size_t i = 0; i < m; ++i) {
        const double g = nd.grad[r * m + i];
        const double* wr = &vw.data[i * n];
        double* gwr = &gw.data[i * n];
        for (std::size_t j = 0; j < n; ++j) {
          gzr[j] += g * wr[j];
          gwr[j] += g * zr[j];
        }
        gb[i] += g;
      }
    }
  });
}

Var Tape::outer(Var z, Var p) {
  check_var(z, "outer");
  check_var(p, "outer");
  const Tensor& vz = val(z.id);
  const Tensor& vp = val(p.id);
  if (vz.rank() != 1 || vp.rank() != 1)
    fail(ErrorCode::Shape, "outer: expected two vectors, got " + shape_str(vz.shape) + " and " +
                               shape_str(vp.shape));
  const std::size_t d = vz.dim(0), k = vp.dim(0);
  Tensor out({d * k});
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = vz[i] * vp[j];
  return push(std::move(out), {z.id, p.id}, [d, k](Tape& t, const Node& nd) {
    const Tensor& vz = t.val(nd.inputs[0]);
    const Tensor& vp = t.val(nd.inputs[1]);
    Tensor& gz = t.grad_ref(nd.inputs[0]);
    Tensor& gp = t.grad_ref(nd.inputs[1]);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < k; ++j) {
        const double g = nd.grad[i * k + j];
        gz[i] += g * vp[j];
        gp[j] += g * vz[i];
      }
    }
  });
}

Var Tape::conv1d(Var x, Var w, Var b, int dilation) {
  check_var(x, "conv1d");
  check_var(w, "conv1d");
  check_var(b, "conv1d");
  const Tensor& vx = val(x.id);
  const Tensor& vw = val(w.id);
  const Tensor& vb = val(b.id);
  if (vx.rank() != 2 || vw.rank() != 3 || vb.rank() != 1)
    fail(ErrorCode::Shape, "conv1d: expected x rank 2, w rank 3, b rank 1");
  if (vw.dim(1) != vx.dim(0))
    fail(ErrorCode::Shape, "conv1d: input channels " + std::to_string(vx.dim(0)) +
                               " do not match kernel channels " + std::to_string(vw.dim(1)));
  if (vw.dim(0) != vb.dim(0))
    fail(ErrorCode::Shape, "conv1d: bias length does not match output channels");
  if (vw.dim(2) % 2 == 0)
    fail(ErrorCode::Shape, "conv1d: kernel size must be odd, got " + std::to_string(vw.dim(2)));
  if (dilation < 1) fail(ErrorCode::Domain, "conv1d: dilation must be positive");

  const std::size_t cin = vx.dim(0), t_len = vx.dim(1);
  const std::size_t cout = vw.dim(0), k = vw.dim(2);
  const long half = static_cast<long>(k - 1) / 2;
  const long d = dilation;
  const long tl = static_cast<long>(t_len);

  Tensor out({cout, t_len});
  for (std::size_t co = 0; co < cout; ++co) {
    double* yr = &out.data[co * t_len];
    for (std::size_t t = 0; t < t_len; ++t) yr[t] = vb[co];
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* xr = &vx.data[ci * t_len];
      for (std::size_t j = 0; j < k; ++j) {
        const double wv = vw.at3(co, ci, j);
        const long off = (static_cast<long>(j) - half) * d;
        const long lo = std::max(0L, -off);
        const long hi = std::min(tl, tl - off);
        for (long t = lo; t < hi; ++t) yr[t] += wv * xr[t + off];
      }
    }
  }
  return push(std::move(out), {x.id, w.id, b.id},
              [cin, cout, t_len, k, half, d, tl](Tape& t, const Node& nd) {
                const Tensor& vx = t.val(nd.inputs[0]);
                const Tensor& vw = t.val(nd.inputs[1]);
                Tensor& gx = t.grad_ref(nd.inputs[0]);
                Tensor& gw = t.grad_ref(nd.inputs[1]);
                Tensor& gb = t.grad_ref(nd.inputs[2]);
                for (std::size_t co = 0; co < cout; ++co) {
                  const double* gyr = &nd.grad.data[co * t_len];
                  double gbs = 0.0;
                  for (std::size_t tt = 0; tt < t_len; ++tt) gbs += gyr[tt];
                  gb[co] += gbs;
                  for (std::size_t ci = 0; ci < cin; ++ci) {
                    const double* xr = &vx.data[ci * t_len];
                    double* gxr = &gx.data[ci * t_len];
                    for (std::size_t j = 0; j < k; ++j) {
                      const double wv = vw.at3(co, ci, j);
                      const long off = (static_cast<long>(j) - half) * d;
                      const long lo = std::max(0L, -off);
                      const long hi = std::min(tl, tl - off);
                      double gws = 0.0;
                      for (long tt = lo; tt < hi; ++tt) {
                        gxr[tt + off] += gyr[tt] * wv;
                        gws += gyr[tt] * xr[tt + off];
                      }
                      gw.data[(co * cin + ci) * k + j] += gws;
                    }
                  }
                }
              });
}

Var Tape::activation(Var a, Activation kind) {
  check_var(a, "activation");
  Tensor out = val(a.id);
  switch (kind) {
    case Activation::Tanh:
      for (double& v : out.data) v = std::tanh(v);
      break;
    case Activation::Sigmoid:
      for (double& v : out.data) v = 1.0 / (1.0 + std::exp(-v));
      break;
    case Activation::Relu:
      for (double& v : out.data) v = v > 0.0 ? v : 0.0;
      break;
  }
  return push(std::move(out), {a.id}, [kind](Tape& t, const Node& nd) {
    const Tensor& y = nd.value;
    Tensor& ga = t.grad_ref(nd.inputs[0]);
    switch (kind) {
      case Activation::Tanh:
        for (std::size_t i = 0; i < y.numel(); ++i) ga[i] += nd.grad[i] * (1.0 - y[i] * y[i]);
        break;
      case Activation::Sigmoid:
        for (std::size_t i = 0; i < y.numel(); ++i) ga[i] += nd.grad[i] * y[i] * (1.0 - y[i]);
        break;
      case Activation::Relu:
        for (std::size_t i = 0; i < y.numel(); ++i) ga[i] += y[i] > 0.0 ? nd.grad[i] : 0.0;
        break;
    }
  });
}

Var Tape::softmax(Var x) {
  check_var(x, "softmax");
  const Tensor& vx = val(x.id);
  if (vx.rank() != 1 || vx.numel() < 1)
    fail(ErrorCode::Shape, "softmax: expected nonempty vector, got " + shape_str(vx.shape));
  Tensor out = vx;
  const double mx = *std::max_element(out.data.begin(), out.data.end());
  double denom = 0.0;
  for (double& v : out.data) {
    v = std::exp(v - mx);
    denom += v;
  }
  for (double& v : out.data) v /= denom;
  return push(std::move(out), {x.id}, [](Tape& t, const Node& nd) {
    const Tensor& p = nd.value;
    Tensor& gx = t.grad_ref(nd.inputs[0]);
    double dot = 0.0;
    for (std::size_t i = 0; i < p.numel(); ++i) dot += nd.grad[i] * p[i];
    for (std::size_t i = 0; i < p.numel(); ++i) gx[i] += p[i] * (nd.grad[i] - dot);
  });
}

Var Tape::pool_global(Var x, PoolMode mode) {
  check_var(x, "pool");
  const Tensor& vx = val(x.id);
  if (vx.rank() != 2) fail(ErrorCode::Shape, "pool: expected rank-2 input, got " + shape_str(vx.shape));
  const std::size_t c = vx.dim(0), t_len = vx.dim(1);
  Tensor out({c});
  std::vector<std::size_t> argmax(mode == PoolMode::Max ? c : 0);
  for (std::size_t ci = 0; ci < c; ++ci) {
    const double* xr = &vx.data[ci * t_len];
    if (mode == PoolMode::Mean) {
      double s = 0.0;
      for (std::size_t t = 0; t < t_len; ++t) s += xr[t];
      out[ci] = s / static_cast<double>(t_len);
    } else {
      std::size_t best = 0;
      for (std::size_t t = 1; t < t_len; ++t)
        if (xr[t] > xr[best]) best = t;
      out[ci] = xr[best];
      argmax[ci] = best;
    }
  }
  return push(std::move(out), {x.id},
              [mode, c, t_len, argmax = std::move(argmax)](Tape& t, const Node& nd) {
                Tensor& gx = t.grad_ref(nd.inputs[0]);
                for (std::size_t ci = 0; ci < c; ++ci) {
                  if (mode == PoolMode::Mean) {
                    const double g = nd.grad[ci] / static_cast<double>(t_len);
                    double* gr = &gx.data[ci * t_len];
                    for (std::size_t tt = 0; tt < t_len; ++tt) gr[tt] += g;
                  } else {
                    gx.data[ci * t_len + argmax[ci]] += nd.grad[ci];
                  }
                }
              });
}

Var Tape::pool_windowed(Var x, PoolMode mode, std::size_t window, std::size_t stride) {
  check_var(x, "pool");
  const Tensor& vx = val(x.id);
  if (vx.rank() != 2) fail(ErrorCode::Shape, "pool: expected rank-2 input, got " + shape_str(vx.shape));
  if (stride < 1) fail(ErrorCode::Domain, "pool: stride must be >= 1");
  const std::size_t c = vx.dim(0), t_len = vx.dim(1);
  if (window > t_len)
    fail(ErrorCode::Length, "pool: window exceeds sequence (" + std::to_string(window) + " > " +
                                std::to_string(t_len) + ")");
  const std::size_t n = (t_len - window) / stride + 1;
  Tensor out({n, c});
  std::vector<std::size_t> argmax(mode == PoolMode::Max ? n * c : 0);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t start = i * stride;
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double* xr = &vx.data[ci * t_len + start];
      if (mode == PoolMode::Mean) {
        double s = 0.0;
        for (std::size_t t = 0; t < window; ++t) s += xr[t];
        out.at2(i, ci) = s / static_cast<double>(window);
      } else {
        std::size_t best = 0;
        for (std::size_t t = 1; t < window; ++t)
          if (xr[t] > xr[best]) best = t;
        out.at2(i, ci) = xr[best];
        argmax[i * c + ci] = start + best;
      }
    }
  }
  return push(std::move(out), {x.id},
              [mode, c, t_len, n, window, stride, argmax = std::move(argmax)](Tape& t, const Node& nd) {
                Tensor& gx = t.grad_ref(nd.inputs[0]);
                for (std::size_t i = 0; i < n; ++i) {
                  const std::size_t start = i * stride;
                  for (std::size_t ci = 0; ci < c; ++ci) {
                    const double g = nd.grad[i * c + ci];
                    if (mode == PoolMode::Mean) {
                      double* gr = &gx.data[ci * t_len + start];
                      const double gs = g / static_cast<double>(window);
                      for (std::size_t tt = 0; tt < window; ++tt) gr[tt] += gs;
                    } else {
                      gx.data[ci * t_len + argmax[i * c + ci]] += g;
                    }
                  }
                }
              });
}

Var Tape::cross_entropy(Var logits, std::size_t label) {
  check_var(logits, "cross_entropy");
  const Tensor& vl = val(logits.id);
  if (vl.rank() != 1) fail(ErrorCode::Shape, "cross_entropy: logits must be a vector");
  if (label >= vl.numel())
    fail(ErrorCode::Index, "cross_entropy: label " + std::to_string(label) +
                               " out of range for " + std::to_string(vl.numel()) + " classes");
  // sum exp(v - mx) = 1 + rest, with one max term split off so log1p keeps
  // precision when the distribution is nearly one-hot
  const double mx = *std::max_element(vl.data.begin(), vl.data.end());
  double rest = 0.0;
  bool max_taken = false;
  for (double v : vl.data) {
    const double e = v - mx;
    if (!max_taken && e == 0.0) {
      max_taken = true;
      continue;
    }
    rest += std::exp(e);
  }
  const double loss = std::log1p(rest) + (mx - vl[label]);
  return push(Tensor::scalar(loss), {logits.id}, [label](Tape& t, const Node& nd) {
    const Tensor& vl = t.val(nd.inputs[0]);
    Tensor& gl = t.grad_ref(nd.inputs[0]);
    const double mx = *std::max_element(vl.data.begin(), vl.data.end());
    double denom = 0.0;
    for (double v : vl.data) denom += std::exp(v - mx);
    const double g = nd.grad[0];
    for (std::size_t i = 0; i < vl.numel(); ++i) {
      const double p = std::exp(vl[i] - mx) / denom;
      gl[i] += g * (p - (i == label ? 1.0 : 0.0));
    }
  });
}

Var Tape::grad_reverse(Var x, double lambda) {
  check_var(x, "grad_reverse");
  if (lambda < 0.0) fail(ErrorCode::Domain, "grad_reverse: lambda must be >= 0");
  Tensor out = val(x.id);
  return push(std::move(out), {x.id}, [lambda](Tape& t, const Node& nd) {
    Tensor& gx = t.grad_ref(nd.inputs[0]);
    for (std::size_t i = 0; i < nd.grad.numel(); ++i) gx[i] += -lambda * nd.grad[i];
  });
}

Var Tape::channel_scale(Var x, Var g) {
  check_var(x, "channel_scale");
  check_var(g, "channel_scale");
  const Tensor& vx = val(x.id);
  const Tensor& vg = val(g.id);
  if (vx.rank() != 2 || vg.rank() != 1 || vg.dim(0) != vx.dim(0))
    fail(ErrorCode::Shape, "channel_scale: incompatible shapes " + shape_str(vx.shape) + " and " +
                               shape_str(vg.shape));
  const std::size_t c = vx.dim(0), t_len = vx.dim(1);
  Tensor out = vx;
  for (std::size_t ci = 0; ci < c; ++ci) {
    double* r = &out.data[ci * t_len];
    for (std::size_t t = 0; t < t_len; ++t) r[t] *= vg[ci];
  }
  return push(std::move(out), {x.id, g.id}, [c, t_len](Tape& t, const Node& nd) {
    const Tensor& vx = t.val(nd.inputs[0]);
    const Tensor& vg = t.val(nd.inputs[1]);
    Tensor& gx = t.grad_ref(nd.inputs[0]);
    Tensor& gg = t.grad_ref(nd.inputs[1]);
    for (std::size_t ci = 0; ci < c; ++ci) {
      const double* xr = &vx.data[ci * t_len];
      const double* gyr = &nd.grad.data[ci * t_len];
      double* gxr = &gx.data[ci * t_len];
      double s = 0.0;
      for (std::size_t tt = 0; tt < t_len; ++tt) {
        gxr[tt] += gyr[tt] * vg[ci];
        s += gyr[tt] * xr[tt];
      }
      gg[ci] += s;
    }
  });
}

Var Tape::weighted_rowsum(Var z, Var a) {
  check_var(z, "weighted_rowsum");
  check_var(a, "weighted_rowsum");
  const Tensor& vz = val(z.id);
  const Tensor& va = val(a.id);
  if (vz.rank() != 2 || va.rank() != 1 || va.dim(0) != vz.dim(0))
    fail(ErrorCode::Shape, "weighted_rowsum: incompatible shapes " + shape_str(vz.shape) +
                               " and " + shape_str(va.shape));
  const std::size_t n = vz.dim(0), d = vz.dim(1);
  Tensor out({d});
  for (std::size_t i = 0; i < n; ++i) {
    const double w = va[i];
    if (w == 0.0) continue;
    const double* zr = &vz.data[i * d];
    for (std::size_t j = 0; j < d; ++j) out[j] += w * zr[j];
  }
  return push(std::move(out), {z.id, a.id}, [n, d](Tape& t, const Node& nd) {
    const Tensor& vz = t.val(nd.inputs[0]);
    const Tensor& va = t.val(nd.inputs[1]);
    Tensor& gz = t.grad_ref(nd.inputs[0]);
    Tensor& ga = t.grad_ref(nd.inputs[1]);
    for (std::size_t i = 0; i < n; ++i) {
      const double* zr = &vz.data[i * d];
      double* gzr = &gz.data[i * d];
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        gzr[j] += va[i] * nd.grad[j];
        s += nd.grad[j] * zr[j];
      }
      ga[i] += s;
    }
  });
}

Var Tape::topk_gate(Var a, double ratio) {
  check_var(a, "topk_gate");
  const Tensor& va = val(a.id);
  if (va.rank() != 1 || va.numel() < 1)
    fail(ErrorCode::Shape, "topk_gate: expected nonempty vector");
  const std::size_t n = va.numel();
  const std::size_t k = topk_count(n, ratio);
  std::vector<std::size_t> kept = topk_indices(std::span<const double>(va.data), k);

  Tensor out({n});
  if (k == n) {
    // retain-all: exact identity, no renormalization
    out = va;
    return push(std::move(out), {a.id}, [](Tape& t, const Node& nd) {
      Tensor& ga = t.grad_ref(nd.inputs[0]);
      for (std::size_t i = 0; i < nd.grad.numel(); ++i) ga[i] += nd.grad[i];
    });
  }
  double s = 0.0;
  for (std::size_t i : kept) s += va[i];
  if (s <= 0.0) {
    // degenerate all-zero weights: fall back to uniform over the kept set
    for (std::size_t i : kept) out[i] = 1.0 / static_cast<double>(k);
    return push(std::move(out), {a.id}, [](Tape&, const Node&) {});
  }
  for (std::size_t i : kept) out[i] = va[i] / s;
  return push(std::move(out), {a.id}, [kept = std::move(kept), s](Tape& t, const Node& nd) {
    Tensor& ga = t.grad_ref(nd.inputs[0]);
    double dot = 0.0;
    for (std::size_t i : kept) dot += nd.grad[i] * nd.value[i];
    for (std::size_t i : kept) ga[i] += (nd.grad[i] - dot) / s;
  });
}

void Tape::backward(Var loss) {
  check_var(loss, "backward");
  if (node(loss.id).value.numel() != 1)
    fail(ErrorCode::Contract, "backward: loss must be scalar, got " +
                                  shape_str(node(loss.id).value.shape));
  for (Node& n : nodes_) {
    n.grad = Tensor(n.value.shape, 0.0);
  }
  nodes_[static_cast<std::size_t>(loss.id)].grad[0] = 1.0;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.backprop) n.backprop(*this, n);
  }
}

}  // namespace mfam
