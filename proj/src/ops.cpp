#include "falldet/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "falldet/gemm.hpp"

namespace falldet::ops {

namespace {

using detail::Node;
using NodePtr = std::shared_ptr<Node>;

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()) + " differ");
}

std::size_t last_dim(const Tensor& x) {
  if (x.rank() == 0) throw DimensionError("expected rank >= 1");
  return x.shape().back();
}

void accumulate(std::vector<double>& dst, const std::vector<double>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

// ---------------------------------------------------------------- elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  std::vector<double> out(a.size());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return Tensor(detail::make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      accumulate(pa->grad, self.grad);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      accumulate(pb->grad, self.grad);
    }
  }));
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  std::vector<double> out(a.size());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return Tensor(detail::make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      accumulate(pa->grad, self.grad);
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
    }
  }));
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  std::vector<double> out(a.size());
  const auto& av = a.data();
  const auto& bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return Tensor(detail::make_op(a.shape(), std::move(out), {pa, pb}, [pa, pb](Node& self) {
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        pa->grad[i] += self.grad[i] * pb->value[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        pb->grad[i] += self.grad[i] * pa->value[i];
    }
  }));
}

Tensor add_scalar(const Tensor& x, double s) {
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + s;
  auto px = x.node_ptr();
  return Tensor(detail::make_op(x.shape(), std::move(out), {px}, [px](Node& self) {
    px->ensure_grad();
    accumulate(px->grad, self.grad);
  }));
}

Tensor mul_scalar(const Tensor& x, double s) {
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * s;
  auto px = x.node_ptr();
  return Tensor(detail::make_op(x.shape(), std::move(out), {px}, [px, s](Node& self) {
    px->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i] * s;
  }));
}

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  auto px = x.node_ptr();
  return Tensor(detail::make_op(x.shape(), std::move(out), {px}, [px](Node& self) {
    px->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i)
      if (px->value[i] > 0.0) px->grad[i] += self.grad[i];
  }));
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-xv[i]));
  auto px = x.node_ptr();
  return Tensor(detail::make_op(x.shape(), std::move(out), {px}, [px](Node& self) {
    px->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double y = self.value[i];
      px->grad[i] += self.grad[i] * y * (1.0 - y);
    }
  }));
}

Tensor tanh_act(const Tensor& x) {
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(xv[i]);
  auto px = x.node_ptr();
  return Tensor(detail::make_op(x.shape(), std::move(out), {px}, [px](Node& self) {
    px->ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double y = self.value[i];
      px->grad[i] += self.grad[i] * (1.0 - y * y);
    }
  }));
}

Tensor softmax_lastdim(const Tensor& x) {
  const std::size_t c = last_dim(x);
  const std::size_t rows = x.size() / c;
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.data() + r * c;
    double* o = out.data() + r * c;
    double mx = in[0];
    for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, in[j]);
    double sum = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      o[j] = std::exp(in[j] - mx);
      sum += o[j];
    }
    const double inv = 1.0 / sum;
    for (std::size_t j = 0; j < c; ++j) o[j] *= inv;
  }
  auto px = x.node_ptr();
  return Tensor(detail::make_op(x.shape(), std::move(out), {px}, [px, c, rows](Node& self) {
    px->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = self.value.data() + r * c;
      const double* dy = self.grad.data() + r * c;
      double* dx = px->grad.data() + r * c;
      double dot = 0.0;
      for (std::size_t j = 0; j < c; ++j) dot += dy[j] * y[j];
      for (std::size_t j = 0; j < c; ++j) dx[j] += y[j] * (dy[j] - dot);
    }
  }));
}

Tensor activation(const Tensor& x, Activation mode) {
  switch (mode) {
    case Activation::relu:
      return relu(x);
    case Activation::sigmoid:
      return sigmoid(x);
    case Activation::tanh:
      return tanh_act(x);
    case Activation::softmax_lastdim:
      return softmax_lastdim(x);
  }
  throw ConfigError("activation: unknown mode");
}

// ---------------------------------------------------------- reductions/shape

Tensor sum_all(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto px = x.node_ptr();
  return Tensor(detail::make_op({1}, {s}, {px}, [px](Node& self) {
    px->ensure_grad();
    const double g = self.grad[0];
    for (double& d : px->grad) d += g;
  }));
}

Tensor mean_all(const Tensor& x) {
  const double n = static_cast<double>(x.size());
  double s = 0.0;
  for (double v : x.data()) s += v;
  auto px = x.node_ptr();
  return Tensor(detail::make_op({1}, {s / n}, {px}, [px, n](Node& self) {
    px->ensure_grad();
    const double g = self.grad[0] / n;
    for (double& d : px->grad) d += g;
  }));
}

Tensor mean_over_time(const Tensor& x) {
  if (x.rank() != 3) throw DimensionError("mean_over_time expects B x T x C, got " + shape_str(x.shape()));
  const std::size_t b = x.shape()[0], t = x.shape()[1], c = x.shape()[2];
  std::vector<double> out(b * c, 0.0);
  const auto& xv = x.data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ti = 0; ti < t; ++ti) {
      const double* row = xv.data() + (bi * t + ti) * c;
      double* o = out.data() + bi * c;
      for (std::size_t ci = 0; ci < c; ++ci) o[ci] += row[ci];
    }
  const double inv = 1.0 / static_cast<double>(t);
  for (double& v : out) v *= inv;
  auto px = x.node_ptr();
  return Tensor(detail::make_op({b, c}, std::move(out), {px}, [px, b, t, c, inv](Node& self) {
    px->ensure_grad();
    for (std::size_t bi = 0; bi < b; ++bi) {
      const double* dy = self.grad.data() + bi * c;
      for (std::size_t ti = 0; ti < t; ++ti) {
        double* dx = px->grad.data() + (bi * t + ti) * c;
        for (std::size_t ci = 0; ci < c; ++ci) dx[ci] += dy[ci] * inv;
      }
    }
  }));
}

Tensor tile_time(const Tensor& x, std::size_t t) {
  if (x.rank() != 2) throw DimensionError("tile_time expects B x C, got " + shape_str(x.shape()));
  const std::size_t b = x.shape()[0], c = x.shape()[1];
  std::vector<double> out(b * t * c);
  const auto& xv = x.data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t ti = 0; ti < t; ++ti)
      std::memcpy(out.data() + (bi * t + ti) * c, xv.data() + bi * c, c * sizeof(double));
  auto px = x.node_ptr();
  return Tensor(detail::make_op({b, t, c}, std::move(out), {px}, [px, b, t, c](Node& self) {
    px->ensure_grad();
    for (std::size_t bi = 0; bi < b; ++bi)
      for (std::size_t ti = 0; ti < t; ++ti) {
        const double* dy = self.grad.data() + (bi * t + ti) * c;
        double* dx = px->grad.data() + bi * c;
        for (std::size_t ci = 0; ci < c; ++ci) dx[ci] += dy[ci];
      }
  }));
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.size())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape) +
                         " changes element count");
  auto px = x.node_ptr();
  return Tensor(detail::make_op(std::move(shape), x.data(), {px}, [px](Node& self) {
    px->ensure_grad();
    accumulate(px->grad, self.grad);
  }));
}

Tensor concat_lastdim(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_lastdim: no inputs");
  Shape lead = parts[0].shape();
  lead.pop_back();
  std::size_t total_c = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    Shape l = p.shape();
    const std::size_t c = l.back();
    l.pop_back();
    if (l != lead)
      throw DimensionError("concat_lastdim: leading dims differ: " + shape_str(parts[0].shape()) +
                           " vs " + shape_str(p.shape()));
    widths.push_back(c);
    total_c += c;
  }
  const std::size_t rows = numel(lead);
  std::vector<double> out(rows * total_c);
  std::size_t col0 = 0;
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& v = parts[pi].data();
    const std::size_t c = widths[pi];
    for (std::size_t r = 0; r < rows; ++r)
      std::memcpy(out.data() + r * total_c + col0, v.data() + r * c, c * sizeof(double));
    col0 += c;
  }
  Shape out_shape = lead;
  out_shape.push_back(total_c);
  std::vector<NodePtr> parents;
  for (const auto& p : parts) parents.push_back(p.node_ptr());
  return Tensor(detail::make_op(std::move(out_shape), std::move(out), parents,
                                [parents, widths, rows, total_c](Node& self) {
                                  std::size_t col = 0;
                                  for (std::size_t pi = 0; pi < parents.size(); ++pi) {
                                    const std::size_t c = widths[pi];
                                    auto& p = parents[pi];
                                    if (p->requires_grad) {
                                      p->ensure_grad();
                                      for (std::size_t r = 0; r < rows; ++r) {
                                        const double* dy = self.grad.data() + r * total_c + col;
                                        double* dx = p->grad.data() + r * c;
                                        for (std::size_t ci = 0; ci < c; ++ci) dx[ci] += dy[ci];
                                      }
                                    }
                                    col += c;
                                  }
                                }));
}

Tensor split_heads(const Tensor& x, std::size_t heads) {
  if (x.rank() != 3) throw DimensionError("split_heads expects B x T x W, got " + shape_str(x.shape()));
  const std::size_t b = x.shape()[0], t = x.shape()[1], w = x.shape()[2];
  if (heads == 0 || w % heads != 0)
    throw ConfigError("split_heads: " + std::to_string(heads) + " heads do not divide width " +
                      std::to_string(w));
  const std::size_t d = w / heads;
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t hi = 0; hi < heads; ++hi)
      for (std::size_t ti = 0; ti < t; ++ti)
        std::memcpy(out.data() + ((bi * heads + hi) * t + ti) * d,
                    xv.data() + (bi * t + ti) * w + hi * d, d * sizeof(double));
  auto px = x.node_ptr();
  return Tensor(detail::make_op({b, heads, t, d}, std::move(out), {px},
                                [px, b, heads, t, d, w](Node& self) {
                                  px->ensure_grad();
                                  for (std::size_t bi = 0; bi < b; ++bi)
                                    for (std::size_t hi = 0; hi < heads; ++hi)
                                      for (std::size_t ti = 0; ti < t; ++ti) {
                                        const double* dy =
                                            self.grad.data() + ((bi * heads + hi) * t + ti) * d;
                                        double* dx = px->grad.data() + (bi * t + ti) * w + hi * d;
                                        for (std::size_t k = 0; k < d; ++k) dx[k] += dy[k];
                                      }
                                }));
}

Tensor merge_heads(const Tensor& x) {
  if (x.rank() != 4) throw DimensionError("merge_heads expects B x H x T x D, got " + shape_str(x.shape()));
  const std::size_t b = x.shape()[0], heads = x.shape()[1], t = x.shape()[2], d = x.shape()[3];
  const std::size_t w = heads * d;
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t hi = 0; hi < heads; ++hi)
      for (std::size_t ti = 0; ti < t; ++ti)
        std::memcpy(out.data() + (bi * t + ti) * w + hi * d,
                    xv.data() + ((bi * heads + hi) * t + ti) * d, d * sizeof(double));
  auto px = x.node_ptr();
  return Tensor(detail::make_op({b, t, w}, std::move(out), {px},
                                [px, b, heads, t, d, w](Node& self) {
                                  px->ensure_grad();
                                  for (std::size_t bi = 0; bi < b; ++bi)
                                    for (std::size_t hi = 0; hi < heads; ++hi)
                                      for (std::size_t ti = 0; ti < t; ++ti) {
                                        const double* dy =
                                            self.grad.data() + (bi * t + ti) * w + hi * d;
                                        double* dx =
                                            px->grad.data() + ((bi * heads + hi) * t + ti) * d;
                                        for (std::size_t k = 0; k < d; ++k) dx[k] += dy[k];
                                      }
                                }));
}

// ------------------------------------------------------------------- matmuls

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.rank() != 2)
    throw DimensionError("linear: weight must be rank 2, got " + shape_str(w.shape()));
  const std::size_t d_in = w.shape()[0], d_out = w.shape()[1];
  if (x.rank() < 1 || last_dim(x) != d_in)
    throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  if (b.size() != d_out)
    throw DimensionError("linear: bias " + shape_str(b.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  const std::size_t rows = x.size() / d_in;
  std::vector<double> out(rows * d_out);
  const auto& bv = b.data();
  for (std::size_t r = 0; r < rows; ++r)
    std::memcpy(out.data() + r * d_out, bv.data(), d_out * sizeof(double));
  gemm::nn_acc(x.data().data(), w.data().data(), out.data(), rows, d_in, d_out);

  Shape out_shape = x.shape();
  out_shape.back() = d_out;
  auto px = x.node_ptr(), pw = w.node_ptr(), pb = b.node_ptr();
  return Tensor(detail::make_op(std::move(out_shape), std::move(out), {px, pw, pb},
                                [px, pw, pb, rows, d_in, d_out](Node& self) {
                                  if (px->requires_grad) {
                                    px->ensure_grad();
                                    gemm::nt_acc(self.grad.data(), pw->value.data(),
                                                 px->grad.data(), rows, d_out, d_in);
                                  }
                                  if (pw->requires_grad) {
                                    pw->ensure_grad();
                                    gemm::tn_acc(px->value.data(), self.grad.data(),
                                                 pw->grad.data(), rows, d_in, d_out);
                                  }
                                  if (pb->requires_grad) {
                                    pb->ensure_grad();
                                    for (std::size_t r = 0; r < rows; ++r) {
                                      const double* dy = self.grad.data() + r * d_out;
                                      for (std::size_t j = 0; j < d_out; ++j) pb->grad[j] += dy[j];
                                    }
                                  }
                                }));
}

namespace {

struct BmmDims {
  std::size_t batch, m, k, n;
  Shape out_shape;
};

BmmDims bmm_dims(const Tensor& a, const Tensor& b, bool b_transposed, const char* op) {
  if (a.rank() < 2 || b.rank() != a.rank())
    throw DimensionError(std::string(op) + ": ranks differ: " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  const std::size_t r = a.rank();
  for (std::size_t i = 0; i + 2 < r; ++i)
    if (a.shape()[i] != b.shape()[i])
      throw DimensionError(std::string(op) + ": batch dims differ: " + shape_str(a.shape()) +
                           " vs " + shape_str(b.shape()));
  BmmDims d;
  d.m = a.shape()[r - 2];
  d.k = a.shape()[r - 1];
  const std::size_t bk = b_transposed ? b.shape()[r - 1] : b.shape()[r - 2];
  d.n = b_transposed ? b.shape()[r - 2] : b.shape()[r - 1];
  if (bk != d.k)
    throw DimensionError(std::string(op) + ": inner extents differ: " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  d.batch = 1;
  for (std::size_t i = 0; i + 2 < r; ++i) d.batch *= a.shape()[i];
  d.out_shape = a.shape();
  d.out_shape[r - 2] = d.m;
  d.out_shape[r - 1] = d.n;
  return d;
}

}  // namespace

Tensor bmm_nn(const Tensor& a, const Tensor& b) {
  const BmmDims d = bmm_dims(a, b, false, "bmm_nn");
  std::vector<double> out(d.batch * d.m * d.n, 0.0);
  for (std::size_t l = 0; l < d.batch; ++l)
    gemm::nn_acc(a.data().data() + l * d.m * d.k, b.data().data() + l * d.k * d.n,
                 out.data() + l * d.m * d.n, d.m, d.k, d.n);
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return Tensor(detail::make_op(d.out_shape, std::move(out), {pa, pb}, [pa, pb, d](Node& self) {
    for (std::size_t l = 0; l < d.batch; ++l) {
      const double* dy = self.grad.data() + l * d.m * d.n;
      if (pa->requires_grad) {
        pa->ensure_grad();
        // dA = dY * B^T
        gemm::nt_acc(dy, pb->value.data() + l * d.k * d.n, pa->grad.data() + l * d.m * d.k, d.m,
                     d.n, d.k);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        // dB = A^T * dY
        gemm::tn_acc(pa->value.data() + l * d.m * d.k, dy, pb->grad.data() + l * d.k * d.n, d.m,
                     d.k, d.n);
      }
    }
  }));
}

Tensor bmm_nt(const Tensor& a, const Tensor& b) {
  const BmmDims d = bmm_dims(a, b, true, "bmm_nt");
  std::vector<double> out(d.batch * d.m * d.n, 0.0);
  for (std::size_t l = 0; l < d.batch; ++l)
    gemm::nt_acc(a.data().data() + l * d.m * d.k, b.data().data() + l * d.n * d.k,
                 out.data() + l * d.m * d.n, d.m, d.k, d.n);
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return Tensor(detail::make_op(d.out_shape, std::move(out), {pa, pb}, [pa, pb, d](Node& self) {
    for (std::size_t l = 0; l < d.batch; ++l) {
      const double* dy = self.grad.data() + l * d.m * d.n;
      if (pa->requires_grad) {
        pa->ensure_grad();
        // dA = dY * B
        gemm::nn_acc(dy, pb->value.data() + l * d.n * d.k, pa->grad.data() + l * d.m * d.k, d.m,
                     d.n, d.k);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        // dB = dY^T * A
        gemm::tn_acc(dy, pa->value.data() + l * d.m * d.k, pb->grad.data() + l * d.n * d.k, d.m,
                     d.n, d.k);
      }
    }
  }));
}

// -------------------------------------------------------------------- layers

Tensor conv1d_same(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  if (x.rank() != 3)
    throw DimensionError("conv1d_same: input must be B x T x C_in, got " + shape_str(x.shape()));
  if (kernel.rank() != 3)
    throw DimensionError("conv1d_same: kernel must be C_out x C_in x k, got " +
                         shape_str(kernel.shape()));
  const std::size_t b = x.shape()[0], t = x.shape()[1], c_in = x.shape()[2];
  const std::size_t c_out = kernel.shape()[0], kc_in = kernel.shape()[1], k = kernel.shape()[2];
  if (k % 2 == 0) throw ConfigError("conv1d_same: kernel length " + std::to_string(k) + " must be odd");
  if (kc_in != c_in)
    throw DimensionError("conv1d_same: input channels " + shape_str(x.shape()) +
                         " do not match kernel " + shape_str(kernel.shape()));
  if (bias.size() != c_out)
    throw DimensionError("conv1d_same: bias " + shape_str(bias.shape()) + " does not match kernel " +
                         shape_str(kernel.shape()));
  const std::size_t pad = (k - 1) / 2;

  std::vector<double> out(b * t * c_out);
  const auto& bv = bias.data();
  for (std::size_t r = 0; r < b * t; ++r)
    std::memcpy(out.data() + r * c_out, bv.data(), c_out * sizeof(double));

  const auto& xv = x.data();
  const auto& wv = kernel.data();
  // One packed C_in x C_out slice per tap; each tap is then a plain matmul
  // over the valid time range.
  std::vector<double> w_t(c_in * c_out);
  for (std::size_t d = 0; d < k; ++d) {
    for (std::size_t ci = 0; ci < c_in; ++ci)
      for (std::size_t co = 0; co < c_out; ++co) w_t[ci * c_out + co] = wv[(co * c_in + ci) * k + d];
    const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(d) - static_cast<std::ptrdiff_t>(pad);
    const std::size_t t_lo = off < 0 ? static_cast<std::size_t>(-off) : 0;
    const std::size_t t_hi = off > 0 ? t - static_cast<std::size_t>(off) : t;  // exclusive
    if (t_lo >= t_hi) continue;
    const std::size_t rows = t_hi - t_lo;
    for (std::size_t bi = 0; bi < b; ++bi) {
      const double* src = xv.data() + (bi * t + t_lo + off) * c_in;
      double* dst = out.data() + (bi * t + t_lo) * c_out;
      gemm::nn_acc(src, w_t.data(), dst, rows, c_in, c_out);
    }
  }

  auto px = x.node_ptr(), pw = kernel.node_ptr(), pb = bias.node_ptr();
  return Tensor(detail::make_op(
      {b, t, c_out}, std::move(out), {px, pw, pb},
      [px, pw, pb, b, t, c_in, c_out, k, pad](Node& self) {
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t r = 0; r < b * t; ++r) {
            const double* dy = self.grad.data() + r * c_out;
            for (std::size_t co = 0; co < c_out; ++co) pb->grad[co] += dy[co];
          }
        }
        std::vector<double> w_slice(c_out * c_in);
        std::vector<double> dw_t(c_in * c_out);
        for (std::size_t d = 0; d < k; ++d) {
          const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(d) - static_cast<std::ptrdiff_t>(pad);
          const std::size_t t_lo = off < 0 ? static_cast<std::size_t>(-off) : 0;
          const std::size_t t_hi = off > 0 ? t - static_cast<std::size_t>(off) : t;
          if (t_lo >= t_hi) continue;
          const std::size_t rows = t_hi - t_lo;
          if (px->requires_grad) {
            px->ensure_grad();
            // dX[t+off] += dY[t] * W_d  (W_d packed C_out x C_in)
            for (std::size_t co = 0; co < c_out; ++co)
              for (std::size_t ci = 0; ci < c_in; ++ci)
                w_slice[co * c_in + ci] = pw->value[(co * c_in + ci) * k + d];
            for (std::size_t bi = 0; bi < b; ++bi) {
              const double* dy = self.grad.data() + (bi * t + t_lo) * c_out;
              double* dx = px->grad.data() + (bi * t + t_lo + off) * c_in;
              gemm::nn_acc(dy, w_slice.data(), dx, rows, c_out, c_in);
            }
          }
          if (pw->requires_grad) {
            pw->ensure_grad();
            std::fill(dw_t.begin(), dw_t.end(), 0.0);
            for (std::size_t bi = 0; bi < b; ++bi) {
              const double* src = px->value.data() + (bi * t + t_lo + off) * c_in;
              const double* dy = self.grad.data() + (bi * t + t_lo) * c_out;
              gemm::tn_acc(src, dy, dw_t.data(), rows, c_in, c_out);
            }
            for (std::size_t ci = 0; ci < c_in; ++ci)
              for (std::size_t co = 0; co < c_out; ++co)
                pw->grad[(co * c_in + ci) * k + d] += dw_t[ci * c_out + co];
          }
        }
      }));
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                  bool training) {
  const std::size_t c = last_dim(x);
  if (gamma.size() != c || beta.size() != c)
    throw DimensionError("batch_norm: gamma/beta " + shape_str(gamma.shape()) +
                         " do not match channels of " + shape_str(x.shape()));
  if (state.running_mean.size() != c) state.init(c);
  const std::size_t rows = x.size() / c;
  const auto& xv = x.data();
  const auto& gv = gamma.data();
  const auto& bv = beta.data();

  std::vector<double> mean(c, 0.0), inv_std(c, 0.0);
  if (training) {
    if (rows < 2)
      throw ContractError("batch_norm: degenerate batch (" + std::to_string(rows) +
                          " element(s) per channel) in training mode");
    std::vector<double> var(c, 0.0);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = xv.data() + r * c;
      for (std::size_t j = 0; j < c; ++j) mean[j] += row[j];
    }
    const double inv_n = 1.0 / static_cast<double>(rows);
    for (std::size_t j = 0; j < c; ++j) mean[j] *= inv_n;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* row = xv.data() + r * c;
      for (std::size_t j = 0; j < c; ++j) {
        const double d = row[j] - mean[j];
        var[j] += d * d;
      }
    }
    for (std::size_t j = 0; j < c; ++j) var[j] *= inv_n;
    for (std::size_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(var[j] + state.eps);
    // running stats keep the unbiased batch variance
    const double unbias = static_cast<double>(rows) / static_cast<double>(rows - 1);
    for (std::size_t j = 0; j < c; ++j) {
      state.running_mean[j] = (1.0 - state.momentum) * state.running_mean[j] + state.momentum * mean[j];
      state.running_var[j] =
          (1.0 - state.momentum) * state.running_var[j] + state.momentum * var[j] * unbias;
    }
  } else {
    mean = state.running_mean;
    for (std::size_t j = 0; j < c; ++j) inv_std[j] = 1.0 / std::sqrt(state.running_var[j] + state.eps);
  }

  std::vector<double> out(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv.data() + r * c;
    double* o = out.data() + r * c;
    for (std::size_t j = 0; j < c; ++j) o[j] = gv[j] * (row[j] - mean[j]) * inv_std[j] + bv[j];
  }

  auto px = x.node_ptr(), pg = gamma.node_ptr(), pb = beta.node_ptr();
  return Tensor(detail::make_op(
      x.shape(), std::move(out), {px, pg, pb},
      [px, pg, pb, rows, c, mean, inv_std, training](Node& self) {
        // per-channel reductions of dy and dy * x_hat
        std::vector<double> sum_dy(c, 0.0), sum_dy_xhat(c, 0.0);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* dy = self.grad.data() + r * c;
          const double* row = px->value.data() + r * c;
          for (std::size_t j = 0; j < c; ++j) {
            const double xhat = (row[j] - mean[j]) * inv_std[j];
            sum_dy[j] += dy[j];
            sum_dy_xhat[j] += dy[j] * xhat;
          }
        }
        if (pg->requires_grad) {
          pg->ensure_grad();
          for (std::size_t j = 0; j < c; ++j) pg->grad[j] += sum_dy_xhat[j];
        }
        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t j = 0; j < c; ++j) pb->grad[j] += sum_dy[j];
        }
        if (px->requires_grad) {
          px->ensure_grad();
          const double inv_n = 1.0 / static_cast<double>(rows);
          for (std::size_t r = 0; r < rows; ++r) {
            const double* dy = self.grad.data() + r * c;
            const double* row = px->value.data() + r * c;
            double* dx = px->grad.data() + r * c;
            for (std::size_t j = 0; j < c; ++j) {
              const double g = pg->value[j] * inv_std[j];
              if (training) {
                const double xhat = (row[j] - mean[j]) * inv_std[j];
                dx[j] += g * (dy[j] - inv_n * sum_dy[j] - xhat * inv_n * sum_dy_xhat[j]);
              } else {
                dx[j] += g * dy[j];
              }
            }
          }
        }
      }));
}

Tensor dropout(const Tensor& x, double p, bool training, Rng& rng) {
  if (p < 0.0 || p >= 1.0)
    throw ConfigError("dropout: probability " + std::to_string(p) + " must be in [0, 1)");
  if (!training || p == 0.0) return x;
  const double scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.size());
  for (double& m : mask) m = rng.bernoulli(p) ? 0.0 : scale;
  std::vector<double> out(x.size());
  const auto& xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * mask[i];
  auto px = x.node_ptr();
  return Tensor(detail::make_op(x.shape(), std::move(out), {px},
                                [px, mask = std::move(mask)](Node& self) {
                                  px->ensure_grad();
                                  for (std::size_t i = 0; i < self.grad.size(); ++i)
                                    px->grad[i] += self.grad[i] * mask[i];
                                }));
}

// ---------------------------------------------------------------------- lstm

namespace {

// Activations and states saved for backprop, all time-major.
struct LstmSaved {
  std::size_t b, t, d, h;
  bool reverse;
  std::vector<double> gates;  // T x B x 4H, post-activation (i, f, g, o)
  std::vector<double> cells;  // T x B x H (ordered by step, not by time)
  std::vector<double> hs;     // T x B x H (ordered by step)
};

}  // namespace

Tensor lstm_layer(const Tensor& x, const Tensor& w_ih, const Tensor& w_hh, const Tensor& b,
                  bool reverse) {
  if (x.rank() != 3)
    throw DimensionError("lstm_layer: input must be B x T x D, got " + shape_str(x.shape()));
  const std::size_t bb = x.shape()[0], t = x.shape()[1], d = x.shape()[2];
  if (w_ih.rank() != 2 || w_ih.shape()[0] != d)
    throw DimensionError("lstm_layer: w_ih " + shape_str(w_ih.shape()) + " does not match input " +
                         shape_str(x.shape()));
  const std::size_t h4 = w_ih.shape()[1];
  if (h4 % 4 != 0) throw DimensionError("lstm_layer: gate width must be a multiple of 4");
  const std::size_t h = h4 / 4;
  if (w_hh.rank() != 2 || w_hh.shape()[0] != h || w_hh.shape()[1] != h4)
    throw DimensionError("lstm_layer: w_hh " + shape_str(w_hh.shape()) + " must be " +
                         std::to_string(h) + "x" + std::to_string(h4));
  if (b.size() != h4)
    throw DimensionError("lstm_layer: bias " + shape_str(b.shape()) + " must have " +
                         std::to_string(h4) + " entries");

  const bool record = grad_enabled() &&
                      (x.requires_grad() || w_ih.requires_grad() || w_hh.requires_grad() ||
                       b.requires_grad());

  // Input projection for all timesteps at once, then reorder to step-major.
  std::vector<double> proj(bb * t * h4);
  {
    const auto& bv = b.data();
    std::vector<double> flat(bb * t * h4);
    for (std::size_t r = 0; r < bb * t; ++r)
      std::memcpy(flat.data() + r * h4, bv.data(), h4 * sizeof(double));
    gemm::nn_acc(x.data().data(), w_ih.data().data(), flat.data(), bb * t, d, h4);
    for (std::size_t s = 0; s < t; ++s) {
      const std::size_t time = reverse ? t - 1 - s : s;
      for (std::size_t bi = 0; bi < bb; ++bi)
        std::memcpy(proj.data() + (s * bb + bi) * h4, flat.data() + (bi * t + time) * h4,
                    h4 * sizeof(double));
    }
  }

  auto saved = std::make_shared<LstmSaved>();
  saved->b = bb;
  saved->t = t;
  saved->d = d;
  saved->h = h;
  saved->reverse = reverse;
  saved->cells.assign(t * bb * h, 0.0);
  saved->hs.assign(t * bb * h, 0.0);

  std::vector<double> h_prev(bb * h, 0.0);
  std::vector<double> c_prev(bb * h, 0.0);
  for (std::size_t s = 0; s < t; ++s) {
    double* gates_s = proj.data() + s * bb * h4;
    gemm::nn_acc(h_prev.data(), w_hh.data().data(), gates_s, bb, h, h4);
    double* c_s = saved->cells.data() + s * bb * h;
    double* h_s = saved->hs.data() + s * bb * h;
    double finite_acc = 0.0;
    for (std::size_t bi = 0; bi < bb; ++bi) {
      double* g = gates_s + bi * h4;
      const double* cp = c_prev.data() + bi * h;
      double* cc = c_s + bi * h;
      double* hh = h_s + bi * h;
      for (std::size_t j = 0; j < h; ++j) {
        const double gi = 1.0 / (1.0 + std::exp(-g[j]));
        const double gf = 1.0 / (1.0 + std::exp(-g[h + j]));
        const double gg = std::tanh(g[2 * h + j]);
        const double go = 1.0 / (1.0 + std::exp(-g[3 * h + j]));
        g[j] = gi;
        g[h + j] = gf;
        g[2 * h + j] = gg;
        g[3 * h + j] = go;
        cc[j] = gf * cp[j] + gi * gg;
        hh[j] = go * std::tanh(cc[j]);
        finite_acc += std::abs(hh[j]) + std::abs(cc[j]);
      }
    }
    if (!std::isfinite(finite_acc))
      throw NumericError("lstm_layer: non-finite state at timestep " +
                         std::to_string(reverse ? t - 1 - s : s));
    std::memcpy(h_prev.data(), h_s, bb * h * sizeof(double));
    std::memcpy(c_prev.data(), c_s, bb * h * sizeof(double));
  }

  // Output, batch-major and aligned with the input's time axis.
  std::vector<double> out(bb * t * h);
  for (std::size_t s = 0; s < t; ++s) {
    const std::size_t time = reverse ? t - 1 - s : s;
    for (std::size_t bi = 0; bi < bb; ++bi)
      std::memcpy(out.data() + (bi * t + time) * h, saved->hs.data() + (s * bb + bi) * h,
                  h * sizeof(double));
  }

  if (!record) return Tensor::from_data({bb, t, h}, std::move(out));

  saved->gates = std::move(proj);
  auto px = x.node_ptr(), pwi = w_ih.node_ptr(), pwh = w_hh.node_ptr(), pb = b.node_ptr();
  return Tensor(detail::make_op(
      {bb, t, h}, std::move(out), {px, pwi, pwh, pb}, [px, pwi, pwh, pb, saved](Node& self) {
        const std::size_t bb = saved->b, t = saved->t, d = saved->d, h = saved->h;
        const std::size_t h4 = 4 * h;
        // dA: pre-activation gate grads per step, step-major
        std::vector<double> da_all(t * bb * h4, 0.0);
        std::vector<double> dh(bb * h, 0.0), dc(bb * h, 0.0), dh_rec(bb * h);

        for (std::size_t s = t; s-- > 0;) {
          const std::size_t time = saved->reverse ? t - 1 - s : s;
          // incoming grad for this step: output grad + recurrent carry in dh
          for (std::size_t bi = 0; bi < bb; ++bi) {
            const double* dy = self.grad.data() + (bi * t + time) * h;
            double* dhb = dh.data() + bi * h;
            for (std::size_t j = 0; j < h; ++j) dhb[j] += dy[j];
          }
          const double* gates_s = saved->gates.data() + s * bb * h4;
          const double* c_s = saved->cells.data() + s * bb * h;
          const double* c_prev = s == 0 ? nullptr : saved->cells.data() + (s - 1) * bb * h;
          double* da_s = da_all.data() + s * bb * h4;
          for (std::size_t bi = 0; bi < bb; ++bi) {
            const double* g = gates_s + bi * h4;
            const double* cc = c_s + bi * h;
            const double* cp = c_prev ? c_prev + bi * h : nullptr;
            double* dhb = dh.data() + bi * h;
            double* dcb = dc.data() + bi * h;
            double* da = da_s + bi * h4;
            for (std::size_t j = 0; j < h; ++j) {
              const double gi = g[j], gf = g[h + j], gg = g[2 * h + j], go = g[3 * h + j];
              const double tc = std::tanh(cc[j]);
              const double dout = dhb[j];
              da[3 * h + j] = dout * tc * go * (1.0 - go);
              dcb[j] += dout * go * (1.0 - tc * tc);
              const double cprev = cp ? cp[j] : 0.0;
              da[h + j] = dcb[j] * cprev * gf * (1.0 - gf);
              da[j] = dcb[j] * gg * gi * (1.0 - gi);
              da[2 * h + j] = dcb[j] * gi * (1.0 - gg * gg);
              dcb[j] *= gf;  // becomes dc_prev
            }
          }
          // dh_prev = dA_s * w_hh^T, feeds the next (earlier) step
          std::fill(dh_rec.begin(), dh_rec.end(), 0.0);
          gemm::nt_acc(da_s, pwh->value.data(), dh_rec.data(), bb, h4, h);
          std::swap(dh, dh_rec);
          if (pwh->requires_grad && s > 0) {
            pwh->ensure_grad();
            // dW_hh += h_{s-1}^T * dA_s
            gemm::tn_acc(saved->hs.data() + (s - 1) * bb * h, da_s, pwh->grad.data(), bb, h, h4);
          }
        }

        if (pb->requires_grad) {
          pb->ensure_grad();
          for (std::size_t r = 0; r < t * bb; ++r) {
            const double* da = da_all.data() + r * h4;
            for (std::size_t j = 0; j < h4; ++j) pb->grad[j] += da[j];
          }
        }
        if (px->requires_grad || pwi->requires_grad) {
          // reorder dA to batch-major rows matching x's layout
          std::vector<double> da_flat(bb * t * h4);
          for (std::size_t s = 0; s < t; ++s) {
            const std::size_t time = saved->reverse ? t - 1 - s : s;
            for (std::size_t bi = 0; bi < bb; ++bi)
              std::memcpy(da_flat.data() + (bi * t + time) * h4,
                          da_all.data() + (s * bb + bi) * h4, h4 * sizeof(double));
          }
          if (px->requires_grad) {
            px->ensure_grad();
            gemm::nt_acc(da_flat.data(), pwi->value.data(), px->grad.data(), bb * t, h4, d);
          }
          if (pwi->requires_grad) {
            pwi->ensure_grad();
            gemm::tn_acc(px->value.data(), da_flat.data(), pwi->grad.data(), bb * t, d, h4);
          }
        }
      }));
}

}  // namespace falldet::ops
