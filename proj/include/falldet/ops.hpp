#pragma once

#include <cstdint>
#include <vector>

#include "falldet/rng.hpp"
#include "falldet/tensor.hpp"

// Layer primitives. All tensors are row-major; sequence data is laid out
// batch x time x channel. Every op records a graph edge when gradients are
// enabled and an input requires them.
namespace falldet::ops {

// ---- elementwise ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& x, double s);
Tensor mul_scalar(const Tensor& x, double s);

enum class Activation { relu, sigmoid, tanh, softmax_lastdim };

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor tanh_act(const Tensor& x);
// Softmax over the last dimension; rows sum to 1.
Tensor softmax_lastdim(const Tensor& x);
Tensor activation(const Tensor& x, Activation mode);

// ---- reductions / shape ----

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// B x T x C -> B x C
Tensor mean_over_time(const Tensor& x);
// B x C -> B x T x C, value repeated along the new time axis
Tensor tile_time(const Tensor& x, std::size_t t);
// Same element count, new extents (data copied).
Tensor reshape(const Tensor& x, Shape shape);
// Concatenate along the last dimension; leading dims must agree.
Tensor concat_lastdim(const std::vector<Tensor>& parts);

// B x T x (H*D) -> B x H x T x D
Tensor split_heads(const Tensor& x, std::size_t heads);
// B x H x T x D -> B x T x (H*D)
Tensor merge_heads(const Tensor& x);

// ---- matrix products ----

// x: [... x D_in], w: [D_in x D_out], b: [D_out]. Leading dims of x are
// treated as rows.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

// Batched products over equal leading dims:
//   bmm_nn: [... x M x K] * [... x K x N] -> [... x M x N]
//   bmm_nt: [... x M x K] * [... x N x K] -> [... x M x N]
Tensor bmm_nn(const Tensor& a, const Tensor& b);
Tensor bmm_nt(const Tensor& a, const Tensor& b);

// ---- layers ----

// x: B x T x C_in, kernel: C_out x C_in x k (k odd), bias: C_out.
// Zero "same" padding keeps the time length.
Tensor conv1d_same(const Tensor& x, const Tensor& kernel, const Tensor& bias);

struct BatchNormState {
  std::vector<double> running_mean, running_var;
  double momentum = 0.1;
  double eps = 1e-5;
  void init(std::size_t channels) {
    running_mean.assign(channels, 0.0);
    running_var.assign(channels, 1.0);
  }
};

// Normalizes per channel (last dim) over all leading dims. Training mode uses
// batch statistics and updates the running ones; eval mode reads them.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  BatchNormState& state, bool training);

// Inverted dropout: kept entries scaled by 1/(1-p); identity in eval mode.
Tensor dropout(const Tensor& x, double p, bool training, Rng& rng);

// One LSTM direction over a full sequence.
// x: B x T x D, w_ih: D x 4H, w_hh: H x 4H, b: 4H (gate order i,f,g,o).
// reverse=true runs right-to-left; the output stays time-aligned with x.
Tensor lstm_layer(const Tensor& x, const Tensor& w_ih, const Tensor& w_hh,
                  const Tensor& b, bool reverse);

}  // namespace falldet::ops
