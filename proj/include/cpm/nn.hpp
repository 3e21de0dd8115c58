#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cpm/concepts.hpp"
#include "cpm/linalg.hpp"
#include "cpm/rng.hpp"

// Hand-written forward/backward pairs for the fixed policy architecture.
// Every backward returns exact analytic gradients; parameter gradients are
// accumulated (+=) so several calls can share one gradient buffer.
namespace cpm::nn {

using concepts::IndexRange;

struct Dense {
  Matrix weight;  // in x out
  Matrix bias;    // 1 x out
  bool relu = false;

  Dense() = default;
  Dense(int in, int out, bool relu);
  int in() const { return static_cast<int>(weight.rows()); }
  int out() const { return static_cast<int>(weight.cols()); }
};

struct DenseCache {
  Matrix input;
  Matrix output;
};

struct DenseGrad {
  Matrix weight;
  Matrix bias;
  explicit DenseGrad(const Dense& layer);
  DenseGrad() = default;
};

Matrix fc_forward(const Dense& layer, const Matrix& input, DenseCache* cache = nullptr);
Matrix fc_backward(const Dense& layer, const DenseCache& cache, const Matrix& grad_out, DenseGrad& grad);

// Gate order in the packed weights: input, forget, cell, output.
struct Lstm {
  Matrix w_input;   // in x 4H
  Matrix w_hidden;  // H x 4H
  Matrix bias;      // 1 x 4H

  Lstm() = default;
  Lstm(int in, int hidden);
  int input_size() const { return static_cast<int>(w_input.rows()); }
  int hidden_size() const { return static_cast<int>(w_hidden.rows()); }
};

struct RecurrentState {
  Matrix h;  // batch x H
  Matrix c;  // batch x H
  static RecurrentState zeros(int batch, int hidden);
  friend bool operator==(const RecurrentState&, const RecurrentState&) = default;
};

struct LstmGrad {
  Matrix w_input;
  Matrix w_hidden;
  Matrix bias;
  explicit LstmGrad(const Lstm& cell);
  LstmGrad() = default;
};

struct LstmStepCache {
  Matrix x, h_prev, c_prev;
  Matrix i, f, g, o, tanh_c;
  Vector mask;  // 1 = real step, 0 = pass-through (state carried unchanged)
};

struct LstmSequenceCache {
  std::vector<LstmStepCache> steps;
};

// Runs the cell over `inputs` (one batch x in matrix per step). `state` is
// advanced in place. Rows with mask 0 at a step keep their state and output
// the carried h. Sequence length is bounded by `max_length`.
std::vector<Matrix> recurrent_forward(const Lstm& cell, const std::vector<Matrix>& inputs, RecurrentState& state,
                                      LstmSequenceCache* cache = nullptr, const std::vector<Vector>* masks = nullptr,
                                      int max_length = 50);

// Backpropagation through time. `grad_outputs[t]` is dL/dh_t from outside the
// recurrence. Returns dL/dx_t; writes dL/d(initial state) when requested.
std::vector<Matrix> recurrent_backward(const Lstm& cell, const LstmSequenceCache& cache,
                                       const std::vector<Matrix>& grad_outputs, LstmGrad& grad,
                                       RecurrentState* grad_initial = nullptr);

// Softmax within each group of columns; other columns pass through.
// Throws UsageError for overlapping or out-of-bounds groups.
Matrix groupwise_softmax(const Matrix& values, std::span<const IndexRange> groups);
Matrix groupwise_softmax_backward(const Matrix& output, std::span<const IndexRange> groups, const Matrix& grad_out);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  AdamConfig config;
  std::int64_t step = 0;
  std::vector<Matrix> m;
  std::vector<Matrix> v;
};

AdamState make_adam_state(std::span<Matrix* const> params, AdamConfig config = {});

// Bias-corrected Adam. Throws NumericError on non-finite gradients (before
// touching any parameter).
void adam_step(std::span<Matrix* const> params, std::span<const Matrix> grads, AdamState& state, double lr);

// Uniform(-scale/sqrt(fan_in), +scale/sqrt(fan_in)) weights, zero bias.
void init_dense(Dense& layer, Rng& rng, double scale = 1.0);
// Fan-in uniform input weights, orthogonal recurrent blocks, zero bias.
void init_lstm(Lstm& cell, Rng& rng);
Matrix orthogonal(int n, Rng& rng);

}  // namespace cpm::nn
