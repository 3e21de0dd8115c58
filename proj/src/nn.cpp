#include "cpm/nn.hpp"

#include <cmath>
#include <string>

#include "cpm/errors.hpp"

namespace cpm {

void check_finite(const Matrix& m, std::string_view what) {
  if (!m.allFinite()) throw NumericError("non-finite values in " + std::string(what));
}

void check_finite(const Vector& v, std::string_view what) {
  if (!v.allFinite()) throw NumericError("non-finite values in " + std::string(what));
}

}  // namespace cpm

namespace cpm::nn {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw UsageError(msg);
}

Matrix sigmoid(const Matrix& x) { return (1.0 / (1.0 + (-x.array()).exp())).matrix(); }

}  // namespace

Dense::Dense(int in, int out, bool relu_)
    : weight(Matrix::Zero(in, out)), bias(Matrix::Zero(1, out)), relu(relu_) {}

DenseGrad::DenseGrad(const Dense& layer)
    : weight(Matrix::Zero(layer.in(), layer.out())), bias(Matrix::Zero(1, layer.out())) {}

Matrix fc_forward(const Dense& layer, const Matrix& input, DenseCache* cache) {
  require(input.cols() == layer.in(), "fc_forward: input has " + std::to_string(input.cols()) +
                                          " columns, layer expects " + std::to_string(layer.in()));
  Matrix out = input * layer.weight;
  out.rowwise() += layer.bias.row(0);
  if (layer.relu) out = out.cwiseMax(0.0);
  check_finite(out, "dense output");
  if (cache != nullptr) {
    cache->input = input;
    cache->output = out;
  }
  return out;
}

Matrix fc_backward(const Dense& layer, const DenseCache& cache, const Matrix& grad_out, DenseGrad& grad) {
  require(grad_out.rows() == cache.output.rows() && grad_out.cols() == layer.out(),
          "fc_backward: gradient shape mismatch");
  Matrix g = grad_out;
  if (layer.relu) g.array() *= (cache.output.array() > 0.0).cast<double>();
  grad.weight.noalias() += cache.input.transpose() * g;
  grad.bias.row(0) += g.colwise().sum();
  Matrix grad_in = g * layer.weight.transpose();
  check_finite(grad_in, "dense input gradient");
  return grad_in;
}

Lstm::Lstm(int in, int hidden)
    : w_input(Matrix::Zero(in, 4 * hidden)),
      w_hidden(Matrix::Zero(hidden, 4 * hidden)),
      bias(Matrix::Zero(1, 4 * hidden)) {}

LstmGrad::LstmGrad(const Lstm& cell)
    : w_input(Matrix::Zero(cell.w_input.rows(), cell.w_input.cols())),
      w_hidden(Matrix::Zero(cell.w_hidden.rows(), cell.w_hidden.cols())),
      bias(Matrix::Zero(1, cell.bias.cols())) {}

RecurrentState RecurrentState::zeros(int batch, int hidden) {
  return {Matrix::Zero(batch, hidden), Matrix::Zero(batch, hidden)};
}

std::vector<Matrix> recurrent_forward(const Lstm& cell, const std::vector<Matrix>& inputs, RecurrentState& state,
                                      LstmSequenceCache* cache, const std::vector<Vector>* masks, int max_length) {
  const int H = cell.hidden_size();
  require(static_cast<int>(inputs.size()) <= max_length,
          "recurrent_forward: sequence length " + std::to_string(inputs.size()) + " exceeds maximum " +
              std::to_string(max_length));
  require(masks == nullptr || masks->size() == inputs.size(), "recurrent_forward: mask count mismatch");
  std::vector<Matrix> outputs;
  outputs.reserve(inputs.size());
  if (cache != nullptr) cache->steps.clear();

  for (std::size_t t = 0; t < inputs.size(); ++t) {
    const Matrix& x = inputs[t];
    const Eigen::Index B = x.rows();
    require(x.cols() == cell.input_size(), "recurrent_forward: input width mismatch");
    require(state.h.rows() == B && state.h.cols() == H && state.c.rows() == B && state.c.cols() == H,
            "recurrent_forward: hidden state shape mismatch");

    Matrix gates = x * cell.w_input;
    gates.noalias() += state.h * cell.w_hidden;
    gates.rowwise() += cell.bias.row(0);

    LstmStepCache step;
    step.i = sigmoid(gates.middleCols(0, H));
    step.f = sigmoid(gates.middleCols(H, H));
    step.g = gates.middleCols(2 * H, H).array().tanh().matrix();
    step.o = sigmoid(gates.middleCols(3 * H, H));
    Matrix c_new = (step.f.array() * state.c.array() + step.i.array() * step.g.array()).matrix();
    step.tanh_c = c_new.array().tanh().matrix();
    Matrix h_new = (step.o.array() * step.tanh_c.array()).matrix();

    if (masks != nullptr) {
      const Vector& m = (*masks)[t];
      require(m.size() == B, "recurrent_forward: mask length mismatch");
      for (Eigen::Index b = 0; b < B; ++b) {
        if (m[b] != 0.0) continue;
        h_new.row(b) = state.h.row(b);
        c_new.row(b) = state.c.row(b);
      }
      step.mask = m;
    } else {
      step.mask = Vector::Ones(B);
    }
    check_finite(h_new, "recurrent output");
    check_finite(c_new, "recurrent cell state");

    if (cache != nullptr) {
      step.x = x;
      step.h_prev = state.h;
      step.c_prev = state.c;
      cache->steps.push_back(std::move(step));
    }
    state.h = h_new;
    state.c = std::move(c_new);
    outputs.push_back(std::move(h_new));
  }
  return outputs;
}

std::vector<Matrix> recurrent_backward(const Lstm& cell, const LstmSequenceCache& cache,
                                       const std::vector<Matrix>& grad_outputs, LstmGrad& grad,
                                       RecurrentState* grad_initial) {
  const int H = cell.hidden_size();
  const std::size_t T = cache.steps.size();
  require(grad_outputs.size() == T, "recurrent_backward: gradient count mismatch");
  std::vector<Matrix> grad_inputs(T);
  if (T == 0) return grad_inputs;

  const Eigen::Index B = cache.steps[0].x.rows();
  Matrix dh_next = Matrix::Zero(B, H);
  Matrix dc_next = Matrix::Zero(B, H);

  for (std::size_t tt = T; tt-- > 0;) {
    const LstmStepCache& s = cache.steps[tt];
    Matrix dh = grad_outputs[tt] + dh_next;
    const Matrix& dc = dc_next;

    const auto tc = s.tanh_c.array();
    Matrix dc_total = (dc.array() + dh.array() * s.o.array() * (1.0 - tc * tc)).matrix();
    Matrix d_gates(B, 4 * H);
    d_gates.middleCols(0, H) = (dc_total.array() * s.g.array() * s.i.array() * (1.0 - s.i.array())).matrix();
    d_gates.middleCols(H, H) = (dc_total.array() * s.c_prev.array() * s.f.array() * (1.0 - s.f.array())).matrix();
    d_gates.middleCols(2 * H, H) = (dc_total.array() * s.i.array() * (1.0 - s.g.array().square())).matrix();
    d_gates.middleCols(3 * H, H) = (dh.array() * tc * s.o.array() * (1.0 - s.o.array())).matrix();
    Matrix dc_prev = (dc_total.array() * s.f.array()).matrix();

    for (Eigen::Index b = 0; b < B; ++b)
      if (s.mask[b] == 0.0) d_gates.row(b).setZero();

    grad.w_input.noalias() += s.x.transpose() * d_gates;
    grad.w_hidden.noalias() += s.h_prev.transpose() * d_gates;
    grad.bias.row(0) += d_gates.colwise().sum();
    grad_inputs[tt] = d_gates * cell.w_input.transpose();
    Matrix dh_prev = d_gates * cell.w_hidden.transpose();

    for (Eigen::Index b = 0; b < B; ++b) {
      if (s.mask[b] != 0.0) continue;
      dh_prev.row(b) = dh.row(b);
      dc_prev.row(b) = dc.row(b);
    }
    dh_next = std::move(dh_prev);
    dc_next = std::move(dc_prev);
  }
  if (grad_initial != nullptr) {
    grad_initial->h = dh_next;
    grad_initial->c = dc_next;
  }
  return grad_inputs;
}

namespace {

void check_groups(std::span<const IndexRange> groups, Eigen::Index width) {
  std::vector<bool> used(static_cast<std::size_t>(width), false);
  for (const IndexRange& g : groups) {
    require(g.begin >= 0 && g.size >= 1 && g.end() <= width, "groupwise_softmax: group out of bounds");
    for (int k = g.begin; k < g.end(); ++k) {
      require(!used[k], "groupwise_softmax: overlapping groups");
      used[k] = true;
    }
  }
}

}  // namespace

Matrix groupwise_softmax(const Matrix& values, std::span<const IndexRange> groups) {
  check_groups(groups, values.cols());
  Matrix out = values;
  for (const IndexRange& g : groups) {
    auto block = out.middleCols(g.begin, g.size);
    for (Eigen::Index r = 0; r < block.rows(); ++r) {
      const double peak = block.row(r).maxCoeff();
      block.row(r) = (block.row(r).array() - peak).exp().matrix();
      block.row(r) /= block.row(r).sum();
    }
  }
  check_finite(out, "group softmax output");
  return out;
}

Matrix groupwise_softmax_backward(const Matrix& output, std::span<const IndexRange> groups, const Matrix& grad_out) {
  check_groups(groups, output.cols());
  require(grad_out.rows() == output.rows() && grad_out.cols() == output.cols(),
          "groupwise_softmax_backward: shape mismatch");
  Matrix grad_in = grad_out;
  for (const IndexRange& g : groups) {
    const auto p = output.middleCols(g.begin, g.size);
    const auto go = grad_out.middleCols(g.begin, g.size);
    for (Eigen::Index r = 0; r < output.rows(); ++r) {
      const double dot = p.row(r).dot(go.row(r));
      grad_in.middleCols(g.begin, g.size).row(r) = (p.row(r).array() * (go.row(r).array() - dot)).matrix();
    }
  }
  return grad_in;
}

AdamState make_adam_state(std::span<Matrix* const> params, AdamConfig config) {
  AdamState state;
  state.config = config;
  for (const Matrix* p : params) {
    state.m.push_back(Matrix::Zero(p->rows(), p->cols()));
    state.v.push_back(Matrix::Zero(p->rows(), p->cols()));
  }
  return state;
}

void adam_step(std::span<Matrix* const> params, std::span<const Matrix> grads, AdamState& state, double lr) {
  require(params.size() == grads.size() && params.size() == state.m.size(), "adam_step: parameter count mismatch");
  for (std::size_t k = 0; k < params.size(); ++k) {
    require(grads[k].rows() == params[k]->rows() && grads[k].cols() == params[k]->cols(),
            "adam_step: gradient shape mismatch");
    check_finite(grads[k], "gradient");
  }
  const AdamConfig& c = state.config;
  ++state.step;
  const double bias1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bias2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Matrix& m = state.m[k];
    Matrix& v = state.v[k];
    m = c.beta1 * m + (1.0 - c.beta1) * grads[k];
    v = c.beta2 * v + (1.0 - c.beta2) * grads[k].cwiseProduct(grads[k]);
    params[k]->array() -= lr * (m.array() / bias1) / ((v.array() / bias2).sqrt() + c.eps);
  }
}

void init_dense(Dense& layer, Rng& rng, double scale) {
  const double bound = scale / std::sqrt(static_cast<double>(std::max(1, layer.in())));
  for (Eigen::Index r = 0; r < layer.weight.rows(); ++r)
    for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) layer.weight(r, c) = rng.uniform(-bound, bound);
  layer.bias.setZero();
}

Matrix orthogonal(int n, Rng& rng) {
  Matrix a(n, n);
  for (Eigen::Index r = 0; r < n; ++r)
    for (Eigen::Index c = 0; c < n; ++c) a(r, c) = rng.normal();
  Eigen::HouseholderQR<Matrix> qr(a);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR();
  // Fix column signs so the factorization (and thus the draw) is unique.
  for (int k = 0; k < n; ++k)
    if (r(k, k) < 0.0) q.col(k) *= -1.0;
  return q;
}

void init_lstm(Lstm& cell, Rng& rng) {
  const int H = cell.hidden_size();
  const double bound = 1.0 / std::sqrt(static_cast<double>(std::max(1, cell.input_size())));
  for (Eigen::Index r = 0; r < cell.w_input.rows(); ++r)
    for (Eigen::Index c = 0; c < cell.w_input.cols(); ++c) cell.w_input(r, c) = rng.uniform(-bound, bound);
  for (int gate = 0; gate < 4; ++gate) cell.w_hidden.middleCols(gate * H, H) = orthogonal(H, rng);
  cell.bias.setZero();
}

}  // namespace cpm::nn
