#include "cpm/whitening.hpp"

#include <cmath>
#include <string>

#include "cpm/errors.hpp"

namespace cpm::whitening {

WhiteningState::WhiteningState(int dim_, int iterations_, double momentum_, double eps_)
    : dim(dim_),
      iterations(iterations_),
      momentum(momentum_),
      eps(eps_),
      running_mean(Vector::Zero(dim_)),
      running_whitener(Matrix::Identity(dim_, dim_)) {
  if (dim_ < 1) throw UsageError("WhiteningState: dim must be positive");
  if (iterations_ < 0) throw UsageError("WhiteningState: iterations must be non-negative");
}

Matrix covariance(const Matrix& x) {
  const RowVector mu = x.colwise().mean();
  const Matrix centered = x.rowwise() - mu;
  return centered.transpose() * centered / static_cast<double>(x.rows());
}

namespace {

void forward_batch(const Matrix& x, int iterations, double eps, WhiteningCache& c) {
  const Eigen::Index b = x.rows();
  const Eigen::Index d = x.cols();
  const RowVector mu = x.colwise().mean();
  c.centered = x.rowwise() - mu;
  c.sigma = c.centered.transpose() * c.centered / static_cast<double>(b);
  c.sigma.diagonal().array() += eps;
  c.trace = c.sigma.trace();
  if (!(c.trace > 0.0)) throw NumericError("iternorm: covariance trace is not positive");
  c.sigma_n = c.sigma / c.trace;
  c.iterates.clear();
  c.iterates.push_back(Matrix::Identity(d, d));
  for (int t = 0; t < iterations; ++t) {
    const Matrix& p = c.iterates.back();
    Matrix p3 = p * p * p;
    Matrix next = 1.5 * p - 0.5 * p3 * c.sigma_n;
    // The exact iterates are symmetric; rounding drifts away from that and
    // the drift grows with T unless projected back.
    c.iterates.push_back(0.5 * (next + next.transpose()));
  }
  c.whitener = c.iterates.back() / std::sqrt(c.trace);
  check_finite(c.whitener, "iternorm whitener");
}

}  // namespace

Matrix iternorm_forward(const Matrix& x, WhiteningState& state, Mode mode, WhiteningCache* cache) {
  if (x.cols() != state.dim)
    throw UsageError("iternorm_forward: input has " + std::to_string(x.cols()) + " columns, state expects " +
                     std::to_string(state.dim));
  check_finite(x, "iternorm input");
  if (mode == Mode::Infer) {
    if (x.rows() < 1) throw UsageError("iternorm_forward: empty batch");
    Matrix out = (x.rowwise() - state.running_mean.transpose()) * state.running_whitener;
    check_finite(out, "iternorm output");
    return out;
  }
  if (x.rows() < 2) throw UsageError("iternorm_forward: train mode needs at least two samples");
  WhiteningCache local;
  WhiteningCache& c = cache != nullptr ? *cache : local;
  forward_batch(x, state.iterations, state.eps, c);
  Matrix out = c.centered * c.whitener;
  check_finite(out, "iternorm output");

  const double m = state.momentum;
  state.running_mean = (1.0 - m) * state.running_mean + m * x.colwise().mean().transpose();
  state.running_whitener = (1.0 - m) * state.running_whitener + m * c.whitener;
  return out;
}

Matrix iternorm_backward(const WhiteningCache& c, const Matrix& grad_out) {
  if (grad_out.rows() != c.centered.rows() || grad_out.cols() != c.centered.cols())
    throw UsageError("iternorm_backward: gradient shape mismatch");
  const double b = static_cast<double>(c.centered.rows());
  const double s = c.trace;
  const double root = std::sqrt(s);
  const int T = static_cast<int>(c.iterates.size()) - 1;

  // Y = Xc W, W = P_T / sqrt(s)
  const Matrix d_w = c.centered.transpose() * grad_out;
  Matrix d_xc = grad_out * c.whitener.transpose();
  Matrix d_p = d_w / root;
  double d_s = -0.5 * (d_w.cwiseProduct(c.iterates.back())).sum() / (s * root);
  Matrix d_sigma_n = Matrix::Zero(c.sigma_n.rows(), c.sigma_n.cols());

  // P_t = sym(1.5 Q - 0.5 Q Q Q S), with Q = P_{t-1} and S = sigma_n.
  const Matrix& S = c.sigma_n;
  for (int t = T; t >= 1; --t) {
    d_p = 0.5 * (d_p + d_p.transpose()).eval();
    const Matrix& q = c.iterates[t - 1];
    const Matrix q2 = q * q;
    const Matrix qs = q * S;
    const Matrix q2s = q2 * S;
    Matrix d_q = 1.5 * d_p;
    d_q.noalias() -= 0.5 * (d_p * q2s.transpose());
    d_q.noalias() -= 0.5 * (q.transpose() * d_p * qs.transpose());
    d_q.noalias() -= 0.5 * (q2.transpose() * d_p * S.transpose());
    d_sigma_n.noalias() -= 0.5 * ((q2 * q).transpose() * d_p);
    d_p = std::move(d_q);
  }

  // sigma_n = sigma / s, s = trace(sigma)
  Matrix d_sigma = d_sigma_n / s;
  d_s -= d_sigma_n.cwiseProduct(c.sigma).sum() / (s * s);
  d_sigma.diagonal().array() += d_s;

  // sigma = Xc^T Xc / b + eps I
  d_xc.noalias() += c.centered * (d_sigma + d_sigma.transpose()) / b;

  // Xc = X - mean(X)
  Matrix d_x = d_xc.rowwise() - d_xc.colwise().mean();
  check_finite(d_x, "iternorm input gradient");
  return d_x;
}

Matrix iternorm_whitener(const Matrix& x, int iterations, double eps) {
  WhiteningCache c;
  forward_batch(x, iterations, eps, c);
  return c.whitener;
}

Matrix exact_zca_whitener(const Matrix& x, double eps) {
  Matrix sigma = covariance(x);
  sigma.diagonal().array() += eps;
  Eigen::SelfAdjointEigenSolver<Matrix> solver(sigma);
  if (solver.info() != Eigen::Success) throw NumericError("exact_zca: eigendecomposition failed");
  const Vector& lambda = solver.eigenvalues();
  if (!(lambda.minCoeff() > 0.0)) throw NumericError("exact_zca: covariance is not positive definite");
  const Matrix& d = solver.eigenvectors();
  return d * lambda.cwiseSqrt().cwiseInverse().asDiagonal() * d.transpose();
}

Matrix exact_zca(const Matrix& x, double eps) {
  const RowVector mu = x.colwise().mean();
  return (x.rowwise() - mu) * exact_zca_whitener(x, eps);
}

}  // namespace cpm::whitening
