#pragma once

#include <vector>

#include "cpm/linalg.hpp"

// ZCA whitening by iterative normalization: the inverse square root of the
// batch covariance is approximated with T Newton iterations, so small T
// gives a partially decorrelated output.
namespace cpm::whitening {

enum class Mode { Train, Infer };

struct WhiteningState {
  int dim = 0;
  int iterations = 2;
  double momentum = 0.1;
  double eps = 1e-5;
  Vector running_mean;
  Matrix running_whitener;

  WhiteningState() = default;
  WhiteningState(int dim, int iterations = 2, double momentum = 0.1, double eps = 1e-5);
};

struct WhiteningCache {
  Matrix centered;              // X - mu
  Matrix sigma;                 // covariance + eps I
  Matrix sigma_n;               // sigma / trace
  double trace = 0.0;
  std::vector<Matrix> iterates; // P_0 .. P_T
  Matrix whitener;              // P_T / sqrt(trace)
};

// Train mode whitens with batch statistics (b >= 2) and folds them into the
// running statistics; Infer mode applies the running statistics and leaves
// `state` unchanged. Rows of `x` are samples.
Matrix iternorm_forward(const Matrix& x, WhiteningState& state, Mode mode, WhiteningCache* cache = nullptr);

// Exact gradient of a Train-mode forward w.r.t. its input. Running
// statistics are treated as constants.
Matrix iternorm_backward(const WhiteningCache& cache, const Matrix& grad_out);

// Whitener from the batch statistics alone, without touching running state.
Matrix iternorm_whitener(const Matrix& x, int iterations, double eps);

// Reference ZCA: D diag(lambda^-1/2) D^T from the eigendecomposition of the
// (ridged) sample covariance. Throws NumericError when the covariance is not
// positive definite.
Matrix exact_zca_whitener(const Matrix& x, double eps = 1e-5);
Matrix exact_zca(const Matrix& x, double eps = 1e-5);

// Sample covariance (1/b normalization) of the rows of x.
Matrix covariance(const Matrix& x);

}  // namespace cpm::whitening
