#pragma once

#include <Eigen/Dense>
#include <string_view>

namespace cpm {

// Batches are rows; features are columns.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Throws NumericError naming `what` if any entry is NaN or infinite.
void check_finite(const Matrix& m, std::string_view what);
void check_finite(const Vector& v, std::string_view what);

}  // namespace cpm
