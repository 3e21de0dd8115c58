#include "cpm/stats.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "cpm/errors.hpp"

namespace cpm::stats {

double mean(std::span<const double> x) {
  if (x.empty()) return 0.0;
  double s = 0.0;
  for (double v : x) s += v;
  return s / static_cast<double>(x.size());
}

double stddev(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  const double m = mean(x);
  double s = 0.0;
  for (double v : x) s += (v - m) * (v - m);
  return std::sqrt(s / static_cast<double>(x.size() - 1));
}

double standard_error(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  return stddev(x) / std::sqrt(static_cast<double>(x.size()));
}

double proportion_stderr(std::int64_t k, std::int64_t n) {
  if (n <= 0) return 0.0;
  const double p = static_cast<double>(k) / static_cast<double>(n);
  return std::sqrt(p * (1.0 - p) / static_cast<double>(n));
}

Interval wilson_interval(std::int64_t k, std::int64_t n, double z) {
  if (n <= 0) return {0.0, 1.0};
  const double nn = static_cast<double>(n);
  const double p = static_cast<double>(k) / nn;
  const double z2 = z * z;
  const double center = (p + z2 / (2.0 * nn)) / (1.0 + z2 / nn);
  const double half = z * std::sqrt(p * (1.0 - p) / nn + z2 / (4.0 * nn * nn)) / (1.0 + z2 / nn);
  return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

Interval normal_interval(double center, double stderr_, double z) {
  return {center - z * stderr_, center + z * stderr_};
}

namespace {

double log_choose(std::int64_t n, std::int64_t k) {
  return std::lgamma(static_cast<double>(n) + 1.0) - std::lgamma(static_cast<double>(k) + 1.0) -
         std::lgamma(static_cast<double>(n - k) + 1.0);
}

}  // namespace

double hypergeometric_pmf(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) {
  if (a < 0 || b < 0 || c < 0 || d < 0) throw UsageError("hypergeometric_pmf: negative cell");
  const std::int64_t row1 = a + b;
  const std::int64_t row2 = c + d;
  const std::int64_t col1 = a + c;
  return std::exp(log_choose(row1, a) + log_choose(row2, c) - log_choose(row1 + row2, col1));
}

double fisher_exact_two_sided(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d) {
  if (a < 0 || b < 0 || c < 0 || d < 0) throw UsageError("fisher_exact: negative cell");
  const std::int64_t row1 = a + b;
  const std::int64_t col1 = a + c;
  const std::int64_t n = a + b + c + d;
  const double observed = hypergeometric_pmf(a, b, c, d);
  const std::int64_t lo = std::max<std::int64_t>(0, col1 - (n - row1));
  const std::int64_t hi = std::min(row1, col1);
  double p = 0.0;
  for (std::int64_t x = lo; x <= hi; ++x) {
    const double px = hypergeometric_pmf(x, row1 - x, col1 - x, n - row1 - col1 + x);
    // Relative slack absorbs rounding between equally likely tables.
    if (px <= observed * (1.0 + 1e-7)) p += px;
  }
  return std::min(1.0, p);
}

namespace {

std::vector<double> bootstrap_means(std::span<const double> x, int resamples, Rng& rng) {
  if (x.empty() || resamples < 1) throw UsageError("bootstrap: need data and at least one resample");
  std::vector<double> means(static_cast<std::size_t>(resamples));
  const int n = static_cast<int>(x.size());
  for (double& m : means) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += x[rng.uniform_int(n)];
    m = s / n;
  }
  return means;
}

}  // namespace

double bootstrap_stderr(std::span<const double> x, int resamples, Rng& rng) {
  const std::vector<double> means = bootstrap_means(x, resamples, rng);
  return stddev(means);
}

Interval bootstrap_interval(std::span<const double> x, int resamples, Rng& rng, double level) {
  std::vector<double> means = bootstrap_means(x, resamples, rng);
  std::sort(means.begin(), means.end());
  const double tail = (1.0 - level) / 2.0;
  const auto pick = [&](double q) {
    const std::size_t i = static_cast<std::size_t>(std::floor(q * static_cast<double>(means.size() - 1)));
    return means[std::min(i, means.size() - 1)];
  };
  return {pick(tail), pick(1.0 - tail)};
}

}  // namespace cpm::stats
