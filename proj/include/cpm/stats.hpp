#pragma once

#include <cstdint>
#include <span>

#include "cpm/rng.hpp"

namespace cpm::stats {

struct Interval {
  double lo = 0.0;
  double hi = 0.0;
  double width() const { return hi - lo; }
};

double mean(std::span<const double> x);
// Sample standard deviation (n - 1 denominator); 0 for fewer than 2 values.
double stddev(std::span<const double> x);
double standard_error(std::span<const double> x);
// sqrt(p (1 - p) / n) for k successes out of n.
double proportion_stderr(std::int64_t k, std::int64_t n);

Interval wilson_interval(std::int64_t k, std::int64_t n, double z = 1.959963984540054);
Interval normal_interval(double center, double stderr_, double z = 1.959963984540054);

// P(X = a) for the 2x2 table [[a, b], [c, d]] with fixed margins.
double hypergeometric_pmf(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d);

// Two-sided Fisher exact test: total probability of tables (same margins) no
// more likely than the observed one.
double fisher_exact_two_sided(std::int64_t a, std::int64_t b, std::int64_t c, std::int64_t d);

// Bootstrap standard error of the mean and percentile interval.
double bootstrap_stderr(std::span<const double> x, int resamples, Rng& rng);
Interval bootstrap_interval(std::span<const double> x, int resamples, Rng& rng, double level = 0.95);

}  // namespace cpm::stats
