#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace relab {

// I_x(a, b), evaluated with the Lentz continued fraction.
double regularized_incomplete_beta(double a, double b, double x);
double student_t_cdf(double t, double df);
// Inverse of student_t_cdf by bisection.
double student_t_quantile(double p, double df);
// P(|T| >= |t|) for T ~ t(df).
double student_t_two_sided_p(double t, double df);

enum class IntervalKind { t95, two_sigma };

std::string to_string(IntervalKind kind);
IntervalKind interval_kind_from_string(const std::string& s);

struct IntervalEstimate {
  double mean = 0.0;
  double std = 0.0;  // n - 1 denominator
  std::size_t n = 0;
  double half_width = 0.0;
  IntervalKind kind = IntervalKind::t95;

  double low() const { return mean - half_width; }
  double high() const { return mean + half_width; }
};

// T95: t_{0.975, n-1} * s / sqrt(n). TwoSigma: 2 s. Both need n >= 2.
IntervalEstimate t_interval(std::span<const double> samples, IntervalKind kind = IntervalKind::t95);

double sample_mean(std::span<const double> xs);
double sample_std(std::span<const double> xs);

enum class CorrelationMethod { pearson, spearman };

std::string to_string(CorrelationMethod method);

struct CorrelationResult {
  CorrelationMethod method = CorrelationMethod::pearson;
  double r = 0.0;
  double p = 1.0;  // two-sided
  std::size_t n = 0;
};

// Two-sided p of a correlation coefficient via t = r sqrt((n-2)/(1-r^2)) on n-2
// degrees of freedom; |r| = 1 gives 0.
double correlation_p_value(double r, std::size_t n);

// Average ranks (1-based); ties share the mean of their positions.
std::vector<double> average_ranks(std::span<const double> xs);

// Needs equal lengths, n >= 3 and nonzero variance on both sides.
CorrelationResult correlation(std::span<const double> xs, std::span<const double> ys, CorrelationMethod method);

struct DensityEstimate {
  std::vector<double> grid;
  std::vector<double> density;
  double bandwidth = 0.0;
};

// Gaussian KDE with Scott's bandwidth s * n^(-1/5) on an evenly spaced grid
// over [min - 3h, max + 3h].
DensityEstimate kde(std::span<const double> samples, std::size_t grid_size = 256);

// Trapezoidal integral of a density estimate.
double trapezoid(const DensityEstimate& d);

}  // namespace relab
