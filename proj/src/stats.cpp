#include "relab/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "relab/error.hpp"

namespace relab {

namespace {

// Continued fraction for I_x(a, b) (modified Lentz).
double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIter = 10000;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b, qap = a + 1.0, qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIter; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double del = d * c;
    h *= del;
    if (std::fabs(del - 1.0) < kEps) return h;
  }
  throw NumericError("regularized_incomplete_beta: continued fraction did not converge");
}

// P(|T| >= |t|). Near t = 0, df / (df + t^2) rounds to 1, so the complement
// argument t^2 / (df + t^2) is used there instead.
double two_sided_tail(double t, double df) {
  const double t2 = t * t;
  if (t2 < df) return 1.0 - regularized_incomplete_beta(0.5, df / 2.0, t2 / (df + t2));
  return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t2));
}

void require_finite(std::span<const double> xs, const char* what) {
  for (double x : xs) {
    if (!std::isfinite(x)) throw InvalidArgument(std::string(what) + ": non-finite sample");
  }
}

}  // namespace

double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw InvalidArgument("regularized_incomplete_beta: a and b must be positive");
  if (!(x >= 0.0 && x <= 1.0)) throw InvalidArgument("regularized_incomplete_beta: x outside [0, 1]");
  if (x == 0.0 || x == 1.0) return x;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  // The fraction converges quickly only on one side of the mean; use symmetry otherwise.
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_cdf(double t, double df) {
  if (!(df > 0.0)) throw InvalidArgument("student_t_cdf: degrees of freedom must be positive");
  if (std::isnan(t)) throw InvalidArgument("student_t_cdf: t is NaN");
  if (std::isinf(t)) return t > 0 ? 1.0 : 0.0;
  const double tail = 0.5 * two_sided_tail(t, df);
  return t >= 0.0 ? 1.0 - tail : tail;
}

double student_t_two_sided_p(double t, double df) {
  if (!(df > 0.0)) throw InvalidArgument("student_t_two_sided_p: degrees of freedom must be positive");
  if (std::isinf(t)) return 0.0;
  if (std::isnan(t)) throw InvalidArgument("student_t_two_sided_p: t is NaN");
  return two_sided_tail(t, df);
}

double student_t_quantile(double p, double df) {
  if (!(p > 0.0 && p < 1.0)) throw InvalidArgument("student_t_quantile: p must lie in (0, 1)");
  if (!(df > 0.0)) throw InvalidArgument("student_t_quantile: degrees of freedom must be positive");
  double lo = -1.0, hi = 1.0;
  while (student_t_cdf(lo, df) > p) lo *= 2.0;
  while (student_t_cdf(hi, df) < p) hi *= 2.0;
  for (int i = 0; i < 200 && hi - lo > 1e-13 * std::max(1.0, std::fabs(lo)); ++i) {
    const double mid = 0.5 * (lo + hi);
    (student_t_cdf(mid, df) < p ? lo : hi) = mid;
  }
  return 0.5 * (lo + hi);
}

std::string to_string(IntervalKind kind) { return kind == IntervalKind::t95 ? "t95" : "two_sigma"; }

IntervalKind interval_kind_from_string(const std::string& s) {
  if (s == "t95") return IntervalKind::t95;
  if (s == "two_sigma") return IntervalKind::two_sigma;
  throw InvalidArgument("unknown interval kind \"" + s + "\" (expected t95 or two_sigma)");
}

double sample_mean(std::span<const double> xs) {
  if (xs.empty()) throw InvalidArgument("sample_mean: no samples");
  // Offsets from the first sample, so equal samples give their exact value.
  const double x0 = xs.front();
  double offset = 0.0;
  for (double x : xs) offset += x - x0;
  return x0 + offset / static_cast<double>(xs.size());
}

double sample_std(std::span<const double> xs) {
  if (xs.size() < 2) throw InvalidArgument("sample_std: need at least 2 samples");
  const double m = sample_mean(xs);
  double ss = 0.0;
  for (double x : xs) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(xs.size() - 1));
}

IntervalEstimate t_interval(std::span<const double> samples, IntervalKind kind) {
  if (samples.size() < 2) {
    throw InvalidArgument("t_interval: need at least 2 samples, got " + std::to_string(samples.size()));
  }
  require_finite(samples, "t_interval");
  IntervalEstimate e;
  e.kind = kind;
  e.n = samples.size();
  e.mean = sample_mean(samples);
  e.std = sample_std(samples);
  if (kind == IntervalKind::two_sigma) {
    e.half_width = 2.0 * e.std;
  } else {
    const double n = static_cast<double>(e.n);
    e.half_width = student_t_quantile(0.975, n - 1.0) * e.std / std::sqrt(n);
  }
  return e;
}

std::string to_string(CorrelationMethod method) {
  return method == CorrelationMethod::pearson ? "pearson" : "spearman";
}

double correlation_p_value(double r, std::size_t n) {
  if (n < 3) throw InvalidArgument("correlation_p_value: need n >= 3");
  if (!(r >= -1.0 && r <= 1.0)) throw InvalidArgument("correlation_p_value: r outside [-1, 1]");
  if (std::fabs(r) == 1.0) return 0.0;
  const double df = static_cast<double>(n - 2);
  return student_t_two_sided_p(r * std::sqrt(df / (1.0 - r * r)), df);
}

std::vector<double> average_ranks(std::span<const double> xs) {
  std::vector<std::size_t> idx(xs.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> ranks(xs.size());
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j + 1 < idx.size() && xs[idx[j + 1]] == xs[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k) ranks[idx[k]] = r;
    i = j + 1;
  }
  return ranks;
}

CorrelationResult correlation(std::span<const double> xs, std::span<const double> ys, CorrelationMethod method) {
  if (xs.size() != ys.size()) {
    throw InvalidArgument("correlation: lengths differ (" + std::to_string(xs.size()) + " vs " +
                          std::to_string(ys.size()) + ")");
  }
  if (xs.size() < 3) throw InvalidArgument("correlation: need at least 3 pairs");
  require_finite(xs, "correlation");
  require_finite(ys, "correlation");
  std::vector<double> a(xs.begin(), xs.end()), b(ys.begin(), ys.end());
  if (method == CorrelationMethod::spearman) {
    a = average_ranks(xs);
    b = average_ranks(ys);
  }
  const double ma = sample_mean(a), mb = sample_mean(b);
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) throw InvalidArgument("correlation: undefined for a zero-variance input");
  CorrelationResult res;
  res.method = method;
  res.n = xs.size();
  res.r = std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
  res.p = correlation_p_value(res.r, res.n);
  return res;
}

DensityEstimate kde(std::span<const double> samples, std::size_t grid_size) {
  if (samples.size() < 2) throw InvalidArgument("kde: need at least 2 samples");
  if (grid_size < 2) throw InvalidArgument("kde: grid needs at least 2 points");
  require_finite(samples, "kde");
  const double s = sample_std(samples);
  if (s == 0.0) throw InvalidArgument("kde: samples have zero variance");
  const double n = static_cast<double>(samples.size());
  DensityEstimate d;
  d.bandwidth = s * std::pow(n, -0.2);
  const auto [mn, mx] = std::minmax_element(samples.begin(), samples.end());
  const double lo = *mn - 3.0 * d.bandwidth, hi = *mx + 3.0 * d.bandwidth;
  const double norm = 1.0 / (n * d.bandwidth * std::sqrt(2.0 * std::numbers::pi));
  d.grid.resize(grid_size);
  d.density.resize(grid_size);
  for (std::size_t i = 0; i < grid_size; ++i) {
    const double x = lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(grid_size - 1);
    double total = 0.0;
    for (double v : samples) {
      const double z = (x - v) / d.bandwidth;
      total += std::exp(-0.5 * z * z);
    }
    d.grid[i] = x;
    d.density[i] = total * norm;
  }
  return d;
}

double trapezoid(const DensityEstimate& d) {
  double total = 0.0;
  for (std::size_t i = 1; i < d.grid.size(); ++i) {
    total += 0.5 * (d.density[i] + d.density[i - 1]) * (d.grid[i] - d.grid[i - 1]);
  }
  return total;
}

}  // namespace relab
