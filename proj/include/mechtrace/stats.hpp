#pragma once

#include <cmath>
#include <cstdint>

namespace mechtrace {

// count/sum/sumsq accumulator; merge is associative and commutative, so
// parallel partial sums fold to the same result in any grouping
struct RunningMoments {
  int64_t n = 0;
  double sum = 0.0;
  double sumsq = 0.0;

  void add(double x) {
    ++n;
    sum += x;
    sumsq += x * x;
  }
  void merge(const RunningMoments& o) {
    n += o.n;
    sum += o.sum;
    sumsq += o.sumsq;
  }
  double mean() const { return n ? sum / static_cast<double>(n) : 0.0; }
  // population variance, clamped at zero against cancellation
  double variance() const {
    if (!n) return 0.0;
    const double m = mean();
    const double v = sumsq / static_cast<double>(n) - m * m;
    return v > 0.0 ? v : 0.0;
  }
  double stddev() const { return std::sqrt(variance()); }
};

struct Interval {
  double lo = 0.0, hi = 0.0;
};

// Wilson score interval for a binomial proportion, z = 1.96 (95%)
inline Interval wilson_interval(int64_t successes, int64_t trials) {
  if (trials <= 0) return {0.0, 1.0};
  const double z = 1.959963984540054;
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  const double z2 = z * z;
  const double denom = 1.0 + z2 / n;
  const double center = (p + z2 / (2.0 * n)) / denom;
  const double half = z * std::sqrt(p * (1.0 - p) / n + z2 / (4.0 * n * n)) / denom;
  return {center - half, center + half};
}

}  // namespace mechtrace
