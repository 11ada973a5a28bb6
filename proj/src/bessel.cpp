#include "sphreg/bessel.hpp"

#include <cmath>
#include <limits>

#include "sphreg/common.hpp"

namespace sphreg {

namespace {

// Ascending series sum(k) (x^2/4)^k / (k! Gamma(nu+k+1)) in log form,
// i.e. log I_nu(x) - nu*log(x/2).
double log_series_part(double nu, double x) {
  double q = 0.25 * x * x;
  double term = -std::lgamma(nu + 1.0);  // log of k = 0 term
  double log_sum = term;
  for (int k = 1; k < 1000; ++k) {
    term += std::log(q) - std::log(static_cast<double>(k)) - std::log(nu + k);
    double hi = std::max(log_sum, term);
    log_sum = hi + std::log1p(std::exp(std::min(log_sum, term) - hi));
    if (term < log_sum - 36.0) break;
  }
  return log_sum;
}

// Large-argument expansion: I_nu(x) ~ e^x / sqrt(2 pi x) * sum with
// mu = 4 nu^2, terms (-1)^k prod_{j<k}(mu - (2j+1)^2) / (k! (8x)^k).
double log_asymptotic(double nu, double x) {
  double mu = 4.0 * nu * nu;
  double term = 1.0, sum = 1.0;
  for (int k = 1; k <= 10; ++k) {
    double odd = 2.0 * k - 1.0;
    term *= -(mu - odd * odd) / (k * 8.0 * x);
    sum += term;
    if (std::abs(term) < 1e-17 * std::abs(sum)) break;
  }
  if (sum <= 0.0) throw ConvergenceError("log_bessel_i: asymptotic series failed");
  return x - 0.5 * std::log(2.0 * M_PI * x) + std::log(sum);
}

}  // namespace

double log_bessel_i(double nu, double x) {
  if (nu < 0.0 || x < 0.0) throw ValidationError("log_bessel_i: requires nu >= 0, x >= 0");
  if (x == 0.0)
    return nu == 0.0 ? 0.0 : -std::numeric_limits<double>::infinity();
  if (x < kBesselAsymptoticSwitch)
    return nu * std::log(0.5 * x) + log_series_part(nu, x);
  return log_asymptotic(nu, x);
}

double log_bessel_i_scaled_power(double nu, double x) {
  if (nu < 0.0 || x < 0.0)
    throw ValidationError("log_bessel_i_scaled_power: requires nu >= 0, x >= 0");
  if (x < kBesselAsymptoticSwitch)
    return -nu * std::log(2.0) + log_series_part(nu, x);
  return log_asymptotic(nu, x) - nu * std::log(x);
}

}  // namespace sphreg
