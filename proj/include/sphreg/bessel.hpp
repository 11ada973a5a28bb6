#pragma once

namespace sphreg {

// Switch point between the ascending series and the large-argument
// asymptotic expansion of I_nu.
constexpr double kBesselAsymptoticSwitch = 50.0;

/// log I_nu(x) for nu >= 0, x >= 0 (-inf at x = 0 for nu > 0).
double log_bessel_i(double nu, double x);

/// log I_nu(x) - nu*log(x), finite and continuous down to x = 0.
double log_bessel_i_scaled_power(double nu, double x);

}  // namespace sphreg
