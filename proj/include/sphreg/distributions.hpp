#pragma once

#include <cstdint>
#include <functional>
#include <random>

#include "sphreg/geometry.hpp"

namespace sphreg {

/// Orthonormal frame {mu, gamma_2, ..., gamma_p} carrying the symmetry
/// axes of an elliptically symmetric error distribution.
struct OrientationFrame {
  Vector mu;    // p
  Matrix axes;  // p x (p-1), columns gamma_2..gamma_p

  void validate(double tol = 1e-10) const;
  Matrix full() const;  // p x p matrix [mu, axes]
};

/// Concentration and per-axis scales of the scaled von Mises-Fisher
/// distribution. a_1 is fixed by configuration; prod_{j>=2} a_j = 1.
struct SvMFParams {
  double kappa = 0.0;
  Vector scales;  // a_1..a_p

  void validate() const;
  static SvMFParams isotropic(int p, double kappa, double a1 = 1.0);
};

/// Base location and axes from which per-case frames are obtained by
/// parallel transport.
struct TransportBase {
  Vector gamma01;   // p
  Matrix base_axes; // p x (p-1)

  void validate(double tol = 1e-10) const;
};

/// Kernel g(u, v) of an elliptically symmetric family evaluated at
/// u = kappa mu'y and v = sum_j lambda_j (y'gamma_j)^2.
struct FamilyKernel {
  enum class Constraint { kSumZero, kProductOne };

  std::function<double(double u, double v)> log_g;
  Constraint constraint = Constraint::kProductOne;
  bool has_normalizer = false;
  // log c_{g,p}(kappa, lambda); only meaningful when has_normalizer
  std::function<double(int p, double kappa, const Vector& lambda)> log_normalizer;
};

FamilyKernel vmf_family_kernel();
FamilyKernel svmf_family_kernel(int p);
FamilyKernel kent_family_kernel();

/// log c_p(kappa) of the von Mises-Fisher distribution. Exact for p = 3;
/// otherwise modified-Bessel series / asymptotic evaluation. Continuous
/// at kappa -> 0 where it equals the log surface area of the sphere.
double vmf_log_norm_const(int p, double kappa);

/// Mean resultant length A_p(kappa) = d/dkappa log c_p(kappa).
double vmf_mean_resultant(int p, double kappa);

double vmf_log_density(const Vector& y, const Vector& mu, double kappa);

/// Scaled von Mises-Fisher log density in the given frame:
/// -log(c_p(kappa) prod_j a_j) - (p/2) log J + kappa (y'mu/a_1)/sqrt(J),
/// J = (y'mu/a_1)^2 + sum_{j>=2} (y'gamma_j/a_j)^2.
double svmf_log_density(const Vector& y, const OrientationFrame& frame,
                        const SvMFParams& params);

double family_log_density(const Vector& y, const OrientationFrame& frame,
                          const FamilyKernel& kernel, double kappa,
                          const Vector& lambda, bool normalized);

Matrix sample_uniform_sphere(int p, int n, std::mt19937_64& rng);
Matrix sample_vmf(const Vector& mu, double kappa, int n, std::mt19937_64& rng);
Matrix sample_vmf(const Vector& mu, double kappa, int n, std::uint64_t seed);
Matrix sample_svmf(const OrientationFrame& frame, const SvMFParams& params, int n,
                   std::mt19937_64& rng);
Matrix sample_svmf(const OrientationFrame& frame, const SvMFParams& params, int n,
                   std::uint64_t seed);

/// Frame at mu_x obtained by parallel transport of the base axes.
OrientationFrame axes_at(const Vector& mu_x, const TransportBase& base);

/// Rotated residual R_{gamma01,mu}' P_mu y, tangent at gamma01.
Vector rotated_residual(const Vector& y, const Vector& mu_x, const Vector& gamma01);

/// Deterministic stream splitting for parallel resampling.
std::uint64_t split_seed(std::uint64_t seed, std::uint64_t index);

}  // namespace sphreg
