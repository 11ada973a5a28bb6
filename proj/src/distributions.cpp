#include "sphreg/distributions.hpp"

#include <cmath>

#include "sphreg/bessel.hpp"

namespace sphreg {

void OrientationFrame::validate(double tol) const {
  Eigen::Index p = mu.size();
  if (axes.rows() != p || axes.cols() != p - 1)
    throw ValidationError("OrientationFrame: axes must be p x (p-1)");
  Matrix f = full();
  if ((f.transpose() * f - Matrix::Identity(p, p)).cwiseAbs().maxCoeff() > tol)
    throw ValidationError("OrientationFrame: frame is not orthonormal");
}

Matrix OrientationFrame::full() const {
  Matrix f(mu.size(), mu.size());
  f.col(0) = mu;
  f.rightCols(mu.size() - 1) = axes;
  return f;
}

void SvMFParams::validate() const {
  if (kappa < 0.0) throw ValidationError("SvMFParams: kappa must be nonnegative");
  if (scales.size() < 2) throw ValidationError("SvMFParams: needs p >= 2 scales");
  if (scales.minCoeff() <= 0.0) throw ValidationError("SvMFParams: scales must be positive");
  double log_prod = 0.0;
  for (Eigen::Index j = 1; j < scales.size(); ++j) log_prod += std::log(scales[j]);
  if (std::abs(std::expm1(log_prod)) > 1e-10)
    throw ValidationError("SvMFParams: prod_{j>=2} a_j must equal 1");
}

SvMFParams SvMFParams::isotropic(int p, double kappa, double a1) {
  SvMFParams out;
  out.kappa = kappa;
  out.scales = Vector::Ones(p);
  out.scales[0] = a1;
  return out;
}

void TransportBase::validate(double tol) const {
  OrientationFrame f{gamma01, base_axes};
  f.validate(tol);
}

double vmf_log_norm_const(int p, double kappa) {
  if (p < 2) throw ValidationError("vmf_log_norm_const: p must be >= 2");
  if (kappa < 0.0) throw ValidationError("vmf_log_norm_const: kappa must be nonnegative");
  if (p == 3) {
    if (kappa < 1e-8) return std::log(4.0 * M_PI) + std::log1p(kappa * kappa / 6.0);
    return std::log(2.0 * M_PI) + kappa + std::log(-std::expm1(-2.0 * kappa)) -
           std::log(kappa);
  }
  double nu = 0.5 * p - 1.0;
  return 0.5 * p * std::log(2.0 * M_PI) + log_bessel_i_scaled_power(nu, kappa);
}

double vmf_mean_resultant(int p, double kappa) {
  if (kappa <= 0.0) return 0.0;
  if (p == 3) {
    if (kappa < 1e-4) return kappa / 3.0 - kappa * kappa * kappa / 45.0;
    return 1.0 / std::tanh(kappa) - 1.0 / kappa;
  }
  double nu = 0.5 * p - 1.0;
  return std::exp(log_bessel_i(nu + 1.0, kappa) - log_bessel_i(nu, kappa));
}

double vmf_log_density(const Vector& y, const Vector& mu, double kappa) {
  if (y.size() != mu.size()) throw ValidationError("vmf_log_density: dimension mismatch");
  return kappa * mu.dot(y) - vmf_log_norm_const(static_cast<int>(y.size()), kappa);
}

double svmf_log_density(const Vector& y, const OrientationFrame& frame,
                        const SvMFParams& params) {
  const Eigen::Index p = y.size();
  if (frame.mu.size() != p || params.scales.size() != p)
    throw ValidationError("svmf_log_density: dimension mismatch");
  double w = frame.mu.dot(y) / params.scales[0];
  double j = w * w;
  for (Eigen::Index k = 1; k < p; ++k) {
    double r = frame.axes.col(k - 1).dot(y) / params.scales[k];
    j += r * r;
  }
  if (!(j > 0.0)) throw ValidationError("svmf_log_density: degenerate J");
  double log_det = params.scales.array().log().sum();
  return -vmf_log_norm_const(static_cast<int>(p), params.kappa) - log_det -
         0.5 * p * std::log(j) + params.kappa * w / std::sqrt(j);
}

FamilyKernel vmf_family_kernel() {
  FamilyKernel k;
  k.log_g = [](double u, double) { return u; };
  k.has_normalizer = true;
  k.log_normalizer = [](int p, double kappa, const Vector&) {
    return vmf_log_norm_const(p, kappa);
  };
  return k;
}

FamilyKernel svmf_family_kernel(int p) {
  // lambda_j = a_j^{-2}, so v = sum_j lambda_j (y'gamma_j)^2 equals the
  // quadratic form J of the scaled von Mises-Fisher density with a_1 = 1.
  FamilyKernel k;
  k.log_g = [p](double u, double v) { return -0.5 * p * std::log(v) + u / std::sqrt(v); };
  k.has_normalizer = true;
  k.log_normalizer = [](int p_, double kappa, const Vector& lambda) {
    double log_det = -0.5 * lambda.array().log().sum();
    return vmf_log_norm_const(p_, kappa) + log_det;
  };
  return k;
}

FamilyKernel kent_family_kernel() {
  FamilyKernel k;
  k.log_g = [](double u, double v) { return u + v; };
  k.constraint = FamilyKernel::Constraint::kSumZero;
  k.has_normalizer = false;
  return k;
}

double family_log_density(const Vector& y, const OrientationFrame& frame,
                          const FamilyKernel& kernel, double kappa,
                          const Vector& lambda, bool normalized) {
  const Eigen::Index p = y.size();
  if (lambda.size() != p) throw ValidationError("family_log_density: lambda must have p entries");
  if (normalized && !kernel.has_normalizer)
    throw ValidationError("family_log_density: kernel has no normalizing constant");
  double u = kappa * frame.mu.dot(y);
  double t = frame.mu.dot(y);
  double v = lambda[0] * t * t;
  for (Eigen::Index j = 1; j < p; ++j) {
    double r = frame.axes.col(j - 1).dot(y);
    v += lambda[j] * r * r;
  }
  double out = kernel.log_g(u, v);
  if (normalized) out -= kernel.log_normalizer(static_cast<int>(p), kappa, lambda);
  return out;
}

Matrix sample_uniform_sphere(int p, int n, std::mt19937_64& rng) {
  std::normal_distribution<double> gauss;
  Matrix out(n, p);
  for (int i = 0; i < n; ++i) {
    Vector v(p);
    do {
      for (int k = 0; k < p; ++k) v[k] = gauss(rng);
    } while (v.norm() < 1e-12);
    out.row(i) = v.transpose() / v.norm();
  }
  return out;
}

namespace {

// Tangent-normal rejection sampler for the cosine w = mu'y.
double sample_vmf_cosine(int p, double kappa, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  double dim = p - 1.0;
  double b = dim / (2.0 * kappa + std::sqrt(4.0 * kappa * kappa + dim * dim));
  double x0 = (1.0 - b) / (1.0 + b);
  double c = kappa * x0 + dim * std::log(1.0 - x0 * x0);
  std::gamma_distribution<double> gam(0.5 * dim, 1.0);
  for (int it = 0; it < 10000; ++it) {
    double g1 = gam(rng), g2 = gam(rng);
    double z = g1 / (g1 + g2);
    double w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z);
    double u = unif(rng);
    if (kappa * w + dim * std::log(1.0 - x0 * w) - c >= std::log(u)) return w;
  }
  throw ConvergenceError("sample_vmf: rejection sampler failed to accept");
}

}  // namespace

Matrix sample_vmf(const Vector& mu, double kappa, int n, std::mt19937_64& rng) {
  const int p = static_cast<int>(mu.size());
  if (n < 1) throw ValidationError("sample_vmf: n must be >= 1");
  if (kappa < 0.0) throw ValidationError("sample_vmf: kappa must be nonnegative");
  if (kappa < 1e-12) return sample_uniform_sphere(p, n, rng);

  Vector axis = Vector::Unit(p, 0) - mu;
  bool reflect = axis.squaredNorm() > 1e-20;
  Matrix h;
  if (reflect) h = householder(axis);

  std::normal_distribution<double> gauss;
  Matrix out(n, p);
  Vector y(p);
  for (int i = 0; i < n; ++i) {
    double w = sample_vmf_cosine(p, kappa, rng);
    Vector t(p - 1);
    do {
      for (int k = 0; k < p - 1; ++k) t[k] = gauss(rng);
    } while (t.norm() < 1e-12);
    t /= t.norm();
    y[0] = w;
    y.tail(p - 1) = std::sqrt(std::max(0.0, 1.0 - w * w)) * t;
    if (reflect)
      out.row(i) = (h * y).transpose();
    else
      out.row(i) = y.transpose();
  }
  return out;
}

Matrix sample_vmf(const Vector& mu, double kappa, int n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_vmf(mu, kappa, n, rng);
}

Matrix sample_svmf(const OrientationFrame& frame, const SvMFParams& params, int n,
                   std::mt19937_64& rng) {
  params.validate();
  const int p = static_cast<int>(frame.mu.size());
  Matrix u = sample_vmf(Vector::Unit(p, 0), params.kappa, n, rng);
  Matrix f = frame.full();
  Matrix out(n, p);
  for (int i = 0; i < n; ++i) {
    Vector w = params.scales.cwiseProduct(u.row(i).transpose());
    w /= w.norm();
    out.row(i) = (f * w).transpose();
  }
  return out;
}

Matrix sample_svmf(const OrientationFrame& frame, const SvMFParams& params, int n,
                   std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  return sample_svmf(frame, params, n, rng);
}

OrientationFrame axes_at(const Vector& mu_x, const TransportBase& base) {
  Matrix r = transport_matrix(base.gamma01, mu_x);
  OrientationFrame out;
  out.mu = mu_x;
  out.axes = r * base.base_axes;
  return out;
}

Vector rotated_residual(const Vector& y, const Vector& mu_x, const Vector& gamma01) {
  Matrix r = transport_matrix(gamma01, mu_x);
  Vector proj = y - mu_x.dot(y) * mu_x;
  return r.transpose() * proj;
}

std::uint64_t split_seed(std::uint64_t seed, std::uint64_t index) {
  // splitmix64 over the pair
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace sphreg
