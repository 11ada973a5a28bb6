#include "sphreg/distributions.hpp"

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/special_functions/bessel.hpp>
#include <random>

#include "doctest.h"
#include "sphreg/bessel.hpp"
#include "test_support.hpp"

using namespace sphreg;
using testsup::integrate_1d;
using testsup::integrate_s2;
using testsup::random_unit;

namespace {

OrientationFrame frame_from_rotation(const Matrix& q) {
  OrientationFrame f;
  f.mu = q.col(0);
  f.axes = q.rightCols(q.cols() - 1);
  return f;
}

double sphere_area(int p) {
  return 2.0 * std::pow(M_PI, 0.5 * p) / std::tgamma(0.5 * p);
}

// Quadrature route for the vMF normalizing constant: rotational symmetry
// reduces the S^{p-1} integral to one dimension.
double vmf_norm_const_quadrature(int p, double kappa) {
  double shell = sphere_area(p - 1);
  return shell * integrate_1d(
                     [&](double th) {
                       return std::exp(kappa * std::cos(th)) *
                              std::pow(std::sin(th), p - 2);
                     },
                     0.0, M_PI, 600);
}

// Two-sample Kolmogorov-Smirnov p-value (asymptotic).
double ks_two_sample_pvalue(std::vector<double> a, std::vector<double> b) {
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  double d = 0.0;
  std::size_t i = 0, j = 0;
  while (i < a.size() && j < b.size()) {
    if (a[i] <= b[j])
      ++i;
    else
      ++j;
    double fa = static_cast<double>(i) / a.size();
    double fb = static_cast<double>(j) / b.size();
    d = std::max(d, std::abs(fa - fb));
  }
  double ne = std::sqrt(static_cast<double>(a.size()) * b.size() / (a.size() + b.size()));
  double lambda = (ne + 0.12 + 0.11 / ne) * d;
  double sum = 0.0;
  for (int k = 1; k <= 100; ++k)
    sum += 2.0 * std::pow(-1.0, k - 1) * std::exp(-2.0 * k * k * lambda * lambda);
  return std::clamp(sum, 0.0, 1.0);
}

}  // namespace

TEST_CASE("vmf_log_norm_const exact, limit, and quadrature values") {
  CHECK(vmf_log_norm_const(3, 1.0) ==
        doctest::Approx(std::log(2.0 * M_PI * (std::exp(1.0) - std::exp(-1.0)))).epsilon(1e-12));
  CHECK(vmf_log_norm_const(3, 0.0) == doctest::Approx(std::log(4.0 * M_PI)).epsilon(1e-12));

  for (int p : {2, 3, 4, 5}) {
    CHECK(vmf_log_norm_const(p, 0.0) ==
          doctest::Approx(std::log(sphere_area(p))).epsilon(1e-10));
    for (double kappa : {0.5, 3.0, 10.0, 30.0}) {
      double want = std::log(vmf_norm_const_quadrature(p, kappa));
      CHECK(vmf_log_norm_const(p, kappa) == doctest::Approx(want).epsilon(1e-8));
    }
  }

  // the earthquake-scale case on S^4
  double want59 = std::log(vmf_norm_const_quadrature(5, 59.0));
  CHECK(vmf_log_norm_const(5, 59.0) == doctest::Approx(want59).epsilon(1e-5));
}

TEST_CASE("log_bessel_i against an independent implementation") {
  for (double nu : {0.0, 0.5, 1.0, 1.5, 2.0}) {
    for (double x : {0.1, 1.0, 10.0, 49.9, 50.1, 80.0, 200.0}) {
      double want = std::log(boost::math::cyl_bessel_i(nu, x));
      CHECK(log_bessel_i(nu, x) == doctest::Approx(want).epsilon(1e-10));
    }
  }
  // continuity across the series/asymptotic switchover
  for (double nu : {0.5, 1.5}) {
    double below = log_bessel_i(nu, kBesselAsymptoticSwitch - 1e-9);
    double above = log_bessel_i(nu, kBesselAsymptoticSwitch + 1e-9);
    CHECK(std::abs(below - above) < 1e-8 * std::abs(below));
  }
}

TEST_CASE("vmf_mean_resultant") {
  for (double kappa : {0.3, 2.0, 20.0, 70.0}) {
    double p3 = vmf_mean_resultant(3, kappa);
    CHECK(p3 == doctest::Approx(1.0 / std::tanh(kappa) - 1.0 / kappa).epsilon(1e-12));
    double bessel_route = std::exp(std::log(boost::math::cyl_bessel_i(1.5, kappa)) -
                                   std::log(boost::math::cyl_bessel_i(0.5, kappa)));
    CHECK(p3 == doctest::Approx(bessel_route).epsilon(1e-9));
  }
  CHECK(vmf_mean_resultant(3, 0.0) == 0.0);
  CHECK(vmf_mean_resultant(5, 10.0) > vmf_mean_resultant(5, 1.0));
}

TEST_CASE("svmf_log_density reduces to vMF and integrates to one") {
  std::mt19937_64 rng(211);
  for (int i = 0; i < 1000; ++i) {
    int p = (i % 2 == 0) ? 3 : 5;
    Matrix q = random_rotation(p, rng());
    OrientationFrame f = frame_from_rotation(q);
    SvMFParams iso = SvMFParams::isotropic(p, 0.5 + (i % 7));
    Vector y = random_unit(p, rng);
    CHECK(svmf_log_density(y, f, iso) ==
          doctest::Approx(vmf_log_density(y, f.mu, iso.kappa)).epsilon(1e-12));
  }

  OrientationFrame f3 = frame_from_rotation(Matrix::Identity(3, 3));
  SvMFParams iso = SvMFParams::isotropic(3, 7.0);
  CHECK(svmf_log_density(f3.mu, f3, iso) ==
        doctest::Approx(7.0 - vmf_log_norm_const(3, 7.0)).epsilon(1e-12));

  SvMFParams par;
  par.kappa = 10.0;
  par.scales = Vector(3);
  par.scales << 1.0, 2.0, 0.5;
  double mass = integrate_s2([&](const Vector& y) {
    return std::exp(svmf_log_density(y, f3, par));
  });
  CHECK(std::abs(mass - 1.0) < 1e-6);

  // rotated frame: equivariance and normalization
  Matrix q = random_rotation(3, 99);
  OrientationFrame fr = frame_from_rotation(q);
  double mass_r = integrate_s2([&](const Vector& y) {
    return std::exp(svmf_log_density(y, fr, par));
  });
  CHECK(std::abs(mass_r - 1.0) < 1e-6);

  std::mt19937_64 rng2(213);
  for (int i = 0; i < 200; ++i) {
    Vector y = random_unit(3, rng2);
    Matrix rot = random_rotation(3, rng2());
    OrientationFrame base = frame_from_rotation(random_rotation(3, rng2()));
    OrientationFrame moved;
    moved.mu = rot * base.mu;
    moved.axes = rot * base.axes;
    CHECK(svmf_log_density(Vector(rot * y), moved, par) ==
          doctest::Approx(svmf_log_density(y, base, par)).epsilon(1e-12));
  }
}

TEST_CASE("family_log_density instances") {
  std::mt19937_64 rng(223);
  OrientationFrame f = frame_from_rotation(random_rotation(3, 5));

  SvMFParams par;
  par.kappa = 4.0;
  par.scales = Vector(3);
  par.scales << 1.0, 1.6, 0.625;
  // the product-one constraint is exact in log space only; rescale
  par.scales[2] = 1.0 / par.scales[1];
  FamilyKernel svmf = svmf_family_kernel(3);
  Vector lambda = par.scales.cwiseProduct(par.scales).cwiseInverse();
  for (int i = 0; i < 100; ++i) {
    Vector y = random_unit(3, rng);
    CHECK(family_log_density(y, f, svmf, par.kappa, lambda, true) ==
          doctest::Approx(svmf_log_density(y, f, par)).epsilon(1e-12));
  }

  FamilyKernel vmf = vmf_family_kernel();
  for (int i = 0; i < 100; ++i) {
    Vector y = random_unit(3, rng);
    CHECK(family_log_density(y, f, vmf, 2.5, Vector::Zero(3), true) ==
          doctest::Approx(vmf_log_density(y, f.mu, 2.5)).epsilon(1e-12));
  }

  FamilyKernel kent = kent_family_kernel();
  Vector lam(3);
  lam << 0.0, 0.7, -0.7;
  CHECK(family_log_density(f.mu, f, kent, 3.0, lam, false) == doctest::Approx(3.0));
  CHECK_THROWS_AS(family_log_density(f.mu, f, kent, 3.0, lam, true), ValidationError);
}

TEST_CASE("sample_vmf law and determinism") {
  Vector mu = Vector::Unit(3, 2);

  Matrix uniform = sample_vmf(mu, 0.0, 10000, 7);
  CHECK(uniform.colwise().mean().norm() < 0.05);

  Matrix draws = sample_vmf(mu, 50.0, 10000, 8);
  Vector mean = draws.colwise().mean();
  double angle = std::acos(std::clamp(mean.normalized().dot(mu), -1.0, 1.0));
  CHECK(angle < 2.0 * M_PI / 180.0);
  CHECK(mean.norm() == doctest::Approx(vmf_mean_resultant(3, 50.0)).epsilon(0.01));

  Matrix again = sample_vmf(mu, 50.0, 10000, 8);
  CHECK((draws - again).cwiseAbs().maxCoeff() == 0.0);

  // dimension generality
  for (int p : {2, 5}) {
    Matrix d = sample_vmf(Vector::Unit(p, 0), 20.0, 5000, 11);
    Vector m = d.colwise().mean();
    CHECK(m.normalized()[0] > 0.999);
    CHECK(m.norm() == doctest::Approx(vmf_mean_resultant(p, 20.0)).epsilon(0.02));
  }
}

TEST_CASE("sample_svmf reduces to vMF at unit scales") {
  Matrix q = random_rotation(3, 17);
  OrientationFrame f = frame_from_rotation(q);
  SvMFParams iso = SvMFParams::isotropic(3, 10.0);

  Matrix a = sample_svmf(f, iso, 10000, 21);
  Matrix b = sample_vmf(f.mu, 10.0, 10000, 22);
  std::vector<double> ca(a.rows()), cb(b.rows());
  for (int i = 0; i < a.rows(); ++i) ca[i] = a.row(i).dot(f.mu);
  for (int i = 0; i < b.rows(); ++i) cb[i] = b.row(i).dot(f.mu);
  CHECK(ks_two_sample_pvalue(ca, cb) > 0.01);

  Matrix rerun = sample_svmf(f, iso, 10000, 21);
  CHECK((a - rerun).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("sample_svmf matches the density on an equal-area partition") {
  OrientationFrame f = frame_from_rotation(random_rotation(3, 29));
  SvMFParams par;
  par.kappa = 10.0;
  par.scales = Vector(3);
  par.scales << 1.0, 2.0, 0.5;

  const int n = 100000;
  Matrix draws = sample_svmf(f, par, n, 31);

  const int nz = 8, nphi = 8;
  auto cell_of = [&](const Vector& y) {
    double z = std::clamp(y[0], -1.0, 1.0);
    double phi = std::atan2(y[2], y[1]);  // [-pi, pi)
    int iz = std::min(nz - 1, static_cast<int>((z + 1.0) / 2.0 * nz));
    int ip = std::min(nphi - 1, static_cast<int>((phi + M_PI) / (2.0 * M_PI) * nphi));
    return iz * nphi + ip;
  };

  std::vector<double> expected(nz * nphi, 0.0);
  std::vector<double> zs, wz, ps, wp;
  testsup::gauss_legendre(40, 0.0, 1.0, zs, wz);
  testsup::gauss_legendre(40, 0.0, 1.0, ps, wp);
  for (int iz = 0; iz < nz; ++iz) {
    double z0 = -1.0 + 2.0 * iz / nz, z1 = -1.0 + 2.0 * (iz + 1) / nz;
    for (int ip = 0; ip < nphi; ++ip) {
      double p0 = -M_PI + 2.0 * M_PI * ip / nphi, p1 = -M_PI + 2.0 * M_PI * (ip + 1) / nphi;
      double acc = 0.0;
      for (std::size_t a = 0; a < zs.size(); ++a) {
        double z = z0 + (z1 - z0) * zs[a];
        double rho = std::sqrt(std::max(0.0, 1.0 - z * z));
        for (std::size_t b = 0; b < ps.size(); ++b) {
          double phi = p0 + (p1 - p0) * ps[b];
          Vector y(3);
          y << z, rho * std::cos(phi), rho * std::sin(phi);
          acc += wz[a] * wp[b] * std::exp(svmf_log_density(y, f, par));
        }
      }
      expected[iz * nphi + ip] = acc * (z1 - z0) * (p1 - p0) * n;
    }
  }

  std::vector<double> observed(nz * nphi, 0.0);
  for (int i = 0; i < n; ++i) observed[cell_of(draws.row(i).transpose())] += 1.0;

  // merge cells with small expectation into a remainder bin
  double chi2 = 0.0, rest_exp = 0.0, rest_obs = 0.0;
  int bins = 0;
  for (int c = 0; c < nz * nphi; ++c) {
    if (expected[c] >= 20.0) {
      chi2 += (observed[c] - expected[c]) * (observed[c] - expected[c]) / expected[c];
      ++bins;
    } else {
      rest_exp += expected[c];
      rest_obs += observed[c];
    }
  }
  if (rest_exp > 0.0) {
    chi2 += (rest_obs - rest_exp) * (rest_obs - rest_exp) / rest_exp;
    ++bins;
  }
  boost::math::chi_squared chi(bins - 1);
  double crit = boost::math::quantile(chi, 0.999);
  INFO("chi2 = " << chi2 << " crit = " << crit << " bins = " << bins);
  CHECK(chi2 < crit);
}

TEST_CASE("axes_at transports the base frame") {
  std::mt19937_64 rng(233);
  Matrix q = random_rotation(3, 37);
  TransportBase base{q.col(0), q.rightCols(2)};
  base.validate();

  OrientationFrame at_base = axes_at(base.gamma01, base);
  CHECK((at_base.axes - base.base_axes).cwiseAbs().maxCoeff() < 1e-12);

  for (int i = 0; i < 100; ++i) {
    Vector mu = random_unit(3, rng);
    if (1.0 + mu.dot(base.gamma01) < 0.05) continue;
    OrientationFrame fr = axes_at(mu, base);
    fr.validate();
    CHECK((fr.mu - mu).norm() == 0.0);
    for (int j = 0; j < 2; ++j) CHECK(std::abs(mu.dot(fr.axes.col(j))) < 1e-12);
  }
  CHECK_THROWS_AS(axes_at(Vector(-base.gamma01), base), ValidationError);
}

TEST_CASE("rotated_residual basics and second-moment alignment") {
  std::mt19937_64 rng(239);
  Matrix q = random_rotation(3, 41);
  Vector gamma01 = q.col(0);

  for (int i = 0; i < 50; ++i) {
    Vector mu = random_unit(3, rng);
    if (1.0 + mu.dot(gamma01) < 0.05) continue;
    CHECK(rotated_residual(mu, mu, gamma01).norm() < 1e-12);
    Vector y = random_unit(3, rng);
    CHECK(std::abs(gamma01.dot(rotated_residual(y, mu, gamma01))) < 1e-12);
  }

  Vector y = random_unit(3, rng);
  Vector v = rotated_residual(y, gamma01, gamma01);
  CHECK((v - (y - gamma01.dot(y) * gamma01)).norm() < 1e-12);

  // second moment of rotated residuals diagonalized by the base axes
  TransportBase base{q.col(0), q.rightCols(2)};
  SvMFParams par;
  par.kappa = 20.0;
  par.scales = Vector(3);
  par.scales << 1.0, 2.0, 0.5;
  Vector mu = random_unit(3, rng);
  while (1.0 + mu.dot(gamma01) < 0.3) mu = random_unit(3, rng);
  OrientationFrame fr = axes_at(mu, base);
  Matrix draws = sample_svmf(fr, par, 100000, 43);
  Matrix second = Matrix::Zero(3, 3);
  for (int i = 0; i < draws.rows(); ++i) {
    Vector vi = rotated_residual(draws.row(i).transpose(), mu, gamma01);
    second += vi * vi.transpose();
  }
  second /= draws.rows();
  Eigen::SelfAdjointEigenSolver<Matrix> eig(second);
  // largest eigenvalue should align with the large-scale base axis
  Vector top = eig.eigenvectors().col(2);
  Vector bottom = eig.eigenvectors().col(1);
  double ang_top = std::acos(std::min(1.0, std::abs(top.dot(base.base_axes.col(0)))));
  double ang_bot = std::acos(std::min(1.0, std::abs(bottom.dot(base.base_axes.col(1)))));
  CHECK(ang_top < 5.0 * M_PI / 180.0);
  CHECK(ang_bot < 5.0 * M_PI / 180.0);
  CHECK(eig.eigenvalues()[0] < 1e-10);  // gamma01 direction
}

TEST_CASE("split_seed produces distinct deterministic streams") {
  CHECK(split_seed(42, 0) == split_seed(42, 0));
  CHECK(split_seed(42, 0) != split_seed(42, 1));
  CHECK(split_seed(42, 1) != split_seed(43, 1));
}
