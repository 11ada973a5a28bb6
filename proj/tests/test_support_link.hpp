#pragma once

#include <random>

#include "sphreg/link.hpp"
#include "test_support.hpp"

namespace testsup {

using sphreg::CovariateCase;
using sphreg::LinkDims;
using sphreg::LinkParams;
using sphreg::Matrix;
using sphreg::Vector;

inline Matrix random_stiefel(Eigen::Index q, Eigen::Index k, std::mt19937_64& rng) {
  Matrix g(q, k);
  std::normal_distribution<double> gauss;
  for (Eigen::Index i = 0; i < q; ++i)
    for (Eigen::Index j = 0; j < k; ++j) g(i, j) = gauss(rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix full = qr.householderQ();
  Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  Matrix out = full.leftCols(k);
  for (Eigen::Index j = 0; j < k; ++j)
    if (r(j, j) < 0) out.col(j) *= -1.0;
  return out;
}

inline LinkParams make_random_link(const LinkDims& dims, std::mt19937_64& rng,
                                   double scale_lo = 0.2, double scale_hi = 1.0) {
  std::uniform_real_distribution<double> unif(scale_lo, scale_hi);
  LinkParams out;
  out.dims = dims;
  out.b0 = sphreg::random_rotation(dims.p, rng());
  if (dims.has_sph()) {
    out.rs = random_stiefel(dims.qs, dims.p, rng);
    out.bs = Vector(dims.p - 1);
    for (int j = 0; j < dims.p - 1; ++j) out.bs[j] = unif(rng);
  }
  if (dims.has_euc()) {
    out.re = random_stiefel(dims.qe, dims.p - 1, rng);
    out.be = Vector(dims.p - 1);
    for (int j = 0; j < dims.p - 1; ++j) out.be[j] = unif(rng);
  }
  out = out.canonicalized();
  out.validate();
  return out;
}

inline CovariateCase make_random_case(const LinkDims& dims, std::mt19937_64& rng) {
  CovariateCase x;
  if (dims.has_sph()) x.xs = random_unit(dims.qs, rng);
  if (dims.has_euc()) x.xe = 0.7 * random_gaussian(dims.qe, rng);
  return x;
}

// Literal composition of the link definition through the stereographic
// maps, with the compactified-space conventions for infinity.
inline Vector link_eval_composed(const LinkParams& params, const CovariateCase& x) {
  using sphreg::ExtendedPoint;
  const LinkDims& d = params.dims;
  ExtendedPoint acc = ExtendedPoint::finite(Vector::Zero(d.p - 1));
  if (d.has_sph()) {
    ExtendedPoint s = sphreg::stereo_project(params.rs.transpose() * x.xs);
    if (s.is_infinite()) {
      acc = params.bs.isZero(0.0) ? ExtendedPoint::finite(Vector::Zero(d.p - 1))
                                  : ExtendedPoint::infinity(d.p - 1);
    } else {
      acc = ExtendedPoint::finite(params.bs.asDiagonal() * s.value());
    }
  }
  if (d.has_euc() && !acc.is_infinite()) {
    Vector t = acc.value() + params.be.asDiagonal() * (params.re.transpose() * x.xe);
    acc = ExtendedPoint::finite(t);
  }
  return params.b0 * sphreg::stereo_inverse(acc);
}

}  // namespace testsup
