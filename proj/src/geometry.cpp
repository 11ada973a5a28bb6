#include "sphreg/geometry.hpp"

#include <cmath>
#include <random>

namespace sphreg {

double wrap_angle(double theta) {
  double t = std::fmod(theta + M_PI, 2.0 * M_PI);
  if (t < 0) t += 2.0 * M_PI;
  return t - M_PI;
}

UnitVector::UnitVector(Vector coords) : v_(std::move(coords)) {
  if (v_.size() < 2) throw ValidationError("UnitVector: dimension must be >= 2");
  if (std::abs(v_.norm() - 1.0) > kUnitNormTol)
    throw ValidationError("UnitVector: norm deviates from 1 beyond 1e-10");
}

UnitVector UnitVector::normalized(const Vector& v) {
  double n = v.norm();
  if (n < 1e-300) throw ValidationError("UnitVector: cannot normalize zero vector");
  return UnitVector(v / n);
}

ExtendedPoint ExtendedPoint::finite(Vector v) {
  ExtendedPoint p;
  p.dim_ = v.size();
  p.v_ = std::move(v);
  return p;
}

ExtendedPoint ExtendedPoint::infinity(Eigen::Index dim) {
  ExtendedPoint p;
  p.dim_ = dim;
  p.infinite_ = true;
  return p;
}

const Vector& ExtendedPoint::value() const {
  if (infinite_) throw ValidationError("ExtendedPoint: value() on point at infinity");
  return v_;
}

RotationMatrix::RotationMatrix(Matrix m) : m_(std::move(m)) {
  if (m_.rows() != m_.cols()) throw ValidationError("RotationMatrix: not square");
  Eigen::Index p = m_.rows();
  if ((m_.transpose() * m_ - Matrix::Identity(p, p)).cwiseAbs().maxCoeff() > kUnitNormTol)
    throw ValidationError("RotationMatrix: M'M differs from I beyond 1e-10");
  if (std::abs(m_.determinant() - 1.0) > 1e-8)
    throw ValidationError("RotationMatrix: determinant differs from +1 beyond 1e-8");
}

StiefelMatrix::StiefelMatrix(Matrix m) : m_(std::move(m)) {
  if (m_.rows() < m_.cols()) throw ValidationError("StiefelMatrix: requires q >= k");
  Eigen::Index k = m_.cols();
  if ((m_.transpose() * m_ - Matrix::Identity(k, k)).cwiseAbs().maxCoeff() > kUnitNormTol)
    throw ValidationError("StiefelMatrix: M'M differs from I beyond 1e-10");
}

SkewMatrix::SkewMatrix(Eigen::Index dim, Vector upper) : dim_(dim), upper_(std::move(upper)) {
  if (upper_.size() != free_count(dim))
    throw ValidationError("SkewMatrix: wrong number of free parameters");
}

SkewMatrix SkewMatrix::zero(Eigen::Index dim) {
  return SkewMatrix(dim, Vector::Zero(free_count(dim)));
}

SkewMatrix SkewMatrix::from_matrix(const Matrix& m) {
  if (m.rows() != m.cols()) throw ValidationError("SkewMatrix: not square");
  Vector up(free_count(m.rows()));
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = i + 1; j < m.cols(); ++j) up[k++] = m(i, j);
  return SkewMatrix(m.rows(), std::move(up));
}

Matrix SkewMatrix::matrix() const {
  Matrix m = Matrix::Zero(dim_, dim_);
  Eigen::Index k = 0;
  for (Eigen::Index i = 0; i < dim_; ++i)
    for (Eigen::Index j = i + 1; j < dim_; ++j) {
      m(i, j) = upper_[k];
      m(j, i) = -upper_[k];
      ++k;
    }
  return m;
}

ExtendedPoint stereo_project(const Vector& x) {
  Eigen::Index p = x.size();
  if (p < 2) throw ValidationError("stereo_project: dimension must be >= 2");
  if (x.norm() > 1.0 + kUnitNormTol)
    throw ValidationError("stereo_project: input outside the closed unit ball");
  Vector pole = Vector::Zero(p);
  pole[0] = -1.0;
  if ((x - pole).cwiseAbs().maxCoeff() < kPoleTol) return ExtendedPoint::infinity(p - 1);
  return ExtendedPoint::finite(x.tail(p - 1) / (1.0 + x[0]));
}

Vector stereo_inverse(const ExtendedPoint& y) {
  Eigen::Index k = y.dim();
  Vector out(k + 1);
  if (y.is_infinite()) {
    out.setZero();
    out[0] = -1.0;
    return out;
  }
  double s = y.value().squaredNorm();
  if (!std::isfinite(s) || s > 1e300) {
    out.setZero();
    out[0] = -1.0;
    return out;
  }
  out[0] = (1.0 - s) / (1.0 + s);
  out.tail(k) = 2.0 * y.value() / (1.0 + s);
  return out;
}

Vector mobius_sphere(const Vector& x, const Matrix& R, const Vector& psi) {
  if (std::abs(psi.norm() - 1.0) <= kUnitNormTol)
    throw ValidationError("mobius_sphere: |psi| = 1 is not admissible");
  Vector w = x + psi;
  double n2 = w.squaredNorm();
  if (n2 < 1e-28) throw ValidationError("mobius_sphere: pole x = -psi");
  return R * ((1.0 - psi.squaredNorm()) / n2 * w + psi);
}

ExtendedPoint mobius_extended(const ExtendedPoint& x, const MobiusExtendedParams& par) {
  if (par.gamma == 0.0) throw ValidationError("mobius_extended: gamma must be nonzero");
  if (par.epsilon != 0 && par.epsilon != 2)
    throw ValidationError("mobius_extended: epsilon must be 0 or 2");
  if (x.is_infinite()) {
    if (par.epsilon == 0) return ExtendedPoint::infinity(x.dim());
    return ExtendedPoint::finite(par.A * par.b);
  }
  Vector w = x.value() + par.a;
  if (par.epsilon == 2) {
    double n2 = w.squaredNorm();
    if (n2 < 1e-280) return ExtendedPoint::infinity(x.dim());
    return ExtendedPoint::finite(par.A * (par.gamma / n2 * w + par.b));
  }
  return ExtendedPoint::finite(par.A * (par.gamma * w + par.b));
}

MobiusExtendedParams mobius_extended_compose(const MobiusExtendedParams& inner,
                                             const MobiusExtendedParams& outer) {
  if (inner.epsilon != 2 || outer.epsilon != 2)
    throw ValidationError("mobius_extended_compose: only the eps1 = eps2 = 2 branch has a closed form");
  Vector v = inner.A.transpose() * outer.a + inner.b;
  double n2 = v.squaredNorm();
  if (n2 < 1e-24)
    throw ValidationError("mobius_extended_compose: degenerate composition (v = 0)");
  MobiusExtendedParams out;
  out.A = outer.A * inner.A * householder(v);
  out.gamma = inner.gamma * outer.gamma / n2;
  out.a = inner.a + inner.gamma / n2 * v;
  out.b = householder(v) * (outer.gamma / n2 * v + inner.A.transpose() * outer.b);
  out.epsilon = 2;
  return out;
}

Matrix transport_matrix(const Vector& a, const Vector& b) {
  double c = 1.0 + b.dot(a);
  if (c <= kAntipodalTol)
    throw ValidationError("transport_matrix: a and b are antipodal");
  Vector v = a + b;
  return Matrix::Identity(a.size(), a.size()) - v * v.transpose() / c;
}

Matrix amaral_rotation(const Vector& a, const Vector& b) {
  double ct = b.dot(a);
  if (1.0 + ct <= kAntipodalTol)
    throw ValidationError("amaral_rotation: a and b are antipodal");
  Eigen::Index p = a.size();
  Vector u = b - ct * a;
  double st = u.norm();
  if (st < 1e-14) return Matrix::Identity(p, p);
  u /= st;
  return Matrix::Identity(p, p) + st * (a * u.transpose() - u * a.transpose()) +
         (ct - 1.0) * (a * a.transpose() + u * u.transpose());
}

Matrix gram_schmidt(const std::vector<Vector>& seed) {
  if (seed.empty()) throw ValidationError("gram_schmidt: empty seed");
  Eigen::Index p = seed.front().size();
  Matrix basis(p, p);
  Eigen::Index k = 0;
  auto add = [&](Vector v, bool required) {
    for (int pass = 0; pass < 2; ++pass)
      for (Eigen::Index j = 0; j < k; ++j) v -= basis.col(j).dot(v) * basis.col(j);
    double n = v.norm();
    if (n < kUnitNormTol) {
      if (required) throw ValidationError("gram_schmidt: rank-deficient seed");
      return;
    }
    basis.col(k++) = v / n;
  };
  for (const Vector& s : seed) {
    if (s.size() != p) throw ValidationError("gram_schmidt: inconsistent dimensions");
    add(s, true);
  }
  for (Eigen::Index j = 0; j < p && k < p; ++j) add(Vector::Unit(p, j), false);
  if (k < p) throw ValidationError("gram_schmidt: failed to complete basis");
  return basis;
}

Matrix cayley(const Matrix& skew) {
  // (I - S) and (I + S)^{-1} commute, so left-solving is equivalent.
  Eigen::Index k = skew.rows();
  Matrix ips = Matrix::Identity(k, k) + skew;
  return ips.partialPivLu().solve(Matrix::Identity(k, k) - skew);
}

Matrix inverse_cayley(const Matrix& rot) {
  Eigen::Index k = rot.rows();
  Matrix ipr = Matrix::Identity(k, k) + rot;
  Eigen::FullPivLU<Matrix> lu(ipr);
  lu.setThreshold(1e-10);
  if (!lu.isInvertible())
    throw ValidationError("inverse_cayley: rotation has a -1 eigenvalue");
  return lu.solve(Matrix::Identity(k, k) - rot);
}

Matrix householder(const Vector& v) {
  double n2 = v.squaredNorm();
  if (n2 < 1e-24) throw ValidationError("householder: zero vector");
  return Matrix::Identity(v.size(), v.size()) - 2.0 / n2 * v * v.transpose();
}

Matrix random_rotation(Eigen::Index p, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss;
  Matrix g(p, p);
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = 0; j < p; ++j) g(i, j) = gauss(rng);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < p; ++j)
    if (r(j, j) < 0) q.col(j) *= -1.0;
  if (q.determinant() < 0) q.col(p - 1) *= -1.0;
  return q;
}

}  // namespace sphreg
