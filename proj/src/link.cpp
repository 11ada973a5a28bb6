#include "sphreg/link.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace sphreg {

namespace {

constexpr double kPoleEps = 1e-13;
constexpr double kZeroScaleRel = 1e-9;

// Re-orthonormalize columns in place (modified Gram-Schmidt with one
// extra pass); a no-op up to roundoff for already-orthonormal input.
void polish_columns(Matrix& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (int pass = 0; pass < 2; ++pass)
      for (Eigen::Index k = 0; k < j; ++k) m.col(j) -= m.col(k).dot(m.col(j)) * m.col(k);
    double n = m.col(j).norm();
    if (n < 1e-8) throw ValidationError("from_reparam: collapsed axis column");
    m.col(j) /= n;
  }
}

}  // namespace

void LinkDims::validate() const {
  if (p < 2) throw ValidationError("LinkDims: p must be >= 2");
  if (qs < 0 || qe < 0) throw ValidationError("LinkDims: negative covariate dimension");
  if (qs == 0 && qe == 0) throw ValidationError("LinkDims: at least one covariate block");
  if (qs > 0 && p > qs) throw ValidationError("LinkDims: requires p <= qs");
  if (qe > 0 && p > qe + 1) throw ValidationError("LinkDims: requires p <= qe + 1");
}

void LinkParams::validate() const {
  dims.validate();
  RotationMatrix check_b0(b0);
  if (b0.rows() != dims.p) throw ValidationError("LinkParams: B0 dimension mismatch");
  Vector s2 = Vector::Zero(dims.p - 1);
  if (dims.has_sph()) {
    if (bs.size() != dims.p - 1 || rs.rows() != dims.qs || rs.cols() != dims.p)
      throw ValidationError("LinkParams: spherical block dimension mismatch");
    if (bs.minCoeff() < 0) throw ValidationError("LinkParams: negative scale in Bs");
    StiefelMatrix check_rs(rs);
    s2 += bs.cwiseProduct(bs);
  } else if (bs.size() != 0 || rs.size() != 0) {
    throw ValidationError("LinkParams: spherical block present with qs = 0");
  }
  if (dims.has_euc()) {
    if (be.size() != dims.p - 1 || re.rows() != dims.qe || re.cols() != dims.p - 1)
      throw ValidationError("LinkParams: Euclidean block dimension mismatch");
    if (be.minCoeff() < 0) throw ValidationError("LinkParams: negative scale in Be");
    StiefelMatrix check_re(re);
    s2 += be.cwiseProduct(be);
  } else if (be.size() != 0 || re.size() != 0) {
    throw ValidationError("LinkParams: Euclidean block present with qe = 0");
  }
  for (Eigen::Index j = 0; j + 1 < s2.size(); ++j)
    if (s2[j] < s2[j + 1] - 1e-12)
      throw ValidationError("LinkParams: squared scales must be nonincreasing");
}

LinkParams LinkParams::canonicalized() const {
  Eigen::Index k = dims.p - 1;
  Vector s2 = Vector::Zero(k);
  if (dims.has_sph()) s2 += bs.cwiseProduct(bs);
  if (dims.has_euc()) s2 += be.cwiseProduct(be);
  std::vector<Eigen::Index> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](Eigen::Index a, Eigen::Index b) { return s2[a] > s2[b]; });
  LinkParams out = *this;
  for (Eigen::Index j = 0; j < k; ++j) {
    Eigen::Index src = order[j];
    out.b0.col(j + 1) = b0.col(src + 1);
    if (dims.has_sph()) {
      out.bs[j] = bs[src];
      out.rs.col(j + 1) = rs.col(src + 1);
    }
    if (dims.has_euc()) {
      out.be[j] = be[src];
      out.re.col(j) = re.col(src);
    }
  }
  // An odd permutation flips det(B0); restore it by negating the last
  // axis pair, which leaves the link function unchanged.
  std::vector<Eigen::Index> perm(order);
  int parity = 0;
  for (Eigen::Index j = 0; j < k; ++j) {
    while (perm[j] != j) {
      std::swap(perm[j], perm[perm[j]]);
      parity ^= 1;
    }
  }
  if (parity) {
    out.b0.col(dims.p - 1) *= -1.0;
    if (dims.has_sph()) out.rs.col(dims.p - 1) *= -1.0;
    if (dims.has_euc()) out.re.col(dims.p - 2) *= -1.0;
  }
  return out;
}

void ReparamLink::validate(double tol) const {
  dims.validate();
  if (b01.size() != dims.p || omega.rows() != dims.p || omega.cols() != dims.q())
    throw ValidationError("ReparamLink: dimension mismatch");
  if (std::abs(b01.norm() - 1.0) > tol)
    throw ValidationError("ReparamLink: b01 is not unit");
  if ((b01.transpose() * omega).cwiseAbs().maxCoeff() > tol)
    throw ValidationError("ReparamLink: b01'Omega != 0");
  if (dims.has_sph()) {
    if (rs1.size() != dims.qs) throw ValidationError("ReparamLink: rs1 dimension mismatch");
    if (std::abs(rs1.norm() - 1.0) > tol)
      throw ValidationError("ReparamLink: rs1 is not unit");
    if ((omega.leftCols(dims.qs) * rs1).cwiseAbs().maxCoeff() > tol)
      throw ValidationError("ReparamLink: Omega Is rs1 != 0");
  } else if (rs1.size() != 0) {
    throw ValidationError("ReparamLink: rs1 present with qs = 0");
  }
}

Vector t_transform(const LinkParams& params, const CovariateCase& x) {
  const LinkDims& d = params.dims;
  Vector t = Vector::Zero(d.p - 1);
  if (d.has_sph()) {
    if (x.xs.size() != d.qs) throw ValidationError("t_transform: xs dimension mismatch");
    double denom = 1.0 + params.rs1().dot(x.xs);
    if (denom <= kPoleEps) throw ValidationError("t_transform: pole at x_s = -r_{s1}");
    t += params.bs.asDiagonal() * (params.rs_minus1().transpose() * x.xs) / denom;
  }
  if (d.has_euc()) {
    if (x.xe.size() != d.qe) throw ValidationError("t_transform: xe dimension mismatch");
    t += params.be.asDiagonal() * (params.re.transpose() * x.xe);
  }
  return t;
}

Vector link_eval(const LinkParams& params, const CovariateCase& x) {
  const LinkDims& d = params.dims;
  if (d.has_sph()) {
    if (x.xs.size() != d.qs) throw ValidationError("link_eval: xs dimension mismatch");
    double denom = 1.0 + params.rs1().dot(x.xs);
    if (denom <= kPoleEps) {
      if (params.bs.size() > 0 && params.bs.maxCoeff() > 0.0) return -params.b01();
      CovariateCase euc_only{x.xe, Vector()};
      LinkParams no_sph = params;
      no_sph.dims.qs = 0;
      no_sph.bs = Vector();
      no_sph.rs = Matrix();
      if (!d.has_euc()) return params.b01();
      return link_eval(no_sph, euc_only);
    }
  }
  Vector t = t_transform(params, x);
  double s = t.squaredNorm();
  return ((1.0 - s) * params.b01() + 2.0 * params.b0_minus1() * t) / (1.0 + s);
}

int image_dimension(const LinkParams& params) {
  const Eigen::Index k = params.dims.p - 1;
  for (Eigen::Index j = k; j >= 1; --j) {
    double s2 = 0.0;
    if (params.dims.has_sph()) s2 += params.bs[j - 1] * params.bs[j - 1];
    if (params.dims.has_euc()) s2 += params.be[j - 1] * params.be[j - 1];
    if (s2 > 0.0) return static_cast<int>(j);
  }
  return 0;
}

double downs_link(double theta_x, double beta0, double eta, int delta, double beta_s2) {
  if (delta != 1 && delta != -1) throw ValidationError("downs_link: delta must be +-1");
  if (beta_s2 < 0) throw ValidationError("downs_link: beta_s2 must be nonnegative");
  double half = 0.5 * wrap_angle(theta_x - eta);
  if (std::abs(std::cos(half)) < 1e-15)
    return wrap_angle(beta0 + (beta_s2 > 0.0 ? M_PI : 0.0));
  return wrap_angle(beta0 + 2.0 * std::atan(delta * beta_s2 * std::tan(half)));
}

double fisher_lee_link(const Vector& xe, double beta0, const Vector& gamma) {
  if (xe.size() != gamma.size()) throw ValidationError("fisher_lee_link: dimension mismatch");
  return wrap_angle(beta0 + 2.0 * std::atan(gamma.dot(xe)));
}

double hybrid_link(double theta_x, const Vector& xe, double beta0, double eta,
                   int delta, double beta_s2, const Vector& gamma) {
  if (delta != 1 && delta != -1) throw ValidationError("hybrid_link: delta must be +-1");
  double half = 0.5 * wrap_angle(theta_x - eta);
  if (std::abs(std::cos(half)) < 1e-15)
    return wrap_angle(beta0 + (beta_s2 > 0.0
                                   ? M_PI
                                   : 2.0 * std::atan(gamma.dot(xe))));
  double arg = delta * beta_s2 * std::tan(half) + gamma.dot(xe);
  return wrap_angle(beta0 + 2.0 * std::atan(arg));
}

MobiusLinkForm mobius_link_form(const LinkParams& params) {
  const LinkDims& d = params.dims;
  if (d.has_euc() || d.p != d.qs)
    throw ValidationError("mobius_link_form: requires a spherical-only link with p = qs");
  double beta = params.bs[0];
  if ((params.bs.array() - beta).abs().maxCoeff() > 1e-12)
    throw ValidationError("mobius_link_form: requires isotropic Bs");
  if (beta < 0.0 || beta > 1.0)
    throw ValidationError("mobius_link_form: requires 0 <= beta <= 1");
  MobiusLinkForm out;
  out.phi = (1.0 - beta) / (1.0 + beta);
  out.r0 = params.b0 * params.rs.transpose();
  out.rs1 = params.rs1();
  return out;
}

namespace {

bool isotropic_square(const LinkParams& p, double* beta) {
  if (p.dims.has_euc() || p.dims.p != p.dims.qs || p.bs.size() == 0) return false;
  double b = p.bs[0];
  if ((p.bs.array() - b).abs().maxCoeff() > 1e-12) return false;
  *beta = b;
  return true;
}

LinkParams from_mobius_form(const Matrix& r_tilde, const Vector& psi_tilde, int p) {
  LinkParams out;
  out.dims = LinkDims{p, p, 0};
  double n = psi_tilde.norm();
  double beta = (1.0 - n) / (1.0 + n);
  Matrix r_prime;
  if (n < 1e-12) {
    r_prime = Matrix::Identity(p, p);
  } else {
    r_prime = gram_schmidt({Vector(psi_tilde / n)});
  }
  if (r_prime.determinant() * r_tilde.determinant() < 0) r_prime.col(p - 1) *= -1.0;
  out.b0 = r_tilde * r_prime;
  out.rs = r_prime;
  out.bs = Vector::Constant(p - 1, beta);
  out.be = Vector();
  out.re = Matrix();
  return out;
}

}  // namespace

LinkParams compose_links(const LinkParams& inner, const LinkParams& outer) {
  inner.validate();
  outer.validate();
  const int p = inner.dims.p;
  bool square = !inner.dims.has_euc() && !outer.dims.has_euc() &&
                inner.dims.p == inner.dims.qs && outer.dims.p == outer.dims.qs &&
                outer.dims.p == p;
  if (!square)
    throw ValidationError("compose_links: both links must be spherical-only with p = qs");

  // case (i): outer's Rs equals inner's B0
  if ((outer.rs - inner.b0).cwiseAbs().maxCoeff() < 1e-10) {
    LinkParams out;
    out.dims = inner.dims;
    out.b0 = outer.b0;
    out.rs = inner.rs;
    out.bs = inner.bs.cwiseProduct(outer.bs);
    out.be = Vector();
    out.re = Matrix();
    return out.canonicalized();
  }

  double beta1 = 0.0, beta2 = 0.0;
  if (!isotropic_square(inner, &beta1) || !isotropic_square(outer, &beta2))
    throw ValidationError("compose_links: parameters satisfy neither closure case");
  if (beta1 <= 0.0 || beta2 <= 0.0)
    throw ValidationError("compose_links: closure case (ii) requires positive scales");

  Matrix rt1 = inner.b0 * inner.rs.transpose();
  Matrix rt2 = outer.b0 * outer.rs.transpose();
  Vector psi1 = (1.0 - beta1) / (1.0 + beta1) * inner.rs1();
  Vector psi2 = (1.0 - beta2) / (1.0 + beta2) * outer.rs1();

  if (psi2.norm() < 1e-14) return from_mobius_form(rt2 * rt1, psi1, p);
  if (psi1.norm() < 1e-14)
    return from_mobius_form(rt2 * rt1, Vector(rt1.transpose() * psi2), p);

  Vector v = inner.rs * inner.b0.transpose() * psi2;
  Vector w = mobius_sphere(v, Matrix::Identity(p, p), psi1);
  if (w.norm() < 1e-12)
    return from_mobius_form(rt2 * rt1, Vector::Zero(p), p);
  Vector psi_tilde = w / w.squaredNorm();
  Matrix r_tilde = outer.b0 * outer.rs.transpose() * householder(psi2) *
                   householder(Vector(inner.b0 * inner.rs.transpose() *
                                          (psi1 / psi1.squaredNorm()) +
                                      psi2 / psi2.squaredNorm())) *
                   inner.b0 * inner.rs.transpose() * householder(psi1) *
                   householder(psi_tilde);
  return from_mobius_form(r_tilde, psi_tilde, p);
}

ReparamLink to_reparam(const LinkParams& params) {
  const LinkDims& d = params.dims;
  ReparamLink rp;
  rp.dims = d;
  rp.b01 = params.b01();
  Matrix rows(d.p - 1, d.q());
  Eigen::Index col = 0;
  if (d.has_sph()) {
    rows.leftCols(d.qs) = params.bs.asDiagonal() * params.rs_minus1().transpose();
    rp.rs1 = params.rs1();
    col = d.qs;
  }
  if (d.has_euc()) rows.rightCols(d.qe) = params.be.asDiagonal() * params.re.transpose();
  (void)col;
  rp.omega = params.b0_minus1() * rows;
  return rp;
}

Vector link_eval_reparam(const ReparamLink& rp, const CovariateCase& x) {
  const LinkDims& d = rp.dims;
  Vector t = Vector::Zero(d.p);
  if (d.has_sph()) {
    if (x.xs.size() != d.qs)
      throw ValidationError("link_eval_reparam: xs dimension mismatch");
    double denom = 1.0 + rp.rs1.dot(x.xs);
    Matrix omega_s = rp.omega.leftCols(d.qs);
    if (denom <= kPoleEps) {
      if (omega_s.cwiseAbs().maxCoeff() > 0.0) return -rp.b01;
    } else {
      t += omega_s * x.xs / denom;
    }
  }
  if (d.has_euc()) {
    if (x.xe.size() != d.qe)
      throw ValidationError("link_eval_reparam: xe dimension mismatch");
    t += rp.omega.rightCols(d.qe) * x.xe;
  }
  double s = t.squaredNorm();
  return ((1.0 - s) * rp.b01 + 2.0 * t) / (1.0 + s);
}

FromReparamResult from_reparam(const ReparamLink& rp) {
  rp.validate(1e-6);
  const LinkDims& d = rp.dims;
  const int p = d.p;
  FromReparamResult result;
  LinkParams& out = result.params;
  out.dims = d;

  Eigen::JacobiSVD<Matrix> svd(rp.omega, Eigen::ComputeFullU | Eigen::ComputeThinV);
  Vector sv = svd.singularValues();
  Matrix u = svd.matrixU();
  Matrix v = svd.matrixV();

  double top = sv.size() > 0 ? sv[0] : 0.0;
  double zero_tol = kZeroScaleRel * std::max(top, 1e-30);
  for (Eigen::Index i = 0; i + 1 < std::min<Eigen::Index>(sv.size(), p - 1); ++i)
    if (sv[i] > zero_tol && std::abs(sv[i] - sv[i + 1]) <= 1e-8 * std::max(top, 1.0))
      result.repeated_singular_values = true;

  // Canonical signs: first non-negligible entry of each right-singular
  // vector positive, left partner flipped with it.
  for (Eigen::Index j = 0; j < v.cols(); ++j) {
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
      if (std::abs(v(i, j)) > 1e-9) {
        if (v(i, j) < 0) {
          v.col(j) *= -1.0;
          u.col(j) *= -1.0;
        }
        break;
      }
    }
  }

  Vector beta_s = Vector::Zero(p - 1), beta_e = Vector::Zero(p - 1);
  Matrix rs_cols = Matrix::Zero(d.qs, p - 1);
  Matrix re_cols = Matrix::Zero(d.qe, p - 1);
  std::vector<bool> have_s(p - 1, false), have_e(p - 1, false);
  std::vector<bool> have_u(p - 1, false);
  Matrix b0 = Matrix::Zero(p, p);
  b0.col(0) = rp.b01;

  for (Eigen::Index j = 0; j < p - 1; ++j) {
    double sigma = j < sv.size() ? sv[j] : 0.0;
    if (sigma <= zero_tol) continue;
    b0.col(j + 1) = u.col(j);
    have_u[j] = true;
    if (d.has_sph()) {
      Vector ws = sigma * v.col(j).head(d.qs);
      double bsj = ws.norm();
      if (bsj > zero_tol) {
        beta_s[j] = bsj;
        rs_cols.col(j) = ws / bsj;
        have_s[j] = true;
      }
    }
    if (d.has_euc()) {
      Vector we = sigma * v.col(j).tail(d.qe);
      double bej = we.norm();
      if (bej > zero_tol) {
        beta_e[j] = bej;
        re_cols.col(j) = we / bej;
        have_e[j] = true;
      }
    }
  }

  // Complete unidentified axis columns deterministically.
  std::vector<Vector> b0_seed{rp.b01};
  for (Eigen::Index j = 0; j < p - 1; ++j)
    if (have_u[j]) b0_seed.push_back(b0.col(j + 1));
  Matrix b0_full = gram_schmidt(b0_seed);
  Eigen::Index fill = b0_seed.size();
  Eigen::Index last_free = -1;
  for (Eigen::Index j = 0; j < p - 1; ++j)
    if (!have_u[j]) {
      b0.col(j + 1) = b0_full.col(fill++);
      last_free = j + 1;
    }
  if (b0.determinant() < 0) {
    if (last_free >= 0) {
      b0.col(last_free) *= -1.0;
    } else {
      // flip the last singular pair; the link is invariant under the
      // joint sign change of (b0j, r_sj, r_ej)
      b0.col(p - 1) *= -1.0;
      if (d.has_sph()) rs_cols.col(p - 2) *= -1.0;
      if (d.has_euc()) re_cols.col(p - 2) *= -1.0;
    }
  }
  out.b0 = b0;

  if (d.has_sph()) {
    std::vector<Vector> seed{rp.rs1};
    for (Eigen::Index j = 0; j < p - 1; ++j)
      if (have_s[j]) seed.push_back(rs_cols.col(j));
    Matrix full = gram_schmidt(seed);
    Eigen::Index next = seed.size();
    Matrix rs(d.qs, p);
    rs.col(0) = rp.rs1;
    for (Eigen::Index j = 0; j < p - 1; ++j)
      rs.col(j + 1) = have_s[j] ? Vector(rs_cols.col(j)) : Vector(full.col(next++));
    out.rs = rs;
    out.bs = beta_s;
  }
  if (d.has_euc()) {
    Matrix re(d.qe, p - 1);
    std::vector<Vector> seed;
    for (Eigen::Index j = 0; j < p - 1; ++j)
      if (have_e[j]) seed.push_back(re_cols.col(j));
    Eigen::Index next = seed.size();
    Matrix full = seed.empty() ? Matrix::Identity(d.qe, d.qe) : gram_schmidt(seed);
    for (Eigen::Index j = 0; j < p - 1; ++j)
      re.col(j) = have_e[j] ? Vector(re_cols.col(j)) : Vector(full.col(next++));
    out.re = re;
    out.be = beta_e;
  }
  polish_columns(out.b0);
  if (d.has_sph()) polish_columns(out.rs);
  if (d.has_euc()) polish_columns(out.re);
  out.validate();
  return result;
}

Matrix proj_constraint(const Matrix& m, const Vector& b01, const Vector& rs1) {
  Matrix left = Matrix::Identity(b01.size(), b01.size()) - b01 * b01.transpose();
  Matrix out = left * m;
  if (rs1.size() > 0) {
    Eigen::Index qs = rs1.size();
    out.leftCols(qs) -= (out.leftCols(qs) * rs1) * rs1.transpose();
  }
  return out;
}

double commutator_residual(const ReparamLink& rp) {
  if (!rp.dims.has_sph() || !rp.dims.has_euc()) return 0.0;
  Matrix omega_s = rp.omega.leftCols(rp.dims.qs);
  Matrix omega_e = rp.omega.rightCols(rp.dims.qe);
  Matrix as = omega_s * omega_s.transpose();
  Matrix ae = omega_e * omega_e.transpose();
  return (as * ae - ae * as).norm();
}

}  // namespace sphreg
