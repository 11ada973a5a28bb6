#pragma once

#include "sphreg/geometry.hpp"

namespace sphreg {

struct LinkDims {
  int p = 0;
  int qs = 0;
  int qe = 0;

  bool has_sph() const { return qs > 0; }
  bool has_euc() const { return qe > 0; }
  int q() const { return qs + qe; }
  void validate() const;
};

/// Natural parameterization (B0, Bs, Be, Rs, Re) of the mean link.
/// Bs and Be are stored as their (p-1) diagonal entries; a covariate
/// block that is absent has an empty diagonal and an empty axis matrix.
struct LinkParams {
  Matrix b0;   // p x p rotation
  Vector bs;   // beta_{s2}..beta_{sp} >= 0
  Vector be;   // beta_{e2}..beta_{ep} >= 0
  Matrix rs;   // qs x p, orthonormal columns
  Matrix re;   // qe x (p-1), orthonormal columns
  LinkDims dims;

  Vector b01() const { return b0.col(0); }
  Matrix b0_minus1() const { return b0.rightCols(dims.p - 1); }
  Vector rs1() const { return rs.col(0); }
  Matrix rs_minus1() const { return rs.rightCols(dims.p - 1); }

  void validate() const;

  /// Jointly permutes (beta_j, b_{0j}, r_{sj}, r_{e,j-1}) so the squared
  /// scales are nonincreasing; the link function is unchanged.
  LinkParams canonicalized() const;
};

/// Optimization-friendly parameterization (b01, rs1, Omega).
struct ReparamLink {
  Vector b01;    // p
  Vector rs1;    // qs (empty when no spherical block)
  Matrix omega;  // p x (qs + qe)
  LinkDims dims;

  void validate(double tol = 1e-6) const;
};

/// One covariate case; an empty vector marks an absent block.
struct CovariateCase {
  Vector xe;
  Vector xs;
};

/// Closed-form mean link (reference direction b01 plus scaled axes).
Vector link_eval(const LinkParams& params, const CovariateCase& x);

/// The transformed covariate t(x); rejects the pole x_s = -r_{s1}.
Vector t_transform(const LinkParams& params, const CovariateCase& x);

/// Dimension of the image sphere: largest k with beta_{sk}^2 + beta_{ek}^2 > 0
/// gives k-1; zero when every scale vanishes.
int image_dimension(const LinkParams& params);

/// Circle link beta0 + 2*arctan(delta * beta_s2 * tan((theta - eta)/2)),
/// reduced to [-pi, pi).
double downs_link(double theta_x, double beta0, double eta, int delta, double beta_s2);

/// Circle link with Euclidean covariates: beta0 + 2*arctan(gamma'x_e).
double fisher_lee_link(const Vector& xe, double beta0, const Vector& gamma);

/// Hybrid circle link with one angular and q_e Euclidean covariates.
double hybrid_link(double theta_x, const Vector& xe, double beta0, double eta,
                   int delta, double beta_s2, const Vector& gamma);

struct MobiusLinkForm {
  Matrix r0;   // p x p orthogonal
  double phi;  // (1 - beta)/(1 + beta)
  Vector rs1;
};

/// Sphere-Moebius form of an isotropic spherical-only link (p = qs,
/// Bs = beta*I, 0 <= beta <= 1): x -> mobius_sphere(x; r0, phi*rs1).
MobiusLinkForm mobius_link_form(const LinkParams& params);

/// Closed-form composition outer(inner(.)) for the two closed cases:
/// (i) outer's Rs equals inner's B0; (ii) both links isotropic with p = qs.
LinkParams compose_links(const LinkParams& inner, const LinkParams& outer);

ReparamLink to_reparam(const LinkParams& params);

Vector link_eval_reparam(const ReparamLink& rp, const CovariateCase& x);

struct FromReparamResult {
  LinkParams params;
  bool repeated_singular_values = false;
};

/// Recovers natural parameters from (b01, rs1, Omega) by SVD. Axis signs
/// follow a first-nonzero-positive convention on right-singular vectors;
/// scales below 1e-9 of the largest singular value are treated as zero and
/// their axis columns completed arbitrarily.
FromReparamResult from_reparam(const ReparamLink& rp);

/// (I - b01 b01')M(I - Is rs1 rs1' Is'); idempotent, fixes valid Omega.
Matrix proj_constraint(const Matrix& m, const Vector& b01, const Vector& rs1);

/// Frobenius norm of [Omega_s Omega_s', Omega_e Omega_e']; zero when only
/// one covariate block is present.
double commutator_residual(const ReparamLink& rp);

}  // namespace sphreg
