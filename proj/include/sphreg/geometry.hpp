#pragma once

#include <Eigen/Dense>
#include <vector>

#include "sphreg/common.hpp"

namespace sphreg {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

constexpr double kUnitNormTol = 1e-10;
constexpr double kAntipodalTol = 1e-10;
constexpr double kPoleTol = 1e-12;

/// Point on S^{p-1}; validates the unit norm on construction.
class UnitVector {
 public:
  explicit UnitVector(Vector coords);
  static UnitVector normalized(const Vector& v);

  const Vector& coords() const { return v_; }
  operator const Vector&() const { return v_; }
  Eigen::Index dim() const { return v_.size(); }

 private:
  Vector v_;
};

/// Point of the compactified space R^k + {infinity}. Tagged union; the
/// point at infinity is an explicit state, never a sentinel value.
class ExtendedPoint {
 public:
  static ExtendedPoint finite(Vector v);
  static ExtendedPoint infinity(Eigen::Index dim);

  bool is_infinite() const { return infinite_; }
  const Vector& value() const;
  Eigen::Index dim() const { return dim_; }

 private:
  ExtendedPoint() = default;
  Vector v_;
  Eigen::Index dim_ = 0;
  bool infinite_ = false;
};

/// p x p rotation: M'M = I within 1e-10 and det(M) = +1 within 1e-8.
class RotationMatrix {
 public:
  explicit RotationMatrix(Matrix m);
  const Matrix& entries() const { return m_; }
  operator const Matrix&() const { return m_; }
  Eigen::Index dim() const { return m_.rows(); }

 private:
  Matrix m_;
};

/// q x k matrix with orthonormal columns (q >= k).
class StiefelMatrix {
 public:
  explicit StiefelMatrix(Matrix m);
  const Matrix& entries() const { return m_; }
  operator const Matrix&() const { return m_; }
  Eigen::Index rows() const { return m_.rows(); }
  Eigen::Index cols() const { return m_.cols(); }

 private:
  Matrix m_;
};

/// k x k skew-symmetric matrix stored by its strictly-upper-triangular
/// free parameters, so M + M' = 0 holds exactly.
class SkewMatrix {
 public:
  SkewMatrix(Eigen::Index dim, Vector upper);
  static SkewMatrix zero(Eigen::Index dim);
  static SkewMatrix from_matrix(const Matrix& m);

  Matrix matrix() const;
  const Vector& upper() const { return upper_; }
  Eigen::Index dim() const { return dim_; }
  static Eigen::Index free_count(Eigen::Index dim) { return dim * (dim - 1) / 2; }

 private:
  Eigen::Index dim_;
  Vector upper_;
};

/// Parameters of the Moebius transformation on extended Euclidean space,
/// x -> A(gamma (x+a)/||x+a||^eps + b) with eps in {0, 2}.
struct MobiusExtendedParams {
  Matrix A;
  double gamma = 1.0;
  Vector a;
  Vector b;
  int epsilon = 2;
};

/// Stereographic projection extended to the closed unit ball:
/// x -> (x_2,...,x_p)/(1+x_1), with -e1 -> infinity.
ExtendedPoint stereo_project(const Vector& x);

/// Inverse stereographic projection: y -> (1-|y|^2, 2y)/(1+|y|^2),
/// with infinity -> -e1. Output has unit norm.
Vector stereo_inverse(const ExtendedPoint& y);

/// Moebius transformation mapping S^{p-1} onto itself:
/// x -> R{(1-|psi|^2)(x+psi)/|x+psi|^2 + psi}. Requires |psi| != 1.
Vector mobius_sphere(const Vector& x, const Matrix& R, const Vector& psi);

ExtendedPoint mobius_extended(const ExtendedPoint& x, const MobiusExtendedParams& par);

/// Closed-form parameters of outer(inner(.)) for eps1 = eps2 = 2.
/// Rejects the degenerate pole v = A1'a2 + b1 = 0 of the composition
/// formula (the composed map is affine there, eps = 0).
MobiusExtendedParams mobius_extended_compose(const MobiusExtendedParams& inner,
                                             const MobiusExtendedParams& outer);

/// Parallel transport along the minimal geodesic from a to b:
/// I - (a+b)(a+b)'/(1+b'a). Symmetric, involutory, maps tangent vectors
/// at a to tangent vectors at b and a itself to -b.
Matrix transport_matrix(const Vector& a, const Vector& b);

/// Rotation Q with Q'a = b whose transpose agrees with transport_matrix
/// on the tangent space of a.
Matrix amaral_rotation(const Vector& a, const Vector& b);

/// Orthonormal basis (columns) spanning the seed vectors in order,
/// completed with canonical axes to a full basis. Modified Gram-Schmidt
/// with one re-orthogonalization pass; rank-deficient seeds rejected.
Matrix gram_schmidt(const std::vector<Vector>& seed);

/// Cayley transform (I - S)(I + S)^{-1} of a skew-symmetric matrix.
Matrix cayley(const Matrix& skew);

/// Inverse Cayley transform; rejects rotations with a -1 eigenvalue.
Matrix inverse_cayley(const Matrix& rot);

/// Householder reflection I - 2vv'/|v|^2.
Matrix householder(const Vector& v);

/// QR-based random rotation, det +1; used by simulations and tests.
Matrix random_rotation(Eigen::Index p, std::uint64_t seed);

}  // namespace sphreg
