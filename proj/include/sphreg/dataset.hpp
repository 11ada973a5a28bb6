#pragma once

#include "sphreg/link.hpp"

namespace sphreg {

/// Regression data: one row per case. Optional covariate blocks are
/// empty matrices; weights default to one when the vector is empty.
struct Dataset {
  Matrix responses;  // n x p, unit rows
  Matrix sph_covs;   // n x qs, unit rows (empty when absent)
  Matrix euc_covs;   // n x qe (empty when absent)
  Vector weights;    // empty or n nonnegative entries

  int n() const { return static_cast<int>(responses.rows()); }
  int p() const { return static_cast<int>(responses.cols()); }
  int qs() const { return static_cast<int>(sph_covs.cols()); }
  int qe() const { return static_cast<int>(euc_covs.cols()); }
  LinkDims dims() const { return LinkDims{p(), qs(), qe()}; }
  double weight(int i) const { return weights.size() ? weights[i] : 1.0; }
  double weight_total() const { return weights.size() ? weights.sum() : n(); }
  CovariateCase covariate_case(int i) const;

  void validate() const;
  Dataset without_case(int i) const;
};

/// Invertible preliminary maps applied before fitting, kept so fitted
/// parameters and predictions can be expressed in original coordinates.
struct TransformRecord {
  bool response_rotated = false;
  bool sph_rotated = false;
  bool euc_transformed = false;
  Matrix response_rot;  // p x p; original = response_rot * transformed
  Matrix sph_rot;       // qs x qs
  Vector euc_center;    // qe
  Matrix euc_rot;       // qe x qe; transformed = euc_rot' (x - center)

  static TransformRecord identity(int p, int qs, int qe);
  bool is_identity() const;

  Dataset apply(const Dataset& data) const;
  Dataset invert(const Dataset& data) const;
  CovariateCase apply_case(const CovariateCase& x) const;
  /// Maps a predicted mean back to original response coordinates.
  Vector response_to_original(const Vector& mu) const;
};

/// Rotates responses and spherical covariates so their sample mean
/// directions align with e1 and centers/PCA-rotates the non-constant
/// Euclidean covariates. Degenerate blocks (zero resultant) are left
/// untouched with the corresponding flag cleared.
std::pair<Dataset, TransformRecord> preliminary_transform(const Dataset& data);

}  // namespace sphreg
