#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "sphreg/dataset.hpp"
#include "sphreg/distributions.hpp"
#include "sphreg/link.hpp"
#include "sphreg/optim.hpp"

namespace sphreg {

enum class ErrorModel { kVmf, kSvmf };
enum class Gamma01Mode { kEstimated, kTiedToB01, kTiedToMean };

struct FitConfig {
  ErrorModel model = ErrorModel::kSvmf;
  double a1_fixed = 1.0;
  Gamma01Mode gamma01 = Gamma01Mode::kEstimated;
  double obj_tol = 1e-12;         // relative objective change
  double grad_tol = 2e-6;         // gradient infinity norm (per-case scale)
  double constraint_tol = 1e-8;
  int max_iterations = 2000;
  int multistart = 1;
  std::uint64_t seed = 0;
  double kappa_ceiling = 1e8;
  int threads = 0;                // 0 = hardware concurrency
  // Internal-coordinate Gaussian perturbation applied to the start point;
  // used by multistart_fit for the randomized restarts.
  double start_sigma = 0.0;
  std::uint64_t start_seed = 0;
  // Warm start: reuse this fit's preprocessing and parameters as the
  // initial point (LOO folds and bootstrap refits).
  std::shared_ptr<const struct FitResult> warm;
};

struct MultistartEntry {
  int start_id = 0;
  double objective = 0.0;  // attained log-likelihood (NaN on failure)
  bool converged = false;
};

struct FitResult {
  LinkParams link;
  ReparamLink reparam;
  SvMFParams error;      // unit scales for the vMF model
  TransportBase base;
  double loglik = 0.0;
  double aic = 0.0;
  int dof = 0;
  bool converged = false;
  int iterations = 0;
  double grad_norm = 0.0;
  double constraint_residual = 0.0;
  bool kappa_capped = false;
  ErrorModel model = ErrorModel::kVmf;
  Gamma01Mode gamma01_mode = Gamma01Mode::kEstimated;
  std::vector<MultistartEntry> multistart;
  std::vector<double> stage_objectives;  // appended per pipeline stage
  TransformRecord transform;             // identity unless set by the caller

  Vector predict(const CovariateCase& x) const;  // in fitted coordinates
};

/// Default initial mean-link parameters: B0 = I, Bs = Be = 0.9 I,
/// axis matrices padded identity blocks.
LinkParams default_init(const LinkDims& dims);

/// Free-parameter count of the model (manifold dimensions of all blocks).
int count_dof(const LinkDims& dims, ErrorModel model, bool gamma01_estimated);

/// Concentration MLE given fitted mean directions: solves
/// A_p(kappa) = mean resultant of y'mu by a bracketing scalar solver.
double fit_kappa(const Dataset& data, const Matrix& mu_rows, int p,
                 double ceiling = 1e8, bool* capped = nullptr);

struct MomentAxesResult {
  Matrix axes;            // p x (p-1), descending residual spread
  Vector eigenvalues;     // p-1, descending
  double gamma_eigenvalue = 0.0;
  Vector scales;          // p-1 preliminary a_2..a_p (product one)
  std::vector<int> skipped;  // antipodal cases
};

/// Moment estimate of orientation axes and preliminary scales from the
/// spectral decomposition of the rotated-residual second moment.
MomentAxesResult moment_axes(const Dataset& data, const Matrix& mu_rows,
                             const Vector& gamma01);

FitResult fit_vmf(const Dataset& data, const FitConfig& config);
FitResult fit_svmf(const Dataset& data, const FitConfig& config);
FitResult fit_model(const Dataset& data, const FitConfig& config);

/// Best-of-n fit from the default start plus randomized perturbations.
FitResult multistart_fit(const Dataset& data, const FitConfig& config, int n_starts,
                         std::uint64_t seed);

/// Joint log-likelihood objective over unconstrained internal coordinates
/// [b01, rs1, vec(M), log kappa, free log scales, gamma01, skew]; used by
/// the fits and exposed for gradient verification.
class SvmfJointObjective {
 public:
  SvmfJointObjective(const Dataset& data, const FitConfig& config, Matrix base_axes_init,
                     Vector gamma01_init);

  Eigen::Index dim() const;
  int skew_count() const;

  /// Packed coordinates from parameter values (S = 0 at the start).
  Vector pack(const ReparamLink& rp, double kappa, const Vector& scales,
              const Vector& gamma01) const;

  double loglik(const Vector& x) const;
  double loglik_and_gradient(const Vector& x, Vector& grad) const;

  /// Negated mean log-likelihood with gradient, for minimization.
  double eval(const Vector& x, Vector& grad) const;

  ConstraintSet constraints() const;

  struct Unpacked {
    ReparamLink reparam;
    double kappa = 0.0;
    Vector scales;      // p entries
    TransportBase base;
  };
  Unpacked unpack(const Vector& x) const;

 private:
  struct Layout {
    Eigen::Index b, r, m, kappa, xi, c, s, total;
  };
  Layout layout_;
  const Dataset& data_;
  FitConfig config_;
  Matrix base_axes_init_;
  Vector gamma01_init_;
  double weight_total_;

  friend class VmfLinkObjective;
  double eval_impl(const Vector& x, Vector* grad) const;
};

/// Objective sum_i w_i y_i' mu(x_i) over [b01, rs1, vec(M)].
class VmfLinkObjective {
 public:
  explicit VmfLinkObjective(const Dataset& data);

  Eigen::Index dim() const;
  Vector pack(const ReparamLink& rp) const;
  double mean_cosine(const Vector& x) const;
  double eval(const Vector& x, Vector& grad) const;  // negated mean cosine
  ConstraintSet constraints() const;
  ReparamLink unpack(const Vector& x) const;

 private:
  const Dataset& data_;
  double weight_total_;
};

}  // namespace sphreg
