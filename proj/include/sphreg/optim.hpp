#pragma once

#include <functional>

#include "sphreg/geometry.hpp"

namespace sphreg {

/// Objective callback: returns f(x) and fills grad (same size as x).
/// May return +inf to signal an inadmissible point; the line search
/// backtracks away from such points.
using ObjectiveFn = std::function<double(const Vector& x, Vector& grad)>;

struct LbfgsOptions {
  int max_iterations = 500;
  double grad_tol = 1e-8;     // infinity norm of the gradient
  double rel_obj_tol = 1e-12; // relative objective change
  int memory = 10;
  int max_line_search = 50;
};

struct LbfgsResult {
  Vector x;
  double f = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
};

LbfgsResult lbfgs_minimize(const ObjectiveFn& fg, Vector x0, const LbfgsOptions& opt);

/// Equality constraints c(x) = 0 given by their values and the action of
/// the transposed Jacobian J(x)'w.
struct ConstraintSet {
  Eigen::Index count = 0;
  std::function<Vector(const Vector& x)> eval;
  std::function<Vector(const Vector& x, const Vector& w)> jtv;
};

struct AugLagOptions {
  LbfgsOptions inner;
  int max_outer = 40;
  double constraint_tol = 1e-9;
  double rho_init = 10.0;
  double rho_max = 1e13;
};

struct AugLagResult {
  Vector x;
  double f = 0.0;
  double constraint_inf = 0.0;
  double grad_norm = 0.0;
  int iterations = 0;
  bool converged = false;
  Vector multipliers;
};

/// Minimizes f subject to c(x) = 0 with an augmented Lagrangian;
/// the penalty weight doubles whenever the constraint residual stalls.
AugLagResult augmented_lagrangian(const ObjectiveFn& fg, const ConstraintSet& cons,
                                  Vector x0, const AugLagOptions& opt);

}  // namespace sphreg
