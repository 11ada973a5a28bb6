#include "sphreg/optim.hpp"

#include <cmath>
#include <deque>
#include <limits>

namespace sphreg {

namespace {

constexpr double kWolfeC1 = 1e-4;
constexpr double kWolfeC2 = 0.9;

struct Probe {
  double alpha;
  double f;
  double slope;
  bool finite;
};

// Strong-Wolfe line search (bracket + zoom with bisection safeguards).
// Returns the accepted step; x/f/g are updated in place. Returns false
// when no acceptable step was found.
bool line_search(const ObjectiveFn& fg, Vector& x, double& f, Vector& g,
                 const Vector& dir, int max_evals, int* evals) {
  const double slope0 = g.dot(dir);
  if (!(slope0 < 0.0)) return false;
  const Vector x0 = x;
  const double f0 = f;

  Vector gt(x.size());
  auto probe = [&](double alpha) {
    Vector xt = x0 + alpha * dir;
    double ft = fg(xt, gt);
    ++*evals;
    bool finite = std::isfinite(ft);
    return Probe{alpha, ft, finite ? gt.dot(dir) : 0.0, finite};
  };

  auto accept = [&](const Probe& p) {
    x = x0 + p.alpha * dir;
    f = p.f;
    g = gt;
    // gt currently holds the gradient of the *last* probe; re-evaluate if needed
  };

  Probe lo{0.0, f0, slope0, true};
  Probe cur = probe(1.0);
  int used = 1;
  Probe hi{0.0, 0.0, 0.0, false};
  bool bracketed = false;

  // Expansion phase
  while (used < max_evals) {
    if (!cur.finite || cur.f > f0 + kWolfeC1 * cur.alpha * slope0 ||
        (used > 1 && cur.f >= lo.f)) {
      hi = cur;
      bracketed = true;
      break;
    }
    if (std::abs(cur.slope) <= -kWolfeC2 * slope0) {
      accept(cur);
      return true;
    }
    if (cur.slope >= 0.0) {
      hi = lo;
      lo = cur;
      bracketed = true;
      break;
    }
    lo = cur;
    cur = probe(cur.alpha * 2.5);
    ++used;
  }
  if (!bracketed) {
    if (cur.finite && cur.f < f0) {
      accept(cur);
      return true;
    }
    return false;
  }

  // Zoom phase
  Probe best = lo;
  for (; used < max_evals; ++used) {
    double alpha;
    if (hi.finite && lo.finite) {
      // quadratic interpolation through lo's value/slope and hi's value
      double d = hi.alpha - lo.alpha;
      double denom = hi.f - lo.f - lo.slope * d;
      alpha = (std::abs(denom) > 1e-300)
                  ? lo.alpha - 0.5 * lo.slope * d * d / denom
                  : 0.5 * (lo.alpha + hi.alpha);
      double a0 = std::min(lo.alpha, hi.alpha), a1 = std::max(lo.alpha, hi.alpha);
      double margin = 0.1 * (a1 - a0);
      if (!(alpha > a0 + margin && alpha < a1 - margin)) alpha = 0.5 * (a0 + a1);
    } else {
      alpha = 0.5 * (lo.alpha + hi.alpha);
    }
    if (std::abs(hi.alpha - lo.alpha) < 1e-16 * std::max(1.0, lo.alpha)) break;

    Probe mid = probe(alpha);
    if (!mid.finite || mid.f > f0 + kWolfeC1 * alpha * slope0 || mid.f >= lo.f) {
      hi = mid;
      continue;
    }
    if (mid.finite && mid.f < best.f) best = mid;
    if (std::abs(mid.slope) <= -kWolfeC2 * slope0) {
      accept(mid);
      return true;
    }
    if (mid.slope * (hi.alpha - lo.alpha) >= 0.0) hi = lo;
    lo = mid;
  }

  if (best.alpha > 0.0 && best.f < f0) {
    // Wolfe curvature not achieved; take the best decrease found.
    Probe re = probe(best.alpha);
    if (re.finite && re.f < f0) {
      accept(re);
      return true;
    }
  }
  return false;
}

}  // namespace

LbfgsResult lbfgs_minimize(const ObjectiveFn& fg, Vector x0, const LbfgsOptions& opt) {
  LbfgsResult res;
  const Eigen::Index n = x0.size();
  Vector x = std::move(x0);
  Vector g(n);
  double f = fg(x, g);
  res.evaluations = 1;
  if (!std::isfinite(f)) throw ValidationError("lbfgs_minimize: objective is not finite at x0");

  std::deque<Vector> s_hist, y_hist;
  std::deque<double> rho_hist;
  int stall_count = 0;

  for (int it = 0; it < opt.max_iterations; ++it) {
    res.iterations = it;
    double gnorm = g.cwiseAbs().maxCoeff();
    if (gnorm <= opt.grad_tol) {
      res.converged = true;
      break;
    }

    // two-loop recursion
    Vector q = g;
    std::vector<double> alpha(s_hist.size());
    for (int i = static_cast<int>(s_hist.size()) - 1; i >= 0; --i) {
      alpha[i] = rho_hist[i] * s_hist[i].dot(q);
      q -= alpha[i] * y_hist[i];
    }
    if (!s_hist.empty()) {
      const Vector& s = s_hist.back();
      const Vector& y = y_hist.back();
      q *= s.dot(y) / y.dot(y);
    }
    for (std::size_t i = 0; i < s_hist.size(); ++i) {
      double beta = rho_hist[i] * y_hist[i].dot(q);
      q += (alpha[i] - beta) * s_hist[i];
    }
    Vector dir = -q;
    bool steepest = false;
    if (!(g.dot(dir) < 0.0)) {
      dir = -g;
      steepest = true;
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
    }

    Vector x_prev = x, g_prev = g;
    double f_prev = f;
    int evals = 0;
    bool ok = line_search(fg, x, f, g, dir, opt.max_line_search, &evals);
    res.evaluations += evals;
    if (!ok) {
      if (!steepest) {
        x = x_prev;
        g = g_prev;
        f = f_prev;
        s_hist.clear();
        y_hist.clear();
        rho_hist.clear();
        Vector sd = -g;
        evals = 0;
        ok = line_search(fg, x, f, g, sd, opt.max_line_search, &evals);
        res.evaluations += evals;
      }
      if (!ok) break;
    }

    Vector s = x - x_prev;
    Vector y = g - g_prev;
    double sy = s.dot(y);
    if (sy > 1e-12 * s.norm() * y.norm()) {
      s_hist.push_back(std::move(s));
      y_hist.push_back(std::move(y));
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > opt.memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }

    if (std::abs(f_prev - f) <= opt.rel_obj_tol * (std::abs(f_prev) + 1e-12)) {
      if (++stall_count >= 3) {
        res.converged = g.cwiseAbs().maxCoeff() <= 10.0 * opt.grad_tol;
        break;
      }
    } else {
      stall_count = 0;
    }
  }

  res.x = std::move(x);
  res.f = f;
  res.grad_norm = g.cwiseAbs().maxCoeff();
  if (res.grad_norm <= opt.grad_tol) res.converged = true;
  return res;
}

AugLagResult augmented_lagrangian(const ObjectiveFn& fg, const ConstraintSet& cons,
                                  Vector x0, const AugLagOptions& opt) {
  AugLagResult res;
  if (cons.count == 0) {
    LbfgsResult inner = lbfgs_minimize(fg, std::move(x0), opt.inner);
    res.x = std::move(inner.x);
    res.f = inner.f;
    res.grad_norm = inner.grad_norm;
    res.iterations = inner.iterations;
    res.converged = inner.converged;
    res.constraint_inf = 0.0;
    res.multipliers = Vector();
    return res;
  }

  Vector lambda = Vector::Zero(cons.count);
  double rho = opt.rho_init;
  Vector x = std::move(x0);
  double prev_cnorm = std::numeric_limits<double>::infinity();

  for (int outer = 0; outer < opt.max_outer; ++outer) {
    auto inner_fg = [&](const Vector& xx, Vector& grad) {
      double f = fg(xx, grad);
      if (!std::isfinite(f)) return f;
      Vector c = cons.eval(xx);
      Vector w = rho * c - lambda;
      grad += cons.jtv(xx, w);
      return f - lambda.dot(c) + 0.5 * rho * c.squaredNorm();
    };
    // progressively tightened inner tolerance (LANCELOT-style schedule)
    LbfgsOptions inner_opt = opt.inner;
    inner_opt.grad_tol =
        std::max(opt.inner.grad_tol, 1e-2 * std::pow(0.2, outer));
    LbfgsResult inner = lbfgs_minimize(inner_fg, x, inner_opt);
    x = std::move(inner.x);
    res.iterations += inner.iterations + 1;
    res.grad_norm = inner.grad_norm;

    Vector c = cons.eval(x);
    double cnorm = c.size() ? c.cwiseAbs().maxCoeff() : 0.0;
    res.constraint_inf = cnorm;
    bool tol_reached = inner_opt.grad_tol <= opt.inner.grad_tol * 1.0000001;
    if (cnorm <= opt.constraint_tol && inner.converged && tol_reached) {
      res.converged = true;
      break;
    }
    if (cnorm <= std::max(opt.constraint_tol, 0.25 * prev_cnorm)) {
      lambda -= rho * c;
      prev_cnorm = cnorm;
    } else {
      rho *= 2.0;
      if (rho > opt.rho_max) break;
    }
  }

  Vector gdummy(x.size());
  res.f = fg(x, gdummy);
  res.x = std::move(x);
  res.multipliers = std::move(lambda);
  return res;
}

}  // namespace sphreg
