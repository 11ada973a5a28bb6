#include "sphreg/estimation.hpp"

#include <algorithm>
#include <cmath>
#include <future>
#include <limits>
#include <thread>

namespace sphreg {

namespace {

constexpr double kFitPoleEps = 1e-8;
constexpr double kLogParamBound = 50.0;
const double kInf = std::numeric_limits<double>::infinity();

// Shared state of the projected-link coordinates: raw b01 / rs1 plus the
// mean-link matrix M, with Omega = (I - bh bh')M(I - rt rt').
struct LinkState {
  Vector b_raw, bh;
  double b_norm = 1.0;
  Vector r_raw, rh;  // empty when no spherical block
  double r_norm = 1.0;
  Matrix m;      // p x q
  Matrix omega;  // p x q
};

LinkState make_link_state(const Vector& b, const Vector& r, const Matrix& m) {
  LinkState st;
  st.b_raw = b;
  st.b_norm = b.norm();
  if (st.b_norm < 1e-8) throw ValidationError("link coordinates: b01 collapsed to zero");
  st.bh = b / st.b_norm;
  st.r_raw = r;
  if (r.size()) {
    st.r_norm = r.norm();
    if (st.r_norm < 1e-8) throw ValidationError("link coordinates: rs1 collapsed to zero");
    st.rh = r / st.r_norm;
  }
  st.m = m;
  st.omega = proj_constraint(m, st.bh, st.rh);
  return st;
}

// Chain from a cotangent G on Omega (plus direct cotangents on the
// normalized bh / rh) to gradients w.r.t. the raw coordinates.
void link_chain(const LinkState& st, const Matrix& g_omega, Vector g_bh, Vector g_rh,
                Vector& g_b, Vector& g_r, Matrix& g_m) {
  const Eigen::Index qs = st.rh.size();
  Matrix w = st.m;  // M * P_r
  if (qs) w.leftCols(qs) -= (st.m.leftCols(qs) * st.rh) * st.rh.transpose();
  Matrix v = st.m - st.bh * (st.bh.transpose() * st.m);  // P_b * M

  g_m = g_omega - st.bh * (st.bh.transpose() * g_omega);
  if (qs) g_m.leftCols(qs) -= (g_m.leftCols(qs) * st.rh) * st.rh.transpose();

  g_bh.noalias() += -(g_omega * (w.transpose() * st.bh) + w * (g_omega.transpose() * st.bh));
  if (qs) {
    Vector gr_full = -(v.transpose() * (g_omega.leftCols(qs) * st.rh) +
                       g_omega.transpose() * (v.leftCols(qs) * st.rh));
    g_rh.noalias() += gr_full.head(qs);
  }

  g_b = (g_bh - st.bh.dot(g_bh) * st.bh) / st.b_norm;
  if (qs) g_r = (g_rh - st.rh.dot(g_rh) * st.rh) / st.r_norm;
}

// Per-case link evaluation mu = ((1-s) bh + 2 u)/(1+s), u = Omega z.
struct CaseLink {
  Vector z;   // q
  Vector u;   // p
  double s = 0.0;
  Vector mu;  // p
  double denom = 1.0;
};

bool case_link_forward(const LinkState& st, const Vector& xs, const Vector& xe,
                       CaseLink& cl) {
  const Eigen::Index qs = st.rh.size();
  const Eigen::Index qe = st.omega.cols() - qs;
  cl.z.resize(st.omega.cols());
  if (qs) {
    cl.denom = 1.0 + st.rh.dot(xs);
    if (cl.denom <= kFitPoleEps) return false;
    cl.z.head(qs) = xs / cl.denom;
  }
  if (qe) cl.z.tail(qe) = xe;
  cl.u.noalias() = st.omega * cl.z;
  cl.s = cl.u.squaredNorm();
  cl.mu = ((1.0 - cl.s) * st.bh + 2.0 * cl.u) / (1.0 + cl.s);
  return true;
}

// Backward through one case: cotangent m on mu accumulates into the
// Omega cotangent, bh cotangent, and rh cotangent.
void case_link_backward(const LinkState& st, const Vector& xs, const CaseLink& cl,
                        const Vector& m, Matrix& g_omega, Vector& g_bh, Vector& g_rh) {
  const Eigen::Index qs = st.rh.size();
  double mdot = m.dot(st.bh + cl.mu);
  Vector gu = (2.0 / (1.0 + cl.s)) * (m - mdot * cl.u);
  g_bh.noalias() += (1.0 - cl.s) / (1.0 + cl.s) * m;
  g_omega.noalias() += gu * cl.z.transpose();
  if (qs) {
    Vector a = st.omega.leftCols(qs).transpose() * gu;
    g_rh.noalias() += -(a.dot(xs) / (cl.denom * cl.denom)) * xs;
  }
}

// Commutator equality constraints on Omega (strict upper triangle of
// [Omega_s Omega_s', Omega_e Omega_e']).
Vector commutator_values(const Matrix& omega, Eigen::Index qs) {
  const Eigen::Index p = omega.rows();
  Matrix os = omega.leftCols(qs);
  Matrix oe = omega.rightCols(omega.cols() - qs);
  Matrix as = os * os.transpose();
  Matrix ae = oe * oe.transpose();
  Matrix k = as * ae - ae * as;
  Vector out(p * (p - 1) / 2);
  Eigen::Index idx = 0;
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = i + 1; j < p; ++j) out[idx++] = k(i, j);
  return out;
}

Matrix commutator_omega_cotangent(const Matrix& omega, Eigen::Index qs, const Vector& w) {
  const Eigen::Index p = omega.rows();
  Matrix g = Matrix::Zero(p, p);
  Eigen::Index idx = 0;
  for (Eigen::Index i = 0; i < p; ++i)
    for (Eigen::Index j = i + 1; j < p; ++j) g(i, j) = w[idx++];
  Matrix os = omega.leftCols(qs);
  Matrix oe = omega.rightCols(omega.cols() - qs);
  Matrix as = os * os.transpose();
  Matrix ae = oe * oe.transpose();
  Matrix gas = g * ae - ae * g;
  Matrix gae = as * g - g * as;
  Matrix out(p, omega.cols());
  out.leftCols(qs) = (gas + gas.transpose()) * os;
  out.rightCols(omega.cols() - qs) = (gae + gae.transpose()) * oe;
  return out;
}

double solve_kappa_resultant(int p, double rbar, double ceiling, bool* capped) {
  if (capped) *capped = false;
  if (rbar <= 1e-12) return 0.0;
  if (rbar >= 1.0 - 1e-12) {
    if (capped) *capped = true;
    return ceiling;
  }
  double lo = 0.0, hi = 1.0;
  while (vmf_mean_resultant(p, hi) < rbar) {
    hi *= 2.0;
    if (hi >= ceiling) {
      if (capped) *capped = true;
      return ceiling;
    }
  }
  for (int it = 0; it < 200; ++it) {
    double mid = 0.5 * (lo + hi);
    if (vmf_mean_resultant(p, mid) < rbar)
      lo = mid;
    else
      hi = mid;
    if (hi - lo <= 1e-12 * (1.0 + hi)) break;
  }
  return 0.5 * (lo + hi);
}

Matrix mu_rows_from(const ReparamLink& rp, const Dataset& data) {
  Matrix mu(data.n(), data.p());
  for (int i = 0; i < data.n(); ++i)
    mu.row(i) = link_eval_reparam(rp, data.covariate_case(i)).transpose();
  return mu;
}

double vmf_loglik_value(const Dataset& data, const Matrix& mu_rows, double kappa) {
  double dotsum = 0.0;
  for (int i = 0; i < data.n(); ++i)
    dotsum += data.weight(i) * data.responses.row(i).dot(mu_rows.row(i));
  return kappa * dotsum -
         data.weight_total() * vmf_log_norm_const(data.p(), kappa);
}

void orthonormalize_columns(Matrix& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    for (int pass = 0; pass < 2; ++pass)
      for (Eigen::Index k = 0; k < j; ++k) m.col(j) -= m.col(k).dot(m.col(j)) * m.col(k);
    double n = m.col(j).norm();
    if (n < 1e-12) throw ConvergenceError("orthonormalize: collapsed column");
    m.col(j) /= n;
  }
}

LinkParams recover_link(const ReparamLink& rp) { return from_reparam(rp).params; }

}  // namespace

LinkParams default_init(const LinkDims& dims) {
  dims.validate();
  LinkParams out;
  out.dims = dims;
  out.b0 = Matrix::Identity(dims.p, dims.p);
  if (dims.has_sph()) {
    out.bs = Vector::Constant(dims.p - 1, 0.9);
    out.rs = Matrix::Identity(dims.qs, dims.p);
  }
  if (dims.has_euc()) {
    out.be = Vector::Constant(dims.p - 1, 0.9);
    out.re = Matrix::Identity(dims.qe, dims.p - 1);
  }
  out.validate();
  return out;
}

int count_dof(const LinkDims& dims, ErrorModel model, bool gamma01_estimated) {
  dims.validate();
  const int p = dims.p;
  int dof = p * (p - 1) / 2;  // B0
  if (dims.has_sph()) {
    dof += (p - 1);                          // Bs
    dof += dims.qs * p - p * (p + 1) / 2;    // Rs Stiefel
  }
  if (dims.has_euc()) {
    dof += (p - 1);                               // Be
    dof += dims.qe * (p - 1) - (p - 1) * p / 2;   // Re Stiefel
  }
  dof += 1;  // kappa
  if (model == ErrorModel::kSvmf) {
    dof += p - 2;                    // free scales
    dof += (p - 1) * (p - 2) / 2;    // base-axes rotation
    if (gamma01_estimated) dof += p - 1;
  }
  return dof;
}

double fit_kappa(const Dataset& data, const Matrix& mu_rows, int p, double ceiling,
                 bool* capped) {
  if (capped) *capped = false;
  double dotsum = 0.0;
  for (int i = 0; i < data.n(); ++i)
    dotsum += data.weight(i) * data.responses.row(i).dot(mu_rows.row(i));
  return solve_kappa_resultant(p, dotsum / data.weight_total(), ceiling, capped);
}

MomentAxesResult moment_axes(const Dataset& data, const Matrix& mu_rows,
                             const Vector& gamma01) {
  const int p = data.p();
  MomentAxesResult out;
  Matrix second = Matrix::Zero(p, p);
  double wsum = 0.0;
  for (int i = 0; i < data.n(); ++i) {
    Vector mu = mu_rows.row(i).transpose();
    if (1.0 + mu.dot(gamma01) <= kAntipodalTol) {
      out.skipped.push_back(i);
      continue;
    }
    Vector v = rotated_residual(data.responses.row(i).transpose(), mu, gamma01);
    second.noalias() += data.weight(i) * v * v.transpose();
    wsum += data.weight(i);
  }
  if (wsum <= 0.0) throw ValidationError("moment_axes: no usable cases");
  second /= wsum;

  Eigen::SelfAdjointEigenSolver<Matrix> eig(second);
  // ascending from Eigen; the smallest eigenvalue belongs to gamma01
  out.gamma_eigenvalue = eig.eigenvalues()[0];
  out.axes.resize(p, p - 1);
  out.eigenvalues.resize(p - 1);
  for (int j = 0; j < p - 1; ++j) {
    Vector v = eig.eigenvectors().col(p - 1 - j);
    // deterministic sign
    Eigen::Index imax;
    v.cwiseAbs().maxCoeff(&imax);
    if (v[imax] < 0) v = -v;
    // remove any numerical leakage into the gamma01 direction
    v -= gamma01.dot(v) * gamma01;
    v /= v.norm();
    out.axes.col(j) = v;
    out.eigenvalues[j] = eig.eigenvalues()[p - 1 - j];
  }
  orthonormalize_columns(out.axes);

  Vector sd = out.eigenvalues.cwiseMax(1e-12).cwiseSqrt();
  double log_geo = sd.array().log().mean();
  out.scales = (sd.array().log() - log_geo).exp();
  return out;
}

// ---------------------------------------------------------------------------
// VmfLinkObjective

VmfLinkObjective::VmfLinkObjective(const Dataset& data)
    : data_(data), weight_total_(data.weight_total()) {}

Eigen::Index VmfLinkObjective::dim() const {
  const LinkDims d = data_.dims();
  return d.p + d.qs + static_cast<Eigen::Index>(d.p) * d.q();
}

Vector VmfLinkObjective::pack(const ReparamLink& rp) const {
  const LinkDims d = data_.dims();
  Vector x(dim());
  x.head(d.p) = rp.b01;
  if (d.has_sph()) x.segment(d.p, d.qs) = rp.rs1;
  Eigen::Index off = d.p + d.qs;
  for (Eigen::Index j = 0; j < rp.omega.cols(); ++j)
    x.segment(off + j * d.p, d.p) = rp.omega.col(j);
  return x;
}

ReparamLink VmfLinkObjective::unpack(const Vector& x) const {
  const LinkDims d = data_.dims();
  Vector r = d.has_sph() ? Vector(x.segment(d.p, d.qs)) : Vector();
  Matrix m(d.p, d.q());
  Eigen::Index off = d.p + d.qs;
  for (Eigen::Index j = 0; j < m.cols(); ++j) m.col(j) = x.segment(off + j * d.p, d.p);
  LinkState st = make_link_state(x.head(d.p), r, m);
  ReparamLink rp;
  rp.dims = d;
  rp.b01 = st.bh;
  rp.rs1 = st.rh;
  rp.omega = st.omega;
  return rp;
}

double VmfLinkObjective::mean_cosine(const Vector& x) const {
  Vector g(x.size());
  return -eval(x, g);
}

double VmfLinkObjective::eval(const Vector& x, Vector& grad) const {
  const LinkDims d = data_.dims();
  grad.setZero(x.size());
  Vector r = d.has_sph() ? Vector(x.segment(d.p, d.qs)) : Vector();
  Matrix m(d.p, d.q());
  Eigen::Index off = d.p + d.qs;
  for (Eigen::Index j = 0; j < m.cols(); ++j) m.col(j) = x.segment(off + j * d.p, d.p);
  LinkState st = make_link_state(x.head(d.p), r, m);

  Matrix g_omega = Matrix::Zero(d.p, d.q());
  Vector g_bh = Vector::Zero(d.p);
  Vector g_rh = Vector::Zero(d.qs);
  double total = 0.0;
  CaseLink cl;
  for (int i = 0; i < data_.n(); ++i) {
    Vector xs = d.has_sph() ? Vector(data_.sph_covs.row(i).transpose()) : Vector();
    Vector xe = d.has_euc() ? Vector(data_.euc_covs.row(i).transpose()) : Vector();
    if (!case_link_forward(st, xs, xe, cl)) return kInf;
    double coef = -data_.weight(i) / weight_total_;
    Vector y = data_.responses.row(i).transpose();
    total += coef * y.dot(cl.mu);
    case_link_backward(st, xs, cl, Vector(coef * y), g_omega, g_bh, g_rh);
  }

  Vector g_b, g_r;
  Matrix g_m;
  link_chain(st, g_omega, g_bh, g_rh, g_b, g_r, g_m);
  grad.head(d.p) = g_b;
  if (d.has_sph()) grad.segment(d.p, d.qs) = g_r;
  for (Eigen::Index j = 0; j < g_m.cols(); ++j)
    grad.segment(off + j * d.p, d.p) = g_m.col(j);
  return total;
}

ConstraintSet VmfLinkObjective::constraints() const {
  const LinkDims d = data_.dims();
  const bool both = d.has_sph() && d.has_euc();
  ConstraintSet cs;
  Eigen::Index n_comm = both ? d.p * (d.p - 1) / 2 : 0;
  cs.count = 1 + (d.has_sph() ? 1 : 0) + n_comm;

  auto unpack_state = [this, d](const Vector& x) {
    Vector r = d.has_sph() ? Vector(x.segment(d.p, d.qs)) : Vector();
    Matrix m(d.p, d.q());
    Eigen::Index off = d.p + d.qs;
    for (Eigen::Index j = 0; j < m.cols(); ++j) m.col(j) = x.segment(off + j * d.p, d.p);
    return make_link_state(x.head(d.p), r, m);
  };

  cs.eval = [d, both, unpack_state, n = cs.count](const Vector& x) {
    LinkState st = unpack_state(x);
    Vector c(n);
    Eigen::Index idx = 0;
    c[idx++] = st.b_raw.squaredNorm() - 1.0;
    if (d.has_sph()) c[idx++] = st.r_raw.squaredNorm() - 1.0;
    if (both) c.tail(n - idx) = commutator_values(st.omega, d.qs);
    return c;
  };
  cs.jtv = [d, both, unpack_state](const Vector& x, const Vector& w) {
    LinkState st = unpack_state(x);
    Vector out = Vector::Zero(x.size());
    Eigen::Index idx = 0;
    out.head(d.p) = 2.0 * w[idx++] * st.b_raw;
    if (d.has_sph()) out.segment(d.p, d.qs) = 2.0 * w[idx++] * st.r_raw;
    if (both) {
      Matrix g_omega = commutator_omega_cotangent(st.omega, d.qs, w.tail(w.size() - idx));
      Vector g_b, g_r;
      Matrix g_m;
      link_chain(st, g_omega, Vector::Zero(d.p), Vector::Zero(d.qs), g_b, g_r, g_m);
      out.head(d.p) += g_b;
      if (d.has_sph()) out.segment(d.p, d.qs) += g_r;
      Eigen::Index off = d.p + d.qs;
      for (Eigen::Index j = 0; j < g_m.cols(); ++j)
        out.segment(off + j * d.p, d.p) += g_m.col(j);
    }
    return out;
  };
  return cs;
}

// ---------------------------------------------------------------------------
// SvmfJointObjective

SvmfJointObjective::SvmfJointObjective(const Dataset& data, const FitConfig& config,
                                       Matrix base_axes_init, Vector gamma01_init)
    : data_(data),
      config_(config),
      base_axes_init_(std::move(base_axes_init)),
      gamma01_init_(std::move(gamma01_init)),
      weight_total_(data.weight_total()) {
  const LinkDims d = data_.dims();
  const Eigen::Index p = d.p;
  layout_.b = 0;
  layout_.r = p;
  layout_.m = layout_.r + d.qs;
  layout_.kappa = layout_.m + p * d.q();
  layout_.xi = layout_.kappa + 1;
  layout_.c = layout_.xi + (p - 2);
  bool has_c = config_.gamma01 == Gamma01Mode::kEstimated;
  layout_.s = layout_.c + (has_c ? p : 0);
  layout_.total = layout_.s + skew_count();
  TransportBase check{gamma01_init_, base_axes_init_};
  check.validate(1e-8);
}

int SvmfJointObjective::skew_count() const {
  const int p = data_.p();
  return (p - 1) * (p - 2) / 2;
}

Eigen::Index SvmfJointObjective::dim() const { return layout_.total; }

Vector SvmfJointObjective::pack(const ReparamLink& rp, double kappa, const Vector& scales,
                                const Vector& gamma01) const {
  const LinkDims d = data_.dims();
  Vector x = Vector::Zero(layout_.total);
  x.segment(layout_.b, d.p) = rp.b01;
  if (d.has_sph()) x.segment(layout_.r, d.qs) = rp.rs1;
  for (Eigen::Index j = 0; j < rp.omega.cols(); ++j)
    x.segment(layout_.m + j * d.p, d.p) = rp.omega.col(j);
  x[layout_.kappa] = std::log(std::max(kappa, 1e-6));
  for (int k = 0; k < d.p - 2; ++k) x[layout_.xi + k] = std::log(scales[k + 1]);
  if (config_.gamma01 == Gamma01Mode::kEstimated) x.segment(layout_.c, d.p) = gamma01;
  return x;
}

SvmfJointObjective::Unpacked SvmfJointObjective::unpack(const Vector& x) const {
  const LinkDims d = data_.dims();
  const int p = d.p;
  Unpacked out;
  Vector r = d.has_sph() ? Vector(x.segment(layout_.r, d.qs)) : Vector();
  Matrix m(p, d.q());
  for (Eigen::Index j = 0; j < m.cols(); ++j) m.col(j) = x.segment(layout_.m + j * p, p);
  LinkState st = make_link_state(x.segment(layout_.b, p), r, m);
  out.reparam.dims = d;
  out.reparam.b01 = st.bh;
  out.reparam.rs1 = st.rh;
  out.reparam.omega = st.omega;
  out.kappa = std::exp(x[layout_.kappa]);
  out.scales = Vector::Ones(p);
  out.scales[0] = config_.a1_fixed;
  double xi_sum = 0.0;
  for (int k = 0; k < p - 2; ++k) {
    out.scales[k + 1] = std::exp(x[layout_.xi + k]);
    xi_sum += x[layout_.xi + k];
  }
  if (p >= 3) out.scales[p - 1] = std::exp(-xi_sum);

  Vector gamma_hat;
  if (config_.gamma01 == Gamma01Mode::kEstimated) {
    gamma_hat = x.segment(layout_.c, p).normalized();
  } else if (config_.gamma01 == Gamma01Mode::kTiedToB01) {
    gamma_hat = st.bh;
  } else {
    gamma_hat = gamma01_init_;
  }
  Matrix t = transport_matrix(gamma01_init_, gamma_hat);
  Matrix c_rot = skew_count() > 0
                     ? cayley(SkewMatrix(p - 1, x.segment(layout_.s, skew_count())).matrix())
                     : Matrix::Identity(p - 1, p - 1);
  out.base.gamma01 = gamma_hat;
  out.base.base_axes = t * base_axes_init_ * c_rot;
  orthonormalize_columns(out.base.base_axes);
  return out;
}

double SvmfJointObjective::loglik(const Vector& x) const {
  double v = eval_impl(x, nullptr);
  return -weight_total_ * v;
}

double SvmfJointObjective::loglik_and_gradient(const Vector& x, Vector& grad) const {
  double v = eval_impl(x, &grad);
  grad *= -weight_total_;
  return -weight_total_ * v;
}

double SvmfJointObjective::eval(const Vector& x, Vector& grad) const {
  return eval_impl(x, &grad);
}

double SvmfJointObjective::eval_impl(const Vector& x, Vector* grad) const {
  const LinkDims d = data_.dims();
  const int p = d.p;
  const Eigen::Index q = d.q();
  const bool has_c = config_.gamma01 == Gamma01Mode::kEstimated;
  const bool tied_b = config_.gamma01 == Gamma01Mode::kTiedToB01;
  if (grad) grad->setZero(layout_.total);

  double log_kappa = x[layout_.kappa];
  if (std::abs(log_kappa) > kLogParamBound) return kInf;
  double kappa = std::exp(log_kappa);

  Vector a = Vector::Ones(p);
  a[0] = config_.a1_fixed;
  double xi_sum = 0.0;
  for (int k = 0; k < p - 2; ++k) {
    double xi = x[layout_.xi + k];
    if (std::abs(xi) > kLogParamBound) return kInf;
    a[k + 1] = std::exp(xi);
    xi_sum += xi;
  }
  if (p >= 3) a[p - 1] = std::exp(-xi_sum);
  double log_det_a = a.array().log().sum();

  Vector r = d.has_sph() ? Vector(x.segment(layout_.r, d.qs)) : Vector();
  Matrix m(p, q);
  for (Eigen::Index j = 0; j < q; ++j) m.col(j) = x.segment(layout_.m + j * p, p);
  LinkState st = make_link_state(x.segment(layout_.b, p), r, m);

  // Base orientation
  Vector c_raw, gamma_hat;
  double c_norm = 1.0;
  if (has_c) {
    c_raw = x.segment(layout_.c, p);
    c_norm = c_raw.norm();
    if (c_norm < 1e-8) return kInf;
    gamma_hat = c_raw / c_norm;
  } else if (tied_b) {
    gamma_hat = st.bh;
  } else {
    gamma_hat = gamma01_init_;
  }
  double delta_t = 1.0 + gamma_hat.dot(gamma01_init_);
  if (delta_t <= kFitPoleEps) return kInf;
  Vector vt = gamma01_init_ + gamma_hat;
  Matrix t_mat = Matrix::Identity(p, p) - vt * vt.transpose() / delta_t;

  Matrix skew, c_rot, ips_inv_t;
  if (skew_count() > 0) {
    skew = SkewMatrix(p - 1, x.segment(layout_.s, skew_count())).matrix();
    Matrix ips = Matrix::Identity(p - 1, p - 1) + skew;
    c_rot = ips.partialPivLu().solve(Matrix::Identity(p - 1, p - 1) - skew);
    ips_inv_t = ips.transpose().partialPivLu().solve(Matrix::Identity(p - 1, p - 1));
  } else {
    c_rot = Matrix::Identity(p - 1, p - 1);
  }
  Matrix w_axes = base_axes_init_ * c_rot;  // p x (p-1)
  Matrix axes = t_mat * w_axes;

  const double log_cp = vmf_log_norm_const(p, kappa);
  const double a_resultant = vmf_mean_resultant(p, kappa);

  Matrix g_omega = Matrix::Zero(p, q);
  Vector g_bh = Vector::Zero(p);
  Vector g_rh = Vector::Zero(d.qs);
  Vector g_gamma = Vector::Zero(p);
  Matrix g_axes = Matrix::Zero(p, p - 1);
  Vector g_a = Vector::Zero(p);
  double g_log_kappa = 0.0;

  double total = 0.0;
  CaseLink cl;
  for (int i = 0; i < data_.n(); ++i) {
    Vector xs = d.has_sph() ? Vector(data_.sph_covs.row(i).transpose()) : Vector();
    Vector xe = d.has_euc() ? Vector(data_.euc_covs.row(i).transpose()) : Vector();
    if (!case_link_forward(st, xs, xe, cl)) return kInf;
    Vector y = data_.responses.row(i).transpose();

    double delta = 1.0 + cl.mu.dot(gamma_hat);
    if (delta <= kFitPoleEps) return kInf;
    Vector v = gamma_hat + cl.mu;
    double alpha = v.dot(y) / delta;
    Vector h = y - alpha * v;

    double w = y.dot(cl.mu) / a[0];
    Vector rho = axes.transpose() * h;  // p-1
    double jval = w * w;
    for (int k = 0; k < p - 1; ++k) {
      double rs = rho[k] / a[k + 1];
      jval += rs * rs;
    }
    if (!(jval > 1e-300)) return kInf;
    double sqrt_j = std::sqrt(jval);
    double ll = -log_cp - log_det_a - 0.5 * p * std::log(jval) + kappa * w / sqrt_j;
    double coef = data_.weight(i) / weight_total_;
    total -= coef * ll;
    if (!grad) continue;

    double cneg = -coef;  // cotangent scale for the minimized objective
    double lp = -0.5 * p / jval - 0.5 * kappa * w / (jval * sqrt_j);
    double gw = kappa / sqrt_j + 2.0 * w * lp;
    Vector grho(p - 1);
    for (int k = 0; k < p - 1; ++k) {
      double ak = a[k + 1];
      grho[k] = lp * 2.0 * rho[k] / (ak * ak);
      g_a[k + 1] += cneg * (lp * (-2.0) * rho[k] * rho[k] / (ak * ak * ak) - 1.0 / ak);
    }
    g_log_kappa += cneg * (w / sqrt_j - a_resultant);

    Vector gh = axes * grho;
    g_axes.noalias() += cneg * h * grho.transpose();

    double beta = gh.dot(v);
    Vector gmu_h = -(beta / delta) * y + (beta * alpha / delta) * gamma_hat - alpha * gh;
    Vector ggam_h = -(beta / delta) * y + (beta * alpha / delta) * cl.mu - alpha * gh;
    g_gamma.noalias() += cneg * ggam_h;

    Vector gmu = gmu_h + (gw / a[0]) * y;
    case_link_backward(st, xs, cl, Vector(cneg * gmu), g_omega, g_bh, g_rh);
  }
  if (!grad) return total;

  // axes = T * base_axes_init * C(S)
  if (skew_count() > 0) {
    Matrix g_c = (t_mat * base_axes_init_).transpose() * g_axes;
    Matrix g_s_full = -(Matrix::Identity(p - 1, p - 1) + c_rot).transpose() * g_c * ips_inv_t;
    Eigen::Index idx = 0;
    for (int i2 = 0; i2 < p - 1; ++i2)
      for (int j2 = i2 + 1; j2 < p - 1; ++j2)
        (*grad)[layout_.s + idx++] = g_s_full(i2, j2) - g_s_full(j2, i2);
  }
  if (has_c || tied_b) {
    Matrix k_mat = w_axes * g_axes.transpose();  // p x p
    Vector kv = k_mat * vt;
    Vector ktv = k_mat.transpose() * vt;
    g_gamma.noalias() += -(kv + ktv) / delta_t +
                         (vt.dot(k_mat * vt) / (delta_t * delta_t)) * gamma01_init_;
  }
  if (has_c) {
    Vector g_c_raw = (g_gamma - gamma_hat.dot(g_gamma) * gamma_hat) / c_norm;
    grad->segment(layout_.c, p) = g_c_raw;
  } else if (tied_b) {
    g_bh += g_gamma;
  }

  (*grad)[layout_.kappa] = g_log_kappa * kappa;
  for (int k = 0; k < p - 2; ++k)
    (*grad)[layout_.xi + k] = g_a[k + 1] * a[k + 1] - g_a[p - 1] * a[p - 1];

  Vector g_b, g_r;
  Matrix g_m;
  link_chain(st, g_omega, g_bh, g_rh, g_b, g_r, g_m);
  grad->segment(layout_.b, p) = g_b;
  if (d.has_sph()) grad->segment(layout_.r, d.qs) = g_r;
  for (Eigen::Index j = 0; j < q; ++j) grad->segment(layout_.m + j * p, p) = g_m.col(j);
  return total;
}

ConstraintSet SvmfJointObjective::constraints() const {
  const LinkDims d = data_.dims();
  const bool both = d.has_sph() && d.has_euc();
  const bool has_c = config_.gamma01 == Gamma01Mode::kEstimated;
  ConstraintSet cs;
  Eigen::Index n_comm = both ? d.p * (d.p - 1) / 2 : 0;
  cs.count = 1 + (d.has_sph() ? 1 : 0) + (has_c ? 1 : 0) + n_comm;
  Layout lay = layout_;

  auto unpack_state = [this, d](const Vector& x) {
    Vector r = d.has_sph() ? Vector(x.segment(layout_.r, d.qs)) : Vector();
    Matrix m(d.p, d.q());
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      m.col(j) = x.segment(layout_.m + j * d.p, d.p);
    return make_link_state(x.segment(layout_.b, d.p), r, m);
  };

  cs.eval = [d, both, has_c, lay, unpack_state, n = cs.count](const Vector& x) {
    LinkState st = unpack_state(x);
    Vector c(n);
    Eigen::Index idx = 0;
    c[idx++] = st.b_raw.squaredNorm() - 1.0;
    if (d.has_sph()) c[idx++] = st.r_raw.squaredNorm() - 1.0;
    if (has_c) c[idx++] = x.segment(lay.c, d.p).squaredNorm() - 1.0;
    if (both) c.tail(n - idx) = commutator_values(st.omega, d.qs);
    return c;
  };
  cs.jtv = [d, both, has_c, lay, unpack_state](const Vector& x, const Vector& w) {
    LinkState st = unpack_state(x);
    Vector out = Vector::Zero(x.size());
    Eigen::Index idx = 0;
    out.segment(lay.b, d.p) = 2.0 * w[idx++] * st.b_raw;
    if (d.has_sph()) out.segment(lay.r, d.qs) = 2.0 * w[idx++] * st.r_raw;
    if (has_c) out.segment(lay.c, d.p) = 2.0 * w[idx++] * x.segment(lay.c, d.p);
    if (both) {
      Matrix g_omega = commutator_omega_cotangent(st.omega, d.qs, w.tail(w.size() - idx));
      Vector g_b, g_r;
      Matrix g_m;
      link_chain(st, g_omega, Vector::Zero(d.p), Vector::Zero(d.qs), g_b, g_r, g_m);
      out.segment(lay.b, d.p) += g_b;
      if (d.has_sph()) out.segment(lay.r, d.qs) += g_r;
      for (Eigen::Index j = 0; j < g_m.cols(); ++j)
        out.segment(lay.m + j * d.p, d.p) += g_m.col(j);
    }
    return out;
  };
  return cs;
}

// ---------------------------------------------------------------------------
// Fits

Vector FitResult::predict(const CovariateCase& x) const {
  CovariateCase t = transform.apply_case(x);
  return transform.response_to_original(link_eval(link, t));
}

namespace {

AugLagOptions make_al_options(const FitConfig& config) {
  AugLagOptions opt;
  opt.inner.max_iterations = config.max_iterations;
  opt.inner.grad_tol = config.grad_tol;
  opt.inner.rel_obj_tol = config.obj_tol;
  opt.constraint_tol = std::min(config.constraint_tol, 1e-9);
  return opt;
}

Vector perturb_start(Vector x, const FitConfig& config) {
  if (config.start_sigma <= 0.0) return x;
  std::mt19937_64 rng(config.start_seed);
  std::normal_distribution<double> gauss(0.0, config.start_sigma);
  for (Eigen::Index i = 0; i < x.size(); ++i) x[i] += gauss(rng);
  return x;
}

void normalize_block(Vector& x, Eigen::Index off, Eigen::Index len) {
  if (len == 0) return;
  double n = x.segment(off, len).norm();
  if (n > 1e-12) x.segment(off, len) /= n;
}

Vector response_resultant(const Dataset& data) {
  Vector r = Vector::Zero(data.p());
  for (int i = 0; i < data.n(); ++i)
    r += data.weight(i) * data.responses.row(i).transpose();
  return r;
}


// Log-likelihood at fixed link/base/scales with the concentration
// profiled out through the resultant equation.
double svmf_profile_loglik(const Dataset& data, const Matrix& mu_rows,
                           const TransportBase& base, const Vector& scales,
                           double ceiling, double* kappa_out) {
  const int p = data.p();
  double num = 0.0;
  for (int i = 0; i < data.n(); ++i) {
    Vector mu = mu_rows.row(i).transpose();
    if (1.0 + mu.dot(base.gamma01) <= kFitPoleEps)
      return -std::numeric_limits<double>::infinity();
    OrientationFrame fr = axes_at(mu, base);
    Vector y = data.responses.row(i).transpose();
    double w = y.dot(fr.mu) / scales[0];
    double jv = w * w;
    for (int k = 1; k < p; ++k) {
      double rs = y.dot(fr.axes.col(k - 1)) / scales[k];
      jv += rs * rs;
    }
    num += data.weight(i) * w / std::sqrt(jv);
  }
  double kappa = solve_kappa_resultant(p, num / data.weight_total(), ceiling, nullptr);
  if (kappa_out) *kappa_out = kappa;
  SvMFParams par;
  par.kappa = kappa;
  par.scales = scales;
  double ll = 0.0;
  for (int i = 0; i < data.n(); ++i) {
    OrientationFrame fr = axes_at(mu_rows.row(i).transpose(), base);
    ll += data.weight(i) * svmf_log_density(data.responses.row(i).transpose(), fr, par);
  }
  return ll;
}

Vector normalized_moment_scales(const MomentAxesResult& ma, int p, double a1) {
  Vector scales = Vector::Ones(p);
  scales[0] = a1;
  for (int k = 0; k < p - 1; ++k)
    scales[k + 1] = std::min(std::max(ma.scales[k], 0.05), 20.0);
  double log_fix = 0.0;
  for (int k = 1; k < p; ++k) log_fix += std::log(scales[k]);
  scales.tail(p - 1) *= std::exp(-log_fix / (p - 1));
  return scales;
}

// Core vMF fit on already-transformed data.
FitResult fit_vmf_core(const Dataset& data, const FitConfig& config) {
  const LinkDims dims = data.dims();
  VmfLinkObjective obj(data);

  ReparamLink rp0 = config.warm ? config.warm->reparam : to_reparam(default_init(dims));
  Vector x0 = perturb_start(obj.pack(rp0), config);
  normalize_block(x0, 0, dims.p);
  normalize_block(x0, dims.p, dims.qs);

  AugLagResult al = augmented_lagrangian(
      [&obj](const Vector& x, Vector& g) { return obj.eval(x, g); }, obj.constraints(),
      std::move(x0), make_al_options(config));
  if (al.constraint_inf > 1e-6)
    throw ConvergenceError("fit_vmf: constraint residual above 1e-6 at exit");

  FitResult out;
  out.model = ErrorModel::kVmf;
  out.gamma01_mode = config.gamma01;
  out.reparam = obj.unpack(al.x);
  out.link = recover_link(out.reparam);
  out.converged = al.converged;
  out.iterations = al.iterations;
  out.grad_norm = al.grad_norm;
  out.constraint_residual = al.constraint_inf;

  Matrix mu = mu_rows_from(out.reparam, data);
  double kappa = fit_kappa(data, mu, dims.p, config.kappa_ceiling, &out.kappa_capped);
  out.error = SvMFParams::isotropic(dims.p, kappa, config.a1_fixed);
  out.loglik = vmf_loglik_value(data, mu, kappa);
  out.dof = count_dof(dims, ErrorModel::kVmf, false);
  out.aic = 2.0 * out.dof - 2.0 * out.loglik;
  out.stage_objectives = {out.loglik};

  // orientation base for diagnostics: resultant mean with completed axes
  Vector resultant = response_resultant(data);
  Vector g01 = resultant.norm() > 1e-10 ? Vector(resultant.normalized()) : out.reparam.b01;
  Matrix basis = gram_schmidt({g01});
  out.base.gamma01 = g01;
  out.base.base_axes = basis.rightCols(dims.p - 1);
  out.transform = TransformRecord::identity(dims.p, dims.qs, dims.qe);
  return out;
}

// Core SvMF fit on already-transformed data.
FitResult fit_svmf_core(const Dataset& data, const FitConfig& config) {
  const LinkDims dims = data.dims();
  const int p = dims.p;
  const bool warm = config.warm && config.warm->model == ErrorModel::kSvmf;

  ReparamLink rp_init;
  double kappa0;
  Vector gamma0;
  Matrix axes0;
  Vector scales_init = Vector::Ones(p);
  scales_init[0] = config.a1_fixed;
  double ll_pre = 0.0;
  int pre_iterations = 0;

  if (warm) {
    rp_init = config.warm->reparam;
    kappa0 = std::min(std::max(config.warm->error.kappa, 1e-3), config.kappa_ceiling);
    gamma0 = config.warm->base.gamma01;
    axes0 = config.warm->base.base_axes;
    scales_init = config.warm->error.scales;
    Matrix mu = mu_rows_from(rp_init, data);
    ll_pre = vmf_loglik_value(data, mu, fit_kappa(data, mu, p, config.kappa_ceiling, nullptr));
  } else {
    FitConfig pre_cfg = config;
    pre_cfg.model = ErrorModel::kVmf;
    pre_cfg.start_seed = split_seed(config.start_seed, 1);
    FitResult pre = fit_vmf_core(data, pre_cfg);
    pre_iterations = pre.iterations;
    ll_pre = pre.loglik;
    rp_init = pre.reparam;
    kappa0 = std::min(std::max(pre.error.kappa, 1e-3), config.kappa_ceiling);

    Matrix mu = mu_rows_from(pre.reparam, data);
    // Candidate base locations for the moment initialization. A base far
    // from the data-generating one lets the transport twist wash the
    // residual anisotropy out, so the profile likelihood of the moment
    // estimate picks among the resultant mean and the signed axes.
    std::vector<Vector> candidates;
    if (config.gamma01 == Gamma01Mode::kTiedToB01) {
      candidates.push_back(pre.reparam.b01);
    } else {
      Vector resultant = response_resultant(data);
      candidates.push_back(resultant.norm() > 1e-10 ? Vector(resultant.normalized())
                                                    : pre.reparam.b01);
      if (config.gamma01 == Gamma01Mode::kEstimated) {
        for (int j = 0; j < p; ++j)
          for (double s : {1.0, -1.0}) {
            Vector cand = s * Vector::Unit(p, j);
            bool dup = false;
            for (const Vector& c : candidates)
              if (cand.dot(c) > 0.999) dup = true;
            if (!dup) candidates.push_back(cand);
          }
      }
    }
    double best_ll = -std::numeric_limits<double>::infinity();
    for (const Vector& cand : candidates) {
      try {
        MomentAxesResult ma = moment_axes(data, mu, cand);
        if (!ma.skipped.empty()) continue;
        Vector sc = normalized_moment_scales(ma, p, config.a1_fixed);
        TransportBase base_c{cand, ma.axes};
        double ll_c =
            svmf_profile_loglik(data, mu, base_c, sc, config.kappa_ceiling, nullptr);
        if (ll_c > best_ll) {
          best_ll = ll_c;
          gamma0 = cand;
          axes0 = ma.axes;
          scales_init = sc;
        }
      } catch (const std::exception&) {
        continue;
      }
    }
    if (!std::isfinite(best_ll)) {
      gamma0 = candidates.front();
      MomentAxesResult ma = moment_axes(data, mu, gamma0);
      axes0 = ma.axes;
      scales_init = normalized_moment_scales(ma, p, config.a1_fixed);
    }
  }

  SvmfJointObjective obj(data, config, axes0, gamma0);
  Vector x_unit = obj.pack(rp_init, kappa0, Vector::Ones(p), gamma0);
  Vector x_start = obj.pack(rp_init, kappa0, scales_init, gamma0);
  double ll_unit = obj.loglik(x_unit);
  double ll_start = obj.loglik(x_start);
  Vector x0 = ll_start > ll_unit ? x_start : x_unit;
  double ll_init = std::max(ll_unit, ll_start);

  if (config.start_sigma > 0.0) {
    FitConfig jitter = config;
    jitter.start_seed = split_seed(config.start_seed, 2);
    x0 = perturb_start(std::move(x0), jitter);
    normalize_block(x0, 0, p);
    normalize_block(x0, p, dims.qs);
    if (config.gamma01 == Gamma01Mode::kEstimated) {
      Eigen::Index c_off = p + dims.qs + static_cast<Eigen::Index>(p) * dims.q() + 1 + (p - 2);
      normalize_block(x0, c_off, p);
    }
  }

  AugLagResult al = augmented_lagrangian(
      [&obj](const Vector& x, Vector& g) { return obj.eval(x, g); }, obj.constraints(),
      std::move(x0), make_al_options(config));
  if (al.constraint_inf > 1e-6)
    throw ConvergenceError("fit_svmf: constraint residual above 1e-6 at exit");

  FitResult out;
  out.model = ErrorModel::kSvmf;
  out.gamma01_mode = config.gamma01;
  SvmfJointObjective::Unpacked u = obj.unpack(al.x);
  out.converged = al.converged;
  out.iterations = pre_iterations + al.iterations;
  out.grad_norm = al.grad_norm;
  out.constraint_residual = al.constraint_inf;

  double ll_final = obj.loglik(al.x);
  if (!(ll_final >= ll_init - 1e-9)) {
    // optimizer failed to improve on its start; keep the start point
    Vector x_fallback = ll_start > ll_unit ? x_start : x_unit;
    u = obj.unpack(x_fallback);
    ll_final = ll_init;
    out.converged = false;
  }

  out.reparam = u.reparam;
  out.link = recover_link(u.reparam);
  out.base = u.base;
  out.error.kappa = u.kappa;
  out.error.scales = u.scales;
  out.kappa_capped = false;

  // Post-hoc concentration refinement for p != 3 (exact constant at p = 3).
  if (p != 3) {
    Matrix mu_final = mu_rows_from(out.reparam, data);
    double num = 0.0;
    for (int i = 0; i < data.n(); ++i) {
      OrientationFrame fr = axes_at(mu_final.row(i).transpose(), out.base);
      Vector y = data.responses.row(i).transpose();
      double w = y.dot(fr.mu) / out.error.scales[0];
      double jv = w * w;
      for (int k = 1; k < p; ++k) {
        double rs = y.dot(fr.axes.col(k - 1)) / out.error.scales[k];
        jv += rs * rs;
      }
      num += data.weight(i) * w / std::sqrt(jv);
    }
    double rbar = num / data.weight_total();
    if (rbar > 1e-12 && rbar < 1.0 - 1e-12) {
      double lo = 0.0, hi = 1.0;
      while (vmf_mean_resultant(p, hi) < rbar && hi < config.kappa_ceiling) hi *= 2.0;
      for (int it = 0; it < 200; ++it) {
        double mid = 0.5 * (lo + hi);
        if (vmf_mean_resultant(p, mid) < rbar)
          lo = mid;
        else
          hi = mid;
      }
      out.error.kappa = std::min(0.5 * (lo + hi), config.kappa_ceiling);
    } else if (rbar >= 1.0 - 1e-12) {
      out.error.kappa = config.kappa_ceiling;
      out.kappa_capped = true;
    }
  }

  // Final log-likelihood from the recovered parameter values.
  {
    Matrix mu_final = mu_rows_from(out.reparam, data);
    double ll = 0.0;
    for (int i = 0; i < data.n(); ++i) {
      OrientationFrame fr = axes_at(mu_final.row(i).transpose(), out.base);
      ll += data.weight(i) *
            svmf_log_density(data.responses.row(i).transpose(), fr, out.error);
    }
    out.loglik = ll;
  }

  out.dof = count_dof(dims, ErrorModel::kSvmf, config.gamma01 == Gamma01Mode::kEstimated);
  out.aic = 2.0 * out.dof - 2.0 * out.loglik;
  out.stage_objectives = {ll_pre, ll_init, out.loglik};
  out.transform = TransformRecord::identity(dims.p, dims.qs, dims.qe);
  return out;
}

FitResult with_transform(const Dataset& data, const FitConfig& config,
                         FitResult (*core)(const Dataset&, const FitConfig&)) {
  data.validate();
  if (config.warm) {
    // reuse the warm fit's preprocessing so its parameters line up
    Dataset tdata = config.warm->transform.apply(data);
    FitResult out = core(tdata, config);
    out.transform = config.warm->transform;
    return out;
  }
  auto [tdata, rec] = preliminary_transform(data);
  FitResult out = core(tdata, config);
  out.transform = rec;
  return out;
}

}  // namespace

FitResult fit_vmf(const Dataset& data, const FitConfig& config) {
  return with_transform(data, config, &fit_vmf_core);
}

FitResult fit_svmf(const Dataset& data, const FitConfig& config) {
  return with_transform(data, config, &fit_svmf_core);
}

FitResult fit_model(const Dataset& data, const FitConfig& config) {
  return config.model == ErrorModel::kVmf ? fit_vmf(data, config) : fit_svmf(data, config);
}

FitResult multistart_fit(const Dataset& data, const FitConfig& config, int n_starts,
                         std::uint64_t seed) {
  if (n_starts < 1) throw ValidationError("multistart_fit: n_starts must be >= 1");
  int threads = config.threads > 0
                    ? config.threads
                    : std::max(1u, std::thread::hardware_concurrency());
  threads = std::min<int>(threads, n_starts);

  std::vector<std::optional<FitResult>> fits(n_starts);
  std::vector<MultistartEntry> table(n_starts);

  auto run_one = [&](int k) {
    FitConfig cfg = config;
    cfg.multistart = 1;
    cfg.start_sigma = (k == 0) ? 0.0 : 0.3;
    cfg.start_seed = split_seed(seed, static_cast<std::uint64_t>(k));
    MultistartEntry entry;
    entry.start_id = k;
    try {
      FitResult fit = fit_model(data, cfg);
      entry.objective = fit.loglik;
      entry.converged = fit.converged;
      fits[k] = std::move(fit);
    } catch (const std::exception&) {
      entry.objective = std::numeric_limits<double>::quiet_NaN();
      entry.converged = false;
    }
    table[k] = entry;
  };

  for (int base = 0; base < n_starts; base += threads) {
    int batch = std::min(threads, n_starts - base);
    std::vector<std::future<void>> futs;
    futs.reserve(batch);
    for (int j = 0; j < batch; ++j)
      futs.push_back(std::async(std::launch::async, run_one, base + j));
    for (auto& f : futs) f.get();
  }

  int best = -1;
  for (int k = 0; k < n_starts; ++k) {
    if (!fits[k]) continue;
    if (best < 0 || fits[k]->loglik > fits[best]->loglik) best = k;
  }
  if (best < 0) throw ConvergenceError("multistart_fit: every start failed");
  FitResult out = std::move(*fits[best]);
  out.multistart = std::move(table);
  return out;
}

}  // namespace sphreg
