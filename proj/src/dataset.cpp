#include "sphreg/dataset.hpp"

#include <cmath>

namespace sphreg {

CovariateCase Dataset::covariate_case(int i) const {
  CovariateCase x;
  if (qs() > 0) x.xs = sph_covs.row(i).transpose();
  if (qe() > 0) x.xe = euc_covs.row(i).transpose();
  return x;
}

void Dataset::validate() const {
  if (n() < 1) throw ValidationError("Dataset: needs at least one case");
  if (p() < 2) throw ValidationError("Dataset: response dimension must be >= 2");
  if (qs() == 0 && qe() == 0) throw ValidationError("Dataset: no covariates");
  if ((qs() > 0 && sph_covs.rows() != n()) || (qe() > 0 && euc_covs.rows() != n()))
    throw ValidationError("Dataset: covariate row count mismatch");
  if (!responses.allFinite() || !sph_covs.allFinite() || !euc_covs.allFinite())
    throw ValidationError("Dataset: non-finite entries");
  for (int i = 0; i < n(); ++i) {
    if (std::abs(responses.row(i).norm() - 1.0) > 1e-8)
      throw ValidationError("Dataset: response row " + std::to_string(i) + " is not unit");
    if (qs() > 0 && std::abs(sph_covs.row(i).norm() - 1.0) > 1e-8)
      throw ValidationError("Dataset: spherical covariate row " + std::to_string(i) +
                            " is not unit");
  }
  if (weights.size()) {
    if (weights.size() != n()) throw ValidationError("Dataset: weight count mismatch");
    if (weights.minCoeff() < 0.0) throw ValidationError("Dataset: negative weight");
  }
}

Dataset Dataset::without_case(int i) const {
  Dataset out;
  auto drop = [i](const Matrix& m) {
    if (m.size() == 0) return Matrix();
    Matrix r(m.rows() - 1, m.cols());
    r.topRows(i) = m.topRows(i);
    r.bottomRows(m.rows() - i - 1) = m.bottomRows(m.rows() - i - 1);
    return r;
  };
  out.responses = drop(responses);
  out.sph_covs = drop(sph_covs);
  out.euc_covs = drop(euc_covs);
  if (weights.size()) {
    Vector w(weights.size() - 1);
    w.head(i) = weights.head(i);
    w.tail(weights.size() - i - 1) = weights.tail(weights.size() - i - 1);
    out.weights = w;
  }
  return out;
}

TransformRecord TransformRecord::identity(int p, int qs, int qe) {
  TransformRecord r;
  r.response_rot = Matrix::Identity(p, p);
  if (qs > 0) r.sph_rot = Matrix::Identity(qs, qs);
  if (qe > 0) {
    r.euc_center = Vector::Zero(qe);
    r.euc_rot = Matrix::Identity(qe, qe);
  }
  return r;
}

bool TransformRecord::is_identity() const {
  return !response_rotated && !sph_rotated && !euc_transformed;
}

Dataset TransformRecord::apply(const Dataset& data) const {
  Dataset out = data;
  if (response_rotated) out.responses = data.responses * response_rot;
  if (sph_rotated) out.sph_covs = data.sph_covs * sph_rot;
  if (euc_transformed)
    out.euc_covs = (data.euc_covs.rowwise() - euc_center.transpose()) * euc_rot;
  return out;
}

Dataset TransformRecord::invert(const Dataset& data) const {
  Dataset out = data;
  if (response_rotated) out.responses = data.responses * response_rot.transpose();
  if (sph_rotated) out.sph_covs = data.sph_covs * sph_rot.transpose();
  if (euc_transformed)
    out.euc_covs = (data.euc_covs * euc_rot.transpose()).rowwise() + euc_center.transpose();
  return out;
}

CovariateCase TransformRecord::apply_case(const CovariateCase& x) const {
  CovariateCase out = x;
  if (sph_rotated && x.xs.size()) out.xs = sph_rot.transpose() * x.xs;
  if (euc_transformed && x.xe.size()) out.xe = euc_rot.transpose() * (x.xe - euc_center);
  return out;
}

Vector TransformRecord::response_to_original(const Vector& mu) const {
  return response_rotated ? Vector(response_rot * mu) : mu;
}

namespace {

// Rotation aligning the weighted mean direction of unit rows with e1
// (applied as rows * Q, i.e. each case becomes Q' y).
bool mean_alignment(const Matrix& rows, const Vector& w, Matrix* q) {
  Vector mean = Vector::Zero(rows.cols());
  for (Eigen::Index i = 0; i < rows.rows(); ++i)
    mean += (w.size() ? w[i] : 1.0) * rows.row(i).transpose();
  double norm = mean.norm();
  if (norm < 1e-10 * rows.rows()) return false;
  mean /= norm;
  Vector e1 = Vector::Unit(rows.cols(), 0);
  if (1.0 + e1.dot(mean) <= kAntipodalTol) return false;
  *q = amaral_rotation(mean, e1);
  return true;
}

}  // namespace

std::pair<Dataset, TransformRecord> preliminary_transform(const Dataset& data) {
  data.validate();
  TransformRecord rec = TransformRecord::identity(data.p(), data.qs(), data.qe());

  Matrix qy;
  if (mean_alignment(data.responses, data.weights, &qy)) {
    rec.response_rotated = true;
    rec.response_rot = qy;
  }
  if (data.qs() > 0) {
    Matrix qs;
    if (mean_alignment(data.sph_covs, data.weights, &qs)) {
      rec.sph_rotated = true;
      rec.sph_rot = qs;
    }
  }
  if (data.qe() > 0) {
    const Matrix& xe = data.euc_covs;
    const int qe = data.qe();
    Vector mean = xe.colwise().mean();
    std::vector<bool> constant(qe);
    int n_var = 0;
    for (int j = 0; j < qe; ++j) {
      double spread = (xe.col(j).array() - mean[j]).abs().maxCoeff();
      constant[j] = spread < 1e-12 * std::max(1.0, std::abs(mean[j]));
      if (!constant[j]) ++n_var;
    }
    if (n_var > 0) {
      rec.euc_transformed = true;
      rec.euc_center = Vector::Zero(qe);
      rec.euc_rot = Matrix::Identity(qe, qe);
      std::vector<int> idx;
      for (int j = 0; j < qe; ++j)
        if (!constant[j]) {
          rec.euc_center[j] = mean[j];
          idx.push_back(j);
        }
      Matrix centered(data.n(), n_var);
      for (int k = 0; k < n_var; ++k) centered.col(k) = xe.col(idx[k]).array() - mean[idx[k]];
      Matrix cov = centered.transpose() * centered / data.n();
      Eigen::SelfAdjointEigenSolver<Matrix> eig(cov);
      // descending eigenvalue order with a sign convention
      Matrix axes(n_var, n_var);
      for (int k = 0; k < n_var; ++k) {
        Vector v = eig.eigenvectors().col(n_var - 1 - k);
        Eigen::Index imax;
        v.cwiseAbs().maxCoeff(&imax);
        if (v[imax] < 0) v = -v;
        axes.col(k) = v;
      }
      for (int a = 0; a < n_var; ++a)
        for (int b = 0; b < n_var; ++b) rec.euc_rot(idx[a], idx[b]) = axes(a, b);
    }
  }
  return {rec.apply(data), rec};
}

}  // namespace sphreg
