#include "sphreg/link.hpp"

#include <random>

#include "doctest.h"
#include "test_support_link.hpp"

using namespace sphreg;
using testsup::link_eval_composed;
using testsup::make_random_case;
using testsup::make_random_link;
using testsup::random_gaussian;
using testsup::random_stiefel;
using testsup::random_unit;

namespace {

Matrix rot2(double a) {
  Matrix r(2, 2);
  r << std::cos(a), -std::sin(a), std::sin(a), std::cos(a);
  return r;
}

double angle_of(const Vector& v) { return std::atan2(v[1], v[0]); }

double angle_diff(double a, double b) { return std::abs(wrap_angle(a - b)); }

}  // namespace

TEST_CASE("link_eval constant and identity special cases") {
  std::mt19937_64 rng(101);
  LinkDims dims{3, 3, 2};
  LinkParams p = make_random_link(dims, rng);
  p.bs.setZero();
  p.be.setZero();
  for (int i = 0; i < 20; ++i) {
    CovariateCase x = make_random_case(dims, rng);
    CHECK((link_eval(p, x) - p.b01()).norm() < 1e-14);
  }
  CHECK(image_dimension(p) == 0);

  LinkDims sd{3, 3, 0};
  LinkParams ident = make_random_link(sd, rng);
  ident.bs.setOnes();
  ident.b0 = ident.rs;
  for (int i = 0; i < 20; ++i) {
    CovariateCase x = make_random_case(sd, rng);
    CHECK((link_eval(ident, x) - x.xs).norm() < 1e-12);
  }
}

TEST_CASE("link_eval agrees with the literal stereographic composition") {
  std::mt19937_64 rng(103);
  for (const LinkDims& dims :
       {LinkDims{3, 3, 2}, LinkDims{3, 4, 3}, LinkDims{2, 2, 1}, LinkDims{5, 6, 4},
        LinkDims{3, 3, 0}, LinkDims{3, 0, 2}, LinkDims{5, 0, 5}}) {
    for (int trial = 0; trial < 20; ++trial) {
      LinkParams p = make_random_link(dims, rng);
      CovariateCase x = make_random_case(dims, rng);
      Vector a = link_eval(p, x);
      Vector b = link_eval_composed(p, x);
      CHECK((a - b).norm() < 1e-12);
      CHECK(std::abs(a.norm() - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("link_eval pole behavior") {
  std::mt19937_64 rng(107);
  LinkDims dims{3, 3, 0};
  LinkParams p = make_random_link(dims, rng);
  CovariateCase pole{Vector(), Vector(-p.rs1())};
  CHECK((link_eval(p, pole) + p.b01()).norm() < 1e-14);

  p.bs.setZero();
  CHECK((link_eval(p, pole) - p.b01()).norm() < 1e-14);

  CHECK_THROWS_AS(t_transform(p, pole), ValidationError);
}

TEST_CASE("t_transform coordinates") {
  std::mt19937_64 rng(109);
  LinkDims dims{3, 4, 3};
  LinkParams p = make_random_link(dims, rng);

  CovariateCase at_ref{Vector::Zero(3), p.rs1()};
  CHECK(t_transform(p, at_ref).norm() < 1e-14);

  LinkDims ed{3, 0, 3};
  LinkParams pe = make_random_link(ed, rng);
  CovariateCase xe_only{random_gaussian(3, rng), Vector()};
  Vector te = t_transform(pe, xe_only);
  CHECK((te - Vector(pe.be.asDiagonal() * (pe.re.transpose() * xe_only.xe))).norm() < 1e-14);

  // coordinatewise formula
  for (int trial = 0; trial < 20; ++trial) {
    CovariateCase x = make_random_case(dims, rng);
    Vector t = t_transform(p, x);
    double denom = 1.0 + p.rs1().dot(x.xs);
    for (int j = 0; j < dims.p - 1; ++j) {
      double want = p.bs[j] * p.rs.col(j + 1).dot(x.xs) / denom +
                    p.be[j] * p.re.col(j).dot(x.xe);
      CHECK(t[j] == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("image_dimension and the Prop 2 image property") {
  std::mt19937_64 rng(113);
  LinkDims dims{3, 3, 2};
  LinkParams p = make_random_link(dims, rng);
  CHECK(image_dimension(p) == 2);

  p.bs[1] = 0.0;
  p.be[1] = 0.0;
  CHECK(image_dimension(p) == 1);

  int inside = 0;
  for (int i = 0; i < 10000; ++i) {
    CovariateCase x = make_random_case(dims, rng);
    Vector mu = link_eval(p, x);
    if (std::abs(p.b0.col(2).dot(mu)) < 1e-8 && std::abs(mu.norm() - 1.0) < 1e-10) ++inside;
  }
  CHECK(inside == 10000);
}

TEST_CASE("downs_link equals the embedded general link") {
  CHECK(downs_link(M_PI / 2, 0.0, 0.0, 1, 1.0) == doctest::Approx(M_PI / 2));
  CHECK(downs_link(0.7, 1.1, 0.7, 1, 0.4) == doctest::Approx(1.1));

  std::mt19937_64 rng(127);
  std::uniform_real_distribution<double> ang(-M_PI, M_PI), sc(0.05, 2.0);
  for (int draw = 0; draw < 20; ++draw) {
    double beta0 = ang(rng), eta = ang(rng), bs2 = sc(rng);
    int delta = (rng() & 1) ? 1 : -1;
    LinkParams p;
    p.dims = LinkDims{2, 2, 0};
    p.b0 = rot2(beta0);
    Matrix flip = Matrix::Identity(2, 2);
    flip(1, 1) = delta;
    p.rs = rot2(eta) * flip;
    p.bs = Vector::Constant(1, bs2);
    p.validate();
    for (int i = 0; i < 64; ++i) {
      double theta = -M_PI + 2.0 * M_PI * i / 64.0;
      Vector xs(2);
      xs << std::cos(theta), std::sin(theta);
      double via_link = angle_of(link_eval(p, CovariateCase{Vector(), xs}));
      CHECK(angle_diff(via_link, downs_link(theta, beta0, eta, delta, bs2)) < 1e-10);
    }
  }
}

TEST_CASE("fisher_lee_link equals the embedded general link") {
  Vector gamma(2), xe(2);
  gamma << 0.0, 1.0;
  xe << 1.0, 1.0;
  CHECK(fisher_lee_link(xe, 0.0, gamma) == doctest::Approx(M_PI / 2));
  CHECK(fisher_lee_link(Vector::Zero(2), 0.4, gamma) == doctest::Approx(0.4));

  std::mt19937_64 rng(131);
  std::uniform_real_distribution<double> ang(-M_PI, M_PI);
  for (int draw = 0; draw < 20; ++draw) {
    int qe = 2 + static_cast<int>(rng() % 3);
    double beta0 = ang(rng);
    Vector g = random_gaussian(qe, rng);
    LinkParams p;
    p.dims = LinkDims{2, 0, qe};
    p.b0 = rot2(beta0);
    p.re = g / g.norm();
    p.be = Vector::Constant(1, g.norm());
    p.validate();
    for (int i = 0; i < 20; ++i) {
      Vector x = random_gaussian(qe, rng);
      double via_link = angle_of(link_eval(p, CovariateCase{x, Vector()}));
      CHECK(angle_diff(via_link, fisher_lee_link(x, beta0, g)) < 1e-10);
    }
  }
}

TEST_CASE("hybrid_link reductions and root property") {
  std::mt19937_64 rng(137);
  std::uniform_real_distribution<double> ang(-M_PI, M_PI), sc(0.1, 2.0);
  for (int draw = 0; draw < 50; ++draw) {
    double beta0 = ang(rng), eta = ang(rng), bs2 = sc(rng), theta = ang(rng);
    int delta = (rng() & 1) ? 1 : -1;
    Vector gamma = random_gaussian(2, rng), xe = random_gaussian(2, rng);

    CHECK(angle_diff(hybrid_link(theta, xe, beta0, eta, delta, bs2, Vector::Zero(2)),
                     downs_link(theta, beta0, eta, delta, bs2)) < 1e-12);
    CHECK(angle_diff(hybrid_link(theta, xe, beta0, eta, delta, 0.0, gamma),
                     fisher_lee_link(xe, beta0, gamma)) < 1e-12);

    double root = eta + 2.0 * std::atan(-gamma.dot(xe) / (delta * bs2));
    CHECK(std::abs(hybrid_link(root, xe, 0.0, eta, delta, bs2, gamma)) < 1e-10);
  }
}

TEST_CASE("mobius_link_form matches link_eval") {
  std::mt19937_64 rng(139);
  for (int draw = 0; draw < 10; ++draw) {
    LinkDims dims{3, 3, 0};
    LinkParams p = make_random_link(dims, rng);
    double beta = std::uniform_real_distribution<double>(0.05, 1.0)(rng);
    p.bs = Vector::Constant(2, beta);
    MobiusLinkForm form = mobius_link_form(p);
    CHECK(form.phi == doctest::Approx((1.0 - beta) / (1.0 + beta)));
    for (int i = 0; i < 100; ++i) {
      Vector x = random_unit(3, rng);
      Vector a = link_eval(p, CovariateCase{Vector(), x});
      Vector b = mobius_sphere(x, form.r0, Vector(form.phi * form.rs1));
      CHECK((a - b).norm() < 1e-12);
    }
  }

  LinkParams chang = make_random_link(LinkDims{3, 3, 0}, rng);
  chang.bs = Vector::Ones(2);
  MobiusLinkForm f1 = mobius_link_form(chang);
  CHECK(f1.phi == 0.0);
  for (int i = 0; i < 10; ++i) {
    Vector x = random_unit(3, rng);
    CHECK((link_eval(chang, CovariateCase{Vector(), x}) - f1.r0 * x).norm() < 1e-12);
  }

  LinkParams aniso = make_random_link(LinkDims{3, 3, 0}, rng);
  aniso.bs << 0.9, 0.4;
  CHECK_THROWS_AS(mobius_link_form(aniso), ValidationError);
}

TEST_CASE("compose_links closure case (i)") {
  std::mt19937_64 rng(149);
  LinkDims dims{3, 3, 0};
  LinkParams inner = make_random_link(dims, rng);
  LinkParams outer = make_random_link(dims, rng);
  outer.rs = inner.b0;
  outer.validate();
  LinkParams comp = compose_links(inner, outer);
  comp.validate();
  for (int i = 0; i < 100; ++i) {
    CovariateCase x = make_random_case(dims, rng);
    Vector chained = link_eval(outer, CovariateCase{Vector(), link_eval(inner, x)});
    CHECK((link_eval(comp, x) - chained).norm() < 1e-10);
  }
}

TEST_CASE("compose_links closure case (ii)") {
  std::mt19937_64 rng(151);
  LinkDims dims{3, 3, 0};
  for (int draw = 0; draw < 10; ++draw) {
    LinkParams inner = make_random_link(dims, rng);
    LinkParams outer = make_random_link(dims, rng);
    std::uniform_real_distribution<double> sc(0.1, 1.0);
    inner.bs = Vector::Constant(2, sc(rng));
    outer.bs = Vector::Constant(2, sc(rng));
    LinkParams comp = compose_links(inner, outer);
    comp.validate();
    for (int i = 0; i < 100; ++i) {
      CovariateCase x = make_random_case(dims, rng);
      Vector chained = link_eval(outer, CovariateCase{Vector(), link_eval(inner, x)});
      CHECK((link_eval(comp, x) - chained).norm() < 1e-10);
    }
  }

  // identity outer leaves the inner link unchanged pointwise
  LinkParams inner = make_random_link(dims, rng);
  inner.bs = Vector::Constant(2, 0.6);
  LinkParams ident;
  ident.dims = dims;
  ident.b0 = Matrix::Identity(3, 3);
  ident.rs = Matrix::Identity(3, 3);
  ident.bs = Vector::Ones(2);
  LinkParams comp = compose_links(inner, ident);
  for (int i = 0; i < 50; ++i) {
    CovariateCase x = make_random_case(dims, rng);
    CHECK((link_eval(comp, x) - link_eval(inner, x)).norm() < 1e-10);
  }
}

TEST_CASE("to_reparam satisfies the Prop 5 constraints") {
  std::mt19937_64 rng(157);
  for (const LinkDims& dims : {LinkDims{3, 3, 2}, LinkDims{3, 4, 3}, LinkDims{5, 0, 5}}) {
    for (int draw = 0; draw < 20; ++draw) {
      LinkParams p = make_random_link(dims, rng);
      ReparamLink rp = to_reparam(p);
      CHECK((rp.b01.transpose() * rp.omega).cwiseAbs().maxCoeff() < 1e-12);
      if (dims.has_sph())
        CHECK((rp.omega.leftCols(dims.qs) * rp.rs1).cwiseAbs().maxCoeff() < 1e-12);
      CHECK(commutator_residual(rp) < 1e-10);

      Eigen::JacobiSVD<Matrix> svd(rp.omega);
      Vector sv = svd.singularValues().head(dims.p - 1);
      Vector want = Vector::Zero(dims.p - 1);
      if (dims.has_sph()) want += p.bs.cwiseProduct(p.bs);
      if (dims.has_euc()) want += p.be.cwiseProduct(p.be);
      want = want.cwiseSqrt();
      CHECK((sv - want).cwiseAbs().maxCoeff() < 1e-10);
    }
  }

  LinkParams zero = make_random_link(LinkDims{3, 3, 2}, rng);
  zero.bs.setZero();
  zero.be.setZero();
  CHECK(to_reparam(zero).omega.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("link_eval_reparam matches link_eval") {
  std::mt19937_64 rng(163);
  for (const LinkDims& dims : {LinkDims{3, 3, 2}, LinkDims{3, 4, 3}, LinkDims{5, 0, 5},
                               LinkDims{3, 3, 0}, LinkDims{2, 2, 0}}) {
    for (int draw = 0; draw < 20; ++draw) {
      LinkParams p = make_random_link(dims, rng);
      ReparamLink rp = to_reparam(p);
      rp.validate(1e-8);
      for (int i = 0; i < 20; ++i) {
        CovariateCase x = make_random_case(dims, rng);
        CHECK((link_eval_reparam(rp, x) - link_eval(p, x)).norm() < 1e-12);
      }
      if (dims.has_sph()) {
        CovariateCase at_ref;
        at_ref.xs = rp.rs1;
        if (dims.has_euc()) at_ref.xe = Vector::Zero(dims.qe);
        CHECK((link_eval_reparam(rp, at_ref) - rp.b01).norm() < 1e-12);
      }
    }
  }

  LinkParams zero = make_random_link(LinkDims{3, 3, 2}, std::ref(rng));
  zero.bs.setZero();
  zero.be.setZero();
  ReparamLink rp = to_reparam(zero);
  for (int i = 0; i < 10; ++i) {
    CovariateCase x = make_random_case(zero.dims, rng);
    CHECK((link_eval_reparam(rp, x) - rp.b01).norm() < 1e-14);
  }
}

TEST_CASE("from_reparam functional round trip") {
  std::mt19937_64 rng(167);
  for (const LinkDims& dims : {LinkDims{3, 3, 2}, LinkDims{3, 4, 3}, LinkDims{5, 0, 5}}) {
    for (int draw = 0; draw < 20; ++draw) {
      LinkParams p = make_random_link(dims, rng);
      ReparamLink rp = to_reparam(p);
      FromReparamResult rec = from_reparam(rp);
      rec.params.validate();
      for (int i = 0; i < 100; ++i) {
        CovariateCase x = make_random_case(dims, rng);
        CHECK((link_eval(rec.params, x) - link_eval(p, x)).norm() < 1e-10);
      }

      // recovered scale diagonals match the originals up to ordering
      Vector s2_orig = Vector::Zero(dims.p - 1), s2_rec = Vector::Zero(dims.p - 1);
      if (dims.has_sph()) {
        s2_orig += p.bs.cwiseProduct(p.bs);
        s2_rec += rec.params.bs.cwiseProduct(rec.params.bs);
      }
      if (dims.has_euc()) {
        s2_orig += p.be.cwiseProduct(p.be);
        s2_rec += rec.params.be.cwiseProduct(rec.params.be);
      }
      CHECK((s2_orig - s2_rec).cwiseAbs().maxCoeff() < 1e-8);
    }
  }

  // Omega = 0 recovers a constant link
  LinkParams zero = make_random_link(LinkDims{3, 3, 2}, rng);
  zero.bs.setZero();
  zero.be.setZero();
  FromReparamResult rec = from_reparam(to_reparam(zero));
  CHECK(rec.params.bs.cwiseAbs().maxCoeff() == 0.0);
  CHECK(rec.params.be.cwiseAbs().maxCoeff() == 0.0);
  for (int i = 0; i < 10; ++i) {
    CovariateCase x = make_random_case(zero.dims, rng);
    CHECK((link_eval(rec.params, x) - zero.b01()).norm() < 1e-12);
  }
}

TEST_CASE("proj_constraint is an idempotent projection") {
  std::mt19937_64 rng(173);
  LinkDims dims{3, 3, 2};
  for (int draw = 0; draw < 20; ++draw) {
    Vector b01 = random_unit(3, rng);
    Vector rs1 = random_unit(3, rng);
    Matrix m(3, 5);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 5; ++j) m(i, j) = std::normal_distribution<double>()(rng);

    Matrix pm = proj_constraint(m, b01, rs1);
    CHECK((b01.transpose() * pm).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((pm.leftCols(3) * rs1).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((proj_constraint(pm, b01, rs1) - pm).cwiseAbs().maxCoeff() < 1e-12);

    LinkParams p = make_random_link(dims, rng);
    ReparamLink rp = to_reparam(p);
    CHECK((proj_constraint(rp.omega, rp.b01, rp.rs1) - rp.omega).cwiseAbs().maxCoeff() <
          1e-12);
  }
}

TEST_CASE("commutator_residual separates valid and perturbed Omega") {
  std::mt19937_64 rng(179);
  LinkDims dims{3, 3, 2};
  for (int draw = 0; draw < 20; ++draw) {
    LinkParams p = make_random_link(dims, rng, 0.4, 1.2);
    ReparamLink rp = to_reparam(p);
    CHECK(commutator_residual(rp) < 1e-10);

    ReparamLink bad = rp;
    Matrix noise(3, 5);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 5; ++j) noise(i, j) = std::normal_distribution<double>()(rng);
    bad.omega += 0.3 * noise;
    CHECK(commutator_residual(bad) > 1e-3);
  }

  ReparamLink zero;
  zero.dims = dims;
  zero.b01 = Vector::Unit(3, 0);
  zero.rs1 = Vector::Unit(3, 0);
  zero.omega = Matrix::Zero(3, 5);
  CHECK(commutator_residual(zero) == 0.0);
}

TEST_CASE("monotone attraction toward the reference direction") {
  std::mt19937_64 rng(181);
  LinkDims dims{3, 3, 2};
  for (int draw = 0; draw < 10; ++draw) {
    LinkParams p = make_random_link(dims, rng);
    CovariateCase x = make_random_case(dims, rng);
    if (t_transform(p, x).norm() < 1e-6) continue;

    auto profile = [&](double beta) {
      LinkParams scaled = p;
      scaled.bs *= beta;
      scaled.be *= beta;
      return p.b01().dot(link_eval(scaled, x));
    };
    CHECK(profile(0.0) == doctest::Approx(1.0));
    double prev = profile(0.1);
    for (double beta : {0.2, 0.5, 1.0, 2.0, 5.0, 10.0}) {
      double cur = profile(beta);
      CHECK(cur < prev);
      prev = cur;
    }
  }
}
