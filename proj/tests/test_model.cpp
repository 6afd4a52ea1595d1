#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "mfc/errors.hpp"
#include "mfc/model.hpp"
#include "mfc/rng.hpp"
#include "test_helpers.hpp"

using namespace mfc;
using mfc_test::make_test_problem;

namespace {

EmpiricalMeasure random_measure(std::uint64_t seed, int dim, int atoms, bool equal) {
  CounterRng rng(seed);
  Eigen::MatrixXd pts(dim, atoms);
  for (int i = 0; i < atoms; ++i)
    for (int d = 0; d < dim; ++d)
      pts(d, i) = rng.normal(0, static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(i), 0);
  if (equal) return equal_weight_measure(pts);
  EmpiricalMeasure m;
  m.points = pts;
  m.weights.resize(atoms);
  for (int i = 0; i < atoms; ++i) m.weights[i] = 0.5 + rng.uniform(1, 0, static_cast<std::uint64_t>(i), 0);
  m.weights /= m.weights.sum();
  m.weights[atoms - 1] += 1.0 - m.weights.sum();
  return m;
}

/// Nontrivial smooth moment functional in dimension 2 used as a second-order
/// test subject: y = (m1_a, m1_b, second moment, smooth statistic).
MeasureFunctional make_smooth_functional() {
  MomentBasis basis;
  basis.r = 4;
  basis.dim = 2;
  basis.phi = [](const ConstMat& X, RefMat out) {
    out.row(0) = X.row(0);
    out.row(1) = X.row(1);
    out.row(2) = X.colwise().squaredNorm();
    out.row(3) = (X.row(0) + 2.0 * X.row(1)).array().sin();
  };
  basis.dphi = [](const ConstMat& X, int s, RefMat out) {
    switch (s) {
      case 0:
        out.row(0).setOnes();
        out.row(1).setZero();
        break;
      case 1:
        out.row(0).setZero();
        out.row(1).setOnes();
        break;
      case 2:
        out = 2.0 * X;
        break;
      default:
        out.row(0) = (X.row(0) + 2.0 * X.row(1)).array().cos();
        out.row(1) = 2.0 * out.row(0);
        break;
    }
  };
  basis.d2phi = [](ConstVec x, int s, RefMat out) {
    out.setZero();
    if (s == 2) {
      out.diagonal().setConstant(2.0);
    } else if (s == 3) {
      const double w = -std::sin(x[0] + 2.0 * x[1]);
      out(0, 0) = w;
      out(0, 1) = 2.0 * w;
      out(1, 0) = 2.0 * w;
      out(1, 1) = 4.0 * w;
    }
  };

  MomentObjective obj;
  obj.value = [](ConstVec y) {
    return 0.5 * y[0] * y[0] + y[0] * y[2] + 0.4 * std::cos(y[3]) + 0.7 * y[1];
  };
  obj.grad = [](ConstVec y, RefVec out) {
    out[0] = y[0] + y[2];
    out[1] = 0.7;
    out[2] = y[0];
    out[3] = -0.4 * std::sin(y[3]);
  };
  obj.hess = [](ConstVec y, RefMat out) {
    out.setZero();
    out(0, 0) = 1.0;
    out(0, 2) = 1.0;
    out(2, 0) = 1.0;
    out(3, 3) = -0.4 * std::cos(y[3]);
  };
  return make_moment_functional(std::move(basis), std::move(obj));
}

}  // namespace

TEST_CASE("quadratic moment functional evaluates variance and mean") {
  const EmpiricalMeasure m = random_measure(7, 3, 40, false);
  const double kappa = 0.8, kappa_bar = 0.3;
  const MeasureFunctional f = make_quadratic_moment_functional(3, kappa, kappa_bar);
  const Eigen::VectorXd mu = mean(m);
  const double var = second_moment(m) - mu.squaredNorm();
  CHECK(f.value(m.view()) ==
        doctest::Approx(0.5 * kappa * var + 0.5 * kappa_bar * mu.squaredNorm()).epsilon(1e-13));
}

TEST_CASE("dnu integrates to zero against its own measure") {
  const EmpiricalMeasure m = random_measure(8, 2, 25, false);
  for (const MeasureFunctional& f :
       {make_quadratic_moment_functional(2, 0.6, 0.2), make_smooth_functional()}) {
    double total = 0;
    for (Eigen::Index i = 0; i < m.atoms(); ++i)
      total += m.weights[i] * f.dnu(m.view(), m.points.col(i));
    CHECK(std::abs(total) < 1e-12);
  }
}

TEST_CASE("functional derivative validator: pass, exact-linear, and sabotage") {
  const EmpiricalMeasure m = random_measure(21, 2, 12, true);
  const EmpiricalMeasure mp = random_measure(22, 2, 9, false);

  MeasureFunctional quad = make_quadratic_moment_functional(2, 0.5, 0.25);
  auto rep = validate_functional_derivative(quad, m, mp);
  CHECK(rep.pass);
  CHECK(rep.observed_order >= 1.0);
  CHECK(rep.observed_order == doctest::Approx(2.0).epsilon(0.05));

  MeasureFunctional smooth = make_smooth_functional();
  rep = validate_functional_derivative(smooth, m, mp);
  CHECK(rep.pass);
  CHECK(rep.observed_order >= 1.3);

  // Exactly linear functional: remainder at machine precision.
  MomentBasis basis;
  basis.r = 1;
  basis.dim = 2;
  basis.phi = [](const ConstMat& X, RefMat out) { out.row(0) = X.row(0) + X.row(1); };
  basis.dphi = [](const ConstMat& X, int, RefMat out) {
    out.setOnes();
    (void)X;
  };
  basis.d2phi = [](ConstVec, int, RefMat out) { out.setZero(); };
  MomentObjective lin;
  lin.value = [](ConstVec y) { return 3.0 * y[0]; };
  lin.grad = [](ConstVec, RefVec out) { out[0] = 3.0; };
  rep = validate_functional_derivative(make_moment_functional(basis, lin), m, mp);
  CHECK(rep.pass);

  // Sabotaged derivative scales dnu by 1.1: first-order remainder survives.
  MeasureFunctional broken = make_quadratic_moment_functional(2, 0.5, 0.25);
  auto good_dnu = broken.dnu;
  broken.dnu = [good_dnu](const MeasureView& mv, ConstVec x) { return 1.1 * good_dnu(mv, x); };
  rep = validate_functional_derivative(broken, m, mp);
  CHECK_FALSE(rep.pass);
}

TEST_CASE("discrete second derivative identity against finite differences") {
  // d2F/dxi dxl = wi delta_il hess_dnu(xi) + wi wl cross_kernel(xi, xl) for
  // F-hat(X) = F(emp(X)).  Finite differences of value() are the oracle.
  const MeasureFunctional f = make_smooth_functional();
  EmpiricalMeasure m = random_measure(31, 2, 6, false);
  const int n = 2, N = static_cast<int>(m.atoms());
  const double hstep = 1e-4;

  auto value_at = [&](const Eigen::MatrixXd& pts) {
    MeasureView v{pts.data(), m.weights.data(), 2, m.atoms()};
    return f.value(v);
  };

  Eigen::MatrixXd hess(n, n), kernel(n, n);
  for (int i = 0; i < N; ++i) {
    for (int l = 0; l < N; ++l) {
      for (int a = 0; a < n; ++a) {
        for (int b = 0; b < n; ++b) {
          auto eval = [&](double da, double db) {
            Eigen::MatrixXd p = m.points;
            p(a, i) += da;
            p(b, l) += db;
            return value_at(p);
          };
          const double fd = (eval(hstep, hstep) - eval(hstep, -hstep) - eval(-hstep, hstep) +
                             eval(-hstep, -hstep)) /
                            (4 * hstep * hstep);
          f.hess_dnu(m.view(), m.points.col(i), hess);
          f.cross_kernel(m.view(), m.points.col(i), m.points.col(l), kernel);
          const double wi = m.weights[i], wl = m.weights[l];
          const double analytic = (i == l ? wi * hess(a, b) : 0.0) + wi * wl * kernel(a, b);
          CHECK(fd == doctest::Approx(analytic).epsilon(1e-5).scale(1.0));
        }
      }
    }
  }
}

TEST_CASE("first derivative identity: dF-hat/dxi = wi grad_dnu(xi)") {
  const MeasureFunctional f = make_smooth_functional();
  EmpiricalMeasure m = random_measure(33, 2, 7, false);
  const double hstep = 1e-6;
  Eigen::VectorXd g(2);
  for (int i = 0; i < m.atoms(); ++i) {
    f.grad_dnu(m.view(), m.points.col(i), g);
    for (int a = 0; a < 2; ++a) {
      auto eval = [&](double d) {
        Eigen::MatrixXd p = m.points;
        p(a, i) += d;
        MeasureView v{p.data(), m.weights.data(), 2, m.atoms()};
        return f.value(v);
      };
      const double fd = (eval(hstep) - eval(-hstep)) / (2 * hstep);
      CHECK(fd == doctest::Approx(m.weights[i] * g[a]).epsilon(1e-6).scale(1.0));
    }
  }
}

TEST_CASE("batch fast paths agree with pointwise fallbacks") {
  const MeasureFunctional fast = make_smooth_functional();
  MeasureFunctional slow = fast;
  slow.grad_dnu_batch = nullptr;
  slow.hess_apply_batch = nullptr;
  slow.kernel_apply_batch = nullptr;

  const EmpiricalMeasure m = random_measure(44, 2, 30, false);
  Eigen::MatrixXd X = m.points;
  Eigen::MatrixXd dir = Eigen::MatrixXd::Random(2, 30);

  Eigen::MatrixXd a(2, 30), b(2, 30);
  functional_grad_batch(fast, m.view(), X, a);
  functional_grad_batch(slow, m.view(), X, b);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-13);

  a.setZero();
  b.setZero();
  functional_hess_apply(fast, m.view(), X, dir, a);
  functional_hess_apply(slow, m.view(), X, dir, b);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-13);

  a.setZero();
  b.setZero();
  functional_kernel_apply(fast, m.view(), X, dir, a);
  functional_kernel_apply(slow, m.view(), X, dir, b);
  CHECK((a - b).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("convexity margin formula") {
  ProblemSpec p = make_test_problem();
  p.lambda = 1.0;
  p.horizon = 1.0;
  p.c_l_prime = p.c_h_prime = p.c_prime = p.c_T_prime = 0.0;
  CHECK(check_convexity_margin(p) == doctest::Approx(1.0));
  p.c_h_prime = 0.5;
  CHECK(check_convexity_margin(p) == doctest::Approx(0.5));
  p.c_h_prime = 0.0;
  p.c_l_prime = 1.0;
  CHECK(check_convexity_margin(p) == doctest::Approx(0.5));
  p.c_T_prime = 0.3;
  p.c_prime = 0.2;
  CHECK(check_convexity_margin(p) == doctest::Approx(1.0 - 0.3 - 0.5 * 1.2));
}

TEST_CASE("pointwise gradient validator passes a correct spec and fails sabotage") {
  ProblemSpec good = make_test_problem();
  auto rep = validate_pointwise_gradients(good);
  INFO("worst callback: ", rep.worst_callback, " err ", rep.max_rel_error);
  CHECK(rep.pass);

  ProblemSpec bad = make_test_problem();
  auto h_x = bad.h_x;
  bad.h_x = [h_x](ConstVec x, RefVec out) {
    h_x(x, out);
    out[0] += 1e-3;  // deliberate defect
  };
  rep = validate_pointwise_gradients(bad);
  CHECK_FALSE(rep.pass);
  CHECK(rep.worst_callback == "h_x");
}

TEST_CASE("problem validation catches missing callbacks") {
  ProblemSpec p = make_test_problem();
  CHECK_NOTHROW(p.validate());
  p.l_xv = nullptr;
  CHECK_THROWS_AS(p.validate(), InvalidArgument);
  p = make_test_problem();
  p.sigma = Eigen::MatrixXd::Identity(3, 3);
  CHECK_THROWS_AS(p.validate(), InvalidArgument);
}

TEST_CASE("spec batch helpers match pointwise helpers") {
  ProblemSpec p = make_test_problem();
  CounterRng rng(5);
  const int M = 17;
  Eigen::MatrixXd X(2, M), V(2, M);
  for (int i = 0; i < M; ++i)
    for (int d = 0; d < 2; ++d) {
      X(d, i) = rng.normal(0, static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(i), 0);
      V(d, i) = rng.normal(1, static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(i), 0);
    }

  // Install batch paths computed from the pointwise ones, then compare the
  // dispatcher against the raw loops.
  ProblemSpec q = p;
  q.l_sum_batch = [&p](const ConstMat& Xb, const ConstMat& Vb) {
    double acc = 0;
    for (Eigen::Index i = 0; i < Xb.cols(); ++i) acc += p.l(Xb.col(i), Vb.col(i));
    return acc;
  };
  CHECK(spec_l_sum(q, X, V) == doctest::Approx(spec_l_sum(p, X, V)).epsilon(1e-15));

  Eigen::MatrixXd a(2, M), b(2, M);
  spec_l_x(p, X, V, a);
  spec_l_v(p, X, V, b);
  Eigen::VectorXd g(2);
  for (int i = 0; i < M; ++i) {
    p.l_x(X.col(i), V.col(i), g);
    CHECK((a.col(i) - g).cwiseAbs().maxCoeff() == 0.0);
    p.l_v(X.col(i), V.col(i), g);
    CHECK((b.col(i) - g).cwiseAbs().maxCoeff() == 0.0);
  }

  Eigen::MatrixXd hxx(4, M);
  spec_l_xx(p, X, V, hxx);
  Eigen::MatrixXd blk(2, 2);
  p.l_xx(X.col(3), V.col(3), blk);
  CHECK((Eigen::Map<const Eigen::MatrixXd>(hxx.col(3).data(), 2, 2) - blk).cwiseAbs().maxCoeff() ==
        0.0);
}
