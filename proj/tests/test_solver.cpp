#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mfc/errors.hpp"
#include "mfc/hamiltonian.hpp"
#include "mfc/lq_oracle.hpp"
#include "mfc/solver.hpp"
#include "test_helpers.hpp"

using namespace mfc;
using mfc_test::make_quad_problem;
using mfc_test::make_test_problem;
using mfc_test::normal_points;

namespace {

/// Deterministic non-trivial control table.
void formula_fill(ControlField& u, double scale) {
  for (int k = 0; k < u.steps(); ++k) {
    LevelStore::Pin pin = u.field().pin_overwrite(k);
    const std::size_t count = u.field().level_doubles(k);
    for (std::size_t s = 0; s < count; ++s)
      pin.data()[s] = scale * std::sin(0.7 * static_cast<double>(s) + 1.3 * k);
  }
}

void empirical_moments(const ConstMat& pts, double& var, double& mean_sq) {
  const Eigen::VectorXd m = pts.rowwise().mean();
  var = (pts.colwise() - m).squaredNorm() / static_cast<double>(pts.cols());
  mean_sq = m.squaredNorm();
}

LQSpec matching_lq(int dim, double sigma, double beta) {
  LQSpec lq;
  lq.dim = dim;
  lq.horizon = 1.0;
  lq.sigma = sigma;
  lq.beta = beta;
  lq.q = 1.0;
  lq.q_term = 0.5;
  lq.kappa = 0.4;
  lq.kappa_bar = 0.2;
  return lq;  // mirrors make_quad_problem defaults
}

}  // namespace

TEST_CASE("zero state cost solves in zero iterations") {
  ProblemSpec spec = make_quad_problem(2, 0.0, 0.0, /*q=*/0.0, /*q_term=*/0.0,
                                       /*kappa=*/0.0, /*kappa_bar=*/0.0);
  ScenarioTree tree(TimeGrid(0.0, 1.0, 4), 2, 2);
  const int N = 6;
  ShiftPlan shifts(spec, tree, N, CounterRng(11), true);
  const Eigen::MatrixXd x0 = normal_points(5, 2, N);

  OptimalSolution sol = solve_mfc(spec, x0, tree, shifts);
  CHECK(sol.iterations == 0);
  CHECK(sol.converged);
  CHECK(sol.value == 0.0);
  CHECK(sol.grad_norm == 0.0);
  CHECK(field_max_abs(sol.control.field()) == 0.0);

  ValueReport rep = report_value(spec, x0, sol);
  CHECK(rep.value == 0.0);
  CHECK(rep.initial_norm_sq == doctest::Approx(x0.squaredNorm() / N).epsilon(1e-15));
  CHECK(rep.ratio == 0.0);
}

TEST_CASE("matches the exact tree oracle on the linear-quadratic instance") {
  const int N = 16, K = 12;
  ProblemSpec spec = make_quad_problem(1, 0.0, 0.5);
  ScenarioTree tree(TimeGrid(0.0, 1.0, K), 2, 1);
  ShiftPlan shifts(spec, tree, N, CounterRng(2024), true);
  const Eigen::MatrixXd x0 = normal_points(7, 1, N, 0.3, 1.1);

  SolveOptions opts;
  opts.grad_tol = 1e-11;
  opts.max_iters = 2000;
  OptimalSolution sol = solve_mfc(spec, x0, tree, shifts, opts);
  CHECK(sol.converged);
  CHECK(sol.margin == doctest::Approx(1.0));
  CHECK(sol.step > 0.0);

  const TreeLQSolution oracle = lqr_tree_solve(matching_lq(1, 0.0, 0.5), tree, N);
  ControlField u_star(tree, N);
  ParticleEnsemble ens_star(tree, N);
  lqr_rollout(oracle, tree, shifts, x0, u_star, ens_star);

  // Slot-by-slot agreement with the independently derived optimum.
  CHECK(field_max_diff(sol.control.field(), u_star.field()) < 1e-7);
  CHECK(field_max_diff(sol.ensemble.field(), ens_star.field()) < 1e-7);

  double var0, mean_sq0;
  empirical_moments(x0, var0, mean_sq0);
  CHECK(sol.value == doctest::Approx(oracle.value(var0, mean_sq0)).epsilon(1e-10));

  // The reported value is the stored trajectory's cost, bit for bit.
  CHECK(sol.value == evaluate_cost(spec, sol.control, sol.ensemble));
  // And the oracle control cannot do better.
  CHECK(evaluate_cost(spec, u_star, ens_star) >= sol.value - 1e-12);
}

TEST_CASE("value error against the continuous baseline halves with the step") {
  const int N = 64;
  ProblemSpec spec = make_quad_problem(1, 0.0, 0.0);
  const Eigen::MatrixXd x0 = normal_points(9, 1, N, -0.2, 0.9);
  double var0, mean_sq0;
  empirical_moments(x0, var0, mean_sq0);

  SolveOptions opts;
  opts.grad_tol = 1e-11;
  opts.max_iters = 4000;
  auto solve_at = [&](int steps) {
    ScenarioTree tree(TimeGrid(0.0, 1.0, steps), 1, 1);
    ShiftPlan shifts(spec, tree, N, CounterRng(31), true);
    return solve_mfc(spec, x0, tree, shifts, opts).value;
  };
  const RiccatiSolution cont = riccati_solve(matching_lq(1, 0.0, 0.0), TimeGrid(0.0, 1.0, 16));
  REQUIRE(cont.residual < 1e-10);
  const double exact = cont.value(var0, mean_sq0);

  const double err16 = std::abs(solve_at(16) - exact);
  const double err32 = std::abs(solve_at(32) - exact);
  CHECK(err16 > 1e-6);  // the comparison must not be vacuous
  CHECK(err16 / err32 == doctest::Approx(2.0).epsilon(0.25));
}

TEST_CASE("cost is midpoint-convex with the certified margin") {
  const int N = 8, K = 8;
  ProblemSpec spec = make_quad_problem(2, 0.3, 0.5);
  ScenarioTree tree(TimeGrid(0.0, 1.0, K), 2, 2);
  ShiftPlan shifts(spec, tree, N, CounterRng(42), true);
  const Eigen::MatrixXd x0 = normal_points(3, 2, N);
  const double margin = check_convexity_margin(spec);
  REQUIRE(margin == doctest::Approx(1.0));

  ControlField u1(tree, N), u2(tree, N), mid(tree, N), diff(tree, N);
  formula_fill(u1, 0.8);
  formula_fill(u2, -0.5);
  field_axpy(u1.field(), 1.0, u2.field(), mid.field());
  field_axpy(mid.field(), -0.5, mid.field(), mid.field());  // mid = (u1 + u2) / 2
  field_axpy(u1.field(), -1.0, u2.field(), diff.field());

  const double j1 = simulate_cost(spec, u1, shifts, x0);
  const double j2 = simulate_cost(spec, u2, shifts, x0);
  const double jm = simulate_cost(spec, mid, shifts, x0);
  const double gap = control_inner(diff, diff);
  REQUIRE(gap > 0.1);
  CHECK(jm <= 0.5 * j1 + 0.5 * j2 - (margin / 8.0) * gap + 1e-10 * (1.0 + std::abs(j1)));
}

TEST_CASE("descent is monotone and reports progress") {
  const int N = 8, K = 8;
  ProblemSpec spec = make_quad_problem(1, 0.3, 0.4);
  ScenarioTree tree(TimeGrid(0.0, 1.0, K), 2, 1);
  ShiftPlan shifts(spec, tree, N, CounterRng(17), true);
  const Eigen::MatrixXd x0 = normal_points(13, 1, N, 0.5);

  std::vector<int> iters;
  std::vector<double> costs;
  SolveOptions opts;
  opts.grad_tol = 1e-10;
  opts.progress = [&](int it, double cost, double rms) {
    iters.push_back(it);
    costs.push_back(cost);
    CHECK(rms >= 0.0);
  };
  OptimalSolution sol = solve_mfc(spec, x0, tree, shifts, opts);
  CHECK(sol.converged);
  REQUIRE(costs.size() >= 2);
  CHECK(static_cast<int>(costs.size()) == sol.iterations);
  for (std::size_t i = 0; i < iters.size(); ++i)
    CHECK(iters[i] == static_cast<int>(i) + 1);
  // Decrease is monotone up to the rounding of the cost itself.
  const double slack = 1e-14 * (1.0 + std::abs(costs.front()));
  for (std::size_t i = 1; i < costs.size(); ++i) CHECK(costs[i] <= costs[i - 1] + slack);
  CHECK(costs.back() < costs.front());
}

TEST_CASE("solution minimizes the pointwise Lagrangian against the costate") {
  const int N = 6, K = 6;
  ProblemSpec spec = make_test_problem();
  ScenarioTree tree(TimeGrid(0.0, 1.0, K), 2, 2);
  ShiftPlan shifts(spec, tree, N, CounterRng(23), true);
  const Eigen::MatrixXd x0 = normal_points(19, 2, N, 0.2, 0.8);

  SolveOptions opts;
  opts.grad_tol = 1e-10;
  opts.max_iters = 5000;
  opts.allow_nonconvex = true;  // trig state costs carry no declared bounds
  OptimalSolution sol = solve_mfc(spec, x0, tree, shifts, opts);
  REQUIRE(sol.converged);

  // Strong monotonicity of l_v turns the gradient bound into a pointwise
  // control bound: |u - argmin| <= |G| / lambda_min with lambda_min = 0.7.
  const double bound = sol.grad_sup / 0.7 + 1e-11;
  double worst = 0.0;
  for (int k = 0; k < K; ++k) {
    LevelStore::Pin px = sol.ensemble.field().pin(k);
    LevelStore::Pin pu = sol.control.field().pin(k);
    LevelStore::Pin pz = sol.adjoint.field().pin(k + 1);
    for (std::int64_t j = 0; j < tree.nodes(k); ++j) {
      const auto X = sol.ensemble.field().node_block(
          static_cast<const double*>(px.data()), j);
      const auto U = sol.control.field().node_block(
          static_cast<const double*>(pu.data()), j);
      Eigen::MatrixXd P = Eigen::MatrixXd::Zero(X.rows(), X.cols());
      for (int c = 0; c < tree.children(); ++c)
        P += tree.branch_probs()[c] * sol.adjoint.field().node_block(
                                          static_cast<const double*>(pz.data()),
                                          tree.child(j, c));
      for (int i = 0; i < N; ++i) {
        const Eigen::VectorXd warm = U.col(i);
        const HamiltonianEval eval =
            argmin_lagrangian(spec, X.col(i), P.col(i), 1e-12, &warm);
        worst = std::max(worst, (U.col(i) - eval.u_star).cwiseAbs().maxCoeff());
      }
    }
  }
  CHECK(worst <= bound);
}

TEST_CASE("tail re-solve reproduces the tail of the full solution") {
  const int N = 8, K = 10, k1 = 4;
  const std::int64_t j_root = 5;

  for (double sigma : {0.0, 0.3}) {
    CAPTURE(sigma);
    ProblemSpec spec = make_quad_problem(1, sigma, 0.5);
    ScenarioTree tree(TimeGrid(0.0, 1.0, K), 2, 1);
    ShiftPlan shifts(spec, tree, N, CounterRng(777), true);
    const Eigen::MatrixXd x0 = normal_points(29, 1, N, 0.4);

    SolveOptions opts;
    opts.grad_tol = 1e-11;
    opts.max_iters = 4000;
    OptimalSolution sol = solve_mfc(spec, x0, tree, shifts, opts);
    REQUIRE(sol.converged);

    Eigen::MatrixXd x_mid;
    {
      LevelStore::Pin pin = sol.ensemble.field().pin(k1);
      x_mid = sol.ensemble.field().node_block(
          static_cast<const double*>(pin.data()), j_root);
    }

    // Same seed plus the (step, node) anchor reproduces the parent draws.
    ScenarioTree sub(TimeGrid(tree.grid().t(k1), 1.0, K - k1), 2, 1);
    ShiftPlan sub_shifts(spec, sub, N, CounterRng(777), true, k1, j_root);
    OptimalSolution tail = solve_mfc(spec, x_mid, sub, sub_shifts, opts);
    REQUIRE(tail.converged);

    double u_diff = 0.0, x_diff = 0.0;
    std::int64_t scale = 1;
    for (int k = 0; k < K - k1; ++k) {
      LevelStore::Pin pf = sol.control.field().pin(k1 + k);
      LevelStore::Pin ps = tail.control.field().pin(k);
      LevelStore::Pin xf = sol.ensemble.field().pin(k1 + k);
      LevelStore::Pin xs = tail.ensemble.field().pin(k);
      for (std::int64_t j = 0; j < sub.nodes(k); ++j) {
        const std::int64_t jf = j_root * scale + j;
        u_diff = std::max(
            u_diff,
            (sol.control.field().node_block(static_cast<const double*>(pf.data()), jf) -
             tail.control.field().node_block(static_cast<const double*>(ps.data()), j))
                .cwiseAbs()
                .maxCoeff());
        x_diff = std::max(
            x_diff,
            (sol.ensemble.field().node_block(static_cast<const double*>(xf.data()), jf) -
             tail.ensemble.field().node_block(static_cast<const double*>(xs.data()), j))
                .cwiseAbs()
                .maxCoeff());
      }
      scale *= tree.children();
    }
    CHECK(u_diff < 1e-8);
    CHECK(x_diff < 1e-8);
  }
}

TEST_CASE("value scales quadratically with the initial condition") {
  const int N = 32, K = 12;
  ProblemSpec spec = make_quad_problem(1, 0.0, 0.0);
  ScenarioTree tree(TimeGrid(0.0, 1.0, K), 1, 1);
  ShiftPlan shifts(spec, tree, N, CounterRng(57), true);
  const Eigen::MatrixXd x0 = normal_points(37, 1, N, 0.6);

  SolveOptions opts;
  opts.grad_tol = 1e-12;
  opts.max_iters = 6000;
  const double v1 = solve_mfc(spec, x0, tree, shifts, opts).value;
  const double v2 = solve_mfc(spec, Eigen::MatrixXd(2.0 * x0), tree, shifts, opts).value;
  REQUIRE(v1 > 1e-3);
  CHECK(v2 / v1 == doctest::Approx(4.0).epsilon(1e-9));
}

TEST_CASE("feedback fixed point matches the open-loop optimum on LQ") {
  const int N = 8, K = 8;
  ProblemSpec spec = make_quad_problem(1, 0.0, 0.5);
  ScenarioTree tree(TimeGrid(0.0, 1.0, K), 2, 1);
  ShiftPlan shifts(spec, tree, N, CounterRng(61), true);
  const Eigen::MatrixXd x0 = normal_points(41, 1, N, 0.3);

  SolveOptions fb_opts;
  fb_opts.max_iters = 300;
  FeedbackSolution fb = solve_feedback(spec, x0, tree, shifts, fb_opts);
  CHECK(fb.sweeps < 300);

  SolveOptions opts;
  opts.grad_tol = 1e-11;
  opts.max_iters = 2000;
  OptimalSolution sol = solve_mfc(spec, x0, tree, shifts, opts);
  CHECK(std::abs(fb.open.value - sol.value) < 1e-6);
  CHECK(fb.open.grad_norm < 1e-6);

  // The fitted coefficients recover the exact backward-induction gains
  // wherever the features identify them (k >= 1: the node means differ).
  const TreeLQSolution oracle = lqr_tree_solve(matching_lq(1, 0.0, 0.5), tree, N);
  for (int k = 1; k < K; ++k) {
    CAPTURE(k);
    CHECK(std::abs(fb.policy.A[k](0, 0) - oracle.gain_fluct[k]) < 1e-7);
    CHECK(std::abs(fb.policy.B[k](0, 0) -
                   (oracle.gain_mean[k] - oracle.gain_fluct[k])) < 1e-7);
    CHECK(std::abs(fb.policy.c[k][0]) < 1e-7);
  }
  // At the root a lone node makes mean and intercept collinear; the fitted
  // rule still evaluates correctly on that node's data.
  const Eigen::VectorXd m0 = x0.rowwise().mean();
  for (int i = 0; i < N; ++i) {
    const double want = oracle.gain_fluct[0] * (x0(0, i) - m0[0]) +
                        oracle.gain_mean[0] * m0[0];
    CHECK(std::abs(fb.policy.apply(0, x0.col(i), m0)[0] - want) < 1e-7);
  }
}

TEST_CASE("feedback on a zero problem settles immediately at zero") {
  ProblemSpec spec = make_quad_problem(1, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
  ScenarioTree tree(TimeGrid(0.0, 1.0, 4), 2, 1);
  const int N = 4;
  ShiftPlan shifts(spec, tree, N, CounterRng(5), true);
  const Eigen::MatrixXd x0 = normal_points(43, 1, N);

  FeedbackSolution fb = solve_feedback(spec, x0, tree, shifts);
  CHECK(fb.sweeps == 1);
  CHECK(fb.open.value == 0.0);
  CHECK(field_max_abs(fb.open.control.field()) == 0.0);
}

TEST_CASE("affine feedback cannot beat the open-loop optimum off the LQ family") {
  const int N = 8, K = 6;
  ProblemSpec spec = make_quad_problem(1, 0.0, 0.4, /*q=*/0.0, /*q_term=*/0.3,
                                       /*kappa=*/0.0, /*kappa_bar=*/0.0);
  spec.name = "quartic-test";
  spec.l = [](ConstVec x, ConstVec v) {
    const double s = x.squaredNorm();
    return 0.5 * v.squaredNorm() + 0.05 * s * s;
  };
  spec.l_x = [](ConstVec x, ConstVec, RefVec out) { out = 0.2 * x.squaredNorm() * x; };
  spec.l_xx = [](ConstVec x, ConstVec, RefMat out) {
    out = 0.2 * (x.squaredNorm() * Eigen::MatrixXd::Identity(x.size(), x.size()) +
                 2.0 * x * x.transpose());
  };
  ScenarioTree tree(TimeGrid(0.0, 1.0, K), 2, 1);
  ShiftPlan shifts(spec, tree, N, CounterRng(67), true);
  const Eigen::MatrixXd x0 = normal_points(47, 1, N, 0.0, 1.5);

  SolveOptions opts;
  opts.grad_tol = 1e-10;
  opts.max_iters = 4000;
  OptimalSolution sol = solve_mfc(spec, x0, tree, shifts, opts);
  REQUIRE(sol.converged);

  SolveOptions fb_opts;
  fb_opts.max_iters = 150;
  FeedbackSolution fb = solve_feedback(spec, x0, tree, shifts, fb_opts);
  CHECK(std::isfinite(fb.open.value));
  CHECK(fb.open.value >= sol.value - 1e-9);
  CHECK(fb.open.value <= sol.value + 0.1 * (1.0 + std::abs(sol.value)));
}

TEST_CASE("refuses a nonpositive convexity margin unless overridden") {
  const int N = 4, K = 4;
  ProblemSpec spec = make_quad_problem(1, 0.0, 0.3);
  ScenarioTree tree(TimeGrid(0.0, 1.0, K), 2, 1);
  ShiftPlan shifts(spec, tree, N, CounterRng(3), true);
  const Eigen::MatrixXd x0 = normal_points(53, 1, N);

  const double base = solve_mfc(spec, x0, tree, shifts).value;

  ProblemSpec doubted = spec;
  doubted.c_h_prime = 5.0;  // declared bound kills the margin certificate
  REQUIRE(check_convexity_margin(doubted) < 0.0);
  CHECK_THROWS_AS(solve_mfc(doubted, x0, tree, shifts), SolvabilityError);
  CHECK_THROWS_AS(solve_feedback(doubted, x0, tree, shifts), SolvabilityError);

  SolveOptions opts;
  opts.allow_nonconvex = true;
  OptimalSolution sol = solve_mfc(doubted, x0, tree, shifts, opts);
  CHECK(sol.value == base);  // the declared bounds never enter the arithmetic
  CHECK(sol.margin < 0.0);

  SolveOptions bad;
  bad.grad_tol = 0.0;
  CHECK_THROWS_AS(solve_mfc(spec, x0, tree, shifts, bad), InvalidArgument);
}

TEST_CASE("evaluate_cost replays the forward accumulation bit for bit") {
  const int N = 8, K = 7;
  ProblemSpec spec = make_quad_problem(2, 0.4, 0.3);
  ScenarioTree tree(TimeGrid(0.0, 1.0, K), 2, 2);
  ShiftPlan shifts(spec, tree, N, CounterRng(71), true);
  const Eigen::MatrixXd x0 = normal_points(59, 2, N);

  ControlField u(tree, N);
  formula_fill(u, 0.6);
  ParticleEnsemble ens(tree, N);
  ens.set_initial(x0);
  double cost = 0.0;
  simulate_forward(spec, u, shifts, ens, &cost);

  CHECK(evaluate_cost(spec, u, ens) == cost);
  CHECK(simulate_cost(spec, u, shifts, x0) == cost);
}

TEST_CASE("fixed and strong-convexity step rules reach the same optimum") {
  const int N = 6, K = 6;
  ProblemSpec spec = make_quad_problem(1, 0.2, 0.3);
  ScenarioTree tree(TimeGrid(0.0, 1.0, K), 2, 1);
  ShiftPlan shifts(spec, tree, N, CounterRng(83), true);
  const Eigen::MatrixXd x0 = normal_points(61, 1, N, 0.4);

  SolveOptions opts;
  opts.grad_tol = 1e-10;
  opts.max_iters = 4000;

  opts.step_rule = SolveOptions::StepRule::kAuto;
  const double v_auto = solve_mfc(spec, x0, tree, shifts, opts).value;

  opts.step_rule = SolveOptions::StepRule::kFixed;
  opts.fixed_step = 0.25;
  const double v_fixed = solve_mfc(spec, x0, tree, shifts, opts).value;

  opts.step_rule = SolveOptions::StepRule::kStrongConvexity;
  const double v_strong = solve_mfc(spec, x0, tree, shifts, opts).value;

  opts.step_rule = SolveOptions::StepRule::kBacktracking;
  opts.fixed_step = 4.0;  // deliberately too large; halving must recover
  const double v_back = solve_mfc(spec, x0, tree, shifts, opts).value;

  CHECK(std::abs(v_fixed - v_auto) < 1e-10);
  CHECK(std::abs(v_strong - v_auto) < 1e-10);
  CHECK(std::abs(v_back - v_auto) < 1e-10);
}

TEST_CASE("warm start from the optimum converges immediately") {
  const int N = 6, K = 6;
  ProblemSpec spec = make_quad_problem(1, 0.0, 0.4);
  ScenarioTree tree(TimeGrid(0.0, 1.0, K), 2, 1);
  ShiftPlan shifts(spec, tree, N, CounterRng(97), true);
  const Eigen::MatrixXd x0 = normal_points(67, 1, N);

  SolveOptions opts;
  opts.grad_tol = 1e-10;
  OptimalSolution first = solve_mfc(spec, x0, tree, shifts, opts);
  REQUIRE(first.converged);
  OptimalSolution again = solve_mfc(spec, x0, tree, shifts, opts, &first.control);
  CHECK(again.iterations == 0);
  CHECK(again.value == first.value);
}
