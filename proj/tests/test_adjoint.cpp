#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "mfc/adjoint.hpp"
#include "mfc/dynamics.hpp"
#include "test_helpers.hpp"

using namespace mfc;
using mfc_test::make_quad_problem;
using mfc_test::normal_points;

namespace {

/// Fills a control field with a deterministic per-slot formula (adapted by
/// construction, nonconstant across steps, nodes, and particles).
void formula_control(ControlField& u, double amplitude) {
  const int n = u.dim();
  const int N = u.particles();
  for (int k = 0; k < u.steps(); ++k) {
    LevelStore::Pin pin = u.field().pin_overwrite(k);
    for (std::int64_t j = 0; j < u.field().nodes(k); ++j) {
      auto block = u.field().node_block(pin.data(), j);
      for (int i = 0; i < N; ++i)
        for (int d = 0; d < n; ++d)
          block(d, i) = amplitude * std::sin(0.7 * k + 0.3 * static_cast<double>(j % 11) +
                                             0.13 * i + 0.41 * d);
    }
  }
}

double control_inner(const ScenarioTree& tree, const ControlField& a, const ControlField& b) {
  std::vector<double> probs, next;
  tree.root_probs(probs);
  double acc = 0.0;
  for (int k = 0; k < a.steps(); ++k) {
    LevelStore::Pin pa = a.field().pin(k);
    LevelStore::Pin pb = b.field().pin(k);
    acc += tree.grid().dt() *
           level_inner(pa.data(), pb.data(), probs, tree.nodes(k), a.dim(), a.particles());
    tree.advance_probs(probs, next);
    probs.swap(next);
  }
  return acc;
}

void axpy_control(ControlField& out, const ControlField& base, const ControlField& dir,
                  double t) {
  for (int k = 0; k < out.steps(); ++k) {
    LevelStore::Pin po = out.field().pin_overwrite(k);
    LevelStore::Pin pb = base.field().pin(k);
    LevelStore::Pin pd = dir.field().pin(k);
    const std::size_t count = out.field().level_doubles(k);
    for (std::size_t s = 0; s < count; ++s) po.data()[s] = pb.data()[s] + t * pd.data()[s];
  }
}

}  // namespace

TEST_CASE("linear terminal cost gives a constant adjoint") {
  // h = a . x, l = |v|^2/2 (no x dependence), F = F_T = 0: conditional
  // expectations preserve constants, so Z[k] = a exactly at every slot.
  ProblemSpec p = make_quad_problem(2, 0.3, 0.4, /*q=*/0.0, /*q_term=*/0.0, 0.0, 0.0);
  const Eigen::Vector2d a(0.8, -1.3);
  p.h = [a](ConstVec x) { return a.dot(x); };
  p.h_x = [a](ConstVec, RefVec out) { out = a; };
  p.h_xx = [](ConstVec, RefMat out) { out.setZero(); };
  p.running = make_zero_functional(2);
  p.terminal = make_zero_functional(2);

  const ScenarioTree tree(TimeGrid(0.0, 1.0, 4), 2, 2);
  const int N = 8;
  ControlField u(tree, N);
  formula_control(u, 0.4);
  ShiftPlan shifts(p, tree, N, CounterRng(3), false);
  ParticleEnsemble ens(tree, N);
  ens.set_initial(normal_points(1, 2, N));
  simulate_forward(p, u, shifts, ens);

  AdjointField z = solve_bsde(p, ens, u);
  for (int k = 0; k <= 4; ++k) {
    LevelStore::Pin pin = z.field().pin(k);
    for (std::int64_t j = 0; j < tree.nodes(k); ++j) {
      const auto block = z.field().node_block(static_cast<const double*>(pin.data()), j);
      for (int i = 0; i < N; ++i) {
        CHECK(block(0, i) == doctest::Approx(a[0]).epsilon(1e-15));
        CHECK(block(1, i) == doctest::Approx(a[1]).epsilon(1e-15));
      }
    }
  }
}

TEST_CASE("frozen particle: Z[k] = q x0 (T - t_k) exactly") {
  ProblemSpec p = make_quad_problem(1, 0.0, 0.0, /*q=*/0.7, /*q_term=*/0.0, 0.0, 0.0);
  p.running = make_zero_functional(1);  // keep only q x^2 / 2 in l
  const int K = 5;
  const ScenarioTree tree(TimeGrid(0.0, 1.0, K), 1, 1);
  const int N = 1;
  ControlField u(tree, N);
  u.fill(0.0);
  ShiftPlan shifts(p, tree, N, CounterRng(4), false);
  ParticleEnsemble ens(tree, N);
  const double x0 = 1.37;
  ens.set_initial(Eigen::MatrixXd::Constant(1, 1, x0));
  simulate_forward(p, u, shifts, ens);

  AdjointField z = solve_bsde(p, ens, u);
  const double dt = tree.grid().dt();
  for (int k = 0; k <= K; ++k) {
    LevelStore::Pin pin = z.field().pin(k);
    const double expected = 0.7 * x0 * (1.0 - k * dt);
    CHECK(pin.data()[0] == doctest::Approx(expected).epsilon(1e-14));
  }
}

TEST_CASE("control gradient matches central finite differences of the cost") {
  for (int dim : {1, 2}) {
    const ProblemSpec p = make_quad_problem(dim, 0.35, 0.25, 1.0, 0.5, 0.4, 0.2);
    const int K = dim == 1 ? 5 : 3;
    const ScenarioTree tree(TimeGrid(0.0, 1.0, K), 2, dim);
    const int N = 8;
    const Eigen::MatrixXd init = normal_points(21, dim, N);
    const ShiftPlan shifts(p, tree, N, CounterRng(77), false);

    ControlField u(tree, N);
    formula_control(u, 0.5);
    ParticleEnsemble ens(tree, N);
    ens.set_initial(init);
    simulate_forward(p, u, shifts, ens);

    ControlField grad(tree, N);
    cost_gradient(p, ens, u, &grad);

    ControlField dir(tree, N), trial(tree, N);
    const double eps = 1e-5;
    for (std::uint64_t trial_id = 0; trial_id < 20; ++trial_id) {
      // Deterministic pseudo-random direction.
      CounterRng rng(1000 + trial_id);
      for (int k = 0; k < K; ++k) {
        LevelStore::Pin pin = dir.field().pin_overwrite(k);
        const std::size_t count = dir.field().level_doubles(k);
        for (std::size_t s = 0; s < count; ++s)
          pin.data()[s] = rng.normal(static_cast<std::uint64_t>(k), s, 0, rng_channel::kProbe);
      }
      axpy_control(trial, u, dir, eps);
      const double up = simulate_cost(p, trial, shifts, init);
      axpy_control(trial, u, dir, -eps);
      const double dn = simulate_cost(p, trial, shifts, init);
      const double fd = (up - dn) / (2 * eps);
      const double analytic = control_inner(tree, grad, dir);
      CHECK(fd == doctest::Approx(analytic).epsilon(1e-6));
    }
  }
}

TEST_CASE("initial-state gradient Z[0] matches finite differences of the cost") {
  const ProblemSpec p = make_quad_problem(1, 0.3, 0.2, 1.0, 0.5, 0.4, 0.2);
  const int K = 6, N = 16;
  const ScenarioTree tree(TimeGrid(0.0, 1.0, K), 2, 1);
  const Eigen::MatrixXd init = normal_points(31, 1, N);
  const ShiftPlan shifts(p, tree, N, CounterRng(13), false);
  ControlField u(tree, N);
  formula_control(u, 0.3);

  ParticleEnsemble ens(tree, N);
  ens.set_initial(init);
  simulate_forward(p, u, shifts, ens);
  AdjointField z = solve_bsde(p, ens, u);
  LevelStore::Pin z0 = z.field().pin(0);
  Eigen::Map<const Eigen::MatrixXd> Z0(z0.data(), 1, N);

  CounterRng rng(55);
  const double eps = 1e-5;
  for (int rep = 0; rep < 5; ++rep) {
    Eigen::MatrixXd d(1, N);
    for (int i = 0; i < N; ++i)
      d(0, i) = rng.normal(static_cast<std::uint64_t>(rep), static_cast<std::uint64_t>(i), 0,
                           rng_channel::kProbe);
    const double up = simulate_cost(p, u, shifts, init + eps * d);
    const double dn = simulate_cost(p, u, shifts, init - eps * d);
    const double fd = (up - dn) / (2 * eps);
    // H_m pairing at the root: (1/N) sum_i Z0_i . d_i.
    const double analytic = (Z0.array() * d.array()).sum() / N;
    CHECK(fd == doctest::Approx(analytic).epsilon(1e-6));
  }
}

TEST_CASE("fused gradient equals l_v + E_c Z from the stored adjoint") {
  const ProblemSpec p = make_quad_problem(2, 0.2, 0.3, 1.0, 0.5, 0.4, 0.2);
  const ScenarioTree tree(TimeGrid(0.0, 1.0, 4), 2, 2);
  const int N = 8;
  ControlField u(tree, N);
  formula_control(u, 0.4);
  ShiftPlan shifts(p, tree, N, CounterRng(6), false);
  ParticleEnsemble ens(tree, N);
  ens.set_initial(normal_points(41, 2, N));
  simulate_forward(p, u, shifts, ens);

  ControlField grad(tree, N);
  cost_gradient(p, ens, u, &grad);
  AdjointField z = solve_bsde(p, ens, u);

  Eigen::VectorXd lv(2);
  for (int k = 0; k < 4; ++k) {
    LevelStore::Pin pg = grad.field().pin(k);
    LevelStore::Pin px = ens.field().pin(k);
    LevelStore::Pin pu = u.field().pin(k);
    LevelStore::Pin pz = z.field().pin(k + 1);
    for (std::int64_t j = 0; j < tree.nodes(k); ++j) {
      const auto G = grad.field().node_block(static_cast<const double*>(pg.data()), j);
      const auto X = ens.field().node_block(static_cast<const double*>(px.data()), j);
      const auto U = u.field().node_block(static_cast<const double*>(pu.data()), j);
      Eigen::MatrixXd ecz = Eigen::MatrixXd::Zero(2, N);
      for (int c = 0; c < tree.children(); ++c)
        ecz += tree.branch_probs()[c] *
               z.field().node_block(static_cast<const double*>(pz.data()), tree.child(j, c));
      for (int i = 0; i < N; ++i) {
        p.l_v(X.col(i), U.col(i), lv);
        CHECK((G.col(i) - (lv + ecz.col(i))).cwiseAbs().maxCoeff() < 1e-14);
      }
    }
  }
}

TEST_CASE("gradient map is strongly monotone with the declared margin") {
  // <G(u1) - G(u2), u1 - u2> >= margin * |u1 - u2|^2 - O(dt) slack.
  const ProblemSpec p = make_quad_problem(1, 0.3, 0.35, 1.0, 0.5, 0.4, 0.2);
  REQUIRE(check_convexity_margin(p) == doctest::Approx(1.0));
  const int K = 16, N = 32;
  const ScenarioTree tree(TimeGrid(0.0, 1.0, K), 2, 1);
  const Eigen::MatrixXd init = normal_points(51, 1, N);
  const ShiftPlan shifts(p, tree, N, CounterRng(8), false);

  auto gradient_of = [&](const ControlField& u, ControlField& g) {
    ParticleEnsemble ens(tree, N);
    ens.set_initial(init);
    simulate_forward(p, u, shifts, ens);
    cost_gradient(p, ens, u, &g);
  };

  ControlField u1(tree, N), u2(tree, N), g1(tree, N), g2(tree, N), diff_u(tree, N),
      diff_g(tree, N);
  for (int pair = 0; pair < 5; ++pair) {
    formula_control(u1, 0.3 + 0.1 * pair);
    u2 = ControlField(tree, N);
    formula_control(u2, 0.15);
    // Make u2 differ in a node-dependent way.
    for (int k = 0; k < K; ++k) {
      LevelStore::Pin pin = u2.field().pin(k);
      const std::size_t count = u2.field().level_doubles(k);
      for (std::size_t s = 0; s < count; ++s)
        pin.data()[s] += 0.05 * std::cos(0.1 * static_cast<double>(s % 101) + pair);
      pin.mark_dirty();
    }
    gradient_of(u1, g1);
    gradient_of(u2, g2);
    axpy_control(diff_u, u1, u2, -1.0);
    axpy_control(diff_g, g1, g2, -1.0);
    const double inner = control_inner(tree, diff_g, diff_u);
    const double norm_sq = control_inner(tree, diff_u, diff_u);
    CHECK(inner >= 0.95 * norm_sq);
  }
}
