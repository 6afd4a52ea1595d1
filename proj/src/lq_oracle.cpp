#include "mfc/lq_oracle.hpp"

#include <cmath>
#include <sstream>

#include "mfc/errors.hpp"

namespace mfc {

void LQSpec::validate() const {
  const double weights[] = {q, q_term, kappa, kappa_bar, kappa_term, kappa_bar_term};
  for (double w : weights)
    if (!(w >= 0.0)) throw InvalidArgument("LQSpec: cost weights must be nonnegative");
  if (dim < 1) throw InvalidArgument("LQSpec: dim must be positive");
  if (!(horizon > 0.0)) throw InvalidArgument("LQSpec: horizon must be positive");
  if (!(sigma >= 0.0) || !(beta >= 0.0))
    throw InvalidArgument("LQSpec: noise loadings must be nonnegative");
}

ProblemSpec make_lq_problem(const LQSpec& lq) {
  lq.validate();
  const int n = lq.dim;
  const double q = lq.q, qt = lq.q_term;
  ProblemSpec p;
  p.name = "lq";
  p.dim = n;
  p.horizon = lq.horizon;
  p.sigma = lq.sigma * Eigen::MatrixXd::Identity(n, n);
  p.beta = lq.beta * Eigen::MatrixXd::Identity(n, n);
  p.lambda = 1.0;

  p.l = [q](ConstVec x, ConstVec v) {
    return 0.5 * v.squaredNorm() + 0.5 * q * x.squaredNorm();
  };
  p.l_x = [q](ConstVec x, ConstVec, RefVec out) { out = q * x; };
  p.l_v = [](ConstVec, ConstVec v, RefVec out) { out = v; };
  p.l_xx = [q, n](ConstVec, ConstVec, RefMat out) {
    out = q * Eigen::MatrixXd::Identity(n, n);
  };
  p.l_xv = [n](ConstVec, ConstVec, RefMat out) { out.setZero(); };
  p.l_vv = [n](ConstVec, ConstVec, RefMat out) { out = Eigen::MatrixXd::Identity(n, n); };
  p.h = [qt](ConstVec x) { return 0.5 * qt * x.squaredNorm(); };
  p.h_x = [qt](ConstVec x, RefVec out) { out = qt * x; };
  p.h_xx = [qt, n](ConstVec, RefMat out) { out = qt * Eigen::MatrixXd::Identity(n, n); };
  p.running = make_quadratic_moment_functional(n, lq.kappa, lq.kappa_bar);
  p.terminal = make_quadratic_moment_functional(n, lq.kappa_term, lq.kappa_bar_term);

  p.l_sum_batch = [q](const ConstMat& X, const ConstMat& V) {
    return 0.5 * V.squaredNorm() + 0.5 * q * X.squaredNorm();
  };
  p.l_x_batch = [q](const ConstMat& X, const ConstMat&, RefMat out) { out = q * X; };
  p.l_v_batch = [](const ConstMat&, const ConstMat& V, RefMat out) { out = V; };
  p.h_sum_batch = [qt](const ConstMat& X) { return 0.5 * qt * X.squaredNorm(); };
  p.h_x_batch = [qt](const ConstMat& X, RefMat out) { out = qt * X; };

  Eigen::MatrixXd eye = Eigen::MatrixXd::Identity(n, n);
  const Eigen::VectorXd eye_flat = Eigen::Map<const Eigen::VectorXd>(eye.data(), n * n);
  p.l_xx_batch = [q, eye_flat](const ConstMat&, const ConstMat&, RefMat out) {
    out.colwise() = (q * eye_flat).eval();
  };
  p.l_xv_batch = [](const ConstMat&, const ConstMat&, RefMat out) { out.setZero(); };
  p.l_vv_batch = [eye_flat](const ConstMat&, const ConstMat&, RefMat out) {
    out.colwise() = eye_flat;
  };
  p.h_xx_batch = [qt, eye_flat](const ConstMat&, RefMat out) {
    out.colwise() = (qt * eye_flat).eval();
  };
  p.validate();
  return p;
}

namespace {

struct RiccatiState {
  double P, Q, c;
};

/// Backward RK4 over one substep of size h (h > 0 moves toward t0).
RiccatiState rk4_back(const LQSpec& lq, const RiccatiState& s, double h) {
  const double cf = lq.q + lq.kappa;       // fluctuation weight
  const double cm = lq.q + lq.kappa_bar;   // mean weight
  const double half_n = 0.5 * lq.dim;
  auto rhs = [&](const RiccatiState& y) {
    // d/dt, integrated in reverse: state(t - h) = state(t) - h * rhs.
    return RiccatiState{y.P * y.P - cf, y.Q * y.Q - cm,
                        -half_n * (lq.sigma * lq.sigma * y.P + lq.beta * lq.beta * y.Q)};
  };
  auto step = [](const RiccatiState& y, const RiccatiState& d, double a) {
    return RiccatiState{y.P + a * d.P, y.Q + a * d.Q, y.c + a * d.c};
  };
  const RiccatiState k1 = rhs(s);
  const RiccatiState k2 = rhs(step(s, k1, -0.5 * h));
  const RiccatiState k3 = rhs(step(s, k2, -0.5 * h));
  const RiccatiState k4 = rhs(step(s, k3, -h));
  return RiccatiState{s.P - h / 6.0 * (k1.P + 2 * k2.P + 2 * k3.P + k4.P),
                      s.Q - h / 6.0 * (k1.Q + 2 * k2.Q + 2 * k3.Q + k4.Q),
                      s.c - h / 6.0 * (k1.c + 2 * k2.c + 2 * k3.c + k4.c)};
}

/// Integrates terminal -> t0, filling knot arrays; substeps per knot chosen
/// so the RK4 substep is at most 2^-10.
void integrate(const LQSpec& lq, const TimeGrid& grid, int substeps, RiccatiSolution& out) {
  const int K = grid.steps;
  RiccatiState s{lq.q_term + lq.kappa_term, lq.q_term + lq.kappa_bar_term, 0.0};
  out.P[K] = s.P;
  out.Q[K] = s.Q;
  out.c[K] = s.c;
  const double h = grid.dt() / substeps;
  for (int k = K; k-- > 0;) {
    for (int m = 0; m < substeps; ++m) {
      s = rk4_back(lq, s, h);
      if (!(std::abs(s.P) < 1e6) || !(std::abs(s.Q) < 1e6))
        throw InvalidArgument("riccati_solve: solution exceeded 1e6, parameters unusable");
    }
    out.P[k] = s.P;
    out.Q[k] = s.Q;
    out.c[k] = s.c;
  }
}

}  // namespace

RiccatiSolution riccati_solve(const LQSpec& lq, const TimeGrid& grid) {
  lq.validate();
  if (std::abs(grid.horizon - lq.horizon) > 1e-12)
    throw InvalidArgument("riccati_solve: grid horizon differs from the problem horizon");
  RiccatiSolution sol;
  sol.grid = grid;
  const int K = grid.steps;
  sol.P.resize(K + 1);
  sol.Q.resize(K + 1);
  sol.c.resize(K + 1);
  const int substeps = std::max(1, static_cast<int>(std::ceil(grid.dt() * 1024.0)));
  integrate(lq, grid, substeps, sol);

  RiccatiSolution fine;
  fine.grid = grid;
  fine.P.resize(K + 1);
  fine.Q.resize(K + 1);
  fine.c.resize(K + 1);
  integrate(lq, grid, 2 * substeps, fine);
  sol.residual = std::max({(sol.P - fine.P).cwiseAbs().maxCoeff(),
                           (sol.Q - fine.Q).cwiseAbs().maxCoeff(),
                           (sol.c - fine.c).cwiseAbs().maxCoeff()});
  return sol;
}

TreeLQSolution lqr_tree_solve(const LQSpec& lq, const ScenarioTree& tree, int particles) {
  lq.validate();
  if (particles < 1) throw InvalidArgument("lqr_tree_solve: particles must be positive");
  if (tree.dim() != lq.dim)
    throw InvalidArgument("lqr_tree_solve: tree dimension differs from the problem");
  const TimeGrid& grid = tree.grid();
  const int K = grid.steps;
  const double dt = grid.dt();
  // Stencil second moment (total over coordinates); dim * dt up to stencil
  // rounding, and exactly what one step of the common shift injects.
  double s2 = 0.0;
  for (int c = 0; c < tree.children(); ++c)
    s2 += tree.branch_probs()[c] * tree.increments().col(c).squaredNorm();

  TreeLQSolution sol;
  sol.p.resize(K + 1);
  sol.q.resize(K + 1);
  sol.c.resize(K + 1);
  sol.gain_fluct.resize(K);
  sol.gain_mean.resize(K);
  sol.p[K] = lq.q_term + lq.kappa_term;
  sol.q[K] = lq.q_term + lq.kappa_bar_term;
  sol.c[K] = 0.0;
  const double idio = lq.sigma * lq.sigma * lq.dim * dt;
  const double common = lq.beta * lq.beta * s2;
  const double inv_n = 1.0 / particles;
  for (int k = K; k-- > 0;) {
    const double pn = sol.p[k + 1], qn = sol.q[k + 1];
    sol.gain_fluct[k] = -pn / (1.0 + pn * dt);
    sol.gain_mean[k] = -qn / (1.0 + qn * dt);
    sol.p[k] = (lq.q + lq.kappa) * dt + pn / (1.0 + pn * dt);
    sol.q[k] = (lq.q + lq.kappa_bar) * dt + qn / (1.0 + qn * dt);
    sol.c[k] = sol.c[k + 1] + 0.5 * pn * idio * (1.0 - inv_n) +
               0.5 * qn * (common + idio * inv_n);
  }
  return sol;
}

void lqr_rollout(const TreeLQSolution& sol, const ScenarioTree& tree, const ShiftPlan& shifts,
                 const ConstMat& initial, ControlField& u_out, ParticleEnsemble& ens_out) {
  const int K = tree.grid().steps;
  const double dt = tree.grid().dt();
  const int N = static_cast<int>(initial.cols());
  ens_out.set_initial(initial);
  for (int k = 0; k < K; ++k) {
    const ShiftPlan::Level shift = shifts.level(k);
    LevelStore::Pin px = ens_out.field().pin(k);
    LevelStore::Pin pu = u_out.field().pin_overwrite(k);
    LevelStore::Pin pc = ens_out.field().pin_overwrite(k + 1);
    const double a = sol.gain_fluct[k], b = sol.gain_mean[k];
    for (std::int64_t j = 0; j < tree.nodes(k); ++j) {
      const auto X = ens_out.field().node_block(static_cast<const double*>(px.data()), j);
      auto U = u_out.field().node_block(pu.data(), j);
      const Eigen::VectorXd m = X.rowwise().mean();
      U = a * (X.colwise() - m);
      U.colwise() += b * m;
      for (int c = 0; c < tree.children(); ++c) {
        const std::int64_t jc = tree.child(j, c);
        auto Xc = ens_out.field().node_block(pc.data(), jc);
        Xc = X + dt * U;
        shift.add(jc, Xc);
        if (!Xc.allFinite()) {
          std::ostringstream msg;
          msg << "lqr_rollout: non-finite state at step " << k + 1 << ", node " << jc;
          throw NumericalError(msg.str());
        }
      }
    }
    (void)N;
  }
}

}  // namespace mfc
