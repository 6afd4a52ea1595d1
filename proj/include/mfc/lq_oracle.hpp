#pragma once

#include <Eigen/Dense>

#include "mfc/dynamics.hpp"
#include "mfc/grid.hpp"
#include "mfc/model.hpp"
#include "mfc/tree.hpp"

namespace mfc {

/// Linear-quadratic family with isotropic weights:
///   l = 1/2 |v|^2 + q/2 |x|^2,         h = q_term/2 |x|^2,
///   F   = kappa/2 Var + kappa_bar/2 |mean|^2,
///   F_T = kappa_term/2 Var + kappa_bar_term/2 |mean|^2,
/// all coefficients >= 0, sigma and beta scalar multiples of the identity.
///
/// Under the conditional decomposition x = mean + y the problem splits into
/// two independent scalar-per-coordinate linear-quadratic problems: the
/// fluctuation y (driven by sigma, weighted by q + kappa) and the
/// conditional mean (driven by beta, weighted by q + kappa_bar).  That
/// split is what both oracles below exploit.
struct LQSpec {
  int dim = 1;
  double horizon = 1.0;
  double sigma = 0.0;
  double beta = 0.0;
  double q = 0.0;
  double q_term = 0.0;
  double kappa = 0.0;
  double kappa_bar = 0.0;
  double kappa_term = 0.0;
  double kappa_bar_term = 0.0;

  /// Throws InvalidArgument on negative weights or a nonpositive horizon.
  void validate() const;
};

/// Full ProblemSpec for the instance, batch fast paths included.
ProblemSpec make_lq_problem(const LQSpec& lq);

/// Continuous-time baseline
///   V(t, m) = 1/2 P(t) Var(m) + 1/2 Q(t) |mean(m)|^2 + c(t),
///   P' = P^2 - (q + kappa),        P(T) = q_term + kappa_term,
///   Q' = Q^2 - (q + kappa_bar),    Q(T) = q_term + kappa_bar_term,
///   c' = -(dim / 2) (sigma^2 P + beta^2 Q),   c(T) = 0,
/// integrated backward by RK4 with substeps well below the output grid.
/// `residual` is a Richardson error estimate (re-integration at half the
/// substep); it bounds the distance to the exact flow on the knots.
struct RiccatiSolution {
  TimeGrid grid;
  Eigen::VectorXd P, Q, c;  // knot values, size steps + 1
  double residual = 0.0;

  double value(double var0, double mean_sq0) const {
    return 0.5 * P[0] * var0 + 0.5 * Q[0] * mean_sq0 + c[0];
  }
};

RiccatiSolution riccati_solve(const LQSpec& lq, const TimeGrid& grid);

/// Exact backward dynamic programming for the discrete problem the particle
/// solver actually minimizes (left-endpoint quadrature, Euler dynamics,
/// exact branch probabilities).  Per-node value ansatz
///   V_k = 1/2 p_k Var + 1/2 q_k |mean|^2 + c_k,
/// closed by the recursions (per coordinate, dt the grid step)
///   p_k = (q + kappa) dt     + p_{k+1} / (1 + p_{k+1} dt),
///   q_k = (q + kappa_bar) dt + q_{k+1} / (1 + q_{k+1} dt),
/// with the optimal feedback u = a_k (x - mean) + b_k mean,
///   a_k = -p_{k+1} / (1 + p_{k+1} dt),   b_k = -q_{k+1} / (1 + q_{k+1} dt).
/// The offset absorbs the noise injection (s2 the stencil second moment,
/// N the particle count):
///   c_k = c_{k+1} + p_{k+1}/2 sigma^2 dim dt (1 - 1/N)
///       + q_{k+1}/2 (beta^2 s2 + sigma^2 dim dt / N).
///
/// For sigma = 0 this is the exact optimum of the solver's finite problem.
/// For sigma > 0 it is the exact optimum in expectation over idiosyncratic
/// draws (certainty equivalence keeps the gains); a sample-average solve on
/// frozen draws can dip below it by adapting to the realized noise.
struct TreeLQSolution {
  Eigen::VectorXd p, q, c;     // size steps + 1
  Eigen::VectorXd gain_fluct;  // a_k, size steps
  Eigen::VectorXd gain_mean;   // b_k, size steps

  double value(double var0, double mean_sq0) const {
    return 0.5 * p[0] * var0 + 0.5 * q[0] * mean_sq0 + c[0];
  }
};

TreeLQSolution lqr_tree_solve(const LQSpec& lq, const ScenarioTree& tree, int particles);

/// Rolls the oracle feedback forward from `initial`, materializing the
/// control table and trajectory it induces on the tree (same step
/// arithmetic as simulate_forward, so the pair is directly comparable with
/// a solver run slot by slot).
void lqr_rollout(const TreeLQSolution& sol, const ScenarioTree& tree, const ShiftPlan& shifts,
                 const ConstMat& initial, ControlField& u_out, ParticleEnsemble& ens_out);

}  // namespace mfc
