#pragma once

#include <functional>
#include <string>

#include "mfc/adjoint.hpp"
#include "mfc/dynamics.hpp"
#include "mfc/ensemble.hpp"
#include "mfc/model.hpp"

namespace mfc {

/// Knobs for the gradient solvers.
struct SolveOptions {
  int max_iters = 1000;
  double grad_tol = 1e-9;  // on the time-RMS of the control gradient

  enum class StepRule {
    kAuto,             // fixed 1 / L, L estimated by gradient power iteration
    kFixed,            // fixed_step as given
    kBacktracking,     // start from fixed_step (or 1) and rely on halving only
    kStrongConvexity,  // 2 / (L + margin)
  };
  StepRule step_rule = StepRule::kAuto;
  double fixed_step = 1.0;
  int power_probes = 5;

  /// Proceed despite a nonpositive convexity margin (descent and the
  /// monotone backtracking guard still apply; uniqueness is no longer
  /// certified).  Off by default: solve_mfc refuses instead.
  bool allow_nonconvex = false;

  /// Optional progress sink called once per accepted iterate with
  /// (iteration, cost, rms gradient).
  std::function<void(int, double, double)> progress;
};

/// The converged tuple: control, its trajectory, the adjoint state along it,
/// and the certificates.  `value` is bit-for-bit the cost of `control`
/// (the same arithmetic evaluate_cost performs on the stored ensemble).
struct OptimalSolution {
  ControlField control;
  ParticleEnsemble ensemble;
  AdjointField adjoint;
  double value = 0.0;
  double grad_norm = 0.0;  // time-RMS at exit
  double grad_sup = 0.0;   // max-abs gradient entry at exit
  int iterations = 0;      // accepted gradient steps
  double margin = 0.0;     // convexity margin of the problem
  double step = 0.0;       // final step size
  bool converged = false;  // grad_norm <= grad_tol
};

/// Cost of a control along an already-simulated trajectory: left-endpoint
/// running quadrature plus the terminal level, identical arithmetic (and
/// therefore identical rounding) to simulate_forward's cost accumulation.
double evaluate_cost(const ProblemSpec& spec, const ControlField& u,
                     const ParticleEnsemble& ens);

/// Gradient descent on the discrete control problem.
///
/// Refuses (SolvabilityError) when the displacement-convexity margin is not
/// positive, unless opts.allow_nonconvex.  Iterates u <- u - s G with the
/// exact discrete gradient, halving s until the trial lowers the cost (or,
/// once cost differences sink into rounding, the gradient norm); stops when
/// the time-RMS of G drops to opts.grad_tol.  Throws NumericalError when
/// halving hits its floor without either decrease (the gradient then no
/// longer descends, e.g. under a wrong derivative callback).  `warm` seeds
/// the control table.
OptimalSolution solve_mfc(const ProblemSpec& spec, const ConstMat& initial,
                          const ScenarioTree& tree, const ShiftPlan& shifts,
                          const SolveOptions& opts = {}, const ControlField* warm = nullptr);

/// Per-step affine feedback class u = A x + B mean + c (coefficients shared
/// by every node and particle of a step).  For the linear-quadratic family
/// the class contains the optimum, so the fixed point matches solve_mfc; in
/// general it is a restriction and its value upper-bounds the open-loop one.
struct FeedbackPolicy {
  std::vector<Eigen::MatrixXd> A;  // per step, n x n
  std::vector<Eigen::MatrixXd> B;
  std::vector<Eigen::VectorXd> c;

  /// u = A[k] x + B[k] m + c[k].
  Eigen::VectorXd apply(int k, ConstVec x, ConstVec m) const;
};

struct FeedbackSolution {
  FeedbackPolicy policy;
  OptimalSolution open;  // the induced control table and its certificates
  int sweeps = 0;        // fixed-point iterations
};

/// Fixed-point iteration on the feedback rule: roll the policy forward,
/// solve the adjoint, map (X, E_c Z) through the pointwise control
/// minimizer, and project the result back onto the affine class by
/// probability-weighted least squares per step.  Oscillation (three
/// consecutive cost increases) halves the update damping; persistent
/// failure to damp raises NumericalError.
FeedbackSolution solve_feedback(const ProblemSpec& spec, const ConstMat& initial,
                                const ScenarioTree& tree, const ShiftPlan& shifts,
                                const SolveOptions& opts = {});

/// Value with the quadratic-growth certificate |V| <= C (1 + |X0|^2_Hm):
/// reports the ratio the bound caps.
struct ValueReport {
  double value = 0.0;
  double initial_norm_sq = 0.0;  // (1/N) sum_i |x_i|^2
  double ratio = 0.0;            // |value| / (1 + initial_norm_sq)
};

ValueReport report_value(const ProblemSpec& spec, const ConstMat& initial,
                         const OptimalSolution& sol);

}  // namespace mfc
