#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mfc/derivatives.hpp"
#include "mfc/solver.hpp"

namespace mfc {

/// Outcome of one property check.  The tolerance is split into the part
/// propagated from solver certificates (grad_tol driven) and the part owed to
/// discretization or Monte Carlo noise, so a FAIL can be attributed to the
/// math rather than to numerics.  `metadata` carries every parameter needed
/// to replay the check (grid sizes, seeds, counts).
struct CheckReport {
  enum class Status { kPass, kFail, kSkipped };

  std::string name;
  Status status = Status::kSkipped;
  double observed = 0.0;         // measured residual, ratio, or constant
  double bound = 0.0;            // target the observation is held against
  double tol_certificate = 0.0;  // solver-tolerance share of the allowance
  double tol_slack = 0.0;        // discretization / Monte Carlo share
  std::string note;              // skip reason or a one-line comparison
  std::vector<std::pair<std::string, double>> metadata;

  bool passed() const { return status == Status::kPass; }
  bool failed() const { return status == Status::kFail; }
  bool skipped() const { return status == Status::kSkipped; }
};

const char* to_string(CheckReport::Status s);

/// Runs independent check jobs (worker count from set_worker_count) and
/// returns their reports in declaration order.
std::vector<CheckReport> run_checks(const std::vector<std::function<CheckReport()>>& jobs);

// ============================================================================
// Chain rule for measure flows (Ito formula on the particle system).
// ============================================================================

struct ItoOptions {
  int paths = 64;           // sampled common-noise paths (iid, equal weight)
  std::uint64_t seed = 97;  // path and idiosyncratic draw seed
  double floor_rel = 1e-9;  // absolute residual floor, relative to |F| scale
};

/// Feedback-form control for the free-standing simulation checks: fills
/// u(k, X) column by column.  A null callback means zero control.
using FeedbackFn = std::function<void(int, const ConstMat&, RefMat)>;

/// Simulates the particle system along sampled common-noise paths with fresh
/// idiosyncratic draws and compares the per-step rate of E[F(m_k)] against
/// the drift term <dF/dnu, u>, the idiosyncratic second-order trace, and the
/// realized common-noise quadratic form.  The martingale part is subtracted
/// with its realized increments, so the residual carries only quadrature
/// noise: each step must sit within 3 Monte Carlo standard errors plus an
/// absolute floor.  Functionals that are exactly linear leave a residual at
/// rounding level.
///
/// Needs hess_dnu when sigma is nonzero and cross_kernel when beta is
/// nonzero; otherwise the report is SKIPPED with the missing piece named.
CheckReport check_ito(const ProblemSpec& spec, const MeasureFunctional& f,
                      const FeedbackFn& u, const ConstMat& initial, const ScenarioTree& tree,
                      const ItoOptions& opts = {});

// ============================================================================
// Convexity of the control objective.
// ============================================================================

struct ConvexityGapOptions {
  int trials = 50;
  int steps = 16;
  int branching = 2;
  int particles = 24;
  double control_scale = 1.0;  // std dev of the random control entries
  std::uint64_t seed = 1009;
  double slack_rel = 0.05;  // discretization slack as a fraction of the margin
};

/// Draws random control pairs and measures the gradient monotonicity
/// constant <G(u1) - G(u2), u1 - u2> / |u1 - u2|^2.  PASS when the smallest
/// observed constant stays above the declared convexity margin minus the
/// slack; an inflated margin declaration fails (negative control).
CheckReport check_convexity_gap(const ProblemSpec& spec, const ConstMat& initial,
                                const ConvexityGapOptions& opts = {});

// ============================================================================
// Dynamic programming and flow consistency of solved problems.
// ============================================================================

/// Re-solves the tail problem from every node at `split_step` (subtree and
/// anchored noise reproduce the original draws bitwise) and compares the
/// value with head running cost + probability-weighted sub-values.  The
/// discrete identity is exact at the optimum, so the allowance is purely the
/// solver certificate.  `rng` must be the generator the original shifts were
/// built from.
CheckReport check_dpp(const ProblemSpec& spec, const OptimalSolution& sol,
                      const ScenarioTree& tree, CounterRng rng, int split_step,
                      const SolveOptions& sub_opts = {});

/// Same tail re-solves, compared control table against control table: the
/// re-solved sub-problem must reproduce the original tail controls within a
/// multiple of the gradient tolerance (both solutions certify the same
/// strongly convex problem).
CheckReport check_flow(const ProblemSpec& spec, const OptimalSolution& sol,
                       const ScenarioTree& tree, CounterRng rng, int split_step,
                       const SolveOptions& sub_opts = {});

// ============================================================================
// Bellman equation residual at the initial time.
// ============================================================================

struct BellmanOptions {
  int probes = 8;             // Hutchinson probes for the idiosyncratic trace
  std::uint64_t seed = 4242;  // probe direction seed
  double cg_tol = 1e-9;       // linearized-system tolerance
  SolveOptions solve;         // options for the start-shifted re-solves
  double rel_bound = 0.05;    // residual bound relative to the largest term
};

/// Assembles the value-function equation at t0: the start-time derivative
/// (second-order one-sided difference on common random numbers), the averaged
/// Hamiltonian at the costate, the running functional, and the second-order
/// trace terms estimated through the linearized optimality system.  Reports
/// the residual relative to the largest term.  Skipped when the needed
/// second-order callbacks are absent (unless the corresponding noise is off).
CheckReport check_bellman(const ProblemSpec& spec, const OptimalSolution& sol,
                          const ScenarioTree& tree, CounterRng rng,
                          const BellmanOptions& opts = {});

// ============================================================================
// Master-equation residual for the tagged value (beta = 0, dim = 1).
// ============================================================================

struct MasterOptions {
  double eps1 = 0.10;       // coarser mixture weight (Richardson pair)
  double eps2 = 0.05;       // finer mixture weight
  int grid_points = 9;      // x1 grid for the measure-derivative fit
  double grid_span = 2.5;   // grid half-width in initial-spread units
  TaggedOptions tagged;     // tagged sub-solver options
  SolveOptions solve;       // base / shifted / injected solve options
  double rel_bound = 0.10;  // residual bound relative to the largest term
};

/// Evaluates the equation satisfied by the tagged value U(x, m, t) at t0 for
/// each sample x: start-time derivative of U (CRN re-solves), Hamiltonian at
/// DU, running functional derivative, the measure-derivative transport term
/// (finite-difference kernel fitted on an injection grid, then paired with
/// the optimal feedback over the population), and the second-order traces in
/// x and x1.  Three finite-difference layers stack, hence the loose default
/// bound.  Requires dim 1 and beta = 0.
CheckReport check_master_residual(const ProblemSpec& spec, const ConstMat& initial,
                                  const ScenarioTree& tree, CounterRng rng,
                                  const std::vector<double>& x_samples,
                                  const MasterOptions& opts = {});

/// Terminal boundary of the tagged value: on solved leaf measures, the
/// terminal functional derivative must integrate to zero against its own
/// measure (the constant that pins U(.,.,T) = h + dF_T/dnu) and the batch
/// gradient path must agree with the pointwise callbacks at rounding level.
CheckReport check_master_terminal(const ProblemSpec& spec, const OptimalSolution& sol,
                                  int max_leaves = 8);

// ============================================================================
// Growth / regularity constants across a refinement ladder.
// ============================================================================

struct LadderOptions {
  std::vector<std::pair<int, int>> rungs = {{16, 6}, {32, 8}, {64, 10}, {128, 12}};  // (N, K)
  int branching = 2;
  double initial_mean = 0.2;
  double initial_spread = 1.0;
  std::uint64_t seed = 31337;
  SolveOptions solve;
  double factor = 2.0;  // admissible spread of the empirical constants
};

/// |V| <= C (1 + |X0|^2): the empirical constant must be stable (within
/// `factor`) across the (N, K) refinement ladder.
CheckReport check_value_bounds(const ProblemSpec& spec, const LadderOptions& opts = {});

/// |V(t + e) - V(t)| <= C e (1 + |X0|^2) under start-time shifts on common
/// random numbers; stability of C across the ladder.
CheckReport check_time_regularity(const ProblemSpec& spec, const LadderOptions& opts = {});

/// |DV(X) - DV(X')| <= C |X - X'| across initial perturbations (gate:
/// stability of C across the ladder) plus a reported joint fit of the
/// start-time gradient drift against a e + b sqrt(e) (no gate on exponents).
CheckReport check_lipschitz_DV(const ProblemSpec& spec, const LadderOptions& opts = {});

// ============================================================================
// Independence pairing.
// ============================================================================

/// <D_X E F(m), Y> for Y independent of the atoms with zero mean must vanish
/// at Monte Carlo scale: |pairing| <= 3 standard errors.  The explicit-Y
/// overload is the sabotage hook (correlated Y must FAIL; a Y with visible
/// mean violates the precondition and is SKIPPED).
CheckReport check_independence(const MeasureFunctional& f, const EmpiricalMeasure& m,
                               const ConstMat& y);
CheckReport check_independence(const MeasureFunctional& f, const EmpiricalMeasure& m,
                               CounterRng rng, int reps = 8);

// ============================================================================
// Monotonicity diagnostics (never a gate).
// ============================================================================

struct MonotonicityEstimate {
  double running_min = 0.0;   // smallest sampled second-derivative form of F
  double terminal_min = 0.0;  // same for F_T
  double declared_running = 0.0;   // -c_prime
  double declared_terminal = 0.0;  // -c_T_prime
  int samples = 0;
  bool flagged = false;  // an observed form undercuts its declared bound
};

/// Samples the full second functional derivative quadratic form (per-atom
/// Hessian plus cross kernel) of F and F_T over random measures and vector
/// fields and reports empirical lower bounds next to the declared constants.
/// Diagnostic only; the CLI never gates on it.
MonotonicityEstimate estimate_monotonicity(const ProblemSpec& spec, int m_samples,
                                           CounterRng rng);

}  // namespace mfc
