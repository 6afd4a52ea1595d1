#include "mfc/solver.hpp"

#include <cmath>
#include <sstream>
#include <vector>

#include "mfc/errors.hpp"
#include "mfc/hamiltonian.hpp"
#include "mfc/rng.hpp"

namespace mfc {

double evaluate_cost(const ProblemSpec& spec, const ControlField& u,
                     const ParticleEnsemble& ens) {
  const ScenarioTree& tree = ens.field().tree();
  const int K = tree.grid().steps;
  const int N = ens.particles();
  const double dt = tree.grid().dt();
  std::vector<double> probs, next_probs;
  tree.root_probs(probs);
  double cost = 0.0;
  for (int k = 0; k < K; ++k) {
    LevelStore::Pin xp = ens.field().pin(k);
    LevelStore::Pin up = u.field().pin(k);
    cost += dt * running_cost_level(spec, k, tree, xp.data(), up.data(), N, probs);
    tree.advance_probs(probs, next_probs);
    probs.swap(next_probs);
  }
  LevelStore::Pin xk = ens.field().pin(K);
  cost += terminal_cost_level(spec, tree, xk.data(), N, probs);
  return cost;
}

namespace {

/// Largest curvature of the gradient map along random directions: power
/// iteration on d -> [G(u + eps d) - G(u)] / eps in the control metric.
double estimate_lipschitz(const ProblemSpec& spec, const ConstMat& initial,
                          const ScenarioTree& tree, const ShiftPlan& shifts,
                          const ControlField& u, const ControlField& grad_u, int probes) {
  const int N = static_cast<int>(initial.cols());
  ControlField dir(tree, N), trial(tree, N), grad_trial(tree, N);
  CounterRng rng(0x11be57u);
  for (int k = 0; k < dir.steps(); ++k) {
    LevelStore::Pin pin = dir.field().pin_overwrite(k);
    const std::size_t count = dir.field().level_doubles(k);
    for (std::size_t s = 0; s < count; ++s)
      pin.data()[s] =
          rng.normal(static_cast<std::uint64_t>(k), s, 0, rng_channel::kProbe);
  }
  ParticleEnsemble ens(tree, N);
  double lam = 0.0;
  for (int it = 0; it < probes; ++it) {
    const double nrm = std::sqrt(control_inner(dir, dir));
    if (!(nrm > 0.0)) break;
    const double eps = 1e-3 / nrm;
    field_axpy(u.field(), eps, dir.field(), trial.field());
    ens.set_initial(initial);
    simulate_forward(spec, trial, shifts, ens);
    cost_gradient(spec, ens, trial, &grad_trial);
    // dir <- (G(u + eps d) - G(u)) / eps, the Hessian applied to d.
    field_axpy(grad_trial.field(), -1.0, grad_u.field(), dir.field());
    for (int k = 0; k < dir.steps(); ++k) {
      LevelStore::Pin pin = dir.field().pin(k);
      pin.mark_dirty();
      const std::size_t count = dir.field().level_doubles(k);
      for (std::size_t s = 0; s < count; ++s) pin.data()[s] /= eps;
    }
    lam = std::sqrt(control_inner(dir, dir)) * nrm / (nrm * nrm);
  }
  return lam;
}

}  // namespace

OptimalSolution solve_mfc(const ProblemSpec& spec, const ConstMat& initial,
                          const ScenarioTree& tree, const ShiftPlan& shifts,
                          const SolveOptions& opts, const ControlField* warm) {
  spec.validate();
  const double margin = check_convexity_margin(spec);
  if (margin <= 0.0 && !opts.allow_nonconvex) {
    std::ostringstream msg;
    msg << "solve_mfc: convexity margin " << margin
        << " is not positive; the optimizer is not certified unique "
           "(set allow_nonconvex to proceed anyway)";
    throw SolvabilityError(msg.str());
  }
  if (!(opts.grad_tol > 0.0)) throw InvalidArgument("solve_mfc: grad_tol must be positive");
  const int N = static_cast<int>(initial.cols());

  OptimalSolution sol;
  sol.margin = margin;
  sol.control = ControlField(tree, N);
  if (warm) {
    field_copy(warm->field(), sol.control.field());
  } else {
    sol.control.fill(0.0);
  }
  sol.ensemble = ParticleEnsemble(tree, N);
  sol.ensemble.set_initial(initial);
  double cost = 0.0;
  simulate_forward(spec, sol.control, shifts, sol.ensemble, &cost);

  ControlField grad(tree, N), trial(tree, N);
  ParticleEnsemble ens_trial(tree, N);
  GradientNorms norms = cost_gradient(spec, sol.ensemble, sol.control, &grad);

  double step = opts.fixed_step;
  switch (opts.step_rule) {
    case SolveOptions::StepRule::kFixed:
    case SolveOptions::StepRule::kBacktracking:
      step = opts.fixed_step;
      break;
    case SolveOptions::StepRule::kAuto:
    case SolveOptions::StepRule::kStrongConvexity: {
      const double lip = estimate_lipschitz(spec, initial, tree, shifts, sol.control, grad,
                                            opts.power_probes);
      if (lip > 0.0)
        step = opts.step_rule == SolveOptions::StepRule::kAuto
                   ? 1.0 / lip
                   : 2.0 / (lip + std::max(margin, 0.0));
      else
        step = opts.fixed_step;
      break;
    }
  }
  if (!(step > 0.0)) throw InvalidArgument("solve_mfc: step size must be positive");
  const double step_cap = step;

  ControlField grad_trial(tree, N);
  int iters = 0;
  while (norms.rms > opts.grad_tol && iters < opts.max_iters) {
    // Halve until the trial lowers the cost.  Near the optimum the cost
    // difference s <G,G> sinks below the rounding of the cost itself long
    // before the gradient does, so a trial that contracts the gradient norm
    // is accepted too (under s <= 1/L that contraction is what strong
    // convexity guarantees).
    bool accepted = false;
    bool fresh_grad = false;
    GradientNorms norms_trial;
    double cost_trial = 0.0;
    for (int halvings = 0; halvings < 60; ++halvings) {
      field_axpy(sol.control.field(), -step, grad.field(), trial.field());
      ens_trial.set_initial(initial);
      simulate_forward(spec, trial, shifts, ens_trial, &cost_trial);
      if (cost_trial < cost) {
        accepted = true;
        break;
      }
      norms_trial = cost_gradient(spec, ens_trial, trial, &grad_trial);
      if (norms_trial.rms < norms.rms) {
        accepted = true;
        fresh_grad = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) {
      std::ostringstream msg;
      msg << "solve_mfc: no descent at step " << step << " after 60 halvings (iteration "
          << iters << ", cost " << cost << ", rms " << norms.rms << ")";
      throw NumericalError(msg.str());
    }
    std::swap(sol.control, trial);
    std::swap(sol.ensemble, ens_trial);
    cost = cost_trial;
    ++iters;
    if (fresh_grad) {
      std::swap(grad, grad_trial);
      norms = norms_trial;
    } else {
      norms = cost_gradient(spec, sol.ensemble, sol.control, &grad);
    }
    if (opts.progress) opts.progress(iters, cost, norms.rms);
    // Let an over-halved step recover toward the estimate.
    step = std::min(step * 1.25, step_cap);
  }

  sol.value = cost;
  sol.grad_norm = norms.rms;
  sol.grad_sup = norms.sup;
  sol.iterations = iters;
  sol.step = step;
  sol.converged = norms.rms <= opts.grad_tol;
  sol.adjoint = solve_bsde(spec, sol.ensemble, sol.control);
  return sol;
}

// ============================================================================
// Affine feedback backend.
// ============================================================================

Eigen::VectorXd FeedbackPolicy::apply(int k, ConstVec x, ConstVec m) const {
  const auto uk = static_cast<std::size_t>(k);
  return A[uk] * x + B[uk] * m + c[uk];
}

namespace {

/// Rolls the policy forward, materializing the control table it induces.
double rollout_policy(const ProblemSpec& spec, const FeedbackPolicy& pol,
                      const ConstMat& initial, const ScenarioTree& tree,
                      const ShiftPlan& shifts, ControlField& u, ParticleEnsemble& ens) {
  const int K = tree.grid().steps;
  const double dt = tree.grid().dt();
  ens.set_initial(initial);
  for (int k = 0; k < K; ++k) {
    const ShiftPlan::Level shift = shifts.level(k);
    LevelStore::Pin px = ens.field().pin(k);
    LevelStore::Pin pu = u.field().pin_overwrite(k);
    LevelStore::Pin pc = ens.field().pin_overwrite(k + 1);
    const auto uk = static_cast<std::size_t>(k);
    for (std::int64_t j = 0; j < tree.nodes(k); ++j) {
      const auto X = ens.field().node_block(static_cast<const double*>(px.data()), j);
      auto U = u.field().node_block(pu.data(), j);
      const Eigen::VectorXd m = X.rowwise().mean();
      U = pol.A[uk] * X;
      U.colwise() += pol.B[uk] * m + pol.c[uk];
      for (int c = 0; c < tree.children(); ++c) {
        const std::int64_t jc = tree.child(j, c);
        auto Xc = ens.field().node_block(pc.data(), jc);
        Xc = X + dt * U;
        shift.add(jc, Xc);
        if (!Xc.allFinite()) {
          std::ostringstream msg;
          msg << "solve_feedback: non-finite state at step " << k + 1 << ", node " << jc;
          throw NumericalError(msg.str());
        }
      }
    }
  }
  return evaluate_cost(spec, u, ens);
}

/// Probability-weighted least squares of the target table against the
/// features (x, mean, 1) at one level.  A small ridge keeps degenerate
/// feature sets (single node, single particle) solvable; it only shifts
/// coefficients inside the data null space, not fitted values.
void fit_affine(const ScenarioTree& tree, int k, const TreeField& states,
                const TreeField& targets, const std::vector<double>& probs,
                Eigen::MatrixXd& a_out, Eigen::MatrixXd& b_out, Eigen::VectorXd& c_out) {
  const int n = states.dim();
  const int N = states.particles();
  const int f = 2 * n + 1;
  Eigen::MatrixXd gram = Eigen::MatrixXd::Zero(f, f);
  Eigen::MatrixXd moment = Eigen::MatrixXd::Zero(f, n);
  Eigen::VectorXd feat(f);
  LevelStore::Pin px = states.pin(k);
  LevelStore::Pin pt = targets.pin(k);
  for (std::int64_t j = 0; j < tree.nodes(k); ++j) {
    const auto X = states.node_block(static_cast<const double*>(px.data()), j);
    const auto T = targets.node_block(static_cast<const double*>(pt.data()), j);
    const Eigen::VectorXd m = X.rowwise().mean();
    const double w = probs[static_cast<std::size_t>(j)] / N;
    for (int i = 0; i < N; ++i) {
      feat.head(n) = X.col(i);
      feat.segment(n, n) = m;
      feat[2 * n] = 1.0;
      gram.noalias() += w * feat * feat.transpose();
      moment.noalias() += w * feat * T.col(i).transpose();
    }
  }
  gram.diagonal().array() += 1e-12 * (1.0 + gram.trace());
  const Eigen::MatrixXd theta = gram.ldlt().solve(moment);  // f x n
  a_out = theta.topRows(n).transpose();
  b_out = theta.middleRows(n, n).transpose();
  c_out = theta.row(2 * n).transpose();
}

}  // namespace

FeedbackSolution solve_feedback(const ProblemSpec& spec, const ConstMat& initial,
                                const ScenarioTree& tree, const ShiftPlan& shifts,
                                const SolveOptions& opts) {
  spec.validate();
  const double margin = check_convexity_margin(spec);
  if (margin <= 0.0 && !opts.allow_nonconvex)
    throw SolvabilityError("solve_feedback: convexity margin is not positive");
  const int N = static_cast<int>(initial.cols());
  const int K = tree.grid().steps;
  const int n = tree.dim();

  FeedbackSolution out;
  out.policy.A.assign(static_cast<std::size_t>(K), Eigen::MatrixXd::Zero(n, n));
  out.policy.B.assign(static_cast<std::size_t>(K), Eigen::MatrixXd::Zero(n, n));
  out.policy.c.assign(static_cast<std::size_t>(K), Eigen::VectorXd::Zero(n));

  ControlField u(tree, N), u_prev(tree, N), targets(tree, N);
  ParticleEnsemble ens(tree, N);
  double cost = rollout_policy(spec, out.policy, initial, tree, shifts, u, ens);
  field_copy(u.field(), u_prev.field());
  double damping = 1.0;
  int rises = 0;
  const double feedback_tol = 1e-11;
  bool settled = false;

  std::vector<double> probs, next_probs;
  Eigen::MatrixXd a_fit, b_fit;
  Eigen::VectorXd c_fit;
  for (int sweep = 0; sweep < opts.max_iters && !settled; ++sweep) {
    // Pointwise minimizer targets along the current trajectory.
    AdjointField z = solve_bsde(spec, ens, u);
    tree.root_probs(probs);
    for (int k = 0; k < K; ++k) {
      LevelStore::Pin pz = z.field().pin(k + 1);
      LevelStore::Pin pt = targets.field().pin_overwrite(k);
      LevelStore::Pin pu = u.field().pin(k);
      LevelStore::Pin px = ens.field().pin(k);
      // p = E_c Z[k+1], the discrete costate the first-order condition uses.
      for (std::int64_t j = 0; j < tree.nodes(k); ++j) {
        auto T = targets.field().node_block(pt.data(), j);
        T.setZero();
        for (int c = 0; c < tree.children(); ++c)
          T += tree.branch_probs()[c] *
               z.field().node_block(static_cast<const double*>(pz.data()), tree.child(j, c));
      }
      // Seed the minimizer with the current controls, then overwrite the
      // targets in place.
      {
        Eigen::Map<Eigen::VectorXd> tf(pt.data(),
                                       static_cast<Eigen::Index>(targets.field().level_doubles(k)));
        Eigen::Map<const Eigen::VectorXd> uf(
            pu.data(), static_cast<Eigen::Index>(u.field().level_doubles(k)));
        Eigen::VectorXd costate = tf;
        tf = uf;
        feedback_level(spec, px.data(), costate.data(), pt.data(), tree.nodes(k), N, 1e-11);
      }
      fit_affine(tree, k, ens.field(), targets.field(), probs, a_fit, b_fit, c_fit);
      const auto uk = static_cast<std::size_t>(k);
      out.policy.A[uk] = (1.0 - damping) * out.policy.A[uk] + damping * a_fit;
      out.policy.B[uk] = (1.0 - damping) * out.policy.B[uk] + damping * b_fit;
      out.policy.c[uk] = (1.0 - damping) * out.policy.c[uk] + damping * c_fit;
      tree.advance_probs(probs, next_probs);
      probs.swap(next_probs);
    }
    const double new_cost = rollout_policy(spec, out.policy, initial, tree, shifts, u, ens);
    out.sweeps = sweep + 1;
    // The settling criterion is the induced control table, not the raw
    // coefficients: levels with degenerate features (a lone node makes mean
    // and intercept collinear) leave a coefficient null space whose ridge
    // split jitters with rounding without moving a single control value.
    const double table_drift = field_max_diff(u.field(), u_prev.field());
    field_copy(u.field(), u_prev.field());
    if (opts.progress) opts.progress(out.sweeps, new_cost, table_drift);
    if (new_cost > cost + 1e-14 * (1.0 + std::abs(cost))) {
      if (++rises >= 3) {
        damping *= 0.5;
        rises = 0;
        if (damping < 1e-3)
          throw NumericalError("solve_feedback: oscillation persists at minimal damping");
      }
    } else {
      rises = 0;
    }
    cost = new_cost;
    settled = table_drift <= feedback_tol * (1.0 + field_max_abs(u.field()));
  }

  // Package the induced open-loop table with its certificates.
  out.open.control = ControlField(tree, N);
  field_copy(u.field(), out.open.control.field());
  out.open.ensemble = ParticleEnsemble(tree, N);
  out.open.ensemble.set_initial(initial);
  double final_cost = 0.0;
  simulate_forward(spec, out.open.control, shifts, out.open.ensemble, &final_cost);
  out.open.value = final_cost;
  GradientNorms norms = cost_gradient(spec, out.open.ensemble, out.open.control, nullptr);
  out.open.grad_norm = norms.rms;
  out.open.grad_sup = norms.sup;
  out.open.iterations = out.sweeps;
  out.open.margin = margin;
  out.open.converged = settled;
  out.open.adjoint = solve_bsde(spec, out.open.ensemble, out.open.control);
  return out;
}

ValueReport report_value(const ProblemSpec& spec, const ConstMat& initial,
                         const OptimalSolution& sol) {
  (void)spec;
  ValueReport rep;
  rep.value = sol.value;
  rep.initial_norm_sq = initial.squaredNorm() / static_cast<double>(initial.cols());
  rep.ratio = std::abs(sol.value) / (1.0 + rep.initial_norm_sq);
  return rep;
}

}  // namespace mfc
