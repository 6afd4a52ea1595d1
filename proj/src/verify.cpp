#include "mfc/verify.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <string>

#include "mfc/adjoint.hpp"
#include "mfc/dynamics.hpp"
#include "mfc/errors.hpp"
#include "mfc/hamiltonian.hpp"
#include "mfc/parallel.hpp"

namespace mfc {

namespace {

using Status = CheckReport::Status;

bool nonzero_matrix(const Eigen::MatrixXd& m) {
  return m.size() > 0 && m.cwiseAbs().maxCoeff() > 0.0;
}

std::vector<std::vector<double>> level_probs(const ScenarioTree& tree, int up_to) {
  std::vector<std::vector<double>> probs(static_cast<std::size_t>(up_to) + 1);
  tree.root_probs(probs[0]);
  for (int k = 0; k < up_to; ++k) tree.advance_probs(probs[k], probs[k + 1]);
  return probs;
}

CheckReport skipped(const std::string& name, const std::string& why) {
  CheckReport r;
  r.name = name;
  r.status = Status::kSkipped;
  r.note = why;
  return r;
}

void meta(CheckReport& r, const std::string& key, double v) { r.metadata.emplace_back(key, v); }

/// Quadratic least-squares fit y ~ c0 + c1 x + c2 x^2.
Eigen::Vector3d quad_fit(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
  Eigen::MatrixXd v(x.size(), 3);
  v.col(0).setOnes();
  v.col(1) = x;
  v.col(2) = x.cwiseProduct(x);
  return v.colPivHouseholderQr().solve(y);
}

/// Start-shifted re-solve on common draws: the plan anchored at step `off`
/// of the caller's grid reproduces the draws of the original subtree rooted
/// at (off, node 0), so values at shifted start times are comparable.
OptimalSolution shifted_solve(const ProblemSpec& spec, const ConstMat& initial,
                              const TimeGrid& grid, int branching, int off, CounterRng rng,
                              const SolveOptions& sopts,
                              std::unique_ptr<ScenarioTree>& tree_out) {
  TimeGrid g(grid.t(off), grid.horizon, grid.steps - off);
  tree_out = std::make_unique<ScenarioTree>(g, branching, initial.rows());
  ShiftPlan plan(spec, *tree_out, static_cast<int>(initial.cols()), rng, true, off, 0);
  return solve_mfc(spec, initial, *tree_out, plan, sopts);
}

}  // namespace

const char* to_string(CheckReport::Status s) {
  switch (s) {
    case Status::kPass:
      return "PASS";
    case Status::kFail:
      return "FAIL";
    case Status::kSkipped:
      return "SKIPPED";
  }
  return "UNKNOWN";
}

std::vector<CheckReport> run_checks(const std::vector<std::function<CheckReport()>>& jobs) {
  std::vector<CheckReport> out(jobs.size());
  parallel_chunks(jobs.size(), 1, [&](std::size_t, std::size_t b, std::size_t e) {
    for (std::size_t idx = b; idx < e; ++idx) {
      try {
        out[idx] = jobs[idx]();
      } catch (const std::exception& ex) {
        out[idx].name = "check[" + std::to_string(idx) + "]";
        out[idx].status = Status::kFail;
        out[idx].note = std::string("threw: ") + ex.what();
      }
    }
  });
  return out;
}

// ============================================================================
// check_ito
// ============================================================================

CheckReport check_ito(const ProblemSpec& spec, const MeasureFunctional& f,
                      const FeedbackFn& u, const ConstMat& initial, const ScenarioTree& tree,
                      const ItoOptions& opts) {
  const int n = spec.dim;
  const Eigen::Index N = initial.cols();
  if (initial.rows() != n) throw InvalidArgument("check_ito: initial points do not match dim");
  if (tree.dim() != n) throw InvalidArgument("check_ito: tree dim mismatch");
  if (N < 2) throw InvalidArgument("check_ito: need at least two particles");
  if (opts.paths < 2) throw InvalidArgument("check_ito: need at least two paths");
  if (!f.value || !(f.grad_dnu || f.grad_dnu_batch))
    throw InvalidArgument("check_ito: functional must supply value and gradient");

  const bool has_sigma = nonzero_matrix(spec.sigma);
  const bool has_beta = nonzero_matrix(spec.beta);
  if ((has_sigma || has_beta) && !(f.hess_dnu || f.hess_apply_batch))
    return skipped("ito", "hess_dnu missing: second-order terms unavailable");
  if (has_beta && !(f.cross_kernel || f.kernel_apply_batch))
    return skipped("ito", "cross_kernel missing: common-noise quadratic unavailable");

  const int K = tree.grid().steps;
  const double dt = tree.grid().dt();
  const int P = opts.paths;
  const int children = tree.children();
  const CounterRng rng(opts.seed);
  const Eigen::VectorXd& bp = tree.branch_probs();
  Eigen::MatrixXd common = Eigen::MatrixXd::Zero(n, children);
  if (has_beta) common = spec.beta * tree.increments();

  // Path states evolve under the tree's branch stencil (child sampled per
  // path) with fresh idiosyncratic draws per path, so the P paths are iid
  // and the per-step spread is a valid standard error.
  std::vector<Eigen::MatrixXd> X(P, Eigen::MatrixXd());
  for (int p = 0; p < P; ++p) X[p] = initial;
  Eigen::MatrixXd fval(P, K + 1), resid(P, K), drift_rate(P, K), trace_rate(P, K),
      common_rate(P, K);

  const double sqdt = std::sqrt(dt);
  for (int k = 0; k < K; ++k) {
    parallel_chunks(P, 1, [&](std::size_t, std::size_t b, std::size_t e) {
      Eigen::MatrixXd grad(n, N), dir(n, N), app(n, N), unext(n, N), xi(n, N), kxx(n, n);
      for (std::size_t p = b; p < e; ++p) {
        const MeasureView m{X[p].data(), nullptr, n, N};
        if (k == 0) fval(p, 0) = f.value(m);
        const double f0 = fval(p, k);
        functional_grad_batch(f, m, X[p], grad);

        unext.setZero();
        if (u) u(k, X[p], unext);

        int c = 0;
        if (children > 1) {
          const double r01 = rng.uniform(k, p, 0, rng_channel::kPath);
          double acc = 0.0;
          for (int cc = 0; cc < children; ++cc) {
            acc += bp(cc);
            if (r01 <= acc || cc == children - 1) {
              c = cc;
              break;
            }
          }
        }

        Eigen::MatrixXd xnext = X[p] + dt * unext;
        if (has_beta) xnext.colwise() += common.col(c);
        if (has_sigma) {
          for (Eigen::Index i = 0; i < N; ++i)
            for (int d = 0; d < n; ++d)
              xi(d, i) = rng.normal(k, p, static_cast<std::uint64_t>(i) * n + d,
                                    rng_channel::kIdio);
          xnext.noalias() += sqdt * (spec.sigma * xi);
        }

        // Realized first order (removes the martingale part exactly).
        const double drift = grad.cwiseProduct(xnext - X[p]).sum() / double(N);

        // Expected idiosyncratic second order: the per-atom Hessian trace
        // plus the cross-kernel diagonal (O(1/N), but it is the entire
        // second-order content for products of moments).
        double trace = 0.0;
        if (has_sigma) {
          for (int a = 0; a < n; ++a) {
            dir.colwise() = spec.sigma.col(a);
            app.setZero();
            functional_hess_apply(f, m, X[p], dir, app);
            trace += dir.cwiseProduct(app).sum() / double(N);
          }
          if (f.cross_kernel) {
            double diag = 0.0;
            for (Eigen::Index i = 0; i < N; ++i) {
              f.cross_kernel(m, X[p].col(i), X[p].col(i), kxx);
              diag += (spec.sigma.transpose() * kxx * spec.sigma).trace();
            }
            trace += diag / (double(N) * double(N));
          }
        }

        // Realized common-noise quadratic (exact for quadratic functionals,
        // so branch sampling adds no variance here).
        double cq = 0.0;
        if (has_beta) {
          dir.colwise() = common.col(c);
          app.setZero();
          functional_hess_apply(f, m, X[p], dir, app);
          cq += dir.cwiseProduct(app).sum() / double(N);
          app.setZero();
          functional_kernel_apply(f, m, X[p], dir, app);
          cq += dir.cwiseProduct(app).sum() / double(N);
        }

        // Deterministic drift quadratic: the Euler step's O(dt^2) curvature
        // along the control, which survives path averaging.
        double dq = 0.0;
        if (u) {
          if (f.hess_dnu || f.hess_apply_batch) {
            app.setZero();
            functional_hess_apply(f, m, X[p], unext, app);
            dq += unext.cwiseProduct(app).sum() / double(N);
          }
          if (f.cross_kernel || f.kernel_apply_batch) {
            app.setZero();
            functional_kernel_apply(f, m, X[p], unext, app);
            dq += unext.cwiseProduct(app).sum() / double(N);
          }
        }

        X[p] = xnext;
        const MeasureView m1{X[p].data(), nullptr, n, N};
        const double f1 = f.value(m1);
        fval(p, k + 1) = f1;
        resid(p, k) = (f1 - f0 - drift - 0.5 * cq - 0.5 * dt * trace - 0.5 * dt * dt * dq) / dt;
        drift_rate(p, k) = drift / dt;
        trace_rate(p, k) = 0.5 * trace;
        common_rate(p, k) = 0.5 * cq / dt;
      }
    });
  }

  const double fscale = 1.0 + fval.cwiseAbs().maxCoeff();
  const double floor = opts.floor_rel * fscale;
  CheckReport rep;
  rep.name = "ito";
  rep.status = Status::kPass;
  rep.bound = 0.0;
  double worst_ratio = -1.0;
  int worst_k = 0;
  double max_se = 0.0;
  for (int k = 0; k < K; ++k) {
    const double mean = resid.col(k).mean();
    const double sd =
        std::sqrt((resid.col(k).array() - mean).square().sum() / double(P - 1));
    const double se = sd / std::sqrt(double(P));
    max_se = std::max(max_se, se);
    const double allow = 3.0 * se + floor;
    if (std::abs(mean) > allow) rep.status = Status::kFail;
    const double ratio = std::abs(mean) / allow;
    if (ratio > worst_ratio) {
      worst_ratio = ratio;
      worst_k = k;
      rep.observed = std::abs(mean);
      rep.tol_slack = allow;
    }
  }
  rep.tol_certificate = 0.0;
  rep.note = "largest per-step rate residual of E F(m_k) against 3 SE + floor";
  meta(rep, "steps", K);
  meta(rep, "paths", P);
  meta(rep, "particles", double(N));
  meta(rep, "worst_step", worst_k);
  meta(rep, "max_se", max_se);
  meta(rep, "floor", floor);
  meta(rep, "drift_rate_scale", drift_rate.cwiseAbs().mean());
  meta(rep, "idio_rate_scale", trace_rate.cwiseAbs().mean());
  meta(rep, "common_rate_scale", common_rate.cwiseAbs().mean());
  return rep;
}

// ============================================================================
// check_convexity_gap
// ============================================================================

CheckReport check_convexity_gap(const ProblemSpec& spec, const ConstMat& initial,
                                const ConvexityGapOptions& opts) {
  const int n = spec.dim;
  const int N = static_cast<int>(initial.cols());
  if (initial.rows() != n) throw InvalidArgument("check_convexity_gap: initial dim mismatch");
  if (opts.trials < 1) throw InvalidArgument("check_convexity_gap: need at least one trial");
  if (opts.steps < 1 || opts.branching < 1)
    throw InvalidArgument("check_convexity_gap: bad grid");

  const double margin = check_convexity_margin(spec);
  ScenarioTree tree(TimeGrid(0.0, spec.horizon, opts.steps), opts.branching, n);
  const CounterRng rng(opts.seed);
  ShiftPlan shifts(spec, tree, N, rng, true);
  ParticleEnsemble ens(tree, N);
  ens.set_initial(initial);
  ControlField u1(tree, N), u2(tree, N), g1(tree, N), g2(tree, N);

  double min_ratio = std::numeric_limits<double>::infinity();
  double sum_ratio = 0.0;
  for (int t = 0; t < opts.trials; ++t) {
    for (int w = 0; w < 2; ++w) {
      ControlField& dst = w == 0 ? u1 : u2;
      for (int k = 0; k < opts.steps; ++k) {
        auto pin = dst.field().pin_overwrite(k);
        for (std::int64_t j = 0; j < tree.nodes(k); ++j) {
          auto block = dst.field().node_block(pin.data(), j);
          for (int i = 0; i < N; ++i)
            for (int d = 0; d < n; ++d)
              block(d, i) = opts.control_scale *
                            rng.normal(k, j,
                                       (static_cast<std::uint64_t>(t * 2 + w) * N + i) * n + d,
                                       rng_channel::kProbe);
        }
        pin.mark_dirty();
      }
    }
    simulate_forward(spec, u1, shifts, ens);
    cost_gradient(spec, ens, u1, &g1);
    simulate_forward(spec, u2, shifts, ens);
    cost_gradient(spec, ens, u2, &g2);
    field_axpy(g1.field(), -1.0, g2.field(), g1.field());
    field_axpy(u1.field(), -1.0, u2.field(), u1.field());
    const double den = control_inner(u1, u1);
    if (!(den > 0.0)) throw NumericalError("check_convexity_gap: degenerate control pair");
    const double ratio = control_inner(g1, u1) / den;
    min_ratio = std::min(min_ratio, ratio);
    sum_ratio += ratio;
  }

  CheckReport rep;
  rep.name = "convexity_gap";
  rep.observed = min_ratio;
  rep.bound = margin;
  rep.tol_certificate = 0.0;
  rep.tol_slack = opts.slack_rel * std::abs(margin);
  rep.status = min_ratio >= margin - rep.tol_slack ? Status::kPass : Status::kFail;
  rep.note = "min <G(u1)-G(u2), u1-u2> / |u1-u2|^2 over random pairs vs declared margin";
  meta(rep, "margin", margin);
  meta(rep, "trials", opts.trials);
  meta(rep, "steps", opts.steps);
  meta(rep, "branching", opts.branching);
  meta(rep, "particles", N);
  meta(rep, "mean_ratio", sum_ratio / opts.trials);
  return rep;
}

// ============================================================================
// check_dpp / check_flow
// ============================================================================

namespace {

/// Re-solves the anchored tail problem from every node at the split level and
/// hands each sub-solution to `consume(j, sub)`.  Returns the path
/// probabilities at the split level.
std::vector<double> for_each_tail(
    const ProblemSpec& spec, const OptimalSolution& sol, const ScenarioTree& tree,
    CounterRng rng, int split_step, const SolveOptions& sub_opts,
    const std::function<void(std::int64_t, const OptimalSolution&)>& consume) {
  const int K = tree.grid().steps;
  if (split_step < 1 || split_step >= K)
    throw InvalidArgument("tail re-solve: split step must lie strictly inside the grid");
  const int N = sol.ensemble.particles();
  TimeGrid sub_grid(tree.grid().t(split_step), tree.grid().horizon, K - split_step);
  ScenarioTree subtree(sub_grid, tree.branching(), tree.dim());
  auto probs = level_probs(tree, split_step);
  auto xpin = sol.ensemble.field().pin(split_step);
  for (std::int64_t j = 0; j < tree.nodes(split_step); ++j) {
    const Eigen::MatrixXd x0 = sol.ensemble.field().node_block(
        static_cast<const double*>(xpin.data()), j);
    ShiftPlan sub_shifts(spec, subtree, N, rng, true, split_step, j);
    const OptimalSolution sub = solve_mfc(spec, x0, subtree, sub_shifts, sub_opts);
    consume(j, sub);
  }
  return probs[split_step];
}

}  // namespace

CheckReport check_dpp(const ProblemSpec& spec, const OptimalSolution& sol,
                      const ScenarioTree& tree, CounterRng rng, int split_step,
                      const SolveOptions& sub_opts) {
  const int N = sol.ensemble.particles();
  const auto probs = level_probs(tree, split_step);
  double head = 0.0;
  for (int k = 0; k < split_step; ++k) {
    auto xp = sol.ensemble.field().pin(k);
    auto up = sol.control.field().pin(k);
    head += tree.grid().dt() *
            running_cost_level(spec, k, tree, xp.data(), up.data(), N, probs[k]);
  }

  double tail = 0.0;
  double max_sub_grad = 0.0;
  std::vector<double> sub_values(tree.nodes(split_step));
  const auto pk = for_each_tail(spec, sol, tree, rng, split_step, sub_opts,
                                [&](std::int64_t j, const OptimalSolution& sub) {
                                  sub_values[j] = sub.value;
                                  max_sub_grad = std::max(max_sub_grad, sub.grad_norm);
                                });
  for (std::int64_t j = 0; j < tree.nodes(split_step); ++j) tail += pk[j] * sub_values[j];

  CheckReport rep;
  rep.name = "dpp";
  const double scale = 1.0 + std::abs(sol.value);
  rep.observed = std::abs(sol.value - head - tail);
  rep.bound = 0.0;
  rep.tol_certificate = 10.0 * (sol.grad_norm + max_sub_grad) * scale;
  rep.tol_slack = 1e-10 * scale;
  rep.status = rep.observed <= rep.tol_certificate + rep.tol_slack ? Status::kPass
                                                                   : Status::kFail;
  rep.note = "value vs head running cost + weighted tail re-solves on shared noise";
  meta(rep, "split_step", split_step);
  meta(rep, "split_nodes", double(tree.nodes(split_step)));
  meta(rep, "value", sol.value);
  meta(rep, "head", head);
  meta(rep, "tail", tail);
  meta(rep, "max_sub_grad", max_sub_grad);
  return rep;
}

CheckReport check_flow(const ProblemSpec& spec, const OptimalSolution& sol,
                       const ScenarioTree& tree, CounterRng rng, int split_step,
                       const SolveOptions& sub_opts) {
  const int K = tree.grid().steps;
  double max_dev = 0.0;
  double max_sub_sup = 0.0;
  for_each_tail(spec, sol, tree, rng, split_step, sub_opts,
                [&](std::int64_t j, const OptimalSolution& sub) {
                  max_sub_sup = std::max(max_sub_sup, sub.grad_sup);
                  std::int64_t stride = 1;  // branching^kappa
                  for (int kappa = 0; kappa < K - split_step; ++kappa) {
                    auto full = sol.control.field().pin(split_step + kappa);
                    auto part = sub.control.field().pin(kappa);
                    const std::int64_t sub_nodes = sub.control.field().nodes(kappa);
                    for (std::int64_t jc = 0; jc < sub_nodes; ++jc) {
                      const auto a = sol.control.field().node_block(
                          static_cast<const double*>(full.data()), j * stride + jc);
                      const auto b = sub.control.field().node_block(
                          static_cast<const double*>(part.data()), jc);
                      max_dev = std::max(max_dev, (a - b).cwiseAbs().maxCoeff());
                    }
                    stride *= tree.branching();
                  }
                });

  CheckReport rep;
  rep.name = "flow";
  rep.observed = max_dev;
  rep.bound = 0.0;
  rep.tol_certificate =
      10.0 * (sol.grad_sup + max_sub_sup) / std::max(sol.margin, 1e-6);
  rep.tol_slack = 1e-12;
  rep.status = rep.observed <= rep.tol_certificate + rep.tol_slack ? Status::kPass
                                                                   : Status::kFail;
  rep.note = "max |tail control - re-solved control| entrywise on shared noise";
  meta(rep, "split_step", split_step);
  meta(rep, "split_nodes", double(tree.nodes(split_step)));
  meta(rep, "max_sub_grad_sup", max_sub_sup);
  return rep;
}

// ============================================================================
// check_bellman
// ============================================================================

CheckReport check_bellman(const ProblemSpec& spec, const OptimalSolution& sol,
                          const ScenarioTree& tree, CounterRng rng,
                          const BellmanOptions& opts) {
  const int K = tree.grid().steps;
  if (K < 3) throw InvalidArgument("check_bellman: need at least three steps");
  if (opts.probes < 2) throw InvalidArgument("check_bellman: need at least two probes");
  const int n = spec.dim;
  const int N = sol.ensemble.particles();
  const bool has_sigma = nonzero_matrix(spec.sigma);
  const bool has_beta = nonzero_matrix(spec.beta);
  if ((has_sigma || has_beta) &&
      !(spec.running.has_hess() && spec.terminal.has_hess()))
    return skipped("bellman", "functional Hessians missing for the second-order terms");
  if (has_beta && !(spec.running.has_kernel() && spec.terminal.has_kernel()))
    return skipped("bellman", "cross kernels missing for the common-noise term");

  Eigen::MatrixXd x0(n, N);
  {
    auto pin = sol.ensemble.field().pin(0);
    x0 = sol.ensemble.field().node_block(static_cast<const double*>(pin.data()), 0);
  }
  Eigen::MatrixXd u0(n, N);
  {
    auto pin = sol.control.field().pin(0);
    u0 = sol.control.field().node_block(static_cast<const double*>(pin.data()), 0);
  }
  const double dt = tree.grid().dt();

  // One-step dynamic-programming expansion at the initial knot.  Every term
  // is evaluated against the value-to-go from the matching child anchor, and
  // the realized transition increments (drift, frozen idiosyncratic draws,
  // branch increments) enter through the costate and the linearized
  // second-order system.  That keeps the assembly exact whenever third
  // derivatives of the value vanish; the trace terms of the generator are
  // recovered separately below and reported against the realized quadrature.
  const int children = tree.children();
  const Eigen::VectorXd& bp = tree.branch_probs();
  const ShiftPlan shifts(spec, tree, N, rng, false);
  const auto level0 = shifts.level(0);

  double tail_value = 0.0, grad_sum = sol.grad_norm;
  double lin_noise = 0.0, quad = 0.0;
  Eigen::MatrixXd zbar = Eigen::MatrixXd::Zero(n, N);
  Eigen::MatrixXd shift(n, N), delta(n, N);
  const TimeGrid g1(tree.grid().t(1), tree.grid().horizon, K - 1);
  const ScenarioTree t1(g1, tree.branching(), n);
  std::vector<OptimalSolution> s1;
  s1.reserve(children);
  for (int c = 0; c < children; ++c) {
    ShiftPlan plan1(spec, t1, N, rng, true, 1, c);
    s1.push_back(solve_mfc(spec, x0, t1, plan1, opts.solve));
    tail_value += bp(c) * s1.back().value;
    grad_sum += s1.back().grad_norm;
  }
  for (int c = 0; c < children; ++c) {
    const Eigen::MatrixXd z = first_derivative(s1[c]);
    zbar += bp(c) * z;
    shift.setZero();
    level0.add(c, shift);
    lin_noise += bp(c) * z.cwiseProduct(shift).sum() / double(N) / dt;
    delta = shift + dt * u0;
    const SecondDirectional sd = second_directional(spec, s1[c], delta, opts.cg_tol);
    if (sd.skipped)
      return skipped("bellman", "second derivative data missing for the quadratic terms");
    quad += bp(c) * sd.lq_value / dt;
  }
  const double dt_v = (tail_value - sol.value) / dt;

  // Evaluated Lagrangian of the realized feedback against the mean next-knot
  // costate, plus its distance to the pointwise infimum (nonnegative, and
  // first order in dt for a converged solve).
  double lagr = spec_l_sum(spec, x0, u0) / double(N);
  lagr += u0.cwiseProduct(zbar).sum() / double(N);
  double ham = 0.0;
  for (int i = 0; i < N; ++i) ham += argmin_lagrangian(spec, x0.col(i), zbar.col(i)).H;
  ham /= double(N);
  const double inf_gap = lagr - ham;

  const MeasureView m0{x0.data(), nullptr, n, N};
  const double running = spec.running.value ? spec.running.value(m0) : 0.0;

  // Expected idiosyncratic trace via Hutchinson probes through the
  // linearized system of the first child; together with the branch-prob
  // common-noise quadratic and the drift curvature this is the generator's
  // view of the realized quadratic above (they agree in expectation).
  double sigma_term = 0.0, sigma_se = 0.0;
  if (has_sigma) {
    Eigen::VectorXd est(opts.probes);
    Eigen::MatrixXd dir(n, N), r(n, N);
    for (int p = 0; p < opts.probes; ++p) {
      for (int i = 0; i < N; ++i)
        for (int d = 0; d < n; ++d)
          r(d, i) = rng.uniform(p, 0, static_cast<std::uint64_t>(i) * n + d,
                                rng_channel::kProbe) <= 0.5
                        ? -1.0
                        : 1.0;
      dir = spec.sigma * r;
      const SecondDirectional sd = second_directional(spec, s1[0], dir, opts.cg_tol);
      if (sd.skipped)
        return skipped("bellman", "second derivative data missing for the trace probes");
      est(p) = sd.lq_value;
    }
    sigma_term = est.mean();
    sigma_se = std::sqrt((est.array() - sigma_term).square().sum() /
                         double(opts.probes - 1) / double(opts.probes));
  }
  double beta_term = 0.0;
  if (has_beta) {
    Eigen::MatrixXd dir(n, N);
    const Eigen::MatrixXd incr = spec.beta * tree.increments();
    for (int c = 0; c < children; ++c) {
      dir.colwise() = incr.col(c);
      const SecondDirectional sd = second_directional(spec, s1[0], dir, opts.cg_tol);
      if (sd.skipped)
        return skipped("bellman", "second derivative data missing for the common-noise term");
      beta_term += bp(c) * sd.lq_value / dt;
    }
  }
  double drift_term = 0.0;
  if (u0.cwiseAbs().maxCoeff() > 0.0) {
    const SecondDirectional sd = second_directional(spec, s1[0], u0, opts.cg_tol);
    if (sd.skipped)
      return skipped("bellman", "second derivative data missing for the drift term");
    drift_term = dt * sd.lq_value;
  }

  const double residual = dt_v + lagr + running + lin_noise + quad;
  const double scale = std::max({std::abs(dt_v), std::abs(lagr), std::abs(running),
                                 std::abs(quad), 1e-12});
  CheckReport rep;
  rep.name = "bellman";
  rep.observed = std::abs(residual) / scale;
  rep.bound = opts.rel_bound;
  rep.tol_certificate = 4.0 * grad_sum * (1.0 + std::abs(sol.value)) / dt / scale;
  rep.tol_slack = 0.0;
  rep.status = rep.observed <= rep.bound + rep.tol_certificate + rep.tol_slack
                   ? Status::kPass
                   : Status::kFail;
  rep.note = "relative residual of dtV + Lagrangian + F + second-order terms at the start";
  meta(rep, "dt_v", dt_v);
  meta(rep, "lagrangian", lagr);
  meta(rep, "inf_gap", inf_gap);
  meta(rep, "running", running);
  meta(rep, "lin_noise", lin_noise);
  meta(rep, "quad", quad);
  meta(rep, "sigma_term", sigma_term);
  meta(rep, "beta_term", beta_term);
  meta(rep, "drift_term", drift_term);
  meta(rep, "noise_gap", lin_noise + quad - sigma_term - beta_term - drift_term);
  meta(rep, "sigma_se", sigma_se);
  meta(rep, "dt", dt);
  meta(rep, "probes", opts.probes);
  return rep;
}

// ============================================================================
// check_master_residual
// ============================================================================

CheckReport check_master_residual(const ProblemSpec& spec, const ConstMat& initial,
                                  const ScenarioTree& tree, CounterRng rng,
                                  const std::vector<double>& x_samples,
                                  const MasterOptions& opts) {
  if (spec.dim != 1)
    throw InvalidArgument("check_master_residual: one-dimensional states only");
  if (nonzero_matrix(spec.beta))
    throw InvalidArgument("check_master_residual: common noise must be off");
  if (x_samples.empty()) throw InvalidArgument("check_master_residual: need sample points");
  if (!(opts.eps2 > 0.0 && opts.eps1 > opts.eps2 && opts.eps1 < 0.5))
    throw InvalidArgument("check_master_residual: need 0 < eps2 < eps1 < 0.5");
  if (opts.grid_points < 3)
    throw InvalidArgument("check_master_residual: need at least three grid points");
  const int K = tree.grid().steps;
  if (K < 3) throw InvalidArgument("check_master_residual: need at least three steps");

  const Eigen::Index N = initial.cols();
  const double dt = tree.grid().dt();
  const double sig = spec.sigma.size() > 0 ? spec.sigma(0, 0) : 0.0;
  const int S = static_cast<int>(x_samples.size());
  const int G = opts.grid_points;

  // Base flow plus the start-shifted flow at the same initial measure.  All
  // spatial terms are evaluated on the shifted configuration so the forward
  // value difference matches the one-step expansion of the tagged cost, and
  // the population's realized first step (drift plus frozen draws) enters
  // through the fitted measure derivative instead of its expectation.
  ShiftPlan plan0(spec, tree, static_cast<int>(N), rng, true);
  const OptimalSolution sol0 = solve_mfc(spec, initial, tree, plan0, opts.solve);
  std::unique_ptr<ScenarioTree> t1;
  const OptimalSolution sol1 =
      shifted_solve(spec, initial, tree.grid(), tree.branching(), 1, rng, opts.solve, t1);

  auto tag = [&](const OptimalSolution& base, double x) {
    Eigen::VectorXd xv(1);
    xv(0) = x;
    return tagged_solve(spec, base, xv, opts.tagged);
  };

  // Injection grid in x1, spanning the bulk of the initial measure.
  const double mean0 = initial.row(0).mean();
  const double sd0 =
      std::sqrt((initial.row(0).array() - mean0).square().mean()) + 1e-12;
  Eigen::VectorXd grid(G);
  for (int g = 0; g < G; ++g)
    grid(g) = mean0 + opts.grid_span * sd0 * (2.0 * g / (G - 1) - 1.0);

  // DU on the grid of the shifted flow: the fit supplies dxx U.
  Eigen::VectorXd du_grid(G);
  for (int g = 0; g < G; ++g) du_grid(g) = tag(sol1, grid(g)).gradient(0);
  const Eigen::Vector3d du_fit = quad_fit(grid, du_grid);

  // Tagged values at the samples on both flows.
  Eigen::VectorXd u0(S), u1(S), du(S);
  for (int s = 0; s < S; ++s) {
    u0(s) = tag(sol0, x_samples[s]).cost;
    const TaggedSolution ts = tag(sol1, x_samples[s]);
    u1(s) = ts.cost;
    du(s) = ts.gradient(0);
  }

  // Raw mixture derivative of the shifted tagged cost on the (sample, grid)
  // table, Richardson-extrapolated over the two snapped mixture weights.
  Eigen::MatrixXd w1(S, G), w2(S, G);
  Eigen::Vector2d eps_snap;
  for (int e = 0; e < 2; ++e) {
    const double eps = e == 0 ? opts.eps1 : opts.eps2;
    const int copies = std::max<int>(
        1, static_cast<int>(std::lround(eps * double(N) / (1.0 - eps))));
    eps_snap(e) = double(copies) / double(N + copies);
    Eigen::MatrixXd inj(1, N + copies);
    inj.leftCols(N) = initial;
    for (int g = 0; g < G; ++g) {
      inj.rightCols(copies).setConstant(grid(g));
      ShiftPlan plan_inj(spec, *t1, static_cast<int>(N) + copies, rng, true, 1, 0);
      const OptimalSolution sol_inj = solve_mfc(spec, inj, *t1, plan_inj, opts.solve);
      for (int s = 0; s < S; ++s) {
        const double diff = tag(sol_inj, x_samples[s]).cost - u1(s);
        (e == 0 ? w1 : w2)(s, g) = diff / eps_snap(e);
      }
    }
  }
  const Eigen::MatrixXd w =
      (eps_snap(0) * w2 - eps_snap(1) * w1) / (eps_snap(0) - eps_snap(1));

  // Realized first step of the population: optimal feedback plus the plan's
  // frozen increments at the root.
  Eigen::MatrixXd ctrl0(1, N);
  {
    auto pin = sol0.control.field().pin(0);
    ctrl0 = sol0.control.field().node_block(static_cast<const double*>(pin.data()), 0);
  }
  Eigen::MatrixXd dy = dt * ctrl0;
  plan0.level(0).add(0, dy);

  const MeasureView m0{initial.data(), nullptr, 1, N};
  CheckReport rep;
  rep.name = "master_residual";
  rep.status = Status::kPass;
  rep.bound = opts.rel_bound;
  double tagged_scale = 0.0;
  for (int s = 0; s < S; ++s) {
    const Eigen::VectorXd row = w.row(s).transpose();
    const Eigen::Vector3d wfit = quad_fit(grid, row);

    // Measure step to second order along the realized displacements; the
    // drift part is the transport term, the rest covers the conditional
    // trace and the finite-sample fluctuation of the frozen draws.
    double transport = 0.0, m_step = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) {
      const double d1 = wfit(1) + 2.0 * wfit(2) * initial(0, i);
      transport += d1 * ctrl0(0, i);
      m_step += d1 * dy(0, i) + wfit(2) * dy(0, i) * dy(0, i);
    }
    transport /= double(N);
    m_step /= double(N) * dt;
    const double trace_x1 = 0.5 * sig * sig * 2.0 * wfit(2);

    const double x = x_samples[s];
    const double dt_u = (u1(s) - u0(s)) / dt;
    Eigen::VectorXd xv(1), pv(1);
    xv(0) = x;
    pv(0) = du(s);
    const HamiltonianEval he = argmin_lagrangian(spec, xv, pv);
    const double ham = he.H;
    const double dnu = spec.running.dnu ? spec.running.dnu(m0, xv) : 0.0;
    const double dxx = du_fit(1) + 2.0 * du_fit(2) * x;
    const double trace_x = 0.5 * sig * sig * dxx;
    const double x_drift = 0.5 * dt * he.u_star.squaredNorm() * dxx;

    const double residual = dt_u + ham + dnu + m_step + trace_x + x_drift;
    const double scale = std::max({std::abs(dt_u), std::abs(ham), std::abs(dnu),
                                   std::abs(m_step), std::abs(trace_x), 1e-12});
    const double rel = std::abs(residual) / scale;
    tagged_scale = std::max(tagged_scale, std::abs(u0(s)));
    if (rel > rep.observed) {
      rep.observed = rel;
      rep.metadata.clear();
      meta(rep, "worst_sample", x);
      meta(rep, "dt_u", dt_u);
      meta(rep, "hamiltonian", ham);
      meta(rep, "dnu", dnu);
      meta(rep, "m_step", m_step);
      meta(rep, "transport", transport);
      meta(rep, "trace_x", trace_x);
      meta(rep, "trace_x1", trace_x1);
      meta(rep, "x_drift", x_drift);
      meta(rep, "m_noise", m_step - transport - trace_x1);
    }
  }
  rep.tol_certificate = 2.0 * (sol0.grad_norm + sol1.grad_norm) *
                        (1.0 + tagged_scale) / dt;
  rep.tol_slack = 0.0;
  if (rep.observed > rep.bound + rep.tol_certificate) rep.status = Status::kFail;
  rep.note = "relative residual of the tagged-value equation at the initial time";
  meta(rep, "samples", S);
  meta(rep, "grid_points", G);
  meta(rep, "eps1_snapped", eps_snap(0));
  meta(rep, "eps2_snapped", eps_snap(1));
  meta(rep, "dt", dt);
  return rep;
}

// ============================================================================
// check_master_terminal
// ============================================================================

CheckReport check_master_terminal(const ProblemSpec& spec, const OptimalSolution& sol,
                                  int max_leaves) {
  if (max_leaves < 1) throw InvalidArgument("check_master_terminal: need leaves");
  const MeasureFunctional& f = spec.terminal;
  if (!f.dnu || !f.grad_dnu)
    throw InvalidArgument("check_master_terminal: terminal derivative callbacks required");
  const TreeField& field = sol.ensemble.field();
  const int K = sol.ensemble.steps();
  const int n = field.dim();
  const Eigen::Index N = field.particles();
  const std::int64_t leaves = std::min<std::int64_t>(field.nodes(K), max_leaves);

  double worst = 0.0;
  auto pin = field.pin(K);
  Eigen::MatrixXd grad(n, N);
  Eigen::VectorXd gv(n);
  for (std::int64_t j = 0; j < leaves; ++j) {
    const auto x = field.node_block(static_cast<const double*>(pin.data()), j);
    const MeasureView m = field.node_measure(pin.data(), j);

    // The normalization that pins the boundary: dF_T/dnu integrates to zero
    // against its own measure.
    double acc = 0.0, vscale = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) {
      const double v = f.dnu(m, x.col(i));
      acc += v / double(N);
      vscale = std::max(vscale, std::abs(v));
    }
    worst = std::max(worst, std::abs(acc) / (1.0 + vscale));

    // Batch and pointwise boundary gradients agree at rounding level.
    functional_grad_batch(f, m, x, grad);
    double gdiff = 0.0, gscale = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) {
      f.grad_dnu(m, x.col(i), gv);
      gdiff = std::max(gdiff, (gv - grad.col(i)).cwiseAbs().maxCoeff());
      gscale = std::max(gscale, gv.cwiseAbs().maxCoeff());
    }
    worst = std::max(worst, gdiff / (1.0 + gscale));

    // Same for the pointwise terminal cost and its batch sum.
    if (spec.h_sum_batch && spec.h) {
      double hsum = 0.0, hscale = 0.0;
      for (Eigen::Index i = 0; i < N; ++i) {
        const double hv = spec.h(x.col(i));
        hsum += hv;
        hscale = std::max(hscale, std::abs(hv));
      }
      worst = std::max(worst,
                       std::abs(spec.h_sum_batch(x) - hsum) / double(N) / (1.0 + hscale));
    }
  }

  CheckReport rep;
  rep.name = "master_terminal";
  rep.observed = worst;
  rep.bound = 1e-12;
  rep.tol_certificate = 0.0;
  rep.tol_slack = 0.0;
  rep.status = worst <= rep.bound ? Status::kPass : Status::kFail;
  rep.note = "terminal derivative normalization and batch/pointwise boundary agreement";
  meta(rep, "leaves", double(leaves));
  meta(rep, "particles", double(N));
  return rep;
}

// ============================================================================
// Refinement-ladder checks.
// ============================================================================

namespace {

struct RungSetup {
  std::unique_ptr<ScenarioTree> tree;
  Eigen::MatrixXd x0;
  OptimalSolution sol;
};

RungSetup solve_rung(const ProblemSpec& spec, int particles, int steps,
                     const LadderOptions& opts, int rung) {
  RungSetup r;
  r.tree = std::make_unique<ScenarioTree>(TimeGrid(0.0, spec.horizon, steps),
                                          opts.branching, spec.dim);
  const CounterRng rng(opts.seed);
  r.x0.resize(spec.dim, particles);
  for (int i = 0; i < particles; ++i)
    for (int d = 0; d < spec.dim; ++d)
      r.x0(d, i) = opts.initial_mean +
                   opts.initial_spread * rng.normal(rung, i, d, rng_channel::kInit);
  ShiftPlan plan(spec, *r.tree, particles, rng, true);
  r.sol = solve_mfc(spec, r.x0, *r.tree, plan, opts.solve);
  return r;
}

void validate_ladder(const LadderOptions& opts) {
  if (opts.rungs.size() < 2)
    throw InvalidArgument("ladder checks: need at least two rungs");
  for (const auto& [particles, steps] : opts.rungs)
    if (particles < 2 || steps < 3)
      throw InvalidArgument("ladder checks: each rung needs particles >= 2, steps >= 3");
}

CheckReport ladder_gate(const char* name, const char* note,
                        const std::vector<double>& constants, const LadderOptions& opts,
                        CheckReport rep) {
  const double cmax = *std::max_element(constants.begin(), constants.end());
  const double cmin = *std::min_element(constants.begin(), constants.end());
  rep.name = name;
  rep.bound = opts.factor;
  rep.tol_certificate = 0.0;
  rep.tol_slack = 0.0;
  if (cmax <= 1e-12) {
    rep.observed = 1.0;
    rep.status = Status::kPass;
    rep.note = std::string(note) + " (degenerate: all constants at rounding level)";
    return rep;
  }
  rep.observed = cmax / std::max(cmin, 1e-300);
  rep.status = rep.observed <= opts.factor ? Status::kPass : Status::kFail;
  rep.note = note;
  return rep;
}

std::string rung_key(const char* prefix, int particles, int steps) {
  return std::string(prefix) + "[N=" + std::to_string(particles) +
         ",K=" + std::to_string(steps) + "]";
}

}  // namespace

CheckReport check_value_bounds(const ProblemSpec& spec, const LadderOptions& opts) {
  validate_ladder(opts);
  CheckReport rep;
  std::vector<double> constants;
  int rung = 0;
  for (const auto& [particles, steps] : opts.rungs) {
    const RungSetup r = solve_rung(spec, particles, steps, opts, rung++);
    const ValueReport vr = report_value(spec, r.x0, r.sol);
    constants.push_back(vr.ratio);
    meta(rep, rung_key("C", particles, steps), vr.ratio);
  }
  return ladder_gate("value_bounds", "spread of |V| / (1 + |X0|^2) across the ladder",
                     constants, opts, std::move(rep));
}

CheckReport check_time_regularity(const ProblemSpec& spec, const LadderOptions& opts) {
  validate_ladder(opts);
  CheckReport rep;
  std::vector<double> constants;
  int rung = 0;
  for (const auto& [particles, steps] : opts.rungs) {
    const RungSetup r = solve_rung(spec, particles, steps, opts, rung++);
    const double nf = 1.0 + r.x0.squaredNorm() / particles;
    const double dt = r.tree->grid().dt();
    double c = 0.0;
    for (int off = 1; off <= 2; ++off) {
      std::unique_ptr<ScenarioTree> t_off;
      const OptimalSolution s = shifted_solve(spec, r.x0, r.tree->grid(), opts.branching,
                                              off, CounterRng(opts.seed), opts.solve, t_off);
      c = std::max(c, std::abs(s.value - r.sol.value) / (off * dt * nf));
    }
    constants.push_back(c);
    meta(rep, rung_key("C", particles, steps), c);
  }
  return ladder_gate("time_regularity",
                     "spread of |V(t+e) - V(t)| / (e (1 + |X0|^2)) across the ladder",
                     constants, opts, std::move(rep));
}

CheckReport check_lipschitz_DV(const ProblemSpec& spec, const LadderOptions& opts) {
  validate_ladder(opts);
  CheckReport rep;
  std::vector<double> constants;
  int rung = 0;
  for (const auto& [particles, steps] : opts.rungs) {
    const RungSetup r = solve_rung(spec, particles, steps, opts, rung);
    const Eigen::MatrixXd z0 = first_derivative(r.sol);
    const CounterRng rng(opts.seed);
    Eigen::MatrixXd dx(spec.dim, particles);
    for (int i = 0; i < particles; ++i)
      for (int d = 0; d < spec.dim; ++d)
        dx(d, i) = 0.1 * opts.initial_spread * rng.normal(rung, i, d, rng_channel::kProbe);
    const Eigen::MatrixXd x1 = r.x0 + dx;
    ShiftPlan plan(spec, *r.tree, particles, rng, true);
    const OptimalSolution sol1 = solve_mfc(spec, x1, *r.tree, plan, opts.solve);
    const double lip = (first_derivative(sol1) - z0).norm() / dx.norm();
    constants.push_back(lip);
    meta(rep, rung_key("L", particles, steps), lip);

    // Start-time drift of the gradient on the finest rung, reported as a
    // joint fit a e + b sqrt(e) (no gate: the exponent is diagnostic).
    if (static_cast<std::size_t>(rung) + 1 == opts.rungs.size()) {
      const double dt = r.tree->grid().dt();
      Eigen::Matrix2d a;
      Eigen::Vector2d rhs;
      for (int off = 1; off <= 2; ++off) {
        std::unique_ptr<ScenarioTree> t_off;
        const OptimalSolution s = shifted_solve(spec, r.x0, r.tree->grid(), opts.branching,
                                                off, CounterRng(opts.seed), opts.solve,
                                                t_off);
        const double eps = off * dt;
        const double drift =
            (first_derivative(s) - z0).norm() / std::sqrt(double(particles));
        a(off - 1, 0) = eps;
        a(off - 1, 1) = std::sqrt(eps);
        rhs(off - 1) = drift;
      }
      const Eigen::Vector2d fit = a.colPivHouseholderQr().solve(rhs);
      meta(rep, "time_drift_linear", fit(0));
      meta(rep, "time_drift_sqrt", fit(1));
    }
    ++rung;
  }
  return ladder_gate("lipschitz_DV", "spread of |DV(X) - DV(X')| / |X - X'| across the ladder",
                     constants, opts, std::move(rep));
}

// ============================================================================
// check_independence
// ============================================================================

CheckReport check_independence(const MeasureFunctional& f, const EmpiricalMeasure& m,
                               const ConstMat& y) {
  const Eigen::Index n = m.dim();
  const Eigen::Index N = m.atoms();
  if (y.rows() != n || y.cols() != N)
    throw InvalidArgument("check_independence: Y must match the measure atoms");
  if (!(f.grad_dnu || f.grad_dnu_batch))
    throw InvalidArgument("check_independence: functional gradient required");

  // Precondition: Y is centered.  A visible mean makes the pairing test
  // vacuous, so it is reported as SKIPPED rather than FAIL.
  for (Eigen::Index d = 0; d < n; ++d) {
    double wmean = 0.0, wsq = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) wmean += m.weights(i) * y(d, i);
    for (Eigen::Index i = 0; i < N; ++i) {
      const double c = y(d, i) - wmean;
      wsq += m.weights(i) * c * c;
    }
    double w2 = 0.0;
    for (Eigen::Index i = 0; i < N; ++i) w2 += m.weights(i) * m.weights(i);
    const double se_mean = std::sqrt(wsq * w2);
    if (std::abs(wmean) > 4.0 * se_mean + 1e-14 * (1.0 + y.cwiseAbs().maxCoeff()))
      return skipped("independence", "Y is visibly not centered");
  }

  Eigen::MatrixXd grad(n, N);
  functional_grad_batch(f, m.view(), m.points, grad);
  double pairing = 0.0, var = 0.0;
  for (Eigen::Index i = 0; i < N; ++i) {
    const double term = grad.col(i).dot(y.col(i));
    pairing += m.weights(i) * term;
    var += m.weights(i) * m.weights(i) * term * term;
  }
  const double se = std::sqrt(var);
  const double floor =
      1e-14 * (1.0 + grad.cwiseAbs().maxCoeff() * y.cwiseAbs().maxCoeff());

  CheckReport rep;
  rep.name = "independence";
  rep.observed = std::abs(pairing);
  rep.bound = 0.0;
  rep.tol_certificate = 0.0;
  rep.tol_slack = 3.0 * se + floor;
  rep.status = rep.observed <= rep.tol_slack ? Status::kPass : Status::kFail;
  rep.note = "pairing <D_X E F, Y> against 3 Monte Carlo standard errors";
  meta(rep, "atoms", double(N));
  meta(rep, "se", se);
  return rep;
}

CheckReport check_independence(const MeasureFunctional& f, const EmpiricalMeasure& m,
                               CounterRng rng, int reps) {
  if (reps < 1) throw InvalidArgument("check_independence: need at least one rep");
  const Eigen::Index n = m.dim();
  const Eigen::Index N = m.atoms();
  CheckReport worst;
  double worst_ratio = -1.0;
  for (int r = 0; r < reps; ++r) {
    Eigen::MatrixXd y(n, N);
    for (Eigen::Index i = 0; i < N; ++i)
      for (Eigen::Index d = 0; d < n; ++d)
        y(d, i) = rng.normal(r, i, d, rng_channel::kProbe);
    CheckReport one = check_independence(f, m, y);
    const double ratio =
        one.skipped() ? -1.0 : one.observed / std::max(one.tol_slack, 1e-300);
    if (one.failed() || ratio > worst_ratio) {
      worst_ratio = one.failed() ? std::numeric_limits<double>::infinity() : ratio;
      worst = std::move(one);
    }
    if (worst.failed()) break;
  }
  meta(worst, "reps", reps);
  return worst;
}

// ============================================================================
// estimate_monotonicity
// ============================================================================

MonotonicityEstimate estimate_monotonicity(const ProblemSpec& spec, int m_samples,
                                           CounterRng rng) {
  if (m_samples < 1) throw InvalidArgument("estimate_monotonicity: need samples");
  const int n = spec.dim;
  const int atoms = 16;
  MonotonicityEstimate est;
  est.declared_running = -spec.c_prime;
  est.declared_terminal = -spec.c_T_prime;
  est.samples = m_samples;

  double mins[2] = {std::numeric_limits<double>::infinity(),
                    std::numeric_limits<double>::infinity()};
  Eigen::MatrixXd pts(n, atoms), xi(n, atoms), app(n, atoms);
  for (int s = 0; s < m_samples; ++s) {
    for (int a = 0; a < atoms; ++a)
      for (int d = 0; d < n; ++d) {
        pts(d, a) = 1.5 * rng.normal(s, a, d, rng_channel::kInit);
        xi(d, a) = rng.normal(s, a, d, rng_channel::kProbe);
      }
    const MeasureView m{pts.data(), nullptr, n, atoms};
    const double nrm = xi.squaredNorm() / atoms;
    for (int which = 0; which < 2; ++which) {
      const MeasureFunctional& f = which == 0 ? spec.running : spec.terminal;
      double q = 0.0;
      if (f.hess_dnu || f.hess_apply_batch) {
        app.setZero();
        functional_hess_apply(f, m, pts, xi, app);
        q += xi.cwiseProduct(app).sum() / atoms;
      }
      if (f.cross_kernel || f.kernel_apply_batch) {
        app.setZero();
        functional_kernel_apply(f, m, pts, xi, app);
        q += xi.cwiseProduct(app).sum() / atoms;
      }
      mins[which] = std::min(mins[which], q / nrm);
    }
  }
  est.running_min = mins[0];
  est.terminal_min = mins[1];
  est.flagged = est.running_min < est.declared_running - 1e-9 ||
                est.terminal_min < est.declared_terminal - 1e-9;
  return est;
}

}  // namespace mfc
