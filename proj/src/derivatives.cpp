#include "mfc/derivatives.hpp"

#include <algorithm>
#include <cmath>
#include <utility>
#include <vector>

#include "mfc/dynamics.hpp"
#include "mfc/errors.hpp"

namespace mfc {

namespace {

/// out.col(i) += B_i * dir.col(i) (or B_i^T) where B_i is the n x n block
/// stored column-major in flat.col(i).
void apply_blocks(const Eigen::MatrixXd& flat, const Eigen::MatrixXd& dir, bool transpose,
                  Eigen::MatrixXd& out) {
  const Eigen::Index n = dir.rows();
  for (Eigen::Index i = 0; i < dir.cols(); ++i) {
    Eigen::Map<const Eigen::MatrixXd> block(flat.col(i).data(), n, n);
    if (transpose)
      out.col(i) += block.transpose() * dir.col(i);
    else
      out.col(i) += block * dir.col(i);
  }
}

}  // namespace

Eigen::MatrixXd first_derivative(const OptimalSolution& sol) {
  if (!sol.converged)
    throw InvalidArgument("first_derivative: solution is not converged");
  const TreeField& z = sol.adjoint.field();
  LevelStore::Pin pin = z.pin(0);
  return Eigen::MatrixXd(z.node_block(pin.data(), 0));
}

TaggedProblem::TaggedProblem(const ProblemSpec& spec, const OptimalSolution& base, ConstVec x,
                             const TaggedOptions& opts)
    : spec_(&spec), base_(&base), opts_(opts) {
  spec.validate();
  if (!base.converged)
    throw InvalidArgument("TaggedProblem: base solution is not converged");
  if (!spec.running.dnu || !spec.running.grad_dnu || !spec.terminal.dnu ||
      !spec.terminal.grad_dnu)
    throw InvalidArgument("TaggedProblem: running/terminal dnu and grad_dnu are required");
  dim_ = spec.dim;
  if (x.size() != dim_) throw InvalidArgument("TaggedProblem: x dimension mismatch");

  const ScenarioTree& bt = base.ensemble.field().tree();
  steps_ = bt.grid().steps;
  dt_ = bt.grid().dt();
  x0_ = x;

  // The tag's idiosyncratic quadrature reuses the tree stencil over a single
  // step of the same dt; with sigma = 0 the points would all be zero, so the
  // stencil collapses to one branch and the composed tree stays the base tree.
  int tb = opts.tag_branching;
  if (spec.sigma.isZero(0.0)) tb = 1;
  ScenarioTree stencil(TimeGrid{0.0, dt_, 1}, tb, dim_);
  const int R = stencil.children();
  children_ = bt.children() * R;

  shift_.resize(dim_, children_);
  cprob_.resize(children_);
  for (int cb = 0; cb < bt.children(); ++cb)
    for (int r = 0; r < R; ++r) {
      const int c = cb * R + r;
      shift_.col(c) =
          spec.beta * bt.increments().col(cb) + spec.sigma * stencil.increments().col(r);
      cprob_(c) = bt.branch_probs()(cb) * stencil.branch_probs()(r);
    }

  counts_.assign(static_cast<std::size_t>(steps_) + 1, 0);
  std::int64_t m = 1;
  for (int k = 0; k <= steps_; ++k) {
    counts_[static_cast<std::size_t>(k)] = m;
    if (k < steps_) {
      if (m > opts.max_nodes / children_)
        throw InvalidArgument("TaggedProblem: composed tree exceeds max_nodes");
      m *= children_;
    }
  }

  jbase_.resize(counts_.size());
  probs_.resize(counts_.size());
  jbase_[0] = {0};
  probs_[0] = {1.0};
  for (int k = 0; k < steps_; ++k) {
    const auto& jb = jbase_[static_cast<std::size_t>(k)];
    const auto& pp = probs_[static_cast<std::size_t>(k)];
    auto& jn = jbase_[static_cast<std::size_t>(k) + 1];
    auto& pn = probs_[static_cast<std::size_t>(k) + 1];
    jn.resize(jb.size() * static_cast<std::size_t>(children_));
    pn.resize(pp.size() * static_cast<std::size_t>(children_));
    for (std::size_t j = 0; j < jb.size(); ++j)
      for (int c = 0; c < children_; ++c) {
        jn[j * static_cast<std::size_t>(children_) + static_cast<std::size_t>(c)] =
            jb[j] * bt.children() + c / R;
        pn[j * static_cast<std::size_t>(children_) + static_cast<std::size_t>(c)] =
            pp[j] * cprob_(c);
      }
  }
}

void TaggedProblem::forward(const std::vector<Eigen::MatrixXd>& v,
                            std::vector<Eigen::MatrixXd>& path) const {
  path.resize(static_cast<std::size_t>(steps_) + 1);
  path[0].resize(dim_, 1);
  path[0].col(0) = x0_;
  for (int k = 0; k < steps_; ++k) {
    const Eigen::MatrixXd& xk = path[static_cast<std::size_t>(k)];
    const Eigen::MatrixXd& vk = v[static_cast<std::size_t>(k)];
    Eigen::MatrixXd& xn = path[static_cast<std::size_t>(k) + 1];
    xn.resize(dim_, counts_[static_cast<std::size_t>(k) + 1]);
    for (std::int64_t j = 0; j < counts_[static_cast<std::size_t>(k)]; ++j) {
      const Eigen::VectorXd drift = xk.col(j) + dt_ * vk.col(j);
      for (int c = 0; c < children_; ++c) xn.col(j * children_ + c) = drift + shift_.col(c);
    }
  }
}

double TaggedProblem::cost_of(const std::vector<Eigen::MatrixXd>& v,
                              const std::vector<Eigen::MatrixXd>& path) const {
  const TreeField& xs = base_->ensemble.field();
  double total = 0.0;
  for (int k = 0; k < steps_; ++k) {
    LevelStore::Pin pin = xs.pin(k);
    const auto& jb = jbase_[static_cast<std::size_t>(k)];
    const auto& pp = probs_[static_cast<std::size_t>(k)];
    const Eigen::MatrixXd& xk = path[static_cast<std::size_t>(k)];
    const Eigen::MatrixXd& vk = v[static_cast<std::size_t>(k)];
    double lvl = 0.0;
    for (std::int64_t j = 0; j < counts_[static_cast<std::size_t>(k)]; ++j) {
      MeasureView m = xs.node_measure(pin.data(), jb[static_cast<std::size_t>(j)]);
      lvl += pp[static_cast<std::size_t>(j)] *
             (spec_->l(xk.col(j), vk.col(j)) + spec_->running.dnu(m, xk.col(j)));
    }
    total += dt_ * lvl;
  }
  LevelStore::Pin pin = xs.pin(steps_);
  const auto& jb = jbase_[static_cast<std::size_t>(steps_)];
  const auto& pp = probs_[static_cast<std::size_t>(steps_)];
  const Eigen::MatrixXd& xk = path[static_cast<std::size_t>(steps_)];
  double lvl = 0.0;
  for (std::int64_t j = 0; j < counts_[static_cast<std::size_t>(steps_)]; ++j) {
    MeasureView m = xs.node_measure(pin.data(), jb[static_cast<std::size_t>(j)]);
    lvl += pp[static_cast<std::size_t>(j)] *
           (spec_->h(xk.col(j)) + spec_->terminal.dnu(m, xk.col(j)));
  }
  return total + lvl;
}

void TaggedProblem::backward(const std::vector<Eigen::MatrixXd>& path,
                             const std::vector<Eigen::MatrixXd>& v,
                             std::vector<Eigen::MatrixXd>& z) const {
  const TreeField& xs = base_->ensemble.field();
  z.resize(static_cast<std::size_t>(steps_) + 1);
  {
    LevelStore::Pin pin = xs.pin(steps_);
    const auto& jb = jbase_[static_cast<std::size_t>(steps_)];
    const Eigen::MatrixXd& xk = path[static_cast<std::size_t>(steps_)];
    Eigen::MatrixXd& zk = z[static_cast<std::size_t>(steps_)];
    zk.resize(dim_, counts_[static_cast<std::size_t>(steps_)]);
    Eigen::VectorXd hx(dim_), g(dim_);
    for (std::int64_t j = 0; j < counts_[static_cast<std::size_t>(steps_)]; ++j) {
      MeasureView m = xs.node_measure(pin.data(), jb[static_cast<std::size_t>(j)]);
      spec_->h_x(xk.col(j), hx);
      spec_->terminal.grad_dnu(m, xk.col(j), g);
      zk.col(j) = hx + g;
    }
  }
  for (int k = steps_ - 1; k >= 0; --k) {
    LevelStore::Pin pin = xs.pin(k);
    const auto& jb = jbase_[static_cast<std::size_t>(k)];
    const Eigen::MatrixXd& xk = path[static_cast<std::size_t>(k)];
    const Eigen::MatrixXd& vk = v[static_cast<std::size_t>(k)];
    const Eigen::MatrixXd& zn = z[static_cast<std::size_t>(k) + 1];
    Eigen::MatrixXd& zk = z[static_cast<std::size_t>(k)];
    zk.resize(dim_, counts_[static_cast<std::size_t>(k)]);
    Eigen::VectorXd lx(dim_), g(dim_);
    for (std::int64_t j = 0; j < counts_[static_cast<std::size_t>(k)]; ++j) {
      Eigen::VectorXd acc = Eigen::VectorXd::Zero(dim_);
      for (int c = 0; c < children_; ++c) acc += cprob_(c) * zn.col(j * children_ + c);
      MeasureView m = xs.node_measure(pin.data(), jb[static_cast<std::size_t>(j)]);
      spec_->l_x(xk.col(j), vk.col(j), lx);
      spec_->running.grad_dnu(m, xk.col(j), g);
      zk.col(j) = acc + dt_ * (lx + g);
    }
  }
}

std::pair<double, double> TaggedProblem::gradient(const std::vector<Eigen::MatrixXd>& path,
                                                  const std::vector<Eigen::MatrixXd>& v,
                                                  const std::vector<Eigen::MatrixXd>& z,
                                                  std::vector<Eigen::MatrixXd>& g) const {
  g.resize(static_cast<std::size_t>(steps_));
  double sq = 0.0;
  double sup = 0.0;
  Eigen::VectorXd lv(dim_);
  for (int k = 0; k < steps_; ++k) {
    const auto& pp = probs_[static_cast<std::size_t>(k)];
    const Eigen::MatrixXd& zn = z[static_cast<std::size_t>(k) + 1];
    Eigen::MatrixXd& gk = g[static_cast<std::size_t>(k)];
    gk.resize(dim_, counts_[static_cast<std::size_t>(k)]);
    double lvl = 0.0;
    for (std::int64_t j = 0; j < counts_[static_cast<std::size_t>(k)]; ++j) {
      Eigen::VectorXd acc = Eigen::VectorXd::Zero(dim_);
      for (int c = 0; c < children_; ++c) acc += cprob_(c) * zn.col(j * children_ + c);
      spec_->l_v(path[static_cast<std::size_t>(k)].col(j),
                 v[static_cast<std::size_t>(k)].col(j), lv);
      gk.col(j) = lv + acc;
      lvl += pp[static_cast<std::size_t>(j)] * gk.col(j).squaredNorm();
      sup = std::max(sup, gk.col(j).lpNorm<Eigen::Infinity>());
    }
    sq += dt_ * lvl;
  }
  return {std::sqrt(sq / (dt_ * steps_)), sup};
}

double TaggedProblem::cost(const std::vector<Eigen::MatrixXd>& v) const {
  if (static_cast<int>(v.size()) != steps_)
    throw InvalidArgument("TaggedProblem::cost: control level count mismatch");
  for (int k = 0; k < steps_; ++k)
    if (v[static_cast<std::size_t>(k)].rows() != dim_ ||
        v[static_cast<std::size_t>(k)].cols() != counts_[static_cast<std::size_t>(k)])
      throw InvalidArgument("TaggedProblem::cost: control shape mismatch");
  std::vector<Eigen::MatrixXd> path;
  forward(v, path);
  return cost_of(v, path);
}

TaggedSolution TaggedProblem::solve() const {
  const SolveOptions& so = opts_.solve;
  const double margin = check_convexity_margin(*spec_);
  if (margin <= 0.0 && !so.allow_nonconvex)
    throw SolvabilityError("TaggedProblem::solve: convexity margin is not positive");
  if (!(so.grad_tol > 0.0))
    throw InvalidArgument("TaggedProblem::solve: grad_tol must be positive");

  std::vector<Eigen::MatrixXd> v(static_cast<std::size_t>(steps_));
  for (int k = 0; k < steps_; ++k)
    v[static_cast<std::size_t>(k)] =
        Eigen::MatrixXd::Zero(dim_, counts_[static_cast<std::size_t>(k)]);

  auto inner = [&](const std::vector<Eigen::MatrixXd>& a,
                   const std::vector<Eigen::MatrixXd>& b) {
    double s = 0.0;
    for (int k = 0; k < steps_; ++k) {
      const auto& pp = probs_[static_cast<std::size_t>(k)];
      double lvl = 0.0;
      for (std::int64_t j = 0; j < counts_[static_cast<std::size_t>(k)]; ++j)
        lvl += pp[static_cast<std::size_t>(j)] *
               a[static_cast<std::size_t>(k)].col(j).dot(b[static_cast<std::size_t>(k)].col(j));
      s += dt_ * lvl;
    }
    return s;
  };

  std::vector<Eigen::MatrixXd> path, z, g;
  forward(v, path);
  double cost = cost_of(v, path);
  backward(path, v, z);
  auto norms = gradient(path, v, z, g);

  // Curvature estimate for the step size: power iteration on gradient
  // differences around the zero control, deterministic probe fill.
  double step = so.fixed_step;
  if (so.step_rule == SolveOptions::StepRule::kAuto ||
      so.step_rule == SolveOptions::StepRule::kStrongConvexity) {
    std::vector<Eigen::MatrixXd> dir(static_cast<std::size_t>(steps_)), pert(v), ppath, pz, pg;
    for (int k = 0; k < steps_; ++k) {
      Eigen::MatrixXd& dk = dir[static_cast<std::size_t>(k)];
      dk.resize(dim_, counts_[static_cast<std::size_t>(k)]);
      for (std::int64_t j = 0; j < counts_[static_cast<std::size_t>(k)]; ++j)
        for (int d = 0; d < dim_; ++d)
          dk(d, j) = std::sin(0.7 * (k + 1) + 1.3 * static_cast<double>(j) + 0.5 * (d + 1));
    }
    double lam = 0.0;
    for (int probe = 0; probe < std::max(1, so.power_probes); ++probe) {
      const double nrm = std::sqrt(inner(dir, dir));
      if (!(nrm > 0.0)) break;
      const double eps = 1e-3 / nrm;
      for (int k = 0; k < steps_; ++k)
        pert[static_cast<std::size_t>(k)] =
            v[static_cast<std::size_t>(k)] + eps * dir[static_cast<std::size_t>(k)];
      forward(pert, ppath);
      backward(ppath, pert, pz);
      gradient(ppath, pert, pz, pg);
      for (int k = 0; k < steps_; ++k)
        pg[static_cast<std::size_t>(k)] =
            (pg[static_cast<std::size_t>(k)] - g[static_cast<std::size_t>(k)]) / eps;
      lam = std::sqrt(inner(pg, pg)) / nrm;
      dir.swap(pg);
    }
    if (lam > 0.0)
      step = (so.step_rule == SolveOptions::StepRule::kAuto) ? 1.0 / lam : 2.0 / (lam + std::max(margin, 0.0));
  }
  if (!(step > 0.0)) throw InvalidArgument("TaggedProblem::solve: step size must be positive");
  const double step_cap = step;

  std::vector<Eigen::MatrixXd> trial(static_cast<std::size_t>(steps_)), tpath, tz, tg;
  int iters = 0;
  while (norms.first > so.grad_tol && iters < so.max_iters) {
    double s = step;
    bool accepted = false;
    bool fresh = false;
    std::pair<double, double> tnorms;
    for (int halving = 0; halving < 60; ++halving) {
      for (int k = 0; k < steps_; ++k)
        trial[static_cast<std::size_t>(k)] =
            v[static_cast<std::size_t>(k)] - s * g[static_cast<std::size_t>(k)];
      forward(trial, tpath);
      const double tcost = cost_of(trial, tpath);
      if (std::isfinite(tcost) && tcost < cost) {
        accepted = true;
        cost = tcost;
        break;
      }
      // Near the optimum cost differences sink into rounding; accept on a
      // gradient-norm decrease instead (strong convexity contracts it).
      if (std::isfinite(tcost)) {
        backward(tpath, trial, tz);
        tnorms = gradient(tpath, trial, tz, tg);
        if (tnorms.first < norms.first) {
          accepted = true;
          fresh = true;
          cost = tcost;
          break;
        }
      }
      s *= 0.5;
    }
    if (!accepted)
      throw NumericalError("TaggedProblem::solve: no acceptable step (gradient stalled)");
    v.swap(trial);
    path.swap(tpath);
    if (fresh) {
      z.swap(tz);
      g.swap(tg);
      norms = tnorms;
    } else {
      backward(path, v, z);
      norms = gradient(path, v, z, g);
    }
    ++iters;
    step = std::min(s * 1.25, step_cap);
    if (so.progress) so.progress(iters, cost, norms.first);
  }

  TaggedSolution out;
  out.cost = cost;
  out.gradient = z[0].col(0);
  out.path = std::move(path);
  out.control = std::move(v);
  out.grad_norm = norms.first;
  out.grad_sup = norms.second;
  out.iterations = iters;
  out.converged = norms.first <= so.grad_tol;
  return out;
}

TaggedSolution tagged_solve(const ProblemSpec& spec, const OptimalSolution& base, ConstVec x,
                            const TaggedOptions& opts) {
  return TaggedProblem(spec, base, x, opts).solve();
}

double tagged_cost_average(const ProblemSpec& spec, const OptimalSolution& sol) {
  const TreeField& xs = sol.ensemble.field();
  const TreeField& us = sol.control.field();
  const ScenarioTree& tree = xs.tree();
  const int K = tree.grid().steps;
  const double dt = tree.grid().dt();
  const double N = static_cast<double>(xs.particles());

  // The per-particle tagged cost is l + dF/dnu along the path plus
  // h + dF_T/dnu at the leaves; the dnu terms integrate to zero against the
  // node's own measure by the normalization convention, so only l and h
  // survive the average.
  std::vector<double> probs, next;
  tree.root_probs(probs);
  double total = 0.0;
  for (int k = 0; k < K; ++k) {
    LevelStore::Pin px = xs.pin(k);
    LevelStore::Pin pu = us.pin(k);
    double lvl = 0.0;
    for (std::int64_t j = 0; j < tree.nodes(k); ++j)
      lvl += probs[static_cast<std::size_t>(j)] *
             spec_l_sum(spec, xs.node_block(px.data(), j), us.node_block(pu.data(), j));
    total += dt * lvl / N;
    tree.advance_probs(probs, next);
    probs.swap(next);
  }
  LevelStore::Pin px = xs.pin(K);
  double lvl = 0.0;
  for (std::int64_t j = 0; j < tree.nodes(K); ++j)
    lvl += probs[static_cast<std::size_t>(j)] * spec_h_sum(spec, xs.node_block(px.data(), j));
  return total + lvl / N;
}

double normalized_tagged_value(const ProblemSpec& spec, const OptimalSolution& base, ConstVec x,
                               const TaggedOptions& opts) {
  TaggedSolution tag = TaggedProblem(spec, base, x, opts).solve();
  if (!tag.converged)
    throw NumericalError("normalized_tagged_value: tagged solve did not converge");
  return tag.cost - tagged_cost_average(spec, base);
}

namespace {

/// Costate and control gradient of the quadratic expansion of the cost at the
/// base solution, evaluated at the perturbation (x0 at the root, v on the
/// control levels).  Writes the linearized state into X, the linearized
/// costate into Z, and the gradient into g.
void lin_gradient(const ProblemSpec& spec, const OptimalSolution& base, const ConstMat& x0,
                  const ControlField& v, ParticleEnsemble& X, AdjointField& Z,
                  ControlField& g) {
  const TreeField& xs = base.ensemble.field();
  const TreeField& us = base.control.field();
  const ScenarioTree& tree = xs.tree();
  const int K = tree.grid().steps;
  const int N = xs.particles();
  const int n = xs.dim();
  const double dt = tree.grid().dt();

  {
    LevelStore::Pin p0 = X.field().pin_overwrite(0);
    X.field().node_block(p0.data(), 0) = x0;
  }
  for (int k = 0; k < K; ++k) {
    LevelStore::Pin pk = X.field().pin(k);
    LevelStore::Pin pv = v.field().pin(k);
    LevelStore::Pin pn = X.field().pin_overwrite(k + 1);
    for (std::int64_t j = 0; j < tree.nodes(k); ++j) {
      const Eigen::MatrixXd drift = X.field().node_block(pk.data(), j) +
                                    dt * v.field().node_block(pv.data(), j);
      for (int c = 0; c < tree.children(); ++c)
        X.field().node_block(pn.data(), tree.child(j, c)) = drift;
    }
  }

  Eigen::MatrixXd flat(n * n, N);
  Eigen::MatrixXd acc(n, N);
  {
    LevelStore::Pin pb = xs.pin(K);
    LevelStore::Pin pl = X.field().pin(K);
    LevelStore::Pin pz = Z.field().pin_overwrite(K);
    for (std::int64_t j = 0; j < tree.nodes(K); ++j) {
      const auto xb = xs.node_block(pb.data(), j);
      const Eigen::MatrixXd xl = X.field().node_block(pl.data(), j);
      acc.setZero();
      spec_h_xx(spec, xb, flat);
      apply_blocks(flat, xl, false, acc);
      MeasureView m = xs.node_measure(pb.data(), j);
      functional_hess_apply(spec.terminal, m, xb, xl, acc);
      if (spec.terminal.has_kernel())
        functional_kernel_apply(spec.terminal, m, xb, xl, acc);
      Z.field().node_block(pz.data(), j) = acc;
    }
  }
  Eigen::MatrixXd ez(n, N);
  for (int k = K - 1; k >= 0; --k) {
    LevelStore::Pin pb = xs.pin(k);
    LevelStore::Pin pu = us.pin(k);
    LevelStore::Pin pl = X.field().pin(k);
    LevelStore::Pin pv = v.field().pin(k);
    LevelStore::Pin pzn = Z.field().pin(k + 1);
    LevelStore::Pin pz = Z.field().pin_overwrite(k);
    LevelStore::Pin pg = g.field().pin_overwrite(k);
    const Eigen::VectorXd& cp = tree.branch_probs();
    for (std::int64_t j = 0; j < tree.nodes(k); ++j) {
      const auto xb = xs.node_block(pb.data(), j);
      const auto ub = us.node_block(pu.data(), j);
      const Eigen::MatrixXd xl = X.field().node_block(pl.data(), j);
      const Eigen::MatrixXd vl = v.field().node_block(pv.data(), j);

      ez.setZero();
      for (int c = 0; c < tree.children(); ++c)
        ez += cp(c) * Z.field().node_block(pzn.data(), tree.child(j, c));

      acc.setZero();
      spec_l_xx(spec, xb, ub, flat);
      apply_blocks(flat, xl, false, acc);
      spec_l_xv(spec, xb, ub, flat);
      apply_blocks(flat, vl, false, acc);
      MeasureView m = xs.node_measure(pb.data(), j);
      functional_hess_apply(spec.running, m, xb, xl, acc);
      if (spec.running.has_kernel())
        functional_kernel_apply(spec.running, m, xb, xl, acc);
      Z.field().node_block(pz.data(), j) = ez + dt * acc;

      acc.setZero();
      apply_blocks(flat, xl, true, acc);  // flat still holds l_xv
      spec_l_vv(spec, xb, ub, flat);
      apply_blocks(flat, vl, false, acc);
      g.field().node_block(pg.data(), j) = acc + ez;
    }
  }
}

}  // namespace

SecondDirectional second_directional(const ProblemSpec& spec, const OptimalSolution& base,
                                     const ConstMat& dir, double tol, int max_iters) {
  spec.validate();
  if (!base.converged)
    throw InvalidArgument("second_directional: base solution is not converged");
  const TreeField& xs = base.ensemble.field();
  const ScenarioTree& tree = xs.tree();
  const int N = xs.particles();
  const int n = xs.dim();
  if (dir.rows() != n || dir.cols() != N)
    throw InvalidArgument("second_directional: direction must be dim x particles");
  if (!(tol > 0.0)) throw InvalidArgument("second_directional: tol must be positive");
  if (check_convexity_margin(spec) <= 0.0)
    throw SolvabilityError("second_directional: convexity margin is not positive");

  SecondDirectional out;
  out.direction = dir;
  if (!spec.running.has_hess() || !spec.terminal.has_hess()) {
    out.skipped = true;
    out.result = Eigen::MatrixXd::Zero(n, N);
    return out;
  }
  out.kernel_dropped = !spec.running.has_kernel() || !spec.terminal.has_kernel();

  ParticleEnsemble X(tree, N);
  AdjointField Z(tree, N);
  ControlField V(tree, N), r(tree, N), p(tree, N), Ap(tree, N);
  V.fill(0.0);
  const Eigen::MatrixXd zero_root = Eigen::MatrixXd::Zero(n, N);

  // Stationarity of the quadratic expansion: gradient(V) = A V + b with
  // b = gradient at V = 0.  Solve A V = -b by conjugate gradients in the
  // control metric (A is symmetric positive definite under the margin).
  lin_gradient(spec, base, dir, V, X, Z, Ap);
  field_axpy(Ap.field(), -2.0, Ap.field(), r.field());  // r = -b
  const double bnorm = std::sqrt(control_inner(r, r));
  int iters = 0;
  if (bnorm > 0.0) {
    field_copy(r.field(), p.field());
    double rs = bnorm * bnorm;
    bool done = false;
    for (; iters < max_iters; ) {
      lin_gradient(spec, base, zero_root, p, X, Z, Ap);
      const double pap = control_inner(p, Ap);
      if (!(pap > 0.0))
        throw NumericalError("second_directional: operator lost positivity");
      const double alpha = rs / pap;
      field_axpy(V.field(), alpha, p.field(), V.field());
      field_axpy(r.field(), -alpha, Ap.field(), r.field());
      const double rs_next = control_inner(r, r);
      ++iters;
      if (std::sqrt(rs_next) <= tol * bnorm) {
        done = true;
        break;
      }
      field_axpy(r.field(), rs_next / rs, p.field(), p.field());
      rs = rs_next;
    }
    if (!done)
      throw NumericalError("second_directional: conjugate gradients did not reach tol");
  }

  lin_gradient(spec, base, dir, V, X, Z, Ap);
  out.cg_iterations = iters;
  {
    LevelStore::Pin pz = Z.field().pin(0);
    out.result = Z.field().node_block(pz.data(), 0);
  }
  const double nd = static_cast<double>(N);
  out.lq_value = 0.5 * (out.direction.cwiseProduct(out.result)).sum() / nd;
  const double dir_norm = std::sqrt(out.direction.squaredNorm() / nd);
  const double res_norm = std::sqrt(out.result.squaredNorm() / nd);
  out.operator_bound = dir_norm > 0.0 ? res_norm / dir_norm : 0.0;
  return out;
}

double dU_dnu_fd(const ProblemSpec& spec, const ConstMat& initial, const ScenarioTree& tree,
                 CounterRng rng, ConstVec x, ConstVec x1, double eps, const SolveOptions& sopts,
                 const TaggedOptions& topts) {
  spec.validate();
  if (initial.rows() != spec.dim)
    throw InvalidArgument("dU_dnu_fd: initial points dimension mismatch");
  if (!(eps > 0.0 && eps < 1.0)) throw InvalidArgument("dU_dnu_fd: eps must lie in (0, 1)");
  const int N = static_cast<int>(initial.cols());
  const int m = std::max(1, static_cast<int>(std::lround(eps * N / (1.0 - eps))));
  const double eps_eff = static_cast<double>(m) / static_cast<double>(N + m);

  // Same rng seed for both flows: Philox draws are keyed by particle index,
  // so the first N particles share their noise with the base flow and the
  // difference isolates the injected mass.
  auto value_at = [&](const ConstMat& pts) {
    ShiftPlan shifts(spec, tree, static_cast<int>(pts.cols()), rng, true);
    OptimalSolution sol = solve_mfc(spec, pts, tree, shifts, sopts);
    TaggedSolution tag = TaggedProblem(spec, sol, x, topts).solve();
    if (!tag.converged) throw NumericalError("dU_dnu_fd: tagged solve did not converge");
    return tag.cost - tagged_cost_average(spec, sol);
  };

  Eigen::MatrixXd inj(spec.dim, N + m);
  inj.leftCols(N) = initial;
  for (int c = 0; c < m; ++c) inj.col(N + c) = x1;
  return (value_at(inj) - value_at(initial)) / eps_eff;
}

}  // namespace mfc
