#include "mfc/dynamics.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "mfc/errors.hpp"
#include "mfc/parallel.hpp"

namespace mfc {

namespace {

std::size_t node_grain(int particles) {
  // Keep chunk work around kDefaultGrain particle-coordinates; the grid is a
  // function of the level shape only, never of the worker count.
  const std::size_t g = kDefaultGrain / static_cast<std::size_t>(particles);
  return g < 1 ? 1 : g;
}

[[noreturn]] void throw_nonfinite(const char* what, int k, std::int64_t j) {
  throw NumericalError(std::string(what) + " turned non-finite at step " + std::to_string(k) +
                       ", node " + std::to_string(j));
}

}  // namespace

// ============================================================================
// ShiftPlan.
// ============================================================================

ShiftPlan::ShiftPlan(const ProblemSpec& spec, const ScenarioTree& tree, int particles,
                     CounterRng rng, bool precompute, int step_offset, std::int64_t node_base)
    : tree_(&tree),
      particles_(particles),
      dim_(tree.dim()),
      rng_(rng),
      sigma_(spec.sigma),
      common_(spec.beta * tree.increments()),
      sqrt_dt_(std::sqrt(tree.grid().dt())),
      step_offset_(step_offset),
      node_base_(node_base) {
  if (spec.dim != tree.dim()) throw InvalidArgument("shift plan: spec/tree dimension mismatch");
  if (step_offset < 0 || node_base < 0)
    throw InvalidArgument("shift plan: anchor indices must be nonnegative");
  level_scale_.resize(static_cast<std::size_t>(tree.grid().steps) + 1, 1);
  for (std::size_t k = 1; k < level_scale_.size(); ++k) {
    const std::int64_t prev = level_scale_[k - 1];
    if (node_base_ != 0 && prev > std::numeric_limits<std::int64_t>::max() / tree.children())
      throw InvalidArgument("shift plan: anchored node indices overflow");
    level_scale_[k] = prev * tree.children();
  }
  has_idio_ = sigma_.cwiseAbs().maxCoeff() > 0.0;
  sigma_diagonal_ = sigma_.isDiagonal(0.0);
  if (precompute && has_idio_) {
    cache_ = std::make_unique<TreeField>(tree, particles, tree.grid().steps + 1);
    for (int k = 0; k < tree.grid().steps; ++k) {
      LevelStore::Pin pin = cache_->pin_overwrite(k + 1);
      double* data = pin.data();
      const std::int64_t count = tree.nodes(k + 1);
      parallel_chunks(static_cast<std::size_t>(count), node_grain(particles),
                      [&](std::size_t, std::size_t b, std::size_t e) {
                        for (std::size_t jc = b; jc < e; ++jc) {
                          auto block = cache_->node_block(data, static_cast<std::int64_t>(jc));
                          block.setZero();
                          compute_block(k, static_cast<std::int64_t>(jc), block);
                        }
                      });
    }
  }
}

void ShiftPlan::compute_block(int k, std::int64_t jc, RefMat out) const {
  const int branch = tree_->branch_of(jc);
  out.colwise() += common_.col(branch);
  if (!has_idio_) return;
  const auto uk = static_cast<std::uint64_t>(k + step_offset_);
  const auto uj = static_cast<std::uint64_t>(
      node_base_ * level_scale_[static_cast<std::size_t>(k) + 1] + jc);
  if (sigma_diagonal_) {
    for (int i = 0; i < particles_; ++i)
      for (int d = 0; d < dim_; ++d)
        out(d, i) += sigma_(d, d) * sqrt_dt_ *
                     rng_.normal(uk, uj, static_cast<std::uint64_t>(i),
                                 rng_channel::kIdio + static_cast<std::uint32_t>(d));
  } else {
    Eigen::VectorXd xi(dim_);
    for (int i = 0; i < particles_; ++i) {
      for (int d = 0; d < dim_; ++d)
        xi[d] = rng_.normal(uk, uj, static_cast<std::uint64_t>(i),
                            rng_channel::kIdio + static_cast<std::uint32_t>(d));
      out.col(i) += sigma_ * (sqrt_dt_ * xi);
    }
  }
}

ShiftPlan::Level ShiftPlan::level(int k) const {
  Level lvl;
  lvl.plan_ = this;
  lvl.k_ = k;
  if (cache_) lvl.pin_ = std::make_unique<LevelStore::Pin>(cache_->pin(k + 1));
  return lvl;
}

void ShiftPlan::Level::add(std::int64_t jc, RefMat out) const {
  if (pin_) {
    out += plan_->cache_->node_block(static_cast<const double*>(pin_->data()), jc);
    return;
  }
  // Accumulate into scratch first so the rounding order matches the
  // precomputed path bitwise (cache fill + single add).
  thread_local Eigen::MatrixXd scratch;
  scratch.resize(out.rows(), out.cols());
  scratch.setZero();
  plan_->compute_block(k_, jc, scratch);
  out += scratch;
}

// ============================================================================
// Cost quadrature pieces.
// ============================================================================

double running_cost_level(const ProblemSpec& spec, int k, const ScenarioTree& tree,
                          const double* x_level, const double* u_level, int particles,
                          const std::vector<double>& probs) {
  const int n = tree.dim();
  const std::size_t block = static_cast<std::size_t>(n) * static_cast<std::size_t>(particles);
  const std::int64_t count = tree.nodes(k);
  const double inv_n = 1.0 / static_cast<double>(particles);
  return parallel_reduce(
      static_cast<std::size_t>(count), node_grain(particles),
      [&](std::size_t, std::size_t b, std::size_t e) {
        double acc = 0.0;
        for (std::size_t j = b; j < e; ++j) {
          Eigen::Map<const Eigen::MatrixXd> X(x_level + j * block, n, particles);
          Eigen::Map<const Eigen::MatrixXd> U(u_level + j * block, n, particles);
          const MeasureView m{x_level + j * block, nullptr, n, particles};
          const double node = inv_n * spec_l_sum(spec, X, U) + spec.running.value(m);
          if (!std::isfinite(node))
            throw_nonfinite("running cost", k, static_cast<std::int64_t>(j));
          acc += probs[j] * node;
        }
        return acc;
      });
}

double terminal_cost_level(const ProblemSpec& spec, const ScenarioTree& tree,
                           const double* x_level, int particles,
                           const std::vector<double>& probs) {
  const int n = tree.dim();
  const int K = tree.grid().steps;
  const std::size_t block = static_cast<std::size_t>(n) * static_cast<std::size_t>(particles);
  const std::int64_t count = tree.nodes(K);
  const double inv_n = 1.0 / static_cast<double>(particles);
  return parallel_reduce(
      static_cast<std::size_t>(count), node_grain(particles),
      [&](std::size_t, std::size_t b, std::size_t e) {
        double acc = 0.0;
        for (std::size_t j = b; j < e; ++j) {
          Eigen::Map<const Eigen::MatrixXd> X(x_level + j * block, n, particles);
          const MeasureView m{x_level + j * block, nullptr, n, particles};
          const double node = inv_n * spec_h_sum(spec, X) + spec.terminal.value(m);
          if (!std::isfinite(node))
            throw_nonfinite("terminal cost", K, static_cast<std::int64_t>(j));
          acc += probs[j] * node;
        }
        return acc;
      });
}

// ============================================================================
// Forward simulation.
// ============================================================================

namespace {

/// One Euler step: children of level k computed from parents.
void step_level(const ScenarioTree& tree, int k, int particles,
                const double* x_parent, const double* u_parent, double* x_child,
                const ShiftPlan& shifts) {
  const int n = tree.dim();
  const double dt = tree.grid().dt();
  const std::size_t block = static_cast<std::size_t>(n) * static_cast<std::size_t>(particles);
  const std::int64_t count = tree.nodes(k + 1);
  const ShiftPlan::Level shift_level = shifts.level(k);
  parallel_chunks(static_cast<std::size_t>(count), node_grain(particles),
                  [&](std::size_t, std::size_t b, std::size_t e) {
                    for (std::size_t jc = b; jc < e; ++jc) {
                      const std::size_t jp =
                          jc / static_cast<std::size_t>(tree.children());
                      Eigen::Map<const Eigen::MatrixXd> Xp(x_parent + jp * block, n, particles);
                      Eigen::Map<const Eigen::MatrixXd> Up(u_parent + jp * block, n, particles);
                      Eigen::Map<Eigen::MatrixXd> Xc(x_child + jc * block, n, particles);
                      Xc = Xp + dt * Up;
                      shift_level.add(static_cast<std::int64_t>(jc), Xc);
                      if (!Xc.allFinite())
                        throw_nonfinite("state", k + 1, static_cast<std::int64_t>(jc));
                    }
                  });
}

}  // namespace

void simulate_forward(const ProblemSpec& spec, const ControlField& u, const ShiftPlan& shifts,
                      ParticleEnsemble& ens, double* cost_out) {
  const ScenarioTree& tree = ens.field().tree();
  const int K = tree.grid().steps;
  const int N = ens.particles();
  const double dt = tree.grid().dt();
  if (u.particles() != N || u.field().dim() != ens.dim())
    throw InvalidArgument("simulate: control/ensemble shape mismatch");

  std::vector<double> probs, next_probs;
  tree.root_probs(probs);
  double cost = 0.0;
  for (int k = 0; k < K; ++k) {
    LevelStore::Pin xp = ens.field().pin(k);
    LevelStore::Pin up = u.field().pin(k);
    if (cost_out)
      cost += dt * running_cost_level(spec, k, tree, xp.data(), up.data(), N, probs);
    LevelStore::Pin xc = ens.field().pin_overwrite(k + 1);
    step_level(tree, k, N, xp.data(), up.data(), xc.data(), shifts);
    tree.advance_probs(probs, next_probs);
    probs.swap(next_probs);
  }
  if (cost_out) {
    LevelStore::Pin xk = ens.field().pin(K);
    cost += terminal_cost_level(spec, tree, xk.data(), N, probs);
    *cost_out = cost;
  }
}

double simulate_cost(const ProblemSpec& spec, const ControlField& u, const ShiftPlan& shifts,
                     const ConstMat& initial_points) {
  const ScenarioTree& tree = u.field().tree();
  const int K = tree.grid().steps;
  const int N = u.particles();
  const int n = tree.dim();
  const double dt = tree.grid().dt();
  if (initial_points.rows() != n || initial_points.cols() != N)
    throw InvalidArgument("simulate: initial block must be dim x particles");

  const std::size_t block = static_cast<std::size_t>(n) * static_cast<std::size_t>(N);
  std::vector<double> cur(block), next;
  Eigen::Map<Eigen::MatrixXd>(cur.data(), n, N) = initial_points;

  std::vector<double> probs, next_probs;
  tree.root_probs(probs);
  double cost = 0.0;
  for (int k = 0; k < K; ++k) {
    LevelStore::Pin up = u.field().pin(k);
    cost += dt * running_cost_level(spec, k, tree, cur.data(), up.data(), N, probs);
    next.resize(static_cast<std::size_t>(tree.nodes(k + 1)) * block);
    step_level(tree, k, N, cur.data(), up.data(), next.data(), shifts);
    cur.swap(next);
    tree.advance_probs(probs, next_probs);
    probs.swap(next_probs);
  }
  cost += terminal_cost_level(spec, tree, cur.data(), N, probs);
  return cost;
}

}  // namespace mfc
