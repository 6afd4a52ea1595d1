#include "mfc/adjoint.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <vector>

#include "mfc/errors.hpp"
#include "mfc/parallel.hpp"

namespace mfc {

namespace {

std::size_t node_grain(std::size_t block) {
  return std::max<std::size_t>(1, kDefaultGrain / block);
}

std::vector<std::vector<double>> all_level_probs(const ScenarioTree& tree) {
  const int K = tree.grid().steps;
  std::vector<std::vector<double>> probs(static_cast<std::size_t>(K) + 1);
  tree.root_probs(probs[0]);
  for (int k = 0; k < K; ++k)
    tree.advance_probs(probs[static_cast<std::size_t>(k)],
                       probs[static_cast<std::size_t>(k) + 1]);
  return probs;
}

/// Terminal condition Z[K] = h_x + grad dF_T/dnu.
void fill_terminal(const ProblemSpec& spec, const ScenarioTree& tree, int particles,
                   const double* x_level, double* z_level) {
  const int n = tree.dim();
  const std::size_t block = static_cast<std::size_t>(n) * static_cast<std::size_t>(particles);
  const std::int64_t count = tree.nodes(tree.grid().steps);
  parallel_chunks(
      static_cast<std::size_t>(count), node_grain(block),
      [&](std::size_t, std::size_t lo, std::size_t hi) {
        Eigen::MatrixXd grad(n, particles);
        for (std::size_t j = lo; j < hi; ++j) {
          Eigen::Map<const Eigen::MatrixXd> X(x_level + j * block, n, particles);
          Eigen::Map<Eigen::MatrixXd> Z(z_level + j * block, n, particles);
          const MeasureView m{x_level + j * block, nullptr, n, particles};
          spec_h_x(spec, X, Z);
          functional_grad_batch(spec.terminal, m, X, grad);
          Z += grad;
        }
      });
}

/// One backward level: for every parent j at level k computes
///   ecz = sum_c p_c Z[k+1](child c), then
///   G[k](j) = l_v + ecz                  (when g_level != nullptr)
///   Z[k](j) = ecz + dt (l_x + grad dnu)  (when z_prev != nullptr).
void backward_level(const ProblemSpec& spec, const ScenarioTree& tree, int k, int particles,
                    const double* x_level, const double* u_level, const double* z_next,
                    double* z_prev, double* g_level) {
  const int n = tree.dim();
  const double dt = tree.grid().dt();
  const int children = tree.children();
  const Eigen::VectorXd& pc = tree.branch_probs();
  const std::size_t block = static_cast<std::size_t>(n) * static_cast<std::size_t>(particles);
  const std::int64_t count = tree.nodes(k);
  parallel_chunks(
      static_cast<std::size_t>(count), node_grain(block),
      [&](std::size_t, std::size_t lo, std::size_t hi) {
        Eigen::MatrixXd ecz(n, particles), tmp(n, particles), grad(n, particles);
        for (std::size_t j = lo; j < hi; ++j) {
          ecz.setZero();
          for (int c = 0; c < children; ++c) {
            const std::size_t jc = j * static_cast<std::size_t>(children) +
                                   static_cast<std::size_t>(c);
            ecz += pc[c] * Eigen::Map<const Eigen::MatrixXd>(z_next + jc * block, n, particles);
          }
          Eigen::Map<const Eigen::MatrixXd> X(x_level + j * block, n, particles);
          Eigen::Map<const Eigen::MatrixXd> U(u_level + j * block, n, particles);
          const MeasureView m{x_level + j * block, nullptr, n, particles};
          if (g_level) {
            Eigen::Map<Eigen::MatrixXd> G(g_level + j * block, n, particles);
            spec_l_v(spec, X, U, tmp);
            G = tmp + ecz;
          }
          if (z_prev) {
            Eigen::Map<Eigen::MatrixXd> Z(z_prev + j * block, n, particles);
            spec_l_x(spec, X, U, tmp);
            functional_grad_batch(spec.running, m, X, grad);
            Z = ecz + dt * (tmp + grad);
            if (!Z.allFinite())
              throw NumericalError("adjoint turned non-finite at step " + std::to_string(k) +
                                   ", node " + std::to_string(static_cast<long long>(j)));
          }
        }
      });
}

double level_sup(const double* data, std::size_t count) {
  const std::size_t grain = kDefaultGrain;
  const std::size_t chunks = (count + grain - 1) / grain;
  std::vector<double> maxima(chunks, 0.0);
  parallel_chunks(count, grain, [&](std::size_t c, std::size_t lo, std::size_t hi) {
    double m = 0.0;
    for (std::size_t s = lo; s < hi; ++s) m = std::max(m, std::abs(data[s]));
    maxima[c] = m;
  });
  double m = 0.0;
  for (double v : maxima) m = std::max(m, v);
  return m;
}

}  // namespace

AdjointField solve_bsde(const ProblemSpec& spec, const ParticleEnsemble& ens,
                        const ControlField& u) {
  spec.validate();
  const ScenarioTree& tree = ens.field().tree();
  const int K = tree.grid().steps;
  const int N = ens.particles();
  if (u.particles() != N) throw InvalidArgument("adjoint: control/ensemble shape mismatch");

  AdjointField z(tree, N);
  {
    LevelStore::Pin x = ens.field().pin(K);
    LevelStore::Pin zk = z.field().pin_overwrite(K);
    fill_terminal(spec, tree, N, x.data(), zk.data());
  }
  for (int k = K - 1; k >= 0; --k) {
    LevelStore::Pin x = ens.field().pin(k);
    LevelStore::Pin uk = u.field().pin(k);
    LevelStore::Pin znext = z.field().pin(k + 1);
    LevelStore::Pin zk = z.field().pin_overwrite(k);
    backward_level(spec, tree, k, N, x.data(), uk.data(), znext.data(), zk.data(), nullptr);
  }
  return z;
}

GradientNorms cost_gradient(const ProblemSpec& spec, const ParticleEnsemble& ens,
                            const ControlField& u, ControlField* grad_out) {
  spec.validate();
  const ScenarioTree& tree = ens.field().tree();
  const int K = tree.grid().steps;
  const int N = ens.particles();
  const int n = tree.dim();
  const double dt = tree.grid().dt();
  if (u.particles() != N) throw InvalidArgument("gradient: control/ensemble shape mismatch");
  if (grad_out && grad_out->particles() != N)
    throw InvalidArgument("gradient: output shape mismatch");

  const auto probs = all_level_probs(tree);
  const std::size_t block = static_cast<std::size_t>(n) * static_cast<std::size_t>(N);

  std::vector<double> z_next, z_prev, g_scratch;
  {
    LevelStore::Pin x = ens.field().pin(K);
    z_next.resize(static_cast<std::size_t>(tree.nodes(K)) * block);
    fill_terminal(spec, tree, N, x.data(), z_next.data());
  }

  GradientNorms norms;
  double sq = 0.0;
  for (int k = K - 1; k >= 0; --k) {
    LevelStore::Pin x = ens.field().pin(k);
    LevelStore::Pin uk = u.field().pin(k);
    const std::size_t level_doubles = static_cast<std::size_t>(tree.nodes(k)) * block;
    double* g_data = nullptr;
    std::unique_ptr<LevelStore::Pin> g_pin;
    if (grad_out) {
      g_pin = std::make_unique<LevelStore::Pin>(grad_out->field().pin_overwrite(k));
      g_data = g_pin->data();
    } else {
      g_scratch.resize(level_doubles);
      g_data = g_scratch.data();
    }
    z_prev.resize(level_doubles);
    backward_level(spec, tree, k, N, x.data(), uk.data(), z_next.data(),
                   k > 0 ? z_prev.data() : nullptr, g_data);
    sq += dt * level_inner(g_data, g_data, probs[static_cast<std::size_t>(k)], tree.nodes(k),
                           n, N);
    norms.sup = std::max(norms.sup, level_sup(g_data, level_doubles));
    z_next.swap(z_prev);
  }
  norms.rms = std::sqrt(sq / (tree.grid().horizon - tree.grid().t0));
  return norms;
}

}  // namespace mfc
