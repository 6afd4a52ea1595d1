#include "mfc/ensemble.hpp"

#include <algorithm>
#include <ostream>
#include <vector>

#include "mfc/errors.hpp"
#include "mfc/parallel.hpp"

namespace mfc {

namespace {

std::vector<std::size_t> level_sizes(const ScenarioTree& tree, int particles, int levels) {
  std::vector<std::size_t> sizes(static_cast<std::size_t>(levels));
  for (int k = 0; k < levels; ++k)
    sizes[static_cast<std::size_t>(k)] = static_cast<std::size_t>(tree.nodes(k)) *
                                         static_cast<std::size_t>(particles) *
                                         static_cast<std::size_t>(tree.dim());
  return sizes;
}

}  // namespace

TreeField::TreeField(const ScenarioTree& tree, int particles, int levels)
    : tree_(&tree),
      dim_(tree.dim()),
      particles_(particles),
      levels_(levels),
      store_(level_sizes(tree, particles, levels), store_ram_budget()) {
  if (particles < 1) throw InvalidArgument("tree field: need at least one particle");
  if (levels < 1 || levels > tree.grid().steps + 1)
    throw InvalidArgument("tree field: bad level count");
}

void ParticleEnsemble::set_initial(const ConstMat& points) {
  if (points.rows() != field_.dim() || points.cols() != field_.particles())
    throw InvalidArgument("ensemble: initial block must be dim x particles");
  LevelStore::Pin pin = field_.pin_overwrite(0);
  field_.node_block(pin.data(), 0) = points;
}

EmpiricalMeasure ParticleEnsemble::conditional_measure(int k, std::int64_t j) const {
  if (k < 0 || k >= field_.levels() || j < 0 || j >= field_.nodes(k))
    throw InvalidArgument("ensemble: node index out of range");
  LevelStore::Pin pin = field_.pin(k);
  return equal_weight_measure(field_.node_block(pin.data(), j));
}

Eigen::VectorXd ParticleEnsemble::conditional_mean(int k, std::int64_t j) const {
  if (k < 0 || k >= field_.levels() || j < 0 || j >= field_.nodes(k))
    throw InvalidArgument("ensemble: node index out of range");
  LevelStore::Pin pin = field_.pin(k);
  return field_.node_block(pin.data(), j).rowwise().mean();
}

void ControlField::fill(double value) {
  for (int k = 0; k < field_.levels(); ++k) {
    LevelStore::Pin pin = field_.pin_overwrite(k);
    const std::size_t count = field_.level_doubles(k);
    double* data = pin.data();
    for (std::size_t s = 0; s < count; ++s) data[s] = value;
  }
}

double level_inner(const double* a, const double* b, const std::vector<double>& probs,
                   std::int64_t nodes, int dim, int particles) {
  const std::size_t block = static_cast<std::size_t>(dim) * static_cast<std::size_t>(particles);
  const std::size_t grain = std::max<std::size_t>(1, kDefaultGrain / block);
  const double inv_n = 1.0 / static_cast<double>(particles);
  return parallel_reduce(static_cast<std::size_t>(nodes), grain,
                         [&](std::size_t, std::size_t lo, std::size_t hi) {
                           double acc = 0.0;
                           for (std::size_t j = lo; j < hi; ++j) {
                             Eigen::Map<const Eigen::VectorXd> va(a + j * block, block);
                             Eigen::Map<const Eigen::VectorXd> vb(b + j * block, block);
                             acc += probs[j] * inv_n * va.dot(vb);
                           }
                           return acc;
                         });
}

double control_inner(const ControlField& a, const ControlField& b) {
  const ScenarioTree& tree = a.field().tree();
  const double dt = tree.grid().dt();
  std::vector<double> probs, next;
  tree.root_probs(probs);
  double acc = 0.0;
  for (int k = 0; k < a.steps(); ++k) {
    LevelStore::Pin pa = a.field().pin(k);
    LevelStore::Pin pb = b.field().pin(k);
    acc += dt * level_inner(pa.data(), pb.data(), probs, tree.nodes(k), a.dim(),
                            a.particles());
    tree.advance_probs(probs, next);
    probs.swap(next);
  }
  return acc;
}

void field_copy(const TreeField& a, TreeField& dst) {
  for (int k = 0; k < a.levels(); ++k) {
    LevelStore::Pin pa = a.pin(k);
    LevelStore::Pin pd = dst.pin_overwrite(k);
    const std::size_t count = a.level_doubles(k);
    const double* src = pa.data();
    double* out = pd.data();
    parallel_chunks(count, kDefaultGrain, [&](std::size_t, std::size_t b, std::size_t e) {
      for (std::size_t s = b; s < e; ++s) out[s] = src[s];
    });
  }
}

void field_axpy(const TreeField& a, double t, const TreeField& b, TreeField& dst) {
  for (int k = 0; k < a.levels(); ++k) {
    LevelStore::Pin pa = a.pin(k);
    LevelStore::Pin pb = b.pin(k);
    LevelStore::Pin pd = dst.pin(k);
    pd.mark_dirty();
    const std::size_t count = a.level_doubles(k);
    const double* xa = pa.data();
    const double* xb = pb.data();
    double* out = pd.data();
    parallel_chunks(count, kDefaultGrain, [&](std::size_t, std::size_t lo, std::size_t hi) {
      for (std::size_t s = lo; s < hi; ++s) out[s] = xa[s] + t * xb[s];
    });
  }
}

double field_max_abs(const TreeField& a) {
  double worst = 0.0;
  for (int k = 0; k < a.levels(); ++k) {
    LevelStore::Pin pa = a.pin(k);
    const double* data = pa.data();
    const std::size_t count = a.level_doubles(k);
    Eigen::Map<const Eigen::ArrayXd> arr(data, static_cast<Eigen::Index>(count));
    worst = std::max(worst, arr.abs().maxCoeff());
  }
  return worst;
}

double field_max_diff(const TreeField& a, const TreeField& b) {
  double worst = 0.0;
  for (int k = 0; k < a.levels(); ++k) {
    LevelStore::Pin pa = a.pin(k);
    LevelStore::Pin pb = b.pin(k);
    const std::size_t count = a.level_doubles(k);
    Eigen::Map<const Eigen::ArrayXd> xa(pa.data(), static_cast<Eigen::Index>(count));
    Eigen::Map<const Eigen::ArrayXd> xb(pb.data(), static_cast<Eigen::Index>(count));
    if (count > 0) worst = std::max(worst, (xa - xb).abs().maxCoeff());
  }
  return worst;
}

void write_field_csv(std::ostream& os, const TreeField& field) {
  os << "k,j,i";
  for (int d = 0; d < field.dim(); ++d) os << ",x" << (d + 1);
  os << "\n";
  os.precision(17);
  for (int k = 0; k < field.levels(); ++k) {
    LevelStore::Pin pin = field.pin(k);
    for (std::int64_t j = 0; j < field.nodes(k); ++j) {
      const auto block = field.node_block(static_cast<const double*>(pin.data()), j);
      for (int i = 0; i < field.particles(); ++i) {
        os << k << "," << j << "," << i;
        for (int d = 0; d < field.dim(); ++d) os << "," << block(d, i);
        os << "\n";
      }
    }
  }
}

}  // namespace mfc
