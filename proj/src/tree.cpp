#include "mfc/tree.hpp"

#include <cmath>
#include <ostream>

namespace mfc {

ScenarioTree::ScenarioTree(const TimeGrid& grid, int branching, int dim,
                           std::int64_t max_nodes)
    : grid_(grid), dim_(dim), branching_(branching) {
  if (dim < 1) throw InvalidArgument("scenario tree: dim must be >= 1");
  if (branching < 1 || branching > 3)
    throw InvalidArgument("scenario tree: branching must be 1, 2, or 3");

  const double dt = grid_.dt();
  Eigen::VectorXd pts(branching), wts(branching);
  switch (branching) {
    case 1:
      pts << 0.0;
      wts << 1.0;
      break;
    case 2:
      pts << -std::sqrt(dt), std::sqrt(dt);
      wts << 0.5, 0.5;
      break;
    default:  // three-point Gauss-Hermite for N(0, dt)
      pts << -std::sqrt(3.0 * dt), 0.0, std::sqrt(3.0 * dt);
      wts << 1.0 / 6.0, 2.0 / 3.0, 1.0 / 6.0;
      break;
  }

  // Product stencil over coordinates: child index c has base-`branching`
  // digits, digit d selecting the quadrature point of coordinate d.
  double children_f = 1;
  for (int d = 0; d < dim; ++d) children_f *= branching;
  if (children_f > 4096)
    throw InvalidArgument("scenario tree: branching^dim too large");
  children_ = static_cast<int>(children_f);
  incr_.resize(dim, children_);
  prob_.resize(children_);
  for (int c = 0; c < children_; ++c) {
    int rest = c;
    double p = 1.0;
    for (int d = 0; d < dim; ++d) {
      const int digit = rest % branching;
      rest /= branching;
      incr_(d, c) = pts[digit];
      p *= wts[digit];
    }
    prob_[c] = p;
  }

  node_count_.resize(static_cast<std::size_t>(grid_.steps) + 1);
  std::int64_t count = 1;
  for (int k = 0; k <= grid_.steps; ++k) {
    node_count_[static_cast<std::size_t>(k)] = count;
    if (k == grid_.steps) break;
    if (count > max_nodes / children_)
      throw InvalidArgument("scenario tree: level " + std::to_string(k + 1) +
                            " exceeds the node cap (" + std::to_string(max_nodes) +
                            "); lower K or branching");
    count *= children_;
  }
}

void ScenarioTree::root_probs(std::vector<double>& out) const {
  out.assign(1, 1.0);
}

void ScenarioTree::advance_probs(const std::vector<double>& parent,
                                 std::vector<double>& out) const {
  out.resize(parent.size() * static_cast<std::size_t>(children_));
  for (std::size_t j = 0; j < parent.size(); ++j)
    for (int c = 0; c < children_; ++c)
      out[j * static_cast<std::size_t>(children_) + static_cast<std::size_t>(c)] =
          parent[j] * prob_[c];
}

void ScenarioTree::write_topology_json(std::ostream& os) const {
  os << "{\"steps\":" << grid_.steps << ",\"dim\":" << dim_
     << ",\"branching\":" << branching_ << ",\"children_per_node\":" << children_;
  os.precision(17);
  os << ",\"increments\":[";
  for (int c = 0; c < children_; ++c) {
    os << (c ? "," : "") << "[";
    for (int d = 0; d < dim_; ++d) os << (d ? "," : "") << incr_(d, c);
    os << "]";
  }
  os << "],\"branch_probs\":[";
  for (int c = 0; c < children_; ++c) os << (c ? "," : "") << prob_[c];
  os << "],\"node_counts\":[";
  for (std::size_t k = 0; k < node_count_.size(); ++k)
    os << (k ? "," : "") << node_count_[k];
  os << "]}";
}

}  // namespace mfc
