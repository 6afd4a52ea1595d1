#include "mfc/measure.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "mfc/errors.hpp"

namespace mfc {

void EmpiricalMeasure::validate() const {
  if (points.cols() != weights.size())
    throw InvalidArgument("measure: atom count mismatch between points and weights");
  if (points.cols() == 0) throw InvalidArgument("measure: no atoms");
  if (!points.allFinite() || !weights.allFinite())
    throw InvalidArgument("measure: non-finite entry");
  double total = 0.0;
  for (Eigen::Index i = 0; i < weights.size(); ++i) {
    if (weights[i] < 0.0) throw InvalidArgument("measure: negative weight");
    total += weights[i];
  }
  if (std::abs(total - 1.0) > 1e-12)
    throw InvalidArgument("measure: weights sum to " + std::to_string(total) +
                          ", expected 1 within 1e-12");
}

EmpiricalMeasure equal_weight_measure(Eigen::MatrixXd points) {
  EmpiricalMeasure m;
  const Eigen::Index count = points.cols();
  if (count == 0) throw InvalidArgument("measure: no atoms");
  m.points = std::move(points);
  m.weights = Eigen::VectorXd::Constant(count, 1.0 / static_cast<double>(count));
  m.validate();
  return m;
}

Eigen::VectorXd mean(const MeasureView& m) {
  Eigen::VectorXd out = Eigen::VectorXd::Zero(m.dim);
  for (Eigen::Index i = 0; i < m.atoms; ++i) out += m.weight(i) * m.atom(i);
  return out;
}

double second_moment(const MeasureView& m) {
  double out = 0.0;
  for (Eigen::Index i = 0; i < m.atoms; ++i) out += m.weight(i) * m.atom(i).squaredNorm();
  return out;
}

EmpiricalMeasure pushforward(const EmpiricalMeasure& m,
                             const std::function<Eigen::VectorXd(ConstVec)>& map) {
  m.validate();
  EmpiricalMeasure out;
  out.weights = m.weights;
  Eigen::VectorXd first = map(m.points.col(0));
  out.points.resize(first.size(), m.atoms());
  out.points.col(0) = first;
  for (Eigen::Index i = 1; i < m.atoms(); ++i) {
    Eigen::VectorXd y = map(m.points.col(i));
    if (y.size() != first.size())
      throw InvalidArgument("pushforward: map returns inconsistent dimensions");
    out.points.col(i) = y;
  }
  out.validate();
  return out;
}

EmpiricalMeasure mix(const EmpiricalMeasure& a, const EmpiricalMeasure& b, double eps) {
  a.validate();
  b.validate();
  if (a.dim() != b.dim()) throw InvalidArgument("mix: dimension mismatch");
  if (!(eps >= 0.0 && eps <= 1.0)) throw InvalidArgument("mix: eps must lie in [0,1]");
  constexpr double kDedupTol = 1e-14;

  std::vector<Eigen::VectorXd> atoms;
  std::vector<double> weights;
  atoms.reserve(static_cast<std::size_t>(a.atoms() + b.atoms()));
  auto insert = [&](const Eigen::VectorXd& x, double w) {
    if (w == 0.0) return;
    for (std::size_t s = 0; s < atoms.size(); ++s) {
      if ((atoms[s] - x).cwiseAbs().maxCoeff() <= kDedupTol) {
        weights[s] += w;
        return;
      }
    }
    atoms.push_back(x);
    weights.push_back(w);
  };
  for (Eigen::Index i = 0; i < a.atoms(); ++i) insert(a.points.col(i), (1.0 - eps) * a.weights[i]);
  for (Eigen::Index i = 0; i < b.atoms(); ++i) insert(b.points.col(i), eps * b.weights[i]);

  EmpiricalMeasure out;
  out.points.resize(a.dim(), static_cast<Eigen::Index>(atoms.size()));
  out.weights.resize(static_cast<Eigen::Index>(atoms.size()));
  for (std::size_t s = 0; s < atoms.size(); ++s) {
    out.points.col(static_cast<Eigen::Index>(s)) = atoms[s];
    out.weights[static_cast<Eigen::Index>(s)] = weights[s];
  }
  out.validate();
  return out;
}

double wasserstein2_1d(const EmpiricalMeasure& a, const EmpiricalMeasure& b) {
  a.validate();
  b.validate();
  if (a.dim() != 1 || b.dim() != 1)
    throw InvalidArgument("wasserstein2_1d: defined for one-dimensional measures only");

  auto sorted = [](const EmpiricalMeasure& m) {
    std::vector<std::pair<double, double>> xw(static_cast<std::size_t>(m.atoms()));
    for (Eigen::Index i = 0; i < m.atoms(); ++i)
      xw[static_cast<std::size_t>(i)] = {m.points(0, i), m.weights[i]};
    std::sort(xw.begin(), xw.end());
    return xw;
  };
  const auto xa = sorted(a);
  const auto xb = sorted(b);

  // Monotone coupling: walk both quantile functions, pairing mass in order.
  double cost = 0.0;
  std::size_t i = 0, j = 0;
  double wa = xa[0].second, wb = xb[0].second;
  while (i < xa.size() && j < xb.size()) {
    const double w = std::min(wa, wb);
    const double d = xa[i].first - xb[j].first;
    cost += w * d * d;
    wa -= w;
    wb -= w;
    if (wa <= 0.0) {
      ++i;
      if (i < xa.size()) wa = xa[i].second;
    }
    if (wb <= 0.0) {
      ++j;
      if (j < xb.size()) wb = xb[j].second;
    }
  }
  return std::sqrt(std::max(cost, 0.0));
}

void write_measure_csv(std::ostream& os, const EmpiricalMeasure& m) {
  m.validate();
  os << "weight";
  for (Eigen::Index d = 0; d < m.dim(); ++d) os << ",x" << (d + 1);
  os << "\n";
  os.precision(17);
  for (Eigen::Index i = 0; i < m.atoms(); ++i) {
    os << m.weights[i];
    for (Eigen::Index d = 0; d < m.dim(); ++d) os << "," << m.points(d, i);
    os << "\n";
  }
}

EmpiricalMeasure read_measure_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ConfigError("measure csv: empty input");
  if (line.rfind("weight", 0) != 0)
    throw ConfigError("measure csv: expected header starting with 'weight'");
  const Eigen::Index dim =
      static_cast<Eigen::Index>(std::count(line.begin(), line.end(), ','));
  if (dim < 1) throw ConfigError("measure csv: header has no coordinate columns");

  std::vector<double> weights;
  std::vector<double> coords;
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string cell;
    std::vector<double> vals;
    while (std::getline(ls, cell, ',')) {
      try {
        vals.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw ConfigError("measure csv: bad number at row " + std::to_string(row));
      }
    }
    if (static_cast<Eigen::Index>(vals.size()) != dim + 1)
      throw ConfigError("measure csv: wrong column count at row " + std::to_string(row));
    weights.push_back(vals[0]);
    coords.insert(coords.end(), vals.begin() + 1, vals.end());
  }
  if (weights.empty()) throw ConfigError("measure csv: no data rows");

  EmpiricalMeasure m;
  const Eigen::Index count = static_cast<Eigen::Index>(weights.size());
  m.weights = Eigen::Map<const Eigen::VectorXd>(weights.data(), count);
  m.points.resize(dim, count);
  for (Eigen::Index i = 0; i < count; ++i)
    for (Eigen::Index d = 0; d < dim; ++d)
      m.points(d, i) = coords[static_cast<std::size_t>(i * dim + d)];
  m.validate();
  return m;
}

}  // namespace mfc
