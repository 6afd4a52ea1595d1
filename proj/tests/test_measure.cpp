#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <vector>

#include "mfc/errors.hpp"
#include "mfc/measure.hpp"
#include "mfc/rng.hpp"

using namespace mfc;

namespace {

EmpiricalMeasure random_measure(std::uint64_t seed, int dim, int atoms,
                                bool equal_weights) {
  CounterRng rng(seed);
  Eigen::MatrixXd pts(dim, atoms);
  for (int i = 0; i < atoms; ++i)
    for (int d = 0; d < dim; ++d)
      pts(d, i) = rng.normal(0, static_cast<std::uint64_t>(d), static_cast<std::uint64_t>(i), 0);
  if (equal_weights) return equal_weight_measure(pts);
  EmpiricalMeasure m;
  m.points = pts;
  m.weights.resize(atoms);
  double total = 0;
  for (int i = 0; i < atoms; ++i) {
    m.weights[i] = rng.uniform(1, 0, static_cast<std::uint64_t>(i), 0);
    total += m.weights[i];
  }
  m.weights /= total;
  m.weights[atoms - 1] += 1.0 - m.weights.sum();  // exact normalization
  m.validate();
  return m;
}

/// Brute-force W2 for equal-weight measures with the same atom count: minimum
/// over all pairings.  Independent oracle for the quantile-coupling code.
double w2_bruteforce_equal(const EmpiricalMeasure& a, const EmpiricalMeasure& b) {
  const int n = static_cast<int>(a.atoms());
  std::vector<int> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double cost = 0;
    for (int i = 0; i < n; ++i) {
      const double d = a.points(0, i) - b.points(0, perm[i]);
      cost += d * d;
    }
    best = std::min(best, cost);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return std::sqrt(best / n);
}

}  // namespace

TEST_CASE("measure invariants are enforced") {
  EmpiricalMeasure m;
  m.points = Eigen::MatrixXd::Random(2, 3);
  m.weights = Eigen::Vector3d(0.5, 0.3, 0.2);
  CHECK_NOTHROW(m.validate());

  m.weights = Eigen::Vector3d(0.5, 0.3, 0.3);
  CHECK_THROWS_AS(m.validate(), InvalidArgument);
  m.weights = Eigen::Vector3d(1.2, 0.3, -0.5);
  CHECK_THROWS_AS(m.validate(), InvalidArgument);
  m.weights = Eigen::Vector2d(0.5, 0.5);
  CHECK_THROWS_AS(m.validate(), InvalidArgument);
  m.weights = Eigen::Vector3d(0.5, 0.3, 0.2);
  m.points(1, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(m.validate(), InvalidArgument);
}

TEST_CASE("equal weight construction and moments") {
  Eigen::MatrixXd pts(1, 4);
  pts << 0, 1, 2, 3;
  const EmpiricalMeasure m = equal_weight_measure(pts);
  CHECK(m.weights[0] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(mean(m)(0) == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(second_moment(m) == doctest::Approx((0.0 + 1 + 4 + 9) / 4).epsilon(1e-15));
}

TEST_CASE("pushforward maps atoms and keeps weights") {
  const EmpiricalMeasure m = random_measure(11, 2, 20, false);
  const EmpiricalMeasure p = pushforward(m, [](ConstVec x) -> Eigen::VectorXd { return 2.0 * x; });
  CHECK(p.weights == m.weights);
  CHECK(second_moment(p) == doctest::Approx(4.0 * second_moment(m)).epsilon(1e-12));
  // Dimension-changing map.
  const EmpiricalMeasure q = pushforward(m, [](ConstVec x) -> Eigen::VectorXd {
    Eigen::VectorXd y(1);
    y << x.sum();
    return y;
  });
  CHECK(q.dim() == 1);
  CHECK(q.atoms() == m.atoms());
}

TEST_CASE("mix forms the convex combination on the union support") {
  Eigen::MatrixXd pa(1, 2), pb(1, 2);
  pa << 0, 1;
  pb << 1, 2;  // atom at 1 coincides with a's
  const EmpiricalMeasure a = equal_weight_measure(pa);
  const EmpiricalMeasure b = equal_weight_measure(pb);
  const double eps = 0.25;
  const EmpiricalMeasure c = mix(a, b, eps);
  CHECK(c.atoms() == 3);  // dedup merged the shared atom
  double w_at_1 = 0;
  for (Eigen::Index i = 0; i < c.atoms(); ++i)
    if (c.points(0, i) == 1.0) w_at_1 = c.weights[i];
  CHECK(w_at_1 == doctest::Approx(0.5 * (1 - eps) + 0.5 * eps).epsilon(1e-15));
  CHECK(c.weights.sum() == doctest::Approx(1.0).epsilon(1e-15));

  // eps = 0 returns a (up to dedup of a's own atoms).
  const EmpiricalMeasure a0 = mix(a, b, 0.0);
  CHECK(a0.atoms() == a.atoms());
  CHECK((a0.points - a.points).cwiseAbs().maxCoeff() == 0.0);

  CHECK_THROWS_AS(mix(a, b, 1.5), InvalidArgument);
}

TEST_CASE("wasserstein2_1d matches hand-computed values") {
  Eigen::MatrixXd pa(1, 2), pb(1, 2);
  pa << 0, 1;
  pb << 0, 2;
  const double w = wasserstein2_1d(equal_weight_measure(pa), equal_weight_measure(pb));
  CHECK(w == doctest::Approx(std::sqrt(0.5)).epsilon(1e-14));

  // Identical measures, shuffled atom order.
  Eigen::MatrixXd pc(1, 3), pd(1, 3);
  pc << 3, 1, 2;
  pd << 1, 2, 3;
  CHECK(wasserstein2_1d(equal_weight_measure(pc), equal_weight_measure(pd)) ==
        doctest::Approx(0.0).epsilon(1e-15));

  // Translation by c has distance |c|.
  const EmpiricalMeasure m = random_measure(3, 1, 9, true);
  const EmpiricalMeasure shifted =
      pushforward(m, [](ConstVec x) -> Eigen::VectorXd { return x.array() + 0.7; });
  CHECK(wasserstein2_1d(m, shifted) == doctest::Approx(0.7).epsilon(1e-12));

  CHECK_THROWS_AS(wasserstein2_1d(random_measure(1, 2, 4, true), random_measure(2, 2, 4, true)),
                  InvalidArgument);
}

TEST_CASE("wasserstein2_1d agrees with brute-force assignment, N <= 6") {
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    const int n = 2 + static_cast<int>(seed % 5);  // 2..6 atoms
    const EmpiricalMeasure a = random_measure(seed, 1, n, true);
    const EmpiricalMeasure b = random_measure(seed + 1000, 1, n, true);
    CHECK(wasserstein2_1d(a, b) ==
          doctest::Approx(w2_bruteforce_equal(a, b)).epsilon(1e-12));
  }
}

TEST_CASE("wasserstein2_1d satisfies the triangle inequality") {
  for (std::uint64_t seed = 50; seed < 70; ++seed) {
    const EmpiricalMeasure a = random_measure(seed, 1, 8, seed % 2 == 0);
    const EmpiricalMeasure b = random_measure(seed + 300, 1, 11, true);
    const EmpiricalMeasure c = random_measure(seed + 600, 1, 5, seed % 3 == 0);
    const double ab = wasserstein2_1d(a, b);
    const double bc = wasserstein2_1d(b, c);
    const double ac = wasserstein2_1d(a, c);
    CHECK(ac <= ab + bc + 1e-10);
  }
}

TEST_CASE("csv round trip is exact") {
  const EmpiricalMeasure m = random_measure(42, 3, 17, false);
  std::stringstream ss;
  write_measure_csv(ss, m);
  const EmpiricalMeasure r = read_measure_csv(ss);
  CHECK(r.dim() == m.dim());
  CHECK(r.atoms() == m.atoms());
  CHECK((r.points - m.points).cwiseAbs().maxCoeff() == 0.0);
  CHECK((r.weights - m.weights).cwiseAbs().maxCoeff() == 0.0);

  std::stringstream bad("nope\n1,2\n");
  CHECK_THROWS_AS(read_measure_csv(bad), ConfigError);
  std::stringstream badrow("weight,x1\n0.5,1\n0.5,oops\n");
  CHECK_THROWS_AS(read_measure_csv(badrow), ConfigError);
}
