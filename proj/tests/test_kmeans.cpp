#include <catch2/catch_amalgamated.hpp>

#include <algorithm>

#include "oracles.hpp"
#include "specdc/kmeans.hpp"

using namespace specdc;

namespace {

// Three tight blobs 10 apart: rows 0..29 around (0,0), 30..59 around (10,0),
// 60..89 around (0,10).
FeatureMatrix three_blobs(std::uint64_t seed) {
  Rng rng(seed);
  FeatureMatrix x(90, 2);
  const double cx[3] = {0, 10, 0};
  const double cy[3] = {0, 0, 10};
  for (int b = 0; b < 3; ++b)
    for (int i = 0; i < 30; ++i) {
      x(b * 30 + i, 0) = cx[b] + 0.1 * rng.normal();
      x(b * 30 + i, 1) = cy[b] + 0.1 * rng.normal();
    }
  return x;
}

// True iff the partition equals {0..29},{30..59},{60..89} up to label names.
bool recovers_blobs(const std::vector<int>& labels) {
  for (int b = 0; b < 3; ++b)
    for (int i = 1; i < 30; ++i)
      if (labels[static_cast<std::size_t>(b * 30 + i)] !=
          labels[static_cast<std::size_t>(b * 30)])
        return false;
  return labels[0] != labels[30] && labels[0] != labels[60] && labels[30] != labels[60];
}

}  // namespace

TEST_CASE("two distant points, k=2: singleton clusters with zero inertia") {
  FeatureMatrix x(2, 2);
  x << 0, 0, 10, 10;
  ClusterModel m = kmeans_fit(x, 2, 1);
  REQUIRE(m.inertia == 0.0);
  REQUIRE(m.assignments[0] != m.assignments[1]);
}

TEST_CASE("n=6 well-separated points reach the brute-force global optimum") {
  FeatureMatrix x(6, 2);
  x << 0, 0, 0.5, 0, 0.2, 0.4,
       9, 9, 9.5, 9, 9.2, 9.4;
  const double best = oracles::kmeans_bruteforce_inertia(x, 2);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    ClusterModel m = kmeans_fit(x, 2, seed);
    REQUIRE(m.inertia == Catch::Approx(best).margin(1e-9));
  }
}

TEST_CASE("inertia is non-increasing across Lloyd iterations") {
  FeatureMatrix x = three_blobs(3);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::vector<double> trace;
    LloydOptions opts;
    opts.inertia_trace = &trace;
    opts.repair_seed = seed;
    lloyd(x, kmeanspp_init(x, 5, seed), opts);
    for (std::size_t i = 1; i < trace.size(); ++i)
      REQUIRE(trace[i] <= trace[i - 1] + 1e-9);
  }
}

TEST_CASE("blob recovery across seeds") {
  int recovered = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    FeatureMatrix x = three_blobs(500 + seed);
    if (recovers_blobs(kmeans_fit(x, 3, seed).assignments)) ++recovered;
  }
  REQUIRE(recovered >= 95);
}

TEST_CASE("k = rows makes every point a centroid") {
  FeatureMatrix x(4, 2);
  x << 0, 0, 1, 1, 2, 2, 3, 3;
  ClusterModel m = kmeans_fit(x, 4, 7);
  REQUIRE(m.inertia == 0.0);
  std::vector<int> sorted = m.assignments;
  std::sort(sorted.begin(), sorted.end());
  REQUIRE(sorted == std::vector<int>{0, 1, 2, 3});
}

TEST_CASE("all points identical with k=2 does not fail") {
  FeatureMatrix x = FeatureMatrix::Constant(5, 3, 1.0);
  Eigen::MatrixXd c = kmeanspp_init(x, 2, 11);
  REQUIRE(c.row(0) == c.row(1));
  ClusterModel m = kmeans_fit(x, 2, 11);
  REQUIRE(m.inertia == 0.0);
  // coverage holds even for duplicate-point data
  std::vector<int> counts(2, 0);
  for (int l : m.assignments) ++counts[static_cast<std::size_t>(l)];
  REQUIRE(counts[0] > 0);
  REQUIRE(counts[1] > 0);
}

TEST_CASE("assign breaks ties toward the lowest centroid index") {
  Eigen::MatrixXd c(2, 1);
  c << -1, 1;
  FeatureMatrix x(3, 1);
  x << 0, -1, 1;  // first point equidistant
  std::vector<int> labels = assign(x, c);
  REQUIRE(labels == std::vector<int>{0, 0, 1});
}

TEST_CASE("assigning the centroid rows themselves is the identity") {
  Eigen::MatrixXd c(3, 2);
  c << 0, 0, 5, 5, 9, 0;
  REQUIRE(assign(c, c) == std::vector<int>{0, 1, 2});
}

TEST_CASE("kmeanspp_init picks distinct rows deterministically") {
  FeatureMatrix x = three_blobs(77);
  Eigen::MatrixXd a = kmeanspp_init(x, 3, 123);
  Eigen::MatrixXd b = kmeanspp_init(x, 3, 123);
  REQUIRE(a == b);
  REQUIRE(a.row(0) != a.row(1));
  REQUIRE(a.row(1) != a.row(2));
}

TEST_CASE("full fit is bit-reproducible given the seed") {
  FeatureMatrix x = three_blobs(31);
  ClusterModel a = kmeans_fit(x, 4, 9);
  ClusterModel b = kmeans_fit(x, 4, 9);
  REQUIRE(a.centroids == b.centroids);
  REQUIRE(a.assignments == b.assignments);
  REQUIRE(a.inertia == b.inertia);
}

TEST_CASE("assign is permutation-equivariant") {
  FeatureMatrix x = three_blobs(55);
  Eigen::MatrixXd c = kmeans_fit(x, 3, 2).centroids;
  std::vector<int> base = assign(x, c);
  FeatureMatrix rev(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.rows(); ++i) rev.row(i) = x.row(x.rows() - 1 - i);
  std::vector<int> rl = assign(rev, c);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    REQUIRE(rl[static_cast<std::size_t>(i)] ==
            base[static_cast<std::size_t>(x.rows() - 1 - i)]);
}

TEST_CASE("scaling X and centroids together leaves labels unchanged") {
  FeatureMatrix x = three_blobs(66);
  Eigen::MatrixXd c = kmeans_fit(x, 3, 4).centroids;
  REQUIRE(assign(x, c) == assign(FeatureMatrix(3.5 * x), Eigen::MatrixXd(3.5 * c)));
}

TEST_CASE("every cluster id has at least one member after fitting") {
  FeatureMatrix x = three_blobs(88);
  for (int k : {2, 3, 7, 12}) {
    ClusterModel m = kmeans_fit(x, k, 17);
    std::vector<int> counts(static_cast<std::size_t>(k), 0);
    for (int l : m.assignments) ++counts[static_cast<std::size_t>(l)];
    for (int cnt : counts) REQUIRE(cnt > 0);
  }
}

TEST_CASE("shape and config validation") {
  FeatureMatrix x(3, 2);
  x << 0, 0, 1, 1, 2, 2;
  REQUIRE_THROWS_AS(kmeanspp_init(x, 4, 0), ShapeError);
  REQUIRE_THROWS_AS(kmeanspp_init(x, 0, 0), ConfigError);
  Eigen::MatrixXd c(2, 3);
  REQUIRE_THROWS_AS(assign(x, c), ShapeError);
  REQUIRE_THROWS_AS(lloyd(x, c), ShapeError);
}

TEST_CASE("KMN1 section round trips through a stream") {
  Eigen::MatrixXd c(2, 3);
  c << 1, 2, 3, 4, 5, 6;
  std::stringstream ss(std::ios::in | std::ios::out | std::ios::binary);
  write_kmeans_section(ss, c);
  io::expect_magic(ss, "KMN1");
  REQUIRE(read_kmeans_section(ss) == c);
}
