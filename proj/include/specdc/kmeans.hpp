#pragma once

// K-means: k-means++ seeding, Lloyd iterations with empty-cluster repair.
// All reductions run in fixed index order, so fits are bit-reproducible
// given the seed.

#include <cstdint>
#include <limits>
#include <vector>

#include <Eigen/Dense>

#include "specdc/common.hpp"
#include "specdc/pca.hpp"

namespace specdc {

struct ClusterModel {
  int k = 0;
  Eigen::MatrixXd centroids;      // K x N
  std::vector<int> assignments;   // pseudo-labels L
  double inertia = 0.0;
  int iterations_run = 0;
};

// Nearest-centroid label; ties go to the lowest centroid index.
inline int nearest_centroid(const Eigen::RowVectorXd& x, const Eigen::MatrixXd& centroids) {
  int best = 0;
  double best_d = (x - centroids.row(0)).squaredNorm();
  for (Eigen::Index c = 1; c < centroids.rows(); ++c) {
    const double d = (x - centroids.row(c)).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

inline std::vector<int> assign(const FeatureMatrix& x, const Eigen::MatrixXd& centroids) {
  if (x.cols() != centroids.cols())
    throw ShapeError("assign: dimension mismatch");
  std::vector<int> labels(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    labels[static_cast<std::size_t>(i)] = nearest_centroid(x.row(i), centroids);
  return labels;
}

// k-means++ D^2 seeding over distinct row indices. If all remaining D^2
// weights are zero (duplicate points) the next seed falls back to a uniform
// draw over the rows.
inline Eigen::MatrixXd kmeanspp_init(const FeatureMatrix& x, int k, std::uint64_t seed) {
  if (k < 1) throw ConfigError("kmeanspp_init: k must be >= 1");
  if (x.rows() < k) throw ShapeError("kmeanspp_init: fewer rows than clusters");
  Rng rng(seed);
  const Eigen::Index n = x.rows();
  Eigen::MatrixXd centroids(k, x.cols());
  std::vector<char> taken(static_cast<std::size_t>(n), 0);

  auto pick_uniform_untaken = [&]() {
    while (true) {
      const auto i = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(n)));
      if (!taken[static_cast<std::size_t>(i)]) return i;
    }
  };

  Eigen::Index first = static_cast<Eigen::Index>(rng.uniform_int(static_cast<std::uint64_t>(n)));
  centroids.row(0) = x.row(first);
  taken[static_cast<std::size_t>(first)] = 1;

  Eigen::VectorXd d2(n);
  for (Eigen::Index i = 0; i < n; ++i)
    d2(i) = (x.row(i) - centroids.row(0)).squaredNorm();

  for (int c = 1; c < k; ++c) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      if (!taken[static_cast<std::size_t>(i)]) total += d2(i);
    Eigen::Index chosen;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double cum = 0.0;
      chosen = -1;
      for (Eigen::Index i = 0; i < n; ++i) {
        if (taken[static_cast<std::size_t>(i)]) continue;
        cum += d2(i);
        if (cum >= target) {
          chosen = i;
          break;
        }
      }
      if (chosen < 0) {  // numeric edge: take the last untaken row
        for (Eigen::Index i = n - 1; i >= 0; --i)
          if (!taken[static_cast<std::size_t>(i)]) {
            chosen = i;
            break;
          }
      }
    } else {
      chosen = pick_uniform_untaken();
    }
    centroids.row(c) = x.row(chosen);
    taken[static_cast<std::size_t>(chosen)] = 1;
    for (Eigen::Index i = 0; i < n; ++i)
      d2(i) = std::min(d2(i), (x.row(i) - centroids.row(c)).squaredNorm());
  }
  return centroids;
}

struct LloydOptions {
  int max_iter = 300;
  double tol = 1e-6;
  std::uint64_t repair_seed = 0;
  // Optional hook: called with the inertia after each assignment step.
  std::vector<double>* inertia_trace = nullptr;
};

// Lloyd iterations: assignment (squared Euclidean, ties to lowest index),
// mean update, stop when the max centroid shift <= tol or max_iter.
// An emptied centroid is reset to a random member of the currently largest
// cluster (seeded).
inline ClusterModel lloyd(const FeatureMatrix& x, Eigen::MatrixXd centroids,
                          const LloydOptions& opts = {}) {
  if (x.cols() != centroids.cols()) throw ShapeError("lloyd: dimension mismatch");
  if (opts.max_iter < 1) throw ConfigError("lloyd: max_iter must be >= 1");
  if (opts.tol < 0) throw ConfigError("lloyd: tol must be >= 0");
  const int k = static_cast<int>(centroids.rows());
  const Eigen::Index n = x.rows();
  Rng repair_rng(opts.repair_seed);

  ClusterModel model;
  model.k = k;
  std::vector<int> labels(static_cast<std::size_t>(n), 0);

  auto compute_inertia = [&]() {
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      s += (x.row(i) - centroids.row(labels[static_cast<std::size_t>(i)])).squaredNorm();
    return s;
  };

  // Empty-cluster repair: an emptied centroid is reset to a seeded random
  // member of the currently largest cluster.
  auto repair_empties = [&]() {
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
    for (int l : labels) ++counts[static_cast<std::size_t>(l)];
    for (int c = 0; c < k; ++c) {
      if (counts[static_cast<std::size_t>(c)] > 0) continue;
      int largest = 0;
      for (int j = 1; j < k; ++j)
        if (counts[static_cast<std::size_t>(j)] > counts[static_cast<std::size_t>(largest)])
          largest = j;
      if (counts[static_cast<std::size_t>(largest)] == 0) continue;  // n == 0
      auto ord = repair_rng.uniform_int(
          static_cast<std::uint64_t>(counts[static_cast<std::size_t>(largest)]));
      for (Eigen::Index i = 0; i < n; ++i) {
        if (labels[static_cast<std::size_t>(i)] != largest) continue;
        if (ord == 0) {
          labels[static_cast<std::size_t>(i)] = c;
          --counts[static_cast<std::size_t>(largest)];
          ++counts[static_cast<std::size_t>(c)];
          centroids.row(c) = x.row(i);
          break;
        }
        --ord;
      }
    }
  };

  int iter = 0;
  for (; iter < opts.max_iter; ++iter) {
    labels = assign(x, centroids);
    repair_empties();  // before the mean update

    if (opts.inertia_trace) opts.inertia_trace->push_back(compute_inertia());

    // Mean update.
    Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(k, x.cols());
    std::vector<Eigen::Index> sizes(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      sums.row(labels[static_cast<std::size_t>(i)]) += x.row(i);
      ++sizes[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
    }
    double max_shift = 0.0;
    for (int c = 0; c < k; ++c) {
      if (sizes[static_cast<std::size_t>(c)] == 0) continue;
      Eigen::RowVectorXd next =
          sums.row(c) / static_cast<double>(sizes[static_cast<std::size_t>(c)]);
      max_shift = std::max(max_shift, (next - centroids.row(c)).norm());
      centroids.row(c) = next;
    }
    if (max_shift <= opts.tol) {
      ++iter;
      break;
    }
  }

  labels = assign(x, centroids);
  // Re-repair: with tied (e.g. duplicate-point) data the fresh assignment can
  // empty a cluster the loop had repaired; coverage is part of the contract.
  repair_empties();
  model.assignments = std::move(labels);
  model.centroids = std::move(centroids);
  model.iterations_run = iter;
  {
    double s = 0.0;
    for (Eigen::Index i = 0; i < n; ++i)
      s += (x.row(i) - model.centroids.row(model.assignments[static_cast<std::size_t>(i)]))
               .squaredNorm();
    model.inertia = s;
  }
  return model;
}

inline ClusterModel kmeans_fit(const FeatureMatrix& x, int k, std::uint64_t seed,
                               const LloydOptions& opts = {}) {
  LloydOptions o = opts;
  o.repair_seed = mix_seed(seed, 0x7265706169ULL);
  return lloyd(x, kmeanspp_init(x, k, seed), o);
}

// ---------------------------------------------------------------------------
// SPCK "KMN1" section payload.

inline void write_kmeans_section(std::ostream& os, const Eigen::MatrixXd& centroids) {
  io::write_magic(os, "KMN1");
  const auto k = static_cast<std::uint32_t>(centroids.rows());
  const auto n = static_cast<std::uint32_t>(centroids.cols());
  io::write_le<std::uint32_t>(os, k);
  io::write_le<std::uint32_t>(os, n);
  std::vector<float> buf(n);
  for (std::uint32_t r = 0; r < k; ++r) {
    for (std::uint32_t c = 0; c < n; ++c) buf[c] = static_cast<float>(centroids(r, c));
    io::write_f32_span(os, buf.data(), n);
  }
}

inline Eigen::MatrixXd read_kmeans_section(std::istream& is) {
  const auto k = io::read_le<std::uint32_t>(is);
  const auto n = io::read_le<std::uint32_t>(is);
  Eigen::MatrixXd centroids(k, n);
  std::vector<float> buf(n);
  for (std::uint32_t r = 0; r < k; ++r) {
    io::read_f32_span(is, buf.data(), n);
    for (std::uint32_t c = 0; c < n; ++c) centroids(r, c) = buf[c];
  }
  return centroids;
}

}  // namespace specdc
