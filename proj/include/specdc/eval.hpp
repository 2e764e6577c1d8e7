#pragma once

// Clustering-tendency and cluster-quality evaluation: VAT/iVAT ordering and
// imaging, silhouette score, NMI, per-cluster band histograms and average
// cluster spectrograms.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "specdc/common.hpp"
#include "specdc/ingest.hpp"
#include "specdc/pca.hpp"

namespace specdc {

struct DissimilarityMatrix {
  Eigen::MatrixXd d;             // symmetric, zero diagonal
  std::vector<Eigen::Index> indices;  // rows of the source matrix that were sampled

  Eigen::Index n() const { return d.rows(); }
};

struct VatResult {
  std::vector<Eigen::Index> permutation;
  Eigen::MatrixXd reordered;
  Eigen::MatrixXd ivat;  // empty unless requested
};

namespace detail {

inline std::vector<Eigen::Index> sample_without_replacement(Eigen::Index n, Eigen::Index k,
                                                            std::uint64_t seed) {
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  for (Eigen::Index i = 0; i < k; ++i) {
    const auto j = i + static_cast<Eigen::Index>(
                           rng.uniform_int(static_cast<std::uint64_t>(n - i)));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  idx.resize(static_cast<std::size_t>(k));
  return idx;
}

}  // namespace detail

// Euclidean distances over a seeded uniform subsample without replacement.
inline DissimilarityMatrix pairwise_distances(const FeatureMatrix& x, Eigen::Index subsample,
                                              std::uint64_t seed) {
  if (subsample < 1 || subsample > x.rows())
    throw ShapeError("pairwise_distances: subsample out of range");
  DissimilarityMatrix out;
  out.indices = (subsample == x.rows())
                    ? [&] {
                        std::vector<Eigen::Index> all(static_cast<std::size_t>(x.rows()));
                        std::iota(all.begin(), all.end(), 0);
                        return all;
                      }()
                    : detail::sample_without_replacement(x.rows(), subsample, seed);
  const Eigen::Index n = subsample;
  out.d = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j) {
      const double dist = (x.row(out.indices[static_cast<std::size_t>(i)]) -
                           x.row(out.indices[static_cast<std::size_t>(j)]))
                              .norm();
      out.d(i, j) = dist;
      out.d(j, i) = dist;
    }
  return out;
}

// VAT ordering: start from a member of the globally most-dissimilar pair
// (lowest index on ties), then repeatedly append the unvisited sample
// nearest to the visited set (Prim-style, ties to the lowest index).
inline std::vector<Eigen::Index> vat_order(const DissimilarityMatrix& dm) {
  const Eigen::Index n = dm.n();
  if (n < 1) throw ShapeError("vat_order: empty matrix");
  std::vector<Eigen::Index> perm;
  perm.reserve(static_cast<std::size_t>(n));
  std::vector<char> visited(static_cast<std::size_t>(n), 0);

  Eigen::Index start = 0;
  double best = -1.0;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      if (dm.d(i, j) > best) {
        best = dm.d(i, j);
        start = i;
      }
  perm.push_back(start);
  visited[static_cast<std::size_t>(start)] = 1;

  // min distance from each unvisited node to the visited set
  std::vector<double> mind(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) mind[static_cast<std::size_t>(i)] = dm.d(i, start);

  while (static_cast<Eigen::Index>(perm.size()) < n) {
    Eigen::Index next = -1;
    double best_d = std::numeric_limits<double>::infinity();
    for (Eigen::Index i = 0; i < n; ++i) {
      if (visited[static_cast<std::size_t>(i)]) continue;
      if (mind[static_cast<std::size_t>(i)] < best_d) {
        best_d = mind[static_cast<std::size_t>(i)];
        next = i;
      }
    }
    perm.push_back(next);
    visited[static_cast<std::size_t>(next)] = 1;
    for (Eigen::Index i = 0; i < n; ++i)
      if (!visited[static_cast<std::size_t>(i)])
        mind[static_cast<std::size_t>(i)] = std::min(mind[static_cast<std::size_t>(i)], dm.d(i, next));
  }
  return perm;
}

inline Eigen::MatrixXd reorder(const Eigen::MatrixXd& d, const std::vector<Eigen::Index>& perm) {
  const Eigen::Index n = d.rows();
  Eigen::MatrixXd out(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      out(i, j) = d(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(j)]);
  return out;
}

// Minimax path distances on a VAT-ordered matrix, via the ordered recursion:
// for r >= 1, j = argmin_{k<r} d[r][k]; d'[r][j] = d[r][j];
// for k < r, k != j: d'[r][k] = max(d[r][j], d'[j][k]).
inline Eigen::MatrixXd ivat_transform(const Eigen::MatrixXd& ordered) {
  if (ordered.rows() != ordered.cols()) throw ShapeError("ivat: matrix must be square");
  const Eigen::Index n = ordered.rows();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n, n);
  for (Eigen::Index r = 1; r < n; ++r) {
    Eigen::Index j = 0;
    for (Eigen::Index k = 1; k < r; ++k)
      if (ordered(r, k) < ordered(r, j)) j = k;
    out(r, j) = ordered(r, j);
    for (Eigen::Index k = 0; k < r; ++k) {
      if (k == j) continue;
      out(r, k) = std::max(ordered(r, j), out(j, k));
    }
    for (Eigen::Index k = 0; k < r; ++k) out(k, r) = out(r, k);
  }
  return out;
}

inline VatResult vat(const DissimilarityMatrix& dm, bool with_ivat = true) {
  VatResult res;
  res.permutation = vat_order(dm);
  res.reordered = reorder(dm.d, res.permutation);
  if (with_ivat) res.ivat = ivat_transform(res.reordered);
  return res;
}

// Grayscale P5 PGM, linear min -> 0 (black) ... max -> 255 (white).
// Constant matrices map to all zeros.
inline void render_matrix(const Eigen::MatrixXd& m, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  const double lo = m.minCoeff();
  const double hi = m.maxCoeff();
  os << "P5\n" << m.cols() << ' ' << m.rows() << "\n255\n";
  const double span = hi - lo;
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double v = span > 0.0 ? (m(i, j) - lo) / span : 0.0;
      os.put(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
    }
  if (!os) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Silhouette

namespace detail {

inline double silhouette_from_distances(const Eigen::MatrixXd& d, const std::vector<int>& labels) {
  const Eigen::Index n = d.rows();
  int max_label = 0;
  for (int l : labels) max_label = std::max(max_label, l);
  const int k = max_label + 1;
  std::vector<Eigen::Index> sizes(static_cast<std::size_t>(k), 0);
  for (int l : labels) ++sizes[static_cast<std::size_t>(l)];
  int distinct = 0;
  for (Eigen::Index s : sizes)
    if (s > 0) ++distinct;
  if (distinct < 2) throw SingleClusterError("silhouette: need at least 2 clusters");

  double total = 0.0;
  std::vector<double> sums(static_cast<std::size_t>(k));
  for (Eigen::Index i = 0; i < n; ++i) {
    const int li = labels[static_cast<std::size_t>(i)];
    if (sizes[static_cast<std::size_t>(li)] == 1) continue;  // singleton: s = 0
    std::fill(sums.begin(), sums.end(), 0.0);
    for (Eigen::Index j = 0; j < n; ++j)
      if (j != i) sums[static_cast<std::size_t>(labels[static_cast<std::size_t>(j)])] += d(i, j);
    const double a =
        sums[static_cast<std::size_t>(li)] / static_cast<double>(sizes[static_cast<std::size_t>(li)] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
      if (c == li || sizes[static_cast<std::size_t>(c)] == 0) continue;
      b = std::min(b, sums[static_cast<std::size_t>(c)] /
                          static_cast<double>(sizes[static_cast<std::size_t>(c)]));
    }
    total += (b - a) / std::max(a, b);
  }
  return total / static_cast<double>(n);
}

}  // namespace detail

inline double silhouette(const DissimilarityMatrix& dm, const std::vector<int>& labels) {
  if (static_cast<Eigen::Index>(labels.size()) != dm.n())
    throw ShapeError("silhouette: label count mismatch");
  return detail::silhouette_from_distances(dm.d, labels);
}

// Feature-space variant with seeded subsampling for large n.
inline double silhouette(const FeatureMatrix& x, const std::vector<int>& labels,
                         Eigen::Index subsample = 5000, std::uint64_t seed = 0) {
  if (static_cast<Eigen::Index>(labels.size()) != x.rows())
    throw ShapeError("silhouette: label count mismatch");
  const Eigen::Index take = std::min(subsample, x.rows());
  DissimilarityMatrix dm = pairwise_distances(x, take, seed);
  std::vector<int> sub_labels(static_cast<std::size_t>(take));
  for (Eigen::Index i = 0; i < take; ++i)
    sub_labels[static_cast<std::size_t>(i)] =
        labels[static_cast<std::size_t>(dm.indices[static_cast<std::size_t>(i)])];
  return detail::silhouette_from_distances(dm.d, sub_labels);
}

// ---------------------------------------------------------------------------
// Normalized mutual information, normalized by the arithmetic mean of the
// entropies. Conventions: 1.0 when both labelings are the constant one-cluster
// partition; 0.0 when exactly one entropy is zero.

inline double nmi(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("nmi: length mismatch or empty");
  const double n = static_cast<double>(a.size());
  int ka = 0, kb = 0;
  for (int l : a) ka = std::max(ka, l + 1);
  for (int l : b) kb = std::max(kb, l + 1);
  Eigen::MatrixXd joint = Eigen::MatrixXd::Zero(ka, kb);
  for (std::size_t i = 0; i < a.size(); ++i) joint(a[i], b[i]) += 1.0;
  joint /= n;
  const Eigen::VectorXd pa = joint.rowwise().sum();
  const Eigen::VectorXd pb = joint.colwise().sum();

  auto entropy = [](const Eigen::VectorXd& p) {
    double h = 0.0;
    for (Eigen::Index i = 0; i < p.size(); ++i)
      if (p(i) > 0.0) h -= p(i) * std::log(p(i));
    return h;
  };
  const double ha = entropy(pa);
  const double hb = entropy(pb);
  if (ha == 0.0 && hb == 0.0) return 1.0;
  if (ha == 0.0 || hb == 0.0) return 0.0;

  double mi = 0.0;
  for (Eigen::Index i = 0; i < ka; ++i)
    for (Eigen::Index j = 0; j < kb; ++j)
      if (joint(i, j) > 0.0) mi += joint(i, j) * std::log(joint(i, j) / (pa(i) * pb(j)));
  const double score = mi / (0.5 * (ha + hb));
  return std::clamp(score, 0.0, 1.0);
}

// ---------------------------------------------------------------------------
// Cluster content summaries

// K x num_bands counts; row sums equal cluster sizes.
inline Eigen::MatrixXi band_histogram(const TileSet& tiles, const std::vector<int>& labels) {
  if (labels.size() != tiles.size()) throw ShapeError("band_histogram: label count mismatch");
  int k = 0, bands = 0;
  for (int l : labels) k = std::max(k, l + 1);
  for (const Tile& t : tiles.tiles) bands = std::max(bands, static_cast<int>(t.band_index) + 1);
  Eigen::MatrixXi hist = Eigen::MatrixXi::Zero(k, bands);
  for (std::size_t i = 0; i < tiles.size(); ++i)
    ++hist(labels[i], tiles.tiles[i].band_index);
  return hist;
}

// Pixel-wise mean of the tiles assigned to one cluster.
inline Tile average_spectrogram(const TileSet& tiles, const std::vector<int>& labels,
                                int cluster_id) {
  if (labels.size() != tiles.size()) throw ShapeError("average_spectrogram: label count mismatch");
  Tile mean;
  mean.pixels = Eigen::MatrixXd::Zero(tiles.window, tiles.window);
  Eigen::Index count = 0;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    if (labels[i] != cluster_id) continue;
    mean.pixels += tiles.tiles[i].pixels;
    ++count;
  }
  if (count == 0) throw EmptyClusterError("average_spectrogram: empty cluster");
  mean.pixels /= static_cast<double>(count);
  return mean;
}

}  // namespace specdc
