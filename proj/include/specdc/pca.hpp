#pragma once

// Flattening, principal component analysis and explained-variance analysis.
//
// Fitting goes through the D x D covariance eigenproblem when D <= rows and
// through the rows x rows Gram eigenproblem otherwise; both yield the same
// nonzero spectrum and the Gram route keeps the flattened-baseline case
// (D = W*W) tractable.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <vector>

#include <Eigen/Dense>

#include "specdc/common.hpp"
#include "specdc/ingest.hpp"

namespace specdc {

using FeatureMatrix = Eigen::MatrixXd;  // rows = samples, cols = features

struct PcaModel {
  Eigen::VectorXd mean;            // D
  Eigen::MatrixXd components;      // N x D, rows orthonormal
  Eigen::VectorXd explained_variance;  // N, non-increasing
  double total_variance = 0.0;     // sum over all D directions

  Eigen::Index input_dim() const { return mean.size(); }
  Eigen::Index n_components() const { return components.rows(); }
};

// Row-major flattening of every tile; row order follows the TileSet order.
inline FeatureMatrix flatten(const TileSet& tiles) {
  if (tiles.empty()) throw EmptySetError("flatten: empty tile set");
  const int w = tiles.window;
  FeatureMatrix x(static_cast<Eigen::Index>(tiles.size()),
                  static_cast<Eigen::Index>(w) * w);
  for (std::size_t r = 0; r < tiles.size(); ++r)
    for (int i = 0; i < w; ++i)
      for (int j = 0; j < w; ++j)
        x(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i) * w + j) =
            tiles.tiles[r].pixels(i, j);
  return x;
}

namespace detail {

// Sign convention: the largest-magnitude entry of each component is made
// positive (first occurrence wins on ties) so fits are deterministic.
inline void fix_component_signs(Eigen::MatrixXd& components) {
  for (Eigen::Index r = 0; r < components.rows(); ++r) {
    Eigen::Index best = 0;
    double best_abs = -1.0;
    for (Eigen::Index c = 0; c < components.cols(); ++c) {
      const double a = std::abs(components(r, c));
      if (a > best_abs + 1e-15) {
        best_abs = a;
        best = c;
      }
    }
    if (components(r, best) < 0.0) components.row(r) *= -1.0;
  }
}

}  // namespace detail

struct PcaFitOptions {
  // Seeded uniform subsample cap on fit rows; 0 disables.
  std::size_t max_rows = 20000;
  std::uint64_t subsample_seed = 0;
};

inline PcaModel pca_fit(const FeatureMatrix& x_in, Eigen::Index n,
                        const PcaFitOptions& opts = {}) {
  if (x_in.rows() < 2) throw ShapeError("pca_fit: need at least 2 rows");
  if (n < 1 || n > std::min(x_in.rows(), x_in.cols()))
    throw ShapeError("pca_fit: n out of range");

  FeatureMatrix x;
  if (opts.max_rows > 0 && static_cast<std::size_t>(x_in.rows()) > opts.max_rows) {
    // Seeded uniform subsample without replacement (partial Fisher-Yates).
    Rng rng(opts.subsample_seed);
    std::vector<Eigen::Index> idx(static_cast<std::size_t>(x_in.rows()));
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t i = 0; i < opts.max_rows; ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(idx.size() - i));
      std::swap(idx[i], idx[j]);
    }
    x.resize(static_cast<Eigen::Index>(opts.max_rows), x_in.cols());
    for (std::size_t i = 0; i < opts.max_rows; ++i) x.row(static_cast<Eigen::Index>(i)) = x_in.row(idx[i]);
    if (n > std::min(x.rows(), x.cols())) n = std::min(x.rows(), x.cols());
  } else {
    x = x_in;
  }

  const Eigen::Index rows = x.rows();
  const Eigen::Index dim = x.cols();
  PcaModel m;
  m.mean = x.colwise().mean();
  Eigen::MatrixXd xc = x.rowwise() - m.mean.transpose();
  const double divisor = static_cast<double>(rows - 1);
  m.total_variance = xc.squaredNorm() / divisor;

  m.components.resize(n, dim);
  m.explained_variance.resize(n);

  if (dim <= rows) {
    Eigen::MatrixXd cov = (xc.transpose() * xc) / divisor;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(cov);
    // Eigen returns ascending order; take the top n from the back.
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index src = dim - 1 - i;
      m.components.row(i) = es.eigenvectors().col(src).transpose();
      m.explained_variance(i) = std::max(0.0, es.eigenvalues()(src));
    }
  } else {
    Eigen::MatrixXd gram = (xc * xc.transpose()) / divisor;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(gram);
    const double lmax = std::max(es.eigenvalues().maxCoeff(), 0.0);
    for (Eigen::Index i = 0; i < n; ++i) {
      const Eigen::Index src = rows - 1 - i;
      const double lambda = std::max(0.0, es.eigenvalues()(src));
      m.explained_variance(i) = lambda;
      Eigen::VectorXd v = xc.transpose() * es.eigenvectors().col(src);
      const double norm = v.norm();
      if (lambda > 1e-12 * lmax && norm > 0.0) {
        m.components.row(i) = (v / norm).transpose();
      } else {
        // Numerically null direction: surplus variance is 0; fill with an
        // arbitrary unit vector orthogonalized against earlier rows.
        Eigen::VectorXd u = Eigen::VectorXd::Zero(dim);
        u(i % dim) = 1.0;
        for (Eigen::Index j = 0; j < i; ++j)
          u -= m.components.row(j).dot(u) * m.components.row(j).transpose();
        const double un = u.norm();
        if (un > 0) u /= un;
        m.components.row(i) = u.transpose();
        m.explained_variance(i) = 0.0;
      }
    }
  }

  detail::fix_component_signs(m.components);
  return m;
}

inline FeatureMatrix pca_transform(const PcaModel& m, const FeatureMatrix& x) {
  if (x.cols() != m.input_dim())
    throw ShapeError("pca_transform: dimension mismatch");
  if (x.rows() == 0) return FeatureMatrix(0, m.n_components());
  return (x.rowwise() - m.mean.transpose()) * m.components.transpose();
}

// Inverse projection: mean + y * components.
inline FeatureMatrix pca_inverse_transform(const PcaModel& m, const FeatureMatrix& y) {
  if (y.cols() != m.n_components())
    throw ShapeError("pca_inverse_transform: dimension mismatch");
  return (y * m.components).rowwise() + m.mean.transpose();
}

inline Eigen::VectorXd evr(const PcaModel& m) {
  if (!(m.total_variance > 0.0))
    throw DegenerateDataError("evr: total variance is zero");
  return m.explained_variance / m.total_variance;
}

// Smallest n whose cumulative EVR reaches the threshold. The cumulative sum
// runs over the model's full spectrum (total_variance), so a model fit with
// too few components cannot certify the threshold.
inline Eigen::Index components_for_variance(const PcaModel& m, double threshold) {
  if (!(threshold > 0.0 && threshold <= 1.0))
    throw ConfigError("components_for_variance: threshold must be in (0,1]");
  const Eigen::VectorXd r = evr(m);
  double cum = 0.0;
  const double eps = 1e-12;
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    cum += r(i);
    if (cum + eps >= threshold) return i + 1;
  }
  throw InsufficientModelError(
      "components_for_variance: model has too few components to certify threshold");
}

// ---------------------------------------------------------------------------
// SPCK "PCA1" section payload.

inline void write_pca_section(std::ostream& os, const PcaModel& m) {
  io::write_magic(os, "PCA1");
  const auto d = static_cast<std::uint32_t>(m.input_dim());
  const auto n = static_cast<std::uint32_t>(m.n_components());
  io::write_le<std::uint32_t>(os, d);
  io::write_le<std::uint32_t>(os, n);
  std::vector<float> buf(d);
  for (std::uint32_t i = 0; i < d; ++i) buf[i] = static_cast<float>(m.mean(i));
  io::write_f32_span(os, buf.data(), d);
  for (std::uint32_t r = 0; r < n; ++r) {
    for (std::uint32_t c = 0; c < d; ++c) buf[c] = static_cast<float>(m.components(r, c));
    io::write_f32_span(os, buf.data(), d);
  }
  buf.resize(n);
  for (std::uint32_t i = 0; i < n; ++i) buf[i] = static_cast<float>(m.explained_variance(i));
  io::write_f32_span(os, buf.data(), n);
  io::write_le<double>(os, m.total_variance);
}

// Reads the section body (tag already consumed).
inline PcaModel read_pca_section(std::istream& is) {
  const auto d = io::read_le<std::uint32_t>(is);
  const auto n = io::read_le<std::uint32_t>(is);
  PcaModel m;
  m.mean.resize(d);
  m.components.resize(n, d);
  m.explained_variance.resize(n);
  std::vector<float> buf(d);
  io::read_f32_span(is, buf.data(), d);
  for (std::uint32_t i = 0; i < d; ++i) m.mean(i) = buf[i];
  for (std::uint32_t r = 0; r < n; ++r) {
    io::read_f32_span(is, buf.data(), d);
    for (std::uint32_t c = 0; c < d; ++c) m.components(r, c) = buf[c];
  }
  buf.resize(n);
  io::read_f32_span(is, buf.data(), n);
  for (std::uint32_t i = 0; i < n; ++i) m.explained_variance(i) = buf[i];
  m.total_variance = io::read_le<double>(is);
  return m;
}

}  // namespace specdc
