#pragma once

// Alternating representation learning: extract CNN features, PCA-reduce,
// normalize, K-means pseudo-labels, retrain the CNN head-to-toe on them,
// repeat. The PCA reducer is refit from scratch every epoch.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "specdc/cnn.hpp"
#include "specdc/common.hpp"
#include "specdc/ingest.hpp"
#include "specdc/kmeans.hpp"
#include "specdc/pca.hpp"

namespace specdc {

struct DeepClusterConfig {
  int clusters = 12;          // K
  int components = 32;        // N, PCA reducer output
  int epochs = 200;
  bool l2_normalize = true;
  bool whiten = false;
  TrainConfig train;
  std::uint64_t seed = 0;
};

struct EpochRecord {
  int epoch = 0;
  double mean_loss = 0.0;
  double inertia = 0.0;
  std::vector<Eigen::Index> cluster_sizes;
  double label_churn = 0.0;  // vs previous epoch, under optimal cluster matching
};

struct TrainHistory {
  std::vector<EpochRecord> records;
};

// ---------------------------------------------------------------------------
// Optimal cluster matching (Hungarian algorithm, O(K^3)) used to make label
// churn invariant to cluster id permutation.

namespace detail {

// Min-cost assignment on a square cost matrix; returns column for each row.
inline std::vector<int> hungarian(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  std::vector<double> u(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<double> v(static_cast<std::size_t>(n) + 1, 0.0);
  std::vector<int> p(static_cast<std::size_t>(n) + 1, 0);
  std::vector<int> way(static_cast<std::size_t>(n) + 1, 0);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<std::size_t>(n) + 1,
                             std::numeric_limits<double>::infinity());
    std::vector<char> used(static_cast<std::size_t>(n) + 1, 0);
    do {
      used[static_cast<std::size_t>(j0)] = 1;
      const int i0 = p[static_cast<std::size_t>(j0)];
      double delta = std::numeric_limits<double>::infinity();
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[static_cast<std::size_t>(i0)] -
                           v[static_cast<std::size_t>(j)];
        if (cur < minv[static_cast<std::size_t>(j)]) {
          minv[static_cast<std::size_t>(j)] = cur;
          way[static_cast<std::size_t>(j)] = j0;
        }
        if (minv[static_cast<std::size_t>(j)] < delta) {
          delta = minv[static_cast<std::size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[static_cast<std::size_t>(j)]) {
          u[static_cast<std::size_t>(p[static_cast<std::size_t>(j)])] += delta;
          v[static_cast<std::size_t>(j)] -= delta;
        } else {
          minv[static_cast<std::size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<std::size_t>(j0)] != 0);
    do {
      const int j1 = way[static_cast<std::size_t>(j0)];
      p[static_cast<std::size_t>(j0)] = p[static_cast<std::size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  std::vector<int> row_to_col(static_cast<std::size_t>(n), -1);
  for (int j = 1; j <= n; ++j)
    if (p[static_cast<std::size_t>(j)] > 0)
      row_to_col[static_cast<std::size_t>(p[static_cast<std::size_t>(j)]) - 1] = j - 1;
  return row_to_col;
}

}  // namespace detail

// Fraction of samples whose cluster changed between two labelings of the
// same samples, after optimally matching cluster ids.
inline double label_churn(const std::vector<int>& prev, const std::vector<int>& cur, int k) {
  if (prev.size() != cur.size()) throw ShapeError("label_churn: length mismatch");
  if (prev.empty()) return 0.0;
  Eigen::MatrixXd contingency = Eigen::MatrixXd::Zero(k, k);
  for (std::size_t i = 0; i < prev.size(); ++i)
    contingency(prev[i], cur[i]) += 1.0;
  const std::vector<int> match = detail::hungarian(-contingency);
  double agree = 0.0;
  for (int r = 0; r < k; ++r) agree += contingency(r, match[static_cast<std::size_t>(r)]);
  return 1.0 - agree / static_cast<double>(prev.size());
}

// ---------------------------------------------------------------------------

// PCA-reduce, optionally whiten, optionally project rows to the unit sphere
// (zero rows stay zero).
inline FeatureMatrix reduce_features(const FeatureMatrix& features, const PcaModel& pca,
                                     bool whiten, bool l2_normalize) {
  FeatureMatrix y = pca_transform(pca, features);
  if (whiten) {
    for (Eigen::Index c = 0; c < y.cols(); ++c)
      y.col(c) /= std::sqrt(pca.explained_variance(c)) + 1e-8;
  }
  if (l2_normalize) {
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double norm = y.row(r).norm();
      if (norm > 0.0) y.row(r) /= norm;
    }
  }
  return y;
}

template <typename T>
struct EpochResult {
  std::vector<int> pseudo_labels;
  EpochRecord record;
  PcaModel pca;
  Eigen::MatrixXd centroids;
};

// One clustering + training pass. prev_labels may be empty (first epoch).
template <typename T>
EpochResult<T> epoch_step(CnnModel<T>& model, const TileSet& tiles,
                          const DeepClusterConfig& cfg, int epoch_index,
                          const std::vector<int>& prev_labels = {}) {
  if (model.classes() != cfg.clusters)
    throw ConfigError("epoch_step: model head size does not match K");
  if (cfg.components < 1 || cfg.components > model.feature_dim())
    throw ConfigError("epoch_step: components out of range");

  EpochResult<T> out;
  out.record.epoch = epoch_index;

  FeatureMatrix features = extract_features(model, tiles, cfg.train.batch_size);
  out.pca = pca_fit(features, cfg.components);
  if (!(out.pca.total_variance > 0.0))
    throw DegenerateFeaturesError("epoch_step: features collapsed to a single point");
  FeatureMatrix reduced = reduce_features(features, out.pca, cfg.whiten, cfg.l2_normalize);

  const std::uint64_t kmeans_seed = cfg.seed ^ static_cast<std::uint64_t>(epoch_index);
  ClusterModel clusters = kmeans_fit(reduced, cfg.clusters, kmeans_seed);
  out.pseudo_labels = clusters.assignments;
  out.centroids = clusters.centroids;
  out.record.inertia = clusters.inertia;
  out.record.cluster_sizes.assign(static_cast<std::size_t>(cfg.clusters), 0);
  for (int l : out.pseudo_labels) ++out.record.cluster_sizes[static_cast<std::size_t>(l)];
  out.record.label_churn =
      prev_labels.empty() ? 0.0 : label_churn(prev_labels, out.pseudo_labels, cfg.clusters);

  // Cluster ids permute arbitrarily between epochs, so the head restarts.
  model.reinit_head(cfg.clusters, mix_seed(cfg.seed, 0x68656164ULL + static_cast<std::uint64_t>(epoch_index)));

  // One full pass of training over all tiles on the pseudo-labels.
  const std::size_t n = tiles.size();
  const int bs = cfg.train.batch_size;
  const std::size_t n_batches = (n + static_cast<std::size_t>(bs) - 1) / static_cast<std::size_t>(bs);
  Rng sampler(mix_seed(cfg.seed, 0x747261696eULL + static_cast<std::uint64_t>(epoch_index)));

  std::vector<std::vector<std::size_t>> members;
  if (cfg.train.balanced_sampling) {
    members.resize(static_cast<std::size_t>(cfg.clusters));
    for (std::size_t i = 0; i < n; ++i)
      members[static_cast<std::size_t>(out.pseudo_labels[i])].push_back(i);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  if (!cfg.train.balanced_sampling) {
    for (std::size_t i = n; i > 1; --i)
      std::swap(order[i - 1], order[static_cast<std::size_t>(sampler.uniform_int(i))]);
  }

  double loss_sum = 0.0;
  std::size_t consumed = 0;
  for (std::size_t b = 0; b < n_batches; ++b) {
    std::vector<std::size_t> batch_idx;
    if (cfg.train.balanced_sampling) {
      const std::size_t want = std::min(static_cast<std::size_t>(bs), n - consumed);
      for (std::size_t i = 0; i < want; ++i) {
        const auto c = sampler.uniform_int(static_cast<std::uint64_t>(cfg.clusters));
        const auto& pool = members[static_cast<std::size_t>(c)];
        batch_idx.push_back(pool[static_cast<std::size_t>(sampler.uniform_int(pool.size()))]);
      }
    } else {
      const std::size_t end = std::min(n, consumed + static_cast<std::size_t>(bs));
      batch_idx.assign(order.begin() + static_cast<std::ptrdiff_t>(consumed),
                       order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    consumed += batch_idx.size();

    const int w = tiles.window;
    Tensor4<T> batch(static_cast<int>(batch_idx.size()), 1, w, w);
    std::vector<int> labels(batch_idx.size());
    for (std::size_t i = 0; i < batch_idx.size(); ++i) {
      const Tile& t = tiles.tiles[batch_idx[i]];
      for (int r = 0; r < w; ++r)
        for (int c = 0; c < w; ++c) batch.at(static_cast<int>(i), 0, r, c) = static_cast<T>(t.pixels(r, c));
      labels[i] = out.pseudo_labels[batch_idx[i]];
    }
    loss_sum += model.train_step(batch, labels, cfg.train) * static_cast<double>(batch_idx.size());
  }
  out.record.mean_loss = loss_sum / static_cast<double>(n);
  return out;
}

template <typename T>
struct DeepClusterResult {
  TrainHistory history;
  ClusterModel final_clusters;
  PcaModel final_pca;
};

// Called after every epoch; gives the caller a chance to persist checkpoints.
template <typename T>
using EpochSink = std::function<void(int epoch, CnnModel<T>& model, const PcaModel& pca,
                                     const Eigen::MatrixXd& centroids, const EpochRecord& rec)>;

template <typename T>
DeepClusterResult<T> deepcluster_train(CnnModel<T>& model, const TileSet& tiles,
                                       const DeepClusterConfig& cfg,
                                       const EpochSink<T>& sink = {}) {
  if (tiles.empty()) throw EmptySetError("deepcluster: empty tile set");
  if (cfg.epochs < 1) throw ConfigError("deepcluster: epochs must be >= 1");
  if (cfg.clusters < 2) throw ConfigError("deepcluster: K must be >= 2");
  if (tiles.size() < static_cast<std::size_t>(cfg.clusters))
    throw ShapeError("deepcluster: fewer samples than clusters");

  DeepClusterResult<T> result;
  std::vector<int> prev_labels;
  for (int e = 0; e < cfg.epochs; ++e) {
    EpochResult<T> step = epoch_step(model, tiles, cfg, e, prev_labels);
    result.history.records.push_back(step.record);
    prev_labels = step.pseudo_labels;
    if (sink) sink(e, model, step.pca, step.centroids, result.history.records.back());
  }

  // Final clustering state derived from the fully trained model, so the
  // saved artifact serves both as feature extractor and K-way classifier.
  FeatureMatrix features = extract_features(model, tiles, cfg.train.batch_size);
  result.final_pca = pca_fit(features, cfg.components);
  FeatureMatrix reduced = reduce_features(features, result.final_pca, cfg.whiten, cfg.l2_normalize);
  result.final_clusters =
      kmeans_fit(reduced, cfg.clusters, cfg.seed ^ static_cast<std::uint64_t>(cfg.epochs));
  return result;
}

// TrainHistory CSV: epoch,mean_loss,inertia,churn,size_0..size_{K-1}
inline void save_history(const TrainHistory& history, int k, const std::string& path) {
  CsvWriter csv(path);
  std::vector<std::string> header = {"epoch", "mean_loss", "inertia", "churn"};
  for (int c = 0; c < k; ++c) header.push_back("size_" + std::to_string(c));
  csv.row(header);
  for (const EpochRecord& r : history.records) {
    std::vector<std::string> row = {std::to_string(r.epoch), fmt_double(r.mean_loss),
                                    fmt_double(r.inertia), fmt_double(r.label_churn)};
    for (Eigen::Index s : r.cluster_sizes) row.push_back(std::to_string(s));
    csv.row(row);
  }
}

}  // namespace specdc
