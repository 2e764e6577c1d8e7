#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "specdc/deepcluster.hpp"
#include "specdc/eval.hpp"

using namespace specdc;

namespace {

TileSet synth_tiles(int classes, int per_class, int w, std::uint64_t seed,
                    std::vector<int>* labels_out = nullptr) {
  SynthConfig cfg;
  cfg.window = w;
  cfg.tiles_per_class = per_class;
  cfg.seed = seed;
  const std::vector<SynthClass> pool = {{SynthKind::noise_only, 0.0, 0.0, 0},
                                        {SynthKind::line_burst, 25.0, 0.7, 0},
                                        {SynthKind::dot_burst, 25.0, 0.6, 0},
                                        {SynthKind::edge_attenuated, 30.0, 0.0, 0}};
  for (int c = 0; c < classes; ++c) cfg.classes.push_back(pool[static_cast<std::size_t>(c) % 4]);
  SynthResult res = synth_generate(cfg);
  if (labels_out) *labels_out = res.labels;
  return res.tiles;
}

DeepClusterConfig small_config(int k, int n, int epochs, std::uint64_t seed) {
  DeepClusterConfig cfg;
  cfg.clusters = k;
  cfg.components = n;
  cfg.epochs = epochs;
  cfg.seed = seed;
  cfg.train.seed = seed;
  cfg.train.batch_size = 32;
  return cfg;
}

}  // namespace

TEST_CASE("hungarian matching finds the obvious permutation") {
  Eigen::MatrixXd cost(3, 3);
  cost << 5, 1, 9,
          9, 5, 1,
          1, 9, 5;
  REQUIRE(detail::hungarian(cost) == std::vector<int>{1, 2, 0});
}

TEST_CASE("label_churn is invariant to cluster id permutation") {
  std::vector<int> a = {0, 0, 1, 1, 2, 2};
  std::vector<int> b = {2, 2, 0, 0, 1, 1};  // same partition, renamed
  REQUIRE(label_churn(a, b, 3) == 0.0);
  std::vector<int> c = {2, 0, 0, 0, 1, 1};  // one sample moved
  REQUIRE(label_churn(a, c, 3) == Catch::Approx(1.0 / 6.0).margin(1e-12));
  REQUIRE_THROWS_AS(label_churn(a, std::vector<int>{0, 1}, 3), ShapeError);
}

TEST_CASE("reduce_features produces unit rows under l2 normalization") {
  Rng rng(3);
  FeatureMatrix x(40, 8);
  for (Eigen::Index i = 0; i < x.rows(); ++i)
    for (Eigen::Index j = 0; j < x.cols(); ++j) x(i, j) = rng.normal();
  PcaModel pca = pca_fit(x, 4);
  FeatureMatrix y = reduce_features(x, pca, false, true);
  for (Eigen::Index i = 0; i < y.rows(); ++i)
    REQUIRE(std::abs(y.row(i).norm() - 1.0) < 1e-9);
  // whitening scales each column to ~unit variance
  FeatureMatrix w = reduce_features(x, pca, true, false);
  for (Eigen::Index c = 0; c < w.cols(); ++c) {
    const double var =
        (w.col(c).array() - w.col(c).mean()).square().sum() / static_cast<double>(w.rows() - 1);
    REQUIRE(var == Catch::Approx(1.0).margin(1e-3));
  }
}

TEST_CASE("first epoch on a randomly initialized model yields valid full labels") {
  TileSet tiles = synth_tiles(4, 20, 16, 5);
  const int k = 5;
  DeepClusterConfig cfg = small_config(k, 8, 1, 5);
  CnnModel<float> model(make_net_spec(Arch::reduced, 16, k, cfg.seed));
  EpochResult<float> res = epoch_step(model, tiles, cfg, 0);
  REQUIRE(res.pseudo_labels.size() == tiles.size());
  std::vector<int> counts(static_cast<std::size_t>(k), 0);
  for (int l : res.pseudo_labels) {
    REQUIRE(l >= 0);
    REQUIRE(l < k);
    ++counts[static_cast<std::size_t>(l)];
  }
  for (int c : counts) REQUIRE(c > 0);
  REQUIRE(res.record.cluster_sizes.size() == static_cast<std::size_t>(k));
  Eigen::Index total = 0;
  for (Eigen::Index s : res.record.cluster_sizes) total += s;
  REQUIRE(total == static_cast<Eigen::Index>(tiles.size()));
}

TEST_CASE("learning_rate 0 with fixed seeds is a frozen fixed point") {
  TileSet tiles = synth_tiles(3, 15, 16, 7);
  DeepClusterConfig cfg = small_config(4, 6, 1, 7);
  cfg.train.learning_rate = 0.0;
  CnnModel<float> model(make_net_spec(Arch::reduced, 16, 4, cfg.seed));
  // Same epoch index twice: the frozen model and identical seeds must give
  // identical pseudo-labels, i.e. churn 0 under matching.
  EpochResult<float> e0 = epoch_step(model, tiles, cfg, 0);
  EpochResult<float> e1 = epoch_step(model, tiles, cfg, 0, e0.pseudo_labels);
  REQUIRE(e1.pseudo_labels == e0.pseudo_labels);
  REQUIRE(e1.record.label_churn == 0.0);
}

TEST_CASE("N=1 boundary completes") {
  TileSet tiles = synth_tiles(3, 10, 16, 9);
  DeepClusterConfig cfg = small_config(3, 1, 1, 9);
  CnnModel<float> model(make_net_spec(Arch::reduced, 16, 3, cfg.seed));
  EpochResult<float> res = epoch_step(model, tiles, cfg, 0);
  REQUIRE(res.pca.n_components() == 1);
  REQUIRE(res.pseudo_labels.size() == tiles.size());
}

TEST_CASE("epochs=3 produces a 3-record history") {
  TileSet tiles = synth_tiles(3, 10, 16, 11);
  DeepClusterConfig cfg = small_config(3, 4, 3, 11);
  CnnModel<float> model(make_net_spec(Arch::reduced, 16, 3, cfg.seed));
  int sink_calls = 0;
  EpochSink<float> sink = [&](int, CnnModel<float>&, const PcaModel&, const Eigen::MatrixXd&,
                              const EpochRecord&) { ++sink_calls; };
  DeepClusterResult<float> res = deepcluster_train(model, tiles, cfg, sink);
  REQUIRE(res.history.records.size() == 3);
  REQUIRE(sink_calls == 3);
  for (std::size_t e = 0; e < 3; ++e) {
    REQUIRE(res.history.records[e].epoch == static_cast<int>(e));
    REQUIRE(std::isfinite(res.history.records[e].inertia));
  }
  REQUIRE(res.final_clusters.k == 3);
  REQUIRE(res.final_pca.n_components() == 4);
}

TEST_CASE("default epoch count is 200") {
  REQUIRE(DeepClusterConfig{}.epochs == 200);
  REQUIRE(DeepClusterConfig{}.l2_normalize);
  REQUIRE_FALSE(DeepClusterConfig{}.whiten);
}

TEST_CASE("two runs with identical seeds are bit-identical") {
  TileSet tiles = synth_tiles(3, 12, 16, 13);
  DeepClusterConfig cfg = small_config(3, 4, 2, 13);
  CnnModel<float> m1(make_net_spec(Arch::reduced, 16, 3, cfg.seed));
  CnnModel<float> m2(make_net_spec(Arch::reduced, 16, 3, cfg.seed));
  DeepClusterResult<float> r1 = deepcluster_train(m1, tiles, cfg);
  DeepClusterResult<float> r2 = deepcluster_train(m2, tiles, cfg);
  REQUIRE(r1.final_clusters.assignments == r2.final_clusters.assignments);
  REQUIRE(r1.final_clusters.centroids == r2.final_clusters.centroids);
  for (std::size_t e = 0; e < r1.history.records.size(); ++e) {
    REQUIRE(r1.history.records[e].mean_loss == r2.history.records[e].mean_loss);
    REQUIRE(r1.history.records[e].inertia == r2.history.records[e].inertia);
  }
}

TEST_CASE("training on separable synthetic classes raises NMI") {
  std::vector<int> truth;
  TileSet tiles = synth_tiles(4, 200, 32, 17, &truth);
  DeepClusterConfig cfg = small_config(8, 16, 30, 17);
  cfg.train.batch_size = 64;
  CnnModel<float> model(make_net_spec(Arch::reduced, 32, 8, cfg.seed));

  // First-epoch pseudo-labels come from the randomly initialized model;
  // reproduce them from an identically seeded copy before training mutates it.
  std::vector<int> epoch1_labels;
  {
    CnnModel<float> fresh(make_net_spec(Arch::reduced, 32, 8, cfg.seed));
    FeatureMatrix f = extract_features(fresh, tiles, cfg.train.batch_size);
    PcaModel p = pca_fit(f, cfg.components);
    FeatureMatrix red = reduce_features(f, p, cfg.whiten, cfg.l2_normalize);
    epoch1_labels = kmeans_fit(red, cfg.clusters, cfg.seed ^ 0ULL).assignments;
  }
  DeepClusterResult<float> res = deepcluster_train(model, tiles, cfg);
  const double nmi_first = nmi(truth, epoch1_labels);
  const double nmi_final = nmi(truth, res.final_clusters.assignments);
  INFO("nmi epoch1=" << nmi_first << " final=" << nmi_final);
  REQUIRE(nmi_final >= nmi_first - 1e-12);
  REQUIRE(nmi_final >= 0.6);
}

TEST_CASE("configuration errors are rejected") {
  TileSet tiles = synth_tiles(2, 5, 16, 19);
  DeepClusterConfig cfg = small_config(3, 4, 1, 19);
  CnnModel<float> model(make_net_spec(Arch::reduced, 16, 3, cfg.seed));

  DeepClusterConfig bad = cfg;
  bad.components = 1000;  // > feature dim
  REQUIRE_THROWS_AS(epoch_step(model, tiles, bad, 0), ConfigError);

  CnnModel<float> wrong_head(make_net_spec(Arch::reduced, 16, 5, cfg.seed));
  REQUIRE_THROWS_AS(epoch_step(wrong_head, tiles, cfg, 0), ConfigError);

  TileSet empty;
  empty.window = 16;
  REQUIRE_THROWS_AS(deepcluster_train(model, empty, cfg), EmptySetError);

  DeepClusterConfig zero_epochs = cfg;
  zero_epochs.epochs = 0;
  REQUIRE_THROWS_AS(deepcluster_train(model, tiles, zero_epochs), ConfigError);
}

TEST_CASE("history CSV has the declared layout") {
  TrainHistory h;
  EpochRecord r;
  r.epoch = 0;
  r.mean_loss = 1.5;
  r.inertia = 2.5;
  r.label_churn = 0.25;
  r.cluster_sizes = {3, 4};
  h.records.push_back(r);
  const std::string path =
      (std::filesystem::temp_directory_path() / "specdc_history.csv").string();
  save_history(h, 2, path);
  std::ifstream is(path);
  std::string line;
  std::getline(is, line);
  REQUIRE(line == "epoch,mean_loss,inertia,churn,size_0,size_1");
  std::getline(is, line);
  REQUIRE(line == "0,1.5,2.5,0.25,3,4");
  std::filesystem::remove(path);
}
