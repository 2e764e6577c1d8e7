// Acceptance suite: one pass/fail line per criterion, exit 0 only if all pass.
// Oracles live in oracles.hpp and are independent reimplementations
// (Jacobi eigensolve, finite differences, exhaustive enumeration).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "oracles.hpp"
#include "specdc/cli.hpp"
#include "specdc/cnn.hpp"
#include "specdc/deepcluster.hpp"
#include "specdc/eval.hpp"
#include "specdc/ingest.hpp"
#include "specdc/kmeans.hpp"
#include "specdc/pca.hpp"

using namespace specdc;
namespace fs = std::filesystem;

namespace {

struct Check {
  bool ok = true;
  std::string detail;

  void require(bool cond, const std::string& what) {
    if (!cond && ok) {
      ok = false;
      detail = what;
    }
  }
};

int g_failures = 0;

template <typename F>
void criterion(int number, const std::string& title, double budget_seconds, F&& body) {
  Check c;
  const auto start = std::chrono::steady_clock::now();
  try {
    body(c);
  } catch (const std::exception& e) {
    c.require(false, std::string("exception: ") + e.what());
  }
  const double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (budget_seconds > 0)
    c.require(elapsed < budget_seconds,
              "runtime " + std::to_string(elapsed) + "s over budget");
  if (c.ok) {
    std::printf("[PASS] criterion %2d: %s (%.1fs)\n", number, title.c_str(), elapsed);
  } else {
    std::printf("[FAIL] criterion %2d: %s (%.1fs) -- %s\n", number, title.c_str(), elapsed,
                c.detail.c_str());
    ++g_failures;
  }
  std::fflush(stdout);
}

Eigen::MatrixXd random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  Eigen::MatrixXd x(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r)
    for (Eigen::Index c = 0; c < cols; ++c) x(r, c) = rng.normal();
  return x;
}

double read_csv_value(const fs::path& path, std::size_t column) {
  std::ifstream is(path);
  if (!is) throw IoError("missing " + path.string());
  std::string line;
  std::getline(is, line);
  if (!std::getline(is, line)) throw FormatError("no data row in " + path.string());
  std::size_t start = 0;
  for (std::size_t c = 0; c < column; ++c) start = line.find(',', start) + 1;
  return std::stod(line.substr(start));
}

std::string slurp(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

// Runs the full seeded strict-mode pipeline used by criteria 6/8/9.
void run_pipeline(const fs::path& root) {
  const std::string seed = "606";
  auto run = [](std::vector<std::string> args) {
    if (cli::run(std::move(args)) != 0) throw Error("pipeline command failed");
  };
  run({"synth", "--window", "32", "--tiles-per-class", "300", "--preset", "six", "--seed",
       seed, "--strict", "--out", (root / "synth").string()});
  run({"baseline", "--tiles", (root / "synth" / "tiles.sptl").string(), "--labels",
       (root / "synth" / "labels.csv").string(), "--k-min", "12", "--k-max", "12", "--seed",
       seed, "--strict", "--out", (root / "run" / "baseline").string()});
  run({"deepcluster", "--tiles", (root / "synth" / "tiles.sptl").string(), "-k", "12", "-n",
       "32", "--epochs", "30", "--seed", seed, "--strict", "--out", (root / "dc").string()});
  run({"evaluate", "--checkpoint", (root / "dc" / "final.spck").string(), "--tiles",
       (root / "synth" / "tiles.sptl").string(), "--labels",
       (root / "synth" / "labels.csv").string(), "--seed", seed, "--strict", "--out",
       (root / "run" / "cnn").string()});
  run({"report", "--run-dir", (root / "run").string(), "--out", (root / "report").string()});
}

}  // namespace

int main() {
  const fs::path work = fs::temp_directory_path() / "specdc_acceptance";
  fs::remove_all(work);
  fs::create_directories(work);

  // 1. PCA oracle equivalence.
  criterion(1, "PCA matches covariance-eigendecomposition oracle", 10.0, [](Check& c) {
    Rng pick(1001);
    for (int inst = 0; inst < 50; ++inst) {
      const Eigen::Index rows = 5 + static_cast<Eigen::Index>(pick.uniform_int(26));
      const Eigen::Index dim = 2 + static_cast<Eigen::Index>(pick.uniform_int(9));
      // rank is rows-1; beyond it the component directions are arbitrary
      const Eigen::Index n = std::min(rows - 1, dim);
      Rng rng(2000 + static_cast<std::uint64_t>(inst));
      Eigen::MatrixXd x = random_matrix(rows, dim, rng);
      PcaModel m = pca_fit(x, n);
      oracles::PcaReference ref = oracles::pca_reference(x, n);
      c.require(std::abs(m.total_variance - ref.total_variance) < 1e-8, "total variance");
      for (Eigen::Index i = 0; i < n; ++i) {
        c.require(std::abs(m.explained_variance(i) - ref.variances(i)) < 1e-8,
                  "explained variance");
        Eigen::RowVectorXd oc = ref.components.row(i);
        Eigen::Index best;
        oc.cwiseAbs().maxCoeff(&best);
        if (oc(best) < 0) oc = -oc;
        c.require((m.components.row(i) - oc).lpNorm<Eigen::Infinity>() < 1e-8, "components");
      }
      if (n == dim) {
        // full rank: EVR must account for all the variance
        c.require(std::abs(evr(m).sum() - 1.0) < 1e-9, "full-rank EVR sum");
      }
    }
  });

  // 2. Gradient check.
  criterion(2, "analytic gradients match central finite differences", 60.0, [](Check& c) {
    NetSpec spec;
    spec.window = 8;
    spec.stem_channels = 2;
    spec.stem_kernel = 3;
    spec.stem_stride = 1;
    spec.stages = {{4, 1, 2}};
    spec.classes = 3;
    spec.seed = 77;
    CnnModel<double> m(spec);
    Tensor4<double> batch(3, 1, 8, 8);
    Rng rng(78);
    for (auto& v : batch.v) v = rng.uniform();
    const std::vector<int> labels = {0, 1, 2};

    auto loss_at = [&]() {
      auto [f, logits] = m.forward(batch, true, false);
      return CnnModel<double>::cross_entropy(logits, labels).first;
    };
    m.zero_grad();
    {
      auto [f, logits] = m.forward(batch, true, false);
      m.backward(CnnModel<double>::cross_entropy(logits, labels).second);
    }
    const double step = 1e-5;
    double max_rel = 0.0;
    for (Param<double>* p : m.parameters()) {
      if (!p->trainable) continue;
      for (std::size_t i = 0; i < p->size(); ++i) {
        const double saved = p->w[i];
        p->w[i] = saved + step;
        const double lp = loss_at();
        p->w[i] = saved - step;
        const double lm = loss_at();
        p->w[i] = saved;
        const double numeric = (lp - lm) / (2.0 * step);
        const double denom = std::max({std::abs(numeric), std::abs(p->g[i]), 1e-6});
        max_rel = std::max(max_rel, std::abs(numeric - p->g[i]) / denom);
      }
    }
    c.require(max_rel < 1e-4, "max relative error " + std::to_string(max_rel));
  });

  // 3. K-means properties.
  criterion(3, "k-means monotone inertia, blob recovery, brute-force optimum", 30.0,
            [](Check& c) {
              // monotone inertia for 100 seeded runs
              for (std::uint64_t seed = 0; seed < 100; ++seed) {
                Rng rng(3000 + seed);
                Eigen::MatrixXd x = random_matrix(60, 3, rng);
                std::vector<double> trace;
                LloydOptions opts;
                opts.inertia_trace = &trace;
                opts.repair_seed = seed;
                lloyd(x, kmeanspp_init(x, 4, seed), opts);
                for (std::size_t i = 1; i < trace.size(); ++i)
                  c.require(trace[i] <= trace[i - 1] + 1e-9, "inertia increased");
              }
              // blob recovery
              int recovered = 0;
              for (std::uint64_t seed = 0; seed < 100; ++seed) {
                Rng rng(4000 + seed);
                Eigen::MatrixXd x(90, 2);
                const double cx[3] = {0, 10, 0}, cy[3] = {0, 0, 10};
                for (int b = 0; b < 3; ++b)
                  for (int i = 0; i < 30; ++i) {
                    x(b * 30 + i, 0) = cx[b] + 0.1 * rng.normal();
                    x(b * 30 + i, 1) = cy[b] + 0.1 * rng.normal();
                  }
                const std::vector<int> labels = kmeans_fit(x, 3, seed).assignments;
                bool good = true;
                for (int b = 0; b < 3 && good; ++b)
                  for (int i = 1; i < 30; ++i)
                    if (labels[static_cast<std::size_t>(b * 30 + i)] !=
                        labels[static_cast<std::size_t>(b * 30)]) {
                      good = false;
                      break;
                    }
                good = good && labels[0] != labels[30] && labels[0] != labels[60] &&
                       labels[30] != labels[60];
                if (good) ++recovered;
              }
              c.require(recovered >= 95, "blob recovery " + std::to_string(recovered) + "/100");
              // n=6 brute force
              Eigen::MatrixXd x6(6, 2);
              x6 << 0, 0, 0.5, 0, 0.2, 0.4, 9, 9, 9.5, 9, 9.2, 9.4;
              const double best = oracles::kmeans_bruteforce_inertia(x6, 2);
              for (std::uint64_t seed = 0; seed < 20; ++seed)
                c.require(std::abs(kmeans_fit(x6, 2, seed).inertia - best) < 1e-9,
                          "brute-force optimum missed");
            });

  // 4. iVAT oracle.
  criterion(4, "iVAT equals exhaustive minimax-path oracle", 30.0, [](Check& c) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      Rng rng(5000 + seed);
      const Eigen::Index n = 2 + static_cast<Eigen::Index>(rng.uniform_int(6));
      DissimilarityMatrix dm;
      dm.d = Eigen::MatrixXd::Zero(n, n);
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i + 1; j < n; ++j) {
          dm.d(i, j) = rng.uniform() + 0.01;
          dm.d(j, i) = dm.d(i, j);
        }
      VatResult v = vat(dm);
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = i + 1; j < n; ++j)
          c.require(v.ivat(i, j) == oracles::minimax_bruteforce(v.reordered, i, j),
                    "minimax mismatch");
    }
  });

  // 5. Silhouette oracle.
  criterion(5, "silhouette matches brute-force definition", 30.0, [](Check& c) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(6000 + seed);
      const Eigen::Index n = 10 + static_cast<Eigen::Index>(rng.uniform_int(91));
      const int k = 2 + static_cast<int>(rng.uniform_int(5));
      Eigen::MatrixXd x = random_matrix(n, 3, rng);
      std::vector<int> labels(static_cast<std::size_t>(n));
      for (auto& l : labels) l = static_cast<int>(rng.uniform_int(k));
      labels[0] = 0;
      labels[1] = 1;
      c.require(std::abs(silhouette(x, labels) - oracles::silhouette_bruteforce(x, labels)) <
                    1e-9,
                "brute-force mismatch");
    }
    Eigen::MatrixXd pts(4, 1);
    pts << 0, 1, 10, 11;
    const double s = silhouette(pts, {0, 0, 1, 1});
    c.require(std::abs(s - 0.5 * (9.5 / 10.5 + 8.5 / 9.5)) < 1e-12, "closed form");
    c.require(std::abs(s - 0.89975) < 1e-6, "reference value 0.89975");
  });

  // 6/8/9 share one pipeline; criterion 6 runs it the first time.
  const fs::path run_a = work / "run_a";
  criterion(6, "trained features need <= 20% of the baseline's 95%-EVR components", 900.0,
            [&](Check& c) {
              run_pipeline(run_a);
              // summary.csv rows: header, baseline, cnn; the ratio is the last column
              std::ifstream is(run_a / "report" / "summary.csv");
              std::string line, cnn_row;
              std::getline(is, line);
              std::getline(is, line);
              std::getline(is, cnn_row);
              c.require(cnn_row.rfind("cnn,", 0) == 0, "missing cnn row in summary.csv");
              const auto last = cnn_row.rfind(',');
              const double ratio = std::stod(cnn_row.substr(last + 1));
              c.require(ratio >= 0.80, "reduction ratio " + std::to_string(ratio));
            });

  // 7. Baseline isolates edge-attenuated sub-bands.
  criterion(7, "baseline k=3 isolates the edge-attenuated bands", 300.0, [&](Check& c) {
    SynthConfig cfg;
    cfg.window = 32;
    cfg.tiles_per_class = 150;
    cfg.seed = 707;
    cfg.classes = cli::detail::preset_classes("edgebands8");
    SynthResult res = synth_generate(cfg);
    FeatureMatrix x = flatten(res.tiles);
    PcaModel pca = pca_fit(x, std::min(x.rows(), x.cols()));
    FeatureMatrix y = pca_transform(pca, x);
    ClusterModel cm = kmeans_fit(y, 3, 707);
    const double sil = silhouette(y, cm.assignments);
    c.require(sil >= 0.5, "silhouette " + std::to_string(sil));

    Eigen::MatrixXi hist = band_histogram(res.tiles, cm.assignments);
    auto dominant = [&](int band, double& purity) {
      Eigen::Index best = 0;
      hist.col(band).maxCoeff(&best);
      purity = static_cast<double>(hist(best, band)) /
               static_cast<double>(hist.col(band).sum());
      return best;
    };
    double p0 = 0.0, p7 = 0.0;
    const Eigen::Index c0 = dominant(0, p0);
    const Eigen::Index c7 = dominant(7, p7);
    c.require(p0 >= 0.90, "band 0 purity " + std::to_string(p0));
    c.require(p7 >= 0.90, "band 7 purity " + std::to_string(p7));
    c.require(c0 != c7, "attenuated bands share a cluster");
  });

  // 8. NMI of the trained model beats the baseline at the same K.
  criterion(8, "deepcluster NMI >= 0.6 and above the baseline at K=12", 60.0, [&](Check& c) {
    const double nmi_cnn = read_csv_value(run_a / "run" / "cnn" / "nmi.csv", 1);
    const double nmi_base = read_csv_value(run_a / "run" / "baseline" / "nmi.csv", 1);
    c.require(nmi_cnn >= 0.6, "cnn NMI " + std::to_string(nmi_cnn));
    c.require(nmi_cnn > nmi_base, "cnn NMI " + std::to_string(nmi_cnn) +
                                      " not above baseline " + std::to_string(nmi_base));
  });

  // 9. Strict-mode determinism of the whole pipeline.
  criterion(9, "two strict-mode runs are byte-identical", 900.0, [&](Check& c) {
    const fs::path run_b = work / "run_b";
    run_pipeline(run_b);
    for (const auto& entry : fs::recursive_directory_iterator(run_a)) {
      if (!entry.is_regular_file()) continue;
      const fs::path rel = fs::relative(entry.path(), run_a);
      const fs::path other = run_b / rel;
      c.require(fs::exists(other), "missing in rerun: " + rel.string());
      if (fs::exists(other))
        c.require(slurp(entry.path()) == slurp(other), "differs: " + rel.string());
    }
  });

  // 10. Segmentation arithmetic.
  criterion(10, "tile-count arithmetic incl. the published 423,904 case", 10.0, [](Check& c) {
    Rng rng(10010);
    for (int i = 0; i < 1000; ++i) {
      const auto steps = static_cast<std::int64_t>(rng.uniform_int(1000000));
      const auto [nb, nt] = segment_grid(1024, steps, 128);
      c.require(nb == 8 && nt == steps / 128, "grid arithmetic");
    }
    const auto [nb, nt] = segment_grid(1024, 52988LL * 128, 128);
    c.require(nb * nt == 423904, "published tile count");
    // and the counts drive actual segmentation
    PsdMatrix psd;
    psd.values = Eigen::MatrixXd::Zero(1024, 300);
    c.require(segment(psd, 128).size() == 8 * 2, "segment count");
  });

  fs::remove_all(work);
  if (g_failures == 0) {
    std::printf("acceptance: all 10 criteria passed\n");
    return 0;
  }
  std::printf("acceptance: %d criteria FAILED\n", g_failures);
  return 1;
}
