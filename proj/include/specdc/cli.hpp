#pragma once

// Command-line pipeline driver: synth, segment, baseline, deepcluster,
// evaluate, report. Data goes to files under --out; messages go to stderr.
// Exit codes: 0 success, 2 usage error, 1 runtime error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "specdc/cnn.hpp"
#include "specdc/common.hpp"
#include "specdc/deepcluster.hpp"
#include "specdc/eval.hpp"
#include "specdc/ingest.hpp"
#include "specdc/kmeans.hpp"
#include "specdc/pca.hpp"

namespace specdc::cli {

inline constexpr const char* kVersion = "0.1.0";

namespace fs = std::filesystem;

// Every emitted file is listed in the run manifest.
class Manifest {
 public:
  Manifest(fs::path dir, std::uint64_t seed) : dir_(std::move(dir)), seed_(seed) {
    fs::create_directories(dir_);
  }

  fs::path add(const std::string& name, const std::string& kind, const std::string& filename) {
    entries_.push_back({name, kind, filename});
    return dir_ / filename;
  }

  void write() const {
    CsvWriter csv((dir_ / "manifest.csv").string());
    csv.row({"name", "kind", "path", "seed"});
    for (const auto& e : entries_) csv.row({e.name, e.kind, e.filename, std::to_string(seed_)});
  }

  const fs::path& dir() const { return dir_; }

 private:
  struct Entry {
    std::string name, kind, filename;
  };
  fs::path dir_;
  std::uint64_t seed_;
  std::vector<Entry> entries_;
};

namespace detail {

inline SynthKind parse_kind(const std::string& s) {
  if (s == "line_burst") return SynthKind::line_burst;
  if (s == "dot_burst") return SynthKind::dot_burst;
  if (s == "noise_only") return SynthKind::noise_only;
  if (s == "edge_attenuated") return SynthKind::edge_attenuated;
  throw ConfigError("unknown synth class kind: " + s);
}

// "kind:snr_db:duty[:edge_side]"
inline SynthClass parse_class(const std::string& text) {
  SynthClass c;
  std::vector<std::string> parts;
  std::string cur;
  for (char ch : text) {
    if (ch == ':') {
      parts.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  parts.push_back(cur);
  if (parts.size() < 3 || parts.size() > 4)
    throw ConfigError("class spec must be kind:snr_db:duty[:edge]: " + text);
  c.kind = parse_kind(parts[0]);
  c.snr_db = std::stod(parts[1]);
  c.duty_cycle = std::stod(parts[2]);
  if (parts.size() == 4) c.edge_side = std::stoi(parts[3]);
  return c;
}

inline std::vector<SynthClass> preset_classes(const std::string& preset) {
  if (preset == "basic4")
    return {{SynthKind::line_burst, 20.0, 0.6, 0},
            {SynthKind::dot_burst, 20.0, 0.4, 0},
            {SynthKind::noise_only, 0.0, 0.0, 0},
            {SynthKind::edge_attenuated, 30.0, 0.0, 0}};
  if (preset == "six")
    return {{SynthKind::noise_only, 0.0, 0.0, 0},
            {SynthKind::line_burst, 25.0, 0.9, 0},
            {SynthKind::line_burst, 25.0, 0.3, 0},
            {SynthKind::dot_burst, 25.0, 0.8, 0},
            {SynthKind::dot_burst, 25.0, 0.2, 0},
            {SynthKind::edge_attenuated, 30.0, 0.0, 0}};
  if (preset == "edgebands8")
    return {{SynthKind::edge_attenuated, 30.0, 0.0, 0},
            {SynthKind::noise_only, 0.0, 0.0, 0},
            {SynthKind::line_burst, 15.0, 0.5, 0},
            {SynthKind::noise_only, 0.0, 0.0, 0},
            {SynthKind::noise_only, 0.0, 0.0, 0},
            {SynthKind::line_burst, 15.0, 0.5, 0},
            {SynthKind::noise_only, 0.0, 0.0, 0},
            {SynthKind::edge_attenuated, 30.0, 0.0, 1}};
  throw ConfigError("unknown preset: " + preset);
}

inline void write_evr_csv(const PcaModel& pca, const std::string& path) {
  CsvWriter csv(path);
  csv.row({"component", "evr", "cumulative"});
  const Eigen::VectorXd r = evr(pca);
  double cum = 0.0;
  for (Eigen::Index i = 0; i < r.size(); ++i) {
    cum += r(i);
    csv.row({std::to_string(i + 1), fmt_double(r(i)), fmt_double(cum)});
  }
}

inline void write_band_histogram_csv(const Eigen::MatrixXi& hist, const std::string& path) {
  CsvWriter csv(path);
  std::vector<std::string> header = {"cluster"};
  for (Eigen::Index b = 0; b < hist.cols(); ++b) header.push_back("band_" + std::to_string(b));
  csv.row(header);
  for (Eigen::Index c = 0; c < hist.rows(); ++c) {
    std::vector<std::string> row = {std::to_string(c)};
    for (Eigen::Index b = 0; b < hist.cols(); ++b) row.push_back(std::to_string(hist(c, b)));
    csv.row(row);
  }
}

// Reads the cumulative column of an evr.csv and returns the smallest n with
// cumulative >= threshold.
inline Eigen::Index components_from_evr_csv(const std::string& path, double threshold) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("missing artifact: " + path);
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    if (c1 == std::string::npos || c2 == std::string::npos)
      throw FormatError("bad evr csv row: " + line);
    if (std::stod(line.substr(c2 + 1)) + 1e-12 >= threshold)
      return std::stoll(line.substr(0, c1));
  }
  throw InsufficientModelError("evr csv never reaches threshold: " + path);
}

struct SilhouetteBest {
  int k = 0;
  double score = -2.0;
};

inline SilhouetteBest best_from_silhouette_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw MissingArtifactError("missing artifact: " + path);
  std::string line;
  std::getline(is, line);  // header
  SilhouetteBest best;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto c1 = line.find(',');
    const auto c2 = line.find(',', c1 + 1);
    const double s = std::stod(line.substr(c1 + 1, c2 == std::string::npos
                                                       ? std::string::npos
                                                       : c2 - c1 - 1));
    if (s > best.score) {
      best.score = s;
      best.k = std::stoi(line.substr(0, c1));
    }
  }
  if (best.k == 0) throw FormatError("empty silhouette csv: " + path);
  return best;
}

inline std::optional<double> read_single_value_csv(const std::string& path,
                                                   std::size_t column) {
  std::ifstream is(path);
  if (!is) return std::nullopt;
  std::string line;
  std::getline(is, line);
  if (!std::getline(is, line)) return std::nullopt;
  std::size_t start = 0;
  for (std::size_t c = 0; c < column; ++c) {
    start = line.find(',', start);
    if (start == std::string::npos) return std::nullopt;
    ++start;
  }
  return std::stod(line.substr(start));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Subcommand bodies (exposed for tests).

struct GlobalOpts {
  std::uint64_t seed = 0;
  bool strict = false;
  std::string out = "run";
  int threads = 0;  // 0 = auto; computation is single-threaded and order-fixed
};

inline void cmd_synth(const GlobalOpts& g, const SynthConfig& cfg) {
  Manifest manifest(g.out, cfg.seed);
  SynthResult res = synth_generate(cfg);
  save_psd(res.psd, manifest.add("recording", "spsd", "synth.spsd").string());
  save_tiles(res.tiles, manifest.add("tiles", "sptl", "tiles.sptl").string());
  save_labels(res.labels, manifest.add("labels", "csv", "labels.csv").string());
  manifest.write();
}

inline void cmd_segment(const GlobalOpts& g, const std::string& psd_path, int window) {
  Manifest manifest(g.out, g.seed);
  PsdMatrix psd = load_psd(psd_path);
  TileSet raw = segment(psd, window);
  if (raw.empty()) throw EmptySetError("segment: recording smaller than one window");
  save_tiles(normalize(raw), manifest.add("tiles", "sptl", "tiles.sptl").string());
  manifest.write();
}

struct BaselineOpts {
  std::string tiles_path;
  int components = 0;  // 0 = full rank
  int k_min = 2, k_max = 30;
  Eigen::Index subsample_vat = 500;
  Eigen::Index subsample_sil = 5000;
  std::string labels_path;  // optional ground truth for NMI
};

inline void cmd_baseline(const GlobalOpts& g, const BaselineOpts& o) {
  Manifest manifest(g.out, g.seed);
  TileSet tiles = load_tiles(o.tiles_path);
  FeatureMatrix x = flatten(tiles);
  const Eigen::Index full = std::min(x.rows(), x.cols());
  const Eigen::Index nfit = o.components > 0 ? o.components : full;

  PcaFitOptions fit_opts;
  fit_opts.subsample_seed = g.seed;
  PcaModel pca = pca_fit(x, nfit, fit_opts);
  detail::write_evr_csv(pca, manifest.add("evr", "csv", "evr.csv").string());
  FeatureMatrix y = pca_transform(pca, x);

  std::optional<std::vector<int>> truth;
  if (!o.labels_path.empty()) truth = load_labels(o.labels_path);

  CsvWriter sil(manifest.add("silhouette", "csv", "silhouette.csv").string());
  sil.row({"k", "silhouette", "inertia"});
  std::unique_ptr<CsvWriter> nmi_csv;
  if (truth) {
    nmi_csv = std::make_unique<CsvWriter>(manifest.add("nmi", "csv", "nmi.csv").string());
    nmi_csv->row({"k", "nmi"});
  }
  for (int k = o.k_min; k <= o.k_max; ++k) {
    ClusterModel cm = kmeans_fit(y, k, mix_seed(g.seed, static_cast<std::uint64_t>(k)));
    const double s = silhouette(y, cm.assignments, o.subsample_sil, g.seed);
    sil.row({std::to_string(k), fmt_double(s), fmt_double(cm.inertia)});
    if (truth) nmi_csv->row({std::to_string(k), fmt_double(nmi(*truth, cm.assignments))});
  }

  DissimilarityMatrix dm =
      pairwise_distances(y, std::min(o.subsample_vat, y.rows()), g.seed);
  VatResult v = vat(dm);
  render_matrix(v.reordered, manifest.add("vat", "pgm", "vat.pgm").string());
  render_matrix(v.ivat, manifest.add("ivat", "pgm", "ivat.pgm").string());
  manifest.write();
}

struct DeepClusterOpts {
  std::string tiles_path;
  std::string arch = "reduced";
  DeepClusterConfig cfg;
};

inline void cmd_deepcluster(const GlobalOpts& g, const DeepClusterOpts& o) {
  Manifest manifest(g.out, o.cfg.seed);
  TileSet tiles = load_tiles(o.tiles_path);
  const Arch arch = o.arch == "resnet18" ? Arch::resnet18 : Arch::reduced;
  if (o.arch != "reduced" && o.arch != "resnet18")
    throw ConfigError("unknown arch: " + o.arch);
  CnnModel<float> model(make_net_spec(arch, tiles.window, o.cfg.clusters, o.cfg.seed));

  const fs::path last = manifest.add("checkpoint-last", "spck", "last.spck");
  const fs::path best = manifest.add("checkpoint-best", "spck", "best.spck");
  double best_loss = std::numeric_limits<double>::infinity();
  EpochSink<float> sink = [&](int, CnnModel<float>& m, const PcaModel& pca,
                              const Eigen::MatrixXd& centroids, const EpochRecord& rec) {
    save_checkpoint(m, last.string(), &pca, &centroids);
    if (rec.mean_loss < best_loss) {
      best_loss = rec.mean_loss;
      save_checkpoint(m, best.string(), &pca, &centroids);
    }
  };
  DeepClusterResult<float> res = deepcluster_train(model, tiles, o.cfg, sink);
  save_history(res.history, o.cfg.clusters,
               manifest.add("history", "csv", "history.csv").string());
  save_checkpoint(model, manifest.add("checkpoint-final", "spck", "final.spck").string(),
                  &res.final_pca, &res.final_clusters.centroids);
  manifest.write();
}

struct EvaluateOpts {
  std::string checkpoint_path;
  std::string tiles_path;
  std::string labels_path;
  Eigen::Index subsample_vat = 500;
  Eigen::Index subsample_sil = 5000;
  bool l2_normalize = true;
  bool whiten = false;
  int batch_size = 64;
};

inline void cmd_evaluate(const GlobalOpts& g, const EvaluateOpts& o) {
  Manifest manifest(g.out, g.seed);
  auto [model, ck] = load_checkpoint<float>(o.checkpoint_path);
  if (!ck.pca || !ck.centroids)
    throw MissingArtifactError("checkpoint lacks PCA/centroid sections: " + o.checkpoint_path);
  TileSet tiles = load_tiles(o.tiles_path);

  FeatureMatrix features = extract_features(model, tiles, o.batch_size);
  // Full-rank spectrum of the learned features for the EVR report.
  PcaModel full = pca_fit(features, std::min(features.rows(), features.cols()));
  detail::write_evr_csv(full, manifest.add("evr", "csv", "evr.csv").string());

  FeatureMatrix reduced = reduce_features(features, *ck.pca, o.whiten, o.l2_normalize);
  std::vector<int> labels = assign(reduced, *ck.centroids);
  const int k = static_cast<int>(ck.centroids->rows());

  {
    CsvWriter sil(manifest.add("silhouette", "csv", "silhouette.csv").string());
    sil.row({"k", "silhouette"});
    sil.row({std::to_string(k),
             fmt_double(silhouette(reduced, labels, o.subsample_sil, g.seed))});
  }
  if (!o.labels_path.empty()) {
    const std::vector<int> truth = load_labels(o.labels_path);
    CsvWriter nm(manifest.add("nmi", "csv", "nmi.csv").string());
    nm.row({"k", "nmi"});
    nm.row({std::to_string(k), fmt_double(nmi(truth, labels))});
  }

  DissimilarityMatrix dm =
      pairwise_distances(reduced, std::min(o.subsample_vat, reduced.rows()), g.seed);
  VatResult v = vat(dm);
  render_matrix(v.reordered, manifest.add("vat", "pgm", "vat.pgm").string());
  render_matrix(v.ivat, manifest.add("ivat", "pgm", "ivat.pgm").string());

  detail::write_band_histogram_csv(
      band_histogram(tiles, labels),
      manifest.add("band-histogram", "csv", "band_histogram.csv").string());
  for (int c = 0; c < k; ++c) {
    bool nonempty = false;
    for (int l : labels)
      if (l == c) {
        nonempty = true;
        break;
      }
    if (!nonempty) continue;
    const std::string name = "avg_cluster_" + std::to_string(c) + ".pgm";
    render_matrix(average_spectrogram(tiles, labels, c).pixels,
                  manifest.add("avg-cluster-" + std::to_string(c), "pgm", name).string());
  }
  manifest.write();
}

// Aggregates a run directory holding baseline/ and cnn/ outputs.
inline void cmd_report(const GlobalOpts& g, const std::string& run_dir) {
  Manifest manifest(g.out, g.seed);
  const fs::path base = fs::path(run_dir) / "baseline";
  const fs::path cnn = fs::path(run_dir) / "cnn";
  if (!fs::exists(base / "evr.csv") || !fs::exists(base / "silhouette.csv"))
    throw MissingArtifactError("report: missing baseline outputs under " + base.string());
  if (!fs::exists(cnn / "evr.csv") || !fs::exists(cnn / "silhouette.csv"))
    throw MissingArtifactError("report: missing cnn outputs under " + cnn.string());

  const Eigen::Index n_base = detail::components_from_evr_csv((base / "evr.csv").string(), 0.95);
  const Eigen::Index n_cnn = detail::components_from_evr_csv((cnn / "evr.csv").string(), 0.95);
  const auto best_base = detail::best_from_silhouette_csv((base / "silhouette.csv").string());
  const auto best_cnn = detail::best_from_silhouette_csv((cnn / "silhouette.csv").string());
  const auto nmi_base = detail::read_single_value_csv((base / "nmi.csv").string(), 1);
  const auto nmi_cnn = detail::read_single_value_csv((cnn / "nmi.csv").string(), 1);
  const double reduction = 1.0 - static_cast<double>(n_cnn) / static_cast<double>(n_base);

  CsvWriter csv(manifest.add("summary", "csv", "summary.csv").string());
  csv.row({"model", "components_95", "best_silhouette", "best_k", "nmi", "reduction_ratio"});
  csv.row({"baseline", std::to_string(n_base), fmt_double(best_base.score),
           std::to_string(best_base.k), nmi_base ? fmt_double(*nmi_base) : "",
           ""});
  csv.row({"cnn", std::to_string(n_cnn), fmt_double(best_cnn.score),
           std::to_string(best_cnn.k), nmi_cnn ? fmt_double(*nmi_cnn) : "",
           fmt_double(reduction)});
  manifest.write();
}

// ---------------------------------------------------------------------------

inline int run(std::vector<std::string> args) {
  CLI::App app{"spectrogram clustering pipeline"};
  app.set_version_flag("--version", std::string("specdc ") + kVersion);
  app.require_subcommand(1);

  GlobalOpts g;
  if (const char* env = std::getenv("SPECTRUM_DC_THREADS")) g.threads = std::atoi(env);

  auto add_global = [&](CLI::App* sub) {
    sub->add_option("--seed", g.seed, "random seed");
    sub->add_flag("--strict", g.strict, "strict mode: single-threaded, bit-reproducible");
    sub->add_option("--out", g.out, "output directory");
    sub->add_option("--threads", g.threads, "thread count (0 = auto)");
    sub->set_config("--config");
  };

  // synth
  SynthConfig synth_cfg;
  std::string preset = "basic4";
  std::vector<std::string> class_specs;
  CLI::App* synth = app.add_subcommand("synth", "generate a labeled synthetic recording");
  add_global(synth);
  synth->add_option("--window", synth_cfg.window, "tile window W");
  synth->add_option("--tiles-per-class", synth_cfg.tiles_per_class, "tiles per class");
  synth->add_option("--preset", preset, "class preset: basic4|six|edgebands8");
  synth->add_option("--class", class_specs, "class spec kind:snr_db:duty[:edge]");
  synth->add_option("--noise-floor", synth_cfg.noise_floor_dbm, "noise floor in dBm");

  // segment
  std::string psd_path;
  int window = 128;
  CLI::App* seg = app.add_subcommand("segment", "segment an SPSD recording into tiles");
  add_global(seg);
  seg->add_option("--psd", psd_path, "input SPSD file")->required()->check(CLI::ExistingFile);
  seg->add_option("--window", window, "tile window W");

  // baseline
  BaselineOpts bl;
  CLI::App* baseline = app.add_subcommand("baseline", "PCA + K-means baseline sweep");
  add_global(baseline);
  baseline->add_option("--tiles", bl.tiles_path, "input SPTL file")->required()->check(CLI::ExistingFile);
  baseline->add_option("--components,-n", bl.components, "PCA components (0 = full)");
  baseline->add_option("--k-min", bl.k_min, "sweep start");
  baseline->add_option("--k-max", bl.k_max, "sweep end");
  baseline->add_option("--subsample-vat", bl.subsample_vat, "VAT subsample size");
  baseline->add_option("--subsample-sil", bl.subsample_sil, "silhouette subsample size");
  baseline->add_option("--labels", bl.labels_path, "ground-truth labels CSV")->check(CLI::ExistingFile);

  // deepcluster
  DeepClusterOpts dc;
  CLI::App* deep = app.add_subcommand("deepcluster", "alternating CNN/K-means training");
  add_global(deep);
  deep->add_option("--tiles", dc.tiles_path, "input SPTL file")->required()->check(CLI::ExistingFile);
  deep->add_option("--clusters,-k", dc.cfg.clusters, "cluster count K");
  deep->add_option("--components,-n", dc.cfg.components, "PCA reducer components N");
  deep->add_option("--epochs", dc.cfg.epochs, "training epochs");
  deep->add_option("--arch", dc.arch, "architecture: reduced|resnet18");
  deep->add_option("--batch-size", dc.cfg.train.batch_size, "SGD batch size");
  deep->add_option("--learning-rate", dc.cfg.train.learning_rate, "SGD learning rate");
  deep->add_flag("!--no-l2", dc.cfg.l2_normalize, "disable L2 feature normalization");
  deep->add_flag("--whiten", dc.cfg.whiten, "whiten PCA features");
  deep->add_flag("!--no-balanced", dc.cfg.train.balanced_sampling,
                 "disable balanced cluster sampling");

  // evaluate
  EvaluateOpts ev;
  CLI::App* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint on a tile set");
  add_global(evaluate);
  evaluate->add_option("--checkpoint", ev.checkpoint_path, "SPCK checkpoint")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--tiles", ev.tiles_path, "input SPTL file")->required()->check(CLI::ExistingFile);
  evaluate->add_option("--labels", ev.labels_path, "ground-truth labels CSV")->check(CLI::ExistingFile);
  evaluate->add_option("--subsample-vat", ev.subsample_vat, "VAT subsample size");
  evaluate->add_option("--subsample-sil", ev.subsample_sil, "silhouette subsample size");
  evaluate->add_flag("!--no-l2", ev.l2_normalize, "disable L2 feature normalization");
  evaluate->add_flag("--whiten", ev.whiten, "whiten PCA features");

  // report
  std::string run_dir;
  CLI::App* report = app.add_subcommand("report", "aggregate a run directory");
  add_global(report);
  report->add_option("--run-dir", run_dir, "directory with baseline/ and cnn/ outputs")
      ->required()
      ->check(CLI::ExistingDirectory);

  std::reverse(args.begin(), args.end());  // CLI11 consumes args back to front
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    std::cout << app.help();
    return 0;
  } catch (const CLI::CallForVersion& e) {
    std::cout << "specdc " << kVersion << '\n';
    return 0;
  } catch (const CLI::ParseError& e) {
    std::cerr << "usage error: " << e.what() << '\n' << app.help();
    return 2;
  }

  try {
    if (synth->parsed()) {
      synth_cfg.classes = class_specs.empty()
                              ? detail::preset_classes(preset)
                              : [&] {
                                  std::vector<SynthClass> cs;
                                  for (const auto& s : class_specs)
                                    cs.push_back(detail::parse_class(s));
                                  return cs;
                                }();
      synth_cfg.seed = g.seed;
      cmd_synth(g, synth_cfg);
    } else if (seg->parsed()) {
      cmd_segment(g, psd_path, window);
    } else if (baseline->parsed()) {
      cmd_baseline(g, bl);
    } else if (deep->parsed()) {
      dc.cfg.seed = g.seed;
      cmd_deepcluster(g, dc);
    } else if (evaluate->parsed()) {
      cmd_evaluate(g, ev);
    } else if (report->parsed()) {
      cmd_report(g, run_dir);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace specdc::cli
