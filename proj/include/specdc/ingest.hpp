#pragma once

// PSD recordings, spectrogram tiling and the labeled synthetic generator.
//
// File formats:
//   SPSD  "SPSD" u32 version=1, u32 bins, u64 steps, bins*steps LE f32
//         row-major (bin-major).
//   SPTL  "SPTL" u32 version=1, u32 tile_count, u16 W, f32 gmin, f32 gmax;
//         per tile: u32 time_index, u16 band_index, W*W LE f32.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "specdc/common.hpp"

namespace specdc {

// Raw power-spectral-density recording: frequency bins x time steps, dBm.
struct PsdMatrix {
  Eigen::MatrixXd values;  // bins x steps
  double sample_rate_hz = 5.0;
  double center_freq_hz = 0.0;
  double bandwidth_hz = 0.0;

  Eigen::Index bins() const { return values.rows(); }
  Eigen::Index steps() const { return values.cols(); }
};

struct Tile {
  Eigen::MatrixXd pixels;  // W x W
  std::uint32_t time_index = 0;
  std::uint16_t band_index = 0;
};

struct TileSet {
  int window = 0;
  std::vector<Tile> tiles;
  double global_min_dbm = 0.0;
  double global_max_dbm = 0.0;
  bool normalized = false;

  std::size_t size() const { return tiles.size(); }
  bool empty() const { return tiles.empty(); }
};

enum class SynthKind { line_burst, dot_burst, noise_only, edge_attenuated };

struct SynthClass {
  SynthKind kind = SynthKind::noise_only;
  double snr_db = 20.0;
  double duty_cycle = 0.5;
  // For edge_attenuated: which frequency edge of the tile the gain rolls
  // off toward (0 = low rows, 1 = high rows).
  int edge_side = 0;
};

struct SynthConfig {
  int window = 32;
  int tiles_per_class = 0;
  std::vector<SynthClass> classes;
  double noise_floor_dbm = -110.0;
  double noise_sigma_db = 2.0;
  std::uint64_t seed = 0;
};

struct SynthResult {
  PsdMatrix psd;
  TileSet tiles;  // segmented and normalized
  std::vector<int> labels;
};

// ---------------------------------------------------------------------------
// SPSD load/save

inline void save_psd(const PsdMatrix& psd, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  io::write_magic(os, "SPSD");
  io::write_le<std::uint32_t>(os, 1);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(psd.bins()));
  io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(psd.steps()));
  std::vector<float> row(static_cast<std::size_t>(psd.steps()));
  for (Eigen::Index b = 0; b < psd.bins(); ++b) {
    for (Eigen::Index t = 0; t < psd.steps(); ++t)
      row[static_cast<std::size_t>(t)] = static_cast<float>(psd.values(b, t));
    io::write_f32_span(os, row.data(), row.size());
  }
  if (!os) throw IoError("write failed: " + path);
}

inline PsdMatrix load_psd(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  io::expect_magic(is, "SPSD");
  const auto version = io::read_le<std::uint32_t>(is);
  if (version != 1) throw FormatError("SPSD: unsupported version");
  const auto bins = io::read_le<std::uint32_t>(is);
  const auto steps = io::read_le<std::uint64_t>(is);
  if (bins < 1) throw FormatError("SPSD: bins must be >= 1");
  PsdMatrix psd;
  psd.values.resize(bins, static_cast<Eigen::Index>(steps));
  std::vector<float> row(static_cast<std::size_t>(steps));
  for (std::uint32_t b = 0; b < bins; ++b) {
    io::read_f32_span(is, row.data(), row.size());
    for (std::uint64_t t = 0; t < steps; ++t) {
      const double v = row[static_cast<std::size_t>(t)];
      if (!std::isfinite(v)) throw DataError("SPSD: non-finite value");
      psd.values(b, static_cast<Eigen::Index>(t)) = v;
    }
  }
  return psd;
}

// ---------------------------------------------------------------------------
// Segmentation: non-overlapping W x W tiles, band-major then time.
// Trailing remainder rows/columns are discarded.

// Tile grid produced by segmentation: floor(bins/W) bands x floor(steps/W)
// time windows.
inline std::pair<std::int64_t, std::int64_t> segment_grid(std::int64_t bins,
                                                          std::int64_t steps, int window) {
  if (window < 2) throw ConfigError("segment: window must be >= 2");
  return {bins / window, steps / window};
}

inline TileSet segment(const PsdMatrix& psd, int window) {
  TileSet out;
  out.window = window;
  const auto [nb, nt] = segment_grid(psd.bins(), psd.steps(), window);
  if (nb == 0 || nt == 0) return out;  // empty set, not a failure
  out.tiles.reserve(static_cast<std::size_t>(nb * nt));
  for (Eigen::Index b = 0; b < nb; ++b) {
    for (Eigen::Index t = 0; t < nt; ++t) {
      Tile tile;
      tile.pixels = psd.values.block(b * window, t * window, window, window);
      tile.band_index = static_cast<std::uint16_t>(b);
      tile.time_index = static_cast<std::uint32_t>(t);
      out.tiles.push_back(std::move(tile));
    }
  }
  return out;
}

// Global min-max scaling to [0,1] over all pixels of the set.
// Constant-valued sets map to all zeros.
inline TileSet normalize(const TileSet& tiles) {
  if (tiles.empty()) throw EmptySetError("normalize: empty tile set");
  double gmin = std::numeric_limits<double>::infinity();
  double gmax = -std::numeric_limits<double>::infinity();
  for (const Tile& t : tiles.tiles) {
    gmin = std::min(gmin, t.pixels.minCoeff());
    gmax = std::max(gmax, t.pixels.maxCoeff());
  }
  TileSet out;
  out.window = tiles.window;
  out.global_min_dbm = gmin;
  out.global_max_dbm = gmax;
  out.normalized = true;
  out.tiles.reserve(tiles.size());
  const double span = gmax - gmin;
  for (const Tile& t : tiles.tiles) {
    Tile nt;
    nt.time_index = t.time_index;
    nt.band_index = t.band_index;
    if (span > 0.0)
      nt.pixels = (t.pixels.array() - gmin) / span;
    else
      nt.pixels = Eigen::MatrixXd::Zero(t.pixels.rows(), t.pixels.cols());
    out.tiles.push_back(std::move(nt));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic recording generator.

namespace detail {

inline void paint_class_tile(Eigen::Ref<Eigen::MatrixXd> px, const SynthClass& cls,
                             const SynthConfig& cfg, Rng& rng) {
  const int w = cfg.window;
  for (int i = 0; i < w; ++i)
    for (int j = 0; j < w; ++j)
      px(i, j) = cfg.noise_floor_dbm + cfg.noise_sigma_db * rng.normal();

  const double burst_dbm = cfg.noise_floor_dbm + cls.snr_db;
  switch (cls.kind) {
    case SynthKind::noise_only:
      break;
    case SynthKind::line_burst: {
      // Full-width horizontal rows, active for a duty_cycle fraction of
      // the time axis starting at a random offset (wrapping).
      const int n_lines = 1 + static_cast<int>(rng.uniform_int(3));
      const int active = std::max(1, static_cast<int>(std::lround(cls.duty_cycle * w)));
      for (int l = 0; l < n_lines; ++l) {
        const int row = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(w)));
        const int start = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(w)));
        for (int j = 0; j < active; ++j)
          px(row, (start + j) % w) = std::max(px(row, (start + j) % w), burst_dbm);
      }
      break;
    }
    case SynthKind::dot_burst: {
      const int n_dots = 2 + static_cast<int>(std::lround(cls.duty_cycle * 12));
      for (int d = 0; d < n_dots; ++d) {
        const int dh = 2 + static_cast<int>(rng.uniform_int(3));
        const int dw = 2 + static_cast<int>(rng.uniform_int(3));
        const int r0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(std::max(1, w - dh))));
        const int c0 = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(std::max(1, w - dw))));
        for (int i = 0; i < dh; ++i)
          for (int j = 0; j < dw; ++j)
            px(r0 + i, c0 + j) = std::max(px(r0 + i, c0 + j), burst_dbm);
      }
      break;
    }
    case SynthKind::edge_attenuated: {
      // Monotone gain roll-off (in dB) toward one frequency edge of the tile.
      for (int i = 0; i < w; ++i) {
        const double frac = (cls.edge_side == 0)
                                ? 1.0 - static_cast<double>(i) / (w - 1)
                                : static_cast<double>(i) / (w - 1);
        const double atten = cls.snr_db * frac;
        for (int j = 0; j < w; ++j) px(i, j) -= atten;
      }
      break;
    }
  }
}

}  // namespace detail

// Deterministic given cfg.seed: each tile draws from its own substream keyed
// by (class, tile) so results do not depend on generation order.
inline SynthResult synth_generate(const SynthConfig& cfg) {
  if (cfg.window < 2) throw ConfigError("synth: window must be >= 2");
  if (cfg.tiles_per_class < 0) throw ConfigError("synth: tiles_per_class must be >= 0");
  for (const SynthClass& c : cfg.classes) {
    if (c.duty_cycle < 0.0 || c.duty_cycle > 1.0)
      throw ConfigError("synth: duty_cycle must be in [0,1]");
    if (c.edge_side != 0 && c.edge_side != 1)
      throw ConfigError("synth: edge_side must be 0 or 1");
  }

  SynthResult out;
  const int n_classes = static_cast<int>(cfg.classes.size());
  const int w = cfg.window;
  out.psd.values.resize(static_cast<Eigen::Index>(n_classes) * w,
                        static_cast<Eigen::Index>(cfg.tiles_per_class) * w);
  if (n_classes == 0 || cfg.tiles_per_class == 0) {
    out.tiles.window = w;
    return out;
  }

  for (int c = 0; c < n_classes; ++c) {
    for (int t = 0; t < cfg.tiles_per_class; ++t) {
      Rng rng(mix_seed(cfg.seed, (static_cast<std::uint64_t>(c) << 32) |
                                     static_cast<std::uint64_t>(t)));
      detail::paint_class_tile(out.psd.values.block(c * w, t * w, w, w),
                               cfg.classes[static_cast<std::size_t>(c)], cfg, rng);
    }
  }

  out.tiles = normalize(segment(out.psd, w));
  out.labels.reserve(out.tiles.size());
  for (const Tile& t : out.tiles.tiles) out.labels.push_back(t.band_index);
  return out;
}

// ---------------------------------------------------------------------------
// SPTL load/save (lossless at f32 precision).

inline void save_tiles(const TileSet& tiles, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  io::write_magic(os, "SPTL");
  io::write_le<std::uint32_t>(os, 1);
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(tiles.size()));
  io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(tiles.window));
  io::write_le<float>(os, static_cast<float>(tiles.global_min_dbm));
  io::write_le<float>(os, static_cast<float>(tiles.global_max_dbm));
  const int w = tiles.window;
  std::vector<float> buf(static_cast<std::size_t>(w) * w);
  for (const Tile& t : tiles.tiles) {
    io::write_le<std::uint32_t>(os, t.time_index);
    io::write_le<std::uint16_t>(os, t.band_index);
    for (int i = 0; i < w; ++i)
      for (int j = 0; j < w; ++j)
        buf[static_cast<std::size_t>(i) * w + j] = static_cast<float>(t.pixels(i, j));
    io::write_f32_span(os, buf.data(), buf.size());
  }
  if (!os) throw IoError("write failed: " + path);
}

inline TileSet load_tiles(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  io::expect_magic(is, "SPTL");
  const auto version = io::read_le<std::uint32_t>(is);
  if (version != 1) throw FormatError("SPTL: unsupported version");
  const auto count = io::read_le<std::uint32_t>(is);
  const auto w = io::read_le<std::uint16_t>(is);
  TileSet out;
  out.window = w;
  out.global_min_dbm = io::read_le<float>(is);
  out.global_max_dbm = io::read_le<float>(is);
  out.normalized = true;
  out.tiles.reserve(count);
  std::vector<float> buf(static_cast<std::size_t>(w) * w);
  for (std::uint32_t k = 0; k < count; ++k) {
    Tile t;
    t.time_index = io::read_le<std::uint32_t>(is);
    t.band_index = io::read_le<std::uint16_t>(is);
    io::read_f32_span(is, buf.data(), buf.size());
    t.pixels.resize(w, w);
    for (int i = 0; i < w; ++i)
      for (int j = 0; j < w; ++j)
        t.pixels(i, j) = buf[static_cast<std::size_t>(i) * w + j];
    out.tiles.push_back(std::move(t));
  }
  return out;
}

// Labels sidecar: CSV `index,label`.
inline void save_labels(const std::vector<int>& labels, const std::string& path) {
  CsvWriter csv(path);
  csv.row({"index", "label"});
  for (std::size_t i = 0; i < labels.size(); ++i)
    csv.row({std::to_string(i), std::to_string(labels[i])});
}

inline std::vector<int> load_labels(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  std::string line;
  if (!std::getline(is, line)) throw FormatError("labels: empty file");
  std::vector<int> labels;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto comma = line.find(',');
    if (comma == std::string::npos) throw FormatError("labels: bad row: " + line);
    labels.push_back(std::stoi(line.substr(comma + 1)));
  }
  return labels;
}

}  // namespace specdc
