#pragma once

// Shared plumbing: error types, deterministic RNG, little-endian binary I/O
// and small CSV helpers used across the library.

#include <cmath>
#include <cstdint>
#include <cstring>
#include <type_traits>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace specdc {

// ---------------------------------------------------------------------------
// Errors

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define SPECDC_DEFINE_ERROR(Name)                              \
  class Name : public Error {                                  \
   public:                                                     \
    explicit Name(const std::string& msg) : Error(msg) {}      \
  }

SPECDC_DEFINE_ERROR(IoError);
SPECDC_DEFINE_ERROR(FormatError);
SPECDC_DEFINE_ERROR(VersionError);
SPECDC_DEFINE_ERROR(DataError);
SPECDC_DEFINE_ERROR(ShapeError);
SPECDC_DEFINE_ERROR(ConfigError);
SPECDC_DEFINE_ERROR(EmptySetError);
SPECDC_DEFINE_ERROR(EmptyClusterError);
SPECDC_DEFINE_ERROR(SingleClusterError);
SPECDC_DEFINE_ERROR(LabelRangeError);
SPECDC_DEFINE_ERROR(DegenerateDataError);
SPECDC_DEFINE_ERROR(DegenerateFeaturesError);
SPECDC_DEFINE_ERROR(InsufficientModelError);
SPECDC_DEFINE_ERROR(MissingArtifactError);

#undef SPECDC_DEFINE_ERROR

// ---------------------------------------------------------------------------
// Deterministic RNG.
//
// mt19937_64 is bit-specified by the standard; the distribution transforms
// below are our own so that streams are identical across platforms and
// standard-library versions.

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  // Uniform integer in [0, n). Rejection sampling, unbiased.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw ConfigError("uniform_int: n must be positive");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t r;
    do {
      r = eng_();
    } while (r >= limit);
    return r % n;
  }

  // Standard normal via Box-Muller.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.141592653589793238462643383279502884 * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

 private:
  std::mt19937_64 eng_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// splitmix64 finalizer; used to derive independent substream seeds.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// ---------------------------------------------------------------------------
// Little-endian binary I/O. Host is assumed little-endian (x86/ARM); a
// static check below guards the assumption for the raw-copy fast path.

namespace io {

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  os.write(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  static_assert(std::is_trivially_copyable_v<T>);
  T value{};
  is.read(reinterpret_cast<char*>(&value), sizeof(T));
  if (!is) throw FormatError("unexpected end of file");
  return value;
}

inline void write_magic(std::ostream& os, const char magic[5]) {
  os.write(magic, 4);
}

inline std::string read_tag(std::istream& is) {
  char buf[4];
  is.read(buf, 4);
  if (is.gcount() == 0) return {};  // clean EOF
  if (is.gcount() != 4) throw FormatError("truncated tag");
  return std::string(buf, 4);
}

inline void expect_magic(std::istream& is, const std::string& magic) {
  const std::string tag = read_tag(is);
  if (tag != magic)
    throw FormatError("bad magic: expected '" + magic + "', got '" + tag + "'");
}

inline void write_f32_span(std::ostream& os, const float* data, std::size_t n) {
  os.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * 4));
}

inline void read_f32_span(std::istream& is, float* data, std::size_t n) {
  is.read(reinterpret_cast<char*>(data), static_cast<std::streamsize>(n * 4));
  if (!is) throw FormatError("truncated float payload");
}

}  // namespace io

// ---------------------------------------------------------------------------
// CSV emission: comma-separated, header row, UTF-8, LF endings.

class CsvWriter {
 public:
  explicit CsvWriter(const std::string& path) : os_(path, std::ios::binary) {
    if (!os_) throw IoError("cannot open for writing: " + path);
  }

  void row(const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) os_ << ',';
      os_ << cells[i];
    }
    os_ << '\n';
  }

  std::ostream& stream() { return os_; }

 private:
  std::ofstream os_;
};

inline std::string fmt_double(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

}  // namespace specdc
