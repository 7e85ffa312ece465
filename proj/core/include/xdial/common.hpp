#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace xdial {

// ---------------------------------------------------------------------------
// Errors
// ---------------------------------------------------------------------------

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

/// Shape/dimension mismatch between tensors.
class DimError : public Error {
 public:
  using Error::Error;
};

/// Out-of-range index (token id, position, ...).
class IndexError : public Error {
 public:
  using Error::Error;
};

/// A precondition of an operation was violated.
class ContractError : public Error {
 public:
  using Error::Error;
};

/// Invalid or inconsistent configuration.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Unreadable or malformed input data.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Checkpoint version/hash mismatch or corruption.
class CheckpointError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf where a finite value is required.
class NumericError : public Error {
 public:
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Shapes
// ---------------------------------------------------------------------------

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

inline bool shape_eq(const Shape& a, const Shape& b) { return a == b; }

// ---------------------------------------------------------------------------
// Integer and boolean tensors (never differentiable)
// ---------------------------------------------------------------------------

struct IdTensor {
  Shape shape;
  std::vector<std::int32_t> data;

  IdTensor() = default;
  IdTensor(Shape s, std::vector<std::int32_t> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw DimError("IdTensor: shape " + shape_str(shape) + " does not match data size " +
                     std::to_string(data.size()));
  }
  explicit IdTensor(Shape s) : shape(std::move(s)), data(shape_numel(shape), 0) {}

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
};

/// Boolean mask. Meaning (keep vs. block) is defined by each consumer.
struct MaskTensor {
  Shape shape;
  std::vector<std::uint8_t> data;

  MaskTensor() = default;
  MaskTensor(Shape s, std::vector<std::uint8_t> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != static_cast<std::int64_t>(data.size()))
      throw DimError("MaskTensor: shape " + shape_str(shape) + " does not match data size " +
                     std::to_string(data.size()));
  }
  MaskTensor(Shape s, bool fill) : shape(std::move(s)), data(shape_numel(shape), fill ? 1 : 0) {}

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  bool any() const {
    for (auto v : data)
      if (v) return true;
    return false;
  }
  bool all() const {
    for (auto v : data)
      if (!v) return false;
    return true;
  }
};

// ---------------------------------------------------------------------------
// Deterministic RNG. Distributions are hand-rolled so that streams are
// reproducible across standard libraries, which checkpoint resume relies on.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}

  std::uint64_t next_u64() {
    // splitmix64
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform in [0, 1).
  double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_unit(); }

  double normal(double mean = 0.0, double stddev = 1.0) {
    if (have_spare_) {
      have_spare_ = false;
      return mean + stddev * spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * next_unit() - 1.0;
      v = 2.0 * next_unit() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    have_spare_ = true;
    return mean + stddev * u * f;
  }

  /// Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n) { return n ? next_u64() % n : 0; }

  /// In-place Fisher-Yates shuffle.
  template <typename Vec>
  void shuffle(Vec& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(next_below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

// ---------------------------------------------------------------------------
// Diagnostics counters (non-fatal conditions worth surfacing in tests)
// ---------------------------------------------------------------------------

namespace diag {

/// Process-wide counter, e.g. "attention.fully_masked_row".
std::atomic<std::int64_t>& counter(const std::string& name);

/// Increment a counter; logs to stderr the first time it fires.
void warn(const std::string& name, const std::string& message);

}  // namespace diag

/// FNV-1a 64-bit, used for vocab fingerprints in checkpoints.
std::uint64_t fnv1a64(const void* bytes, std::size_t len);
std::string hex64(std::uint64_t v);

}  // namespace xdial
