#pragma once

#include <cstdint>
#include <random>
#include <string_view>
#include <vector>

#include "enprompt/matrix.hpp"

namespace enprompt {

// Stable 64-bit FNV-1a; used for seed derivation and config digests.
std::uint64_t fnv1a64(std::string_view text) noexcept;

// Derives an independent seed for a named substream of `root`.
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream) noexcept;
std::uint64_t derive_seed(std::uint64_t root, std::string_view stream,
                          std::uint64_t a, std::uint64_t b = 0) noexcept;

// Portable random source. The engine is std::mt19937_64 (fully specified by
// the standard); the distribution transforms are written out here because
// the standard distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  // Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  // Uniform integer in [0, n).
  std::size_t index(std::size_t n);
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev,
                       Role role = Role::weight);
  Matrix uniform_matrix(std::size_t rows, std::size_t cols, double lo,
                        double hi, Role role = Role::feature);

  template <typename T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::swap(items[i - 1], items[index(i)]);
    }
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace enprompt
