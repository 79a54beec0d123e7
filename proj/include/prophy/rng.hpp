// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <string_view>

#include "prophy/tensor.hpp"

namespace prophy {

/// splitmix64 step, used to derive independent child seeds from a root seed
/// plus a purpose tag. Stable across platforms.
inline std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view tag) {
  std::uint64_t state = root;
  std::uint64_t h = splitmix64(state);
  for (char c : tag) {
    state = h ^ static_cast<std::uint64_t>(static_cast<unsigned char>(c));
    h = splitmix64(state);
  }
  return h;
}

/// Deterministic random stream. Gaussians use Box-Muller without a cached
/// spare so that every draw consumes a fixed number of engine steps; this
/// keeps saved engine state sufficient for bitwise resume.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  std::int64_t uniform_int(std::int64_t n) {
    require(n > 0, "rng: uniform_int needs n > 0");
    return static_cast<std::int64_t>(engine_() % static_cast<std::uint64_t>(n));
  }

  /// Standard normal via Box-Muller; always consumes two uniforms.
  double normal() {
    double u1 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 0.0);
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  void fill_normal(Tensor& t, double mean = 0.0, double stddev = 1.0) {
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = normal(mean, stddev);
  }

  void fill_uniform(Tensor& t, double lo = 0.0, double hi = 1.0) {
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = uniform(lo, hi);
  }

  Rng split(std::string_view tag) const {
    std::uint64_t root = hash_state();
    return Rng(derive_seed(root, tag));
  }

  std::string save_state() const {
    std::ostringstream out;
    out << engine_;
    return out.str();
  }

  void load_state(const std::string& s) {
    std::istringstream in(s);
    in >> engine_;
    if (in.fail()) throw Error("rng: malformed engine state");
  }

 private:
  std::uint64_t hash_state() const {
    std::string s = save_state();
    std::uint64_t state = 0x243f6a8885a308d3ull;
    std::uint64_t h = 0;
    for (char c : s) {
      state ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) + (h << 6) + (h >> 2);
      h = splitmix64(state);
    }
    return h;
  }

  std::mt19937_64 engine_;
};

/// Root stream bundle used by training: one child stream per purpose so that
/// changing how often one purpose draws does not shift the others.
struct StreamSet {
  Rng data_order;
  Rng timestep;
  Rng noise;
  Rng dropout;

  explicit StreamSet(std::uint64_t root)
      : data_order(derive_seed(root, "data_order")),
        timestep(derive_seed(root, "timestep")),
        noise(derive_seed(root, "noise")),
        dropout(derive_seed(root, "dropout")) {}
};

}  // namespace prophy
