#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace otnpar {

// Exit codes used by the CLI when an error escapes to main.
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

/// Invalid configuration: bad field values, unknown keys, geometry that
/// cannot be assembled (e.g. embed dim not divisible by 4).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Problems with external inputs: malformed files, out-of-bounds events,
/// missing assets, corrupt or incompatible checkpoints.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Non-finite values where finite ones are required (loss, gradients).
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shape disagreements between operations; message names the module.
class ShapeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

uint64_t splitmix64(uint64_t x);

/// Combine seed material into a new stream seed. Deterministic and
/// order-sensitive, so (seed, epoch, step, slot) streams never collide
/// in practice.
uint64_t mix_seed(uint64_t a, uint64_t b = 0, uint64_t c = 0, uint64_t d = 0);

/// Deterministic RNG with hand-rolled transforms so sampled values do not
/// depend on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0x9e3779b97f4a7c15ull)) {}

  uint64_t next_u64();
  double uniform();                        // [0, 1)
  double uniform(double lo, double hi);    // [lo, hi)
  int64_t uniform_int(int64_t lo, int64_t hi);  // [lo, hi] inclusive
  bool bernoulli(double p);
  double normal();
  /// Normal(0, sigma) re-drawn until within [-clip, clip].
  double trunc_normal(double sigma, double clip);

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

uint64_t fnv1a64(const void* data, size_t n, uint64_t seed = 0xcbf29ce484222325ull);

}  // namespace otnpar
