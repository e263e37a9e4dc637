#pragma once

// Error types, seed derivation, hashing and the worker-thread budget shared by
// every vqalab module.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace vqalab {

inline constexpr std::string_view kCodeVersion = "vqalab-0.1.0";

// ----------------------------- errors -----------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Invalid ratios, unknown keys, shape mismatches, missing splits.
struct ConfigError : Error {
  using Error::Error;
};

/// A scene or prompt does not fit the context budget, or is not decodable.
struct EncodingError : Error {
  using Error::Error;
};

struct VocabError : Error {
  using Error::Error;
};

struct UnsupportedQuestion : Error {
  using Error::Error;
};

/// Malformed analysis input (e.g. a metrics log missing a series).
struct InputError : Error {
  using Error::Error;
};

/// NaN/inf in a loss or objective. `dump` carries a JSONL diagnostic payload.
struct NumericalError : Error {
  NumericalError(const std::string& what, std::string dump_jsonl)
      : Error(what), dump(std::move(dump_jsonl)) {}
  std::string dump;
};

struct InternalError : Error {
  using Error::Error;
};

// ----------------------------- hashing / seeds -----------------------------

inline std::uint64_t fnv1a64(std::string_view bytes,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

/// Named seed derivation: every random stream is (root seed, component label, index).
inline std::uint64_t derive_seed(std::uint64_t root, std::string_view label,
                                 std::uint64_t index = 0) {
  return splitmix64(splitmix64(root ^ fnv1a64(label)) + splitmix64(index));
}

/// Minimal deterministic generator; platform-stable unlike the std distributions.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    return splitmix64(state_++);
  }

  /// Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n) {
    if (n == 0) throw InternalError("Rng::below(0)");
    return static_cast<std::size_t>(uniform() * static_cast<double>(n));
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    // Box-Muller; one value per call keeps the stream position obvious.
    double u1 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
  }

 private:
  std::uint64_t state_;
};

// ----------------------------- threads -----------------------------

inline constexpr const char* kThreadsEnv = "VQALAB_THREADS";

inline std::size_t thread_budget() {
  if (const char* env = std::getenv(kThreadsEnv)) {
    const long n = std::strtol(env, nullptr, 10);
    if (n > 0) return static_cast<std::size_t>(n);
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

/// Runs fn(i) for i in [0, n). Results must be written to per-index slots so the
/// outcome does not depend on scheduling.
inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                         std::size_t threads = thread_budget()) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace vqalab
