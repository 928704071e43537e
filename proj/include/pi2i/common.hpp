#pragma once

#include <cstdint>
#include <cstdio>
#include <functional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace pi2i {

// Dense ids produced by the vocabulary mapping. Id 0 is reserved for
// out-of-vocabulary lookups in every embedding table; real ids start at 1.
using Id = std::int32_t;
using Timestamp = std::int64_t;

inline constexpr Id kOovId = 0;

// Thrown for unusable inputs (missing files, bad config values). The CLI
// maps this to exit code 2 and everything else to exit code 1.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Hashing / seeding.
// All randomness in the pipeline flows from one root seed; per-stage and
// per-user streams are derived with splitmix64 so results do not depend on
// scheduling or container iteration order.

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

inline std::uint64_t fnv1a64(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ull) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stage) {
  return splitmix64(root ^ fnv1a64(stage));
}

inline std::uint64_t derive_seed(std::uint64_t root, std::string_view stage, std::uint64_t key) {
  return splitmix64(splitmix64(root ^ fnv1a64(stage)) ^ key);
}

// Minimal counter-based PRNG. std::mt19937 would do, but the standard
// distributions are not bit-stable across library implementations, and the
// determinism goldens compare bytes. splitmix64 streams are fully specified.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ull;
    std::uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  // Uniform in [0, n), unbiased via rejection.
  std::uint64_t below(std::uint64_t n) {
    if (n == 0) throw std::invalid_argument("Rng::below(0)");
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  // Uniform in [0, 1) with 53 random bits.
  double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  std::uint64_t state_;
};

// ---------------------------------------------------------------------------
// Deterministic chunked parallelism. Work is split into one contiguous chunk
// per thread; callers must make per-chunk results independent (or merge them
// in chunk order) so output does not depend on scheduling. threads <= 1 runs
// inline.

inline int resolve_threads(int requested) {
  if (requested > 0) return requested;
  unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

inline void parallel_chunks(std::size_t n, int threads,
                            const std::function<void(std::size_t, std::size_t)>& body) {
  threads = resolve_threads(threads);
  if (threads <= 1 || n <= 1) {
    body(0, n);
    return;
  }
  std::size_t nthreads = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
  std::vector<std::thread> pool;
  pool.reserve(nthreads);
  std::size_t base = n / nthreads, rem = n % nthreads, begin = 0;
  for (std::size_t t = 0; t < nthreads; ++t) {
    std::size_t len = base + (t < rem ? 1 : 0);
    pool.emplace_back(body, begin, begin + len);
    begin += len;
  }
  for (auto& th : pool) th.join();
}

// ---------------------------------------------------------------------------
// Formatting helpers. Floats in machine-readable files are printed with 17
// significant digits so a save/load round trip is exact for doubles.

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

inline std::vector<std::string_view> split_view(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    std::size_t pos = line.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

inline bool parse_i64(std::string_view s, std::int64_t& out) {
  if (s.empty()) return false;
  std::int64_t sign = 1;
  std::size_t i = 0;
  if (s[0] == '-') {
    sign = -1;
    i = 1;
    if (s.size() == 1) return false;
  }
  std::int64_t v = 0;
  for (; i < s.size(); ++i) {
    if (s[i] < '0' || s[i] > '9') return false;
    v = v * 10 + (s[i] - '0');
  }
  out = sign * v;
  return true;
}

inline bool parse_f64(std::string_view s, double& out) {
  if (s.empty()) return false;
  std::string tmp(s);
  char* end = nullptr;
  out = std::strtod(tmp.c_str(), &end);
  return end == tmp.c_str() + tmp.size();
}

}  // namespace pi2i
