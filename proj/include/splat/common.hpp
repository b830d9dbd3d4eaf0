#pragma once

#include <Eigen/Core>
#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace splat {

template <class S> using Vec2 = Eigen::Matrix<S, 2, 1>;
template <class S> using Vec3 = Eigen::Matrix<S, 3, 1>;
template <class S> using Vec4 = Eigen::Matrix<S, 4, 1>;
template <class S> using Vec6 = Eigen::Matrix<S, 6, 1>;
template <class S> using VecX = Eigen::Matrix<S, Eigen::Dynamic, 1>;
template <class S> using Mat2 = Eigen::Matrix<S, 2, 2>;
template <class S> using Mat3 = Eigen::Matrix<S, 3, 3>;
template <class S> using Mat23 = Eigen::Matrix<S, 2, 3>;
template <class S> using MatX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>;
template <class S, int R> using MatRX = Eigen::Matrix<S, R, Eigen::Dynamic>;

template <class S> constexpr S pi() { return static_cast<S>(3.14159265358979323846L); }
template <class S> constexpr S two_pi() { return static_cast<S>(2) * pi<S>(); }

/// Wrap an angle into [0, 2*pi).
template <class S> S wrap_two_pi(S a) {
  a = std::fmod(a, two_pi<S>());
  if (a < S(0)) a += two_pi<S>();
  return a;
}

/// Wrap an angle into (-pi, pi].
template <class S> S wrap_pi(S a) {
  a = std::fmod(a, two_pi<S>());
  if (a > pi<S>()) a -= two_pi<S>();
  if (a <= -pi<S>()) a += two_pi<S>();
  return a;
}

template <class S> Mat3<S> skew(const Vec3<S>& v) {
  Mat3<S> m;
  m << S(0), -v.z(), v.y(), v.z(), S(0), -v.x(), -v.y(), v.x(), S(0);
  return m;
}

template <class S> S sigmoid(S x) {
  if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
  S e = std::exp(x);
  return e / (S(1) + e);
}

template <class S> S logit(S p) { return std::log(p / (S(1) - p)); }

struct ThreadCount {
  int n;
  explicit ThreadCount(int requested = 0)
      : n(requested > 0 ? requested
                        : std::max(1u, std::thread::hardware_concurrency())) {}
};

/// Static chunked parallel map: fn(worker, begin, end) over [0, count).
/// Chunk boundaries depend only on (count, workers), so per-worker
/// accumulation buffers reduced in worker order are deterministic.
inline void parallel_chunks(std::int64_t count, int workers,
                            const std::function<void(int, std::int64_t, std::int64_t)>& fn) {
  workers = std::max(1, workers);
  if (count <= 0) return;
  if (workers == 1 || count < 2 * workers) {
    fn(0, 0, count);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers);
  const std::int64_t chunk = (count + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    const std::int64_t b = std::min<std::int64_t>(count, w * chunk);
    const std::int64_t e = std::min<std::int64_t>(count, b + chunk);
    if (b >= e) break;
    pool.emplace_back([&, w, b, e] { fn(w, b, e); });
  }
  for (auto& t : pool) t.join();
}

using Rng = std::mt19937_64;

template <class S> S uniform(Rng& rng, S lo, S hi) {
  return std::uniform_real_distribution<S>(lo, hi)(rng);
}

template <class S> S normal(Rng& rng, S mean = S(0), S sd = S(1)) {
  return std::normal_distribution<S>(mean, sd)(rng);
}

/// Channel-major image buffer: row `c` of `data` is channel c, flattened
/// row-major over pixels (index = y*w + x).
template <class S> struct ChannelImage {
  int h = 0, w = 0;
  MatX<S> data;  // channels x (h*w)

  ChannelImage() = default;
  ChannelImage(int channels, int height, int width)
      : h(height), w(width), data(MatX<S>::Zero(channels, std::int64_t(height) * width)) {}

  int channels() const { return static_cast<int>(data.rows()); }
  S& at(int c, int y, int x) { return data(c, std::int64_t(y) * w + x); }
  S at(int c, int y, int x) const { return data(c, std::int64_t(y) * w + x); }
  void set_zero() { data.setZero(); }
};

}  // namespace splat
