#pragma once

// Static-partition parallel loop and counter-based random streams. Work is
// split into fixed index ranges, so results never depend on the thread count.

#include <algorithm>
#include <cstdint>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace sss {

inline unsigned& thread_count_setting()
{
    static unsigned n = std::max(1u, std::thread::hardware_concurrency());
    return n;
}

/// Sets the worker count used by parallel_for (0 restores the hardware default).
inline void set_thread_count(unsigned n)
{
    thread_count_setting() = n == 0 ? std::max(1u, std::thread::hardware_concurrency()) : n;
}

inline unsigned thread_count() { return thread_count_setting(); }

/// Calls fn(i) for i in [begin, end). Each i is executed exactly once; fn
/// must only write state owned by index i.
template <typename Fn>
void parallel_for(int begin, int end, Fn&& fn)
{
    const int n = end - begin;
    if (n <= 0)
        return;
    const int workers = static_cast<int>(std::min<unsigned>(thread_count(), static_cast<unsigned>(n)));
    if (workers <= 1) {
        for (int i = begin; i < end; ++i)
            fn(i);
        return;
    }
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        const int lo = begin + static_cast<int>(static_cast<long long>(n) * w / workers);
        const int hi = begin + static_cast<int>(static_cast<long long>(n) * (w + 1) / workers);
        pool.emplace_back([&, lo, hi] {
            try {
                for (int i = lo; i < hi; ++i)
                    fn(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(error_mutex);
                if (!error)
                    error = std::current_exception();
            }
        });
    }
    for (auto& t : pool)
        t.join();
    if (error)
        std::rethrow_exception(error);
}

inline std::uint64_t splitmix64(std::uint64_t x)
{
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Deterministic hash of a seed and up to three stream coordinates.
inline std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0)
{
    std::uint64_t h = splitmix64(seed);
    h = splitmix64(h ^ a);
    h = splitmix64(h ^ (b + 0x632be59bd9b4e019ULL));
    h = splitmix64(h ^ (c + 0x8cb92ba72f3d8dd7ULL));
    return h;
}

/// Uniform double in [0, 1) from a 64-bit hash.
inline double unit_double(std::uint64_t h)
{
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

/// Small, fast, copyable generator (splitmix64 sequence). Distribution code is
/// written out explicitly so sequences are identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next()
    {
        state_ += 0x9e3779b97f4a7c15ULL;
        std::uint64_t z = state_;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    double uniform() { return unit_double(next()); }

    /// Uniform integer in [lo, hi].
    int uniform_int(int lo, int hi)
    {
        const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
        return lo + static_cast<int>(next() % span);
    }

    double normal()
    {
        double u1 = uniform();
        while (u1 <= 0.0)
            u1 = uniform();
        const double u2 = uniform();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

private:
    std::uint64_t state_;
};

}  // namespace sss
