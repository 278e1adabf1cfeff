#pragma once

// Evaluation metrics: end-point error and recall of dense correspondences,
// landmark consistency error by ray casting onto a reference surface,
// trajectory RMSE and datum-free heightmap MAE.

#include "sss/heightmap.hpp"
#include "sss/reconstruct.hpp"
#include "sss/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sss {

struct EpeResult {
    double x = 0.0;  // mean |column error|, cross-track pixels
    double y = 0.0;  // mean |row error|, along-track pixels
    double recall = 0.0;
    std::size_t count = 0;
};

/// Compares each estimate with the oracle entry for the same A pixel.
/// Estimates without an oracle entry are ignored; nullopt when none remain.
inline std::optional<EpeResult> epe(std::span<const OracleEntry> est, std::span<const OracleEntry> oracle,
                                    double tolerance = 2.0)
{
    std::map<std::pair<std::int64_t, int>, const OracleEntry*> index;
    for (const auto& o : oracle)
        index.emplace(std::make_pair(o.ping_a, o.col_a), &o);
    EpeResult r;
    std::size_t hits = 0;
    for (const auto& e : est) {
        const auto it = index.find({e.ping_a, e.col_a});
        if (it == index.end())
            continue;
        const double dx = std::abs(static_cast<double>(e.col_b - it->second->col_b));
        const double dy = std::abs(static_cast<double>(e.ping_b - it->second->ping_b));
        r.x += dx;
        r.y += dy;
        if (dx <= tolerance && dy <= tolerance)
            ++hits;
        ++r.count;
    }
    if (r.count == 0)
        return std::nullopt;
    r.x /= static_cast<double>(r.count);
    r.y /= static_cast<double>(r.count);
    r.recall = static_cast<double>(hits) / static_cast<double>(r.count);
    return r;
}

inline double recall(std::span<const OracleEntry> est, std::span<const OracleEntry> oracle, double tolerance = 2.0)
{
    const auto r = epe(est, oracle, tolerance);
    return r ? r->recall : 0.0;
}

/// Floor point seen at slant range `range` on `side`, found by bisection on
/// the depression angle within the sensor's zero-along-track plane.
inline std::optional<Vec3> cast_ray(const Pose3& ping_pose, const Pose3& sensor_offset, Side side, double range,
                                    const Heightmap& surface)
{
    const Pose3 s = ping_pose * sensor_offset;
    const double sy = side == Side::port ? 1.0 : -1.0;
    auto point = [&](double th) { return Vec3(s * Vec3(0.0, sy * range * std::cos(th), -range * std::sin(th))); };
    auto f = [&](double th) -> std::optional<double> {
        const Vec3 p = point(th);
        const auto h = surface.sample(p.x(), p.y());
        if (!h)
            return std::nullopt;
        return p.z() - *h;
    };
    double lo = 0.0, hi = std::numbers::pi / 2;
    const auto flo = f(lo), fhi = f(hi);
    if (!flo || !fhi || !(*flo > 0.0) || !(*fhi < 0.0))
        return std::nullopt;
    for (int i = 0; i < 60; ++i) {
        const double mid = 0.5 * (lo + hi);
        const auto fm = f(mid);
        if (!fm)
            return std::nullopt;
        (*fm > 0.0 ? lo : hi) = mid;
    }
    return point(0.5 * (lo + hi));
}

struct LceResult {
    double mean = 0.0;
    std::size_t count = 0;
    std::size_t skipped = 0;
};

/// Mean distance between the surface intersections of the two rays of each
/// correspondence.
inline LceResult lce(std::span<const PixelMatch> matches, std::span<const Pose3> ping_poses,
                     const Pose3& sensor_offset, const Heightmap& surface)
{
    std::vector<double> d(matches.size(), std::numeric_limits<double>::quiet_NaN());
    parallel_for(0, static_cast<int>(matches.size()), [&](int k) {
        const PixelMatch& m = matches[k];
        const auto pa = cast_ray(ping_poses[m.a.ping], sensor_offset, m.a.side, m.a.range, surface);
        const auto pb = cast_ray(ping_poses[m.b.ping], sensor_offset, m.b.side, m.b.range, surface);
        if (pa && pb)
            d[k] = (*pa - *pb).norm();
    });
    LceResult r;
    for (double v : d) {
        if (std::isnan(v)) {
            ++r.skipped;
            continue;
        }
        r.mean += v;
        ++r.count;
    }
    if (r.count)
        r.mean /= static_cast<double>(r.count);
    return r;
}

/// RMSE of translation errors; the trajectories share one frame, no alignment.
inline double ate_rmse(std::span<const Pose3> est, std::span<const Pose3> ref)
{
    if (est.size() != ref.size())
        throw std::invalid_argument("ate_rmse: trajectory length mismatch");
    if (est.empty())
        return 0.0;
    double s = 0.0;
    for (std::size_t i = 0; i < est.size(); ++i)
        s += (est[i].translation - ref[i].translation).squaredNorm();
    return std::sqrt(s / static_cast<double>(est.size()));
}

inline double median(std::vector<double> v)
{
    if (v.empty())
        throw std::invalid_argument("median of an empty set");
    const std::size_t m = v.size() / 2;
    std::nth_element(v.begin(), v.begin() + m, v.end());
    const double hi = v[m];
    if (v.size() % 2)
        return hi;
    return 0.5 * (hi + *std::max_element(v.begin(), v.begin() + m));
}

/// Mean |a - b - median(a - b)| over cells occupied in both maps.
inline double heightmap_mae(const Heightmap& a, const Heightmap& b)
{
    if (!a.same_geometry(b))
        throw std::invalid_argument("heightmap_mae: grids differ");
    std::vector<double> d;
    for (int r = 0; r < a.rows(); ++r)
        for (int c = 0; c < a.cols(); ++c)
            if (a.occupied(r, c) && b.occupied(r, c))
                d.push_back(a.grid(r, c) - b.grid(r, c));
    if (d.empty())
        throw std::invalid_argument("heightmap_mae: no co-occupied cells");
    const double off = median(d);
    double s = 0.0;
    for (double v : d)
        s += std::abs(v - off);
    return s / static_cast<double>(d.size());
}

/// Grids both clouds on one grid covering the reference and compares them.
inline std::optional<double> point_cloud_mae(std::span<const Vec3> est, std::span<const Vec3> ref, double cell)
{
    if (est.empty() || ref.empty())
        return std::nullopt;
    Heightmap ha = grid_for(ref, cell), hb = ha;
    grid_into(ha, est);
    grid_into(hb, ref);
    try {
        return heightmap_mae(ha, hb);
    } catch (const std::invalid_argument&) {
        return std::nullopt;
    }
}

struct PairEval {
    int pair_id = 0;
    int image_a = 0, image_b = 0;
    std::size_t correspondences = 0;
    double epe_x = 0.0, epe_y = 0.0;
    double recall = 0.0;
    double init_recall = 0.0;
    double lce_dr = 0.0;
    double lce_est = 0.0;
    int edges = 0;
};

struct LineEval {
    int line = 0;
    double mae_dr = 0.0;
    double mae_est = 0.0;
};

struct EvalReport {
    double ate_dr = 0.0;
    double ate_est = 0.0;
    std::vector<PairEval> pairs;
    std::vector<LineEval> lines;
    std::map<std::string, double> extra;  // run statistics

    void write(std::ostream& os) const
    {
        os << std::setprecision(10);
        os << "ate_dr = " << ate_dr << '\n' << "ate_est = " << ate_est << '\n';
        for (const auto& p : pairs) {
            const std::string k = "pair." + std::to_string(p.image_a) + "_" + std::to_string(p.image_b) + ".";
            os << k << "epe_x = " << p.epe_x << '\n' << k << "epe_y = " << p.epe_y << '\n';
            os << k << "recall = " << p.recall << '\n' << k << "init_recall = " << p.init_recall << '\n';
            os << k << "lce_dr = " << p.lce_dr << '\n' << k << "lce_est = " << p.lce_est << '\n';
        }
        for (const auto& l : lines) {
            const std::string k = "line." + std::to_string(l.line) + ".";
            os << k << "mae_dr = " << l.mae_dr << '\n' << k << "mae_est = " << l.mae_est << '\n';
        }
        for (const auto& [k, v] : extra)
            os << k << " = " << v << '\n';
    }

    void write_pairs_csv(std::ostream& os) const
    {
        os << std::setprecision(10);
        os << "pair_id,image_a,image_b,correspondences,epe_x,epe_y,recall,init_recall,lce_dr,lce_est,edges\n";
        for (const auto& p : pairs)
            os << p.pair_id << ',' << p.image_a << ',' << p.image_b << ',' << p.correspondences << ',' << p.epe_x
               << ',' << p.epe_y << ',' << p.recall << ',' << p.init_recall << ',' << p.lce_dr << ',' << p.lce_est
               << ',' << p.edges << '\n';
    }
};

}  // namespace sss
