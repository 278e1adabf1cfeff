#pragma once

// Quasi-dense reconstruction: landmarks triangulated from matched pixels with
// the ping poses held fixed, filtered by their residual costs, then gridded.

#include "sss/heightmap.hpp"
#include "sss/subframe_pose.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

namespace sss {

/// One matched pixel, reduced to what the measurement model needs.
struct PixelObservation {
    std::int64_t ping = 0;
    Side side = Side::starboard;
    double ground_range = 0.0;  // flat-floor horizontal range of the canonical bin
    double altitude = 0.0;
    double range = 0.0;         // slant range
};

struct PixelMatch {
    PixelObservation a;
    PixelObservation b;
};

struct MatchSet {
    int pair_id = 0;
    int image_a = 0;
    int image_b = 0;
    std::vector<PixelMatch> matches;
};

inline PixelObservation observe_pixel(const SssImage& canonical, std::span<const Ping> pings, int row, int col)
{
    PixelObservation o;
    o.ping = canonical.first_ping + row;
    o.side = canonical.side_of(col);
    o.ground_range = canonical.range_of(col);
    o.altitude = pings[row].altitude;
    o.range = slant_range(o.ground_range, o.altitude);
    return o;
}

/// Measurement relative to a reference pose; `ping_pose` is the ping's pose in
/// the same estimate as `reference`.
inline SssMeasurement to_measurement(const PixelObservation& o, const Pose3& reference, const Pose3& ping_pose,
                                     int subframe, int landmark)
{
    SssMeasurement m;
    m.range = o.range;
    m.ping_offset = reference.inverse() * ping_pose;
    m.subframe = subframe;
    m.landmark = landmark;
    m.ground_range = o.ground_range;
    m.altitude = o.altitude;
    m.side = o.side;
    return m;
}

struct QuasiDenseLandmark {
    Vec3 position = Vec3::Zero();
    int pair_id = 0;
    int image_a = 0, image_b = 0;
    std::int64_t ping_a = 0, ping_b = 0;
    double range_cost = 0.0;
    double plane_cost = 0.0;
};

struct QuasiDenseMap {
    std::vector<QuasiDenseLandmark> landmarks;
    std::size_t non_convergent = 0;
    std::size_t filtered = 0;
};

struct ReconstructParams {
    double range_thresh = 0.1;
    double plane_thresh = 0.3;
};

/// Triangulates every match with the poses fixed. `ping_poses` is indexed by
/// ping index.
inline QuasiDenseMap triangulate_landmarks(std::span<const MatchSet> sets, std::span<const Pose3> ping_poses,
                                           const SensorConfig& sensor, const ReconstructParams& params = {})
{
    QuasiDenseMap map;
    for (const MatchSet& s : sets) {
        std::vector<Triangulation> tri(s.matches.size());
        parallel_for(0, static_cast<int>(s.matches.size()), [&](int k) {
            const PixelMatch& m = s.matches[k];
            const Pose3& pa = ping_poses[m.a.ping];
            const Pose3& pb = ping_poses[m.b.ping];
            const PairObservation o{to_measurement(m.a, pa, pa, 0, k), to_measurement(m.b, pb, pb, 1, k)};
            tri[k] = triangulate(o, pa, pb, sensor);
        });
        for (std::size_t k = 0; k < tri.size(); ++k) {
            const Triangulation& t = tri[k];
            if (!t.ok) {
                ++map.non_convergent;
                continue;
            }
            if (t.range_cost > params.range_thresh || t.plane_cost > params.plane_thresh) {
                ++map.filtered;
                continue;
            }
            const PixelMatch& m = s.matches[k];
            map.landmarks.push_back(
                {t.position, s.pair_id, s.image_a, s.image_b, m.a.ping, m.b.ping, t.range_cost, t.plane_cost});
        }
    }
    return map;
}

/// Grid covering the points' bounding box, snapped to multiples of `cell`.
inline Heightmap grid_for(std::span<const Vec3> pts, double cell)
{
    if (pts.empty())
        throw std::invalid_argument("grid_for: no points");
    double e0 = std::numeric_limits<double>::infinity(), n0 = e0, e1 = -e0, n1 = -e0;
    for (const Vec3& p : pts) {
        e0 = std::min(e0, p.x());
        e1 = std::max(e1, p.x());
        n0 = std::min(n0, p.y());
        n1 = std::max(n1, p.y());
    }
    const double oe = std::floor(e0 / cell) * cell, on = std::floor(n0 / cell) * cell;
    const int cols = static_cast<int>(std::floor((e1 - oe) / cell)) + 1;
    const int rows = static_cast<int>(std::floor((n1 - on) / cell)) + 1;
    return Heightmap(oe, on, cell, rows, cols);
}

/// Per-cell mean height of the points falling inside `hm`; other cells stay empty.
inline void grid_into(Heightmap& hm, std::span<const Vec3> pts)
{
    Raster<double> sum(hm.rows(), hm.cols(), 0.0);
    Raster<int> count(hm.rows(), hm.cols(), 0);
    for (const Vec3& p : pts) {
        int r, c;
        if (!hm.locate(p.x(), p.y(), r, c))
            continue;
        sum(r, c) += p.z();
        ++count(r, c);
    }
    for (int r = 0; r < hm.rows(); ++r)
        for (int c = 0; c < hm.cols(); ++c)
            hm.grid(r, c) = count(r, c) ? sum(r, c) / count(r, c) : Heightmap::empty_value();
}

inline Heightmap grid_heightmap(std::span<const Vec3> pts, double cell)
{
    Heightmap hm = grid_for(pts, cell);
    grid_into(hm, pts);
    return hm;
}

inline std::vector<Vec3> positions(const QuasiDenseMap& map)
{
    std::vector<Vec3> out;
    out.reserve(map.landmarks.size());
    for (const auto& l : map.landmarks)
        out.push_back(l.position);
    return out;
}

/// Landmarks observed from `line`, each carried through the sensor frame of
/// its observing ping: x' = S_ref(p) * S_est(p)^-1 * x, with S = pose * offset.
/// The result depends only on where the landmark lies relative to the ping,
/// not on the ping's estimated pose.
inline std::vector<Vec3> sensor_frame_align(const QuasiDenseMap& map, int line, std::span<const Pose3> est_poses,
                                            std::span<const Pose3> ref_poses, const Pose3& sensor_offset)
{
    std::vector<Vec3> out;
    for (const auto& l : map.landmarks) {
        for (int s = 0; s < 2; ++s) {
            if ((s == 0 ? l.image_a : l.image_b) != line)
                continue;
            const std::int64_t p = s == 0 ? l.ping_a : l.ping_b;
            const Vec3 local = global_to_sensor(l.position, est_poses[p], Pose3(), sensor_offset);
            out.push_back(sensor_to_global(local, ref_poses[p], Pose3(), sensor_offset));
        }
    }
    return out;
}

/// `x y z` per line.
inline void write_point_cloud(std::ostream& os, std::span<const Vec3> pts)
{
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (const Vec3& p : pts)
        os << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
}

inline std::vector<Vec3> read_point_cloud(std::istream& is)
{
    std::vector<Vec3> out;
    double x, y, z;
    while (is >> x >> y >> z)
        out.emplace_back(x, y, z);
    if (!is.eof())
        throw std::runtime_error("point cloud: malformed record");
    return out;
}

}  // namespace sss
