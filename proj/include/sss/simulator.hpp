#pragma once

// Synthetic side-scan surveys with exact ground truth: procedural seafloor,
// lawnmower and racetrack trajectories, Lambertian ping rendering with
// multiplicative speckle, heading-drift injection and pixel correspondence
// oracles.
//
// Frames: global east-north-up; vehicle at z = 0; yaw measured from east.

#include "sss/geom.hpp"
#include "sss/heightmap.hpp"
#include "sss/kdtree.hpp"
#include "sss/parallel.hpp"
#include "sss/sonar_image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace sss {

struct SeafloorParams {
    double e_min = -100.0, e_max = 350.0;
    double n_min = -100.0, n_max = 300.0;
    double base_height = -18.0;  // floor z at the origin
    double slope_e = 0.0, slope_n = 0.0;
    double undulation_amplitude = 0.5;
    double undulation_wavelength = 150.0;
    bool textured = true;
    int streak_count = 40;
    double streak_width = 0.5;   // m, Gaussian profile sigma
    double streak_depth = 0.6;   // fractional darkening at the streak centre
    std::uint64_t seed = 7;
};

class Seafloor {
public:
    explicit Seafloor(SeafloorParams p = {}) : p_(p)
    {
        Rng rng(stream_seed(p_.seed, 0x534c));
        phase_e_ = rng.uniform() * 2.0 * std::numbers::pi;
        phase_n_ = rng.uniform() * 2.0 * std::numbers::pi;
        for (int i = 0; i < p_.streak_count; ++i) {
            Streak s;
            s.e = p_.e_min + rng.uniform() * (p_.e_max - p_.e_min);
            s.n = p_.n_min + rng.uniform() * (p_.n_max - p_.n_min);
            const double a = rng.uniform() * std::numbers::pi;
            s.de = std::cos(a);
            s.dn = std::sin(a);
            s.half_length = 40.0 + rng.uniform() * 120.0;
            streaks_.push_back(s);
        }
    }

    const SeafloorParams& params() const { return p_; }

    bool contains(double e, double n) const
    {
        return e >= p_.e_min && e <= p_.e_max && n >= p_.n_min && n <= p_.n_max;
    }

    double height(double e, double n) const
    {
        const double k = 2.0 * std::numbers::pi / p_.undulation_wavelength;
        return p_.base_height + p_.slope_e * e + p_.slope_n * n +
               p_.undulation_amplitude * std::sin(k * e + phase_e_) * std::cos(0.8 * k * n + phase_n_);
    }

    /// Reflectivity in (0, 1].
    double texture(double e, double n) const
    {
        if (!p_.textured)
            return 1.0;
        const double v = 0.3 * value_noise(e, n, 8.0, 1) + 0.25 * value_noise(e, n, 4.0, 2) +
                         0.25 * value_noise(e, n, 2.0, 3) + 0.2 * value_noise(e, n, 1.0, 4);
        double t = 0.1 + 0.9 * v;
        const double inv2w2 = 1.0 / (2.0 * p_.streak_width * p_.streak_width);
        for (const Streak& s : streaks_) {
            const double de = e - s.e, dn = n - s.n;
            const double along = de * s.de + dn * s.dn;
            if (std::abs(along) > s.half_length)
                continue;
            const double across = -de * s.dn + dn * s.de;
            const double a2 = across * across;
            if (a2 > 25.0 * p_.streak_width * p_.streak_width)
                continue;
            t *= 1.0 - p_.streak_depth * std::exp(-a2 * inv2w2);
        }
        return t;
    }

private:
    struct Streak {
        double e, n, de, dn, half_length;
    };

    double lattice(std::int64_t i, std::int64_t j, std::uint64_t octave) const
    {
        return unit_double(stream_seed(p_.seed, static_cast<std::uint64_t>(i), static_cast<std::uint64_t>(j), octave));
    }

    double value_noise(double e, double n, double spacing, std::uint64_t octave) const
    {
        const double x = e / spacing, y = n / spacing;
        const double fx = std::floor(x), fy = std::floor(y);
        const auto i = static_cast<std::int64_t>(fx), j = static_cast<std::int64_t>(fy);
        auto smooth = [](double t) { return t * t * (3.0 - 2.0 * t); };
        const double u = smooth(x - fx), v = smooth(y - fy);
        const double a = lattice(i, j, octave), b = lattice(i + 1, j, octave);
        const double c = lattice(i, j + 1, octave), d = lattice(i + 1, j + 1, octave);
        return (1 - v) * ((1 - u) * a + u * b) + v * ((1 - u) * c + u * d);
    }

    SeafloorParams p_;
    double phase_e_ = 0.0, phase_n_ = 0.0;
    std::vector<Streak> streaks_;
};

enum class SurveyPattern { lawnmower, loop };

struct SurveyPlan {
    SurveyPattern pattern = SurveyPattern::lawnmower;
    int line_count = 5;
    double line_length = 200.0;  // m
    double line_spacing = 50.0;  // m
    double speed = 2.0;          // m/s
    double ping_rate = 4.0;      // Hz
    double altitude = 18.0;      // m
    double origin_e = 0.0;
    double origin_n = 0.0;

    double ping_spacing() const { return speed / ping_rate; }

    void validate(const SensorConfig& sensor) const
    {
        if (line_count < 1 || !(line_length > 0) || !(line_spacing > 0) || !(speed > 0) || !(ping_rate > 0) ||
            !(altitude > 0))
            throw std::invalid_argument("invalid survey plan");
        const double swath = horizontal_range(sensor.max_range, altitude);
        if (!(line_spacing < 2.0 * swath))
            throw std::invalid_argument("line spacing leaves no overlap between adjacent lines");
    }
};

/// Ping range of one straight survey line; the unit of one side-scan image.
struct ImageSpan {
    int id = 0;
    std::int64_t first_ping = 0;
    std::int64_t last_ping = 0;  // inclusive
    std::int64_t size() const { return last_ping - first_ping + 1; }
};

struct Trajectory {
    std::vector<Pose3> poses;
    std::vector<double> times;
    std::vector<ImageSpan> lines;
    std::vector<ImageSpan> turns;
};

/// Lawnmower: line i at easting origin + i*spacing, alternating north/south.
/// Loop: racetrack alternating between two tracks. Pings on every line sit on
/// the same northing grid; semicircular turns join consecutive lines.
inline Trajectory generate_trajectory(const SurveyPlan& plan)
{
    Trajectory traj;
    const double step = plan.ping_spacing();
    const int n_line = std::max(2, static_cast<int>(std::lround(plan.line_length / step)));
    auto push = [&](double e, double n, double yaw) {
        traj.poses.push_back(Pose3::from_ypr(yaw, 0.0, 0.0, Vec3(e, n, 0.0)));
        traj.times.push_back(static_cast<double>(traj.poses.size() - 1) / plan.ping_rate);
    };
    for (int i = 0; i < plan.line_count; ++i) {
        const int track = plan.pattern == SurveyPattern::lawnmower ? i : (i % 2);
        const double e = plan.origin_e + track * plan.line_spacing;
        const bool north = i % 2 == 0;
        ImageSpan line;
        line.id = i;
        line.first_ping = static_cast<std::int64_t>(traj.poses.size());
        for (int k = 0; k < n_line; ++k) {
            const int kk = north ? k : n_line - 1 - k;
            push(e, plan.origin_n + kk * step, north ? std::numbers::pi / 2 : -std::numbers::pi / 2);
        }
        line.last_ping = static_cast<std::int64_t>(traj.poses.size()) - 1;
        traj.lines.push_back(line);
        if (i + 1 == plan.line_count)
            break;

        // Semicircle from the end of this line to the start of the next one,
        // bulging in the direction of travel.
        const int next_track = plan.pattern == SurveyPattern::lawnmower ? i + 1 : ((i + 1) % 2);
        const double e_next = plan.origin_e + next_track * plan.line_spacing;
        const Vec3 p = traj.poses.back().translation;
        const double heading = north ? std::numbers::pi / 2 : -std::numbers::pi / 2;
        const double ce = 0.5 * (p.x() + e_next), cn = p.y();
        const double radius = 0.5 * std::abs(e_next - p.x());
        const double a0 = std::atan2(p.y() - cn, p.x() - ce);
        const double s = std::abs(wrap_angle(a0 + std::numbers::pi / 2 - heading)) < 1e-6 ? 1.0 : -1.0;
        const int m = std::max(2, static_cast<int>(std::lround(std::numbers::pi * radius / step)));
        ImageSpan turn;
        turn.id = i;
        turn.first_ping = static_cast<std::int64_t>(traj.poses.size());
        for (int j = 1; j < m; ++j) {
            const double a = a0 + s * std::numbers::pi * j / m;
            push(ce + radius * std::cos(a), cn + radius * std::sin(a), wrap_angle(a + s * std::numbers::pi / 2));
        }
        turn.last_ping = static_cast<std::int64_t>(traj.poses.size()) - 1;
        traj.turns.push_back(turn);
    }
    return traj;
}

/// Seafloor region covering a plan's swaths with a margin.
inline SeafloorParams floor_params_for(const SurveyPlan& plan, const SensorConfig& sensor, SeafloorParams base = {})
{
    const double swath = horizontal_range(sensor.max_range, plan.altitude);
    const double span_e = (plan.pattern == SurveyPattern::lawnmower ? plan.line_count - 1 : 1) * plan.line_spacing;
    const double margin = swath + 0.5 * plan.line_spacing + 20.0;
    base.e_min = plan.origin_e - margin;
    base.e_max = plan.origin_e + span_e + margin;
    base.n_min = plan.origin_n - margin;
    base.n_max = plan.origin_n + plan.line_length + margin;
    base.base_height = -plan.altitude;
    return base;
}

struct RenderParams {
    double speckle_variance = 0.1;  // of the unit-mean multiplicative speckle
    std::uint64_t seed = 1;
};

/// Point on the floor at slant range r on the given side of a sensor pose, or
/// nullopt when the range does not reach the floor.
inline std::optional<Vec3> ensonified_point(const Seafloor& floor, const Pose3& sensor_pose, Side side, double r)
{
    const Vec3 s = sensor_pose.translation;
    const Vec2 d = side_direction(sensor_pose, side);
    double g = 0.0;
    double h = floor.height(s.x(), s.y());
    for (int it = 0; it < 50; ++it) {
        const double dz = s.z() - h;
        if (!(r > dz))
            return std::nullopt;
        const double g_new = std::sqrt(r * r - dz * dz);
        h = floor.height(s.x() + g_new * d.x(), s.y() + g_new * d.y());
        const bool done = std::abs(g_new - g) < 1e-12;
        g = g_new;
        if (done)
            break;
    }
    return Vec3(s.x() + g * d.x(), s.y() + g * d.y(), h);
}

struct Survey {
    std::vector<Ping> pings;  // dr_pose holds the true pose until drift is injected
    std::vector<Pose3> truth;
    std::vector<ImageSpan> images;
    std::vector<ImageSpan> turns;
};

/// Renders every ping: intensity = texture * cos^2(incidence) * speckle, with
/// cos(incidence) = vertical clearance / slant range at the true floor point.
inline Survey render_survey(const Seafloor& floor, const SurveyPlan& plan, const SensorConfig& sensor,
                            const RenderParams& params = {})
{
    sensor.validate();
    plan.validate(sensor);
    const Trajectory traj = generate_trajectory(plan);
    Survey sv;
    sv.truth = traj.poses;
    sv.images = traj.lines;
    sv.turns = traj.turns;
    const int n = sensor.bins_per_side;
    const double dr = sensor.slant_resolution();
    const double sig2 = std::log(1.0 + params.speckle_variance);
    const double sig = std::sqrt(sig2);
    const double mu = -0.5 * sig2;
    sv.pings.resize(traj.poses.size());
    for (std::size_t i = 0; i < traj.poses.size(); ++i) {
        const Vec3 t = traj.poses[i].translation;
        if (!floor.contains(t.x(), t.y()))
            throw std::runtime_error("render_survey: ping " + std::to_string(i) + " leaves the seafloor region");
    }
    parallel_for(0, static_cast<int>(traj.poses.size()), [&](int i) {
        Ping& p = sv.pings[i];
        p.index = i;
        p.time = traj.times[i];
        p.dr_pose = traj.poses[i];
        p.slant_resolution = dr;
        const Pose3 sp = traj.poses[i] * sensor.sensor_offset;
        p.altitude = sp.translation.z() - floor.height(sp.translation.x(), sp.translation.y());
        p.port_bins.assign(n, 0.0);
        p.stbd_bins.assign(n, 0.0);
        for (int side = 0; side < 2; ++side) {
            auto& bins = side == 0 ? p.port_bins : p.stbd_bins;
            const Side sd = side == 0 ? Side::port : Side::starboard;
            for (int k = 0; k < n; ++k) {
                const double r = (k + 0.5) * dr;
                const auto x = ensonified_point(floor, sp, sd, r);
                if (!x)
                    continue;
                if (!floor.contains(x->x(), x->y()))
                    continue;
                const double c = (sp.translation.z() - x->z()) / r;
                double speckle = 1.0;
                if (params.speckle_variance > 0.0) {
                    const std::uint64_t h1 = stream_seed(params.seed, static_cast<std::uint64_t>(i),
                                                         static_cast<std::uint64_t>(side), static_cast<std::uint64_t>(k));
                    const std::uint64_t h2 = splitmix64(h1);
                    double u1 = unit_double(h1);
                    if (u1 <= 0.0)
                        u1 = 0x1.0p-53;
                    const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * unit_double(h2));
                    speckle = std::exp(mu + sig * z);
                }
                bins[k] = floor.texture(x->x(), x->y()) * c * c * speckle;
            }
        }
    });
    return sv;
}

/// Heading-error model for dead reckoning. The heading error advances once
/// every yaw_step_pings pings and is held in between. With
/// yaw_correlation_pings = 0 it is a random walk whose steps are N(0, sigma^2);
/// otherwise a first-order Gauss-Markov process with stationary standard
/// deviation sigma and the given correlation time.
struct DriftModel {
    double yaw_noise_sigma = 0.01;     // rad
    double yaw_correlation_pings = 0.0;
    int yaw_step_pings = 50;
    double velocity_bias = 0.0;        // m/s along the body x axis
    std::uint64_t seed = 1;

    void validate() const
    {
        if (!(yaw_noise_sigma >= 0.0) || !(yaw_correlation_pings >= 0.0) || yaw_step_pings < 1)
            throw std::invalid_argument("invalid drift model");
    }
};

/// Heading error per ping; zero until the first step.
inline std::vector<double> heading_errors(std::size_t count, const DriftModel& model)
{
    std::vector<double> e(count, 0.0);
    if (model.yaw_noise_sigma == 0.0)
        return e;
    Rng rng(stream_seed(model.seed, 0x4452));
    const double tau = model.yaw_correlation_pings / model.yaw_step_pings;
    const double rho = tau > 0.0 ? std::exp(-1.0 / tau) : 1.0;
    const double innov = tau > 0.0 ? model.yaw_noise_sigma * std::sqrt(1.0 - rho * rho) : model.yaw_noise_sigma;
    const auto step = static_cast<std::size_t>(model.yaw_step_pings);
    double cur = 0.0;
    for (std::size_t k = 1; k < count; ++k) {
        if (k % step == 0)
            cur = rho * cur + innov * rng.normal();
        e[k] = cur;
    }
    return e;
}

/// DR poses from the true body increments with the perturbed heading. Each
/// translation increment is rotated by the heading error at its start ping.
inline std::vector<Ping> inject_drift(const std::vector<Ping>& true_pings, const DriftModel& model)
{
    model.validate();
    std::vector<Ping> out = true_pings;
    const std::vector<double> e = heading_errors(true_pings.size(), model);
    Vec3 err = Vec3::Zero();
    for (std::size_t k = 1; k < true_pings.size(); ++k) {
        const Pose3& a = true_pings[k - 1].dr_pose;
        const Pose3& b = true_pings[k].dr_pose;
        const Vec3 step = b.translation - a.translation;
        const Mat3 rz = Eigen::AngleAxisd(e[k - 1], Vec3::UnitZ()).toRotationMatrix();
        err += (rz - Mat3::Identity()) * step;
        if (model.velocity_bias != 0.0) {
            const double dt = true_pings[k].time - true_pings[k - 1].time;
            err += rz * a.rotation.col(0) * (model.velocity_bias * dt);
        }
        Pose3 dr = b;
        dr.translation = b.translation + err;
        if (e[k] != 0.0)
            dr.rotation = Eigen::AngleAxisd(e[k], Vec3::UnitZ()).toRotationMatrix() * b.rotation;
        out[k].dr_pose = dr;
    }
    return out;
}

/// Canonical pixel grid of one image: rows = pings, 2*bins_per_side columns.
struct PixelGrid {
    std::int64_t first_ping = 0;
    int rows = 0;
    int bins_per_side = 0;
    double bin_size = 0.0;  // horizontal metres per bin

    SssImage shape() const
    {
        SssImage s;
        s.intensities = Raster<double>(rows, 2 * bins_per_side);
        s.canonical = true;
        s.bin_size = bin_size;
        s.first_ping = first_ping;
        s.last_ping = first_ping + rows - 1;
        return s;
    }
};

inline PixelGrid pixel_grid_of(const SssImage& canonical)
{
    return {canonical.first_ping, canonical.rows(), canonical.bins_per_side(), canonical.bin_size};
}

/// True floor point of each canonical pixel: the point ensonified at the
/// slant range that the canonical transform assigns to the pixel.
inline Raster<Vec3> true_pixel_points(const Seafloor& floor, const std::vector<Pose3>& truth,
                                      const std::vector<Ping>& pings, const SensorConfig& sensor,
                                      const PixelGrid& grid)
{
    const SssImage s = grid.shape();
    const double nan = std::numeric_limits<double>::quiet_NaN();
    Raster<Vec3> pts(grid.rows, s.cols(), Vec3(nan, nan, nan));
    parallel_for(0, grid.rows, [&](int r) {
        const std::int64_t p = grid.first_ping + r;
        const Pose3 sp = truth[p] * sensor.sensor_offset;
        const double alt = pings[p].altitude;
        for (int c = 0; c < s.cols(); ++c) {
            const double rr = slant_range(s.range_of(c), alt);
            if (rr > sensor.max_range)
                continue;
            if (auto x = ensonified_point(floor, sp, s.side_of(c), rr))
                pts(r, c) = *x;
        }
    });
    return pts;
}

struct OracleEntry {
    std::int64_t ping_a = 0;
    int col_a = 0;
    std::int64_t ping_b = 0;
    int col_b = 0;
    bool operator==(const OracleEntry&) const = default;
};

/// Ground-truth pixel correspondences from A to B: for each A pixel on the
/// stride grid, the B pixel whose true floor point is nearest, kept when the
/// two points are within `tolerance` metres.
inline std::vector<OracleEntry> oracle_correspondences(const Raster<Vec3>& pts_a, const PixelGrid& grid_a,
                                                       const Raster<Vec3>& pts_b, const PixelGrid& grid_b,
                                                       int stride, double tolerance)
{
    std::vector<KdPoint> kp;
    for (int r = 0; r < pts_b.rows(); ++r)
        for (int c = 0; c < pts_b.cols(); ++c)
            if (pts_b(r, c).allFinite())
                kp.push_back({pts_b(r, c).x(), pts_b(r, c).y(), static_cast<std::int64_t>(r) * pts_b.cols() + c});
    std::vector<OracleEntry> out;
    if (kp.empty())
        return out;
    const KdTree2 tree(std::move(kp));
    for (int r = 0; r < pts_a.rows(); r += stride)
        for (int c = 0; c < pts_a.cols(); c += stride) {
            const Vec3& x = pts_a(r, c);
            if (!x.allFinite())
                continue;
            const KdResult hit = tree.nearest(x.x(), x.y());
            if (hit.distance > tolerance)
                continue;
            const int br = static_cast<int>(hit.point.payload / pts_b.cols());
            const int bc = static_cast<int>(hit.point.payload % pts_b.cols());
            out.push_back({grid_a.first_ping + r, c, grid_b.first_ping + br, bc});
        }
    return out;
}

/// True surface sampled at cell centres.
inline Heightmap surface_heightmap(const Seafloor& floor, double cell = 1.0)
{
    const auto& p = floor.params();
    const int cols = static_cast<int>(std::floor((p.e_max - p.e_min) / cell));
    const int rows = static_cast<int>(std::floor((p.n_max - p.n_min) / cell));
    Heightmap hm(p.e_min, p.n_min, cell, rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c)
            hm.grid(r, c) = floor.height(p.e_min + (c + 0.5) * cell, p.n_min + (r + 0.5) * cell);
    return hm;
}

}  // namespace sss
