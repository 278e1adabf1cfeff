#pragma once

// Side-scan ping container, canonical transformation (intensity and
// slant-range correction), geo-referencing, validity masking and subframe
// division.
//
// Image layout: one row per ping, 2 * bins_per_side columns. Columns
// [0, n) hold the port side with the range axis reversed (far port at column
// 0), columns [n, 2n) hold starboard with range increasing to the right.

#include "sss/geom.hpp"
#include "sss/raster.hpp"

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <limits>
#include <numbers>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sss {

struct Ping {
    std::int64_t index = 0;
    double time = 0.0;
    Pose3 dr_pose;
    double altitude = 0.0;
    std::vector<double> port_bins;
    std::vector<double> stbd_bins;
    double slant_resolution = 0.0;

    void validate(int bins_per_side) const
    {
        if (!(altitude > 0.0))
            throw std::invalid_argument("ping " + std::to_string(index) + ": altitude must be positive");
        if (static_cast<int>(port_bins.size()) != bins_per_side ||
            static_cast<int>(stbd_bins.size()) != bins_per_side)
            throw std::invalid_argument("ping " + std::to_string(index) + ": wrong bin count");
        for (const auto* side : {&port_bins, &stbd_bins})
            for (double v : *side)
                if (!std::isfinite(v) || v < 0.0)
                    throw std::invalid_argument("ping " + std::to_string(index) + ": bad intensity");
    }
};

enum class Side { port, starboard };

struct SssImage {
    Raster<double> intensities;
    Mask mask;
    std::int64_t first_ping = 0;
    std::int64_t last_ping = 0;  // inclusive
    bool canonical = false;
    /// Meters per bin along the range axis: slant range for raw images,
    /// horizontal range for canonical ones.
    double bin_size = 0.0;

    int rows() const { return intensities.rows(); }
    int cols() const { return intensities.cols(); }
    int bins_per_side() const { return intensities.cols() / 2; }

    Side side_of(int col) const { return col < bins_per_side() ? Side::port : Side::starboard; }
    int bin_of(int col) const
    {
        const int n = bins_per_side();
        return col < n ? n - 1 - col : col - n;
    }
    int column_of(Side s, int bin) const
    {
        const int n = bins_per_side();
        return s == Side::port ? n - 1 - bin : n + bin;
    }
    /// Range (slant or horizontal) of the bin centre of a column.
    double range_of(int col) const
    {
        const int k = bin_of(col);
        return canonical ? k * bin_size : (k + 0.5) * bin_size;
    }
};

struct GeoPt {
    double e = 0.0;
    double n = 0.0;
    bool operator==(const GeoPt&) const = default;
};

struct GeoImage {
    Raster<GeoPt> coords;
};

struct Subframe {
    int image_id = 0;
    int begin_row = 0;  // inclusive
    int end_row = 0;    // exclusive
    int centre_row = 0;
    std::int64_t centre_ping = 0;
    Pose3 centre_pose;
};

struct CanonicalParams {
    double saturation = 8.0;         // clip level after normalization
    int canonical_bins = 0;          // 0: keep the raw bin count
    double canonical_resolution = 0; // m per bin; overrides canonical_bins when > 0
};

inline double horizontal_range(double slant, double altitude)
{
    const double d = slant * slant - altitude * altitude;
    return d > 0.0 ? std::sqrt(d) : 0.0;
}

inline double slant_range(double horizontal, double altitude)
{
    return std::sqrt(horizontal * horizontal + altitude * altitude);
}

/// Flat-floor Lambertian correction factor 1 / cos^2(incidence); zero when
/// the slant range does not reach the floor.
inline double incidence_correction_factor(double altitude, double slant)
{
    if (!(slant >= altitude) || !(altitude > 0.0))
        return 0.0;
    const double c = altitude / slant;
    return 1.0 / (c * c);
}

/// Builds the raw (slant-range) image of consecutive pings.
inline SssImage make_raw_image(std::span<const Ping> pings)
{
    if (pings.empty())
        throw std::invalid_argument("make_raw_image: no pings");
    const int n = static_cast<int>(pings.front().port_bins.size());
    SssImage img;
    img.intensities = Raster<double>(static_cast<int>(pings.size()), 2 * n);
    img.mask = Mask(static_cast<int>(pings.size()), 2 * n, 1);
    img.first_ping = pings.front().index;
    img.last_ping = pings.back().index;
    img.bin_size = pings.front().slant_resolution;
    for (int r = 0; r < img.rows(); ++r) {
        const Ping& p = pings[r];
        if (static_cast<int>(p.port_bins.size()) != n || static_cast<int>(p.stbd_bins.size()) != n)
            throw std::invalid_argument("make_raw_image: inconsistent bin counts");
        for (int k = 0; k < n; ++k) {
            img.intensities(r, img.column_of(Side::port, k)) = p.port_bins[k];
            img.intensities(r, img.column_of(Side::starboard, k)) = p.stbd_bins[k];
        }
    }
    return img;
}

/// Divides every intensity by cos^2 of the flat-floor incidence angle, then
/// normalizes each column by its mean and the whole image to unit mean.
/// Bins that do not reach the floor are masked.
inline SssImage correct_intensity(const SssImage& img, std::span<const Ping> pings,
                                  const CanonicalParams& params = {})
{
    if (img.canonical)
        return img;
    if (static_cast<int>(pings.size()) != img.rows())
        throw std::invalid_argument("correct_intensity: ping count mismatch");
    SssImage out = img;
    for (int r = 0; r < img.rows(); ++r) {
        const double alt = pings[r].altitude;
        for (int c = 0; c < img.cols(); ++c) {
            const double f = incidence_correction_factor(alt, img.range_of(c));
            if (f <= 0.0 || !img.mask(r, c) || img.range_of(c) <= alt) {
                out.intensities(r, c) = 0.0;
                out.mask(r, c) = 0;
            } else {
                out.intensities(r, c) = img.intensities(r, c) * f;
            }
        }
    }
    for (int c = 0; c < img.cols(); ++c) {
        double sum = 0.0;
        int count = 0;
        for (int r = 0; r < img.rows(); ++r)
            if (out.mask(r, c)) {
                sum += out.intensities(r, c);
                ++count;
            }
        if (count == 0 || !(sum > 0.0))
            continue;
        const double inv = count / sum;
        for (int r = 0; r < img.rows(); ++r)
            if (out.mask(r, c))
                out.intensities(r, c) *= inv;
    }
    double sum = 0.0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < out.intensities.size(); ++i)
        if (out.mask.data()[i]) {
            sum += out.intensities.data()[i];
            ++count;
        }
    const double scale = (count > 0 && sum > 0.0) ? count / sum : 1.0;
    for (std::size_t i = 0; i < out.intensities.size(); ++i) {
        double& v = out.intensities.data()[i];
        if (out.mask.data()[i])
            v = std::min(v * scale, params.saturation);
    }
    return out;
}

/// Horizontal extent of the canonical grid for a raw image.
inline double canonical_span(const SssImage& raw, std::span<const Ping> pings)
{
    double min_alt = std::numeric_limits<double>::infinity();
    for (const Ping& p : pings)
        min_alt = std::min(min_alt, p.altitude);
    const double max_range = raw.bins_per_side() * raw.bin_size;
    return horizontal_range(max_range, min_alt);
}

/// Resamples each row from slant range to a uniform horizontal-range grid
/// using the flat-floor relation g = sqrt(r^2 - altitude^2).
inline SssImage correct_slant_range(const SssImage& img, std::span<const Ping> pings,
                                    const CanonicalParams& params = {})
{
    if (img.canonical)
        return img;
    if (static_cast<int>(pings.size()) != img.rows())
        throw std::invalid_argument("correct_slant_range: ping count mismatch");
    const int n_in = img.bins_per_side();
    const double span = canonical_span(img, pings);
    int n_out;
    double dg;
    if (params.canonical_resolution > 0.0) {
        dg = params.canonical_resolution;
        n_out = static_cast<int>(std::floor(span / dg)) + 1;
    } else {
        n_out = params.canonical_bins > 0 ? params.canonical_bins : n_in;
        dg = n_out > 1 ? span / (n_out - 1) : span;
    }

    SssImage out;
    out.canonical = true;
    out.bin_size = dg;
    out.first_ping = img.first_ping;
    out.last_ping = img.last_ping;
    out.intensities = Raster<double>(img.rows(), 2 * n_out, 0.0);
    out.mask = Mask(img.rows(), 2 * n_out, 0);
    for (int r = 0; r < img.rows(); ++r) {
        const double alt = pings[r].altitude;
        for (Side s : {Side::port, Side::starboard}) {
            for (int k = 0; k < n_out; ++k) {
                const double rr = slant_range(k * dg, alt);
                const double u = rr / img.bin_size - 0.5;
                const int k0 = static_cast<int>(std::floor(u));
                const double w = u - k0;
                if (k0 < 0 || k0 >= n_in)
                    continue;
                const int c0 = img.column_of(s, k0);
                double v;
                bool ok;
                if (k0 + 1 >= n_in || w == 0.0) {
                    if (w > 0.0 && k0 + 1 >= n_in)
                        continue;
                    v = img.intensities(r, c0);
                    ok = img.mask(r, c0);
                } else {
                    const int c1 = img.column_of(s, k0 + 1);
                    v = (1.0 - w) * img.intensities(r, c0) + w * img.intensities(r, c1);
                    ok = img.mask(r, c0) && img.mask(r, c1);
                }
                if (ok) {
                    const int col = out.column_of(s, k);
                    out.intensities(r, col) = v;
                    out.mask(r, col) = 1;
                }
            }
        }
    }
    return out;
}

inline SssImage canonicalize(const SssImage& img, std::span<const Ping> pings,
                             const CanonicalParams& params = {})
{
    if (img.canonical)
        return img;
    return correct_slant_range(correct_intensity(img, pings, params), pings, params);
}

/// Horizontal unit vector pointing to the given side of a sensor pose.
inline Vec2 side_direction(const Pose3& sensor_pose, Side side)
{
    const Vec3 y = sensor_pose.rotation.col(1) * (side == Side::port ? 1.0 : -1.0);
    Vec2 d(y.x(), y.y());
    const double n = d.norm();
    return n > 0.0 ? Vec2(d / n) : Vec2(0.0, 0.0);
}

/// Geo-references every pixel of a canonical image using one body pose per row.
inline GeoImage georeference(const SssImage& img, std::span<const Pose3> poses, const Pose3& sensor_offset)
{
    if (!img.canonical)
        throw std::invalid_argument("georeference: image must be canonical");
    if (static_cast<int>(poses.size()) != img.rows())
        throw std::invalid_argument("georeference: pose count mismatch");
    GeoImage geo;
    geo.coords = Raster<GeoPt>(img.rows(), img.cols());
    for (int r = 0; r < img.rows(); ++r) {
        const Pose3 s = poses[r] * sensor_offset;
        const Vec2 port = side_direction(s, Side::port);
        const Vec2 stbd = side_direction(s, Side::starboard);
        for (int c = 0; c < img.cols(); ++c) {
            const double g = img.range_of(c);
            const Vec2& d = img.side_of(c) == Side::port ? port : stbd;
            geo.coords(r, c) = {s.translation.x() + g * d.x(), s.translation.y() + g * d.y()};
        }
    }
    return geo;
}

inline GeoImage georeference(const SssImage& img, std::span<const Ping> pings, const Pose3& sensor_offset)
{
    std::vector<Pose3> poses;
    poses.reserve(pings.size());
    for (const Ping& p : pings)
        poses.push_back(p.dr_pose);
    return georeference(img, std::span<const Pose3>(poses), sensor_offset);
}

inline double wrap_angle(double a)
{
    a = std::fmod(a + std::numbers::pi, 2.0 * std::numbers::pi);
    if (a < 0.0)
        a += 2.0 * std::numbers::pi;
    return a - std::numbers::pi;
}

/// Per-ping yaw rate (rad/s) from central differences of the DR heading.
inline std::vector<double> yaw_rates(std::span<const Ping> pings)
{
    const int n = static_cast<int>(pings.size());
    std::vector<double> rates(n, 0.0);
    if (n < 2)
        return rates;
    for (int i = 0; i < n; ++i) {
        const int a = std::max(0, i - 1);
        const int b = std::min(n - 1, i + 1);
        const double dt = pings[b].time - pings[a].time;
        if (dt > 0.0)
            rates[i] = wrap_angle(pings[b].dr_pose.yaw() - pings[a].dr_pose.yaw()) / dt;
    }
    return rates;
}

struct MaskParams {
    int nadir_margin_px = 10;
    double turn_rate_thresh = 0.05;  // rad/s
    double saturation = 8.0;
};

/// Usable-pixel mask of a canonical image: excludes the nadir strip, turning
/// rows, saturated pixels and zero-filled pixels.
inline Mask build_mask(const SssImage& img, std::span<const Ping> pings, const MaskParams& params = {})
{
    if (static_cast<int>(pings.size()) != img.rows())
        throw std::invalid_argument("build_mask: ping count mismatch");
    Mask m(img.rows(), img.cols(), 1);
    const int n = img.bins_per_side();
    const std::vector<double> rates = yaw_rates(pings);
    for (int r = 0; r < img.rows(); ++r) {
        const bool turning = std::abs(rates[r]) > params.turn_rate_thresh;
        for (int c = 0; c < img.cols(); ++c) {
            const double v = img.intensities(r, c);
            const bool nadir = c >= n - params.nadir_margin_px && c < n + params.nadir_margin_px;
            const bool filled = (!img.mask.empty() && !img.mask(r, c)) || v == 0.0;
            if (turning || nadir || filled || v >= params.saturation)
                m(r, c) = 0;
        }
    }
    return m;
}

/// Splits an image of `rows` pings into consecutive subframes of
/// `subframe_size` rows; a short remainder is merged into the last one.
inline std::vector<Subframe> split_subframes(int image_id, int rows, std::int64_t first_ping,
                                             std::span<const Pose3> poses, int subframe_size = 200)
{
    if (subframe_size <= 0)
        throw std::invalid_argument("split_subframes: subframe_size must be positive");
    if (rows <= 0)
        return {};
    if (static_cast<int>(poses.size()) != rows)
        throw std::invalid_argument("split_subframes: pose count mismatch");
    std::vector<Subframe> out;
    if (rows < subframe_size)
        std::clog << "warning: image " << image_id << " has " << rows << " pings, fewer than subframe size "
                  << subframe_size << "; using a single subframe\n";
    const int count = std::max(1, rows / subframe_size);
    for (int i = 0; i < count; ++i) {
        Subframe sf;
        sf.image_id = image_id;
        sf.begin_row = i * subframe_size;
        sf.end_row = (i + 1 == count) ? rows : (i + 1) * subframe_size;
        sf.centre_row = sf.begin_row + (sf.end_row - sf.begin_row) / 2;
        sf.centre_ping = first_ping + sf.centre_row;
        sf.centre_pose = poses[sf.centre_row];
        out.push_back(sf);
    }
    return out;
}

inline std::vector<Subframe> split_subframes(int image_id, std::span<const Ping> pings, int subframe_size = 200)
{
    std::vector<Pose3> poses;
    for (const Ping& p : pings)
        poses.push_back(p.dr_pose);
    return split_subframes(image_id, static_cast<int>(pings.size()), pings.empty() ? 0 : pings.front().index,
                           std::span<const Pose3>(poses), subframe_size);
}

// ---------------------------------------------------------------------------
// Text formats

inline void write_pose_fields(std::ostream& os, const Pose3& p)
{
    const auto q = p.quaternion();
    os << p.translation.x() << ',' << p.translation.y() << ',' << p.translation.z() << ',' << q.w() << ','
       << q.x() << ',' << q.y() << ',' << q.z();
}

inline std::vector<std::string> split_csv(const std::string& line)
{
    std::vector<std::string> out;
    std::string tok;
    std::istringstream ss(line);
    while (std::getline(ss, tok, ','))
        out.push_back(tok);
    return out;
}

inline Pose3 parse_pose_fields(const std::vector<std::string>& f, std::size_t at)
{
    if (f.size() < at + 7)
        throw std::runtime_error("pose record too short");
    const Vec3 t(std::stod(f[at]), std::stod(f[at + 1]), std::stod(f[at + 2]));
    return Pose3::from_quaternion(std::stod(f[at + 3]), std::stod(f[at + 4]), std::stod(f[at + 5]),
                                  std::stod(f[at + 6]), t);
}

/// `index,t_sec,x,y,z,qw,qx,qy,qz,altitude,port_b0..bN,stbd_b0..bN`
inline void write_pings_csv(std::ostream& os, std::span<const Ping> pings)
{
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (const Ping& p : pings) {
        os << p.index << ',' << p.time << ',';
        write_pose_fields(os, p.dr_pose);
        os << ',' << p.altitude;
        for (double v : p.port_bins)
            os << ',' << v;
        for (double v : p.stbd_bins)
            os << ',' << v;
        os << '\n';
    }
}

inline std::vector<Ping> read_pings_csv(std::istream& is, double slant_resolution)
{
    std::vector<Ping> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#')
            continue;
        const auto f = split_csv(line);
        if (f.size() < 10 || (f.size() - 10) % 2 != 0)
            throw std::runtime_error("ping record has wrong field count");
        Ping p;
        p.index = std::stoll(f[0]);
        p.time = std::stod(f[1]);
        p.dr_pose = parse_pose_fields(f, 2);
        p.altitude = std::stod(f[9]);
        const std::size_t n = (f.size() - 10) / 2;
        p.port_bins.resize(n);
        p.stbd_bins.resize(n);
        for (std::size_t k = 0; k < n; ++k) {
            p.port_bins[k] = std::stod(f[10 + k]);
            p.stbd_bins[k] = std::stod(f[10 + n + k]);
        }
        p.slant_resolution = slant_resolution;
        out.push_back(std::move(p));
    }
    return out;
}

struct TrajectoryRecord {
    std::int64_t ping_index = 0;
    double time = 0.0;
    Pose3 pose;
};

/// `ping_index, t_sec, x, y, z, qw, qx, qy, qz`
inline void write_trajectory_csv(std::ostream& os, std::span<const TrajectoryRecord> traj)
{
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (const auto& r : traj) {
        os << r.ping_index << ',' << r.time << ',';
        write_pose_fields(os, r.pose);
        os << '\n';
    }
}

inline std::vector<TrajectoryRecord> read_trajectory_csv(std::istream& is)
{
    std::vector<TrajectoryRecord> out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#')
            continue;
        const auto f = split_csv(line);
        if (f.size() != 9)
            throw std::runtime_error("trajectory record must have 9 fields");
        out.push_back({std::stoll(f[0]), std::stod(f[1]), parse_pose_fields(f, 2)});
    }
    return out;
}

}  // namespace sss
