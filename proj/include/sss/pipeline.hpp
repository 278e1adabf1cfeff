#pragma once

// End-to-end orchestration: canonical images, overlap detection, dense
// matching, subframe pairing, loop-closure estimation, pose-graph updates
// repeated n_iter times, then quasi-dense reconstruction and evaluation.

#include "sss/config.hpp"
#include "sss/dense_match.hpp"
#include "sss/heightmap.hpp"
#include "sss/metrics.hpp"
#include "sss/pose_graph.hpp"
#include "sss/reconstruct.hpp"
#include "sss/simulator.hpp"
#include "sss/sonar_image.hpp"
#include "sss/subframe_pose.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sss {

// ---------------------------------------------------------------------------
// Dataset

struct Dataset {
    SensorConfig sensor;
    std::vector<Ping> pings;  // dr_pose is the dead-reckoning estimate
    std::vector<ImageSpan> images;
    std::vector<Pose3> truth;         // empty when unknown
    std::optional<Heightmap> surface; // reference surface, when known

    bool has_truth() const { return truth.size() == pings.size() && !truth.empty(); }

    std::vector<Pose3> dr_poses() const
    {
        std::vector<Pose3> out;
        out.reserve(pings.size());
        for (const Ping& p : pings)
            out.push_back(p.dr_pose);
        return out;
    }

    std::span<const Ping> image_pings(const ImageSpan& s) const
    {
        return std::span<const Ping>(pings).subspan(static_cast<std::size_t>(s.first_ping),
                                                    static_cast<std::size_t>(s.size()));
    }

    void validate() const
    {
        sensor.validate();
        for (std::size_t i = 0; i < pings.size(); ++i) {
            if (pings[i].index != static_cast<std::int64_t>(i))
                throw std::invalid_argument("ping indices must be 0..N-1 in order");
            pings[i].validate(sensor.bins_per_side);
        }
        for (const auto& s : images)
            if (s.first_ping < 0 || s.last_ping < s.first_ping || s.last_ping >= static_cast<std::int64_t>(pings.size()))
                throw std::invalid_argument("image " + std::to_string(s.id) + " has an invalid ping range");
    }
};

inline void write_sensor_config(Config& cfg, const SensorConfig& s)
{
    cfg.set("sensor.max_range", s.max_range);
    cfg.set("sensor.bins_per_side", s.bins_per_side);
    cfg.set("sensor.beam_width_alpha", s.beam_width_alpha);
    cfg.set("sensor.range_sigma", s.range_sigma);
    const Vec3& t = s.sensor_offset.translation;
    const auto q = s.sensor_offset.quaternion();
    std::ostringstream ss;
    ss.precision(17);
    ss << t.x() << ' ' << t.y() << ' ' << t.z() << ' ' << q.w() << ' ' << q.x() << ' ' << q.y() << ' ' << q.z();
    cfg.set("sensor.offset", ss.str());
}

inline SensorConfig read_sensor_config(const Config& cfg)
{
    SensorConfig s;
    cfg.get("sensor.max_range", s.max_range);
    cfg.get("sensor.bins_per_side", s.bins_per_side);
    cfg.get("sensor.beam_width_alpha", s.beam_width_alpha);
    cfg.get("sensor.range_sigma", s.range_sigma);
    std::string off;
    cfg.get("sensor.offset", off);
    if (!off.empty()) {
        std::istringstream ss(off);
        double v[7];
        for (double& x : v)
            if (!(ss >> x))
                throw std::runtime_error("sensor.offset needs 7 numbers: tx ty tz qw qx qy qz");
        s.sensor_offset = Pose3::from_quaternion(v[3], v[4], v[5], v[6], Vec3(v[0], v[1], v[2]));
    }
    s.validate();
    return s;
}

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& p)
{
    std::ofstream os(p);
    if (!os)
        throw std::runtime_error("cannot write " + p.string());
    return os;
}

inline std::ifstream open_in(const std::filesystem::path& p)
{
    std::ifstream is(p);
    if (!is)
        throw std::runtime_error("cannot read " + p.string());
    return is;
}

}  // namespace detail

/// Directory layout: dataset.cfg, pings.csv, images.csv and, when known,
/// truth.csv and surface.txt.
inline void save_dataset(const std::filesystem::path& dir, const Dataset& ds)
{
    std::filesystem::create_directories(dir);
    Config cfg;
    write_sensor_config(cfg, ds.sensor);
    cfg.save((dir / "dataset.cfg").string());
    {
        auto os = detail::open_out(dir / "pings.csv");
        write_pings_csv(os, ds.pings);
    }
    {
        auto os = detail::open_out(dir / "images.csv");
        os << "image_id,first_ping,last_ping\n";
        for (const auto& s : ds.images)
            os << s.id << ',' << s.first_ping << ',' << s.last_ping << '\n';
    }
    if (ds.has_truth()) {
        std::vector<TrajectoryRecord> tr;
        for (std::size_t i = 0; i < ds.truth.size(); ++i)
            tr.push_back({static_cast<std::int64_t>(i), ds.pings[i].time, ds.truth[i]});
        auto os = detail::open_out(dir / "truth.csv");
        write_trajectory_csv(os, tr);
    }
    if (ds.surface) {
        auto os = detail::open_out(dir / "surface.txt");
        write_heightmap(os, *ds.surface);
    }
}

inline Dataset load_dataset(const std::filesystem::path& dir)
{
    Dataset ds;
    ds.sensor = read_sensor_config(Config::load((dir / "dataset.cfg").string()));
    {
        auto is = detail::open_in(dir / "pings.csv");
        ds.pings = read_pings_csv(is, ds.sensor.slant_resolution());
    }
    {
        auto is = detail::open_in(dir / "images.csv");
        std::string line;
        std::getline(is, line);
        while (std::getline(is, line)) {
            if (line.empty())
                continue;
            const auto f = split_csv(line);
            if (f.size() != 3)
                throw std::runtime_error("images.csv: expected image_id,first_ping,last_ping");
            ds.images.push_back({std::stoi(f[0]), std::stoll(f[1]), std::stoll(f[2])});
        }
    }
    if (std::filesystem::exists(dir / "truth.csv")) {
        auto is = detail::open_in(dir / "truth.csv");
        for (const auto& r : read_trajectory_csv(is))
            ds.truth.push_back(r.pose);
    }
    if (std::filesystem::exists(dir / "surface.txt")) {
        auto is = detail::open_in(dir / "surface.txt");
        ds.surface = read_heightmap(is);
    }
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Simulation

struct SimulationConfig {
    SurveyPlan plan;
    SensorConfig sensor;
    SeafloorParams floor;
    RenderParams render;
    DriftModel drift;
    double surface_cell = 1.0;
    std::uint64_t seed = 1;

    /// Flat, speckle-free, drift-free survey: the measurement model is exact.
    static SimulationConfig zero_noise()
    {
        SimulationConfig c;
        c.floor.undulation_amplitude = 0.0;
        c.render.speckle_variance = 0.0;
        c.drift.yaw_noise_sigma = 0.0;
        return c;
    }

    void load(const Config& cfg)
    {
        std::string pattern = plan.pattern == SurveyPattern::loop ? "loop" : "lawnmower";
        cfg.get("sim.pattern", pattern);
        if (pattern != "loop" && pattern != "lawnmower")
            throw std::runtime_error("sim.pattern must be lawnmower or loop");
        plan.pattern = pattern == "loop" ? SurveyPattern::loop : SurveyPattern::lawnmower;
        cfg.get("sim.lines", plan.line_count);
        cfg.get("sim.line_length", plan.line_length);
        cfg.get("sim.line_spacing", plan.line_spacing);
        cfg.get("sim.speed", plan.speed);
        cfg.get("sim.ping_rate", plan.ping_rate);
        cfg.get("sim.altitude", plan.altitude);
        cfg.get("sim.undulation_amplitude", floor.undulation_amplitude);
        cfg.get("sim.undulation_wavelength", floor.undulation_wavelength);
        cfg.get("sim.slope_e", floor.slope_e);
        cfg.get("sim.slope_n", floor.slope_n);
        cfg.get("sim.streaks", floor.streak_count);
        cfg.get("sim.speckle_variance", render.speckle_variance);
        cfg.get("sim.surface_cell", surface_cell);
        cfg.get("drift.yaw_sigma", drift.yaw_noise_sigma);
        cfg.get("drift.correlation_pings", drift.yaw_correlation_pings);
        cfg.get("drift.step_pings", drift.yaw_step_pings);
        cfg.get("drift.velocity_bias", drift.velocity_bias);
        cfg.get("sensor.max_range", sensor.max_range);
        cfg.get("sensor.bins_per_side", sensor.bins_per_side);
        cfg.get("sensor.beam_width_alpha", sensor.beam_width_alpha);
        cfg.get("sensor.range_sigma", sensor.range_sigma);
        cfg.get("sim.seed", seed);
    }
};

/// Renders a survey, injects dead-reckoning drift and attaches the truth.
inline Dataset simulate_dataset(const SimulationConfig& cfg)
{
    SeafloorParams fp = floor_params_for(cfg.plan, cfg.sensor, cfg.floor);
    fp.seed = stream_seed(cfg.seed, 0x464c);
    const Seafloor floor(fp);
    RenderParams rp = cfg.render;
    rp.seed = stream_seed(cfg.seed, 0x524e);
    Survey sv = render_survey(floor, cfg.plan, cfg.sensor, rp);
    DriftModel dm = cfg.drift;
    dm.seed = stream_seed(cfg.seed, 0x4452);
    Dataset ds;
    ds.sensor = cfg.sensor;
    ds.pings = inject_drift(sv.pings, dm);
    ds.images = sv.images;
    ds.truth = sv.truth;
    ds.surface = surface_heightmap(floor, cfg.surface_cell);
    return ds;
}

// ---------------------------------------------------------------------------
// Overlap

using Polygon = std::vector<Vec2>;

inline double cross2(const Vec2& o, const Vec2& a, const Vec2& b)
{
    return (a.x() - o.x()) * (b.y() - o.y()) - (a.y() - o.y()) * (b.x() - o.x());
}

/// Counter-clockwise convex hull (monotone chain), collinear points dropped.
inline Polygon convex_hull(std::vector<Vec2> pts)
{
    std::sort(pts.begin(), pts.end(), [](const Vec2& a, const Vec2& b) {
        return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
    });
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    if (pts.size() < 3)
        return pts;
    Polygon h(2 * pts.size());
    std::size_t k = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
        while (k >= 2 && cross2(h[k - 2], h[k - 1], pts[i]) <= 0)
            --k;
        h[k++] = pts[i];
    }
    for (std::size_t i = pts.size() - 1, t = k + 1; i-- > 0;) {
        while (k >= t && cross2(h[k - 2], h[k - 1], pts[i]) <= 0)
            --k;
        h[k++] = pts[i];
    }
    h.resize(k - 1);
    return h;
}

inline double polygon_area(const Polygon& p)
{
    double a = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const Vec2& u = p[i];
        const Vec2& v = p[(i + 1) % p.size()];
        a += u.x() * v.y() - v.x() * u.y();
    }
    return 0.5 * std::abs(a);
}

/// Sutherland-Hodgman clipping of a polygon by a convex counter-clockwise one.
inline Polygon clip_convex(Polygon subject, const Polygon& clip)
{
    for (std::size_t i = 0; i < clip.size() && !subject.empty(); ++i) {
        const Vec2& a = clip[i];
        const Vec2& b = clip[(i + 1) % clip.size()];
        Polygon out;
        for (std::size_t j = 0; j < subject.size(); ++j) {
            const Vec2& p = subject[j];
            const Vec2& q = subject[(j + 1) % subject.size()];
            const double sp = cross2(a, b, p), sq = cross2(a, b, q);
            if (sp >= 0)
                out.push_back(p);
            if ((sp >= 0) != (sq >= 0)) {
                const double t = sp / (sp - sq);
                out.push_back(p + t * (q - p));
            }
        }
        subject = std::move(out);
    }
    return subject;
}

/// Convex footprint of a geo-referenced image from the outermost columns.
inline Polygon footprint(const GeoImage& geo, int row_step = 10)
{
    std::vector<Vec2> pts;
    const int rows = geo.coords.rows(), cols = geo.coords.cols();
    if (rows == 0 || cols == 0)
        return {};
    for (int r = 0; r < rows; r += row_step)
        for (int c : {0, cols - 1})
            pts.emplace_back(geo.coords(r, c).e, geo.coords(r, c).n);
    for (int c : {0, cols - 1})
        pts.emplace_back(geo.coords(rows - 1, c).e, geo.coords(rows - 1, c).n);
    return convex_hull(std::move(pts));
}

struct Overlap {
    Polygon region;
    double area = 0.0;
};

inline std::optional<Overlap> overlap_check(const GeoImage& geo_a, const GeoImage& geo_b, double min_area = 100.0)
{
    const Polygon a = footprint(geo_a), b = footprint(geo_b);
    if (a.size() < 3 || b.size() < 3)
        return std::nullopt;
    Overlap o;
    o.region = clip_convex(a, b);
    o.area = o.region.size() >= 3 ? polygon_area(o.region) : 0.0;
    if (o.area < min_area)
        return std::nullopt;
    return o;
}

// ---------------------------------------------------------------------------
// Subframe pairing

struct SubframePair {
    int sub_a = 0;
    int sub_b = 0;
    std::vector<std::size_t> correspondences;  // indices into the pair's matches
};

inline int subframe_of_row(std::span<const Subframe> subs, int row)
{
    for (std::size_t i = 0; i < subs.size(); ++i)
        if (row >= subs[i].begin_row && row < subs[i].end_row)
            return static_cast<int>(i);
    return -1;
}

/// For each A subframe, the B subframe containing the centroid of its
/// correspondences' B rows; the correspondences whose B row also lies in that
/// subframe form the pair. Every correspondence lands in at most one pair.
inline std::vector<SubframePair> pair_subframes(std::span<const Subframe> subs_a, std::span<const Subframe> subs_b,
                                                std::span<const Correspondence> corr, std::size_t min_count = 1)
{
    std::vector<SubframePair> out;
    for (std::size_t sa = 0; sa < subs_a.size(); ++sa) {
        std::vector<std::size_t> members;
        double sum = 0.0;
        for (std::size_t k = 0; k < corr.size(); ++k)
            if (subframe_of_row(subs_a, corr[k].a_row) == static_cast<int>(sa)) {
                members.push_back(k);
                sum += corr[k].b_row;
            }
        if (members.empty())
            continue;
        const int centroid = static_cast<int>(std::lround(sum / static_cast<double>(members.size())));
        const int sb = subframe_of_row(subs_b, centroid);
        if (sb < 0)
            continue;
        SubframePair p{static_cast<int>(sa), sb, {}};
        for (std::size_t k : members)
            if (subframe_of_row(subs_b, corr[k].b_row) == sb)
                p.correspondences.push_back(k);
        if (p.correspondences.size() >= std::max<std::size_t>(min_count, 1))
            out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Configuration

struct PipelineConfig {
    CanonicalParams canonical{8.0, 0, 0.5};
    MaskParams mask;
    MatchParams match;
    RansacParams ransac;
    ReconstructParams reconstruct;
    LmOptions lm;
    GraphOptions graph;
    int subframe_size = 200;
    int n_iter = 2;
    double min_overlap_area = 100.0;
    int corr_stride = 2;
    double corr_max_distance = 0.6;
    int min_subframe_correspondences = 30;
    double odo_c_rot = 1e-4;    // rad^2 per metre
    double odo_c_trans = 1e-2;  // m^2 per metre
    double odo_c_tilt = 1e-8;   // roll and pitch, rad^2 per metre
    double anchor_sigma = 1e-9;
    double gauge_sigma = 1e-6;
    double heightmap_cell = 1.0;
    int eval_stride = 4;
    std::uint64_t seed = 1;

    void validate() const
    {
        if (n_iter < 1)
            throw std::invalid_argument("pipeline.n_iter must be >= 1");
        if (subframe_size < 1 || corr_stride < 1 || eval_stride < 1 || !(min_overlap_area >= 0) ||
            !(odo_c_rot > 0) || !(odo_c_trans > 0) || !(odo_c_tilt > 0) || !(heightmap_cell > 0))
            throw std::invalid_argument("invalid pipeline configuration");
        match.validate();
        ransac.validate();
    }

    void load(const Config& cfg)
    {
        cfg.get("canonical.saturation", canonical.saturation);
        cfg.get("canonical.bins", canonical.canonical_bins);
        cfg.get("canonical.resolution", canonical.canonical_resolution);
        cfg.get("mask.nadir_margin_px", mask.nadir_margin_px);
        cfg.get("mask.turn_rate_thresh", mask.turn_rate_thresh);
        mask.saturation = canonical.saturation;
        cfg.get("match.patch_size", match.patch_size);
        cfg.get("match.max_iters", match.max_iters);
        cfg.get("match.max_offset", match.max_offset);
        cfg.get("match.max_geo_gap", match.max_geo_gap);
        cfg.get("match.stride", corr_stride);
        cfg.get("match.max_distance", corr_max_distance);
        cfg.get("ransac.max_iters", ransac.max_iters);
        cfg.get("ransac.subset_size", ransac.subset_size);
        cfg.get("ransac.range_thresh", ransac.range_thresh);
        cfg.get("ransac.plane_thresh", ransac.plane_thresh);
        cfg.get("ransac.keep_fraction", ransac.keep_fraction);
        cfg.get("ransac.holdout_cap", ransac.holdout_cap);
        cfg.get("ransac.refine", ransac.refine);
        cfg.get("ransac.covariance_odometry_weight", ransac.covariance_odometry_weight);
        cfg.get("reconstruct.range_thresh", reconstruct.range_thresh);
        cfg.get("reconstruct.plane_thresh", reconstruct.plane_thresh);
        cfg.get("pipeline.subframe_size", subframe_size);
        cfg.get("pipeline.n_iter", n_iter);
        cfg.get("pipeline.min_overlap_area", min_overlap_area);
        cfg.get("pipeline.min_subframe_correspondences", min_subframe_correspondences);
        cfg.get("pipeline.odo_c_rot", odo_c_rot);
        cfg.get("pipeline.odo_c_trans", odo_c_trans);
        cfg.get("pipeline.odo_c_tilt", odo_c_tilt);
        cfg.get("pipeline.heightmap_cell", heightmap_cell);
        cfg.get("pipeline.eval_stride", eval_stride);
        cfg.get("pipeline.seed", seed);
        validate();
    }

    Mat6 odometry_cov(double distance) const
    {
        Vec6 v;
        const double d = std::max(distance, 1.0);
        v << odo_c_tilt * d, odo_c_tilt * d, odo_c_rot * d, Vec3::Constant(odo_c_trans * d);
        return v.asDiagonal();
    }
};

// ---------------------------------------------------------------------------
// Run

struct ImageData {
    ImageSpan span;
    SssImage canonical;
    Mask mask;
    std::vector<Subframe> subframes;  // centre poses are dead reckoning
    double mean_yaw = 0.0;
};

inline ImageData prepare_image(const Dataset& ds, const ImageSpan& s, const PipelineConfig& cfg)
{
    const auto pings = ds.image_pings(s);
    ImageData im;
    im.span = s;
    SssImage raw = make_raw_image(pings);
    raw.bin_size = ds.sensor.slant_resolution();
    im.canonical = canonicalize(raw, pings, cfg.canonical);
    MaskParams mp = cfg.mask;
    mp.saturation = cfg.canonical.saturation;
    im.mask = build_mask(im.canonical, pings, mp);
    im.subframes = split_subframes(s.id, pings, cfg.subframe_size);
    double sx = 0.0, sy = 0.0;
    for (const Ping& p : pings) {
        sx += std::cos(p.dr_pose.yaw());
        sy += std::sin(p.dr_pose.yaw());
    }
    im.mean_yaw = std::atan2(sy, sx);
    return im;
}

struct PairRecord {
    int iteration = 0;
    int image_a = 0, image_b = 0;
    bool flipped = false;
    double overlap_area = 0.0;
    std::vector<Correspondence> matches;  // image-local rows/cols, B unflipped
    std::vector<Correspondence> initial;  // geometric initialization, stride 1 subsampled by eval
    std::vector<SubframePair> subframe_pairs;
};

struct EdgeRecord {
    int iteration = 0;
    int image_a = 0, image_b = 0;
    LoopClosureEdge edge;
    bool accepted = false;
    std::string reason;
    std::size_t correspondences = 0;
    std::vector<RansacUpdate> history;
};

struct PipelineStatus {
    bool no_edges = false;
    int overlapping_pairs = 0;
    int subframe_pairs = 0;
    int edges_accepted = 0;
    int edges_rejected = 0;
    std::map<std::string, int> rejections;
    // Consistency of the final graph: squared Mahalanobis norms of the loop
    // residuals. Large values flag edges the optimizer could not reconcile.
    double loop_chi2_mean = 0.0;
    double loop_chi2_max = 0.0;
    int loops_inconsistent = 0;  // above the 99% quantile of chi^2 with 6 dof
    std::vector<std::string> messages;
};

struct PipelineResult {
    std::vector<Pose3> poses;  // per ping
    std::vector<Pose3> dr;
    std::vector<ImageData> images;
    std::vector<PairRecord> pairs;  // all iterations
    std::vector<EdgeRecord> edges;  // all iterations
    PoseGraph graph;
    std::vector<GraphReport> graph_reports;
    QuasiDenseMap map;     // from the optimized poses
    QuasiDenseMap dr_map;  // same matches, dead-reckoning poses
    PipelineStatus status;

    std::vector<const EdgeRecord*> final_edges(bool accepted_only = true) const
    {
        std::vector<const EdgeRecord*> out;
        if (edges.empty())
            return out;
        int last = 0;
        for (const auto& e : edges)
            last = std::max(last, e.iteration);
        for (const auto& e : edges)
            if (e.iteration == last && (e.accepted || !accepted_only))
                out.push_back(&e);
        return out;
    }
};

namespace detail {

inline GeoImage geo_for(const ImageData& im, std::span<const Pose3> poses, const Pose3& sensor_offset)
{
    return georeference(im.canonical,
                        poses.subspan(static_cast<std::size_t>(im.span.first_ping),
                                      static_cast<std::size_t>(im.span.size())),
                        sensor_offset);
}

/// Node of a ping: the subframe containing it, else the nearest centre.
inline std::size_t node_of_ping(std::int64_t p, std::span<const ImageData> images,
                                std::span<const std::int64_t> node_ids)
{
    for (const ImageData& im : images)
        if (p >= im.span.first_ping && p <= im.span.last_ping) {
            const int sf = subframe_of_row(im.subframes, static_cast<int>(p - im.span.first_ping));
            const std::int64_t id = im.subframes[sf].centre_ping;
            return static_cast<std::size_t>(std::lower_bound(node_ids.begin(), node_ids.end(), id) - node_ids.begin());
        }
    std::size_t best = 0;
    for (std::size_t i = 1; i < node_ids.size(); ++i)
        if (std::abs(node_ids[i] - p) < std::abs(node_ids[best] - p))
            best = i;
    return best;
}

}  // namespace detail

inline std::vector<PixelMatch> to_pixel_matches(const Dataset& ds, const ImageData& a, const ImageData& b,
                                                std::span<const Correspondence> corr)
{
    const auto pa = ds.image_pings(a.span), pb = ds.image_pings(b.span);
    std::vector<PixelMatch> out;
    out.reserve(corr.size());
    for (const auto& c : corr)
        out.push_back({observe_pixel(a.canonical, pa, c.a_row, c.a_col), observe_pixel(b.canonical, pb, c.b_row, c.b_col)});
    return out;
}

/// Dense matching of A against B under the given poses. B is rotated by 180
/// degrees first when the two images were recorded on opposite headings; the
/// returned correspondences are in B's original pixel coordinates.
inline PairRecord match_pair(const ImageData& a, const ImageData& b, std::span<const Pose3> poses,
                             const SensorConfig& sensor, const PipelineConfig& cfg, std::uint64_t seed,
                             double overlap_area = 0.0)
{
    PairRecord rec;
    rec.image_a = a.span.id;
    rec.image_b = b.span.id;
    rec.overlap_area = overlap_area;
    const GeoImage ga = detail::geo_for(a, poses, sensor.sensor_offset);
    GeoImage gb = detail::geo_for(b, poses, sensor.sensor_offset);
    SssImage ib = b.canonical;
    Mask mb = b.mask;
    rec.flipped = std::abs(wrap_angle(a.mean_yaw - b.mean_yaw)) > std::numbers::pi / 2;
    if (rec.flipped) {
        ib.intensities = flip180(ib.intensities);
        mb = flip180(mb);
        gb.coords = flip180(gb.coords);
    }
    MatchParams mp = cfg.match;
    mp.seed = seed;
    rec.initial = initial_correspondences(initialize(ga, gb, a.mask, mb, mp), cfg.corr_stride);
    const Nnf nnf = match(a.canonical, ib, ga, gb, a.mask, mb, mp);
    rec.matches = extract_correspondences(nnf, cfg.corr_stride, cfg.corr_max_distance);
    if (rec.flipped) {
        const int R = b.canonical.rows(), C = b.canonical.cols();
        for (auto* v : {&rec.matches, &rec.initial})
            for (auto& c : *v) {
                c.b_row = R - 1 - c.b_row;
                c.b_col = C - 1 - c.b_col;
            }
    }
    return rec;
}

/// Per-ping poses from the node poses: each ping keeps its dead-reckoning
/// offset from the centre of its node.
inline std::vector<Pose3> interpolate_poses(std::span<const Pose3> dr, std::span<const ImageData> images,
                                            const PoseGraph& graph)
{
    std::vector<std::int64_t> ids;
    for (const auto& n : graph.nodes())
        ids.push_back(n.id);
    std::vector<Pose3> out(dr.size());
    for (std::size_t p = 0; p < dr.size(); ++p) {
        const std::size_t n = detail::node_of_ping(static_cast<std::int64_t>(p), images, ids);
        const auto& node = graph.nodes()[n];
        out[p] = node.pose * (dr[static_cast<std::size_t>(node.id)].inverse() * dr[p]);
    }
    return out;
}

inline PipelineResult run(const Dataset& ds, const PipelineConfig& cfg, std::ostream* log = nullptr)
{
    cfg.validate();
    ds.validate();
    PipelineResult res;
    res.dr = ds.dr_poses();
    res.poses = res.dr;
    for (const auto& s : ds.images)
        res.images.push_back(prepare_image(ds, s, cfg));

    // Dead-reckoning drift grows with the distance travelled, not with the
    // chord between two poses.
    std::vector<double> path(res.dr.size(), 0.0);
    for (std::size_t p = 1; p < res.dr.size(); ++p)
        path[p] = path[p - 1] + (res.dr[p].translation - res.dr[p - 1].translation).norm();
    auto travelled = [&](std::int64_t a, std::int64_t b) {
        return std::abs(path[static_cast<std::size_t>(b)] - path[static_cast<std::size_t>(a)]);
    };

    // Graph nodes: subframe centres in ping order.
    std::vector<std::int64_t> node_ids;
    for (const auto& im : res.images)
        for (const auto& sf : im.subframes)
            node_ids.push_back(sf.centre_ping);
    std::sort(node_ids.begin(), node_ids.end());
    if (node_ids.empty()) {
        res.status.no_edges = true;
        res.status.messages.push_back("dataset has no images");
        return res;
    }

    std::vector<MatchSet> final_sets;
    for (int iter = 1; iter <= cfg.n_iter; ++iter) {
        const std::vector<Pose3> cur = res.poses;
        std::vector<GeoImage> geos;
        for (const auto& im : res.images)
            geos.push_back(detail::geo_for(im, cur, ds.sensor.sensor_offset));

        std::vector<EdgeRecord> iter_edges;
        final_sets.clear();
        int pair_index = 0;
        for (std::size_t ia = 0; ia < res.images.size(); ++ia)
            for (std::size_t ib = ia + 1; ib < res.images.size(); ++ib) {
                const auto ov = overlap_check(geos[ia], geos[ib], cfg.min_overlap_area);
                if (!ov)
                    continue;
                const ImageData& A = res.images[ia];
                const ImageData& B = res.images[ib];
                if (iter == 1)
                    ++res.status.overlapping_pairs;
                PairRecord rec = match_pair(A, B, cur, ds.sensor, cfg,
                                            stream_seed(cfg.seed, 0x4d41, static_cast<std::uint64_t>(iter),
                                                        static_cast<std::uint64_t>(pair_index)),
                                            ov->area);
                rec.iteration = iter;
                rec.subframe_pairs = pair_subframes(A.subframes, B.subframes, rec.matches,
                                                    static_cast<std::size_t>(cfg.min_subframe_correspondences));
                const std::vector<PixelMatch> pm = to_pixel_matches(ds, A, B, rec.matches);
                final_sets.push_back({pair_index, A.span.id, B.span.id, pm});

                for (std::size_t s = 0; s < rec.subframe_pairs.size(); ++s) {
                    const SubframePair& sp = rec.subframe_pairs[s];
                    const Subframe& fa = A.subframes[sp.sub_a];
                    const Subframe& fb = B.subframes[sp.sub_b];
                    PairProblem prob;
                    prob.sensor = ds.sensor;
                    prob.init_T1 = cur[fa.centre_ping];
                    prob.init_T2 = cur[fb.centre_ping];
                    prob.odometry = res.dr[fa.centre_ping].inverse() * res.dr[fb.centre_ping];
                    prob.odometry_cov = cfg.odometry_cov(travelled(fa.centre_ping, fb.centre_ping));
                    prob.prior_sigma = cfg.gauge_sigma;
                    std::vector<PairObservation> obs;
                    obs.reserve(sp.correspondences.size());
                    for (std::size_t k = 0; k < sp.correspondences.size(); ++k) {
                        const PixelMatch& m = pm[sp.correspondences[k]];
                        obs.push_back({to_measurement(m.a, prob.init_T1, cur[m.a.ping], 0, static_cast<int>(k)),
                                       to_measurement(m.b, prob.init_T2, cur[m.b.ping], 1, static_cast<int>(k))});
                    }
                    RansacParams rp = cfg.ransac;
                    rp.lm = cfg.lm;
                    rp.seed = stream_seed(cfg.seed, 0x5241, static_cast<std::uint64_t>(iter),
                                          static_cast<std::uint64_t>(pair_index) * 1024 + s);
                    EdgeRecord er;
                    er.iteration = iter;
                    er.image_a = A.span.id;
                    er.image_b = B.span.id;
                    er.correspondences = obs.size();
                    if (static_cast<int>(obs.size()) < rp.subset_size) {
                        er.reason = "too few correspondences";
                    } else {
                        const RansacResult rr = ransac_estimate(prob, obs, rp);
                        er.edge = rr.edge;
                        er.accepted = rr.accepted;
                        er.reason = rr.reason;
                        er.history = rr.history;
                    }
                    er.edge.i = fa.centre_ping;
                    er.edge.j = fb.centre_ping;
                    iter_edges.push_back(er);
                }
                if (log)
                    *log << "iter " << iter << " pair " << A.span.id << "-" << B.span.id
                         << (rec.flipped ? " (flipped)" : "") << ": " << rec.matches.size() << " correspondences, "
                         << rec.subframe_pairs.size() << " subframe pairs\n";
                res.pairs.push_back(std::move(rec));
                ++pair_index;
            }

        // Graph: dead-reckoning chain plus this iteration's edges, added image
        // by image and re-optimized from the current estimate after each.
        PoseGraph graph(cfg.anchor_sigma);
        graph.add_node(node_ids[0], cur[node_ids[0]]);
        for (std::size_t n = 1; n < node_ids.size(); ++n) {
            const Pose3& da = res.dr[node_ids[n - 1]];
            const Pose3& db = res.dr[node_ids[n]];
            graph.add_node(node_ids[n], cur[node_ids[n]]);
            graph.add_odometry({node_ids[n - 1], node_ids[n], da.inverse() * db,
                                cfg.odometry_cov(travelled(node_ids[n - 1], node_ids[n]))});
        }
        int accepted = 0;
        for (const auto& im : res.images) {
            bool added = false;
            for (const auto& er : iter_edges) {
                if (er.image_b != im.span.id || !er.accepted)
                    continue;
                graph.add_loop_closure({er.edge.i, er.edge.j, er.edge.relative, er.edge.covariance});
                added = true;
                ++accepted;
            }
            if (added)
                res.graph_reports.push_back(graph.optimize(cfg.graph));
        }
        for (const auto& er : iter_edges) {
            if (er.accepted) {
                ++res.status.edges_accepted;
            } else {
                ++res.status.edges_rejected;
                ++res.status.rejections[er.reason];
            }
        }
        res.status.subframe_pairs += static_cast<int>(iter_edges.size());
        if (log)
            *log << "iter " << iter << ": " << accepted << " of " << iter_edges.size() << " edges accepted\n";
        res.edges.insert(res.edges.end(), iter_edges.begin(), iter_edges.end());
        res.graph = std::move(graph);
        if (accepted > 0)
            res.poses = interpolate_poses(res.dr, res.images, res.graph);
        else if (iter == 1)
            break;
    }
    const std::vector<double> chi2 = res.graph.loop_chi2();
    for (double c : chi2) {
        res.status.loop_chi2_mean += c / static_cast<double>(chi2.size());
        res.status.loop_chi2_max = std::max(res.status.loop_chi2_max, c);
        res.status.loops_inconsistent += c > 16.81 ? 1 : 0;
    }
    if (res.status.loops_inconsistent > 0)
        res.status.messages.push_back(std::to_string(res.status.loops_inconsistent) +
                                      " loop closures inconsistent with the optimized graph");
    if (res.status.edges_accepted == 0) {
        res.status.no_edges = true;
        res.status.messages.push_back("no loop-closure edges accepted; returning dead reckoning");
        res.poses = res.dr;
    }
    res.map = triangulate_landmarks(final_sets, res.poses, ds.sensor, cfg.reconstruct);
    res.dr_map = triangulate_landmarks(final_sets, res.dr, ds.sensor, cfg.reconstruct);
    return res;
}

// ---------------------------------------------------------------------------
// Evaluation against ground truth

/// Floor point of every canonical pixel, found by ray casting from the true
/// poses onto the reference surface. Row/column stride `step`; others NaN.
inline Raster<Vec3> surface_pixel_points(const Dataset& ds, const ImageData& im, int step = 1)
{
    const double nan = std::numeric_limits<double>::quiet_NaN();
    const SssImage& c = im.canonical;
    Raster<Vec3> pts(c.rows(), c.cols(), Vec3(nan, nan, nan));
    parallel_for(0, (c.rows() + step - 1) / step, [&](int rr) {
        const int r = rr * step;
        const std::int64_t p = im.span.first_ping + r;
        for (int col = 0; col < c.cols(); col += step) {
            const double range = slant_range(c.range_of(col), ds.pings[p].altitude);
            if (range > ds.sensor.max_range)
                continue;
            if (auto x = cast_ray(ds.truth[p], ds.sensor.sensor_offset, c.side_of(col), range, *ds.surface))
                pts(r, col) = *x;
        }
    });
    return pts;
}

inline std::vector<OracleEntry> to_entries(const ImageData& a, const ImageData& b, std::span<const Correspondence> c)
{
    std::vector<OracleEntry> out;
    out.reserve(c.size());
    for (const auto& x : c)
        out.push_back({a.span.first_ping + x.a_row, x.a_col, b.span.first_ping + x.b_row, x.b_col});
    return out;
}

inline EvalReport evaluate(const Dataset& ds, const PipelineResult& res, const PipelineConfig& cfg)
{
    if (!ds.has_truth() || !ds.surface)
        throw std::invalid_argument("evaluation needs truth.csv and surface.txt");
    EvalReport rep;
    rep.ate_dr = ate_rmse(res.dr, ds.truth);
    rep.ate_est = ate_rmse(res.poses, ds.truth);

    std::map<int, Raster<Vec3>> pts;
    std::map<int, const ImageData*> by_id;
    for (const auto& im : res.images) {
        pts.emplace(im.span.id, surface_pixel_points(ds, im));
        by_id[im.span.id] = &im;
    }
    int last = 0;
    for (const auto& p : res.pairs)
        last = std::max(last, p.iteration);
    std::map<std::pair<int, int>, double> first_init_recall, first_recall;
    int pid = 0;
    for (const auto& p : res.pairs) {
        const ImageData& A = *by_id.at(p.image_a);
        const ImageData& B = *by_id.at(p.image_b);
        const auto oracle = oracle_correspondences(pts.at(p.image_a), pixel_grid_of(A.canonical), pts.at(p.image_b),
                                                   pixel_grid_of(B.canonical), 1, B.canonical.bin_size);
        const auto est = to_entries(A, B, p.matches);
        const auto ini = to_entries(A, B, p.initial);
        const auto e = epe(est, oracle);
        const auto e0 = epe(ini, oracle);
        const std::string key = "iter" + std::to_string(p.iteration) + ".pair." + std::to_string(p.image_a) + "_" +
                                std::to_string(p.image_b) + ".";
        rep.extra[key + "recall"] = e ? e->recall : 0.0;
        rep.extra[key + "init_recall"] = e0 ? e0->recall : 0.0;
        if (p.iteration == 1) {
            first_recall[{p.image_a, p.image_b}] = e ? e->recall : 0.0;
            first_init_recall[{p.image_a, p.image_b}] = e0 ? e0->recall : 0.0;
        }
        if (p.iteration != last)
            continue;
        PairEval pe;
        pe.pair_id = pid++;
        pe.image_a = p.image_a;
        pe.image_b = p.image_b;
        pe.correspondences = p.matches.size();
        if (e) {
            pe.epe_x = e->x;
            pe.epe_y = e->y;
            pe.recall = e->recall;
        }
        pe.init_recall = e0 ? e0->recall : 0.0;
        const auto pm = to_pixel_matches(ds, A, B, p.matches);
        std::vector<PixelMatch> sub;
        for (std::size_t k = 0; k < pm.size(); k += static_cast<std::size_t>(cfg.eval_stride))
            sub.push_back(pm[k]);
        pe.lce_dr = lce(sub, res.dr, ds.sensor.sensor_offset, *ds.surface).mean;
        pe.lce_est = lce(sub, res.poses, ds.sensor.sensor_offset, *ds.surface).mean;
        for (const auto* er : res.final_edges())
            if (er->image_a == p.image_a && er->image_b == p.image_b)
                ++pe.edges;
        rep.pairs.push_back(pe);
    }
    // Iteration-1 matching quality, which measures the matcher against the
    // dead-reckoning initialization.
    for (auto& pe : rep.pairs) {
        const auto k = std::make_pair(pe.image_a, pe.image_b);
        if (first_recall.count(k)) {
            rep.extra["pair." + std::to_string(pe.image_a) + "_" + std::to_string(pe.image_b) + ".iter1_gain"] =
                first_recall[k] - first_init_recall[k];
        }
    }

    // Per-line heightmaps in the lines' own sensor frames.
    for (const auto& im : res.images) {
        const Raster<Vec3>& P = pts.at(im.span.id);
        std::vector<Vec3> ref;
        for (int r = 0; r < P.rows(); ++r)
            for (int c = 0; c < P.cols(); ++c)
                if (P(r, c).allFinite()) {
                    const std::int64_t p = im.span.first_ping + r;
                    const Vec3 local = global_to_sensor(P(r, c), ds.truth[p], Pose3(), ds.sensor.sensor_offset);
                    ref.push_back(sensor_to_global(local, res.dr[p], Pose3(), ds.sensor.sensor_offset));
                }
        const auto est = sensor_frame_align(res.map, im.span.id, res.poses, res.dr, ds.sensor.sensor_offset);
        const auto drp = sensor_frame_align(res.dr_map, im.span.id, res.dr, res.dr, ds.sensor.sensor_offset);
        const auto me = point_cloud_mae(est, ref, cfg.heightmap_cell);
        const auto md = point_cloud_mae(drp, ref, cfg.heightmap_cell);
        if (!me || !md)
            continue;
        rep.lines.push_back({im.span.id, *md, *me});
    }
    rep.extra["edges_accepted"] = res.status.edges_accepted;
    rep.extra["edges_rejected"] = res.status.edges_rejected;
    rep.extra["landmarks"] = static_cast<double>(res.map.landmarks.size());
    return rep;
}

/// Trajectory as ping-indexed records with the dataset's timestamps.
inline std::vector<TrajectoryRecord> trajectory_records(const Dataset& ds, std::span<const Pose3> poses)
{
    std::vector<TrajectoryRecord> out;
    for (std::size_t i = 0; i < poses.size(); ++i)
        out.push_back({static_cast<std::int64_t>(i), ds.pings[i].time, poses[i]});
    return out;
}

}  // namespace sss
