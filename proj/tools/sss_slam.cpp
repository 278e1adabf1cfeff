// Command-line front end: simulate datasets, run the SLAM pipeline and its
// stages, reconstruct and evaluate.
//
// Exit codes: 0 success, 2 no loop-closure edge accepted, 1 error.

#include "sss/pipeline.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

namespace fs = std::filesystem;

namespace {

struct Options {
    std::string config;
    std::string data;
    std::string out = "out";
    std::uint64_t seed = 1;
    bool seed_given = false;
    unsigned threads = 0;
    bool quiet = false;
};

sss::Config load_config(const Options& o)
{
    return o.config.empty() ? sss::Config() : sss::Config::load(o.config);
}

sss::PipelineConfig pipeline_config(const Options& o, const sss::Config& cfg)
{
    sss::PipelineConfig pc;
    pc.load(cfg);
    if (o.seed_given)
        pc.seed = o.seed;
    return pc;
}

void warn_unused(const sss::Config& cfg)
{
    for (const auto& k : cfg.unused_keys())
        std::clog << "warning: unused config key " << k << '\n';
}

std::ofstream open(const fs::path& p)
{
    std::ofstream os(p);
    if (!os)
        throw std::runtime_error("cannot write " + p.string());
    return os;
}

sss::Dataset simulate(const Options& o, const sss::Config& cfg)
{
    sss::SimulationConfig sc;
    sc.load(cfg);
    if (o.seed_given)
        sc.seed = o.seed;
    return sss::simulate_dataset(sc);
}

void write_slam_outputs(const fs::path& out, const sss::Dataset& ds, const sss::PipelineResult& res)
{
    fs::create_directories(out);
    {
        auto os = open(out / "trajectory.csv");
        const auto tr = sss::trajectory_records(ds, res.poses);
        sss::write_trajectory_csv(os, tr);
    }
    {
        auto os = open(out / "edges.csv");
        for (const auto* e : res.final_edges())
            sss::write_edge(os, e->edge);
    }
    {
        auto os = open(out / "graph.txt");
        res.graph.write(os);
    }
    {
        auto os = open(out / "status.txt");
        os << "no_edges = " << (res.status.no_edges ? "true" : "false") << '\n';
        os << "overlapping_pairs = " << res.status.overlapping_pairs << '\n';
        os << "subframe_pairs = " << res.status.subframe_pairs << '\n';
        os << "edges_accepted = " << res.status.edges_accepted << '\n';
        os << "edges_rejected = " << res.status.edges_rejected << '\n';
        for (const auto& [reason, n] : res.status.rejections)
            os << "rejected." << reason << " = " << n << '\n';
        os << "loop_chi2_mean = " << res.status.loop_chi2_mean << '\n';
        os << "loop_chi2_max = " << res.status.loop_chi2_max << '\n';
        os << "loops_inconsistent = " << res.status.loops_inconsistent << '\n';
        for (const auto& m : res.status.messages)
            os << "# " << m << '\n';
    }
}

void write_reconstruction(const fs::path& out, const sss::PipelineResult& res, double cell)
{
    fs::create_directories(out);
    const auto pts = sss::positions(res.map);
    {
        auto os = open(out / "points.xyz");
        sss::write_point_cloud(os, pts);
    }
    if (!pts.empty()) {
        auto os = open(out / "heightmap.txt");
        sss::write_heightmap(os, sss::grid_heightmap(pts, cell));
    }
}

int status_code(const sss::PipelineResult& res)
{
    if (res.status.no_edges) {
        std::clog << "warning: no loop-closure edges found; trajectory is dead reckoning\n";
        for (const auto& [reason, n] : res.status.rejections)
            std::clog << "  rejected (" << reason << "): " << n << '\n';
        return 2;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Side-scan sonar subframe SLAM"};
    app.require_subcommand(1);
    Options o;
    auto common = [&](CLI::App* sc, bool needs_data) {
        sc->add_option("--config", o.config, "key = value configuration file")->check(CLI::ExistingFile);
        sc->add_option("--out", o.out, "output directory");
        sc->add_option("--seed", o.seed, "random seed")->each([&](const std::string&) { o.seed_given = true; });
        sc->add_option("--threads", o.threads, "worker threads (0: hardware default)");
        sc->add_flag("--quiet", o.quiet, "suppress progress output");
        if (needs_data)
            sc->add_option("--data", o.data, "dataset directory")->required()->check(CLI::ExistingDirectory);
    };
    auto* sim = app.add_subcommand("simulate", "render a simulated dataset");
    common(sim, false);
    auto* can = app.add_subcommand("canonicalize", "write canonical images and masks");
    common(can, true);
    auto* mat = app.add_subcommand("match", "dense matching of all overlapping image pairs");
    common(mat, true);
    auto* slam = app.add_subcommand("slam", "full pipeline: trajectory, edges and graph");
    common(slam, true);
    auto* rec = app.add_subcommand("reconstruct", "pipeline plus quasi-dense point cloud and heightmap");
    common(rec, true);
    auto* ev = app.add_subcommand("eval", "pipeline plus evaluation against ground truth");
    common(ev, true);
    auto* all = app.add_subcommand("all", "simulate, run, reconstruct and evaluate");
    common(all, false);

    CLI11_PARSE(app, argc, argv);

    try {
        sss::set_thread_count(o.threads);
        const sss::Config cfg = load_config(o);
        const fs::path out(o.out);
        std::ostream* log = o.quiet ? nullptr : &std::clog;

        if (sim->parsed()) {
            const auto ds = simulate(o, cfg);
            sss::save_dataset(out, ds);
            warn_unused(cfg);
            return 0;
        }
        if (all->parsed()) {
            const auto ds = simulate(o, cfg);
            const auto pc = pipeline_config(o, cfg);
            warn_unused(cfg);
            sss::save_dataset(out / "dataset", ds);
            const auto res = sss::run(ds, pc, log);
            write_slam_outputs(out, ds, res);
            write_reconstruction(out, res, pc.heightmap_cell);
            const auto rep = sss::evaluate(ds, res, pc);
            auto os = open(out / "report.txt");
            rep.write(os);
            auto pcsv = open(out / "pairs.csv");
            rep.write_pairs_csv(pcsv);
            return status_code(res);
        }

        const auto ds = sss::load_dataset(o.data);
        const auto pc = pipeline_config(o, cfg);
        warn_unused(cfg);
        fs::create_directories(out);

        if (can->parsed()) {
            for (const auto& s : ds.images) {
                const auto im = sss::prepare_image(ds, s, pc);
                const std::string stem = "image_" + std::to_string(s.id);
                sss::save_grid((out / (stem + ".txt")).string(), im.canonical.intensities);
                sss::save_grid((out / (stem + "_mask.txt")).string(), im.mask);
            }
            return 0;
        }
        if (mat->parsed()) {
            std::vector<sss::ImageData> images;
            for (const auto& s : ds.images)
                images.push_back(sss::prepare_image(ds, s, pc));
            const auto poses = ds.dr_poses();
            std::vector<sss::GeoImage> geos;
            for (const auto& im : images)
                geos.push_back(sss::georeference(im.canonical,
                                                 std::span<const sss::Pose3>(poses).subspan(
                                                     im.span.first_ping, im.span.size()),
                                                 ds.sensor.sensor_offset));
            int k = 0;
            for (std::size_t a = 0; a < images.size(); ++a)
                for (std::size_t b = a + 1; b < images.size(); ++b) {
                    const auto ov = sss::overlap_check(geos[a], geos[b], pc.min_overlap_area);
                    if (!ov)
                        continue;
                    const auto rec = sss::match_pair(images[a], images[b], poses, ds.sensor, pc,
                                                     sss::stream_seed(pc.seed, 0x4d41, 1, k++), ov->area);
                    auto os = open(out / ("matches_" + std::to_string(images[a].span.id) + "_" +
                                          std::to_string(images[b].span.id) + ".csv"));
                    os << "a_row,a_col,b_row,b_col,distance\n";
                    for (const auto& c : rec.matches)
                        os << c.a_row << ',' << c.a_col << ',' << c.b_row << ',' << c.b_col << ',' << c.distance
                           << '\n';
                    if (log)
                        *log << "pair " << images[a].span.id << "-" << images[b].span.id << ": "
                             << rec.matches.size() << " correspondences\n";
                }
            return 0;
        }

        const auto res = sss::run(ds, pc, log);
        write_slam_outputs(out, ds, res);
        if (rec->parsed() || ev->parsed())
            write_reconstruction(out, res, pc.heightmap_cell);
        if (ev->parsed()) {
            const auto rep = sss::evaluate(ds, res, pc);
            auto os = open(out / "report.txt");
            rep.write(os);
            auto pcsv = open(out / "pairs.csv");
            rep.write_pairs_csv(pcsv);
        }
        return status_code(res);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
