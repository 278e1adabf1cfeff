#include "sss/pipeline.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

namespace {

using namespace sss;

SimulationConfig small_sim(int lines = 2, double length = 60.0, double sigma = 0.01)
{
    SimulationConfig sc;
    sc.plan.line_count = lines;
    sc.plan.line_length = length;
    sc.drift.yaw_noise_sigma = sigma;
    sc.drift.yaw_step_pings = 20;
    return sc;
}

TEST(Polygon, HullAreaAndClip)
{
    std::vector<Vec2> pts{{0, 0}, {4, 0}, {4, 4}, {0, 4}, {2, 2}, {1, 3}, {2, 0}};
    const Polygon h = convex_hull(pts);
    EXPECT_EQ(h.size(), 4u);
    EXPECT_DOUBLE_EQ(polygon_area(h), 16.0);
    const Polygon o = convex_hull({{2, 1}, {6, 1}, {6, 5}, {2, 5}});
    EXPECT_NEAR(polygon_area(clip_convex(h, o)), 6.0, 1e-12);
    const Polygon far = convex_hull({{10, 10}, {11, 10}, {11, 11}});
    EXPECT_NEAR(polygon_area(clip_convex(h, far)), 0.0, 1e-12);
}

TEST(Overlap, AdjacentLinesOverlap)
{
    SimulationConfig sc = small_sim(3, 40.0, 0.0);
    const Dataset ds = simulate_dataset(sc);
    PipelineConfig pc;
    std::vector<GeoImage> geos;
    for (const auto& s : ds.images) {
        const ImageData im = prepare_image(ds, s, pc);
        geos.push_back(georeference(im.canonical, ds.image_pings(s), ds.sensor.sensor_offset));
    }
    const auto o01 = overlap_check(geos[0], geos[1], 100.0);
    ASSERT_TRUE(o01);
    // Swaths of about 57 m on lines 50 m apart overlap over about 64 m x 40 m.
    EXPECT_NEAR(o01->area, 64.0 * 40.0, 0.1 * 64.0 * 40.0);
    EXPECT_FALSE(overlap_check(geos[0], geos[1], 1e6));
}

TEST(SubframePairing, CentroidRule)
{
    std::vector<Pose3> poses(600);
    const auto sa = split_subframes(0, 600, 0, std::span<const Pose3>(poses), 200);
    const auto sb = split_subframes(1, 600, 1000, std::span<const Pose3>(poses), 200);
    std::vector<Correspondence> c;
    for (int k = 0; k < 50; ++k)
        c.push_back({10 + k, 0, 450 + k % 20, 0, 0.1});  // A subframe 0 -> B subframe 2
    c.push_back({20, 0, 10, 0, 0.1});                      // stray, lands in B subframe 0
    for (int k = 0; k < 5; ++k)
        c.push_back({250 + k, 0, 250, 0, 0.1});            // A subframe 1, too few
    const auto pairs = pair_subframes(sa, sb, c, 10);
    ASSERT_EQ(pairs.size(), 1u);
    EXPECT_EQ(pairs[0].sub_a, 0);
    EXPECT_EQ(pairs[0].sub_b, 2);
    EXPECT_EQ(pairs[0].correspondences.size(), 50u);
}

TEST(SubframePairing, IdenticalImagesPairDiagonally)
{
    std::vector<Pose3> poses(1000);
    const auto sa = split_subframes(0, 1000, 0, std::span<const Pose3>(poses), 200);
    const auto sb = split_subframes(1, 1000, 0, std::span<const Pose3>(poses), 200);
    std::vector<Correspondence> c;
    for (int r = 0; r < 1000; r += 4)
        for (int col = 0; col < 40; col += 8)
            c.push_back({r, col, r, col, 0.0});
    const auto pairs = pair_subframes(sa, sb, c, 10);
    ASSERT_EQ(pairs.size(), 5u);
    std::size_t total = 0;
    for (std::size_t k = 0; k < pairs.size(); ++k) {
        EXPECT_EQ(pairs[k].sub_a, static_cast<int>(k));
        EXPECT_EQ(pairs[k].sub_b, static_cast<int>(k));
        total += pairs[k].correspondences.size();
    }
    EXPECT_EQ(total, c.size());
}

TEST(Dataset, SaveLoadRoundTrip)
{
    const Dataset ds = simulate_dataset(small_sim(2, 10.0));
    const auto dir = std::filesystem::temp_directory_path() / "sss_dataset_roundtrip";
    std::filesystem::remove_all(dir);
    save_dataset(dir, ds);
    const Dataset back = load_dataset(dir);
    ASSERT_EQ(back.pings.size(), ds.pings.size());
    for (std::size_t i = 0; i < ds.pings.size(); ++i) {
        EXPECT_EQ(back.pings[i].port_bins, ds.pings[i].port_bins);
        EXPECT_EQ(back.pings[i].altitude, ds.pings[i].altitude);
        EXPECT_LT(log_residual(back.pings[i].dr_pose, ds.pings[i].dr_pose).norm(), 1e-12);
        EXPECT_LT(log_residual(back.truth[i], ds.truth[i]).norm(), 1e-12);
    }
    ASSERT_EQ(back.images.size(), ds.images.size());
    EXPECT_EQ(back.images[1].first_ping, ds.images[1].first_ping);
    ASSERT_TRUE(back.surface);
    EXPECT_TRUE(back.surface->same_geometry(*ds.surface));
    std::filesystem::remove_all(dir);
}

struct SmallRun {
    Dataset ds;
    PipelineConfig pc;
    PipelineResult res;
};

const SmallRun& small_run()
{
    static const SmallRun r = [] {
        SmallRun s;
        s.ds = simulate_dataset(small_sim(2, 100.0, 0.02));
        s.res = run(s.ds, s.pc);
        return s;
    }();
    return r;
}

std::string dump(const SmallRun& s, const PipelineResult& res)
{
    std::ostringstream os;
    write_trajectory_csv(os, trajectory_records(s.ds, res.poses));
    for (const auto* e : res.final_edges())
        write_edge(os, e->edge);
    write_point_cloud(os, positions(res.map));
    return os.str();
}

TEST(Pipeline, FinalEdgesPassThresholds)
{
    const SmallRun& s = small_run();
    EXPECT_EQ(s.res.status.overlapping_pairs, 1);
    const auto edges = s.res.final_edges();
    ASSERT_FALSE(edges.empty());
    for (const auto* e : edges) {
        EXPECT_TRUE(e->accepted);
        EXPECT_LE(e->edge.range_cost, s.pc.ransac.range_thresh);
        EXPECT_LE(e->edge.plane_cost, s.pc.ransac.plane_thresh);
        EXPECT_LT(e->edge.i, e->edge.j);
    }
    for (const auto& rep : s.res.graph_reports)
        for (std::size_t i = 1; i < rep.accepted_costs.size(); ++i)
            EXPECT_LE(rep.accepted_costs[i], rep.accepted_costs[i - 1]);
    EXPECT_FALSE(s.res.status.no_edges);
}

TEST(Pipeline, DeterministicAcrossRunsAndThreads)
{
    const SmallRun& s = small_run();
    set_thread_count(1);
    const PipelineResult single = run(s.ds, s.pc);
    set_thread_count(3);
    const PipelineResult multi = run(s.ds, s.pc);
    set_thread_count(0);
    EXPECT_EQ(dump(s, single), dump(s, s.res));
    EXPECT_EQ(dump(s, multi), dump(s, s.res));
}

TEST(Pipeline, EvaluationReportsAllPairsAndLines)
{
    const SmallRun& s = small_run();
    const EvalReport rep = evaluate(s.ds, s.res, s.pc);
    EXPECT_EQ(rep.pairs.size(), 1u);
    EXPECT_EQ(rep.lines.size(), 2u);
    EXPECT_GT(rep.ate_dr, 0.0);
    EXPECT_GE(rep.pairs[0].recall, 0.0);
    EXPECT_LE(rep.pairs[0].recall, 1.0);
}

TEST(Pipeline, NoOverlapMeansDeadReckoning)
{
    const Dataset ds = simulate_dataset(small_sim(2, 30.0));
    PipelineConfig pc;
    pc.min_overlap_area = 1e6;
    const PipelineResult res = run(ds, pc);
    EXPECT_TRUE(res.status.no_edges);
    EXPECT_EQ(res.status.overlapping_pairs, 0);
    for (std::size_t i = 0; i < res.poses.size(); ++i)
        EXPECT_EQ(res.poses[i].translation, ds.pings[i].dr_pose.translation);
}

TEST(Config, PipelineKeysAreRead)
{
    std::stringstream ss("pipeline.n_iter = 3\npipeline.subframe_size = 100\n");
    const Config cfg = Config::parse(ss);
    PipelineConfig pc;
    pc.load(cfg);
    EXPECT_EQ(pc.n_iter, 3);
    EXPECT_EQ(pc.subframe_size, 100);
    EXPECT_TRUE(cfg.unused_keys().empty());
}

}  // namespace
