#include "sss/metrics.hpp"
#include "sss/reconstruct.hpp"
#include "support.hpp"

#include <gtest/gtest.h>

#include <numbers>
#include <sstream>

namespace {

using namespace sss;

Heightmap flat_surface(double z, double e0 = -50, double n0 = -50, int size = 200)
{
    Heightmap hm(e0, n0, 1.0, size, size);
    for (double& v : hm.grid.data())
        v = z;
    return hm;
}

PixelObservation obs_of(const Vec3& x, std::int64_t ping, const Pose3& pose, const Seafloor* floor = nullptr)
{
    const Vec3 ps = pose.inverse() * x;
    PixelObservation o;
    o.ping = ping;
    o.side = ps.y() > 0 ? Side::port : Side::starboard;
    o.range = ps.norm();
    o.altitude = floor ? pose.translation.z() - floor->height(pose.translation.x(), pose.translation.y()) : -x.z();
    o.ground_range = horizontal_range(o.range, o.altitude);
    return o;
}

TEST(Epe, Examples)
{
    std::vector<OracleEntry> oracle, shifted;
    for (int k = 0; k < 50; ++k) {
        oracle.push_back({k, 2 * k, 100 + k, 3 * k});
        shifted.push_back({k, 2 * k, 100 + k + 3, 3 * k});
    }
    const auto same = epe(oracle, oracle);
    ASSERT_TRUE(same);
    EXPECT_EQ(same->x, 0.0);
    EXPECT_EQ(same->y, 0.0);
    EXPECT_EQ(recall(oracle, oracle), 1.0);
    const auto off = epe(shifted, oracle);
    EXPECT_EQ(off->x, 0.0);
    EXPECT_EQ(off->y, 3.0);
    EXPECT_EQ(recall(shifted, oracle), 0.0);
    EXPECT_FALSE(epe(oracle, std::vector<OracleEntry>{}).has_value());
    EXPECT_EQ(recall(oracle, std::vector<OracleEntry>{}), 0.0);
}

TEST(Epe, RecallToleranceIsInclusive)
{
    const std::vector<OracleEntry> oracle{{0, 0, 10, 10}, {1, 0, 10, 10}};
    const std::vector<OracleEntry> est{{0, 0, 12, 8}, {1, 0, 13, 10}};
    EXPECT_DOUBLE_EQ(recall(est, oracle), 0.5);
}

TEST(Ate, Examples)
{
    std::vector<Pose3> a{Pose3::translate(0, 0, 0), Pose3::translate(1, 0, 0)};
    EXPECT_EQ(ate_rmse(a, a), 0.0);
    std::vector<Pose3> b{Pose3::translate(0, 3, 0), Pose3::translate(1, 0, 4)};
    EXPECT_NEAR(ate_rmse(b, a), std::sqrt((9.0 + 16.0) / 2.0), 1e-12);
    EXPECT_THROW(ate_rmse(a, std::vector<Pose3>(3)), std::invalid_argument);
}

TEST(Median, OddEvenAndEmpty)
{
    EXPECT_EQ(median({3, 1, 2}), 2.0);
    EXPECT_EQ(median({4, 1, 3, 2}), 2.5);
    EXPECT_THROW(median({}), std::invalid_argument);
}

TEST(HeightmapMae, DatumFree)
{
    Heightmap a(0, 0, 1, 4, 4), b(0, 0, 1, 4, 4);
    Rng rng(1);
    for (int r = 0; r < 4; ++r)
        for (int c = 0; c < 4; ++c) {
            a.grid(r, c) = rng.normal();
            b.grid(r, c) = a.grid(r, c) + 7.5;
        }
    EXPECT_NEAR(heightmap_mae(a, b), 0.0, 1e-12);
    b.grid(0, 0) += 1.0;
    EXPECT_NEAR(heightmap_mae(a, b), 1.0 / 16.0, 1e-12);
    EXPECT_THROW(heightmap_mae(a, Heightmap(0, 0, 2, 4, 4)), std::invalid_argument);
}

TEST(Lce, FlatFloorExamples)
{
    const Heightmap surf = flat_surface(-18.0);
    std::vector<Pose3> poses;
    std::vector<PixelMatch> m;
    for (double n : {-10.0, 0.0, 10.0}) {
        const Pose3 pa = Pose3::from_ypr(std::numbers::pi / 2, 0, 0, Vec3(0, n, 0));
        const Pose3 pb = Pose3::from_ypr(-std::numbers::pi / 2, 0, 0, Vec3(50, n, 0));
        const Vec3 x(25, n, -18);
        const auto k = static_cast<std::int64_t>(poses.size());
        poses.push_back(pa);
        poses.push_back(pb);
        m.push_back({obs_of(x, k, pa), obs_of(x, k + 1, pb)});
    }
    const LceResult r = lce(m, poses, Pose3(), surf);
    EXPECT_EQ(r.count, 3u);
    EXPECT_LT(r.mean, 1e-6);
    auto shifted = poses;
    for (std::size_t k = 1; k < shifted.size(); k += 2)
        shifted[k] = shifted[k] * Pose3::translate(2.0, 0, 0);
    EXPECT_NEAR(lce(m, shifted, Pose3(), surf).mean, 2.0, 1e-6);
    // Rays leaving the surface grid are skipped and counted.
    for (std::size_t k = 1; k < shifted.size(); k += 2)
        shifted[k] = Pose3::translate(1000, 0, 0);
    const LceResult miss = lce(m, shifted, Pose3(), surf);
    EXPECT_EQ(miss.count, 0u);
    EXPECT_EQ(miss.skipped, 3u);
}

TEST(Metrics, EpeInvariantUnderReindexing)
{
    Rng rng(4);
    std::vector<OracleEntry> oracle, est;
    for (int k = 0; k < 200; ++k) {
        oracle.push_back({k, k % 7, 500 + k, 3 * (k % 11)});
        est.push_back({k, k % 7, 500 + k + rng.uniform_int(-3, 3), 3 * (k % 11) + rng.uniform_int(-3, 3)});
    }
    const auto base = epe(est, oracle);
    std::vector<OracleEntry> o2(oracle.rbegin(), oracle.rend()), e2 = est;
    for (std::size_t i = e2.size() - 1; i > 0; --i)
        std::swap(e2[i], e2[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(i)))]);
    const auto perm = epe(e2, o2);
    ASSERT_TRUE(base && perm);
    EXPECT_NEAR(perm->x, base->x, 1e-12);
    EXPECT_NEAR(perm->y, base->y, 1e-12);
    EXPECT_EQ(perm->recall, base->recall);
}

TEST(Metrics, LceSymmetricAndZeroOnSelf)
{
    const Heightmap surf = flat_surface(-18.0);
    Rng rng(5);
    std::vector<Pose3> poses;
    std::vector<PixelMatch> m, swapped, self;
    for (int k = 0; k < 40; ++k) {
        const double n = -30 + 60 * rng.uniform();
        const Pose3 pa = Pose3::from_ypr(std::numbers::pi / 2 + 0.05 * rng.normal(), 0, 0, Vec3(0, n, 0));
        const Pose3 pb = Pose3::from_ypr(-std::numbers::pi / 2, 0, 0, Vec3(50, n + rng.normal(), 0));
        const Vec3 x(10 + 30 * rng.uniform(), n, -18);
        const auto i = static_cast<std::int64_t>(poses.size());
        poses.push_back(pa);
        poses.push_back(pb);
        const PixelMatch pm{obs_of(x, i, pa), obs_of(x + Vec3(rng.normal(), rng.normal(), 0), i + 1, pb)};
        m.push_back(pm);
        swapped.push_back({pm.b, pm.a});
        self.push_back({pm.a, pm.a});
    }
    const LceResult a = lce(m, poses, Pose3(), surf), b = lce(swapped, poses, Pose3(), surf);
    EXPECT_EQ(a.count, b.count);
    EXPECT_NEAR(a.mean, b.mean, 1e-12);
    EXPECT_GT(a.mean, 0.1);
    EXPECT_EQ(lce(self, poses, Pose3(), surf).mean, 0.0);
}

TEST(Metrics, ZeroOnSelfComparison)
{
    Heightmap h(0, 0, 1, 5, 5);
    Rng rng(6);
    for (double& v : h.grid.data())
        v = rng.normal();
    EXPECT_EQ(heightmap_mae(h, h), 0.0);
    std::vector<Vec3> pts;
    for (int k = 0; k < 100; ++k)
        pts.emplace_back(10 * rng.uniform(), 10 * rng.uniform(), rng.normal());
    EXPECT_EQ(point_cloud_mae(pts, pts, 1.0).value(), 0.0);
}

TEST(CastRay, HitsFlatFloorAtExpectedPoint)
{
    const Heightmap surf = flat_surface(-18.0);
    const auto x = cast_ray(Pose3(), Pose3(), Side::port, 30.0, surf);
    ASSERT_TRUE(x);
    EXPECT_NEAR(x->x(), 0.0, 1e-9);
    EXPECT_NEAR(x->y(), 24.0, 1e-6);
    EXPECT_NEAR(x->z(), -18.0, 1e-6);
    EXPECT_FALSE(cast_ray(Pose3(), Pose3(), Side::port, 10.0, surf));
}

TEST(Grid, MeanRule)
{
    const std::vector<Vec3> one{{0.5, 0.5, 1.0}, {1.5, 0.5, 2.0}, {0.5, 1.5, 3.0}};
    const Heightmap a = grid_heightmap(one, 1.0);
    EXPECT_EQ(a.rows(), 2);
    EXPECT_EQ(a.cols(), 2);
    EXPECT_EQ(a.grid(0, 0), 1.0);
    EXPECT_EQ(a.grid(0, 1), 2.0);
    EXPECT_EQ(a.grid(1, 0), 3.0);
    EXPECT_FALSE(a.occupied(1, 1));
    const std::vector<Vec3> two{{0.2, 0.2, 1.0}, {0.7, 0.9, 3.0}};
    EXPECT_EQ(grid_heightmap(two, 1.0).grid(0, 0), 2.0);
    EXPECT_THROW(grid_for(std::vector<Vec3>{}, 1.0), std::invalid_argument);
}

TEST(PointCloud, RoundTripIsExact)
{
    const std::vector<Vec3> pts{{1.0 / 3, -2.5, 1e-17}, {123456.789, 0, -18.000000001}};
    std::stringstream ss;
    write_point_cloud(ss, pts);
    EXPECT_EQ(read_point_cloud(ss), pts);
    std::stringstream bad("1 2 3\n4 x 6\n");
    EXPECT_THROW(read_point_cloud(bad), std::runtime_error);
}

// Noiseless correspondences on an undulating floor: each landmark is seen
// from a ping on each line whose zero-along-track plane contains it.
struct TriScene {
    SensorConfig sensor;
    std::vector<Pose3> poses;
    std::vector<Vec3> truth;
    MatchSet set;
};

TriScene tri_scene(int count)
{
    TriScene s;
    const Seafloor floor;
    Rng rng(2);
    for (int k = 0; k < count; ++k) {
        const double e = 5 + 40 * rng.uniform(), n = 20 + 100 * rng.uniform();
        const Vec3 x(e, n, floor.height(e, n));
        const Pose3 pa = Pose3::from_ypr(std::numbers::pi / 2, 0, 0, Vec3(0, n, 0));
        const Pose3 pb = Pose3::from_ypr(-std::numbers::pi / 2, 0, 0, Vec3(50, n, 0));
        s.poses.push_back(pa);
        s.poses.push_back(pb);
        s.truth.push_back(x);
        s.set.matches.push_back({obs_of(x, 2 * k, pa, &floor), obs_of(x, 2 * k + 1, pb, &floor)});
    }
    s.set.image_a = 0;
    s.set.image_b = 1;
    return s;
}

TEST(Triangulate, NoiselessLandmarksRecovered)
{
    const TriScene s = tri_scene(500);
    const QuasiDenseMap map = triangulate_landmarks(std::span<const MatchSet>(&s.set, 1), s.poses, s.sensor);
    ASSERT_EQ(map.landmarks.size(), s.truth.size());
    std::vector<double> err;
    for (std::size_t k = 0; k < s.truth.size(); ++k)
        err.push_back((map.landmarks[k].position - s.truth[k]).norm());
    EXPECT_LT(median(err), 0.05);
    EXPECT_EQ(map.non_convergent, 0u);
}

TEST(Triangulate, InfeasibleCorrespondenceDiscarded)
{
    TriScene s = tri_scene(3);
    s.set.matches[1].a.range = 5.0;
    s.set.matches[1].b.range = 5.0;
    // Both ranges exceed the altitude but the circles, 50 m apart, cannot meet.
    s.set.matches[2].a.range = 20.0;
    s.set.matches[2].b.range = 20.0;
    const QuasiDenseMap map = triangulate_landmarks(std::span<const MatchSet>(&s.set, 1), s.poses, s.sensor);
    EXPECT_EQ(map.landmarks.size(), 1u);
    EXPECT_EQ(map.non_convergent + map.filtered, 2u);
}

// Every retained landmark, re-scored against its two measurements, is within
// the filter thresholds and carries the costs it was filtered on.
TEST(Triangulate, RetainedLandmarksPassRecheck)
{
    TriScene s = tri_scene(400);
    Rng rng(9);
    for (auto& m : s.set.matches) {
        m.a.range += 0.3 * rng.normal();
        m.b.range += 0.3 * rng.normal();
    }
    const ReconstructParams rp;
    const QuasiDenseMap map = triangulate_landmarks(std::span<const MatchSet>(&s.set, 1), s.poses, s.sensor, rp);
    ASSERT_GT(map.landmarks.size(), 20u);
    for (const auto& l : map.landmarks) {
        const PixelMatch& m = s.set.matches[static_cast<std::size_t>(l.ping_a / 2)];
        double rc = 0.0, pc = 0.0;
        for (const auto* o : {&m.a, &m.b}) {
            const Vec2 z = predict_measurement(l.position, s.poses[o->ping], Pose3(), s.sensor);
            rc += 0.5 * std::abs(z.x() - o->range);
            pc += 0.5 * std::abs(z.y());
        }
        EXPECT_LE(rc, rp.range_thresh + 1e-9);
        EXPECT_LE(pc, rp.plane_thresh + 1e-9);
        EXPECT_NEAR(rc, l.range_cost, 1e-9);
        EXPECT_NEAR(pc, l.plane_cost, 1e-9);
    }
}

TEST(Triangulate, GriddedLandmarksMatchSurface)
{
    const TriScene s = tri_scene(20000);
    const QuasiDenseMap map = triangulate_landmarks(std::span<const MatchSet>(&s.set, 1), s.poses, s.sensor);
    const auto mae = point_cloud_mae(positions(map), s.truth, 1.0);
    ASSERT_TRUE(mae);
    EXPECT_LT(*mae, 0.05);
}

TEST(SensorFrameAlign, IdentityWhenPosesAgree)
{
    const TriScene s = tri_scene(50);
    const QuasiDenseMap map = triangulate_landmarks(std::span<const MatchSet>(&s.set, 1), s.poses, s.sensor);
    const auto out = sensor_frame_align(map, 0, s.poses, s.poses, s.sensor.sensor_offset);
    ASSERT_EQ(out.size(), map.landmarks.size());
    for (std::size_t k = 0; k < out.size(); ++k)
        EXPECT_LT((out[k] - map.landmarks[k].position).norm(), 1e-9);
}

TEST(SensorFrameAlign, IndependentOfEstimatedFrame)
{
    // Moving every ping and its landmarks rigidly leaves the aligned cloud unchanged.
    const TriScene s = tri_scene(50);
    const QuasiDenseMap map = triangulate_landmarks(std::span<const MatchSet>(&s.set, 1), s.poses, s.sensor);
    const Pose3 g = Pose3::from_ypr(0.3, 0.01, -0.02, Vec3(5, -7, 1));
    std::vector<Pose3> moved;
    for (const auto& p : s.poses)
        moved.push_back(g * p);
    QuasiDenseMap mm = map;
    for (auto& l : mm.landmarks)
        l.position = g * l.position;
    const auto a = sensor_frame_align(map, 1, s.poses, s.poses, Pose3());
    const auto b = sensor_frame_align(mm, 1, moved, s.poses, Pose3());
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t k = 0; k < a.size(); ++k)
        EXPECT_LT((a[k] - b[k]).norm(), 1e-9);
}

}  // namespace
