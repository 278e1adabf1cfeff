#pragma once

// Relative pose between two subframes from dense correspondences: the
// side-scan range/plane measurement model, the joint least-squares cost over
// both centre poses and the landmarks, a Schur-complement Levenberg-Marquardt
// solver, two-view landmark triangulation and the RANSAC wrapper.
//
// Tangent perturbations are right-multiplicative, rotation first.

#include "sss/geom.hpp"
#include "sss/parallel.hpp"
#include "sss/sonar_image.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

namespace sss {

using Mat2 = Eigen::Matrix2d;
using Mat26 = Eigen::Matrix<double, 2, 6>;
using Mat23 = Eigen::Matrix<double, 2, 3>;
using Mat12 = Eigen::Matrix<double, 12, 12>;
using Vec12 = Eigen::Matrix<double, 12, 1>;

struct SssMeasurement {
    double range = 0.0;     // slant range r_i
    Pose3 ping_offset;      // subframe centre -> measured ping
    int subframe = 0;       // 0: first pose of the pair, 1: second
    int landmark = 0;
    // Flat-floor back-projection hints used only for initialization.
    double ground_range = 0.0;
    double altitude = 0.0;
    Side side = Side::starboard;
};

/// One correspondence: the same landmark seen from both subframes.
struct PairObservation {
    SssMeasurement a;  // subframe 0
    SssMeasurement b;  // subframe 1
};

/// Diagonal covariance of one measurement: range variance and the plane term
/// that grows with the squared range.
struct MeasurementCov {
    double range_var = 0.0;
    double plane_var = 0.0;

    static MeasurementCov of(double range, const SensorConfig& sensor)
    {
        return {sensor.range_sigma * sensor.range_sigma,
                range * range * sensor.beam_width_alpha * sensor.beam_width_alpha};
    }
    Mat2 matrix() const { return Vec2(range_var, plane_var).asDiagonal(); }
};

/// (||p_s||, p_s.x) for the landmark expressed in the sensor frame.
inline Vec2 predict_measurement(const Vec3& x, const Pose3& centre_pose, const Pose3& ping_offset,
                                const SensorConfig& sensor)
{
    const Vec3 ps = global_to_sensor(x, centre_pose, ping_offset, sensor.sensor_offset);
    return {ps.norm(), ps.x()};
}

struct MeasurementLinearization {
    Vec2 residual;   // predicted - measured
    Mat26 d_pose;    // w.r.t. right perturbation of the centre pose
    Mat23 d_landmark;
};

inline MeasurementLinearization linearize_measurement(const Vec3& x, const Pose3& centre_pose,
                                                      const SssMeasurement& m, const SensorConfig& sensor)
{
    const Pose3 inner = (m.ping_offset * sensor.sensor_offset).inverse();
    const Vec3 q = centre_pose.inverse() * x;
    const Vec3 ps = inner * q;
    const double n = ps.norm();
    MeasurementLinearization out;
    out.residual = Vec2(n - m.range, ps.x());
    Eigen::Matrix<double, 2, 3> dz_dp;
    if (n > 0.0)
        dz_dp.row(0) = ps.transpose() / n;
    else
        dz_dp.row(0).setZero();
    dz_dp.row(1) = Vec3::UnitX().transpose();
    Eigen::Matrix<double, 3, 6> dq;
    dq.leftCols<3>() = hat(q);
    dq.rightCols<3>() = -Mat3::Identity();
    out.d_pose = dz_dp * inner.rotation * dq;
    out.d_landmark = dz_dp * inner.rotation * centre_pose.rotation.transpose();
    return out;
}

/// Odometry covariance proportional to the travelled distance, with separate
/// per-metre variances for the rotation and translation blocks.
inline Mat6 odometry_covariance(double distance, double c_rot, double c_trans)
{
    const double d = std::max(distance, 1.0);
    Vec6 v;
    v << Vec3::Constant(c_rot * d), Vec3::Constant(c_trans * d);
    return v.asDiagonal();
}

struct PairProblem {
    Pose3 init_T1;   // also the mean of the gauge prior on T1
    Pose3 init_T2;
    Pose3 odometry;  // measured T1^-1 T2
    Mat6 odometry_cov = Mat6::Identity();
    SensorConfig sensor;
    double prior_sigma = 1e-6;
};

/// Flat-floor back-projection of one measurement from a ping pose.
inline Vec3 back_project(const SssMeasurement& m, const Pose3& ping_pose, const SensorConfig& sensor)
{
    const Pose3 sp = ping_pose * sensor.sensor_offset;
    const Vec2 d = side_direction(sp, m.side);
    return {sp.translation.x() + m.ground_range * d.x(), sp.translation.y() + m.ground_range * d.y(),
            sp.translation.z() - m.altitude};
}

inline Vec3 init_landmark(const PairObservation& o, const Pose3& T1, const Pose3& T2, const SensorConfig& sensor)
{
    return 0.5 * (back_project(o.a, T1 * o.a.ping_offset, sensor) + back_project(o.b, T2 * o.b.ping_offset, sensor));
}

inline Vec2 whiten(const Vec2& r, const MeasurementCov& c)
{
    return {r.x() / std::sqrt(c.range_var), r.y() / std::sqrt(c.plane_var)};
}

inline Vec6 odometry_whitener(const Mat6& cov)
{
    Vec6 w;
    for (int i = 0; i < 6; ++i)
        w(i) = 1.0 / std::sqrt(cov(i, i));
    return w;
}

/// Pairwise cost: half the sum of squared whitened side-scan residuals over
/// both measurements of every observation, plus the odometry term, plus the
/// gauge prior on T1.
inline double pairwise_cost(const Pose3& T1, const Pose3& T2, std::span<const Vec3> landmarks,
                            std::span<const PairObservation> obs, const PairProblem& prob,
                            double odometry_weight = 1.0)
{
    double c = 0.0;
    for (std::size_t k = 0; k < obs.size(); ++k) {
        for (const SssMeasurement* m : {&obs[k].a, &obs[k].b}) {
            const Pose3& T = m->subframe == 0 ? T1 : T2;
            const Vec2 z = predict_measurement(landmarks[k], T, m->ping_offset, prob.sensor);
            const Vec2 r(z.x() - m->range, z.y());
            c += 0.5 * whiten(r, MeasurementCov::of(m->range, prob.sensor)).squaredNorm();
        }
    }
    if (odometry_weight > 0.0) {
        const Vec6 e = (prob.odometry.inverse() * (T1.inverse() * T2)).log();
        c += 0.5 * odometry_weight * e.cwiseProduct(odometry_whitener(prob.odometry_cov)).squaredNorm();
    }
    const Vec6 ep = log_residual(prob.init_T1, T1) / prob.prior_sigma;
    c += 0.5 * ep.squaredNorm();
    return c;
}

struct LmOptions {
    double initial_damping = 1e-4;
    double damping_up = 10.0;
    double damping_down = 10.0;
    double rel_tolerance = 1e-8;
    int max_iterations = 50;
    double max_damping = 1e12;
};

struct PoseEstimate {
    bool ok = false;
    std::string failure;
    Pose3 T1, T2;
    std::vector<Vec3> landmarks;
    double cost = std::numeric_limits<double>::infinity();  // C_o
    int iterations = 0;
    std::vector<double> accepted_costs;  // cost after each accepted step, initial first
};

namespace detail {

struct NormalEquations {
    Mat12 Hpp = Mat12::Zero();
    Vec12 bp = Vec12::Zero();
    std::vector<Eigen::Matrix<double, 12, 3>> Hpl;
    std::vector<Mat3> Hll;
    std::vector<Vec3> bl;
};

inline NormalEquations build_normal_equations(const Pose3& T1, const Pose3& T2, std::span<const Vec3> lm,
                                              std::span<const PairObservation> obs, const PairProblem& prob,
                                              double odometry_weight)
{
    NormalEquations ne;
    const std::size_t n = obs.size();
    ne.Hpl.assign(n, Eigen::Matrix<double, 12, 3>::Zero());
    ne.Hll.assign(n, Mat3::Zero());
    ne.bl.assign(n, Vec3::Zero());
    for (std::size_t k = 0; k < n; ++k) {
        for (const SssMeasurement* m : {&obs[k].a, &obs[k].b}) {
            const int blk = m->subframe == 0 ? 0 : 6;
            const MeasurementLinearization L = linearize_measurement(lm[k], blk == 0 ? T1 : T2, *m, prob.sensor);
            const MeasurementCov cov = MeasurementCov::of(m->range, prob.sensor);
            const Vec2 w(1.0 / std::sqrt(cov.range_var), 1.0 / std::sqrt(cov.plane_var));
            const Vec2 r = L.residual.cwiseProduct(w);
            const Mat26 Jp = w.asDiagonal() * L.d_pose;
            const Mat23 Jl = w.asDiagonal() * L.d_landmark;
            ne.Hpp.block<6, 6>(blk, blk) += Jp.transpose() * Jp;
            ne.bp.segment<6>(blk) += Jp.transpose() * r;
            ne.Hpl[k].block<6, 3>(blk, 0) += Jp.transpose() * Jl;
            ne.Hll[k] += Jl.transpose() * Jl;
            ne.bl[k] += Jl.transpose() * r;
        }
    }
    if (odometry_weight > 0.0) {
        const BetweenResidual br = between_residual(T1, T2, prob.odometry);
        const Vec6 w = odometry_whitener(prob.odometry_cov) * std::sqrt(odometry_weight);
        Eigen::Matrix<double, 6, 12> J;
        J.leftCols<6>() = w.asDiagonal() * br.d_a;
        J.rightCols<6>() = w.asDiagonal() * br.d_b;
        const Vec6 r = br.error.cwiseProduct(w);
        ne.Hpp += J.transpose() * J;
        ne.bp += J.transpose() * r;
    }
    const auto [ep, Jp] = prior_residual(T1, prob.init_T1);
    const double s = 1.0 / prob.prior_sigma;
    ne.Hpp.topLeftCorner<6, 6>() += s * s * Jp.transpose() * Jp;
    ne.bp.head<6>() += s * s * Jp.transpose() * ep;
    return ne;
}

/// Schur complement of the landmark blocks; returns false when a damped
/// landmark block is singular.
inline bool reduce(const NormalEquations& ne, double lambda, Mat12& S, Vec12& g, std::vector<Mat3>& Hll_inv)
{
    S = ne.Hpp;
    S.diagonal() += lambda * ne.Hpp.diagonal();
    g = ne.bp;
    Hll_inv.resize(ne.Hll.size());
    for (std::size_t k = 0; k < ne.Hll.size(); ++k) {
        Mat3 H = ne.Hll[k];
        H.diagonal() += lambda * ne.Hll[k].diagonal();
        Eigen::LDLT<Mat3> ldlt(H);
        if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 1e-12 * std::max(1.0, H.diagonal().maxCoeff())))
            return false;
        Hll_inv[k] = ldlt.solve(Mat3::Identity());
        const Eigen::Matrix<double, 12, 3> W = ne.Hpl[k] * Hll_inv[k];
        S -= W * ne.Hpl[k].transpose();
        g -= W * ne.bl[k];
    }
    return true;
}

}  // namespace detail

/// Levenberg-Marquardt minimization of the pairwise cost from the given
/// initial poses and landmarks.
inline PoseEstimate minimize_pairwise(const PairProblem& prob, std::span<const PairObservation> obs, Pose3 T1,
                                      Pose3 T2, std::vector<Vec3> lm, const LmOptions& opt = {},
                                      double odometry_weight = 1.0)
{
    PoseEstimate out;
    double cost = pairwise_cost(T1, T2, lm, obs, prob, odometry_weight);
    if (!std::isfinite(cost)) {
        out.failure = "non-finite initial cost";
        return out;
    }
    out.accepted_costs.push_back(cost);
    double lambda = opt.initial_damping;
    int accepted = 0;
    bool converged = cost < 1e-30;
    int it = 0;
    for (; it < opt.max_iterations && !converged; ++it) {
        const detail::NormalEquations ne = detail::build_normal_equations(T1, T2, lm, obs, prob, odometry_weight);
        bool stepped = false;
        while (!stepped && lambda <= opt.max_damping) {
            Mat12 S;
            Vec12 g;
            std::vector<Mat3> Hinv;
            if (!detail::reduce(ne, lambda, S, g, Hinv)) {
                lambda *= opt.damping_up;
                continue;
            }
            Eigen::LDLT<Mat12> ldlt(S);
            if (ldlt.info() != Eigen::Success) {
                lambda *= opt.damping_up;
                continue;
            }
            const Vec12 dp = ldlt.solve(-g);
            if (!dp.allFinite()) {
                lambda *= opt.damping_up;
                continue;
            }
            const Pose3 nT1 = T1 * Pose3::exp(dp.head<6>());
            const Pose3 nT2 = T2 * Pose3::exp(dp.tail<6>());
            std::vector<Vec3> nlm(lm.size());
            for (std::size_t k = 0; k < lm.size(); ++k)
                nlm[k] = lm[k] + Hinv[k] * (-ne.bl[k] - ne.Hpl[k].transpose() * dp);
            const double ncost = pairwise_cost(nT1, nT2, nlm, obs, prob, odometry_weight);
            if (std::isfinite(ncost) && ncost < cost) {
                const double rel = (cost - ncost) / std::max(cost, 1e-300);
                T1 = nT1;
                T2 = nT2;
                lm = std::move(nlm);
                cost = ncost;
                out.accepted_costs.push_back(cost);
                ++accepted;
                lambda = std::max(lambda / opt.damping_down, 1e-15);
                stepped = true;
                if (rel < opt.rel_tolerance || cost < 1e-30)
                    converged = true;
            } else {
                lambda *= opt.damping_up;
            }
        }
        if (!stepped) {
            // No descent direction left at any damping: a local minimum.
            converged = true;
        }
    }
    out.iterations = it;
    out.T1 = T1;
    out.T2 = T2;
    out.landmarks = std::move(lm);
    out.cost = cost;
    out.ok = true;
    (void)accepted;
    return out;
}

/// True when fewer than three distinct landmark positions exist or they are
/// (nearly) collinear in the horizontal plane.
inline bool sample_is_degenerate(std::span<const Vec3> init, double min_spread = 1e-3)
{
    std::vector<Vec2> pts;
    for (const Vec3& x : init) {
        const Vec2 p(x.x(), x.y());
        bool dup = false;
        for (const Vec2& q : pts)
            dup = dup || (p - q).norm() < 1e-6;
        if (!dup)
            pts.push_back(p);
    }
    if (pts.size() < 3)
        return true;
    Vec2 mean = Vec2::Zero();
    for (const Vec2& p : pts)
        mean += p;
    mean /= static_cast<double>(pts.size());
    Mat2 C = Mat2::Zero();
    for (const Vec2& p : pts)
        C += (p - mean) * (p - mean).transpose();
    const Eigen::SelfAdjointEigenSolver<Mat2> es(C);
    return std::sqrt(std::max(0.0, es.eigenvalues()(0))) < min_spread;
}

/// Pose estimation for a sample: landmarks from flat-floor back-projection at
/// the initial poses, then LM with T1 held by the gauge prior.
inline PoseEstimate estimate_pose(const PairProblem& prob, std::span<const PairObservation> sample,
                                  const LmOptions& opt = {})
{
    std::vector<Vec3> lm;
    lm.reserve(sample.size());
    for (const auto& o : sample)
        lm.push_back(init_landmark(o, prob.init_T1, prob.init_T2, prob.sensor));
    if (sample_is_degenerate(lm)) {
        PoseEstimate out;
        out.failure = "degenerate sample";
        return out;
    }
    return minimize_pairwise(prob, sample, prob.init_T1, prob.init_T2, std::move(lm), opt);
}

struct Triangulation {
    bool ok = false;
    Vec3 position = Vec3::Zero();
    double range_cost = std::numeric_limits<double>::infinity();  // mean |range residual|
    double plane_cost = std::numeric_limits<double>::infinity();  // mean |along-track residual|
};

/// Landmark from its two measurements with the ping poses fixed: weighted
/// Gauss-Newton from the flat-floor initialization. The solution must lie
/// below both sensors.
inline Triangulation triangulate(const PairObservation& o, const Pose3& ping_a, const Pose3& ping_b,
                                 const SensorConfig& sensor, int max_iterations = 15)
{
    Triangulation t;
    SssMeasurement ma = o.a, mb = o.b;
    ma.ping_offset = Pose3();
    mb.ping_offset = Pose3();
    Vec3 x = 0.5 * (back_project(o.a, ping_a, sensor) + back_project(o.b, ping_b, sensor));
    const MeasurementCov ca = MeasurementCov::of(o.a.range, sensor), cb = MeasurementCov::of(o.b.range, sensor);
    for (int it = 0; it < max_iterations; ++it) {
        Mat3 H = Mat3::Zero();
        Vec3 b = Vec3::Zero();
        for (int s = 0; s < 2; ++s) {
            const auto L = linearize_measurement(x, s == 0 ? ping_a : ping_b, s == 0 ? ma : mb, sensor);
            const MeasurementCov& c = s == 0 ? ca : cb;
            const Vec2 w(1.0 / std::sqrt(c.range_var), 1.0 / std::sqrt(c.plane_var));
            const Mat23 J = w.asDiagonal() * L.d_landmark;
            H += J.transpose() * J;
            b += J.transpose() * L.residual.cwiseProduct(w);
        }
        Eigen::LDLT<Mat3> ldlt(H);
        if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 1e-12 * std::max(1.0, H.diagonal().maxCoeff())))
            return t;
        const Vec3 dx = ldlt.solve(-b);
        if (!dx.allFinite())
            return t;
        x += dx;
        if (dx.norm() < 1e-10)
            break;
    }
    const Vec3 sa = (ping_a * sensor.sensor_offset).translation;
    const Vec3 sb = (ping_b * sensor.sensor_offset).translation;
    if (!x.allFinite() || x.z() >= sa.z() || x.z() >= sb.z())
        return t;
    const auto ra = linearize_measurement(x, ping_a, ma, sensor).residual;
    const auto rb = linearize_measurement(x, ping_b, mb, sensor).residual;
    t.ok = true;
    t.position = x;
    t.range_cost = 0.5 * (std::abs(ra.x()) + std::abs(rb.x()));
    t.plane_cost = 0.5 * (std::abs(ra.y()) + std::abs(rb.y()));
    return t;
}

/// Mean of the smallest `keep_fraction` of the values (failed entries are +inf).
inline double lower_trimmed_mean(std::vector<double> v, double keep_fraction)
{
    if (v.empty())
        return std::numeric_limits<double>::infinity();
    const std::size_t k = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(keep_fraction * v.size())));
    std::nth_element(v.begin(), v.begin() + (k - 1), v.end());
    std::sort(v.begin(), v.begin() + k);
    double s = 0.0;
    for (std::size_t i = 0; i < k; ++i)
        s += v[i];
    return s / static_cast<double>(k);
}

struct HoldoutCosts {
    double plane = std::numeric_limits<double>::infinity();  // C_p
    double range = std::numeric_limits<double>::infinity();  // C_r
};

/// Triangulates every holdout observation under the hypothesized poses and
/// aggregates the per-landmark residual costs with a lower-trimmed mean.
inline HoldoutCosts hypothesis_check(const Pose3& T1, const Pose3& T2, std::span<const PairObservation> holdout,
                                     const SensorConfig& sensor, double keep_fraction = 0.25)
{
    std::vector<double> cr, cp;
    cr.reserve(holdout.size());
    cp.reserve(holdout.size());
    for (const auto& o : holdout) {
        const Triangulation t = triangulate(o, T1 * o.a.ping_offset, T2 * o.b.ping_offset, sensor);
        cr.push_back(t.ok ? t.range_cost : std::numeric_limits<double>::infinity());
        cp.push_back(t.ok ? t.plane_cost : std::numeric_limits<double>::infinity());
    }
    return {lower_trimmed_mean(std::move(cp), keep_fraction), lower_trimmed_mean(std::move(cr), keep_fraction)};
}

/// Information of the second pose's right perturbation with the landmarks
/// and the first pose marginalized out.
inline Mat6 relative_pose_information(const PairProblem& prob, std::span<const PairObservation> obs,
                                      const Pose3& T1, const Pose3& T2, std::span<const Vec3> lm,
                                      double odometry_weight)
{
    const detail::NormalEquations ne = detail::build_normal_equations(T1, T2, lm, obs, prob, odometry_weight);
    Mat12 S;
    Vec12 g;
    std::vector<Mat3> Hinv;
    if (!detail::reduce(ne, 0.0, S, g, Hinv))
        return Mat6::Zero();
    const Mat6 A = S.topLeftCorner<6, 6>(), B = S.topRightCorner<6, 6>(), D = S.bottomRightCorner<6, 6>();
    Mat6 info = D - B.transpose() * A.ldlt().solve(B);
    return 0.5 * (info + info.transpose());
}

struct RansacParams {
    int max_iters = 200;
    int subset_size = 6;
    double range_thresh = 0.3;   // edge filter on C_r
    double plane_thresh = 0.5;   // edge filter on C_p
    double keep_fraction = 0.25; // lower-trimmed mean for C_p and C_r
    int holdout_cap = 2000;
    bool refine = true;
    int refine_rounds = 5;
    double inlier_range_thresh = 0.1;
    double inlier_plane_thresh = 0.3;
    int refine_cap = 4000;
    double covariance_odometry_weight = 0.01;
    std::uint64_t seed = 1;
    LmOptions lm;

    void validate() const
    {
        if (subset_size < 3 || max_iters < 1 || !(range_thresh > 0) || !(plane_thresh > 0) ||
            !(keep_fraction > 0 && keep_fraction <= 1) || holdout_cap < 1)
            throw std::invalid_argument("invalid RANSAC parameters");
    }
};

struct LoopClosureEdge {
    std::int64_t i = 0;  // node id of the first subframe
    std::int64_t j = 0;  // node id of the second subframe
    Pose3 relative;      // T_i^-1 T_j
    Mat6 covariance = Mat6::Identity();
    double plane_cost = 0.0;  // C_p
    double range_cost = 0.0;  // C_r
    double opt_cost = 0.0;    // C_o
    int inliers = 0;
};

struct RansacUpdate {
    int hypothesis = 0;
    double plane_cost = 0.0, range_cost = 0.0, opt_cost = 0.0;
};

struct RansacResult {
    bool accepted = false;
    std::string reason;
    LoopClosureEdge edge;
    Pose3 T1, T2;
    std::vector<RansacUpdate> history;
    int failed_hypotheses = 0;
    bool refined = false;
};

/// Algorithm: sample, estimate, score on the holdout; the best model is
/// replaced only when C_p, C_r and C_o all strictly decrease. The winner is
/// optionally refit on its inliers (kept only if the holdout costs do not
/// grow) and filtered by the C_r / C_p thresholds.
inline RansacResult ransac_estimate(const PairProblem& prob, std::span<const PairObservation> obs,
                                    const RansacParams& params = {})
{
    params.validate();
    RansacResult res;
    const int n = static_cast<int>(obs.size());
    if (n < params.subset_size) {
        res.reason = "too few correspondences";
        return res;
    }
    // Fixed, evenly spaced holdout pool; each hypothesis excludes its sample.
    std::vector<int> pool;
    const int pool_size = std::min(n, params.holdout_cap + params.subset_size);
    for (int i = 0; i < pool_size; ++i)
        pool.push_back(static_cast<int>(static_cast<long long>(i) * n / pool_size));

    struct Hyp {
        PoseEstimate est;
        HoldoutCosts costs;
        bool ok = false;
    };
    std::vector<Hyp> hyps(params.max_iters);
    parallel_for(0, params.max_iters, [&](int h) {
        Rng rng(stream_seed(params.seed, 0x52414e, static_cast<std::uint64_t>(h)));
        std::vector<int> idx;
        while (static_cast<int>(idx.size()) < params.subset_size) {
            const int k = rng.uniform_int(0, n - 1);
            if (std::find(idx.begin(), idx.end(), k) == idx.end())
                idx.push_back(k);
        }
        std::sort(idx.begin(), idx.end());
        std::vector<PairObservation> sample;
        for (int k : idx)
            sample.push_back(obs[k]);
        Hyp& H = hyps[h];
        H.est = estimate_pose(prob, sample, params.lm);
        if (!H.est.ok)
            return;
        std::vector<PairObservation> holdout;
        holdout.reserve(pool.size());
        for (int k : pool)
            if (!std::binary_search(idx.begin(), idx.end(), k))
                holdout.push_back(obs[k]);
        if (static_cast<int>(holdout.size()) > params.holdout_cap)
            holdout.resize(params.holdout_cap);
        H.costs = hypothesis_check(H.est.T1, H.est.T2, holdout, prob.sensor, params.keep_fraction);
        H.ok = true;
    });

    double bp = std::numeric_limits<double>::infinity(), br = bp, bo = bp;
    int best = -1;
    for (int h = 0; h < params.max_iters; ++h) {
        const Hyp& H = hyps[h];
        if (!H.ok) {
            ++res.failed_hypotheses;
            continue;
        }
        if (H.costs.plane < bp && H.costs.range < br && H.est.cost < bo) {
            bp = H.costs.plane;
            br = H.costs.range;
            bo = H.est.cost;
            best = h;
            res.history.push_back({h, bp, br, bo});
        }
    }
    if (best < 0) {
        res.reason = "all hypotheses failed";
        return res;
    }
    Pose3 T1 = hyps[best].est.T1, T2 = hyps[best].est.T2;

    // Inliers of the current model, used for the refit and the covariance.
    std::vector<PairObservation> inl;
    std::vector<Vec3> inl_lm;
    const int rc = std::min(n, params.refine_cap);
    auto collect_inliers = [&] {
        inl.clear();
        inl_lm.clear();
        for (int i = 0; i < rc; ++i) {
            const auto& o = obs[static_cast<int>(static_cast<long long>(i) * n / rc)];
            const Triangulation t = triangulate(o, T1 * o.a.ping_offset, T2 * o.b.ping_offset, prob.sensor);
            if (t.ok && t.range_cost <= params.inlier_range_thresh && t.plane_cost <= params.inlier_plane_thresh) {
                inl.push_back(o);
                inl_lm.push_back(t.position);
            }
        }
    };
    collect_inliers();
    if (params.refine) {
        std::vector<PairObservation> holdout;
        for (int k : pool)
            holdout.push_back(obs[k]);
        if (static_cast<int>(holdout.size()) > params.holdout_cap)
            holdout.resize(params.holdout_cap);
        HoldoutCosts hb = hypothesis_check(T1, T2, holdout, prob.sensor, params.keep_fraction);
        // Each round refits on the inliers of the previous model and is kept
        // only if neither holdout cost grows.
        for (int round = 0; round < params.refine_rounds && static_cast<int>(inl.size()) >= params.subset_size;
             ++round) {
            const PoseEstimate ref = minimize_pairwise(prob, inl, T1, T2, inl_lm, params.lm);
            if (!ref.ok)
                break;
            const HoldoutCosts hr = hypothesis_check(ref.T1, ref.T2, holdout, prob.sensor, params.keep_fraction);
            if (!(hr.plane <= hb.plane && hr.range <= hb.range))
                break;
            const bool moved = log_residual(T2, ref.T2).norm() > 1e-9;
            T1 = ref.T1;
            T2 = ref.T2;
            hb = hr;
            res.refined = true;
            collect_inliers();
            if (!moved)
                break;
        }
    }
    res.T1 = T1;
    res.T2 = T2;
    res.edge.relative = T1.inverse() * T2;
    res.edge.plane_cost = bp;
    res.edge.range_cost = br;
    res.edge.opt_cost = bo;
    res.edge.inliers = static_cast<int>(inl.size());

    const std::vector<PairObservation>* cov_obs = &inl;
    std::vector<PairObservation> sample_obs;
    std::vector<Vec3> cov_lm = inl_lm;
    if (inl.empty()) {
        sample_obs = {};
        cov_lm.clear();
        cov_obs = &sample_obs;
    }
    Mat6 info = relative_pose_information(prob, *cov_obs, T1, T2, cov_lm, params.covariance_odometry_weight);
    Eigen::LDLT<Mat6> ldlt(info);
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0.0)) {
        res.reason = "singular edge information";
        return res;
    }
    Mat6 cov = ldlt.solve(Mat6::Identity());
    res.edge.covariance = 0.5 * (cov + cov.transpose());

    if (!(br <= params.range_thresh) || !(bp <= params.plane_thresh)) {
        res.reason = "rejected by cost thresholds";
        return res;
    }
    res.accepted = true;
    return res;
}

/// `i, j, tx, ty, tz, qw, qx, qy, qz, <21 upper-triangular covariance>, C_p, C_r, C_o`
inline void write_edge(std::ostream& os, const LoopClosureEdge& e)
{
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    os << e.i << ',' << e.j << ',';
    write_pose_fields(os, e.relative);
    for (int r = 0; r < 6; ++r)
        for (int c = r; c < 6; ++c)
            os << ',' << e.covariance(r, c);
    os << ',' << e.plane_cost << ',' << e.range_cost << ',' << e.opt_cost << '\n';
}

inline LoopClosureEdge parse_edge(const std::string& line)
{
    const auto f = split_csv(line);
    if (f.size() != 2 + 7 + 21 + 3)
        throw std::runtime_error("edge record must have 33 fields");
    LoopClosureEdge e;
    e.i = std::stoll(f[0]);
    e.j = std::stoll(f[1]);
    e.relative = parse_pose_fields(f, 2);
    int k = 9;
    for (int r = 0; r < 6; ++r)
        for (int c = r; c < 6; ++c) {
            e.covariance(r, c) = e.covariance(c, r) = std::stod(f[k++]);
        }
    e.plane_cost = std::stod(f[k++]);
    e.range_cost = std::stod(f[k++]);
    e.opt_cost = std::stod(f[k++]);
    return e;
}

}  // namespace sss
