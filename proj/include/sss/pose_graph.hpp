#pragma once

// Global pose graph over subframe centre poses: a dead-reckoning odometry
// chain, loop-closure chords and a constant prior on the first node, solved by
// dense Levenberg-Marquardt warm-started from the current estimate.

#include "sss/geom.hpp"
#include "sss/sonar_image.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <map>
#include <numeric>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sss {

struct PoseNode {
    std::int64_t id = 0;
    Pose3 pose;
    bool is_anchor = false;
};

struct OdometryFactor {
    std::int64_t from = 0;
    std::int64_t to = 0;
    Pose3 measurement;  // T_from^-1 T_to
    Mat6 covariance = Mat6::Identity();
};

struct LoopFactor {
    std::int64_t from = 0;
    std::int64_t to = 0;
    Pose3 measurement;
    Mat6 covariance = Mat6::Identity();
};

struct GraphOptions {
    double initial_damping = 1e-4;
    double damping_factor = 10.0;
    double rel_tolerance = 1e-14;
    double gradient_tolerance = 1e-9;
    int max_iterations = 100;
    double max_damping = 1e12;
};

struct GraphReport {
    int iterations = 0;
    double initial_cost = 0.0;
    double final_cost = 0.0;
    double gradient_norm = 0.0;
    std::vector<double> accepted_costs;  // initial cost first
};

class PoseGraph {
public:
    explicit PoseGraph(double anchor_sigma = 1e-9) : anchor_sigma_(anchor_sigma) {}

    /// Nodes must arrive with strictly increasing ids; the first is the anchor
    /// and its prior mean is the pose given here.
    void add_node(std::int64_t id, const Pose3& pose)
    {
        if (!nodes_.empty() && id <= nodes_.back().id)
            throw std::invalid_argument("pose graph node ids must be strictly increasing");
        index_[id] = nodes_.size();
        nodes_.push_back({id, pose, nodes_.empty()});
        if (nodes_.size() == 1)
            anchor_prior_ = pose;
    }

    /// Chains `to` after `from`. A missing `to` is created at pose(from) * measurement.
    void add_odometry(const OdometryFactor& f)
    {
        if (!has_node(f.from))
            throw std::invalid_argument("odometry from unknown node " + std::to_string(f.from));
        if (!has_node(f.to))
            add_node(f.to, pose(f.from) * f.measurement);
        if (index_.at(f.to) != index_.at(f.from) + 1)
            throw std::invalid_argument("odometry must connect consecutive nodes");
        for (const auto& o : odometry_)
            if (o.from == f.from)
                throw std::invalid_argument("duplicate odometry factor from node " + std::to_string(f.from));
        check_covariance(f.covariance);
        odometry_.push_back(f);
    }

    void add_loop_closure(const LoopFactor& f)
    {
        if (f.from == f.to)
            throw std::invalid_argument("self-loop rejected");
        if (!has_node(f.from) || !has_node(f.to))
            throw std::invalid_argument("loop closure between unknown nodes");
        check_covariance(f.covariance);
        loops_.push_back(f);
    }

    bool has_node(std::int64_t id) const { return index_.count(id) != 0; }
    const Pose3& pose(std::int64_t id) const { return nodes_.at(index_.at(id)).pose; }
    void set_pose(std::int64_t id, const Pose3& p) { nodes_.at(index_.at(id)).pose = p; }
    const std::vector<PoseNode>& nodes() const { return nodes_; }
    const std::vector<OdometryFactor>& odometry() const { return odometry_; }
    const std::vector<LoopFactor>& loops() const { return loops_; }
    std::size_t size() const { return nodes_.size(); }
    double anchor_sigma() const { return anchor_sigma_; }

    /// Squared Mahalanobis norm of each loop-closure residual at the current
    /// poses, in insertion order.
    std::vector<double> loop_chi2() const
    {
        std::vector<double> out;
        out.reserve(loops_.size());
        for (const auto& f : loops_) {
            const Vec6 e = (f.measurement.inverse() * (pose(f.from).inverse() * pose(f.to))).log();
            out.push_back(e.dot(information(f.covariance) * e));
        }
        return out;
    }

    /// Half the sum of squared whitened residuals of all factors.
    double cost() const { return cost_of(poses()); }

    /// LM from the current poses. The anchor prior is handled as its
    /// zero-variance limit: the anchor is held at the prior mean.
    GraphReport optimize(const GraphOptions& opt = {})
    {
        GraphReport rep;
        if (nodes_.empty())
            return rep;
        check_connected();
        nodes_[0].pose = anchor_prior_;
        std::vector<Pose3> x = poses();
        const int nv = static_cast<int>(nodes_.size()) - 1;
        double cost = cost_of(x);
        rep.initial_cost = cost;
        rep.accepted_costs.push_back(cost);
        if (nv == 0) {
            rep.final_cost = cost;
            return rep;
        }
        double lambda = opt.initial_damping;
        Eigen::MatrixXd H;
        Eigen::VectorXd g;
        linearize(x, H, g);
        int it = 0;
        for (; it < opt.max_iterations; ++it) {
            if (g.lpNorm<Eigen::Infinity>() < opt.gradient_tolerance)
                break;
            bool stepped = false;
            bool done = false;
            while (!stepped && lambda <= opt.max_damping) {
                Eigen::MatrixXd A = H;
                A.diagonal() += lambda * H.diagonal().cwiseMax(1e-12);
                Eigen::LDLT<Eigen::MatrixXd> ldlt(A);
                const Eigen::VectorXd dx = ldlt.solve(-g);
                if (ldlt.info() != Eigen::Success || !dx.allFinite()) {
                    lambda *= opt.damping_factor;
                    continue;
                }
                std::vector<Pose3> nx = x;
                for (int v = 0; v < nv; ++v)
                    nx[v + 1] = x[v + 1] * Pose3::exp(dx.segment<6>(6 * v));
                const double nc = cost_of(nx);
                if (std::isfinite(nc) && nc < cost) {
                    const double rel = (cost - nc) / std::max(cost, 1e-300);
                    x = std::move(nx);
                    cost = nc;
                    rep.accepted_costs.push_back(cost);
                    lambda = std::max(lambda / opt.damping_factor, 1e-15);
                    stepped = true;
                    linearize(x, H, g);
                    done = rel < opt.rel_tolerance || dx.norm() < 1e-15;
                } else {
                    lambda *= opt.damping_factor;
                }
            }
            if (!stepped || done) {
                ++it;
                break;
            }
        }
        for (std::size_t i = 0; i < nodes_.size(); ++i)
            nodes_[i].pose = x[i];
        rep.iterations = it;
        rep.final_cost = cost;
        rep.gradient_norm = g.norm();
        return rep;
    }

    /// `VERTEX id tx ty tz qw qx qy qz` and
    /// `EDGE id1 id2 tx ty tz qw qx qy qz <21 upper-triangular information>`.
    void write(std::ostream& os) const
    {
        os << std::setprecision(std::numeric_limits<double>::max_digits10);
        for (const auto& n : nodes_) {
            const Eigen::Quaterniond q = n.pose.quaternion();
            const Vec3& t = n.pose.translation;
            os << "VERTEX " << n.id << ' ' << t.x() << ' ' << t.y() << ' ' << t.z() << ' ' << q.w() << ' ' << q.x()
               << ' ' << q.y() << ' ' << q.z() << '\n';
        }
        auto edge = [&](std::int64_t a, std::int64_t b, const Pose3& m, const Mat6& cov) {
            const Eigen::Quaterniond q = m.quaternion();
            const Vec3& t = m.translation;
            os << "EDGE " << a << ' ' << b << ' ' << t.x() << ' ' << t.y() << ' ' << t.z() << ' ' << q.w() << ' '
               << q.x() << ' ' << q.y() << ' ' << q.z();
            const Mat6 info = information(cov);
            for (int r = 0; r < 6; ++r)
                for (int c = r; c < 6; ++c)
                    os << ' ' << info(r, c);
            os << '\n';
        };
        for (const auto& f : odometry_)
            edge(f.from, f.to, f.measurement, f.covariance);
        for (const auto& f : loops_)
            edge(f.from, f.to, f.measurement, f.covariance);
    }

private:
    static Mat6 information(const Mat6& cov)
    {
        Mat6 info = cov.ldlt().solve(Mat6::Identity());
        return 0.5 * (info + info.transpose());
    }

    static void check_covariance(const Mat6& cov)
    {
        Eigen::LLT<Mat6> llt(0.5 * (cov + cov.transpose()));
        if (!cov.allFinite() || llt.info() != Eigen::Success)
            throw std::invalid_argument("factor covariance must be symmetric positive definite");
    }

    std::vector<Pose3> poses() const
    {
        std::vector<Pose3> x;
        x.reserve(nodes_.size());
        for (const auto& n : nodes_)
            x.push_back(n.pose);
        return x;
    }

    template <typename F>
    void for_each_factor(F&& fn) const
    {
        for (const auto& f : odometry_)
            fn(index_.at(f.from), index_.at(f.to), f.measurement, f.covariance);
        for (const auto& f : loops_)
            fn(index_.at(f.from), index_.at(f.to), f.measurement, f.covariance);
    }

    double cost_of(const std::vector<Pose3>& x) const
    {
        if (x.empty())
            return 0.0;
        double c = 0.0;
        for_each_factor([&](std::size_t a, std::size_t b, const Pose3& m, const Mat6& cov) {
            const Vec6 e = (m.inverse() * (x[a].inverse() * x[b])).log();
            c += 0.5 * e.dot(information(cov) * e);
        });
        const Vec6 ep = log_residual(anchor_prior_, x[0]) / anchor_sigma_;
        return c + 0.5 * ep.squaredNorm();
    }

    /// Gauss-Newton system over all non-anchor nodes.
    void linearize(const std::vector<Pose3>& x, Eigen::MatrixXd& H, Eigen::VectorXd& g) const
    {
        const int nv = static_cast<int>(x.size()) - 1;
        H.setZero(6 * nv, 6 * nv);
        g.setZero(6 * nv);
        for_each_factor([&](std::size_t a, std::size_t b, const Pose3& m, const Mat6& cov) {
            const BetweenResidual br = between_residual(x[a], x[b], m);
            const Mat6 info = information(cov);
            const int ia = static_cast<int>(a) - 1, ib = static_cast<int>(b) - 1;
            const Mat6* J[2] = {&br.d_a, &br.d_b};
            const int idx[2] = {ia, ib};
            for (int s = 0; s < 2; ++s) {
                if (idx[s] < 0)
                    continue;
                g.segment<6>(6 * idx[s]) += J[s]->transpose() * info * br.error;
                for (int t = 0; t < 2; ++t)
                    if (idx[t] >= 0)
                        H.block<6, 6>(6 * idx[s], 6 * idx[t]) += J[s]->transpose() * info * *J[t];
            }
        });
    }

    void check_connected() const
    {
        std::vector<std::size_t> parent(nodes_.size());
        std::iota(parent.begin(), parent.end(), std::size_t{0});
        auto find = [&](std::size_t i) {
            while (parent[i] != i)
                i = parent[i] = parent[parent[i]];
            return i;
        };
        for_each_factor([&](std::size_t a, std::size_t b, const Pose3&, const Mat6&) { parent[find(a)] = find(b); });
        const std::size_t root = find(0);
        std::string missing;
        for (std::size_t i = 0; i < nodes_.size(); ++i)
            if (find(i) != root)
                missing += (missing.empty() ? "" : " ") + std::to_string(nodes_[i].id);
        if (!missing.empty())
            throw std::runtime_error("pose graph disconnected from the anchor; nodes: " + missing);
    }

    double anchor_sigma_;
    Pose3 anchor_prior_;
    std::vector<PoseNode> nodes_;
    std::map<std::int64_t, std::size_t> index_;
    std::vector<OdometryFactor> odometry_;
    std::vector<LoopFactor> loops_;
};

}  // namespace sss
