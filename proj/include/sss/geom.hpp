#pragma once

// Rigid-body geometry: SE(3) poses with a rotation-first 6-DoF tangent
// parameterization, the associated Jacobians, and the global -> sensor
// transform chain used by the side-scan measurement model.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sss {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat6 = Eigen::Matrix<double, 6, 6>;

inline Mat3 hat(const Vec3& w)
{
    Mat3 m;
    m << 0.0, -w.z(), w.y(),
         w.z(), 0.0, -w.x(),
         -w.y(), w.x(), 0.0;
    return m;
}

inline Vec3 vee(const Mat3& m)
{
    return Vec3(m(2, 1), m(0, 2), m(1, 0));
}

inline Mat3 so3_exp(const Vec3& w)
{
    const double theta2 = w.squaredNorm();
    const Mat3 W = hat(w);
    if (theta2 < 1e-16)
        return Mat3::Identity() + W + 0.5 * W * W;
    const double theta = std::sqrt(theta2);
    return Mat3::Identity() + (std::sin(theta) / theta) * W +
           ((1.0 - std::cos(theta)) / theta2) * W * W;
}

inline Vec3 so3_log(const Mat3& R)
{
    const double c = std::clamp(0.5 * (R.trace() - 1.0), -1.0, 1.0);
    const double theta = std::acos(c);
    if (theta < 1e-8)
        return 0.5 * vee(R - R.transpose());
    if (M_PI - theta < 1e-6) {
        // Near pi the antisymmetric part vanishes; recover the axis from the
        // symmetric part instead.
        const Mat3 B = 0.5 * (R + Mat3::Identity());
        int k = 0;
        B.diagonal().maxCoeff(&k);
        Vec3 axis = B.col(k) / std::sqrt(std::max(B(k, k), 1e-300));
        axis.normalize();
        Vec3 w = theta * axis;
        // Fix the sign using the (small) antisymmetric part when available.
        const Vec3 s = vee(R - R.transpose());
        if (s.dot(w) < 0.0)
            w = -w;
        return w;
    }
    return (theta / (2.0 * std::sin(theta))) * vee(R - R.transpose());
}

/// Left Jacobian of SO(3).
inline Mat3 so3_left_jacobian(const Vec3& w)
{
    const double theta2 = w.squaredNorm();
    const Mat3 W = hat(w);
    if (theta2 < 1e-10)
        return Mat3::Identity() + 0.5 * W + (1.0 / 6.0) * W * W;
    const double theta = std::sqrt(theta2);
    return Mat3::Identity() + ((1.0 - std::cos(theta)) / theta2) * W +
           ((theta - std::sin(theta)) / (theta2 * theta)) * W * W;
}

inline Mat3 so3_left_jacobian_inverse(const Vec3& w)
{
    const double theta2 = w.squaredNorm();
    const Mat3 W = hat(w);
    if (theta2 < 1e-10)
        return Mat3::Identity() - 0.5 * W + (1.0 / 12.0) * W * W;
    const double theta = std::sqrt(theta2);
    const double k = 1.0 / theta2 - (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
    return Mat3::Identity() - 0.5 * W + k * W * W;
}

/// Rigid transform in 3-D. Maps points from the local frame into the parent
/// frame: p_parent = rotation * p_local + translation.
struct Pose3 {
    Mat3 rotation = Mat3::Identity();
    Vec3 translation = Vec3::Zero();

    Pose3() = default;
    Pose3(const Mat3& r, const Vec3& t) : rotation(r), translation(t) {}

    static Pose3 identity() { return {}; }

    static Pose3 translate(double x, double y, double z)
    {
        return {Mat3::Identity(), Vec3(x, y, z)};
    }

    /// Z-Y-X intrinsic yaw, pitch, roll (radians).
    static Pose3 from_ypr(double yaw, double pitch, double roll, const Vec3& t = Vec3::Zero())
    {
        const Mat3 r = (Eigen::AngleAxisd(yaw, Vec3::UnitZ()) *
                        Eigen::AngleAxisd(pitch, Vec3::UnitY()) *
                        Eigen::AngleAxisd(roll, Vec3::UnitX()))
                           .toRotationMatrix();
        return {r, t};
    }

    static Pose3 from_quaternion(double qw, double qx, double qy, double qz, const Vec3& t)
    {
        Eigen::Quaterniond q(qw, qx, qy, qz);
        if (!(q.norm() > 0.0))
            throw std::invalid_argument("zero quaternion");
        q.normalize();
        return {q.toRotationMatrix(), t};
    }

    /// Unit quaternion with non-negative scalar part.
    Eigen::Quaterniond quaternion() const
    {
        Eigen::Quaterniond q(rotation);
        q.normalize();
        if (q.w() < 0.0)
            q.coeffs() *= -1.0;
        return q;
    }

    double yaw() const { return std::atan2(rotation(1, 0), rotation(0, 0)); }

    Pose3 inverse() const
    {
        const Mat3 rt = rotation.transpose();
        return {rt, -rt * translation};
    }

    Vec3 operator*(const Vec3& p) const { return rotation * p + translation; }

    Pose3 operator*(const Pose3& b) const
    {
        return {rotation * b.rotation, rotation * b.translation + translation};
    }

    /// Exponential map; xi = (rotation, translation).
    static Pose3 exp(const Vec6& xi)
    {
        const Vec3 phi = xi.head<3>();
        const Vec3 rho = xi.tail<3>();
        return {so3_exp(phi), so3_left_jacobian(phi) * rho};
    }

    Vec6 log() const
    {
        const Vec3 phi = so3_log(rotation);
        Vec6 xi;
        xi.head<3>() = phi;
        xi.tail<3>() = so3_left_jacobian_inverse(phi) * translation;
        return xi;
    }

    /// Adjoint in rotation-first ordering: Ad(T) exp(xi) = T exp(xi) T^-1.
    Mat6 adjoint() const
    {
        Mat6 ad = Mat6::Zero();
        ad.topLeftCorner<3, 3>() = rotation;
        ad.bottomRightCorner<3, 3>() = rotation;
        ad.bottomLeftCorner<3, 3>() = hat(translation) * rotation;
        return ad;
    }

    /// Re-orthonormalizes the rotation (SVD projection).
    void normalize()
    {
        Eigen::JacobiSVD<Mat3> svd(rotation, Eigen::ComputeFullU | Eigen::ComputeFullV);
        Mat3 r = svd.matrixU() * svd.matrixV().transpose();
        if (r.determinant() < 0.0) {
            Mat3 u = svd.matrixU();
            u.col(2) *= -1.0;
            r = u * svd.matrixV().transpose();
        }
        rotation = r;
    }

    bool is_valid(double tol = 1e-9) const
    {
        return (rotation * rotation.transpose() - Mat3::Identity()).cwiseAbs().maxCoeff() < tol &&
               std::abs(rotation.determinant() - 1.0) < tol && translation.allFinite();
    }
};

inline Pose3 compose(const Pose3& a, const Pose3& b) { return a * b; }
inline Pose3 inverse(const Pose3& a) { return a.inverse(); }

/// Tangent-space residual log(a^-1 b), rotation first.
inline Vec6 log_residual(const Pose3& a, const Pose3& b) { return (a.inverse() * b).log(); }

/// Left Jacobian of SE(3) in rotation-first ordering.
inline Mat6 se3_left_jacobian(const Vec6& xi)
{
    const Vec3 phi = xi.head<3>();
    const Vec3 rho = xi.tail<3>();
    const double theta2 = phi.squaredNorm();
    const double theta = std::sqrt(theta2);

    double c1, c2, c3;
    if (theta < 1e-2) {
        c1 = 1.0 / 6.0 - theta2 / 120.0;
        c2 = 1.0 / 24.0 - theta2 / 720.0;
        c3 = 1.0 / 120.0 - theta2 / 2520.0;
    } else {
        const double s = std::sin(theta);
        const double c = std::cos(theta);
        const double t4 = theta2 * theta2;
        c1 = (theta - s) / (theta2 * theta);
        c2 = (theta2 + 2.0 * c - 2.0) / (2.0 * t4);
        c3 = (2.0 * theta - 3.0 * s + theta * c) / (2.0 * t4 * theta);
    }
    const Mat3 P = hat(phi);
    const Mat3 R = hat(rho);
    const Mat3 PR = P * R;
    const Mat3 RP = R * P;
    const Mat3 PRP = PR * P;
    const Mat3 Q = 0.5 * R + c1 * (PR + RP + PRP) + c2 * (P * PR + RP * P - 3.0 * PRP) +
                   c3 * (PRP * P + P * PRP);

    const Mat3 J = so3_left_jacobian(phi);
    Mat6 out = Mat6::Zero();
    out.topLeftCorner<3, 3>() = J;
    out.bottomRightCorner<3, 3>() = J;
    out.bottomLeftCorner<3, 3>() = Q;
    return out;
}

inline Mat6 se3_right_jacobian(const Vec6& xi) { return se3_left_jacobian(-xi); }

inline Mat6 se3_right_jacobian_inverse(const Vec6& xi)
{
    const Mat6 J = se3_right_jacobian(xi);
    const Mat3 Ji = J.topLeftCorner<3, 3>().inverse();
    Mat6 out = Mat6::Zero();
    out.topLeftCorner<3, 3>() = Ji;
    out.bottomRightCorner<3, 3>() = Ji;
    out.bottomLeftCorner<3, 3>() = -Ji * J.bottomLeftCorner<3, 3>() * Ji;
    return out;
}

/// Relative-pose residual e = log(measured^-1 * a^-1 * b) together with its
/// Jacobians with respect to right perturbations a*exp(da), b*exp(db).
struct BetweenResidual {
    Vec6 error;
    Mat6 d_a;
    Mat6 d_b;
};

inline BetweenResidual between_residual(const Pose3& a, const Pose3& b, const Pose3& measured)
{
    const Pose3 rel = a.inverse() * b;
    BetweenResidual out;
    out.error = (measured.inverse() * rel).log();
    const Mat6 jri = se3_right_jacobian_inverse(out.error);
    out.d_b = jri;
    out.d_a = -jri * rel.inverse().adjoint();
    return out;
}

/// Prior residual e = log(prior^-1 * x) and its Jacobian.
inline std::pair<Vec6, Mat6> prior_residual(const Pose3& x, const Pose3& prior)
{
    const Vec6 e = (prior.inverse() * x).log();
    return {e, se3_right_jacobian_inverse(e)};
}

struct Landmark {
    Vec3 position = Vec3::Zero();
    bool is_valid() const { return position.allFinite(); }
};

/// Side-scan sensor description. Body frame: x forward, y port, z up.
/// Sensor frame shares the body axes; x is the sonar-array axis.
struct SensorConfig {
    Pose3 sensor_offset;        // body -> sensor
    double beam_width_alpha = 0.1;  // rad
    double range_sigma = 0.1;       // m
    double max_range = 60.0;        // m
    int bins_per_side = 600;

    void validate() const
    {
        if (!(beam_width_alpha > 0.0) || !(range_sigma > 0.0) || !(max_range > 0.0) || bins_per_side <= 0)
            throw std::invalid_argument("invalid sensor configuration");
    }
    double slant_resolution() const { return max_range / bins_per_side; }
};

/// Global point -> sensor frame through the subframe centre pose, the centre
/// to ping offset and the fixed body to sensor offset.
inline Vec3 global_to_sensor(const Vec3& x, const Pose3& centre_pose, const Pose3& centre_to_ping,
                             const Pose3& sensor_offset)
{
    return sensor_offset.inverse() * (centre_to_ping.inverse() * (centre_pose.inverse() * x));
}

inline Vec3 sensor_to_global(const Vec3& xs, const Pose3& centre_pose, const Pose3& centre_to_ping,
                             const Pose3& sensor_offset)
{
    return centre_pose * (centre_to_ping * (sensor_offset * xs));
}

}  // namespace sss
