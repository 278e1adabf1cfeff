#pragma once

// Dense nearest-neighbour-field matching between two canonical side-scan
// images: geometric initialization from geo-referenced pixels, then rounds of
// ZNCC random search and 8-neighbourhood propagation.

#include "sss/kdtree.hpp"
#include "sss/parallel.hpp"
#include "sss/raster.hpp"
#include "sss/sonar_image.hpp"

#include <cmath>
#include <cstdint>
#include <iomanip>
#include <limits>
#include <ostream>
#include <span>
#include <stdexcept>
#include <vector>

namespace sss {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

struct Offset {
    int dr = 0;
    int dc = 0;
    bool operator==(const Offset&) const = default;
};

struct Nnf {
    Raster<Offset> offsets;
    Raster<double> distances;
    Mask active;  // pixels that received a geometric initialization

    int rows() const { return offsets.rows(); }
    int cols() const { return offsets.cols(); }
    std::size_t active_count() const
    {
        std::size_t n = 0;
        for (auto v : active.data())
            n += v != 0;
        return n;
    }
    bool empty() const { return active_count() == 0; }
};

struct MatchParams {
    int patch_size = 13;
    int max_iters = 10;
    int max_offset = 5;
    int kd_leaf = 8;
    double max_geo_gap = 1.0;  // m; pixels farther than this from any B pixel are not matched
    std::uint64_t seed = 1;

    void validate() const
    {
        if (patch_size < 3 || patch_size % 2 == 0)
            throw std::invalid_argument("patch_size must be odd and >= 3");
        if (max_offset < 1)
            throw std::invalid_argument("max_offset must be >= 1");
        if (max_iters < 0 || kd_leaf < 1)
            throw std::invalid_argument("invalid matching parameters");
    }
};

struct Correspondence {
    int a_row = 0, a_col = 0;
    int b_row = 0, b_col = 0;
    double distance = 0.0;
    bool operator==(const Correspondence&) const = default;
};

/// 1 - ZNCC of two equal-size patches; +inf when either has zero variance.
inline double zncc_distance(std::span<const double> a, std::span<const double> b)
{
    if (a.size() != b.size() || a.empty())
        throw std::invalid_argument("zncc_distance: patch size mismatch");
    const double n = static_cast<double>(a.size());
    double ma = 0.0, mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double sab = 0.0, saa = 0.0, sbb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double da = a[i] - ma;
        const double db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (!(saa > 0.0) || !(sbb > 0.0))
        return kInf;
    const double z = sab / std::sqrt(saa * sbb);
    return std::clamp(1.0 - z, 0.0, 2.0);
}

/// Per-pixel patch statistics. A patch is valid when it lies inside the image,
/// contains no masked pixel and has nonzero variance.
struct PatchStats {
    int half = 0;
    Raster<double> mean;
    Raster<double> norm;  // sqrt(sum (x - mean)^2)
    Mask valid;
};

inline PatchStats compute_patch_stats(const Raster<double>& img, const Mask& mask, int patch_size)
{
    const int rows = img.rows(), cols = img.cols();
    const int h = patch_size / 2;
    const int n = patch_size * patch_size;
    // Integral image of masked-pixel counts, one leading row/column of zeros.
    Raster<int> sm(rows + 1, cols + 1, 0);
    for (int r = 0; r < rows; ++r) {
        int am = 0;
        for (int c = 0; c < cols; ++c) {
            am += (mask.empty() || mask(r, c)) ? 0 : 1;
            sm(r + 1, c + 1) = sm(r, c + 1) + am;
        }
    }
    PatchStats st;
    st.half = h;
    st.mean = Raster<double>(rows, cols, 0.0);
    st.norm = Raster<double>(rows, cols, 0.0);
    st.valid = Mask(rows, cols, 0);
    for (int r = h; r < rows - h; ++r) {
        for (int c = h; c < cols - h; ++c) {
            const int r0 = r - h, r1 = r + h + 1, c0 = c - h, c1 = c + h + 1;
            const int bad = sm(r1, c1) - sm(r0, c1) - sm(r1, c0) + sm(r0, c0);
            if (bad)
                continue;
            double t1 = 0.0;
            for (int y = r0; y < r1; ++y) {
                const double* p = img.row(y);
                for (int x = c0; x < c1; ++x)
                    t1 += p[x];
            }
            const double m = t1 / n;
            double ss = 0.0;
            for (int y = r0; y < r1; ++y) {
                const double* p = img.row(y);
                for (int x = c0; x < c1; ++x)
                    ss += (p[x] - m) * (p[x] - m);
            }
            if (!(ss > 1e-300))
                continue;
            st.mean(r, c) = m;
            st.norm(r, c) = std::sqrt(ss);
            st.valid(r, c) = 1;
        }
    }
    return st;
}

/// Patch-distance evaluator over two images with precomputed statistics.
class PatchMatcher {
public:
    PatchMatcher(const Raster<double>& a, const Mask& mask_a, const Raster<double>& b, const Mask& mask_b,
                 int patch_size)
        : a_(&a), b_(&b), size_(patch_size),
          sa_(compute_patch_stats(a, mask_a, patch_size)),
          sb_(compute_patch_stats(b, mask_b, patch_size))
    {
    }

    /// Distance between patch at (ar, ac) in A and (br, bc) in B.
    double operator()(int ar, int ac, int br, int bc) const
    {
        if (!sa_.valid.contains(ar, ac) || !sb_.valid.contains(br, bc))
            return kInf;
        if (!sa_.valid(ar, ac) || !sb_.valid(br, bc))
            return kInf;
        const int h = sa_.half;
        const double ma = sa_.mean(ar, ac), mb = sb_.mean(br, bc);
        double sab = 0.0;
        for (int y = -h; y <= h; ++y) {
            const double* pa = a_->row(ar + y) + ac - h;
            const double* pb = b_->row(br + y) + bc - h;
            for (int x = 0; x < size_; ++x)
                sab += (pa[x] - ma) * (pb[x] - mb);
        }
        const double z = sab / (sa_.norm(ar, ac) * sb_.norm(br, bc));
        return std::clamp(1.0 - z, 0.0, 2.0);
    }

    double at(int r, int c, Offset o) const { return (*this)(r, c, r + o.dr, c + o.dc); }

    const PatchStats& stats_a() const { return sa_; }
    const PatchStats& stats_b() const { return sb_; }

private:
    const Raster<double>* a_;
    const Raster<double>* b_;
    int size_;
    PatchStats sa_, sb_;
};

/// Candidates must beat the incumbent by more than this to replace it, so
/// that round-off cannot flip effectively tied decisions.
inline constexpr double kImproveEps = 1e-12;

/// Geometric initialization: each usable pixel of A points at the usable
/// pixel of B whose geo-coordinate is nearest. All distances start at +inf.
inline Nnf initialize(const GeoImage& geo_a, const GeoImage& geo_b, const Mask& mask_a, const Mask& mask_b,
                      const MatchParams& params = {})
{
    const int ra = geo_a.coords.rows(), ca = geo_a.coords.cols();
    const int rb = geo_b.coords.rows(), cb = geo_b.coords.cols();
    Nnf nnf;
    nnf.offsets = Raster<Offset>(ra, ca);
    nnf.distances = Raster<double>(ra, ca, kInf);
    nnf.active = Mask(ra, ca, 0);

    std::vector<KdPoint> pts;
    for (int r = 0; r < rb; ++r)
        for (int c = 0; c < cb; ++c)
            if (mask_b.empty() || mask_b(r, c))
                pts.push_back({geo_b.coords(r, c).e, geo_b.coords(r, c).n, static_cast<std::int64_t>(r) * cb + c});
    if (pts.empty())
        return nnf;
    const KdTree2 tree(std::move(pts), params.kd_leaf);
    parallel_for(0, ra, [&](int r) {
        for (int c = 0; c < ca; ++c) {
            if (!(mask_a.empty() || mask_a(r, c)))
                continue;
            const GeoPt g = geo_a.coords(r, c);
            const KdResult hit = tree.nearest(g.e, g.n);
            if (!(hit.distance <= params.max_geo_gap))
                continue;
            const int br = static_cast<int>(hit.point.payload / cb);
            const int bc = static_cast<int>(hit.point.payload % cb);
            nnf.offsets(r, c) = {br - r, bc - c};
            nnf.active(r, c) = 1;
        }
    });
    return nnf;
}

/// Evaluates the distance of every active pixel at its current offset.
inline void evaluate(Nnf& nnf, const PatchMatcher& pm)
{
    parallel_for(0, nnf.rows(), [&](int r) {
        for (int c = 0; c < nnf.cols(); ++c)
            if (nnf.active(r, c))
                nnf.distances(r, c) = pm.at(r, c, nnf.offsets(r, c));
    });
}

/// One candidate per active pixel, uniform within +-max_offset of the current
/// offset; accepted only on strict improvement. Rows use independent streams.
inline void random_search(Nnf& nnf, const PatchMatcher& pm, const MatchParams& params, int round)
{
    const int o = params.max_offset;
    parallel_for(0, nnf.rows(), [&](int r) {
        Rng rng(stream_seed(params.seed, 0x5253, static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(r)));
        for (int c = 0; c < nnf.cols(); ++c) {
            if (!nnf.active(r, c))
                continue;
            const int ddr = rng.uniform_int(-o, o);
            const int ddc = rng.uniform_int(-o, o);
            Offset cur = nnf.offsets(r, c);
            double& d = nnf.distances(r, c);
            if (std::isinf(d))
                d = pm.at(r, c, cur);
            if (ddr == 0 && ddc == 0)
                continue;
            const Offset cand{cur.dr + ddr, cur.dc + ddc};
            const double dc = pm.at(r, c, cand);
            if (dc < d - kImproveEps) {
                nnf.offsets(r, c) = cand;
                d = dc;
            }
        }
    });
}

/// Each active pixel adopts the offset, among its own and its active
/// 8-neighbours', that minimizes the distance at its own location. Even passes
/// scan forward, odd passes backward.
inline void propagate(Nnf& nnf, const PatchMatcher& pm, int pass)
{
    const int rows = nnf.rows(), cols = nnf.cols();
    const bool forward = pass % 2 == 0;
    const int n = rows * cols;
    for (int k = 0; k < n; ++k) {
        const int idx = forward ? k : n - 1 - k;
        const int r = idx / cols, c = idx % cols;
        if (!nnf.active(r, c))
            continue;
        Offset best = nnf.offsets(r, c);
        double& d = nnf.distances(r, c);
        if (std::isinf(d))
            d = pm.at(r, c, best);
        double best_d = d;
        Offset seen[9];
        int nseen = 0;
        seen[nseen++] = best;
        for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
                const int y = r + dy, x = c + dx;
                if ((dy == 0 && dx == 0) || !nnf.active.contains(y, x) || !nnf.active(y, x))
                    continue;
                const Offset cand = nnf.offsets(y, x);
                bool dup = false;
                for (int i = 0; i < nseen; ++i)
                    dup = dup || seen[i] == cand;
                if (dup)
                    continue;
                seen[nseen++] = cand;
                const double dc = pm.at(r, c, cand);
                if (dc < best_d - kImproveEps) {
                    best_d = dc;
                    best = cand;
                }
            }
        }
        nnf.offsets(r, c) = best;
        d = best_d;
    }
}

/// Optional per-round observer, called after every random search and
/// propagation step.
struct MatchObserver {
    virtual ~MatchObserver() = default;
    virtual void after_step(const Nnf&, int /*round*/, bool /*propagation*/) {}
};

inline Nnf match(const SssImage& img_a, const SssImage& img_b, const GeoImage& geo_a, const GeoImage& geo_b,
                 const Mask& mask_a, const Mask& mask_b, const MatchParams& params = {},
                 MatchObserver* observer = nullptr)
{
    params.validate();
    Nnf nnf = initialize(geo_a, geo_b, mask_a, mask_b, params);
    if (nnf.empty())
        return nnf;
    const PatchMatcher pm(img_a.intensities, mask_a, img_b.intensities, mask_b, params.patch_size);
    evaluate(nnf, pm);
    for (int it = 0; it < params.max_iters; ++it) {
        random_search(nnf, pm, params, it);
        if (observer)
            observer->after_step(nnf, it, false);
        propagate(nnf, pm, it);
        if (observer)
            observer->after_step(nnf, it, true);
    }
    return nnf;
}

/// Pixels on a stride grid whose distance is finite and <= max_distance.
inline std::vector<Correspondence> extract_correspondences(const Nnf& nnf, int stride, double max_distance)
{
    if (stride < 1)
        throw std::invalid_argument("stride must be >= 1");
    std::vector<Correspondence> out;
    for (int r = 0; r < nnf.rows(); r += stride)
        for (int c = 0; c < nnf.cols(); c += stride) {
            const double d = nnf.distances(r, c);
            if (!nnf.active(r, c) || !std::isfinite(d) || d > max_distance)
                continue;
            const Offset o = nnf.offsets(r, c);
            out.push_back({r, c, r + o.dr, c + o.dc, d});
        }
    return out;
}

/// Correspondences implied by the geometric initialization alone.
inline std::vector<Correspondence> initial_correspondences(const Nnf& nnf, int stride = 1)
{
    std::vector<Correspondence> out;
    for (int r = 0; r < nnf.rows(); r += stride)
        for (int c = 0; c < nnf.cols(); c += stride)
            if (nnf.active(r, c)) {
                const Offset o = nnf.offsets(r, c);
                out.push_back({r, c, r + o.dr, c + o.dc, nnf.distances(r, c)});
            }
    return out;
}

/// Rotates an image by 180 degrees (rows and columns reversed).
template <typename T>
Raster<T> flip180(const Raster<T>& in)
{
    Raster<T> out(in.rows(), in.cols());
    for (int r = 0; r < in.rows(); ++r)
        for (int c = 0; c < in.cols(); ++c)
            out(in.rows() - 1 - r, in.cols() - 1 - c) = in(r, c);
    return out;
}

/// `rows cols` header, then `dr dc dist` per pixel in row-major order.
inline void write_nnf(std::ostream& os, const Nnf& nnf)
{
    os << nnf.rows() << ' ' << nnf.cols() << '\n';
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (int r = 0; r < nnf.rows(); ++r)
        for (int c = 0; c < nnf.cols(); ++c) {
            const Offset o = nnf.offsets(r, c);
            os << o.dr << ' ' << o.dc << ' ' << nnf.distances(r, c) << '\n';
        }
}

}  // namespace sss
