#pragma once

// Static, balanced 2-D kd-tree with exact nearest-neighbour queries.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <vector>

namespace sss {

struct KdPoint {
    double x = 0.0;
    double y = 0.0;
    std::int64_t payload = 0;
};

struct KdResult {
    KdPoint point;
    double distance = std::numeric_limits<double>::infinity();
};

class KdTree2 {
public:
    explicit KdTree2(std::vector<KdPoint> points, int leaf_size = 8)
        : points_(std::move(points)), leaf_size_(std::max(1, leaf_size))
    {
        if (points_.empty())
            throw std::invalid_argument("KdTree2: empty point set");
        nodes_.reserve(2 * points_.size() / leaf_size_ + 1);
        build(0, static_cast<int>(points_.size()));
    }

    std::size_t size() const { return points_.size(); }

    /// Exact nearest neighbour; ties resolved towards the lowest payload.
    KdResult nearest(double x, double y) const
    {
        Best best;
        search(0, x, y, best);
        KdResult out;
        out.point = points_[best.index];
        out.distance = std::sqrt(best.d2);
        return out;
    }

private:
    struct Node {
        int begin = 0, end = 0;
        int left = -1, right = -1;
        int dim = 0;
        double split = 0.0;
        // bounding box
        double lo[2] = {0, 0};
        double hi[2] = {0, 0};
    };

    struct Best {
        double d2 = std::numeric_limits<double>::infinity();
        std::int64_t payload = std::numeric_limits<std::int64_t>::max();
        int index = -1;
    };

    static double coord(const KdPoint& p, int d) { return d == 0 ? p.x : p.y; }

    int build(int begin, int end)
    {
        const int id = static_cast<int>(nodes_.size());
        nodes_.push_back({});
        Node n;
        n.begin = begin;
        n.end = end;
        n.lo[0] = n.lo[1] = std::numeric_limits<double>::infinity();
        n.hi[0] = n.hi[1] = -std::numeric_limits<double>::infinity();
        for (int i = begin; i < end; ++i) {
            for (int d = 0; d < 2; ++d) {
                n.lo[d] = std::min(n.lo[d], coord(points_[i], d));
                n.hi[d] = std::max(n.hi[d], coord(points_[i], d));
            }
        }
        if (end - begin > leaf_size_) {
            n.dim = (n.hi[0] - n.lo[0]) >= (n.hi[1] - n.lo[1]) ? 0 : 1;
            const int mid = begin + (end - begin) / 2;
            const int dim = n.dim;
            std::nth_element(points_.begin() + begin, points_.begin() + mid, points_.begin() + end,
                             [dim](const KdPoint& a, const KdPoint& b) { return coord(a, dim) < coord(b, dim); });
            n.split = coord(points_[mid], dim);
            n.left = build(begin, mid);
            n.right = build(mid, end);
        }
        nodes_[id] = n;
        return id;
    }

    static double box_d2(const Node& n, double x, double y)
    {
        const double dx = x < n.lo[0] ? n.lo[0] - x : (x > n.hi[0] ? x - n.hi[0] : 0.0);
        const double dy = y < n.lo[1] ? n.lo[1] - y : (y > n.hi[1] ? y - n.hi[1] : 0.0);
        return dx * dx + dy * dy;
    }

    void search(int id, double x, double y, Best& best) const
    {
        const Node& n = nodes_[id];
        if (box_d2(n, x, y) > best.d2)
            return;
        if (n.left < 0) {
            for (int i = n.begin; i < n.end; ++i) {
                const double dx = points_[i].x - x;
                const double dy = points_[i].y - y;
                const double d2 = dx * dx + dy * dy;
                if (d2 < best.d2 || (d2 == best.d2 && points_[i].payload < best.payload)) {
                    best.d2 = d2;
                    best.payload = points_[i].payload;
                    best.index = i;
                }
            }
            return;
        }
        const double q = n.dim == 0 ? x : y;
        if (q < n.split) {
            search(n.left, x, y, best);
            search(n.right, x, y, best);
        } else {
            search(n.right, x, y, best);
            search(n.left, x, y, best);
        }
    }

    std::vector<KdPoint> points_;
    std::vector<Node> nodes_;
    int leaf_size_;
};

}  // namespace sss
