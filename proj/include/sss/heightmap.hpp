#pragma once

// Regular easting/northing height grid. Row r spans northings
// [origin_n + r*cell, origin_n + (r+1)*cell); column c spans eastings likewise.
// Empty cells hold NaN.

#include "sss/raster.hpp"

#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>

namespace sss {

struct Heightmap {
    double origin_e = 0.0;
    double origin_n = 0.0;
    double cell = 1.0;
    Raster<double> grid;

    static constexpr double empty_value() { return std::numeric_limits<double>::quiet_NaN(); }

    Heightmap() = default;
    Heightmap(double oe, double on, double cell_size, int rows, int cols)
        : origin_e(oe), origin_n(on), cell(cell_size), grid(rows, cols, empty_value())
    {
        if (!(cell_size > 0.0))
            throw std::invalid_argument("heightmap cell must be positive");
    }

    int rows() const { return grid.rows(); }
    int cols() const { return grid.cols(); }
    bool occupied(int r, int c) const { return std::isfinite(grid(r, c)); }

    bool same_geometry(const Heightmap& o) const
    {
        return origin_e == o.origin_e && origin_n == o.origin_n && cell == o.cell && grid.same_shape(o.grid);
    }

    /// Cell containing (e, n), or false when outside the grid.
    bool locate(double e, double n, int& r, int& c) const
    {
        const double fc = std::floor((e - origin_e) / cell);
        const double fr = std::floor((n - origin_n) / cell);
        if (fr < 0 || fc < 0 || fr >= rows() || fc >= cols())
            return false;
        r = static_cast<int>(fr);
        c = static_cast<int>(fc);
        return true;
    }

    /// Bilinear interpolation between cell centres; nullopt when any of the
    /// four supporting cells is empty or outside.
    std::optional<double> sample(double e, double n) const
    {
        const double x = (e - origin_e) / cell - 0.5;
        const double y = (n - origin_n) / cell - 0.5;
        const int c0 = static_cast<int>(std::floor(x));
        const int r0 = static_cast<int>(std::floor(y));
        if (r0 < 0 || c0 < 0 || r0 + 1 >= rows() || c0 + 1 >= cols())
            return std::nullopt;
        const double fx = x - c0, fy = y - r0;
        const double h00 = grid(r0, c0), h01 = grid(r0, c0 + 1);
        const double h10 = grid(r0 + 1, c0), h11 = grid(r0 + 1, c0 + 1);
        if (!std::isfinite(h00) || !std::isfinite(h01) || !std::isfinite(h10) || !std::isfinite(h11))
            return std::nullopt;
        return (1 - fy) * ((1 - fx) * h00 + fx * h01) + fy * ((1 - fx) * h10 + fx * h11);
    }
};

/// Header `origin_e origin_n cell rows cols`, then row-major heights, `nan`
/// for empty cells.
inline void write_heightmap(std::ostream& os, const Heightmap& hm)
{
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    os << hm.origin_e << ' ' << hm.origin_n << ' ' << hm.cell << ' ' << hm.rows() << ' ' << hm.cols() << '\n';
    for (int r = 0; r < hm.rows(); ++r) {
        for (int c = 0; c < hm.cols(); ++c) {
            if (c)
                os << ' ';
            if (hm.occupied(r, c))
                os << hm.grid(r, c);
            else
                os << "nan";
        }
        os << '\n';
    }
}

inline Heightmap read_heightmap(std::istream& is)
{
    double oe = 0, on = 0, cell = 0;
    int rows = 0, cols = 0;
    if (!(is >> oe >> on >> cell >> rows >> cols) || rows < 0 || cols < 0)
        throw std::runtime_error("heightmap: bad header");
    Heightmap hm(oe, on, cell, rows, cols);
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) {
            std::string tok;
            if (!(is >> tok))
                throw std::runtime_error("heightmap: truncated data");
            hm.grid(r, c) = (tok == "nan" || tok == "NaN") ? Heightmap::empty_value() : std::stod(tok);
        }
    return hm;
}

}  // namespace sss
