#pragma once

// Minimal row-major 2-D raster plus the portable ASCII grid format
// ("rows cols" header followed by row-major values).

#include <cstddef>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sss {

template <typename T>
class Raster {
public:
    Raster() = default;
    Raster(int rows, int cols, T fill = T{})
        : rows_(checked(rows)), cols_(checked(cols)), data_(static_cast<std::size_t>(rows) * cols, fill)
    {
    }

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    bool contains(int r, int c) const { return r >= 0 && c >= 0 && r < rows_ && c < cols_; }

    T& operator()(int r, int c) { return data_[static_cast<std::size_t>(r) * cols_ + c]; }
    const T& operator()(int r, int c) const { return data_[static_cast<std::size_t>(r) * cols_ + c]; }

    T* row(int r) { return data_.data() + static_cast<std::size_t>(r) * cols_; }
    const T* row(int r) const { return data_.data() + static_cast<std::size_t>(r) * cols_; }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    bool same_shape(const Raster& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }

    bool operator==(const Raster& o) const = default;

private:
    static int checked(int n)
    {
        if (n < 0)
            throw std::invalid_argument("negative raster dimensions");
        return n;
    }

    int rows_ = 0;
    int cols_ = 0;
    std::vector<T> data_;
};

/// Validity mask: nonzero = usable pixel.
using Mask = Raster<std::uint8_t>;

template <typename T>
void write_grid(std::ostream& os, const Raster<T>& g)
{
    os << g.rows() << ' ' << g.cols() << '\n';
    os << std::setprecision(std::numeric_limits<double>::max_digits10);
    for (int r = 0; r < g.rows(); ++r) {
        for (int c = 0; c < g.cols(); ++c) {
            if (c)
                os << ' ';
            os << +g(r, c);
        }
        os << '\n';
    }
}

template <typename T>
Raster<T> read_grid(std::istream& is)
{
    int rows = 0, cols = 0;
    if (!(is >> rows >> cols) || rows < 0 || cols < 0)
        throw std::runtime_error("grid: bad header");
    Raster<T> g(rows, cols);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            std::string tok;
            if (!(is >> tok))
                throw std::runtime_error("grid: truncated data");
            g(r, c) = static_cast<T>(std::stod(tok));
        }
    }
    return g;
}

template <typename T>
void save_grid(const std::string& path, const Raster<T>& g)
{
    std::ofstream os(path);
    if (!os)
        throw std::runtime_error("cannot write " + path);
    write_grid(os, g);
}

template <typename T>
Raster<T> load_grid(const std::string& path)
{
    std::ifstream is(path);
    if (!is)
        throw std::runtime_error("cannot read " + path);
    return read_grid<T>(is);
}

}  // namespace sss
