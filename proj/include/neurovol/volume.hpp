#pragma once

#include <array>
#include <compare>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace neurovol {

using Vec3 = std::array<double, 3>;

/// Physical voxel pitch in micrometers.
struct Resolution {
    double dx = 1.0;
    double dy = 1.0;
    double dz = 1.0;

    [[nodiscard]] bool valid() const noexcept { return dx > 0.0 && dy > 0.0 && dz > 0.0; }
    [[nodiscard]] double axis(int a) const noexcept { return a == 0 ? dx : (a == 1 ? dy : dz); }
    [[nodiscard]] double voxel_volume() const noexcept { return dx * dy * dz; }

    void validate() const {
        if (!valid()) throw std::invalid_argument("resolution must be strictly positive on every axis");
    }

    friend bool operator==(const Resolution&, const Resolution&) = default;
};

[[nodiscard]] inline Vec3 voxel_to_physical(const Vec3& coord, const Resolution& res) noexcept {
    return {coord[0] * res.dx, coord[1] * res.dy, coord[2] * res.dz};
}

struct Extents {
    std::size_t nx = 0;
    std::size_t ny = 0;
    std::size_t nz = 0;

    [[nodiscard]] std::size_t count() const noexcept { return nx * ny * nz; }
    [[nodiscard]] std::size_t axis(int a) const noexcept { return a == 0 ? nx : (a == 1 ? ny : nz); }
    [[nodiscard]] bool empty() const noexcept { return count() == 0; }

    friend bool operator==(const Extents&, const Extents&) = default;
};

/// Dense 3D array, x-fastest then y then z.
template <typename T>
class Volume {
public:
    using value_type = T;

    Volume() = default;
    explicit Volume(Extents ext, T fill = T{}) : ext_(ext), data_(ext.count(), fill) {}
    Volume(Extents ext, std::vector<T> data) : ext_(ext), data_(std::move(data)) {
        if (data_.size() != ext_.count())
            throw std::invalid_argument("voxel count does not match extents");
    }

    [[nodiscard]] const Extents& extents() const noexcept { return ext_; }
    [[nodiscard]] std::size_t size() const noexcept { return data_.size(); }

    [[nodiscard]] std::size_t index(std::size_t x, std::size_t y, std::size_t z) const noexcept {
        return x + ext_.nx * (y + ext_.ny * z);
    }
    [[nodiscard]] std::array<std::size_t, 3> coord(std::size_t i) const noexcept {
        return {i % ext_.nx, (i / ext_.nx) % ext_.ny, i / (ext_.nx * ext_.ny)};
    }
    [[nodiscard]] bool contains(long long x, long long y, long long z) const noexcept {
        return x >= 0 && y >= 0 && z >= 0 && static_cast<std::size_t>(x) < ext_.nx &&
               static_cast<std::size_t>(y) < ext_.ny && static_cast<std::size_t>(z) < ext_.nz;
    }

    T& at(std::size_t x, std::size_t y, std::size_t z) noexcept { return data_[index(x, y, z)]; }
    [[nodiscard]] const T& at(std::size_t x, std::size_t y, std::size_t z) const noexcept {
        return data_[index(x, y, z)];
    }
    T& operator[](std::size_t i) noexcept { return data_[i]; }
    const T& operator[](std::size_t i) const noexcept { return data_[i]; }

    [[nodiscard]] std::span<T> span() noexcept { return data_; }
    [[nodiscard]] std::span<const T> span() const noexcept { return data_; }
    [[nodiscard]] std::vector<T>& data() noexcept { return data_; }
    [[nodiscard]] const std::vector<T>& data() const noexcept { return data_; }

    /// Copy of the box [x0,x1) x [y0,y1) x [z0,z1).
    [[nodiscard]] Volume crop(std::size_t x0, std::size_t x1, std::size_t y0, std::size_t y1,
                              std::size_t z0, std::size_t z1) const {
        if (x1 > ext_.nx || y1 > ext_.ny || z1 > ext_.nz || x0 > x1 || y0 > y1 || z0 > z1)
            throw std::invalid_argument("crop box outside volume");
        Volume out(Extents{x1 - x0, y1 - y0, z1 - z0});
        for (std::size_t z = z0; z < z1; ++z)
            for (std::size_t y = y0; y < y1; ++y)
                for (std::size_t x = x0; x < x1; ++x) out.at(x - x0, y - y0, z - z0) = at(x, y, z);
        return out;
    }

    /// Writes `src` with its origin at (x0,y0,z0); src must fit.
    void paste(const Volume& src, std::size_t x0, std::size_t y0, std::size_t z0) {
        const auto& e = src.extents();
        if (x0 + e.nx > ext_.nx || y0 + e.ny > ext_.ny || z0 + e.nz > ext_.nz)
            throw std::invalid_argument("paste box outside volume");
        for (std::size_t z = 0; z < e.nz; ++z)
            for (std::size_t y = 0; y < e.ny; ++y)
                for (std::size_t x = 0; x < e.nx; ++x) at(x0 + x, y0 + y, z0 + z) = src.at(x, y, z);
    }

    friend bool operator==(const Volume&, const Volume&) = default;

private:
    Extents ext_{};
    std::vector<T> data_;
};

using FloatVolume = Volume<float>;
using LabelVolume = Volume<std::uint32_t>;

enum class CellClass : std::uint8_t { unlabeled, neuron, glia };

[[nodiscard]] inline std::string to_string(CellClass c) {
    switch (c) {
        case CellClass::neuron: return "neuron";
        case CellClass::glia: return "glia";
        case CellClass::unlabeled: break;
    }
    return "unlabeled";
}

[[nodiscard]] inline CellClass parse_cell_class(std::string_view s) {
    if (s == "neuron") return CellClass::neuron;
    if (s == "glia") return CellClass::glia;
    return CellClass::unlabeled;
}

struct GridPos {
    int row = 0;
    int col = 0;
    friend auto operator<=>(const GridPos&, const GridPos&) = default;
};

/// One acquired image volume of a single channel.
struct VolumeBlock {
    Volume<std::uint16_t> voxels;
    std::string channel = "dapi";
    GridPos grid_pos{};
    Resolution resolution{};

    [[nodiscard]] const Extents& extents() const noexcept { return voxels.extents(); }

    friend bool operator==(const VolumeBlock&, const VolumeBlock&) = default;
};

/// Mapping between acquisition index and grid cell.
class GridLayout {
public:
    GridLayout() : GridLayout(1, 1, true) {}
    GridLayout(int rows, int cols, bool snake) : rows_(rows), cols_(cols), snake_(snake) {
        if (rows < 1 || cols < 1) throw std::invalid_argument("grid needs at least one row and one column");
        order_.reserve(static_cast<std::size_t>(rows) * cols);
        for (int r = 0; r < rows; ++r) {
            const bool reverse = snake && (r % 2 == 1);
            for (int i = 0; i < cols; ++i) order_.push_back({r, reverse ? cols - 1 - i : i});
        }
    }

    [[nodiscard]] int rows() const noexcept { return rows_; }
    [[nodiscard]] int cols() const noexcept { return cols_; }
    [[nodiscard]] bool snake() const noexcept { return snake_; }
    [[nodiscard]] std::size_t size() const noexcept { return order_.size(); }
    [[nodiscard]] const std::vector<GridPos>& order() const noexcept { return order_; }

    [[nodiscard]] GridPos position(std::size_t acquisition_index) const { return order_.at(acquisition_index); }

    [[nodiscard]] std::size_t acquisition_index(GridPos p) const {
        if (!contains(p)) throw std::invalid_argument("grid position outside layout");
        const bool reverse = snake_ && (p.row % 2 == 1);
        return static_cast<std::size_t>(p.row) * cols_ + (reverse ? cols_ - 1 - p.col : p.col);
    }

    [[nodiscard]] bool contains(GridPos p) const noexcept {
        return p.row >= 0 && p.col >= 0 && p.row < rows_ && p.col < cols_;
    }

    /// Row-major slot, independent of acquisition order.
    [[nodiscard]] std::size_t slot(GridPos p) const noexcept {
        return static_cast<std::size_t>(p.row) * cols_ + p.col;
    }

    friend bool operator==(const GridLayout&, const GridLayout&) = default;

private:
    int rows_;
    int cols_;
    bool snake_;
    std::vector<GridPos> order_;
};

[[nodiscard]] inline GridLayout make_grid_layout(int rows, int cols, bool snake) {
    return GridLayout(rows, cols, snake);
}

}  // namespace neurovol
