#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "neurovol/volume.hpp"

namespace neurovol {

/// Synthetic stand-in for a light-sheet acquisition: a grid of overlapping
/// blocks cut from one canvas of Gaussian-profile nuclei, plus a second
/// channel that is bright only inside "active" neurons.
///
/// Nuclei are spherical in voxel space. Glia draw their radius from the lower
/// half of [radius_min, radius_max] and are brighter; neurons draw from the
/// upper half. That gives the classifier a morphological signal to learn.
struct PhantomSpec {
    GridLayout grid{1, 1, true};
    Extents block_extents{64, 64, 64};
    std::size_t true_overlap_x = 6;
    std::size_t true_overlap_y = 5;
    std::size_t nuclei_per_block = 12;
    double radius_min = 3.0;
    double radius_max = 5.0;
    double background = 100.0;
    double foreground = 1100.0;  // neuron peak intensity
    double noise_sigma = 0.0;
    double neuron_fraction = 0.5;

    double active_fraction = 1.0;  // of neurons, elevated second channel
    double glia_brightness = 1.3;  // glia amplitude relative to neurons
    double second_background = 100.0;
    double second_amplitude = 800.0;
    double min_separation = 2.0;  // center distance >= min_separation * (r_i + r_j)
    double edge_margin = 1.0;     // centers >= edge_margin * r from every block face
    Resolution resolution{1.0, 1.0, 1.0};
    std::string channel = "dapi";
    std::string second_channel = "cfos";

    [[nodiscard]] double dynamic_range() const noexcept { return foreground - background; }

    void validate() const {
        const auto& e = block_extents;
        if (e.nx == 0 || e.ny == 0 || e.nz == 0) throw std::invalid_argument("block extents must be positive");
        auto check_overlap = [](std::size_t overlap, std::size_t extent, const char* axis) {
            const auto limit = static_cast<std::size_t>(std::floor(0.10 * static_cast<double>(extent) + 1e-9));
            if (overlap < 1 || overlap > limit)
                throw std::invalid_argument(std::string("true overlap along ") + axis + " must lie in [1, " +
                                            std::to_string(limit) + "]");
        };
        check_overlap(true_overlap_x, e.nx, "x");
        check_overlap(true_overlap_y, e.ny, "y");
        if (!(radius_min > 0.0) || radius_max < radius_min) throw std::invalid_argument("bad nucleus radius range");
        if (neuron_fraction < 0.0 || neuron_fraction > 1.0) throw std::invalid_argument("neuron_fraction outside [0,1]");
        if (active_fraction < 0.0 || active_fraction > 1.0) throw std::invalid_argument("active_fraction outside [0,1]");
        if (noise_sigma < 0.0) throw std::invalid_argument("noise sigma must be non-negative");
        if (foreground < background) throw std::invalid_argument("foreground below background");
        if (edge_margin < 0.0 || min_separation < 0.0) throw std::invalid_argument("negative placement constraint");
        const double span = 2.0 * edge_margin * radius_max;
        if (nuclei_per_block > 0 && (span >= static_cast<double>(e.nx) || span >= static_cast<double>(e.ny) ||
                                     span >= static_cast<double>(e.nz)))
            throw std::invalid_argument("nuclei do not fit inside a block");
        resolution.validate();
    }
};

struct PhantomNucleus {
    Vec3 center{};  // canvas (stitched) voxel coordinates
    double radius = 0.0;
    CellClass cls = CellClass::unlabeled;
    bool active = false;
    GridPos block{};  // block the nucleus was placed in
    double amplitude = 0.0;
};

struct PhantomTruth {
    std::vector<PhantomNucleus> nuclei;
    std::size_t overlap_x = 0;
    std::size_t overlap_y = 0;
    Extents canvas{};

    [[nodiscard]] std::array<std::size_t, 3> origin(GridPos p, const Extents& block) const noexcept {
        return {static_cast<std::size_t>(p.col) * (block.nx - overlap_x),
                static_cast<std::size_t>(p.row) * (block.ny - overlap_y), 0};
    }
};

struct Phantom {
    PhantomSpec spec;
    std::vector<VolumeBlock> primary;    // row-major slots
    std::vector<VolumeBlock> secondary;  // row-major slots
    PhantomTruth truth;

    [[nodiscard]] const VolumeBlock& block(GridPos p) const { return primary.at(spec.grid.slot(p)); }
    [[nodiscard]] const VolumeBlock& second(GridPos p) const { return secondary.at(spec.grid.slot(p)); }

    /// Nuclei placed in block `p`, with centers in that block's voxel frame.
    [[nodiscard]] std::vector<PhantomNucleus> local_nuclei(GridPos p) const {
        const auto o = truth.origin(p, spec.block_extents);
        std::vector<PhantomNucleus> out;
        for (auto n : truth.nuclei) {
            if (n.block != p) continue;
            n.center = {n.center[0] - double(o[0]), n.center[1] - double(o[1]), n.center[2] - double(o[2])};
            out.push_back(n);
        }
        return out;
    }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) noexcept {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

}  // namespace detail

/// Seed for an independent stream; stable across runs and platforms.
[[nodiscard]] inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) noexcept {
    return detail::splitmix64(detail::splitmix64(detail::splitmix64(seed) ^ a) ^ (b + 0x632BE59BD9B4E019ULL));
}

namespace detail {

inline std::uint16_t quantize(double v) noexcept {
    if (!(v > 0.0)) return 0;
    if (v >= 65535.0) return 65535;
    return static_cast<std::uint16_t>(std::lround(v));
}

inline VolumeBlock render_phantom_block(const PhantomSpec& spec, const PhantomTruth& truth, GridPos pos,
                                        bool second, std::uint64_t noise_seed) {
    const auto& e = spec.block_extents;
    const auto o = truth.origin(pos, e);
    std::vector<double> acc(e.count(), 0.0);

    for (const auto& n : truth.nuclei) {
        double amp = second ? (n.active ? spec.second_amplitude : 0.0) : n.amplitude;
        if (amp == 0.0) continue;
        const double support = 3.0 * n.radius;
        const double inv = 1.0 / (2.0 * n.radius * n.radius);
        // Block-local bounding box of the clipped support.
        long long lo[3], hi[3];
        for (int a = 0; a < 3; ++a) {
            lo[a] = static_cast<long long>(std::ceil(n.center[a] - support)) - static_cast<long long>(o[a]);
            hi[a] = static_cast<long long>(std::floor(n.center[a] + support)) - static_cast<long long>(o[a]);
            lo[a] = std::max<long long>(lo[a], 0);
            hi[a] = std::min<long long>(hi[a], static_cast<long long>(e.axis(a)) - 1);
        }
        for (long long z = lo[2]; z <= hi[2]; ++z) {
            const double dz = double(z + static_cast<long long>(o[2])) - n.center[2];
            for (long long y = lo[1]; y <= hi[1]; ++y) {
                const double dy = double(y + static_cast<long long>(o[1])) - n.center[1];
                for (long long x = lo[0]; x <= hi[0]; ++x) {
                    const double dx = double(x + static_cast<long long>(o[0])) - n.center[0];
                    const double d2 = dx * dx + dy * dy + dz * dz;
                    if (d2 > support * support) continue;
                    acc[static_cast<std::size_t>(x) + e.nx * (static_cast<std::size_t>(y) + e.ny * static_cast<std::size_t>(z))] +=
                        amp * std::exp(-d2 * inv);
                }
            }
        }
    }

    VolumeBlock b;
    b.channel = second ? spec.second_channel : spec.channel;
    b.grid_pos = pos;
    b.resolution = spec.resolution;
    b.voxels = Volume<std::uint16_t>(e);
    const double bg = second ? spec.second_background : spec.background;
    if (spec.noise_sigma > 0.0) {
        std::mt19937_64 rng(noise_seed);
        std::normal_distribution<double> noise(0.0, spec.noise_sigma);
        for (std::size_t i = 0; i < acc.size(); ++i) b.voxels[i] = quantize(bg + acc[i] + noise(rng));
    } else {
        for (std::size_t i = 0; i < acc.size(); ++i) b.voxels[i] = quantize(bg + acc[i]);
    }
    return b;
}

}  // namespace detail

/// Places nuclei and renders every block of both channels.
[[nodiscard]] inline Phantom generate_phantom(const PhantomSpec& spec, std::uint64_t seed) {
    spec.validate();
    Phantom ph;
    ph.spec = spec;
    const auto& e = spec.block_extents;
    const auto& grid = spec.grid;
    ph.truth.overlap_x = spec.true_overlap_x;
    ph.truth.overlap_y = spec.true_overlap_y;
    ph.truth.canvas = {grid.cols() * e.nx - (grid.cols() - 1) * spec.true_overlap_x,
                       grid.rows() * e.ny - (grid.rows() - 1) * spec.true_overlap_y, e.nz};

    std::mt19937_64 rng(derive_seed(seed, 0x6e75636c6569ULL));
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double r_mid = 0.5 * (spec.radius_min + spec.radius_max);
    const double amplitude = spec.foreground - spec.background;

    for (const GridPos pos : grid.order()) {
        const auto o = ph.truth.origin(pos, e);
        for (std::size_t k = 0; k < spec.nuclei_per_block; ++k) {
            PhantomNucleus n;
            n.block = pos;
            n.cls = unit(rng) < spec.neuron_fraction ? CellClass::neuron : CellClass::glia;
            n.active = n.cls == CellClass::neuron && unit(rng) < spec.active_fraction;
            const double lo = n.cls == CellClass::neuron ? r_mid : spec.radius_min;
            const double hi = n.cls == CellClass::neuron ? spec.radius_max : r_mid;
            n.radius = lo + (hi - lo) * unit(rng);
            n.amplitude = amplitude * (n.cls == CellClass::glia ? spec.glia_brightness : 1.0);
            const double margin = spec.edge_margin * n.radius;

            bool placed = false;
            for (int attempt = 0; attempt < 20000 && !placed; ++attempt) {
                for (int a = 0; a < 3; ++a) {
                    const double extent = static_cast<double>(e.axis(a));
                    n.center[a] = double(o[a]) + margin + (extent - 1.0 - 2.0 * margin) * unit(rng);
                }
                placed = true;
                for (const auto& m : ph.truth.nuclei) {
                    const double dx = m.center[0] - n.center[0], dy = m.center[1] - n.center[1],
                                 dz = m.center[2] - n.center[2];
                    const double min_d = spec.min_separation * (m.radius + n.radius);
                    if (dx * dx + dy * dy + dz * dz < min_d * min_d) {
                        placed = false;
                        break;
                    }
                }
            }
            if (!placed) throw std::invalid_argument("cannot place nuclei with the requested density and separation");
            ph.truth.nuclei.push_back(n);
        }
    }

    const std::size_t slots = grid.size();
    ph.primary.resize(slots);
    ph.secondary.resize(slots);
    for (int r = 0; r < grid.rows(); ++r) {
        for (int c = 0; c < grid.cols(); ++c) {
            const GridPos pos{r, c};
            const auto slot = grid.slot(pos);
            ph.primary[slot] = detail::render_phantom_block(spec, ph.truth, pos, false, derive_seed(seed, slot, 1));
            ph.secondary[slot] = detail::render_phantom_block(spec, ph.truth, pos, true, derive_seed(seed, slot, 2));
        }
    }
    return ph;
}

}  // namespace neurovol
