#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <queue>
#include <span>
#include <stdexcept>
#include <tuple>
#include <vector>

#include "neurovol/features.hpp"
#include "neurovol/volume.hpp"

namespace neurovol {

using Seed = std::array<std::size_t, 3>;

struct SegParams {
    double sigma1 = 2.0;  // µm
    double sigma2 = 3.2;  // µm
    double seed_threshold = 25.0;
    std::size_t min_region_voxels = 30;

    void validate() const {
        if (!(sigma1 > 0.0) || !(sigma2 > sigma1)) throw std::invalid_argument("need 0 < sigma1 < sigma2");
        if (min_region_voxels < 1) throw std::invalid_argument("min_region_voxels must be at least 1");
        if (!std::isfinite(seed_threshold)) throw std::invalid_argument("seed threshold must be finite");
    }
};

/// One segmented nucleus.
struct RegionRecord {
    std::uint32_t label = 0;
    Vec3 centroid{};  // voxel coordinates
    std::size_t voxel_count = 0;
    Seed bbox_min{};
    Seed bbox_max{};  // inclusive
    FeatureVector features{};
    CellClass cls = CellClass::unlabeled;

    friend bool operator==(const RegionRecord&, const RegionRecord&) = default;
};

struct Segmentation {
    LabelVolume labels;
    std::vector<RegionRecord> regions;
    std::size_t seed_count = 0;

    friend bool operator==(const Segmentation&, const Segmentation&) = default;
};

// ---------------------------------------------------------------------------
// Gaussian blur
// ---------------------------------------------------------------------------

/// Normalized discrete Gaussian with radius ceil(3 sigma); sigma 0 gives {1}.
[[nodiscard]] inline std::vector<double> gaussian_kernel(double sigma_voxels) {
    if (sigma_voxels < 0.0) throw std::invalid_argument("negative sigma");
    if (sigma_voxels == 0.0) return {1.0};
    const auto radius = static_cast<long long>(std::ceil(3.0 * sigma_voxels));
    std::vector<double> k(static_cast<std::size_t>(2 * radius + 1));
    double sum = 0.0;
    for (long long i = -radius; i <= radius; ++i) {
        const double w = std::exp(-double(i * i) / (2.0 * sigma_voxels * sigma_voxels));
        k[static_cast<std::size_t>(i + radius)] = w;
        sum += w;
    }
    for (double& w : k) w /= sum;
    return k;
}

/// Half-sample symmetric reflection (d c b a | a b c d | d c b a).
[[nodiscard]] inline std::size_t reflect_index(long long i, std::size_t n) noexcept {
    const auto period = static_cast<long long>(2 * n);
    long long m = i % period;
    if (m < 0) m += period;
    if (m >= static_cast<long long>(n)) m = period - 1 - m;
    return static_cast<std::size_t>(m);
}

namespace detail {

inline void convolve_axis(FloatVolume& vol, const std::vector<double>& kernel, int axis) {
    if (kernel.size() == 1) return;
    const auto& e = vol.extents();
    const std::size_t n = e.axis(axis);
    const auto radius = static_cast<long long>(kernel.size() / 2);
    const std::size_t stride = axis == 0 ? 1 : (axis == 1 ? e.nx : e.nx * e.ny);
    const std::size_t lines = e.count() / n;
    std::vector<float> padded(n + 2 * static_cast<std::size_t>(radius));

    for (std::size_t line = 0; line < lines; ++line) {
        // Base index of this line: enumerate the two axes other than `axis`.
        std::size_t base = 0;
        if (axis == 0) {
            base = line * e.nx;
        } else if (axis == 1) {
            base = (line % e.nx) + (line / e.nx) * e.nx * e.ny;
        } else {
            base = line;
        }
        for (long long i = -radius; i < static_cast<long long>(n) + radius; ++i)
            padded[static_cast<std::size_t>(i + radius)] = vol[base + reflect_index(i, n) * stride];
        for (std::size_t i = 0; i < n; ++i) {
            double acc = 0.0;
            for (std::size_t k = 0; k < kernel.size(); ++k) acc += kernel[k] * padded[i + k];
            vol[base + i * stride] = static_cast<float>(acc);
        }
    }
}

}  // namespace detail

/// Separable Gaussian blur with a physical sigma; the per-axis voxel sigma is
/// sigma divided by that axis' resolution.
[[nodiscard]] inline FloatVolume gaussian_blur_3d(const Volume<std::uint16_t>& voxels, const Resolution& res,
                                                  double sigma_um) {
    if (sigma_um < 0.0) throw std::invalid_argument("negative sigma");
    res.validate();
    FloatVolume out(voxels.extents());
    for (std::size_t i = 0; i < voxels.size(); ++i) out[i] = static_cast<float>(voxels[i]);
    if (sigma_um == 0.0 || voxels.size() == 0) return out;
    for (int axis = 0; axis < 3; ++axis) detail::convolve_axis(out, gaussian_kernel(sigma_um / res.axis(axis)), axis);
    return out;
}

[[nodiscard]] inline FloatVolume gaussian_blur_3d(const VolumeBlock& block, double sigma_um) {
    return gaussian_blur_3d(block.voxels, block.resolution, sigma_um);
}

/// blur(sigma1) - blur(sigma2): bright blobs near scale sigma1 give positive peaks.
[[nodiscard]] inline FloatVolume difference_of_gaussians(const VolumeBlock& block, double sigma1, double sigma2) {
    FloatVolume fine = gaussian_blur_3d(block, sigma1);
    const FloatVolume coarse = gaussian_blur_3d(block, sigma2);
    for (std::size_t i = 0; i < fine.size(); ++i) fine[i] -= coarse[i];
    return fine;
}

[[nodiscard]] inline FloatVolume difference_of_gaussians(const VolumeBlock& block, const SegParams& p) {
    return difference_of_gaussians(block, p.sigma1, p.sigma2);
}

// ---------------------------------------------------------------------------
// Neighborhood helpers
// ---------------------------------------------------------------------------

namespace detail {

/// Calls fn(neighbor_index, x, y, z) for the in-bounds 26-neighbors of (x,y,z).
template <typename T, typename Fn>
inline void for_each_neighbor26(const Volume<T>& v, std::size_t x, std::size_t y, std::size_t z, Fn&& fn) {
    const auto& e = v.extents();
    for (int dz = -1; dz <= 1; ++dz) {
        if ((dz < 0 && z == 0) || (dz > 0 && z + 1 >= e.nz)) continue;
        for (int dy = -1; dy <= 1; ++dy) {
            if ((dy < 0 && y == 0) || (dy > 0 && y + 1 >= e.ny)) continue;
            for (int dx = -1; dx <= 1; ++dx) {
                if (dx == 0 && dy == 0 && dz == 0) continue;
                if ((dx < 0 && x == 0) || (dx > 0 && x + 1 >= e.nx)) continue;
                const std::size_t nx = x + dx, ny = y + dy, nz = z + dz;
                fn(v.index(nx, ny, nz), nx, ny, nz);
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Seeds
// ---------------------------------------------------------------------------

/// 26-neighborhood local maxima above `threshold`. A plateau maximum yields a
/// single seed at its lexicographically smallest (x, y, z) coordinate. Seeds
/// are returned in scan order (z, then y, then x).
[[nodiscard]] inline std::vector<Seed> detect_seeds(const FloatVolume& dog, double threshold) {
    std::vector<Seed> seeds;
    std::vector<std::uint8_t> visited(dog.size(), 0);
    std::vector<std::size_t> stack;

    for (std::size_t i = 0; i < dog.size(); ++i) {
        const float v = dog[i];
        if (!(static_cast<double>(v) > threshold) || visited[i]) continue;
        const auto [x, y, z] = dog.coord(i);
        bool greater = false, equal = false;
        detail::for_each_neighbor26(dog, x, y, z, [&](std::size_t j, auto, auto, auto) {
            if (dog[j] > v) greater = true;
            else if (dog[j] == v) equal = true;
        });
        if (greater) continue;
        if (!equal) {
            seeds.push_back({x, y, z});
            continue;
        }
        // Plateau: flood equal-valued voxels, remember whether anything higher borders it.
        bool plateau_max = true;
        Seed best{x, y, z};
        stack.assign(1, i);
        visited[i] = 1;
        while (!stack.empty()) {
            const std::size_t cur = stack.back();
            stack.pop_back();
            const auto c = dog.coord(cur);
            if (std::tie(c[0], c[1], c[2]) < std::tie(best[0], best[1], best[2])) best = c;
            detail::for_each_neighbor26(dog, c[0], c[1], c[2], [&](std::size_t j, auto, auto, auto) {
                if (dog[j] > v) {
                    plateau_max = false;
                } else if (dog[j] == v && !visited[j]) {
                    visited[j] = 1;
                    stack.push_back(j);
                }
            });
        }
        if (plateau_max) seeds.push_back(best);
    }
    std::sort(seeds.begin(), seeds.end(), [](const Seed& a, const Seed& b) {
        return std::tie(a[2], a[1], a[0]) < std::tie(b[2], b[1], b[0]);
    });
    return seeds;
}

// ---------------------------------------------------------------------------
// Watershed
// ---------------------------------------------------------------------------

/// Priority flood from markers. Seed i receives label i + 1. A voxel joins
/// the flood only if its relief is below `mask_level`; unreached voxels stay 0.
/// Equal relief values are resolved by insertion order.
[[nodiscard]] inline LabelVolume watershed_3d(const FloatVolume& relief, std::span<const Seed> seeds,
                                              double mask_level = std::numeric_limits<double>::infinity()) {
    if (seeds.empty()) throw std::invalid_argument("watershed needs at least one seed");
    LabelVolume labels(relief.extents(), 0);

    struct Entry {
        float value;
        std::uint64_t seq;
        std::size_t index;
    };
    auto later = [](const Entry& a, const Entry& b) {
        return a.value > b.value || (a.value == b.value && a.seq > b.seq);
    };
    std::priority_queue<Entry, std::vector<Entry>, decltype(later)> queue(later);
    std::uint64_t seq = 0;

    for (std::size_t s = 0; s < seeds.size(); ++s) {
        const auto& p = seeds[s];
        if (!relief.contains(static_cast<long long>(p[0]), static_cast<long long>(p[1]), static_cast<long long>(p[2])))
            throw std::invalid_argument("seed outside volume");
        const std::size_t i = relief.index(p[0], p[1], p[2]);
        if (labels[i] != 0) throw std::invalid_argument("duplicate seed coordinates");
        labels[i] = static_cast<std::uint32_t>(s + 1);
        queue.push({relief[i], seq++, i});
    }

    while (!queue.empty()) {
        const Entry top = queue.top();
        queue.pop();
        const std::uint32_t label = labels[top.index];
        const auto [x, y, z] = relief.coord(top.index);
        detail::for_each_neighbor26(relief, x, y, z, [&](std::size_t j, auto, auto, auto) {
            if (labels[j] != 0 || !(static_cast<double>(relief[j]) < mask_level)) return;
            labels[j] = label;
            queue.push({relief[j], seq++, j});
        });
    }
    return labels;
}

// ---------------------------------------------------------------------------
// Region extraction
// ---------------------------------------------------------------------------

/// Builds one record per label, drops regions below `min_region_voxels`
/// (clearing them to background) and renumbers the survivors 1..K in order
/// of their original label.
[[nodiscard]] inline std::vector<RegionRecord> extract_regions(LabelVolume& labels, const VolumeBlock& intensity,
                                                               std::size_t min_region_voxels) {
    if (labels.extents() != intensity.extents()) throw std::invalid_argument("label and intensity extents differ");
    std::uint32_t max_label = 0;
    for (auto l : labels.span()) max_label = std::max(max_label, l);
    if (max_label == 0) return {};

    // Counting sort of voxel indices by label.
    std::vector<std::size_t> start(static_cast<std::size_t>(max_label) + 2, 0);
    for (auto l : labels.span()) ++start[static_cast<std::size_t>(l) + 1];
    for (std::size_t l = 1; l < start.size(); ++l) start[l] += start[l - 1];
    std::vector<std::size_t> order(labels.size());
    {
        auto fill = start;
        for (std::size_t i = 0; i < labels.size(); ++i) order[fill[labels[i]]++] = i;
    }

    std::vector<std::uint32_t> remap(static_cast<std::size_t>(max_label) + 1, 0);
    std::vector<RegionRecord> regions;
    std::vector<std::array<std::size_t, 3>> coords;
    std::vector<std::uint16_t> values;
    for (std::uint32_t l = 1; l <= max_label; ++l) {
        const std::size_t begin = start[l], end = start[l + 1];
        const std::size_t count = end - begin;
        if (count == 0 || count < min_region_voxels) continue;
        RegionRecord r;
        r.label = static_cast<std::uint32_t>(regions.size() + 1);
        r.voxel_count = count;
        r.bbox_min = {std::numeric_limits<std::size_t>::max(), std::numeric_limits<std::size_t>::max(),
                      std::numeric_limits<std::size_t>::max()};
        coords.clear();
        values.clear();
        double sx = 0, sy = 0, sz = 0;
        for (std::size_t k = begin; k < end; ++k) {
            const auto c = labels.coord(order[k]);
            coords.push_back(c);
            values.push_back(intensity.voxels[order[k]]);
            sx += double(c[0]);
            sy += double(c[1]);
            sz += double(c[2]);
            for (int a = 0; a < 3; ++a) {
                r.bbox_min[a] = std::min(r.bbox_min[a], c[a]);
                r.bbox_max[a] = std::max(r.bbox_max[a], c[a]);
            }
        }
        const double n = double(count);
        r.centroid = {sx / n, sy / n, sz / n};
        r.features = compute_features<std::uint16_t>(coords, values, intensity.resolution);
        remap[l] = r.label;
        regions.push_back(r);
    }
    for (auto& l : labels.span()) l = remap[l];
    return regions;
}

/// DoG, seeds, watershed on the negated DoG, region extraction.
[[nodiscard]] inline Segmentation segment_block(const VolumeBlock& block, const SegParams& p) {
    p.validate();
    Segmentation seg;
    const FloatVolume dog = difference_of_gaussians(block, p);
    const auto seeds = detect_seeds(dog, p.seed_threshold);
    seg.seed_count = seeds.size();
    if (seeds.empty()) {
        seg.labels = LabelVolume(block.extents(), 0);
        return seg;
    }
    FloatVolume relief = dog;
    for (auto& v : relief.span()) v = -v;
    seg.labels = watershed_3d(relief, seeds, -p.seed_threshold);
    seg.regions = extract_regions(seg.labels, block, p.min_region_voxels);
    return seg;
}

}  // namespace neurovol
