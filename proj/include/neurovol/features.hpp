#pragma once

#include <array>
#include <cmath>
#include <numbers>
#include <span>
#include <stdexcept>

#include "neurovol/volume.hpp"

namespace neurovol {

/// Per-region descriptor used by the neuron/glia classifier.
struct FeatureVector {
    static constexpr std::size_t size = 6;

    double volume_um3 = 0.0;
    double diameter_um = 0.0;
    double mean = 0.0;
    double stddev = 0.0;
    double kurtosis = 0.0;  // excess
    double skew = 0.0;

    [[nodiscard]] std::array<double, size> values() const noexcept {
        return {volume_um3, diameter_um, mean, stddev, kurtosis, skew};
    }
    [[nodiscard]] static FeatureVector from_values(const std::array<double, size>& v) noexcept {
        return {v[0], v[1], v[2], v[3], v[4], v[5]};
    }
    [[nodiscard]] bool finite() const noexcept {
        for (double v : values())
            if (!std::isfinite(v)) return false;
        return true;
    }

    friend bool operator==(const FeatureVector&, const FeatureVector&) = default;
};

[[nodiscard]] inline double equivalent_diameter(double volume) noexcept {
    return std::cbrt(6.0 * volume / std::numbers::pi);
}

/// Volume, equivalent-sphere diameter and population moments of the region's
/// intensities. A constant region has zero skew and zero excess kurtosis.
template <typename Intensity>
[[nodiscard]] FeatureVector compute_features(std::span<const std::array<std::size_t, 3>> voxels,
                                             std::span<const Intensity> intensities, const Resolution& res) {
    if (voxels.empty()) throw std::invalid_argument("cannot compute features of an empty region");
    if (voxels.size() != intensities.size()) throw std::invalid_argument("voxel and intensity counts differ");
    res.validate();

    const double n = static_cast<double>(intensities.size());
    double sum = 0.0;
    for (auto v : intensities) sum += static_cast<double>(v);
    const double mean = sum / n;
    double m2 = 0.0, m3 = 0.0, m4 = 0.0;
    for (auto v : intensities) {
        const double d = static_cast<double>(v) - mean;
        const double d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;

    FeatureVector f;
    f.volume_um3 = n * res.voxel_volume();
    f.diameter_um = equivalent_diameter(f.volume_um3);
    f.mean = mean;
    f.stddev = std::sqrt(m2);
    if (m2 > 0.0) {
        f.skew = m3 / (m2 * f.stddev);
        f.kurtosis = m4 / (m2 * m2) - 3.0;
    }
    return f;
}

}  // namespace neurovol
