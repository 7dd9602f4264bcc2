#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <map>
#include <stdexcept>
#include <utility>
#include <vector>

#include "json.hpp"
#include "neurovol/annotations.hpp"
#include "neurovol/concurrency.hpp"
#include "neurovol/segmentation.hpp"
#include "neurovol/volume.hpp"

namespace neurovol {

enum class Axis : std::uint8_t { x = 0, y = 1 };

[[nodiscard]] inline const char* to_string(Axis a) noexcept { return a == Axis::x ? "x" : "y"; }

struct OverlapResult {
    Axis axis = Axis::x;
    std::size_t best_overlap = 0;
    std::vector<std::pair<std::size_t, double>> loss_curve;
    double loss = 0.0;
};

namespace detail {

inline void check_perpendicular(const Extents& a, const Extents& b, Axis axis) {
    const bool ok = axis == Axis::x ? (a.ny == b.ny && a.nz == b.nz) : (a.nx == b.nx && a.nz == b.nz);
    if (!ok) throw std::invalid_argument("blocks differ in extent perpendicular to the stitching axis");
}

}  // namespace detail

/// Mean absolute difference between the trailing `overlap` planes of `a` and
/// the leading `overlap` planes of `b` along `axis`.
[[nodiscard]] inline double overlap_loss(const Volume<std::uint16_t>& a, const Volume<std::uint16_t>& b, Axis axis,
                                         std::size_t overlap) {
    const auto& ea = a.extents();
    const auto& eb = b.extents();
    detail::check_perpendicular(ea, eb, axis);
    const int ax = static_cast<int>(axis);
    if (overlap < 1 || overlap > std::min(ea.axis(ax), eb.axis(ax)))
        throw std::invalid_argument("overlap outside [1, extent]");

    std::int64_t sum = 0;
    if (axis == Axis::x) {
        const std::size_t a0 = ea.nx - overlap;
        for (std::size_t z = 0; z < ea.nz; ++z)
            for (std::size_t y = 0; y < ea.ny; ++y) {
                const std::uint16_t* pa = &a.at(a0, y, z);
                const std::uint16_t* pb = &b.at(0, y, z);
                for (std::size_t x = 0; x < overlap; ++x)
                    sum += std::abs(static_cast<std::int32_t>(pa[x]) - static_cast<std::int32_t>(pb[x]));
            }
    } else {
        const std::size_t a0 = ea.ny - overlap;
        for (std::size_t z = 0; z < ea.nz; ++z)
            for (std::size_t y = 0; y < overlap; ++y) {
                const std::uint16_t* pa = &a.at(0, a0 + y, z);
                const std::uint16_t* pb = &b.at(0, y, z);
                for (std::size_t x = 0; x < ea.nx; ++x)
                    sum += std::abs(static_cast<std::int32_t>(pa[x]) - static_cast<std::int32_t>(pb[x]));
            }
    }
    const std::size_t perpendicular = axis == Axis::x ? ea.ny * ea.nz : ea.nx * ea.nz;
    return static_cast<double>(sum) / static_cast<double>(overlap * perpendicular);
}

[[nodiscard]] inline double overlap_loss(const VolumeBlock& a, const VolumeBlock& b, Axis axis, std::size_t overlap) {
    return overlap_loss(a.voxels, b.voxels, axis, overlap);
}

/// Largest overlap searched: floor(max_frac * extent).
[[nodiscard]] inline std::size_t max_search_overlap(std::size_t extent, double max_frac) noexcept {
    return static_cast<std::size_t>(std::floor(max_frac * static_cast<double>(extent) + 1e-9));
}

/// Steps the overlap from 1 voxel up to max_frac of the extent and keeps the
/// minimum loss; equal losses resolve to the smaller overlap.
[[nodiscard]] inline OverlapResult find_optimal_overlap(const VolumeBlock& a, const VolumeBlock& b, Axis axis,
                                                        double max_frac = 0.10) {
    detail::check_perpendicular(a.extents(), b.extents(), axis);
    const int ax = static_cast<int>(axis);
    const std::size_t extent = std::min(a.extents().axis(ax), b.extents().axis(ax));
    const std::size_t limit = max_search_overlap(extent, max_frac);
    if (limit < 1) throw std::invalid_argument("overlap search range is empty");

    OverlapResult r;
    r.axis = axis;
    r.loss_curve.reserve(limit);
    for (std::size_t v = 1; v <= limit; ++v) {
        const double loss = overlap_loss(a.voxels, b.voxels, axis, v);
        r.loss_curve.emplace_back(v, loss);
        if (v == 1 || loss < r.loss) {
            r.loss = loss;
            r.best_overlap = v;
        }
    }
    return r;
}

/// Linear ramp across the overlap depth, sampled at plane midpoints:
/// t_i = (i + 0.5) / depth, fused = round((1 - t) a + t b).
[[nodiscard]] inline Volume<std::uint16_t> blend_overlap(const Volume<std::uint16_t>& a_strip,
                                                         const Volume<std::uint16_t>& b_strip, Axis axis) {
    if (a_strip.extents() != b_strip.extents()) throw std::invalid_argument("strips differ in extent");
    const auto& e = a_strip.extents();
    const std::size_t depth = e.axis(static_cast<int>(axis));
    Volume<std::uint16_t> out(e);
    for (std::size_t z = 0; z < e.nz; ++z)
        for (std::size_t y = 0; y < e.ny; ++y)
            for (std::size_t x = 0; x < e.nx; ++x) {
                const std::size_t i = axis == Axis::x ? x : y;
                const double t = (double(i) + 0.5) / double(depth);
                const double v = (1.0 - t) * a_strip.at(x, y, z) + t * b_strip.at(x, y, z);
                out.at(x, y, z) = static_cast<std::uint16_t>(std::clamp<long>(std::lround(v), 0, 65535));
            }
    return out;
}

// ---------------------------------------------------------------------------
// Grid stitching
// ---------------------------------------------------------------------------

struct PairOverlap {
    GridPos a{};
    GridPos b{};
    OverlapResult result;
};

struct StitchPlan {
    int rows = 1;
    int cols = 1;
    std::vector<std::array<std::size_t, 3>> offsets;  // row-major slots, z always 0
    Extents extents{};
    std::vector<std::size_t> column_overlaps;  // per column boundary
    std::vector<std::size_t> row_overlaps;     // per row boundary
    std::vector<PairOverlap> pairs;

    [[nodiscard]] bool contains(GridPos p) const noexcept {
        return p.row >= 0 && p.col >= 0 && p.row < rows && p.col < cols;
    }
    [[nodiscard]] const std::array<std::size_t, 3>& offset(GridPos p) const {
        if (!contains(p)) throw std::invalid_argument("block not in stitch plan");
        return offsets[static_cast<std::size_t>(p.row) * cols + p.col];
    }
};

struct StitchOptions {
    double max_frac = 0.10;
    std::size_t workers = 1;
};

struct StitchResult {
    VolumeBlock stitched;
    StitchPlan plan;
};

namespace detail {

inline std::size_t lower_median(std::vector<std::size_t> v) {
    std::sort(v.begin(), v.end());
    return v[(v.size() - 1) / 2];
}

/// Lays `parts` side by side along `axis`, blending each boundary over the
/// given overlap depth.
inline Volume<std::uint16_t> merge_along(const std::vector<const Volume<std::uint16_t>*>& parts,
                                         const std::vector<std::size_t>& offsets, std::size_t total, Axis axis) {
    const auto& e0 = parts.front()->extents();
    Extents out_ext = e0;
    (axis == Axis::x ? out_ext.nx : out_ext.ny) = total;
    Volume<std::uint16_t> out(out_ext);
    out.paste(*parts[0], 0, 0, 0);
    for (std::size_t i = 1; i < parts.size(); ++i) {
        const auto& part = *parts[i];
        const auto& e = part.extents();
        const std::size_t start = offsets[i];
        const std::size_t prev_end = offsets[i - 1] + (axis == Axis::x ? parts[i - 1]->extents().nx
                                                                        : parts[i - 1]->extents().ny);
        const std::size_t depth = prev_end - start;
        if (axis == Axis::x) {
            const auto a_strip = out.crop(start, prev_end, 0, e.ny, 0, e.nz);
            const auto b_strip = part.crop(0, depth, 0, e.ny, 0, e.nz);
            out.paste(blend_overlap(a_strip, b_strip, axis), start, 0, 0);
            out.paste(part.crop(depth, e.nx, 0, e.ny, 0, e.nz), prev_end, 0, 0);
        } else {
            const auto a_strip = out.crop(0, e.nx, start, prev_end, 0, e.nz);
            const auto b_strip = part.crop(0, e.nx, 0, depth, 0, e.nz);
            out.paste(blend_overlap(a_strip, b_strip, axis), 0, start, 0);
            out.paste(part.crop(0, e.nx, depth, e.ny, 0, e.nz), 0, prev_end, 0);
        }
    }
    return out;
}

}  // namespace detail

/// Estimates every neighbor overlap, reconciles them per grid boundary with
/// the lower median across the grid, and places blocks with blended seams.
[[nodiscard]] inline StitchResult stitch_grid(const std::vector<VolumeBlock>& blocks, const GridLayout& layout,
                                              const StitchOptions& opt = {}) {
    const int rows = layout.rows(), cols = layout.cols();
    std::vector<const VolumeBlock*> grid(layout.size(), nullptr);
    for (const auto& b : blocks) {
        if (!layout.contains(b.grid_pos)) throw std::invalid_argument("block outside grid layout");
        auto& slot = grid[layout.slot(b.grid_pos)];
        if (slot) throw std::invalid_argument("duplicate block in grid");
        slot = &b;
    }
    for (std::size_t i = 0; i < grid.size(); ++i)
        if (!grid[i]) throw std::invalid_argument("missing block in grid");
    const auto& first = *grid[0];
    for (const auto* b : grid)
        if (b->extents() != first.extents() || !(b->resolution == first.resolution))
            throw std::invalid_argument("blocks must share extents and resolution");
    const Extents e = first.extents();

    StitchResult res;
    auto& plan = res.plan;
    plan.rows = rows;
    plan.cols = cols;

    for (int r = 0; r < rows; ++r)
        for (int c = 0; c + 1 < cols; ++c) plan.pairs.push_back({{r, c}, {r, c + 1}, {}});
    for (int r = 0; r + 1 < rows; ++r)
        for (int c = 0; c < cols; ++c) plan.pairs.push_back({{r, c}, {r + 1, c}, {}});
    parallel_for(plan.pairs.size(), opt.workers, [&](std::size_t i) {
        auto& p = plan.pairs[i];
        const Axis axis = p.a.row == p.b.row ? Axis::x : Axis::y;
        p.result = find_optimal_overlap(*grid[layout.slot(p.a)], *grid[layout.slot(p.b)], axis, opt.max_frac);
    });

    std::vector<std::vector<std::size_t>> col_votes(cols > 1 ? cols - 1 : 0), row_votes(rows > 1 ? rows - 1 : 0);
    for (const auto& p : plan.pairs) {
        if (p.result.axis == Axis::x) col_votes[p.a.col].push_back(p.result.best_overlap);
        else row_votes[p.a.row].push_back(p.result.best_overlap);
    }
    for (auto& v : col_votes) plan.column_overlaps.push_back(detail::lower_median(v));
    for (auto& v : row_votes) plan.row_overlaps.push_back(detail::lower_median(v));

    std::vector<std::size_t> xoff(cols, 0), yoff(rows, 0);
    for (int c = 1; c < cols; ++c) xoff[c] = xoff[c - 1] + e.nx - plan.column_overlaps[c - 1];
    for (int r = 1; r < rows; ++r) yoff[r] = yoff[r - 1] + e.ny - plan.row_overlaps[r - 1];
    plan.extents = {xoff.back() + e.nx, yoff.back() + e.ny, e.nz};
    plan.offsets.resize(layout.size());
    for (int r = 0; r < rows; ++r)
        for (int c = 0; c < cols; ++c) plan.offsets[layout.slot({r, c})] = {xoff[c], yoff[r], 0};

    std::vector<Volume<std::uint16_t>> row_volumes;
    row_volumes.reserve(rows);
    for (int r = 0; r < rows; ++r) {
        std::vector<const Volume<std::uint16_t>*> parts;
        for (int c = 0; c < cols; ++c) parts.push_back(&grid[layout.slot({r, c})]->voxels);
        row_volumes.push_back(detail::merge_along(parts, xoff, plan.extents.nx, Axis::x));
    }
    std::vector<const Volume<std::uint16_t>*> row_parts;
    for (const auto& v : row_volumes) row_parts.push_back(&v);

    res.stitched.voxels = detail::merge_along(row_parts, yoff, plan.extents.ny, Axis::y);
    res.stitched.channel = first.channel;
    res.stitched.resolution = first.resolution;
    res.stitched.grid_pos = {0, 0};
    return res;
}

// ---------------------------------------------------------------------------
// Coordinate translation
// ---------------------------------------------------------------------------

[[nodiscard]] inline Vec3 translate_point(const Vec3& p, const std::array<std::size_t, 3>& offset, int sign = 1) {
    return {p[0] + sign * double(offset[0]), p[1] + sign * double(offset[1]), p[2] + sign * double(offset[2])};
}

/// Moves block-local records into the stitched frame (sign = -1 undoes it).
[[nodiscard]] inline std::vector<RegionRecord> translate_annotations(std::vector<RegionRecord> records, GridPos block,
                                                                     const StitchPlan& plan, int sign = 1) {
    const auto& off = plan.offset(block);
    for (auto& r : records) r.centroid = translate_point(r.centroid, off, sign);
    return records;
}

[[nodiscard]] inline std::vector<Annotation> translate_annotations(std::vector<Annotation> records, GridPos block,
                                                                   const StitchPlan& plan, int sign = 1) {
    const auto& off = plan.offset(block);
    for (auto& a : records)
        for (auto& c : a.coords) c = translate_point(c, off, sign);
    return records;
}

// ---------------------------------------------------------------------------
// Plan serialization
// ---------------------------------------------------------------------------

[[nodiscard]] inline nlohmann::json plan_to_json(const StitchPlan& plan) {
    using nlohmann::json;
    json blocks = json::array();
    for (int r = 0; r < plan.rows; ++r)
        for (int c = 0; c < plan.cols; ++c) {
            const auto& o = plan.offset({r, c});
            blocks.push_back({{"row", r}, {"col", c}, {"offset", {o[0], o[1], o[2]}}});
        }
    json pairs = json::array();
    for (const auto& p : plan.pairs)
        pairs.push_back({{"a", {p.a.row, p.a.col}},
                         {"b", {p.b.row, p.b.col}},
                         {"axis", to_string(p.result.axis)},
                         {"best_overlap", p.result.best_overlap},
                         {"loss", p.result.loss}});
    return {{"rows", plan.rows},
            {"cols", plan.cols},
            {"extents", {plan.extents.nx, plan.extents.ny, plan.extents.nz}},
            {"column_overlaps", plan.column_overlaps},
            {"row_overlaps", plan.row_overlaps},
            {"blocks", std::move(blocks)},
            {"pairs", std::move(pairs)}};
}

[[nodiscard]] inline StitchPlan plan_from_json(const nlohmann::json& j) {
    StitchPlan plan;
    try {
        plan.rows = j.at("rows").get<int>();
        plan.cols = j.at("cols").get<int>();
        const auto ext = j.at("extents");
        plan.extents = {ext.at(0).get<std::size_t>(), ext.at(1).get<std::size_t>(), ext.at(2).get<std::size_t>()};
        plan.column_overlaps = j.at("column_overlaps").get<std::vector<std::size_t>>();
        plan.row_overlaps = j.at("row_overlaps").get<std::vector<std::size_t>>();
        plan.offsets.assign(static_cast<std::size_t>(plan.rows) * plan.cols, {0, 0, 0});
        for (const auto& b : j.at("blocks")) {
            const GridPos p{b.at("row").get<int>(), b.at("col").get<int>()};
            if (!plan.contains(p)) throw std::invalid_argument("plan block outside grid");
            const auto& o = b.at("offset");
            plan.offsets[static_cast<std::size_t>(p.row) * plan.cols + p.col] = {
                o.at(0).get<std::size_t>(), o.at(1).get<std::size_t>(), o.at(2).get<std::size_t>()};
        }
        for (const auto& p : j.at("pairs")) {
            PairOverlap po;
            po.a = {p.at("a").at(0).get<int>(), p.at("a").at(1).get<int>()};
            po.b = {p.at("b").at(0).get<int>(), p.at("b").at(1).get<int>()};
            po.result.axis = p.at("axis").get<std::string>() == "x" ? Axis::x : Axis::y;
            po.result.best_overlap = p.at("best_overlap").get<std::size_t>();
            po.result.loss = p.at("loss").get<double>();
            plan.pairs.push_back(std::move(po));
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("malformed stitch plan: ") + e.what());
    }
    return plan;
}

}  // namespace neurovol
