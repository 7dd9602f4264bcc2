#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "neurovol/annotations.hpp"
#include "neurovol/phantom.hpp"
#include "neurovol/segmentation.hpp"
#include "neurovol/stitching.hpp"
#include "neurovol/store.hpp"

namespace neurovol {

// ---------------------------------------------------------------------------
// Phantom ground truth files
// ---------------------------------------------------------------------------

[[nodiscard]] inline nlohmann::json truth_to_json(const PhantomTruth& t) {
    nlohmann::json nuclei = nlohmann::json::array();
    for (const auto& n : t.nuclei)
        nuclei.push_back({{"center", n.center},
                          {"radius", n.radius},
                          {"class", to_string(n.cls)},
                          {"active", n.active},
                          {"block", {n.block.row, n.block.col}},
                          {"amplitude", n.amplitude}});
    return {{"overlap_x", t.overlap_x},
            {"overlap_y", t.overlap_y},
            {"canvas", {t.canvas.nx, t.canvas.ny, t.canvas.nz}},
            {"nuclei", std::move(nuclei)}};
}

[[nodiscard]] inline PhantomTruth truth_from_json(const nlohmann::json& j) {
    PhantomTruth t;
    try {
        t.overlap_x = j.at("overlap_x").get<std::size_t>();
        t.overlap_y = j.at("overlap_y").get<std::size_t>();
        const auto c = j.at("canvas").get<std::array<std::size_t, 3>>();
        t.canvas = {c[0], c[1], c[2]};
        for (const auto& n : j.at("nuclei")) {
            PhantomNucleus p;
            p.center = n.at("center").get<Vec3>();
            p.radius = n.at("radius").get<double>();
            p.cls = parse_cell_class(n.at("class").get<std::string>());
            p.active = n.at("active").get<bool>();
            p.block = {n.at("block").at(0).get<int>(), n.at("block").at(1).get<int>()};
            p.amplitude = n.at("amplitude").get<double>();
            t.nuclei.push_back(p);
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("malformed truth file: ") + e.what());
    }
    return t;
}

/// Copies the class of the nearest true nucleus (canvas frame, placed in any
/// block) onto each region when it lies within `max_distance` voxels; regions
/// with no such nucleus stay unlabeled.
inline void label_regions_from_truth(std::vector<RegionRecord>& regions, GridPos block, const PhantomTruth& truth,
                                     const Extents& block_extents, double max_distance = 3.0) {
    const auto o = truth.origin(block, block_extents);
    for (auto& r : regions) {
        const Vec3 c = translate_point(r.centroid, o);
        double best = std::numeric_limits<double>::infinity();
        const PhantomNucleus* hit = nullptr;
        for (const auto& n : truth.nuclei) {
            const double d = std::hypot(c[0] - n.center[0], c[1] - n.center[1], c[2] - n.center[2]);
            if (d < best) best = d, hit = &n;
        }
        r.cls = hit && best <= max_distance ? hit->cls : CellClass::unlabeled;
    }
}

/// Centroid points in the stitched frame, one per region, with ids that let
/// retraining join them back to the stored features.
[[nodiscard]] inline std::vector<Annotation> regions_to_annotations(const std::vector<StoredRegion>& regions,
                                                                    const StitchPlan& plan,
                                                                    const Extents& stitched) {
    std::vector<Annotation> out;
    for (const auto& s : regions) {
        Annotation a;
        a.id = region_annotation_id(s.block, s.region.label);
        a.kind = AnnotationKind::point;
        a.cls = s.region.cls == CellClass::unlabeled ? "centroid" : to_string(s.region.cls);
        a.provenance = Provenance::algorithm;
        Vec3 c = translate_point(s.region.centroid, plan.offset(s.block));
        for (int ax = 0; ax < 3; ++ax)
            c[ax] = std::clamp(c[ax], 0.0, std::nextafter(static_cast<double>(stitched.axis(ax)), 0.0));
        a.coords = {c};
        out.push_back(std::move(a));
    }
    return out;
}

}  // namespace neurovol
