#pragma once

#include <cstdint>
#include <string>

#include "json.hpp"
#include "neurovol/block_io.hpp"
#include "neurovol/classify.hpp"
#include "neurovol/phantom.hpp"
#include "neurovol/segmentation.hpp"

namespace neurovol {

/// Everything a pipeline run depends on. The JSON form is what
/// `--dump-config` prints and `--config` reads.
struct PipelineConfig {
    std::string block_dir = "blocks";
    std::string store_root = "store";
    std::string out_dir = "out";
    std::string dataset = "phantom";

    PhantomSpec phantom{};
    SegParams seg{};
    double svm_C = 1.0;
    TrainOptions svm{};
    std::size_t folds = 5;
    double stitch_max_frac = 0.10;
    std::size_t workers = 1;
    std::uint64_t seed = 42;
    std::size_t chunk = 64;
    std::size_t num_scales = 1;
    double coincidence_threshold = 500.0;

    /// Phantom geometry is checked when a phantom is generated.
    void validate() const {
        seg.validate();
        if (!(svm_C > 0.0)) throw std::invalid_argument("svm C must be positive");
        if (svm.epochs < 1 || !(svm.initial_step > 0.0)) throw std::invalid_argument("bad svm schedule");
        if (folds < 2) throw std::invalid_argument("need at least two folds");
        if (!(stitch_max_frac > 0.0 && stitch_max_frac <= 1.0))
            throw std::invalid_argument("stitch max_frac must lie in (0, 1]");
        if (workers < 1) throw std::invalid_argument("worker count must be at least 1");
        if (chunk < 1 || num_scales < 1) throw std::invalid_argument("chunk and num_scales must be positive");
    }
};

[[nodiscard]] inline nlohmann::json config_to_json(const PipelineConfig& c) {
    const auto& p = c.phantom;
    return {
        {"paths", {{"block_dir", c.block_dir}, {"store_root", c.store_root}, {"out_dir", c.out_dir}}},
        {"dataset", c.dataset},
        {"phantom",
         {{"rows", p.grid.rows()},
          {"cols", p.grid.cols()},
          {"snake", p.grid.snake()},
          {"extents", {p.block_extents.nx, p.block_extents.ny, p.block_extents.nz}},
          {"overlap_x", p.true_overlap_x},
          {"overlap_y", p.true_overlap_y},
          {"nuclei_per_block", p.nuclei_per_block},
          {"radius_min", p.radius_min},
          {"radius_max", p.radius_max},
          {"background", p.background},
          {"foreground", p.foreground},
          {"noise_sigma", p.noise_sigma},
          {"neuron_fraction", p.neuron_fraction},
          {"active_fraction", p.active_fraction},
          {"resolution", {p.resolution.dx, p.resolution.dy, p.resolution.dz}}}},
        {"segmentation",
         {{"sigma1", c.seg.sigma1},
          {"sigma2", c.seg.sigma2},
          {"seed_threshold", c.seg.seed_threshold},
          {"min_region_voxels", c.seg.min_region_voxels}}},
        {"svm", {{"C", c.svm_C}, {"epochs", c.svm.epochs}, {"initial_step", c.svm.initial_step}, {"folds", c.folds}}},
        {"stitch", {{"max_frac", c.stitch_max_frac}}},
        {"store", {{"chunk", c.chunk}, {"num_scales", c.num_scales}}},
        {"coincidence_threshold", c.coincidence_threshold},
        {"workers", c.workers},
        {"seed", c.seed},
    };
}

/// Missing keys keep their defaults; unknown types are rejected.
[[nodiscard]] inline PipelineConfig config_from_json(const nlohmann::json& j) {
    PipelineConfig c;
    try {
        if (j.contains("paths")) {
            const auto& p = j["paths"];
            c.block_dir = p.value("block_dir", c.block_dir);
            c.store_root = p.value("store_root", c.store_root);
            c.out_dir = p.value("out_dir", c.out_dir);
        }
        c.dataset = j.value("dataset", c.dataset);
        if (j.contains("phantom")) {
            const auto& p = j["phantom"];
            auto& s = c.phantom;
            s.grid = GridLayout(p.value("rows", s.grid.rows()), p.value("cols", s.grid.cols()),
                                p.value("snake", s.grid.snake()));
            if (p.contains("extents")) {
                const auto e = p["extents"].get<std::array<std::size_t, 3>>();
                s.block_extents = {e[0], e[1], e[2]};
            }
            s.true_overlap_x = p.value("overlap_x", s.true_overlap_x);
            s.true_overlap_y = p.value("overlap_y", s.true_overlap_y);
            s.nuclei_per_block = p.value("nuclei_per_block", s.nuclei_per_block);
            s.radius_min = p.value("radius_min", s.radius_min);
            s.radius_max = p.value("radius_max", s.radius_max);
            s.background = p.value("background", s.background);
            s.foreground = p.value("foreground", s.foreground);
            s.noise_sigma = p.value("noise_sigma", s.noise_sigma);
            s.neuron_fraction = p.value("neuron_fraction", s.neuron_fraction);
            s.active_fraction = p.value("active_fraction", s.active_fraction);
            if (p.contains("resolution")) {
                const auto r = p["resolution"].get<std::array<double, 3>>();
                s.resolution = {r[0], r[1], r[2]};
            }
        }
        if (j.contains("segmentation")) {
            const auto& s = j["segmentation"];
            c.seg.sigma1 = s.value("sigma1", c.seg.sigma1);
            c.seg.sigma2 = s.value("sigma2", c.seg.sigma2);
            c.seg.seed_threshold = s.value("seed_threshold", c.seg.seed_threshold);
            c.seg.min_region_voxels = s.value("min_region_voxels", c.seg.min_region_voxels);
        }
        if (j.contains("svm")) {
            const auto& s = j["svm"];
            c.svm_C = s.value("C", c.svm_C);
            c.svm.epochs = s.value("epochs", c.svm.epochs);
            c.svm.initial_step = s.value("initial_step", c.svm.initial_step);
            c.folds = s.value("folds", c.folds);
        }
        if (j.contains("stitch")) c.stitch_max_frac = j["stitch"].value("max_frac", c.stitch_max_frac);
        if (j.contains("store")) {
            c.chunk = j["store"].value("chunk", c.chunk);
            c.num_scales = j["store"].value("num_scales", c.num_scales);
        }
        c.coincidence_threshold = j.value("coincidence_threshold", c.coincidence_threshold);
        c.workers = j.value("workers", c.workers);
        c.seed = j.value("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("malformed config: ") + e.what());
    }
    c.validate();
    return c;
}

[[nodiscard]] inline PipelineConfig load_config(const fs::path& path) {
    const auto text = detail::read_file(path);
    try {
        return config_from_json(nlohmann::json::parse(text));
    } catch (const nlohmann::json::parse_error& e) {
        throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
    }
}

}  // namespace neurovol
