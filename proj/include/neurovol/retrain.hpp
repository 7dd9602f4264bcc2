#pragma once

#include <cerrno>
#include <cstdint>
#include <cstdio>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include "neurovol/classify.hpp"
#include "neurovol/error.hpp"
#include "neurovol/store.hpp"

namespace neurovol {

inline constexpr std::size_t min_examples_per_class = 5;

[[nodiscard]] inline fs::path models_dir(const Store& store, const std::string& dataset) {
    return store.dataset_dir(dataset) / "models";
}

/// Model versions present for a dataset, ascending.
[[nodiscard]] inline std::vector<std::uint64_t> model_versions(const Store& store, const std::string& dataset) {
    std::vector<std::uint64_t> out;
    const auto dir = models_dir(store, dataset);
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) return out;
    static const std::regex pattern(R"(model-v(\d+)\.nvm)");
    for (const auto& e : fs::directory_iterator(dir)) {
        std::smatch m;
        const auto name = e.path().filename().string();
        if (std::regex_match(name, m, pattern)) out.push_back(std::stoull(m[1].str()));
    }
    std::sort(out.begin(), out.end());
    return out;
}

[[nodiscard]] inline std::optional<SvmModel> latest_model(const Store& store, const std::string& dataset) {
    const auto v = model_versions(store, dataset);
    if (v.empty()) return std::nullopt;
    return read_model(models_dir(store, dataset) / ("model-v" + std::to_string(v.back()) + ".nvm"));
}

/// Persists `model` under the next free version; the file is created
/// exclusively so concurrent savers never share a version.
inline std::uint64_t save_model_version(const Store& store, const std::string& dataset, SvmModel& model) {
    const auto dir = models_dir(store, dataset);
    fs::create_directories(dir);
    const auto existing = model_versions(store, dataset);
    std::uint64_t v = existing.empty() ? 1 : existing.back() + 1;
    for (;; ++v) {
        const auto path = dir / ("model-v" + std::to_string(v) + ".nvm");
        std::FILE* f = std::fopen(path.c_str(), "wx");
        if (!f) {
            if (errno == EEXIST) continue;
            throw Error("cannot create " + path.string());
        }
        model.version = v;
        const auto text = encode_model(model);
        const bool ok = std::fwrite(text.data(), 1, text.size(), f) == text.size();
        if (std::fclose(f) != 0 || !ok) throw Error("short write to " + path.string());
        return v;
    }
}

struct RetrainResult {
    SvmModel model;
    CvReport cv;
    std::int64_t revision = 0;
    std::map<std::string, std::size_t> counts;  // examples per class
    std::size_t unmatched = 0;                  // labeled points with no stored region
};

/// Trains a fresh model from the neuron/glia points of the layer's head
/// revision, joined to stored region features by (block, label) encoded in the
/// annotation id, cross-validates it and saves it as the next model version.
[[nodiscard]] inline RetrainResult retrain_from_annotations(Store& store, const std::string& dataset, double C,
                                                            std::uint64_t seed,
                                                            const std::string& layer = "centroids",
                                                            std::size_t folds = 5, const TrainOptions& opt = {}) {
    std::map<std::pair<GridPos, std::uint32_t>, FeatureVector> features;
    for (const auto& s : store.read_regions(dataset)) features[{s.block, s.region.label}] = s.region.features;

    RetrainResult res;
    res.revision = store.head(dataset, layer);
    std::vector<FeatureVector> x;
    std::vector<CellClass> y;
    res.counts = {{"neuron", 0}, {"glia", 0}};
    for (const auto& a : store.read_annotations(dataset, layer, std::nullopt, res.revision)) {
        if (a.kind != AnnotationKind::point || (a.cls != "neuron" && a.cls != "glia")) continue;
        const auto key = parse_region_annotation_id(a.id);
        const auto it = key ? features.find(*key) : features.end();
        if (it == features.end()) {
            ++res.unmatched;
            continue;
        }
        x.push_back(it->second);
        y.push_back(parse_cell_class(a.cls));
        ++res.counts[a.cls];
    }
    const std::size_t need = std::max(min_examples_per_class, folds);
    if (res.counts["neuron"] < need || res.counts["glia"] < need)
        throw PreconditionFailed("retraining needs at least " + std::to_string(need) +
                                     " labeled examples per class (neuron " + std::to_string(res.counts["neuron"]) +
                                     ", glia " + std::to_string(res.counts["glia"]) + ")",
                                 res.counts);

    res.model = train_svm(x, y, C, seed, opt);
    res.model.training_revision = res.revision;
    res.cv = cross_validate(x, y, folds, C, seed, opt);
    std::lock_guard lock(store.dataset_mutex(dataset));
    save_model_version(store, dataset, res.model);
    return res;
}

}  // namespace neurovol
