#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "neurovol/block_io.hpp"
#include "neurovol/features.hpp"
#include "neurovol/phantom.hpp"
#include "neurovol/segmentation.hpp"

namespace neurovol {

using Features6 = std::array<double, FeatureVector::size>;

/// Linear SVM over z-scored features. Neuron is the positive class.
struct SvmModel {
    Features6 weights{};
    double bias = 0.0;
    Features6 mean{};
    Features6 scale{1, 1, 1, 1, 1, 1};
    double C = 1.0;
    std::uint64_t seed = 0;
    std::size_t epochs = 0;
    std::uint64_t version = 0;
    std::int64_t training_revision = 0;

    [[nodiscard]] Features6 normalize(const FeatureVector& x) const noexcept {
        const auto v = x.values();
        Features6 z{};
        for (std::size_t i = 0; i < z.size(); ++i) z[i] = (v[i] - mean[i]) / scale[i];
        return z;
    }

    [[nodiscard]] double decision(const FeatureVector& x) const {
        if (!x.finite()) throw std::invalid_argument("non-finite feature");
        const auto z = normalize(x);
        double d = bias;
        for (std::size_t i = 0; i < z.size(); ++i) d += weights[i] * z[i];
        return d;
    }

    friend bool operator==(const SvmModel&, const SvmModel&) = default;
};

struct TrainOptions {
    std::size_t epochs = 200;
    double initial_step = 0.5;
};

struct Prediction {
    CellClass cls = CellClass::unlabeled;
    double decision = 0.0;
};

struct CvReport {
    std::vector<double> fold_auc;
    double mean_auc = 0.0;
    std::uint64_t seed = 0;
    std::vector<std::size_t> fold_of;  // fold index per example

    friend bool operator==(const CvReport&, const CvReport&) = default;
};

namespace detail {

inline void check_training_set(std::span<const FeatureVector> x, std::span<const CellClass> y) {
    if (x.size() != y.size()) throw std::invalid_argument("feature and label counts differ");
    std::size_t pos = 0, neg = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!x[i].finite()) throw std::invalid_argument("non-finite feature");
        if (y[i] == CellClass::neuron) ++pos;
        else if (y[i] == CellClass::glia) ++neg;
        else throw std::invalid_argument("training labels must be neuron or glia");
    }
    if (pos == 0 || neg == 0) throw std::invalid_argument("training data must contain both classes");
}

}  // namespace detail

/// Soft-margin linear SVM: minimizes 0.5*|w|^2 + C * sum(hinge) by averaged
/// stochastic subgradient descent. The sample order is shuffled every epoch
/// from `seed`, so training is reproducible.
[[nodiscard]] inline SvmModel train_svm(std::span<const FeatureVector> x, std::span<const CellClass> y, double C,
                                        std::uint64_t seed, const TrainOptions& opt = {}) {
    detail::check_training_set(x, y);
    if (!(C > 0.0) || !std::isfinite(C)) throw std::invalid_argument("C must be positive");
    if (opt.epochs == 0) throw std::invalid_argument("need at least one epoch");

    const std::size_t n = x.size();
    constexpr std::size_t d = FeatureVector::size;
    SvmModel m;
    m.C = C;
    m.seed = seed;
    m.epochs = opt.epochs;

    for (const auto& f : x) {
        const auto v = f.values();
        for (std::size_t j = 0; j < d; ++j) m.mean[j] += v[j];
    }
    for (auto& v : m.mean) v /= double(n);
    Features6 var{};
    for (const auto& f : x) {
        const auto v = f.values();
        for (std::size_t j = 0; j < d; ++j) var[j] += (v[j] - m.mean[j]) * (v[j] - m.mean[j]);
    }
    for (std::size_t j = 0; j < d; ++j) {
        const double s = std::sqrt(var[j] / double(n));
        m.scale[j] = s > 0.0 ? s : 1.0;
    }

    std::vector<Features6> z(n);
    std::vector<double> label(n);
    for (std::size_t i = 0; i < n; ++i) {
        z[i] = m.normalize(x[i]);
        label[i] = y[i] == CellClass::neuron ? 1.0 : -1.0;
    }

    // Per-sample objective lambda/2 |w|^2 + hinge_i, lambda = 1/(C n), has the
    // same minimizer as the primal above.
    const double lambda = 1.0 / (C * double(n));
    Features6 w{}, w_avg{};
    double b = 0.0, b_avg = 0.0;
    std::size_t averaged = 0;
    std::uint64_t t = 0;
    std::mt19937_64 rng(seed);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    const std::size_t average_from = opt.epochs / 2;

    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t i : order) {
            const double eta = opt.initial_step / (1.0 + opt.initial_step * lambda * double(t));
            ++t;
            double margin = b;
            for (std::size_t j = 0; j < d; ++j) margin += w[j] * z[i][j];
            margin *= label[i];
            for (std::size_t j = 0; j < d; ++j) w[j] *= (1.0 - eta * lambda);
            if (margin < 1.0) {
                for (std::size_t j = 0; j < d; ++j) w[j] += eta * label[i] * z[i][j];
                b += eta * label[i];
            }
            if (epoch >= average_from) {
                ++averaged;
                const double a = 1.0 / double(averaged);
                for (std::size_t j = 0; j < d; ++j) w_avg[j] += a * (w[j] - w_avg[j]);
                b_avg += a * (b - b_avg);
            }
        }
    }
    m.weights = w_avg;
    m.bias = b_avg;
    return m;
}

/// Neuron iff the decision value is >= 0.
[[nodiscard]] inline Prediction predict(const SvmModel& model, const FeatureVector& x) {
    const double dv = model.decision(x);
    return {dv >= 0.0 ? CellClass::neuron : CellClass::glia, dv};
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half (Mann-Whitney U over average ranks).
[[nodiscard]] inline double roc_auc(std::span<const double> scores, const std::vector<bool>& positive) {
    if (scores.size() != positive.size()) throw std::invalid_argument("score and label counts differ");
    const std::size_t n = scores.size();
    std::size_t n_pos = 0;
    for (bool p : positive) n_pos += p ? 1 : 0;
    const std::size_t n_neg = n - n_pos;
    if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("AUC needs both classes");

    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    double rank_sum = 0.0;
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && scores[idx[j + 1]] == scores[idx[i]]) ++j;
        const double avg_rank = 0.5 * double(i + j) + 1.0;
        for (std::size_t k = i; k <= j; ++k)
            if (positive[idx[k]]) rank_sum += avg_rank;
        i = j + 1;
    }
    const double u = rank_sum - double(n_pos) * double(n_pos + 1) / 2.0;
    return u / (double(n_pos) * double(n_neg));
}

/// Stratified, shuffled k-fold cross-validation reporting per-fold AUC of the
/// held-out decision values.
[[nodiscard]] inline CvReport cross_validate(std::span<const FeatureVector> x, std::span<const CellClass> y,
                                             std::size_t k, double C, std::uint64_t seed,
                                             const TrainOptions& opt = {}) {
    detail::check_training_set(x, y);
    if (k < 2) throw std::invalid_argument("cross-validation needs at least two folds");
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < y.size(); ++i) (y[i] == CellClass::neuron ? pos : neg).push_back(i);
    if (pos.size() < k || neg.size() < k)
        throw std::invalid_argument("each class needs at least " + std::to_string(k) + " examples");

    CvReport report;
    report.seed = seed;
    report.fold_of.assign(x.size(), 0);
    std::mt19937_64 rng(derive_seed(seed, 0xf01d));
    for (auto* group : {&pos, &neg}) {
        std::shuffle(group->begin(), group->end(), rng);
        for (std::size_t j = 0; j < group->size(); ++j) report.fold_of[(*group)[j]] = j % k;
    }

    for (std::size_t fold = 0; fold < k; ++fold) {
        std::vector<FeatureVector> train_x, test_x;
        std::vector<CellClass> train_y;
        std::vector<bool> test_pos;
        for (std::size_t i = 0; i < x.size(); ++i) {
            if (report.fold_of[i] == fold) {
                test_x.push_back(x[i]);
                test_pos.push_back(y[i] == CellClass::neuron);
            } else {
                train_x.push_back(x[i]);
                train_y.push_back(y[i]);
            }
        }
        const SvmModel model = train_svm(train_x, train_y, C, derive_seed(seed, fold), opt);
        std::vector<double> scores;
        for (const auto& f : test_x) scores.push_back(model.decision(f));
        report.fold_auc.push_back(roc_auc(scores, test_pos));
    }
    report.mean_auc = std::accumulate(report.fold_auc.begin(), report.fold_auc.end(), 0.0) / double(k);
    return report;
}

// ---------------------------------------------------------------------------
// Coincidence analysis
// ---------------------------------------------------------------------------

struct CoincidenceFlag {
    std::uint32_t label = 0;
    bool active = false;
    double mean_intensity = 0.0;

    friend bool operator==(const CoincidenceFlag&, const CoincidenceFlag&) = default;
};

/// Flags each neuron region active when its mean second-channel intensity
/// exceeds `threshold`. Non-neuron regions are skipped.
[[nodiscard]] inline std::vector<CoincidenceFlag> coincidence_analysis(std::span<const RegionRecord> regions,
                                                                       const LabelVolume& labels,
                                                                       const VolumeBlock& second_channel,
                                                                       double threshold) {
    if (labels.extents() != second_channel.extents())
        throw std::invalid_argument("second channel extents differ from the label volume");
    std::uint32_t max_label = 0;
    for (const auto& r : regions) max_label = std::max(max_label, r.label);
    std::vector<double> sum(static_cast<std::size_t>(max_label) + 1, 0.0);
    std::vector<std::size_t> count(sum.size(), 0);
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const auto l = labels[i];
        if (l == 0 || l > max_label) continue;
        sum[l] += second_channel.voxels[i];
        ++count[l];
    }
    std::vector<CoincidenceFlag> out;
    for (const auto& r : regions) {
        if (r.cls != CellClass::neuron) continue;
        const double mean = count[r.label] ? sum[r.label] / double(count[r.label]) : 0.0;
        out.push_back({r.label, mean > threshold, mean});
    }
    return out;
}

// ---------------------------------------------------------------------------
// NVM1 model files
// ---------------------------------------------------------------------------

[[nodiscard]] inline std::string encode_model(const SvmModel& m) {
    std::ostringstream os;
    auto row = [&](const char* key, const Features6& v) {
        os << key;
        for (double x : v) os << ' ' << format_double(x);
        os << '\n';
    };
    os << "NVM1\n";
    os << "version " << m.version << '\n';
    os << "revision " << m.training_revision << '\n';
    os << "C " << format_double(m.C) << '\n';
    os << "seed " << m.seed << '\n';
    os << "epochs " << m.epochs << '\n';
    row("weights", m.weights);
    os << "bias " << format_double(m.bias) << '\n';
    row("mean", m.mean);
    row("scale", m.scale);
    return os.str();
}

[[nodiscard]] inline SvmModel decode_model(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "NVM1") throw std::invalid_argument("not an NVM1 model");
    SvmModel m;
    auto read6 = [](std::istringstream& ls, Features6& v) {
        for (auto& x : v) {
            std::string tok;
            if (!(ls >> tok)) throw std::invalid_argument("truncated model row");
            x = detail::parse_double(tok);
        }
    };
    unsigned seen = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string key, tok;
        ls >> key;
        if (key == "weights") read6(ls, m.weights), seen |= 1;
        else if (key == "mean") read6(ls, m.mean), seen |= 2;
        else if (key == "scale") read6(ls, m.scale), seen |= 4;
        else if (key == "bias") ls >> tok, m.bias = detail::parse_double(tok), seen |= 8;
        else if (key == "C") ls >> tok, m.C = detail::parse_double(tok);
        else if (key == "version") ls >> m.version;
        else if (key == "revision") ls >> m.training_revision;
        else if (key == "seed") ls >> m.seed;
        else if (key == "epochs") ls >> m.epochs;
        else throw std::invalid_argument("unknown model key: " + key);
    }
    if (seen != 15) throw std::invalid_argument("model file is missing weights, bias or normalization");
    for (double s : m.scale)
        if (!(s > 0.0)) throw std::invalid_argument("model normalization scale must be positive");
    return m;
}

inline void write_model(const fs::path& path, const SvmModel& m) { detail::write_file(path, encode_model(m)); }

[[nodiscard]] inline SvmModel read_model(const fs::path& path) { return decode_model(detail::read_file(path)); }

}  // namespace neurovol
