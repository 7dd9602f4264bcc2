#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "neurovol/classify.hpp"
#include "test_util.hpp"

using namespace neurovol;

namespace {

using Voxels = std::vector<std::array<std::size_t, 3>>;

Voxels cube_voxels(std::size_t n) {
    Voxels v;
    for (std::size_t z = 0; z < n; ++z)
        for (std::size_t y = 0; y < n; ++y)
            for (std::size_t x = 0; x < n; ++x) v.push_back({x, y, z});
    return v;
}

/// Pairwise AUC: count positive/negative pairs, ties weigh one half.
double brute_auc(const std::vector<double>& s, const std::vector<bool>& pos) {
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i)
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (!pos[i] || pos[j]) continue;
            pairs += 1.0;
            if (s[i] > s[j]) wins += 1.0;
            else if (s[i] == s[j]) wins += 0.5;
        }
    return wins / pairs;
}

struct Dataset {
    std::vector<FeatureVector> x;
    std::vector<CellClass> y;
};

/// Two Gaussian clouds in feature space separated by `gap` standard deviations
/// along volume and mean intensity.
Dataset clouds(std::size_t per_class, double gap, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 1.0);
    Dataset d;
    for (std::size_t i = 0; i < 2 * per_class; ++i) {
        const bool neuron = i % 2 == 0;
        const double shift = neuron ? gap : 0.0;
        FeatureVector f;
        f.volume_um3 = 300.0 + 40.0 * (n(rng) + shift);
        f.diameter_um = 8.0 + n(rng);
        f.mean = 800.0 + 50.0 * (n(rng) - shift);
        f.stddev = 100.0 + 10.0 * n(rng);
        f.kurtosis = n(rng);
        f.skew = n(rng);
        d.x.push_back(f);
        d.y.push_back(neuron ? CellClass::neuron : CellClass::glia);
    }
    return d;
}

double accuracy(const SvmModel& m, const Dataset& d) {
    std::size_t ok = 0;
    for (std::size_t i = 0; i < d.x.size(); ++i) ok += predict(m, d.x[i]).cls == d.y[i] ? 1 : 0;
    return double(ok) / double(d.x.size());
}

}  // namespace

// -- features ------------------------------------------------------------------

TEST(Features, ConstantCube) {
    const auto vox = cube_voxels(3);
    const std::vector<std::uint16_t> values(27, 500);
    const auto f = compute_features<std::uint16_t>(vox, values, Resolution{});
    EXPECT_DOUBLE_EQ(f.volume_um3, 27.0);
    EXPECT_NEAR(f.diameter_um, 3.722, 1e-3);
    EXPECT_DOUBLE_EQ(f.mean, 500.0);
    EXPECT_DOUBLE_EQ(f.stddev, 0.0);
    EXPECT_DOUBLE_EQ(f.skew, 0.0);
    EXPECT_DOUBLE_EQ(f.kurtosis, 0.0);
}

TEST(Features, SingleVoxelVolume) {
    const Voxels vox{{0, 0, 0}};
    const std::vector<std::uint16_t> values{9};
    const auto f = compute_features<std::uint16_t>(vox, values, Resolution{0.227, 0.227, 1.0});
    EXPECT_NEAR(f.volume_um3, 0.051529, 1e-9);
}

TEST(Features, FourValueMoments) {
    const Voxels vox{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}};
    const std::vector<std::uint16_t> values{1, 2, 3, 4};
    const auto f = compute_features<std::uint16_t>(vox, values, Resolution{});
    EXPECT_DOUBLE_EQ(f.mean, 2.5);
    EXPECT_NEAR(f.stddev, std::sqrt(1.25), 1e-12);
    EXPECT_NEAR(f.skew, 0.0, 1e-12);
    EXPECT_NEAR(f.kurtosis, -1.36, 1e-12);
}

TEST(Features, RejectsEmptyAndMismatched) {
    const Voxels none;
    const std::vector<std::uint16_t> empty;
    EXPECT_THROW((void)compute_features<std::uint16_t>(none, empty, Resolution{}), std::invalid_argument);
    const Voxels one{{0, 0, 0}};
    const std::vector<std::uint16_t> two{1, 2};
    EXPECT_THROW((void)compute_features<std::uint16_t>(one, two, Resolution{}), std::invalid_argument);
}

TEST(FeaturesProperty, ShapeMomentsInvariantUnderPositiveAffineIntensity) {
    std::mt19937_64 rng(3);
    std::uniform_int_distribution<int> d(0, 1000);
    const auto vox = cube_voxels(4);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<double> a(vox.size()), b(vox.size());
        for (std::size_t i = 0; i < a.size(); ++i) {
            a[i] = d(rng);
            b[i] = 3.0 * a[i] + 17.0;
        }
        const auto fa = compute_features<double>(vox, a, Resolution{});
        const auto fb = compute_features<double>(vox, b, Resolution{});
        ASSERT_NEAR(fa.skew, fb.skew, 1e-9);
        ASSERT_NEAR(fa.kurtosis, fb.kurtosis, 1e-9);
        ASSERT_NEAR(fb.mean, 3.0 * fa.mean + 17.0, 1e-9);
        ASSERT_NEAR(fb.stddev, 3.0 * fa.stddev, 1e-9);
        ASSERT_GE(fa.kurtosis, -2.0);
    }
}

TEST(FeaturesProperty, DiameterMatchesSphereVolume) {
    for (double v : {1.0, 10.0, 523.6, 4000.0}) {
        const double d = equivalent_diameter(v);
        EXPECT_NEAR(std::numbers::pi * d * d * d / 6.0, v, 1e-9 * v);
    }
}

// -- SVM -------------------------------------------------------------------------

TEST(Svm, SeparatesWellSeparatedClouds) {
    const auto d = clouds(60, 8.0, 1);
    const auto m = train_svm(d.x, d.y, 1.0, 7);
    EXPECT_EQ(accuracy(m, d), 1.0);
}

TEST(Svm, OneDimensionalThreshold) {
    std::vector<FeatureVector> x;
    std::vector<CellClass> y;
    for (int i = 0; i < 20; ++i) {
        FeatureVector f;
        f.volume_um3 = i < 10 ? 100.0 + i : 200.0 + i;
        x.push_back(f);
        y.push_back(i < 10 ? CellClass::glia : CellClass::neuron);
    }
    const auto m = train_svm(x, y, 10.0, 0);
    FeatureVector lo, hi;
    lo.volume_um3 = 90.0;
    hi.volume_um3 = 250.0;
    EXPECT_EQ(predict(m, lo).cls, CellClass::glia);
    EXPECT_EQ(predict(m, hi).cls, CellClass::neuron);
    EXPECT_GT(m.weights[0], 0.0);
}

TEST(Svm, DeterministicForSeed) {
    const auto d = clouds(30, 1.0, 2);
    EXPECT_EQ(train_svm(d.x, d.y, 1.0, 5), train_svm(d.x, d.y, 1.0, 5));
}

TEST(Svm, RejectsBadInput) {
    const auto d = clouds(5, 3.0, 0);
    std::vector<CellClass> one_class(d.y.size(), CellClass::neuron);
    EXPECT_THROW((void)train_svm(d.x, one_class, 1.0, 0), std::invalid_argument);
    EXPECT_THROW((void)train_svm(d.x, d.y, 0.0, 0), std::invalid_argument);
    auto bad = d.x;
    bad[0].mean = std::nan("");
    EXPECT_THROW((void)train_svm(bad, d.y, 1.0, 0), std::invalid_argument);
    auto unl = d.y;
    unl[0] = CellClass::unlabeled;
    EXPECT_THROW((void)train_svm(d.x, unl, 1.0, 0), std::invalid_argument);
}

TEST(SvmProperty, PredictionsInvariantToFeatureUnits) {
    // Normalization makes the model independent of per-feature scale.
    const auto d = clouds(40, 1.5, 4);
    auto scaled = d;
    for (auto& f : scaled.x) {
        f.volume_um3 *= 1000.0;
        f.mean *= 0.01;
    }
    const auto a = train_svm(d.x, d.y, 1.0, 9);
    const auto b = train_svm(scaled.x, scaled.y, 1.0, 9);
    for (std::size_t i = 0; i < d.x.size(); ++i)
        ASSERT_NEAR(a.decision(d.x[i]), b.decision(scaled.x[i]), 1e-6);
}

// -- AUC -------------------------------------------------------------------------

TEST(RocAuc, WorkedExample) {
    const std::vector<double> s{0.1, 0.4, 0.35, 0.8};
    const std::vector<bool> p{false, false, true, true};
    EXPECT_DOUBLE_EQ(roc_auc(s, p), 0.75);
}

TEST(RocAuc, PerfectAndInverted) {
    const std::vector<double> s{1, 2, 3, 4};
    EXPECT_DOUBLE_EQ(roc_auc(s, {false, false, true, true}), 1.0);
    EXPECT_DOUBLE_EQ(roc_auc(s, {true, true, false, false}), 0.0);
    const std::vector<double> tied{1, 1, 1, 1};
    EXPECT_DOUBLE_EQ(roc_auc(tied, {false, true, false, true}), 0.5);
}

TEST(RocAuc, RejectsSingleClass) {
    const std::vector<double> s{1, 2};
    EXPECT_THROW((void)roc_auc(s, {true, true}), std::invalid_argument);
    EXPECT_THROW((void)roc_auc(s, {true}), std::invalid_argument);
}

TEST(RocAucProperty, MatchesPairwiseOracle) {
    std::mt19937_64 rng(11);
    std::uniform_int_distribution<int> v(0, 9), len(2, 40);
    std::bernoulli_distribution coin(0.4);
    for (int trial = 0; trial < 200; ++trial) {
        const int n = len(rng);
        std::vector<double> s(n);
        std::vector<bool> p(n);
        for (int i = 0; i < n; ++i) {
            s[i] = v(rng);
            p[i] = coin(rng);
        }
        p[0] = true;
        p[1] = false;
        ASSERT_NEAR(roc_auc(s, p), brute_auc(s, p), 1e-12);
        // Flipping the labels reflects the AUC.
        std::vector<bool> q(n);
        for (int i = 0; i < n; ++i) q[i] = !p[i];
        ASSERT_NEAR(roc_auc(s, q), 1.0 - roc_auc(s, p), 1e-12);
        // Monotone transforms leave it unchanged.
        std::vector<double> t(n);
        for (int i = 0; i < n; ++i) t[i] = std::exp(0.3 * s[i]) - 4.0;
        ASSERT_NEAR(roc_auc(t, p), roc_auc(s, p), 1e-12);
    }
}

// -- cross-validation ------------------------------------------------------------

TEST(CrossValidate, StratifiedPartition) {
    const auto d = clouds(23, 3.0, 6);
    const auto r = cross_validate(d.x, d.y, 5, 1.0, 3);
    ASSERT_EQ(r.fold_auc.size(), 5u);
    ASSERT_EQ(r.fold_of.size(), d.x.size());
    for (std::size_t f = 0; f < 5; ++f) {
        std::size_t pos = 0, neg = 0;
        for (std::size_t i = 0; i < d.x.size(); ++i)
            if (r.fold_of[i] == f) ++(d.y[i] == CellClass::neuron ? pos : neg);
        EXPECT_GE(pos, 4u);
        EXPECT_LE(pos, 5u);
        EXPECT_GE(neg, 4u);
        EXPECT_LE(neg, 5u);
    }
    double mean = 0.0;
    for (double a : r.fold_auc) mean += a / 5.0;
    EXPECT_DOUBLE_EQ(r.mean_auc, mean);
    EXPECT_GT(r.mean_auc, 0.9);
}

TEST(CrossValidate, DeterministicForSeed) {
    const auto d = clouds(20, 1.0, 8);
    EXPECT_EQ(cross_validate(d.x, d.y, 4, 1.0, 12), cross_validate(d.x, d.y, 4, 1.0, 12));
    EXPECT_NE(cross_validate(d.x, d.y, 4, 1.0, 12).fold_of, cross_validate(d.x, d.y, 4, 1.0, 13).fold_of);
}

TEST(CrossValidate, RejectsTooFewExamples) {
    const auto d = clouds(4, 2.0, 1);
    EXPECT_THROW((void)cross_validate(d.x, d.y, 5, 1.0, 0), std::invalid_argument);
    EXPECT_THROW((void)cross_validate(d.x, d.y, 1, 1.0, 0), std::invalid_argument);
}

TEST(CrossValidateProperty, ShuffledLabelsGiveChanceAuc) {
    double total = 0.0;
    const int trials = 20;
    for (int t = 0; t < trials; ++t) {
        auto d = clouds(30, 3.0, 100 + t);
        std::mt19937_64 rng(t);
        std::shuffle(d.y.begin(), d.y.end(), rng);
        total += cross_validate(d.x, d.y, 5, 1.0, t).mean_auc;
    }
    EXPECT_NEAR(total / trials, 0.5, 0.08);
}

// -- coincidence -------------------------------------------------------------------

TEST(Coincidence, FlagsBrightNeuronsOnly) {
    LabelVolume labels(Extents{6, 1, 1}, 0);
    labels.at(0, 0, 0) = labels.at(1, 0, 0) = 1;
    labels.at(2, 0, 0) = labels.at(3, 0, 0) = 2;
    labels.at(4, 0, 0) = 3;
    VolumeBlock second;
    second.voxels = Volume<std::uint16_t>(Extents{6, 1, 1}, std::vector<std::uint16_t>{900, 700, 100, 300, 5000, 0});
    std::vector<RegionRecord> regions(3);
    for (std::uint32_t i = 0; i < 3; ++i) regions[i].label = i + 1;
    regions[0].cls = CellClass::neuron;
    regions[1].cls = CellClass::neuron;
    regions[2].cls = CellClass::glia;
    const auto flags = coincidence_analysis(regions, labels, second, 500.0);
    ASSERT_EQ(flags.size(), 2u);
    EXPECT_EQ(flags[0], (CoincidenceFlag{1, true, 800.0}));
    EXPECT_EQ(flags[1], (CoincidenceFlag{2, false, 200.0}));
}

TEST(Coincidence, MeanEqualToThresholdIsInactive) {
    LabelVolume labels(Extents{1, 1, 1}, 1);
    VolumeBlock second;
    second.voxels = Volume<std::uint16_t>(Extents{1, 1, 1}, 500);
    std::vector<RegionRecord> regions(1);
    regions[0].label = 1;
    regions[0].cls = CellClass::neuron;
    EXPECT_FALSE(coincidence_analysis(regions, labels, second, 500.0).front().active);
    second.voxels = Volume<std::uint16_t>(Extents{2, 1, 1}, 500);
    EXPECT_THROW((void)coincidence_analysis(regions, labels, second, 500.0), std::invalid_argument);
}

// -- model files -------------------------------------------------------------------

TEST(ModelFile, RoundTrip) {
    const auto d = clouds(20, 2.0, 3);
    auto m = train_svm(d.x, d.y, 0.3, 77);
    m.version = 4;
    m.training_revision = 9;
    EXPECT_EQ(decode_model(encode_model(m)), m);
    testutil::TempDir dir;
    write_model(dir / "m.nvm", m);
    EXPECT_EQ(read_model(dir / "m.nvm"), m);
}

TEST(ModelFile, RejectsCorruptFiles) {
    EXPECT_THROW((void)decode_model("NVM2\n"), std::invalid_argument);
    EXPECT_THROW((void)decode_model("NVM1\nbias 0\n"), std::invalid_argument);
    EXPECT_THROW((void)decode_model("NVM1\nwhatever 1\n"), std::invalid_argument);
    const std::string zero_scale =
        "NVM1\nweights 0 0 0 0 0 0\nbias 0\nmean 0 0 0 0 0 0\nscale 1 1 0 1 1 1\n";
    EXPECT_THROW((void)decode_model(zero_scale), std::invalid_argument);
}
