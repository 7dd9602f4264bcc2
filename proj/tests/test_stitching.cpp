#include <gtest/gtest.h>

#include <random>

#include "neurovol/phantom.hpp"
#include "neurovol/stitching.hpp"

using namespace neurovol;

namespace {

using U16Volume = Volume<std::uint16_t>;

VolumeBlock block_of(U16Volume v, GridPos p = {}) {
    VolumeBlock b;
    b.voxels = std::move(v);
    b.grid_pos = p;
    return b;
}

U16Volume random_volume(Extents e, std::mt19937_64& rng, int hi = 4000) {
    std::uniform_int_distribution<int> d(0, hi);
    U16Volume v(e);
    for (auto& x : v.data()) x = static_cast<std::uint16_t>(d(rng));
    return v;
}

/// Loss written directly from the definition over global coordinates.
double loss_oracle(const U16Volume& a, const U16Volume& b, Axis axis, std::size_t v) {
    const auto& ea = a.extents();
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t z = 0; z < ea.nz; ++z)
        for (std::size_t y = 0; y < (axis == Axis::y ? v : ea.ny); ++y)
            for (std::size_t x = 0; x < (axis == Axis::x ? v : ea.nx); ++x) {
                const double pa = axis == Axis::x ? a.at(ea.nx - v + x, y, z) : a.at(x, ea.ny - v + y, z);
                sum += std::abs(pa - double(b.at(x, y, z)));
                ++n;
            }
    return sum / double(n);
}

PhantomSpec grid_spec(int rows, int cols) {
    PhantomSpec s;
    s.grid = GridLayout(rows, cols, true);
    s.block_extents = {64, 60, 16};
    s.true_overlap_x = 5;
    s.true_overlap_y = 4;
    s.nuclei_per_block = 8;
    return s;
}

}  // namespace

TEST(OverlapLoss, ConstantOffset) {
    const U16Volume a(Extents{10, 4, 3}, 10), b(Extents{10, 4, 3}, 14);
    for (std::size_t v = 1; v <= 10; ++v) EXPECT_DOUBLE_EQ(overlap_loss(a, b, Axis::x, v), 4.0);
    EXPECT_DOUBLE_EQ(overlap_loss(b, a, Axis::y, 2), 4.0);
}

TEST(OverlapLoss, MatchingStripsGiveZero) {
    std::mt19937_64 rng(1);
    const auto a = random_volume({20, 6, 4}, rng);
    U16Volume b = random_volume({20, 6, 4}, rng);
    b.paste(a.crop(17, 20, 0, 6, 0, 4), 0, 0, 0);
    EXPECT_DOUBLE_EQ(overlap_loss(a, b, Axis::x, 3), 0.0);
    EXPECT_GT(overlap_loss(a, b, Axis::x, 2), 0.0);
}

TEST(OverlapLoss, RejectsBadOverlapAndShapes) {
    const U16Volume a(Extents{10, 4, 3}, 0), b(Extents{10, 5, 3}, 0);
    EXPECT_THROW((void)overlap_loss(a, a, Axis::x, 0), std::invalid_argument);
    EXPECT_THROW((void)overlap_loss(a, a, Axis::x, 11), std::invalid_argument);
    EXPECT_THROW((void)overlap_loss(a, b, Axis::x, 1), std::invalid_argument);
    EXPECT_NO_THROW((void)overlap_loss(a, b, Axis::y, 1));
}

TEST(OverlapLossProperty, MatchesDefinition) {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 30; ++trial) {
        const Extents e{std::size_t(5 + trial % 7), std::size_t(4 + trial % 5), std::size_t(1 + trial % 3)};
        const auto a = random_volume(e, rng, 65535), b = random_volume(e, rng, 65535);
        for (Axis axis : {Axis::x, Axis::y}) {
            const std::size_t ext = e.axis(static_cast<int>(axis));
            for (std::size_t v = 1; v <= ext; ++v)
                ASSERT_NEAR(overlap_loss(a, b, axis, v), loss_oracle(a, b, axis, v), 1e-9);
        }
    }
}

TEST(MaxSearchOverlap, FloorOfFraction) {
    EXPECT_EQ(max_search_overlap(100, 0.10), 10u);
    EXPECT_EQ(max_search_overlap(70, 0.10), 7u);
    EXPECT_EQ(max_search_overlap(69, 0.10), 6u);
    EXPECT_EQ(max_search_overlap(9, 0.10), 0u);
}

TEST(FindOptimalOverlap, RecoversPlantedOverlap) {
    std::mt19937_64 rng(3);
    const auto a = random_volume({80, 10, 5}, rng);
    auto b = random_volume({80, 10, 5}, rng);
    b.paste(a.crop(74, 80, 0, 10, 0, 5), 0, 0, 0);
    const auto r = find_optimal_overlap(block_of(a), block_of(b), Axis::x);
    EXPECT_EQ(r.best_overlap, 6u);
    EXPECT_DOUBLE_EQ(r.loss, 0.0);
    ASSERT_EQ(r.loss_curve.size(), 8u);
    EXPECT_EQ(r.loss_curve.front().first, 1u);
    EXPECT_EQ(r.loss_curve.back().first, 8u);
}

TEST(FindOptimalOverlap, TiesGoToSmallestOverlap) {
    const U16Volume flat(Extents{8, 50, 2}, 300);
    const auto r = find_optimal_overlap(block_of(flat), block_of(flat), Axis::y);
    EXPECT_EQ(r.best_overlap, 1u);
    EXPECT_EQ(r.axis, Axis::y);
}

TEST(FindOptimalOverlap, EmptySearchRangeThrows) {
    const U16Volume small(Extents{9, 9, 2}, 0);
    EXPECT_THROW((void)find_optimal_overlap(block_of(small), block_of(small), Axis::x), std::invalid_argument);
}

TEST(FindOptimalOverlapProperty, BestIsMinimumOfCurve) {
    std::mt19937_64 rng(5);
    for (int trial = 0; trial < 10; ++trial) {
        const auto a = random_volume({40, 30, 3}, rng, 50), b = random_volume({40, 30, 3}, rng, 50);
        const auto r = find_optimal_overlap(block_of(a), block_of(b), Axis::x);
        for (const auto& [v, loss] : r.loss_curve) {
            ASSERT_GE(loss, r.loss);
            ASSERT_TRUE(loss > r.loss || v >= r.best_overlap);
        }
    }
}

TEST(BlendOverlap, LinearRampAtPlaneMidpoints) {
    const U16Volume a(Extents{2, 1, 1}, 0), b(Extents{2, 1, 1}, 200);
    const auto out = blend_overlap(a, b, Axis::x);
    EXPECT_EQ(out.at(0, 0, 0), 50);
    EXPECT_EQ(out.at(1, 0, 0), 150);
    const U16Volume c(Extents{3, 4, 1}, 1000), d(Extents{3, 4, 1}, 0);
    const auto col = blend_overlap(c, d, Axis::y);
    EXPECT_EQ(col.at(2, 0, 0), 875);
    EXPECT_EQ(col.at(2, 3, 0), 125);
}

TEST(BlendOverlapProperty, StaysBetweenInputs) {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        const auto a = random_volume({5, 3, 2}, rng, 65535), b = random_volume({5, 3, 2}, rng, 65535);
        const auto out = blend_overlap(a, b, Axis::x);
        for (std::size_t i = 0; i < out.size(); ++i) {
            ASSERT_GE(out[i], std::min(a[i], b[i]));
            ASSERT_LE(out[i], std::max(a[i], b[i]));
        }
        ASSERT_EQ(blend_overlap(a, a, Axis::y), a);
    }
}

TEST(LowerMedian, PicksLowerOfMiddlePair) {
    EXPECT_EQ(detail::lower_median({4, 6}), 4u);
    EXPECT_EQ(detail::lower_median({3, 1, 2}), 2u);
    EXPECT_EQ(detail::lower_median({7}), 7u);
    EXPECT_EQ(detail::lower_median({9, 5, 5, 9}), 5u);
}

TEST(StitchGrid, SingleBlockIsUnchanged) {
    std::mt19937_64 rng(2);
    const auto b = block_of(random_volume({30, 20, 4}, rng));
    const auto res = stitch_grid({b}, GridLayout(1, 1, true));
    EXPECT_EQ(res.stitched.voxels, b.voxels);
    EXPECT_TRUE(res.plan.pairs.empty());
    EXPECT_EQ(res.plan.offset({0, 0}), (std::array<std::size_t, 3>{0, 0, 0}));
}

TEST(StitchGrid, TwoByTwoExtentsAndOffsets) {
    const auto s = grid_spec(2, 2);
    const auto ph = generate_phantom(s, 4);
    const auto res = stitch_grid(ph.primary, s.grid);
    EXPECT_EQ(res.plan.extents, (Extents{2 * 64 - 5, 2 * 60 - 4, 16}));
    EXPECT_EQ(res.plan.column_overlaps, (std::vector<std::size_t>{5}));
    EXPECT_EQ(res.plan.row_overlaps, (std::vector<std::size_t>{4}));
    EXPECT_EQ(res.plan.offset({1, 1}), (std::array<std::size_t, 3>{59, 56, 0}));
    EXPECT_EQ(res.plan.pairs.size(), 4u);
    EXPECT_EQ(res.stitched.voxels.extents(), res.plan.extents);
    EXPECT_EQ(res.stitched.voxels.extents(), ph.truth.canvas);
}

TEST(StitchGrid, NoisyThreeByThreeRecoversTrueOverlaps) {
    auto s = grid_spec(3, 3);
    s.noise_sigma = 15.0;
    const auto ph = generate_phantom(s, 12);
    const auto res = stitch_grid(ph.primary, s.grid, StitchOptions{0.10, 2});
    for (auto v : res.plan.column_overlaps) EXPECT_EQ(v, 5u);
    for (auto v : res.plan.row_overlaps) EXPECT_EQ(v, 4u);
}

TEST(StitchGrid, RejectsIncompleteOrInconsistentGrids) {
    const auto s = grid_spec(2, 2);
    const auto ph = generate_phantom(s, 1);
    auto missing = ph.primary;
    missing.pop_back();
    EXPECT_THROW((void)stitch_grid(missing, s.grid), std::invalid_argument);
    auto dup = ph.primary;
    dup.back().grid_pos = dup.front().grid_pos;
    EXPECT_THROW((void)stitch_grid(dup, s.grid), std::invalid_argument);
    auto odd = ph.primary;
    odd[1].voxels = U16Volume(Extents{64, 60, 15}, 0);
    EXPECT_THROW((void)stitch_grid(odd, s.grid), std::invalid_argument);
    auto outside = ph.primary;
    outside[0].grid_pos = {5, 5};
    EXPECT_THROW((void)stitch_grid(outside, s.grid), std::invalid_argument);
}

TEST(StitchGridProperty, NoiselessBlocksReappearAtTheirOffsets) {
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        auto s = grid_spec(2, 3);
        const auto ph = generate_phantom(s, seed);
        const auto res = stitch_grid(ph.primary, s.grid);
        const auto& e = s.block_extents;
        for (const auto& b : ph.primary) {
            const auto o = res.plan.offset(b.grid_pos);
            ASSERT_EQ(res.stitched.voxels.crop(o[0], o[0] + e.nx, o[1], o[1] + e.ny, 0, e.nz), b.voxels);
        }
    }
}

TEST(StitchGridProperty, WorkerCountDoesNotChangeResult) {
    auto s = grid_spec(2, 2);
    s.noise_sigma = 10.0;
    const auto ph = generate_phantom(s, 8);
    const auto a = stitch_grid(ph.primary, s.grid, StitchOptions{0.10, 1});
    const auto b = stitch_grid(ph.primary, s.grid, StitchOptions{0.10, 4});
    EXPECT_EQ(a.stitched, b.stitched);
    EXPECT_EQ(plan_to_json(a.plan), plan_to_json(b.plan));
}

TEST(TranslatePoint, ForwardAndBack) {
    const Vec3 p{1.5, 2.0, 3.25};
    const std::array<std::size_t, 3> off{59, 56, 0};
    EXPECT_EQ(translate_point(p, off), (Vec3{60.5, 58.0, 3.25}));
    EXPECT_EQ(translate_point(translate_point(p, off), off, -1), p);
}

TEST(TranslateAnnotationsProperty, RoundTrip) {
    const auto s = grid_spec(2, 2);
    const auto res = stitch_grid(generate_phantom(s, 0).primary, s.grid);
    std::mt19937_64 rng(4);
    std::uniform_real_distribution<double> u(0.0, 60.0);
    for (int trial = 0; trial < 50; ++trial) {
        const GridPos block{trial % 2, (trial / 2) % 2};
        Annotation a;
        a.id = "a" + std::to_string(trial);
        a.kind = AnnotationKind::polyline;
        a.coords = {{u(rng), u(rng), u(rng)}, {u(rng), u(rng), u(rng)}};
        RegionRecord r;
        r.centroid = {u(rng), u(rng), u(rng)};
        const auto moved = translate_annotations(std::vector<Annotation>{a}, block, res.plan);
        const auto off = res.plan.offset(block);
        for (int k = 0; k < 3; ++k) ASSERT_DOUBLE_EQ(moved[0].coords[1][k], a.coords[1][k] + double(off[k]));
        const auto back = translate_annotations(moved, block, res.plan, -1);
        for (std::size_t i = 0; i < 2; ++i)
            for (int k = 0; k < 3; ++k) ASSERT_NEAR(back[0].coords[i][k], a.coords[i][k], 1e-12);
        const auto rr = translate_annotations(translate_annotations(std::vector<RegionRecord>{r}, block, res.plan),
                                              block, res.plan, -1);
        for (int k = 0; k < 3; ++k) ASSERT_NEAR(rr[0].centroid[k], r.centroid[k], 1e-12);
    }
    EXPECT_THROW((void)translate_annotations(std::vector<Annotation>{}, GridPos{2, 0}, res.plan), std::invalid_argument);
}

TEST(StitchPlanJson, RoundTrip) {
    auto s = grid_spec(2, 3);
    s.noise_sigma = 5.0;
    const auto plan = stitch_grid(generate_phantom(s, 6).primary, s.grid).plan;
    const auto back = plan_from_json(nlohmann::json::parse(plan_to_json(plan).dump()));
    EXPECT_EQ(back.rows, plan.rows);
    EXPECT_EQ(back.cols, plan.cols);
    EXPECT_EQ(back.offsets, plan.offsets);
    EXPECT_EQ(back.extents, plan.extents);
    EXPECT_EQ(back.column_overlaps, plan.column_overlaps);
    EXPECT_EQ(back.row_overlaps, plan.row_overlaps);
    ASSERT_EQ(back.pairs.size(), plan.pairs.size());
    for (std::size_t i = 0; i < plan.pairs.size(); ++i) {
        EXPECT_EQ(back.pairs[i].a, plan.pairs[i].a);
        EXPECT_EQ(back.pairs[i].result.best_overlap, plan.pairs[i].result.best_overlap);
        EXPECT_DOUBLE_EQ(back.pairs[i].result.loss, plan.pairs[i].result.loss);
    }
    EXPECT_THROW((void)plan_from_json(nlohmann::json{{"rows", 1}}), std::invalid_argument);
}
