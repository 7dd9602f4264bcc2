#include <gtest/gtest.h>

#include "neurovol/serve.hpp"
#include "test_util.hpp"

using namespace neurovol;
using nlohmann::json;

namespace {

/// Dataset "ds" with a region table whose neurons are larger than its glia and
/// one algorithm revision of centroid points named after the regions.
void seed_store(Store& store, std::size_t regions = 24) {
    Volume<std::uint16_t> vol(Extents{100, 100, 100});
    for (std::size_t i = 0; i < vol.size(); ++i) vol[i] = static_cast<std::uint16_t>(i % 4099);
    (void)store.ingest(vol, Resolution{0.227, 0.227, 1.0}, "ds", "dapi");
    (void)store.ingest(vol, Resolution{0.227, 0.227, 1.0}, "other", "dapi");
    (void)store.add_annotation_layer("ds", "centroids", AnnotationKind::point, {50, 50, 50});

    std::vector<StoredRegion> table;
    std::vector<Annotation> points;
    for (std::uint32_t i = 1; i <= regions; ++i) {
        StoredRegion s;
        s.block = {0, 0};
        s.region.label = i;
        const bool big = i % 2 == 0;
        s.region.features = {big ? 400.0 + i : 150.0 + i, big ? 9.0 : 6.5, 900.0 - i, 80.0, 0.1 * i, -0.05 * i};
        s.region.centroid = {double(i * 3), double(i * 2), double(i)};
        table.push_back(s);
        Annotation a;
        a.id = region_annotation_id(s.block, i);
        a.cls = "centroid";
        a.coords = {s.region.centroid};
        points.push_back(a);
    }
    store.write_regions("ds", table);
    (void)store.write_annotations("ds", "centroids", points, 0, "pipeline");
}

json relabel_body(std::size_t n, const std::string& author = "reviewer") {
    json anns = json::array();
    for (std::uint32_t i = 1; i <= n; ++i) {
        anns.push_back({{"id", region_annotation_id({0, 0}, i)},
                        {"kind", "point"},
                        {"class", i % 2 == 0 ? "neuron" : "glia"},
                        {"provenance", "human"},
                        {"coords", {{double(i * 3), double(i * 2), double(i)}}}});
    }
    return {{"author", author}, {"annotations", anns}};
}

struct ServeFixture : ::testing::Test {
    testutil::TempDir dir;
    std::unique_ptr<Service> service;
    std::unique_ptr<httplib::Client> client;

    void start(ServerConfig cfg = {}) {
        {
            Store store(dir.path());
            seed_store(store);
        }
        cfg.root = dir.path();
        cfg.port = 0;
        service = std::make_unique<Service>(cfg);
        service->start();
        client = std::make_unique<httplib::Client>("127.0.0.1", service->port());
    }

    void SetUp() override { start(); }

    void TearDown() override {
        client.reset();
        if (service) service->stop();
    }

    json get_json(const std::string& path, int expect = 200) {
        auto r = client->Get(path);
        EXPECT_TRUE(r) << path;
        if (!r) return {};
        EXPECT_EQ(r->status, expect) << path << " " << r->body;
        return json::parse(r->body);
    }
};

struct AllowlistFixture : ServeFixture {
    void SetUp() override {
        ServerConfig cfg;
        cfg.datasets = {"ds"};
        cfg.cors_origins = {"http://viewer.local"};
        start(cfg);
    }
};

}  // namespace

TEST_F(ServeFixture, ListsDatasetsAndManifest) {
    EXPECT_EQ(get_json("/datasets"), json::parse(R"(["ds","other"])"));
    const auto info = get_json("/d/ds/info");
    EXPECT_EQ(info.at("scales").at(0).at("key"), "1_1_1");
    EXPECT_EQ(info.at("annotation_layers").at(0).at("name"), "centroids");
}

TEST_F(ServeFixture, ServesChunkBytes) {
    auto r = client->Get("/d/ds/scales/1_1_1/64-100_0-64_0-64");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 200);
    EXPECT_EQ(r->get_header_value("Content-Type"), "application/octet-stream");
    EXPECT_EQ(r->body, service->store().read_chunk("ds", "1_1_1", ChunkCoord{1, 0, 0}));
    EXPECT_EQ(client->Get("/d/ds/scales/1_1_1/0-1_0-1_0-1")->status, 404);
    EXPECT_EQ(client->Get("/d/ds/scales/9_9_9/0-64_0-64_0-64")->status, 404);
    EXPECT_EQ(client->Get("/d/missing/info")->status, 404);
}

TEST_F(ServeFixture, ReadsAnnotationsWithBlocksAndRevision) {
    const auto all = get_json("/d/ds/ann/centroids");
    EXPECT_EQ(all.at("revision"), 1);
    EXPECT_EQ(all.at("annotations").size(), 24u);
    const auto some = get_json("/d/ds/ann/centroids?blocks=0_0_0");
    for (const auto& a : some.at("annotations")) EXPECT_EQ(a.at("block"), "0_0_0");
    EXPECT_LT(some.at("annotations").size(), 24u);
    EXPECT_GT(some.at("annotations").size(), 0u);
    EXPECT_EQ(get_json("/d/ds/ann/centroids?rev=0").at("annotations").size(), 0u);
    (void)get_json("/d/ds/ann/centroids?rev=7", 404);
    (void)get_json("/d/ds/ann/centroids?rev=x", 400);
    (void)get_json("/d/ds/ann/axons", 404);
}

TEST_F(ServeFixture, PutCommitsAndStaleBaseConflicts) {
    auto r = client->Put("/d/ds/ann/centroids?base=1", relabel_body(12).dump(), "application/json");
    ASSERT_TRUE(r);
    ASSERT_EQ(r->status, 200) << r->body;
    EXPECT_EQ(json::parse(r->body), json::parse(R"({"revision":2,"parent":1})"));

    r = client->Put("/d/ds/ann/centroids?base=1", relabel_body(2).dump(), "application/json");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 409);
    EXPECT_EQ(json::parse(r->body).at("head"), 2);

    const auto now = get_json("/d/ds/ann/centroids");
    EXPECT_EQ(now.at("revision"), 2);
    std::size_t human = 0;
    for (const auto& a : now.at("annotations")) human += a.at("provenance") == "human" ? 1 : 0;
    EXPECT_EQ(human, 12u);
    EXPECT_EQ(get_json("/d/ds/ann/centroids?rev=1").at("annotations").at(0).at("class"), "centroid");
}

TEST_F(ServeFixture, PutRejectsBadRequests) {
    const auto body = relabel_body(1).dump();
    EXPECT_EQ(client->Put("/d/ds/ann/centroids", body, "application/json")->status, 400);
    EXPECT_EQ(client->Put("/d/ds/ann/centroids?base=1", "{", "application/json")->status, 400);
    EXPECT_EQ(client->Put("/d/ds/ann/centroids?base=1", "{}", "application/json")->status, 400);
    json outside = relabel_body(1);
    outside["annotations"][0]["coords"] = {{500, 1, 1}};
    EXPECT_EQ(client->Put("/d/ds/ann/centroids?base=1", outside.dump(), "application/json")->status, 400);
    EXPECT_EQ(client->Put("/d/ds/ann/axons?base=0", body, "application/json")->status, 404);
    EXPECT_EQ(client->Put("/d/missing/ann/centroids?base=0", body, "application/json")->status, 404);
    EXPECT_EQ(service->store().head("ds", "centroids"), 1);
}

TEST_F(ServeFixture, DeleteThroughPut) {
    const json body = {{"annotations", {{{"id", "r0c0-1"}, {"kind", "point"}, {"deleted", true}}}}};
    auto r = client->Put("/d/ds/ann/centroids?base=1", body.dump(), "application/json");
    ASSERT_EQ(r->status, 200) << r->body;
    EXPECT_EQ(get_json("/d/ds/ann/centroids").at("annotations").size(), 23u);
}

TEST_F(ServeFixture, MixedEditsLandInOneRevision) {
    const auto before = get_json("/d/ds/ann/centroids").at("annotations");
    const json body = {{"author", "reviewer"},
                       {"annotations",
                        {{{"id", "r0c0-3"}, {"kind", "point"}, {"class", "neuron"}, {"coords", {{40.5, 41, 42}}}},
                         {{"id", "r0c0-4"}, {"kind", "point"}, {"deleted", true}},
                         {{"id", "manual-1"}, {"kind", "point"}, {"class", "glia"}, {"coords", {{7, 8, 9}}}}}}};
    auto r = client->Put("/d/ds/ann/centroids?base=1", body.dump(), "application/json");
    ASSERT_EQ(r->status, 200) << r->body;
    EXPECT_EQ(json::parse(r->body).at("revision"), 2);

    std::map<std::string, json> expect;
    for (const auto& a : before) expect[a.at("id")] = a;
    expect.erase("r0c0-4");
    const auto after = get_json("/d/ds/ann/centroids");
    ASSERT_EQ(after.at("annotations").size(), 24u);
    for (const auto& a : after.at("annotations")) {
        const std::string id = a.at("id");
        if (id == "r0c0-3") {
            EXPECT_EQ(a.at("coords"), json::parse("[[40.5,41,42]]"));
            EXPECT_EQ(a.at("provenance"), "human");
        } else if (id == "manual-1") {
            EXPECT_EQ(a.at("class"), "glia");
        } else {
            ASSERT_TRUE(expect.count(id)) << id;
            EXPECT_EQ(a.at("coords"), expect[id].at("coords")) << id;
            EXPECT_EQ(a.at("class"), expect[id].at("class")) << id;
        }
    }
}

TEST_F(ServeFixture, ExportFormats) {
    auto r = client->Get("/d/ds/ann/centroids/export?format=csv");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 200);
    EXPECT_EQ(r->get_header_value("Content-Type"), "text/csv");
    EXPECT_EQ(parse_csv_document(r->body).size(), 24u);
    const auto doc = get_json("/d/ds/ann/centroids/export?format=json&rev=1");
    EXPECT_EQ(doc.at("revision"), 1);
    EXPECT_EQ(client->Get("/d/ds/ann/centroids/export?format=xml")->status, 400);
}

TEST_F(ServeFixture, RetrainAfterCorrections) {
    auto r = client->Post("/d/ds/retrain", "{}", "application/json");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 412);
    EXPECT_EQ(json::parse(r->body).at("counts").at("neuron"), 0);

    ASSERT_EQ(client->Put("/d/ds/ann/centroids?base=1", relabel_body(6).dump(), "application/json")->status, 200);
    r = client->Post("/d/ds/retrain", "", "application/json");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 412);
    const auto counts = json::parse(r->body).at("counts");
    EXPECT_EQ(counts.at("neuron"), 3);
    EXPECT_EQ(counts.at("glia"), 3);

    ASSERT_EQ(client->Put("/d/ds/ann/centroids?base=2", relabel_body(20).dump(), "application/json")->status, 200);
    r = client->Post("/d/ds/retrain", R"({"C":2.0,"seed":5})", "application/json");
    ASSERT_TRUE(r);
    ASSERT_EQ(r->status, 200) << r->body;
    const auto out = json::parse(r->body);
    EXPECT_EQ(out.at("version"), 1);
    EXPECT_EQ(out.at("revision"), 3);
    EXPECT_EQ(out.at("fold_auc").size(), 5u);
    EXPECT_GT(out.at("mean_auc").get<double>(), 0.9);
    EXPECT_EQ(out.at("counts").at("neuron"), 10);
    const auto model = latest_model(service->store(), "ds");
    ASSERT_TRUE(model);
    EXPECT_EQ(model->training_revision, 3);
    EXPECT_DOUBLE_EQ(model->C, 2.0);

    r = client->Post("/d/ds/retrain", "{}", "application/json");
    EXPECT_EQ(json::parse(r->body).at("version"), 2);
    EXPECT_EQ(client->Post("/d/ds/retrain", R"({"C":"big"})", "application/json")->status, 400);
    EXPECT_EQ(client->Post("/d/ds/retrain", "[1]", "application/json")->status, 400);
}

TEST_F(ServeFixture, CorsAndPreflight) {
    auto r = client->Get("/datasets", {{"Origin", "http://anything"}});
    ASSERT_TRUE(r);
    EXPECT_EQ(r->get_header_value("Access-Control-Allow-Origin"), "*");
    r = client->Options("/d/ds/ann/centroids");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 204);
    EXPECT_NE(r->get_header_value("Access-Control-Allow-Methods").find("PUT"), std::string::npos);
}

TEST_F(AllowlistFixture, HidesUnlistedDatasetsAndEchoesOrigin) {
    EXPECT_EQ(get_json("/datasets"), json::parse(R"(["ds"])"));
    EXPECT_EQ(client->Get("/d/other/info")->status, 404);
    auto r = client->Get("/datasets", {{"Origin", "http://viewer.local"}});
    EXPECT_EQ(r->get_header_value("Access-Control-Allow-Origin"), "http://viewer.local");
    r = client->Get("/datasets", {{"Origin", "http://evil.example"}});
    EXPECT_FALSE(r->has_header("Access-Control-Allow-Origin"));
}

TEST(ServerConfig, Validation) {
    ServerConfig cfg;
    cfg.root = "/definitely/not/here";
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
    testutil::TempDir dir;
    cfg.root = dir.path();
    cfg.port = 70000;
    EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Retrain, UnmatchedPointsAreCountedAndSkipped) {
    testutil::TempDir dir;
    Store store(dir.path());
    seed_store(store);
    auto body = relabel_body(20);
    std::vector<Annotation> changes;
    for (const auto& j : body["annotations"]) changes.push_back(annotation_from_json(j));
    changes.push_back(annotation_from_json(
        json{{"id", "manual-1"}, {"kind", "point"}, {"class", "neuron"}, {"coords", {{5, 5, 5}}}}));
    (void)store.write_annotations("ds", "centroids", changes, 1, "r");
    const auto res = retrain_from_annotations(store, "ds", 1.0, 3);
    EXPECT_EQ(res.unmatched, 1u);
    EXPECT_EQ(res.counts.at("neuron"), 10u);
    EXPECT_EQ(model_versions(store, "ds"), (std::vector<std::uint64_t>{1}));
}
