#include <csignal>
#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <pthread.h>

#include "CLI11.hpp"
#include "neurovol/neurovol.hpp"

namespace nv = neurovol;
using nlohmann::json;

namespace {

/// Bad flag combinations found after parsing; exits like a parse error.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Output {
    bool as_json = false;

    void emit(const json& doc, const std::string& text) const {
        if (as_json) std::cout << doc.dump(2) << '\n';
        else std::cout << text;
    }
};

std::optional<std::string> prescan_config(int argc, char** argv) {
    for (int i = 1; i < argc; ++i) {
        const std::string a = argv[i];
        if (a == "--config" && i + 1 < argc) return std::string(argv[i + 1]);
        if (a.rfind("--config=", 0) == 0) return a.substr(9);
    }
    return std::nullopt;
}

nv::Extents extents_from(const std::vector<std::size_t>& v) {
    if (v.size() == 1) return {v[0], v[0], v[0]};
    if (v.size() == 3) return {v[0], v[1], v[2]};
    throw UsageError("--extent takes one or three values");
}

std::vector<std::string> channels_in(const nv::fs::path& dir) {
    std::set<std::string> out;
    static const std::regex pattern(R"(block_r\d+_c\d+_(.+)\.nvb)");
    for (const auto& e : nv::fs::directory_iterator(dir)) {
        std::smatch m;
        const auto name = e.path().filename().string();
        if (std::regex_match(name, m, pattern)) out.insert(m[1].str());
    }
    return {out.begin(), out.end()};
}

nv::GridLayout layout_of(const std::map<nv::GridPos, nv::fs::path>& files) {
    int rows = 0, cols = 0;
    for (const auto& [p, path] : files) rows = std::max(rows, p.row + 1), cols = std::max(cols, p.col + 1);
    if (files.empty()) throw nv::NotFound("no block files found");
    return {rows, cols, true};
}

std::string fmt(double v, int precision = 4) {
    std::ostringstream os;
    os << std::fixed << std::setprecision(precision) << v;
    return os.str();
}

// ---------------------------------------------------------------------------

int cmd_gen_phantom(const nv::PipelineConfig& cfg, const Output& out) {
    const auto ph = nv::generate_phantom(cfg.phantom, cfg.seed);
    const nv::fs::path dir = cfg.block_dir;
    nv::fs::create_directories(dir);
    for (std::size_t i = 0; i < ph.primary.size(); ++i) {
        nv::write_block(dir / nv::block_file_name(ph.primary[i].grid_pos, ph.primary[i].channel), ph.primary[i]);
        nv::write_block(dir / nv::block_file_name(ph.secondary[i].grid_pos, ph.secondary[i].channel), ph.secondary[i]);
    }
    nv::detail::write_file(dir / "truth.json", nv::truth_to_json(ph.truth).dump(2) + "\n");
    out.emit({{"blocks", ph.primary.size()}, {"nuclei", ph.truth.nuclei.size()}, {"dir", dir.string()}},
             "wrote " + std::to_string(ph.primary.size()) + " blocks x 2 channels, " +
                 std::to_string(ph.truth.nuclei.size()) + " nuclei, to " + dir.string() + "\n");
    return 0;
}

int cmd_segment(const nv::PipelineConfig& cfg, const Output& out, const std::string& truth_path,
                const std::string& model_path) {
    const nv::fs::path dir = cfg.block_dir;
    nv::BatchJob job;
    job.dataset = cfg.dataset;
    job.workers = cfg.workers;
    job.seed = cfg.seed;
    job.seg = cfg.seg;
    job.coincidence_threshold = cfg.coincidence_threshold;
    const std::string second = cfg.phantom.second_channel;
    bool have_second = false;
    if (!model_path.empty()) {
        job.model = nv::read_model(model_path);
        job.stages.push_back(nv::Stage::classify);
        const auto ch = channels_in(dir);
        have_second = std::find(ch.begin(), ch.end(), second) != ch.end();
        if (have_second) job.stages.push_back(nv::Stage::coincidence);
    }
    job.blocks = nv::tasks_from_dir(dir, cfg.phantom.channel, have_second ? second : std::string{});
    const auto result = nv::run_batch(job);

    std::optional<nv::PhantomTruth> truth;
    if (!truth_path.empty()) truth = nv::truth_from_json(json::parse(nv::detail::read_file(truth_path)));

    const nv::fs::path odir = cfg.out_dir;
    nv::fs::create_directories(odir / "labels");
    std::vector<nv::StoredRegion> table;
    json coincidence = json::array();
    for (auto [pos, r] : result.results) {
        if (truth) nv::label_regions_from_truth(r.seg.regions, pos, *truth, r.seg.labels.extents());
        nv::write_labels(odir / "labels" / ("labels_r" + std::to_string(pos.row) + "_c" + std::to_string(pos.col) + ".nvl"),
                         r.seg.labels);
        for (const auto& reg : r.seg.regions) table.push_back({pos, reg});
        for (const auto& f : r.flags)
            coincidence.push_back({{"id", nv::region_annotation_id(pos, f.label)},
                                   {"active", f.active},
                                   {"mean_intensity", f.mean_intensity}});
    }
    nv::detail::write_file(odir / "regions.json", nv::regions_to_json(table).dump() + "\n");
    if (!coincidence.empty()) nv::detail::write_file(odir / "coincidence.json", coincidence.dump(2) + "\n");

    json failures = json::object();
    for (const auto& [p, why] : result.failures) failures[std::to_string(p.row) + "," + std::to_string(p.col)] = why;
    std::string text = "segmented " + std::to_string(result.results.size()) + " blocks, " +
                       std::to_string(table.size()) + " regions in " + fmt(result.wall_s, 3) + " s on " +
                       std::to_string(result.workers) + " workers\n";
    for (const auto& [p, why] : result.failures)
        text += "  failed block (" + std::to_string(p.row) + "," + std::to_string(p.col) + "): " + why + "\n";
    out.emit({{"blocks", result.results.size()},
              {"regions", table.size()},
              {"wall_s", result.wall_s},
              {"workers", result.workers},
              {"failures", failures}},
             text);
    return 0;
}

std::pair<std::vector<nv::FeatureVector>, std::vector<nv::CellClass>> labeled_examples(const std::string& path) {
    std::vector<nv::FeatureVector> x;
    std::vector<nv::CellClass> y;
    for (const auto& s : nv::regions_from_json(json::parse(nv::detail::read_file(path)))) {
        if (s.region.cls == nv::CellClass::unlabeled) continue;
        x.push_back(s.region.features);
        y.push_back(s.region.cls);
    }
    return {x, y};
}

json cv_json(const nv::CvReport& r) {
    return {{"fold_auc", r.fold_auc}, {"mean_auc", r.mean_auc}, {"seed", r.seed}};
}

std::string cv_text(const nv::CvReport& r) {
    std::string s = "fold AUC:";
    for (double a : r.fold_auc) s += " " + fmt(a);
    return s + "\nmean AUC: " + fmt(r.mean_auc) + "\n";
}

int cmd_classify_train(const nv::PipelineConfig& cfg, const Output& out, const std::string& regions,
                       const std::string& model_out) {
    const auto [x, y] = labeled_examples(regions);
    const auto model = nv::train_svm(x, y, cfg.svm_C, cfg.seed, cfg.svm);
    nv::write_model(model_out, model);
    out.emit({{"examples", x.size()}, {"model", model_out}, {"weights", model.weights}, {"bias", model.bias}},
             "trained on " + std::to_string(x.size()) + " regions, model written to " + model_out + "\n");
    return 0;
}

int cmd_classify_cv(const nv::PipelineConfig& cfg, const Output& out, const std::string& regions) {
    const auto [x, y] = labeled_examples(regions);
    const auto r = nv::cross_validate(x, y, cfg.folds, cfg.svm_C, cfg.seed, cfg.svm);
    out.emit(cv_json(r), cv_text(r));
    return 0;
}

int cmd_classify_retrain(const nv::PipelineConfig& cfg, const Output& out, const std::string& layer) {
    nv::Store store(cfg.store_root);
    const auto r = nv::retrain_from_annotations(store, cfg.dataset, cfg.svm_C, cfg.seed, layer, cfg.folds, cfg.svm);
    auto doc = cv_json(r.cv);
    doc["version"] = r.model.version;
    doc["revision"] = r.revision;
    doc["counts"] = r.counts;
    out.emit(doc, "model version " + std::to_string(r.model.version) + " from revision " +
                      std::to_string(r.revision) + "\n" + cv_text(r.cv));
    return 0;
}

int cmd_stitch(const nv::PipelineConfig& cfg, const Output& out) {
    const nv::fs::path dir = cfg.block_dir;
    const auto files = nv::list_block_files(dir, cfg.phantom.channel);
    const auto layout = layout_of(files);
    std::vector<nv::VolumeBlock> blocks;
    for (const auto& [p, path] : files) blocks.push_back(nv::read_block(path));
    const auto res = nv::stitch_grid(blocks, layout, {cfg.stitch_max_frac, cfg.workers});

    const nv::fs::path odir = cfg.out_dir;
    nv::fs::create_directories(odir);
    nv::write_block(odir / ("stitched_" + cfg.phantom.channel + ".nvb"), res.stitched);
    nv::detail::write_file(odir / "plan.json", nv::plan_to_json(res.plan).dump(2) + "\n");

    // Further channels reuse the placement found on the primary channel.
    for (const auto& ch : channels_in(dir)) {
        if (ch == cfg.phantom.channel) continue;
        const auto other = nv::list_block_files(dir, ch);
        nv::VolumeBlock merged;
        merged.channel = ch;
        merged.resolution = res.stitched.resolution;
        merged.voxels = nv::Volume<std::uint16_t>(res.plan.extents);
        for (const auto& [p, path] : other) {
            if (!res.plan.contains(p)) continue;
            const auto b = nv::read_block(path);
            const auto& o = res.plan.offset(p);
            merged.voxels.paste(b.voxels, o[0], o[1], o[2]);
        }
        nv::write_block(odir / ("stitched_" + ch + ".nvb"), merged);
    }

    const auto& e = res.plan.extents;
    out.emit(nv::plan_to_json(res.plan), "stitched " + std::to_string(layout.rows()) + "x" +
                                             std::to_string(layout.cols()) + " blocks into " + std::to_string(e.nx) +
                                             "x" + std::to_string(e.ny) + "x" + std::to_string(e.nz) + "\n");
    return 0;
}

int cmd_ingest(const nv::PipelineConfig& cfg, const Output& out, const std::vector<std::string>& volumes,
               const std::string& regions, const std::string& plan_path) {
    if (regions.empty() != plan_path.empty()) throw UsageError("--regions and --plan go together");
    nv::Store store(cfg.store_root);
    nv::fs::create_directories(cfg.store_root);
    const nv::ChunkSize chunk{cfg.chunk, cfg.chunk, cfg.chunk};
    nv::DatasetManifest m;
    for (const auto& v : volumes) {
        const auto b = nv::read_block(v);
        m = store.ingest(b.voxels, b.resolution, cfg.dataset, b.channel, chunk, cfg.num_scales);
    }
    std::int64_t revision = 0;
    std::size_t points = 0;
    if (!regions.empty()) {
        const auto table = nv::regions_from_json(json::parse(nv::detail::read_file(regions)));
        const auto plan = nv::plan_from_json(json::parse(nv::detail::read_file(plan_path)));
        if (!store.has_dataset(cfg.dataset)) throw nv::NotFound("dataset " + cfg.dataset + " has no volume yet");
        m = store.add_annotation_layer(cfg.dataset, "centroids", nv::AnnotationKind::point);
        store.write_regions(cfg.dataset, table);
        const auto anns = nv::regions_to_annotations(table, plan, m.extents());
        const auto head = store.head(cfg.dataset, "centroids");
        revision = store.write_annotations(cfg.dataset, "centroids", anns, head, "pipeline").number;
        points = anns.size();
    }
    out.emit({{"dataset", cfg.dataset}, {"channels", m.channels}, {"scales", m.scales.size()},
              {"annotations", points}, {"revision", revision}},
             "dataset " + cfg.dataset + ": " + std::to_string(m.channels.size()) + " channel(s), " +
                 std::to_string(m.scales.size()) + " scale(s), " + std::to_string(points) +
                 " centroid annotations at revision " + std::to_string(revision) + "\n");
    return 0;
}

int cmd_serve(const nv::PipelineConfig& cfg, const std::string& host, int port, const std::vector<std::string>& allow,
              const std::vector<std::string>& cors) {
    nv::ServerConfig sc;
    sc.host = host;
    sc.port = port;
    sc.root = cfg.store_root;
    sc.datasets = allow;
    if (!cors.empty()) sc.cors_origins = cors;
    sc.retrain_C = cfg.svm_C;
    sc.retrain_seed = cfg.seed;

    sigset_t set;
    sigemptyset(&set);
    sigaddset(&set, SIGINT);
    sigaddset(&set, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &set, nullptr);

    nv::Service svc(sc);
    svc.start();
    std::cerr << "serving " << sc.root.string() << " on http://" << host << ":" << svc.port() << std::endl;
    int sig = 0;
    sigwait(&set, &sig);
    svc.stop();
    return 0;
}

int cmd_bench(const nv::PipelineConfig& cfg, const Output& out, const std::vector<std::size_t>& counts,
              const std::vector<std::size_t>& extent, std::size_t repeats, const std::string& csv_path) {
    nv::ScalingOptions opt;
    opt.repeats = repeats;
    opt.seg = cfg.seg;
    opt.nuclei_per_block = cfg.phantom.nuclei_per_block;
    const auto report = nv::benchmark_scaling(counts, extents_from(extent), cfg.workers, cfg.seed, opt);
    const auto csv = nv::report_csv(report);
    if (!csv_path.empty()) nv::detail::write_file(csv_path, csv);
    for (const auto& w : report.warnings) std::cerr << "warning: " << w << '\n';
    json rows = json::array();
    for (const auto& r : report.rows)
        rows.push_back({{"volumes", r.volumes}, {"voxels", r.voxels}, {"workers", r.workers}, {"wall_s", r.wall_s},
                        {"voxels_per_s", r.voxels_per_s}, {"overhead_pct", r.overhead_pct}});
    out.emit({{"rows", rows}, {"physical_cores", report.physical_cores}, {"warnings", report.warnings}},
             csv + "\n" + nv::throughput_table(report));
    return 0;
}

int cmd_export(const nv::PipelineConfig& cfg, const std::string& layer, const std::string& format,
               std::optional<std::int64_t> rev, const std::string& path) {
    nv::Store store(cfg.store_root);
    const auto doc = store.export_annotations(cfg.dataset, layer, rev, nv::parse_export_format(format));
    if (path.empty()) std::cout << doc;
    else nv::detail::write_file(path, doc);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    nv::PipelineConfig cfg;
    try {
        if (const auto path = prescan_config(argc, argv)) cfg = nv::load_config(*path);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }

    CLI::App app{"neurovol: volumetric microscopy segmentation, stitching, serving and retraining"};
    app.require_subcommand(0, 1);
    Output out;
    std::string config_path;
    bool dump_config = false;
    app.add_flag("--json", out.as_json, "Machine-readable output");
    app.add_option("--config", config_path, "Pipeline config (JSON, as printed by --dump-config)");
    app.add_flag("--dump-config", dump_config, "Print the effective config and exit");
    app.add_option("--seed", cfg.seed, "Random seed");
    app.add_option("--workers", cfg.workers, "Worker count")->check(CLI::PositiveNumber);

    auto* gen = app.add_subcommand("gen-phantom", "Generate a synthetic block grid with ground truth");
    std::vector<std::size_t> gen_extent;
    int rows = cfg.phantom.grid.rows(), cols = cfg.phantom.grid.cols();
    gen->add_option("--out", cfg.block_dir, "Output block directory");
    gen->add_option("--rows", rows)->check(CLI::PositiveNumber);
    gen->add_option("--cols", cols)->check(CLI::PositiveNumber);
    gen->add_option("--extent", gen_extent, "Block extent: n or nx ny nz")->expected(1, 3);
    gen->add_option("--overlap-x", cfg.phantom.true_overlap_x);
    gen->add_option("--overlap-y", cfg.phantom.true_overlap_y);
    gen->add_option("--nuclei", cfg.phantom.nuclei_per_block, "Nuclei per block");
    gen->add_option("--radius-min", cfg.phantom.radius_min);
    gen->add_option("--radius-max", cfg.phantom.radius_max);
    gen->add_option("--noise", cfg.phantom.noise_sigma, "Noise sigma in intensity units");
    gen->add_option("--neuron-fraction", cfg.phantom.neuron_fraction);

    auto* seg = app.add_subcommand("segment", "Segment every block of a block directory");
    std::string truth_path, model_path;
    seg->add_option("--block-dir", cfg.block_dir)->check(CLI::ExistingDirectory);
    seg->add_option("--out", cfg.out_dir, "Output directory for labels and regions.json");
    seg->add_option("--sigma1", cfg.seg.sigma1, "Inner Gaussian sigma (um)");
    seg->add_option("--sigma2", cfg.seg.sigma2, "Outer Gaussian sigma (um)");
    seg->add_option("--threshold", cfg.seg.seed_threshold, "DoG seed threshold");
    seg->add_option("--min-region", cfg.seg.min_region_voxels);
    seg->add_option("--truth", truth_path, "Phantom truth.json used to label regions")->check(CLI::ExistingFile);
    seg->add_option("--model", model_path, "Model applied to the regions")->check(CLI::ExistingFile);
    seg->add_option("--coincidence-threshold", cfg.coincidence_threshold);

    auto* cls = app.add_subcommand("classify", "Train, cross-validate or retrain the neuron/glia classifier");
    cls->require_subcommand(1);
    std::string regions_path, model_out = "model.nvm", layer = "centroids";
    auto* train = cls->add_subcommand("train", "Train on labeled regions");
    train->add_option("--regions", regions_path)->required()->check(CLI::ExistingFile);
    train->add_option("--model", model_out, "Model output path");
    train->add_option("--C", cfg.svm_C);
    auto* cv = cls->add_subcommand("cv", "K-fold cross-validated ROC AUC");
    cv->add_option("--regions", regions_path)->required()->check(CLI::ExistingFile);
    cv->add_option("--folds", cfg.folds)->check(CLI::Range(2, 1000));
    cv->add_option("--C", cfg.svm_C);
    auto* retrain = cls->add_subcommand("retrain", "Retrain from the reviewed annotations of a dataset");
    retrain->add_option("--root", cfg.store_root)->envname("NV_STORE_ROOT")->check(CLI::ExistingDirectory);
    retrain->add_option("--dataset", cfg.dataset);
    retrain->add_option("--layer", layer);
    retrain->add_option("--C", cfg.svm_C);

    auto* stitch = app.add_subcommand("stitch", "Estimate overlaps and merge a block grid");
    stitch->add_option("--block-dir", cfg.block_dir)->check(CLI::ExistingDirectory);
    stitch->add_option("--out", cfg.out_dir);
    stitch->add_option("--channel", cfg.phantom.channel, "Channel used to find the overlaps");
    stitch->add_option("--max-frac", cfg.stitch_max_frac)->check(CLI::Range(0.0, 1.0));

    auto* ingest = app.add_subcommand("ingest", "Write stitched volumes and centroids into the store");
    std::vector<std::string> volumes;
    std::string plan_path;
    ingest->add_option("--root", cfg.store_root)->envname("NV_STORE_ROOT");
    ingest->add_option("--dataset", cfg.dataset);
    ingest->add_option("--volume", volumes, "NVB1 volume(s); first is the primary channel")
        ->required()
        ->check(CLI::ExistingFile);
    ingest->add_option("--regions", regions_path, "regions.json from segment")->check(CLI::ExistingFile);
    ingest->add_option("--plan", plan_path, "plan.json from stitch")->check(CLI::ExistingFile);
    ingest->add_option("--chunk", cfg.chunk)->check(CLI::PositiveNumber);
    ingest->add_option("--scales", cfg.num_scales)->check(CLI::PositiveNumber);

    auto* serve = app.add_subcommand("serve", "Serve imagery and annotations over HTTP");
    std::string host = "127.0.0.1";
    int port = 8080;
    std::vector<std::string> allow, cors;
    serve->add_option("--root", cfg.store_root)->envname("NV_STORE_ROOT")->check(CLI::ExistingDirectory);
    serve->add_option("--host", host);
    serve->add_option("--port", port)->check(CLI::Range(0, 65535));
    serve->add_option("--dataset", allow, "Serve only these datasets");
    serve->add_option("--cors", cors, "Allowed CORS origins (default *)");

    auto* bench = app.add_subcommand("bench", "Weak-scaling benchmark of the segment stage");
    std::vector<std::size_t> counts{1, 25};
    std::vector<std::size_t> bench_extent{64};
    std::size_t repeats = 1;
    std::string csv_path;
    bench->add_option("--counts", counts, "Volume counts, e.g. 1,25,100")->delimiter(',');
    bench->add_option("--extent", bench_extent, "Block extent: n or nx ny nz")->expected(1, 3);
    bench->add_option("--nuclei", cfg.phantom.nuclei_per_block, "Nuclei per volume");
    bench->add_option("--repeats", repeats, "Median over this many runs")->check(CLI::PositiveNumber);
    bench->add_option("--out", csv_path, "CSV report path");

    auto* exp = app.add_subcommand("export", "Export an annotation layer");
    std::string format = "json", export_path;
    std::optional<std::int64_t> rev;
    exp->add_option("--root", cfg.store_root)->envname("NV_STORE_ROOT")->check(CLI::ExistingDirectory);
    exp->add_option("--dataset", cfg.dataset);
    exp->add_option("--layer", layer);
    exp->add_option("--format", format)->check(CLI::IsMember({"json", "csv"}));
    exp->add_option("--rev", rev, "Revision (default head)");
    exp->add_option("--out", export_path, "Output file (default stdout)");

    try {
        app.parse(argc, argv);
        if (!gen_extent.empty()) cfg.phantom.block_extents = extents_from(gen_extent);
        if (*gen) cfg.phantom.grid = nv::GridLayout(rows, cols, cfg.phantom.grid.snake());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    }

    if (dump_config) {
        std::cout << nv::config_to_json(cfg).dump(2) << '\n';
        return 0;
    }

    try {
        if (*gen) return cmd_gen_phantom(cfg, out);
        if (*seg) return cmd_segment(cfg, out, truth_path, model_path);
        if (*train) return cmd_classify_train(cfg, out, regions_path, model_out);
        if (*cv) return cmd_classify_cv(cfg, out, regions_path);
        if (*retrain) return cmd_classify_retrain(cfg, out, layer);
        if (*stitch) return cmd_stitch(cfg, out);
        if (*ingest) return cmd_ingest(cfg, out, volumes, regions_path, plan_path);
        if (*serve) return cmd_serve(cfg, host, port, allow, cors);
        if (*bench) return cmd_bench(cfg, out, counts, bench_extent, repeats, csv_path);
        if (*exp) return cmd_export(cfg, layer, format, rev, export_path);
        std::cout << app.help();
        return 0;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << '\n';
        return 2;
    } catch (const nv::PreconditionFailed& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
