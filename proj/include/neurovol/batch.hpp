#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include "neurovol/block_io.hpp"
#include "neurovol/classify.hpp"
#include "neurovol/concurrency.hpp"
#include "neurovol/error.hpp"
#include "neurovol/phantom.hpp"
#include "neurovol/segmentation.hpp"

namespace neurovol {

enum class Stage : std::uint8_t { segment, classify, coincidence };

[[nodiscard]] inline std::string to_string(Stage s) {
    switch (s) {
        case Stage::segment: return "segment";
        case Stage::classify: return "classify";
        case Stage::coincidence: return "coincidence";
    }
    return "segment";
}

[[nodiscard]] inline Stage parse_stage(std::string_view s) {
    if (s == "segment") return Stage::segment;
    if (s == "classify") return Stage::classify;
    if (s == "coincidence") return Stage::coincidence;
    throw std::invalid_argument("unknown stage: " + std::string(s));
}

/// One unit of work: a block and how to load it. Loading happens on the worker.
struct BlockTask {
    GridPos pos{};
    std::function<VolumeBlock()> load;
    std::function<VolumeBlock()> load_second;  // only needed for coincidence
};

struct BatchJob {
    std::string dataset = "dataset";
    std::vector<BlockTask> blocks;
    std::vector<Stage> stages{Stage::segment};
    std::size_t workers = 1;
    std::uint64_t seed = 0;
    SegParams seg{};
    std::optional<SvmModel> model;
    double coincidence_threshold = 0.0;

    void validate() const {
        if (workers < 1) throw std::invalid_argument("worker count must be at least 1");
        std::set<GridPos> seen;
        for (const auto& b : blocks) {
            if (!seen.insert(b.pos).second) throw std::invalid_argument("duplicate block in job");
            if (!b.load) throw std::invalid_argument("block task without loader");
        }
        const auto has = [&](Stage s) { return std::find(stages.begin(), stages.end(), s) != stages.end(); };
        if (!has(Stage::segment)) throw std::invalid_argument("job needs the segment stage");
        if (has(Stage::classify) && !model) throw std::invalid_argument("classify stage needs a model");
        if (has(Stage::coincidence)) {
            if (!has(Stage::classify)) throw std::invalid_argument("coincidence stage needs the classify stage");
            for (const auto& b : blocks)
                if (!b.load_second) throw std::invalid_argument("coincidence stage needs a second channel");
        }
        seg.validate();
    }
};

struct BlockResult {
    GridPos pos{};
    Segmentation seg;
    std::vector<CoincidenceFlag> flags;

    friend bool operator==(const BlockResult&, const BlockResult&) = default;
};

struct BatchResult {
    std::map<GridPos, BlockResult> results;
    std::map<GridPos, std::string> failures;
    double wall_s = 0.0;
    std::size_t workers = 1;
};

/// Runs the job's stages on one block.
[[nodiscard]] inline BlockResult process_block(const BatchJob& job, const BlockTask& task) {
    const VolumeBlock block = task.load();
    BlockResult r;
    r.pos = task.pos;
    r.seg = segment_block(block, job.seg);
    for (Stage s : job.stages) {
        if (s == Stage::classify) {
            for (auto& reg : r.seg.regions) reg.cls = predict(*job.model, reg.features).cls;
        } else if (s == Stage::coincidence) {
            const VolumeBlock second = task.load_second();
            r.flags = coincidence_analysis(r.seg.regions, r.seg.labels, second, job.coincidence_threshold);
        }
    }
    return r;
}

/// Distributes blocks over the executor's workers through a shared queue.
/// Results travel over a channel to a single aggregator; a failing block is
/// recorded and the others continue. Throws when every block fails.
[[nodiscard]] inline BatchResult run_batch(const BatchJob& job, Executor& exec) {
    job.validate();
    using Message = std::pair<GridPos, std::variant<BlockResult, std::string>>;
    Channel<Message> channel;
    BatchResult out;
    out.workers = exec.workers();

    const auto t0 = std::chrono::steady_clock::now();
    std::jthread aggregator([&] {
        for (std::size_t i = 0; i < job.blocks.size(); ++i) {
            auto [pos, msg] = channel.receive();
            if (auto* r = std::get_if<BlockResult>(&msg)) out.results.emplace(pos, std::move(*r));
            else out.failures.emplace(pos, std::get<std::string>(msg));
        }
    });
    exec.run(job.blocks.size(), [&](std::size_t i) {
        const auto& task = job.blocks[i];
        try {
            channel.send({task.pos, process_block(job, task)});
        } catch (const std::exception& e) {
            channel.send({task.pos, std::string(e.what())});
        }
    });
    aggregator.join();
    out.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!job.blocks.empty() && out.results.empty()) {
        const auto& [pos, why] = *out.failures.begin();
        throw Error("all " + std::to_string(job.blocks.size()) + " blocks failed; first (" + std::to_string(pos.row) +
                    "," + std::to_string(pos.col) + "): " + why);
    }
    return out;
}

[[nodiscard]] inline BatchResult run_batch(const BatchJob& job) {
    if (job.workers < 1) throw std::invalid_argument("worker count must be at least 1");
    LocalPoolExecutor exec(job.workers);
    return run_batch(job, exec);
}

[[nodiscard]] inline std::vector<BlockTask> tasks_from_blocks(const std::vector<VolumeBlock>& blocks,
                                                              const std::vector<VolumeBlock>* second = nullptr) {
    std::vector<BlockTask> tasks;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        BlockTask t;
        t.pos = blocks[i].grid_pos;
        t.load = [&b = blocks[i]] { return b; };
        if (second) t.load_second = [&b = second->at(i)] { return b; };
        tasks.push_back(std::move(t));
    }
    return tasks;
}

/// Tasks reading `block_r{row}_c{col}_{channel}.nvb` files lazily on the worker.
[[nodiscard]] inline std::vector<BlockTask> tasks_from_dir(const fs::path& dir, const std::string& channel,
                                                           const std::string& second_channel = {}) {
    std::vector<BlockTask> tasks;
    for (const auto& [pos, path] : list_block_files(dir, channel)) {
        BlockTask t;
        t.pos = pos;
        t.load = [path] { return read_block(path); };
        if (!second_channel.empty()) {
            const auto second = dir / block_file_name(pos, second_channel);
            t.load_second = [second] { return read_block(second); };
        }
        tasks.push_back(std::move(t));
    }
    return tasks;
}

// ---------------------------------------------------------------------------
// Scaling benchmark
// ---------------------------------------------------------------------------

/// Physical cores from /proc/cpuinfo, falling back to hardware_concurrency.
[[nodiscard]] inline std::size_t physical_cores() {
    std::ifstream in("/proc/cpuinfo");
    std::set<std::pair<std::string, std::string>> cores;
    std::string line, physical = "0";
    while (std::getline(in, line)) {
        const auto colon = line.find(':');
        if (colon == std::string::npos) continue;
        std::string key = line.substr(0, colon);
        while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
        std::string value = line.substr(colon + 1);
        if (!value.empty() && value.front() == ' ') value.erase(0, 1);
        if (key == "physical id") physical = value;
        else if (key == "core id") cores.emplace(physical, value);
    }
    if (!cores.empty()) return cores.size();
    return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

struct ScalingRow {
    std::size_t volumes = 0;
    std::size_t voxels = 0;
    std::size_t workers = 1;
    double wall_s = 0.0;
    double voxels_per_s = 0.0;
    double overhead_pct = 0.0;
};

struct ScalingReport {
    std::vector<ScalingRow> rows;
    std::size_t hardware_threads = 0;
    std::size_t physical_cores = 0;
    std::vector<std::string> warnings;
};

struct ScalingOptions {
    std::size_t repeats = 1;  // wall time is the median over repeats
    std::size_t nuclei_per_block = 12;
    SegParams seg{};
};

/// Fills throughput and overhead from volumes, voxels and wall time.
/// Overhead is relative to the single-volume row, or the first row if none.
inline void finalize_report(ScalingReport& report) {
    if (report.rows.empty()) return;
    const auto base = std::find_if(report.rows.begin(), report.rows.end(), [](const auto& r) { return r.volumes == 1; });
    const double t1 = (base != report.rows.end() ? *base : report.rows.front()).wall_s;
    for (auto& r : report.rows) {
        r.voxels_per_s = r.wall_s > 0.0 ? double(r.voxels) / r.wall_s : 0.0;
        r.overhead_pct = t1 > 0.0 ? 100.0 * (r.wall_s - t1) / t1 : 0.0;
    }
}

/// Generates N phantom volumes per count and times the segment stage with
/// min(workers, N) workers.
[[nodiscard]] inline ScalingReport benchmark_scaling(const std::vector<std::size_t>& counts, const Extents& extents,
                                                     std::size_t workers, std::uint64_t seed,
                                                     const ScalingOptions& opt = {}) {
    if (workers < 1) throw std::invalid_argument("worker count must be at least 1");
    if (opt.repeats < 1) throw std::invalid_argument("repeats must be at least 1");
    ScalingReport report;
    report.hardware_threads = std::max(1u, std::thread::hardware_concurrency());
    report.physical_cores = physical_cores();
    if (workers > report.physical_cores)
        report.warnings.push_back("workers (" + std::to_string(workers) + ") exceed physical cores (" +
                                  std::to_string(report.physical_cores) + "); timings will not show weak scaling");

    for (std::size_t n : counts) {
        if (n < 1) throw std::invalid_argument("volume counts must be positive");
        std::vector<VolumeBlock> blocks;
        blocks.reserve(n);
        for (std::size_t i = 0; i < n; ++i) {
            PhantomSpec spec;
            spec.block_extents = extents;
            spec.nuclei_per_block = opt.nuclei_per_block;
            spec.true_overlap_x = std::max<std::size_t>(1, extents.nx / 10);
            spec.true_overlap_y = std::max<std::size_t>(1, extents.ny / 10);
            auto ph = generate_phantom(spec, derive_seed(seed, n, i));
            VolumeBlock b = std::move(ph.primary.front());
            b.grid_pos = {0, static_cast<int>(i)};
            blocks.push_back(std::move(b));
        }
        BatchJob job;
        job.blocks = tasks_from_blocks(blocks);
        job.workers = std::min(workers, n);
        job.seg = opt.seg;
        std::vector<double> times;
        for (std::size_t rep = 0; rep < opt.repeats; ++rep) times.push_back(run_batch(job).wall_s);
        std::sort(times.begin(), times.end());
        ScalingRow row;
        row.volumes = n;
        row.voxels = n * extents.count();
        row.workers = job.workers;
        row.wall_s = times[(times.size() - 1) / 2];
        report.rows.push_back(row);
    }
    finalize_report(report);
    return report;
}

[[nodiscard]] inline std::string report_csv(const ScalingReport& report) {
    std::string out = "volumes,voxels,workers,wall_s,voxels_per_s,overhead_pct\n";
    for (const auto& r : report.rows)
        out += std::to_string(r.volumes) + ',' + std::to_string(r.voxels) + ',' + std::to_string(r.workers) + ',' +
               format_double(r.wall_s) + ',' + format_double(r.voxels_per_s) + ',' + format_double(r.overhead_pct) +
               '\n';
    return out;
}

/// Throughput increase and time increase of each row relative to one volume.
[[nodiscard]] inline std::string throughput_table(const ScalingReport& report) {
    std::ostringstream os;
    os << "volumes  workers  wall_s     time_increase  throughput_increase\n";
    if (report.rows.empty()) return os.str();
    const auto base = std::find_if(report.rows.begin(), report.rows.end(), [](const auto& r) { return r.volumes == 1; });
    const auto& b = base != report.rows.end() ? *base : report.rows.front();
    char line[160];
    for (const auto& r : report.rows) {
        const double speed = b.voxels_per_s > 0.0 ? r.voxels_per_s / b.voxels_per_s : 0.0;
        std::snprintf(line, sizeof line, "%-8zu %-8zu %-10.4f %+12.1f%% %12.0f%% (%.2fx)\n", r.volumes, r.workers,
                      r.wall_s, r.overhead_pct, 100.0 * (speed - 1.0), speed);
        os << line;
    }
    return os.str();
}

}  // namespace neurovol
