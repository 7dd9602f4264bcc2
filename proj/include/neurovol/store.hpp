#pragma once

#include <algorithm>
#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <ctime>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <string_view>
#include <system_error>
#include <type_traits>
#include <vector>

#include "json.hpp"
#include "neurovol/annotations.hpp"
#include "neurovol/block_io.hpp"
#include "neurovol/error.hpp"
#include "neurovol/segmentation.hpp"
#include "neurovol/volume.hpp"

namespace neurovol {

using ChunkSize = std::array<std::size_t, 3>;
using ChunkCoord = std::array<std::size_t, 3>;

inline constexpr ChunkSize default_chunk_size{64, 64, 64};
inline constexpr BlockSize default_annotation_block{256, 256, 256};

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

struct ScaleInfo {
    std::string key;
    Extents size{};
    std::array<double, 3> resolution{};  // nm per axis
    ChunkSize chunk_size = default_chunk_size;
    std::string encoding = "raw";
    std::array<std::size_t, 3> factors{1, 1, 1};  // relative to scale 0

    [[nodiscard]] std::array<std::size_t, 3> grid() const noexcept {
        return {(size.nx + chunk_size[0] - 1) / chunk_size[0], (size.ny + chunk_size[1] - 1) / chunk_size[1],
                (size.nz + chunk_size[2] - 1) / chunk_size[2]};
    }
};

struct AnnotationLayerInfo {
    std::string name;
    AnnotationKind kind = AnnotationKind::point;
    BlockSize block_size = default_annotation_block;
};

struct DatasetManifest {
    std::string id;
    std::string data_type = "uint16";  // "uint16" image or "uint32" labels
    std::vector<std::string> channels;
    std::vector<ScaleInfo> scales;
    std::vector<AnnotationLayerInfo> annotation_layers;

    [[nodiscard]] const Extents& extents() const { return scales.at(0).size; }

    [[nodiscard]] const AnnotationLayerInfo* find_layer(std::string_view name) const noexcept {
        for (const auto& l : annotation_layers)
            if (l.name == name) return &l;
        return nullptr;
    }
    [[nodiscard]] const ScaleInfo* find_scale(std::string_view key) const noexcept {
        for (const auto& s : scales)
            if (s.key == key) return &s;
        return nullptr;
    }
};

[[nodiscard]] inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
    using nlohmann::json;
    json scales = json::array();
    for (const auto& s : m.scales)
        scales.push_back({{"key", s.key},
                          {"size", {s.size.nx, s.size.ny, s.size.nz}},
                          {"resolution", s.resolution},
                          {"chunk_sizes", {s.chunk_size}},
                          {"encoding", s.encoding},
                          {"voxel_offset", {0, 0, 0}},
                          {"factors", s.factors}});
    json layers = json::array();
    for (const auto& l : m.annotation_layers)
        layers.push_back({{"name", l.name}, {"kind", to_string(l.kind)}, {"block_size", l.block_size}});
    return {{"@type", "neuroglancer_multiscale_volume"},
            {"id", m.id},
            {"type", m.data_type == "uint32" ? "segmentation" : "image"},
            {"data_type", m.data_type},
            {"num_channels", 1},
            {"channels", m.channels},
            {"scales", std::move(scales)},
            {"annotation_layers", std::move(layers)}};
}

[[nodiscard]] inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
    DatasetManifest m;
    try {
        m.id = j.at("id").get<std::string>();
        m.data_type = j.at("data_type").get<std::string>();
        m.channels = j.at("channels").get<std::vector<std::string>>();
        for (const auto& s : j.at("scales")) {
            ScaleInfo si;
            si.key = s.at("key").get<std::string>();
            const auto size = s.at("size").get<std::array<std::size_t, 3>>();
            si.size = {size[0], size[1], size[2]};
            si.resolution = s.at("resolution").get<std::array<double, 3>>();
            si.chunk_size = s.at("chunk_sizes").at(0).get<ChunkSize>();
            si.encoding = s.value("encoding", std::string("raw"));
            si.factors = s.value("factors", std::array<std::size_t, 3>{1, 1, 1});
            m.scales.push_back(std::move(si));
        }
        for (const auto& l : j.value("annotation_layers", nlohmann::json::array())) {
            AnnotationLayerInfo li;
            li.name = l.at("name").get<std::string>();
            li.kind = parse_kind(l.at("kind").get<std::string>());
            li.block_size = l.value("block_size", default_annotation_block);
            m.annotation_layers.push_back(std::move(li));
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("malformed manifest: ") + e.what());
    }
    if (m.scales.empty()) throw std::invalid_argument("manifest has no scales");
    return m;
}

// ---------------------------------------------------------------------------
// Chunk naming and downsampling
// ---------------------------------------------------------------------------

/// "{x0}-{x1}_{y0}-{y1}_{z0}-{z1}" of chunk (i,j,k), edge chunks truncated.
[[nodiscard]] inline std::string chunk_name(const ScaleInfo& s, const ChunkCoord& c) {
    const std::array<std::size_t, 3> n{s.size.nx, s.size.ny, s.size.nz};
    std::string out;
    for (int a = 0; a < 3; ++a) {
        const std::size_t lo = c[a] * s.chunk_size[a];
        const std::size_t hi = std::min(lo + s.chunk_size[a], n[a]);
        if (a) out += '_';
        out += std::to_string(lo) + '-' + std::to_string(hi);
    }
    return out;
}

/// Inverse of chunk_name; nullopt unless the name is a chunk of this scale.
[[nodiscard]] inline std::optional<ChunkCoord> parse_chunk_name(const ScaleInfo& s, std::string_view name) {
    ChunkCoord c{};
    std::size_t pos = 0;
    for (int a = 0; a < 3; ++a) {
        const auto end = a < 2 ? name.find('_', pos) : name.size();
        if (end == std::string_view::npos) return std::nullopt;
        const auto part = name.substr(pos, end - pos);
        const auto dash = part.find('-');
        if (dash == std::string_view::npos) return std::nullopt;
        std::size_t lo = 0;
        const auto lo_s = part.substr(0, dash);
        auto r = std::from_chars(lo_s.data(), lo_s.data() + lo_s.size(), lo);
        if (r.ec != std::errc{} || r.ptr != lo_s.data() + lo_s.size() || lo % s.chunk_size[a] != 0) return std::nullopt;
        c[a] = lo / s.chunk_size[a];
        pos = end + 1;
    }
    const auto g = s.grid();
    for (int a = 0; a < 3; ++a)
        if (c[a] >= g[a]) return std::nullopt;
    if (chunk_name(s, c) != name) return std::nullopt;
    return c;
}

/// Mean pooling over factor boxes for images (round half up), first voxel of
/// each box for labels. Edge boxes are truncated.
template <typename T>
[[nodiscard]] Volume<T> downsample(const Volume<T>& v, const std::array<std::size_t, 3>& f) {
    for (auto x : f)
        if (x != 1 && x != 2) throw std::invalid_argument("downsample factors must be 1 or 2");
    const auto& e = v.extents();
    const Extents out_ext{(e.nx + f[0] - 1) / f[0], (e.ny + f[1] - 1) / f[1], (e.nz + f[2] - 1) / f[2]};
    Volume<T> out(out_ext);
    for (std::size_t z = 0; z < out_ext.nz; ++z)
        for (std::size_t y = 0; y < out_ext.ny; ++y)
            for (std::size_t x = 0; x < out_ext.nx; ++x) {
                if constexpr (std::is_same_v<T, std::uint32_t>) {
                    out.at(x, y, z) = v.at(x * f[0], y * f[1], z * f[2]);
                } else {
                    std::uint64_t sum = 0, count = 0;
                    for (std::size_t zz = z * f[2]; zz < std::min((z + 1) * f[2], e.nz); ++zz)
                        for (std::size_t yy = y * f[1]; yy < std::min((y + 1) * f[1], e.ny); ++yy)
                            for (std::size_t xx = x * f[0]; xx < std::min((x + 1) * f[0], e.nx); ++xx) {
                                sum += v.at(xx, yy, zz);
                                ++count;
                            }
                    out.at(x, y, z) = static_cast<T>((2 * sum + count) / (2 * count));
                }
            }
    return out;
}

/// Halves every axis whose extent exceeds 1 and whose pitch is within 1.5x
/// of the finest axis, so anisotropic data becomes more isotropic first.
[[nodiscard]] inline std::array<std::size_t, 3> next_scale_factors(const Extents& size,
                                                                   const std::array<double, 3>& res) {
    std::array<std::size_t, 3> f{1, 1, 1};
    double finest = 0.0;
    for (int a = 0; a < 3; ++a)
        if (size.axis(a) > 1 && (finest == 0.0 || res[a] < finest)) finest = res[a];
    for (int a = 0; a < 3; ++a)
        if (size.axis(a) > 1 && res[a] <= 1.5 * finest) f[a] = 2;
    return f;
}

[[nodiscard]] inline std::string scale_key(const std::array<std::size_t, 3>& factors) {
    return std::to_string(factors[0]) + '_' + std::to_string(factors[1]) + '_' + std::to_string(factors[2]);
}

// ---------------------------------------------------------------------------
// Revisions
// ---------------------------------------------------------------------------

struct Revision {
    std::int64_t number = 0;
    std::optional<std::int64_t> parent;  // none for revision 1
    std::string author;
    std::string timestamp;  // UTC, ISO 8601
    std::vector<std::string> upserted;
    std::vector<std::string> deleted;
    std::map<std::string, std::int64_t> block_index;  // block key -> revision holding its file
};

[[nodiscard]] inline nlohmann::json revision_to_json(const Revision& r) {
    return {{"revision", r.number},
            {"parent", r.parent ? nlohmann::json(*r.parent) : nlohmann::json(nullptr)},
            {"author", r.author},
            {"timestamp", r.timestamp},
            {"upserted", r.upserted},
            {"deleted", r.deleted},
            {"block_index", r.block_index}};
}

[[nodiscard]] inline Revision revision_from_json(const nlohmann::json& j) {
    Revision r;
    try {
        r.number = j.at("revision").get<std::int64_t>();
        if (!j.at("parent").is_null()) r.parent = j.at("parent").get<std::int64_t>();
        r.author = j.at("author").get<std::string>();
        r.timestamp = j.at("timestamp").get<std::string>();
        r.upserted = j.at("upserted").get<std::vector<std::string>>();
        r.deleted = j.at("deleted").get<std::vector<std::string>>();
        r.block_index = j.at("block_index").get<std::map<std::string, std::int64_t>>();
    } catch (const nlohmann::json::exception& e) {
        throw Error(std::string("corrupt revision record: ") + e.what());
    }
    return r;
}

// ---------------------------------------------------------------------------
// Region table (features joined by retraining)
// ---------------------------------------------------------------------------

struct StoredRegion {
    GridPos block{};
    RegionRecord region;
};

/// Annotation id that names region `label` of block `p`, e.g. "r0c1-17".
[[nodiscard]] inline std::string region_annotation_id(GridPos p, std::uint32_t label) {
    return "r" + std::to_string(p.row) + "c" + std::to_string(p.col) + "-" + std::to_string(label);
}

[[nodiscard]] inline std::optional<std::pair<GridPos, std::uint32_t>> parse_region_annotation_id(std::string_view id) {
    int row = 0, col = 0;
    unsigned label = 0;
    char tail = 0;
    if (std::sscanf(std::string(id).c_str(), "r%dc%d-%u%c", &row, &col, &label, &tail) != 3) return std::nullopt;
    if (region_annotation_id({row, col}, label) != id) return std::nullopt;
    return std::pair{GridPos{row, col}, static_cast<std::uint32_t>(label)};
}

[[nodiscard]] inline nlohmann::json regions_to_json(const std::vector<StoredRegion>& regions) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& s : regions) {
        const auto& r = s.region;
        arr.push_back({{"block", {s.block.row, s.block.col}},
                       {"label", r.label},
                       {"centroid", r.centroid},
                       {"voxel_count", r.voxel_count},
                       {"bbox_min", r.bbox_min},
                       {"bbox_max", r.bbox_max},
                       {"features", r.features.values()},
                       {"class", to_string(r.cls)}});
    }
    return arr;
}

[[nodiscard]] inline std::vector<StoredRegion> regions_from_json(const nlohmann::json& arr) {
    std::vector<StoredRegion> out;
    try {
        for (const auto& j : arr) {
            StoredRegion s;
            s.block = {j.at("block").at(0).get<int>(), j.at("block").at(1).get<int>()};
            s.region.label = j.at("label").get<std::uint32_t>();
            s.region.centroid = j.at("centroid").get<Vec3>();
            s.region.voxel_count = j.at("voxel_count").get<std::size_t>();
            s.region.bbox_min = j.at("bbox_min").get<Seed>();
            s.region.bbox_max = j.at("bbox_max").get<Seed>();
            s.region.features =
                FeatureVector::from_values(j.at("features").get<std::array<double, FeatureVector::size>>());
            s.region.cls = parse_cell_class(j.at("class").get<std::string>());
            out.push_back(std::move(s));
        }
    } catch (const nlohmann::json::exception& e) {
        throw std::invalid_argument(std::string("malformed region table: ") + e.what());
    }
    return out;
}

// ---------------------------------------------------------------------------
// Store
// ---------------------------------------------------------------------------

namespace detail {

inline std::string utc_timestamp() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

inline std::string unique_suffix() {
    static std::atomic<std::uint64_t> counter{0};
    thread_local std::mt19937_64 rng(std::random_device{}());
    return std::to_string(rng()) + "-" + std::to_string(counter++);
}

/// Writes to a sibling temp file, then renames over `path`.
inline void write_file_atomic(const fs::path& path, std::string_view bytes) {
    const fs::path tmp = path.parent_path() / ("." + path.filename().string() + ".tmp-" + unique_suffix());
    write_file(tmp, bytes);
    fs::rename(tmp, path);
}

inline nlohmann::json read_json(const fs::path& path) {
    const auto text = read_file(path);
    try {
        return nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw Error("corrupt JSON in " + path.string() + ": " + e.what());
    }
}

inline bool valid_name(std::string_view s) {
    if (s.empty() || s == "." || s == "..") return false;
    return std::all_of(s.begin(), s.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.';
    });
}

}  // namespace detail

enum class ExportFormat : std::uint8_t { json, csv };

[[nodiscard]] inline ExportFormat parse_export_format(std::string_view s) {
    if (s == "json") return ExportFormat::json;
    if (s == "csv") return ExportFormat::csv;
    throw std::invalid_argument("unknown export format: " + std::string(s));
}

/// On-disk chunked multi-scale volumes plus revisioned annotation layers.
///
///   {root}/{dataset}/info.json
///   {root}/{dataset}/scales/{key}/{chunk}
///   {root}/{dataset}/ann/{layer}/HEAD
///   {root}/{dataset}/ann/{layer}/rev-{n}/{blockkey}.json
///
/// Chunks of channels after the first live under scales/{channel}_{key}.
class Store {
public:
    explicit Store(fs::path root) : root_(std::move(root)) {}

    [[nodiscard]] const fs::path& root() const noexcept { return root_; }
    [[nodiscard]] fs::path dataset_dir(const std::string& id) const { return root_ / id; }

    [[nodiscard]] std::vector<std::string> list_datasets() const {
        std::vector<std::string> ids;
        std::error_code ec;
        if (!fs::is_directory(root_, ec)) return ids;
        for (const auto& e : fs::directory_iterator(root_))
            if (e.is_directory() && fs::exists(e.path() / "info.json")) ids.push_back(e.path().filename().string());
        std::sort(ids.begin(), ids.end());
        return ids;
    }

    [[nodiscard]] bool has_dataset(const std::string& id) const {
        return detail::valid_name(id) && fs::exists(dataset_dir(id) / "info.json");
    }

    [[nodiscard]] std::string manifest_text(const std::string& id) const {
        if (!has_dataset(id)) throw NotFound("unknown dataset: " + id);
        return detail::read_file(dataset_dir(id) / "info.json");
    }

    [[nodiscard]] DatasetManifest manifest(const std::string& id) const {
        const auto text = manifest_text(id);
        try {
            return manifest_from_json(nlohmann::json::parse(text));
        } catch (const nlohmann::json::exception& e) {
            throw Error("corrupt manifest for " + id + ": " + e.what());
        }
    }

    // -- volumes ------------------------------------------------------------

    /// Writes scale 0 and num_scales - 1 downsampled scales for `channel`.
    /// A new channel may extend an existing dataset of the same geometry.
    template <typename T>
    DatasetManifest ingest(const Volume<T>& volume, const Resolution& res, const std::string& id,
                           const std::string& channel, ChunkSize chunk = default_chunk_size,
                           std::size_t num_scales = 1) {
        static_assert(std::is_same_v<T, std::uint16_t> || std::is_same_v<T, std::uint32_t>);
        if (!detail::valid_name(id)) throw std::invalid_argument("invalid dataset id: " + id);
        if (!detail::valid_name(channel)) throw std::invalid_argument("invalid channel name: " + channel);
        for (auto c : chunk)
            if (c == 0) throw std::invalid_argument("chunk size must be positive");
        if (num_scales < 1) throw std::invalid_argument("need at least one scale");
        if (volume.size() == 0) throw std::invalid_argument("cannot ingest an empty volume");
        res.validate();
        const std::string data_type = std::is_same_v<T, std::uint16_t> ? "uint16" : "uint32";

        std::lock_guard lock(dataset_mutex(id));
        DatasetManifest m;
        const bool extending = has_dataset(id);
        if (extending) {
            m = manifest(id);
            if (std::find(m.channels.begin(), m.channels.end(), channel) != m.channels.end())
                throw Conflict("dataset " + id + " already has channel " + channel);
            if (m.data_type != data_type || m.extents() != volume.extents())
                throw std::invalid_argument("new channel must match the dataset's data type and extents");
        } else {
            m.id = id;
            m.data_type = data_type;
            ScaleInfo s0;
            s0.key = scale_key({1, 1, 1});
            s0.size = volume.extents();
            s0.resolution = {res.dx * 1000.0, res.dy * 1000.0, res.dz * 1000.0};
            s0.chunk_size = chunk;
            m.scales.push_back(s0);
            for (std::size_t s = 1; s < num_scales; ++s) {
                const auto& prev = m.scales.back();
                const auto f = next_scale_factors(prev.size, prev.resolution);
                if (f == std::array<std::size_t, 3>{1, 1, 1})
                    throw std::invalid_argument("volume too small for " + std::to_string(num_scales) + " scales");
                ScaleInfo si = prev;
                for (int a = 0; a < 3; ++a) {
                    si.factors[a] *= f[a];
                    si.resolution[a] *= static_cast<double>(f[a]);
                }
                si.size = {(prev.size.nx + f[0] - 1) / f[0], (prev.size.ny + f[1] - 1) / f[1],
                           (prev.size.nz + f[2] - 1) / f[2]};
                si.key = scale_key(si.factors);
                m.scales.push_back(si);
            }
        }
        const bool first_channel = m.channels.empty();

        Volume<T> level = volume;
        for (std::size_t s = 0; s < m.scales.size(); ++s) {
            const auto& si = m.scales[s];
            if (s > 0) {
                std::array<std::size_t, 3> f{};
                for (int a = 0; a < 3; ++a) f[a] = si.factors[a] / m.scales[s - 1].factors[a];
                level = downsample(level, f);
            }
            const fs::path dir = dataset_dir(id) / "scales" / (first_channel ? si.key : channel + "_" + si.key);
            fs::create_directories(dir);
            const auto g = si.grid();
            for (std::size_t k = 0; k < g[2]; ++k)
                for (std::size_t j = 0; j < g[1]; ++j)
                    for (std::size_t i = 0; i < g[0]; ++i) {
                        const ChunkCoord c{i, j, k};
                        detail::write_file(dir / chunk_name(si, c), to_le_bytes<T>(chunk_of(level, si, c).span()));
                    }
        }
        m.channels.push_back(channel);
        save_manifest(m);
        return m;
    }

    /// Raw little-endian bytes of one chunk. `key` is a scale key, prefixed
    /// with "{channel}_" for channels after the first.
    [[nodiscard]] std::string read_chunk(const std::string& id, const std::string& key, const ChunkCoord& c) const {
        const auto m = manifest(id);
        const auto [dir, scale] = resolve_scale(m, key);
        const auto g = scale.grid();
        for (int a = 0; a < 3; ++a)
            if (c[a] >= g[a]) throw NotFound("chunk outside scale " + key);
        return detail::read_file(dataset_dir(id) / "scales" / dir / chunk_name(scale, c));
    }

    [[nodiscard]] std::string read_chunk(const std::string& id, const std::string& key, const std::string& name) const {
        const auto m = manifest(id);
        const auto [dir, scale] = resolve_scale(m, key);
        const auto c = parse_chunk_name(scale, name);
        if (!c) throw NotFound("no chunk " + name + " in scale " + key);
        return detail::read_file(dataset_dir(id) / "scales" / dir / name);
    }

    /// Reassembles a whole scale from its chunks.
    template <typename T>
    [[nodiscard]] Volume<T> read_volume(const std::string& id, const std::string& key) const {
        const auto m = manifest(id);
        const auto [dir, scale] = resolve_scale(m, key);
        Volume<T> out(scale.size);
        const auto g = scale.grid();
        for (std::size_t k = 0; k < g[2]; ++k)
            for (std::size_t j = 0; j < g[1]; ++j)
                for (std::size_t i = 0; i < g[0]; ++i) {
                    const ChunkCoord c{i, j, k};
                    const Extents ce = chunk_extents(scale, c);
                    const Volume<T> part(ce, from_le_bytes<T>(read_chunk(id, key, c)));
                    out.paste(part, i * scale.chunk_size[0], j * scale.chunk_size[1], k * scale.chunk_size[2]);
                }
        return out;
    }

    [[nodiscard]] static Extents chunk_extents(const ScaleInfo& s, const ChunkCoord& c) {
        const std::array<std::size_t, 3> n{s.size.nx, s.size.ny, s.size.nz};
        std::array<std::size_t, 3> e{};
        for (int a = 0; a < 3; ++a) e[a] = std::min(s.chunk_size[a], n[a] - c[a] * s.chunk_size[a]);
        return {e[0], e[1], e[2]};
    }

    // -- annotation layers -------------------------------------------------

    /// Registers a layer; re-registering with the same settings is a no-op.
    DatasetManifest add_annotation_layer(const std::string& id, const std::string& layer,
                                         AnnotationKind kind = AnnotationKind::point,
                                         BlockSize block_size = default_annotation_block) {
        if (!detail::valid_name(layer)) throw std::invalid_argument("invalid layer name: " + layer);
        for (auto b : block_size)
            if (b == 0) throw std::invalid_argument("annotation block size must be positive");
        std::lock_guard lock(dataset_mutex(id));
        auto m = manifest(id);
        if (const auto* l = m.find_layer(layer)) {
            if (l->kind != kind || l->block_size != block_size)
                throw Conflict("layer " + layer + " already exists with different settings");
            return m;
        }
        m.annotation_layers.push_back({layer, kind, block_size});
        fs::create_directories(layer_dir(id, layer));
        save_manifest(m);
        return m;
    }

    /// Current head revision of a layer; 0 before the first write.
    [[nodiscard]] std::int64_t head(const std::string& id, const std::string& layer) const {
        require_layer(id, layer);
        return head_unchecked(id, layer);
    }

    [[nodiscard]] Revision revision_info(const std::string& id, const std::string& layer, std::int64_t rev) const {
        require_layer(id, layer);
        return load_revision(id, layer, rev);
    }

    /// Compare-and-set commit of a change set against `base`. Entries with
    /// deleted set remove that id; all others insert or replace by id.
    Revision write_annotations(const std::string& id, const std::string& layer,
                               const std::vector<Annotation>& changes, std::int64_t base,
                               const std::string& author) {
        const auto m = manifest(id);
        const auto* info = m.find_layer(layer);
        if (!info) throw NotFound("unknown annotation layer: " + layer);

        std::map<std::string, const Annotation*> change_by_id;
        for (const auto& a : changes) {
            if (a.id.empty()) throw std::invalid_argument("annotation id must not be empty");
            if (!change_by_id.emplace(a.id, &a).second)
                throw std::invalid_argument("duplicate id in change set: " + a.id);
            if (a.deleted) continue;
            validate_shape(a);
            const auto& e = m.extents();
            for (const auto& c : a.coords)
                for (int ax = 0; ax < 3; ++ax)
                    if (c[ax] < 0.0 || c[ax] >= static_cast<double>(e.axis(ax)))
                        throw std::invalid_argument("annotation " + a.id + " has a coordinate outside the dataset");
        }

        std::lock_guard lock(layer_mutex(id, layer));
        const std::int64_t head_rev = head_unchecked(id, layer);
        if (base != head_rev)
            throw Conflict("stale base revision " + std::to_string(base) + ", head is " + std::to_string(head_rev),
                           head_rev);
        const Revision parent = load_revision(id, layer, head_rev);

        // Locate existing ids so moves and deletes touch the right blocks.
        std::map<std::string, std::map<std::string, Annotation>> blocks;  // touched blocks only
        std::map<std::string, std::string> where;
        auto load_block = [&](const std::string& key) -> std::map<std::string, Annotation>& {
            auto it = blocks.find(key);
            if (it != blocks.end()) return it->second;
            auto& dst = blocks[key];
            if (auto r = parent.block_index.find(key); r != parent.block_index.end())
                for (auto& a : read_block_file(id, layer, r->second, key)) dst.emplace(a.id, std::move(a));
            return dst;
        };
        for (const auto& [key, rev] : parent.block_index)
            for (const auto& a : read_block_file(id, layer, rev, key))
                if (change_by_id.count(a.id)) where[a.id] = key;

        Revision next;
        next.number = head_rev + 1;
        if (head_rev > 0) next.parent = head_rev;
        next.author = author;
        next.timestamp = detail::utc_timestamp();
        next.block_index = parent.block_index;

        for (const auto& [aid, a] : change_by_id) {
            if (auto w = where.find(aid); w != where.end()) load_block(w->second).erase(aid);
            if (a->deleted) {
                next.deleted.push_back(aid);
                continue;
            }
            Annotation stored = *a;
            stored.block_key = annotation_block_key(stored.coords.front(), info->block_size);
            stored.deleted = false;
            load_block(stored.block_key)[aid] = std::move(stored);
            next.upserted.push_back(aid);
        }

        const fs::path ldir = layer_dir(id, layer);
        const fs::path staging = ldir / (".staging-" + detail::unique_suffix());
        fs::create_directories(staging);
        try {
            for (const auto& [key, anns] : blocks) {
                if (anns.empty()) {
                    next.block_index.erase(key);
                    continue;
                }
                nlohmann::json arr = nlohmann::json::array();
                for (const auto& [aid, a] : anns) arr.push_back(annotation_to_json(a));
                const nlohmann::json doc = {{"block", key}, {"annotations", std::move(arr)}};
                detail::write_file(staging / (key + ".json"), doc.dump());
                next.block_index[key] = next.number;
            }
            detail::write_file(staging / "_revision.json", revision_to_json(next).dump(2));
            std::error_code ec;
            fs::rename(staging, ldir / ("rev-" + std::to_string(next.number)), ec);
            if (ec) {
                fs::remove_all(staging);
                const auto now = head_unchecked(id, layer);
                throw Conflict("revision " + std::to_string(next.number) + " was committed concurrently", now);
            }
        } catch (const Conflict&) {
            throw;
        } catch (...) {
            std::error_code ec;
            fs::remove_all(staging, ec);
            throw;
        }
        detail::write_file_atomic(ldir / "HEAD", std::to_string(next.number) + "\n");
        return next;
    }

    /// Annotations as of `rev` (HEAD when empty), optionally limited to blocks.
    [[nodiscard]] std::vector<Annotation> read_annotations(
        const std::string& id, const std::string& layer,
        const std::optional<std::vector<std::string>>& block_keys = std::nullopt,
        std::optional<std::int64_t> rev = std::nullopt) const {
        require_layer(id, layer);
        const std::int64_t r = rev ? *rev : head_unchecked(id, layer);
        const Revision info = load_revision(id, layer, r);
        std::vector<Annotation> out;
        for (const auto& [key, holder] : info.block_index) {
            if (block_keys && std::find(block_keys->begin(), block_keys->end(), key) == block_keys->end()) continue;
            auto part = read_block_file(id, layer, holder, key);
            out.insert(out.end(), std::make_move_iterator(part.begin()), std::make_move_iterator(part.end()));
        }
        sort_by_id(out);
        return out;
    }

    [[nodiscard]] std::string export_annotations(const std::string& id, const std::string& layer,
                                                 std::optional<std::int64_t> rev, ExportFormat format) const {
        require_layer(id, layer);
        const std::int64_t r = rev ? *rev : head_unchecked(id, layer);
        auto anns = read_annotations(id, layer, std::nullopt, r);
        if (format == ExportFormat::csv) return to_csv_document(std::move(anns));
        return to_json_document({id, layer, r, std::move(anns)});
    }

    // -- region table --------------------------------------------------------

    void write_regions(const std::string& id, const std::vector<StoredRegion>& regions) {
        if (!has_dataset(id)) throw NotFound("unknown dataset: " + id);
        std::lock_guard lock(dataset_mutex(id));
        detail::write_file_atomic(dataset_dir(id) / "regions.json", regions_to_json(regions).dump());
    }

    [[nodiscard]] std::vector<StoredRegion> read_regions(const std::string& id) const {
        if (!has_dataset(id)) throw NotFound("unknown dataset: " + id);
        const fs::path path = dataset_dir(id) / "regions.json";
        if (!fs::exists(path)) return {};
        return regions_from_json(detail::read_json(path));
    }

    [[nodiscard]] fs::path layer_dir(const std::string& id, const std::string& layer) const {
        return dataset_dir(id) / "ann" / layer;
    }

    /// Mutex serializing writers of one dataset within this process.
    [[nodiscard]] std::mutex& dataset_mutex(const std::string& id) const { return named_mutex(dataset_dir(id).string()); }

private:
    fs::path root_;

    static std::mutex& named_mutex(const std::string& name) {
        static std::mutex registry_mu;
        static std::map<std::string, std::unique_ptr<std::mutex>> registry;
        std::lock_guard lock(registry_mu);
        auto& m = registry[fs::weakly_canonical(name).string()];
        if (!m) m = std::make_unique<std::mutex>();
        return *m;
    }

    std::mutex& layer_mutex(const std::string& id, const std::string& layer) const {
        return named_mutex(layer_dir(id, layer).string());
    }

    void save_manifest(const DatasetManifest& m) const {
        fs::create_directories(dataset_dir(m.id));
        detail::write_file_atomic(dataset_dir(m.id) / "info.json", manifest_to_json(m).dump(2) + "\n");
    }

    template <typename T>
    static Volume<T> chunk_of(const Volume<T>& v, const ScaleInfo& s, const ChunkCoord& c) {
        const Extents e = chunk_extents(s, c);
        const std::size_t x0 = c[0] * s.chunk_size[0], y0 = c[1] * s.chunk_size[1], z0 = c[2] * s.chunk_size[2];
        return v.crop(x0, x0 + e.nx, y0, y0 + e.ny, z0, z0 + e.nz);
    }

    static std::pair<std::string, ScaleInfo> resolve_scale(const DatasetManifest& m, const std::string& key) {
        if (const auto* s = m.find_scale(key); s && !m.channels.empty()) return {key, *s};
        for (std::size_t c = 1; c < m.channels.size(); ++c) {
            const std::string prefix = m.channels[c] + "_";
            if (key.rfind(prefix, 0) == 0)
                if (const auto* s = m.find_scale(key.substr(prefix.size()))) return {key, *s};
        }
        throw NotFound("unknown scale: " + key);
    }

    void require_layer(const std::string& id, const std::string& layer) const {
        if (!manifest(id).find_layer(layer)) throw NotFound("unknown annotation layer: " + layer);
    }

    /// HEAD file value, rolled forward over any committed revision whose HEAD
    /// update did not land.
    std::int64_t head_unchecked(const std::string& id, const std::string& layer) const {
        const fs::path ldir = layer_dir(id, layer);
        std::int64_t h = 0;
        std::error_code ec;
        if (fs::exists(ldir / "HEAD", ec)) {
            const auto text = detail::read_file(ldir / "HEAD");
            h = std::stoll(text);
        }
        while (fs::exists(ldir / ("rev-" + std::to_string(h + 1)), ec)) ++h;
        return h;
    }

    Revision load_revision(const std::string& id, const std::string& layer, std::int64_t rev) const {
        if (rev == 0) return {};
        const fs::path path = layer_dir(id, layer) / ("rev-" + std::to_string(rev)) / "_revision.json";
        if (rev < 0 || !fs::exists(path)) throw NotFound("unknown revision " + std::to_string(rev) + " of " + layer);
        return revision_from_json(detail::read_json(path));
    }

    std::vector<Annotation> read_block_file(const std::string& id, const std::string& layer, std::int64_t rev,
                                            const std::string& key) const {
        const auto doc =
            detail::read_json(layer_dir(id, layer) / ("rev-" + std::to_string(rev)) / (key + ".json"));
        std::vector<Annotation> out;
        for (const auto& j : doc.at("annotations")) {
            auto a = annotation_from_json(j);
            a.block_key = key;
            out.push_back(std::move(a));
        }
        return out;
    }
};

}  // namespace neurovol
