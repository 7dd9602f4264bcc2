#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "neurovol/block_io.hpp"
#include "neurovol/volume.hpp"

namespace neurovol {

using json = nlohmann::json;

enum class AnnotationKind : std::uint8_t { point, polyline };
enum class Provenance : std::uint8_t { algorithm, human };

[[nodiscard]] inline std::string to_string(AnnotationKind k) { return k == AnnotationKind::point ? "point" : "polyline"; }
[[nodiscard]] inline std::string to_string(Provenance p) { return p == Provenance::algorithm ? "algorithm" : "human"; }

[[nodiscard]] inline AnnotationKind parse_kind(std::string_view s) {
    if (s == "point") return AnnotationKind::point;
    if (s == "polyline") return AnnotationKind::polyline;
    throw std::invalid_argument("unknown annotation kind: " + std::string(s));
}

[[nodiscard]] inline Provenance parse_provenance(std::string_view s) {
    if (s == "algorithm") return Provenance::algorithm;
    if (s == "human") return Provenance::human;
    throw std::invalid_argument("unknown provenance: " + std::string(s));
}

/// A point or polyline in stitched voxel space; the unit of human correction.
struct Annotation {
    std::string id;
    AnnotationKind kind = AnnotationKind::point;
    std::vector<Vec3> coords;
    std::string cls;  // neuron, glia, centroid, axon, active, inactive or custom
    std::string block_key;
    Provenance provenance = Provenance::algorithm;
    bool deleted = false;

    friend bool operator==(const Annotation&, const Annotation&) = default;
};

inline void validate_shape(const Annotation& a) {
    if (a.id.empty()) throw std::invalid_argument("annotation id must not be empty");
    if (a.kind == AnnotationKind::point && a.coords.size() != 1)
        throw std::invalid_argument("point annotation " + a.id + " needs exactly one coordinate");
    if (a.kind == AnnotationKind::polyline && a.coords.size() < 2)
        throw std::invalid_argument("polyline annotation " + a.id + " needs at least two coordinates");
    for (const auto& c : a.coords)
        for (double v : c)
            if (!std::isfinite(v)) throw std::invalid_argument("non-finite coordinate in " + a.id);
}

using BlockSize = std::array<std::size_t, 3>;

/// "bx_by_bz" of the annotation block containing `p`.
[[nodiscard]] inline std::string annotation_block_key(const Vec3& p, const BlockSize& block_size) {
    std::string key;
    for (int a = 0; a < 3; ++a) {
        const auto b = static_cast<long long>(std::floor(p[a] / static_cast<double>(block_size[a])));
        if (a) key += '_';
        key += std::to_string(b);
    }
    return key;
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

[[nodiscard]] inline json annotation_to_json(const Annotation& a) {
    json coords = json::array();
    for (const auto& c : a.coords) coords.push_back({c[0], c[1], c[2]});
    return {{"id", a.id},
            {"kind", to_string(a.kind)},
            {"class", a.cls},
            {"provenance", to_string(a.provenance)},
            {"coords", std::move(coords)}};
}

[[nodiscard]] inline Annotation annotation_from_json(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("annotation must be a JSON object");
    Annotation a;
    try {
        a.id = j.at("id").get<std::string>();
        a.kind = parse_kind(j.at("kind").get<std::string>());
        a.cls = j.value("class", std::string{});
        a.provenance = parse_provenance(j.value("provenance", std::string("human")));
        a.deleted = j.value("deleted", false);
        a.block_key = j.value("block", std::string{});
        if (!a.deleted || j.contains("coords")) {
            for (const auto& c : j.at("coords")) {
                if (!c.is_array() || c.size() != 3) throw std::invalid_argument("coordinate must be [x, y, z]");
                a.coords.push_back({c[0].get<double>(), c[1].get<double>(), c[2].get<double>()});
            }
        }
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("malformed annotation: ") + e.what());
    }
    if (!a.deleted) validate_shape(a);
    return a;
}

struct AnnotationDocument {
    std::string dataset;
    std::string layer;
    std::int64_t revision = 0;
    std::vector<Annotation> annotations;
};

inline void sort_by_id(std::vector<Annotation>& anns) {
    std::sort(anns.begin(), anns.end(), [](const Annotation& a, const Annotation& b) { return a.id < b.id; });
}

/// Canonical export: keys sorted, annotations sorted by id.
[[nodiscard]] inline std::string to_json_document(AnnotationDocument doc) {
    sort_by_id(doc.annotations);
    json arr = json::array();
    for (const auto& a : doc.annotations) arr.push_back(annotation_to_json(a));
    json j = {{"dataset", doc.dataset}, {"layer", doc.layer}, {"revision", doc.revision}, {"annotations", std::move(arr)}};
    return j.dump(2) + "\n";
}

[[nodiscard]] inline AnnotationDocument parse_json_document(std::string_view text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("malformed JSON: ") + e.what());
    }
    if (!j.is_object() || !j.contains("annotations") || !j["annotations"].is_array())
        throw std::invalid_argument("annotation document needs an annotations array");
    AnnotationDocument doc;
    doc.dataset = j.value("dataset", std::string{});
    doc.layer = j.value("layer", std::string{});
    doc.revision = j.value("revision", std::int64_t{0});
    for (const auto& a : j["annotations"]) doc.annotations.push_back(annotation_from_json(a));
    return doc;
}

// ---------------------------------------------------------------------------
// CSV: id,kind,class,provenance,point_index,x,y,z (one row per coordinate)
// ---------------------------------------------------------------------------

inline constexpr std::string_view csv_header = "id,kind,class,provenance,point_index,x,y,z";

namespace detail {

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + '"';
}

/// Splits CSV text into records of fields (RFC 4180 quoting).
inline std::vector<std::vector<std::string>> parse_csv_records(std::string_view text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false, field_started = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
            continue;
        }
        if (c == '"' && !field_started) {
            quoted = true;
            field_started = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
            field_started = false;
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            row.push_back(std::move(field));
            rows.push_back(std::move(row));
            row.clear();
            field.clear();
            field_started = false;
        } else {
            field += c;
            field_started = true;
        }
    }
    if (quoted) throw std::invalid_argument("unterminated quoted CSV field");
    if (field_started || !row.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace detail

[[nodiscard]] inline std::string to_csv_document(std::vector<Annotation> anns) {
    sort_by_id(anns);
    std::string out(csv_header);
    out += '\n';
    for (const auto& a : anns) {
        for (std::size_t i = 0; i < a.coords.size(); ++i) {
            out += detail::csv_field(a.id) + ',' + to_string(a.kind) + ',' + detail::csv_field(a.cls) + ',' +
                   to_string(a.provenance) + ',' + std::to_string(i) + ',' + format_double(a.coords[i][0]) + ',' +
                   format_double(a.coords[i][1]) + ',' + format_double(a.coords[i][2]) + '\n';
        }
    }
    return out;
}

[[nodiscard]] inline std::vector<Annotation> parse_csv_document(std::string_view text) {
    auto rows = detail::parse_csv_records(text);
    if (rows.empty()) throw std::invalid_argument("CSV document is missing its header");
    std::string header;
    for (std::size_t i = 0; i < rows[0].size(); ++i) header += (i ? "," : "") + rows[0][i];
    if (header != csv_header) throw std::invalid_argument("unexpected CSV header: " + header);

    std::map<std::string, Annotation> by_id;
    std::map<std::string, std::map<std::size_t, Vec3>> points;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& f = rows[r];
        if (f.size() == 1 && f[0].empty()) continue;
        if (f.size() != 8) throw std::invalid_argument("CSV row " + std::to_string(r) + " needs 8 fields");
        auto [it, inserted] = by_id.try_emplace(f[0]);
        Annotation& a = it->second;
        const auto kind = parse_kind(f[1]);
        const auto prov = parse_provenance(f[3]);
        if (inserted) {
            a.id = f[0];
            a.kind = kind;
            a.cls = f[2];
            a.provenance = prov;
        } else if (a.kind != kind || a.cls != f[2] || a.provenance != prov) {
            throw std::invalid_argument("inconsistent rows for annotation " + f[0]);
        }
        const auto index = detail::parse_size(f[4]);
        const Vec3 p{detail::parse_double(f[5]), detail::parse_double(f[6]), detail::parse_double(f[7])};
        if (!points[f[0]].emplace(index, p).second)
            throw std::invalid_argument("duplicate point_index for annotation " + f[0]);
    }
    std::vector<Annotation> out;
    for (auto& [id, a] : by_id) {
        std::size_t expect = 0;
        for (const auto& [idx, p] : points[id]) {
            if (idx != expect++) throw std::invalid_argument("point_index gap in annotation " + id);
            a.coords.push_back(p);
        }
        validate_shape(a);
        out.push_back(std::move(a));
    }
    return out;
}

}  // namespace neurovol
