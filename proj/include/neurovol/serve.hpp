#pragma once

#include <algorithm>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "httplib.h"
#include "json.hpp"
#include "neurovol/error.hpp"
#include "neurovol/retrain.hpp"
#include "neurovol/store.hpp"

namespace neurovol {

struct ServerConfig {
    std::string host = "127.0.0.1";
    int port = 8080;  // 0 picks a free port
    fs::path root;
    std::vector<std::string> datasets;            // empty serves every dataset
    std::vector<std::string> cors_origins{"*"};  // "*" allows any origin
    double retrain_C = 1.0;
    std::uint64_t retrain_seed = 42;

    void validate() const {
        if (port < 0 || port > 65535) throw std::invalid_argument("port outside [0, 65535]");
        if (root.empty() || !fs::is_directory(root)) throw std::invalid_argument("store root is not a directory: " + root.string());
    }
};

namespace detail {

inline void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

inline std::string split_list_item(const std::string& s, std::size_t& pos) {
    const auto comma = s.find(',', pos);
    std::string item = s.substr(pos, comma == std::string::npos ? std::string::npos : comma - pos);
    pos = comma == std::string::npos ? s.size() + 1 : comma + 1;
    return item;
}

inline std::int64_t parse_revision_param(const std::string& s) {
    std::int64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) throw std::invalid_argument("revision must be an integer: " + s);
    return v;
}

}  // namespace detail

/// HTTP front end over a store. Routes:
///   GET  /datasets
///   GET  /d/{id}/info
///   GET  /d/{id}/scales/{key}/{chunk}
///   GET  /d/{id}/ann/{layer}?blocks=k1,k2&rev=n
///   PUT  /d/{id}/ann/{layer}?base=n
///   GET  /d/{id}/ann/{layer}/export?format=json|csv&rev=n
///   POST /d/{id}/retrain
class Service {
public:
    explicit Service(ServerConfig config) : config_(std::move(config)), store_(config_.root) {
        config_.validate();
        routes();
    }
    Service(const Service&) = delete;
    Service& operator=(const Service&) = delete;
    ~Service() { stop(); }

    /// Binds and serves on a background thread. Throws when binding fails.
    void start() {
        if (thread_.joinable()) return;
        if (config_.port == 0) {
            port_ = server_.bind_to_any_port(config_.host);
            if (port_ < 0) throw Error("cannot bind " + config_.host);
        } else {
            if (!server_.bind_to_port(config_.host, config_.port)) throw Error("cannot bind " + config_.host + ":" +
                                                                               std::to_string(config_.port));
            port_ = config_.port;
        }
        thread_ = std::thread([this] { server_.listen_after_bind(); });
        server_.wait_until_ready();
    }

    /// Blocks serving on the calling thread.
    void run() {
        start();
        if (thread_.joinable()) thread_.join();
    }

    /// Stops accepting; requests in flight finish first.
    void stop() {
        server_.stop();
        if (thread_.joinable()) thread_.join();
    }

    [[nodiscard]] int port() const noexcept { return port_; }
    [[nodiscard]] Store& store() noexcept { return store_; }

private:
    ServerConfig config_;
    Store store_;
    httplib::Server server_;
    std::thread thread_;
    int port_ = -1;

    bool allowed(const std::string& id) const {
        if (!store_.has_dataset(id)) return false;
        return config_.datasets.empty() ||
               std::find(config_.datasets.begin(), config_.datasets.end(), id) != config_.datasets.end();
    }

    void require(const std::string& id) const {
        if (!allowed(id)) throw NotFound("unknown dataset: " + id);
    }

    using Handler = std::function<void(const httplib::Request&, httplib::Response&)>;

    /// Maps library errors onto status codes.
    static httplib::Server::Handler guarded(Handler h) {
        return [h = std::move(h)](const httplib::Request& req, httplib::Response& res) {
            try {
                h(req, res);
            } catch (const NotFound& e) {
                detail::send_json(res, 404, {{"error", e.what()}});
            } catch (const Conflict& e) {
                detail::send_json(res, 409, {{"error", e.what()}, {"head", e.head()}});
            } catch (const PreconditionFailed& e) {
                detail::send_json(res, 412, {{"error", e.what()}, {"counts", e.counts()}});
            } catch (const std::invalid_argument& e) {
                detail::send_json(res, 400, {{"error", e.what()}});
            } catch (const std::exception& e) {
                detail::send_json(res, 500, {{"error", e.what()}});
            }
        };
    }

    void add_cors(const httplib::Request& req, httplib::Response& res) const {
        const auto origin = req.get_header_value("Origin");
        const auto& allow = config_.cors_origins;
        std::string value;
        if (std::find(allow.begin(), allow.end(), "*") != allow.end()) value = "*";
        else if (!origin.empty() && std::find(allow.begin(), allow.end(), origin) != allow.end()) value = origin;
        if (value.empty()) return;
        res.set_header("Access-Control-Allow-Origin", value);
        res.set_header("Access-Control-Allow-Methods", "GET, PUT, POST, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        if (value != "*") res.set_header("Vary", "Origin");
    }

    void routes() {
        server_.set_post_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
            add_cors(req, res);
        });
        server_.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

        server_.Get("/datasets", guarded([this](const httplib::Request&, httplib::Response& res) {
            nlohmann::json ids = nlohmann::json::array();
            for (const auto& id : store_.list_datasets())
                if (allowed(id)) ids.push_back(id);
            detail::send_json(res, 200, ids);
        }));

        server_.Get(R"(/d/([^/]+)/info)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const std::string id = req.matches[1];
            require(id);
            res.set_content(store_.manifest_text(id), "application/json");
        }));

        server_.Get(R"(/d/([^/]+)/scales/([^/]+)/([^/]+))",
                    guarded([this](const httplib::Request& req, httplib::Response& res) {
                        const std::string id = req.matches[1];
                        require(id);
                        res.set_content(store_.read_chunk(id, req.matches[2], std::string(req.matches[3])),
                                        "application/octet-stream");
                    }));

        server_.Get(R"(/d/([^/]+)/ann/([^/]+)/export)",
                    guarded([this](const httplib::Request& req, httplib::Response& res) {
                        const std::string id = req.matches[1];
                        require(id);
                        const auto format = parse_export_format(
                            req.has_param("format") ? req.get_param_value("format") : std::string("json"));
                        std::optional<std::int64_t> rev;
                        if (req.has_param("rev")) rev = detail::parse_revision_param(req.get_param_value("rev"));
                        res.set_content(store_.export_annotations(id, req.matches[2], rev, format),
                                        format == ExportFormat::csv ? "text/csv" : "application/json");
                    }));

        server_.Get(R"(/d/([^/]+)/ann/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const std::string id = req.matches[1];
            const std::string layer = req.matches[2];
            require(id);
            std::optional<std::int64_t> rev;
            if (req.has_param("rev")) rev = detail::parse_revision_param(req.get_param_value("rev"));
            const std::int64_t r = rev ? *rev : store_.head(id, layer);
            std::optional<std::vector<std::string>> blocks;
            if (req.has_param("blocks")) {
                blocks.emplace();
                const auto list = req.get_param_value("blocks");
                for (std::size_t pos = 0; pos <= list.size();) {
                    auto item = detail::split_list_item(list, pos);
                    if (!item.empty()) blocks->push_back(std::move(item));
                }
            }
            nlohmann::json arr = nlohmann::json::array();
            for (const auto& a : store_.read_annotations(id, layer, blocks, r)) {
                auto j = annotation_to_json(a);
                j["block"] = a.block_key;
                arr.push_back(std::move(j));
            }
            detail::send_json(res, 200, {{"dataset", id}, {"layer", layer}, {"revision", r}, {"annotations", arr}});
        }));

        server_.Put(R"(/d/([^/]+)/ann/([^/]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const std::string id = req.matches[1];
            const std::string layer = req.matches[2];
            require(id);
            if (!store_.manifest(id).find_layer(layer)) throw NotFound("unknown annotation layer: " + layer);
            if (!req.has_param("base")) throw std::invalid_argument("missing base revision");
            const auto base = detail::parse_revision_param(req.get_param_value("base"));
            nlohmann::json body;
            try {
                body = nlohmann::json::parse(req.body);
            } catch (const nlohmann::json::exception& e) {
                throw std::invalid_argument(std::string("body is not JSON: ") + e.what());
            }
            if (!body.is_object() || !body.contains("annotations") || !body["annotations"].is_array())
                throw std::invalid_argument("body needs an annotations array");
            std::vector<Annotation> changes;
            for (const auto& a : body["annotations"]) changes.push_back(annotation_from_json(a));
            const std::string author = body.value("author", std::string("anonymous"));
            const auto rev = store_.write_annotations(id, layer, changes, base, author);
            detail::send_json(res, 200, {{"revision", rev.number}, {"parent", rev.parent ? nlohmann::json(*rev.parent) : nullptr}});
        }));

        server_.Post(R"(/d/([^/]+)/retrain)", guarded([this](const httplib::Request& req, httplib::Response& res) {
            const std::string id = req.matches[1];
            require(id);
            nlohmann::json body = nlohmann::json::object();
            if (!req.body.empty()) {
                try {
                    body = nlohmann::json::parse(req.body);
                } catch (const nlohmann::json::exception& e) {
                    throw std::invalid_argument(std::string("body is not JSON: ") + e.what());
                }
                if (!body.is_object()) throw std::invalid_argument("body must be a JSON object");
            }
            double C = config_.retrain_C;
            std::uint64_t seed = config_.retrain_seed;
            std::string layer = "centroids";
            try {
                C = body.value("C", C);
                seed = body.value("seed", seed);
                layer = body.value("layer", layer);
            } catch (const nlohmann::json::exception& e) {
                throw std::invalid_argument(std::string("bad retrain parameter: ") + e.what());
            }
            const auto r = retrain_from_annotations(store_, id, C, seed, layer);
            detail::send_json(res, 200,
                              {{"version", r.model.version},
                               {"revision", r.revision},
                               {"fold_auc", r.cv.fold_auc},
                               {"mean_auc", r.cv.mean_auc},
                               {"counts", r.counts},
                               {"unmatched", r.unmatched}});
        }));
    }
};

}  // namespace neurovol
