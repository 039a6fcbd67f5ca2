#pragma once

// HTTP/JSON front end for sessions.
//
//   GET    /health
//   POST   /sessions                        {landmarks | landmarks_path, config?, volumes?: {pre, post}}
//   GET    /sessions/{id}/state
//   POST   /sessions/{id}/landmarks         {pre: [x,y,z], post: [x,y,z]}
//   DELETE /sessions/{id}/landmarks/{lid}
//   GET    /sessions/{id}/slices?kind=&axis=&index=
//   POST   /sessions/{id}/kernel            {mode, kernels?, kernel_grid?, delta_mm?}
//   POST   /sessions/{id}/export            {dir?}
//
// Errors are {code, message, detail}; 4xx for bad requests, 5xx for numeric failures.
// Slices are JSON with base64 float32 data, or the raw float32 body when the client sends
// "Accept: application/octet-stream" (metadata then travels in X-Slice-Metadata).

#include <charconv>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>

#include <nlohmann/json.hpp>

#include "gpreg/error.hpp"
#include "gpreg/io.hpp"
#include "gpreg/session.hpp"
#include "gpreg/version.hpp"

// After Eigen: httplib pulls in <resolv.h>, whose `_res` macro clashes with Eigen parameter names.
#include <httplib.h>

namespace gpreg {

inline int http_status_for(ErrorCode code) {
    switch (code) {
        case ErrorCode::not_found: return 404;
        case ErrorCode::duplicate:
        case ErrorCode::precondition: return 409;
        case ErrorCode::unavailable: return 422;
        case ErrorCode::io: return 500;
        default: break;
    }
    return is_numeric_failure(code) ? 500 : 400;
}

inline nlohmann::json error_body(const Error& e) {
    return {{"code", std::string(to_string(e.code()))}, {"message", e.what()}, {"detail", e.detail()}};
}

class HttpService {
public:
    explicit HttpService(std::filesystem::path data_dir = {}) : data_dir_(std::move(data_dir)) {
        // httplib's default adds SO_REUSEPORT, which lets a second server silently share a busy port.
        server_.set_socket_options([](socket_t sock) {
            int yes = 1;
            ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof(yes));
        });
        routes();
    }

    HttpService(const HttpService&) = delete;
    HttpService& operator=(const HttpService&) = delete;

    [[nodiscard]] SessionManager& sessions() { return sessions_; }
    [[nodiscard]] httplib::Server& server() { return server_; }

    // Serves static files (the browser client) from `dir` at "/ui".
    bool mount_static(const std::filesystem::path& dir) { return server_.set_mount_point("/ui", dir.string()); }

    // Returns the bound port, or -1 when the address is unavailable.
    int bind(const std::string& host, int port) {
        if (port == 0) return server_.bind_to_any_port(host);
        return server_.bind_to_port(host, port) ? port : -1;
    }

    bool listen_after_bind() { return server_.listen_after_bind(); }
    void stop() { server_.stop(); }
    [[nodiscard]] bool is_running() const { return server_.is_running(); }
    void wait_until_ready() const { server_.wait_until_ready(); }

    void flush() const {
        if (!data_dir_.empty()) sessions_.flush(data_dir_ / "sessions");
    }

private:
    static void send_json(httplib::Response& res, const nlohmann::json& body, int status = 200) {
        res.status = status;
        res.set_content(body.dump(), "application/json");
    }

    template <typename Handler>
    static httplib::Server::Handler guarded(Handler&& h) {
        return [h = std::forward<Handler>(h)](const httplib::Request& req, httplib::Response& res) {
            try {
                h(req, res);
            } catch (const Error& e) {
                send_json(res, error_body(e), http_status_for(e.code()));
            } catch (const nlohmann::json::exception& e) {
                send_json(res, error_body(Error(ErrorCode::schema, "malformed request body", e.what())), 400);
            } catch (const std::exception& e) {
                send_json(res, error_body(Error(ErrorCode::io, "internal error", e.what())), 500);
            }
        };
    }

    static nlohmann::json body_of(const httplib::Request& req) {
        if (req.body.empty()) return nlohmann::json::object();
        auto j = parse_json_text(req.body, "request body");
        if (!j.is_object()) throw Error(ErrorCode::schema, "request body: expected an object");
        return j;
    }

    static std::string param(const httplib::Request& req, const char* name) {
        if (!req.has_param(name))
            throw Error(ErrorCode::invalid_argument, std::string("missing query parameter '") + name + "'");
        return req.get_param_value(name);
    }

    static std::size_t parse_index(const std::string& s, const char* what) {
        std::size_t v = 0;
        const auto* end = s.data() + s.size();
        const auto [ptr, ec] = std::from_chars(s.data(), end, v);
        if (ec != std::errc() || ptr != end || s.empty())
            throw Error(ErrorCode::invalid_argument, std::string(what) + " must be a non-negative integer", s);
        return v;
    }

    static std::int64_t parse_id(const std::string& s) {
        std::int64_t v = 0;
        const auto* end = s.data() + s.size();
        const auto [ptr, ec] = std::from_chars(s.data(), end, v);
        if (ec != std::errc() || ptr != end || s.empty())
            throw Error(ErrorCode::invalid_argument, "landmark id must be an integer", s);
        return v;
    }

    SessionInputs inputs_from(const nlohmann::json& body) const {
        using namespace io_detail;
        check_keys(body, {"landmarks", "landmarks_path", "config", "config_path", "volumes"}, "request");
        SessionInputs in;
        if (body.contains("landmarks")) {
            in.landmarks = landmarks_from_json(body["landmarks"], "request/landmarks");
        } else if (body.contains("landmarks_path")) {
            in.landmarks = read_landmarks(string(body["landmarks_path"], "request/landmarks_path"));
        } else {
            throw Error(ErrorCode::schema, "request: missing field 'landmarks' or 'landmarks_path'");
        }
        if (body.contains("config")) in.config = config_from_json(body["config"], "request/config");
        else if (body.contains("config_path")) in.config = read_config(string(body["config_path"], "request/config_path"));
        if (body.contains("volumes")) {
            const auto& v = body["volumes"];
            check_keys(v, {"pre", "post"}, "request/volumes");
            if (v.contains("pre")) in.pre_volume = read_volume(raster_paths(string(v["pre"], "request/volumes/pre")));
            if (v.contains("post"))
                in.post_volume = read_volume(raster_paths(string(v["post"], "request/volumes/post")));
        }
        return in;
    }

    static nlohmann::json variance_json(const Session::PointVariance& v) {
        return {{"x", v.per_axis[0]}, {"y", v.per_axis[1]}, {"z", v.per_axis[2]}, {"trace", v.trace}};
    }

    void routes() {
        server_.Get("/health", guarded([](const httplib::Request&, httplib::Response& res) {
                        send_json(res, {{"status", "ok"}, {"version", std::string(version)}});
                    }));

        server_.Post("/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
                         auto session = sessions_.create(inputs_from(body_of(req)));
                         send_json(res, {{"id", session->id()}, {"summary", session->summary()}}, 201);
                     }));

        server_.Get("/sessions/:id/state", guarded([this](const httplib::Request& req, httplib::Response& res) {
                        send_json(res, sessions_.get(req.path_params.at("id"))->state_json());
                    }));

        server_.Post("/sessions/:id/landmarks", guarded([this](const httplib::Request& req, httplib::Response& res) {
                         auto session = sessions_.get(req.path_params.at("id"));
                         const auto body = body_of(req);
                         io_detail::check_keys(body, {"pre", "post"}, "request");
                         const auto pre = point_from_json(io_detail::field(body, "pre", "request"), "request/pre");
                         const auto post = point_from_json(io_detail::field(body, "post", "request"), "request/post");
                         const auto r = session->add_landmark_pair(pre, post);
                         auto summary = session->summary();
                         send_json(res,
                                   {{"revision", summary["revision"]},
                                    {"id", r.id},
                                    {"variance_before", variance_json(r.before)},
                                    {"variance_after", variance_json(r.after)},
                                    {"summary", summary}},
                                   201);
                     }));

        server_.Delete("/sessions/:id/landmarks/:lid",
                       guarded([this](const httplib::Request& req, httplib::Response& res) {
                           auto session = sessions_.get(req.path_params.at("id"));
                           session->remove_landmark(parse_id(req.path_params.at("lid")));
                           auto summary = session->summary();
                           send_json(res, {{"revision", summary["revision"]}, {"summary", summary}});
                       }));

        server_.Get("/sessions/:id/slices", guarded([this](const httplib::Request& req, httplib::Response& res) {
                        auto session = sessions_.get(req.path_params.at("id"));
                        const auto kind = parse_slice_kind(param(req, "kind"));
                        const auto axis = parse_axis(param(req, "axis"));
                        const auto index = parse_index(param(req, "index"), "index");
                        const auto frame = session->get_slice(kind, axis, index);
                        const auto meta = slice_metadata(frame);
                        const auto payload = io_detail::encode_float32(frame.values);
                        const auto accept = req.get_header_value("Accept");
                        if (accept.find("application/octet-stream") != std::string::npos) {
                            res.set_header("X-Slice-Metadata", meta.dump());
                            res.set_content(payload, "application/octet-stream");
                            return;
                        }
                        auto body = meta;
                        body["encoding"] = "base64";
                        body["data"] = httplib::detail::base64_encode(payload);
                        send_json(res, body);
                    }));

        server_.Post("/sessions/:id/kernel", guarded([this](const httplib::Request& req, httplib::Response& res) {
                         using namespace io_detail;
                         auto session = sessions_.get(req.path_params.at("id"));
                         const auto body = body_of(req);
                         check_keys(body, {"mode", "kernels", "kernel_grid", "delta_mm"}, "request");
                         Session::KernelRequest kr;
                         kr.mode = parse_kernel_mode(string(field(body, "mode", "request"), "request/mode"));
                         if (body.contains("kernels")) kr.manual = axis_kernels_from_json(body["kernels"], "request/kernels");
                         if (kr.mode == KernelMode::manual && !kr.manual)
                             throw Error(ErrorCode::schema, "request: manual mode requires 'kernels'");
                         if (body.contains("kernel_grid"))
                             kr.grid = kernel_grid_from_json(body["kernel_grid"], "request/kernel_grid");
                         if (body.contains("delta_mm")) {
                             const double d = number(body["delta_mm"], "request/delta_mm");
                             if (!(d > 0.0)) throw Error(ErrorCode::invalid_argument, "delta_mm must be positive");
                             kr.delta = d;
                         }
                         session->refit_kernel(kr);
                         const auto snap = session->snapshot();
                         nlohmann::json diagnostics = nlohmann::json::object();
                         if (snap->variogram) diagnostics["variogram"] = to_json(*snap->variogram);
                         if (snap->cv) diagnostics["cv_result"] = to_json(*snap->cv);
                         send_json(res, {{"revision", snap->revision},
                                         {"summary", Session::summary_of(*snap)},
                                         {"diagnostics", diagnostics}});
                     }));

        server_.Post("/sessions/:id/export", guarded([this](const httplib::Request& req, httplib::Response& res) {
                         using namespace io_detail;
                         auto session = sessions_.get(req.path_params.at("id"));
                         const auto body = body_of(req);
                         check_keys(body, {"dir"}, "request");
                         const auto snap = session->snapshot();
                         std::filesystem::path dir;
                         if (body.contains("dir")) {
                             dir = string(body["dir"], "request/dir");
                         } else {
                             if (data_dir_.empty())
                                 throw Error(ErrorCode::invalid_argument, "no export dir given and no data dir set");
                             dir = data_dir_ / "exports" / session->id() / ("rev-" + std::to_string(snap->revision));
                         }
                         send_json(res, Session::export_state(*snap, dir));
                     }));
    }

    std::filesystem::path data_dir_;
    SessionManager sessions_;
    httplib::Server server_;
};

} // namespace gpreg
