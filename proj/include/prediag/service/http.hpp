#pragma once

#include <filesystem>
#include <functional>
#include <string>

#include <httplib.h>
#include <json.hpp>

#include "prediag/service/chat_service.hpp"

namespace prediag::service {

namespace detail {

inline void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, const std::string& message) {
    send_json(res, status, {{"error", message}, {"status", status}});
}

/// Runs a handler, translating exceptions into JSON error bodies.
inline void guarded(httplib::Response& res, const std::function<void()>& body) {
    try {
        body();
    } catch (const ApiError& e) {
        send_error(res, e.status(), e.what());
    } catch (const NotFound& e) {
        send_error(res, 404, e.what());
    } catch (const InvalidArgument& e) {
        send_error(res, 400, e.what());
    } catch (const std::exception& e) {
        send_error(res, 500, e.what());
    }
}

}  // namespace detail

/// Binds the /api/v1 routes of `service` onto `server`. The service must outlive the server.
inline void register_routes(httplib::Server& server, ChatService& service) {
    server.Get("/api/v1/health", [&service](const httplib::Request&, httplib::Response& res) {
        detail::send_json(res, 200,
                          {{"status", "ok"}, {"sessions", service.session_count()}, {"models", service.model_ids()}});
    });

    server.Post("/api/v1/chat", [&service](const httplib::Request& req, httplib::Response& res) {
        detail::guarded(res, [&] {
            json body;
            try {
                body = json::parse(req.body);
            } catch (const json::parse_error& e) {
                throw BadRequest(std::string("malformed JSON: ") + e.what());
            }
            detail::send_json(res, 200, service.handle_chat(ChatRequest::from_json(body)).to_json());
        });
    });

    server.Post("/api/v1/classify", [&service](const httplib::Request& req, httplib::Response& res) {
        detail::guarded(res, [&] {
            if (!req.has_param("model_id")) throw BadRequest("model_id query parameter is required");
            const auto model_id = req.get_param_value("model_id");
            std::string payload;
            if (req.is_multipart_form_data()) {
                if (!req.has_file("file")) throw BadRequest("multipart body needs a 'file' part");
                payload = req.get_file_value("file").content;
            } else {
                payload = req.body;
            }
            detail::send_json(res, 200, service.handle_classify(payload, model_id).to_json());
        });
    });

    server.Get(R"(/api/v1/session/([0-9A-Za-z_-]+))", [&service](const httplib::Request& req, httplib::Response& res) {
        detail::guarded(res, [&] { detail::send_json(res, 200, service.session_json(req.matches[1])); });
    });

    server.Post(R"(/api/v1/session/([0-9A-Za-z_-]+)/end)",
                [&service](const httplib::Request& req, httplib::Response& res) {
                    detail::guarded(res, [&] { detail::send_json(res, 200, service.end_session(req.matches[1])); });
                });
}

/// Optional static assets (the browser client) served from `/`.
inline void mount_static(httplib::Server& server, const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw PathNotFound(dir);
    if (!server.set_mount_point("/", dir.string())) throw IoError(dir, "cannot serve static directory");
}

}  // namespace prediag::service
