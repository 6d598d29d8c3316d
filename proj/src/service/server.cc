#include "geclip/service/server.h"

#include <chrono>

#include "geclip/clip/encoder.h"
#include "geclip/service/explain_service.h"
#include "httplib.h"
#include "json.hpp"

namespace geclip::service {

using nlohmann::json;

namespace {

constexpr const char* kJson = "application/json";

void send_error(httplib::Response& res, int status, const std::string& field, const std::string& message) {
  res.status = status;
  res.set_content(json{{"error", {{"status", status}, {"field", field}, {"message", message}}}}.dump(), kJson);
}

clip::Image upload_image(const httplib::Request& req) {
  if (!req.is_multipart_form_data()) throw RequestError("body", "expected multipart/form-data");
  if (!req.has_file("image")) throw RequestError("image", "required");
  const std::string& bytes = req.get_file_value("image").content;
  if (bytes.empty()) throw RequestError("image", "empty upload");
  try {
    return clip::decode_image(std::span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()));
  } catch (const DataError& e) {
    throw RequestError("image", e.what());
  }
}

json form_json(const httplib::Request& req, const char* name) {
  if (!req.is_multipart_form_data()) throw RequestError("body", "expected multipart/form-data");
  if (!req.has_file(name)) throw RequestError(name, "required");
  const json doc = json::parse(req.get_file_value(name).content, nullptr, false);
  if (doc.is_discarded()) throw RequestError(name, "malformed JSON");
  return doc;
}

// Maps engine errors onto statuses: bad input 400, unusable data 422,
// numeric failures 500.
template <typename Fn>
void guarded(httplib::Response& res, Fn fn) {
  try {
    fn();
  } catch (const RequestError& e) {
    send_error(res, 400, e.field(), e.what());
  } catch (const NumericError& e) {
    send_error(res, 500, "", e.what());
  } catch (const DataError& e) {
    send_error(res, 422, "", e.what());
  } catch (const ContractError& e) {
    send_error(res, 400, "", e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, "", e.what());
  }
}

}  // namespace

ExplainServer::ExplainServer(std::shared_ptr<const clip::ModelBundle> bundle, ServerOptions options)
    : bundle_(std::move(bundle)), options_(options), server_(std::make_unique<httplib::Server>()) {
  server_->set_payload_max_length(options_.max_upload_bytes);
  // SO_REUSEADDR only: the library default adds SO_REUSEPORT, which would let
  // a second server share a busy port instead of failing to start.
  server_->set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  });
  install_routes();
}

ExplainServer::~ExplainServer() { stop(); }

void ExplainServer::install_routes() {
  const auto bundle = bundle_;
  server_->Get("/health", [bundle](const httplib::Request&, httplib::Response& res) {
    const json body = {{"status", "ok"},
                       {"model_id", bundle->model_id},
                       {"vision_layers", bundle->config().vision_layers},
                       {"text_layers", bundle->config().text_layers}};
    res.set_content(body.dump(), kJson);
  });
  const std::size_t limit = options_.max_upload_bytes;
  server_->Get("/model", [bundle, limit](const httplib::Request&, httplib::Response& res) {
    const json body = {{"model_id", bundle->model_id},
                       {"hash", bundle->content_hash},
                       {"config", bundle->config().to_json()},
                       {"methods", {"grad-eclip", "raw-attention", "rollout", "grad-cam"}},
                       {"lambda_modes", {"loosened", "softmax", "ones"}},
                       {"head_modes", {"single", "multi"}},
                       {"colormaps", {"jet", "gray"}},
                       {"max_upload_bytes", limit}};
    res.set_content(body.dump(), kJson);
  });
  server_->Post("/explain", [bundle](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto start = std::chrono::steady_clock::now();
      ExplainRequest r = parse_explain_options(form_json(req, "options"));
      r.image = upload_image(req);
      validate_request(r, *bundle);
      json body = explain_response(*bundle, r, run_explain(*bundle, r));
      body["timing_ms"] =
          std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      res.set_content(body.dump(), kJson);
    });
  });
  server_->Post("/score", [bundle](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const json texts = form_json(req, "texts");
      if (!texts.is_array() || texts.empty()) throw RequestError("texts", "expected a non-empty array of strings");
      std::vector<std::string> list;
      for (std::size_t i = 0; i < texts.size(); ++i) {
        const std::string f = "texts[" + std::to_string(i) + "]";
        if (!texts[i].is_string()) throw RequestError(f, "expected a string");
        list.push_back(texts[i].get<std::string>());
        if (clip::clean_text(list.back()).empty()) throw RequestError(f, "text is empty");
      }
      const clip::Image image = upload_image(req);
      json body = {{"model_id", bundle->model_id}, {"texts", list}, {"scores", score_texts(*bundle, image, list)}};
      res.set_content(body.dump(), kJson);
    });
  });
  server_->set_error_handler([limit](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
    if (res.status == 413) {
      send_error(res, 413, "body", "upload exceeds " + std::to_string(limit) + " bytes");
    } else if (res.status == 404) {
      send_error(res, 404, "path", "no such endpoint");
    } else {
      send_error(res, res.status, "", httplib::status_message(res.status));
    }
    return httplib::Server::HandlerResponse::Handled;
  });
}

bool ExplainServer::listen(const std::string& host, int port) { return server_->listen(host, port); }

int ExplainServer::bind(const std::string& host, int port) {
  if (port == 0) return server_->bind_to_any_port(host);
  return server_->bind_to_port(host, port) ? port : -1;
}

bool ExplainServer::run() { return server_->listen_after_bind(); }

void ExplainServer::wait_until_ready() const { server_->wait_until_ready(); }

void ExplainServer::stop() {
  if (server_) server_->stop();
}

}  // namespace geclip::service
