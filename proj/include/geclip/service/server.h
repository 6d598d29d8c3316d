#pragma once

#include <cstddef>
#include <memory>
#include <string>

#include "geclip/clip/model.h"

namespace httplib {
class Server;
}

namespace geclip::service {

struct ServerOptions {
  std::size_t max_upload_bytes = 16u << 20;
};

// HTTP front end over one immutable bundle:
//   GET  /health   {status, model_id, vision_layers, text_layers}
//   GET  /model    model identity, config and supported options
//   POST /explain  multipart: "image" file + "options" JSON document
//   POST /score    multipart: "image" file + "texts" JSON array of strings
// Errors carry {"error": {"status", "field", "message"}}.
class ExplainServer {
 public:
  ExplainServer(std::shared_ptr<const clip::ModelBundle> bundle, ServerOptions options = {});
  ~ExplainServer();
  ExplainServer(const ExplainServer&) = delete;
  ExplainServer& operator=(const ExplainServer&) = delete;

  // Binds and serves until stop(); false when the address cannot be bound.
  bool listen(const std::string& host, int port);
  // Binds without serving and returns the bound port (port 0 picks a free
  // one), or -1 on failure. Serve with run().
  int bind(const std::string& host, int port);
  bool run();
  void wait_until_ready() const;
  // Stops accepting connections and lets in-flight requests finish.
  void stop();

 private:
  void install_routes();

  std::shared_ptr<const clip::ModelBundle> bundle_;
  ServerOptions options_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace geclip::service
