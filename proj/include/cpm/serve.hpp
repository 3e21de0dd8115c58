#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "cpm/config.hpp"
#include "cpm/eval.hpp"
#include "cpm/protocol.hpp"

// Live episode server and log replay over the length-prefixed JSON socket
// protocol (see protocol.hpp). One thread runs the simulation and services
// every socket with non-blocking poll() between steps, so client IO never
// stalls the episode and commands are applied only at step boundaries.
namespace cpm::serve {

struct Endpoint {
  std::string host = "127.0.0.1";
  int port = 7878;
};
// "host:port", ":port" or "port".
Endpoint parse_endpoint(std::string_view text);

struct ServeOptions {
  std::string bind = "127.0.0.1:7878";
  std::uint64_t seed = 0;
  double steps_per_second = 10.0;
  double speed = 1.0;
  bool start_paused = false;
  bool wait_for_client = false;  // hold the first step until someone connects
  std::int64_t max_episodes = 0;  // 0 runs until stopped
  std::size_t max_backlog_bytes = 8u << 20;  // per client
  std::vector<std::string> oracle_subset;
  game::ShiftConfig shift;
  std::ostream* log = nullptr;  // NDJSON copy of every frame
};

struct ServeStats {
  std::int64_t frames = 0;
  std::int64_t episodes = 0;
  std::int64_t clients_accepted = 0;
  std::int64_t clients_dropped = 0;  // over backlog
  std::int64_t commands = 0;
  std::int64_t errors = 0;
};

class Server {
 public:
  // Live episodes from a trained model. Binding happens here; IoError on failure.
  Server(const policy::ConceptPolicy& model, const ExperimentConfig& config, ServeOptions options);
  // Re-emits recorded frame lines verbatim; no policy runs.
  static Server replay(std::vector<std::string> frames, ServeOptions options);
  Server(Server&&) noexcept;
  Server& operator=(Server&&) noexcept;
  ~Server();

  int port() const;
  // Blocks until request_stop(), max_episodes, or the end of a replay.
  ServeStats run();
  void request_stop();  // callable from any thread

 private:
  struct Impl;
  explicit Server(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

// Reads an NDJSON episode log. Every non-empty line must be a frame message
// ordered by (episode, t); otherwise ParseError names the first bad line.
std::vector<std::string> load_log(const std::filesystem::path& path);
std::vector<std::string> read_log(std::istream& in);

// Writes frames to `out` paced at steps_per_second * speed; speed <= 0
// disables pacing.
void replay_to_stream(const std::vector<std::string>& frames, std::ostream& out, double speed,
                      double steps_per_second = 10.0);

// Blocking client used by tests and tools.
class Client {
 public:
  Client(const std::string& host, int port, std::chrono::milliseconds timeout = std::chrono::seconds(10));
  Client(Client&&) noexcept;
  Client& operator=(Client&&) noexcept;
  ~Client();

  void send(const json& message);
  void send_raw(const std::string& bytes);
  // Next message, or nullopt when the server closed the connection.
  // Throws IoError on timeout.
  std::optional<json> receive(std::chrono::milliseconds timeout = std::chrono::seconds(30));
  // Same, as the raw payload text.
  std::optional<std::string> receive_payload(std::chrono::milliseconds timeout = std::chrono::seconds(30));
  void close();

 private:
  int fd_ = -1;
  std::string buffer_;
};

}  // namespace cpm::serve
