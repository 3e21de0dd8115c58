#include "cpm/serve.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <thread>

#include "cpm/errors.hpp"

namespace cpm::serve {

using Clock = std::chrono::steady_clock;

Endpoint parse_endpoint(std::string_view text) {
  Endpoint e;
  std::string_view port = text;
  const std::size_t colon = text.rfind(':');
  if (colon != std::string_view::npos) {
    if (colon > 0) e.host = std::string(text.substr(0, colon));
    port = text.substr(colon + 1);
  }
  if (port.empty() || port.size() > 5 || !std::all_of(port.begin(), port.end(), [](char c) { return c >= '0' && c <= '9'; }))
    throw UsageError("bad bind address '" + std::string(text) + "' (expected host:port)");
  e.port = std::stoi(std::string(port));
  if (e.port > 65535) throw UsageError("port out of range in '" + std::string(text) + "'");
  return e;
}

namespace {

std::string errno_text() { return std::strerror(errno); }

void set_nonblocking(int fd) {
  const int flags = fcntl(fd, F_GETFL, 0);
  if (flags < 0 || fcntl(fd, F_SETFL, flags | O_NONBLOCK) < 0) throw IoError("fcntl: " + errno_text());
}

addrinfo* resolve(const Endpoint& e, bool passive) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(e.port);
  const int rc = getaddrinfo(e.host.empty() ? nullptr : e.host.c_str(), port.c_str(), &hints, &res);
  if (rc != 0) throw IoError("cannot resolve '" + e.host + "': " + gai_strerror(rc));
  return res;
}

int listen_on(const Endpoint& e, int& bound_port) {
  addrinfo* res = resolve(e, true);
  int fd = -1;
  std::string last = "no address";
  for (addrinfo* a = res; a != nullptr; a = a->ai_next) {
    fd = socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd < 0) {
      last = errno_text();
      continue;
    }
    const int one = 1;
    setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (bind(fd, a->ai_addr, a->ai_addrlen) == 0 && listen(fd, 16) == 0) break;
    last = errno_text();
    ::close(fd);
    fd = -1;
  }
  freeaddrinfo(res);
  if (fd < 0) throw IoError("cannot bind " + e.host + ":" + std::to_string(e.port) + ": " + last);
  sockaddr_storage ss{};
  socklen_t len = sizeof ss;
  getsockname(fd, reinterpret_cast<sockaddr*>(&ss), &len);
  bound_port = ss.ss_family == AF_INET6 ? ntohs(reinterpret_cast<sockaddr_in6*>(&ss)->sin6_port)
                                        : ntohs(reinterpret_cast<sockaddr_in*>(&ss)->sin_port);
  set_nonblocking(fd);
  return fd;
}

struct Connection {
  std::uint64_t id = 0;
  int fd = -1;
  std::string in;
  std::string out;
  std::size_t sent = 0;
  bool closing = false;  // flush then close
  bool dead = false;
  std::size_t pending() const { return out.size() - sent; }
};

struct ReplayFrame {
  std::string text;
  std::uint64_t episode = 0;
  int t = 0;
};

bool is_frame_line(const std::string& line, std::size_t number, std::uint64_t& episode, int& t) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("unreadable record: ") + e.what(), number);
  }
  if (!j.is_object() || j.value("type", "") != "frame" || !j.contains("episode") || !j.contains("t") ||
      !j["episode"].is_number_unsigned() || !j["t"].is_number_integer())
    throw ParseError("not a frame record", number);
  episode = j["episode"].get<std::uint64_t>();
  t = j["t"].get<int>();
  return true;
}

}  // namespace

struct Server::Impl {
  ServeOptions options;
  int listen_fd = -1;
  int port = 0;
  std::vector<Connection> clients;
  std::uint64_t next_client_id = 1;
  std::atomic<bool> stop{false};
  ServeStats stats;

  bool paused = false;
  int step_credit = 0;
  double speed = 1.0;

  // live
  const policy::ConceptPolicy* model = nullptr;
  ExperimentConfig config;
  std::optional<eval::EpisodeRunner> runner;
  std::uint64_t episode = 0;
  bool live_done = false;

  // replay
  std::vector<ReplayFrame> frames;
  std::size_t cursor = 0;

  struct Pending {
    std::uint64_t client = 0;
    protocol::Command command;
  };
  std::vector<Pending> inbox;

  ~Impl() {
    for (Connection& c : clients)
      if (c.fd >= 0) ::close(c.fd);
    if (listen_fd >= 0) ::close(listen_fd);
  }

  bool is_replay() const { return model == nullptr; }

  void open() {
    speed = options.speed;
    if (!(speed > 0.0)) throw UsageError("serve: speed must be positive");
    listen_fd = listen_on(parse_endpoint(options.bind), port);
  }

  json hello() const {
    json info = {{"mode", is_replay() ? "replay" : "live"},
                 {"steps_per_second", options.steps_per_second},
                 {"speed", speed},
                 {"paused", paused}};
    if (is_replay()) {
      info["frames"] = frames.size();
      return {{"type", "hello"}, {"version", protocol::kProtocolVersion}, {"schema", nullptr}, {"info", info}};
    }
    info["seed"] = options.seed;
    info["episode"] = episode;
    info["slots"] = config.arena.n_per_team;
    info["config_fingerprint"] = hex64(config.fingerprint());
    info["model"] = policy::model_kind_name(model->config.kind());
    return protocol::hello_message(config.policy.schema, info);
  }

  Connection* find(std::uint64_t id) {
    for (Connection& c : clients)
      if (c.id == id && !c.dead) return &c;
    return nullptr;
  }

  void queue(Connection& c, const std::string& bytes) {
    if (c.dead || c.closing) return;
    if (c.pending() + bytes.size() > options.max_backlog_bytes) {
      c.dead = true;
      ++stats.clients_dropped;
      return;
    }
    if (c.sent > 0 && c.sent == c.out.size()) {
      c.out.clear();
      c.sent = 0;
    }
    c.out += bytes;
  }

  void reply(std::uint64_t client, const json& message) {
    if (Connection* c = find(client)) queue(*c, protocol::encode(message));
  }

  void broadcast(const std::string& bytes) {
    for (Connection& c : clients) queue(c, bytes);
  }

  void accept_clients() {
    for (;;) {
      const int fd = ::accept(listen_fd, nullptr, nullptr);
      if (fd < 0) return;
      set_nonblocking(fd);
      const int one = 1;
      setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      Connection c;
      c.id = next_client_id++;
      c.fd = fd;
      clients.push_back(std::move(c));
      ++stats.clients_accepted;
      queue(clients.back(), protocol::encode(hello()));
    }
  }

  void handle_message(Connection& c, const json& message) {
    const json id = message.is_object() && message.contains("id") ? message["id"] : json(nullptr);
    try {
      if (is_replay()) {
        const std::string name = message.is_object() ? message.value("command", "") : "";
        if (name == "set_intervention" || name == "clear_intervention" || name == "reset_episode")
          throw UsageError("command '" + name + "' is not available during replay");
        inbox.push_back({c.id, protocol::parse_command(message, {}, 0)});
      } else {
        inbox.push_back({c.id, protocol::parse_command(message, config.policy.schema, config.arena.n_per_team)});
      }
    } catch (const std::exception& e) {
      ++stats.errors;
      queue(c, protocol::encode(protocol::error_message(e.what(), id)));
    }
  }

  void read_from(Connection& c) {
    char buf[65536];
    for (;;) {
      const ssize_t n = ::recv(c.fd, buf, sizeof buf, 0);
      if (n > 0) {
        c.in.append(buf, static_cast<std::size_t>(n));
        continue;
      }
      if (n == 0) c.dead = true;
      else if (errno != EAGAIN && errno != EWOULDBLOCK && errno != EINTR) c.dead = true;
      break;
    }
    while (!c.dead && !c.closing) {
      json message;
      try {
        if (!protocol::try_decode(c.in, message)) break;
      } catch (const ParseError& e) {
        ++stats.errors;
        // An oversize prefix leaves the stream unsynchronised; malformed JSON
        // has already been consumed.
        const bool fatal = std::string(e.what()).find("exceeds") != std::string::npos;
        queue(c, protocol::encode(protocol::error_message(e.what())));
        if (fatal) c.closing = true;
        continue;
      }
      handle_message(c, message);
    }
  }

  void write_to(Connection& c) {
    while (c.pending() > 0) {
      const ssize_t n = ::send(c.fd, c.out.data() + c.sent, c.pending(), MSG_NOSIGNAL);
      if (n > 0) {
        c.sent += static_cast<std::size_t>(n);
        continue;
      }
      if (n < 0 && (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR)) return;
      c.dead = true;
      return;
    }
    c.out.clear();
    c.sent = 0;
    if (c.closing) c.dead = true;
  }

  void reap() {
    for (Connection& c : clients)
      if (c.dead && c.fd >= 0) {
        ::close(c.fd);
        c.fd = -1;
      }
    std::erase_if(clients, [](const Connection& c) { return c.fd < 0; });
  }

  // Services every socket until `deadline`.
  void service(Clock::time_point deadline) {
    do {
      std::vector<pollfd> fds;
      fds.push_back({listen_fd, POLLIN, 0});
      for (const Connection& c : clients)
        fds.push_back({c.fd, static_cast<short>(POLLIN | (c.pending() > 0 ? POLLOUT : 0)), 0});
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now()).count();
      const int rc = ::poll(fds.data(), fds.size(), static_cast<int>(std::clamp<long long>(left, 0, 50)));
      if (rc < 0 && errno != EINTR) throw IoError("poll: " + errno_text());
      if (rc > 0) {
        for (std::size_t i = 1; i < fds.size(); ++i) {
          Connection& c = clients[i - 1];
          if (fds[i].revents & (POLLERR | POLLNVAL)) c.dead = true;
          if (!c.dead && (fds[i].revents & (POLLIN | POLLHUP))) read_from(c);
          if (!c.dead && (fds[i].revents & POLLOUT)) write_to(c);
        }
        if (fds[0].revents & POLLIN) accept_clients();
      }
      for (Connection& c : clients)
        if (!c.dead && c.pending() > 0) write_to(c);
      reap();
    } while (Clock::now() < deadline && !stop.load());
  }

  int next_step() const {
    if (is_replay()) return cursor < frames.size() ? frames[cursor].t : -1;
    return runner->env().world().t;
  }
  std::uint64_t current_episode() const {
    if (is_replay()) return cursor < frames.size() ? frames[cursor].episode : 0;
    return episode;
  }

  void start_episode(std::uint64_t index, std::optional<std::uint64_t> seed) {
    episode = index;
    runner->reset(index, seed.value_or(eval::episode_seed(options.seed, index)));
  }

  void apply(const Pending& p) {
    const protocol::Command& cmd = p.command;
    ++stats.commands;
    switch (cmd.kind) {
      case protocol::CommandKind::Pause:
        paused = true;
        step_credit = 0;
        break;
      case protocol::CommandKind::Resume:
        paused = false;
        step_credit = 0;
        break;
      case protocol::CommandKind::StepOnce:
        paused = true;
        ++step_credit;
        break;
      case protocol::CommandKind::SetSpeed:
        speed = cmd.speed;
        break;
      case protocol::CommandKind::SetIntervention:
        runner->set_manual(cmd.slot, cmd.intervention);
        break;
      case protocol::CommandKind::ClearIntervention:
        runner->clear_manual(cmd.slot);
        break;
      case protocol::CommandKind::ResetEpisode:
        start_episode(episode + 1, cmd.seed);
        break;
    }
    reply(p.client, protocol::ack_message(cmd, current_episode(), next_step()));
  }

  void drain() {
    std::vector<Pending> batch;
    batch.swap(inbox);
    for (const Pending& p : batch) {
      try {
        apply(p);
      } catch (const std::exception& e) {
        ++stats.errors;
        reply(p.client, protocol::error_message(e.what(), p.command.id));
      }
    }
  }

  bool finished() const { return is_replay() ? cursor >= frames.size() : live_done; }

  void emit() {
    std::string line;
    if (is_replay()) {
      line = frames[cursor++].text;
    } else {
      const eval::Frame f = runner->next();
      line = protocol::frame_to_json(f, config.policy.schema).dump();
      if (f.terminal) {
        ++stats.episodes;
        if (options.max_episodes > 0 && stats.episodes >= options.max_episodes) live_done = true;
        else start_episode(episode + 1, std::nullopt);
      }
    }
    ++stats.frames;
    if (options.log != nullptr) *options.log << line << '\n';
    broadcast(protocol::encode_payload(line));
  }

  Clock::duration period() const {
    const double rate = options.steps_per_second * speed;
    if (!(rate > 0.0)) return Clock::duration::zero();
    return std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(1.0 / rate));
  }

  ServeStats run() {
    paused = options.start_paused;
    if (options.wait_for_client)
      while (clients.empty() && !stop.load()) service(Clock::now() + std::chrono::milliseconds(50));
    Clock::time_point next = Clock::now();
    while (!stop.load() && !finished()) {
      const bool can_step = !paused || step_credit > 0;
      service(can_step ? next : Clock::now() + std::chrono::milliseconds(50));
      drain();
      if (stop.load() || finished()) break;
      if (paused && step_credit == 0) {
        next = Clock::now();
        continue;
      }
      if (Clock::now() < next) continue;
      emit();
      if (paused && step_credit > 0) --step_credit;
      next += period();
      if (next < Clock::now() - period()) next = Clock::now();
    }
    // Give connected clients a chance to drain what was already queued.
    const Clock::time_point give_up = Clock::now() + std::chrono::seconds(5);
    while (Clock::now() < give_up &&
           std::any_of(clients.begin(), clients.end(), [](const Connection& c) { return c.pending() > 0; }))
      service(Clock::now() + std::chrono::milliseconds(10));
    return stats;
  }
};

Server::Server(const policy::ConceptPolicy& model, const ExperimentConfig& config, ServeOptions options)
    : impl_(std::make_unique<Impl>()) {
  config.validate();
  impl_->options = std::move(options);
  impl_->model = &model;
  impl_->config = config;
  eval::RunnerOptions ro;
  ro.oracle_subset = impl_->options.oracle_subset;
  ro.shift = impl_->options.shift;
  impl_->runner.emplace(&model, config, ro);
  impl_->start_episode(0, std::nullopt);
  impl_->open();
}

Server::Server(std::unique_ptr<Impl> impl) : impl_(std::move(impl)) {}

Server Server::replay(std::vector<std::string> frames, ServeOptions options) {
  auto impl = std::make_unique<Impl>();
  impl->options = std::move(options);
  for (std::size_t i = 0; i < frames.size(); ++i) {
    ReplayFrame f;
    is_frame_line(frames[i], i + 1, f.episode, f.t);
    f.text = std::move(frames[i]);
    impl->frames.push_back(std::move(f));
  }
  impl->open();
  return Server(std::move(impl));
}

Server::Server(Server&&) noexcept = default;
Server& Server::operator=(Server&&) noexcept = default;
Server::~Server() = default;

int Server::port() const { return impl_->port; }
ServeStats Server::run() { return impl_->run(); }
void Server::request_stop() { impl_->stop.store(true); }

std::vector<std::string> read_log(std::istream& in) {
  std::vector<std::string> out;
  std::string line;
  std::size_t number = 0;
  std::uint64_t last_episode = 0;
  int last_t = -1;
  while (std::getline(in, line)) {
    ++number;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::uint64_t episode = 0;
    int t = 0;
    is_frame_line(line, number, episode, t);
    if (!out.empty() && (episode < last_episode || (episode == last_episode && t <= last_t)))
      throw ParseError("frame out of order", number);
    last_episode = episode;
    last_t = t;
    out.push_back(std::move(line));
  }
  return out;
}

std::vector<std::string> load_log(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open log " + path.string());
  return read_log(in);
}

void replay_to_stream(const std::vector<std::string>& frames, std::ostream& out, double speed,
                      double steps_per_second) {
  const double rate = steps_per_second * speed;
  const Clock::time_point start = Clock::now();
  for (std::size_t i = 0; i < frames.size(); ++i) {
    if (rate > 0.0)
      std::this_thread::sleep_until(start + std::chrono::duration_cast<Clock::duration>(
                                                std::chrono::duration<double>(static_cast<double>(i) / rate)));
    out << frames[i] << '\n';
    out.flush();
  }
}

Client::Client(const std::string& host, int port, std::chrono::milliseconds timeout) {
  addrinfo* res = resolve({host, port}, false);
  std::string last = "no address";
  const Clock::time_point give_up = Clock::now() + timeout;
  do {
    for (addrinfo* a = res; a != nullptr && fd_ < 0; a = a->ai_next) {
      const int fd = socket(a->ai_family, a->ai_socktype, a->ai_protocol);
      if (fd < 0) continue;
      if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) {
        fd_ = fd;
      } else {
        last = errno_text();
        ::close(fd);
      }
    }
    if (fd_ < 0) std::this_thread::sleep_for(std::chrono::milliseconds(20));
  } while (fd_ < 0 && Clock::now() < give_up);
  freeaddrinfo(res);
  if (fd_ < 0) throw IoError("cannot connect to " + host + ":" + std::to_string(port) + ": " + last);
  const int one = 1;
  setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

Client::Client(Client&& o) noexcept : fd_(std::exchange(o.fd_, -1)), buffer_(std::move(o.buffer_)) {}
Client& Client::operator=(Client&& o) noexcept {
  if (this != &o) {
    close();
    fd_ = std::exchange(o.fd_, -1);
    buffer_ = std::move(o.buffer_);
  }
  return *this;
}
Client::~Client() { close(); }

void Client::close() {
  if (fd_ >= 0) ::close(fd_);
  fd_ = -1;
}

void Client::send_raw(const std::string& bytes) {
  std::size_t done = 0;
  while (done < bytes.size()) {
    const ssize_t n = ::send(fd_, bytes.data() + done, bytes.size() - done, MSG_NOSIGNAL);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw IoError("send: " + errno_text());
    }
    done += static_cast<std::size_t>(n);
  }
}

void Client::send(const json& message) { send_raw(protocol::encode(message)); }

std::optional<std::string> Client::receive_payload(std::chrono::milliseconds timeout) {
  const Clock::time_point give_up = Clock::now() + timeout;
  for (;;) {
    if (buffer_.size() >= 4) {
      const auto b = [&](int i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(buffer_[i])); };
      const std::uint32_t n = (b(0) << 24) | (b(1) << 16) | (b(2) << 8) | b(3);
      if (n > protocol::kMaxMessageBytes) throw ParseError("client: oversize message");
      if (buffer_.size() >= 4 + static_cast<std::size_t>(n)) {
        std::string payload = buffer_.substr(4, n);
        buffer_.erase(0, 4 + static_cast<std::size_t>(n));
        return payload;
      }
    }
    if (fd_ < 0) return std::nullopt;
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(give_up - Clock::now()).count();
    if (left <= 0) throw IoError("client: timed out waiting for a message");
    pollfd p{fd_, POLLIN, 0};
    const int rc = ::poll(&p, 1, static_cast<int>(left));
    if (rc < 0 && errno != EINTR) throw IoError("poll: " + errno_text());
    if (rc <= 0) continue;
    char buf[65536];
    const ssize_t n = ::recv(fd_, buf, sizeof buf, 0);
    if (n > 0) {
      buffer_.append(buf, static_cast<std::size_t>(n));
    } else if (n == 0) {
      close();
    } else if (errno != EINTR && errno != EAGAIN) {
      throw IoError("recv: " + errno_text());
    }
  }
}

std::optional<json> Client::receive(std::chrono::milliseconds timeout) {
  std::optional<std::string> p = receive_payload(timeout);
  if (!p) return std::nullopt;
  return json::parse(*p);
}

}  // namespace cpm::serve
