// SPDX-License-Identifier: Apache-2.0
#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <fstream>
#include <iostream>

#include "failnet/manager.hpp"

namespace failnet::manager {

namespace {

constexpr std::size_t kMaxLine = 4096;
constexpr int kPollMs = 100;

std::runtime_error sys_error(const std::string& what) { return std::runtime_error(what + ": " + std::strerror(errno)); }

bool send_all(int fd, const std::string& data) {
  std::size_t off = 0;
  while (off < data.size()) {
    const ssize_t n = ::send(fd, data.data() + off, data.size() - off, MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return false;
    off += static_cast<std::size_t>(n);
  }
  return true;
}

}  // namespace

struct Server::Client {
  int fd = -1;
  std::mutex write_mu;
  std::thread thread;
  std::atomic<bool> open{true};
};

Server::Server(ManagerConfig cfg, Detector det) : mgr_(std::move(cfg), std::move(det)) {
  const auto& path = mgr_.config().event_log;
  if (!path.empty()) {
    auto f = std::make_unique<std::ofstream>(path);
    if (!*f) throw InvalidInput("cannot open event log " + path);
    log_ = std::move(f);
  }
}

Server::~Server() { stop(); }

void Server::start() {
  if (running_) return;
  const auto& cfg = mgr_.config();
  listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listen_fd_ < 0) throw sys_error("socket");
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(cfg.port));
  if (::inet_pton(AF_INET, cfg.host.c_str(), &addr.sin_addr) != 1) {
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw InvalidInput("manager: host must be an IPv4 address, got '" + cfg.host + "'");
  }
  if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0 || ::listen(listen_fd_, 16) < 0) {
    auto err = sys_error("bind/listen on " + cfg.host + ":" + std::to_string(cfg.port));
    ::close(listen_fd_);
    listen_fd_ = -1;
    throw err;
  }
  socklen_t len = sizeof addr;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  running_ = true;
  accept_thread_ = std::thread([this] { accept_loop(); });
}

void Server::accept_loop() {
  while (running_) {
    pollfd p{listen_fd_, POLLIN, 0};
    const int r = ::poll(&p, 1, kPollMs);
    if (r <= 0 || !(p.revents & POLLIN)) continue;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    auto c = std::make_shared<Client>();
    c->fd = fd;
    std::lock_guard lock(mu_);
    std::erase_if(clients_, [](const std::shared_ptr<Client>& old) {
      if (old->open) return false;
      if (old->thread.joinable()) old->thread.join();
      ::close(old->fd);
      return true;
    });
    clients_.push_back(c);
    c->thread = std::thread([this, c] { client_loop(c); });
  }
}

void Server::send_line(Client& c, const std::string& line) {
  std::lock_guard lock(c.write_mu);
  if (c.open && !send_all(c.fd, line + '\n')) c.open = false;
}

void Server::write_log(const std::vector<std::string>& lines) {
  logged_evaluations_ += lines.size();
  if (!log_) return;
  for (const auto& l : lines) *log_ << l << '\n';
  log_->flush();
}

void Server::client_loop(std::shared_ptr<Client> c) {
  std::string buf;
  char chunk[1024];
  bool discarding = false;
  while (running_ && c->open) {
    pollfd p{c->fd, POLLIN, 0};
    const int r = ::poll(&p, 1, kPollMs);
    if (r == 0) continue;
    if (r < 0) {
      if (errno == EINTR) continue;
      break;
    }
    const ssize_t n = ::recv(c->fd, chunk, sizeof chunk, 0);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) break;
    buf.append(chunk, static_cast<std::size_t>(n));
    std::size_t nl;
    while ((nl = buf.find('\n')) != std::string::npos) {
      std::string line = buf.substr(0, nl);
      buf.erase(0, nl + 1);
      if (discarding) {
        discarding = false;
        continue;
      }
      std::vector<std::pair<std::shared_ptr<Client>, std::string>> outbox;
      {
        std::lock_guard lock(mu_);
        auto out = mgr_.handle_line(line);
        if (out.replies.empty()) {
          if (auto msg = parse_message(line); const auto* pose = std::get_if<PoseMsg>(&msg))
            routes_[pose->vehicle_id] = c;
        }
        for (const auto& m : out.replies) outbox.emplace_back(c, format_message(m));
        for (const auto& w : out.warnings)
          if (auto it = routes_.find(w.target_id); it != routes_.end())
            if (auto target = it->second.lock()) outbox.emplace_back(target, format_message(w));
        write_log(mgr_.take_log_lines());
      }
      for (auto& [target, text] : outbox) send_line(*target, text);
    }
    if (buf.size() > kMaxLine) {
      send_line(*c, format_message(ErrMsg{kErrParse, "line too long"}));
      buf.clear();
      discarding = true;
    }
  }
  c->open = false;
}

void Server::heartbeat() {
  std::lock_guard lock(mu_);
  std::size_t live = 0;
  for (const auto& c : clients_) live += c->open ? 1 : 0;
  if (!log_) return;
  *log_ << "# heartbeat clients=" << live << " sessions=" << mgr_.sessions().size()
        << " evaluations=" << logged_evaluations_ << " stream_time=" << fmt9(std::max(mgr_.stream_time(), 0.0))
        << '\n';
  log_->flush();
}

std::size_t Server::evaluation_count() {
  std::lock_guard lock(mu_);
  return logged_evaluations_;
}

void Server::stop() {
  if (!running_.exchange(false)) return;
  if (accept_thread_.joinable()) accept_thread_.join();
  if (listen_fd_ >= 0) ::close(listen_fd_);
  listen_fd_ = -1;
  std::vector<std::shared_ptr<Client>> clients;
  {
    std::lock_guard lock(mu_);
    clients.swap(clients_);
  }
  for (auto& c : clients) {
    ::shutdown(c->fd, SHUT_RDWR);
    if (c->thread.joinable()) c->thread.join();
    ::close(c->fd);
  }
  std::lock_guard lock(mu_);
  if (log_) log_->flush();
}

// ---------------------------------------------------------------------------

LineClient::LineClient(const std::string& host, int port) {
  fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
  if (fd_ < 0) throw sys_error("socket");
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
    ::close(fd_);
    throw InvalidInput("client: host must be an IPv4 address");
  }
  if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0) {
    auto err = sys_error("connect to " + host + ":" + std::to_string(port));
    ::close(fd_);
    throw err;
  }
  const int one = 1;
  ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

LineClient::~LineClient() {
  if (fd_ >= 0) ::close(fd_);
}

void LineClient::send(const std::string& line) {
  if (!send_all(fd_, line + '\n')) throw sys_error("send");
}

std::optional<std::string> LineClient::read_line(double timeout_seconds) {
  using clock = std::chrono::steady_clock;
  const auto deadline = clock::now() + std::chrono::duration<double>(timeout_seconds);
  for (;;) {
    if (auto nl = buf_.find('\n'); nl != std::string::npos) {
      std::string line = buf_.substr(0, nl);
      buf_.erase(0, nl + 1);
      return line;
    }
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - clock::now()).count();
    if (left <= 0) return std::nullopt;
    pollfd p{fd_, POLLIN, 0};
    const int r = ::poll(&p, 1, static_cast<int>(left));
    if (r < 0 && errno == EINTR) continue;
    if (r <= 0) return std::nullopt;
    char chunk[1024];
    const ssize_t n = ::recv(fd_, chunk, sizeof chunk, 0);
    if (n <= 0) return std::nullopt;
    buf_.append(chunk, static_cast<std::size_t>(n));
  }
}

}  // namespace failnet::manager
