// SPDX-License-Identifier: Apache-2.0
#include "zobridge/subprocess_stage.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <thread>

#include <json.hpp>

extern char** environ;

namespace zobridge {

namespace {

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Fd& operator=(Fd&& o) noexcept {
    reset();
    fd_ = std::exchange(o.fd_, -1);
    return *this;
  }
  ~Fd() { reset(); }
  int get() const { return fd_; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

/// Accumulates bytes from one descriptor and hands out complete lines.
struct LineReader {
  Fd fd;
  std::string buffer;
  bool eof = false;

  bool pop_line(std::string& line) {
    const auto nl = buffer.find('\n');
    if (nl == std::string::npos) return false;
    line = buffer.substr(0, nl);
    buffer.erase(0, nl + 1);
    return true;
  }

  void fill() {
    char chunk[4096];
    const ssize_t n = ::read(fd.get(), chunk, sizeof chunk);
    if (n > 0)
      buffer.append(chunk, static_cast<std::size_t>(n));
    else if (n == 0)
      eof = true;
    else if (errno != EINTR && errno != EAGAIN)
      throw BackendError(errno_text("read from worker"));
  }
};

Vec parse_array(const std::string& line, Index expected, const std::string& who) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(who + ": malformed response '" + line + "': " + e.what());
  }
  if (!j.is_array()) throw BackendError(who + ": response is not a JSON array");
  if (static_cast<Index>(j.size()) != expected)
    throw BackendError(who + ": response has " + std::to_string(j.size()) + " values, expected " +
                       std::to_string(expected));
  Vec out(expected);
  for (Index i = 0; i < expected; ++i) {
    if (!j[i].is_number()) throw BackendError(who + ": non-numeric response entry");
    out(i) = j[i].get<double>();
  }
  return out;
}

std::string to_json_array(const Vec& v) {
  nlohmann::json j = nlohmann::json::array();
  for (Index i = 0; i < v.size(); ++i) j.push_back(v(i));
  return j.dump();
}

}  // namespace

struct SubprocessStage::Worker {
  pid_t pid = -1;
  Fd in;  // our end of the worker's stdin (socket, so writes never raise SIGPIPE)
  LineReader out;
  LineReader err;

  ~Worker() {
    in.reset();
    if (pid <= 0) return;
    for (int i = 0; i < 50; ++i) {
      if (::waitpid(pid, nullptr, WNOHANG) == pid) return;
      std::this_thread::sleep_for(std::chrono::milliseconds(2));
    }
    ::kill(pid, SIGKILL);
    ::waitpid(pid, nullptr, 0);
  }

  void send(const std::string& line) {
    std::size_t done = 0;
    while (done < line.size()) {
      const ssize_t n = ::send(in.get(), line.data() + done, line.size() - done, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw BackendError(errno_text("write to worker"));
      }
      done += static_cast<std::size_t>(n);
    }
  }

  /// Next stdout line. Throws BackendError with the worker's diagnostic if
  /// a stderr line arrives first.
  std::string receive(std::chrono::milliseconds timeout, const std::string& who) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    std::string line;
    while (true) {
      if (err.pop_line(line)) throw BackendError(who + ": worker reported: " + line);
      if (out.pop_line(line)) return line;
      if (out.eof) {
        if (!err.buffer.empty()) throw BackendError(who + ": worker reported: " + err.buffer);
        throw BackendError(who + ": worker closed its output");
      }
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) throw BackendError(who + ": worker timed out");
      pollfd fds[2] = {{out.fd.get(), POLLIN, 0}, {err.eof ? -1 : err.fd.get(), POLLIN, 0}};
      const int rc = ::poll(fds, 2, static_cast<int>(left.count()));
      if (rc < 0 && errno != EINTR) throw BackendError(errno_text("poll"));
      // Drain stderr first so a diagnostic wins over a racing stdout line.
      if (fds[1].revents & (POLLIN | POLLHUP)) err.fill();
      if (fds[0].revents & (POLLIN | POLLHUP)) out.fill();
    }
  }
};

SubprocessStage::SubprocessStage(std::vector<std::string> argv, Options options)
    : argv_(std::move(argv)), options_(std::move(options)) {
  if (argv_.empty()) throw InvalidArgument("SubprocessStage: empty command");
  if (options_.pool_size < 1) throw InvalidArgument("SubprocessStage: pool size must be >= 1");
  auto first = spawn();
  std::string hello = first->receive(options_.timeout, label());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(hello);
    in_ = j.at("in").get<Index>();
    out_ = j.at("out").get<Index>();
    params_ = j.at("params").get<Index>();
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(label() + ": bad handshake '" + hello + "': " + e.what());
  }
  if (in_ < 1 || out_ < 1 || params_ < 0) throw BackendError(label() + ": handshake widths out of range");
  if (params_ > 0 && options_.block.empty())
    throw InvalidArgument(label() + ": worker takes parameters; a block name is required");
  workers_.push_back(std::move(first));
  for (std::size_t i = 1; i < options_.pool_size; ++i) {
    auto w = spawn();
    if (w->receive(options_.timeout, label()) != hello)
      throw BackendError(label() + ": pool workers disagree on handshake");
    workers_.push_back(std::move(w));
  }
  busy_.assign(workers_.size(), false);
}

SubprocessStage::~SubprocessStage() = default;

std::vector<BlockSpec> SubprocessStage::param_specs() const {
  if (params_ == 0) return {};
  return {{options_.block, params_}};
}

std::size_t SubprocessStage::restarts() const {
  std::lock_guard lock(mutex_);
  return restarts_;
}

std::unique_ptr<SubprocessStage::Worker> SubprocessStage::spawn() const {
  int in_pair[2], out_pipe[2], err_pipe[2];
  if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, in_pair) != 0) throw BackendError(errno_text("socketpair"));
  Fd in_ours(in_pair[0]), in_theirs(in_pair[1]);
  if (::pipe2(out_pipe, O_CLOEXEC) != 0) throw BackendError(errno_text("pipe"));
  Fd out_ours(out_pipe[0]), out_theirs(out_pipe[1]);
  if (::pipe2(err_pipe, O_CLOEXEC) != 0) throw BackendError(errno_text("pipe"));
  Fd err_ours(err_pipe[0]), err_theirs(err_pipe[1]);

  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_adddup2(&actions, in_theirs.get(), STDIN_FILENO);
  posix_spawn_file_actions_adddup2(&actions, out_theirs.get(), STDOUT_FILENO);
  posix_spawn_file_actions_adddup2(&actions, err_theirs.get(), STDERR_FILENO);

  std::vector<char*> args;
  for (const auto& a : argv_) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);

  auto w = std::make_unique<Worker>();
  const int rc = ::posix_spawnp(&w->pid, args[0], &actions, nullptr, args.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  if (rc != 0) {
    w->pid = -1;
    throw BackendError("cannot start worker '" + argv_[0] + "': " + std::strerror(rc));
  }
  w->in = std::move(in_ours);
  w->out.fd = std::move(out_ours);
  w->err.fd = std::move(err_ours);
  return w;
}

SubprocessStage::Worker& SubprocessStage::acquire() const {
  std::unique_lock lock(mutex_);
  while (true) {
    for (std::size_t i = 0; i < workers_.size(); ++i) {
      if (!busy_[i]) {
        busy_[i] = true;
        return *workers_[i];
      }
    }
    available_.wait(lock);
  }
}

void SubprocessStage::release(Worker& w) const {
  {
    std::lock_guard lock(mutex_);
    for (std::size_t i = 0; i < workers_.size(); ++i)
      if (workers_[i].get() == &w) busy_[i] = false;
  }
  available_.notify_one();
}

Vec SubprocessStage::do_forward(const Vec& x, Params params) const {
  std::string request = to_json_array(x);
  if (params_ > 0) request += " " + to_json_array(params[0]);
  request += "\n";

  Worker& w = acquire();
  try {
    w.send(request);
    Vec y = parse_array(w.receive(options_.timeout, label()), out_, label());
    release(w);
    return y;
  } catch (const BackendError&) {
    // The worker's stream position is unknown after a failed query; replace it.
    std::unique_ptr<Worker> fresh;
    try {
      fresh = spawn();
      fresh->receive(options_.timeout, label());
    } catch (const BackendError&) {
      fresh.reset();
    }
    {
      std::lock_guard lock(mutex_);
      for (std::size_t i = 0; i < workers_.size(); ++i) {
        if (workers_[i].get() == &w) {
          if (fresh) {
            workers_[i] = std::move(fresh);
            ++restarts_;
          }
          busy_[i] = false;
        }
      }
    }
    available_.notify_one();
    throw;
  }
}

}  // namespace zobridge
