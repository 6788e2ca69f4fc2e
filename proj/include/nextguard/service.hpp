#ifndef NEXTGUARD_SERVICE_HPP
#define NEXTGUARD_SERVICE_HPP

// Sidecar service. A Connection turns request lines into response lines and
// owns its sessions; transports (stdio, unix socket, tcp) move lines between
// file descriptors and connections, one thread per connection. Frames of one
// connection are handled strictly in order, so every response is written
// before the next request is read.

#include <atomic>
#include <cerrno>
#include <cstring>
#include <cstdint>
#include <filesystem>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <thread>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <nlohmann/json.hpp>

#include <nextguard/activations.hpp>
#include <nextguard/error.hpp>
#include <nextguard/monitor.hpp>
#include <nextguard/protocol.hpp>
#include <nextguard/sae.hpp>

namespace nextguard {

struct ServiceConfig {
    /// Open sessions across all connections.
    std::size_t max_sessions = 1024;
    /// Tokens accepted per session.
    std::size_t token_cap = 1u << 20;
    /// Longest accepted line, newline excluded.
    std::size_t max_frame_bytes = 1u << 20;
    /// Base directory for hidden_state_ref paths.
    std::filesystem::path reference_dir = ".";
};

/// Immutable scoring state shared by every connection, plus the session count.
class Service {
public:
    Service(SaeParams params, MonitorConfig monitor, ServiceConfig cfg = {})
        : params_(std::move(params)), monitor_(std::move(monitor)), cfg_(std::move(cfg))
    {
        validate_config(monitor_, params_);
        require(cfg_.max_sessions >= 1 && cfg_.token_cap >= 1 && cfg_.max_frame_bytes >= 1,
                ErrorCode::InvalidArgument, "service caps must be positive");
    }

    const SaeParams &params() const noexcept { return params_; }
    const MonitorConfig &monitor() const noexcept { return monitor_; }
    const ServiceConfig &config() const noexcept { return cfg_; }
    std::size_t open_sessions() const noexcept { return sessions_.load(); }

    bool acquire_session() noexcept
    {
        auto n = sessions_.load();
        while (n < cfg_.max_sessions) {
            if (sessions_.compare_exchange_weak(n, n + 1)) {
                return true;
            }
        }
        return false;
    }

    void release_session() noexcept { sessions_.fetch_sub(1); }

private:
    SaeParams params_;
    MonitorConfig monitor_;
    ServiceConfig cfg_;
    std::atomic<std::size_t> sessions_{0};
};

class Connection {
public:
    explicit Connection(Service &service) : service_(service) {}
    Connection(const Connection &) = delete;
    Connection &operator=(const Connection &) = delete;

    ~Connection()
    {
        for (std::size_t i = 0; i < sessions_.size(); ++i) {
            service_.release_session();
        }
    }

    /// Response frames (newline-terminated) for one request line.
    std::string handle_line(std::string_view line)
    {
        if (!line.empty() && line.back() == '\r') {
            line.remove_suffix(1);
        }
        try {
            return std::visit([this](auto &&req) { return handle(std::move(req)); }, protocol::parse_request(line));
        } catch (const protocol::ProtocolError &e) {
            return protocol::error_frame(e);
        } catch (const std::exception &e) {
            return protocol::error_frame({protocol::Code::Internal, e.what(), std::nullopt, std::nullopt});
        }
    }

    std::string oversized_frame() const
    {
        return protocol::error_frame({protocol::Code::OversizedFrame,
                                      "frame exceeds " + std::to_string(service_.config().max_frame_bytes) + " bytes",
                                      std::nullopt, std::nullopt});
    }

    std::size_t session_count() const noexcept { return sessions_.size(); }

private:
    struct Session {
        SessionState state;
        MonitorConfig monitor;
        std::optional<std::uint64_t> last_index;
        std::optional<std::uint64_t> triggered_index;
    };

    using P = protocol::ProtocolError;
    using C = protocol::Code;

    std::string handle(protocol::OpenRequest req)
    {
        const auto &sid = req.session_id;
        if (sessions_.contains(sid)) {
            throw P{C::DuplicateSession, "session already open", sid, std::nullopt};
        }
        if (req.sae_fingerprint != service_.params().fingerprint()) {
            throw P{C::FingerprintMismatch,
                    "client expects SAE " + req.sae_fingerprint + ", service runs " + service_.params().fingerprint(),
                    sid, std::nullopt};
        }
        if (!service_.acquire_session()) {
            throw P{C::SessionCap, "session cap of " + std::to_string(service_.config().max_sessions) + " reached", sid,
                    std::nullopt};
        }
        Session s{open_session(sid), service_.monitor(), std::nullopt, std::nullopt};
        if (req.mask_policy) {
            s.monitor.mask_policy = *req.mask_policy;
        }
        const auto mask = s.monitor.mask_policy;
        sessions_.emplace(sid, std::move(s));
        return protocol::line({{"type", "session_opened"},
                               {"v", protocol::kVersion},
                               {"session_id", sid},
                               {"sae_fingerprint", service_.params().fingerprint()},
                               {"mask_policy", std::string(to_string(mask))},
                               {"decision", service_.monitor().decision == Decision::HaltOnTrigger ? "halt" : "flag"}});
    }

    std::string handle(protocol::TokenRequest req)
    {
        const auto &sid = req.session_id;
        const auto idx = req.token_index;
        const auto it = sessions_.find(sid);
        if (it == sessions_.end()) {
            throw P{C::UnknownSession, "no open session with this id", sid, idx};
        }
        auto &s = it->second;
        if (s.state.halted) {
            throw P{C::SessionHalted, "session halted at token " + std::to_string(s.triggered_index.value_or(0)), sid,
                    idx};
        }
        if (s.last_index && idx <= *s.last_index) {
            throw P{C::OutOfOrder, "token_index " + std::to_string(idx) + " does not follow " +
                                       std::to_string(*s.last_index),
                    sid, idx};
        }
        if (s.state.tokens_seen >= service_.config().token_cap) {
            throw P{C::TokenCap, "token cap of " + std::to_string(service_.config().token_cap) + " reached", sid, idx};
        }
        const auto d = service_.params().width();
        std::span<const float> h;
        if (const auto *v = std::get_if<std::vector<float>>(&req.hidden_state)) {
            h = *v;
        } else {
            h = resolve(std::get<protocol::FileRef>(req.hidden_state), sid, idx);
        }
        if (h.size() != d) {
            throw P{C::DimensionMismatch,
                    "hidden state has " + std::to_string(h.size()) + " values, SAE expects d=" + std::to_string(d), sid,
                    idx};
        }
        RiskEvent ev;
        try {
            ev = feed(s.state, s.monitor, service_.params(), h, req.role);
        } catch (const Error &e) {
            throw P{e.code() == ErrorCode::RoleOrder ? C::RoleOrder : C::Internal, e.what(), sid, idx};
        }
        s.last_index = idx;
        std::string out = protocol::line({{"type", "risk"},
                                          {"v", protocol::kVersion},
                                          {"session_id", sid},
                                          {"token_index", idx},
                                          {"scored", ev.scored},
                                          {"score", ev.score},
                                          {"triggered", ev.triggered}});
        if (ev.triggered && !s.triggered_index) {
            s.triggered_index = idx;
            if (s.monitor.decision == Decision::HaltOnTrigger) {
                out += protocol::line({{"type", "intervention"},
                                       {"v", protocol::kVersion},
                                       {"session_id", sid},
                                       {"token_index", idx},
                                       {"score", ev.score}});
            }
        }
        return out;
    }

    std::string handle(protocol::CloseRequest req)
    {
        const auto it = sessions_.find(req.session_id);
        if (it == sessions_.end()) {
            throw P{C::UnknownSession, "no open session with this id", req.session_id, std::nullopt};
        }
        auto &s = it->second;
        close_session(s.state);
        nlohmann::json j{{"type", "session_closed"},
                         {"v", protocol::kVersion},
                         {"session_id", req.session_id},
                         {"verdict", std::string(to_string(session_verdict(s.state)))},
                         {"tokens_seen", s.state.tokens_seen},
                         {"tokens_scored", s.state.tokens_scored},
                         {"max_score", s.state.max_score}};
        j["triggered_at"] = s.triggered_index ? nlohmann::json(*s.triggered_index) : nlohmann::json(nullptr);
        sessions_.erase(it);
        service_.release_session();
        return protocol::line(j);
    }

    std::span<const float> resolve(const protocol::FileRef &ref, const std::string &sid, std::uint64_t idx)
    {
        const auto path = service_.config().reference_dir / ref.path;
        if (!cached_ || cached_path_ != path) {
            try {
                cached_ = load_activations(path);
                cached_path_ = path;
            } catch (const Error &e) {
                cached_.reset();
                throw P{C::BadReference, e.what(), sid, idx};
            }
        }
        if (ref.row >= cached_->n_tokens) {
            throw P{C::BadReference, "row " + std::to_string(ref.row) + " beyond " + std::to_string(cached_->n_tokens) +
                                         " tokens in " + ref.path,
                    sid, idx};
        }
        return cached_->row(ref.row);
    }

    Service &service_;
    std::map<std::string, Session, std::less<>> sessions_;
    std::optional<ActivationMatrix> cached_;
    std::filesystem::path cached_path_;
};

// ---------------------------------------------------------------------------
// Transports

namespace detail {

/// Reads newline-terminated lines from a file descriptor with a bounded buffer.
class LineReader {
public:
    enum class Status { Line, Oversized, Eof };

    LineReader(int fd, std::size_t max_line) : fd_(fd), max_(max_line) {}

    Status next(std::string &line)
    {
        bool dropping = false;
        for (;;) {
            const auto nl = buf_.find('\n', scan_);
            if (nl != std::string::npos) {
                if (dropping) {
                    buf_.erase(0, nl + 1);
                    scan_ = 0;
                    return Status::Oversized;
                }
                if (nl > max_) {
                    buf_.erase(0, nl + 1);
                    scan_ = 0;
                    return Status::Oversized;
                }
                line.assign(buf_, 0, nl);
                buf_.erase(0, nl + 1);
                scan_ = 0;
                return Status::Line;
            }
            if (buf_.size() > max_) {
                // Discard the oversized prefix; its tail is dropped up to the next newline.
                dropping = true;
                buf_.clear();
            }
            scan_ = buf_.size();
            char chunk[65536];
            const auto n = ::read(fd_, chunk, sizeof chunk);
            if (n < 0 && errno == EINTR) {
                continue;
            }
            if (n <= 0) {
                if (dropping) {
                    return Status::Oversized;
                }
                if (!buf_.empty()) {
                    line = std::move(buf_);
                    buf_.clear();
                    scan_ = 0;
                    return line.size() > max_ ? Status::Oversized : Status::Line;
                }
                return Status::Eof;
            }
            buf_.append(chunk, static_cast<std::size_t>(n));
        }
    }

private:
    int fd_;
    std::size_t max_;
    std::string buf_;
    std::size_t scan_ = 0;
};

inline bool write_all(int fd, std::string_view data, bool socket)
{
    while (!data.empty()) {
        const auto n = socket ? ::send(fd, data.data(), data.size(), MSG_NOSIGNAL) : ::write(fd, data.data(), data.size());
        if (n < 0 && errno == EINTR) {
            continue;
        }
        if (n <= 0) {
            return false;
        }
        data.remove_prefix(static_cast<std::size_t>(n));
    }
    return true;
}

} // namespace detail

/// Serves one connection until end of input or a write failure.
inline void serve_fd(Service &service, int in_fd, int out_fd, bool socket = false)
{
    Connection conn(service);
    detail::LineReader reader(in_fd, service.config().max_frame_bytes);
    std::string line;
    for (;;) {
        const auto st = reader.next(line);
        if (st == detail::LineReader::Status::Eof) {
            return;
        }
        const auto out = st == detail::LineReader::Status::Oversized ? conn.oversized_frame() : conn.handle_line(line);
        if (!detail::write_all(out_fd, out, socket)) {
            return;
        }
    }
}

struct Endpoint {
    enum class Kind { Stdio, Unix, Tcp };
    Kind kind = Kind::Stdio;
    std::string path;
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;
};

/// "stdio", "unix:<path>", "tcp:<port>" or "tcp:<ipv4>:<port>".
inline Endpoint parse_endpoint(std::string_view s)
{
    Endpoint e;
    if (s == "stdio" || s == "-") {
        return e;
    }
    if (s.starts_with("unix:")) {
        e.kind = Endpoint::Kind::Unix;
        e.path = std::string(s.substr(5));
        require(!e.path.empty() && e.path.size() < sizeof(sockaddr_un{}.sun_path), ErrorCode::InvalidArgument,
                "unix socket path is empty or too long");
        return e;
    }
    if (s.starts_with("tcp:")) {
        e.kind = Endpoint::Kind::Tcp;
        auto rest = s.substr(4);
        if (const auto colon = rest.rfind(':'); colon != std::string_view::npos) {
            e.host = std::string(rest.substr(0, colon));
            rest = rest.substr(colon + 1);
        }
        unsigned long port = 0;
        try {
            std::size_t used = 0;
            port = std::stoul(std::string(rest), &used);
            require(used == rest.size(), ErrorCode::InvalidArgument, "");
        } catch (...) {
            fail(ErrorCode::InvalidArgument, "bad tcp port in endpoint '" + std::string(s) + "'");
        }
        require(port <= 65535, ErrorCode::InvalidArgument, "tcp port out of range");
        e.port = static_cast<std::uint16_t>(port);
        return e;
    }
    fail(ErrorCode::InvalidArgument, "unknown endpoint '" + std::string(s) + "' (stdio, unix:<path>, tcp:[host:]port)");
}

/// Accepts socket connections and serves each on its own thread.
class Server {
public:
    Server(Service &service, Endpoint endpoint) : service_(service), endpoint_(std::move(endpoint)) {}
    Server(const Server &) = delete;
    Server &operator=(const Server &) = delete;
    ~Server() { stop(); }

    void start()
    {
        require(endpoint_.kind != Endpoint::Kind::Stdio, ErrorCode::InvalidArgument, "stdio is served by serve_fd");
        if (endpoint_.kind == Endpoint::Kind::Unix) {
            listen_fd_ = ::socket(AF_UNIX, SOCK_STREAM, 0);
            sockaddr_un addr{};
            addr.sun_family = AF_UNIX;
            std::memcpy(addr.sun_path, endpoint_.path.c_str(), endpoint_.path.size() + 1);
            ::unlink(endpoint_.path.c_str());
            bind_or_fail(reinterpret_cast<sockaddr *>(&addr), sizeof addr);
        } else {
            listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
            const int one = 1;
            ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
            sockaddr_in addr{};
            addr.sin_family = AF_INET;
            addr.sin_port = htons(endpoint_.port);
            if (::inet_pton(AF_INET, endpoint_.host.c_str(), &addr.sin_addr) != 1) {
                fail(ErrorCode::InvalidArgument, "bad IPv4 address '" + endpoint_.host + "'");
            }
            bind_or_fail(reinterpret_cast<sockaddr *>(&addr), sizeof addr);
            socklen_t len = sizeof addr;
            ::getsockname(listen_fd_, reinterpret_cast<sockaddr *>(&addr), &len);
            port_ = ntohs(addr.sin_port);
        }
        if (::listen(listen_fd_, 64) != 0) {
            fail(ErrorCode::Io, "listen failed: " + std::string(std::strerror(errno)));
        }
        acceptor_ = std::jthread([this] { accept_loop(); });
    }

    /// Bound TCP port (useful with port 0).
    std::uint16_t port() const noexcept { return port_; }

    void stop()
    {
        if (stopping_.exchange(true)) {
            return;
        }
        if (listen_fd_ >= 0) {
            ::shutdown(listen_fd_, SHUT_RDWR);
        }
        if (acceptor_.joinable()) {
            acceptor_.join();
        }
        {
            std::lock_guard lock(mu_);
            for (int fd : live_fds_) {
                ::shutdown(fd, SHUT_RDWR);
            }
        }
        workers_.clear();
        if (listen_fd_ >= 0) {
            ::close(listen_fd_);
            listen_fd_ = -1;
        }
        if (endpoint_.kind == Endpoint::Kind::Unix) {
            ::unlink(endpoint_.path.c_str());
        }
    }

    /// Blocks until stop() is called from another thread.
    void wait()
    {
        if (acceptor_.joinable()) {
            acceptor_.join();
        }
    }

private:
    void bind_or_fail(const sockaddr *addr, socklen_t len)
    {
        if (listen_fd_ < 0 || ::bind(listen_fd_, addr, len) != 0) {
            const std::string why = std::strerror(errno);
            if (listen_fd_ >= 0) {
                ::close(listen_fd_);
                listen_fd_ = -1;
            }
            fail(ErrorCode::Io, "cannot bind endpoint: " + why);
        }
    }

    void accept_loop()
    {
        while (!stopping_) {
            const int fd = ::accept(listen_fd_, nullptr, nullptr);
            if (fd < 0) {
                if (errno == EINTR) {
                    continue;
                }
                return;
            }
            std::lock_guard lock(mu_);
            if (stopping_) {
                ::close(fd);
                return;
            }
            // Finished workers are joined here so the list stays bounded.
            workers_.remove_if([](const Worker &w) { return w.done->load(); });
            live_fds_.insert(fd);
            auto done = std::make_shared<std::atomic<bool>>(false);
            workers_.push_back({std::jthread([this, fd, done] {
                                    serve_fd(service_, fd, fd, true);
                                    std::lock_guard l(mu_);
                                    live_fds_.erase(fd);
                                    ::close(fd);
                                    done->store(true);
                                }),
                                done});
        }
    }

    Service &service_;
    Endpoint endpoint_;
    int listen_fd_ = -1;
    std::uint16_t port_ = 0;
    std::atomic<bool> stopping_{false};
    std::mutex mu_;
    std::set<int> live_fds_;
    struct Worker {
        std::jthread thread;
        std::shared_ptr<std::atomic<bool>> done;
    };
    std::list<Worker> workers_;
    std::jthread acceptor_;
};

} // namespace nextguard

#endif
