#include "streamdit/service.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <cstdlib>
#include <cstring>
#include <stdexcept>
#include <utility>

#include <spdlog/spdlog.h>

namespace streamdit::service {

namespace {

[[noreturn]] void sys_fail(const std::string& what) { throw std::runtime_error(what + ": " + std::strerror(errno)); }

bool send_all(int fd, const std::uint8_t* data, std::size_t n) {
    while (n > 0) {
        const ssize_t k = ::send(fd, data, n, MSG_NOSIGNAL);
        if (k < 0) {
            if (errno == EINTR) continue;
            return false;
        }
        data += k;
        n -= static_cast<std::size_t>(k);
    }
    return true;
}

wire::ControlMessage reject(std::optional<std::uint64_t> seq, const std::string& reason) {
    wire::ControlMessage m{wire::ControlType::reject, {{"reason", reason}}};
    if (seq) m.fields["seq"] = *seq;
    return m;
}

}  // namespace

struct Server::Client {
    explicit Client(int fd_in, long id_in) : fd(fd_in), id(id_in) {}
    ~Client() { ::close(fd); }
    Client(const Client&) = delete;
    Client& operator=(const Client&) = delete;

    int fd;
    long id;
    wire::Reader reader;            // control thread only
    std::optional<std::uint64_t> last_seq;  // control thread only
    std::atomic<bool> dead{false};
};

Endpoint parse_endpoint(const std::string& text) {
    const auto colon = text.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == text.size()) {
        throw std::invalid_argument("bind address must look like host:port, got '" + text + "'");
    }
    Endpoint e;
    e.host = text.substr(0, colon);
    const std::string port = text.substr(colon + 1);
    char* end = nullptr;
    const long p = std::strtol(port.c_str(), &end, 10);
    if (*end != '\0' || p < 0 || p > 65535) throw std::invalid_argument("bad port in '" + text + "'");
    e.port = static_cast<std::uint16_t>(p);
    return e;
}

void apply_env_overrides(ServiceConfig& config) {
    if (const char* bind = std::getenv("STREAMDIT_BIND")) config.bind = parse_endpoint(bind);
    if (const char* level = std::getenv("STREAMDIT_LOG_LEVEL")) spdlog::set_level(spdlog::level::from_str(level));
}

Server::Server(const VelocityModel& model, ServiceConfig config)
    : model_(model), config_(std::move(config)), events_(config_.queue_capacity) {
    config_.scheme.validate();
    if (config_.initial_cond.value() < 1 || config_.initial_cond.value() > config_.num_classes) {
        throw std::invalid_argument("service: initial condition outside the class range");
    }
    if (model_.frame_shape().channels != 1) throw std::invalid_argument("service: wire format carries grayscale frames only");
}

Server::~Server() { stop(); }

void Server::start() {
    if (started_) throw std::logic_error("server already started");
    Rng rng(config_.seed);
    stream::StreamBuffer buf = stream::init_from_t2v_cache(model_, config_.initial_cond, config_.scheme, rng, config_.cfg_w);
    session_ = std::make_unique<stream::StreamSession>(model_, std::move(buf), config_.cfg_w, rng);
    publish_status(*session_);

    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    hints.ai_flags = AI_PASSIVE;
    addrinfo* res = nullptr;
    const std::string port = std::to_string(config_.bind.port);
    if (::getaddrinfo(config_.bind.host.c_str(), port.c_str(), &hints, &res) != 0 || !res) {
        throw std::runtime_error("cannot resolve bind address " + config_.bind.host);
    }
    listen_fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (listen_fd_ < 0) {
        ::freeaddrinfo(res);
        sys_fail("socket");
    }
    const int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    if (::bind(listen_fd_, res->ai_addr, res->ai_addrlen) < 0 || ::listen(listen_fd_, 16) < 0) {
        ::freeaddrinfo(res);
        const std::string msg = "bind " + config_.bind.host + ":" + port;
        ::close(listen_fd_);
        listen_fd_ = -1;
        sys_fail(msg);
    }
    ::freeaddrinfo(res);
    sockaddr_in bound{};
    socklen_t len = sizeof(bound);
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
    port_ = ntohs(bound.sin_port);
    if (::pipe(wake_pipe_) < 0) sys_fail("pipe");

    running_ = config_.auto_start;
    started_ = true;
    generator_ = std::thread([this] { generation_loop(); });
    emitter_ = std::thread([this] { emitter_loop(); });
    listener_ = std::thread([this] { control_loop(); });
    spdlog::info("service: listening on {}:{} scheme {} cfg {}", config_.bind.host, port_, config_.scheme.to_string(),
                 config_.cfg_w);
}

void Server::stop() {
    if (!started_ || shutting_down_.exchange(true)) return;
    {
        std::lock_guard lock(run_mu_);
        run_cv_.notify_all();
    }
    events_.close();
    const char byte = 'x';
    [[maybe_unused]] const auto ignored = ::write(wake_pipe_[1], &byte, 1);
    generator_.join();
    listener_.join();
    {
        std::lock_guard lock(clients_mu_);
        for (auto& c : clients_) ::shutdown(c->fd, SHUT_RDWR);
    }
    emitter_.join();
    {
        std::lock_guard lock(clients_mu_);
        clients_.clear();
    }
    ::close(listen_fd_);
    ::close(wake_pipe_[0]);
    ::close(wake_pipe_[1]);
    {
        std::lock_guard lock(done_mu_);
        done_cv_.notify_all();
    }
    spdlog::info("service: stopped after {} frames", stats().frames_sent);
}

void Server::wait() {
    std::unique_lock lock(done_mu_);
    done_cv_.wait(lock, [&] { return emitter_done_ || shutting_down_.load(); });
}

StatusSnapshot Server::status() const {
    std::lock_guard lock(status_mu_);
    return status_;
}

ServiceStats Server::stats() const {
    std::lock_guard lock(stats_mu_);
    return stats_;
}

void Server::publish_status(const stream::StreamSession& session) {
    const stream::StreamBuffer& b = session.buffer();
    std::lock_guard lock(status_mu_);
    status_.tau.assign(b.tau.values().begin(), b.tau.values().end());
    status_.micro = b.micro;
    status_.frames_emitted = b.frames_emitted;
    status_.micro_steps = b.stats.micro_steps;
    status_.cond = b.cond;
}

void Server::generation_loop() {
    long produced = 0;
    try {
        while (!shutting_down_) {
            {
                std::unique_lock lock(run_mu_);
                run_cv_.wait(lock, [&] { return running_ || shutting_down_.load(); });
            }
            if (shutting_down_) break;
            if (config_.max_frames > 0 && produced >= config_.max_frames) break;

            std::optional<PendingPrompt> prompt;
            {
                std::lock_guard lock(prompt_mu_);
                prompt.swap(pending_);
            }
            if (prompt) {
                const long micro = session_->set_condition(prompt->cond);
                {
                    std::lock_guard lock(stats_mu_);
                    ++stats_.prompts_applied;
                }
                publish_status(*session_);
                wire::ControlMessage ack{wire::ControlType::ack, {{"seq", prompt->seq}, {"micro_step", micro}}};
                if (!events_.push(Reply{prompt->client, std::move(ack)})) break;
            }

            std::optional<stream::ChunkOut> chunk = session_->step();
            publish_status(*session_);
            if (!chunk) continue;
            if (config_.max_frames > 0 && produced + chunk->frames.frames() > config_.max_frames) {
                chunk->frames = chunk->frames.slice(0, static_cast<int>(config_.max_frames - produced));
            }
            produced += chunk->frames.frames();
            if (!events_.push(std::move(*chunk))) break;
        }
    } catch (const std::exception& e) {
        spdlog::error("service: generation stopped: {}", e.what());
    }
    events_.push(Done{});
}

void Server::send_to(const std::shared_ptr<Client>& client, const std::vector<std::uint8_t>& bytes) {
    if (client->dead) return;
    if (!send_all(client->fd, bytes.data(), bytes.size())) {
        client->dead = true;
        ::shutdown(client->fd, SHUT_RDWR);
        std::lock_guard lock(stats_mu_);
        ++stats_.clients_dropped;
        spdlog::warn("service: client {} dropped", client->id);
    }
}

void Server::emitter_loop() {
    while (auto ev = events_.pop()) {
        if (auto* chunk = std::get_if<stream::ChunkOut>(&*ev)) {
            std::vector<std::shared_ptr<Client>> targets;
            {
                std::lock_guard lock(clients_mu_);
                targets = clients_;
            }
            long clamped = 0;
            for (int f = 0; f < chunk->frames.frames(); ++f) {
                const auto bytes = wire::encode_frame(chunk->frames.frame_tensor(f),
                                                      static_cast<std::uint64_t>(chunk->first_index + f),
                                                      config_.stream_id, &clamped);
                for (const auto& c : targets) send_to(c, bytes);
            }
            std::lock_guard lock(stats_mu_);
            stats_.frames_sent += chunk->frames.frames();
            stats_.clamped_pixels += clamped;
        } else if (auto* reply = std::get_if<Reply>(&*ev)) {
            send_to(reply->client, wire::encode_control(reply->msg));
            if (reply->close_after) {
                reply->client->dead = true;
                ::shutdown(reply->client->fd, SHUT_RDWR);
            }
        } else {
            std::lock_guard lock(done_mu_);
            emitter_done_ = true;
            done_cv_.notify_all();
        }
    }
}

void Server::handle_control(const std::shared_ptr<Client>& client, const wire::ControlMessage& msg) {
    using wire::ControlType;
    auto push_reply = [&](wire::ControlMessage m) { events_.push(Reply{client, std::move(m)}); };
    auto count_reject = [&] {
        std::lock_guard lock(stats_mu_);
        ++stats_.prompts_rejected;
    };
    switch (msg.type) {
        case ControlType::prompt: {
            const auto seq = msg.fields["seq"].get<std::uint64_t>();
            const int id = msg.fields["class_id"].get<int>();
            if (client->last_seq && seq <= *client->last_seq) {
                count_reject();
                push_reply(reject(seq, "stale sequence number"));
                return;
            }
            if (id < 1 || id > config_.num_classes) {
                count_reject();
                push_reply(reject(seq, "invalid class id " + std::to_string(id)));
                return;
            }
            client->last_seq = seq;
            std::optional<PendingPrompt> replaced;
            {
                std::lock_guard lock(prompt_mu_);
                replaced = std::exchange(pending_, PendingPrompt{ConditionId{id}, seq, client});
            }
            if (replaced) {
                count_reject();
                events_.push(Reply{replaced->client, reject(replaced->seq, "superseded")});
            }
            return;
        }
        case ControlType::start:
        case ControlType::stop: {
            std::lock_guard lock(run_mu_);
            running_ = msg.type == ControlType::start;
            run_cv_.notify_all();
            return;
        }
        case ControlType::status: {
            const StatusSnapshot s = status();
            push_reply({ControlType::status_reply,
                        {{"tau", s.tau},
                         {"micro", s.micro},
                         {"frames_emitted", s.frames_emitted},
                         {"micro_steps", s.micro_steps},
                         {"class_id", s.cond.value()}}});
            return;
        }
        default:
            push_reply(reject(std::nullopt, "clients may not send " + wire::to_string(msg.type)));
            return;
    }
}

void Server::control_loop() {
    std::vector<std::shared_ptr<Client>> mine;
    long next_id = 1;
    // Stops polling and broadcasting to client i; the socket closes with its last owner.
    auto forget = [&](std::size_t i) {
        {
            std::lock_guard lock(clients_mu_);
            std::erase(clients_, mine[i]);
        }
        mine.erase(mine.begin() + static_cast<std::ptrdiff_t>(i));
    };
    while (!shutting_down_) {
        std::vector<pollfd> fds{{listen_fd_, POLLIN, 0}, {wake_pipe_[0], POLLIN, 0}};
        for (const auto& c : mine) fds.push_back({c->fd, POLLIN, 0});
        if (::poll(fds.data(), fds.size(), -1) < 0) {
            if (errno == EINTR) continue;
            spdlog::error("service: poll failed: {}", std::strerror(errno));
            break;
        }
        if (fds[1].revents) break;
        for (std::size_t i = fds.size() - 1; i >= 2; --i) {
            if (!fds[i].revents) continue;
            const std::size_t ci = i - 2;
            std::uint8_t buf[4096];
            const ssize_t n = ::recv(mine[ci]->fd, buf, sizeof(buf), 0);
            if (n <= 0) {
                spdlog::info("service: client {} disconnected", mine[ci]->id);
                mine[ci]->dead = true;
                ::shutdown(mine[ci]->fd, SHUT_RDWR);
                forget(ci);
                continue;
            }
            auto client = mine[ci];
            client->reader.feed({buf, static_cast<std::size_t>(n)});
            try {
                while (auto msg = client->reader.next()) {
                    if (const auto* ctl = std::get_if<wire::ControlMessage>(&*msg)) {
                        handle_control(client, *ctl);
                    } else {
                        events_.push(Reply{client, reject(std::nullopt, "clients may not send frames")});
                    }
                }
            } catch (const wire::ProtocolError& e) {
                spdlog::warn("service: client {} protocol error: {}", client->id, e.what());
                forget(ci);
                events_.push(Reply{client, reject(std::nullopt, e.what()), true});
            }
        }
        if (fds[0].revents & POLLIN) {
            const int fd = ::accept(listen_fd_, nullptr, nullptr);
            if (fd >= 0) {
                const int one = 1;
                ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
                auto c = std::make_shared<Client>(fd, next_id++);
                mine.push_back(c);
                {
                    std::lock_guard lock(clients_mu_);
                    clients_.push_back(c);
                }
                std::lock_guard lock(stats_mu_);
                ++stats_.clients_accepted;
                spdlog::info("service: client {} connected", c->id);
            }
        }
    }
}

Client::Client(const std::string& host, std::uint16_t port) {
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0 || !res) {
        throw std::runtime_error("cannot resolve " + host);
    }
    fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
    if (fd_ < 0 || ::connect(fd_, res->ai_addr, res->ai_addrlen) < 0) {
        ::freeaddrinfo(res);
        if (fd_ >= 0) ::close(fd_);
        sys_fail("connect " + host + ":" + std::to_string(port));
    }
    ::freeaddrinfo(res);
    const int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
}

Client::~Client() {
    if (fd_ >= 0) ::close(fd_);
}

void Client::send(const wire::ControlMessage& msg) {
    const auto bytes = wire::encode_control(msg);
    if (!send_all(fd_, bytes.data(), bytes.size())) sys_fail("client send");
}

void Client::send_raw(std::span<const std::uint8_t> bytes) {
    if (!send_all(fd_, bytes.data(), bytes.size())) sys_fail("client send");
}

std::optional<wire::Message> Client::receive(std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (true) {
        if (auto m = reader_.next()) return m;
        if (closed_) return std::nullopt;
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0) return std::nullopt;
        pollfd p{fd_, POLLIN, 0};
        const int r = ::poll(&p, 1, static_cast<int>(left.count()));
        if (r < 0 && errno != EINTR) sys_fail("client poll");
        if (r <= 0) continue;
        std::uint8_t buf[8192];
        const ssize_t n = ::recv(fd_, buf, sizeof(buf), 0);
        if (n <= 0) {
            closed_ = true;
            continue;
        }
        reader_.feed({buf, static_cast<std::size_t>(n)});
    }
}

std::optional<wire::ControlMessage> Client::receive_control(std::vector<wire::FrameMessage>* frames,
                                                            std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    while (true) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        auto m = receive(std::max(left, std::chrono::milliseconds(0)));
        if (!m) return std::nullopt;
        if (auto* ctl = std::get_if<wire::ControlMessage>(&*m)) return std::move(*ctl);
        if (frames) frames->push_back(std::move(std::get<wire::FrameMessage>(*m)));
    }
}

}  // namespace streamdit::service
