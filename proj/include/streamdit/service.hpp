#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "streamdit/model.hpp"
#include "streamdit/partition.hpp"
#include "streamdit/streamer.hpp"
#include "streamdit/wire.hpp"

// Live streaming server: a generation loop, a frame emitter and a control
// listener connected by bounded queues.
namespace streamdit::service {

/// Blocking FIFO with a fixed capacity. push waits while full; pop waits while
/// empty. After close, push fails and pop drains what is left.
template <typename T>
class BoundedQueue {
public:
    explicit BoundedQueue(std::size_t capacity) : capacity_(capacity) {
        if (capacity == 0) throw std::invalid_argument("BoundedQueue: capacity must be positive");
    }

    bool push(T value) {
        std::unique_lock lock(mu_);
        not_full_.wait(lock, [&] { return closed_ || items_.size() < capacity_; });
        if (closed_) return false;
        items_.push_back(std::move(value));
        not_empty_.notify_one();
        return true;
    }

    std::optional<T> pop() {
        std::unique_lock lock(mu_);
        not_empty_.wait(lock, [&] { return closed_ || !items_.empty(); });
        if (items_.empty()) return std::nullopt;
        T v = std::move(items_.front());
        items_.pop_front();
        not_full_.notify_one();
        return v;
    }

    void close() {
        std::lock_guard lock(mu_);
        closed_ = true;
        not_full_.notify_all();
        not_empty_.notify_all();
    }

    std::size_t size() const {
        std::lock_guard lock(mu_);
        return items_.size();
    }

private:
    mutable std::mutex mu_;
    std::condition_variable not_full_;
    std::condition_variable not_empty_;
    std::deque<T> items_;
    std::size_t capacity_;
    bool closed_ = false;
};

struct Endpoint {
    std::string host = "127.0.0.1";
    std::uint16_t port = 7878;  // 0 picks a free port
};

/// "host:port"
Endpoint parse_endpoint(const std::string& text);

struct ServiceConfig {
    partition::PartitionScheme scheme;
    double cfg_w = 1.0;
    std::uint64_t seed = 0;
    ConditionId initial_cond{1};
    int num_classes = 8;  // valid prompt ids are 1..num_classes
    Endpoint bind;
    std::size_t queue_capacity = 64;
    std::uint32_t stream_id = 1;
    long max_frames = 0;  // stop generating after this many frames; 0 runs until stopped
    bool auto_start = true;
};

/// STREAMDIT_BIND overrides the bind address; STREAMDIT_LOG_LEVEL sets the log level.
void apply_env_overrides(ServiceConfig& config);

struct StatusSnapshot {
    std::vector<double> tau;
    int micro = 0;
    long frames_emitted = 0;
    long micro_steps = 0;
    ConditionId cond;
};

struct ServiceStats {
    long frames_sent = 0;
    long clamped_pixels = 0;
    long clients_accepted = 0;
    long clients_dropped = 0;
    long prompts_applied = 0;
    long prompts_rejected = 0;
};

class Server {
public:
    /// The model must outlive the server.
    Server(const VelocityModel& model, ServiceConfig config);
    ~Server();
    Server(const Server&) = delete;
    Server& operator=(const Server&) = delete;

    /// Builds the stream buffer, binds and starts the three stages. Throws on bind failure.
    void start();
    /// Stops every stage and closes all connections. Idempotent.
    void stop();
    /// Blocks until generation has produced max_frames and all were sent, or stop() ran.
    void wait();

    std::uint16_t port() const { return port_; }
    StatusSnapshot status() const;
    ServiceStats stats() const;

private:
    struct Client;
    struct PendingPrompt {
        ConditionId cond;
        std::uint64_t seq = 0;
        std::shared_ptr<Client> client;
    };
    struct Reply {
        std::shared_ptr<Client> client;
        wire::ControlMessage msg;
        bool close_after = false;
    };
    struct Done {};
    using Event = std::variant<stream::ChunkOut, Reply, Done>;

    void generation_loop();
    void emitter_loop();
    void control_loop();
    void handle_control(const std::shared_ptr<Client>& client, const wire::ControlMessage& msg);
    void send_to(const std::shared_ptr<Client>& client, const std::vector<std::uint8_t>& bytes);
    void publish_status(const stream::StreamSession& session);

    const VelocityModel& model_;
    ServiceConfig config_;
    std::unique_ptr<stream::StreamSession> session_;

    BoundedQueue<Event> events_;
    std::thread generator_;
    std::thread emitter_;
    std::thread listener_;

    int listen_fd_ = -1;
    int wake_pipe_[2] = {-1, -1};
    std::uint16_t port_ = 0;

    mutable std::mutex clients_mu_;
    std::vector<std::shared_ptr<Client>> clients_;

    std::mutex prompt_mu_;
    std::optional<PendingPrompt> pending_;

    std::mutex run_mu_;
    std::condition_variable run_cv_;
    bool running_ = false;
    std::atomic<bool> shutting_down_{false};
    bool started_ = false;

    mutable std::mutex status_mu_;
    StatusSnapshot status_;

    mutable std::mutex stats_mu_;
    ServiceStats stats_;

    std::mutex done_mu_;
    std::condition_variable done_cv_;
    bool emitter_done_ = false;
};

/// Blocking client used by tests, the CLI and scripted harnesses.
class Client {
public:
    Client(const std::string& host, std::uint16_t port);
    ~Client();
    Client(const Client&) = delete;
    Client& operator=(const Client&) = delete;

    void send(const wire::ControlMessage& msg);
    void send_raw(std::span<const std::uint8_t> bytes);
    /// Next message, or nullopt on timeout or when the server closed the connection.
    std::optional<wire::Message> receive(std::chrono::milliseconds timeout = std::chrono::seconds(30));
    /// Skips frames until a control message arrives; frames seen meanwhile are appended to `frames`.
    std::optional<wire::ControlMessage> receive_control(std::vector<wire::FrameMessage>* frames,
                                                        std::chrono::milliseconds timeout = std::chrono::seconds(30));
    bool closed() const { return closed_; }

private:
    int fd_ = -1;
    wire::Reader reader_;
    bool closed_ = false;
};

}  // namespace streamdit::service
