#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <thread>

#include "streamdit/service.hpp"
#include "streamdit/toyworld.hpp"

using namespace streamdit;
using namespace streamdit::service;
using namespace std::chrono_literals;

namespace {

FrameTensor random_frame(std::uint64_t seed) {
    Rng rng(seed);
    FrameTensor f(toy::kFrameShape);
    for (double& v : f.data()) v = uniform01(rng);
    return f;
}

ServiceConfig local_config(partition::PartitionScheme scheme) {
    ServiceConfig c;
    c.scheme = scheme;
    c.bind = {"127.0.0.1", 0};
    c.auto_start = false;
    c.seed = 21;
    return c;
}

std::vector<wire::FrameMessage> collect_frames(Client& client, long n) {
    std::vector<wire::FrameMessage> out;
    while (static_cast<long>(out.size()) < n) {
        auto m = client.receive(20s);
        if (!m) break;
        if (auto* f = std::get_if<wire::FrameMessage>(&*m)) out.push_back(std::move(*f));
    }
    return out;
}

double max_error(const FrameTensor& a, const FrameTensor& b) {
    double e = 0.0;
    for (std::size_t k = 0; k < a.data().size(); ++k) e = std::max(e, std::abs(a.data()[k] - b.data()[k]));
    return e;
}

// Cheap deterministic field that depends on the state, the level and the condition.
class Drift : public VelocityModel {
public:
    Clip velocity(const Clip& x, const NoiseVector& tau, ConditionId cond) const override {
        Clip u(x.frames(), x.frame_shape());
        for (int j = 0; j < x.frames(); ++j) {
            auto o = u.frame(j);
            auto in = x.frame(j);
            for (std::size_t k = 0; k < o.size(); ++k) o[k] = 0.3 * std::sin(in[k] + tau[j] + cond.value());
        }
        return u;
    }
    FrameShape frame_shape() const override { return toy::kFrameShape; }
};

}  // namespace

TEST_CASE("BoundedQueue: FIFO, blocking and close") {
    BoundedQueue<int> q(2);
    CHECK(q.push(1));
    CHECK(q.push(2));
    std::thread producer([&] {
        for (int i = 3; i <= 50; ++i) q.push(i);
        q.close();
    });
    std::vector<int> got;
    while (auto v = q.pop()) got.push_back(*v);
    producer.join();
    REQUIRE(got.size() == 50);
    for (int i = 0; i < 50; ++i) CHECK(got[static_cast<std::size_t>(i)] == i + 1);
    CHECK_FALSE(q.push(7));
    CHECK_THROWS(BoundedQueue<int>(0));
}

TEST_CASE("parse_endpoint and environment overrides") {
    const Endpoint e = parse_endpoint("0.0.0.0:9000");
    CHECK(e.host == "0.0.0.0");
    CHECK(e.port == 9000);
    CHECK_THROWS(parse_endpoint("localhost"));
    CHECK_THROWS(parse_endpoint("host:99999"));
    CHECK_THROWS(parse_endpoint("host:12x"));
    ::setenv("STREAMDIT_BIND", "127.0.0.1:4321", 1);
    ServiceConfig c;
    apply_env_overrides(c);
    CHECK(c.bind.port == 4321);
    ::unsetenv("STREAMDIT_BIND");
}

TEST_CASE("1000 frames arrive gapless and in order") {
    const FrameTensor target = random_frame(1);
    const stream::AnalyticVelocity oracle(target);
    ServiceConfig cfg = local_config({0, 8, 2, 1, {}});
    cfg.max_frames = 1000;
    Server server(oracle, cfg);
    server.start();
    Client client("127.0.0.1", server.port());
    client.send(wire::ControlMessage::simple(wire::ControlType::start));
    const auto frames = collect_frames(client, 1000);
    REQUIRE(frames.size() == 1000);
    for (std::size_t i = 0; i < frames.size(); ++i) {
        CHECK(frames[i].index == i);
        CHECK(frames[i].stream_id == cfg.stream_id);
        CHECK(frames[i].width == 16);
    }
    CHECK(max_error(frames[999].to_frame(), target) <= 1.0 / 510 + 1e-9);
    server.wait();
    CHECK(server.stats().frames_sent == 1000);
    CHECK_FALSE(client.receive(200ms).has_value());
    server.stop();
    server.stop();
}

TEST_CASE("two clients receive identical sequences") {
    const Drift model;
    ServiceConfig cfg = local_config({0, 4, 2, 2, {}});
    cfg.max_frames = 60;
    Server server(model, cfg);
    server.start();
    Client a("127.0.0.1", server.port()), b("127.0.0.1", server.port());
    // make sure both are registered before frames flow
    a.send(wire::ControlMessage::simple(wire::ControlType::status));
    b.send(wire::ControlMessage::simple(wire::ControlType::status));
    REQUIRE(a.receive_control(nullptr, 5s));
    REQUIRE(b.receive_control(nullptr, 5s));
    a.send(wire::ControlMessage::simple(wire::ControlType::start));
    const auto fa = collect_frames(a, 60);
    const auto fb = collect_frames(b, 60);
    REQUIRE(fa.size() == 60);
    CHECK(fa == fb);
}

TEST_CASE("served stream equals the offline run_stream output") {
    const Drift model;
    const partition::PartitionScheme scheme{1, 4, 2, 2, {}};
    ServiceConfig cfg = local_config(scheme);
    cfg.max_frames = 40;
    cfg.cfg_w = 1.5;
    cfg.initial_cond = ConditionId{3};
    Server server(model, cfg);
    server.start();
    Client client("127.0.0.1", server.port());
    client.send(wire::ControlMessage::simple(wire::ControlType::start));
    const auto frames = collect_frames(client, 40);
    REQUIRE(frames.size() == 40);

    Rng rng(cfg.seed);
    const auto offline = stream::run_stream(model, scheme, {{0, ConditionId{3}}}, 40, 1.5, rng);
    for (int i = 0; i < 40; ++i) {
        CAPTURE(i);
        CHECK(frames[static_cast<std::size_t>(i)].payload ==
              wire::decode_frame(wire::encode_frame(offline.frames.frame_tensor(i), static_cast<std::uint64_t>(i), 1)).payload);
    }
}

TEST_CASE("status snapshot of a diagonal B=4 buffer") {
    const Drift model;
    Server server(model, local_config(partition::preset(partition::Preset::diagonal, 4, 4)));
    server.start();
    Client client("127.0.0.1", server.port());
    client.send(wire::ControlMessage::simple(wire::ControlType::status));
    const auto reply = client.receive_control(nullptr, 5s);
    REQUIRE(reply);
    CHECK(reply->type == wire::ControlType::status_reply);
    CHECK(reply->fields["tau"].get<std::vector<double>>() == std::vector<double>{0.75, 0.5, 0.25, 0.0});
    CHECK(reply->fields["frames_emitted"] == 0);
    CHECK(reply->fields["class_id"] == 1);
    CHECK(server.status().tau == std::vector<double>{0.75, 0.5, 0.25, 0.0});
}

TEST_CASE("prompt handling: ack, stale and invalid requests") {
    const Drift model;
    Server server(model, local_config({0, 4, 1, 1, {}}));
    server.start();
    Client client("127.0.0.1", server.port());

    // while paused the pending prompt waits; a newer one supersedes it
    client.send(wire::ControlMessage::prompt(2, 5));
    client.send(wire::ControlMessage::prompt(3, 6));
    auto r = client.receive_control(nullptr, 5s);
    REQUIRE(r);
    CHECK(r->type == wire::ControlType::reject);
    CHECK(r->fields["seq"] == 5);
    CHECK(r->fields["reason"] == "superseded");

    client.send(wire::ControlMessage::prompt(4, 6));
    r = client.receive_control(nullptr, 5s);
    REQUIRE(r);
    CHECK(r->type == wire::ControlType::reject);
    CHECK(r->fields["reason"] == "stale sequence number");

    client.send(wire::ControlMessage::prompt(9, 7));
    r = client.receive_control(nullptr, 5s);
    REQUIRE(r);
    CHECK(r->type == wire::ControlType::reject);
    CHECK(r->fields["seq"] == 7);

    client.send(wire::ControlMessage::simple(wire::ControlType::start));
    std::vector<wire::FrameMessage> frames;
    r = client.receive_control(&frames, 5s);
    REQUIRE(r);
    CHECK(r->type == wire::ControlType::ack);
    CHECK(r->fields["seq"] == 6);
    CHECK(r->fields["micro_step"] == 0);
    CHECK(frames.empty());

    client.send(wire::ControlMessage::simple(wire::ControlType::stop));
    client.send(wire::ControlMessage::simple(wire::ControlType::status));
    r = client.receive_control(&frames, 5s);
    REQUIRE(r);
    CHECK(r->fields["class_id"] == 3);
    CHECK(server.stats().prompts_applied == 1);
    CHECK(server.stats().prompts_rejected == 3);
}

TEST_CASE("prompt causality with piecewise analytic targets") {
    // A prompt acknowledged at micro step m changes exactly the frames popped
    // after m: with s = 1 that is every index >= m c.
    const FrameTensor a = random_frame(10), b = random_frame(11);
    std::map<int, FrameTensor> targets{{1, a}, {2, b}};
    const stream::AnalyticVelocity oracle(targets, a);
    // unbounded: backpressure holds the generator once the socket buffers fill
    Server server(oracle, local_config({0, 8, 2, 1, {}}));
    server.start();
    Client client("127.0.0.1", server.port());
    client.send(wire::ControlMessage::simple(wire::ControlType::start));
    std::vector<wire::FrameMessage> frames = collect_frames(client, 41);
    client.send(wire::ControlMessage::prompt(2, 1));
    const auto ack = client.receive_control(&frames, 10s);
    REQUIRE(ack);
    REQUIRE(ack->type == wire::ControlType::ack);
    const long m = ack->fields["micro_step"].get<long>();
    const auto rest = collect_frames(client, m * 2 + 100 - static_cast<long>(frames.size()));
    frames.insert(frames.end(), rest.begin(), rest.end());
    REQUIRE(static_cast<long>(frames.size()) == m * 2 + 100);
    CHECK(m * 2 > 40);
    for (std::size_t i = 0; i < frames.size(); ++i) {
        CAPTURE(i);
        const FrameTensor& want = static_cast<long>(i) < m * 2 ? a : b;
        CHECK(max_error(frames[i].to_frame(), want) <= 1.0 / 510 + 1e-9);
    }
}

TEST_CASE("protocol errors get a reject and a closed connection; others keep streaming") {
    const Drift model;
    ServiceConfig cfg = local_config({0, 4, 1, 1, {}});
    cfg.max_frames = 30;
    Server server(model, cfg);
    server.start();
    Client bad("127.0.0.1", server.port()), good("127.0.0.1", server.port());
    const std::vector<std::uint8_t> junk{'H', 'T', 'T', 'P', ' ', '/', '\n'};
    bad.send_raw(junk);
    const auto r = bad.receive_control(nullptr, 5s);
    REQUIRE(r);
    CHECK(r->type == wire::ControlType::reject);
    CHECK_FALSE(bad.receive(2s).has_value());
    CHECK(bad.closed());

    good.send(wire::ControlMessage::simple(wire::ControlType::start));
    CHECK(collect_frames(good, 30).size() == 30);
}

TEST_CASE("a disconnecting client does not stop the stream") {
    const Drift model;
    ServiceConfig cfg = local_config({0, 4, 1, 1, {}});
    cfg.max_frames = 200;
    Server server(model, cfg);
    server.start();
    Client stay("127.0.0.1", server.port());
    {
        Client leave("127.0.0.1", server.port());
        leave.send(wire::ControlMessage::simple(wire::ControlType::start));
        collect_frames(leave, 5);
    }
    const auto frames = collect_frames(stay, 200);
    REQUIRE(frames.size() == 200);
    for (std::size_t i = 1; i < frames.size(); ++i) CHECK(frames[i].index == frames[i - 1].index + 1);
}

TEST_CASE("bind failure throws") {
    const Drift model;
    Server first(model, local_config({0, 4, 1, 1, {}}));
    first.start();
    ServiceConfig cfg = local_config({0, 4, 1, 1, {}});
    cfg.bind.port = first.port();
    Server second(model, cfg);
    CHECK_THROWS_AS(second.start(), std::runtime_error);
    CHECK_THROWS(Server(model, [] {
        ServiceConfig c = local_config({0, 4, 1, 1, {}});
        c.initial_cond = ConditionId{12};
        return c;
    }()));
}
