#include <doctest.h>

#include <cmath>

#include "streamdit/random.hpp"
#include "streamdit/wire.hpp"

using namespace streamdit;
using namespace streamdit::wire;

namespace {

FrameTensor random_frame(std::uint64_t seed, FrameShape shape = {1, 16, 16}) {
    Rng rng(seed);
    FrameTensor f(shape);
    for (double& v : f.data()) v = uniform01(rng);
    return f;
}

std::vector<std::uint8_t> bytes_of(std::initializer_list<int> xs) {
    std::vector<std::uint8_t> out;
    for (int x : xs) out.push_back(static_cast<std::uint8_t>(x));
    return out;
}

}  // namespace

TEST_CASE("frame header layout is bit-exact big-endian") {
    FrameTensor f(FrameShape{1, 2, 3});
    f.data()[5] = 1.0;
    const auto bytes = encode_frame(f, 0x0102030405060708ULL, 0xA0B0C0D0);
    REQUIRE(bytes.size() == kFrameHeaderSize + 6);
    CHECK(kFrameHeaderSize == 25);
    const auto header = std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 25);
    CHECK(header == bytes_of({'S', 'D', 'F', '1', 0xA0, 0xB0, 0xC0, 0xD0, 1, 2, 3, 4, 5, 6, 7, 8, 0, 3, 0, 2, 1, 0, 0, 0, 6}));
    CHECK(std::vector<std::uint8_t>(bytes.begin() + 25, bytes.end()) == bytes_of({0, 0, 0, 0, 0, 255}));
}

TEST_CASE("16x16 frame sizes and an all-zero payload") {
    const auto bytes = encode_frame(FrameTensor(FrameShape{1, 16, 16}), 0, 1);
    CHECK(bytes.size() == 256 + kFrameHeaderSize);
    for (std::size_t i = kFrameHeaderSize; i < bytes.size(); ++i) CHECK(bytes[i] == 0);
}

TEST_CASE("quantisation error is at most 1/510") {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const FrameTensor f = random_frame(seed);
        const FrameTensor back = decode_frame(encode_frame(f, seed, 1)).to_frame();
        for (std::size_t k = 0; k < f.data().size(); ++k) worst = std::max(worst, std::abs(back.data()[k] - f.data()[k]));
    }
    // midpoints of the code grid hit the bound
    FrameTensor mid(FrameShape{1, 1, 255});
    for (int i = 0; i < 255; ++i) mid.data()[static_cast<std::size_t>(i)] = (i + 0.5) / 255.0;
    const FrameTensor back = decode_frame(encode_frame(mid, 0, 1)).to_frame();
    for (std::size_t k = 0; k < mid.data().size(); ++k) worst = std::max(worst, std::abs(back.data()[k] - mid.data()[k]));
    CHECK(worst <= 1.0 / 510.0 + 1e-12);
}

TEST_CASE("out-of-range pixels are clamped and counted") {
    FrameTensor f(FrameShape{1, 1, 5});
    f.data()[0] = -0.2;
    f.data()[1] = 1.7;
    f.data()[2] = NAN;
    f.data()[3] = 0.5;
    f.data()[4] = 1.0;
    long clamped = 0;
    const FrameMessage m = decode_frame(encode_frame(f, 3, 9, &clamped));
    CHECK(clamped == 3);
    CHECK(m.payload == bytes_of({0, 255, 0, 128, 255}));
    CHECK(m.index == 3);
    CHECK(m.stream_id == 9);
    CHECK_THROWS_AS(encode_frame(FrameTensor(FrameShape{3, 4, 4}), 0, 1), std::invalid_argument);
}

TEST_CASE("decode_frame rejects malformed records") {
    const auto good = encode_frame(random_frame(1, {1, 4, 4}), 7, 1);
    CHECK_NOTHROW(decode_frame(good));
    auto bad = good;
    bad[0] = 'X';
    CHECK_THROWS_AS(decode_frame(bad), ProtocolError);
    bad = good;
    bad[20] = 2;  // format
    CHECK_THROWS_AS(decode_frame(bad), ProtocolError);
    bad = good;
    bad[24] = 15;  // length disagrees with 4x4
    CHECK_THROWS_AS(decode_frame(bad), ProtocolError);
    bad = good;
    bad.pop_back();
    CHECK_THROWS_AS(decode_frame(bad), ProtocolError);
    CHECK_THROWS_AS(decode_frame(std::vector<std::uint8_t>(good.begin(), good.begin() + 10)), ProtocolError);
}

TEST_CASE("control records round trip") {
    const std::vector<ControlMessage> msgs{
        ControlMessage::prompt(3, 17),
        ControlMessage::simple(ControlType::start),
        ControlMessage::simple(ControlType::stop),
        ControlMessage::simple(ControlType::status),
        {ControlType::ack, {{"seq", 17u}, {"micro_step", 120}}},
        {ControlType::reject, {{"seq", 4u}, {"reason", "stale sequence number"}}},
        {ControlType::status_reply, {{"tau", {0.75, 0.5}}, {"micro", 0}, {"frames_emitted", 10}, {"class_id", 2}}},
    };
    for (const auto& m : msgs) {
        const auto bytes = encode_control(m);
        CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "SDC1");
        const std::uint32_t len = (std::uint32_t(bytes[4]) << 24) | (bytes[5] << 16) | (bytes[6] << 8) | bytes[7];
        CHECK(len + kControlHeaderSize == bytes.size());
        const ControlMessage back = decode_control(bytes);
        CHECK(back.type == m.type);
        CHECK(back.fields == m.fields);
    }
}

TEST_CASE("control schema violations") {
    CHECK_THROWS_AS(encode_control({ControlType::prompt, {{"class_id", 3}}}), ProtocolError);
    CHECK_THROWS_AS(encode_control({ControlType::prompt, {{"class_id", "3"}, {"seq", 1u}}}), ProtocolError);
    CHECK_THROWS_AS(encode_control({ControlType::prompt, {{"class_id", 3}, {"seq", -1}}}), ProtocolError);
    CHECK_THROWS_AS(encode_control({ControlType::reject, nlohmann::json::object()}), ProtocolError);
    auto raw = [](const std::string& body) {
        std::vector<std::uint8_t> out{'S', 'D', 'C', '1', 0, 0, 0, static_cast<std::uint8_t>(body.size())};
        out.insert(out.end(), body.begin(), body.end());
        return out;
    };
    CHECK_NOTHROW(decode_control(raw(R"({"type":"status"})")));
    CHECK_THROWS_AS(decode_control(raw(R"({"type":"launch"})")), ProtocolError);
    CHECK_THROWS_AS(decode_control(raw(R"({"class_id":1})")), ProtocolError);
    CHECK_THROWS_AS(decode_control(raw(R"([1,2])")), ProtocolError);
    CHECK_THROWS_AS(decode_control(raw(R"({"type":)")), ProtocolError);
    CHECK(parse_control_type("status_reply") == ControlType::status_reply);
}

TEST_CASE("Reader splits an interleaved byte stream at any chunking") {
    std::vector<std::uint8_t> stream;
    std::vector<Message> sent;
    for (int i = 0; i < 6; ++i) {
        const FrameTensor f = random_frame(static_cast<std::uint64_t>(i), {1, 4, 4});
        const auto fb = encode_frame(f, static_cast<std::uint64_t>(i), 2);
        stream.insert(stream.end(), fb.begin(), fb.end());
        sent.emplace_back(decode_frame(fb));
        const ControlMessage c = ControlMessage::prompt(1 + i, static_cast<std::uint64_t>(i));
        const auto cb = encode_control(c);
        stream.insert(stream.end(), cb.begin(), cb.end());
        sent.emplace_back(c);
    }
    for (std::size_t piece : {1u, 3u, 7u, 25u, 1000u}) {
        CAPTURE(piece);
        Reader r;
        std::vector<Message> got;
        for (std::size_t at = 0; at < stream.size(); at += piece) {
            r.feed(std::span(stream).subspan(at, std::min(piece, stream.size() - at)));
            while (auto m = r.next()) got.push_back(std::move(*m));
        }
        CHECK(r.buffered() == 0);
        REQUIRE(got.size() == sent.size());
        for (std::size_t i = 0; i < got.size(); ++i) {
            REQUIRE(got[i].index() == sent[i].index());
            if (const auto* f = std::get_if<FrameMessage>(&got[i])) CHECK(*f == std::get<FrameMessage>(sent[i]));
            else CHECK(std::get<ControlMessage>(got[i]).fields == std::get<ControlMessage>(sent[i]).fields);
        }
    }
}

TEST_CASE("Reader rejects unknown magic and oversized control bodies") {
    Reader r;
    r.feed(bytes_of({'J', 'U', 'N', 'K', 0, 0}));
    CHECK_THROWS_AS(r.next(), ProtocolError);
    Reader big;
    big.feed(bytes_of({'S', 'D', 'C', '1', 0x7F, 0, 0, 0}));
    CHECK_THROWS_AS(big.next(), ProtocolError);
    Reader partial;
    partial.feed(bytes_of({'S', 'D'}));
    CHECK_FALSE(partial.next().has_value());
}
