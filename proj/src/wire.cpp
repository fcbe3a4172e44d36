#include "streamdit/wire.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace streamdit::wire {

namespace {

template <typename T>
void put(std::vector<std::uint8_t>& out, T v) {
    for (int shift = 8 * (static_cast<int>(sizeof(T)) - 1); shift >= 0; shift -= 8) {
        out.push_back(static_cast<std::uint8_t>((static_cast<std::uint64_t>(v) >> shift) & 0xFF));
    }
}

template <typename T>
T get(std::span<const std::uint8_t> in, std::size_t& at) {
    if (at + sizeof(T) > in.size()) throw ProtocolError("truncated record");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v = (v << 8) | in[at + i];
    at += sizeof(T);
    return static_cast<T>(v);
}

bool has_magic(std::span<const std::uint8_t> in, std::size_t at, const std::array<char, 4>& magic) {
    return in.size() >= at + 4 && std::memcmp(in.data() + at, magic.data(), 4) == 0;
}

void put_magic(std::vector<std::uint8_t>& out, const std::array<char, 4>& magic) {
    for (char ch : magic) out.push_back(static_cast<std::uint8_t>(ch));
}

}  // namespace

FrameTensor FrameMessage::to_frame() const {
    if (format != kGray8) throw ProtocolError("unsupported pixel format " + std::to_string(format));
    if (payload.size() != static_cast<std::size_t>(width) * height) throw ProtocolError("payload length mismatch");
    FrameTensor f(FrameShape{1, height, width});
    auto px = f.data();
    for (std::size_t i = 0; i < payload.size(); ++i) px[i] = payload[i] / 255.0;
    return f;
}

std::vector<std::uint8_t> encode_frame(const FrameTensor& frame, std::uint64_t index, std::uint32_t stream_id,
                                       long* clamped) {
    const FrameShape s = frame.shape();
    if (s.channels != 1) throw std::invalid_argument("encode_frame: grayscale frames only");
    if (s.width < 1 || s.height < 1 || s.width > 0xFFFF || s.height > 0xFFFF) {
        throw std::invalid_argument("encode_frame: frame size does not fit the header");
    }
    std::vector<std::uint8_t> out;
    out.reserve(kFrameHeaderSize + s.size());
    put_magic(out, kFrameMagic);
    put<std::uint32_t>(out, stream_id);
    put<std::uint64_t>(out, index);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(s.width));
    put<std::uint16_t>(out, static_cast<std::uint16_t>(s.height));
    put<std::uint8_t>(out, kGray8);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(s.size()));
    for (double v : frame.data()) {
        if (!(v >= 0.0 && v <= 1.0)) {
            if (clamped) ++*clamped;
            v = std::isnan(v) ? 0.0 : std::clamp(v, 0.0, 1.0);
        }
        out.push_back(static_cast<std::uint8_t>(std::lround(v * 255.0)));
    }
    return out;
}

FrameMessage decode_frame(std::span<const std::uint8_t> bytes) {
    if (!has_magic(bytes, 0, kFrameMagic)) throw ProtocolError("not a frame record");
    std::size_t at = 4;
    FrameMessage m;
    m.stream_id = get<std::uint32_t>(bytes, at);
    m.index = get<std::uint64_t>(bytes, at);
    m.width = get<std::uint16_t>(bytes, at);
    m.height = get<std::uint16_t>(bytes, at);
    m.format = get<std::uint8_t>(bytes, at);
    const auto length = get<std::uint32_t>(bytes, at);
    if (m.format != kGray8) throw ProtocolError("unsupported pixel format " + std::to_string(m.format));
    if (length != static_cast<std::uint32_t>(m.width) * m.height) throw ProtocolError("payload length disagrees with size");
    if (bytes.size() != at + length) throw ProtocolError("frame record length mismatch");
    m.payload.assign(bytes.begin() + static_cast<std::ptrdiff_t>(at), bytes.end());
    return m;
}

std::string to_string(ControlType t) {
    switch (t) {
        case ControlType::prompt: return "prompt";
        case ControlType::start: return "start";
        case ControlType::stop: return "stop";
        case ControlType::status: return "status";
        case ControlType::ack: return "ack";
        case ControlType::reject: return "reject";
        case ControlType::status_reply: return "status_reply";
    }
    return "?";
}

ControlType parse_control_type(const std::string& name) {
    for (auto t : {ControlType::prompt, ControlType::start, ControlType::stop, ControlType::status, ControlType::ack,
                   ControlType::reject, ControlType::status_reply}) {
        if (to_string(t) == name) return t;
    }
    throw ProtocolError("unknown control type '" + name + "'");
}

ControlMessage ControlMessage::prompt(int class_id, std::uint64_t seq) {
    return {ControlType::prompt, {{"class_id", class_id}, {"seq", seq}}};
}

ControlMessage ControlMessage::simple(ControlType type) { return {type, nlohmann::json::object()}; }

void ControlMessage::validate() const {
    auto need = [this](const char* key, bool ok) {
        if (!fields.contains(key) || !ok) throw ProtocolError(to_string(type) + ": missing or invalid '" + key + "'");
    };
    auto is_uint = [this](const char* key) { return fields.contains(key) && fields[key].is_number_unsigned(); };
    auto is_int = [this](const char* key) { return fields.contains(key) && fields[key].is_number_integer(); };
    if (!fields.is_object()) throw ProtocolError("control body must be an object");
    switch (type) {
        case ControlType::prompt:
            need("class_id", is_int("class_id"));
            need("seq", is_uint("seq"));
            break;
        case ControlType::ack:
            need("seq", is_uint("seq"));
            need("micro_step", is_int("micro_step"));
            break;
        case ControlType::reject:
            need("reason", fields.contains("reason") && fields["reason"].is_string());
            break;
        case ControlType::status_reply:
            need("tau", fields.contains("tau") && fields["tau"].is_array());
            need("frames_emitted", is_int("frames_emitted"));
            need("micro", is_int("micro"));
            need("class_id", is_int("class_id"));
            break;
        case ControlType::start:
        case ControlType::stop:
        case ControlType::status: break;
    }
}

std::vector<std::uint8_t> encode_control(const ControlMessage& msg) {
    msg.validate();
    nlohmann::json body = msg.fields;
    body["type"] = to_string(msg.type);
    const std::string text = body.dump();
    if (text.size() > kMaxControlBody) throw ProtocolError("control body too large");
    std::vector<std::uint8_t> out;
    out.reserve(kControlHeaderSize + text.size());
    put_magic(out, kControlMagic);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(text.size()));
    out.insert(out.end(), text.begin(), text.end());
    return out;
}

ControlMessage decode_control(std::span<const std::uint8_t> bytes) {
    if (!has_magic(bytes, 0, kControlMagic)) throw ProtocolError("not a control record");
    std::size_t at = 4;
    const auto length = get<std::uint32_t>(bytes, at);
    if (bytes.size() != at + length) throw ProtocolError("control record length mismatch");
    nlohmann::json body = nlohmann::json::parse(bytes.begin() + static_cast<std::ptrdiff_t>(at), bytes.end(), nullptr, false);
    if (body.is_discarded() || !body.is_object()) throw ProtocolError("control body is not a JSON object");
    if (!body.contains("type") || !body["type"].is_string()) throw ProtocolError("control body has no type");
    ControlMessage m;
    m.type = parse_control_type(body["type"].get<std::string>());
    body.erase("type");
    m.fields = std::move(body);
    m.validate();
    return m;
}

void Reader::feed(std::span<const std::uint8_t> bytes) {
    if (pos_ > 0 && (pos_ == buf_.size() || pos_ > (1u << 20))) {
        buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(pos_));
        pos_ = 0;
    }
    buf_.insert(buf_.end(), bytes.begin(), bytes.end());
}

std::optional<Message> Reader::next() {
    const std::span<const std::uint8_t> rest(buf_.data() + pos_, buf_.size() - pos_);
    if (rest.size() < 4) return std::nullopt;
    std::size_t total = 0;
    if (has_magic(rest, 0, kFrameMagic)) {
        if (rest.size() < kFrameHeaderSize) return std::nullopt;
        std::size_t at = kFrameHeaderSize - 4;
        total = kFrameHeaderSize + get<std::uint32_t>(rest, at);
    } else if (has_magic(rest, 0, kControlMagic)) {
        if (rest.size() < kControlHeaderSize) return std::nullopt;
        std::size_t at = 4;
        const auto length = get<std::uint32_t>(rest, at);
        if (length > kMaxControlBody) throw ProtocolError("control body too large");
        total = kControlHeaderSize + length;
    } else {
        throw ProtocolError("unknown record magic");
    }
    if (rest.size() < total) return std::nullopt;
    const auto record = rest.first(total);
    pos_ += total;
    if (has_magic(record, 0, kFrameMagic)) return Message{decode_frame(record)};
    return Message{decode_control(record)};
}

}  // namespace streamdit::wire
