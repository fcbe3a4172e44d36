#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "streamdit/tensor.hpp"

// Binary wire protocol. Frame records:
//   "SDF1" | stream id u32 | frame index u64 | width u16 | height u16 |
//   format u8 | payload length u32 | payload (row-major)
// Control records:
//   "SDC1" | body length u32 | UTF-8 JSON body
// Integers are big-endian.
namespace streamdit::wire {

inline constexpr std::array<char, 4> kFrameMagic{'S', 'D', 'F', '1'};
inline constexpr std::array<char, 4> kControlMagic{'S', 'D', 'C', '1'};
inline constexpr std::size_t kFrameHeaderSize = 4 + 4 + 8 + 2 + 2 + 1 + 4;
inline constexpr std::size_t kControlHeaderSize = 4 + 4;
inline constexpr std::uint8_t kGray8 = 1;
inline constexpr std::uint32_t kMaxControlBody = 1 << 16;

class ProtocolError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct FrameMessage {
    std::uint32_t stream_id = 0;
    std::uint64_t index = 0;
    std::uint16_t width = 0;
    std::uint16_t height = 0;
    std::uint8_t format = kGray8;
    std::vector<std::uint8_t> payload;

    /// Pixels back in [0, 1].
    FrameTensor to_frame() const;
    bool operator==(const FrameMessage&) const = default;
};

/// Quantises round(v * 255). Values outside [0, 1] are clamped and counted.
std::vector<std::uint8_t> encode_frame(const FrameTensor& frame, std::uint64_t index, std::uint32_t stream_id,
                                       long* clamped = nullptr);
FrameMessage decode_frame(std::span<const std::uint8_t> bytes);

enum class ControlType { prompt, start, stop, status, ack, reject, status_reply };

std::string to_string(ControlType t);
ControlType parse_control_type(const std::string& name);

/// Client requests: prompt {class_id, seq}, start, stop, status.
/// Server replies: ack {seq, micro_step}, reject {seq, reason},
/// status_reply {tau, micro, frames_emitted, class_id}.
struct ControlMessage {
    ControlType type = ControlType::status;
    nlohmann::json fields = nlohmann::json::object();

    static ControlMessage prompt(int class_id, std::uint64_t seq);
    static ControlMessage simple(ControlType type);

    /// Throws ProtocolError when required fields are missing or mistyped.
    void validate() const;
};

std::vector<std::uint8_t> encode_control(const ControlMessage& msg);
ControlMessage decode_control(std::span<const std::uint8_t> bytes);

using Message = std::variant<FrameMessage, ControlMessage>;

/// Incremental parser for a byte stream carrying both record kinds.
class Reader {
public:
    void feed(std::span<const std::uint8_t> bytes);
    /// Next complete message, if buffered. Throws ProtocolError on bad magic.
    std::optional<Message> next();
    std::size_t buffered() const { return buf_.size() - pos_; }

private:
    std::vector<std::uint8_t> buf_;
    std::size_t pos_ = 0;
};

}  // namespace streamdit::wire
