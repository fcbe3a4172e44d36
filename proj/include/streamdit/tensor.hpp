#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace streamdit {

/// Shape of one frame, [C, H, W].
struct FrameShape {
    int channels = 1;
    int height = 16;
    int width = 16;

    std::size_t size() const {
        return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
               static_cast<std::size_t>(width);
    }
    bool operator==(const FrameShape&) const = default;
};

/// Discrete prompt surrogate. Id 0 is the null (unconditional) token.
class ConditionId {
public:
    constexpr ConditionId() = default;
    constexpr explicit ConditionId(int id) : id_(id) {}

    constexpr int value() const { return id_; }
    constexpr bool is_null() const { return id_ == 0; }
    static constexpr ConditionId null() { return ConditionId{0}; }

    constexpr bool operator==(const ConditionId&) const = default;

private:
    int id_ = 0;
};

/// A single frame, row-major [C, H, W].
class FrameTensor {
public:
    FrameTensor() = default;
    explicit FrameTensor(FrameShape shape, double fill = 0.0);
    FrameTensor(FrameShape shape, std::vector<double> data);

    const FrameShape& shape() const { return shape_; }
    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    double& at(int c, int y, int x) { return data_[index(c, y, x)]; }
    double at(int c, int y, int x) const { return data_[index(c, y, x)]; }

    bool operator==(const FrameTensor&) const = default;

private:
    std::size_t index(int c, int y, int x) const {
        return (static_cast<std::size_t>(c) * shape_.height + y) * shape_.width + x;
    }

    FrameShape shape_;
    std::vector<double> data_;
};

/// Video clip stored contiguously as [F, C, H, W]; frame 0 comes first in time.
class Clip {
public:
    Clip() = default;
    Clip(int frames, FrameShape shape, double fill = 0.0);
    Clip(int frames, FrameShape shape, std::vector<double> data);
    static Clip from_frames(std::span<const FrameTensor> frames);

    int frames() const { return frames_; }
    const FrameShape& frame_shape() const { return shape_; }
    std::size_t frame_size() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }

    std::span<double> data() { return data_; }
    std::span<const double> data() const { return data_; }

    std::span<double> frame(int j);
    std::span<const double> frame(int j) const;
    FrameTensor frame_tensor(int j) const;
    void set_frame(int j, std::span<const double> values);

    /// Frames [first, first + count).
    Clip slice(int first, int count) const;
    void append(const Clip& other);

    bool same_shape(const Clip& other) const {
        return frames_ == other.frames_ && shape_ == other.shape_;
    }
    bool operator==(const Clip&) const = default;

private:
    int frames_ = 0;
    FrameShape shape_;
    std::vector<double> data_;
};

/// Per-frame flow-matching time. tau = 1 is clean data, tau = 0 pure noise.
class NoiseVector {
public:
    NoiseVector() = default;
    explicit NoiseVector(std::vector<double> tau);
    static NoiseVector uniform(int frames, double tau);

    int size() const { return static_cast<int>(tau_.size()); }
    double operator[](int j) const { return tau_[static_cast<std::size_t>(j)]; }
    std::span<const double> values() const { return tau_; }

    bool operator==(const NoiseVector&) const = default;

private:
    std::vector<double> tau_;
};

}  // namespace streamdit
