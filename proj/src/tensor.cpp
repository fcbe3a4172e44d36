#include "streamdit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace streamdit {

FrameTensor::FrameTensor(FrameShape shape, double fill) : shape_(shape), data_(shape.size(), fill) {}

FrameTensor::FrameTensor(FrameShape shape, std::vector<double> data)
    : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.size()) {
        throw std::invalid_argument("FrameTensor: data size does not match shape");
    }
}

Clip::Clip(int frames, FrameShape shape, double fill)
    : frames_(frames), shape_(shape), data_(static_cast<std::size_t>(frames) * shape.size(), fill) {
    if (frames < 0) throw std::invalid_argument("Clip: negative frame count");
}

Clip::Clip(int frames, FrameShape shape, std::vector<double> data)
    : frames_(frames), shape_(shape), data_(std::move(data)) {
    if (frames < 0 || data_.size() != static_cast<std::size_t>(frames) * shape.size()) {
        throw std::invalid_argument("Clip: data size does not match [F, C, H, W]");
    }
}

Clip Clip::from_frames(std::span<const FrameTensor> frames) {
    if (frames.empty()) return {};
    Clip clip(static_cast<int>(frames.size()), frames.front().shape());
    for (std::size_t j = 0; j < frames.size(); ++j) {
        if (frames[j].shape() != clip.shape_) {
            throw std::invalid_argument("Clip::from_frames: non-uniform frame shapes");
        }
        clip.set_frame(static_cast<int>(j), frames[j].data());
    }
    return clip;
}

std::span<double> Clip::frame(int j) {
    if (j < 0 || j >= frames_) throw std::out_of_range("Clip::frame: index " + std::to_string(j));
    return std::span<double>(data_).subspan(static_cast<std::size_t>(j) * frame_size(), frame_size());
}

std::span<const double> Clip::frame(int j) const {
    if (j < 0 || j >= frames_) throw std::out_of_range("Clip::frame: index " + std::to_string(j));
    return std::span<const double>(data_).subspan(static_cast<std::size_t>(j) * frame_size(), frame_size());
}

FrameTensor Clip::frame_tensor(int j) const {
    auto f = frame(j);
    return FrameTensor(shape_, std::vector<double>(f.begin(), f.end()));
}

void Clip::set_frame(int j, std::span<const double> values) {
    auto dst = frame(j);
    if (values.size() != dst.size()) throw std::invalid_argument("Clip::set_frame: size mismatch");
    std::copy(values.begin(), values.end(), dst.begin());
}

Clip Clip::slice(int first, int count) const {
    if (first < 0 || count < 0 || first + count > frames_) {
        throw std::out_of_range("Clip::slice: range outside clip");
    }
    auto begin = data_.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(first) * frame_size());
    auto end = begin + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(count) * frame_size());
    return Clip(count, shape_, std::vector<double>(begin, end));
}

void Clip::append(const Clip& other) {
    if (frames_ == 0) {
        *this = other;
        return;
    }
    if (other.frames_ == 0) return;
    if (other.shape_ != shape_) throw std::invalid_argument("Clip::append: frame shape mismatch");
    data_.insert(data_.end(), other.data_.begin(), other.data_.end());
    frames_ += other.frames_;
}

NoiseVector::NoiseVector(std::vector<double> tau) : tau_(std::move(tau)) {
    for (double t : tau_) {
        if (!(t >= 0.0 && t <= 1.0)) {
            throw std::out_of_range("NoiseVector: tau outside [0, 1]");
        }
    }
}

NoiseVector NoiseVector::uniform(int frames, double tau) {
    return NoiseVector(std::vector<double>(static_cast<std::size_t>(frames), tau));
}

}  // namespace streamdit
