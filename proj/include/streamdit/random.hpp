#pragma once

#include <cstdint>
#include <random>

#include "streamdit/tensor.hpp"

namespace streamdit {

using Rng = std::mt19937_64;

/// Uniform draw on [0, 1) with 53 random bits.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

/// Uniform draw on the half-open interval (lo, hi].
inline double uniform_left_open(Rng& rng, double lo, double hi) { return hi - uniform01(rng) * (hi - lo); }

inline double standard_normal(Rng& rng) {
    std::normal_distribution<double> dist(0.0, 1.0);
    return dist(rng);
}

inline Clip gaussian_clip(int frames, FrameShape shape, Rng& rng) {
    Clip clip(frames, shape);
    for (double& v : clip.data()) v = standard_normal(rng);
    return clip;
}

}  // namespace streamdit
