#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "streamdit/random.hpp"
#include "streamdit/tensor.hpp"

// Synthetic video universe: one sprite per clip moving one pixel per frame and
// bouncing off the frame walls. Classes double as the condition vocabulary.
namespace streamdit::toy {

enum class Shape { square = 0, cross = 1 };
enum class Direction { up = 0, right = 1, down = 2, left = 3 };

inline constexpr int kFrameSize = 16;
inline constexpr int kNumClasses = 8;
inline constexpr int kVocabularySize = kNumClasses + 1;  // + null id
inline constexpr FrameShape kFrameShape{1, kFrameSize, kFrameSize};

struct SpriteClass {
    Shape shape = Shape::square;
    Direction direction = Direction::right;

    ConditionId id() const { return ConditionId{static_cast<int>(shape) * 4 + static_cast<int>(direction) + 1}; }
    static SpriteClass from_id(ConditionId id);
    std::string name() const;
    bool operator==(const SpriteClass&) const = default;
};

std::string to_string(Direction d);
Direction opposite(Direction d);
bool same_axis(Direction a, Direction b);

/// Continuous coordinates: pixel (row y, column x) covers [x, x+1) x [y, y+1).
struct Point {
    double x = 0.0;
    double y = 0.0;
};

struct ToyClip {
    Clip clip;
    std::vector<Point> centroids;  // analytic trajectory
};

/// Seeded start position, then deterministic motion. Prefix-consistent in n_frames.
ToyClip generate_clip(ConditionId class_id, std::uint64_t seed, int n_frames);

/// Starts with the sprite centroid at `start`; the sprite must fit and align to the pixel grid.
ToyClip generate_clip_from(SpriteClass cls, Point start, int n_frames);

/// Thresholded intensity-weighted centroid per frame. Pixels count by how far
/// they rise above the frame's mid-range; frames without contrast throw.
std::vector<Point> centroid_track(const Clip& frames);

enum class DirectionEstimate { up = 0, right = 1, down = 2, left = 3, ambiguous = 4 };

std::optional<Direction> as_direction(DirectionEstimate e);

/// Majority vote of per-step axis-aligned moves. Ambiguous when the mean step
/// is below 0.5 px/frame or the vote ties.
DirectionEstimate infer_direction(std::span<const Point> centroids);

/// Majority vote over frames of the sprite's bright-pixel count (square 16, cross 5).
std::optional<Shape> infer_shape(const Clip& frames);

struct LabeledClip {
    Clip clip;
    ConditionId cond;
};

using ClipSampler = std::function<LabeledClip(Rng&)>;

/// i.i.d. training clips: uniform class, fresh seed per draw.
ClipSampler make_sampler(int n_frames);

}  // namespace streamdit::toy
