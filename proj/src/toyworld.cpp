#include "streamdit/toyworld.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

namespace streamdit::toy {

namespace {

constexpr double kIntensity = 1.0;
constexpr double kBackground = 0.0;
constexpr double kMinContrast = 0.25;
constexpr double kMinSpeed = 0.5;

struct Sprite {
    int size;
    std::vector<std::pair<int, int>> cells;  // (dy, dx) offsets from the top-left corner
};

const Sprite& sprite_for(Shape shape) {
    static const Sprite square = [] {
        Sprite s{4, {}};
        for (int dy = 0; dy < 4; ++dy)
            for (int dx = 0; dx < 4; ++dx) s.cells.emplace_back(dy, dx);
        return s;
    }();
    static const Sprite cross{3, {{0, 1}, {1, 0}, {1, 1}, {1, 2}, {2, 1}}};
    return shape == Shape::square ? square : cross;
}

std::pair<int, int> velocity(Direction d) {
    switch (d) {
        case Direction::up: return {0, -1};
        case Direction::right: return {1, 0};
        case Direction::down: return {0, 1};
        case Direction::left: return {-1, 0};
    }
    return {0, 0};
}

// Reflecting walls on [0, max].
void bounce(int& p, int& v, int max) {
    p += v;
    if (p > max) {
        p = 2 * max - p;
        v = -v;
    } else if (p < 0) {
        p = -p;
        v = -v;
    }
}

ToyClip render(SpriteClass cls, int x0, int y0, int n_frames) {
    if (n_frames < 1) throw std::invalid_argument("generate_clip: n_frames must be >= 1");
    const Sprite& sprite = sprite_for(cls.shape);
    const int max = kFrameSize - sprite.size;
    if (x0 < 0 || y0 < 0 || x0 > max || y0 > max) throw std::invalid_argument("sprite outside the frame");
    auto [vx, vy] = velocity(cls.direction);
    const double half = sprite.size / 2.0;

    ToyClip out{Clip(n_frames, kFrameShape, kBackground), {}};
    out.centroids.reserve(static_cast<std::size_t>(n_frames));
    int x = x0;
    int y = y0;
    for (int f = 0; f < n_frames; ++f) {
        auto frame = out.clip.frame(f);
        for (auto [dy, dx] : sprite.cells) {
            frame[static_cast<std::size_t>((y + dy) * kFrameSize + (x + dx))] = kIntensity;
        }
        out.centroids.push_back({x + half, y + half});
        if (max > 0) {
            bounce(x, vx, max);
            bounce(y, vy, max);
        }
    }
    return out;
}

}  // namespace

SpriteClass SpriteClass::from_id(ConditionId id) {
    if (id.value() < 1 || id.value() > kNumClasses) {
        throw std::out_of_range("sprite class id must lie in [1, 8]");
    }
    const int k = id.value() - 1;
    return {static_cast<Shape>(k / 4), static_cast<Direction>(k % 4)};
}

std::string to_string(Direction d) {
    static constexpr std::array<const char*, 4> names{"up", "right", "down", "left"};
    return names[static_cast<std::size_t>(d)];
}

std::string SpriteClass::name() const {
    return std::string(shape == Shape::square ? "square" : "cross") + "/" + to_string(direction);
}

Direction opposite(Direction d) { return static_cast<Direction>((static_cast<int>(d) + 2) % 4); }

bool same_axis(Direction a, Direction b) { return a == b || a == opposite(b); }

ToyClip generate_clip(ConditionId class_id, std::uint64_t seed, int n_frames) {
    const SpriteClass cls = SpriteClass::from_id(class_id);
    Rng rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(class_id.value()));
    const int span = kFrameSize - sprite_for(cls.shape).size + 1;
    const int x0 = static_cast<int>(rng() % static_cast<std::uint64_t>(span));
    const int y0 = static_cast<int>(rng() % static_cast<std::uint64_t>(span));
    return render(cls, x0, y0, n_frames);
}

ToyClip generate_clip_from(SpriteClass cls, Point start, int n_frames) {
    const double half = sprite_for(cls.shape).size / 2.0;
    const double x0 = start.x - half;
    const double y0 = start.y - half;
    if (x0 != std::floor(x0) || y0 != std::floor(y0)) {
        throw std::invalid_argument("generate_clip_from: start does not align to the pixel grid");
    }
    return render(cls, static_cast<int>(x0), static_cast<int>(y0), n_frames);
}

std::vector<Point> centroid_track(const Clip& frames) {
    const FrameShape shape = frames.frame_shape();
    std::vector<Point> track;
    track.reserve(static_cast<std::size_t>(frames.frames()));
    for (int f = 0; f < frames.frames(); ++f) {
        auto px = frames.frame(f);
        double lo = px[0];
        double hi = px[0];
        for (double v : px) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        if (hi - lo < kMinContrast) {
            throw std::domain_error("centroid_track: frame " + std::to_string(f) + " has no sprite");
        }
        const double threshold = 0.5 * (lo + hi);
        double mass = 0.0;
        double sx = 0.0;
        double sy = 0.0;
        // channels are summed
        for (int c = 0; c < shape.channels; ++c) {
            for (int y = 0; y < shape.height; ++y) {
                for (int x = 0; x < shape.width; ++x) {
                    const double w = std::max(0.0, px[static_cast<std::size_t>((c * shape.height + y) * shape.width + x)] - threshold);
                    mass += w;
                    sx += w * (x + 0.5);
                    sy += w * (y + 0.5);
                }
            }
        }
        track.push_back({sx / mass, sy / mass});
    }
    return track;
}

std::optional<Direction> as_direction(DirectionEstimate e) {
    if (e == DirectionEstimate::ambiguous) return std::nullopt;
    return static_cast<Direction>(e);
}

DirectionEstimate infer_direction(std::span<const Point> centroids) {
    if (centroids.size() < 3) throw std::invalid_argument("infer_direction: need at least 3 centroids");
    std::array<int, 4> votes{};
    double travelled = 0.0;
    const std::size_t steps = centroids.size() - 1;
    for (std::size_t k = 0; k < steps; ++k) {
        const double dx = centroids[k + 1].x - centroids[k].x;
        const double dy = centroids[k + 1].y - centroids[k].y;
        travelled += std::hypot(dx, dy);
        if (std::max(std::abs(dx), std::abs(dy)) < kMinSpeed) continue;
        Direction d;
        if (std::abs(dx) >= std::abs(dy)) {
            d = dx > 0 ? Direction::right : Direction::left;
        } else {
            d = dy > 0 ? Direction::down : Direction::up;
        }
        ++votes[static_cast<std::size_t>(d)];
    }
    if (travelled / static_cast<double>(steps) < kMinSpeed) return DirectionEstimate::ambiguous;
    int best = 0;
    for (int d = 1; d < 4; ++d) {
        if (votes[static_cast<std::size_t>(d)] > votes[static_cast<std::size_t>(best)]) best = d;
    }
    for (int d = 0; d < 4; ++d) {
        if (d != best && votes[static_cast<std::size_t>(d)] == votes[static_cast<std::size_t>(best)]) {
            return DirectionEstimate::ambiguous;
        }
    }
    if (votes[static_cast<std::size_t>(best)] == 0) return DirectionEstimate::ambiguous;
    return static_cast<DirectionEstimate>(best);
}

std::optional<Shape> infer_shape(const Clip& frames) {
    int square = 0;
    int cross = 0;
    for (int f = 0; f < frames.frames(); ++f) {
        auto px = frames.frame(f);
        const auto bright = std::count_if(px.begin(), px.end(), [](double v) { return v > 0.5 * kIntensity; });
        // bands around the two sprite areas, split at their midpoint
        if (bright >= 11 && bright <= 24) ++square;
        if (bright >= 2 && bright <= 10) ++cross;
    }
    if (square == cross) return std::nullopt;
    return square > cross ? Shape::square : Shape::cross;
}

ClipSampler make_sampler(int n_frames) {
    return [n_frames](Rng& rng) {
        const ConditionId cond{static_cast<int>(rng() % kNumClasses) + 1};
        return LabeledClip{generate_clip(cond, rng(), n_frames).clip, cond};
    };
}

}  // namespace streamdit::toy
