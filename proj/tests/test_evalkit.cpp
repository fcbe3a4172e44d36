#include <doctest.h>

#include <cmath>
#include <sstream>

#include <nlohmann/json.hpp>

#include "streamdit/evalkit.hpp"
#include "streamdit/toyworld.hpp"

using namespace streamdit;
using namespace streamdit::eval;

namespace {

Clip constant_frames(const std::vector<double>& levels) {
    Clip c(static_cast<int>(levels.size()), toy::kFrameShape);
    for (int t = 0; t < c.frames(); ++t)
        for (double& v : c.frame(t)) v = levels[static_cast<std::size_t>(t)];
    return c;
}

}  // namespace

TEST_CASE("static stream has no motion and no flicker") {
    const Clip still = constant_frames(std::vector<double>(10, 0.3));
    CHECK(flicker(still) == 0.0);
    CHECK(dynamic_degree(still) == 0.0);
    CHECK(boundary_discontinuity(still, 2) == 1.0);
}

TEST_CASE("alternating frames: closed-form flicker and motion") {
    // |x[t+1] - 2x[t] + x[t-1]| is 2 at every interior frame, first differences are 1
    const Clip alt = constant_frames({0, 1, 0, 1, 0, 1, 0});
    CHECK(flicker(alt) == doctest::Approx(2.0));
    CHECK(dynamic_degree(alt) == doctest::Approx(1.0));
    const Clip half = constant_frames({0, 0.5, 0, 0.5});
    CHECK(flicker(half) == doctest::Approx(1.0));
}

TEST_CASE("metrics ignore a global intensity offset") {
    const Clip a = toy::generate_clip(ConditionId{3}, 4, 24).clip;
    Clip b = a;
    for (double& v : b.data()) v += 0.25;
    CHECK(flicker(a) == doctest::Approx(flicker(b)).epsilon(1e-12));
    CHECK(dynamic_degree(a) == doctest::Approx(dynamic_degree(b)).epsilon(1e-12));
    CHECK(boundary_discontinuity(a, 4) == doctest::Approx(boundary_discontinuity(b, 4)).epsilon(1e-12));
}

TEST_CASE("boundary_discontinuity: step at every boundary") {
    // within-chunk differences 0.1, cross-chunk 0.3
    const Clip c = constant_frames({0.0, 0.1, 0.4, 0.5, 0.8, 0.9});
    CHECK(boundary_discontinuity(c, 2) == doctest::Approx(3.0));
    CHECK(boundary_discontinuity(c, 1) == 1.0);
    CHECK(std::isinf(boundary_discontinuity(constant_frames({0, 0, 1, 1}), 2)));
    CHECK_THROWS(boundary_discontinuity(c, 0));
}

TEST_CASE("ground-truth toy streams are seamless at any chunk size") {
    // A sprite that moves one pixel per frame changes the same number of pixels every frame.
    for (int id = 1; id <= toy::kNumClasses; ++id) {
        const Clip clip = toy::generate_clip(ConditionId{id}, 100 + id, 64).clip;
        for (int c : {2, 3, 4, 8}) CHECK(boundary_discontinuity(clip, c) == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("condition_accuracy on ground truth and on wrong labels") {
    for (int id = 1; id <= toy::kNumClasses; ++id) {
        CAPTURE(id);
        const Clip clip = toy::generate_clip(ConditionId{id}, 7 * id, 48).clip;
        int scored = 0;
        CHECK(condition_accuracy(clip, 1, {{0, ConditionId{id}}}, 8, &scored) == 1.0);
        CHECK(scored == 48 - 8 + 1);
        // same axis, other shape
        const toy::SpriteClass cls = toy::SpriteClass::from_id(ConditionId{id});
        const toy::SpriteClass other{cls.shape == toy::Shape::square ? toy::Shape::cross : toy::Shape::square,
                                     cls.direction};
        CHECK(condition_accuracy(clip, 1, {{0, other.id()}}) == 0.0);
        // same shape, other axis
        const toy::SpriteClass turned{cls.shape, static_cast<toy::Direction>((static_cast<int>(cls.direction) + 1) % 4)};
        CHECK(condition_accuracy(clip, 1, {{0, turned.id()}}) == 0.0);
    }
}

TEST_CASE("condition_accuracy skips the transition zone after a switch") {
    const ConditionId a{2}, b{5};
    Clip stream = toy::generate_clip(a, 1, 24).clip;
    stream.append(toy::generate_clip(b, 2, 24).clip);
    const int c = 4;
    int scored = 0;
    const double acc = condition_accuracy(stream, c, {{0, a}, {24, b}}, 8, &scored);
    // windows overlapping [24, 28) are skipped: t in [17, 27]
    CHECK(scored == (48 - 8 + 1) - 11);
    // windows t = 28..40 and 0..16 see a single class
    CHECK(acc == 1.0);
}

TEST_CASE("condition_accuracy counts blank frames as misses") {
    const Clip blank = constant_frames(std::vector<double>(12, 0.0));
    CHECK(condition_accuracy(blank, 1, {{0, ConditionId{1}}}) == 0.0);
}

TEST_CASE("compute_stream_metrics preconditions") {
    CHECK_THROWS(compute_stream_metrics(constant_frames({0, 1}), 1, {{0, ConditionId{1}}}));
    const Clip gt = toy::generate_clip(ConditionId{6}, 3, 32).clip;
    const StreamMetrics m = compute_stream_metrics(gt, 2, {{0, ConditionId{6}}});
    CHECK(m.condition_accuracy == 1.0);
    CHECK(m.boundary_discontinuity == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(m.dynamic_degree > 0.0);
}

TEST_CASE("composite_proxy") {
    StreamMetrics perfect;
    perfect.condition_accuracy = 1.0;
    perfect.flicker = 0.0;
    perfect.boundary_discontinuity = 1.0;
    CHECK(composite_proxy(perfect, {}) == doctest::Approx(1.0));
    StreamMetrics worse = perfect;
    worse.flicker = 0.1;
    CHECK(composite_proxy(worse, {}) == doctest::Approx(0.6 + 0.2 * 0.5 + 0.2));
    worse.boundary_discontinuity = INFINITY;
    CHECK(composite_proxy(worse, {}) == doctest::Approx(0.6 + 0.1));
}

TEST_CASE("eval_schedule switches shape and axis halfway") {
    for (std::uint64_t seed = 0; seed < 16; ++seed) {
        const auto s = eval_schedule(seed, 100);
        REQUIRE(s.size() == 2);
        CHECK(s[1].start_frame == 50);
        const auto a = toy::SpriteClass::from_id(s[0].cond), b = toy::SpriteClass::from_id(s[1].cond);
        CHECK(a.shape != b.shape);
        CHECK_FALSE(toy::same_axis(a.direction, b.direction));
    }
}

TEST_CASE("ablation table: identical mixtures give identical rows") {
    // A pretrained stand-in under two names; rows must match exactly.
    const stream::AnalyticVelocity oracle(toy::generate_clip(ConditionId{1}, 1, 1).clip.frame_tensor(0));
    AblationConfig cfg;
    cfg.mixtures = {{"a", {1}}, {"b", {1}}};
    cfg.model.frames = 8;
    cfg.eval_T = 8;
    cfg.eval_frames = 24;
    cfg.eval_seeds = {1, 2};
    const AblationTable t = ablation_run(cfg, {{"a", &oracle}, {"b", &oracle}});
    REQUIRE(t.rows.size() == 2);
    CHECK(t.rows[0].proxy == t.rows[1].proxy);
    CHECK(t.rows[0].metrics.flicker == t.rows[1].metrics.flicker);
    CHECK_FALSE(t.note.empty());
    int lines = 0;
    std::istringstream in(t.to_jsonl());
    for (std::string line; std::getline(in, line);) {
        CHECK(nlohmann::json::parse(line).contains("proxy"));
        ++lines;
    }
    CHECK(lines == 2);
    CHECK(t.to_text().find("a") != std::string::npos);
    cfg.mixtures.pop_back();
    CHECK_THROWS(ablation_run(cfg, {{"a", &oracle}}));
}
