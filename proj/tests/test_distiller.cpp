#include <doctest.h>

#include <cmath>

#include <nlohmann/json.hpp>

#include "streamdit/distiller.hpp"

using namespace streamdit;
using namespace streamdit::distill;
using partition::PartitionScheme;

namespace {

model::ModelConfig tiny_model(int frames) {
    model::ModelConfig m;
    m.frames = frames;
    m.dim = 16;
    m.heads = 1;
    m.layers = 2;
    m.freq_dim = 16;
    m.window = {frames, 2, 2};
    m.init_seed = 4;
    return m;
}

// adaLN-Zero starts with a zero output; nudge every parameter so the field is not trivial.
model::TimeVaryingDiT perturbed_dit(int frames) {
    model::TimeVaryingDiT m(tiny_model(frames));
    Rng rng(17);
    for (auto& p : m.parameters().all())
        for (Eigen::Index i = 0; i < p.var.mutable_value().size(); ++i)
            p.var.mutable_value().data()[i] += 0.05 * standard_normal(rng);
    return m;
}

FrameTensor random_frame(std::uint64_t seed) {
    Rng rng(seed);
    FrameTensor f(toy::kFrameShape);
    for (double& v : f.data()) v = uniform01(rng);
    return f;
}

// u = x (1 + a_l) + b_l per pixel, with one (a, b) row per level l = lo N.
class AffineStudent : public TrainableVelocity {
public:
    AffineStudent(int levels, FrameShape shape) : levels_(levels), shape_(shape) {
        const auto P = static_cast<Eigen::Index>(shape.size());
        a_ = params_.add("a", nn::Matrix::Zero(levels, P));
        b_ = params_.add("b", nn::Matrix::Zero(levels, P));
    }

    nn::Var velocity_graph(std::span<const Clip> x, std::span<const NoiseVector> tau,
                           std::span<const ConditionId>) const override {
        std::vector<int> index;
        for (const NoiseVector& t : tau)
            for (double v : t.values()) index.push_back(level(v));
        const nn::Var rows(clips_to_rows(x));
        return nn::modulate(rows, nn::gather_rows(params_[b_], index), nn::gather_rows(params_[a_], index), 1);
    }
    FrameShape frame_shape() const override { return shape_; }
    nn::ParameterStore& parameters() override { return params_; }
    const nn::ParameterStore& parameters() const override { return params_; }

    int level(double lo) const { return std::min(levels_ - 1, static_cast<int>(std::lround(lo * levels_))); }
    double a(int l, int p) const { return params_[a_].value()(l, p); }
    double b(int l, int p) const { return params_[b_].value()(l, p); }

private:
    int levels_;
    FrameShape shape_;
    nn::ParameterStore params_;
    int a_ = 0, b_ = 0;
};

}  // namespace

TEST_CASE("teacher rollout equals s streamer micro steps") {
    const model::TimeVaryingDiT teacher = perturbed_dit(8);
    for (const PartitionScheme scheme : {PartitionScheme{0, 4, 2, 3, {}}, PartitionScheme{0, 4, 2, 2, {2.0}}}) {
        Rng rng(3);
        stream::StreamBuffer buf = stream::init_from_t2v_cache(teacher, ConditionId{2}, scheme, rng, 2.0);
        const SegmentState st = staged_segment(scheme, buf.frames, ConditionId{2});
        long forwards = 0;
        const Clip rolled = teacher_segment_rollout(teacher, st, scheme.s, 2.0, &forwards);
        CHECK(forwards == 2 * scheme.s);
        for (int m = 0; m < scheme.s; ++m) stream::denoise_micro_step(buf, teacher, 2.0);
        double worst = 0.0;
        for (std::size_t k = 0; k < rolled.size(); ++k)
            worst = std::max(worst, std::abs(rolled.data()[k] - buf.frames.data()[k]));
        CHECK(worst < 1e-12);
    }
}

TEST_CASE("with s = 1 and no guidance the teacher rollout is the student step") {
    const model::TimeVaryingDiT m = perturbed_dit(8);
    Rng rng(5);
    const PartitionScheme scheme{0, 8, 1, 1, {}};
    const SegmentState st = staged_segment(scheme, gaussian_clip(8, toy::kFrameShape, rng), ConditionId{3});
    long tf = 0, sf = 0;
    CHECK(teacher_segment_rollout(m, st, 1, 1.0, &tf) == student_one_step(m, st, &sf));
    CHECK(tf == 1);
    CHECK(sf == 1);
}

TEST_CASE("segment layouts") {
    const PartitionScheme scheme{0, 4, 2, 4, {}};
    const SegmentState st = staged_segment(scheme, Clip(8, toy::kFrameShape), ConditionId{1});
    CHECK(st.lo == std::vector<double>{0.75, 0.75, 0.5, 0.5, 0.25, 0.25, 0, 0});
    CHECK(st.hi == std::vector<double>{1, 1, 0.75, 0.75, 0.5, 0.5, 0.25, 0.25});
    const SegmentState u = uniform_segment(scheme, 2, Clip(8, toy::kFrameShape), ConditionId{1});
    CHECK(u.lo == std::vector<double>(8, 0.25));
    CHECK(u.hi == std::vector<double>(8, 0.5));
    CHECK_THROWS(uniform_segment(scheme, 0, Clip(8, toy::kFrameShape), ConditionId{1}));
    CHECK_THROWS(uniform_segment(scheme, 5, Clip(8, toy::kFrameShape), ConditionId{1}));
    CHECK_THROWS(uniform_segment({1, 4, 2, 4, {}}, 1, Clip(9, toy::kFrameShape), ConditionId{1}));
    CHECK_THROWS(staged_segment(scheme, Clip(7, toy::kFrameShape), ConditionId{1}));
}

TEST_CASE("config validation and JSON round trip") {
    DistillConfig c;
    c.sampling = StateSampling::self_rollout;
    const nlohmann::json j = c;
    CHECK(j.at("sampling") == "self_rollout");
    const DistillConfig back = j.get<DistillConfig>();
    CHECK(nlohmann::json(back) == j);
    CHECK(c.student_scheme() == PartitionScheme{0, 8, 2, 1, {}});
    DistillConfig bad;
    bad.teacher.s = 1;
    CHECK_THROWS(bad.validate());
    bad = {};
    bad.teacher.K = 2;
    CHECK_THROWS(bad.validate());
    bad = {};
    bad.staged_fraction = 1.5;
    CHECK_THROWS(bad.validate());
}

TEST_CASE("stub analytic teacher: the closed-form segment optimum is recovered") {
    // Guided analytic field points at x~ = x_null + w (x_cond - x_null) along a
    // straight line, so the exact segment map is x + (x~ - x)(hi - lo)/(1 - lo):
    // a_l = -1/(1 - lo) - 1 in the (1 + a) parameterisation, b_l = x~/(1 - lo).
    const FrameTensor cond_target = random_frame(1), null_target = random_frame(2);
    const stream::AnalyticVelocity teacher({{1, cond_target}}, null_target);
    const double w = 2.0;
    const toy::ClipSampler data = [](Rng& rng) {
        return toy::LabeledClip{toy::generate_clip(ConditionId{1}, rng(), 8).clip, ConditionId{1}};
    };

    DistillConfig config;
    config.teacher = {0, 4, 2, 4, {}};
    config.cfg_w = w;
    config.iterations = 3000;
    config.batch_size = 4;
    config.learning_rate = 0.02;
    config.sigma_min = 0.0;
    config.log_every = 0;
    AffineStudent student(4, toy::kFrameShape);
    const DistillReport r = distill_train(teacher, student, config, data);
    CHECK_FALSE(r.teacher_hash.has_value());
    CHECK(r.final_loss < 1e-6 * r.initial_loss);

    double worst = 0.0;
    for (int l = 0; l < 4; ++l) {
        const double lo = l / 4.0;
        for (int p = 0; p < 256; ++p) {
            const double target = null_target.data()[p] + w * (cond_target.data()[p] - null_target.data()[p]);
            worst = std::max(worst, std::abs(student.a(l, p) - (-1.0 / (1.0 - lo) - 1.0)));
            worst = std::max(worst, std::abs(student.b(l, p) - target / (1.0 - lo)));
        }
    }
    CHECK(worst < 1e-3);
}

TEST_CASE("toy teacher stays frozen and forward counts shrink by s (1 + [cfg != 1])") {
    const model::TimeVaryingDiT teacher = perturbed_dit(8);
    model::TimeVaryingDiT student = student_from_teacher(teacher);
    CHECK(parameter_hash(student.parameters()) == parameter_hash(teacher.parameters()));
    const std::uint64_t before = parameter_hash(teacher.parameters());

    DistillConfig config;
    config.teacher = {0, 4, 2, 3, {}};
    config.iterations = 5;
    config.batch_size = 2;
    config.log_every = 0;
    for (const auto sampling : {StateSampling::ground_truth, StateSampling::self_rollout}) {
        config.sampling = sampling;
        const DistillReport r = distill_train(teacher, student, config, toy::make_sampler(8));
        CHECK(r.teacher_hash == before);
        CHECK(r.curve.size() == 5);
    }
    CHECK(parameter_hash(teacher.parameters()) == before);
    CHECK(parameter_hash(student.parameters()) != before);

    Rng a(1), b(1);
    const auto t = stream::run_stream(teacher, config.teacher, {{0, ConditionId{2}}}, 40, config.cfg_w, a);
    const auto s = student_stream(student, config.student_scheme(), {{0, ConditionId{2}}}, 40, b);
    CHECK(s.stats.forwards * config.teacher.s * 2 == t.stats.forwards);
    CHECK_THROWS(student_stream(student, config.teacher, {{0, ConditionId{2}}}, 8, b));

    model::ModelConfig wide = tiny_model(8);
    wide.dim = 32;
    model::TimeVaryingDiT mismatched(wide);
    CHECK_THROWS(distill_train(teacher, mismatched, config, toy::make_sampler(8)));
}
