#include "streamdit/distiller.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "streamdit/checkpoint.hpp"
#include "streamdit/flowcore.hpp"
#include "streamdit/trainer.hpp"

namespace streamdit::distill {

using partition::PartitionScheme;

namespace {

void check_state(const SegmentState& st) {
    const auto B = static_cast<std::size_t>(st.x.frames());
    if (st.lo.size() != B || st.hi.size() != B) throw std::invalid_argument("segment state: level vectors must have B entries");
    for (std::size_t j = 0; j < B; ++j) {
        if (!(st.lo[j] >= 0.0 && st.lo[j] <= st.hi[j] && st.hi[j] <= 1.0)) {
            throw std::invalid_argument("segment state: need 0 <= lo <= hi <= 1 per frame");
        }
    }
    for (int k = 0; k < st.K; ++k) {
        if (st.lo[static_cast<std::size_t>(k)] != 1.0) throw std::invalid_argument("segment state: reference frame not clean");
    }
}

std::vector<double> interpolate(const SegmentState& st, int m, int s) {
    std::vector<double> tau(st.lo.size());
    for (std::size_t j = 0; j < tau.size(); ++j) tau[j] = st.lo[j] + (st.hi[j] - st.lo[j]) * m / s;
    return tau;
}

std::vector<double> widths(const SegmentState& st) {
    std::vector<double> d(st.lo.size());
    for (std::size_t j = 0; j < d.size(); ++j) d[j] = st.hi[j] - st.lo[j];
    return d;
}

}  // namespace

SegmentState staged_segment(const PartitionScheme& scheme, Clip x, ConditionId cond) {
    scheme.validate();
    if (x.frames() != scheme.B()) throw std::invalid_argument("staged_segment: buffer length differs from B");
    SegmentState st{std::move(x), {}, {}, cond, scheme.K};
    const NoiseVector lo = partition::staged_taus(scheme, 0);
    const NoiseVector hi = partition::staged_taus(scheme, scheme.s);
    st.lo.assign(lo.values().begin(), lo.values().end());
    st.hi.assign(hi.values().begin(), hi.values().end());
    return st;
}

SegmentState uniform_segment(const PartitionScheme& scheme, int segment, Clip x, ConditionId cond) {
    scheme.validate();
    if (segment < 1 || segment > scheme.N) throw std::out_of_range("uniform_segment: segment outside [1, N]");
    if (scheme.K != 0) throw std::invalid_argument("uniform_segment: cold start has no references");
    const auto B = static_cast<std::size_t>(x.frames());
    const double lo = stream::cold_start_level(scheme, (segment - 1) * scheme.s);
    const double hi = stream::cold_start_level(scheme, segment * scheme.s);
    return SegmentState{std::move(x), std::vector<double>(B, lo), std::vector<double>(B, hi), cond, 0};
}

Clip teacher_segment_rollout(const VelocityModel& teacher, const SegmentState& state, int s, double cfg_w, long* forwards) {
    check_state(state);
    if (s < 1) throw std::invalid_argument("teacher_segment_rollout: s must be >= 1");
    std::vector<double> dtau = widths(state);
    for (double& d : dtau) d /= s;
    Clip x = state.x;
    for (int m = 0; m < s; ++m) {
        const NoiseVector tau(interpolate(state, m, s));
        x = flow::buffered_euler_step(x, stream::guided_velocity(teacher, x, tau, state.cond, cfg_w, forwards), dtau);
    }
    return x;
}

Clip student_one_step(const VelocityModel& student, const SegmentState& state, long* forwards) {
    check_state(state);
    const Clip u = student.velocity(state.x, NoiseVector(state.lo), state.cond);
    if (forwards) ++*forwards;
    return flow::buffered_euler_step(state.x, u, widths(state));
}

PartitionScheme DistillConfig::student_scheme() const {
    PartitionScheme s = teacher;
    s.s = 1;
    return s;
}

void DistillConfig::validate() const {
    teacher.validate();
    if (teacher.K != 0) throw std::invalid_argument("distill: teacher scheme must have K = 0");
    if (teacher.s < 2) throw std::invalid_argument("distill: teacher s must be > 1");
    if (!(cfg_w >= 0.0)) throw std::invalid_argument("distill: negative guidance scale");
    if (iterations < 0) throw std::invalid_argument("distill: negative iteration count");
    if (batch_size < 1) throw std::invalid_argument("distill: batch size must be positive");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("distill: learning rate must be positive");
    if (!(staged_fraction >= 0.0 && staged_fraction <= 1.0)) throw std::invalid_argument("distill: staged_fraction outside [0, 1]");
}

NLOHMANN_JSON_SERIALIZE_ENUM(StateSampling, {{StateSampling::ground_truth, "ground_truth"},
                                             {StateSampling::self_rollout, "self_rollout"}})

void to_json(nlohmann::json& j, const DistillConfig& c) {
    j = {{"teacher", c.teacher},       {"cfg_w", c.cfg_w},
         {"iterations", c.iterations}, {"batch_size", c.batch_size},
         {"learning_rate", c.learning_rate}, {"staged_fraction", c.staged_fraction},
         {"sampling", c.sampling},     {"sigma_min", c.sigma_min},
         {"seed", c.seed},             {"log_every", c.log_every}};
}

void from_json(const nlohmann::json& j, DistillConfig& c) {
    DistillConfig d;
    d.teacher = j.value("teacher", d.teacher);
    d.cfg_w = j.value("cfg_w", d.cfg_w);
    d.iterations = j.value("iterations", d.iterations);
    d.batch_size = j.value("batch_size", d.batch_size);
    d.learning_rate = j.value("learning_rate", d.learning_rate);
    d.staged_fraction = j.value("staged_fraction", d.staged_fraction);
    d.sampling = j.value("sampling", d.sampling);
    d.sigma_min = j.value("sigma_min", d.sigma_min);
    d.seed = j.value("seed", d.seed);
    d.log_every = j.value("log_every", d.log_every);
    d.validate();
    c = d;
}

std::optional<std::uint64_t> frozen_hash(const VelocityModel& model) {
    if (const auto* t = dynamic_cast<const TrainableVelocity*>(&model)) return parameter_hash(t->parameters());
    return std::nullopt;
}

namespace {

struct Target {
    SegmentState state;
    Clip endpoint;
};

SegmentState sample_state(const VelocityModel& teacher, const DistillConfig& config, const toy::ClipSampler& data,
                          Rng& rng) {
    const PartitionScheme& scheme = config.teacher;
    const bool staged = std::uniform_real_distribution<double>(0.0, 1.0)(rng) < config.staged_fraction;
    const toy::LabeledClip lc = data(rng);
    if (config.sampling == StateSampling::self_rollout) {
        if (staged) {
            Rng local(rng());
            stream::StreamBuffer buf = stream::init_from_t2v_cache(teacher, lc.cond, scheme, local, config.cfg_w);
            return staged_segment(scheme, std::move(buf.frames), lc.cond);
        }
        const int segment = 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(scheme.N));
        SegmentState st = uniform_segment(scheme, 1, gaussian_clip(scheme.B(), teacher.frame_shape(), rng), lc.cond);
        for (int i = 1; i < segment; ++i) {
            Clip next = teacher_segment_rollout(teacher, st, scheme.s, config.cfg_w);
            st = uniform_segment(scheme, i + 1, std::move(next), lc.cond);
        }
        return st;
    }
    Clip blank(scheme.B(), lc.clip.frame_shape());
    SegmentState st = staged ? staged_segment(scheme, std::move(blank), lc.cond)
                             : uniform_segment(scheme, 1 + static_cast<int>(rng() % static_cast<std::uint64_t>(scheme.N)),
                                               std::move(blank), lc.cond);
    st.x = train::make_training_example_at(lc.clip, NoiseVector(st.lo), st.K, lc.cond, rng, config.sigma_min).x_tau;
    return st;
}

double batch_loss(const TrainableVelocity& student, const std::vector<Target>& batch, nn::Var* graph) {
    std::vector<Clip> x;
    std::vector<NoiseVector> tau;
    std::vector<ConditionId> cond;
    std::vector<Clip> start;
    std::vector<Clip> endpoint;
    Eigen::VectorXd dtau(static_cast<Eigen::Index>(batch.size() * batch.front().state.lo.size()));
    std::vector<bool> mask;
    Eigen::Index r = 0;
    for (const Target& t : batch) {
        x.push_back(t.state.x);
        tau.emplace_back(t.state.lo);
        cond.push_back(t.state.cond);
        endpoint.push_back(t.endpoint);
        for (std::size_t j = 0; j < t.state.lo.size(); ++j, ++r) {
            dtau(r) = t.state.hi[j] - t.state.lo[j];
            mask.push_back(static_cast<int>(j) >= t.state.K);
        }
    }
    const nn::Var v = student.velocity_graph(x, tau, cond);
    const nn::Var end = nn::add(nn::Var(clips_to_rows(x)), nn::scale_rows(v, dtau));
    nn::Var loss = nn::masked_mse(end, clips_to_rows(endpoint), mask);
    const double value = loss.value()(0, 0);
    if (graph) *graph = std::move(loss);
    return value;
}

}  // namespace

DistillReport distill_train(const VelocityModel& teacher, TrainableVelocity& student, const DistillConfig& config,
                            const toy::ClipSampler& data) {
    config.validate();
    if (teacher.frame_shape() != student.frame_shape()) throw std::invalid_argument("distill: teacher and student frame shapes differ");
    const auto* teacher_dit = dynamic_cast<const model::TimeVaryingDiT*>(&teacher);
    const auto* student_dit = dynamic_cast<const model::TimeVaryingDiT*>(&student);
    if (teacher_dit && student_dit && !(teacher_dit->config() == student_dit->config())) {
        throw std::invalid_argument("distill: teacher and student configs differ");
    }
    const auto start = std::chrono::steady_clock::now();
    DistillReport report;
    report.teacher_hash = frozen_hash(teacher);

    Rng rng(config.seed);
    auto draw_batch = [&] {
        nn::NoGradGuard no_grad;
        std::vector<Target> batch;
        batch.reserve(static_cast<std::size_t>(config.batch_size));
        for (int b = 0; b < config.batch_size; ++b) {
            SegmentState st = sample_state(teacher, config, data, rng);
            Clip end = teacher_segment_rollout(teacher, st, config.teacher.s, config.cfg_w);
            batch.push_back({std::move(st), std::move(end)});
        }
        return batch;
    };

    const std::vector<Target> probe = draw_batch();
    {
        nn::NoGradGuard no_grad;
        report.initial_loss = batch_loss(student, probe, nullptr);
    }
    spdlog::info("distill: {} iterations, teacher {}, cfg {}, initial loss {:.6f}", config.iterations,
                 config.teacher.to_string(), config.cfg_w, report.initial_loss);

    nn::Adam opt(config.learning_rate);
    report.curve.reserve(static_cast<std::size_t>(config.iterations));
    for (long it = 0; it < config.iterations; ++it) {
        const std::vector<Target> batch = draw_batch();
        student.parameters().zero_grad();
        nn::Var loss;
        const double value = batch_loss(student, batch, &loss);
        if (!std::isfinite(value)) throw train::DivergenceError("distillation diverged at iteration " + std::to_string(it));
        nn::backward(loss);
        opt.step(student.parameters());
        report.curve.push_back(value);
        if (config.log_every > 0 && (it + 1) % config.log_every == 0) {
            spdlog::debug("distill: iteration {} loss {:.6f}", it + 1, value);
        }
    }

    {
        nn::NoGradGuard no_grad;
        report.final_loss = batch_loss(student, probe, nullptr);
    }
    if (report.teacher_hash != frozen_hash(teacher)) throw std::logic_error("distill: teacher parameters changed");
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    spdlog::info("distill: done in {:.1f}s, loss {:.6f} -> {:.6f}", report.seconds, report.initial_loss, report.final_loss);
    return report;
}

model::TimeVaryingDiT student_from_teacher(const model::TimeVaryingDiT& teacher) {
    model::TimeVaryingDiT student(teacher.config());
    copy_parameters(teacher.parameters(), student.parameters());
    return student;
}

stream::StreamResult student_stream(const VelocityModel& student, const PartitionScheme& scheme,
                                    const std::vector<stream::PromptChange>& schedule, long n_frames, Rng& rng) {
    if (scheme.s != 1) throw std::invalid_argument("student_stream: student schemes have s = 1");
    return stream::run_stream(student, scheme, schedule, n_frames, 1.0, rng);
}

}  // namespace streamdit::distill
