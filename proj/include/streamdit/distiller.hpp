#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "streamdit/model.hpp"
#include "streamdit/partition.hpp"
#include "streamdit/streamer.hpp"
#include "streamdit/toyworld.hpp"

// Multistep distillation: one student forward replaces s guided teacher micro
// steps over a segment.
namespace streamdit::distill {

/// A buffer about to traverse one segment. Frame j moves from level lo[j] to
/// hi[j]; reference frames have lo = hi = 1.
struct SegmentState {
    Clip x;
    std::vector<double> lo;
    std::vector<double> hi;
    ConditionId cond;
    int K = 0;
};

/// Staged stream layout at micro step 0: chunk j goes from its segment start
/// to the next chunk's start.
SegmentState staged_segment(const partition::PartitionScheme& scheme, Clip x, ConditionId cond);

/// Uniform cold-start layout: every frame crosses segment i (1-based) of N.
SegmentState uniform_segment(const partition::PartitionScheme& scheme, int segment, Clip x, ConditionId cond);

/// s guided micro steps along the segment. With linear interpolation between
/// lo and hi this is exactly s streamer micro steps.
Clip teacher_segment_rollout(const VelocityModel& teacher, const SegmentState& state, int s, double cfg_w,
                             long* forwards = nullptr);

/// One conditional forward and one Euler step across the whole segment.
Clip student_one_step(const VelocityModel& student, const SegmentState& state, long* forwards = nullptr);

enum class StateSampling { ground_truth, self_rollout };

struct DistillConfig {
    partition::PartitionScheme teacher{0, 8, 2, 4, {}};
    double cfg_w = 2.0;
    long iterations = 2000;
    int batch_size = 4;
    double learning_rate = 2e-4;
    double staged_fraction = 0.5;  // the rest are uniform cold-start segments
    StateSampling sampling = StateSampling::ground_truth;
    double sigma_min = flow::kDefaultSigmaMin;
    std::uint64_t seed = 0;
    long log_every = 100;

    partition::PartitionScheme student_scheme() const;
    void validate() const;
};

void to_json(nlohmann::json& j, const DistillConfig& c);
void from_json(const nlohmann::json& j, DistillConfig& c);

struct DistillReport {
    double initial_loss = 0.0;  // mean over the first batch, before any update
    double final_loss = 0.0;    // same fixed batch after training
    std::vector<double> curve;
    std::optional<std::uint64_t> teacher_hash;
    double seconds = 0.0;
};

/// Parameter hash when the model exposes parameters.
std::optional<std::uint64_t> frozen_hash(const VelocityModel& model);

/// Endpoint MSE between student_one_step and teacher_segment_rollout over
/// non-reference frames. Throws if the teacher changes or the loss diverges.
DistillReport distill_train(const VelocityModel& teacher, TrainableVelocity& student, const DistillConfig& config,
                            const toy::ClipSampler& data);

/// Copies the teacher for use as the student initialisation. Throws when the
/// configs differ.
model::TimeVaryingDiT student_from_teacher(const model::TimeVaryingDiT& teacher);

/// run_stream with s = 1 and no guidance.
stream::StreamResult student_stream(const VelocityModel& student, const partition::PartitionScheme& scheme,
                                    const std::vector<stream::PromptChange>& schedule, long n_frames, Rng& rng);

}  // namespace streamdit::distill
