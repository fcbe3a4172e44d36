#pragma once

#include <functional>
#include <map>
#include <optional>
#include <vector>

#include "streamdit/model.hpp"
#include "streamdit/partition.hpp"

// Stream-queue inference. Canonical layout: index 0 is the exit end. The first
// K slots hold clean reference frames (tau = 1); chunk j (1-based from the exit
// end) occupies [K + (j-1)c, K + jc) and sits at its staged level.
namespace streamdit::stream {

/// Test velocity u = (x1 - x) / (1 - tau) toward a fixed frame per condition;
/// zero at tau = 1. With sigma_min = 0 Euler steps land on x1 exactly.
class AnalyticVelocity : public VelocityModel {
public:
    explicit AnalyticVelocity(FrameTensor target);
    AnalyticVelocity(std::map<int, FrameTensor> targets, FrameTensor fallback);

    Clip velocity(const Clip& x, const NoiseVector& tau, ConditionId cond) const override;
    FrameShape frame_shape() const override { return fallback_.shape(); }
    const FrameTensor& target(ConditionId cond) const;

private:
    std::map<int, FrameTensor> targets_;
    FrameTensor fallback_;
};

struct StreamStats {
    long forwards = 0;
    long micro_steps = 0;
    long noise_frames_pushed = 0;
    long initial_frames = 0;  // non-reference frames at initialisation
};

struct StreamBuffer {
    Clip frames;
    NoiseVector tau;
    partition::PartitionScheme scheme;
    int micro = 0;
    ConditionId cond;
    long frames_emitted = 0;
    double floor = 0.0;  // lowest level on the grid; 0 unless initialised from video
    StreamStats stats;
};

/// Throws std::logic_error describing the first violated invariant.
void check_invariants(const StreamBuffer& buf, double tol = 1e-12);

struct ChunkOut {
    Clip frames;
    long first_index = 0;  // stream index of frames[0]
    ConditionId cond;
};

/// Forward with classifier-free guidance; one pass when cfg_w == 1, two otherwise.
Clip guided_velocity(const VelocityModel& model, const Clip& x, const NoiseVector& tau, ConditionId cond, double cfg_w,
                     long* forwards = nullptr);

/// Level of the whole buffer after k of T uniform cold-start steps: the level a
/// chunk reaches after the same number of micro steps in the stream.
double cold_start_level(const partition::PartitionScheme& scheme, int k);

/// Uniform generation over B frames for T steps along cold_start_level,
/// caching each state; chunk j is taken from the cached state after s(N-j)
/// steps and references from the final state. N = 1 with K = 0 starts from
/// pure noise without any forward.
StreamBuffer init_from_t2v_cache(const VelocityModel& model, ConditionId cond, const partition::PartitionScheme& scheme,
                                 Rng& rng, double cfg_w = 1.0);

/// Noises input frames to the staged grid mapped onto [1 - strength, 1];
/// references are the clean first K input frames.
StreamBuffer init_from_video(const Clip& video, const partition::PartitionScheme& scheme, double strength, ConditionId cond,
                             Rng& rng, double sigma_min = flow::kDefaultSigmaMin);

void denoise_micro_step(StreamBuffer& buf, const VelocityModel& model, double cfg_w);

/// Source of frames pushed at the entry end; the default pushes Gaussian noise.
using ChunkSource = std::function<Clip(const StreamBuffer& buf, Rng& rng)>;

ChunkOut advance(StreamBuffer& buf, Rng& rng, const ChunkSource& source = {});

/// Pushes source frames noised to the buffer floor; past the end of the
/// source, pushes noise-level placeholders that are never emitted.
ChunkSource video_source(Clip video, double sigma_min = flow::kDefaultSigmaMin);

/// The generation loop shared by offline streaming and the server.
class StreamSession {
public:
    StreamSession(const VelocityModel& model, StreamBuffer buffer, double cfg_w, Rng rng, ChunkSource source = {});

    /// Takes effect at the next micro step. Returns the index of that micro step.
    long set_condition(ConditionId cond);
    ConditionId condition() const { return buf_.cond; }

    /// One micro step; pops and returns a chunk when the exit chunk is clean.
    std::optional<ChunkOut> step();

    const StreamBuffer& buffer() const { return buf_; }
    long micro_steps() const { return buf_.stats.micro_steps; }
    Rng& rng() { return rng_; }

private:
    const VelocityModel& model_;
    StreamBuffer buf_;
    double cfg_w_;
    Rng rng_;
    ChunkSource source_;
};

struct PromptChange {
    long start_frame = 0;  // stream frame index at which the condition should apply
    ConditionId cond;
};

struct StreamResult {
    Clip frames;
    std::vector<ConditionId> cond_at_pop;  // one per emitted frame
    std::vector<long> switch_micro_step;   // micro step index at which each schedule entry applied
    StreamStats stats;
};

/// Cold start from the T2V cache, then micro steps and advances until n_frames
/// are emitted. The condition switches at the first micro step at which
/// frames_emitted >= start_frame. The first entry must start at frame 0.
StreamResult run_stream(const VelocityModel& model, const partition::PartitionScheme& scheme,
                        const std::vector<PromptChange>& schedule, long n_frames, double cfg_w, Rng& rng);

/// Streams from an already initialised buffer (e.g. video-to-video).
StreamResult run_from(const VelocityModel& model, StreamBuffer buffer, const std::vector<PromptChange>& schedule,
                      long n_frames, double cfg_w, Rng& rng, ChunkSource source = {});

/// Autoregressive extension: scheme (K, 1, B - K, T). Returns (1 + n_extensions)(B - K) frames.
StreamResult chunk_extension_mode(const VelocityModel& model, ConditionId cond, int B, int K, int T, int n_extensions,
                                  double cfg_w, Rng& rng);

/// Video-to-video: every input frame past the references is re-generated under `cond`.
StreamResult video_to_video(const VelocityModel& model, const Clip& video, const partition::PartitionScheme& scheme,
                            double strength, ConditionId cond, double cfg_w, Rng& rng,
                            double sigma_min = flow::kDefaultSigmaMin);

}  // namespace streamdit::stream
