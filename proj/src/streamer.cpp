#include "streamdit/streamer.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "streamdit/flowcore.hpp"

namespace streamdit::stream {

using partition::PartitionScheme;

AnalyticVelocity::AnalyticVelocity(FrameTensor target) : fallback_(std::move(target)) {}

AnalyticVelocity::AnalyticVelocity(std::map<int, FrameTensor> targets, FrameTensor fallback)
    : targets_(std::move(targets)), fallback_(std::move(fallback)) {}

const FrameTensor& AnalyticVelocity::target(ConditionId cond) const {
    const auto it = targets_.find(cond.value());
    return it == targets_.end() ? fallback_ : it->second;
}

Clip AnalyticVelocity::velocity(const Clip& x, const NoiseVector& tau, ConditionId cond) const {
    const FrameTensor& x1 = target(cond);
    if (x1.shape() != x.frame_shape()) throw std::invalid_argument("analytic velocity: frame shape mismatch");
    if (tau.size() != x.frames()) throw std::invalid_argument("analytic velocity: tau length mismatch");
    Clip u(x.frames(), x.frame_shape());
    for (int j = 0; j < x.frames(); ++j) {
        if (tau[j] >= 1.0) continue;
        const double inv = 1.0 / (1.0 - tau[j]);
        auto out = u.frame(j);
        auto in = x.frame(j);
        auto t = x1.data();
        for (std::size_t k = 0; k < out.size(); ++k) out[k] = (t[k] - in[k]) * inv;
    }
    return u;
}

void check_invariants(const StreamBuffer& buf, double tol) {
    const PartitionScheme& s = buf.scheme;
    auto fail = [](const std::string& what) { throw std::logic_error("stream buffer invariant: " + what); };
    if (buf.frames.frames() != s.B() || buf.tau.size() != s.B()) fail("buffer length differs from B");
    if (buf.micro < 0 || buf.micro > s.s) fail("micro counter outside [0, s]");
    for (int k = 0; k < s.K; ++k)
        if (buf.tau[k] != 1.0) fail("reference frame " + std::to_string(k) + " is not clean");
    for (int j = 1; j <= s.N; ++j) {
        const double want = partition::staged_level(s, j, buf.micro, buf.floor);
        for (int f = 0; f < s.c; ++f) {
            const int idx = s.K + (j - 1) * s.c + f;
            if (std::abs(buf.tau[idx] - want) > tol) {
                std::ostringstream os;
                os << "frame " << idx << " at tau " << buf.tau[idx] << ", grid says " << want;
                fail(os.str());
            }
        }
    }
    for (int i = 1; i < s.B(); ++i)
        if (buf.tau[i] > buf.tau[i - 1] + tol) fail("tau increases toward the entry end");
    if (buf.frames_emitted + (s.B() - s.K) != buf.stats.noise_frames_pushed + buf.stats.initial_frames) {
        fail("emitted frames do not balance pushed frames");
    }
}

Clip guided_velocity(const VelocityModel& model, const Clip& x, const NoiseVector& tau, ConditionId cond, double cfg_w,
                     long* forwards) {
    Clip u = model.velocity(x, tau, cond);
    if (forwards) ++*forwards;
    if (cfg_w == 1.0) return u;
    const Clip uu = model.velocity(x, tau, ConditionId::null());
    if (forwards) ++*forwards;
    return flow::cfg_combine(u, uu, cfg_w);
}

namespace {

std::vector<double> level_steps(const PartitionScheme& s, int micro, double floor) {
    std::vector<double> dtau(static_cast<std::size_t>(s.B()), 0.0);
    for (int j = 1; j <= s.N; ++j) {
        const double d = partition::staged_level(s, j, micro + 1, floor) - partition::staged_level(s, j, micro, floor);
        for (int f = 0; f < s.c; ++f) dtau[static_cast<std::size_t>(s.K + (j - 1) * s.c + f)] = d;
    }
    return dtau;
}

void copy_frames(const Clip& from, int from_first, Clip& to, int to_first, int count) {
    for (int i = 0; i < count; ++i) to.set_frame(to_first + i, from.frame(from_first + i));
}

}  // namespace

double cold_start_level(const PartitionScheme& scheme, int k) {
    if (k < 0 || k > scheme.T()) throw std::out_of_range("cold_start_level: step outside [0, T]");
    if (k == scheme.T()) return 1.0;
    return partition::staged_level(scheme, scheme.N - k / scheme.s, k % scheme.s);
}

StreamBuffer init_from_t2v_cache(const VelocityModel& model, ConditionId cond, const PartitionScheme& scheme, Rng& rng,
                                 double cfg_w) {
    scheme.validate();
    const int B = scheme.B();
    const int T = scheme.T();
    StreamBuffer buf;
    buf.scheme = scheme;
    buf.cond = cond;
    buf.stats.initial_frames = B - scheme.K;

    const FrameShape shape = model.frame_shape();
    Clip x = gaussian_clip(B, shape, rng);
    if (scheme.N == 1 && scheme.K == 0) {
        buf.frames = std::move(x);
        buf.tau = partition::staged_taus(scheme, 0);
        check_invariants(buf);
        return buf;
    }

    // Uniform generation on the same level grid the chunks walk through.
    std::vector<Clip> cache;
    cache.reserve(static_cast<std::size_t>(T) + 1);
    cache.push_back(x);
    for (int k = 0; k < T; ++k) {
        const double lo = cold_start_level(scheme, k);
        const double hi = cold_start_level(scheme, k + 1);
        const Clip u = guided_velocity(model, x, NoiseVector::uniform(B, lo), cond, cfg_w, &buf.stats.forwards);
        x = flow::buffered_euler_step(x, u, std::vector<double>(static_cast<std::size_t>(B), hi - lo));
        cache.push_back(x);
    }

    buf.frames = Clip(B, shape);
    copy_frames(cache.back(), 0, buf.frames, 0, scheme.K);
    for (int j = 1; j <= scheme.N; ++j) {
        const int first = scheme.K + (j - 1) * scheme.c;
        copy_frames(cache[static_cast<std::size_t>(scheme.s * (scheme.N - j))], first, buf.frames, first, scheme.c);
    }
    buf.tau = partition::staged_taus(scheme, 0);
    check_invariants(buf);
    return buf;
}

StreamBuffer init_from_video(const Clip& video, const PartitionScheme& scheme, double strength, ConditionId cond, Rng& rng,
                             double sigma_min) {
    scheme.validate();
    if (!(strength > 0.0 && strength <= 1.0)) throw std::invalid_argument("init_from_video: strength outside (0, 1]");
    if (video.frames() < scheme.B()) throw std::invalid_argument("init_from_video: need at least B input frames");
    StreamBuffer buf;
    buf.scheme = scheme;
    buf.cond = cond;
    buf.floor = 1.0 - strength;
    buf.stats.initial_frames = scheme.B() - scheme.K;
    buf.tau = partition::staged_taus(scheme, 0, buf.floor);
    const Clip source = video.slice(0, scheme.B());
    buf.frames = flow::buffered_interpolate(source, gaussian_clip(scheme.B(), video.frame_shape(), rng), buf.tau, sigma_min);
    // references carry the exact input
    copy_frames(source, 0, buf.frames, 0, scheme.K);
    check_invariants(buf);
    return buf;
}

void denoise_micro_step(StreamBuffer& buf, const VelocityModel& model, double cfg_w) {
    check_invariants(buf);
    if (buf.micro == buf.scheme.s) throw std::logic_error("denoise_micro_step: exit chunk is clean; advance first");
    const Clip u = guided_velocity(model, buf.frames, buf.tau, buf.cond, cfg_w, &buf.stats.forwards);
    buf.frames = flow::buffered_euler_step(buf.frames, u, level_steps(buf.scheme, buf.micro, buf.floor));
    ++buf.micro;
    ++buf.stats.micro_steps;
    // Recomputed from the grid so levels never drift.
    buf.tau = partition::staged_taus(buf.scheme, buf.micro, buf.floor);
}

ChunkOut advance(StreamBuffer& buf, Rng& rng, const ChunkSource& source) {
    const PartitionScheme& s = buf.scheme;
    if (buf.micro != s.s) throw std::logic_error("advance: exit chunk has not finished its micro steps");
    for (int f = 0; f < s.c; ++f) {
        if (std::abs(buf.tau[s.K + f] - 1.0) > 1e-9) throw std::logic_error("advance: exit chunk is not clean");
    }
    ChunkOut out{buf.frames.slice(s.K, s.c), buf.frames_emitted, buf.cond};

    Clip next(s.B(), buf.frames.frame_shape());
    if (s.K > 0) {
        // most recent K clean frames: tail of (old references ++ popped chunk)
        Clip history = buf.frames.slice(0, s.K);
        history.append(out.frames);
        copy_frames(history, history.frames() - s.K, next, 0, s.K);
    }
    copy_frames(buf.frames, s.K + s.c, next, s.K, s.B() - s.K - s.c);
    buf.frames_emitted += s.c;
    Clip fresh = source ? source(buf, rng) : gaussian_clip(s.c, buf.frames.frame_shape(), rng);
    if (fresh.frames() != s.c || fresh.frame_shape() != buf.frames.frame_shape()) {
        throw std::logic_error("advance: chunk source returned the wrong shape");
    }
    copy_frames(fresh, 0, next, s.B() - s.c, s.c);
    buf.stats.noise_frames_pushed += s.c;
    buf.frames = std::move(next);
    buf.micro = 0;
    buf.tau = partition::staged_taus(s, 0, buf.floor);
    check_invariants(buf);
    return out;
}

ChunkSource video_source(Clip video, double sigma_min) {
    return [video = std::move(video), sigma_min](const StreamBuffer& buf, Rng& rng) {
        const PartitionScheme& s = buf.scheme;
        // frames_emitted already counts the chunk just popped
        const long first = buf.frames_emitted + s.B() - s.c;
        Clip clean(s.c, video.frame_shape());
        for (int f = 0; f < s.c; ++f) {
            if (first + f < video.frames()) clean.set_frame(f, video.frame(static_cast<int>(first + f)));
        }
        return flow::buffered_interpolate(clean, gaussian_clip(s.c, video.frame_shape(), rng),
                                          NoiseVector::uniform(s.c, buf.floor), sigma_min);
    };
}

StreamSession::StreamSession(const VelocityModel& model, StreamBuffer buffer, double cfg_w, Rng rng, ChunkSource source)
    : model_(model), buf_(std::move(buffer)), cfg_w_(cfg_w), rng_(rng), source_(std::move(source)) {
    if (!(cfg_w >= 0.0)) throw std::invalid_argument("stream: negative guidance weight");
    check_invariants(buf_);
}

long StreamSession::set_condition(ConditionId cond) {
    buf_.cond = cond;
    return buf_.stats.micro_steps;
}

std::optional<ChunkOut> StreamSession::step() {
    denoise_micro_step(buf_, model_, cfg_w_);
    if (buf_.micro < buf_.scheme.s) return std::nullopt;
    return advance(buf_, rng_, source_);
}

namespace {

void check_schedule(const std::vector<PromptChange>& schedule) {
    if (schedule.empty()) throw std::invalid_argument("prompt schedule is empty");
    if (schedule.front().start_frame != 0) throw std::invalid_argument("prompt schedule must start at frame 0");
    for (std::size_t i = 1; i < schedule.size(); ++i) {
        if (schedule[i].start_frame <= schedule[i - 1].start_frame) {
            throw std::invalid_argument("prompt schedule indices must be strictly increasing");
        }
    }
}

}  // namespace

StreamResult run_from(const VelocityModel& model, StreamBuffer buffer, const std::vector<PromptChange>& schedule,
                      long n_frames, double cfg_w, Rng& rng, ChunkSource source) {
    check_schedule(schedule);
    if (n_frames < 1) throw std::invalid_argument("run_stream: n_frames must be >= 1");
    StreamResult result;
    result.frames = Clip(static_cast<int>(n_frames), buffer.frames.frame_shape());
    result.switch_micro_step.assign(schedule.size(), -1);
    buffer.cond = schedule.front().cond;
    result.switch_micro_step[0] = buffer.stats.micro_steps;

    StreamSession session(model, std::move(buffer), cfg_w, std::move(rng), std::move(source));
    std::size_t next = 1;
    long written = 0;
    while (written < n_frames) {
        while (next < schedule.size() && session.buffer().frames_emitted >= schedule[next].start_frame) {
            result.switch_micro_step[next] = session.set_condition(schedule[next].cond);
            ++next;
        }
        const auto chunk = session.step();
        if (!chunk) continue;
        for (int f = 0; f < chunk->frames.frames() && written < n_frames; ++f, ++written) {
            result.frames.set_frame(static_cast<int>(written), chunk->frames.frame(f));
            result.cond_at_pop.push_back(chunk->cond);
        }
    }
    result.stats = session.buffer().stats;
    rng = session.rng();
    return result;
}

StreamResult run_stream(const VelocityModel& model, const PartitionScheme& scheme, const std::vector<PromptChange>& schedule,
                        long n_frames, double cfg_w, Rng& rng) {
    check_schedule(schedule);
    StreamBuffer buf = init_from_t2v_cache(model, schedule.front().cond, scheme, rng, cfg_w);
    return run_from(model, std::move(buf), schedule, n_frames, cfg_w, rng);
}

StreamResult chunk_extension_mode(const VelocityModel& model, ConditionId cond, int B, int K, int T, int n_extensions,
                                  double cfg_w, Rng& rng) {
    if (K < 1 || K >= B) throw std::invalid_argument("chunk extension: need 1 <= K < B");
    if (n_extensions < 0) throw std::invalid_argument("chunk extension: negative extension count");
    const PartitionScheme scheme{K, 1, B - K, T, {}};
    return run_stream(model, scheme, {{0, cond}}, static_cast<long>(n_extensions + 1) * (B - K), cfg_w, rng);
}

StreamResult video_to_video(const VelocityModel& model, const Clip& video, const PartitionScheme& scheme, double strength,
                            ConditionId cond, double cfg_w, Rng& rng, double sigma_min) {
    StreamBuffer buf = init_from_video(video, scheme, strength, cond, rng, sigma_min);
    return run_from(model, std::move(buf), {{0, cond}}, video.frames() - scheme.K, cfg_w, rng, video_source(video, sigma_min));
}

}  // namespace streamdit::stream
