#include "streamdit/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <limits>
#include <sstream>
#include <stdexcept>

#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "streamdit/toyworld.hpp"

namespace streamdit::eval {

namespace {

void require_frames(const Clip& frames, int n, const char* what) {
    if (frames.frames() < n) throw std::invalid_argument(std::string(what) + ": too few frames");
}

double mean_abs_diff(const Clip& frames, int t) {
    auto a = frames.frame(t);
    auto b = frames.frame(t + 1);
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += std::abs(b[k] - a[k]);
    return s / static_cast<double>(a.size());
}

ConditionId scheduled_at(const std::vector<stream::PromptChange>& schedule, long frame) {
    ConditionId cond = schedule.front().cond;
    for (const auto& p : schedule)
        if (p.start_frame <= frame) cond = p.cond;
    return cond;
}

}  // namespace

double flicker(const Clip& frames) {
    require_frames(frames, 3, "flicker");
    double s = 0.0;
    for (int t = 1; t + 1 < frames.frames(); ++t) {
        auto p = frames.frame(t - 1);
        auto c = frames.frame(t);
        auto n = frames.frame(t + 1);
        for (std::size_t k = 0; k < c.size(); ++k) s += std::abs(n[k] - 2.0 * c[k] + p[k]);
    }
    return s / (static_cast<double>(frames.frames() - 2) * static_cast<double>(frames.frame_size()));
}

double dynamic_degree(const Clip& frames) {
    require_frames(frames, 2, "dynamic_degree");
    double s = 0.0;
    for (int t = 0; t + 1 < frames.frames(); ++t) s += mean_abs_diff(frames, t);
    return s / static_cast<double>(frames.frames() - 1);
}

double boundary_discontinuity(const Clip& frames, int chunk_size) {
    require_frames(frames, 2, "boundary_discontinuity");
    if (chunk_size < 1) throw std::invalid_argument("boundary_discontinuity: chunk size must be positive");
    if (chunk_size == 1) return 1.0;
    double across = 0.0, within = 0.0;
    int n_across = 0, n_within = 0;
    for (int t = 0; t + 1 < frames.frames(); ++t) {
        const double d = mean_abs_diff(frames, t);
        if ((t + 1) % chunk_size == 0) {
            across += d;
            ++n_across;
        } else {
            within += d;
            ++n_within;
        }
    }
    if (n_across == 0) return 1.0;
    const double a = across / n_across;
    const double w = n_within > 0 ? within / n_within : 0.0;
    if (w == 0.0) return a == 0.0 ? 1.0 : std::numeric_limits<double>::infinity();
    return a / w;
}

double condition_accuracy(const Clip& frames, int chunk_size, const std::vector<stream::PromptChange>& schedule, int window,
                          int* scored) {
    if (schedule.empty()) throw std::invalid_argument("condition_accuracy: empty schedule");
    if (window < 3) throw std::invalid_argument("condition_accuracy: window must hold at least 3 frames");
    require_frames(frames, window, "condition_accuracy");
    int hits = 0;
    int total = 0;
    for (int t = 0; t + window <= frames.frames(); ++t) {
        bool skip = false;
        for (std::size_t i = 1; i < schedule.size(); ++i) {
            const long lo = schedule[i].start_frame;
            const long hi = lo + chunk_size;
            if (t < hi && t + window > lo) skip = true;
        }
        if (skip) continue;
        const ConditionId want = scheduled_at(schedule, t);
        if (want.is_null()) continue;
        ++total;
        const toy::SpriteClass cls = toy::SpriteClass::from_id(want);
        const Clip w = frames.slice(t, window);
        try {
            const auto track = toy::centroid_track(w);
            const auto dir = toy::as_direction(toy::infer_direction(track));
            const auto shape = toy::infer_shape(w);
            if (dir && shape && *shape == cls.shape && toy::same_axis(*dir, cls.direction)) ++hits;
        } catch (const std::domain_error&) {
            // a frame without a visible sprite counts as a miss
        }
    }
    if (scored) *scored = total;
    return total > 0 ? static_cast<double>(hits) / total : 0.0;
}

StreamMetrics compute_stream_metrics(const Clip& frames, int chunk_size, const std::vector<stream::PromptChange>& schedule,
                                     int window) {
    require_frames(frames, 3, "compute_stream_metrics");
    StreamMetrics m;
    m.flicker = flicker(frames);
    m.dynamic_degree = dynamic_degree(frames);
    m.boundary_discontinuity = boundary_discontinuity(frames, chunk_size);
    if (frames.frames() >= window) m.condition_accuracy = condition_accuracy(frames, chunk_size, schedule, window, &m.windows_scored);
    return m;
}

double composite_proxy(const StreamMetrics& m, const ProxyWeights& w) {
    const double f = 1.0 / (1.0 + 10.0 * m.flicker);
    const double b = std::isfinite(m.boundary_discontinuity) ? 1.0 / (1.0 + std::abs(m.boundary_discontinuity - 1.0)) : 0.0;
    return w.accuracy * m.condition_accuracy + w.flicker * f + w.boundary * b;
}

std::vector<stream::PromptChange> eval_schedule(std::uint64_t seed, long n_frames) {
    const int first = 1 + static_cast<int>(seed % toy::kNumClasses);
    const toy::SpriteClass a = toy::SpriteClass::from_id(ConditionId{first});
    // switch to the other shape moving on the other axis
    const toy::SpriteClass b{a.shape == toy::Shape::square ? toy::Shape::cross : toy::Shape::square,
                             static_cast<toy::Direction>((static_cast<int>(a.direction) + 1) % 4)};
    return {{0, a.id()}, {n_frames / 2, b.id()}};
}

StreamMetrics evaluate_diagonal(const VelocityModel& model, int B, int T, long n_frames,
                                const std::vector<std::uint64_t>& seeds, double cfg_w) {
    if (seeds.empty()) throw std::invalid_argument("evaluate_diagonal: no seeds");
    const auto scheme = partition::preset(partition::Preset::diagonal, B, T);
    StreamMetrics mean;
    mean.boundary_discontinuity = 0.0;
    for (std::uint64_t seed : seeds) {
        Rng rng(seed);
        const auto schedule = eval_schedule(seed, n_frames);
        const auto result = stream::run_stream(model, scheme, schedule, n_frames, cfg_w, rng);
        const StreamMetrics m = compute_stream_metrics(result.frames, 1, schedule);
        mean.flicker += m.flicker;
        mean.dynamic_degree += m.dynamic_degree;
        mean.boundary_discontinuity += m.boundary_discontinuity;
        mean.condition_accuracy += m.condition_accuracy;
        mean.windows_scored += m.windows_scored;
    }
    const double n = static_cast<double>(seeds.size());
    mean.flicker /= n;
    mean.dynamic_degree /= n;
    mean.boundary_discontinuity /= n;
    mean.condition_accuracy /= n;
    return mean;
}

AblationTable ablation_run(const AblationConfig& config,
                           const std::vector<std::pair<std::string, const VelocityModel*>>& pretrained) {
    if (config.mixtures.size() < 2) throw std::invalid_argument("ablation_run: need at least two mixtures");
    AblationTable table;
    for (const Mixture& mix : config.mixtures) {
        AblationRow row;
        row.mixture = mix.name;
        const VelocityModel* model = nullptr;
        for (const auto& [name, m] : pretrained)
            if (name == mix.name) model = m;

        std::optional<model::TimeVaryingDiT> trained;
        if (model == nullptr) {
            train::TrainConfig tc = config.train;
            tc.schemes = train::chunk_mixture(mix.chunk_sizes, config.model.frames, config.eval_T);
            tc.metrics_path.reset();
            trained.emplace(config.model);
            const auto report = train::train(*trained, toy::make_sampler(config.model.frames), tc);
            row.final_val_loss = report.final_val_loss;
            model = &*trained;
        } else {
            row.final_val_loss = std::numeric_limits<double>::quiet_NaN();
        }
        row.metrics = evaluate_diagonal(*model, config.model.frames, config.eval_T, config.eval_frames, config.eval_seeds,
                                        config.cfg_w);
        row.proxy = composite_proxy(row.metrics, config.weights);
        spdlog::info("ablation: {} proxy {:.4f}", mix.name, row.proxy);
        table.rows.push_back(row);
    }
    double lo = table.rows.front().proxy, hi = lo;
    for (const auto& r : table.rows) {
        lo = std::min(lo, r.proxy);
        hi = std::max(hi, r.proxy);
    }
    if (hi - lo < 0.01) table.note = "proxies differ by less than 0.01; the budget may be too small to separate mixtures";
    return table;
}

std::string AblationTable::to_text() const {
    std::ostringstream os;
    os << fmt::format("{:<20} {:>9} {:>9} {:>9} {:>9} {:>9} {:>9}\n", "mixture", "accuracy", "flicker", "dynamic",
                      "boundary", "val_loss", "proxy");
    for (const auto& r : rows) {
        os << fmt::format("{:<20} {:>9.4f} {:>9.4f} {:>9.4f} {:>9.4f} {:>9.4f} {:>9.4f}\n", r.mixture,
                          r.metrics.condition_accuracy, r.metrics.flicker, r.metrics.dynamic_degree,
                          r.metrics.boundary_discontinuity, r.final_val_loss, r.proxy);
    }
    if (!note.empty()) os << "note: " << note << '\n';
    return os.str();
}

std::string AblationTable::to_jsonl() const {
    std::ostringstream os;
    for (const auto& r : rows) {
        nlohmann::json j{{"mixture", r.mixture},
                         {"condition_accuracy", r.metrics.condition_accuracy},
                         {"flicker", r.metrics.flicker},
                         {"dynamic_degree", r.metrics.dynamic_degree},
                         {"boundary_discontinuity", r.metrics.boundary_discontinuity},
                         {"proxy", r.proxy}};
        if (std::isfinite(r.final_val_loss)) j["final_val_loss"] = r.final_val_loss;
        os << j.dump() << '\n';
    }
    return os.str();
}

}  // namespace streamdit::eval
