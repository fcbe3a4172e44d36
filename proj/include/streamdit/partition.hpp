#pragma once

#include <functional>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "streamdit/random.hpp"
#include "streamdit/tensor.hpp"

namespace streamdit::partition {

/// Noise schedule gamma(t) = t^k mapping [0,1] onto [0,1]; k = 1 is linear.
struct PowerSchedule {
    double exponent = 1.0;

    double operator()(double t) const;
    bool is_linear() const { return exponent == 1.0; }
    std::string name() const { return is_linear() ? "linear" : "power"; }
    bool operator==(const PowerSchedule&) const = default;
};

/// K reference frames followed by N chunks of c frames, each chunk spending
/// s micro steps at every buffer position. B = K + N c, T = s N.
struct PartitionScheme {
    int K = 0;
    int N = 1;
    int c = 1;
    int s = 1;
    PowerSchedule gamma;

    int B() const { return K + N * c; }
    int T() const { return s * N; }
    void validate() const;
    std::string to_string() const;
    bool operator==(const PartitionScheme&) const = default;
};

struct Dims {
    int B = 0;
    int T = 0;
    bool operator==(const Dims&) const = default;
};

Dims derive_dims(const PartitionScheme& scheme);

/// Segment i (1-based) covers (boundaries[i-1], boundaries[i]].
struct TauGrid {
    std::vector<double> boundaries;

    int segments() const { return static_cast<int>(boundaries.size()) - 1; }
    std::pair<double, double> interval(int i) const;
};

TauGrid chunk_segments(const PartitionScheme& scheme);

/// One uniform draw per segment on ((i-1)/N, i/N]; element i-1 holds segment i.
std::vector<double> sample_segment_taus(int N, Rng& rng);

using ScheduleFn = std::function<double(double)>;

/// Stepwise schedule: per segment draw t_i on ((i-1)/N, i/N] and use gamma(t_i).
/// Rejects gamma that fails a sampled monotonicity / endpoint check.
std::vector<double> stepwise_schedule(const ScheduleFn& gamma, int N, Rng& rng);

/// Lays per-segment levels out in buffer order: reference frames get 1, chunk j
/// (1-based from the exit end) takes segment N + 1 - j for all of its c frames.
NoiseVector layout_segment_levels(const PartitionScheme& scheme, const std::vector<double>& levels);

/// Training noise levels for one buffer, drawn under the scheme's gamma.
NoiseVector sample_training_taus(const PartitionScheme& scheme, Rng& rng);

/// Inference grid: level of chunk j (1-based from the exit end) after m micro
/// steps, affinely mapped onto [floor, 1].
double staged_level(const PartitionScheme& scheme, int chunk, int micro, double floor = 0.0);
NoiseVector staged_taus(const PartitionScheme& scheme, int micro, double floor = 0.0);

enum class Preset { uniform, diagonal, streamdit };

Preset parse_preset(std::string_view name);
PartitionScheme preset(Preset which, int B, int T, int c = 1);

/// "K,N,c,s"
PartitionScheme parse_scheme(std::string_view text);
/// "linear" or "power:k"
PowerSchedule parse_gamma(std::string_view text);

void to_json(nlohmann::json& j, const PowerSchedule& g);
void from_json(const nlohmann::json& j, PowerSchedule& g);
void to_json(nlohmann::json& j, const PartitionScheme& s);
void from_json(const nlohmann::json& j, PartitionScheme& s);

}  // namespace streamdit::partition
