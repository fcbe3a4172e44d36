#include "streamdit/partition.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include <nlohmann/json.hpp>

namespace streamdit::partition {

double PowerSchedule::operator()(double t) const {
    if (is_linear()) return t;
    return std::pow(t, exponent);
}

void PartitionScheme::validate() const {
    if (K < 0) throw std::invalid_argument("scheme: K must be non-negative");
    if (N <= 0 || c <= 0 || s <= 0) throw std::invalid_argument("scheme: N, c and s must be positive");
    if (!(gamma.exponent > 0.0) || !std::isfinite(gamma.exponent)) {
        throw std::invalid_argument("scheme: gamma exponent must be positive");
    }
}

std::string PartitionScheme::to_string() const {
    std::ostringstream os;
    os << "K=" << K << ",N=" << N << ",c=" << c << ",s=" << s;
    if (!gamma.is_linear()) os << ",gamma=t^" << gamma.exponent;
    return os.str();
}

Dims derive_dims(const PartitionScheme& scheme) {
    scheme.validate();
    return {scheme.B(), scheme.T()};
}

std::pair<double, double> TauGrid::interval(int i) const {
    if (i < 1 || i > segments()) throw std::out_of_range("TauGrid::interval: segment index");
    return {boundaries[static_cast<std::size_t>(i - 1)], boundaries[static_cast<std::size_t>(i)]};
}

TauGrid chunk_segments(const PartitionScheme& scheme) {
    scheme.validate();
    TauGrid grid;
    grid.boundaries.resize(static_cast<std::size_t>(scheme.N) + 1);
    for (int i = 0; i <= scheme.N; ++i) {
        grid.boundaries[static_cast<std::size_t>(i)] = static_cast<double>(i) / scheme.N;
    }
    return grid;
}

std::vector<double> sample_segment_taus(int N, Rng& rng) {
    if (N <= 0) throw std::invalid_argument("sample_segment_taus: N must be positive");
    std::vector<double> taus(static_cast<std::size_t>(N));
    for (int i = 1; i <= N; ++i) {
        const double lo = static_cast<double>(i - 1) / N;
        const double hi = static_cast<double>(i) / N;
        taus[static_cast<std::size_t>(i - 1)] = uniform_left_open(rng, lo, hi);
    }
    return taus;
}

namespace {

void check_schedule(const ScheduleFn& gamma) {
    constexpr int kProbes = 256;
    constexpr double kTol = 1e-12;
    if (std::abs(gamma(0.0)) > kTol || std::abs(gamma(1.0) - 1.0) > kTol) {
        throw std::invalid_argument("stepwise_schedule: gamma must map 0 -> 0 and 1 -> 1");
    }
    double prev = gamma(0.0);
    for (int k = 1; k <= kProbes; ++k) {
        const double v = gamma(static_cast<double>(k) / kProbes);
        if (!std::isfinite(v) || v < prev - kTol || v < -kTol || v > 1.0 + kTol) {
            throw std::invalid_argument("stepwise_schedule: gamma is not monotone on [0, 1]");
        }
        prev = v;
    }
}

}  // namespace

std::vector<double> stepwise_schedule(const ScheduleFn& gamma, int N, Rng& rng) {
    check_schedule(gamma);
    std::vector<double> levels = sample_segment_taus(N, rng);
    for (double& t : levels) t = std::clamp(gamma(t), 0.0, 1.0);
    return levels;
}

NoiseVector layout_segment_levels(const PartitionScheme& scheme, const std::vector<double>& levels) {
    scheme.validate();
    if (static_cast<int>(levels.size()) != scheme.N) {
        throw std::invalid_argument("layout_segment_levels: need one level per segment");
    }
    std::vector<double> tau(static_cast<std::size_t>(scheme.B()), 1.0);
    for (int j = 1; j <= scheme.N; ++j) {
        const double level = levels[static_cast<std::size_t>(scheme.N - j)];
        const int first = scheme.K + (j - 1) * scheme.c;
        for (int f = 0; f < scheme.c; ++f) tau[static_cast<std::size_t>(first + f)] = level;
    }
    return NoiseVector(std::move(tau));
}

NoiseVector sample_training_taus(const PartitionScheme& scheme, Rng& rng) {
    scheme.validate();
    if (scheme.gamma.is_linear()) return layout_segment_levels(scheme, sample_segment_taus(scheme.N, rng));
    return layout_segment_levels(scheme, stepwise_schedule(scheme.gamma, scheme.N, rng));
}

double staged_level(const PartitionScheme& scheme, int chunk, int micro, double floor) {
    if (chunk < 1 || chunk > scheme.N) throw std::out_of_range("staged_level: chunk index");
    if (micro < 0 || micro > scheme.s) throw std::out_of_range("staged_level: micro step");
    const double lo = scheme.gamma(static_cast<double>(scheme.N - chunk) / scheme.N);
    const double hi = scheme.gamma(static_cast<double>(scheme.N - chunk + 1) / scheme.N);
    double level = micro == scheme.s ? hi : lo + (hi - lo) * micro / scheme.s;
    if (floor != 0.0) level = floor + (1.0 - floor) * level;
    return level;
}

NoiseVector staged_taus(const PartitionScheme& scheme, int micro, double floor) {
    scheme.validate();
    std::vector<double> tau(static_cast<std::size_t>(scheme.B()), 1.0);
    for (int j = 1; j <= scheme.N; ++j) {
        const double level = staged_level(scheme, j, micro, floor);
        const int first = scheme.K + (j - 1) * scheme.c;
        for (int f = 0; f < scheme.c; ++f) tau[static_cast<std::size_t>(first + f)] = level;
    }
    return NoiseVector(std::move(tau));
}

Preset parse_preset(std::string_view name) {
    if (name == "uniform") return Preset::uniform;
    if (name == "diagonal") return Preset::diagonal;
    if (name == "streamdit") return Preset::streamdit;
    throw std::invalid_argument("unknown preset: " + std::string(name));
}

PartitionScheme preset(Preset which, int B, int T, int c) {
    if (B <= 0 || T <= 0) throw std::invalid_argument("preset: B and T must be positive");
    PartitionScheme scheme;
    switch (which) {
        case Preset::uniform:
            scheme = {0, 1, B, T, {}};
            break;
        case Preset::diagonal:
            if (T % B != 0) throw std::invalid_argument("preset(diagonal): B must divide T");
            scheme = {0, B, 1, T / B, {}};
            break;
        case Preset::streamdit: {
            if (c <= 0 || B % c != 0) throw std::invalid_argument("preset(streamdit): c must divide B");
            const int N = B / c;
            if (T % N != 0) throw std::invalid_argument("preset(streamdit): N = B/c must divide T");
            scheme = {0, N, c, T / N, {}};
            break;
        }
    }
    scheme.validate();
    return scheme;
}

PartitionScheme parse_scheme(std::string_view text) {
    std::vector<int> values;
    std::string token;
    std::istringstream is{std::string(text)};
    while (std::getline(is, token, ',')) {
        try {
            std::size_t used = 0;
            values.push_back(std::stoi(token, &used));
            if (used != token.size()) throw std::invalid_argument("trailing characters");
        } catch (const std::exception&) {
            throw std::invalid_argument("scheme must be K,N,c,s; got '" + std::string(text) + "'");
        }
    }
    if (values.size() != 4) throw std::invalid_argument("scheme must be K,N,c,s; got '" + std::string(text) + "'");
    PartitionScheme scheme{values[0], values[1], values[2], values[3], {}};
    scheme.validate();
    return scheme;
}

PowerSchedule parse_gamma(std::string_view text) {
    if (text == "linear") return {};
    const auto colon = text.find(':');
    if (text.substr(0, colon) != "power" || colon == std::string_view::npos) {
        throw std::invalid_argument("gamma must be 'linear' or 'power:k'");
    }
    PowerSchedule g{std::stod(std::string(text.substr(colon + 1)))};
    if (!(g.exponent > 0.0)) throw std::invalid_argument("gamma exponent must be positive");
    return g;
}

void to_json(nlohmann::json& j, const PowerSchedule& g) {
    j = nlohmann::json{{"name", g.name()}, {"exponent", g.exponent}};
}

void from_json(const nlohmann::json& j, PowerSchedule& g) {
    const auto name = j.value("name", std::string("linear"));
    if (name == "linear") {
        g = {};
    } else if (name == "power") {
        g.exponent = j.at("exponent").get<double>();
    } else {
        throw std::invalid_argument("unknown gamma name: " + name);
    }
}

void to_json(nlohmann::json& j, const PartitionScheme& s) {
    j = nlohmann::json{{"K", s.K}, {"N", s.N}, {"c", s.c}, {"s", s.s}, {"gamma", s.gamma}};
}

void from_json(const nlohmann::json& j, PartitionScheme& s) {
    s.K = j.value("K", 0);
    s.N = j.at("N").get<int>();
    s.c = j.at("c").get<int>();
    s.s = j.at("s").get<int>();
    s.gamma = j.contains("gamma") ? j.at("gamma").get<PowerSchedule>() : PowerSchedule{};
    s.validate();
}

}  // namespace streamdit::partition
