#include "streamdit/trainer.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "streamdit/flowcore.hpp"

namespace streamdit::train {

TrainingExample make_training_example_at(const Clip& clip, const NoiseVector& tau, int K, ConditionId cond, Rng& rng,
                                         double sigma_min) {
    if (tau.size() != clip.frames()) throw std::invalid_argument("training example: tau length must equal the clip length");
    if (K < 0 || K >= clip.frames()) throw std::invalid_argument("training example: reference count out of range");
    TrainingExample ex;
    ex.noise = gaussian_clip(clip.frames(), clip.frame_shape(), rng);
    ex.x_tau = flow::buffered_interpolate(clip, ex.noise, tau, sigma_min);
    ex.target = flow::target_velocity(clip, ex.noise, sigma_min);
    ex.tau = tau;
    ex.cond = cond;
    ex.loss_mask.assign(static_cast<std::size_t>(clip.frames()), true);
    for (int k = 0; k < K; ++k) ex.loss_mask[static_cast<std::size_t>(k)] = false;
    return ex;
}

TrainingExample make_training_example(const Clip& clip, const partition::PartitionScheme& scheme, ConditionId cond,
                                      Rng& rng, double sigma_min) {
    if (clip.frames() != scheme.B()) throw std::invalid_argument("training example: clip length differs from the scheme's B");
    const NoiseVector tau = partition::sample_training_taus(scheme, rng);
    return make_training_example_at(clip, tau, scheme.K, cond, rng, sigma_min);
}

void TrainConfig::validate() const {
    if (schemes.empty()) throw std::invalid_argument("train config: empty scheme set");
    double total = 0.0;
    for (const auto& ws : schemes) {
        ws.scheme.validate();
        if (!(ws.weight >= 0.0)) throw std::invalid_argument("train config: negative scheme weight");
        if (ws.scheme.B() != schemes.front().scheme.B()) throw std::invalid_argument("train config: schemes disagree on B");
        total += ws.weight;
    }
    if (std::abs(total - 1.0) > 1e-9) throw std::invalid_argument("train config: scheme weights must sum to 1");
    if (batch_size < 1 || steps < 0) throw std::invalid_argument("train config: bad batch size or step count");
    if (!(learning_rate > 0.0)) throw std::invalid_argument("train config: learning rate must be positive");
    if (!(cond_dropout >= 0.0 && cond_dropout < 1.0)) throw std::invalid_argument("train config: dropout outside [0, 1)");
    if (!(sigma_min >= 0.0 && sigma_min < 1.0)) throw std::invalid_argument("train config: sigma_min outside [0, 1)");
    if (val_examples < 1) throw std::invalid_argument("train config: need validation examples");
}

double TrainConfig::lr_at(long step) const {
    if (lr_schedule == LrSchedule::constant || steps <= 1) return learning_rate;
    const double progress = static_cast<double>(step) / static_cast<double>(steps - 1);
    const double floor = learning_rate * final_lr_fraction;
    return floor + 0.5 * (learning_rate - floor) * (1.0 + std::cos(std::numbers::pi * progress));
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
    nlohmann::json mix = nlohmann::json::array();
    for (const auto& ws : c.schemes) mix.push_back({{"scheme", ws.scheme}, {"weight", ws.weight}});
    j = nlohmann::json{{"schemes", mix},
                       {"batch_size", c.batch_size},
                       {"steps", c.steps},
                       {"learning_rate", c.learning_rate},
                       {"lr_schedule", c.lr_schedule == LrSchedule::cosine ? "cosine" : "constant"},
                       {"final_lr_fraction", c.final_lr_fraction},
                       {"cond_dropout", c.cond_dropout},
                       {"loss_weighting", c.loss_weighting == LossWeighting::clean ? "clean" : "velocity"},
                       {"sigma_min", c.sigma_min},
                       {"seed", c.seed},
                       {"val_examples", c.val_examples},
                       {"val_seed", c.val_seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
    c = TrainConfig{};
    for (const auto& m : j.at("schemes")) c.schemes.push_back({m.at("scheme").get<partition::PartitionScheme>(), m.at("weight").get<double>()});
    c.batch_size = j.value("batch_size", c.batch_size);
    c.steps = j.value("steps", c.steps);
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    const auto sched = j.value("lr_schedule", std::string("constant"));
    if (sched != "constant" && sched != "cosine") throw std::invalid_argument("unknown lr schedule: " + sched);
    c.lr_schedule = sched == "cosine" ? LrSchedule::cosine : LrSchedule::constant;
    c.final_lr_fraction = j.value("final_lr_fraction", c.final_lr_fraction);
    c.cond_dropout = j.value("cond_dropout", c.cond_dropout);
    const auto weighting = j.value("loss_weighting", std::string("velocity"));
    if (weighting != "velocity" && weighting != "clean") throw std::invalid_argument("unknown loss weighting: " + weighting);
    c.loss_weighting = weighting == "clean" ? LossWeighting::clean : LossWeighting::velocity;
    c.sigma_min = j.value("sigma_min", c.sigma_min);
    c.seed = j.value("seed", c.seed);
    c.val_examples = j.value("val_examples", c.val_examples);
    c.val_seed = j.value("val_seed", c.val_seed);
    c.validate();
}

std::vector<WeightedScheme> chunk_mixture(const std::vector<int>& chunk_sizes, int B, int T) {
    if (chunk_sizes.empty()) throw std::invalid_argument("chunk_mixture: no chunk sizes");
    std::vector<WeightedScheme> out;
    for (int c : chunk_sizes) {
        if (c <= 0 || B % c != 0) throw std::invalid_argument("chunk_mixture: chunk size must divide B");
        const int N = B / c;
        const int s = std::max(1, T / N);
        out.push_back({{0, N, c, s, {}}, 1.0 / static_cast<double>(chunk_sizes.size())});
    }
    return out;
}

partition::PartitionScheme mixed_scheme_sampler(const TrainConfig& config, Rng& rng) {
    if (config.schemes.empty()) throw std::invalid_argument("mixed_scheme_sampler: empty scheme set");
    const double u = uniform01(rng);
    double acc = 0.0;
    for (const auto& ws : config.schemes) {
        acc += ws.weight;
        if (u < acc) return ws.scheme;
    }
    // rounding in the weights' sum
    for (auto it = config.schemes.rbegin(); it != config.schemes.rend(); ++it)
        if (it->weight > 0.0) return it->scheme;
    return config.schemes.back().scheme;
}

ConditionId apply_condition_dropout(ConditionId cond, double p, Rng& rng) {
    if (!(p >= 0.0 && p < 1.0)) throw std::invalid_argument("condition dropout outside [0, 1)");
    if (p == 0.0) return cond;
    return uniform01(rng) < p ? ConditionId::null() : cond;
}

std::vector<TrainingExample> make_validation_set(const TrainConfig& config, const toy::ClipSampler& data) {
    config.validate();
    Rng rng(config.val_seed);
    std::vector<TrainingExample> out;
    out.reserve(static_cast<std::size_t>(config.val_examples));
    for (int i = 0; i < config.val_examples; ++i) {
        const auto scheme = mixed_scheme_sampler(config, rng);
        const toy::LabeledClip lc = data(rng);
        out.push_back(make_training_example(lc.clip, scheme, lc.cond, rng, config.sigma_min));
    }
    return out;
}

namespace {

struct Batch {
    std::vector<Clip> x;
    std::vector<NoiseVector> tau;
    std::vector<ConditionId> cond;
    nn::Matrix target;
    std::vector<bool> mask;
    Eigen::VectorXd clean_scale;  // 1 - tau per frame row
};

Batch stack(std::span<const TrainingExample> examples) {
    Batch b;
    std::vector<Clip> targets;
    for (const auto& ex : examples) {
        b.x.push_back(ex.x_tau);
        b.tau.push_back(ex.tau);
        b.cond.push_back(ex.cond);
        targets.push_back(ex.target);
        b.mask.insert(b.mask.end(), ex.loss_mask.begin(), ex.loss_mask.end());
    }
    b.target = clips_to_rows(targets);
    b.clean_scale.resize(static_cast<Eigen::Index>(b.mask.size()));
    Eigen::Index r = 0;
    for (const auto& t : b.tau)
        for (double v : t.values()) b.clean_scale(r++) = 1.0 - v;
    return b;
}

}  // namespace

double validation_loss(const TrainableVelocity& model, const std::vector<TrainingExample>& examples) {
    if (examples.empty()) throw std::invalid_argument("validation_loss: no examples");
    nn::NoGradGuard no_grad;
    double total = 0.0;
    double weight = 0.0;
    constexpr std::size_t kChunk = 16;
    for (std::size_t first = 0; first < examples.size(); first += kChunk) {
        const auto part = std::span(examples).subspan(first, std::min(kChunk, examples.size() - first));
        const Batch b = stack(part);
        const nn::Var pred = model.velocity_graph(b.x, b.tau, b.cond);
        const double kept = static_cast<double>(std::count(b.mask.begin(), b.mask.end(), true));
        total += nn::masked_mse(pred, b.target, b.mask).value()(0, 0) * kept;
        weight += kept;
    }
    return total / weight;
}

TrainReport train(TrainableVelocity& model, const toy::ClipSampler& data, const TrainConfig& config,
                  const CheckpointHook& on_checkpoint) {
    config.validate();
    const auto start = std::chrono::steady_clock::now();
    const auto val = make_validation_set(config, data);

    std::optional<std::ofstream> metrics;
    if (config.metrics_path) {
        metrics.emplace(*config.metrics_path, std::ios::trunc);
        if (!*metrics) throw std::runtime_error("cannot open metrics log " + config.metrics_path->string());
    }

    TrainReport report;
    report.initial_val_loss = validation_loss(model, val);
    spdlog::info("train: {} steps, batch {}, {} scheme(s), initial val loss {:.5f}", config.steps, config.batch_size,
                 config.schemes.size(), report.initial_val_loss);

    Rng rng(config.seed);
    nn::Adam opt(config.learning_rate);
    report.curve.reserve(static_cast<std::size_t>(config.steps));
    std::vector<TrainingExample> examples(static_cast<std::size_t>(config.batch_size));
    for (long step = 0; step < config.steps; ++step) {
        const auto scheme = mixed_scheme_sampler(config, rng);
        for (auto& ex : examples) {
            const toy::LabeledClip lc = data(rng);
            const ConditionId cond = apply_condition_dropout(lc.cond, config.cond_dropout, rng);
            ex = make_training_example(lc.clip, scheme, cond, rng, config.sigma_min);
        }
        const Batch b = stack(examples);

        model.parameters().zero_grad();
        const nn::Var pred = model.velocity_graph(b.x, b.tau, b.cond);
        const nn::Var loss = config.loss_weighting == LossWeighting::clean
                                 ? nn::masked_mse(nn::scale_rows(pred, b.clean_scale), b.clean_scale.asDiagonal() * b.target, b.mask)
                                 : nn::masked_mse(pred, b.target, b.mask);
        const double value = loss.value()(0, 0);
        if (!std::isfinite(value)) {
            throw DivergenceError("training diverged at step " + std::to_string(step) + " (scheme " + scheme.to_string() +
                                  ", lr " + std::to_string(opt.learning_rate()) + ")");
        }
        nn::backward(loss);
        opt.set_learning_rate(config.lr_at(step));
        opt.step(model.parameters());

        report.curve.push_back({step, value, scheme.to_string(), opt.learning_rate()});
        if (metrics) {
            *metrics << nlohmann::json{{"step", step}, {"loss", value}, {"scheme", scheme}, {"lr", opt.learning_rate()}}.dump()
                     << '\n';
        }
        if (config.log_every > 0 && (step + 1) % config.log_every == 0) {
            spdlog::debug("train: step {} loss {:.5f} scheme {}", step + 1, value, scheme.to_string());
        }
        if (on_checkpoint && config.checkpoint_every > 0 && (step + 1) % config.checkpoint_every == 0) on_checkpoint(step + 1);
    }

    report.final_val_loss = validation_loss(model, val);
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    spdlog::info("train: done in {:.1f}s, val loss {:.5f} -> {:.5f}", report.seconds, report.initial_val_loss,
                 report.final_val_loss);
    return report;
}

}  // namespace streamdit::train
