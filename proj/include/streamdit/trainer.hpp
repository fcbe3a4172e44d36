#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "streamdit/model.hpp"
#include "streamdit/partition.hpp"
#include "streamdit/toyworld.hpp"

namespace streamdit::train {

struct TrainingExample {
    Clip x_tau;
    NoiseVector tau;
    Clip target;
    Clip noise;  // the single draw behind both x_tau and target
    ConditionId cond;
    std::vector<bool> loss_mask;  // false for reference frames
};

/// Draws one noise clip and per-chunk levels from the scheme, then builds the
/// buffered path sample and its velocity target from that same draw.
TrainingExample make_training_example(const Clip& clip, const partition::PartitionScheme& scheme, ConditionId cond,
                                      Rng& rng, double sigma_min = flow::kDefaultSigmaMin);

/// Same construction at caller-chosen levels; the first K frames are masked out.
TrainingExample make_training_example_at(const Clip& clip, const NoiseVector& tau, int K, ConditionId cond, Rng& rng,
                                         double sigma_min = flow::kDefaultSigmaMin);

struct WeightedScheme {
    partition::PartitionScheme scheme;
    double weight = 1.0;
};

enum class LrSchedule { constant, cosine };

/// velocity: plain flow-matching MSE. clean: frame j weighted by (1 - tau_j)^2,
/// i.e. the error of the implied clean-frame estimate.
enum class LossWeighting { velocity, clean };

struct TrainConfig {
    std::vector<WeightedScheme> schemes;
    int batch_size = 8;
    long steps = 2000;
    double learning_rate = 1e-3;
    LrSchedule lr_schedule = LrSchedule::constant;
    double final_lr_fraction = 0.1;  // cosine only
    double cond_dropout = 0.1;
    LossWeighting loss_weighting = LossWeighting::velocity;
    double sigma_min = flow::kDefaultSigmaMin;
    std::uint64_t seed = 0;
    int val_examples = 64;
    std::uint64_t val_seed = 0x5EED;
    long log_every = 50;
    long checkpoint_every = 0;  // 0 disables the checkpoint hook
    std::optional<std::filesystem::path> metrics_path;

    void validate() const;
    double lr_at(long step) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Equal-weight mixture over the given chunk sizes on a B-frame buffer with T steps.
std::vector<WeightedScheme> chunk_mixture(const std::vector<int>& chunk_sizes, int B, int T);

partition::PartitionScheme mixed_scheme_sampler(const TrainConfig& config, Rng& rng);

ConditionId apply_condition_dropout(ConditionId cond, double p, Rng& rng);

struct StepRecord {
    long step = 0;
    double loss = 0.0;
    std::string scheme;
    double learning_rate = 0.0;
};

struct TrainReport {
    double initial_val_loss = 0.0;
    double final_val_loss = 0.0;
    std::vector<StepRecord> curve;  // every step
    double seconds = 0.0;
};

class DivergenceError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Fixed held-out examples drawn from the configured mixture (no dropout).
std::vector<TrainingExample> make_validation_set(const TrainConfig& config, const toy::ClipSampler& data);

double validation_loss(const TrainableVelocity& model, const std::vector<TrainingExample>& examples);

using CheckpointHook = std::function<void(long step)>;

/// Adam on the masked flow-matching loss, one scheme per batch. Deterministic
/// for a fixed seed. Throws DivergenceError on a non-finite loss.
TrainReport train(TrainableVelocity& model, const toy::ClipSampler& data, const TrainConfig& config,
                  const CheckpointHook& on_checkpoint = {});

}  // namespace streamdit::train
