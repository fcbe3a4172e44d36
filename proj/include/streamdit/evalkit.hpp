#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "streamdit/model.hpp"
#include "streamdit/streamer.hpp"
#include "streamdit/trainer.hpp"

namespace streamdit::eval {

struct StreamMetrics {
    double flicker = 0.0;                 // mean |x[t+1] - 2 x[t] + x[t-1]|
    double dynamic_degree = 0.0;          // mean |x[t+1] - x[t]|
    double boundary_discontinuity = 1.0;  // cross-chunk / within-chunk mean adjacent difference
    double condition_accuracy = 0.0;
    int windows_scored = 0;
};

double flicker(const Clip& frames);
double dynamic_degree(const Clip& frames);

/// Chunks start at stream index 0. 0/0 and c = 1 (no within-chunk pairs) give 1.
double boundary_discontinuity(const Clip& frames, int chunk_size);

/// Fraction of sliding windows whose probed shape matches the scheduled class
/// and whose probed motion lies on the scheduled direction's axis. Windows
/// touching [switch, switch + c) are skipped. Reflection flips the sign of
/// motion inside a window, so only the axis is compared.
double condition_accuracy(const Clip& frames, int chunk_size, const std::vector<stream::PromptChange>& schedule,
                          int window = 8, int* scored = nullptr);

StreamMetrics compute_stream_metrics(const Clip& frames, int chunk_size, const std::vector<stream::PromptChange>& schedule,
                                     int window = 8);

struct ProxyWeights {
    double accuracy = 0.6;
    double flicker = 0.2;
    double boundary = 0.2;
};

/// Weighted sum of scores in [0, 1]: accuracy, 1 / (1 + 10 flicker) and 1 / (1 + |bd - 1|).
double composite_proxy(const StreamMetrics& m, const ProxyWeights& w);

struct Mixture {
    std::string name;
    std::vector<int> chunk_sizes;
};

struct AblationConfig {
    std::vector<Mixture> mixtures;
    model::ModelConfig model;
    train::TrainConfig train;  // schemes are replaced per mixture
    int eval_T = 16;           // steps of the c = 1 evaluation stream
    long eval_frames = 128;
    std::vector<std::uint64_t> eval_seeds{1, 2, 3, 4};
    double cfg_w = 1.0;
    ProxyWeights weights;
};

struct AblationRow {
    std::string mixture;
    StreamMetrics metrics;  // mean over eval seeds
    double proxy = 0.0;
    double final_val_loss = 0.0;
};

struct AblationTable {
    std::vector<AblationRow> rows;
    std::string note;  // set when rows are too close to tell apart

    std::string to_text() const;
    std::string to_jsonl() const;
};

/// Evaluates a model on c = 1 diagonal streams, one per seed, each with a
/// mid-stream prompt switch. Returns the mean metrics.
StreamMetrics evaluate_diagonal(const VelocityModel& model, int B, int T, long n_frames,
                                const std::vector<std::uint64_t>& seeds, double cfg_w);

/// Prompt schedule used by the evaluation streams for one seed.
std::vector<stream::PromptChange> eval_schedule(std::uint64_t seed, long n_frames);

/// Trains one model per mixture (same budget and seed) and compares streams.
/// `pretrained` may supply models keyed by mixture name to skip training.
AblationTable ablation_run(const AblationConfig& config,
                           const std::vector<std::pair<std::string, const VelocityModel*>>& pretrained = {});

}  // namespace streamdit::eval
