#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <nlohmann/json.hpp>

#include "streamdit/model.hpp"

namespace streamdit {

struct TrainingMetadata {
    std::uint64_t seed = 0;
    long steps = 0;
    std::string kind = "trained";  // "trained" or "distilled"
    nlohmann::json provenance = nlohmann::json::object();  // teacher hash, cfg, scheme, mixture ...
};

/// Container: "SDCKPT1\n", u64 header size, JSON header (config, metadata,
/// tensor table), then raw little-endian float64 tensors in table order.
void save_checkpoint(const std::filesystem::path& path, const model::TimeVaryingDiT& model,
                     const TrainingMetadata& meta);

struct LoadedCheckpoint {
    model::TimeVaryingDiT model;
    TrainingMetadata meta;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Copies values by parameter name; names and shapes must match exactly.
void copy_parameters(const nn::ParameterStore& from, nn::ParameterStore& to);

}  // namespace streamdit
