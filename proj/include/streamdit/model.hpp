#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "streamdit/autograd.hpp"
#include "streamdit/flowcore.hpp"
#include "streamdit/tensor.hpp"

namespace streamdit {

/// Anything that maps (noisy buffer, per-frame tau, condition) to a per-frame velocity.
class VelocityModel {
public:
    virtual ~VelocityModel() = default;
    virtual Clip velocity(const Clip& x, const NoiseVector& tau, ConditionId cond) const = 0;
    virtual FrameShape frame_shape() const = 0;
};

/// A velocity model that can also build a differentiable graph over a batch.
class TrainableVelocity : public VelocityModel {
public:
    /// Rows are the frames of every example in order ([batch * frames, C*H*W]).
    virtual nn::Var velocity_graph(std::span<const Clip> x, std::span<const NoiseVector> tau,
                                   std::span<const ConditionId> cond) const = 0;
    virtual nn::ParameterStore& parameters() = 0;
    virtual const nn::ParameterStore& parameters() const = 0;

    Clip velocity(const Clip& x, const NoiseVector& tau, ConditionId cond) const override;
};

/// Stacks clips as frame rows, the layout used by velocity_graph.
nn::Matrix clips_to_rows(std::span<const Clip> clips);
Clip rows_to_clip(const nn::Matrix& rows, int first_row, int frames, FrameShape shape);

/// 64-bit FNV-1a over parameter names, shapes and values.
std::uint64_t parameter_hash(const nn::ParameterStore& params);

}  // namespace streamdit

namespace streamdit::model {

struct GridShape {
    int frames = 1;
    int height = 1;
    int width = 1;

    int tokens() const { return frames * height * width; }
    bool operator==(const GridShape&) const = default;
};

/// Attention window in token units.
struct Window {
    int frames = 1;
    int height = 1;
    int width = 1;

    int tokens() const { return frames * height * width; }
    bool operator==(const Window&) const = default;
};

/// Validates a window against a grid: spatial extents must divide, temporal
/// extent must not exceed the grid (a trailing partial window is allowed).
void validate_window(GridShape grid, Window window);

/// Token rows (ordered example, frame, row, column) grouped into attention
/// windows. With `shifted`, the grid is cyclically rotated by half a window
/// per axis before partitioning, so tokens at an axis end share windows with
/// tokens at its start.
nn::WindowGroups partition_windows(GridShape grid, Window window, bool shifted, int batch = 1);

/// Single-head windowed self-attention with q = k = v = tokens; rows ordered (f, h, w).
nn::Matrix window_attention(const nn::Matrix& tokens, GridShape grid, Window window, bool shifted);

enum class PositionalEmbedding { none, spatial, spatiotemporal };

/// What the head regresses. velocity: u directly. clean: an estimate of x1,
/// returned as the velocity (x1 - (1 - sigma_min) x) / (1 - (1 - sigma_min) tau)
/// of the straight path through x; zero at tau = 1.
enum class Prediction { velocity, clean };

struct ModelConfig {
    int frames = 16;  // buffer length B
    FrameShape frame{1, 16, 16};
    int patch_h = 4;
    int patch_w = 4;
    int dim = 32;
    int layers = 2;
    int heads = 2;
    int mlp_ratio = 4;
    int freq_dim = 32;  // sinusoidal time features
    Window window{16, 2, 2};
    int vocab = 9;  // includes the null id 0
    double sigma_min = flow::kDefaultSigmaMin;
    PositionalEmbedding pos_embed = PositionalEmbedding::spatiotemporal;
    Prediction prediction = Prediction::velocity;
    std::uint64_t init_seed = 0;

    GridShape token_grid() const { return {frames, frame.height / patch_h, frame.width / patch_w}; }
    int patch_size() const { return frame.channels * patch_h * patch_w; }
    void validate() const;
    bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct AttentionFlops {
    std::uint64_t windowed = 0;  // score + value multiply-adds per layer
    std::uint64_t full = 0;
    double ratio() const { return static_cast<double>(windowed) / static_cast<double>(full); }
};

AttentionFlops count_attention_flops(const ModelConfig& config);

/// Interleaved sinusoidal features [sin(w0 t), cos(w0 t), sin(w1 t), ...] of 1000 tau.
nn::Matrix sinusoidal_features(std::span<const double> tau, int dim);

/// adaLN-Zero diffusion transformer whose modulation varies per frame. Tokens
/// are 3D (frame, row, column) patches; blocks alternate regular and shifted
/// window attention.
class TimeVaryingDiT : public TrainableVelocity {
public:
    explicit TimeVaryingDiT(const ModelConfig& config);

    const ModelConfig& config() const { return config_; }
    FrameShape frame_shape() const override { return config_.frame; }

    nn::Var velocity_graph(std::span<const Clip> x, std::span<const NoiseVector> tau,
                           std::span<const ConditionId> cond) const override;
    using TrainableVelocity::velocity;

    /// Same network with one conditioning vector per example broadcast over
    /// all of its tokens (classic scalar-t adaLN DiT).
    Clip velocity_scalar_time(const Clip& x, double t, ConditionId cond) const;

    /// Per-frame conditioning vectors [B, dim]: MLP(sinusoid(tau_j)) + embed(cond).
    nn::Matrix frame_time_embedding(const NoiseVector& tau, ConditionId cond) const;

    nn::ParameterStore& parameters() override { return params_; }
    const nn::ParameterStore& parameters() const override { return params_; }

private:
    struct Block {
        int ada_w, ada_b, qkv_w, qkv_b, proj_w, proj_b, fc1_w, fc1_b, fc2_w, fc2_b;
    };

    struct Conditioning {
        nn::Var silu_cond;       // [unique, dim]
        std::vector<int> group;  // conditioning row for each modulation group
        int rows_per_group = 1;
    };

    void check_inputs(std::span<const Clip> x, std::span<const NoiseVector> tau,
                      std::span<const ConditionId> cond) const;
    nn::Matrix patchify(std::span<const Clip> x) const;
    std::vector<int> unpatchify_map(int batch) const;
    nn::Var embed_conditions(std::span<const double> tau, std::span<const ConditionId> cond) const;
    nn::Var run(std::span<const Clip> x, const Conditioning& cond) const;
    nn::Var as_velocity(const nn::Var& head, std::span<const Clip> x, std::span<const NoiseVector> tau) const;

    ModelConfig config_;
    nn::ParameterStore params_;
    int patch_w_ = 0, patch_b_ = 0, pos_ = 0;
    int t1_w_ = 0, t1_b_ = 0, t2_w_ = 0, t2_b_ = 0, cond_table_ = 0;
    std::vector<Block> blocks_;
    int final_ada_w_ = 0, final_ada_b_ = 0, head_w_ = 0, head_b_ = 0;
};

}  // namespace streamdit::model
