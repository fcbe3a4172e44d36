#include "streamdit/model.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <map>
#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

#include "streamdit/random.hpp"

namespace streamdit {

Clip TrainableVelocity::velocity(const Clip& x, const NoiseVector& tau, ConditionId cond) const {
    nn::NoGradGuard no_grad;
    const nn::Var rows = velocity_graph(std::span(&x, 1), std::span(&tau, 1), std::span(&cond, 1));
    return rows_to_clip(rows.value(), 0, x.frames(), x.frame_shape());
}

nn::Matrix clips_to_rows(std::span<const Clip> clips) {
    if (clips.empty()) return {};
    const auto cols = static_cast<Eigen::Index>(clips.front().frame_size());
    Eigen::Index rows = 0;
    for (const auto& c : clips) rows += c.frames();
    nn::Matrix m(rows, cols);
    Eigen::Index r = 0;
    for (const auto& c : clips) {
        if (static_cast<Eigen::Index>(c.frame_size()) != cols) throw std::invalid_argument("clips_to_rows: frame size mismatch");
        for (int f = 0; f < c.frames(); ++f, ++r) {
            auto px = c.frame(f);
            for (Eigen::Index k = 0; k < cols; ++k) m(r, k) = px[static_cast<std::size_t>(k)];
        }
    }
    return m;
}

Clip rows_to_clip(const nn::Matrix& rows, int first_row, int frames, FrameShape shape) {
    if (first_row + frames > rows.rows() || static_cast<Eigen::Index>(shape.size()) != rows.cols()) {
        throw std::invalid_argument("rows_to_clip: layout mismatch");
    }
    Clip clip(frames, shape);
    for (int f = 0; f < frames; ++f) {
        auto px = clip.frame(f);
        for (std::size_t k = 0; k < px.size(); ++k) px[k] = rows(first_row + f, static_cast<Eigen::Index>(k));
    }
    return clip;
}

std::uint64_t parameter_hash(const nn::ParameterStore& params) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&h](const void* data, std::size_t n) {
        const auto* bytes = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ULL;
        }
    };
    for (const auto& p : params.all()) {
        mix(p.name.data(), p.name.size());
        const std::int64_t dims[2] = {p.var.rows(), p.var.cols()};
        mix(dims, sizeof(dims));
        mix(p.var.value().data(), static_cast<std::size_t>(p.var.value().size()) * sizeof(double));
    }
    return h;
}

}  // namespace streamdit

namespace streamdit::model {

namespace {

int floor_mod(int a, int m) { return ((a % m) + m) % m; }

nn::Matrix xavier(int fan_in, int fan_out, Rng& rng) {
    const double bound = std::sqrt(6.0 / (fan_in + fan_out));
    nn::Matrix m(fan_in, fan_out);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = (2.0 * uniform01(rng) - 1.0) * bound;
    return m;
}

nn::Matrix gaussian(int rows, int cols, double stddev, Rng& rng) {
    nn::Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = stddev * standard_normal(rng);
    return m;
}

nn::Matrix zeros(int rows, int cols) { return nn::Matrix::Zero(rows, cols); }

const char* pos_name(PositionalEmbedding p) {
    switch (p) {
        case PositionalEmbedding::none: return "none";
        case PositionalEmbedding::spatial: return "spatial";
        case PositionalEmbedding::spatiotemporal: return "spatiotemporal";
    }
    return "none";
}

PositionalEmbedding parse_pos(const std::string& s) {
    if (s == "none") return PositionalEmbedding::none;
    if (s == "spatial") return PositionalEmbedding::spatial;
    if (s == "spatiotemporal") return PositionalEmbedding::spatiotemporal;
    throw std::invalid_argument("unknown positional embedding: " + s);
}

}  // namespace

void validate_window(GridShape grid, Window window) {
    if (grid.frames <= 0 || grid.height <= 0 || grid.width <= 0) throw std::invalid_argument("token grid must be non-empty");
    if (window.frames <= 0 || window.height <= 0 || window.width <= 0) throw std::invalid_argument("window must be non-empty");
    if (window.frames > grid.frames) throw std::invalid_argument("window: temporal extent exceeds the token grid");
    if (grid.height % window.height != 0 || grid.width % window.width != 0) {
        throw std::invalid_argument("window: spatial extent must divide the token grid");
    }
}

nn::WindowGroups partition_windows(GridShape grid, Window window, bool shifted, int batch) {
    validate_window(grid, window);
    const int sf = shifted ? window.frames / 2 : 0;
    const int sh = shifted ? window.height / 2 : 0;
    const int sw = shifted ? window.width / 2 : 0;
    const int wf_count = (grid.frames + window.frames - 1) / window.frames;
    const int wh_count = grid.height / window.height;
    const int ww_count = grid.width / window.width;
    const int per_example = wf_count * wh_count * ww_count;

    nn::WindowGroups groups(static_cast<std::size_t>(per_example * batch));
    for (auto& g : groups) g.reserve(static_cast<std::size_t>(window.tokens()));
    int row = 0;
    for (int e = 0; e < batch; ++e) {
        for (int f = 0; f < grid.frames; ++f) {
            const int wf = floor_mod(f - sf, grid.frames) / window.frames;
            for (int y = 0; y < grid.height; ++y) {
                const int wh = floor_mod(y - sh, grid.height) / window.height;
                for (int x = 0; x < grid.width; ++x, ++row) {
                    const int ww = floor_mod(x - sw, grid.width) / window.width;
                    const int id = e * per_example + (wf * wh_count + wh) * ww_count + ww;
                    groups[static_cast<std::size_t>(id)].push_back(row);
                }
            }
        }
    }
    return groups;
}

nn::Matrix window_attention(const nn::Matrix& tokens, GridShape grid, Window window, bool shifted) {
    if (tokens.rows() != grid.tokens()) throw std::invalid_argument("window_attention: token count mismatch");
    return nn::attend(tokens, tokens, tokens, partition_windows(grid, window, shifted), 1);
}

void ModelConfig::validate() const {
    if (frames <= 0) throw std::invalid_argument("model: frames must be positive");
    if (patch_h <= 0 || patch_w <= 0 || frame.height % patch_h != 0 || frame.width % patch_w != 0) {
        throw std::invalid_argument("model: patch size must divide the frame");
    }
    if (dim <= 0 || heads <= 0 || dim % heads != 0) throw std::invalid_argument("model: dim must be divisible by heads");
    if (layers < 0 || mlp_ratio <= 0) throw std::invalid_argument("model: bad depth or mlp ratio");
    if (freq_dim <= 0 || freq_dim % 2 != 0) throw std::invalid_argument("model: freq_dim must be even");
    if (vocab < 1) throw std::invalid_argument("model: vocabulary must hold the null id");
    if (!(sigma_min >= 0.0 && sigma_min < 1.0)) throw std::invalid_argument("model: sigma_min outside [0, 1)");
    validate_window(token_grid(), window);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
    j = nlohmann::json{{"frames", c.frames},
                       {"channels", c.frame.channels},
                       {"height", c.frame.height},
                       {"width", c.frame.width},
                       {"patch", {c.patch_h, c.patch_w}},
                       {"dim", c.dim},
                       {"layers", c.layers},
                       {"heads", c.heads},
                       {"mlp_ratio", c.mlp_ratio},
                       {"freq_dim", c.freq_dim},
                       {"window", {c.window.frames, c.window.height, c.window.width}},
                       {"vocab", c.vocab},
                       {"sigma_min", c.sigma_min},
                       {"pos_embed", pos_name(c.pos_embed)},
                       {"prediction", c.prediction == Prediction::clean ? "clean" : "velocity"},
                       {"init_seed", c.init_seed}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
    ModelConfig d;
    c.frames = j.value("frames", d.frames);
    c.frame = {j.value("channels", d.frame.channels), j.value("height", d.frame.height), j.value("width", d.frame.width)};
    if (j.contains("patch")) {
        c.patch_h = j.at("patch").at(0).get<int>();
        c.patch_w = j.at("patch").at(1).get<int>();
    }
    c.dim = j.value("dim", d.dim);
    c.layers = j.value("layers", d.layers);
    c.heads = j.value("heads", d.heads);
    c.mlp_ratio = j.value("mlp_ratio", d.mlp_ratio);
    c.freq_dim = j.value("freq_dim", d.freq_dim);
    if (j.contains("window")) {
        const auto& w = j.at("window");
        c.window = {w.at(0).get<int>(), w.at(1).get<int>(), w.at(2).get<int>()};
    }
    c.vocab = j.value("vocab", d.vocab);
    c.sigma_min = j.value("sigma_min", d.sigma_min);
    c.pos_embed = parse_pos(j.value("pos_embed", std::string(pos_name(d.pos_embed))));
    c.init_seed = j.value("init_seed", d.init_seed);
    const std::string prediction = j.value("prediction", std::string("velocity"));
    if (prediction != "velocity" && prediction != "clean") throw std::invalid_argument("model: unknown prediction " + prediction);
    c.prediction = prediction == "clean" ? Prediction::clean : Prediction::velocity;
    c.validate();
}

AttentionFlops count_attention_flops(const ModelConfig& config) {
    config.validate();
    const GridShape grid = config.token_grid();
    const auto d = static_cast<std::uint64_t>(config.dim);
    AttentionFlops flops;
    for (const auto& g : partition_windows(grid, config.window, false)) {
        const auto m = static_cast<std::uint64_t>(g.size());
        flops.windowed += 2 * m * m * d;
    }
    const auto n = static_cast<std::uint64_t>(grid.tokens());
    flops.full = 2 * n * n * d;
    return flops;
}

nn::Matrix sinusoidal_features(std::span<const double> tau, int dim) {
    const int half = dim / 2;
    nn::Matrix m(static_cast<Eigen::Index>(tau.size()), dim);
    for (std::size_t r = 0; r < tau.size(); ++r) {
        const double t = 1000.0 * tau[r];
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / half);
            m(static_cast<Eigen::Index>(r), 2 * i) = std::sin(t * freq);
            m(static_cast<Eigen::Index>(r), 2 * i + 1) = std::cos(t * freq);
        }
    }
    return m;
}

TimeVaryingDiT::TimeVaryingDiT(const ModelConfig& config) : config_(config) {
    config_.validate();
    Rng rng(config_.init_seed);
    const int d = config_.dim;
    const int p = config_.patch_size();
    const GridShape grid = config_.token_grid();

    patch_w_ = params_.add("patch.w", xavier(p, d, rng));
    patch_b_ = params_.add("patch.b", zeros(1, d));
    if (config_.pos_embed != PositionalEmbedding::none) {
        const int positions = config_.pos_embed == PositionalEmbedding::spatial ? grid.height * grid.width : grid.tokens();
        pos_ = params_.add("pos", gaussian(positions, d, 0.02, rng));
    }
    t1_w_ = params_.add("time.fc1.w", gaussian(config_.freq_dim, d, 0.02, rng));
    t1_b_ = params_.add("time.fc1.b", zeros(1, d));
    t2_w_ = params_.add("time.fc2.w", gaussian(d, d, 0.02, rng));
    t2_b_ = params_.add("time.fc2.b", zeros(1, d));
    cond_table_ = params_.add("cond.embed", gaussian(config_.vocab, d, 0.02, rng));

    const int hidden = d * config_.mlp_ratio;
    for (int l = 0; l < config_.layers; ++l) {
        const std::string pre = "block" + std::to_string(l) + ".";
        Block b{};
        b.ada_w = params_.add(pre + "ada.w", zeros(d, 6 * d));
        b.ada_b = params_.add(pre + "ada.b", zeros(1, 6 * d));
        b.qkv_w = params_.add(pre + "qkv.w", xavier(d, 3 * d, rng));
        b.qkv_b = params_.add(pre + "qkv.b", zeros(1, 3 * d));
        b.proj_w = params_.add(pre + "proj.w", xavier(d, d, rng));
        b.proj_b = params_.add(pre + "proj.b", zeros(1, d));
        b.fc1_w = params_.add(pre + "fc1.w", xavier(d, hidden, rng));
        b.fc1_b = params_.add(pre + "fc1.b", zeros(1, hidden));
        b.fc2_w = params_.add(pre + "fc2.w", xavier(hidden, d, rng));
        b.fc2_b = params_.add(pre + "fc2.b", zeros(1, d));
        blocks_.push_back(b);
    }
    final_ada_w_ = params_.add("final.ada.w", zeros(d, 2 * d));
    final_ada_b_ = params_.add("final.ada.b", zeros(1, 2 * d));
    head_w_ = params_.add("head.w", zeros(d, p));
    head_b_ = params_.add("head.b", zeros(1, p));
}

void TimeVaryingDiT::check_inputs(std::span<const Clip> x, std::span<const NoiseVector> tau,
                                  std::span<const ConditionId> cond) const {
    if (x.empty() || x.size() != tau.size() || x.size() != cond.size()) {
        throw std::invalid_argument("forward: batch components differ in length");
    }
    for (std::size_t e = 0; e < x.size(); ++e) {
        if (x[e].frames() != config_.frames || x[e].frame_shape() != config_.frame) {
            throw std::invalid_argument("forward: clip shape does not match the model config");
        }
        if (tau[e].size() != config_.frames) throw std::invalid_argument("forward: tau length must equal B");
        if (cond[e].value() < 0 || cond[e].value() >= config_.vocab) {
            throw std::out_of_range("forward: condition id outside the vocabulary");
        }
    }
}

nn::Matrix TimeVaryingDiT::patchify(std::span<const Clip> x) const {
    const GridShape grid = config_.token_grid();
    const FrameShape fs = config_.frame;
    const int ph = config_.patch_h;
    const int pw = config_.patch_w;
    nn::Matrix tokens(static_cast<Eigen::Index>(x.size()) * grid.tokens(), config_.patch_size());
    Eigen::Index row = 0;
    for (const Clip& clip : x) {
        for (int f = 0; f < grid.frames; ++f) {
            auto px = clip.frame(f);
            for (int ty = 0; ty < grid.height; ++ty) {
                for (int tx = 0; tx < grid.width; ++tx, ++row) {
                    Eigen::Index col = 0;
                    for (int c = 0; c < fs.channels; ++c)
                        for (int py = 0; py < ph; ++py)
                            for (int pxx = 0; pxx < pw; ++pxx, ++col) {
                                const int y = ty * ph + py;
                                const int xx = tx * pw + pxx;
                                tokens(row, col) = px[static_cast<std::size_t>((c * fs.height + y) * fs.width + xx)];
                            }
                }
            }
        }
    }
    return tokens;
}

std::vector<int> TimeVaryingDiT::unpatchify_map(int batch) const {
    const GridShape grid = config_.token_grid();
    const FrameShape fs = config_.frame;
    const int ph = config_.patch_h;
    const int pw = config_.patch_w;
    const int token_rows = batch * grid.tokens();
    const int frame_rows = batch * grid.frames;
    std::vector<int> source(static_cast<std::size_t>(frame_rows) * fs.size());
    for (int e = 0; e < batch; ++e)
        for (int f = 0; f < grid.frames; ++f)
            for (int ty = 0; ty < grid.height; ++ty)
                for (int tx = 0; tx < grid.width; ++tx) {
                    const int token = ((e * grid.frames + f) * grid.height + ty) * grid.width + tx;
                    int col = 0;
                    for (int c = 0; c < fs.channels; ++c)
                        for (int py = 0; py < ph; ++py)
                            for (int pxx = 0; pxx < pw; ++pxx, ++col) {
                                const int pix = (c * fs.height + ty * ph + py) * fs.width + tx * pw + pxx;
                                const int frame_row = e * grid.frames + f;
                                source[static_cast<std::size_t>(frame_row + pix * frame_rows)] = token + col * token_rows;
                            }
                }
    return source;
}

nn::Var TimeVaryingDiT::embed_conditions(std::span<const double> tau, std::span<const ConditionId> cond) const {
    for (double t : tau) {
        if (!(t >= 0.0 && t <= 1.0)) throw std::out_of_range("time embedding: tau outside [0, 1]");
    }
    const nn::Var features(sinusoidal_features(tau, config_.freq_dim));
    const nn::Var te = nn::linear(nn::silu(nn::linear(features, params_[t1_w_], params_[t1_b_])), params_[t2_w_], params_[t2_b_]);
    std::vector<int> ids;
    ids.reserve(cond.size());
    for (auto c : cond) ids.push_back(c.value());
    return nn::add(te, nn::gather_rows(params_[cond_table_], std::move(ids)));
}

nn::Matrix TimeVaryingDiT::frame_time_embedding(const NoiseVector& tau, ConditionId cond) const {
    if (tau.size() != config_.frames) throw std::invalid_argument("frame_time_embedding: tau length must equal B");
    if (cond.value() < 0 || cond.value() >= config_.vocab) throw std::out_of_range("frame_time_embedding: condition id");
    nn::NoGradGuard no_grad;
    // Equal (tau, cond) pairs share one computed vector.
    std::map<double, int> unique;
    std::vector<double> levels;
    std::vector<int> row_of_frame;
    for (double t : tau.values()) {
        auto [it, inserted] = unique.try_emplace(t, static_cast<int>(levels.size()));
        if (inserted) levels.push_back(t);
        row_of_frame.push_back(it->second);
    }
    const std::vector<ConditionId> conds(levels.size(), cond);
    const nn::Var emb = embed_conditions(levels, conds);
    return nn::gather_rows(emb, row_of_frame).value();
}

nn::Var TimeVaryingDiT::velocity_graph(std::span<const Clip> x, std::span<const NoiseVector> tau,
                                       std::span<const ConditionId> cond) const {
    check_inputs(x, tau, cond);
    const GridShape grid = config_.token_grid();

    // Deduplicate (tau, cond) pairs so identical frames get bit-identical modulation.
    std::map<std::pair<std::uint64_t, int>, int> unique;
    std::vector<double> levels;
    std::vector<ConditionId> conds;
    Conditioning cd;
    cd.rows_per_group = grid.height * grid.width;
    for (std::size_t e = 0; e < x.size(); ++e) {
        for (double t : tau[e].values()) {
            const std::pair<std::uint64_t, int> key{std::bit_cast<std::uint64_t>(t), cond[e].value()};
            auto [it, inserted] = unique.try_emplace(key, static_cast<int>(levels.size()));
            if (inserted) {
                levels.push_back(t);
                conds.push_back(cond[e]);
            }
            cd.group.push_back(it->second);
        }
    }
    cd.silu_cond = nn::silu(embed_conditions(levels, conds));
    return as_velocity(run(x, cd), x, tau);
}

nn::Var TimeVaryingDiT::as_velocity(const nn::Var& head, std::span<const Clip> x, std::span<const NoiseVector> tau) const {
    if (config_.prediction == Prediction::velocity) return head;
    const double a = 1.0 - config_.sigma_min;
    Eigen::VectorXd factors(head.rows());
    Eigen::Index r = 0;
    for (const NoiseVector& t : tau)
        for (double v : t.values()) factors(r++) = v < 1.0 ? 1.0 / (1.0 - a * v) : 0.0;
    return nn::scale_rows(nn::add(head, nn::Var(-a * clips_to_rows(x))), std::move(factors));
}

Clip TimeVaryingDiT::velocity_scalar_time(const Clip& x, double t, ConditionId cond) const {
    const NoiseVector tau = NoiseVector::uniform(config_.frames, t);
    check_inputs(std::span(&x, 1), std::span(&tau, 1), std::span(&cond, 1));
    nn::NoGradGuard no_grad;
    const double level[1] = {t};
    const ConditionId ids[1] = {cond};
    Conditioning cd;
    cd.silu_cond = nn::silu(embed_conditions(level, ids));
    cd.group = {0};
    cd.rows_per_group = config_.token_grid().tokens();
    const nn::Var rows = as_velocity(run(std::span(&x, 1), cd), std::span(&x, 1), std::span(&tau, 1));
    return rows_to_clip(rows.value(), 0, x.frames(), x.frame_shape());
}

nn::Var TimeVaryingDiT::run(std::span<const Clip> x, const Conditioning& cd) const {
    const int batch = static_cast<int>(x.size());
    const GridShape grid = config_.token_grid();
    const int d = config_.dim;
    const int rpg = cd.rows_per_group;

    nn::Var h = nn::linear(nn::Var(patchify(x)), params_[patch_w_], params_[patch_b_]);
    if (config_.pos_embed != PositionalEmbedding::none) {
        const int period = config_.pos_embed == PositionalEmbedding::spatial ? grid.height * grid.width : grid.tokens();
        std::vector<int> idx(static_cast<std::size_t>(h.rows()));
        for (std::size_t r = 0; r < idx.size(); ++r) idx[r] = static_cast<int>(r) % period;
        h = nn::add(h, nn::gather_rows(params_[pos_], std::move(idx)));
    }

    const auto regular = std::make_shared<const nn::WindowGroups>(partition_windows(grid, config_.window, false, batch));
    const auto shifted = std::make_shared<const nn::WindowGroups>(partition_windows(grid, config_.window, true, batch));

    for (std::size_t l = 0; l < blocks_.size(); ++l) {
        const Block& b = blocks_[l];
        const nn::Var mod = nn::gather_rows(nn::linear(cd.silu_cond, params_[b.ada_w], params_[b.ada_b]), cd.group);
        const nn::Var a = nn::modulate(nn::layer_norm(h), nn::columns(mod, 0, d), nn::columns(mod, d, d), rpg);
        const nn::Var qkv = nn::linear(a, params_[b.qkv_w], params_[b.qkv_b]);
        const nn::Var att = nn::window_attention(qkv, l % 2 == 0 ? regular : shifted, config_.heads);
        const nn::Var o = nn::linear(att, params_[b.proj_w], params_[b.proj_b]);
        h = nn::add(h, nn::scale_groups(o, nn::columns(mod, 2 * d, d), rpg));

        const nn::Var m = nn::modulate(nn::layer_norm(h), nn::columns(mod, 3 * d, d), nn::columns(mod, 4 * d, d), rpg);
        const nn::Var ff = nn::linear(nn::gelu(nn::linear(m, params_[b.fc1_w], params_[b.fc1_b])), params_[b.fc2_w], params_[b.fc2_b]);
        h = nn::add(h, nn::scale_groups(ff, nn::columns(mod, 5 * d, d), rpg));
    }

    const nn::Var fmod = nn::gather_rows(nn::linear(cd.silu_cond, params_[final_ada_w_], params_[final_ada_b_]), cd.group);
    const nn::Var out = nn::linear(nn::modulate(nn::layer_norm(h), nn::columns(fmod, 0, d), nn::columns(fmod, d, d), rpg),
                                   params_[head_w_], params_[head_b_]);
    return nn::permute(out, unpatchify_map(batch), batch * grid.frames, static_cast<int>(config_.frame.size()));
}

}  // namespace streamdit::model
