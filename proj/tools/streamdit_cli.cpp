#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "streamdit/checkpoint.hpp"
#include "streamdit/distiller.hpp"
#include "streamdit/evalkit.hpp"
#include "streamdit/posterior.hpp"
#include "streamdit/raster.hpp"
#include "streamdit/service.hpp"
#include "streamdit/streamer.hpp"
#include "streamdit/trainer.hpp"

using namespace streamdit;

namespace {

std::vector<int> parse_ints(const std::string& text) {
    std::vector<int> out;
    std::istringstream is(text);
    for (std::string tok; std::getline(is, tok, ',');) out.push_back(std::stoi(tok));
    if (out.empty()) throw std::invalid_argument("expected a comma-separated list, got '" + text + "'");
    return out;
}

// "0:3,40:5" -> switch to class 3 at frame 0 and class 5 at frame 40
std::vector<stream::PromptChange> parse_schedule(const std::string& text) {
    std::vector<stream::PromptChange> out;
    std::istringstream is(text);
    for (std::string tok; std::getline(is, tok, ',');) {
        const auto colon = tok.find(':');
        if (colon == std::string::npos) throw std::invalid_argument("prompt entries look like frame:class, got '" + tok + "'");
        out.push_back({std::stol(tok.substr(0, colon)), ConditionId{std::stoi(tok.substr(colon + 1))}});
    }
    return out;
}

struct SchemeOptions {
    std::string scheme = "0,8,2,2";
    std::string gamma = "linear";

    partition::PartitionScheme get() const {
        partition::PartitionScheme s = partition::parse_scheme(scheme);
        s.gamma = partition::parse_gamma(gamma);
        s.validate();
        return s;
    }
};

void add_scheme_options(CLI::App* cmd, SchemeOptions& o) {
    cmd->add_option("--scheme", o.scheme, "Partition scheme K,N,c,s")->capture_default_str();
    cmd->add_option("--gamma", o.gamma, "Noise schedule: linear or power:k")->capture_default_str();
}

struct ModelSource {
    std::string checkpoint;
    bool posterior = false;

    std::unique_ptr<VelocityModel> load(int frames) const {
        if (posterior) return std::make_unique<toy::PosteriorVelocity>(frames);
        if (checkpoint.empty()) throw std::invalid_argument("give --checkpoint or --posterior");
        auto loaded = load_checkpoint(checkpoint);
        if (loaded.model.config().frames != frames) {
            throw std::invalid_argument(fmt::format("checkpoint buffer length {} does not match the scheme's B = {}",
                                                    loaded.model.config().frames, frames));
        }
        return std::make_unique<model::TimeVaryingDiT>(std::move(loaded.model));
    }
};

void add_model_options(CLI::App* cmd, ModelSource& m) {
    cmd->add_option("--checkpoint", m.checkpoint, "Model checkpoint");
    cmd->add_flag("--posterior", m.posterior, "Use the exact toy-world posterior instead of a checkpoint");
}

struct TrainOptions {
    int frames = 16;
    int T = 16;
    std::string mixture = "1,2,4,8,16";
    long steps = 4000;
    int batch = 8;
    double lr = 1e-3;
    std::string lr_schedule = "cosine";
    std::string gamma = "linear";
    int dim = 32;
    int layers = 2;
    int heads = 2;
    std::string window = "16,2,2";
    int patch = 4;
    std::uint64_t seed = 0;
    long checkpoint_every = 0;
    std::string config;

    model::ModelConfig model() const {
        model::ModelConfig m;
        m.frames = frames;
        m.dim = dim;
        m.layers = layers;
        m.heads = heads;
        m.patch_h = m.patch_w = patch;
        const auto w = parse_ints(window);
        if (w.size() != 3) throw std::invalid_argument("--window takes frames,height,width");
        m.window = {w[0], w[1], w[2]};
        m.init_seed = seed;
        m.validate();
        return m;
    }

    train::TrainConfig train() const {
        train::TrainConfig c;
        if (!config.empty()) {
            std::ifstream in(config);
            if (!in) throw std::runtime_error("cannot read " + config);
            c = nlohmann::json::parse(in).get<train::TrainConfig>();
            return c;
        }
        c.schemes = train::chunk_mixture(parse_ints(mixture), frames, T);
        const auto g = partition::parse_gamma(gamma);
        for (auto& ws : c.schemes) ws.scheme.gamma = g;
        c.steps = steps;
        c.batch_size = batch;
        c.learning_rate = lr;
        if (lr_schedule != "cosine" && lr_schedule != "constant") throw std::invalid_argument("--lr-schedule: cosine or constant");
        c.lr_schedule = lr_schedule == "cosine" ? train::LrSchedule::cosine : train::LrSchedule::constant;
        c.seed = seed;
        c.checkpoint_every = checkpoint_every;
        return c;
    }
};

void add_train_options(CLI::App* cmd, TrainOptions& o) {
    cmd->add_option("--frames", o.frames, "Buffer length B")->capture_default_str();
    cmd->add_option("--T", o.T, "Denoising steps of every mixture scheme")->capture_default_str();
    cmd->add_option("--mixture", o.mixture, "Chunk sizes mixed during training")->capture_default_str();
    cmd->add_option("--steps", o.steps, "Optimizer steps")->capture_default_str();
    cmd->add_option("--batch", o.batch, "Batch size")->capture_default_str();
    cmd->add_option("--lr", o.lr, "Peak learning rate")->capture_default_str();
    cmd->add_option("--lr-schedule", o.lr_schedule, "cosine or constant")->capture_default_str();
    cmd->add_option("--gamma", o.gamma, "Noise schedule for training levels")->capture_default_str();
    cmd->add_option("--dim", o.dim, "Model width")->capture_default_str();
    cmd->add_option("--layers", o.layers, "Transformer blocks")->capture_default_str();
    cmd->add_option("--heads", o.heads, "Attention heads")->capture_default_str();
    cmd->add_option("--window", o.window, "Attention window in tokens: frames,height,width")->capture_default_str();
    cmd->add_option("--patch", o.patch, "Square patch size in pixels")->capture_default_str();
    cmd->add_option("--seed", o.seed, "Seed for initialisation and data")->capture_default_str();
    cmd->add_option("--checkpoint-every", o.checkpoint_every, "Save the checkpoint every this many steps")
        ->capture_default_str();
    cmd->add_option("--train-config", o.config, "TrainConfig JSON; replaces the training flags");
}

int run_train(const TrainOptions& o, const std::string& out, const std::string& metrics) {
    const model::ModelConfig mc = o.model();
    train::TrainConfig tc = o.train();
    if (!metrics.empty()) tc.metrics_path = metrics;
    model::TimeVaryingDiT m(mc);
    spdlog::info("train: {} parameters", m.parameters().scalar_count());
    const auto report = train::train(m, toy::make_sampler(mc.frames), tc, [&](long step) {
        TrainingMetadata meta{tc.seed, step, "trained", {{"train", tc}}};
        save_checkpoint(out, m, meta);
    });
    TrainingMetadata meta{tc.seed, tc.steps, "trained",
                          {{"train", tc},
                           {"initial_val_loss", report.initial_val_loss},
                           {"final_val_loss", report.final_val_loss},
                           {"seconds", report.seconds}}};
    save_checkpoint(out, m, meta);
    fmt::print("val loss {:.5f} -> {:.5f} ({:.3f} of initial) in {:.0f}s, saved {}\n", report.initial_val_loss,
               report.final_val_loss, report.final_val_loss / report.initial_val_loss, report.seconds, out);
    return 0;
}

int run_distill(const std::string& teacher_path, const std::string& out, const distill::DistillConfig& config) {
    const auto teacher = load_checkpoint(teacher_path);
    model::TimeVaryingDiT student = distill::student_from_teacher(teacher.model);
    const auto report = distill::distill_train(teacher.model, student, config, toy::make_sampler(teacher.model.config().frames));
    TrainingMetadata meta{config.seed, config.iterations, "distilled",
                          {{"distill", config},
                           {"teacher", teacher_path},
                           {"teacher_hash", fmt::format("{:016x}", report.teacher_hash.value_or(0))},
                           {"student_scheme", config.student_scheme()},
                           {"initial_loss", report.initial_loss},
                           {"final_loss", report.final_loss}}};
    save_checkpoint(out, student, meta);
    fmt::print("segment loss {:.6f} -> {:.6f} in {:.0f}s; student scheme {} without guidance, saved {}\n",
               report.initial_loss, report.final_loss, report.seconds, config.student_scheme().to_string(), out);
    return 0;
}

nlohmann::json schedule_json(const std::vector<stream::PromptChange>& schedule) {
    nlohmann::json j = nlohmann::json::array();
    for (const auto& p : schedule) j.push_back({{"start_frame", p.start_frame}, {"class_id", p.cond.value()}});
    return j;
}

void print_metrics(const eval::StreamMetrics& m, int chunk) {
    fmt::print("flicker {:.4f}  dynamic {:.4f}  boundary(c={}) {:.3f}  accuracy {:.3f} over {} windows\n", m.flicker,
               m.dynamic_degree, chunk, m.boundary_discontinuity, m.condition_accuracy, m.windows_scored);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Streaming flow-matching video generation on a toy sprite world"};
    app.require_subcommand(1);
    app.fallthrough();
    std::string log_level = "info";
    app.add_option("--log-level", log_level, "trace, debug, info, warn, error or off")->capture_default_str();

    // train
    auto* train_cmd = app.add_subcommand("train", "Train a model on a chunk-size mixture");
    TrainOptions train_opts;
    std::string train_out = "model.ckpt", train_metrics;
    add_train_options(train_cmd, train_opts);
    train_cmd->add_option("--out", train_out, "Checkpoint to write")->capture_default_str();
    train_cmd->add_option("--metrics", train_metrics, "Per-step JSON lines log");

    // distill
    auto* distill_cmd = app.add_subcommand("distill", "Distil s guided micro steps into one student step");
    std::string teacher_path, distill_out = "student.ckpt";
    distill::DistillConfig dc;
    std::string distill_scheme = "0,8,2,4", sampling = "ground_truth";
    distill_cmd->add_option("--teacher", teacher_path, "Teacher checkpoint")->required();
    distill_cmd->add_option("--out", distill_out, "Student checkpoint to write")->capture_default_str();
    distill_cmd->add_option("--scheme", distill_scheme, "Teacher scheme K,N,c,s")->capture_default_str();
    distill_cmd->add_option("--cfg", dc.cfg_w, "Teacher guidance scale")->capture_default_str();
    distill_cmd->add_option("--iterations", dc.iterations)->capture_default_str();
    distill_cmd->add_option("--batch", dc.batch_size)->capture_default_str();
    distill_cmd->add_option("--lr", dc.learning_rate)->capture_default_str();
    distill_cmd->add_option("--staged-fraction", dc.staged_fraction, "Share of stream layouts among segment states")
        ->capture_default_str();
    distill_cmd->add_option("--sampling", sampling, "ground_truth or self_rollout")->capture_default_str();
    distill_cmd->add_option("--seed", dc.seed)->capture_default_str();

    // generate
    auto* gen_cmd = app.add_subcommand("generate", "Stream offline and write a raster dump");
    SchemeOptions gen_scheme;
    ModelSource gen_model;
    double gen_cfg = 1.0, strength = 0.6;
    long gen_frames = 256;
    std::uint64_t gen_seed = 0;
    std::string prompts = "0:1", gen_out = "dump", video_dir;
    add_scheme_options(gen_cmd, gen_scheme);
    add_model_options(gen_cmd, gen_model);
    gen_cmd->add_option("--cfg", gen_cfg, "Guidance scale")->capture_default_str();
    gen_cmd->add_option("--frames", gen_frames, "Frames to emit")->capture_default_str();
    gen_cmd->add_option("--seed", gen_seed)->capture_default_str();
    gen_cmd->add_option("--prompts", prompts, "Prompt schedule frame:class,...")->capture_default_str();
    gen_cmd->add_option("--out", gen_out, "Output directory")->capture_default_str();
    gen_cmd->add_option("--video", video_dir, "Raster dump to re-generate (video-to-video)");
    gen_cmd->add_option("--strength", strength, "Noise strength for --video")->capture_default_str();

    // stream
    auto* serve_cmd = app.add_subcommand("stream", "Serve a live stream over the wire protocol");
    SchemeOptions serve_scheme;
    ModelSource serve_model;
    service::ServiceConfig sc;
    std::string bind = "127.0.0.1:7878";
    int initial_class = 1;
    bool paused = false;
    add_scheme_options(serve_cmd, serve_scheme);
    add_model_options(serve_cmd, serve_model);
    serve_cmd->add_option("--cfg", sc.cfg_w, "Guidance scale")->capture_default_str();
    serve_cmd->add_option("--bind", bind, "host:port")->capture_default_str();
    serve_cmd->add_option("--seed", sc.seed)->capture_default_str();
    serve_cmd->add_option("--class", initial_class, "Initial class id")->capture_default_str();
    serve_cmd->add_option("--frames", sc.max_frames, "Stop after this many frames; 0 runs until interrupted")
        ->capture_default_str();
    serve_cmd->add_option("--queue", sc.queue_capacity, "Emitter queue capacity")->capture_default_str();
    serve_cmd->add_flag("--paused", paused, "Wait for a start message before generating");

    // eval
    auto* eval_cmd = app.add_subcommand("eval", "Stream with switching prompts and report metrics");
    SchemeOptions eval_scheme;
    ModelSource eval_model;
    double eval_cfg = 1.0;
    long eval_frames = 256;
    std::string eval_seeds = "1,2,3,4";
    bool eval_jsonl = false;
    add_scheme_options(eval_cmd, eval_scheme);
    add_model_options(eval_cmd, eval_model);
    eval_cmd->add_option("--cfg", eval_cfg)->capture_default_str();
    eval_cmd->add_option("--frames", eval_frames)->capture_default_str();
    eval_cmd->add_option("--seeds", eval_seeds)->capture_default_str();
    eval_cmd->add_flag("--jsonl", eval_jsonl, "Print one JSON record per seed");

    // ablate
    auto* ablate_cmd = app.add_subcommand("ablate", "Train one model per mixture and compare c = 1 streams");
    TrainOptions ablate_opts;
    std::string mixtures = "full=1,2,4,8,16;single=1", ablate_out, ablate_seeds = "1,2,3,4";
    long ablate_eval_frames = 128;
    double ablate_cfg = 1.0;
    add_train_options(ablate_cmd, ablate_opts);
    ablate_cmd->add_option("--mixtures", mixtures, "name=c1,c2;name=...")->capture_default_str();
    ablate_cmd->add_option("--eval-frames", ablate_eval_frames)->capture_default_str();
    ablate_cmd->add_option("--seeds", ablate_seeds, "Evaluation seeds")->capture_default_str();
    ablate_cmd->add_option("--cfg", ablate_cfg)->capture_default_str();
    ablate_cmd->add_option("--out", ablate_out, "Write the table as JSON lines");

    CLI11_PARSE(app, argc, argv);
    spdlog::set_level(spdlog::level::from_str(log_level));
    if (const char* env = std::getenv("STREAMDIT_LOG_LEVEL")) spdlog::set_level(spdlog::level::from_str(env));

    try {
        if (*train_cmd) return run_train(train_opts, train_out, train_metrics);

        if (*distill_cmd) {
            dc.teacher = partition::parse_scheme(distill_scheme);
            if (sampling != "ground_truth" && sampling != "self_rollout") throw std::invalid_argument("unknown --sampling");
            dc.sampling = sampling == "self_rollout" ? distill::StateSampling::self_rollout : distill::StateSampling::ground_truth;
            return run_distill(teacher_path, distill_out, dc);
        }

        if (*gen_cmd) {
            const auto scheme = gen_scheme.get();
            const auto model = gen_model.load(scheme.B());
            Rng rng(gen_seed);
            stream::StreamResult result;
            nlohmann::json manifest{{"scheme", scheme}, {"cfg_w", gen_cfg}, {"seed", gen_seed}};
            if (!video_dir.empty()) {
                const raster::Dump input = raster::read_dump(video_dir);
                const ConditionId cond = parse_schedule(prompts).front().cond;
                result = stream::video_to_video(*model, input.frames, scheme, strength, cond, gen_cfg, rng);
                manifest["video"] = video_dir;
                manifest["strength"] = strength;
                manifest["prompts"] = schedule_json({{0, cond}});
            } else {
                const auto schedule = parse_schedule(prompts);
                result = stream::run_stream(*model, scheme, schedule, gen_frames, gen_cfg, rng);
                manifest["prompts"] = schedule_json(schedule);
            }
            manifest["forwards"] = result.stats.forwards;
            raster::write_dump(gen_out, result.frames, manifest);
            fmt::print("wrote {} frames to {} ({} forwards)\n", result.frames.frames(), gen_out, result.stats.forwards);
            return 0;
        }

        if (*serve_cmd) {
            sc.scheme = serve_scheme.get();
            sc.bind = service::parse_endpoint(bind);
            sc.initial_cond = ConditionId{initial_class};
            sc.auto_start = !paused;
            service::apply_env_overrides(sc);
            const auto model = serve_model.load(sc.scheme.B());
            // block termination signals before any thread starts so sigwait sees them
            sigset_t set;
            sigemptyset(&set);
            sigaddset(&set, SIGINT);
            sigaddset(&set, SIGTERM);
            pthread_sigmask(SIG_BLOCK, &set, nullptr);
            service::Server server(*model, sc);
            server.start();
            fmt::print("listening on {}:{}\n", sc.bind.host, server.port());
            std::fflush(stdout);
            if (sc.max_frames > 0) {
                std::thread([&server, set] {
                    int sig = 0;
                    sigwait(&set, &sig);
                    server.stop();
                }).detach();
                server.wait();
            } else {
                int sig = 0;
                sigwait(&set, &sig);
            }
            server.stop();
            const auto st = server.stats();
            fmt::print("sent {} frames, {} clients, {} prompts applied, {} rejected, {} pixels clamped\n", st.frames_sent,
                       st.clients_accepted, st.prompts_applied, st.prompts_rejected, st.clamped_pixels);
            return 0;
        }

        if (*eval_cmd) {
            const auto scheme = eval_scheme.get();
            const auto model = eval_model.load(scheme.B());
            eval::StreamMetrics mean;
            mean.boundary_discontinuity = 0.0;
            const auto seeds = parse_ints(eval_seeds);
            for (int seed : seeds) {
                Rng rng(static_cast<std::uint64_t>(seed));
                const auto schedule = eval::eval_schedule(static_cast<std::uint64_t>(seed), eval_frames);
                const auto r = stream::run_stream(*model, scheme, schedule, eval_frames, eval_cfg, rng);
                const auto m = eval::compute_stream_metrics(r.frames, scheme.c, schedule);
                if (eval_jsonl) {
                    fmt::print("{}\n", nlohmann::json{{"seed", seed},
                                                      {"scheme", scheme},
                                                      {"flicker", m.flicker},
                                                      {"dynamic_degree", m.dynamic_degree},
                                                      {"boundary_discontinuity", m.boundary_discontinuity},
                                                      {"condition_accuracy", m.condition_accuracy}}
                                           .dump());
                } else {
                    fmt::print("seed {:>3}  ", seed);
                    print_metrics(m, scheme.c);
                }
                mean.flicker += m.flicker / seeds.size();
                mean.dynamic_degree += m.dynamic_degree / seeds.size();
                mean.boundary_discontinuity += m.boundary_discontinuity / seeds.size();
                mean.condition_accuracy += m.condition_accuracy / seeds.size();
                mean.windows_scored += m.windows_scored;
            }
            if (!eval_jsonl) {
                fmt::print("mean      ");
                print_metrics(mean, scheme.c);
            }
            return 0;
        }

        if (*ablate_cmd) {
            eval::AblationConfig ac;
            std::istringstream is(mixtures);
            for (std::string tok; std::getline(is, tok, ';');) {
                const auto eq = tok.find('=');
                if (eq == std::string::npos) throw std::invalid_argument("mixtures look like name=c1,c2");
                ac.mixtures.push_back({tok.substr(0, eq), parse_ints(tok.substr(eq + 1))});
            }
            ac.model = ablate_opts.model();
            ablate_opts.mixture = "1";
            ac.train = ablate_opts.train();
            ac.eval_T = ablate_opts.T;
            ac.eval_frames = ablate_eval_frames;
            ac.cfg_w = ablate_cfg;
            ac.eval_seeds.clear();
            for (int s : parse_ints(ablate_seeds)) ac.eval_seeds.push_back(static_cast<std::uint64_t>(s));
            const auto table = eval::ablation_run(ac);
            fmt::print("{}", table.to_text());
            if (!ablate_out.empty()) std::ofstream(ablate_out) << table.to_jsonl();
            return 0;
        }
    } catch (const std::exception& e) {
        spdlog::error("{}", e.what());
        return 1;
    }
    return 0;
}
