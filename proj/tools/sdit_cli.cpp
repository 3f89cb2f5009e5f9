#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>

#include "sdit/checkpoint.hpp"
#include "sdit/discriminator.hpp"
#include "sdit/runtime.hpp"
#include "sdit/train.hpp"

namespace {

using KV = std::map<std::string, std::string>;

struct CommonArgs {
    std::string config_path;
    uint64_t seed = 0;
    bool seed_set = false;
    std::string out_path;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "key=value config file");
    cmd->add_option("--seed", args.seed, "RNG seed")->each([&](const std::string&) {
        args.seed_set = true;
    });
    cmd->add_option("--out", args.out_path, "output path");
}

KV load_kv(const CommonArgs& args) {
    KV kv;
    if (!args.config_path.empty()) kv = sdit::parse_key_values(args.config_path);
    if (args.seed_set) kv["seed"] = std::to_string(args.seed);
    if (!args.out_path.empty()) kv["out"] = args.out_path;
    return kv;
}

std::string require(const KV& kv, const std::string& key) {
    auto it = kv.find(key);
    if (it == kv.end() || it->second.empty()) {
        throw sdit::ValidationError("missing required config key: " + key);
    }
    return it->second;
}

std::string get(const KV& kv, const std::string& key, const std::string& fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : it->second;
}

int get_int(const KV& kv, const std::string& key, int fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : std::stoi(it->second);
}

double get_double(const KV& kv, const std::string& key, double fallback) {
    auto it = kv.find(key);
    return it == kv.end() ? fallback : std::stod(it->second);
}

uint64_t get_seed(const KV& kv) {
    auto it = kv.find("seed");
    return it == kv.end() ? 0 : std::stoull(it->second);
}

sdit::AvatarDiT load_model(const std::string& path) {
    sdit::Checkpoint ck = sdit::load_checkpoint(path);
    sdit::ModelConfig cfg = sdit::model_config_from_canonical(ck.config_text);
    sdit::AvatarDiT model(cfg, 0);
    model.load_parameters(ck.tensors);
    return model;
}

void save_model(const sdit::AvatarDiT& model, const std::string& path) {
    sdit::Checkpoint ck;
    ck.config_text = model.config().canonical();
    ck.tensors = model.parameters();
    sdit::save_checkpoint(ck, path);
}

void write_text(const std::string& path, const std::string& text) {
    if (path.empty()) {
        std::cout << text;
        return;
    }
    std::ofstream os(path);
    if (!os) throw sdit::IoError("cannot open for writing: " + path);
    os << text;
}

int cmd_train_teacher(const KV& kv) {
    sdit::ModelConfig cfg = sdit::model_config_from(kv);
    sdit::SyntheticTask task{cfg};
    sdit::AvatarDiT teacher(cfg, get_seed(kv));
    sdit::Rng rng(get_seed(kv) + 1);
    sdit::TrainLog log(&std::cout);
    const double final_loss = sdit::train_teacher(
        teacher, task, get_int(kv, "teacher.steps", 300), get_double(kv, "teacher.lr", 1e-3),
        rng, &log);
    save_model(teacher, require(kv, "out"));
    std::cout << "final, teacher, denoise_mse, " << final_loss << "\n";
    return 0;
}

int cmd_gen_ode_pairs(const KV& kv) {
    sdit::AvatarDiT teacher = load_model(require(kv, "checkpoint"));
    sdit::SyntheticTask task{teacher.config()};
    sdit::NoiseSchedule schedule = sdit::schedule_from(kv);
    sdit::Rng rng(get_seed(kv));
    auto pairs = sdit::generate_ode_pairs(teacher, task, schedule,
                                          get_int(kv, "pairs.teacher_steps", 21),
                                          get_int(kv, "pairs.count", 8), rng);
    sdit::save_ode_pairs(pairs, require(kv, "out"));
    std::cout << "wrote " << pairs.size() << " pairs\n";
    return 0;
}

int cmd_ode_init(const KV& kv) {
    sdit::AvatarDiT student = load_model(require(kv, "checkpoint"));
    auto pairs = sdit::load_ode_pairs(require(kv, "pairs.path"));
    sdit::Rng rng(get_seed(kv));
    sdit::TrainLog log(&std::cout);
    const double before = sdit::ode_regression_loss(student, pairs);
    sdit::ode_init(student, pairs, get_int(kv, "ode.steps", 200),
                   get_double(kv, "ode.lr", 1e-3), rng, &log);
    const double after = sdit::ode_regression_loss(student, pairs);
    save_model(student, require(kv, "out"));
    std::cout << "final, ode_init, regression_before, " << before << "\n";
    std::cout << "final, ode_init, regression_after, " << after << "\n";
    return 0;
}

int cmd_distill(const KV& kv) {
    sdit::AvatarDiT student = load_model(require(kv, "student.checkpoint"));
    sdit::AvatarDiT teacher = load_model(require(kv, "teacher.checkpoint"));
    sdit::AvatarDiT aux = load_model(require(kv, "teacher.checkpoint"));
    sdit::SyntheticTask task{student.config()};
    sdit::SidConfig cfg;
    cfg.schedule = sdit::schedule_from(kv);
    cfg.cache = sdit::cache_config_from(kv);
    cfg.rollout_chunks = student.config().window_frames / student.config().chunk_size;
    cfg.lr_student = get_double(kv, "sid.lr_student", 1e-4);
    cfg.lr_aux = get_double(kv, "sid.lr_aux", 1e-4);
    sdit::SidState state{sdit::Adam(student.parameters(), cfg.lr_student),
                         sdit::Adam(aux.parameters(), cfg.lr_aux)};
    sdit::Rng rng(get_seed(kv));
    sdit::TrainLog log(&std::cout);
    const int steps = get_int(kv, "sid.steps", 100);
    for (int i = 0; i < steps; ++i) {
        sdit::sid_step(student, teacher, aux, state, task, cfg, rng, &log, i);
    }
    save_model(student, require(kv, "out"));
    return 0;
}

int cmd_refine(const KV& kv) {
    sdit::AvatarDiT student = load_model(require(kv, "student.checkpoint"));
    sdit::AvatarDiT teacher = load_model(require(kv, "teacher.checkpoint"));
    sdit::DiscConfig dcfg;
    dcfg.num_extractors = get_int(kv, "disc.extractors", 3);
    dcfg.freeze_backbone = get(kv, "disc.freeze_backbone", "false") == "true";
    sdit::Discriminator disc(teacher, dcfg, get_seed(kv) + 7);
    sdit::AdvConfig cfg;
    cfg.schedule = sdit::schedule_from(kv);
    cfg.cache = sdit::cache_config_from(kv);
    cfg.rollout_chunks = student.config().window_frames / student.config().chunk_size;
    cfg.lr_gen = get_double(kv, "adv.lr_gen", 1e-5);
    cfg.lr_disc = get_double(kv, "adv.lr_disc", 1e-4);
    cfg.r1_gamma = get_double(kv, "adv.r1_gamma", 0.1);
    sdit::AdvState state{sdit::Adam(student.parameters(), cfg.lr_gen),
                         sdit::Adam(disc.parameters(), cfg.lr_disc)};
    sdit::SyntheticTask task{student.config()};
    sdit::Rng rng(get_seed(kv));
    sdit::TrainLog log(&std::cout);
    const int steps = get_int(kv, "adv.steps", 100);
    for (int i = 0; i < steps; ++i) {
        sdit::adversarial_step(student, disc, state, task, cfg, rng, &log, i);
    }
    save_model(student, require(kv, "out"));
    return 0;
}

sdit::AudioTrack stream_track(const KV& kv, const sdit::ModelConfig& cfg, int chunks) {
    const std::string path = get(kv, "audio.path", "");
    if (!path.empty()) return sdit::load_track(path);
    return sdit::synth_features(get_seed(kv) + 11, chunks * cfg.chunk_size + 1, cfg.audio_dim, 4);
}

int cmd_stream(const KV& kv, bool simulated_only) {
    sdit::PipelineConfig pcfg = sdit::PipelineConfig::from(kv);
    const int chunks = get_int(kv, "pipeline.chunks", 25);
    if (simulated_only) {
        sdit::RunMetrics m = sdit::simulate_pipeline(pcfg.sim, chunks, pcfg.chunk_seconds);
        write_text(pcfg.out_path, m.csv());
        return 0;
    }
    sdit::AvatarDiT model = load_model(require(kv, "checkpoint"));
    sdit::AudioTrack track = stream_track(kv, model.config(), chunks);
    sdit::Rng rng(pcfg.seed);
    sdit::Tensor reference =
        sdit::Tensor::randn({model.config().tokens_per_frame, model.config().latent_dim}, rng, 0.5);
    sdit::StreamResult result = sdit::stream(model, pcfg, reference, track, chunks);
    write_text(pcfg.out_path, result.metrics.csv());
    if (result.audio_exhausted) {
        std::cerr << "audio track exhausted after " << result.metrics.chunks << " chunks\n";
    }
    return 0;
}

int cmd_drift(const KV& kv) {
    sdit::AvatarDiT model = load_model(require(kv, "checkpoint"));
    const int chunks = get_int(kv, "drift.chunks", 20);
    sdit::AudioTrack track = stream_track(kv, model.config(), chunks);
    sdit::Rng rng(get_seed(kv));
    sdit::Tensor reference =
        sdit::Tensor::randn({model.config().tokens_per_frame, model.config().latent_dim}, rng, 0.5);
    sdit::NoGradGuard ng;
    sdit::RolloutOptions opt;
    opt.schedule = sdit::schedule_from(kv);
    opt.cache = sdit::cache_config_from(kv);
    opt.seed = get_seed(kv);
    auto out = sdit::rollout(model, reference, sdit::route_audio(track), chunks, opt);
    sdit::DriftReport report = sdit::drift_report(out, reference);
    write_text(get(kv, "out", ""), report.csv());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"chunked streaming avatar diffusion toolkit"};
    app.require_subcommand(1);

    struct Sub {
        const char* name;
        const char* desc;
        int (*run)(const KV&);
    };
    CommonArgs args[8];
    const Sub subs[] = {
        {"train-teacher", "train the bidirectional teacher on the synthetic task",
         cmd_train_teacher},
        {"gen-ode-pairs", "record teacher sampling trajectories as regression pairs",
         cmd_gen_ode_pairs},
        {"ode-init", "regression-initialize the causal student from recorded pairs",
         cmd_ode_init},
        {"distill", "score-distillation training of the few-step student", cmd_distill},
        {"refine", "adversarial refinement of the distilled student", cmd_refine},
        {"stream", "run the two-stage streaming pipeline and report metrics", nullptr},
        {"bench", "simulated-clock latency decomposition from injected stage costs", nullptr},
        {"drift", "per-chunk drift curve of a long rollout", cmd_drift},
    };
    CLI::App* cmds[8];
    for (int i = 0; i < 8; ++i) {
        cmds[i] = app.add_subcommand(subs[i].name, subs[i].desc);
        add_common(cmds[i], args[i]);
    }

    try {
        app.parse(argc, argv);
        for (int i = 0; i < 8; ++i) {
            if (!cmds[i]->parsed()) continue;
            const KV kv = load_kv(args[i]);
            const std::string name = subs[i].name;
            if (name == "stream") return cmd_stream(kv, false);
            if (name == "bench") return cmd_stream(kv, true);
            return subs[i].run(kv);
        }
        return 1;
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    } catch (const sdit::ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
