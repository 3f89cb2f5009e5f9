#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "sdit/scheduler.hpp"

using namespace sdit;
using testutil::max_abs_diff;
using testutil::micro_config;
using testutil::tiny_config;

namespace {

void activate(AvatarDiT& model, uint64_t seed) {
    Rng rng(seed);
    for (int l = 0; l < model.config().layers; ++l) {
        const std::string p = "block" + std::to_string(l) + ".";
        for (double& v : model.param(p + "mod.b").mutable_data()) v = rng.normal(0.0, 0.4);
        for (double& v : model.param(p + "audio.wo").mutable_data()) v = rng.normal(0.0, 0.05);
        for (double& v : model.param(p + "interact.wo").mutable_data()) v = rng.normal(0.0, 0.05);
    }
}

}  // namespace

TEST_CASE("noise schedule validation") {
    CHECK_NOTHROW((NoiseSchedule{}.validate()));
    CHECK_THROWS_AS((NoiseSchedule{{}}.validate()), ValidationError);
    CHECK_THROWS_AS((NoiseSchedule{{1.2, 0.5}}.validate()), ValidationError);
    CHECK_THROWS_AS((NoiseSchedule{{0.5, 0.5}}.validate()), ValidationError);
    CHECK_THROWS_AS((NoiseSchedule{{0.3, 0.6}}.validate()), ValidationError);
    CHECK_THROWS_AS((NoiseSchedule{{1.0, 0.5, 0.0}}.validate()), ValidationError);
    CHECK_NOTHROW((NoiseSchedule{{1.0}}.validate()));
}

TEST_CASE("add_noise mixes clean and unit noise") {
    Rng data_rng(1);
    Tensor clean = Tensor::randn({40, 25}, data_rng);

    // Exact linear form against a replayed noise draw.
    const double sigma = 0.37;
    Rng a(7), b(7);
    Tensor noisy = add_noise(clean, sigma, a);
    Tensor eps = Tensor::randn(clean.shape(), b);
    Tensor expected = add(scale(clean, 1.0 - sigma), scale(eps, sigma));
    CHECK(max_abs_diff(noisy, expected) < 1e-15);

    // sigma = 1: pure standard normal, mean 0 and variance 1 within 3/sqrt(n).
    Rng c(8);
    Tensor pure = add_noise(clean, 1.0, c);
    double mean = 0.0, var = 0.0;
    for (int64_t i = 0; i < pure.numel(); ++i) mean += pure.at(i);
    mean /= static_cast<double>(pure.numel());
    for (int64_t i = 0; i < pure.numel(); ++i) {
        var += (pure.at(i) - mean) * (pure.at(i) - mean);
    }
    var /= static_cast<double>(pure.numel());
    const double tol = 3.0 / std::sqrt(static_cast<double>(pure.numel()));
    CHECK(std::abs(mean) < tol);
    CHECK(std::abs(var - 1.0) < 3.0 * tol);

    CHECK_THROWS_AS(add_noise(clean, 0.0, a), ValidationError);
    CHECK_THROWS_AS(add_noise(clean, 1.5, a), ValidationError);

    // Determinism under a shared seed.
    Rng d(9), e(9);
    CHECK(max_abs_diff(add_noise(clean, 0.5, d), add_noise(clean, 0.5, e)) == 0.0);
}

TEST_CASE("prediction conversions invert the corruption") {
    ModelConfig vel = micro_config();
    ModelConfig eps_cfg = micro_config();
    eps_cfg.prediction = ModelConfig::Prediction::Epsilon;
    Rng rng(2);
    Tensor x0 = Tensor::randn({3, 4}, rng);
    Tensor eps = Tensor::randn({3, 4}, rng);
    const double sigma = 0.6;
    Tensor x = add(scale(x0, 1.0 - sigma), scale(eps, sigma));
    // Velocity mode: the true velocity eps - x0 recovers x0.
    CHECK(max_abs_diff(predicted_clean(vel, x, sub(eps, x0), sigma), x0) < 1e-12);
    // Epsilon mode: the true eps recovers x0 and the same velocity.
    CHECK(max_abs_diff(predicted_clean(eps_cfg, x, eps, sigma), x0) < 1e-12);
    CHECK(max_abs_diff(predicted_velocity(eps_cfg, x, eps, sigma), sub(eps, x0)) < 1e-12);
}

TEST_CASE("sampler is exact for an exact velocity field") {
    // A model that returns the true velocity (x - target)/sigma makes every
    // Euler step land on the straight-line path, so any schedule ending at
    // zero recovers the target exactly.
    ModelConfig cfg = micro_config();
    Rng rng(3);
    Tensor target = Tensor::randn({cfg.chunk_size * cfg.tokens_per_frame, cfg.latent_dim}, rng);
    Tensor noise = Tensor::randn(target.shape(), rng);
    std::vector<double> seen_sigmas;
    ChunkForwardFn oracle = [&](const Tensor& x, double sigma) {
        seen_sigmas.push_back(sigma);
        ChunkResult r;
        if (sigma == 0.0) {
            r.prediction = Tensor::zeros(x.shape());
        } else {
            r.prediction = scale(sub(x, target), 1.0 / sigma);
        }
        CacheEntry e;
        e.frame_id = static_cast<int>(seen_sigmas.size());  // tags the pass
        r.entries.push_back(e);
        return r;
    };

    for (const NoiseSchedule& schedule :
         {NoiseSchedule{}, NoiseSchedule{{1.0}}, NoiseSchedule{{1.0, 0.9, 0.5, 0.2, 0.05}}}) {
        seen_sigmas.clear();
        Instrumentation instr;
        DenoiseResult r = denoise_chunk_with(oracle, cfg, noise, schedule, false, &instr);
        CHECK(max_abs_diff(r.clean_chunk, target) < 1e-10);
        CHECK(instr.forward_count == schedule.steps());
        CHECK(seen_sigmas == schedule.sigmas);
        // KV comes from the final scheduled pass.
        REQUIRE(r.entries.size() == 1);
        CHECK(r.entries[0].frame_id == schedule.steps());
    }

    // clean_recache adds one extra forward at sigma 0 and takes its KV.
    seen_sigmas.clear();
    Instrumentation instr;
    NoiseSchedule schedule;
    DenoiseResult r = denoise_chunk_with(oracle, cfg, noise, schedule, true, &instr);
    CHECK(instr.forward_count == schedule.steps() + 1);
    CHECK(seen_sigmas.back() == 0.0);
    CHECK(r.entries[0].frame_id == schedule.steps() + 1);
    CHECK(max_abs_diff(r.clean_chunk, target) < 1e-10);
}

TEST_CASE("clean recache changes the cached kv, not the output") {
    ModelConfig cfg = tiny_config();
    AvatarDiT model(cfg, 4);
    activate(model, 5);
    Rng rng(6);
    Tensor reference = Tensor::randn({cfg.tokens_per_frame, cfg.latent_dim}, rng);
    Tensor noise = Tensor::randn({cfg.chunk_size * cfg.tokens_per_frame, cfg.latent_dim}, rng);
    AudioFeatures audio = route_audio(synth_features(7, 8, cfg.audio_dim, 2));
    RollingKvCache cache{CacheConfig{.chunk_size = cfg.chunk_size}};
    cache.append_chunk({model.encode_reference(reference, audio)});

    DenoiseResult plain = denoise_chunk(model, cache, noise, 1, audio, NoiseSchedule{});
    DenoiseResult recached = denoise_chunk(model, cache, noise, 1, audio, NoiseSchedule{}, true);
    CHECK(max_abs_diff(plain.clean_chunk, recached.clean_chunk) == 0.0);
    // The final scheduled pass runs at the last sigma; the recache pass runs
    // at sigma 0, so the recorded keys differ.
    CHECK(max_abs_diff(plain.entries[0].keys[0], recached.entries[0].keys[0]) > 1e-9);
}

TEST_CASE("rollout of one chunk equals a manual denoise step") {
    ModelConfig cfg = tiny_config();
    AvatarDiT model(cfg, 4);
    activate(model, 5);
    Rng data_rng(8);
    Tensor reference = Tensor::randn({cfg.tokens_per_frame, cfg.latent_dim}, data_rng);
    AudioFeatures audio = route_audio(synth_features(9, 8, cfg.audio_dim, 2));

    RolloutOptions opt;
    opt.seed = 31;
    std::vector<Tensor> chunks = rollout(model, reference, audio, 1, opt);
    REQUIRE(chunks.size() == 1);

    Rng replay(31);
    Tensor noise = Tensor::randn({cfg.chunk_size * cfg.tokens_per_frame, cfg.latent_dim}, replay);
    RollingKvCache cache(opt.cache);
    cache.append_chunk({model.encode_reference(reference, audio)});
    DenoiseResult manual = denoise_chunk(model, cache, noise, 1, audio, opt.schedule);
    CHECK(max_abs_diff(chunks[0], manual.clean_chunk) == 0.0);
}

TEST_CASE("rollout determinism and forward-count economy") {
    ModelConfig cfg = tiny_config();
    AvatarDiT model(cfg, 4);
    activate(model, 5);
    Rng data_rng(10);
    Tensor reference = Tensor::randn({cfg.tokens_per_frame, cfg.latent_dim}, data_rng);
    AudioFeatures audio = route_audio(synth_features(11, 20, cfg.audio_dim, 3));

    const int chunks = 4;
    RolloutOptions opt;
    opt.seed = 77;
    Instrumentation instr;
    opt.instr = &instr;
    std::vector<Tensor> a = rollout(model, reference, audio, chunks, opt);
    CHECK(instr.forward_count == chunks * opt.schedule.steps());
    CHECK(instr.chunk_wall_seconds.size() == static_cast<size_t>(chunks));

    Instrumentation instr2;
    opt.instr = &instr2;
    opt.clean_recache = true;
    rollout(model, reference, audio, chunks, opt);
    CHECK(instr2.forward_count == chunks * (opt.schedule.steps() + 1));

    opt.clean_recache = false;
    opt.instr = nullptr;
    std::vector<Tensor> b = rollout(model, reference, audio, chunks, opt);
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) CHECK(max_abs_diff(a[i], b[i]) == 0.0);
}

TEST_CASE("on_chunk callback can stop a rollout early") {
    ModelConfig cfg = tiny_config();
    AvatarDiT model(cfg, 4);
    Rng data_rng(12);
    Tensor reference = Tensor::randn({cfg.tokens_per_frame, cfg.latent_dim}, data_rng);
    AudioFeatures audio = route_audio(synth_features(13, 20, cfg.audio_dim, 3));
    RolloutOptions opt;
    opt.on_chunk = [](int index, const Tensor&) { return index < 1; };
    CHECK(rollout(model, reference, audio, 5, opt).size() == 2);
}

TEST_CASE("long rollout keeps positional indices bounded") {
    ModelConfig cfg = micro_config();
    AvatarDiT model(cfg, 4);
    Rng data_rng(14);
    Tensor reference = Tensor::randn({cfg.tokens_per_frame, cfg.latent_dim}, data_rng);
    const int chunks = 40;
    AudioFeatures audio =
        route_audio(synth_features(15, chunks * cfg.chunk_size + 1, cfg.audio_dim, 5));

    RolloutOptions opt;
    Instrumentation instr;
    opt.instr = &instr;
    rollout(model, reference, audio, chunks, opt);
    CHECK(instr.max_position_index == opt.cache.rapr_cap);
    CHECK(instr.student_forcing);

    // Control: with relative anchoring disabled the indices grow with t, far
    // past anything seen during windowed training.
    RolloutOptions vanilla;
    vanilla.cache.rapr_enabled = false;
    Instrumentation raw;
    vanilla.instr = &raw;
    rollout(model, reference, audio, chunks, vanilla);
    CHECK(raw.max_position_index == chunks * cfg.chunk_size);
    CHECK(raw.max_position_index > cfg.window_frames + 1);
}

TEST_CASE("future audio cannot influence earlier chunks") {
    ModelConfig cfg = tiny_config();
    AvatarDiT model(cfg, 4);
    activate(model, 5);
    Rng data_rng(16);
    Tensor reference = Tensor::randn({cfg.tokens_per_frame, cfg.latent_dim}, data_rng);
    AudioTrack track = synth_features(17, 20, cfg.audio_dim, 3);

    RolloutOptions opt;
    opt.seed = 3;
    std::vector<Tensor> base = rollout(model, reference, route_audio(track), 3, opt);

    // Rewrite audio from frame 7 on (chunk 3 and later).
    AudioTrack edited = track;
    edited.features = track.features.clone();
    for (int t = 7; t < edited.frames(); ++t) {
        for (int d = 0; d < edited.audio_dim(); ++d) {
            edited.features.mutable_data()[static_cast<size_t>(t) * edited.audio_dim() + d] += 2.0;
        }
    }
    std::vector<Tensor> out = rollout(model, reference, route_audio(edited), 3, opt);
    CHECK(max_abs_diff(base[0], out[0]) == 0.0);
    CHECK(max_abs_diff(base[1], out[1]) == 0.0);
    CHECK(max_abs_diff(base[2], out[2]) > 0.0);
}

TEST_CASE("rollout rejects audio shorter than the horizon") {
    ModelConfig cfg = tiny_config();
    AvatarDiT model(cfg, 4);
    Rng data_rng(18);
    Tensor reference = Tensor::randn({cfg.tokens_per_frame, cfg.latent_dim}, data_rng);
    AudioFeatures audio = route_audio(synth_features(19, 6, cfg.audio_dim, 2));
    CHECK_THROWS_AS(rollout(model, reference, audio, 2, RolloutOptions{}), ValidationError);
}
