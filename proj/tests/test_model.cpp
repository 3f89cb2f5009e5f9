#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "sdit/model.hpp"

using namespace sdit;
using testutil::max_abs_diff;
using testutil::tiny_config;

namespace {

// Zero-initialized modulation gates make every block an identity map; give the
// gates and shifts random values so the blocks actually transform.
void activate_blocks(AvatarDiT& model, uint64_t seed, double stddev = 0.4) {
    Rng rng(seed);
    for (int l = 0; l < model.config().layers; ++l) {
        Tensor b = model.param("block" + std::to_string(l) + ".mod.b");
        for (double& v : b.mutable_data()) v = rng.normal(0.0, stddev);
        Tensor w = model.param("block" + std::to_string(l) + ".mod.w");
        for (double& v : w.mutable_data()) v = rng.normal(0.0, stddev * 0.1);
    }
}

void randomize_audio_projections(AvatarDiT& model, uint64_t seed) {
    Rng rng(seed);
    for (int l = 0; l < model.config().layers; ++l) {
        for (const char* name : {".audio.wo", ".interact.wo"}) {
            Tensor w = model.param("block" + std::to_string(l) + name);
            for (double& v : w.mutable_data()) v = rng.normal(0.0, 0.05);
        }
    }
}

struct WindowFixture {
    ModelConfig cfg;
    Tensor window;
    AudioTrack track;
    AudioFeatures audio;
};

WindowFixture make_fixture(uint64_t seed) {
    WindowFixture f;
    f.cfg = tiny_config();
    Rng rng(seed);
    f.window = Tensor::randn({(f.cfg.window_frames + 1) * f.cfg.tokens_per_frame,
                              f.cfg.latent_dim},
                             rng);
    f.track = synth_features(seed + 1, f.cfg.window_frames + 1, f.cfg.audio_dim, 2);
    f.audio = route_audio(f.track);
    return f;
}

}  // namespace

TEST_CASE("teacher forward shape contract") {
    WindowFixture f = make_fixture(1);
    AvatarDiT model(f.cfg, 7);
    Tensor out = model.teacher_forward(f.window, 0.5, f.audio);
    CHECK(out.rows() == f.window.rows());
    CHECK(out.cols() == f.cfg.latent_dim);
}

TEST_CASE("zero-initialized audio branches ignore audio content") {
    WindowFixture f = make_fixture(2);
    AvatarDiT model(f.cfg, 7);
    activate_blocks(model, 8);
    Tensor out1 = model.teacher_forward(f.window, 0.5, f.audio);
    AudioTrack other = synth_features(99, f.cfg.window_frames + 1, f.cfg.audio_dim, 3);
    Tensor out2 = model.teacher_forward(f.window, 0.5, route_audio(other));
    CHECK(max_abs_diff(out1, out2) == 0.0);
}

TEST_CASE("masked-out frame features never reach the talking branch") {
    WindowFixture f = make_fixture(3);
    AvatarDiT model(f.cfg, 7);
    activate_blocks(model, 8);
    randomize_audio_projections(model, 9);
    // Isolate the talking branch: silence the interact output projection.
    for (int l = 0; l < f.cfg.layers; ++l) {
        Tensor w = model.param("block" + std::to_string(l) + ".interact.wo");
        std::fill(w.mutable_data().begin(), w.mutable_data().end(), 0.0);
    }
    Tensor base = model.teacher_forward(f.window, 0.5, f.audio);

    // Scramble raw features on listening frames only; the mask zeroes them out
    // of the talking input, so the output must not move.
    AudioTrack scrambled = f.track;
    scrambled.features = f.track.features.clone();
    Rng rng(44);
    for (int t = 0; t < scrambled.frames(); ++t) {
        if (scrambled.mask.values[t] == 1) continue;
        for (int d = 0; d < scrambled.audio_dim(); ++d) {
            scrambled.features.mutable_data()[static_cast<size_t>(t) * scrambled.audio_dim() + d] =
                rng.normal();
        }
    }
    Tensor out = model.teacher_forward(f.window, 0.5, route_audio(scrambled));
    CHECK(max_abs_diff(base, out) == 0.0);
}

TEST_CASE("blocks start as identity maps") {
    WindowFixture f = make_fixture(4);
    AvatarDiT model(f.cfg, 7);
    std::vector<Tensor> acts;
    model.teacher_forward(f.window, 0.7, f.audio, &acts);
    REQUIRE(static_cast<int>(acts.size()) == f.cfg.layers);
    for (size_t l = 1; l < acts.size(); ++l) {
        CHECK(max_abs_diff(acts[0], acts[l]) == 0.0);
    }
}

TEST_CASE("timestep embedding distinguishes noise levels deterministically") {
    AvatarDiT model(tiny_config(), 7);
    Tensor lo = model.time_embedding({0.0});
    Tensor hi = model.time_embedding({1.0});
    CHECK(max_abs_diff(lo, model.time_embedding({0.0})) == 0.0);
    CHECK(max_abs_diff(lo, hi) > 1e-6);
}

TEST_CASE("first chunk against the reference equals the masked window forward") {
    ModelConfig cfg = tiny_config();
    AvatarDiT model(cfg, 7);
    activate_blocks(model, 8);
    randomize_audio_projections(model, 9);
    Rng rng(5);
    const int tpf = cfg.tokens_per_frame;
    Tensor reference = Tensor::randn({tpf, cfg.latent_dim}, rng);
    Tensor chunk = Tensor::randn({cfg.chunk_size * tpf, cfg.latent_dim}, rng);
    AudioTrack track = synth_features(6, cfg.chunk_size + 1, cfg.audio_dim, 2);
    AudioFeatures audio = route_audio(track);
    const double sigma = 0.66;

    RollingKvCache cache{CacheConfig{.sink_capacity = 4,
                                     .window_capacity = 6,
                                     .rapr_cap = 10,
                                     .chunk_size = cfg.chunk_size}};
    cache.append_chunk({model.encode_reference(reference, audio)});
    ChunkResult streamed = model.forward_chunk(chunk, sigma, 1, cache, audio);

    // Independent path: one joint forward over [reference, chunk] with the
    // block-causal mask and per-frame noise levels.
    std::vector<double> sigmas(cfg.chunk_size + 1, sigma);
    sigmas[0] = 0.0;
    Tensor window_out =
        model.student_window_forward(concat_rows({reference, chunk}), sigmas, audio);
    Tensor expected = slice_rows(window_out, tpf, cfg.chunk_size * tpf);
    CHECK(max_abs_diff(streamed.prediction, expected) < 1e-5);

    // KV contract: one raw entry per chunk frame per layer.
    CHECK(static_cast<int>(streamed.entries.size()) == cfg.chunk_size);
    for (const auto& e : streamed.entries) {
        CHECK(static_cast<int>(e.keys.size()) == cfg.layers);
        CHECK(e.keys[0].rows() == tpf);
    }
}

TEST_CASE("chunk forward is deterministic") {
    ModelConfig cfg = tiny_config();
    AvatarDiT model(cfg, 7);
    activate_blocks(model, 8);
    Rng rng(6);
    Tensor reference = Tensor::randn({cfg.tokens_per_frame, cfg.latent_dim}, rng);
    Tensor chunk = Tensor::randn({cfg.chunk_size * cfg.tokens_per_frame, cfg.latent_dim}, rng);
    AudioFeatures audio = route_audio(synth_features(6, 8, cfg.audio_dim, 2));
    RollingKvCache cache{CacheConfig{.chunk_size = cfg.chunk_size}};
    cache.append_chunk({model.encode_reference(reference, audio)});
    ChunkResult a = model.forward_chunk(chunk, 0.5, 1, cache, audio);
    ChunkResult b = model.forward_chunk(chunk, 0.5, 1, cache, audio);
    CHECK(max_abs_diff(a.prediction, b.prediction) == 0.0);
}

TEST_CASE("chunk frames must follow cached frames") {
    ModelConfig cfg = tiny_config();
    AvatarDiT model(cfg, 7);
    Rng rng(6);
    Tensor reference = Tensor::randn({cfg.tokens_per_frame, cfg.latent_dim}, rng);
    Tensor chunk = Tensor::randn({cfg.chunk_size * cfg.tokens_per_frame, cfg.latent_dim}, rng);
    AudioFeatures audio = route_audio(synth_features(6, 8, cfg.audio_dim, 2));
    RollingKvCache cache{CacheConfig{.chunk_size = cfg.chunk_size}};
    cache.append_chunk({model.encode_reference(reference, audio)});
    CHECK_THROWS_AS(model.forward_chunk(chunk, 0.5, 0, cache, audio), ValidationError);
}

TEST_CASE("causal leakage: later chunks cannot influence earlier predictions") {
    WindowFixture f = make_fixture(7);
    AvatarDiT model(f.cfg, 7);
    activate_blocks(model, 8);
    randomize_audio_projections(model, 9);
    std::vector<double> sigmas(f.cfg.window_frames + 1, 0.5);
    sigmas[0] = 0.0;
    Tensor base = model.student_window_forward(f.window, sigmas, f.audio);

    // Perturb the last chunk's latents.
    const int tpf = f.cfg.tokens_per_frame;
    Tensor perturbed = f.window.clone();
    const int last_start = (f.cfg.window_frames - f.cfg.chunk_size + 1) * tpf;
    for (int64_t i = last_start * f.cfg.latent_dim; i < perturbed.numel(); ++i) {
        perturbed.mutable_data()[static_cast<size_t>(i)] += 1.0;
    }
    Tensor out = model.student_window_forward(perturbed, sigmas, f.audio);
    const int guarded_rows = last_start;
    CHECK(max_abs_diff(slice_rows(base, 0, guarded_rows), slice_rows(out, 0, guarded_rows)) ==
          0.0);
    CHECK(max_abs_diff(slice_rows(base, guarded_rows, f.cfg.chunk_size * tpf),
                       slice_rows(out, guarded_rows, f.cfg.chunk_size * tpf)) > 0.0);
}

TEST_CASE("teacher and student share weights compatibly") {
    ModelConfig cfg = tiny_config();
    AvatarDiT teacher(cfg, 7);
    activate_blocks(teacher, 8);
    AvatarDiT student(cfg, 99);
    student.copy_weights_from(teacher);
    WindowFixture f = make_fixture(8);
    std::vector<double> sigmas(cfg.window_frames + 1, 0.4);
    sigmas[0] = 0.0;
    Tensor a = teacher.student_window_forward(f.window, sigmas, f.audio);
    Tensor b = student.student_window_forward(f.window, sigmas, f.audio);
    CHECK(max_abs_diff(a, b) < 1e-6);

    ModelConfig other = cfg;
    other.layers += 1;
    AvatarDiT incompatible(other, 1);
    CHECK_THROWS_AS(incompatible.copy_weights_from(teacher), ValidationError);
}
