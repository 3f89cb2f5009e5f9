#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "helpers.hpp"
#include "sdit/audio.hpp"

using namespace sdit;

namespace {

AudioTrack track_with_mask(std::vector<uint8_t> mask, uint64_t seed = 1) {
    const int frames = static_cast<int>(mask.size());
    AudioTrack t = synth_features(seed, frames, 6, 0);
    t.mask.values = std::move(mask);
    return t;
}

}  // namespace

TEST_CASE("mask routing extremes") {
    AudioTrack all_talk = track_with_mask({1, 1, 1, 1});
    RoutedAudio r = apply_mask(all_talk);
    CHECK(testutil::max_abs_diff(r.talking, all_talk.features) == 0.0);
    for (int64_t i = 0; i < r.listening.numel(); ++i) CHECK(r.listening.at(i) == 0.0);

    AudioTrack all_listen = track_with_mask({0, 0, 0, 0});
    RoutedAudio r2 = apply_mask(all_listen);
    CHECK(testutil::max_abs_diff(r2.listening, all_listen.features) == 0.0);
    for (int64_t i = 0; i < r2.talking.numel(); ++i) CHECK(r2.talking.at(i) == 0.0);
}

TEST_CASE("partition identity over random masks") {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        std::vector<uint8_t> mask(16);
        for (auto& m : mask) m = static_cast<uint8_t>(rng.integer(0, 1));
        AudioTrack t = track_with_mask(mask, 100 + trial);
        RoutedAudio r = apply_mask(t);
        CHECK(testutil::max_abs_diff(add(r.talking, r.listening), t.features) == 0.0);
        // Exact-zero routing on the complementary frames.
        for (int f = 0; f < t.frames(); ++f) {
            for (int d = 0; d < t.audio_dim(); ++d) {
                const int64_t i = static_cast<int64_t>(f) * t.audio_dim() + d;
                if (mask[f] == 1) {
                    CHECK(r.listening.at(i) == 0.0);
                } else {
                    CHECK(r.talking.at(i) == 0.0);
                }
            }
        }
    }
}

TEST_CASE("mask application is idempotent") {
    AudioTrack t = track_with_mask({1, 0, 1, 0, 1, 1});
    RoutedAudio first = apply_mask(t);
    AudioTrack again{first.talking, t.mask};
    RoutedAudio second = apply_mask(again);
    CHECK(testutil::max_abs_diff(second.talking, first.talking) == 0.0);
}

TEST_CASE("synthetic generator determinism and mask pattern") {
    AudioTrack a = synth_features(42, 40, 8, 10);
    AudioTrack b = synth_features(42, 40, 8, 10);
    CHECK(testutil::max_abs_diff(a.features, b.features) == 0.0);
    CHECK(a.mask.values == b.mask.values);
    for (int t = 0; t < 40; ++t) {
        CHECK(a.mask.values[t] == ((t / 10) % 2 == 0 ? 1 : 0));
    }
    AudioTrack c = synth_features(43, 40, 8, 10);
    CHECK(testutil::max_abs_diff(a.features, c.features) > 0.0);
}

TEST_CASE("generator features are smooth: lag-1 autocorrelation beats lag-10") {
    AudioTrack t = synth_features(7, 400, 4, 0);
    auto autocorr = [&](int lag) {
        double acc = 0.0;
        int n = 0;
        for (int f = 0; f + lag < t.frames(); ++f) {
            for (int d = 0; d < t.audio_dim(); ++d) {
                acc += t.features.at(static_cast<int64_t>(f) * t.audio_dim() + d) *
                       t.features.at(static_cast<int64_t>(f + lag) * t.audio_dim() + d);
                ++n;
            }
        }
        return acc / n;
    };
    CHECK(autocorr(1) > autocorr(10));
}

TEST_CASE("track file round trip") {
    const std::string path = "test_track.bin";
    AudioTrack t = synth_features(5, 12, 3, 4);
    save_track(t, path);
    AudioTrack loaded = load_track(path);
    CHECK(loaded.frames() == 12);
    CHECK(loaded.audio_dim() == 3);
    CHECK(loaded.mask.values == t.mask.values);
    // Features pass through 32-bit storage.
    CHECK(testutil::max_abs_diff(loaded.features, t.features) < 1e-6);
    std::remove(path.c_str());
}

TEST_CASE("track file error kinds are distinct") {
    const std::string path = "test_track_bad.bin";
    AudioTrack t = synth_features(5, 4, 2, 2);
    save_track(t, path);

    // Corrupt magic.
    {
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out);
        f.seekp(0);
        f.put('X');
    }
    CHECK_THROWS_AS(load_track(path), IoError);

    // Truncation.
    save_track(t, path);
    {
        std::ifstream in(path, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                                std::istreambuf_iterator<char>());
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 6));
    }
    CHECK_THROWS_AS(load_track(path), IoError);

    // Non-binary mask byte.
    save_track(t, path);
    {
        std::fstream f(path, std::ios::binary | std::ios::in | std::ios::out | std::ios::ate);
        f.seekp(-1, std::ios::end);
        f.put(static_cast<char>(7));
    }
    CHECK_THROWS_AS(load_track(path), ValidationError);

    CHECK_THROWS_AS(load_track("does_not_exist.bin"), IoError);
    std::remove(path.c_str());
}

TEST_CASE("length mismatch rejected") {
    AudioTrack t = synth_features(1, 6, 2, 0);
    t.mask.values.pop_back();
    CHECK_THROWS_AS(t.validate(), ValidationError);
    t.mask.values.push_back(3);
    CHECK_THROWS_AS(t.validate(), ValidationError);
}

TEST_CASE("slice bounds") {
    AudioTrack t = synth_features(1, 10, 2, 3);
    AudioTrack s = t.slice(2, 4);
    CHECK(s.frames() == 4);
    CHECK(s.mask.values[0] == t.mask.values[2]);
    CHECK_THROWS_AS(t.slice(8, 4), ValidationError);
}
