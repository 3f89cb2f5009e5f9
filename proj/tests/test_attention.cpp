#include <doctest.h>

#include <cmath>

#include "helpers.hpp"
#include "sdit/attention.hpp"

using namespace sdit;

TEST_CASE("chunk layout") {
    ChunkLayout layout(6, 3);
    CHECK(layout.num_chunks() == 2);
    CHECK(layout.total_frames() == 7);
    CHECK(layout.chunk_of(0) == 0);
    CHECK(layout.chunk_of(1) == 1);
    CHECK(layout.chunk_of(3) == 1);
    CHECK(layout.chunk_of(4) == 2);
    CHECK(layout.chunk_of(6) == 2);
    CHECK(layout.chunk_start(1) == 1);
    CHECK(layout.chunk_end(1) == 3);
    CHECK(layout.chunk_start(2) == 4);
    CHECK(layout.chunk_end(2) == 6);
    CHECK_THROWS_AS(ChunkLayout(7, 3), ValidationError);
}

TEST_CASE("block causal mask matches brute-force chunk rule") {
    ChunkLayout layout(6, 3);
    FrameMask mask = build_block_causal_mask(layout);
    for (int q = 0; q < 7; ++q) {
        for (int k = 0; k < 7; ++k) {
            CHECK(mask.at(q, k) == (layout.chunk_of(k) <= layout.chunk_of(q)));
        }
    }
    // Spot checks from the chunk rule.
    for (int k = 0; k <= 3; ++k) CHECK(mask.at(2, k));
    CHECK_FALSE(mask.at(2, 4));
    for (int k = 0; k <= 6; ++k) CHECK(mask.at(4, k));
    CHECK(mask.at(0, 0));
    for (int k = 1; k <= 6; ++k) CHECK_FALSE(mask.at(0, k));
}

TEST_CASE("mask degenerate chunk sizes") {
    // C=1: strict frame-causal.
    FrameMask causal = build_block_causal_mask(ChunkLayout(4, 1));
    for (int q = 0; q < 5; ++q) {
        for (int k = 0; k < 5; ++k) CHECK(causal.at(q, k) == (k <= q));
    }
    // C=T: reference-causal, generation window fully bidirectional.
    FrameMask single = build_block_causal_mask(ChunkLayout(4, 4));
    for (int k = 1; k <= 4; ++k) CHECK_FALSE(single.at(0, k));
    for (int q = 1; q <= 4; ++q) {
        for (int k = 0; k <= 4; ++k) CHECK(single.at(q, k));
    }
    // Idempotence.
    CHECK(build_block_causal_mask(ChunkLayout(6, 3)) ==
          build_block_causal_mask(ChunkLayout(6, 3)));
}

TEST_CASE("rope zero index is identity") {
    Rng rng(11);
    RopeParams params{8, 10000.0, 64};
    Tensor x = Tensor::randn({4, 16}, rng);  // 2 frames, tpf 2, heads 2
    Tensor y = rope_frames(x, {0, 0}, 2, 2, params);
    CHECK(testutil::max_abs_diff(x, y) < 1e-15);
}

TEST_CASE("rope relative-position identity") {
    Rng rng(12);
    RopeParams params{16, 10000.0, 64};
    double worst = 0.0;
    for (int trial = 0; trial < 1000; ++trial) {
        Tensor q = Tensor::randn({1, 16}, rng);
        Tensor k = Tensor::randn({1, 16}, rng);
        const int m = static_cast<int>(rng.integer(0, 128));
        const int n = static_cast<int>(rng.integer(0, 128));
        const int s = static_cast<int>(rng.integer(0, 128));
        auto dot_at = [&](int qi, int ki) {
            Tensor qr = rope_frames(q, {qi}, 1, 1, params);
            Tensor kr = rope_frames(k, {ki}, 1, 1, params);
            double acc = 0.0;
            for (int i = 0; i < 16; ++i) acc += qr.at(i) * kr.at(i);
            return acc;
        };
        worst = std::max(worst, std::abs(dot_at(m, n) - dot_at(m + s, n + s)));
    }
    CHECK(worst < 1e-10);
}

TEST_CASE("rope long-term decay trend") {
    Rng rng(13);
    RopeParams params{32, 10000.0, 64};
    std::vector<double> mean_dot(257, 0.0);
    const int pairs = 128;
    for (int p = 0; p < pairs; ++p) {
        // Positive components; decay is a trend statement over such vectors.
        std::vector<double> qv(32), kv(32);
        for (auto& v : qv) v = std::abs(rng.normal());
        for (auto& v : kv) v = std::abs(rng.normal());
        Tensor q = Tensor::from({1, 32}, std::move(qv));
        Tensor k = Tensor::from({1, 32}, std::move(kv));
        Tensor q0 = rope_frames(q, {0}, 1, 1, params);
        for (int d = 0; d <= 256; ++d) {
            Tensor kd = rope_frames(k, {d}, 1, 1, params);
            double acc = 0.0;
            for (int i = 0; i < 32; ++i) acc += q0.at(i) * kd.at(i);
            mean_dot[d] += std::abs(acc) / pairs;
        }
    }
    auto bucket = [&](int lo, int hi) {
        double acc = 0.0;
        for (int d = lo; d < hi; ++d) acc += mean_dot[d];
        return acc / (hi - lo);
    };
    const double near = bucket(0, 16);
    const double mid = bucket(64, 128);
    const double far = bucket(192, 257);
    CHECK(near > mid);
    CHECK(near > far);
    CHECK(mid > far);
}

TEST_CASE("attention basics") {
    Rng rng(14);
    const double sc = 1.0 / std::sqrt(4.0);
    // Single key: output equals v regardless of q.
    Tensor q = Tensor::randn({3, 4}, rng);
    Tensor k = Tensor::randn({1, 4}, rng);
    Tensor v = Tensor::randn({1, 4}, rng);
    Tensor out = attention(q, k, v, 1, sc, Tensor::zeros({3, 1}));
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 4; ++c) CHECK(out.at(r * 4 + c) == doctest::Approx(v.at(c)));
    }
}

TEST_CASE("all-true frame mask equals unmasked attention") {
    Rng rng(15);
    const int tpf = 2, heads = 2;
    const double sc = 1.0 / std::sqrt(4.0);
    Tensor q = Tensor::randn({6, 8}, rng);
    Tensor k = Tensor::randn({6, 8}, rng);
    Tensor v = Tensor::randn({6, 8}, rng);
    Tensor masked = attention_frames(q, k, v, heads, sc, FrameMask::all(3, 3), tpf, tpf);
    Tensor open = attention(q, k, v, heads, sc, Tensor::zeros({6, 6}));
    CHECK(testutil::max_abs_diff(masked, open) < 1e-12);
}

TEST_CASE("block-causal attention equals restricted recomputation") {
    Rng rng(16);
    const int tpf = 2, heads = 2, dim = 8;
    const double sc = 1.0 / std::sqrt(4.0);
    ChunkLayout layout(6, 3);
    FrameMask mask = build_block_causal_mask(layout);
    const int f = layout.total_frames();
    Tensor q = Tensor::randn({f * tpf, dim}, rng);
    Tensor k = Tensor::randn({f * tpf, dim}, rng);
    Tensor v = Tensor::randn({f * tpf, dim}, rng);
    Tensor full = attention_frames(q, k, v, heads, sc, mask, tpf, tpf);
    for (int frame = 0; frame < f; ++frame) {
        // Gather this frame's allowed keys and recompute without masking.
        std::vector<Tensor> ks, vs;
        for (int other = 0; other < f; ++other) {
            if (!mask.at(frame, other)) continue;
            ks.push_back(slice_rows(k, other * tpf, tpf));
            vs.push_back(slice_rows(v, other * tpf, tpf));
        }
        Tensor kf = concat_rows(ks);
        Tensor vf = concat_rows(vs);
        Tensor qf = slice_rows(q, frame * tpf, tpf);
        Tensor ref = attention(qf, kf, vf, heads, sc, Tensor::zeros({tpf, kf.rows()}));
        CHECK(testutil::max_abs_diff(slice_rows(full, frame * tpf, tpf), ref) < 1e-6);
    }
}

TEST_CASE("fully masked query row is an error") {
    Rng rng(17);
    Tensor q = Tensor::randn({2, 4}, rng);
    Tensor k = Tensor::randn({2, 4}, rng);
    Tensor v = Tensor::randn({2, 4}, rng);
    FrameMask mask = FrameMask::none(1, 1);
    CHECK_THROWS_AS(attention_frames(q, k, v, 1, 0.5, mask, 2, 2), ValidationError);
}

TEST_CASE("rope params validation") {
    CHECK_THROWS_AS((RopeParams{7, 10000.0, 64}.validate()), ValidationError);
    CHECK_NOTHROW((RopeParams{8, 10000.0, 64}.validate()));
}
