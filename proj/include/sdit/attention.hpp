#pragma once

#include <cstdint>
#include <vector>

#include "sdit/tensor.hpp"

namespace sdit {

// Frame layout of a generation window: frame 0 is the clean reference chunk
// (chunk index 0); generation frames 1..T are grouped into chunks of size C,
// chunk i spanning frames (i-1)*C+1 .. i*C.
struct ChunkLayout {
    int window_frames;  // T, generated frames (window holds T+1 incl. reference)
    int chunk_size;     // C

    ChunkLayout(int t, int c);

    int num_chunks() const { return window_frames / chunk_size; }
    int total_frames() const { return window_frames + 1; }
    int chunk_of(int frame) const;
    int chunk_start(int chunk) const { return (chunk - 1) * chunk_size + 1; }
    int chunk_end(int chunk) const { return chunk * chunk_size; }
};

// Boolean frame-level mask, lifted to tokens when attention runs. Row-major
// [query_frames x key_frames].
struct FrameMask {
    int query_frames = 0;
    int key_frames = 0;
    std::vector<uint8_t> allowed;

    static FrameMask all(int q, int k);
    static FrameMask none(int q, int k);
    bool at(int q, int k) const { return allowed[static_cast<size_t>(q) * key_frames + k] != 0; }
    void set(int q, int k, bool v) { allowed[static_cast<size_t>(q) * key_frames + k] = v ? 1 : 0; }
    bool operator==(const FrameMask& o) const = default;
};

// Causal between chunks, bidirectional within a chunk; the reference frame is
// visible to every query and sees only itself.
FrameMask build_block_causal_mask(const ChunkLayout& layout);

struct RopeParams {
    int head_dim;               // must be even
    double theta_base = 10000.0;
    int max_index = 1024;       // training positional range, used by OOD checks

    void validate() const;
};

// Angle for rotation pair j at position index: index * theta_base^(-2j/head_dim).
double rope_angle(const RopeParams& params, int index, int pair);

// x: [frames*tokens_per_frame, heads*head_dim], one positional index per
// frame shared by its tokens. Rotates each head's consecutive dim pairs.
Tensor rope_frames(const Tensor& x, const std::vector<int>& frame_indices,
                   int tokens_per_frame, int heads, const RopeParams& params);

// Additive attention bias from a frame mask: 0 where allowed, -1e30 where
// masked. tpf_q/tpf_k lift frames to token granularity.
Tensor mask_bias(const FrameMask& mask, int tpf_q, int tpf_k);

// Multi-head scaled dot product attention over already position-encoded q/k.
// bias is a constant [rows_q, rows_k] tensor; rows with no finite key are an
// error upstream (see attention_frames).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                 double scale, const Tensor& bias);

// Frame-mask convenience wrapper; rejects query frames with zero allowed keys.
Tensor attention_frames(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                        double scale, const FrameMask& mask, int tpf_q, int tpf_k);

}  // namespace sdit
