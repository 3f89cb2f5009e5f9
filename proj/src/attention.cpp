#include "sdit/attention.hpp"

#include <cmath>

namespace sdit {

namespace {
constexpr double kMaskedLogit = -1e30;
}

ChunkLayout::ChunkLayout(int t, int c) : window_frames(t), chunk_size(c) {
    if (t <= 0 || c <= 0) throw ValidationError("ChunkLayout: T and C must be positive");
    if (t % c != 0) throw ValidationError("ChunkLayout: T must be a multiple of C");
}

int ChunkLayout::chunk_of(int frame) const {
    if (frame < 0 || frame > window_frames) throw ValidationError("chunk_of: frame out of window");
    if (frame == 0) return 0;
    return (frame + chunk_size - 1) / chunk_size;  // ceil(frame / C)
}

FrameMask FrameMask::all(int q, int k) {
    return FrameMask{q, k, std::vector<uint8_t>(static_cast<size_t>(q) * k, 1)};
}

FrameMask FrameMask::none(int q, int k) {
    return FrameMask{q, k, std::vector<uint8_t>(static_cast<size_t>(q) * k, 0)};
}

FrameMask build_block_causal_mask(const ChunkLayout& layout) {
    const int f = layout.total_frames();
    FrameMask mask = FrameMask::none(f, f);
    for (int q = 0; q < f; ++q) {
        for (int k = 0; k < f; ++k) {
            mask.set(q, k, layout.chunk_of(k) <= layout.chunk_of(q));
        }
    }
    return mask;
}

void RopeParams::validate() const {
    if (head_dim <= 0 || head_dim % 2 != 0) throw ValidationError("RopeParams: head_dim must be even and positive");
    if (theta_base <= 1.0) throw ValidationError("RopeParams: theta_base must exceed 1");
    if (max_index <= 0) throw ValidationError("RopeParams: max_index must be positive");
}

double rope_angle(const RopeParams& params, int index, int pair) {
    return index * std::pow(params.theta_base, -2.0 * pair / params.head_dim);
}

Tensor rope_frames(const Tensor& x, const std::vector<int>& frame_indices,
                   int tokens_per_frame, int heads, const RopeParams& params) {
    params.validate();
    const int rows = x.rows();
    const int cols = x.cols();
    if (cols != heads * params.head_dim) {
        throw ShapeError("rope_frames: columns must equal heads*head_dim");
    }
    if (rows != static_cast<int>(frame_indices.size()) * tokens_per_frame) {
        throw ShapeError("rope_frames: one positional index required per frame");
    }
    const int half = params.head_dim / 2;
    std::vector<double> angles(static_cast<size_t>(rows) * cols / 2);
    for (int row = 0; row < rows; ++row) {
        const int idx = frame_indices[row / tokens_per_frame];
        for (int h = 0; h < heads; ++h) {
            for (int p = 0; p < half; ++p) {
                angles[static_cast<size_t>(row) * (cols / 2) + h * half + p] =
                    rope_angle(params, idx, p);
            }
        }
    }
    return rope_rows(x, Tensor::from({rows, cols / 2}, std::move(angles)));
}

Tensor mask_bias(const FrameMask& mask, int tpf_q, int tpf_k) {
    const int rq = mask.query_frames * tpf_q;
    const int rk = mask.key_frames * tpf_k;
    std::vector<double> bias(static_cast<size_t>(rq) * rk, 0.0);
    for (int q = 0; q < rq; ++q) {
        for (int k = 0; k < rk; ++k) {
            if (!mask.at(q / tpf_q, k / tpf_k)) {
                bias[static_cast<size_t>(q) * rk + k] = kMaskedLogit;
            }
        }
    }
    return Tensor::from({rq, rk}, std::move(bias));
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                 double scale_factor, const Tensor& bias) {
    const int dim = q.cols();
    if (dim % heads != 0) throw ShapeError("attention: dim not divisible by heads");
    if (k.cols() != dim || v.cols() != dim) throw ShapeError("attention: q/k/v dim mismatch");
    if (k.rows() != v.rows()) throw ShapeError("attention: key/value row mismatch");
    if (bias.rows() != q.rows() || bias.cols() != k.rows()) {
        throw ShapeError("attention: bias must be [rows_q, rows_k]");
    }
    const int hd = dim / heads;
    std::vector<Tensor> head_outs;
    head_outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(q, h * hd, hd);
        Tensor kh = slice_cols(k, h * hd, hd);
        Tensor vh = slice_cols(v, h * hd, hd);
        Tensor logits = add(scale(matmul(qh, transpose(kh)), scale_factor), bias);
        Tensor probs = softmax_rows(logits);
        head_outs.push_back(matmul(probs, vh));
    }
    return heads == 1 ? head_outs[0] : concat_cols(head_outs);
}

Tensor attention_frames(const Tensor& q, const Tensor& k, const Tensor& v, int heads,
                        double scale_factor, const FrameMask& mask, int tpf_q, int tpf_k) {
    for (int qf = 0; qf < mask.query_frames; ++qf) {
        bool any = false;
        for (int kf = 0; kf < mask.key_frames && !any; ++kf) any = mask.at(qf, kf);
        if (!any) throw ValidationError("attention: query frame with zero allowed keys");
    }
    return attention(q, k, v, heads, scale_factor, mask_bias(mask, tpf_q, tpf_k));
}

}  // namespace sdit
