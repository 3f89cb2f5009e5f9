#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "sdit/model.hpp"
#include "sdit/tensor.hpp"

namespace testutil {

// Central finite-difference check of d(loss)/d(leaf) for selected
// coordinates. fn must rebuild the graph from current leaf data every call.
inline double max_rel_err(const std::function<sdit::Tensor()>& fn, sdit::Tensor leaf,
                          const std::vector<int64_t>& coords, double eps = 1e-6) {
    sdit::Tensor loss = fn();
    leaf.zero_grad();
    sdit::backward(loss);
    const std::vector<double> grad = leaf.grad();
    double worst = 0.0;
    for (int64_t c : coords) {
        const double saved = leaf.data()[static_cast<size_t>(c)];
        leaf.mutable_data()[static_cast<size_t>(c)] = saved + eps;
        const double up = fn().item();
        leaf.mutable_data()[static_cast<size_t>(c)] = saved - eps;
        const double down = fn().item();
        leaf.mutable_data()[static_cast<size_t>(c)] = saved;
        const double numeric = (up - down) / (2.0 * eps);
        const double analytic = grad[static_cast<size_t>(c)];
        const double denom = std::max({std::abs(numeric), std::abs(analytic), 1e-8});
        worst = std::max(worst, std::abs(numeric - analytic) / denom);
    }
    return worst;
}

inline std::vector<int64_t> some_coords(int64_t numel, int count) {
    std::vector<int64_t> out;
    const int64_t n = std::min<int64_t>(numel, count);
    for (int64_t i = 0; i < n; ++i) out.push_back((i * numel) / n);
    return out;
}

// Small but structurally complete model, cheap enough for exhaustive tests.
inline sdit::ModelConfig tiny_config() {
    sdit::ModelConfig cfg;
    cfg.layers = 2;
    cfg.model_dim = 32;
    cfg.heads = 2;
    cfg.head_dim = 16;
    cfg.tokens_per_frame = 2;
    cfg.latent_dim = 8;
    cfg.window_frames = 6;
    cfg.chunk_size = 3;
    cfg.audio_dim = 8;
    cfg.prompt_tokens = 2;
    cfg.time_embed_dim = 16;
    return cfg;
}

// Smallest valid model, for long-horizon rollouts.
inline sdit::ModelConfig micro_config() {
    sdit::ModelConfig cfg;
    cfg.layers = 1;
    cfg.model_dim = 8;
    cfg.heads = 1;
    cfg.head_dim = 8;
    cfg.tokens_per_frame = 1;
    cfg.latent_dim = 4;
    cfg.window_frames = 3;
    cfg.chunk_size = 3;
    cfg.audio_dim = 4;
    cfg.prompt_tokens = 1;
    cfg.time_embed_dim = 8;
    return cfg;
}

inline double max_abs_diff(const sdit::Tensor& a, const sdit::Tensor& b) {
    double worst = 0.0;
    for (int64_t i = 0; i < a.numel(); ++i) {
        worst = std::max(worst, std::abs(a.at(i) - b.at(i)));
    }
    return worst;
}

}  // namespace testutil
