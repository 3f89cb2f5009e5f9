#pragma once

#include <functional>
#include <vector>

#include "sdit/audio.hpp"
#include "sdit/kv_cache.hpp"
#include "sdit/model.hpp"
#include "sdit/tensor.hpp"

namespace sdit {

// Strictly decreasing noise levels; the sampler steps through them and
// finishes at sigma = 0.
struct NoiseSchedule {
    std::vector<double> sigmas{1.0, 0.66, 0.33};

    int steps() const { return static_cast<int>(sigmas.size()); }
    void validate() const;
};

// Rectified-flow corruption: x_sigma = (1-sigma)*x + sigma*eps.
Tensor add_noise(const Tensor& clean, double sigma, Rng& rng);
// Converts a model prediction into (x0_hat, velocity) at the given level.
Tensor predicted_clean(const ModelConfig& cfg, const Tensor& x, const Tensor& pred, double sigma);
Tensor predicted_velocity(const ModelConfig& cfg, const Tensor& x, const Tensor& pred, double sigma);

struct DenoiseResult {
    Tensor clean_chunk;               // [C*tpf, latent_dim]
    std::vector<CacheEntry> entries;  // KV recorded during the final pass
};

// One chunk forward at a noise level; the scheduler is generic over it so a
// synthetic exact-velocity model can drive the same sampling loop in tests.
using ChunkForwardFn = std::function<ChunkResult(const Tensor& x, double sigma)>;

DenoiseResult denoise_chunk_with(const ChunkForwardFn& forward, const ModelConfig& cfg,
                                 const Tensor& chunk_noise, const NoiseSchedule& schedule,
                                 bool clean_recache = false, Instrumentation* instr = nullptr);

// Runs the N scheduled passes for one chunk. KV entries come from the final
// pass (noisy-previous-chunk conditioning); with clean_recache an extra pass
// at sigma=0 refreshes them from the clean output instead.
DenoiseResult denoise_chunk(const AvatarDiT& model, const RollingKvCache& cache,
                            const Tensor& chunk_noise, int first_frame,
                            const AudioFeatures& audio, const NoiseSchedule& schedule,
                            bool clean_recache = false, Instrumentation* instr = nullptr);

struct RolloutOptions {
    NoiseSchedule schedule;
    CacheConfig cache;
    bool clean_recache = false;
    uint64_t seed = 0;
    Instrumentation* instr = nullptr;
    // Called after each chunk completes; return false to stop early.
    std::function<bool(int chunk_index, const Tensor& clean_chunk)> on_chunk;
};

// Autoregressive student-forcing rollout: each chunk is initialized from pure
// noise and conditioned, through the cache, on the model's own previous
// output. Returns the clean chunks in order.
std::vector<Tensor> rollout(const AvatarDiT& model, const Tensor& reference_latent,
                            const AudioFeatures& audio, int num_chunks,
                            const RolloutOptions& opt);

}  // namespace sdit
