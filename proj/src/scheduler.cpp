#include "sdit/scheduler.hpp"

#include <chrono>

namespace sdit {

void NoiseSchedule::validate() const {
    if (sigmas.empty()) throw ValidationError("NoiseSchedule: schedule is empty");
    double prev = 1.0 + 1e-12;
    for (double s : sigmas) {
        if (s <= 0.0 || s > 1.0) throw ValidationError("NoiseSchedule: sigma out of (0, 1]");
        if (s >= prev) throw ValidationError("NoiseSchedule: sigmas must strictly decrease");
        prev = s;
    }
}

Tensor add_noise(const Tensor& clean, double sigma, Rng& rng) {
    if (sigma <= 0.0 || sigma > 1.0) throw ValidationError("add_noise: sigma out of (0, 1]");
    Tensor eps = Tensor::randn(clean.shape(), rng);
    return add(scale(clean, 1.0 - sigma), scale(eps, sigma));
}

Tensor predicted_clean(const ModelConfig& cfg, const Tensor& x, const Tensor& pred, double sigma) {
    if (cfg.prediction == ModelConfig::Prediction::Velocity) {
        return sub(x, scale(pred, sigma));
    }
    const double denom = std::max(1.0 - sigma, 1e-6);
    return scale(sub(x, scale(pred, sigma)), 1.0 / denom);
}

Tensor predicted_velocity(const ModelConfig& cfg, const Tensor& x, const Tensor& pred,
                          double sigma) {
    if (cfg.prediction == ModelConfig::Prediction::Velocity) return pred;
    const double denom = std::max(1.0 - sigma, 1e-6);
    return scale(sub(pred, x), 1.0 / denom);
}

DenoiseResult denoise_chunk_with(const ChunkForwardFn& forward, const ModelConfig& cfg,
                                 const Tensor& chunk_noise, const NoiseSchedule& schedule,
                                 bool clean_recache, Instrumentation* instr) {
    schedule.validate();
    Tensor x = chunk_noise;
    DenoiseResult result;
    const int n = schedule.steps();
    for (int m = 0; m < n; ++m) {
        const double sigma = schedule.sigmas[m];
        ChunkResult fw = forward(x, sigma);
        if (instr) ++instr->forward_count;
        Tensor v = predicted_velocity(cfg, x, fw.prediction, sigma);
        const double sigma_next = m + 1 < n ? schedule.sigmas[m + 1] : 0.0;
        x = add(x, scale(v, sigma_next - sigma));
        if (m == n - 1) result.entries = std::move(fw.entries);
    }
    if (clean_recache) {
        ChunkResult fw = forward(x, 0.0);
        if (instr) ++instr->forward_count;
        result.entries = std::move(fw.entries);
    }
    result.clean_chunk = x;
    return result;
}

DenoiseResult denoise_chunk(const AvatarDiT& model, const RollingKvCache& cache,
                            const Tensor& chunk_noise, int first_frame,
                            const AudioFeatures& audio, const NoiseSchedule& schedule,
                            bool clean_recache, Instrumentation* instr) {
    return denoise_chunk_with(
        [&](const Tensor& x, double sigma) {
            return model.forward_chunk(x, sigma, first_frame, cache, audio, instr);
        },
        model.config(), chunk_noise, schedule, clean_recache, instr);
}

std::vector<Tensor> rollout(const AvatarDiT& model, const Tensor& reference_latent,
                            const AudioFeatures& audio, int num_chunks,
                            const RolloutOptions& opt) {
    const ModelConfig& cfg = model.config();
    const int c = cfg.chunk_size;
    const int tpf = cfg.tokens_per_frame;
    if (audio.talking.rows() < num_chunks * c + 1) {
        throw ValidationError("rollout: audio shorter than requested horizon");
    }
    Rng rng(opt.seed);
    RollingKvCache cache(opt.cache);
    cache.append_chunk({model.encode_reference(reference_latent, audio)});
    std::vector<Tensor> chunks;
    chunks.reserve(num_chunks);
    for (int i = 1; i <= num_chunks; ++i) {
        const auto t0 = std::chrono::steady_clock::now();
        const int first = (i - 1) * c + 1;
        Tensor noise = Tensor::randn({c * tpf, cfg.latent_dim}, rng);
        // Make room for the incoming chunk so its positional indices stay in
        // [0, D] alongside the retained context.
        cache.evict_for(c);
        DenoiseResult r = denoise_chunk(model, cache, noise, first, audio, opt.schedule,
                                        opt.clean_recache, opt.instr);
        cache.append_chunk(std::move(r.entries));
        if (opt.instr) {
            const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
            opt.instr->chunk_wall_seconds.push_back(dt.count());
        }
        chunks.push_back(r.clean_chunk);
        if (opt.on_chunk && !opt.on_chunk(i - 1, chunks.back())) break;
    }
    return chunks;
}

}  // namespace sdit
