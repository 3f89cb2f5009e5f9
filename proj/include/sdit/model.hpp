#pragma once

#include <string>
#include <utility>
#include <vector>

#include "sdit/attention.hpp"
#include "sdit/audio.hpp"
#include "sdit/kv_cache.hpp"
#include "sdit/tensor.hpp"

namespace sdit {

struct Instrumentation {
    int64_t forward_count = 0;    // denoise forwards, ticked by the scheduler
    int max_position_index = -1;  // largest rotary index emitted anywhere
    bool student_forcing = true;  // cleared if context came from ground truth
    std::vector<double> chunk_wall_seconds;

    void observe_index(int idx) {
        if (idx > max_position_index) max_position_index = idx;
    }
};

struct ModelConfig {
    int layers = 4;
    int model_dim = 128;
    int heads = 4;
    int head_dim = 32;
    int tokens_per_frame = 4;
    int latent_dim = 16;
    int window_frames = 12;  // T, generated frames per training window
    int chunk_size = 3;      // C
    int audio_dim = 32;
    int prompt_tokens = 4;
    int time_embed_dim = 32;
    double rope_theta = 10000.0;
    enum class Prediction { Velocity, Epsilon };
    Prediction prediction = Prediction::Velocity;

    void validate() const;
    ChunkLayout layout() const { return ChunkLayout(window_frames, chunk_size); }
    RopeParams rope() const { return RopeParams{head_dim, rope_theta, window_frames}; }
    double attn_scale() const;
    // Canonical architecture string; checkpoint compatibility digests hash it.
    // Mode (teacher vs student) is a forward-time property, not a weight
    // property, so it is deliberately absent.
    std::string canonical() const;
};

ModelConfig::Prediction prediction_from_string(const std::string& s);
std::string prediction_to_string(ModelConfig::Prediction p);

// Masked talking/listening feature rows, one row per global frame id.
struct AudioFeatures {
    Tensor talking;    // [frames, audio_dim]
    Tensor listening;  // [frames, audio_dim]
};
AudioFeatures route_audio(const AudioTrack& track);

struct ForwardOptions {
    FrameMask self_mask;         // [F x F]
    FrameMask audio_mask;        // [F x F], frame-to-audio-frame visibility
    std::vector<int> positions;  // rotary index per frame
    std::vector<double> sigmas;  // noise level per frame (0 = clean)
    std::vector<Tensor>* activations = nullptr;  // per-block token outputs
    Instrumentation* instr = nullptr;
};

struct ChunkResult {
    Tensor prediction;               // [C*tpf, latent_dim]
    std::vector<CacheEntry> entries; // raw (non-encoded) per-layer KV per frame
};

// Toy interactive-avatar diffusion transformer. Teacher and student share
// weights and architecture; the mode only changes masks, positions, and
// whether a KV cache drives the self-attention context.
class AvatarDiT {
  public:
    AvatarDiT(const ModelConfig& cfg, uint64_t seed);

    const ModelConfig& config() const { return cfg_; }
    std::vector<std::pair<std::string, Tensor>> parameters() const;
    Tensor param(const std::string& name) const;
    void load_parameters(const std::vector<std::pair<std::string, Tensor>>& named);
    void copy_weights_from(const AvatarDiT& other);
    void zero_grads();

    // Sinusoidal embedding of the noise level, passed through a small MLP.
    Tensor time_embedding(const std::vector<double>& sigmas) const;

    // Joint forward over a window of F frames (frame 0 is usually the clean
    // reference). latents: [F*tpf, latent_dim]. Output has the same shape.
    Tensor forward_window(const Tensor& latents, const AudioFeatures& audio,
                          const ForwardOptions& opt) const;

    // Teacher mode: bidirectional self-attention, unrestricted audio span,
    // vanilla positions, shared generation timestep (reference stays clean).
    Tensor teacher_forward(const Tensor& window_latents, double sigma,
                           const AudioFeatures& audio,
                           std::vector<Tensor>* activations = nullptr) const;

    // Student mode over a full window without cache: block-causal mask,
    // causal audio span, vanilla positions.
    Tensor student_window_forward(const Tensor& window_latents,
                                  const std::vector<double>& sigmas,
                                  const AudioFeatures& audio) const;
    static FrameMask student_audio_mask(int frames);

    // Streaming student step: chunk tokens attend to the cache's encoded view
    // plus themselves; returns this pass's raw KV for the chunk frames.
    ChunkResult forward_chunk(const Tensor& chunk_latents, double sigma, int first_frame,
                              const RollingKvCache& cache, const AudioFeatures& audio,
                              Instrumentation* instr = nullptr) const;

    // Encodes the clean reference frame into a cache entry (frame id 0).
    CacheEntry encode_reference(const Tensor& reference_latent,
                                const AudioFeatures& audio) const;

  private:
    struct Block {
        Tensor wq, wk, wv, wo;      // self-attention
        Tensor tq, tk, tv, to;      // text cross-attention (fixed prompt)
        Tensor aq, ak, av, ao;      // audio attention (talking cues)
        Tensor iq, ik, iv, io;      // interact audio attention (listening cues)
        Tensor n1, n2, n3, n4, n5;  // rmsnorm gains per sub-layer
        Tensor w1, b1, w2, b2;      // feed-forward
        Tensor mod_w, mod_b;        // timestep modulation (shift/scale/gate x5)
    };

    Tensor block_modulation(const Tensor& time_emb, int block) const;
    Tensor embed(const Tensor& latents) const;
    Tensor head(const Tensor& x) const;

    ModelConfig cfg_;
    std::vector<Block> blocks_;
    Tensor in_w_, in_b_, out_gain_, out_w_, out_b_;
    Tensor prompt_;
    Tensor t_w1_, t_b1_, t_w2_, t_b2_;
};

}  // namespace sdit
