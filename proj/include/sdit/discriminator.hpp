#pragma once

#include <utility>
#include <vector>

#include "sdit/model.hpp"

namespace sdit {

struct DiscConfig {
    int num_extractors = 3;  // N_Q
    bool freeze_backbone = false;

    void validate(const ModelConfig& backbone) const;
};

struct DiscOutput {
    Tensor per_frame_logits;  // [frames-1, 1], generated frames only
    Tensor global_logit;      // [1, 1]
};

// Consistency-aware discriminator: a teacher-initialized backbone with N_Q
// query extractors reading evenly spaced intermediate layers, a per-frame
// realism head, and a reference-anchored global consistency head.
class Discriminator {
  public:
    // Backbone weights are copied from the teacher; extractors and heads are
    // freshly initialized from the seed.
    Discriminator(const AvatarDiT& teacher, const DiscConfig& cfg, uint64_t seed);

    const DiscConfig& config() const { return cfg_; }
    const AvatarDiT& backbone() const { return backbone_; }
    std::vector<std::pair<std::string, Tensor>> parameters() const;  // trainable set
    std::vector<std::pair<std::string, Tensor>> all_parameters() const;
    void load_parameters(const std::vector<std::pair<std::string, Tensor>>& named);
    void zero_grads();

    // latents: [F*tpf, latent_dim] with the reference frame first. frame_ids
    // give each frame's identity (positions, query binding, audio rows), so
    // reordering frames together with their ids permutes per-frame logits.
    DiscOutput forward(const Tensor& latents, const std::vector<int>& frame_ids,
                       const AudioFeatures& audio) const;
    DiscOutput forward_window(const Tensor& latents, const AudioFeatures& audio) const;

    // Scalar critic value used by gradient penalties: mean per-frame logit
    // plus the global logit.
    Tensor critic(const Tensor& latents, const std::vector<int>& frame_ids,
                  const AudioFeatures& audio) const;

    std::vector<int> extractor_layers() const;  // evenly spaced attachment points

  private:
    struct Extractor {
        Tensor queries;  // [max_frames, dim], learnable per-frame query
        Tensor wk, wv, wo;
    };

    DiscConfig cfg_;
    AvatarDiT backbone_;
    std::vector<Extractor> extractors_;
    Tensor local_w_, local_b_;    // per-frame realism head
    Tensor gq_, gk_, gv_;         // global consistency cross-attention
    Tensor global_w_, global_b_;  // global projection
};

}  // namespace sdit
