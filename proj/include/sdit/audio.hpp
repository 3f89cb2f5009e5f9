#pragma once

#include <string>
#include <vector>

#include "sdit/rng.hpp"
#include "sdit/tensor.hpp"

namespace sdit {

// Per-video-frame binary indicator: 1 = speaking, 0 = listening.
struct AudioMask {
    std::vector<uint8_t> values;

    int frames() const { return static_cast<int>(values.size()); }
    void validate() const;
};

// Pre-extracted speech features, one vector per video frame, plus the
// talking/listening mask. Feature extraction itself happens upstream; tracks
// arrive as files or from the synthetic generator below.
struct AudioTrack {
    Tensor features;  // [frames, audio_dim]
    AudioMask mask;

    int frames() const { return features.rows(); }
    int audio_dim() const { return features.cols(); }
    void validate() const;
    AudioTrack slice(int start, int count) const;
};

// Multiplicative routing: talking = features * mask, listening =
// features * (1 - mask), broadcast over the feature dimension. The input
// track is left untouched.
struct RoutedAudio {
    Tensor talking;
    Tensor listening;
};
RoutedAudio apply_mask(const AudioTrack& track);

// Deterministic smooth pseudo-random features (per-dim random walks passed
// through a fixed low-pass) so goldens are stable across runs.
// mask_pattern: alternation period in frames; 0 means all-speaking.
AudioTrack synth_features(uint64_t seed, int frames, int audio_dim, int mask_pattern);

// Track file "ATRK1": magic, u32 frame count, u32 audio_dim, f32 features
// row-major, u8 mask per frame. Little-endian.
AudioTrack load_track(const std::string& path);
void save_track(const AudioTrack& track, const std::string& path);

}  // namespace sdit
