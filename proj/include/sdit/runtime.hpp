#pragma once

#include <map>
#include <string>
#include <vector>

#include "sdit/audio.hpp"
#include "sdit/kv_cache.hpp"
#include "sdit/model.hpp"
#include "sdit/scheduler.hpp"

namespace sdit {

// Flat key=value config text. Lines starting with '#' and blank lines are
// skipped; values keep everything after the first '='.
std::map<std::string, std::string> parse_key_values(const std::string& path);
std::map<std::string, std::string> parse_key_value_text(const std::string& text);

ModelConfig model_config_from(const std::map<std::string, std::string>& kv);
// Inverse of ModelConfig::canonical(); checkpoints carry that string.
ModelConfig model_config_from_canonical(const std::string& canonical);
CacheConfig cache_config_from(const std::map<std::string, std::string>& kv);
NoiseSchedule schedule_from(const std::map<std::string, std::string>& kv);

// Latent-to-pixels stand-in for the decoder stage: a fixed seeded linear map
// plus an optional per-chunk wall-clock delay.
class DecodeStub {
  public:
    DecodeStub(int latent_dim, int pixel_dim, uint64_t seed, double delay_seconds = 0.0);
    Tensor decode(const Tensor& chunk_latents) const;  // [rows, pixel_dim]
    double delay_seconds() const { return delay_; }

  private:
    Tensor weight_;
    double delay_;
};

// Injected per-stage timing for the simulated clock: the first chunk costs the
// stage its first-frame delay, every later chunk costs rtf * chunk duration.
struct StageDelays {
    double denoise_ffd = 0.33;
    double denoise_rtf = 0.69;
    double decode_ffd = 0.39;
    double decode_rtf = 0.82;
};

struct PipelineConfig {
    std::string checkpoint_path;
    CacheConfig cache;
    NoiseSchedule schedule;
    double chunk_seconds = 0.48;
    bool clean_recache = false;
    int pixel_dim = 8;
    double decode_delay_seconds = 0.0;
    bool simulated_clock = false;
    StageDelays sim;
    uint64_t seed = 0;
    std::string out_path;

    void validate() const;
    static PipelineConfig from(const std::map<std::string, std::string>& kv);
};

struct StageMetrics {
    double busy_seconds = 0.0;
    double ffd_seconds = 0.0;  // completion time of the stage's first chunk
    double rtf = 0.0;          // busy / generated duration
};

struct RunMetrics {
    StageMetrics denoise;
    StageMetrics decode;
    double latency_seconds = 0.0;  // decode FFD + chunk duration
    int chunks = 0;
    std::vector<double> chunk_wall_seconds;
    int max_position_index = -1;
    int64_t forward_count = 0;

    std::string csv() const;  // header row + one value row
};

// Discrete-event model of the two-stage pipeline: bounded handoff queue of
// the given capacity, producer blocks when it is full. Deterministic.
RunMetrics simulate_pipeline(const StageDelays& delays, int num_chunks, double chunk_seconds,
                             int queue_capacity = 2);

struct StreamResult {
    std::vector<Tensor> latents;  // clean chunks in order
    std::vector<Tensor> pixels;   // decoded chunks in order
    RunMetrics metrics;
    bool audio_exhausted = false;  // stopped early because the track ran out
};

// Runs the denoise and decode stages concurrently (two threads, bounded queue
// of capacity 2) or sequentially; outputs are identical either way. Requests
// past the end of the audio track stop gracefully with partial metrics.
StreamResult stream(const AvatarDiT& model, const PipelineConfig& cfg,
                    const Tensor& reference_latent, const AudioTrack& track, int num_chunks,
                    bool concurrent = true);

struct DriftReport {
    std::vector<double> values;  // one per chunk

    double mean() const;
    std::string csv() const;  // "chunk,drift" header plus rows
};

// Per-chunk distance between the chunk's per-dimension mean/variance
// statistics and the reference frame's.
DriftReport drift_report(const std::vector<Tensor>& chunks, const Tensor& reference_latent);

}  // namespace sdit
