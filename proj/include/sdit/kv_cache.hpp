#pragma once

#include <map>
#include <string>
#include <vector>

#include "sdit/attention.hpp"
#include "sdit/tensor.hpp"

namespace sdit {

enum class CacheRegion { Sink, Window };

// Per-frame cache record. Keys are stored WITHOUT positional encoding; the
// rotary rotation is applied on read at the re-computed index.
struct CacheEntry {
    int frame_id = -1;
    CacheRegion region = CacheRegion::Window;
    std::vector<Tensor> keys;    // one [tokens_per_frame, dim] tensor per layer
    std::vector<Tensor> values;  // same layout
};

struct CacheConfig {
    int sink_capacity = 4;
    int window_capacity = 6;
    int rapr_cap = 10;      // D: maximum positional distance to the reference
    int chunk_size = 3;     // C: eviction granularity and sink extent
    bool sink_enabled = true;
    bool rapr_enabled = true;

    void validate() const;
};

struct EncodedView {
    std::vector<Tensor> keys;    // per layer, [frames*tpf, dim], rotary applied
    std::vector<Tensor> values;  // per layer, raw
    std::vector<int> frame_ids;
    std::vector<int> indices;    // positional index per frame
};

class RollingKvCache {
  public:
    explicit RollingKvCache(const CacheConfig& cfg);

    const CacheConfig& config() const { return cfg_; }

    // Appends one generated chunk. Frames at or below C join the sink (when
    // enabled); the rest enter the window, evicting oldest entries to respect
    // capacity. Frame ids must strictly increase past the current maximum.
    void append_chunk(std::vector<CacheEntry> entries);

    // Evicts oldest window frames so that `incoming` more frames fit without
    // exceeding window capacity. Called at chunk-forward start so positional
    // indices of the live context stay within [0, D].
    void evict_for(int incoming);

    // Positional index per cached frame when the current frame is t:
    // current frame -> min(t, D); window frame t' -> min(t, D) - (t - t');
    // sink frames stay anchored at their original indices.
    // With rapr disabled every frame keeps its raw id (vanilla RoPE).
    std::map<int, int> rapr_indices(int current_frame_t) const;
    int current_index(int current_frame_t) const;

    // Ephemeral position-encoded view of the cache; stored keys stay raw.
    EncodedView encoded_view(int current_frame_t, const RopeParams& rope,
                             int tokens_per_frame, int heads) const;

    bool contains(int frame_id) const;
    int size() const { return static_cast<int>(entries_.size()); }
    int window_size() const;
    int max_frame_id() const;
    std::vector<int> frames() const;
    const std::vector<CacheEntry>& entries() const { return entries_; }

    // JSON listing of (frame_id, region, rapr index at t) for test goldens.
    std::string debug_dump(int current_frame_t) const;

  private:
    CacheConfig cfg_;
    std::vector<CacheEntry> entries_;  // ordered by frame_id
};

}  // namespace sdit
