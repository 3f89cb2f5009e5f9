#include "sdit/kv_cache.hpp"

#include <algorithm>

#include "json.hpp"

namespace sdit {

void CacheConfig::validate() const {
    if (sink_capacity < 0 || window_capacity <= 0) {
        throw ValidationError("CacheConfig: capacities must be positive");
    }
    if (chunk_size <= 0) throw ValidationError("CacheConfig: chunk_size must be positive");
    if (rapr_enabled && rapr_cap < sink_capacity + window_capacity) {
        throw ValidationError(
            "CacheConfig: rapr_cap must be at least sink_capacity + window_capacity "
            "(collision-freedom precondition)");
    }
    if (window_capacity < chunk_size) {
        throw ValidationError("CacheConfig: window must hold at least one chunk");
    }
}

RollingKvCache::RollingKvCache(const CacheConfig& cfg) : cfg_(cfg) { cfg_.validate(); }

int RollingKvCache::window_size() const {
    int n = 0;
    for (const auto& e : entries_) {
        if (e.region == CacheRegion::Window) ++n;
    }
    return n;
}

int RollingKvCache::max_frame_id() const {
    int m = -1;
    for (const auto& e : entries_) m = std::max(m, e.frame_id);
    return m;
}

bool RollingKvCache::contains(int frame_id) const {
    for (const auto& e : entries_) {
        if (e.frame_id == frame_id) return true;
    }
    return false;
}

std::vector<int> RollingKvCache::frames() const {
    std::vector<int> ids;
    ids.reserve(entries_.size());
    for (const auto& e : entries_) ids.push_back(e.frame_id);
    return ids;
}

void RollingKvCache::append_chunk(std::vector<CacheEntry> incoming) {
    int prev_max = max_frame_id();
    for (auto& e : incoming) {
        if (e.frame_id <= prev_max) {
            throw ValidationError("append_chunk: frame ids must strictly increase");
        }
        prev_max = e.frame_id;
        const bool to_sink = cfg_.sink_enabled && e.frame_id <= cfg_.chunk_size &&
                             e.frame_id < cfg_.sink_capacity;
        e.region = to_sink ? CacheRegion::Sink : CacheRegion::Window;
        entries_.push_back(std::move(e));
    }
    // Oldest-first eviction among window entries only; the sink is permanent.
    int window = window_size();
    while (window > cfg_.window_capacity) {
        auto it = std::find_if(entries_.begin(), entries_.end(), [](const CacheEntry& e) {
            return e.region == CacheRegion::Window;
        });
        entries_.erase(it);
        --window;
    }
}

void RollingKvCache::evict_for(int incoming) {
    if (incoming < 0 || incoming > cfg_.window_capacity) {
        throw ValidationError("evict_for: incoming frames exceed window capacity");
    }
    int window = window_size();
    while (window + incoming > cfg_.window_capacity) {
        auto it = std::find_if(entries_.begin(), entries_.end(), [](const CacheEntry& e) {
            return e.region == CacheRegion::Window;
        });
        entries_.erase(it);
        --window;
    }
}

int RollingKvCache::current_index(int current_frame_t) const {
    return cfg_.rapr_enabled ? std::min(current_frame_t, cfg_.rapr_cap) : current_frame_t;
}

std::map<int, int> RollingKvCache::rapr_indices(int current_frame_t) const {
    if (current_frame_t < max_frame_id()) {
        throw ValidationError("rapr_indices: current frame precedes cached frames");
    }
    std::map<int, int> indices;
    if (!cfg_.rapr_enabled) {
        for (const auto& e : entries_) indices[e.frame_id] = e.frame_id;
        return indices;
    }
    const int cur = current_index(current_frame_t);
    int max_sink_index = -1;
    for (const auto& e : entries_) {
        if (e.region == CacheRegion::Sink) {
            indices[e.frame_id] = e.frame_id;  // anchored at the reference end
            max_sink_index = std::max(max_sink_index, e.frame_id);
        }
    }
    for (const auto& e : entries_) {
        if (e.region != CacheRegion::Window) continue;
        const int idx = cur - (current_frame_t - e.frame_id);
        if (idx < 0 || idx > cfg_.rapr_cap) {
            throw ValidationError("rapr_indices: index out of [0, D]; window too deep for D");
        }
        if (idx <= max_sink_index) {
            throw ValidationError("rapr_indices: window index collides with sink (misconfigured D)");
        }
        indices[e.frame_id] = idx;
    }
    return indices;
}

EncodedView RollingKvCache::encoded_view(int current_frame_t, const RopeParams& rope,
                                         int tokens_per_frame, int heads) const {
    EncodedView view;
    if (entries_.empty()) return view;
    const auto indices = rapr_indices(current_frame_t);
    view.frame_ids.reserve(entries_.size());
    for (const auto& e : entries_) {
        view.frame_ids.push_back(e.frame_id);
        view.indices.push_back(indices.at(e.frame_id));
    }
    const size_t layers = entries_.front().keys.size();
    for (size_t layer = 0; layer < layers; ++layer) {
        std::vector<Tensor> ks, vs;
        ks.reserve(entries_.size());
        vs.reserve(entries_.size());
        for (const auto& e : entries_) {
            ks.push_back(e.keys[layer]);
            vs.push_back(e.values[layer]);
        }
        Tensor k = entries_.size() == 1 ? ks[0] : concat_rows(ks);
        Tensor v = entries_.size() == 1 ? vs[0] : concat_rows(vs);
        view.keys.push_back(rope_frames(k, view.indices, tokens_per_frame, heads, rope));
        view.values.push_back(v);
    }
    return view;
}

std::string RollingKvCache::debug_dump(int current_frame_t) const {
    nlohmann::json out = nlohmann::json::array();
    const auto indices = rapr_indices(current_frame_t);
    for (const auto& e : entries_) {
        out.push_back({{"frame_id", e.frame_id},
                       {"region", e.region == CacheRegion::Sink ? "sink" : "window"},
                       {"index", indices.at(e.frame_id)}});
    }
    return out.dump(2);
}

}  // namespace sdit
