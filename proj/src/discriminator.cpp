#include "sdit/discriminator.hpp"

#include <cmath>
#include <map>

namespace sdit {

void DiscConfig::validate(const ModelConfig& backbone) const {
    if (num_extractors <= 0) throw ValidationError("DiscConfig: need at least one extractor");
    if (num_extractors > backbone.layers) {
        throw ValidationError("DiscConfig: more extractors than backbone layers");
    }
}

namespace {
Tensor init_linear(int rows, int cols, Rng& rng) {
    Tensor t = Tensor::randn({rows, cols}, rng, 1.0 / std::sqrt(static_cast<double>(rows)));
    t.set_requires_grad(true);
    return t;
}
}  // namespace

Discriminator::Discriminator(const AvatarDiT& teacher, const DiscConfig& cfg, uint64_t seed)
    : cfg_(cfg), backbone_(teacher.config(), seed) {
    cfg_.validate(teacher.config());
    backbone_.copy_weights_from(teacher);
    Rng rng(seed);
    const int d = teacher.config().model_dim;
    const int max_frames = teacher.config().window_frames + 1;
    extractors_.resize(cfg_.num_extractors);
    for (auto& e : extractors_) {
        e.queries = init_linear(max_frames, d, rng);
        e.wk = init_linear(d, d, rng);
        e.wv = init_linear(d, d, rng);
        e.wo = init_linear(d, d, rng);
    }
    local_w_ = init_linear(d, 1, rng);
    local_b_ = Tensor::zeros({1});
    local_b_.set_requires_grad(true);
    gq_ = init_linear(d, d, rng);
    gk_ = init_linear(d, d, rng);
    gv_ = init_linear(d, d, rng);
    global_w_ = init_linear(d, 1, rng);
    global_b_ = Tensor::zeros({1});
    global_b_.set_requires_grad(true);
}

std::vector<int> Discriminator::extractor_layers() const {
    // Evenly spaced over the backbone depth, last extractor on the last layer.
    const int layers = backbone_.config().layers;
    const int n = cfg_.num_extractors;
    std::vector<int> out(n);
    for (int i = 0; i < n; ++i) {
        out[i] = (i + 1) * layers / n - 1;
    }
    return out;
}

std::vector<std::pair<std::string, Tensor>> Discriminator::all_parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    for (const auto& [name, t] : backbone_.parameters()) out.emplace_back("backbone." + name, t);
    for (size_t i = 0; i < extractors_.size(); ++i) {
        const std::string p = "extractor" + std::to_string(i) + ".";
        out.emplace_back(p + "queries", extractors_[i].queries);
        out.emplace_back(p + "wk", extractors_[i].wk);
        out.emplace_back(p + "wv", extractors_[i].wv);
        out.emplace_back(p + "wo", extractors_[i].wo);
    }
    out.emplace_back("local.w", local_w_);
    out.emplace_back("local.b", local_b_);
    out.emplace_back("global.wq", gq_);
    out.emplace_back("global.wk", gk_);
    out.emplace_back("global.wv", gv_);
    out.emplace_back("global.w", global_w_);
    out.emplace_back("global.b", global_b_);
    return out;
}

std::vector<std::pair<std::string, Tensor>> Discriminator::parameters() const {
    auto all = all_parameters();
    if (!cfg_.freeze_backbone) return all;
    std::vector<std::pair<std::string, Tensor>> out;
    for (auto& [name, t] : all) {
        if (name.rfind("backbone.", 0) != 0) out.emplace_back(name, t);
    }
    return out;
}

void Discriminator::load_parameters(const std::vector<std::pair<std::string, Tensor>>& named) {
    std::map<std::string, Tensor> lookup(named.begin(), named.end());
    for (auto& [name, t] : all_parameters()) {
        auto it = lookup.find(name);
        if (it == lookup.end()) throw ValidationError("checkpoint missing parameter: " + name);
        if (it->second.shape() != t.shape()) {
            throw ValidationError("checkpoint shape mismatch for parameter: " + name);
        }
        Tensor dst = t;
        dst.mutable_data() = it->second.data();
    }
}

void Discriminator::zero_grads() {
    for (auto& [name, t] : all_parameters()) {
        Tensor p = t;
        p.zero_grad();
    }
}

DiscOutput Discriminator::forward(const Tensor& latents, const std::vector<int>& frame_ids,
                                  const AudioFeatures& audio) const {
    const ModelConfig& mcfg = backbone_.config();
    const int tpf = mcfg.tokens_per_frame;
    const int d = mcfg.model_dim;
    const int f = static_cast<int>(frame_ids.size());
    if (f < 2) throw ValidationError("disc_forward: need the reference plus one generated frame");
    if (latents.rows() != f * tpf) throw ShapeError("disc_forward: latents/frame_ids mismatch");

    // Backbone pass on clean latents; frames carry their ids for positions,
    // query binding, and audio rows, so attention treats them as a set.
    std::vector<Tensor> audio_talk, audio_listen;
    for (int id : frame_ids) {
        audio_talk.push_back(slice_rows(audio.talking, id, 1));
        audio_listen.push_back(slice_rows(audio.listening, id, 1));
    }
    AudioFeatures local_audio{concat_rows(audio_talk), concat_rows(audio_listen)};
    ForwardOptions opt;
    opt.self_mask = FrameMask::all(f, f);
    opt.audio_mask = FrameMask::all(f, f);
    opt.positions = frame_ids;
    opt.sigmas.assign(f, 0.0);
    std::vector<Tensor> activations;
    opt.activations = &activations;
    backbone_.forward_window(latents, local_audio, opt);

    // Per-frame features: each extractor's frame query cross-attends over that
    // frame's tokens at its attachment layer; extractor outputs are averaged.
    const double sc = mcfg.attn_scale();
    const auto layers = extractor_layers();
    std::vector<Tensor> frame_features;  // [1, d] per frame
    for (int j = 0; j < f; ++j) {
        std::vector<Tensor> per_extractor;
        for (size_t e = 0; e < extractors_.size(); ++e) {
            const auto& ex = extractors_[e];
            Tensor act = slice_rows(activations[layers[e]], j * tpf, tpf);
            Tensor q = slice_rows(ex.queries, frame_ids[j], 1);
            Tensor bias = Tensor::zeros({1, tpf});
            Tensor att = attention(q, matmul(act, ex.wk), matmul(act, ex.wv), mcfg.heads, sc, bias);
            per_extractor.push_back(matmul(att, ex.wo));
        }
        Tensor pooled = per_extractor[0];
        for (size_t e = 1; e < per_extractor.size(); ++e) pooled = add(pooled, per_extractor[e]);
        frame_features.push_back(scale(pooled, 1.0 / static_cast<double>(per_extractor.size())));
    }

    DiscOutput out;
    // Local realism branch: linear projection per generated frame.
    std::vector<Tensor> gen_features(frame_features.begin() + 1, frame_features.end());
    Tensor gen = gen_features.size() == 1 ? gen_features[0] : concat_rows(gen_features);
    out.per_frame_logits = add_rowvec(matmul(gen, local_w_), local_b_);
    // Global consistency branch: reference feature attends over the rest.
    Tensor q = matmul(frame_features[0], gq_);
    Tensor bias = Tensor::zeros({1, static_cast<int>(gen_features.size())});
    Tensor att = attention(q, matmul(gen, gk_), matmul(gen, gv_), mcfg.heads, sc, bias);
    out.global_logit = add_rowvec(matmul(att, global_w_), global_b_);
    return out;
}

DiscOutput Discriminator::forward_window(const Tensor& latents, const AudioFeatures& audio) const {
    const int f = latents.rows() / backbone_.config().tokens_per_frame;
    std::vector<int> ids(f);
    for (int i = 0; i < f; ++i) ids[i] = i;
    return forward(latents, ids, audio);
}

Tensor Discriminator::critic(const Tensor& latents, const std::vector<int>& frame_ids,
                             const AudioFeatures& audio) const {
    DiscOutput out = forward(latents, frame_ids, audio);
    return add(mean(out.per_frame_logits), mean(out.global_logit));
}

}  // namespace sdit
