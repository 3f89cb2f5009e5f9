#include "sdit/model.hpp"

#include <cmath>
#include <map>
#include <sstream>

namespace sdit {

void ModelConfig::validate() const {
    if (model_dim != heads * head_dim) {
        throw ValidationError("ModelConfig: model_dim must equal heads*head_dim");
    }
    if (window_frames % chunk_size != 0) {
        throw ValidationError("ModelConfig: window_frames must be a multiple of chunk_size");
    }
    if (head_dim % 2 != 0) throw ValidationError("ModelConfig: head_dim must be even");
    if (time_embed_dim % 2 != 0) throw ValidationError("ModelConfig: time_embed_dim must be even");
    if (layers <= 0 || tokens_per_frame <= 0 || latent_dim <= 0 || audio_dim <= 0 ||
        prompt_tokens <= 0) {
        throw ValidationError("ModelConfig: dimensions must be positive");
    }
}

double ModelConfig::attn_scale() const { return 1.0 / std::sqrt(static_cast<double>(head_dim)); }

std::string ModelConfig::canonical() const {
    std::ostringstream os;
    os << "layers=" << layers << ";model_dim=" << model_dim << ";heads=" << heads
       << ";head_dim=" << head_dim << ";tokens_per_frame=" << tokens_per_frame
       << ";latent_dim=" << latent_dim << ";window_frames=" << window_frames
       << ";chunk_size=" << chunk_size << ";audio_dim=" << audio_dim
       << ";prompt_tokens=" << prompt_tokens << ";time_embed_dim=" << time_embed_dim
       << ";rope_theta=" << rope_theta << ";prediction=" << prediction_to_string(prediction);
    return os.str();
}

ModelConfig::Prediction prediction_from_string(const std::string& s) {
    if (s == "velocity") return ModelConfig::Prediction::Velocity;
    if (s == "epsilon") return ModelConfig::Prediction::Epsilon;
    throw ValidationError("unknown prediction target: " + s);
}

std::string prediction_to_string(ModelConfig::Prediction p) {
    return p == ModelConfig::Prediction::Velocity ? "velocity" : "epsilon";
}

AudioFeatures route_audio(const AudioTrack& track) {
    RoutedAudio routed = apply_mask(track);
    return AudioFeatures{routed.talking, routed.listening};
}

namespace {

Tensor init_linear(int rows, int cols, Rng& rng) {
    Tensor t = Tensor::randn({rows, cols}, rng, 1.0 / std::sqrt(static_cast<double>(rows)));
    t.set_requires_grad(true);
    return t;
}

Tensor init_zeros(const Shape& shape) {
    Tensor t = Tensor::zeros(shape);
    t.set_requires_grad(true);
    return t;
}

Tensor init_ones(int n) {
    Tensor t = Tensor::full({n}, 1.0);
    t.set_requires_grad(true);
    return t;
}

Tensor linear(const Tensor& x, const Tensor& w) { return matmul(x, w); }

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    return add_rowvec(matmul(x, w), b);
}

}  // namespace

AvatarDiT::AvatarDiT(const ModelConfig& cfg, uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    Rng rng(seed);
    const int d = cfg_.model_dim;
    const int ad = cfg_.audio_dim;
    const int te = cfg_.time_embed_dim;
    in_w_ = init_linear(cfg_.latent_dim, d, rng);
    in_b_ = init_zeros({d});
    out_gain_ = init_ones(d);
    out_w_ = init_linear(d, cfg_.latent_dim, rng);
    out_b_ = init_zeros({cfg_.latent_dim});
    prompt_ = init_linear(cfg_.prompt_tokens, d, rng);
    t_w1_ = init_linear(te, te, rng);
    t_b1_ = init_zeros({te});
    t_w2_ = init_linear(te, te, rng);
    t_b2_ = init_zeros({te});
    blocks_.resize(cfg_.layers);
    for (auto& b : blocks_) {
        b.wq = init_linear(d, d, rng);
        b.wk = init_linear(d, d, rng);
        b.wv = init_linear(d, d, rng);
        b.wo = init_linear(d, d, rng);
        b.tq = init_linear(d, d, rng);
        b.tk = init_linear(d, d, rng);
        b.tv = init_linear(d, d, rng);
        b.to = init_linear(d, d, rng);
        b.aq = init_linear(d, d, rng);
        b.ak = init_linear(ad, d, rng);
        b.av = init_linear(ad, d, rng);
        b.ao = init_zeros({d, d});  // audio branches start as identity
        b.iq = init_linear(d, d, rng);
        b.ik = init_linear(ad, d, rng);
        b.iv = init_linear(ad, d, rng);
        b.io = init_zeros({d, d});
        b.n1 = init_ones(d);
        b.n2 = init_ones(d);
        b.n3 = init_ones(d);
        b.n4 = init_ones(d);
        b.n5 = init_ones(d);
        b.w1 = init_linear(d, 4 * d, rng);
        b.b1 = init_zeros({4 * d});
        b.w2 = init_linear(4 * d, d, rng);
        b.b2 = init_zeros({d});
        b.mod_w = init_zeros({te, 15 * d});  // zero gates: blocks start as identity
        b.mod_b = init_zeros({15 * d});
    }
}

std::vector<std::pair<std::string, Tensor>> AvatarDiT::parameters() const {
    std::vector<std::pair<std::string, Tensor>> out;
    out.emplace_back("in.w", in_w_);
    out.emplace_back("in.b", in_b_);
    out.emplace_back("out.gain", out_gain_);
    out.emplace_back("out.w", out_w_);
    out.emplace_back("out.b", out_b_);
    out.emplace_back("prompt", prompt_);
    out.emplace_back("time.w1", t_w1_);
    out.emplace_back("time.b1", t_b1_);
    out.emplace_back("time.w2", t_w2_);
    out.emplace_back("time.b2", t_b2_);
    for (size_t i = 0; i < blocks_.size(); ++i) {
        const auto& b = blocks_[i];
        const std::string p = "block" + std::to_string(i) + ".";
        out.emplace_back(p + "self.wq", b.wq);
        out.emplace_back(p + "self.wk", b.wk);
        out.emplace_back(p + "self.wv", b.wv);
        out.emplace_back(p + "self.wo", b.wo);
        out.emplace_back(p + "text.wq", b.tq);
        out.emplace_back(p + "text.wk", b.tk);
        out.emplace_back(p + "text.wv", b.tv);
        out.emplace_back(p + "text.wo", b.to);
        out.emplace_back(p + "audio.wq", b.aq);
        out.emplace_back(p + "audio.wk", b.ak);
        out.emplace_back(p + "audio.wv", b.av);
        out.emplace_back(p + "audio.wo", b.ao);
        out.emplace_back(p + "interact.wq", b.iq);
        out.emplace_back(p + "interact.wk", b.ik);
        out.emplace_back(p + "interact.wv", b.iv);
        out.emplace_back(p + "interact.wo", b.io);
        out.emplace_back(p + "norm1", b.n1);
        out.emplace_back(p + "norm2", b.n2);
        out.emplace_back(p + "norm3", b.n3);
        out.emplace_back(p + "norm4", b.n4);
        out.emplace_back(p + "norm5", b.n5);
        out.emplace_back(p + "ffn.w1", b.w1);
        out.emplace_back(p + "ffn.b1", b.b1);
        out.emplace_back(p + "ffn.w2", b.w2);
        out.emplace_back(p + "ffn.b2", b.b2);
        out.emplace_back(p + "mod.w", b.mod_w);
        out.emplace_back(p + "mod.b", b.mod_b);
    }
    return out;
}

Tensor AvatarDiT::param(const std::string& name) const {
    for (const auto& [n, t] : parameters()) {
        if (n == name) return t;
    }
    throw ValidationError("unknown parameter: " + name);
}

void AvatarDiT::load_parameters(const std::vector<std::pair<std::string, Tensor>>& named) {
    std::map<std::string, Tensor> lookup(named.begin(), named.end());
    for (auto& [name, t] : parameters()) {
        auto it = lookup.find(name);
        if (it == lookup.end()) throw ValidationError("checkpoint missing parameter: " + name);
        if (it->second.shape() != t.shape()) {
            throw ValidationError("checkpoint shape mismatch for parameter: " + name);
        }
        Tensor dst = t;  // shared impl; writes through
        dst.mutable_data() = it->second.data();
    }
}

void AvatarDiT::copy_weights_from(const AvatarDiT& other) {
    if (other.cfg_.canonical() != cfg_.canonical()) {
        throw ValidationError("copy_weights_from: incompatible model configs");
    }
    load_parameters(other.parameters());
}

void AvatarDiT::zero_grads() {
    for (auto& [name, t] : parameters()) {
        Tensor p = t;
        p.zero_grad();
    }
}

Tensor AvatarDiT::time_embedding(const std::vector<double>& sigmas) const {
    const int f = static_cast<int>(sigmas.size());
    const int te = cfg_.time_embed_dim;
    const int half = te / 2;
    std::vector<double> emb(static_cast<size_t>(f) * te);
    for (int i = 0; i < f; ++i) {
        for (int j = 0; j < half; ++j) {
            const double freq = std::exp(-std::log(10000.0) * j / half);
            const double arg = sigmas[i] * 1000.0 * freq;
            emb[static_cast<size_t>(i) * te + 2 * j] = std::sin(arg);
            emb[static_cast<size_t>(i) * te + 2 * j + 1] = std::cos(arg);
        }
    }
    Tensor s = Tensor::from({f, te}, std::move(emb));
    Tensor h = silu(linear(s, t_w1_, t_b1_));
    return linear(h, t_w2_, t_b2_);
}

Tensor AvatarDiT::block_modulation(const Tensor& time_emb, int block) const {
    const auto& b = blocks_[block];
    return linear(silu(time_emb), b.mod_w, b.mod_b);  // [F, 15*dim]
}

Tensor AvatarDiT::embed(const Tensor& latents) const { return linear(latents, in_w_, in_b_); }

Tensor AvatarDiT::head(const Tensor& x) const {
    return linear(rmsnorm(x, out_gain_), out_w_, out_b_);
}

namespace {

// Applies shift/scale then the sub-layer, gated residual.
template <typename Fn>
Tensor modulated_residual(const Tensor& x, const Tensor& gain, const Tensor& mod_tokens,
                          int sublayer, int dim, Fn&& fn) {
    Tensor shift = slice_cols(mod_tokens, (3 * sublayer) * dim, dim);
    Tensor scale_v = slice_cols(mod_tokens, (3 * sublayer + 1) * dim, dim);
    Tensor gate = slice_cols(mod_tokens, (3 * sublayer + 2) * dim, dim);
    Tensor h = rmsnorm(x, gain);
    h = add(mul(h, add_scalar(scale_v, 1.0)), shift);
    return add(x, mul(gate, fn(h)));
}

}  // namespace

Tensor AvatarDiT::forward_window(const Tensor& latents, const AudioFeatures& audio,
                                 const ForwardOptions& opt) const {
    const int tpf = cfg_.tokens_per_frame;
    const int d = cfg_.model_dim;
    if (latents.cols() != cfg_.latent_dim || latents.rows() % tpf != 0) {
        throw ShapeError("forward_window: latents must be [F*tpf, latent_dim]");
    }
    const int f = latents.rows() / tpf;
    if (opt.self_mask.query_frames != f || opt.self_mask.key_frames != f) {
        throw ShapeError("forward_window: self mask must be [F, F]");
    }
    if (static_cast<int>(opt.positions.size()) != f ||
        static_cast<int>(opt.sigmas.size()) != f) {
        throw ShapeError("forward_window: one position and sigma per frame required");
    }
    if (audio.talking.rows() != opt.audio_mask.key_frames || opt.audio_mask.query_frames != f) {
        throw ShapeError("forward_window: audio mask must cover [F, audio frames]");
    }
    if (opt.instr) {
        for (int p : opt.positions) opt.instr->observe_index(p);
    }
    const RopeParams rope = cfg_.rope();
    const double sc = cfg_.attn_scale();
    Tensor x = embed(latents);
    Tensor temb = time_embedding(opt.sigmas);
    for (int l = 0; l < cfg_.layers; ++l) {
        const Block& b = blocks_[l];
        Tensor mod = repeat_rows(block_modulation(temb, l), tpf);
        x = modulated_residual(x, b.n1, mod, 0, d, [&](const Tensor& h) {
            Tensor q = rope_frames(linear(h, b.wq), opt.positions, tpf, cfg_.heads, rope);
            Tensor k = rope_frames(linear(h, b.wk), opt.positions, tpf, cfg_.heads, rope);
            Tensor v = linear(h, b.wv);
            return linear(attention_frames(q, k, v, cfg_.heads, sc, opt.self_mask, tpf, tpf), b.wo);
        });
        x = modulated_residual(x, b.n2, mod, 1, d, [&](const Tensor& h) {
            Tensor q = linear(h, b.tq);
            Tensor k = linear(prompt_, b.tk);
            Tensor v = linear(prompt_, b.tv);
            Tensor bias = Tensor::zeros({h.rows(), cfg_.prompt_tokens});
            return linear(attention(q, k, v, cfg_.heads, sc, bias), b.to);
        });
        x = modulated_residual(x, b.n3, mod, 2, d, [&](const Tensor& h) {
            Tensor q = linear(h, b.aq);
            Tensor k = linear(audio.talking, b.ak);
            Tensor v = linear(audio.talking, b.av);
            return linear(attention_frames(q, k, v, cfg_.heads, sc, opt.audio_mask, tpf, 1), b.ao);
        });
        x = modulated_residual(x, b.n4, mod, 3, d, [&](const Tensor& h) {
            Tensor q = linear(h, b.iq);
            Tensor k = linear(audio.listening, b.ik);
            Tensor v = linear(audio.listening, b.iv);
            return linear(attention_frames(q, k, v, cfg_.heads, sc, opt.audio_mask, tpf, 1), b.io);
        });
        x = modulated_residual(x, b.n5, mod, 4, d, [&](const Tensor& h) {
            return linear(gelu(linear(h, b.w1, b.b1)), b.w2, b.b2);
        });
        if (opt.activations) opt.activations->push_back(x);
    }
    return head(x);
}

FrameMask AvatarDiT::student_audio_mask(int frames) {
    FrameMask m = FrameMask::none(frames, frames);
    for (int q = 0; q < frames; ++q) {
        for (int a = 0; a <= q; ++a) m.set(q, a, true);
    }
    return m;
}

Tensor AvatarDiT::teacher_forward(const Tensor& window_latents, double sigma,
                                  const AudioFeatures& audio,
                                  std::vector<Tensor>* activations) const {
    const int f = window_latents.rows() / cfg_.tokens_per_frame;
    ForwardOptions opt;
    opt.self_mask = FrameMask::all(f, f);
    opt.audio_mask = FrameMask::all(f, f);
    opt.positions.resize(f);
    opt.sigmas.assign(f, sigma);
    opt.sigmas[0] = 0.0;  // reference frame stays clean
    for (int i = 0; i < f; ++i) opt.positions[i] = i;
    opt.activations = activations;
    return forward_window(window_latents, audio, opt);
}

Tensor AvatarDiT::student_window_forward(const Tensor& window_latents,
                                         const std::vector<double>& sigmas,
                                         const AudioFeatures& audio) const {
    const int f = window_latents.rows() / cfg_.tokens_per_frame;
    ForwardOptions opt;
    opt.self_mask = build_block_causal_mask(ChunkLayout(f - 1, cfg_.chunk_size));
    opt.audio_mask = student_audio_mask(f);
    opt.positions.resize(f);
    for (int i = 0; i < f; ++i) opt.positions[i] = i;
    opt.sigmas = sigmas;
    return forward_window(window_latents, audio, opt);
}

ChunkResult AvatarDiT::forward_chunk(const Tensor& chunk_latents, double sigma, int first_frame,
                                     const RollingKvCache& cache, const AudioFeatures& audio,
                                     Instrumentation* instr) const {
    const int tpf = cfg_.tokens_per_frame;
    const int d = cfg_.model_dim;
    if (chunk_latents.cols() != cfg_.latent_dim || chunk_latents.rows() % tpf != 0) {
        throw ShapeError("forward_chunk: latents must be [C*tpf, latent_dim]");
    }
    const int n_frames = chunk_latents.rows() / tpf;
    const int anchor = first_frame + n_frames - 1;
    if (cache.size() > 0 && first_frame <= cache.max_frame_id()) {
        throw ValidationError("forward_chunk: chunk frames must follow cached frames");
    }
    const RopeParams rope = cfg_.rope();
    const double sc = cfg_.attn_scale();
    const CacheConfig& ccfg = cache.config();

    // Positional indices for the chunk's own frames, anchored like RAPR.
    std::vector<int> chunk_pos(n_frames);
    const int cur = ccfg.rapr_enabled ? std::min(anchor, ccfg.rapr_cap) : anchor;
    for (int i = 0; i < n_frames; ++i) {
        chunk_pos[i] = cur - (anchor - (first_frame + i));
        if (chunk_pos[i] < 0) throw ValidationError("forward_chunk: negative chunk position");
    }
    EncodedView view = cache.encoded_view(anchor, rope, tpf, cfg_.heads);
    if (instr) {
        for (int p : chunk_pos) instr->observe_index(p);
        for (int p : view.indices) instr->observe_index(p);
    }
    const int n_ctx = static_cast<int>(view.frame_ids.size());

    // Audio rows for context + chunk frames, causally visible up to each
    // query frame.
    std::vector<int> audio_ids = view.frame_ids;
    for (int i = 0; i < n_frames; ++i) audio_ids.push_back(first_frame + i);
    const int n_audio = static_cast<int>(audio_ids.size());
    if (audio.talking.rows() <= audio_ids.back()) {
        throw ValidationError("forward_chunk: audio track shorter than requested frames");
    }
    std::vector<Tensor> talk_parts, listen_parts;
    for (int id : audio_ids) {
        talk_parts.push_back(slice_rows(audio.talking, id, 1));
        listen_parts.push_back(slice_rows(audio.listening, id, 1));
    }
    Tensor talk = concat_rows(talk_parts);
    Tensor listen = concat_rows(listen_parts);
    FrameMask audio_mask = FrameMask::none(n_frames, n_audio);
    for (int q = 0; q < n_frames; ++q) {
        for (int a = 0; a < n_audio; ++a) {
            audio_mask.set(q, a, audio_ids[a] <= first_frame + q);
        }
    }

    // Chunk queries see the whole retained context plus their own chunk.
    FrameMask self_mask = FrameMask::all(n_frames, n_ctx + n_frames);

    std::vector<double> sigmas(n_frames, sigma);
    Tensor x = embed(chunk_latents);
    Tensor temb = time_embedding(sigmas);
    ChunkResult result;
    result.entries.resize(n_frames);
    for (int i = 0; i < n_frames; ++i) {
        result.entries[i].frame_id = first_frame + i;
        result.entries[i].keys.resize(cfg_.layers);
        result.entries[i].values.resize(cfg_.layers);
    }
    for (int l = 0; l < cfg_.layers; ++l) {
        const Block& b = blocks_[l];
        Tensor mod = repeat_rows(block_modulation(temb, l), tpf);
        x = modulated_residual(x, b.n1, mod, 0, d, [&](const Tensor& h) {
            Tensor q = rope_frames(linear(h, b.wq), chunk_pos, tpf, cfg_.heads, rope);
            Tensor k_raw = linear(h, b.wk);
            Tensor v_raw = linear(h, b.wv);
            for (int i = 0; i < n_frames; ++i) {
                result.entries[i].keys[l] = detach(slice_rows(k_raw, i * tpf, tpf));
                result.entries[i].values[l] = detach(slice_rows(v_raw, i * tpf, tpf));
            }
            Tensor k_chunk = rope_frames(k_raw, chunk_pos, tpf, cfg_.heads, rope);
            Tensor k = n_ctx > 0 ? concat_rows({view.keys[l], k_chunk}) : k_chunk;
            Tensor v = n_ctx > 0 ? concat_rows({view.values[l], v_raw}) : v_raw;
            return linear(attention_frames(q, k, v, cfg_.heads, sc, self_mask, tpf, tpf), b.wo);
        });
        x = modulated_residual(x, b.n2, mod, 1, d, [&](const Tensor& h) {
            Tensor q = linear(h, b.tq);
            Tensor k = linear(prompt_, b.tk);
            Tensor v = linear(prompt_, b.tv);
            Tensor bias = Tensor::zeros({h.rows(), cfg_.prompt_tokens});
            return linear(attention(q, k, v, cfg_.heads, sc, bias), b.to);
        });
        x = modulated_residual(x, b.n3, mod, 2, d, [&](const Tensor& h) {
            Tensor q = linear(h, b.aq);
            return linear(attention_frames(q, linear(talk, b.ak), linear(talk, b.av), cfg_.heads,
                                           sc, audio_mask, tpf, 1),
                          b.ao);
        });
        x = modulated_residual(x, b.n4, mod, 3, d, [&](const Tensor& h) {
            Tensor q = linear(h, b.iq);
            return linear(attention_frames(q, linear(listen, b.ik), linear(listen, b.iv),
                                           cfg_.heads, sc, audio_mask, tpf, 1),
                          b.io);
        });
        x = modulated_residual(x, b.n5, mod, 4, d, [&](const Tensor& h) {
            return linear(gelu(linear(h, b.w1, b.b1)), b.w2, b.b2);
        });
    }
    result.prediction = head(x);
    return result;
}

CacheEntry AvatarDiT::encode_reference(const Tensor& reference_latent,
                                       const AudioFeatures& audio) const {
    RollingKvCache empty(CacheConfig{.sink_capacity = 1,
                                     .window_capacity = cfg_.chunk_size,
                                     .rapr_cap = 1 + cfg_.chunk_size,
                                     .chunk_size = cfg_.chunk_size});
    ChunkResult r = forward_chunk(reference_latent, 0.0, 0, empty, audio, nullptr);
    return r.entries[0];
}

}  // namespace sdit
