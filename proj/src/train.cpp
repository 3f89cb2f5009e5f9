#include "sdit/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>

#include "sdit/checkpoint.hpp"

namespace sdit {

Adam::Adam(std::vector<std::pair<std::string, Tensor>> params, double lr, double beta1,
           double beta2, double eps)
    : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
    params_.reserve(params.size());
    for (auto& [name, t] : params) {
        params_.push_back(t);
        m_.emplace_back(t.numel(), 0.0);
        v_.emplace_back(t.numel(), 0.0);
    }
}

void Adam::step() {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < params_.size(); ++i) {
        Tensor& p = params_[i];
        if (!p.has_grad()) continue;
        const auto& g = p.grad();
        auto& data = p.mutable_data();
        for (size_t j = 0; j < data.size(); ++j) {
            m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g[j];
            v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g[j] * g[j];
            data[j] -= lr_ * (m_[i][j] / bc1) / (std::sqrt(v_[i][j] / bc2) + eps_);
        }
    }
}

void Adam::zero_grads() {
    for (Tensor& p : params_) p.zero_grad();
}

void TrainLog::record(int64_t step, const std::string& phase, const std::string& name,
                      double value) {
    if (sink_) (*sink_) << step << ", " << phase << ", " << name << ", " << value << "\n";
    history_[name].push_back(value);
}

const std::vector<double>& TrainLog::values(const std::string& name) const {
    static const std::vector<double> empty;
    auto it = history_.find(name);
    return it == history_.end() ? empty : it->second;
}

namespace {

// Fixed task parameters shared by every instance so trained checkpoints and
// generated pairs describe the same data distribution.
constexpr uint64_t kTaskSeed = 0x5eedf00d;

struct TaskBasis {
    std::vector<double> drift;  // [tpf*latent_dim]
    std::vector<double> proj;   // [audio_dim, tpf*latent_dim]
};

TaskBasis task_basis(const ModelConfig& cfg) {
    Rng rng(kTaskSeed);
    TaskBasis b;
    const int n = cfg.tokens_per_frame * cfg.latent_dim;
    b.drift.resize(n);
    for (double& x : b.drift) x = rng.normal();
    b.proj.resize(static_cast<size_t>(cfg.audio_dim) * n);
    for (double& x : b.proj) x = rng.normal(0.0, 1.0 / std::sqrt(static_cast<double>(cfg.audio_dim)));
    return b;
}

}  // namespace

AudioTrack SyntheticTask::make_track(Rng& rng, int frames) const {
    return synth_features(rng.next(), frames, cfg.audio_dim, 4);
}

Tensor SyntheticTask::clean_frames(const Tensor& reference, const AudioTrack& track,
                                   int first_frame, int count) const {
    if (track.frames() < first_frame + count) {
        throw ValidationError("SyntheticTask: audio track shorter than requested frames");
    }
    const TaskBasis basis = task_basis(cfg);
    const int n = cfg.tokens_per_frame * cfg.latent_dim;
    std::vector<double> out(static_cast<size_t>(count) * n);
    const auto& ref = reference.data();
    const auto& feat = track.features.data();
    for (int i = 0; i < count; ++i) {
        const int t = first_frame + i;
        const double sway = 0.3 * std::sin(0.25 * static_cast<double>(t));
        for (int j = 0; j < n; ++j) {
            double audio_term = 0.0;
            for (int a = 0; a < cfg.audio_dim; ++a) {
                audio_term += feat[static_cast<size_t>(t) * cfg.audio_dim + a] *
                              basis.proj[static_cast<size_t>(a) * n + j];
            }
            out[static_cast<size_t>(i) * n + j] = ref[j] + sway * basis.drift[j] + 0.3 * audio_term;
        }
    }
    return Tensor::from({count * cfg.tokens_per_frame, cfg.latent_dim}, std::move(out));
}

SyntheticTask::Sample SyntheticTask::make_sample(Rng& rng) const {
    Sample s;
    s.reference = Tensor::randn({cfg.tokens_per_frame, cfg.latent_dim}, rng, 0.5);
    s.track = make_track(rng, cfg.window_frames + 1);
    Tensor gen = clean_frames(s.reference, s.track, 1, cfg.window_frames);
    if (noise_std > 0.0) {
        gen = add(gen, Tensor::randn(gen.shape(), rng, noise_std));
    }
    s.window = concat_rows({s.reference, gen});
    s.audio = route_audio(s.track);
    return s;
}

double train_teacher(AvatarDiT& teacher, const SyntheticTask& task, int steps, double lr,
                     Rng& rng, TrainLog* log) {
    const ModelConfig& cfg = teacher.config();
    Adam opt(teacher.parameters(), lr);
    const int tpf = cfg.tokens_per_frame;
    double ema = 0.0;
    for (int step = 0; step < steps; ++step) {
        SyntheticTask::Sample s = task.make_sample(rng);
        const double sigma = rng.uniform(0.02, 1.0);
        Tensor gen = slice_rows(s.window, tpf, cfg.window_frames * tpf);
        Tensor eps = Tensor::randn(gen.shape(), rng);
        Tensor noisy = add(scale(gen, 1.0 - sigma), scale(eps, sigma));
        Tensor window = concat_rows({s.reference, noisy});
        Tensor pred = teacher.teacher_forward(window, sigma, s.audio);
        Tensor pred_gen = slice_rows(pred, tpf, cfg.window_frames * tpf);
        Tensor target = cfg.prediction == ModelConfig::Prediction::Velocity ? sub(eps, gen) : eps;
        Tensor loss = mse(pred_gen, target);
        check_finite(loss, "train_teacher loss");
        opt.zero_grads();
        backward(loss);
        opt.step();
        const double v = loss.item();
        ema = step == 0 ? v : 0.95 * ema + 0.05 * v;
        if (log) log->record(step, "teacher", "denoise_mse", v);
    }
    return ema;
}

std::vector<double> teacher_sigma_grid(const NoiseSchedule& student, int total_steps) {
    student.validate();
    const int n = student.steps();
    if (total_steps < n) throw ValidationError("teacher_sigma_grid: fewer steps than the schedule");
    const int per = (total_steps + n - 1) / n;
    std::vector<double> grid;
    for (int i = 0; i < n; ++i) {
        const double hi = student.sigmas[i];
        const double lo = i + 1 < n ? student.sigmas[i + 1] : 0.0;
        for (int j = 0; j < per; ++j) {
            grid.push_back(hi - (hi - lo) * static_cast<double>(j) / per);
        }
    }
    return grid;
}

Tensor teacher_sample(const AvatarDiT& teacher, const Tensor& reference,
                      const AudioFeatures& audio, const std::vector<double>& grid, Rng& rng,
                      std::vector<std::pair<double, Tensor>>* trajectory) {
    if (grid.empty() || std::abs(grid.front() - 1.0) > 1e-12) {
        throw ValidationError("teacher_sample: grid must start at sigma = 1");
    }
    NoGradGuard ng;
    const ModelConfig& cfg = teacher.config();
    const int tpf = cfg.tokens_per_frame;
    Tensor x = Tensor::randn({cfg.window_frames * tpf, cfg.latent_dim}, rng);
    for (size_t m = 0; m < grid.size(); ++m) {
        const double sigma = grid[m];
        if (trajectory) trajectory->emplace_back(sigma, x.clone());
        Tensor window = concat_rows({reference, x});
        Tensor pred = teacher.teacher_forward(window, sigma, audio);
        Tensor pred_gen = slice_rows(pred, tpf, cfg.window_frames * tpf);
        Tensor v = predicted_velocity(cfg, x, pred_gen, sigma);
        const double sigma_next = m + 1 < grid.size() ? grid[m + 1] : 0.0;
        x = add(x, scale(v, sigma_next - sigma));
    }
    return x;
}

std::vector<OdePair> generate_ode_pairs(const AvatarDiT& teacher, const SyntheticTask& task,
                                        const NoiseSchedule& student_schedule,
                                        int teacher_steps, int count, Rng& rng) {
    const ModelConfig& cfg = teacher.config();
    const int tpf = cfg.tokens_per_frame;
    const int c = cfg.chunk_size;
    const int chunks = cfg.window_frames / c;
    const std::vector<double> grid = teacher_sigma_grid(student_schedule, teacher_steps);
    std::vector<OdePair> pairs;
    for (int i = 0; i < count; ++i) {
        Tensor reference = Tensor::randn({tpf, cfg.latent_dim}, rng, 0.5);
        AudioTrack track = task.make_track(rng, cfg.window_frames + 1);
        AudioFeatures audio = route_audio(track);
        std::vector<std::pair<double, Tensor>> traj;
        Tensor clean = teacher_sample(teacher, reference, audio, grid, rng, &traj);
        for (int ch = 0; ch < chunks; ++ch) {
            Tensor target = slice_rows(clean, ch * c * tpf, c * tpf).clone();
            for (double sigma : student_schedule.sigmas) {
                auto it = std::find_if(traj.begin(), traj.end(), [&](const auto& p) {
                    return std::abs(p.first - sigma) < 1e-12;
                });
                if (it == traj.end()) {
                    throw ValidationError("generate_ode_pairs: schedule sigma missing from grid");
                }
                OdePair pair;
                pair.first_frame = ch * c + 1;
                pair.sigma = sigma;
                pair.noisy_chunk = slice_rows(it->second, ch * c * tpf, c * tpf).clone();
                pair.target_chunk = target;
                pair.reference = reference;
                pair.track = track;
                pairs.push_back(std::move(pair));
            }
        }
    }
    return pairs;
}

namespace {

constexpr char kPairMagic[5] = {'O', 'D', 'E', 'P', '1'};

void write_u32(std::ostream& os, uint32_t v) { os.write(reinterpret_cast<const char*>(&v), 4); }
void write_f64(std::ostream& os, double v) { os.write(reinterpret_cast<const char*>(&v), 8); }

void write_matrix(std::ostream& os, const Tensor& t) {
    write_u32(os, static_cast<uint32_t>(t.rows()));
    write_u32(os, static_cast<uint32_t>(t.cols()));
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.numel() * 8));
}

uint32_t read_u32(std::istream& is) {
    uint32_t v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 4)) throw IoError("pair file truncated");
    return v;
}

double read_f64(std::istream& is) {
    double v = 0;
    if (!is.read(reinterpret_cast<char*>(&v), 8)) throw IoError("pair file truncated");
    return v;
}

Tensor read_matrix(std::istream& is) {
    const int rows = static_cast<int>(read_u32(is));
    const int cols = static_cast<int>(read_u32(is));
    std::vector<double> data(static_cast<size_t>(rows) * cols);
    if (!is.read(reinterpret_cast<char*>(data.data()),
                 static_cast<std::streamsize>(data.size() * 8))) {
        throw IoError("pair file truncated");
    }
    return Tensor::from({rows, cols}, std::move(data));
}

}  // namespace

void save_ode_pairs(const std::vector<OdePair>& pairs, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open for writing: " + path);
    os.write(kPairMagic, 5);
    write_u32(os, static_cast<uint32_t>(pairs.size()));
    for (const OdePair& p : pairs) {
        write_u32(os, static_cast<uint32_t>(p.first_frame));
        write_f64(os, p.sigma);
        write_matrix(os, p.noisy_chunk);
        write_matrix(os, p.target_chunk);
        write_matrix(os, p.reference);
        write_matrix(os, p.track.features);
        os.write(reinterpret_cast<const char*>(p.track.mask.values.data()),
                 static_cast<std::streamsize>(p.track.mask.values.size()));
    }
    if (!os) throw IoError("write failed: " + path);
}

std::vector<OdePair> load_ode_pairs(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open: " + path);
    char magic[5];
    if (!is.read(magic, 5) || std::memcmp(magic, kPairMagic, 5) != 0) {
        throw IoError("bad pair file magic: " + path);
    }
    const uint32_t n = read_u32(is);
    std::vector<OdePair> pairs(n);
    for (OdePair& p : pairs) {
        p.first_frame = static_cast<int>(read_u32(is));
        p.sigma = read_f64(is);
        p.noisy_chunk = read_matrix(is);
        p.target_chunk = read_matrix(is);
        p.reference = read_matrix(is);
        p.track.features = read_matrix(is);
        p.track.mask.values.resize(static_cast<size_t>(p.track.features.rows()));
        if (!is.read(reinterpret_cast<char*>(p.track.mask.values.data()),
                     static_cast<std::streamsize>(p.track.mask.values.size()))) {
            throw IoError("pair file truncated");
        }
        p.track.validate();
    }
    return pairs;
}

namespace {

// Minimal cache holding just the encoded reference; ode-init replays the
// streaming chunk path without a rollout history.
RollingKvCache reference_only_cache(const AvatarDiT& model, const OdePair& pair,
                                    const AudioFeatures& audio) {
    const int c = model.config().chunk_size;
    CacheConfig cc;
    cc.sink_capacity = 1;
    cc.window_capacity = c;
    cc.rapr_cap = 1 + c;
    cc.chunk_size = c;
    RollingKvCache cache(cc);
    cache.append_chunk({model.encode_reference(pair.reference, audio)});
    return cache;
}

Tensor pair_prediction(const AvatarDiT& student, const OdePair& pair) {
    AudioFeatures audio = route_audio(pair.track);
    RollingKvCache cache = reference_only_cache(student, pair, audio);
    ChunkResult fw = student.forward_chunk(pair.noisy_chunk, pair.sigma, pair.first_frame,
                                           cache, audio);
    return predicted_clean(student.config(), pair.noisy_chunk, fw.prediction, pair.sigma);
}

}  // namespace

double ode_regression_loss(const AvatarDiT& student, const std::vector<OdePair>& pairs) {
    if (pairs.empty()) throw ValidationError("ode_regression_loss: empty dataset");
    NoGradGuard ng;
    double total = 0.0;
    for (const OdePair& p : pairs) {
        total += mse(pair_prediction(student, p), p.target_chunk).item();
    }
    return total / static_cast<double>(pairs.size());
}

double ode_init(AvatarDiT& student, const std::vector<OdePair>& pairs, int steps, double lr,
                Rng& rng, TrainLog* log) {
    if (pairs.empty()) throw ValidationError("ode_init: empty dataset");
    Adam opt(student.parameters(), lr);
    double ema = 0.0;
    for (int step = 0; step < steps; ++step) {
        const OdePair& p = pairs[static_cast<size_t>(rng.integer(0, static_cast<int64_t>(pairs.size()) - 1))];
        Tensor loss = mse(pair_prediction(student, p), p.target_chunk);
        check_finite(loss, "ode_init loss");
        opt.zero_grads();
        backward(loss);
        opt.step();
        const double v = loss.item();
        ema = step == 0 ? v : 0.95 * ema + 0.05 * v;
        if (log) log->record(step, "ode_init", "regression_mse", v);
    }
    return ema;
}

namespace {

struct SidForward {
    Tensor x_gen;        // [T*tpf, latent], graph-connected to the student
    Tensor reference;    // [tpf, latent]
    AudioFeatures audio;
    Tensor x_noisy;      // corrupted rollout output, graph-connected
    Tensor g;            // detached discrepancy field, same shape
    double sigma = 1.0;
};

SidForward sid_forward(const AvatarDiT& student, const AvatarDiT& teacher,
                       const AvatarDiT& aux_score, const SyntheticTask& task,
                       const SidConfig& cfg, Rng& rng) {
    const ModelConfig& mcfg = student.config();
    const int tpf = mcfg.tokens_per_frame;
    const int frames = cfg.rollout_chunks * mcfg.chunk_size;
    if (frames != mcfg.window_frames) {
        throw ValidationError("sid_forward: rollout horizon must equal the training window");
    }
    SidForward sf;
    sf.reference = Tensor::randn({tpf, mcfg.latent_dim}, rng, 0.5);
    AudioTrack track = task.make_track(rng, frames + 1);
    sf.audio = route_audio(track);

    RolloutOptions opt;
    opt.schedule = cfg.schedule;
    opt.cache = cfg.cache;
    opt.seed = rng.next();
    std::vector<Tensor> chunks = rollout(student, sf.reference, sf.audio, cfg.rollout_chunks, opt);
    sf.x_gen = concat_rows(chunks);

    sf.sigma = cfg.schedule.sigmas[static_cast<size_t>(
        rng.integer(0, static_cast<int64_t>(cfg.schedule.sigmas.size()) - 1))];
    Tensor eps = Tensor::randn(sf.x_gen.shape(), rng);
    sf.x_noisy = add(scale(sf.x_gen, 1.0 - sf.sigma), scale(eps, sf.sigma));

    // Both score models are evaluated on the detached sample; only the
    // discrepancy direction matters for the student update.
    {
        NoGradGuard ng;
        Tensor xd = detach(sf.x_noisy);
        Tensor window = concat_rows({sf.reference, xd});
        Tensor pred_t = slice_rows(teacher.teacher_forward(window, sf.sigma, sf.audio), tpf,
                                   frames * tpf);
        Tensor pred_a = slice_rows(aux_score.teacher_forward(window, sf.sigma, sf.audio), tpf,
                                   frames * tpf);
        Tensor x0_t = predicted_clean(mcfg, xd, pred_t, sf.sigma);
        Tensor x0_a = predicted_clean(mcfg, xd, pred_a, sf.sigma);
        sf.g = scale(sub(x0_a, x0_t), cfg.weight);
    }
    return sf;
}

double rms(const Tensor& t) {
    double acc = 0.0;
    for (double v : t.data()) acc += v * v;
    return std::sqrt(acc / static_cast<double>(t.numel()));
}

}  // namespace

double sid_gradient_norm(const AvatarDiT& student, const AvatarDiT& teacher,
                         const AvatarDiT& aux_score, const SyntheticTask& task,
                         const SidConfig& cfg, Rng& rng) {
    NoGradGuard ng;
    SidForward sf = sid_forward(student, teacher, aux_score, task, cfg, rng);
    return rms(sf.g);
}

SidStats sid_step(AvatarDiT& student, const AvatarDiT& teacher, AvatarDiT& aux_score,
                  SidState& state, const SyntheticTask& task, const SidConfig& cfg, Rng& rng,
                  TrainLog* log, int64_t step) {
    SidStats stats;
    SidForward sf = sid_forward(student, teacher, aux_score, task, cfg, rng);
    stats.grad_norm = rms(sf.g);

    // Surrogate whose gradient moves each sample against the discrepancy.
    Tensor surrogate = sum(mul(detach(sf.g), sf.x_noisy));
    check_finite(surrogate, "sid surrogate");
    state.student_opt.zero_grads();
    backward(surrogate);
    state.student_opt.step();

    // Denoising regression keeps the auxiliary score tracking the student's
    // current output distribution.
    const ModelConfig& mcfg = student.config();
    const int tpf = mcfg.tokens_per_frame;
    const int frames = mcfg.window_frames;
    Tensor x_gen = detach(sf.x_gen);
    const double sigma = rng.uniform(0.02, 1.0);
    Tensor eps = Tensor::randn(x_gen.shape(), rng);
    Tensor noisy = add(scale(x_gen, 1.0 - sigma), scale(eps, sigma));
    Tensor window = concat_rows({sf.reference, noisy});
    Tensor pred = slice_rows(aux_score.teacher_forward(window, sigma, sf.audio), tpf,
                             frames * tpf);
    Tensor target =
        mcfg.prediction == ModelConfig::Prediction::Velocity ? sub(eps, x_gen) : eps;
    Tensor aux_loss = mse(pred, target);
    check_finite(aux_loss, "sid aux loss");
    state.aux_opt.zero_grads();
    backward(aux_loss);
    state.aux_opt.step();
    stats.aux_loss = aux_loss.item();

    if (log) {
        log->record(step, "distill", "sid_grad_rms", stats.grad_norm);
        log->record(step, "distill", "aux_denoise_mse", stats.aux_loss);
    }
    return stats;
}

namespace {

struct AdvTensors {
    Tensor disc_local, disc_global, r1, r2, gen_local, gen_global;
};

AdvTensors adv_tensors(const Discriminator& disc, const Tensor& real, const Tensor& fake,
                       const AudioFeatures& audio, double r1_gamma, double fd_epsilon,
                       Rng& rng) {
    AdvTensors out;
    DiscOutput o_real = disc.forward_window(real, audio);
    DiscOutput o_fake = disc.forward_window(fake, audio);
    out.disc_local = mean(softplus(neg(sub(o_real.per_frame_logits, o_fake.per_frame_logits))));
    out.disc_global = mean(softplus(neg(sub(o_real.global_logit, o_fake.global_logit))));
    out.gen_local = mean(softplus(neg(sub(o_fake.per_frame_logits, o_real.per_frame_logits))));
    out.gen_global = mean(softplus(neg(sub(o_fake.global_logit, o_real.global_logit))));

    // Directional finite-difference estimate of the critic's input-gradient
    // norm; the probe direction is a unit vector, the dim factor restores the
    // full-norm scale in expectation.
    std::vector<int> ids(static_cast<size_t>(real.rows()) /
                         static_cast<size_t>(disc.backbone().config().tokens_per_frame));
    for (size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
    const double dim = static_cast<double>(real.numel());
    auto penalty = [&](const Tensor& x) {
        Tensor u = Tensor::randn(x.shape(), rng);
        double norm = 0.0;
        for (double v : u.data()) norm += v * v;
        u = scale(u, 1.0 / std::sqrt(std::max(norm, 1e-30)));
        Tensor c_plus = disc.critic(add(x, scale(u, fd_epsilon)), ids, audio);
        Tensor c_minus = disc.critic(sub(x, scale(u, fd_epsilon)), ids, audio);
        Tensor slope = scale(sub(c_plus, c_minus), 1.0 / (2.0 * fd_epsilon));
        return scale(mul(slope, slope), 0.5 * r1_gamma * dim);
    };
    if (r1_gamma > 0.0) {
        out.r1 = penalty(real);
        out.r2 = penalty(fake);
    } else {
        out.r1 = Tensor::scalar(0.0);
        out.r2 = Tensor::scalar(0.0);
    }
    return out;
}

}  // namespace

AdvLosses relativistic_losses(const Discriminator& disc, const Tensor& real, const Tensor& fake,
                              const AudioFeatures& audio, double r1_gamma, double fd_epsilon,
                              Rng& rng) {
    NoGradGuard ng;
    AdvTensors t = adv_tensors(disc, real, fake, audio, r1_gamma, fd_epsilon, rng);
    AdvLosses out;
    out.disc_local = t.disc_local.item();
    out.disc_global = t.disc_global.item();
    out.r1 = t.r1.item();
    out.r2 = t.r2.item();
    out.gen = t.gen_local.item() + t.gen_global.item();
    return out;
}

AdvLosses adversarial_step(AvatarDiT& student, Discriminator& disc, AdvState& state,
                           const SyntheticTask& task, const AdvConfig& cfg, Rng& rng,
                           TrainLog* log, int64_t step) {
    const ModelConfig& mcfg = student.config();
    if (cfg.rollout_chunks * mcfg.chunk_size != mcfg.window_frames) {
        throw ValidationError("adversarial_step: rollout horizon must equal the training window");
    }
    SyntheticTask::Sample real = task.make_sample(rng);

    RolloutOptions ropt;
    ropt.schedule = cfg.schedule;
    ropt.cache = cfg.cache;
    ropt.seed = rng.next();
    std::vector<Tensor> chunks = rollout(student, real.reference, real.audio,
                                         cfg.rollout_chunks, ropt);
    chunks.insert(chunks.begin(), real.reference);
    Tensor fake = concat_rows(chunks);

    AdvLosses out;
    // Critic update on a detached fake.
    {
        AdvTensors t = adv_tensors(disc, real.window, detach(fake), real.audio, cfg.r1_gamma,
                                   cfg.fd_epsilon, rng);
        Tensor d_loss = add(add(t.disc_local, t.disc_global), add(t.r1, t.r2));
        check_finite(d_loss, "adversarial critic loss");
        state.disc_opt.zero_grads();
        backward(d_loss);
        state.disc_opt.step();
        out.disc_local = t.disc_local.item();
        out.disc_global = t.disc_global.item();
        out.r1 = t.r1.item();
        out.r2 = t.r2.item();
    }
    // Generator update through the rollout graph; critic grads produced here
    // are discarded by the next zero.
    {
        AdvTensors t = adv_tensors(disc, real.window, fake, real.audio, 0.0, cfg.fd_epsilon, rng);
        Tensor g_loss = add(t.gen_local, t.gen_global);
        check_finite(g_loss, "adversarial generator loss");
        state.gen_opt.zero_grads();
        disc.zero_grads();
        backward(g_loss);
        state.gen_opt.step();
        disc.zero_grads();
        out.gen = g_loss.item();
    }
    if (log) {
        log->record(step, "refine", "disc_local", out.disc_local);
        log->record(step, "refine", "disc_global", out.disc_global);
        log->record(step, "refine", "r1", out.r1);
        log->record(step, "refine", "r2", out.r2);
        log->record(step, "refine", "gen", out.gen);
    }
    return out;
}

double feature_stat_distance(const std::vector<Tensor>& real, const std::vector<Tensor>& fake) {
    if (real.empty() || fake.empty()) throw ValidationError("feature_stat_distance: empty batch");
    const int cols = real[0].cols();
    auto stats = [cols](const std::vector<Tensor>& batch) {
        std::vector<double> mu(cols, 0.0), sd(cols, 0.0);
        int64_t rows = 0;
        for (const Tensor& t : batch) {
            for (int r = 0; r < t.rows(); ++r) {
                for (int c = 0; c < cols; ++c) mu[c] += t.at(static_cast<int64_t>(r) * cols + c);
            }
            rows += t.rows();
        }
        for (double& m : mu) m /= static_cast<double>(rows);
        for (const Tensor& t : batch) {
            for (int r = 0; r < t.rows(); ++r) {
                for (int c = 0; c < cols; ++c) {
                    const double d = t.at(static_cast<int64_t>(r) * cols + c) - mu[c];
                    sd[c] += d * d;
                }
            }
        }
        for (double& s : sd) s = std::sqrt(s / static_cast<double>(rows));
        return std::make_pair(mu, sd);
    };
    auto [mu_r, sd_r] = stats(real);
    auto [mu_f, sd_f] = stats(fake);
    double acc = 0.0;
    for (int c = 0; c < cols; ++c) {
        acc += (mu_r[c] - mu_f[c]) * (mu_r[c] - mu_f[c]) +
               (sd_r[c] - sd_f[c]) * (sd_r[c] - sd_f[c]);
    }
    return acc / static_cast<double>(cols);
}

}  // namespace sdit
