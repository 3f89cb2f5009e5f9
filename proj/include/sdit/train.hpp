#pragma once

#include <functional>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "sdit/discriminator.hpp"
#include "sdit/model.hpp"
#include "sdit/scheduler.hpp"

namespace sdit {

// First-order momentum-adaptive optimizer over a fixed parameter set.
class Adam {
  public:
    Adam(std::vector<std::pair<std::string, Tensor>> params, double lr,
         double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    void step();
    void zero_grads();
    double lr() const { return lr_; }
    void set_lr(double lr) { lr_ = lr; }

  private:
    std::vector<Tensor> params_;
    std::vector<std::vector<double>> m_, v_;
    double lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

// Append-only "step, phase, loss_name, value" log lines.
class TrainLog {
  public:
    explicit TrainLog(std::ostream* sink) : sink_(sink) {}
    void record(int64_t step, const std::string& phase, const std::string& name, double value);
    const std::vector<double>& values(const std::string& name) const;

  private:
    std::ostream* sink_;
    std::map<std::string, std::vector<double>> history_;
};

// Deterministic synthetic latent-sequence task standing in for avatar video:
// frame t's latent is the reference plus a motion pattern driven by the
// frame's audio feature and a slow sinusoid.
struct SyntheticTask {
    ModelConfig cfg;
    double noise_std = 0.01;

    struct Sample {
        Tensor reference;       // [tpf, latent_dim]
        Tensor window;          // [(T+1)*tpf, latent_dim], frame 0 = reference
        AudioTrack track;
        AudioFeatures audio;
    };
    Sample make_sample(Rng& rng) const;
    // Deterministic target (no observation noise) for arbitrary horizons.
    Tensor clean_frames(const Tensor& reference, const AudioTrack& track, int first_frame,
                        int count) const;
    AudioTrack make_track(Rng& rng, int frames) const;
};

// Bidirectional teacher finetune on the synthetic denoising task.
double train_teacher(AvatarDiT& teacher, const SyntheticTask& task, int steps, double lr,
                     Rng& rng, TrainLog* log = nullptr);

// Deterministic multi-step Euler sampling of the teacher over a full window.
// The grid is built by subdividing each student interval, so the student's
// sigmas always lie on it.
std::vector<double> teacher_sigma_grid(const NoiseSchedule& student, int total_steps);
Tensor teacher_sample(const AvatarDiT& teacher, const Tensor& reference,
                      const AudioFeatures& audio, const std::vector<double>& grid, Rng& rng,
                      std::vector<std::pair<double, Tensor>>* trajectory = nullptr);

struct OdePair {
    int first_frame = 1;     // chunk start
    double sigma = 1.0;      // student timestep of the snapshot
    Tensor noisy_chunk;      // [C*tpf, latent_dim], trajectory state at sigma
    Tensor target_chunk;     // teacher's final clean output for the chunk
    Tensor reference;        // [tpf, latent_dim]
    AudioTrack track;        // reference + chunk conditioning slice source
};

std::vector<OdePair> generate_ode_pairs(const AvatarDiT& teacher, const SyntheticTask& task,
                                        const NoiseSchedule& student_schedule,
                                        int teacher_steps, int count, Rng& rng);

void save_ode_pairs(const std::vector<OdePair>& pairs, const std::string& path);
std::vector<OdePair> load_ode_pairs(const std::string& path);

// Regression pretraining of the student on recorded trajectory pairs.
// Returns the final smoothed loss.
double ode_init(AvatarDiT& student, const std::vector<OdePair>& pairs, int steps, double lr,
                Rng& rng, TrainLog* log = nullptr);
// Loss of the student on the dataset without updating weights.
double ode_regression_loss(const AvatarDiT& student, const std::vector<OdePair>& pairs);

struct SidConfig {
    NoiseSchedule schedule;
    CacheConfig cache;
    int rollout_chunks = 4;
    double lr_student = 1e-3;
    double lr_aux = 1e-3;
    double weight = 1.0;  // w(sigma), constant by default
};

struct SidState {
    Adam student_opt;
    Adam aux_opt;
};

// One distribution-matching step: student-forcing rollout, re-noise, push the
// rollout outputs along the (aux score - teacher score) discrepancy, then a
// denoising-regression step for the auxiliary score network.
struct SidStats {
    double grad_norm = 0.0;   // distillation gradient magnitude on samples
    double aux_loss = 0.0;
};
SidStats sid_step(AvatarDiT& student, const AvatarDiT& teacher, AvatarDiT& aux_score,
                  SidState& state, const SyntheticTask& task, const SidConfig& cfg, Rng& rng,
                  TrainLog* log = nullptr, int64_t step = 0);

// Distillation gradient field only (no update); used by equilibrium checks.
double sid_gradient_norm(const AvatarDiT& student, const AvatarDiT& teacher,
                         const AvatarDiT& aux_score, const SyntheticTask& task,
                         const SidConfig& cfg, Rng& rng);

struct AdvConfig {
    NoiseSchedule schedule;
    CacheConfig cache;
    int rollout_chunks = 4;
    double lr_gen = 1e-4;
    double lr_disc = 1e-4;
    double r1_gamma = 0.1;
    double fd_epsilon = 1e-3;  // finite-difference probe for the penalties
};

struct AdvLosses {
    double disc_local = 0.0;   // relativistic, local branch
    double disc_global = 0.0;  // relativistic, global branch
    double r1 = 0.0;
    double r2 = 0.0;
    double gen = 0.0;
};

// Relativistic pairing of one real and one fake window.
AdvLosses relativistic_losses(const Discriminator& disc, const Tensor& real,
                              const Tensor& fake, const AudioFeatures& audio,
                              double r1_gamma, double fd_epsilon, Rng& rng);

struct AdvState {
    Adam gen_opt;
    Adam disc_opt;
};

AdvLosses adversarial_step(AvatarDiT& student, Discriminator& disc, AdvState& state,
                           const SyntheticTask& task, const AdvConfig& cfg, Rng& rng,
                           TrainLog* log = nullptr, int64_t step = 0);

// Mean squared distance between per-dimension mean/std statistics of two
// batches of windows; the adversarial trend assertions use it.
double feature_stat_distance(const std::vector<Tensor>& real, const std::vector<Tensor>& fake);

}  // namespace sdit
