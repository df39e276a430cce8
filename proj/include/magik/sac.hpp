#pragma once

// Soft actor-critic trainers for the source tasks: a discrete variant for
// GridPick (categorical policy, exact action expectations in every loss) and
// a continuous variant for Reacher (tanh-squashed Gaussian with
// reparameterized gradients). Both auto-tune the entropy coefficient toward
// a fixed target, stream every visited observation into a dataset sink, and
// log greedy-evaluation curves as CSV.

#include <array>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "magik/dataio.hpp"
#include "magik/envs.hpp"
#include "magik/layers.hpp"
#include "magik/nets.hpp"

namespace magik::sac {

/// Thrown when a training loss turns non-finite.
struct DivergenceError : std::runtime_error {
  explicit DivergenceError(const std::string& what) : std::runtime_error(what) {}
};

struct SacConfig {
  float gamma = 0.99f;
  float tau = 0.005f;  // target-network smoothing
  float lr = 3e-4f;
  float alpha_lr = 3e-4f;
  float init_alpha = 0.2f;
  /// Defaults to 0.5*ln|A| for discrete actions, -dim(A) for box actions.
  std::optional<float> target_entropy;
  int batch_size = 64;
  int total_steps = 150000;
  int random_prefix = 2000;       // uniform-random action steps at the start
  int warmup_before_updates = 1000;  // env steps before gradient updates begin
  int updates_every = 1;          // env steps per gradient update
  int replay_capacity = 50000;
  int eval_every = 2500;  // env steps between greedy evaluation probes
  int eval_episodes = 10;
  /// Stop once a greedy probe's mean return reaches this.
  std::optional<float> early_stop_return;
  /// Consecutive qualifying probes required before stopping (fine-tuning
  /// uses 2 so one lucky probe cannot end the run); steps_to_threshold then
  /// records the probe that completed the streak.
  int early_stop_stable_probes = 1;
  /// With a dataset sink: keep rolling the trained policy after the loop ends
  /// until the sink holds at least this many observations.
  int collect_total = 0;
  std::uint64_t seed = 1;
};

/// Uniform-random replay with FIFO eviction. Pixel observations are held
/// quantized to u8 (as in the dataset container) so a 50K-transition buffer
/// of 40x40x3 frames stays under half a gigabyte; samples dequantize.
class ReplayBuffer {
 public:
  ReplayBuffer(envs::Observation::Kind kind, std::vector<int> obs_shape, int act_width,
               int capacity);

  void add(const float* obs, const float* act, float reward, const float* next_obs, bool terminal);
  std::size_t size() const { return size_; }
  int capacity() const { return capacity_; }

  struct Batch {
    Tensor obs;       // [N, ...obs]
    Tensor next_obs;  // [N, ...obs]
    Tensor actions;   // [N, act_width] (discrete stores the index in col 0)
    Tensor rewards;   // [N]
    Tensor terminal;  // [N], 1 = value bootstrap stops at this transition
  };
  /// Fills `out` with n distinct uniformly-drawn transitions (n <= size()).
  void sample(int n, Rng& rng, Batch& out) const;

 private:
  envs::Observation::Kind kind_;
  std::vector<int> obs_shape_;
  std::int64_t obs_elems_;
  int act_width_, capacity_;
  std::size_t size_ = 0, head_ = 0;
  std::vector<std::uint8_t> obs_u8_, next_u8_;
  std::vector<float> obs_f32_, next_f32_;
  std::vector<float> act_, rew_, term_;
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Per-color contact counts over an evaluation run: a color counts when a
/// ball of that color is picked up (GridPick) or the fingertip comes within
/// the reach threshold of that color's target (Reacher), rewarded or not.
/// At most one count per color per episode.
struct EpisodeStats {
  int episodes = 0;
  std::map<envs::Color, int> color_counts;
  std::vector<float> returns;

  float mean_return() const;
  float std_return() const;
  int count(envs::Color c) const;
};

using GridActor = std::function<int(const envs::Observation&)>;
using ReachActor = std::function<std::array<float, 2>(const envs::Observation&)>;

EpisodeStats evaluate_policy(const GridActor& actor, envs::GridPickEnv& env, int n_episodes,
                             std::uint64_t seed);
EpisodeStats evaluate_policy(const ReachActor& actor, envs::ReacherEnv& env, int n_episodes,
                             std::uint64_t seed);

struct TrainResult {
  int steps_run = 0;
  float final_eval_mean = 0.0f;
  /// First env-step count at which a greedy probe reached early_stop_return
  /// (unset if never). Doubles as the steps-to-threshold record when
  /// fine-tuning toward a return target.
  std::optional<int> steps_to_threshold;
};

// ---------------------------------------------------------------------------
// Discrete trainer (GridPick)
// ---------------------------------------------------------------------------

class DiscreteSacTrainer {
 public:
  DiscreteSacTrainer(const envs::GridPickEnv::Config& env_cfg, const SacConfig& cfg);

  /// Runs the interaction/update loop. Every visited observation goes to
  /// `sink` when non-null; greedy-probe curves stream to curve_csv_path when
  /// nonempty (columns: step, return_mean, return_std). Throws
  /// DivergenceError if a loss turns non-finite.
  TrainResult train(dataio::ObservationDataset* sink, const std::string& curve_csv_path);

  void save_checkpoint(const std::string& path) const;
  void load_checkpoint(const std::string& path);

  /// Argmax actor over the current parameters.
  GridActor greedy_actor();
  /// Softmax-sampling actor drawing from the given stream.
  GridActor stochastic_actor(Rng* rng);

  nets::SacNets& nets() { return nets_; }
  nets::SacNets& target_nets() { return targets_; }
  SacConfig& config() { return cfg_; }
  float alpha() const;

  // Update steps are exposed so tests can drive the math on crafted batches.
  struct UpdateStats {
    float q_loss = 0, policy_loss = 0, entropy = 0, alpha = 0;
  };
  UpdateStats update(const ReplayBuffer::Batch& batch);
  /// Closed-form categorical entropy of the current policy, one per row.
  std::vector<float> policy_entropy(const Tensor& obs);
  /// Policy objective mean_s sum_a pi(a|s) (alpha log pi(a|s) - min Q(s,a))
  /// with the critics held fixed; the _and_grad variant also accumulates
  /// policy parameter gradients without stepping (finite-difference hook).
  float policy_objective(const Tensor& obs);
  float policy_objective_and_grad(const Tensor& obs, float* mean_logpi = nullptr);

 private:
  void q_update(const ReplayBuffer::Batch& batch, UpdateStats& stats);
  void policy_update(const ReplayBuffer::Batch& batch, UpdateStats& stats);

  envs::GridPickEnv::Config env_cfg_;
  SacConfig cfg_;
  float target_entropy_;
  float log_alpha_;
  float alpha_m_ = 0, alpha_v_ = 0;  // moment estimates for the log-alpha step
  int alpha_t_ = 0;
  nets::SacNets nets_, targets_;
  nn::Adam q_opt_, pi_opt_;
  Rng rng_;
};

// ---------------------------------------------------------------------------
// Continuous trainer (Reacher)
// ---------------------------------------------------------------------------

class ContinuousSacTrainer {
 public:
  ContinuousSacTrainer(const envs::ReacherEnv::Config& env_cfg, const SacConfig& cfg);

  TrainResult train(dataio::ObservationDataset* sink, const std::string& curve_csv_path);

  void save_checkpoint(const std::string& path) const;
  void load_checkpoint(const std::string& path);

  /// Deterministic actor: tanh of the policy mean.
  ReachActor greedy_actor();
  ReachActor stochastic_actor(Rng* rng);

  nets::SacNets& nets() { return nets_; }
  nets::SacNets& target_nets() { return targets_; }
  SacConfig& config() { return cfg_; }
  float alpha() const;

  struct UpdateStats {
    float q_loss = 0, policy_loss = 0, entropy = 0, alpha = 0;
  };
  UpdateStats update(const ReplayBuffer::Batch& batch);

  /// Reparameterized squashed-Gaussian actions for the given standard-normal
  /// noise, with their log densities. Noise comes from the caller so tests
  /// can pin it. Returns actions [N,2]; fills log_pi with N entries.
  Tensor sample_action(const Tensor& obs, const Tensor& noise, std::vector<float>& log_pi);
  /// Policy objective mean(alpha log_pi - min Q) for a fixed noise draw; the
  /// _and_grad variant also accumulates policy parameter gradients without
  /// stepping (finite-difference hook).
  float policy_objective(const Tensor& obs, const Tensor& noise);
  float policy_objective_and_grad(const Tensor& obs, const Tensor& noise,
                                  float* mean_logpi = nullptr);

 private:
  void q_update(const ReplayBuffer::Batch& batch, UpdateStats& stats);
  void policy_update(const ReplayBuffer::Batch& batch, UpdateStats& stats);

  envs::ReacherEnv::Config env_cfg_;
  SacConfig cfg_;
  float target_entropy_;
  float log_alpha_;
  float alpha_m_ = 0, alpha_v_ = 0;
  int alpha_t_ = 0;
  nets::SacNets nets_, targets_;
  nn::Adam q_opt_, pi_opt_;
  Rng rng_;
};

// ---------------------------------------------------------------------------
// High-level entry points
// ---------------------------------------------------------------------------

/// Source-task training from scratch: runs the trainer's loop, streaming
/// visited observations into `sink` when non-null.
TrainResult train_source(DiscreteSacTrainer& trainer, dataio::ObservationDataset* sink,
                         const std::string& curve_csv_path);
TrainResult train_source(ContinuousSacTrainer& trainer, dataio::ObservationDataset* sink,
                         const std::string& curve_csv_path);

/// Continues training from a saved policy under the trainer's (new-task)
/// environment until greedy probes reach return_threshold; the result's
/// steps_to_threshold records when that happened.
TrainResult fine_tune(DiscreteSacTrainer& trainer, const std::string& checkpoint_path,
                      float return_threshold, const std::string& curve_csv_path);
TrainResult fine_tune(ContinuousSacTrainer& trainer, const std::string& checkpoint_path,
                      float return_threshold, const std::string& curve_csv_path);

}  // namespace magik::sac
