#pragma once

// Semi-supervised VAE training over mixed labelled/unlabelled batches, the
// imagination operator built on the trained model (re-decode an observation
// under a different class code), latent traversal grids, and the diagnostic
// battery used to judge whether the latent split actually disentangled
// class from everything else.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "magik/dataio.hpp"
#include "magik/envs.hpp"
#include "magik/losses.hpp"
#include "magik/nets.hpp"
#include "magik/rng.hpp"
#include "magik/tensor.hpp"

namespace magik::imagination {

/// Thrown when a training step produces a non-finite loss; the message names
/// the epoch, the batch index within it, and the offending term values.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct VaeTrainConfig {
  float lr = 5e-4f;
  int batch = 100;  // per optimizer step; half labelled, half unlabelled
  /// Width of the class-agnostic code; 0 keeps the observation kind's
  /// default (32 pixel, 11 feature).
  int z_dim = 0;
  losses::ElboWeights weights;
  float grad_clip = 1.0f;  // global max-norm across every parameter
  int epochs = 200;        // 200 pixel / 300 feature are the calling defaults
  /// Optimizer steps per epoch; 0 derives one full pass over the unlabelled
  /// pool. Small caps keep the conv model inside a single-core time budget.
  int steps_per_epoch = 0;
  float temp_start = 1.0f;  // Gumbel-Softmax temperature anneal endpoints
  float temp_end = 0.5f;
  /// Stop after this many epochs without validation improvement (0 = never).
  int early_stop_patience = 20;
  /// Rows held out of training for the validation loss (capped fraction of
  /// the unlabelled pool).
  int val_rows = 1000;
};

/// Trained model plus everything needed to use it standalone: feature
/// standardization moments (identity for pixel models) and the training
/// position metadata checkpoints carry.
struct VaeModel {
  nets::Vae net;
  std::vector<float> feat_mean, feat_std;  // empty for pixel models
  std::uint64_t seed = 0;                  // build seed; re-creates the init twin
  long long steps = 0;                     // optimizer steps taken
  float temperature = 1.0f;                // anneal position at the last step
};

struct EpochStats {
  int epoch = 0;
  losses::ElboBreakdown train;  // means over the epoch's optimizer steps
  double val_total = 0.0;       // deterministic unlabelled loss on held-out rows
  double temperature = 0.0;
};

struct TrainResult {
  VaeModel model;
  std::vector<EpochStats> curve;
};

/// Minimizes -ELBO(labelled) - ELBO(unlabelled) + w_h * HSIC(z, c) over
/// mixed batches: each step draws batch/2 labelled rows (with replacement)
/// and batch/2 unlabelled rows (without, reshuffled per epoch). Rows outside
/// `labels` are treated as unlabelled; their stored classes are never read.
/// When curve_csv is nonempty the per-epoch breakdown is also streamed there.
/// Throws DivergenceError on a non-finite loss and std::invalid_argument on
/// bad config or out-of-range label indices.
TrainResult train_vae(const dataio::ObservationDataset& data,
                      const std::vector<dataio::LabeledSample>& labels,
                      const VaeTrainConfig& cfg, std::uint64_t seed,
                      const std::string& curve_csv = "");

/// Gumbel-Softmax temperature after `step` of `total_steps`: exponential
/// interpolation from temp_start to temp_end.
float temperature_at(const VaeTrainConfig& cfg, long long step, long long total_steps);

enum class EncodeMode { sample, mean };

struct Encoded {
  std::vector<float> z;
  std::vector<float> class_probs;
};

struct EncodedBatch {
  Tensor z;            // [N, z_dim]
  Tensor class_probs;  // [N, K]
};

/// Posterior encode of raw observations (standardization is internal).
/// mode=sample draws z ~ q(z|x) and requires rng; mode=mean returns the
/// posterior mean deterministically. Throws std::invalid_argument on a
/// kind/shape mismatch or a missing rng.
Encoded encode(VaeModel& m, const envs::Observation& obs, EncodeMode mode, Rng* rng = nullptr);
EncodedBatch encode_batch(VaeModel& m, const Tensor& x, EncodeMode mode, Rng* rng = nullptr);

/// Chained class-swap: starting from the observation, repeatedly re-decode
/// the posterior-mean z under the next class of the sequence. Classes are
/// 1-based; the result is a valid observation of the model's kind. Throws
/// std::invalid_argument on an empty sequence or a class outside 1..K.
envs::Observation imagine(VaeModel& m, const envs::Observation& obs,
                          const std::vector<int>& class_sequence);
Tensor imagine_batch(VaeModel& m, const Tensor& x, const std::vector<int>& class_sequence);

/// decode(z, one_hot(cls)) in raw observation space — the single step
/// imagine() iterates.
Tensor decode_class(VaeModel& m, const Tensor& z, int cls);

/// Traversal grid: cell (i,j) = decode(z of row seed i, class of column seed
/// j). Pixel models only — returns [rows, cols, 40, 40, 3]; feature models
/// throw std::invalid_argument (use traverse_table).
Tensor traverse(VaeModel& m, const std::vector<envs::Observation>& row_seeds,
                const std::vector<envs::Observation>& col_seeds);

/// Feature-model counterpart: [rows, cols, feature_dim] of decoded vectors.
Tensor traverse_table(VaeModel& m, const std::vector<envs::Observation>& row_seeds,
                      const std::vector<envs::Observation>& col_seeds);

struct Diagnostics {
  double holdout_accuracy = 0.0;   // head argmax vs oracle on held-out rows
  double cycle_consistency = 0.0;  // class(imagine(imagine(x,[b]),[a])) == a
  double z_stability = 0.0;        // median z shift / median pairwise z distance
  double hsic_init = 0.0;          // HSIC(z, probs) of the untrained twin
  double hsic_trained = 0.0;       // same batch through the trained model
  int holdout_rows = 0;
};

/// Evaluates the trained model on rows disjoint from the training labels:
/// classification accuracy against the withheld oracle, the two-step
/// imagination cycle, z stability under class swaps, and before/after HSIC
/// on the same held-out batch (the "before" model is rebuilt from the stored
/// seed). `train_labels` marks rows to exclude from the holdout.
///
/// Each HSIC value uses (posterior-mean z, class probabilities) at that
/// model's own median bandwidths, so the two numbers describe each model at
/// its own scale. Compare them with care: an untrained head emits
/// near-uniform probabilities, which floors the init-side estimate.
Diagnostics run_diagnostics(VaeModel& m, const dataio::ObservationDataset& data,
                            const std::vector<dataio::LabeledSample>& train_labels,
                            std::uint64_t seed, int holdout_rows = 1000);

/// Checkpoint the model (parameters, batch-norm state, standardization
/// moments, training metadata) into the sectioned container format.
void save_vae(const VaeModel& m, const std::string& path);
VaeModel load_vae(const std::string& path);

}  // namespace magik::imagination
