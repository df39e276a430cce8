#pragma once

// The experiment configuration: one JSON file describing both environments'
// pipelines (environment parameters, actor-critic and VAE training settings,
// label budgets, per-target remapping rules, evaluation protocol, artifact
// paths). Parsing is strict — every violation reports the offending key
// path, and unknown keys are rejected rather than ignored.

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "magik/envs.hpp"
#include "magik/imagination.hpp"
#include "magik/sac.hpp"
#include "magik/transfer.hpp"

namespace magik::config {

/// Schema violation; the message starts with the JSON path of the bad or
/// missing key (e.g. "gridpick.sac.gamma: expected a number").
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The schema revision this build reads. Files declare theirs in
/// `schema_version`; a mismatch is a ConfigError, not a silent reinterpret.
inline constexpr int kSchemaVersion = 1;

/// One target task of an environment: which objects are present, which
/// colors the reward covers, and the class-remapping rules the transfer
/// policy applies on it.
struct TargetConfig {
  std::string name;
  bool has_red = true;     // GridPick only: balls present in the room
  bool has_green = true;   // (Reacher always shows all four targets)
  /// GridPick: the rewarded ball colors. Reacher: exactly the task color.
  std::vector<envs::Color> rewarded;
  std::vector<transfer::MappingRule> rules;
  /// Train the fine-tuned baseline for this target (off for the source-task
  /// retention row, where the plain source policy already is that agent).
  bool finetune = true;
};

struct FinetuneConfig {
  float return_threshold = 0.95f;
  /// Probes in a row that must clear the threshold before the run counts as
  /// converged; the recorded interaction count is the step of the first.
  int stable_probes = 2;
  sac::SacConfig sac;
};

/// Settings for one environment's pipeline.
struct EnvPipeline {
  sac::SacConfig sac;             // source-task training
  long long min_observations = 0;  // dataset floor enforced by collection
  std::size_t label_budget = 0;
  imagination::VaeTrainConfig vae;  // vae.z_dim is set explicitly per env
  FinetuneConfig finetune;
  std::vector<TargetConfig> targets;
};

struct ExperimentConfig {
  int schema_version = kSchemaVersion;
  std::string experiment_id = "desk";
  std::uint64_t seed = 1;
  std::string artifact_dir = "artifacts";

  // Evaluation protocol shared by every agent row.
  std::vector<std::uint64_t> eval_seeds;
  int gridpick_episodes = 10;
  int reacher_episodes = 20;

  envs::GridPickEnv::Config gridpick_env;  // source-task parameters
  envs::ReacherEnv::Config reacher_env;
  EnvPipeline gridpick;
  EnvPipeline reacher;

  /// Source-task environment with the given target's object set and reward.
  envs::GridPickEnv::Config gridpick_target_env(const TargetConfig& t) const;
  envs::ReacherEnv::Config reacher_target_env(const TargetConfig& t) const;
};

/// Parses and validates a config document. Every field is checked for
/// type and range, unknown keys anywhere are errors, and rule tables go
/// through transfer::validate_rules. `source` names the document in
/// messages (usually the file path).
ExperimentConfig parse_config(const std::string& json_text, const std::string& source = "config");
ExperimentConfig load_config(const std::string& path);

/// Canonical serialization: sorted keys, every field explicit. Two configs
/// serialize identically iff they parse identically, so the digest of this
/// string identifies the run's settings in the manifest.
std::string canonical_json(const ExperimentConfig& cfg);

/// FNV-1a over the canonical serialization, hex-encoded.
std::string config_hash(const ExperimentConfig& cfg);

/// The built-in desk-scale configuration (also what `parse_config` uses for
/// defaults: a file only lists the keys it overrides).
ExperimentConfig default_config();

/// Writes default_config() as a fully explicit, commented-free JSON file.
std::string default_config_json();

}  // namespace magik::config
