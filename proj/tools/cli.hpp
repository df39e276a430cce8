#pragma once

// The experiment driver behind the command-line tool: every subcommand is a
// plain function over (config, artifact directory) so tests can run the
// whole pipeline in-process. Commands read and write only the artifact
// directory, record what they produced in its manifest, and name the
// producing command when an upstream artifact is missing.

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "magik/artifacts.hpp"
#include "magik/config.hpp"

namespace magik::cli {

/// Environment scope of a command.
enum class EnvSel { gridpick, reacher, both };

struct Context {
  config::ExperimentConfig cfg;
  std::string dir;   // resolved artifact directory (created on demand)
  int jobs = 1;      // evaluation fan-out bound
  bool fresh = false;  // reproduce-all: rerun stages whose outputs look done
  std::ostream* log = nullptr;  // progress lines; null = silent

  /// Builds a context from a parsed config: resolves the artifact directory
  /// (environment override first), creates it, and opens the manifest.
  static Context make(config::ExperimentConfig cfg);
};

/// Source-task training with dataset capture: writes the dataset (+ class
/// summary), the source policy checkpoint, and the training curve.
void cmd_collect(Context& ctx, EnvSel sel);

/// Source-task training without dataset capture (policy + curve only).
void cmd_train_sac(Context& ctx, EnvSel sel);

/// Reveals the configured label budget on the collected dataset.
void cmd_label(Context& ctx, EnvSel sel);

/// Trains the semi-supervised VAE on dataset + labels; writes the model,
/// the loss curve, and the disentanglement diagnostics.
void cmd_train_vae(Context& ctx, EnvSel sel);

/// Continues source training under a target task's reward until greedy
/// probes hold the configured threshold; writes the checkpoint, curve, and
/// interaction cost. `target` filters by name (see match_target).
void cmd_finetune(Context& ctx, EnvSel sel, const std::string& target = "");

/// Evaluates SAC / fine-tuned / MAGIK rows on the selected targets and
/// prints the result tables. Unfiltered runs also write the table CSVs,
/// per-seed CSVs, and the budget comparison.
void cmd_evaluate(Context& ctx, EnvSel sel, const std::string& target = "");

/// Latent traversal grids: the pixel grid as PNG, the feature grid as CSV,
/// plus a column-class agreement summary for both.
void cmd_traverse(Context& ctx, EnvSel sel);

/// The full chain for both environments: collect, label, train-vae,
/// finetune, traverse, then one combined evaluate. Stages whose recorded
/// outputs already match the manifest are skipped unless ctx.fresh.
void cmd_reproduce_all(Context& ctx);

/// True when `query` names the target: case-insensitive match of the full
/// name, or of the name with spaces removed ("target1"), or of a trailing
/// token ("3" for "Target 3", "red" for "Red").
bool match_target(const config::TargetConfig& t, const std::string& query);

/// Lowercase alphanumeric artifact-name fragment ("Target 1" -> "target1").
std::string slug(const std::string& name);

// Artifact names, all relative to the artifact directory. `env` is
// "gridpick" or "reacher".
std::string dataset_name(const std::string& env);
std::string source_policy_name(const std::string& env);
std::string labels_name(const std::string& env);
std::string vae_name(const std::string& env);
std::string finetune_name(const std::string& env, const std::string& target_slug);
std::string finetune_cost_name(const std::string& env, const std::string& target_slug);

}  // namespace magik::cli
