#pragma once

// Zero-shot transfer: a source policy acts on target-task observations after
// the VAE re-imagines them into source-task classes. A small declarative
// rule table says, per predicted class, which class sequence to imagine;
// any class without a rule passes straight through to the source policy.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "magik/envs.hpp"
#include "magik/imagination.hpp"
#include "magik/sac.hpp"

namespace magik::transfer {

/// One remapping instruction: when the classifier head predicts `when`,
/// push the observation through `imagine_as` in order. A pass-through rule
/// pins the class to "leave unchanged" and must carry no sequence.
struct MappingRule {
  int when = 0;
  std::vector<int> imagine_as;
  bool pass_through = false;
};

/// Throws std::invalid_argument on duplicate `when` classes, labels outside
/// 1..kNumClasses, an empty sequence on a non-pass-through rule, or a
/// sequence on a pass-through rule.
void validate_rules(const std::vector<MappingRule>& rules);

/// A frozen (VAE, rules, source policy) triple. The VAE and the actor are
/// borrowed, not owned; keep them alive for the policy's lifetime. Exactly
/// one of the two actors is set. `watched` lists parameters evaluation must
/// never change; the factories preload the VAE's and callers append the
/// policy net's.
struct TransferPolicy {
  imagination::VaeModel* vae = nullptr;
  std::vector<MappingRule> rules;
  sac::GridActor grid_policy;
  sac::ReachActor reach_policy;
  /// When set, remapping is skipped unless the head's top probability
  /// reaches this floor. Off by default.
  std::optional<float> confidence_floor;
  std::vector<nn::Param*> watched;
};

/// Both factories validate the rules and require the VAE whenever the rule
/// table is nonempty (an all-pass-through policy may omit it).
TransferPolicy make_grid_policy(imagination::VaeModel* vae, sac::GridActor source,
                                std::vector<MappingRule> rules);
TransferPolicy make_reach_policy(imagination::VaeModel* vae, sac::ReachActor source,
                                 std::vector<MappingRule> rules);

/// Applies the rule table: classify with the head (posterior mean), run the
/// matching rule's imagination chain, or return the observation unchanged.
/// With an empty rule table the VAE is never consulted at all.
envs::Observation imagined_observation(const TransferPolicy& p, const envs::Observation& obs);

/// Source-policy action on the (possibly re-imagined) observation.
int act_grid(const TransferPolicy& p, const envs::Observation& obs);
std::array<float, 2> act_reach(const TransferPolicy& p, const envs::Observation& obs);

/// The policy as a sac actor; the closure captures `p` by reference.
sac::GridActor grid_actor(const TransferPolicy& p);
sac::ReachActor reach_actor(const TransferPolicy& p);

/// Per-color contact counts per seed plus the aggregation the result tables
/// print. `colors` lists the columns this task reports (GridPick: the balls
/// present in the room; Reacher: the task color).
struct TransferReport {
  std::string task;
  std::string agent;
  int episodes_per_seed = 0;
  std::vector<std::uint64_t> seeds;
  std::vector<sac::EpisodeStats> per_seed;
  std::vector<envs::Color> colors;

  bool has_color(envs::Color c) const;
  double mean_count(envs::Color c) const;
  /// Population standard deviation across seeds (matches mean ± std in the
  /// result tables).
  double std_count(envs::Color c) const;
};

/// Runs n_episodes greedy episodes per seed and collects per-color contact
/// counts. Parameters in `watched` are checksummed before and after; any
/// change raises std::logic_error — evaluation must not learn. `task` and
/// `agent` are left blank for the caller to fill.
TransferReport evaluate_transfer(const TransferPolicy& p, envs::GridPickEnv& env, int n_episodes,
                                 const std::vector<std::uint64_t>& seeds);
TransferReport evaluate_transfer(const TransferPolicy& p, envs::ReacherEnv& env, int n_episodes,
                                 const std::vector<std::uint64_t>& seeds);

/// Adaptation cost of one agent on one task: labels consumed versus
/// target-environment interactions consumed. Zero means free on that axis.
struct AgentBudget {
  long long labels = 0;
  long long env_interactions = 0;
};

struct ComparisonEntry {
  TransferReport report;
  AgentBudget budget;
};

/// Rows grouped by task (first-appearance order) with agents in the result
/// tables' order: SAC, SAC-Fine tuned, everything else, MAGIK last.
/// Canonical agents missing from a task are flagged in `notes`, not fatal.
struct ComparisonTable {
  struct Row {
    TransferReport report;
    AgentBudget budget;
  };
  std::vector<Row> rows;
  std::vector<std::string> notes;
};

ComparisonTable compare_agents(std::vector<ComparisonEntry> entries);

/// Raw per-seed counts, one row per (seed, color):
/// task,agent,seed,color,count,episodes.
void write_report_csv(const TransferReport& r, const std::string& path);

/// Aggregated pick table: target,agent,green_picked_mean,green_picked_std,
/// red_picked_mean,red_picked_std with "NA" for balls absent from the room.
void write_gridpick_table_csv(const std::vector<TransferReport>& reports, const std::string& path);
/// Aggregated reach table: target,agent,reached_mean,reached_std (the
/// report's task color).
void write_reacher_table_csv(const std::vector<TransferReport>& reports, const std::string& path);

/// Fixed-width text mirrors of the two CSV tables.
std::string format_gridpick_table(const std::vector<TransferReport>& reports);
std::string format_reacher_table(const std::vector<TransferReport>& reports);

/// Budget accounting: task,agent,labels,env_interactions,interactions_per_label,
/// where the ratio divides this row's interactions by the task's MAGIK label
/// count (blank when either side is missing).
void write_budget_csv(const ComparisonTable& t, const std::string& path);

/// Human-readable comparison: per-row performance plus budget columns,
/// followed by any notes.
std::string format_comparison(const ComparisonTable& t);

}  // namespace magik::transfer
