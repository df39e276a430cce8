#include "magik/transfer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <stdexcept>

#include "magik/dataio.hpp"
#include "magik/nets.hpp"

namespace magik::transfer {

namespace {

int argmax(const std::vector<float>& v) {
  return static_cast<int>(std::max_element(v.begin(), v.end()) - v.begin());
}

std::string fmt2(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.2f", v);
  return buf;
}

std::string mean_std_cell(const TransferReport& r, envs::Color c) {
  return r.has_color(c) ? fmt2(r.mean_count(c)) + " +/- " + fmt2(r.std_count(c)) : std::string("NA");
}

/// Result-table row order: SAC first, fine-tuned variants second, MAGIK
/// last, everything else in between.
int agent_priority(const std::string& agent) {
  if (agent == "SAC") return 0;
  if (agent.rfind("SAC-Fine tuned", 0) == 0) return 1;
  if (agent == "MAGIK") return 3;
  return 2;
}

/// Fixed-width left-aligned join of pre-rendered cells.
std::string layout(const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width;
  for (const auto& row : rows) {
    if (width.size() < row.size()) width.resize(row.size(), 0);
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  std::string out;
  for (const auto& row : rows) {
    for (std::size_t i = 0; i < row.size(); ++i) {
      out += row[i];
      if (i + 1 < row.size()) out.append(width[i] - row[i].size() + 2, ' ');
    }
    out += '\n';
  }
  return out;
}

}  // namespace

void validate_rules(const std::vector<MappingRule>& rules) {
  std::vector<bool> seen(envs::kNumClasses + 1, false);
  for (const MappingRule& r : rules) {
    if (r.when < 1 || r.when > envs::kNumClasses)
      throw std::invalid_argument("transfer: rule class " + std::to_string(r.when) +
                                  " outside 1.." + std::to_string(envs::kNumClasses));
    if (seen[static_cast<std::size_t>(r.when)])
      throw std::invalid_argument("transfer: duplicate rule for class " + std::to_string(r.when));
    seen[static_cast<std::size_t>(r.when)] = true;
    if (r.pass_through && !r.imagine_as.empty())
      throw std::invalid_argument("transfer: pass-through rule for class " +
                                  std::to_string(r.when) + " must not carry a sequence");
    if (!r.pass_through && r.imagine_as.empty())
      throw std::invalid_argument("transfer: rule for class " + std::to_string(r.when) +
                                  " has an empty sequence");
    for (int cls : r.imagine_as)
      if (cls < 1 || cls > envs::kNumClasses)
        throw std::invalid_argument("transfer: imagined class " + std::to_string(cls) +
                                    " outside 1.." + std::to_string(envs::kNumClasses));
  }
}

namespace {

TransferPolicy make_policy(imagination::VaeModel* vae, std::vector<MappingRule> rules) {
  validate_rules(rules);
  if (!rules.empty() && vae == nullptr)
    throw std::invalid_argument("transfer: rules need a model to imagine with");
  TransferPolicy p;
  p.vae = vae;
  p.rules = std::move(rules);
  if (vae != nullptr) p.watched = vae->net.params();
  return p;
}

}  // namespace

TransferPolicy make_grid_policy(imagination::VaeModel* vae, sac::GridActor source,
                                std::vector<MappingRule> rules) {
  if (!source) throw std::invalid_argument("transfer: source policy required");
  TransferPolicy p = make_policy(vae, std::move(rules));
  p.grid_policy = std::move(source);
  return p;
}

TransferPolicy make_reach_policy(imagination::VaeModel* vae, sac::ReachActor source,
                                 std::vector<MappingRule> rules) {
  if (!source) throw std::invalid_argument("transfer: source policy required");
  TransferPolicy p = make_policy(vae, std::move(rules));
  p.reach_policy = std::move(source);
  return p;
}

envs::Observation imagined_observation(const TransferPolicy& p, const envs::Observation& obs) {
  if (p.rules.empty()) return obs;
  if (p.vae == nullptr) throw std::logic_error("transfer: rules present but no model attached");
  imagination::Encoded enc = imagination::encode(*p.vae, obs, imagination::EncodeMode::mean);
  int best = argmax(enc.class_probs);
  if (p.confidence_floor && enc.class_probs[static_cast<std::size_t>(best)] < *p.confidence_floor)
    return obs;
  for (const MappingRule& r : p.rules) {
    if (r.when != best + 1) continue;
    if (r.pass_through) return obs;
    return imagination::imagine(*p.vae, obs, r.imagine_as);
  }
  return obs;
}

int act_grid(const TransferPolicy& p, const envs::Observation& obs) {
  if (!p.grid_policy) throw std::logic_error("transfer: policy has no grid actor");
  return p.grid_policy(imagined_observation(p, obs));
}

std::array<float, 2> act_reach(const TransferPolicy& p, const envs::Observation& obs) {
  if (!p.reach_policy) throw std::logic_error("transfer: policy has no reach actor");
  return p.reach_policy(imagined_observation(p, obs));
}

sac::GridActor grid_actor(const TransferPolicy& p) {
  return [&p](const envs::Observation& obs) { return act_grid(p, obs); };
}

sac::ReachActor reach_actor(const TransferPolicy& p) {
  return [&p](const envs::Observation& obs) { return act_reach(p, obs); };
}

bool TransferReport::has_color(envs::Color c) const {
  return std::find(colors.begin(), colors.end(), c) != colors.end();
}

double TransferReport::mean_count(envs::Color c) const {
  if (per_seed.empty()) return 0.0;
  double s = 0;
  for (const sac::EpisodeStats& e : per_seed) s += e.count(c);
  return s / static_cast<double>(per_seed.size());
}

double TransferReport::std_count(envs::Color c) const {
  if (per_seed.size() < 2) return 0.0;
  double m = mean_count(c);
  double s = 0;
  for (const sac::EpisodeStats& e : per_seed) s += (e.count(c) - m) * (e.count(c) - m);
  return std::sqrt(s / static_cast<double>(per_seed.size()));
}

namespace {

template <class Env, class ActorFn>
TransferReport evaluate_impl(const TransferPolicy& p, Env& env, int n_episodes,
                             const std::vector<std::uint64_t>& seeds, const ActorFn& actor,
                             std::vector<envs::Color> colors) {
  if (seeds.empty()) throw std::invalid_argument("evaluate_transfer: need at least one seed");
  std::uint64_t before = nets::param_checksum(p.watched);
  TransferReport report;
  report.episodes_per_seed = n_episodes;
  report.seeds = seeds;
  report.colors = std::move(colors);
  for (std::uint64_t seed : seeds)
    report.per_seed.push_back(sac::evaluate_policy(actor, env, n_episodes, seed));
  if (nets::param_checksum(p.watched) != before)
    throw std::logic_error("evaluate_transfer: parameters changed during evaluation");
  return report;
}

}  // namespace

TransferReport evaluate_transfer(const TransferPolicy& p, envs::GridPickEnv& env, int n_episodes,
                                 const std::vector<std::uint64_t>& seeds) {
  std::vector<envs::Color> colors;
  if (env.config().has_green) colors.push_back(envs::Color::green);
  if (env.config().has_red) colors.push_back(envs::Color::red);
  return evaluate_impl(p, env, n_episodes, seeds, grid_actor(p), std::move(colors));
}

TransferReport evaluate_transfer(const TransferPolicy& p, envs::ReacherEnv& env, int n_episodes,
                                 const std::vector<std::uint64_t>& seeds) {
  return evaluate_impl(p, env, n_episodes, seeds, reach_actor(p),
                       {env.config().task_color});
}

ComparisonTable compare_agents(std::vector<ComparisonEntry> entries) {
  ComparisonTable table;
  std::vector<std::string> task_order;
  std::map<std::string, std::vector<ComparisonEntry*>> by_task;
  for (ComparisonEntry& e : entries) {
    if (by_task.find(e.report.task) == by_task.end()) task_order.push_back(e.report.task);
    by_task[e.report.task].push_back(&e);
  }
  for (const std::string& task : task_order) {
    auto& group = by_task[task];
    std::stable_sort(group.begin(), group.end(), [](const ComparisonEntry* a, const ComparisonEntry* b) {
      return agent_priority(a->report.agent) < agent_priority(b->report.agent);
    });
    bool have[4] = {false, false, false, false};
    for (const ComparisonEntry* e : group) {
      have[agent_priority(e->report.agent)] = true;
      table.rows.push_back({e->report, e->budget});
    }
    if (!have[0]) table.notes.push_back(task + ": missing SAC row");
    if (!have[1]) table.notes.push_back(task + ": missing SAC-Fine tuned row");
    if (!have[3]) table.notes.push_back(task + ": missing MAGIK row");
  }
  return table;
}

void write_report_csv(const TransferReport& r, const std::string& path) {
  dataio::CsvWriter csv(path, {"task", "agent", "seed", "color", "count", "episodes"});
  for (std::size_t i = 0; i < r.per_seed.size(); ++i)
    for (envs::Color c : r.colors)
      csv.row({r.task, r.agent, std::to_string(r.seeds[i]), envs::color_name(c),
               std::to_string(r.per_seed[i].count(c)), std::to_string(r.episodes_per_seed)});
}

namespace {

std::vector<std::string> gridpick_cells(const TransferReport& r, bool csv) {
  auto cell = [&](envs::Color c, std::vector<std::string>& out) {
    if (!r.has_color(c)) {
      out.push_back("NA");
      if (csv) out.push_back("NA");
      return;
    }
    if (csv) {
      out.push_back(fmt2(r.mean_count(c)));
      out.push_back(fmt2(r.std_count(c)));
    } else {
      out.push_back(mean_std_cell(r, c));
    }
  };
  std::vector<std::string> out = {r.task, r.agent};
  cell(envs::Color::green, out);
  cell(envs::Color::red, out);
  return out;
}

}  // namespace

void write_gridpick_table_csv(const std::vector<TransferReport>& reports, const std::string& path) {
  dataio::CsvWriter csv(path, {"target", "agent", "green_picked_mean", "green_picked_std",
                               "red_picked_mean", "red_picked_std"});
  for (const TransferReport& r : reports) csv.row(gridpick_cells(r, true));
}

void write_reacher_table_csv(const std::vector<TransferReport>& reports, const std::string& path) {
  dataio::CsvWriter csv(path, {"target", "agent", "reached_mean", "reached_std"});
  for (const TransferReport& r : reports) {
    if (r.colors.empty()) throw std::invalid_argument("reacher table: report without a task color");
    envs::Color c = r.colors.front();
    csv.row({r.task, r.agent, fmt2(r.mean_count(c)), fmt2(r.std_count(c))});
  }
}

std::string format_gridpick_table(const std::vector<TransferReport>& reports) {
  int episodes = reports.empty() ? 0 : reports.front().episodes_per_seed;
  std::string n = std::to_string(episodes);
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"Target", "Agent", "Green ball picked (Out of " + n + ")",
                  "Red ball picked (Out of " + n + ")"});
  for (const TransferReport& r : reports) rows.push_back(gridpick_cells(r, false));
  return layout(rows);
}

std::string format_reacher_table(const std::vector<TransferReport>& reports) {
  int episodes = reports.empty() ? 0 : reports.front().episodes_per_seed;
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"Target", "Agent", "Target reached (Out of " + std::to_string(episodes) + ")"});
  for (const TransferReport& r : reports) {
    if (r.colors.empty()) throw std::invalid_argument("reacher table: report without a task color");
    rows.push_back({r.task, r.agent, mean_std_cell(r, r.colors.front())});
  }
  return layout(rows);
}

namespace {

/// MAGIK label count per task, for the interactions-per-label column.
std::map<std::string, long long> magik_labels_by_task(const ComparisonTable& t) {
  std::map<std::string, long long> out;
  for (const ComparisonTable::Row& row : t.rows)
    if (row.report.agent == "MAGIK") out[row.report.task] = row.budget.labels;
  return out;
}

}  // namespace

void write_budget_csv(const ComparisonTable& t, const std::string& path) {
  dataio::CsvWriter csv(path, {"task", "agent", "labels", "env_interactions",
                               "interactions_per_label"});
  std::map<std::string, long long> magik_labels = magik_labels_by_task(t);
  for (const ComparisonTable::Row& row : t.rows) {
    std::string ratio;
    auto it = magik_labels.find(row.report.task);
    if (row.budget.env_interactions > 0 && it != magik_labels.end() && it->second > 0)
      ratio = fmt2(static_cast<double>(row.budget.env_interactions) /
                   static_cast<double>(it->second));
    csv.row({row.report.task, row.report.agent, std::to_string(row.budget.labels),
             std::to_string(row.budget.env_interactions), ratio});
  }
}

std::string format_comparison(const ComparisonTable& t) {
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"Task", "Agent", "Per-color (mean +/- std)", "Labels", "Interactions"});
  for (const ComparisonTable::Row& row : t.rows) {
    std::string perf;
    for (envs::Color c : row.report.colors) {
      if (!perf.empty()) perf += "; ";
      perf += std::string(envs::color_name(c)) + " " + mean_std_cell(row.report, c);
    }
    rows.push_back({row.report.task, row.report.agent, perf,
                    std::to_string(row.budget.labels),
                    std::to_string(row.budget.env_interactions)});
  }
  std::string out = layout(rows);
  for (const std::string& note : t.notes) out += "note: " + note + "\n";
  return out;
}

}  // namespace magik::transfer
