#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <fstream>
#include <sstream>

#include "magik/transfer.hpp"

using namespace magik;
using namespace magik::transfer;

namespace {

std::string temp_path(const std::string& stem) {
  return "/tmp/magik_transfer_" + std::to_string(::getpid()) + "_" + stem;
}

/// Same synthetic 4-class feature data the imagination tests train on: a
/// noisy one-hot class bump in the first four dimensions plus unit-variance
/// distractors. More content than z can hold, so the decoder must fetch the
/// class from c — which is what rule-driven re-imagination exercises.
dataio::ObservationDataset synth_feature_data(int n, int dim, std::uint64_t seed) {
  auto data = dataio::ObservationDataset::feature(dim);
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    envs::Observation o;
    o.kind = envs::Observation::Kind::feature;
    o.data = Tensor({dim});
    int cls = 1 + rng.uniform_int(4);
    for (int j = 0; j < 4; ++j) o.data[j] = 0.1f * static_cast<float>(rng.normal());
    o.data[cls - 1] += 2.0f;
    for (int j = 4; j < dim; ++j) o.data[j] = static_cast<float>(rng.normal());
    data.append(o, cls, i / 10);
  }
  return data;
}

struct VaeFixture {
  dataio::ObservationDataset data;
  imagination::TrainResult trained;
};

VaeFixture& trained_vae() {
  static VaeFixture fx = [] {
    VaeFixture f{synth_feature_data(800, 24, 13), {}};
    std::vector<dataio::LabeledSample> labels;
    for (int i = 0; i < 48; ++i)
      labels.push_back({static_cast<std::size_t>(i), f.data.oracle_class(static_cast<std::size_t>(i))});
    imagination::VaeTrainConfig cfg;
    cfg.batch = 20;
    cfg.epochs = 100;
    cfg.steps_per_epoch = 10;
    cfg.val_rows = 40;
    cfg.early_stop_patience = 0;
    f.trained = imagination::train_vae(f.data, labels, cfg, 11);
    return f;
  }();
  return fx;
}

/// First holdout row (past the labelled prefix) of the requested class.
envs::Observation obs_of_class(const dataio::ObservationDataset& data, int cls) {
  for (std::size_t i = 100; i < data.size(); ++i)
    if (data.oracle_class(i) == cls) return data.get(i);
  throw std::runtime_error("no row of requested class");
}

int head_class(imagination::VaeModel& m, const envs::Observation& obs) {
  imagination::Encoded enc = imagination::encode(m, obs, imagination::EncodeMode::mean);
  int best = 0;
  for (std::size_t i = 1; i < enc.class_probs.size(); ++i)
    if (enc.class_probs[i] > enc.class_probs[static_cast<std::size_t>(best)])
      best = static_cast<int>(i);
  return best + 1;
}

bool bitwise_equal(const envs::Observation& a, const envs::Observation& b) {
  if (a.data.size() != b.data.size()) return false;
  for (std::int64_t i = 0; i < a.data.size(); ++i)
    if (a.data[i] != b.data[i]) return false;
  return true;
}

sac::EpisodeStats stats_with(int episodes, std::map<envs::Color, int> counts) {
  sac::EpisodeStats s;
  s.episodes = episodes;
  s.color_counts = std::move(counts);
  return s;
}

}  // namespace

TEST_CASE("rule tables are validated") {
  CHECK_NOTHROW(validate_rules({{1, {2}, false}, {3, {1, 2}, false}, {4, {}, true}}));
  CHECK_NOTHROW(validate_rules({}));
  CHECK_THROWS_AS(validate_rules({{1, {2}, false}, {1, {3}, false}}), std::invalid_argument);
  CHECK_THROWS_AS(validate_rules({{0, {2}, false}}), std::invalid_argument);
  CHECK_THROWS_AS(validate_rules({{5, {2}, false}}), std::invalid_argument);
  CHECK_THROWS_AS(validate_rules({{1, {}, false}}), std::invalid_argument);
  CHECK_THROWS_AS(validate_rules({{1, {2}, true}}), std::invalid_argument);
  CHECK_THROWS_AS(validate_rules({{1, {0}, false}}), std::invalid_argument);
  CHECK_THROWS_AS(validate_rules({{1, {2, 5}, false}}), std::invalid_argument);
}

TEST_CASE("policy factories check their inputs") {
  VaeFixture& fx = trained_vae();
  sac::GridActor actor = [](const envs::Observation&) { return 0; };
  CHECK_THROWS_AS(make_grid_policy(&fx.trained.model, {}, {{1, {2}, false}}),
                  std::invalid_argument);
  CHECK_THROWS_AS(make_grid_policy(nullptr, actor, {{1, {2}, false}}), std::invalid_argument);
  // An all-pass-through policy needs no model at all.
  CHECK_NOTHROW(make_grid_policy(nullptr, actor, {}));
  TransferPolicy p = make_grid_policy(&fx.trained.model, actor, {{1, {2}, false}});
  CHECK(p.watched.size() == fx.trained.model.net.params().size());
}

TEST_CASE("matching rules re-imagine, everything else passes through") {
  VaeFixture& fx = trained_vae();
  sac::GridActor actor = [](const envs::Observation&) { return 0; };
  TransferPolicy p = make_grid_policy(&fx.trained.model, actor,
                                      {{1, {2}, false}, {3, {}, true}});

  envs::Observation red_only = obs_of_class(fx.data, 1);
  REQUIRE(head_class(fx.trained.model, red_only) == 1);
  envs::Observation imagined = imagined_observation(p, red_only);
  CHECK(head_class(fx.trained.model, imagined) == 2);
  CHECK_FALSE(bitwise_equal(imagined, red_only));

  // Class 2 has no rule; class 3 has an explicit pass-through. Both must
  // come back untouched.
  envs::Observation green_only = obs_of_class(fx.data, 2);
  REQUIRE(head_class(fx.trained.model, green_only) == 2);
  CHECK(bitwise_equal(imagined_observation(p, green_only), green_only));
  envs::Observation both = obs_of_class(fx.data, 3);
  REQUIRE(head_class(fx.trained.model, both) == 3);
  CHECK(bitwise_equal(imagined_observation(p, both), both));
}

TEST_CASE("chained rules land on the final class") {
  VaeFixture& fx = trained_vae();
  sac::GridActor actor = [](const envs::Observation&) { return 0; };
  TransferPolicy p = make_grid_policy(&fx.trained.model, actor, {{3, {1, 2}, false}});
  envs::Observation both = obs_of_class(fx.data, 3);
  REQUIRE(head_class(fx.trained.model, both) == 3);
  CHECK(head_class(fx.trained.model, imagined_observation(p, both)) == 2);
}

TEST_CASE("remapping is deterministic in mean mode") {
  VaeFixture& fx = trained_vae();
  sac::GridActor actor = [](const envs::Observation&) { return 0; };
  TransferPolicy p = make_grid_policy(&fx.trained.model, actor, {{1, {2}, false}});
  envs::Observation obs = obs_of_class(fx.data, 1);
  CHECK(bitwise_equal(imagined_observation(p, obs), imagined_observation(p, obs)));
}

TEST_CASE("observation kind must match the model") {
  VaeFixture& fx = trained_vae();
  sac::GridActor actor = [](const envs::Observation&) { return 0; };
  TransferPolicy p = make_grid_policy(&fx.trained.model, actor, {{1, {2}, false}});
  envs::Observation pixel;
  pixel.kind = envs::Observation::Kind::pixel;
  pixel.data = Tensor({40, 40, 3}, 0.5f);
  CHECK_THROWS_AS(imagined_observation(p, pixel), std::invalid_argument);
}

TEST_CASE("empty rule set acts exactly like the source policy") {
  // The toy source policy derives its action from the observation alone, so
  // equality of action sequences is equality of the policies.
  sac::GridActor source = [](const envs::Observation& o) {
    double s = 0;
    for (std::int64_t i = 0; i < o.data.size(); i += 7) s += o.data[i];
    return static_cast<int>(s * 1e4) & 3;
  };
  TransferPolicy p = make_grid_policy(nullptr, source, {});

  envs::GridPickEnv env;
  envs::Observation obs = env.reset(42);
  for (int t = 0; t < 25; ++t) {
    CHECK(act_grid(p, obs) == source(obs));
    envs::StepResult sr = env.step(t % envs::GridPickEnv::kNumActions);
    if (sr.done) break;
    obs = std::move(sr.obs);
  }

  // Whole-evaluation equality: same seeds through the transfer path and the
  // raw policy give identical counts and returns.
  envs::GridPickEnv env_a, env_b;
  TransferReport report = evaluate_transfer(p, env_a, 3, {7, 8});
  REQUIRE(report.per_seed.size() == 2);
  CHECK(report.episodes_per_seed == 3);
  CHECK(report.seeds == std::vector<std::uint64_t>{7, 8});
  REQUIRE(report.colors.size() == 2);
  CHECK(report.colors[0] == envs::Color::green);
  CHECK(report.colors[1] == envs::Color::red);
  for (std::size_t i = 0; i < report.seeds.size(); ++i) {
    sac::EpisodeStats direct = sac::evaluate_policy(source, env_b, 3, report.seeds[i]);
    CHECK(report.per_seed[i].returns == direct.returns);
    CHECK(report.per_seed[i].color_counts == direct.color_counts);
  }
}

TEST_CASE("reach policies run the same machinery") {
  sac::ReachActor source = [](const envs::Observation& o) {
    return std::array<float, 2>{o.data[0] * 0.1f, o.data[1] * 0.1f};
  };
  TransferPolicy p = make_reach_policy(nullptr, source, {});
  envs::ReacherEnv::Config cfg;
  cfg.max_steps = 10;
  cfg.task_color = envs::Color::red;
  envs::ReacherEnv env(cfg);
  TransferReport report = evaluate_transfer(p, env, 2, {3});
  CHECK(report.per_seed.size() == 1);
  REQUIRE(report.colors.size() == 1);
  CHECK(report.colors[0] == envs::Color::red);
  CHECK(report.per_seed[0].episodes == 2);
  CHECK_THROWS_AS(act_grid(p, envs::Observation{}), std::logic_error);
}

TEST_CASE("evaluation refuses to run with zero seeds and detects learning") {
  sac::GridActor source = [](const envs::Observation&) { return 0; };
  TransferPolicy p = make_grid_policy(nullptr, source, {});
  envs::GridPickEnv env;
  CHECK_THROWS_AS(evaluate_transfer(p, env, 2, {}), std::invalid_argument);

  // A policy whose actor mutates a watched parameter trips the checksum.
  static nn::Param leaky({4}, "leaky");
  leaky.value.fill(0.0f);
  sac::GridActor mutating = [](const envs::Observation&) {
    leaky.value[0] += 1.0f;
    return 0;
  };
  TransferPolicy bad = make_grid_policy(nullptr, mutating, {});
  bad.watched.push_back(&leaky);
  CHECK_THROWS_AS(evaluate_transfer(bad, env, 1, {1}), std::logic_error);
}

TEST_CASE("per-color aggregation across seeds") {
  TransferReport r;
  r.episodes_per_seed = 10;
  r.colors = {envs::Color::green, envs::Color::red};
  r.per_seed = {stats_with(10, {{envs::Color::red, 8}}),
                stats_with(10, {{envs::Color::red, 8}, {envs::Color::green, 1}}),
                stats_with(10, {{envs::Color::red, 9}})};
  CHECK(r.mean_count(envs::Color::red) == doctest::Approx(25.0 / 3.0));
  CHECK(r.std_count(envs::Color::red) == doctest::Approx(std::sqrt(2.0 / 9.0)));
  CHECK(r.mean_count(envs::Color::green) == doctest::Approx(1.0 / 3.0));
  CHECK(r.has_color(envs::Color::green));
  CHECK_FALSE(r.has_color(envs::Color::blue));
}

namespace {

TransferReport report_for(const std::string& task, const std::string& agent,
                          std::vector<envs::Color> colors, int count) {
  TransferReport r;
  r.task = task;
  r.agent = agent;
  r.episodes_per_seed = 10;
  r.seeds = {1, 2};
  r.colors = std::move(colors);
  std::map<envs::Color, int> m;
  for (envs::Color c : r.colors) m[c] = count;
  r.per_seed = {stats_with(10, m), stats_with(10, m)};
  return r;
}

}  // namespace

TEST_CASE("comparison groups by task, orders agents, and flags gaps") {
  std::vector<ComparisonEntry> entries;
  entries.push_back({report_for("Target 1", "MAGIK", {envs::Color::red}, 8), {600, 0}});
  entries.push_back({report_for("Target 1", "SAC", {envs::Color::red}, 2), {0, 0}});
  entries.push_back({report_for("Target 1", "SAC-Fine tuned", {envs::Color::red}, 9), {0, 9600}});
  entries.push_back({report_for("Red", "SAC", {envs::Color::red}, 3), {0, 0}});

  ComparisonTable table = compare_agents(std::move(entries));
  REQUIRE(table.rows.size() == 4);
  CHECK(table.rows[0].report.agent == "SAC");
  CHECK(table.rows[1].report.agent == "SAC-Fine tuned");
  CHECK(table.rows[2].report.agent == "MAGIK");
  CHECK(table.rows[3].report.task == "Red");
  REQUIRE(table.notes.size() == 2);
  CHECK(table.notes[0] == "Red: missing SAC-Fine tuned row");
  CHECK(table.notes[1] == "Red: missing MAGIK row");

  std::string text = format_comparison(table);
  CHECK(text.find("Target 1") != std::string::npos);
  CHECK(text.find("note: Red: missing MAGIK row") != std::string::npos);

  // Budget CSV: the fine-tuned row divides its interactions by the task's
  // MAGIK labels (9600 / 600 = 16).
  std::string path = temp_path("budget.csv");
  write_budget_csv(table, path);
  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "task,agent,labels,env_interactions,interactions_per_label");
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 4);
  CHECK(lines[1] == "Target 1,SAC-Fine tuned,0,9600,16.00");
  CHECK(lines[2] == "Target 1,MAGIK,600,0,");
  std::remove(path.c_str());
}

TEST_CASE("result tables mirror the green/red and single-column layouts") {
  std::vector<TransferReport> grid = {
      report_for("Target 1", "SAC", {envs::Color::red}, 2),
      report_for("Target 2", "MAGIK", {envs::Color::green, envs::Color::red}, 9)};
  std::string text = format_gridpick_table(grid);
  CHECK(text.find("Green ball picked (Out of 10)") != std::string::npos);
  CHECK(text.find("Red ball picked (Out of 10)") != std::string::npos);
  CHECK(text.find("NA") != std::string::npos);
  CHECK(text.find("9.00 +/- 0.00") != std::string::npos);

  std::string path = temp_path("table1.csv");
  write_gridpick_table_csv(grid, path);
  {
    std::ifstream in(path);
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "target,agent,green_picked_mean,green_picked_std,red_picked_mean,red_picked_std");
    REQUIRE(std::getline(in, line));
    CHECK(line == "Target 1,SAC,NA,NA,2.00,0.00");
    REQUIRE(std::getline(in, line));
    CHECK(line == "Target 2,MAGIK,9.00,0.00,9.00,0.00");
  }
  std::remove(path.c_str());

  std::vector<TransferReport> reach = {report_for("Yellow", "MAGIK", {envs::Color::yellow}, 19)};
  std::string rtext = format_reacher_table(reach);
  CHECK(rtext.find("Target reached (Out of 10)") != std::string::npos);
  CHECK(rtext.find("19.00 +/- 0.00") != std::string::npos);
  path = temp_path("table2.csv");
  write_reacher_table_csv(reach, path);
  {
    std::ifstream in(path);
    std::string line;
    REQUIRE(std::getline(in, line));
    CHECK(line == "target,agent,reached_mean,reached_std");
    REQUIRE(std::getline(in, line));
    CHECK(line == "Yellow,MAGIK,19.00,0.00");
  }
  std::remove(path.c_str());
}

TEST_CASE("per-seed report CSV carries raw counts") {
  TransferReport r = report_for("Target 3", "MAGIK", {envs::Color::green, envs::Color::red}, 4);
  std::string path = temp_path("report.csv");
  write_report_csv(r, path);
  std::ifstream in(path);
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "task,agent,seed,color,count,episodes");
  std::vector<std::string> lines;
  while (std::getline(in, line)) lines.push_back(line);
  REQUIRE(lines.size() == 4);  // 2 seeds x 2 colors
  CHECK(lines[0] == "Target 3,MAGIK,1,green,4,10");
  CHECK(lines[3] == "Target 3,MAGIK,2,red,4,10");
  std::remove(path.c_str());
}
