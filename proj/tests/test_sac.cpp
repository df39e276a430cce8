#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <set>

#include "magik/sac.hpp"

using namespace magik;
using namespace magik::sac;

namespace {

void fill_uniform01(Tensor& t, Rng& rng) {
  for (auto& v : t.span()) v = static_cast<float>(rng.uniform());
}

void fill_normal(Tensor& t, Rng& rng, float scale = 1.0f) {
  for (auto& v : t.span()) v = scale * static_cast<float>(rng.normal());
}

float dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * b[i];
  return static_cast<float>(s);
}

bool normalize(Tensor& v) {
  float n = std::sqrt(dot(v, v));
  if (n < 1e-8f) return false;
  for (auto& x : v.span()) x /= n;
  return true;
}

nn::Param* find_param(const std::vector<nn::Param*>& params, const std::string& name) {
  for (nn::Param* p : params)
    if (p->name == name) return p;
  return nullptr;
}

void zero_grads(const std::vector<nn::Param*>& params) {
  for (nn::Param* p : params) p->grad.zero();
}

/// Directional finite-difference check of a scalar objective against the
/// accumulated gradient of one parameter, probing along the gradient's own
/// unit direction (keeps the perturbation inside the linear regime even for
/// large tensors).
template <class F>
void check_scalar_dir(F&& objective, nn::Param& p, float eps = 1e-2f, float tol = 5e-2f) {
  Tensor v = p.grad;
  REQUIRE(normalize(v));
  float analytic = dot(p.grad, v);
  Tensor saved = p.value;
  for (std::int64_t i = 0; i < v.size(); ++i) p.value[i] = saved[i] + eps * v[i];
  float up = objective();
  for (std::int64_t i = 0; i < v.size(); ++i) p.value[i] = saved[i] - eps * v[i];
  float dn = objective();
  p.value = saved;
  float numeric = (up - dn) / (2.0f * eps);
  float den = std::max({std::abs(analytic), std::abs(numeric), 1e-2f});
  CHECK(std::abs(analytic - numeric) / den < tol);
}

/// A single frozen transition with a terminal flag, so the regression target
/// is exactly the stored reward.
ReplayBuffer::Batch toy_pixel_batch(float reward, int action) {
  ReplayBuffer::Batch b;
  const int s = envs::GridPickEnv::kImageSize;
  Rng rng(42);
  b.obs.resize({1, s, s, 3});
  fill_uniform01(b.obs, rng);
  b.next_obs = b.obs;
  b.actions.resize({1, 1});
  b.actions[0] = static_cast<float>(action);
  b.rewards.resize({1});
  b.rewards[0] = reward;
  b.terminal.resize({1});
  b.terminal[0] = 1.0f;
  return b;
}

ReplayBuffer::Batch toy_feature_batch(float reward) {
  ReplayBuffer::Batch b;
  Rng rng(43);
  b.obs.resize({1, envs::ReacherEnv::kFeatureDim});
  fill_normal(b.obs, rng, 0.5f);
  b.next_obs = b.obs;
  b.actions.resize({1, 2});
  b.actions[0] = 0.3f;
  b.actions[1] = -0.5f;
  b.rewards.resize({1});
  b.rewards[0] = reward;
  b.terminal.resize({1});
  b.terminal[0] = 1.0f;
  return b;
}

bool params_equal(const std::vector<nn::Param*>& a, const std::vector<nn::Param*>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i]->value.size() != b[i]->value.size()) return false;
    for (std::int64_t k = 0; k < a[i]->value.size(); ++k)
      if (a[i]->value[k] != b[i]->value[k]) return false;
  }
  return true;
}

std::string temp_path(const char* stem) {
  return std::string("/tmp/magik_sac_") + stem + "_" + std::to_string(::getpid());
}

SacConfig small_cfg() {
  SacConfig cfg;
  cfg.batch_size = 8;
  cfg.replay_capacity = 128;
  return cfg;
}

}  // namespace

TEST_CASE("replay buffer evicts oldest and samples without replacement") {
  ReplayBuffer buf(envs::Observation::Kind::feature, {3}, 1, 8);
  for (int k = 0; k < 12; ++k) {
    float obs[3] = {static_cast<float>(k), 0, 0};
    float act = static_cast<float>(k % 4);
    buf.add(obs, &act, static_cast<float>(k), obs, false);
  }
  CHECK(buf.size() == 8);

  Rng rng(5);
  ReplayBuffer::Batch b;
  buf.sample(8, rng, b);
  std::set<int> rewards;
  for (int i = 0; i < 8; ++i) rewards.insert(static_cast<int>(b.rewards[i]));
  CHECK(rewards.size() == 8);  // without replacement
  // FIFO: the first four transitions were evicted.
  CHECK(*rewards.begin() == 4);
  CHECK(*rewards.rbegin() == 11);
  for (int i = 0; i < 8; ++i) CHECK(b.obs[i * 3] == b.rewards[i]);

  // Distinct indices in a partial draw as well, and seeded reproducibility.
  Rng r1(9), r2(9);
  ReplayBuffer::Batch b1, b2;
  buf.sample(3, r1, b1);
  buf.sample(3, r2, b2);
  std::set<int> got;
  for (int i = 0; i < 3; ++i) {
    got.insert(static_cast<int>(b1.rewards[i]));
    CHECK(b1.rewards[i] == b2.rewards[i]);
  }
  CHECK(got.size() == 3);

  CHECK_THROWS_AS(buf.sample(9, rng, b), std::invalid_argument);
}

TEST_CASE("pixel replay round-trips through the quantized store") {
  const int s = envs::GridPickEnv::kImageSize;
  ReplayBuffer buf(envs::Observation::Kind::pixel, {s, s, 3}, 1, 4);
  Tensor obs({s, s, 3});
  Rng rng(77);
  fill_uniform01(obs, rng);
  float act = 2.0f;
  buf.add(obs.data(), &act, 0.0f, obs.data(), true);

  ReplayBuffer::Batch b;
  Rng srng(1);
  buf.sample(1, srng, b);
  float worst = 0;
  for (std::int64_t i = 0; i < obs.size(); ++i)
    worst = std::max(worst, std::abs(b.obs[i] - obs[i]));
  CHECK(worst <= 0.5f / 255.0f + 1e-6f);
  CHECK(b.terminal[0] == 1.0f);
  CHECK(b.actions[0] == 2.0f);
}

TEST_CASE("config bounds are enforced") {
  envs::GridPickEnv::Config env_cfg;
  SacConfig cfg = small_cfg();
  cfg.gamma = 1.5f;
  CHECK_THROWS_AS(DiscreteSacTrainer(env_cfg, cfg), std::invalid_argument);
  cfg = small_cfg();
  cfg.tau = 0.0f;
  CHECK_THROWS_AS(DiscreteSacTrainer(env_cfg, cfg), std::invalid_argument);
  cfg = small_cfg();
  cfg.replay_capacity = 4;  // below batch size
  CHECK_THROWS_AS(DiscreteSacTrainer(env_cfg, cfg), std::invalid_argument);
}

TEST_CASE("closed-form policy entropy matches direct summation") {
  envs::GridPickEnv::Config env_cfg;
  SacConfig cfg = small_cfg();
  cfg.seed = 21;
  DiscreteSacTrainer trainer(env_cfg, cfg);

  const int s = envs::GridPickEnv::kImageSize;
  const int A = envs::GridPickEnv::kNumActions;
  Tensor obs({5, s, s, 3});
  Rng rng(3);
  fill_uniform01(obs, rng);

  // Direct summation -sum p log p from the same logits.
  const Tensor& lg = trainer.nets().policy->forward(obs);
  std::vector<double> direct(5, 0.0);
  for (int i = 0; i < 5; ++i) {
    double mx = lg[i * A];
    for (int a = 1; a < A; ++a) mx = std::max<double>(mx, lg[i * A + a]);
    double z = 0;
    for (int a = 0; a < A; ++a) z += std::exp(lg[i * A + a] - mx);
    for (int a = 0; a < A; ++a) {
      double p = std::exp(lg[i * A + a] - mx) / z;
      direct[static_cast<std::size_t>(i)] -= p * std::log(p);
    }
  }

  std::vector<float> closed = trainer.policy_entropy(obs);
  REQUIRE(closed.size() == 5);
  for (int i = 0; i < 5; ++i) {
    CHECK(std::abs(closed[static_cast<std::size_t>(i)] -
                   static_cast<float>(direct[static_cast<std::size_t>(i)])) < 1e-5f);
    CHECK(closed[static_cast<std::size_t>(i)] >= 0.0f);
    CHECK(closed[static_cast<std::size_t>(i)] <=
          std::log(static_cast<float>(A)) + 1e-5f);
  }
}

TEST_CASE("target networks copy exactly at full smoothing") {
  envs::GridPickEnv::Config env_cfg;
  SacConfig cfg = small_cfg();
  cfg.tau = 1.0f;
  cfg.seed = 13;
  DiscreteSacTrainer trainer(env_cfg, cfg);

  ReplayBuffer::Batch batch = toy_pixel_batch(1.0f, 2);
  trainer.update(batch);
  CHECK(params_equal(trainer.target_nets().q_params(), trainer.nets().q_params()));
}

TEST_CASE("frozen single-transition value regression converges") {
  // Terminal transition: the regression target is exactly the reward, so the
  // critic loss must fall below 1e-4 well within 2000 updates.
  SUBCASE("continuous") {
    envs::ReacherEnv::Config env_cfg;
    SacConfig cfg = small_cfg();
    cfg.lr = 5e-3f;
    cfg.seed = 31;
    ContinuousSacTrainer trainer(env_cfg, cfg);
    ReplayBuffer::Batch batch = toy_feature_batch(1.0f);
    float best = 1e9f;
    int used = 0;
    for (int k = 0; k < 2000; ++k) {
      auto stats = trainer.update(batch);
      best = std::min(best, stats.q_loss);
      used = k + 1;
      if (best < 1e-4f) break;
    }
    INFO("updates used: " << used);
    CHECK(best < 1e-4f);
  }
  SUBCASE("discrete") {
    envs::GridPickEnv::Config env_cfg;
    SacConfig cfg = small_cfg();
    cfg.lr = 5e-3f;
    cfg.seed = 32;
    DiscreteSacTrainer trainer(env_cfg, cfg);
    ReplayBuffer::Batch batch = toy_pixel_batch(1.0f, 1);
    float best = 1e9f;
    int used = 0;
    for (int k = 0; k < 2000; ++k) {
      auto stats = trainer.update(batch);
      best = std::min(best, stats.q_loss);
      used = k + 1;
      if (best < 1e-4f) break;
    }
    INFO("updates used: " << used);
    CHECK(best < 1e-4f);
  }
}

TEST_CASE("discrete policy gradients match finite differences") {
  envs::GridPickEnv::Config env_cfg;
  SacConfig cfg = small_cfg();
  cfg.seed = 51;
  DiscreteSacTrainer trainer(env_cfg, cfg);

  const int s = envs::GridPickEnv::kImageSize;
  Tensor obs({4, s, s, 3});
  Rng rng(8);
  fill_uniform01(obs, rng);

  auto params = trainer.nets().policy->params();
  zero_grads(params);
  trainer.policy_objective_and_grad(obs);

  auto objective = [&] { return trainer.policy_objective(obs); };
  for (const char* name : {"policy.head.weight", "policy.fc1.weight", "policy.conv3.weight"}) {
    nn::Param* p = find_param(params, name);
    REQUIRE(p != nullptr);
    CAPTURE(name);
    check_scalar_dir(objective, *p);
  }
}

TEST_CASE("squashed-gaussian log densities and gradients are consistent") {
  envs::ReacherEnv::Config env_cfg;
  SacConfig cfg = small_cfg();
  cfg.seed = 52;
  ContinuousSacTrainer trainer(env_cfg, cfg);

  Tensor obs({8, envs::ReacherEnv::kFeatureDim});
  Tensor noise({8, 2});
  Rng rng(9);
  fill_normal(obs, rng, 0.5f);
  fill_normal(noise, rng);

  // Log density recomputed at double precision from the definition: a
  // diagonal Gaussian over the pre-squash variable plus the tanh
  // change-of-variables correction.
  std::vector<float> log_pi;
  Tensor a = trainer.sample_action(obs, noise, log_pi);
  const Tensor& pout = trainer.nets().policy->forward(obs);
  for (int i = 0; i < 8; ++i) {
    double want = 0;
    for (int j = 0; j < 2; ++j) {
      double mu = pout[i * 4 + j];
      double ls = std::clamp<double>(pout[i * 4 + 2 + j], -20.0, 2.0);
      double u = mu + std::exp(ls) * noise[i * 2 + j];
      double aa = std::tanh(u);
      CHECK(std::abs(a[i * 2 + j] - static_cast<float>(aa)) < 1e-5f);
      double e = noise[i * 2 + j];
      want += -0.5 * (e * e + std::log(2.0 * M_PI)) - ls - std::log(1.0 - aa * aa + 1e-6);
    }
    CHECK(std::abs(log_pi[static_cast<std::size_t>(i)] - static_cast<float>(want)) < 1e-4f);
  }

  auto params = trainer.nets().policy->params();
  zero_grads(params);
  trainer.policy_objective_and_grad(obs, noise);

  auto objective = [&] { return trainer.policy_objective(obs, noise); };
  for (const char* name : {"policy.fc1.weight", "policy.fc2.weight", "policy.fc3.weight",
                           "policy.fc3.bias"}) {
    nn::Param* p = find_param(params, name);
    REQUIRE(p != nullptr);
    CAPTURE(name);
    check_scalar_dir(objective, *p);
  }
}

TEST_CASE("greedy evaluation is deterministic and bounded") {
  envs::GridPickEnv::Config env_cfg;
  SacConfig cfg = small_cfg();
  cfg.seed = 61;
  DiscreteSacTrainer trainer(env_cfg, cfg);
  envs::GridPickEnv env(env_cfg);

  EpisodeStats s1 = evaluate_policy(trainer.greedy_actor(), env, 3, 900);
  EpisodeStats s2 = evaluate_policy(trainer.greedy_actor(), env, 3, 900);
  CHECK(s1.episodes == 3);
  CHECK(s1.returns == s2.returns);
  CHECK(s1.color_counts == s2.color_counts);
  for (auto& [color, count] : s1.color_counts) {
    CHECK(count >= 0);
    CHECK(count <= s1.episodes);
  }
  CHECK(s1.returns.size() == 3);
  CHECK_THROWS_AS(evaluate_policy(trainer.greedy_actor(), env, 0, 1), std::invalid_argument);

  envs::ReacherEnv::Config renv_cfg;
  ContinuousSacTrainer rtrainer(renv_cfg, cfg);
  envs::ReacherEnv renv(renv_cfg);
  EpisodeStats r1 = evaluate_policy(rtrainer.greedy_actor(), renv, 2, 901);
  EpisodeStats r2 = evaluate_policy(rtrainer.greedy_actor(), renv, 2, 901);
  CHECK(r1.returns == r2.returns);
  CHECK(r1.color_counts == r2.color_counts);
}

TEST_CASE("training streams observations, logs curves, and tops up the dataset") {
  envs::GridPickEnv::Config env_cfg;
  SacConfig cfg;
  cfg.total_steps = 60;
  cfg.random_prefix = 60;            // keep this purely mechanical: no updates
  cfg.warmup_before_updates = 1000;  // (never reached within 60 steps)
  cfg.batch_size = 8;
  cfg.replay_capacity = 128;
  cfg.eval_every = 30;
  cfg.eval_episodes = 2;
  cfg.collect_total = 120;
  cfg.seed = 71;
  DiscreteSacTrainer trainer(env_cfg, cfg);

  dataio::ObservationDataset sink = dataio::ObservationDataset::pixel({40, 40, 3});
  std::string csv = temp_path("curve") + ".csv";
  TrainResult res = trainer.train(&sink, csv);

  CHECK(res.steps_run == 60);
  CHECK_FALSE(res.steps_to_threshold.has_value());
  CHECK(sink.size() >= 120);  // topped up past the training steps
  for (std::size_t i = 0; i < sink.size(); ++i) {
    CHECK(sink.oracle_class(i) >= 1);
    CHECK(sink.oracle_class(i) <= 4);
    if (i > 0) CHECK(sink.episode_id(i) >= sink.episode_id(i - 1));
  }

  std::FILE* f = std::fopen(csv.c_str(), "rb");
  REQUIRE(f != nullptr);
  char line[256];
  int lines = 0;
  std::string first;
  while (std::fgets(line, sizeof line, f)) {
    if (lines == 0) first = line;
    ++lines;
  }
  std::fclose(f);
  CHECK(first == "step,return_mean,return_std\n");
  CHECK(lines == 3);  // header + probes at steps 30 and 60
  std::remove(csv.c_str());
}

TEST_CASE("threshold probes stop training and fine-tuning records them") {
  envs::GridPickEnv::Config env_cfg;
  SacConfig cfg;
  cfg.total_steps = 90;
  cfg.random_prefix = 90;
  cfg.warmup_before_updates = 1000;
  cfg.batch_size = 8;
  cfg.replay_capacity = 128;
  cfg.eval_every = 30;
  cfg.eval_episodes = 2;
  cfg.early_stop_return = 0.0f;  // any probe qualifies
  cfg.seed = 72;
  DiscreteSacTrainer trainer(env_cfg, cfg);
  TrainResult res = trainer.train(nullptr, "");
  REQUIRE(res.steps_to_threshold.has_value());
  CHECK(*res.steps_to_threshold == 30);
  CHECK(res.steps_run == 30);

  // fine_tune goes through the same probe machinery after restoring weights.
  std::string ckpt = temp_path("ft") + ".bin";
  trainer.save_checkpoint(ckpt);
  SacConfig cfg2 = cfg;
  cfg2.early_stop_return.reset();
  cfg2.seed = 73;
  DiscreteSacTrainer tuned(env_cfg, cfg2);
  TrainResult ft = fine_tune(tuned, ckpt, 0.0f, "");
  REQUIRE(ft.steps_to_threshold.has_value());
  CHECK(*ft.steps_to_threshold == 30);
  CHECK(params_equal(tuned.target_nets().q_params(), tuned.nets().q_params()));
  std::remove(ckpt.c_str());
}

TEST_CASE("fixed seeds reproduce parameter checksums exactly") {
  envs::ReacherEnv::Config env_cfg;
  SacConfig cfg;
  cfg.total_steps = 300;
  cfg.random_prefix = 100;
  cfg.warmup_before_updates = 64;
  cfg.batch_size = 16;
  cfg.replay_capacity = 1000;
  cfg.eval_every = 150;
  cfg.eval_episodes = 2;
  cfg.seed = 7;

  auto run = [&](std::uint64_t seed) {
    SacConfig c = cfg;
    c.seed = seed;
    ContinuousSacTrainer trainer(env_cfg, c);
    trainer.train(nullptr, "");
    return nets::param_checksum(trainer.nets().all_params());
  };
  std::uint64_t a = run(7);
  std::uint64_t b = run(7);
  std::uint64_t c = run(8);
  CHECK(a == b);
  CHECK(a != c);
}

TEST_CASE("checkpoints restore parameters and reject the wrong variant") {
  envs::GridPickEnv::Config env_cfg;
  SacConfig cfg = small_cfg();
  cfg.seed = 81;
  DiscreteSacTrainer a(env_cfg, cfg);
  ReplayBuffer::Batch batch = toy_pixel_batch(0.5f, 0);
  a.update(batch);
  a.update(batch);

  std::string path = temp_path("ckpt") + ".bin";
  a.save_checkpoint(path);

  SacConfig cfg2 = small_cfg();
  cfg2.seed = 99;
  DiscreteSacTrainer b(env_cfg, cfg2);
  CHECK(nets::param_checksum(a.nets().all_params()) !=
        nets::param_checksum(b.nets().all_params()));
  b.load_checkpoint(path);
  CHECK(nets::param_checksum(a.nets().all_params()) ==
        nets::param_checksum(b.nets().all_params()));
  CHECK(b.alpha() == doctest::Approx(a.alpha()));
  // Targets restart from the restored online weights.
  CHECK(params_equal(b.target_nets().q_params(), b.nets().q_params()));

  envs::ReacherEnv::Config renv_cfg;
  ContinuousSacTrainer c(renv_cfg, cfg2);
  CHECK_THROWS_AS(c.load_checkpoint(path), dataio::IoException);
  std::remove(path.c_str());
}
