#include "magik/sac.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "json.hpp"
#include "magik/tensor.hpp"

namespace magik::sac {

namespace {

constexpr float kLogStdMin = -20.0f;
constexpr float kLogStdMax = 2.0f;
constexpr float kSquashEps = 1e-6f;  // keeps log(1 - tanh^2) finite at the rails
constexpr float kLog2Pi = 1.8378770664093453f;

/// One adaptive-moment step on a scalar; returns the update to subtract.
float scalar_adam_step(float g, float lr, float& m, float& v, int& t) {
  ++t;
  m = 0.9f * m + 0.1f * g;
  v = 0.999f * v + 0.001f * g * g;
  float mh = m / (1.0f - std::pow(0.9f, static_cast<float>(t)));
  float vh = v / (1.0f - std::pow(0.999f, static_cast<float>(t)));
  return lr * mh / (std::sqrt(vh) + 1e-8f);
}

void validate_config(const SacConfig& cfg) {
  if (!(cfg.gamma >= 0.0f && cfg.gamma <= 1.0f))
    throw std::invalid_argument("SacConfig: gamma outside [0,1]");
  if (!(cfg.tau > 0.0f && cfg.tau <= 1.0f))
    throw std::invalid_argument("SacConfig: tau outside (0,1]");
  if (cfg.batch_size < 1) throw std::invalid_argument("SacConfig: batch_size < 1");
  if (cfg.replay_capacity < cfg.batch_size)
    throw std::invalid_argument("SacConfig: replay capacity below batch size");
  if (cfg.init_alpha <= 0.0f) throw std::invalid_argument("SacConfig: init_alpha must be > 0");
}

/// The environments end an episode early only on the step that completes the
/// task, which always pays a reward; done with zero reward is a timeout, and
/// value bootstrapping continues through timeouts.
bool is_terminal(const envs::StepResult& sr) { return sr.done && sr.reward > 0.0f; }

nlohmann::json checkpoint_meta(const char* variant, float log_alpha, float target_entropy) {
  return {{"schema", "sac"},
          {"variant", variant},
          {"log_alpha", log_alpha},
          {"target_entropy", target_entropy}};
}

void restore_alpha(const std::string& meta_json, const char* variant, float& log_alpha) {
  auto j = nlohmann::json::parse(meta_json, nullptr, false);
  if (j.is_discarded() || !j.is_object()) return;
  if (j.contains("variant") && j["variant"].is_string() &&
      j["variant"].get<std::string>() != variant)
    throw std::invalid_argument("sac: checkpoint trained with the other action-space variant");
  if (j.contains("log_alpha") && j["log_alpha"].is_number())
    log_alpha = j["log_alpha"].get<float>();
}

/// Squashed-Gaussian head: policy outputs are [mean | raw log-std]; the raw
/// log-std is clamped, actions are tanh(mean + std * noise), and log_pi
/// includes the tanh change-of-variables correction.
void squash(const Tensor& pout, const Tensor& noise, Tensor& a, std::vector<float>& log_pi) {
  const int n = pout.dim(0);
  const int A = envs::ReacherEnv::kActionDim;
  a.resize({n, A});
  log_pi.assign(static_cast<std::size_t>(n), 0.0f);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < A; ++j) {
      float mu = pout[i * 2 * A + j];
      float raw = pout[i * 2 * A + A + j];
      float ls = std::clamp(raw, kLogStdMin, kLogStdMax);
      float sd = std::exp(ls);
      float eps = noise[i * A + j];
      float aa = std::tanh(mu + sd * eps);
      a[i * A + j] = aa;
      log_pi[static_cast<std::size_t>(i)] +=
          -0.5f * (eps * eps + kLog2Pi) - ls - std::log(1.0f - aa * aa + kSquashEps);
    }
  }
}

/// Rows of obs followed by act, giving the critic input [n, obs_dim + act].
void concat_obs_act(const Tensor& obs, const float* act, int act_width, Tensor& out) {
  const int n = obs.dim(0);
  const int d = static_cast<int>(obs.size() / n);
  out.resize({n, d + act_width});
  for (int i = 0; i < n; ++i) {
    std::memcpy(out.data() + static_cast<std::int64_t>(i) * (d + act_width),
                obs.data() + static_cast<std::int64_t>(i) * d, sizeof(float) * static_cast<std::size_t>(d));
    std::memcpy(out.data() + static_cast<std::int64_t>(i) * (d + act_width) + d,
                act + static_cast<std::int64_t>(i) * act_width,
                sizeof(float) * static_cast<std::size_t>(act_width));
  }
}

constexpr std::array<envs::Color, 4> kAllColors = {envs::Color::red, envs::Color::green,
                                                  envs::Color::blue, envs::Color::yellow};

}  // namespace

// ---------------------------------------------------------------------------
// ReplayBuffer
// ---------------------------------------------------------------------------

ReplayBuffer::ReplayBuffer(envs::Observation::Kind kind, std::vector<int> obs_shape, int act_width,
                           int capacity)
    : kind_(kind),
      obs_shape_(std::move(obs_shape)),
      obs_elems_(Tensor::count(obs_shape_)),
      act_width_(act_width),
      capacity_(capacity) {
  if (capacity_ < 1) throw std::invalid_argument("ReplayBuffer: capacity < 1");
  if (act_width_ < 1) throw std::invalid_argument("ReplayBuffer: action width < 1");
  std::size_t per = static_cast<std::size_t>(obs_elems_) * static_cast<std::size_t>(capacity_);
  if (kind_ == envs::Observation::Kind::pixel) {
    obs_u8_.resize(per);
    next_u8_.resize(per);
  } else {
    obs_f32_.resize(per);
    next_f32_.resize(per);
  }
  act_.resize(static_cast<std::size_t>(capacity_) * static_cast<std::size_t>(act_width_));
  rew_.resize(static_cast<std::size_t>(capacity_));
  term_.resize(static_cast<std::size_t>(capacity_));
}

void ReplayBuffer::add(const float* obs, const float* act, float reward, const float* next_obs,
                       bool terminal) {
  std::size_t at = head_;
  std::size_t base = at * static_cast<std::size_t>(obs_elems_);
  if (kind_ == envs::Observation::Kind::pixel) {
    for (std::int64_t k = 0; k < obs_elems_; ++k) {
      obs_u8_[base + static_cast<std::size_t>(k)] = static_cast<std::uint8_t>(
          std::lround(std::clamp(obs[k], 0.0f, 1.0f) * 255.0f));
      next_u8_[base + static_cast<std::size_t>(k)] = static_cast<std::uint8_t>(
          std::lround(std::clamp(next_obs[k], 0.0f, 1.0f) * 255.0f));
    }
  } else {
    std::memcpy(obs_f32_.data() + base, obs, sizeof(float) * static_cast<std::size_t>(obs_elems_));
    std::memcpy(next_f32_.data() + base, next_obs,
                sizeof(float) * static_cast<std::size_t>(obs_elems_));
  }
  std::memcpy(act_.data() + at * static_cast<std::size_t>(act_width_), act,
              sizeof(float) * static_cast<std::size_t>(act_width_));
  rew_[at] = reward;
  term_[at] = terminal ? 1.0f : 0.0f;
  head_ = (head_ + 1) % static_cast<std::size_t>(capacity_);
  size_ = std::min(size_ + 1, static_cast<std::size_t>(capacity_));
}

void ReplayBuffer::sample(int n, Rng& rng, Batch& out) const {
  if (n < 1 || static_cast<std::size_t>(n) > size_)
    throw std::invalid_argument("ReplayBuffer: batch larger than buffer contents");
  std::vector<int> idx(static_cast<std::size_t>(n));
  if (static_cast<std::size_t>(2 * n) >= size_) {
    // Small buffer: partial shuffle of all slots.
    std::vector<int> all(size_);
    std::iota(all.begin(), all.end(), 0);
    for (int k = 0; k < n; ++k) {
      int j = k + rng.uniform_int(static_cast<int>(size_) - k);
      std::swap(all[static_cast<std::size_t>(k)], all[static_cast<std::size_t>(j)]);
      idx[static_cast<std::size_t>(k)] = all[static_cast<std::size_t>(k)];
    }
  } else {
    // Rejection sampling; the batch is tiny next to the buffer, so repeats
    // are rare and the linear duplicate scan is cheap.
    for (int k = 0; k < n; ++k) {
      int cand;
      bool fresh;
      do {
        cand = rng.uniform_int(static_cast<int>(size_));
        fresh = true;
        for (int j = 0; j < k; ++j)
          if (idx[static_cast<std::size_t>(j)] == cand) fresh = false;
      } while (!fresh);
      idx[static_cast<std::size_t>(k)] = cand;
    }
  }

  std::vector<int> shape = obs_shape_;
  shape.insert(shape.begin(), n);
  out.obs.resize(shape);
  out.next_obs.resize(shape);
  out.actions.resize({n, act_width_});
  out.rewards.resize({n});
  out.terminal.resize({n});
  for (int k = 0; k < n; ++k) {
    std::size_t at = static_cast<std::size_t>(idx[static_cast<std::size_t>(k)]);
    std::size_t src = at * static_cast<std::size_t>(obs_elems_);
    std::int64_t dst = static_cast<std::int64_t>(k) * obs_elems_;
    if (kind_ == envs::Observation::Kind::pixel) {
      for (std::int64_t e = 0; e < obs_elems_; ++e) {
        out.obs[dst + e] = static_cast<float>(obs_u8_[src + static_cast<std::size_t>(e)]) / 255.0f;
        out.next_obs[dst + e] =
            static_cast<float>(next_u8_[src + static_cast<std::size_t>(e)]) / 255.0f;
      }
    } else {
      std::memcpy(out.obs.data() + dst, obs_f32_.data() + src,
                  sizeof(float) * static_cast<std::size_t>(obs_elems_));
      std::memcpy(out.next_obs.data() + dst, next_f32_.data() + src,
                  sizeof(float) * static_cast<std::size_t>(obs_elems_));
    }
    std::memcpy(out.actions.data() + static_cast<std::int64_t>(k) * act_width_,
                act_.data() + at * static_cast<std::size_t>(act_width_),
                sizeof(float) * static_cast<std::size_t>(act_width_));
    out.rewards[k] = rew_[at];
    out.terminal[k] = term_[at];
  }
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

float EpisodeStats::mean_return() const {
  if (returns.empty()) return 0.0f;
  double s = 0;
  for (float r : returns) s += r;
  return static_cast<float>(s / static_cast<double>(returns.size()));
}

float EpisodeStats::std_return() const {
  if (returns.size() < 2) return 0.0f;
  double m = mean_return();
  double s = 0;
  for (float r : returns) s += (r - m) * (r - m);
  return static_cast<float>(std::sqrt(s / static_cast<double>(returns.size())));
}

int EpisodeStats::count(envs::Color c) const {
  auto it = color_counts.find(c);
  return it == color_counts.end() ? 0 : it->second;
}

EpisodeStats evaluate_policy(const GridActor& actor, envs::GridPickEnv& env, int n_episodes,
                             std::uint64_t seed) {
  if (n_episodes < 1) throw std::invalid_argument("evaluate_policy: n_episodes < 1");
  Rng rng(seed);
  EpisodeStats stats;
  stats.episodes = n_episodes;
  for (int ep = 0; ep < n_episodes; ++ep) {
    envs::Observation obs = env.reset(rng.next_u64());
    float ret = 0.0f;
    while (true) {
      envs::StepResult sr = env.step(actor(obs));
      ret += sr.reward;
      obs = std::move(sr.obs);
      if (sr.done) break;
    }
    for (envs::Color c : kAllColors)
      if (env.picks(c) > 0) stats.color_counts[c] += 1;
    stats.returns.push_back(ret);
  }
  return stats;
}

EpisodeStats evaluate_policy(const ReachActor& actor, envs::ReacherEnv& env, int n_episodes,
                             std::uint64_t seed) {
  if (n_episodes < 1) throw std::invalid_argument("evaluate_policy: n_episodes < 1");
  Rng rng(seed);
  EpisodeStats stats;
  stats.episodes = n_episodes;
  for (int ep = 0; ep < n_episodes; ++ep) {
    envs::Observation obs = env.reset(rng.next_u64());
    float ret = 0.0f;
    std::array<bool, 4> reached{};
    while (true) {
      envs::StepResult sr = env.step(actor(obs));
      ret += sr.reward;
      auto tip = env.fingertip();
      for (const envs::ReacherEnv::Target& t : env.targets()) {
        float dx = t.x - tip[0], dy = t.y - tip[1];
        if (std::sqrt(dx * dx + dy * dy) < env.config().reach_threshold)
          reached[static_cast<std::size_t>(static_cast<int>(t.color))] = true;
      }
      obs = std::move(sr.obs);
      if (sr.done) break;
    }
    for (envs::Color c : kAllColors)
      if (reached[static_cast<std::size_t>(static_cast<int>(c))]) stats.color_counts[c] += 1;
    stats.returns.push_back(ret);
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Discrete trainer
// ---------------------------------------------------------------------------

DiscreteSacTrainer::DiscreteSacTrainer(const envs::GridPickEnv::Config& env_cfg,
                                       const SacConfig& cfg)
    : env_cfg_(env_cfg), cfg_(cfg), rng_(cfg.seed) {
  validate_config(cfg_);
  target_entropy_ = cfg_.target_entropy.value_or(
      0.5f * std::log(static_cast<float>(envs::GridPickEnv::kNumActions)));
  log_alpha_ = std::log(cfg_.init_alpha);
  nets::ActionSpec act{nets::ActionSpec::Kind::discrete, envs::GridPickEnv::kNumActions};
  const int s = envs::GridPickEnv::kImageSize;
  nets_ = nets::build_sac_nets(envs::Observation::Kind::pixel, act, {s, s, 3}, cfg_.seed);
  targets_ = nets::build_sac_nets(envs::Observation::Kind::pixel, act, {s, s, 3}, cfg_.seed);
  nets::copy_params(targets_.all_params(), nets_.all_params());
  nn::Adam::Config oc;
  oc.lr = cfg_.lr;
  q_opt_ = nn::Adam(oc);
  q_opt_.attach(nets_.q_params());
  pi_opt_ = nn::Adam(oc);
  pi_opt_.attach(nets_.policy->params());
}

float DiscreteSacTrainer::alpha() const { return std::exp(log_alpha_); }

GridActor DiscreteSacTrainer::greedy_actor() {
  return [this](const envs::Observation& obs) {
    const int s = envs::GridPickEnv::kImageSize;
    Tensor x({1, s, s, 3});
    std::memcpy(x.data(), obs.data.data(), sizeof(float) * static_cast<std::size_t>(x.size()));
    const Tensor& lg = nets_.policy->forward(x);
    int best = 0;
    for (int a = 1; a < envs::GridPickEnv::kNumActions; ++a)
      if (lg[a] > lg[best]) best = a;
    return best;
  };
}

GridActor DiscreteSacTrainer::stochastic_actor(Rng* rng) {
  return [this, rng](const envs::Observation& obs) {
    const int s = envs::GridPickEnv::kImageSize;
    Tensor x({1, s, s, 3});
    std::memcpy(x.data(), obs.data.data(), sizeof(float) * static_cast<std::size_t>(x.size()));
    const Tensor& lg = nets_.policy->forward(x);
    const int A = envs::GridPickEnv::kNumActions;
    float mx = lg[0];
    for (int a = 1; a < A; ++a) mx = std::max(mx, lg[a]);
    double z = 0;
    std::array<double, envs::GridPickEnv::kNumActions> p{};
    for (int a = 0; a < A; ++a) {
      p[static_cast<std::size_t>(a)] = std::exp(static_cast<double>(lg[a] - mx));
      z += p[static_cast<std::size_t>(a)];
    }
    double u = rng->uniform() * z;
    for (int a = 0; a < A; ++a) {
      u -= p[static_cast<std::size_t>(a)];
      if (u <= 0) return a;
    }
    return A - 1;
  };
}

std::vector<float> DiscreteSacTrainer::policy_entropy(const Tensor& obs) {
  const int n = obs.dim(0);
  const int A = envs::GridPickEnv::kNumActions;
  const Tensor& lg = nets_.policy->forward(obs);
  std::vector<float> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    // H = logsumexp(l) - sum_a softmax(l)_a * l_a
    float mx = lg[i * A];
    for (int a = 1; a < A; ++a) mx = std::max(mx, lg[i * A + a]);
    double z = 0;
    for (int a = 0; a < A; ++a) z += std::exp(static_cast<double>(lg[i * A + a] - mx));
    double lse = std::log(z) + mx;
    double dot = 0;
    for (int a = 0; a < A; ++a)
      dot += std::exp(static_cast<double>(lg[i * A + a]) - lse) * lg[i * A + a];
    out[static_cast<std::size_t>(i)] = static_cast<float>(lse - dot);
  }
  return out;
}

void DiscreteSacTrainer::q_update(const ReplayBuffer::Batch& b, UpdateStats& stats) {
  const int n = b.obs.dim(0);
  const int A = envs::GridPickEnv::kNumActions;
  const float al = alpha();

  // Soft state value of the successor under the current policy, using the
  // exact action expectation (no sampling).
  const Tensor& nl = nets_.policy->forward(b.next_obs);
  const Tensor& t1 = targets_.q1->forward(b.next_obs);
  const Tensor& t2 = targets_.q2->forward(b.next_obs);
  std::vector<float> y(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    float mx = nl[i * A];
    for (int a = 1; a < A; ++a) mx = std::max(mx, nl[i * A + a]);
    double z = 0;
    for (int a = 0; a < A; ++a) z += std::exp(static_cast<double>(nl[i * A + a] - mx));
    double lse = std::log(z) + mx;
    double v = 0;
    for (int a = 0; a < A; ++a) {
      double lp = nl[i * A + a] - lse;
      double p = std::exp(lp);
      double mq = std::min(t1[i * A + a], t2[i * A + a]);
      v += p * (mq - al * lp);
    }
    y[static_cast<std::size_t>(i)] =
        b.rewards[i] + cfg_.gamma * (1.0f - b.terminal[i]) * static_cast<float>(v);
  }

  q_opt_.zero_grad();
  double l1 = 0, l2 = 0;
  {
    const Tensor& q = nets_.q1->forward(b.obs);
    Tensor d({n, A}, 0.0f);
    for (int i = 0; i < n; ++i) {
      int a = static_cast<int>(b.actions[i]);
      float diff = q[i * A + a] - y[static_cast<std::size_t>(i)];
      l1 += diff * diff;
      d[i * A + a] = 2.0f * diff / static_cast<float>(n);
    }
    nets_.q1->backward(d);
  }
  {
    const Tensor& q = nets_.q2->forward(b.obs);
    Tensor d({n, A}, 0.0f);
    for (int i = 0; i < n; ++i) {
      int a = static_cast<int>(b.actions[i]);
      float diff = q[i * A + a] - y[static_cast<std::size_t>(i)];
      l2 += diff * diff;
      d[i * A + a] = 2.0f * diff / static_cast<float>(n);
    }
    nets_.q2->backward(d);
  }
  q_opt_.step();
  stats.q_loss = static_cast<float>(0.5 * (l1 + l2) / n);

  nets::polyak_update(targets_.q_params(), nets_.q_params(), cfg_.tau);
}

float DiscreteSacTrainer::policy_objective(const Tensor& obs) {
  const int n = obs.dim(0);
  const int A = envs::GridPickEnv::kNumActions;
  const float al = alpha();
  const Tensor& q1 = nets_.q1->forward(obs);
  std::vector<float> mq(static_cast<std::size_t>(n) * A);
  {
    const Tensor& q2 = nets_.q2->forward(obs);
    for (std::size_t k = 0; k < mq.size(); ++k)
      mq[k] = std::min(q1[static_cast<std::int64_t>(k)], q2[static_cast<std::int64_t>(k)]);
  }
  const Tensor& lg = nets_.policy->forward(obs);
  double loss = 0;
  for (int i = 0; i < n; ++i) {
    float mx = lg[i * A];
    for (int a = 1; a < A; ++a) mx = std::max(mx, lg[i * A + a]);
    double z = 0;
    for (int a = 0; a < A; ++a) z += std::exp(static_cast<double>(lg[i * A + a] - mx));
    double lse = std::log(z) + mx;
    for (int a = 0; a < A; ++a) {
      double lp = lg[i * A + a] - lse;
      double p = std::exp(lp);
      loss += p * (al * lp - mq[static_cast<std::size_t>(i * A + a)]);
    }
  }
  return static_cast<float>(loss / n);
}

float DiscreteSacTrainer::policy_objective_and_grad(const Tensor& obs, float* mean_logpi) {
  const int n = obs.dim(0);
  const int A = envs::GridPickEnv::kNumActions;
  const float al = alpha();

  // Critic values are constants in this objective.
  const Tensor& q1 = nets_.q1->forward(obs);
  std::vector<float> mq(static_cast<std::size_t>(n) * A);
  {
    const Tensor& q2 = nets_.q2->forward(obs);
    for (std::size_t k = 0; k < mq.size(); ++k)
      mq[k] = std::min(q1[static_cast<std::int64_t>(k)], q2[static_cast<std::int64_t>(k)]);
  }

  const Tensor& lg = nets_.policy->forward(obs);
  Tensor dlg({n, A});
  double loss = 0, sum_logpi = 0;
  std::array<double, envs::GridPickEnv::kNumActions> p{}, g{};
  for (int i = 0; i < n; ++i) {
    float mx = lg[i * A];
    for (int a = 1; a < A; ++a) mx = std::max(mx, lg[i * A + a]);
    double z = 0;
    for (int a = 0; a < A; ++a) z += std::exp(static_cast<double>(lg[i * A + a] - mx));
    double lse = std::log(z) + mx;
    double f = 0;
    for (int a = 0; a < A; ++a) {
      double lp = lg[i * A + a] - lse;
      p[static_cast<std::size_t>(a)] = std::exp(lp);
      g[static_cast<std::size_t>(a)] = al * lp - mq[static_cast<std::size_t>(i * A + a)];
      f += p[static_cast<std::size_t>(a)] * g[static_cast<std::size_t>(a)];
      sum_logpi += p[static_cast<std::size_t>(a)] * lp;
    }
    // d/dl_k of sum_a p_a (al*logp_a - Q_a): the entropy part contributes
    // nothing extra because sum_a p_a dlogp_a/dl_k vanishes.
    for (int a = 0; a < A; ++a)
      dlg[i * A + a] = static_cast<float>(
          p[static_cast<std::size_t>(a)] * (g[static_cast<std::size_t>(a)] - f) / n);
    loss += f;
  }
  nets_.policy->backward(dlg);
  if (mean_logpi) *mean_logpi = static_cast<float>(sum_logpi / n);
  return static_cast<float>(loss / n);
}

void DiscreteSacTrainer::policy_update(const ReplayBuffer::Batch& b, UpdateStats& stats) {
  pi_opt_.zero_grad();
  float mean_logpi = 0;
  stats.policy_loss = policy_objective_and_grad(b.obs, &mean_logpi);
  pi_opt_.step();
  stats.entropy = -mean_logpi;

  float g = -alpha() * (mean_logpi + target_entropy_);
  log_alpha_ -= scalar_adam_step(g, cfg_.alpha_lr, alpha_m_, alpha_v_, alpha_t_);
  log_alpha_ = std::clamp(log_alpha_, -10.0f, 2.0f);
  stats.alpha = alpha();
}

DiscreteSacTrainer::UpdateStats DiscreteSacTrainer::update(const ReplayBuffer::Batch& batch) {
  UpdateStats stats;
  q_update(batch, stats);
  policy_update(batch, stats);
  return stats;
}

void DiscreteSacTrainer::save_checkpoint(const std::string& path) const {
  nets::save_checkpoint(path, nets_.all_params(), {},
                        checkpoint_meta("discrete", log_alpha_, target_entropy_).dump());
}

void DiscreteSacTrainer::load_checkpoint(const std::string& path) {
  std::string meta = nets::load_checkpoint(path, nets_.all_params(), {});
  restore_alpha(meta, "discrete", log_alpha_);
  nets::copy_params(targets_.all_params(), nets_.all_params());
}

// ---------------------------------------------------------------------------
// Continuous trainer
// ---------------------------------------------------------------------------

ContinuousSacTrainer::ContinuousSacTrainer(const envs::ReacherEnv::Config& env_cfg,
                                           const SacConfig& cfg)
    : env_cfg_(env_cfg), cfg_(cfg), rng_(cfg.seed) {
  validate_config(cfg_);
  target_entropy_ =
      cfg_.target_entropy.value_or(-static_cast<float>(envs::ReacherEnv::kActionDim));
  log_alpha_ = std::log(cfg_.init_alpha);
  nets::ActionSpec act{nets::ActionSpec::Kind::box, envs::ReacherEnv::kActionDim};
  nets_ = nets::build_sac_nets(envs::Observation::Kind::feature, act,
                               {envs::ReacherEnv::kFeatureDim}, cfg_.seed);
  targets_ = nets::build_sac_nets(envs::Observation::Kind::feature, act,
                                  {envs::ReacherEnv::kFeatureDim}, cfg_.seed);
  nets::copy_params(targets_.all_params(), nets_.all_params());
  nn::Adam::Config oc;
  oc.lr = cfg_.lr;
  q_opt_ = nn::Adam(oc);
  q_opt_.attach(nets_.q_params());
  pi_opt_ = nn::Adam(oc);
  pi_opt_.attach(nets_.policy->params());
}

float ContinuousSacTrainer::alpha() const { return std::exp(log_alpha_); }

ReachActor ContinuousSacTrainer::greedy_actor() {
  return [this](const envs::Observation& obs) {
    Tensor x({1, envs::ReacherEnv::kFeatureDim});
    std::memcpy(x.data(), obs.data.data(), sizeof(float) * static_cast<std::size_t>(x.size()));
    const Tensor& out = nets_.policy->forward(x);
    return std::array<float, 2>{std::tanh(out[0]), std::tanh(out[1])};
  };
}

ReachActor ContinuousSacTrainer::stochastic_actor(Rng* rng) {
  return [this, rng](const envs::Observation& obs) {
    Tensor x({1, envs::ReacherEnv::kFeatureDim});
    std::memcpy(x.data(), obs.data.data(), sizeof(float) * static_cast<std::size_t>(x.size()));
    const Tensor& out = nets_.policy->forward(x);
    std::array<float, 2> a{};
    for (int j = 0; j < envs::ReacherEnv::kActionDim; ++j) {
      float sd = std::exp(std::clamp(out[2 + j], kLogStdMin, kLogStdMax));
      a[static_cast<std::size_t>(j)] =
          std::tanh(out[j] + sd * static_cast<float>(rng->normal()));
    }
    return a;
  };
}

Tensor ContinuousSacTrainer::sample_action(const Tensor& obs, const Tensor& noise,
                                           std::vector<float>& log_pi) {
  const Tensor& pout = nets_.policy->forward(obs);
  Tensor a;
  squash(pout, noise, a, log_pi);
  return a;
}

void ContinuousSacTrainer::q_update(const ReplayBuffer::Batch& b, UpdateStats& stats) {
  const int n = b.obs.dim(0);
  const int A = envs::ReacherEnv::kActionDim;
  const float al = alpha();

  Tensor noise({n, A});
  for (float& x : noise.span()) x = static_cast<float>(rng_.normal());
  std::vector<float> log_pi;
  Tensor a2 = sample_action(b.next_obs, noise, log_pi);

  Tensor xt;
  concat_obs_act(b.next_obs, a2.data(), A, xt);
  const Tensor& t1 = targets_.q1->forward(xt);
  const Tensor& t2 = targets_.q2->forward(xt);
  std::vector<float> y(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    float mq = std::min(t1[i], t2[i]);
    y[static_cast<std::size_t>(i)] =
        b.rewards[i] + cfg_.gamma * (1.0f - b.terminal[i]) *
                           (mq - al * log_pi[static_cast<std::size_t>(i)]);
  }

  q_opt_.zero_grad();
  Tensor xq;
  concat_obs_act(b.obs, b.actions.data(), A, xq);
  double l1 = 0, l2 = 0;
  {
    const Tensor& q = nets_.q1->forward(xq);
    Tensor d({n, 1});
    for (int i = 0; i < n; ++i) {
      float diff = q[i] - y[static_cast<std::size_t>(i)];
      l1 += diff * diff;
      d[i] = 2.0f * diff / static_cast<float>(n);
    }
    nets_.q1->backward(d);
  }
  {
    const Tensor& q = nets_.q2->forward(xq);
    Tensor d({n, 1});
    for (int i = 0; i < n; ++i) {
      float diff = q[i] - y[static_cast<std::size_t>(i)];
      l2 += diff * diff;
      d[i] = 2.0f * diff / static_cast<float>(n);
    }
    nets_.q2->backward(d);
  }
  q_opt_.step();
  stats.q_loss = static_cast<float>(0.5 * (l1 + l2) / n);

  nets::polyak_update(targets_.q_params(), nets_.q_params(), cfg_.tau);
}

float ContinuousSacTrainer::policy_objective(const Tensor& obs, const Tensor& noise) {
  const int n = obs.dim(0);
  const int A = envs::ReacherEnv::kActionDim;
  const float al = alpha();
  std::vector<float> log_pi;
  Tensor a = sample_action(obs, noise, log_pi);
  Tensor xq;
  concat_obs_act(obs, a.data(), A, xq);
  const Tensor& v1 = nets_.q1->forward(xq);
  const Tensor& v2 = nets_.q2->forward(xq);
  double loss = 0;
  for (int i = 0; i < n; ++i)
    loss += al * log_pi[static_cast<std::size_t>(i)] - std::min(v1[i], v2[i]);
  return static_cast<float>(loss / n);
}

float ContinuousSacTrainer::policy_objective_and_grad(const Tensor& obs, const Tensor& noise,
                                                      float* mean_logpi) {
  const int n = obs.dim(0);
  const int A = envs::ReacherEnv::kActionDim;
  const int D = static_cast<int>(obs.size() / n);
  const float al = alpha();

  const Tensor& pout = nets_.policy->forward(obs);
  Tensor a;
  std::vector<float> log_pi;
  squash(pout, noise, a, log_pi);

  Tensor xq;
  concat_obs_act(obs, a.data(), A, xq);
  const Tensor& v1 = nets_.q1->forward(xq);
  const Tensor& v2 = nets_.q2->forward(xq);
  // Per-sample winner masks route the min's gradient to the lower critic.
  Tensor d1({n, 1}), d2({n, 1});
  double loss = 0, sum_logpi = 0;
  for (int i = 0; i < n; ++i) {
    bool first = v1[i] <= v2[i];
    d1[i] = first ? 1.0f : 0.0f;
    d2[i] = first ? 0.0f : 1.0f;
    loss += al * log_pi[static_cast<std::size_t>(i)] - std::min(v1[i], v2[i]);
    sum_logpi += log_pi[static_cast<std::size_t>(i)];
  }
  Tensor dx1, dx2;
  nets_.q1->backward(d1, &dx1);  // also touches critic grads; the critic
  nets_.q2->backward(d2, &dx2);  // update zeroes them before it accumulates

  Tensor dpo({n, 2 * A});
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < A; ++j) {
      float dqda = dx1[i * (D + A) + D + j] + dx2[i * (D + A) + D + j];
      float aa = a[i * A + j];
      float raw = pout[i * 2 * A + A + j];
      float sd = std::exp(std::clamp(raw, kLogStdMin, kLogStdMax));
      // d(al*log_pi - minQ)/da, then through a = tanh(u).
      float ga = al * 2.0f * aa / (1.0f - aa * aa + kSquashEps) - dqda;
      float gu = ga * (1.0f - aa * aa);
      dpo[i * 2 * A + j] = gu / static_cast<float>(n);
      // u = mu + sd*eps and the -log sd density term; clamped log-stds stop
      // responding.
      float graw = (raw > kLogStdMin && raw < kLogStdMax)
                       ? (gu * sd * noise[i * A + j] - al) / static_cast<float>(n)
                       : 0.0f;
      dpo[i * 2 * A + A + j] = graw;
    }
  }
  nets_.policy->backward(dpo);
  if (mean_logpi) *mean_logpi = static_cast<float>(sum_logpi / n);
  return static_cast<float>(loss / n);
}

void ContinuousSacTrainer::policy_update(const ReplayBuffer::Batch& b, UpdateStats& stats) {
  const int n = b.obs.dim(0);
  Tensor noise({n, envs::ReacherEnv::kActionDim});
  for (float& x : noise.span()) x = static_cast<float>(rng_.normal());

  pi_opt_.zero_grad();
  float mean_logpi = 0;
  stats.policy_loss = policy_objective_and_grad(b.obs, noise, &mean_logpi);
  pi_opt_.step();
  stats.entropy = -mean_logpi;

  float g = -alpha() * (mean_logpi + target_entropy_);
  log_alpha_ -= scalar_adam_step(g, cfg_.alpha_lr, alpha_m_, alpha_v_, alpha_t_);
  log_alpha_ = std::clamp(log_alpha_, -10.0f, 2.0f);
  stats.alpha = alpha();
}

ContinuousSacTrainer::UpdateStats ContinuousSacTrainer::update(const ReplayBuffer::Batch& batch) {
  UpdateStats stats;
  q_update(batch, stats);
  policy_update(batch, stats);
  return stats;
}

void ContinuousSacTrainer::save_checkpoint(const std::string& path) const {
  nets::save_checkpoint(path, nets_.all_params(), {},
                        checkpoint_meta("continuous", log_alpha_, target_entropy_).dump());
}

void ContinuousSacTrainer::load_checkpoint(const std::string& path) {
  std::string meta = nets::load_checkpoint(path, nets_.all_params(), {});
  restore_alpha(meta, "continuous", log_alpha_);
  nets::copy_params(targets_.all_params(), nets_.all_params());
}

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

namespace {

/// Shared loop skeleton: environment interaction, replay, update cadence,
/// greedy probes with CSV logging and early stop, then optional dataset
/// top-up with the trained policy. The Env/Action specifics come in through
/// the lambdas.
template <typename StepFn, typename EvalFn, typename TopUpFn>
TrainResult run_loop(const SacConfig& cfg, Rng& rng, StepFn&& do_step, EvalFn&& do_eval,
                     TopUpFn&& top_up, dataio::ObservationDataset* sink,
                     const std::string& curve_csv_path) {
  std::optional<dataio::CsvWriter> csv;
  if (!curve_csv_path.empty())
    csv.emplace(curve_csv_path,
                std::vector<std::string>{"step", "return_mean", "return_std"});

  Rng eval_rng = rng.split(101);
  TrainResult res;
  int last_probe = -1;
  int streak = 0;
  bool stop = false;
  for (int step = 1; step <= cfg.total_steps && !stop; ++step) {
    do_step(step);
    res.steps_run = step;
    if (cfg.eval_every > 0 && step % cfg.eval_every == 0) {
      EpisodeStats st = do_eval(eval_rng.next_u64());
      last_probe = step;
      res.final_eval_mean = st.mean_return();
      if (csv)
        csv->row({std::to_string(step), dataio::CsvWriter::num(st.mean_return()),
                  dataio::CsvWriter::num(st.std_return())});
      if (cfg.early_stop_return) {
        streak = st.mean_return() >= *cfg.early_stop_return ? streak + 1 : 0;
        if (streak >= std::max(1, cfg.early_stop_stable_probes)) {
          if (!res.steps_to_threshold) res.steps_to_threshold = step;
          stop = true;
        }
      }
    }
  }
  if (cfg.eval_every > 0 && last_probe != res.steps_run) {
    EpisodeStats st = do_eval(eval_rng.next_u64());
    res.final_eval_mean = st.mean_return();
    if (csv)
      csv->row({std::to_string(res.steps_run), dataio::CsvWriter::num(st.mean_return()),
                dataio::CsvWriter::num(st.std_return())});
  }
  if (sink && cfg.collect_total > 0)
    while (sink->size() < static_cast<std::size_t>(cfg.collect_total)) top_up();
  return res;
}

}  // namespace

TrainResult DiscreteSacTrainer::train(dataio::ObservationDataset* sink,
                                      const std::string& curve_csv_path) {
  envs::GridPickEnv env(env_cfg_);
  envs::GridPickEnv eval_env(env_cfg_);
  const int s = envs::GridPickEnv::kImageSize;
  ReplayBuffer buf(envs::Observation::Kind::pixel, {s, s, 3}, 1, cfg_.replay_capacity);
  Rng env_rng = rng_.split(1);
  Rng act_rng = rng_.split(2);
  Rng batch_rng = rng_.split(3);

  int episode = 0;
  envs::Observation obs = env.reset(env_rng.next_u64());
  if (sink) sink->append(obs, env.true_class(), episode);
  GridActor sampler = stochastic_actor(&act_rng);
  ReplayBuffer::Batch batch;

  auto do_step = [&](int step) {
    int action = step <= cfg_.random_prefix ? act_rng.uniform_int(envs::GridPickEnv::kNumActions)
                                            : sampler(obs);
    envs::StepResult sr = env.step(action);
    float af = static_cast<float>(action);
    buf.add(obs.data.data(), &af, sr.reward, sr.obs.data.data(), is_terminal(sr));
    if (sink) sink->append(sr.obs, env.true_class(), episode);
    obs = std::move(sr.obs);
    if (sr.done) {
      ++episode;
      obs = env.reset(env_rng.next_u64());
      if (sink) sink->append(obs, env.true_class(), episode);
    }
    if (static_cast<int>(buf.size()) >= std::max(cfg_.batch_size, cfg_.warmup_before_updates) &&
        step % cfg_.updates_every == 0) {
      buf.sample(cfg_.batch_size, batch_rng, batch);
      UpdateStats us = update(batch);
      if (!std::isfinite(us.q_loss) || !std::isfinite(us.policy_loss))
        throw DivergenceError("sac: non-finite loss at env step " + std::to_string(step));
    }
  };
  auto do_eval = [&](std::uint64_t seed) {
    return evaluate_policy(greedy_actor(), eval_env, cfg_.eval_episodes, seed);
  };
  auto top_up = [&] {
    envs::StepResult sr = env.step(sampler(obs));
    if (sink) sink->append(sr.obs, env.true_class(), episode);
    obs = std::move(sr.obs);
    if (sr.done) {
      ++episode;
      obs = env.reset(env_rng.next_u64());
      if (sink) sink->append(obs, env.true_class(), episode);
    }
  };
  return run_loop(cfg_, rng_, do_step, do_eval, top_up, sink, curve_csv_path);
}

TrainResult ContinuousSacTrainer::train(dataio::ObservationDataset* sink,
                                        const std::string& curve_csv_path) {
  envs::ReacherEnv env(env_cfg_);
  envs::ReacherEnv eval_env(env_cfg_);
  ReplayBuffer buf(envs::Observation::Kind::feature, {envs::ReacherEnv::kFeatureDim},
                   envs::ReacherEnv::kActionDim, cfg_.replay_capacity);
  Rng env_rng = rng_.split(1);
  Rng act_rng = rng_.split(2);
  Rng batch_rng = rng_.split(3);

  int episode = 0;
  envs::Observation obs = env.reset(env_rng.next_u64());
  if (sink) sink->append(obs, env.true_class(), episode);
  ReachActor sampler = stochastic_actor(&act_rng);
  ReplayBuffer::Batch batch;

  auto do_step = [&](int step) {
    std::array<float, 2> action;
    if (step <= cfg_.random_prefix) {
      action = {static_cast<float>(act_rng.uniform(-1.0, 1.0)),
                static_cast<float>(act_rng.uniform(-1.0, 1.0))};
    } else {
      action = sampler(obs);
    }
    envs::StepResult sr = env.step(action);
    buf.add(obs.data.data(), action.data(), sr.reward, sr.obs.data.data(), is_terminal(sr));
    if (sink) sink->append(sr.obs, env.true_class(), episode);
    obs = std::move(sr.obs);
    if (sr.done) {
      ++episode;
      obs = env.reset(env_rng.next_u64());
      if (sink) sink->append(obs, env.true_class(), episode);
    }
    if (static_cast<int>(buf.size()) >= std::max(cfg_.batch_size, cfg_.warmup_before_updates) &&
        step % cfg_.updates_every == 0) {
      buf.sample(cfg_.batch_size, batch_rng, batch);
      UpdateStats us = update(batch);
      if (!std::isfinite(us.q_loss) || !std::isfinite(us.policy_loss))
        throw DivergenceError("sac: non-finite loss at env step " + std::to_string(step));
    }
  };
  auto do_eval = [&](std::uint64_t seed) {
    return evaluate_policy(greedy_actor(), eval_env, cfg_.eval_episodes, seed);
  };
  auto top_up = [&] {
    envs::StepResult sr = env.step(sampler(obs));
    if (sink) sink->append(sr.obs, env.true_class(), episode);
    obs = std::move(sr.obs);
    if (sr.done) {
      ++episode;
      obs = env.reset(env_rng.next_u64());
      if (sink) sink->append(obs, env.true_class(), episode);
    }
  };
  return run_loop(cfg_, rng_, do_step, do_eval, top_up, sink, curve_csv_path);
}

// ---------------------------------------------------------------------------
// High-level entry points
// ---------------------------------------------------------------------------

TrainResult train_source(DiscreteSacTrainer& trainer, dataio::ObservationDataset* sink,
                         const std::string& curve_csv_path) {
  return trainer.train(sink, curve_csv_path);
}

TrainResult train_source(ContinuousSacTrainer& trainer, dataio::ObservationDataset* sink,
                         const std::string& curve_csv_path) {
  return trainer.train(sink, curve_csv_path);
}

TrainResult fine_tune(DiscreteSacTrainer& trainer, const std::string& checkpoint_path,
                      float return_threshold, const std::string& curve_csv_path) {
  trainer.load_checkpoint(checkpoint_path);
  trainer.config().early_stop_return = return_threshold;
  return trainer.train(nullptr, curve_csv_path);
}

TrainResult fine_tune(ContinuousSacTrainer& trainer, const std::string& checkpoint_path,
                      float return_threshold, const std::string& curve_csv_path) {
  trainer.load_checkpoint(checkpoint_path);
  trainer.config().early_stop_return = return_threshold;
  return trainer.train(nullptr, curve_csv_path);
}

}  // namespace magik::sac
