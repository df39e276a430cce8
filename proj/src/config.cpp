#include "magik/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

namespace magik::config {
namespace {

using nlohmann::json;

[[noreturn]] void fail(const std::string& path, const std::string& what) {
  throw ConfigError(path + ": " + what);
}

const char* type_name(const json& j) {
  if (j.is_null()) return "null";
  if (j.is_boolean()) return "a boolean";
  if (j.is_string()) return "a string";
  if (j.is_array()) return "an array";
  if (j.is_object()) return "an object";
  return "a number";
}

/// Strict walker over one JSON object: typed getters overlay values onto the
/// defaults they receive by reference, and finish() rejects any key that no
/// getter claimed. Every message carries the full key path.
class Obj {
 public:
  Obj(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j.is_object()) fail(path_, std::string("expected an object, got ") + type_name(j));
  }

  std::string key_path(const char* k) const { return path_.empty() ? k : path_ + "." + k; }

  /// Claims the key; returns nullptr when absent.
  const json* find(const char* k) {
    claimed_.insert(k);
    auto it = j_.find(k);
    return it == j_.end() ? nullptr : &*it;
  }

  const json& require(const char* k) {
    const json* v = find(k);
    if (!v) fail(path_, std::string("missing required key '") + k + "'");
    return *v;
  }

  void number(const char* k, float& v, float lo, float hi) {
    double d = static_cast<double>(v);
    number(k, d, static_cast<double>(lo), static_cast<double>(hi));
    v = static_cast<float>(d);
  }
  void number(const char* k, double& v, double lo, double hi) {
    const json* x = find(k);
    if (!x) return;
    if (!x->is_number()) fail(key_path(k), std::string("expected a number, got ") + type_name(*x));
    double d = x->get<double>();
    if (d < lo || d > hi) {
      std::ostringstream os;
      os << "value " << d << " outside [" << lo << ", " << hi << "]";
      fail(key_path(k), os.str());
    }
    v = d;
  }

  template <class Int>
  void integer(const char* k, Int& v, long long lo, long long hi) {
    const json* x = find(k);
    if (!x) return;
    if (!x->is_number_integer())
      fail(key_path(k), std::string("expected an integer, got ") + type_name(*x));
    long long d = x->get<long long>();
    if (d < lo || d > hi) {
      std::ostringstream os;
      os << "value " << d << " outside [" << lo << ", " << hi << "]";
      fail(key_path(k), os.str());
    }
    v = static_cast<Int>(d);
  }

  void seed(const char* k, std::uint64_t& v) {
    const json* x = find(k);
    if (!x) return;
    if (!x->is_number_unsigned() && !(x->is_number_integer() && x->get<long long>() >= 0))
      fail(key_path(k), "expected a non-negative integer seed");
    v = x->get<std::uint64_t>();
  }

  void boolean(const char* k, bool& v) {
    const json* x = find(k);
    if (!x) return;
    if (!x->is_boolean()) fail(key_path(k), std::string("expected a boolean, got ") + type_name(*x));
    v = x->get<bool>();
  }

  void str(const char* k, std::string& v) {
    const json* x = find(k);
    if (!x) return;
    if (!x->is_string()) fail(key_path(k), std::string("expected a string, got ") + type_name(*x));
    v = x->get<std::string>();
  }

  /// Optional float: JSON null clears it, a number sets it.
  void opt_number(const char* k, std::optional<float>& v, float lo, float hi) {
    const json* x = find(k);
    if (!x) return;
    if (x->is_null()) {
      v.reset();
      return;
    }
    float f = v.value_or(lo);
    // Re-range-check through the plain path.
    if (!x->is_number()) fail(key_path(k), std::string("expected a number or null, got ") + type_name(*x));
    double d = x->get<double>();
    if (d < lo || d > hi) {
      std::ostringstream os;
      os << "value " << d << " outside [" << lo << ", " << hi << "]";
      fail(key_path(k), os.str());
    }
    f = static_cast<float>(d);
    v = f;
  }

  /// Rejects keys no getter claimed.
  void finish() {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!claimed_.count(it.key())) fail(path_, "unknown key '" + it.key() + "'");
  }

  const json& raw() const { return j_; }
  const std::string& path() const { return path_; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> claimed_;
};

envs::Color parse_color(const json& j, const std::string& path) {
  if (!j.is_string()) fail(path, std::string("expected a color name, got ") + type_name(j));
  auto c = envs::color_from_name(j.get<std::string>());
  if (!c) fail(path, "unknown color '" + j.get<std::string>() + "' (red/green/blue/yellow)");
  return *c;
}

void parse_sac(const json& j, const std::string& path, sac::SacConfig& v) {
  Obj o(j, path);
  o.number("gamma", v.gamma, 0.0f, 1.0f);
  o.number("tau", v.tau, 1e-6f, 1.0f);
  o.number("lr", v.lr, 0.0f, 1.0f);
  o.number("alpha_lr", v.alpha_lr, 0.0f, 1.0f);
  o.number("init_alpha", v.init_alpha, 0.0f, 100.0f);
  o.opt_number("target_entropy", v.target_entropy, -100.0f, 100.0f);
  o.integer("batch_size", v.batch_size, 1, 1 << 20);
  o.integer("total_steps", v.total_steps, 0, 1LL << 40);
  o.integer("random_prefix", v.random_prefix, 0, 1LL << 40);
  o.integer("warmup_before_updates", v.warmup_before_updates, 0, 1LL << 40);
  o.integer("updates_every", v.updates_every, 1, 1 << 20);
  o.integer("replay_capacity", v.replay_capacity, 1, 1 << 30);
  o.integer("eval_every", v.eval_every, 1, 1 << 30);
  o.integer("eval_episodes", v.eval_episodes, 1, 1 << 20);
  o.opt_number("early_stop_return", v.early_stop_return, -1e9f, 1e9f);
  o.integer("collect_total", v.collect_total, 0, 1 << 30);
  o.finish();
}

void parse_vae_block(const json& j, const std::string& path, EnvPipeline& p) {
  Obj o(j, path);
  o.integer("label_budget", p.label_budget, 0, 1LL << 40);
  o.integer("z_dim", p.vae.z_dim, 1, 4096);
  imagination::VaeTrainConfig& v = p.vae;
  o.number("lr", v.lr, 0.0f, 1.0f);
  o.integer("batch", v.batch, 2, 1 << 20);
  if (const json* w = o.find("weights")) {
    Obj wo(*w, o.key_path("weights"));
    wo.number("recon", v.weights.recon, 0.0f, 1e6f);
    wo.number("label", v.weights.label, 0.0f, 1e6f);
    wo.number("kl", v.weights.kl, 0.0f, 1e6f);
    wo.number("hsic", v.weights.hsic, 0.0f, 1e6f);
    wo.finish();
  }
  o.number("grad_clip", v.grad_clip, 0.0f, 1e6f);
  o.integer("epochs", v.epochs, 1, 1 << 20);
  o.integer("steps_per_epoch", v.steps_per_epoch, 0, 1 << 30);
  o.number("temp_start", v.temp_start, 1e-3f, 100.0f);
  o.number("temp_end", v.temp_end, 1e-3f, 100.0f);
  o.integer("early_stop_patience", v.early_stop_patience, 0, 1 << 20);
  o.integer("val_rows", v.val_rows, 1, 1 << 30);
  o.finish();
}

std::vector<transfer::MappingRule> parse_rules(const json& j, const std::string& path) {
  if (!j.is_array()) fail(path, std::string("expected an array of rules, got ") + type_name(j));
  std::vector<transfer::MappingRule> rules;
  for (std::size_t i = 0; i < j.size(); ++i) {
    std::string rp = path + "[" + std::to_string(i) + "]";
    Obj o(j[i], rp);
    transfer::MappingRule r;
    o.integer("when", r.when, 1, envs::kNumClasses);
    if (!o.raw().count("when")) fail(rp, "missing required key 'when'");
    o.boolean("pass_through", r.pass_through);
    if (const json* seq = o.find("imagine_as")) {
      if (!seq->is_array()) fail(rp + ".imagine_as", "expected an array of class labels");
      for (std::size_t k = 0; k < seq->size(); ++k) {
        const json& e = (*seq)[k];
        if (!e.is_number_integer())
          fail(rp + ".imagine_as[" + std::to_string(k) + "]", "expected a class label (integer)");
        r.imagine_as.push_back(e.get<int>());
      }
    }
    o.finish();
    rules.push_back(std::move(r));
  }
  try {
    transfer::validate_rules(rules);
  } catch (const std::invalid_argument& e) {
    fail(path, e.what());
  }
  return rules;
}

void parse_finetune(const json& j, const std::string& path, FinetuneConfig& f) {
  Obj o(j, path);
  o.number("return_threshold", f.return_threshold, 0.0f, 1.0f);
  o.integer("stable_probes", f.stable_probes, 1, 1000);
  if (const json* s = o.find("sac")) parse_sac(*s, o.key_path("sac"), f.sac);
  o.finish();
}

void parse_gridpick_target(const json& j, const std::string& path, TargetConfig& t) {
  Obj o(j, path);
  o.str("name", t.name);
  if (!o.raw().count("name")) fail(path, "missing required key 'name'");
  o.boolean("has_red", t.has_red);
  o.boolean("has_green", t.has_green);
  const json& rew = o.require("rewarded");
  if (!rew.is_array() || rew.empty()) fail(o.key_path("rewarded"), "expected a nonempty color array");
  t.rewarded.clear();
  for (std::size_t i = 0; i < rew.size(); ++i)
    t.rewarded.push_back(parse_color(rew[i], o.key_path("rewarded") + "[" + std::to_string(i) + "]"));
  t.rules = parse_rules(o.require("rules"), o.key_path("rules"));
  o.finish();
  for (envs::Color c : t.rewarded) {
    bool present = (c == envs::Color::red && t.has_red) || (c == envs::Color::green && t.has_green);
    if (!present)
      fail(path, std::string("rewarded color '") + envs::color_name(c) + "' is not in the room");
  }
}

void parse_reacher_target(const json& j, const std::string& path, TargetConfig& t) {
  Obj o(j, path);
  o.str("name", t.name);
  if (!o.raw().count("name")) fail(path, "missing required key 'name'");
  t.rewarded = {parse_color(o.require("color"), o.key_path("color"))};
  t.rules = parse_rules(o.require("rules"), o.key_path("rules"));
  o.boolean("finetune", t.finetune);
  o.finish();
}

void parse_pipeline(Obj& o, ExperimentConfig& cfg, bool gridpick) {
  EnvPipeline& p = gridpick ? cfg.gridpick : cfg.reacher;
  if (const json* env = o.find("env")) {
    Obj eo(*env, o.key_path("env"));
    if (gridpick) {
      eo.integer("grid_size", cfg.gridpick_env.grid_size, 3, 64);
      eo.integer("max_steps", cfg.gridpick_env.max_steps, 1, 1 << 20);
    } else {
      eo.number("link1", cfg.reacher_env.link1, 1e-3f, 10.0f);
      eo.number("link2", cfg.reacher_env.link2, 1e-3f, 10.0f);
      eo.number("dt", cfg.reacher_env.dt, 1e-4f, 1.0f);
      eo.number("damping", cfg.reacher_env.damping, 0.0f, 100.0f);
      eo.number("reach_threshold", cfg.reacher_env.reach_threshold, 1e-4f, 1.0f);
      eo.integer("max_steps", cfg.reacher_env.max_steps, 1, 1 << 20);
    }
    eo.finish();
  }
  if (const json* s = o.find("sac")) parse_sac(*s, o.key_path("sac"), p.sac);
  o.integer("min_observations", p.min_observations, 0, 1LL << 40);
  if (const json* v = o.find("vae")) parse_vae_block(*v, o.key_path("vae"), p);
  if (const json* f = o.find("finetune")) parse_finetune(*f, o.key_path("finetune"), p.finetune);
  if (const json* t = o.find("targets")) {
    if (!t->is_array() || t->empty()) fail(o.key_path("targets"), "expected a nonempty array");
    p.targets.clear();
    std::set<std::string> names;
    for (std::size_t i = 0; i < t->size(); ++i) {
      std::string tp = o.key_path("targets") + "[" + std::to_string(i) + "]";
      TargetConfig tc;
      if (gridpick)
        parse_gridpick_target((*t)[i], tp, tc);
      else
        parse_reacher_target((*t)[i], tp, tc);
      if (!names.insert(tc.name).second) fail(tp, "duplicate target name '" + tc.name + "'");
      p.targets.push_back(std::move(tc));
    }
  }
}

json rules_json(const std::vector<transfer::MappingRule>& rules) {
  json a = json::array();
  for (const auto& r : rules) {
    json o;
    o["when"] = r.when;
    if (r.pass_through)
      o["pass_through"] = true;
    else
      o["imagine_as"] = r.imagine_as;
    a.push_back(o);
  }
  return a;
}

json sac_json(const sac::SacConfig& v) {
  json o;
  o["gamma"] = static_cast<double>(v.gamma);
  o["tau"] = static_cast<double>(v.tau);
  o["lr"] = static_cast<double>(v.lr);
  o["alpha_lr"] = static_cast<double>(v.alpha_lr);
  o["init_alpha"] = static_cast<double>(v.init_alpha);
  o["target_entropy"] =
      v.target_entropy ? json(static_cast<double>(*v.target_entropy)) : json(nullptr);
  o["batch_size"] = v.batch_size;
  o["total_steps"] = v.total_steps;
  o["random_prefix"] = v.random_prefix;
  o["warmup_before_updates"] = v.warmup_before_updates;
  o["updates_every"] = v.updates_every;
  o["replay_capacity"] = v.replay_capacity;
  o["eval_every"] = v.eval_every;
  o["eval_episodes"] = v.eval_episodes;
  o["early_stop_return"] =
      v.early_stop_return ? json(static_cast<double>(*v.early_stop_return)) : json(nullptr);
  o["collect_total"] = v.collect_total;
  return o;
}

json pipeline_json(const ExperimentConfig& cfg, const EnvPipeline& p, bool gridpick) {
  json o;
  if (gridpick) {
    o["env"] = {{"grid_size", cfg.gridpick_env.grid_size},
                {"max_steps", cfg.gridpick_env.max_steps}};
  } else {
    o["env"] = {{"link1", static_cast<double>(cfg.reacher_env.link1)},
                {"link2", static_cast<double>(cfg.reacher_env.link2)},
                {"dt", static_cast<double>(cfg.reacher_env.dt)},
                {"damping", static_cast<double>(cfg.reacher_env.damping)},
                {"reach_threshold", static_cast<double>(cfg.reacher_env.reach_threshold)},
                {"max_steps", cfg.reacher_env.max_steps}};
  }
  o["sac"] = sac_json(p.sac);
  o["min_observations"] = p.min_observations;
  json v;
  v["label_budget"] = p.label_budget;
  v["z_dim"] = p.vae.z_dim;
  v["lr"] = static_cast<double>(p.vae.lr);
  v["batch"] = p.vae.batch;
  v["weights"] = {{"recon", static_cast<double>(p.vae.weights.recon)},
                  {"label", static_cast<double>(p.vae.weights.label)},
                  {"kl", static_cast<double>(p.vae.weights.kl)},
                  {"hsic", static_cast<double>(p.vae.weights.hsic)}};
  v["grad_clip"] = static_cast<double>(p.vae.grad_clip);
  v["epochs"] = p.vae.epochs;
  v["steps_per_epoch"] = p.vae.steps_per_epoch;
  v["temp_start"] = static_cast<double>(p.vae.temp_start);
  v["temp_end"] = static_cast<double>(p.vae.temp_end);
  v["early_stop_patience"] = p.vae.early_stop_patience;
  v["val_rows"] = p.vae.val_rows;
  o["vae"] = v;
  json f;
  f["return_threshold"] = static_cast<double>(p.finetune.return_threshold);
  f["stable_probes"] = p.finetune.stable_probes;
  f["sac"] = sac_json(p.finetune.sac);
  o["finetune"] = f;
  json targets = json::array();
  for (const auto& t : p.targets) {
    json to;
    to["name"] = t.name;
    if (gridpick) {
      to["has_red"] = t.has_red;
      to["has_green"] = t.has_green;
      json rew = json::array();
      for (envs::Color c : t.rewarded) rew.push_back(envs::color_name(c));
      to["rewarded"] = rew;
    } else {
      to["color"] = envs::color_name(t.rewarded.at(0));
      to["finetune"] = t.finetune;
    }
    to["rules"] = rules_json(t.rules);
    targets.push_back(to);
  }
  o["targets"] = targets;
  return o;
}

json config_json(const ExperimentConfig& cfg) {
  json o;
  o["schema_version"] = cfg.schema_version;
  o["experiment_id"] = cfg.experiment_id;
  o["seed"] = cfg.seed;
  o["paths"] = {{"artifact_dir", cfg.artifact_dir}};
  json ev;
  ev["seeds"] = cfg.eval_seeds;
  ev["gridpick_episodes"] = cfg.gridpick_episodes;
  ev["reacher_episodes"] = cfg.reacher_episodes;
  o["eval"] = ev;
  o["gridpick"] = pipeline_json(cfg, cfg.gridpick, true);
  o["reacher"] = pipeline_json(cfg, cfg.reacher, false);
  return o;
}

}  // namespace

envs::GridPickEnv::Config ExperimentConfig::gridpick_target_env(const TargetConfig& t) const {
  envs::GridPickEnv::Config e = gridpick_env;
  e.has_red = t.has_red;
  e.has_green = t.has_green;
  e.task.rewarded = t.rewarded;
  return e;
}

envs::ReacherEnv::Config ExperimentConfig::reacher_target_env(const TargetConfig& t) const {
  envs::ReacherEnv::Config e = reacher_env;
  e.task_color = t.rewarded.at(0);
  return e;
}

ExperimentConfig parse_config(const std::string& json_text, const std::string& source) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(source + ": not valid JSON: " + e.what());
  }

  ExperimentConfig cfg = default_config();
  Obj o(j, "");
  int version = kSchemaVersion;
  o.integer("schema_version", version, 0, 1 << 20);
  if (!o.raw().count("schema_version")) fail(source, "missing required key 'schema_version'");
  if (version != kSchemaVersion)
    fail("schema_version", "file declares version " + std::to_string(version) +
                               " but this build reads version " + std::to_string(kSchemaVersion));
  cfg.schema_version = version;
  o.str("experiment_id", cfg.experiment_id);
  o.seed("seed", cfg.seed);
  if (const json* paths = o.find("paths")) {
    Obj po(*paths, "paths");
    po.str("artifact_dir", cfg.artifact_dir);
    po.finish();
  }
  if (cfg.artifact_dir.empty()) fail("paths.artifact_dir", "must not be empty");
  if (const json* ev = o.find("eval")) {
    Obj eo(*ev, "eval");
    if (const json* seeds = eo.find("seeds")) {
      if (!seeds->is_array() || seeds->empty()) fail("eval.seeds", "expected a nonempty array");
      cfg.eval_seeds.clear();
      for (std::size_t i = 0; i < seeds->size(); ++i) {
        const json& s = (*seeds)[i];
        if (!s.is_number_integer() || s.get<long long>() < 0)
          fail("eval.seeds[" + std::to_string(i) + "]", "expected a non-negative integer");
        cfg.eval_seeds.push_back(s.get<std::uint64_t>());
      }
    }
    eo.integer("gridpick_episodes", cfg.gridpick_episodes, 1, 1 << 20);
    eo.integer("reacher_episodes", cfg.reacher_episodes, 1, 1 << 20);
    eo.finish();
  }
  if (const json* g = o.find("gridpick")) {
    Obj go(*g, "gridpick");
    parse_pipeline(go, cfg, true);
    go.finish();
  }
  if (const json* r = o.find("reacher")) {
    Obj ro(*r, "reacher");
    parse_pipeline(ro, cfg, false);
    ro.finish();
  }
  o.finish();

  if (cfg.gridpick.label_budget > 0 && cfg.gridpick.min_observations > 0 &&
      static_cast<long long>(cfg.gridpick.label_budget) > cfg.gridpick.min_observations)
    fail("gridpick.vae.label_budget", "exceeds gridpick.min_observations");
  if (cfg.reacher.label_budget > 0 && cfg.reacher.min_observations > 0 &&
      static_cast<long long>(cfg.reacher.label_budget) > cfg.reacher.min_observations)
    fail("reacher.vae.label_budget", "exceeds reacher.min_observations");
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError(path + ": cannot open config file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

std::string canonical_json(const ExperimentConfig& cfg) { return config_json(cfg).dump(); }

std::string config_hash(const ExperimentConfig& cfg) {
  std::string s = canonical_json(cfg);
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return std::string(buf);
}

ExperimentConfig default_config() {
  ExperimentConfig cfg;
  cfg.eval_seeds = {1001, 2002, 3003};

  // --- GridPick ------------------------------------------------------------
  {
    EnvPipeline& p = cfg.gridpick;
    p.sac.gamma = 0.97f;
    p.sac.lr = 3e-4f;
    p.sac.batch_size = 64;
    p.sac.total_steps = 150000;
    p.sac.random_prefix = 2000;
    p.sac.warmup_before_updates = 1000;
    p.sac.updates_every = 2;
    p.sac.replay_capacity = 50000;
    p.sac.eval_every = 2500;
    p.sac.eval_episodes = 10;
    p.sac.early_stop_return = 0.95f;
    p.sac.collect_total = 62000;
    p.min_observations = 62000;
    p.label_budget = 600;
    p.vae.z_dim = 32;
    p.vae.lr = 5e-4f;
    p.vae.batch = 100;
    p.vae.epochs = 200;
    p.vae.steps_per_epoch = 20;
    p.vae.early_stop_patience = 20;
    p.vae.val_rows = 1000;
    p.finetune.return_threshold = 0.85f;
    p.finetune.stable_probes = 2;
    p.finetune.sac = p.sac;
    p.finetune.sac.total_steps = 40000;
    p.finetune.sac.random_prefix = 0;
    p.finetune.sac.warmup_before_updates = 500;
    p.finetune.sac.eval_every = 500;
    p.finetune.sac.early_stop_return.reset();  // the threshold comes in scaled
    p.finetune.sac.collect_total = 0;

    TargetConfig t1;
    t1.name = "Target 1";
    t1.has_red = true;
    t1.has_green = false;
    t1.rewarded = {envs::Color::red};
    t1.rules = {{1, {2}, false}};
    TargetConfig t2;
    t2.name = "Target 2";
    t2.rewarded = {envs::Color::green, envs::Color::red};
    t2.rules = {{1, {2}, false}};
    TargetConfig t3;
    t3.name = "Target 3";
    t3.rewarded = {envs::Color::red};
    t3.rules = {{1, {2}, false}, {2, {4}, false}, {3, {1, 2}, false}};
    p.targets = {t1, t2, t3};
  }

  // --- Reacher -------------------------------------------------------------
  {
    EnvPipeline& p = cfg.reacher;
    p.sac.gamma = 0.99f;
    p.sac.lr = 3e-4f;
    p.sac.batch_size = 256;
    p.sac.total_steps = 200000;
    p.sac.random_prefix = 20000;
    p.sac.warmup_before_updates = 1000;
    p.sac.updates_every = 1;
    p.sac.replay_capacity = 200000;
    p.sac.eval_every = 2500;
    p.sac.eval_episodes = 10;
    p.sac.early_stop_return = 0.95f;
    p.sac.collect_total = 26000;
    p.min_observations = 26000;
    p.label_budget = 250;
    p.vae.z_dim = 11;
    p.vae.lr = 5e-4f;
    p.vae.batch = 100;
    p.vae.epochs = 300;
    p.vae.steps_per_epoch = 0;  // full pass over the pool
    p.vae.early_stop_patience = 20;
    p.vae.val_rows = 1000;
    p.finetune.return_threshold = 0.9f;
    p.finetune.stable_probes = 2;
    p.finetune.sac = p.sac;
    p.finetune.sac.random_prefix = 0;
    p.finetune.sac.warmup_before_updates = 1000;
    p.finetune.sac.eval_every = 1000;
    p.finetune.sac.early_stop_return.reset();
    p.finetune.sac.collect_total = 0;

    // Every non-blue view is re-imagined as the source class; blue passes
    // through. The same table serves all four tasks.
    std::vector<transfer::MappingRule> to_blue = {{1, {3}, false}, {2, {3}, false}, {4, {3}, false}};
    TargetConfig red;
    red.name = "Red";
    red.rewarded = {envs::Color::red};
    red.rules = to_blue;
    TargetConfig green;
    green.name = "Green";
    green.rewarded = {envs::Color::green};
    green.rules = to_blue;
    TargetConfig blue;
    blue.name = "Blue";
    blue.rewarded = {envs::Color::blue};
    blue.rules = to_blue;
    blue.finetune = false;  // the source policy already is the blue agent
    TargetConfig yellow;
    yellow.name = "Yellow";
    yellow.rewarded = {envs::Color::yellow};
    yellow.rules = to_blue;
    p.targets = {red, green, blue, yellow};
  }

  return cfg;
}

std::string default_config_json() { return config_json(default_config()).dump(2) + "\n"; }

}  // namespace magik::config
