#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "magik/imagination.hpp"

using namespace magik;
using namespace magik::imagination;

namespace {

std::string temp_path(const std::string& stem) {
  return "/tmp/magik_imag_" + std::to_string(::getpid()) + "_" + stem;
}

/// Feature rows whose first four dimensions carry the class as a noisy
/// one-hot bump. Dimensions 4 and 5 sit on wildly different scales so the
/// internal standardization actually matters; everything past them is
/// unit-variance distraction. With more independent content than z can
/// hold, the decoder has to fetch the class from c — the regime the class
/// swaps rely on.
dataio::ObservationDataset synth_feature_data(int n, int dim, std::uint64_t seed) {
  auto data = dataio::ObservationDataset::feature(dim);
  data.env_id = "synthetic";
  Rng rng(seed);
  for (int i = 0; i < n; ++i) {
    envs::Observation o;
    o.kind = envs::Observation::Kind::feature;
    o.data = Tensor({dim});
    int cls = 1 + rng.uniform_int(4);
    for (int j = 0; j < 4 && j < dim; ++j) o.data[j] = 0.1f * static_cast<float>(rng.normal());
    o.data[cls - 1] += 2.0f;
    if (dim > 4) o.data[4] = 50.0f + 30.0f * static_cast<float>(rng.normal());
    if (dim > 5) o.data[5] = 0.01f * static_cast<float>(rng.normal());
    for (int j = 6; j < dim; ++j) o.data[j] = static_cast<float>(rng.normal());
    data.append(o, cls, i / 10);
  }
  return data;
}

std::vector<dataio::LabeledSample> first_labels(const dataio::ObservationDataset& data, int n) {
  std::vector<dataio::LabeledSample> out;
  for (int i = 0; i < n; ++i)
    out.push_back({static_cast<std::size_t>(i), data.oracle_class(static_cast<std::size_t>(i))});
  return out;
}

struct SynthFixture {
  dataio::ObservationDataset data;
  std::vector<dataio::LabeledSample> labels;
  TrainResult result;
};

/// Trained once and shared across cases; everything that only reads the
/// model can reuse it. 24 input dimensions against an 11-dim z keeps the
/// capacity pressure on.
SynthFixture& trained_synth() {
  static SynthFixture fx = [] {
    SynthFixture f{synth_feature_data(800, 24, 7), {}, {}};
    f.labels = first_labels(f.data, 48);
    VaeTrainConfig cfg;
    cfg.batch = 20;
    cfg.epochs = 100;
    cfg.steps_per_epoch = 10;
    cfg.val_rows = 60;
    cfg.early_stop_patience = 0;
    f.result = train_vae(f.data, f.labels, cfg, 11);
    return f;
  }();
  return fx;
}

/// First holdout row (index >= from) of the requested oracle class.
envs::Observation obs_of_class(const dataio::ObservationDataset& data, int cls, std::size_t from) {
  for (std::size_t i = from; i < data.size(); ++i)
    if (data.oracle_class(i) == cls) return data.get(i);
  throw std::runtime_error("no row of requested class");
}

int head_class(VaeModel& m, const envs::Observation& obs) {
  Encoded enc = encode(m, obs, EncodeMode::mean);
  int best = 0;
  for (std::size_t i = 1; i < enc.class_probs.size(); ++i)
    if (enc.class_probs[i] > enc.class_probs[static_cast<std::size_t>(best)])
      best = static_cast<int>(i);
  return best + 1;
}

}  // namespace

TEST_CASE("temperature anneal is exponential between its endpoints") {
  VaeTrainConfig cfg;
  CHECK(temperature_at(cfg, 0, 100) == doctest::Approx(1.0f));
  CHECK(temperature_at(cfg, 99, 100) == doctest::Approx(0.5f));
  // Halfway in log space: sqrt(1.0 * 0.5).
  CHECK(temperature_at(cfg, 50, 101) == doctest::Approx(std::sqrt(0.5f)).epsilon(1e-4));
  float prev = 2.0f;
  for (long long s = 0; s < 100; s += 7) {
    float t = temperature_at(cfg, s, 100);
    CHECK(t < prev);
    prev = t;
  }
  CHECK(temperature_at(cfg, 0, 1) == doctest::Approx(0.5f));
}

TEST_CASE("config and label validation") {
  auto data = synth_feature_data(60, 6, 3);
  auto labels = first_labels(data, 8);
  VaeTrainConfig cfg;
  cfg.epochs = 1;
  cfg.steps_per_epoch = 1;
  cfg.batch = 10;
  cfg.val_rows = 0;

  VaeTrainConfig bad = cfg;
  bad.batch = 7;
  CHECK_THROWS_AS(train_vae(data, labels, bad, 1), std::invalid_argument);
  bad = cfg;
  bad.weights.kl = -0.1;
  CHECK_THROWS_AS(train_vae(data, labels, bad, 1), std::invalid_argument);
  bad = cfg;
  bad.epochs = 0;
  CHECK_THROWS_AS(train_vae(data, labels, bad, 1), std::invalid_argument);
  bad = cfg;
  bad.temp_end = 0.0f;
  CHECK_THROWS_AS(train_vae(data, labels, bad, 1), std::invalid_argument);

  CHECK_THROWS_AS(train_vae(data, {}, cfg, 1), std::invalid_argument);
  auto out_of_range = labels;
  out_of_range.push_back({999, 1});
  CHECK_THROWS_AS(train_vae(data, out_of_range, cfg, 1), std::invalid_argument);
  auto bad_class = labels;
  bad_class.push_back({10, 5});
  CHECK_THROWS_AS(train_vae(data, bad_class, cfg, 1), std::invalid_argument);

  // Unlabelled pool smaller than half a batch.
  auto tiny = synth_feature_data(6, 6, 3);
  auto tiny_labels = first_labels(tiny, 4);
  VaeTrainConfig big = cfg;
  big.batch = 12;
  CHECK_THROWS_AS(train_vae(tiny, tiny_labels, big, 1), std::invalid_argument);
}

TEST_CASE("synthetic training learns the classes and logs a sane curve") {
  SynthFixture& fx = trained_synth();
  const auto& curve = fx.result.curve;
  REQUIRE(curve.size() == 100);
  CHECK(fx.result.model.steps == 1000);

  // Epoch-mean loss trends down over the first ten epochs and overall.
  CHECK(curve[9].train.total < curve[0].train.total);
  CHECK(curve.back().train.total < curve.front().train.total);
  for (const auto& e : curve) {
    CHECK(std::isfinite(e.train.total));
    CHECK(std::isfinite(e.val_total));
    CHECK(e.train.hsic >= -1e-9);
  }
  // Each epoch records the temperature its last step used.
  CHECK(curve.front().temperature <= 1.0f);
  CHECK(curve.front().temperature > curve.back().temperature);
  CHECK(curve.back().temperature == doctest::Approx(0.5f).epsilon(1e-3));

  Diagnostics diag = run_diagnostics(fx.result.model, fx.data, fx.labels, 99, 400);
  CHECK(diag.holdout_rows > 0);
  CHECK(diag.holdout_accuracy >= 0.95);
  CHECK(diag.cycle_consistency >= 0.90);
  CHECK(diag.z_stability < 0.5);
  // The init/trained dependence estimates are reported, not ordered: each is
  // taken at its own median bandwidth, and an untrained class head emits
  // near-uniform probabilities, which floors the init-side estimate.  The
  // penalty's actual effect is asserted in the dedicated case below.
  CHECK(std::isfinite(diag.hsic_init));
  CHECK(std::isfinite(diag.hsic_trained));
  CHECK(diag.hsic_init >= -1e-9);
  CHECK(diag.hsic_trained >= -1e-9);
}

TEST_CASE("imagining another class moves the classifier head with it") {
  SynthFixture& fx = trained_synth();
  VaeModel& m = fx.result.model;

  // The two canonical swaps: a single hop and a two-hop chain.
  envs::Observation red_only = obs_of_class(fx.data, 1, 100);
  REQUIRE(head_class(m, red_only) == 1);
  CHECK(head_class(m, imagine(m, red_only, {2})) == 2);
  envs::Observation both = obs_of_class(fx.data, 3, 100);
  REQUIRE(head_class(m, both) == 3);
  CHECK(head_class(m, imagine(m, both, {1, 2})) == 2);

  // Every ordered pair, a handful of holdout rows each.
  int hit = 0, total = 0;
  for (int a = 1; a <= 4; ++a) {
    for (int b = 1; b <= 4; ++b) {
      if (a == b) continue;
      int used = 0;
      for (std::size_t i = 100; i < fx.data.size() && used < 10; ++i) {
        if (fx.data.oracle_class(i) != a) continue;
        envs::Observation o = fx.data.get(i);
        if (head_class(m, o) != a) continue;
        hit += head_class(m, imagine(m, o, {b})) == b;
        ++used;
        ++total;
      }
    }
  }
  REQUIRE(total > 0);
  CHECK(static_cast<double>(hit) / total >= 0.9);
}

TEST_CASE("zero independence weight keeps the penalty identically zero") {
  auto data = synth_feature_data(120, 6, 5);
  auto labels = first_labels(data, 12);
  VaeTrainConfig cfg;
  cfg.batch = 10;
  cfg.epochs = 3;
  cfg.steps_per_epoch = 5;
  cfg.val_rows = 0;
  cfg.weights.hsic = 0.0;
  TrainResult r = train_vae(data, labels, cfg, 2);
  for (const auto& e : r.curve) CHECK(e.train.hsic == 0.0);
}

namespace {

/// Encodes the first n rows with the posterior mean and returns (z, probs)
/// as double matrices for the dependence estimators.
void encode_rows(VaeModel& m, const dataio::ObservationDataset& data, int n,
                 losses::MatX<double>& z, losses::MatX<double>& c) {
  const int zd = m.net.latent.z_dim, cd = m.net.latent.c_dim;
  const int fd = static_cast<int>(data.obs_elements());
  Tensor xb(std::vector<int>{n, fd});
  for (int i = 0; i < n; ++i) data.get_into(static_cast<std::size_t>(i), xb.data() + static_cast<std::size_t>(i) * fd);
  EncodedBatch enc = encode_batch(m, xb, EncodeMode::mean);
  z.resize(n, zd);
  c.resize(n, cd);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < zd; ++j) z(i, j) = enc.z[static_cast<std::size_t>(i) * zd + j];
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < cd; ++j) c(i, j) = enc.class_probs[static_cast<std::size_t>(i) * cd + j];
}

}  // namespace

TEST_CASE("independence penalty drives down the dependence it optimizes") {
  // Train with the penalty as the sole objective so its gradient path is the
  // only thing moving the encoders, then compare held-out dependence against
  // the untrained twin.  Bandwidths are frozen at the twin's medians for both
  // measurements: the gradient treats them as constants, and re-adapting them
  // per model rescales away exactly the change being tested.
  auto data = synth_feature_data(400, 6, 7);
  auto labels = first_labels(data, 24);
  VaeTrainConfig cfg;
  cfg.batch = 20;
  cfg.epochs = 10;
  cfg.steps_per_epoch = 10;
  cfg.val_rows = 0;
  cfg.early_stop_patience = 0;
  cfg.weights = {0.0, 0.0, 0.0, 50.0};
  TrainResult r = train_vae(data, labels, cfg, 5);

  VaeModel twin;
  twin.net = nets::build_vae(r.model.net.kind, r.model.net.obs_shape, r.model.net.latent, r.model.seed);
  twin.feat_mean = r.model.feat_mean;
  twin.feat_std = r.model.feat_std;

  const int n = 128;
  losses::MatX<double> z0, c0, z1, c1;
  encode_rows(twin, data, n, z0, c0);
  encode_rows(r.model, data, n, z1, c1);
  const double sz = losses::median_pairwise_distance(z0);
  const double sc = losses::median_pairwise_distance(c0);
  const double before = losses::hsic_rbf(z0, c0, sz, sc);
  const double after = losses::hsic_rbf(z1, c1, sz, sc);
  CHECK(before > 0.0);
  CHECK(after < 0.5 * before);
}

TEST_CASE("loss curve CSV mirrors the in-memory log") {
  auto data = synth_feature_data(120, 6, 5);
  auto labels = first_labels(data, 12);
  VaeTrainConfig cfg;
  cfg.batch = 10;
  cfg.epochs = 4;
  cfg.steps_per_epoch = 3;
  cfg.val_rows = 20;
  std::string path = temp_path("curve.csv");
  TrainResult r = train_vae(data, labels, cfg, 2, path);
  std::ifstream in(path);
  REQUIRE(in.good());
  std::string line;
  REQUIRE(std::getline(in, line));
  CHECK(line == "epoch,total,reconstruction,supervision,kl_z,kl_c,hsic,val_total,temperature");
  int rows = 0;
  while (std::getline(in, line))
    if (!line.empty()) ++rows;
  CHECK(rows == static_cast<int>(r.curve.size()));
  std::remove(path.c_str());
}

TEST_CASE("non-finite input aborts naming the offending batch") {
  auto data = dataio::ObservationDataset::feature(6);
  Rng rng(1);
  for (int i = 0; i < 40; ++i) {
    envs::Observation o;
    o.kind = envs::Observation::Kind::feature;
    o.data = Tensor({6});
    for (int j = 0; j < 6; ++j) o.data[j] = static_cast<float>(rng.normal());
    o.data[2] = std::numeric_limits<float>::quiet_NaN();
    data.append(o, 1 + i % 4, i);
  }
  auto labels = first_labels(data, 8);
  VaeTrainConfig cfg;
  cfg.batch = 10;
  cfg.epochs = 1;
  cfg.steps_per_epoch = 2;
  cfg.val_rows = 0;
  try {
    train_vae(data, labels, cfg, 3);
    FAIL("expected DivergenceError");
  } catch (const DivergenceError& e) {
    std::string msg = e.what();
    CHECK(msg.find("batch 0") != std::string::npos);
    CHECK(msg.find("epoch 0") != std::string::npos);
  }
}

TEST_CASE("encode modes: mean is deterministic, sample needs an rng") {
  SynthFixture& fx = trained_synth();
  VaeModel& m = fx.result.model;
  envs::Observation obs = fx.data.get(100);

  Encoded a = encode(m, obs, EncodeMode::mean);
  Encoded b = encode(m, obs, EncodeMode::mean);
  CHECK(a.z == b.z);
  double sum = 0.0;
  for (float p : a.class_probs) {
    CHECK(p >= 0.0f);
    sum += p;
  }
  CHECK(sum == doctest::Approx(1.0).epsilon(1e-5));

  Rng rng(4);
  Encoded s = encode(m, obs, EncodeMode::sample, &rng);
  CHECK(s.z != a.z);
  CHECK_THROWS_AS(encode(m, obs, EncodeMode::sample), std::invalid_argument);

  envs::Observation wrong;
  wrong.kind = envs::Observation::Kind::feature;
  wrong.data = Tensor({5});
  CHECK_THROWS_AS(encode(m, wrong, EncodeMode::mean), std::invalid_argument);
  envs::Observation pixel;
  pixel.kind = envs::Observation::Kind::pixel;
  pixel.data = Tensor({40, 40, 3});
  CHECK_THROWS_AS(encode(m, pixel, EncodeMode::mean), std::invalid_argument);
}

TEST_CASE("self-imagination reproduces the reconstruction") {
  SynthFixture& fx = trained_synth();
  VaeModel& m = fx.result.model;
  envs::Observation obs = fx.data.get(200);
  Encoded e = encode(m, obs, EncodeMode::mean);
  int cls = 1 + static_cast<int>(std::max_element(e.class_probs.begin(), e.class_probs.end()) -
                                 e.class_probs.begin());

  envs::Observation img = imagine(m, obs, {cls});
  Tensor z({1, static_cast<int>(e.z.size())});
  std::copy(e.z.begin(), e.z.end(), z.data());
  Tensor rec = decode_class(m, z, cls);
  REQUIRE(img.data.size() == rec.size());
  for (std::int64_t i = 0; i < rec.size(); ++i)
    CHECK(img.data[i] == doctest::Approx(rec[i]).epsilon(1e-4));
}

TEST_CASE("imagination rejects bad sequences") {
  SynthFixture& fx = trained_synth();
  VaeModel& m = fx.result.model;
  envs::Observation obs = fx.data.get(0);
  CHECK_THROWS_AS(imagine(m, obs, {}), std::invalid_argument);
  CHECK_THROWS_AS(imagine(m, obs, {0}), std::invalid_argument);
  CHECK_THROWS_AS(imagine(m, obs, {5}), std::invalid_argument);
  CHECK_THROWS_AS(imagine(m, obs, {2, 7}), std::invalid_argument);
}

TEST_CASE("feature traversal tables and the pixel-only grid rule") {
  SynthFixture& fx = trained_synth();
  VaeModel& m = fx.result.model;
  std::vector<envs::Observation> seeds;
  for (int i = 0; i < 3; ++i) seeds.push_back(fx.data.get(static_cast<std::size_t>(300 + i)));

  CHECK_THROWS_AS(traverse(m, seeds, seeds), std::invalid_argument);
  Tensor table = traverse_table(m, seeds, seeds);
  REQUIRE(table.ndim() == 3);
  CHECK(table.dim(0) == 3);
  CHECK(table.dim(1) == 3);
  const int d = table.dim(2);
  CHECK(d == 24);

  // Diagonal cells coincide with self-imagination of the seed.
  for (int i = 0; i < 3; ++i) {
    Encoded e = encode(m, seeds[static_cast<std::size_t>(i)], EncodeMode::mean);
    int cls = 1 + static_cast<int>(std::max_element(e.class_probs.begin(), e.class_probs.end()) -
                                   e.class_probs.begin());
    envs::Observation img = imagine(m, seeds[static_cast<std::size_t>(i)], {cls});
    for (int j = 0; j < d; ++j)
      CHECK(table[(static_cast<std::int64_t>(i) * 3 + i) * d + j] ==
            doctest::Approx(img.data[j]).epsilon(1e-4));
  }

  // With one column per class, re-encoding each cell lands on its column's
  // class in at least 90% of the grid.
  std::vector<envs::Observation> cols;
  for (int cls = 1; cls <= 4; ++cls) cols.push_back(obs_of_class(fx.data, cls, 100));
  std::vector<int> col_cls;
  for (const envs::Observation& c : cols) col_cls.push_back(head_class(m, c));
  Tensor grid = traverse_table(m, cols, cols);
  int agree = 0;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) {
      envs::Observation cell;
      cell.kind = envs::Observation::Kind::feature;
      cell.data = Tensor({d});
      for (int t = 0; t < d; ++t)
        cell.data[t] = grid[(static_cast<std::int64_t>(i) * 4 + j) * d + t];
      agree += head_class(m, cell) == col_cls[static_cast<std::size_t>(j)];
    }
  CHECK(agree >= 15);  // 90% of 16 cells, rounded up
}

TEST_CASE("pixel traversal grid has the requested geometry") {
  // An untrained pixel model exercises the plumbing without conv training.
  VaeModel m;
  m.net = nets::build_vae(envs::Observation::Kind::pixel, {40, 40, 3}, nets::LatentSpec{}, 5);
  m.seed = 5;
  Rng rng(6);
  std::vector<envs::Observation> rows, cols;
  for (int i = 0; i < 2; ++i) {
    envs::Observation o;
    o.kind = envs::Observation::Kind::pixel;
    o.data = Tensor({40, 40, 3});
    for (auto& v : o.data.span()) v = static_cast<float>(rng.uniform());
    rows.push_back(o);
    cols.push_back(o);
  }
  Tensor grid = traverse(m, rows, cols);
  REQUIRE(grid.ndim() == 5);
  CHECK(grid.dim(0) == 2);
  CHECK(grid.dim(1) == 2);
  CHECK(grid.dim(2) == 40);
  CHECK(grid.dim(3) == 40);
  CHECK(grid.dim(4) == 3);
  for (std::int64_t i = 0; i < grid.size(); i += 97) {
    CHECK(grid[i] > 0.0f);
    CHECK(grid[i] < 1.0f);
  }
  CHECK_THROWS_AS(traverse_table(m, rows, cols), std::invalid_argument);
}

TEST_CASE("checkpoint round-trip preserves the model") {
  SynthFixture& fx = trained_synth();
  VaeModel& m = fx.result.model;
  std::string path = temp_path("vae.ckpt");
  save_vae(m, path);
  VaeModel back = load_vae(path);

  CHECK(nets::param_checksum(back.net.params()) == nets::param_checksum(m.net.params()));
  CHECK(back.feat_mean == m.feat_mean);
  CHECK(back.feat_std == m.feat_std);
  CHECK(back.steps == m.steps);
  CHECK(back.seed == m.seed);
  CHECK(back.temperature == doctest::Approx(m.temperature));

  envs::Observation obs = fx.data.get(50);
  Encoded a = encode(m, obs, EncodeMode::mean);
  Encoded b = encode(back, obs, EncodeMode::mean);
  CHECK(a.z == b.z);
  CHECK(a.class_probs == b.class_probs);
  std::remove(path.c_str());

  // A container that is not a trained-model checkpoint is rejected.
  std::string other = temp_path("other.ckpt");
  dataio::Container c;
  c.put_bytes("meta", "{\"schema\":\"sac\"}");
  c.save(other);
  CHECK_THROWS_AS(load_vae(other), dataio::IoException);
  std::remove(other.c_str());
}

TEST_CASE("training is seed deterministic") {
  auto data = synth_feature_data(160, 6, 9);
  auto labels = first_labels(data, 12);
  VaeTrainConfig cfg;
  cfg.batch = 10;
  cfg.epochs = 2;
  cfg.steps_per_epoch = 5;
  cfg.val_rows = 20;
  auto run = [&](std::uint64_t seed) {
    TrainResult r = train_vae(data, labels, cfg, seed);
    return nets::param_checksum(r.model.net.params());
  };
  CHECK(run(21) == run(21));
  CHECK(run(21) != run(22));
}

TEST_CASE("diagnostics holdout excludes the training labels") {
  auto data = synth_feature_data(60, 6, 13);
  auto labels = first_labels(data, 55);
  VaeTrainConfig cfg;
  cfg.batch = 6;
  cfg.epochs = 1;
  cfg.steps_per_epoch = 2;
  cfg.val_rows = 0;
  TrainResult r = train_vae(data, labels, cfg, 1);

  Diagnostics d = run_diagnostics(r.model, data, labels, 3, 1000);
  CHECK(d.holdout_rows == 5);
  CHECK(d.holdout_accuracy >= 0.0);
  CHECK(d.holdout_accuracy <= 1.0);
  CHECK(d.cycle_consistency >= 0.0);
  CHECK(d.cycle_consistency <= 1.0);

  auto all = first_labels(data, 60);
  CHECK_THROWS_AS(run_diagnostics(r.model, data, all, 3, 10), std::invalid_argument);
  CHECK_THROWS_AS(run_diagnostics(r.model, data, labels, 3, 0), std::invalid_argument);
}
