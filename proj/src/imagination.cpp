#include "magik/imagination.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>

#include "json.hpp"
#include "magik/layers.hpp"

namespace magik::imagination {
namespace {

using json = nlohmann::json;
using losses::ElboBreakdown;
using MatD = losses::MatX<double>;

// Decoder outputs are clamped into (0,1) before entering logs so a saturated
// sigmoid cannot produce infinities; the matching gradient uses the clamped
// value, which bounds it instead of letting 1/p blow up.
constexpr float kPixelFloor = 1e-6f;

nets::LatentSpec latent_for(envs::Observation::Kind kind) {
  nets::LatentSpec l;
  l.z_dim = kind == envs::Observation::Kind::pixel ? 32 : 11;
  l.c_dim = 4;
  return l;
}

void validate_config(const VaeTrainConfig& cfg) {
  if (cfg.lr <= 0.0f) throw std::invalid_argument("vae: lr must be positive");
  if (cfg.batch < 2 || cfg.batch % 2 != 0)
    throw std::invalid_argument("vae: batch must be even and at least 2");
  if (cfg.epochs < 1) throw std::invalid_argument("vae: epochs must be at least 1");
  if (cfg.grad_clip <= 0.0f) throw std::invalid_argument("vae: grad clip must be positive");
  if (cfg.temp_start <= 0.0f || cfg.temp_end <= 0.0f)
    throw std::invalid_argument("vae: temperatures must be positive");
  const auto& w = cfg.weights;
  if (w.recon < 0.0 || w.label < 0.0 || w.kl < 0.0 || w.hsic < 0.0)
    throw std::invalid_argument("vae: loss weights must be non-negative");
  if (cfg.steps_per_epoch < 0)
    throw std::invalid_argument("vae: steps_per_epoch must be non-negative");
  if (cfg.val_rows < 0) throw std::invalid_argument("vae: val_rows must be non-negative");
}

void validate_labels(const dataio::ObservationDataset& data,
                     const std::vector<dataio::LabeledSample>& labels, int k) {
  if (labels.empty()) throw std::invalid_argument("vae: need at least one labelled sample");
  for (const auto& l : labels) {
    if (l.index >= data.size()) throw std::invalid_argument("vae: label index out of range");
    if (l.label < 1 || l.label > k) throw std::invalid_argument("vae: label class out of range");
  }
}

// Per-dimension moments of the whole dataset; the model consumes and emits
// raw feature values while its internals see standardized ones, which stops
// the unit-variance reconstruction term from being dominated by whichever
// physical quantity happens to have the largest scale.
void feature_moments(const dataio::ObservationDataset& data, std::vector<float>& mean,
                     std::vector<float>& sd) {
  const int d = static_cast<int>(data.obs_elements());
  const std::size_t n = data.size();
  std::vector<double> sum(static_cast<std::size_t>(d), 0.0), sq(static_cast<std::size_t>(d), 0.0);
  const std::vector<float>& store = data.feature_store();
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = store.data() + i * static_cast<std::size_t>(d);
    for (int j = 0; j < d; ++j) {
      sum[static_cast<std::size_t>(j)] += row[j];
      sq[static_cast<std::size_t>(j)] += static_cast<double>(row[j]) * row[j];
    }
  }
  mean.resize(static_cast<std::size_t>(d));
  sd.resize(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) {
    double m = sum[static_cast<std::size_t>(j)] / static_cast<double>(n);
    double var = std::max(0.0, sq[static_cast<std::size_t>(j)] / static_cast<double>(n) - m * m);
    mean[static_cast<std::size_t>(j)] = static_cast<float>(m);
    sd[static_cast<std::size_t>(j)] = std::max(static_cast<float>(std::sqrt(var)), 1e-6f);
  }
}

void standardize_rows(const VaeModel& m, Tensor& x) {
  if (m.feat_mean.empty()) return;
  const int d = static_cast<int>(m.feat_mean.size());
  const int n = x.dim(0);
  for (int r = 0; r < n; ++r) {
    float* row = x.data() + static_cast<std::int64_t>(r) * d;
    for (int j = 0; j < d; ++j)
      row[j] = (row[j] - m.feat_mean[static_cast<std::size_t>(j)]) /
               m.feat_std[static_cast<std::size_t>(j)];
  }
}

void destandardize_rows(const VaeModel& m, Tensor& x) {
  if (m.feat_mean.empty()) return;
  const int d = static_cast<int>(m.feat_mean.size());
  const int n = x.dim(0);
  for (int r = 0; r < n; ++r) {
    float* row = x.data() + static_cast<std::int64_t>(r) * d;
    for (int j = 0; j < d; ++j)
      row[j] = row[j] * m.feat_std[static_cast<std::size_t>(j)] +
               m.feat_mean[static_cast<std::size_t>(j)];
  }
}

double recon_ll_row(envs::Observation::Kind kind, const float* x, const float* xh,
                    std::int64_t d) {
  double acc = 0.0;
  if (kind == envs::Observation::Kind::pixel) {
    for (std::int64_t j = 0; j < d; ++j) {
      double p = std::clamp(static_cast<double>(xh[j]), static_cast<double>(kPixelFloor),
                            1.0 - static_cast<double>(kPixelFloor));
      acc += x[j] * std::log(p) + (1.0 - x[j]) * std::log1p(-p);
    }
  } else {
    for (std::int64_t j = 0; j < d; ++j) {
      double e = static_cast<double>(x[j]) - xh[j];
      acc -= 0.5 * e * e;
    }
  }
  return acc;
}

void recon_grad_row(envs::Observation::Kind kind, const float* x, const float* xh, float scale,
                    float* out, std::int64_t d) {
  if (kind == envs::Observation::Kind::pixel) {
    for (std::int64_t j = 0; j < d; ++j) {
      float p = std::clamp(xh[j], kPixelFloor, 1.0f - kPixelFloor);
      out[j] = scale * (x[j] / p - (1.0f - x[j]) / (1.0f - p));
    }
  } else {
    for (std::int64_t j = 0; j < d; ++j) out[j] = scale * (x[j] - xh[j]);
  }
}

void shuffle_indices(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i)
    std::swap(v[i - 1], v[static_cast<std::size_t>(rng.uniform_int(static_cast<int>(i)))]);
}

int argmax_row(const float* p, int k) {
  int best = 0;
  for (int j = 1; j < k; ++j)
    if (p[j] > p[best]) best = j;
  return best;
}

/// Reused per-step workspaces; rows [0, n_lab) carry labels, the rest are
/// unlabelled.
struct StepBuffers {
  Tensor x, z, c_dec, probs;
  Tensor d_xhat, d_z, d_c, d_eh, d_logits;
  std::vector<int> labels;
};

ElboBreakdown run_step(VaeModel& m, nn::Adam& opt, StepBuffers& b, const losses::ElboWeights& w,
                       float tau, float grad_clip, Rng& noise_rng, Rng& gumbel_rng, int n_lab,
                       int epoch, int batch_index) {
  nets::Vae& net = m.net;
  const int n = b.x.dim(0);
  const int n_un = n - n_lab;
  const int zd = net.latent.z_dim;
  const int k = net.latent.c_dim;
  const std::int64_t d = b.x.size() / n;

  // Forward: sample z by reparameterization, class code is the exact one-hot
  // for labelled rows and a Gumbel-Softmax draw for unlabelled ones.
  const Tensor& eh = net.encoder_z->forward(b.x, true);
  b.z.resize({n, zd});
  for (int r = 0; r < n; ++r) {
    const float* mu = eh.data() + static_cast<std::int64_t>(r) * 2 * zd;
    const float* lv = mu + zd;
    float* z = b.z.data() + static_cast<std::int64_t>(r) * zd;
    for (int j = 0; j < zd; ++j)
      z[j] = mu[j] + std::exp(0.5f * lv[j]) * static_cast<float>(noise_rng.normal());
  }
  const Tensor& logits = net.encoder_c->forward(b.x, true);
  b.probs.resize({n, k});
  b.c_dec.resize({n, k});
  for (int r = 0; r < n; ++r) {
    std::span<const float> lg{logits.data() + static_cast<std::int64_t>(r) * k,
                              static_cast<std::size_t>(k)};
    std::span<float> pr{b.probs.data() + static_cast<std::int64_t>(r) * k,
                        static_cast<std::size_t>(k)};
    losses::softmax<float>(lg, pr);
    float* c = b.c_dec.data() + static_cast<std::int64_t>(r) * k;
    if (r < n_lab) {
      std::fill(c, c + k, 0.0f);
      c[b.labels[static_cast<std::size_t>(r)] - 1] = 1.0f;
    } else {
      std::vector<float> draw = losses::gumbel_softmax_sample<float>(lg, tau, gumbel_rng);
      std::copy(draw.begin(), draw.end(), c);
    }
  }
  const Tensor& xhat = net.decoder->forward(b.z, b.c_dec);

  // Divergence guard up front: once an activation goes non-finite the loss
  // kernels below would trip their own precondition checks with less useful
  // messages, so name the batch here.
  if (!all_finite(eh.span()) || !all_finite(logits.span()) || !all_finite(xhat.span())) {
    std::ostringstream msg;
    msg << "vae: non-finite activations at epoch " << epoch << ", batch " << batch_index;
    throw DivergenceError(msg.str());
  }

  // Scalar terms, in doubles.
  double recon_lab = 0.0, recon_un = 0.0, klz_lab = 0.0, klz_un = 0.0;
  double klc_lab = 0.0, klc_un = 0.0, sup = 0.0;
  std::vector<double> mu_d(static_cast<std::size_t>(zd)), lv_d(static_cast<std::size_t>(zd));
  std::vector<double> pr_d(static_cast<std::size_t>(k));
  std::vector<double> prior_d = losses::uniform_prior<double>(static_cast<std::size_t>(k));
  for (int r = 0; r < n; ++r) {
    const float* xr = b.x.data() + static_cast<std::int64_t>(r) * d;
    const float* xhr = xhat.data() + static_cast<std::int64_t>(r) * d;
    double rec = recon_ll_row(net.kind, xr, xhr, d);
    const float* mu = eh.data() + static_cast<std::int64_t>(r) * 2 * zd;
    for (int j = 0; j < zd; ++j) {
      mu_d[static_cast<std::size_t>(j)] = mu[j];
      lv_d[static_cast<std::size_t>(j)] = mu[zd + j];
    }
    double klz = losses::gaussian_kl<double>(mu_d, lv_d);
    const float* pr = b.probs.data() + static_cast<std::int64_t>(r) * k;
    for (int j = 0; j < k; ++j) pr_d[static_cast<std::size_t>(j)] = pr[j];
    double klc = losses::categorical_kl<double>(pr_d, prior_d);
    if (r < n_lab) {
      recon_lab += rec;
      klz_lab += klz;
      klc_lab += klc;
      sup += losses::supervision_term<double>(pr_d, b.labels[static_cast<std::size_t>(r)]);
    } else {
      recon_un += rec;
      klz_un += klz;
      klc_un += klc;
    }
  }

  double hsic_val = 0.0;
  double sigma_z = 0.0, sigma_c = 0.0;
  MatD z_d, c_d;
  if (w.hsic > 0.0) {
    z_d.resize(n, zd);
    c_d.resize(n, k);
    for (int r = 0; r < n; ++r) {
      for (int j = 0; j < zd; ++j) z_d(r, j) = b.z[static_cast<std::int64_t>(r) * zd + j];
      for (int j = 0; j < k; ++j) c_d(r, j) = b.c_dec[static_cast<std::int64_t>(r) * k + j];
    }
    sigma_z = losses::median_pairwise_distance(z_d);
    sigma_c = losses::median_pairwise_distance(c_d);
    hsic_val = losses::hsic_rbf(z_d, c_d, sigma_z, sigma_c);
  }

  for (double t : {recon_lab, recon_un, klz_lab, klz_un, klc_lab, klc_un, sup, hsic_val}) {
    if (!std::isfinite(t)) {
      std::ostringstream msg;
      msg << "vae: non-finite loss at epoch " << epoch << ", batch " << batch_index
          << " (reconstruction " << (recon_lab + recon_un) / n << ", supervision " << sup / n_lab
          << ", kl_z " << (klz_lab + klz_un) / n << ", kl_c " << (klc_lab + klc_un) / n
          << ", hsic " << hsic_val << ")";
      throw DivergenceError(msg.str());
    }
  }

  ElboBreakdown lab = losses::elbo_labelled(recon_lab / n_lab, sup / n_lab, klz_lab / n_lab,
                                            klc_lab / n_lab, w);
  ElboBreakdown un =
      losses::elbo_unlabelled(recon_un / n_un, klz_un / n_un, klc_un / n_un, w);

  ElboBreakdown out;
  out.reconstruction = (recon_lab + recon_un) / n;
  out.supervision = sup / n_lab;
  out.kl_z = (klz_lab + klz_un) / n;
  out.kl_c = (klc_lab + klc_un) / n;
  out.hsic = hsic_val;
  out.total = lab.total + un.total + w.hsic * hsic_val;

  if (!std::isfinite(out.total) || !std::isfinite(out.reconstruction) ||
      !std::isfinite(out.supervision) || !std::isfinite(out.kl_z) || !std::isfinite(out.kl_c) ||
      !std::isfinite(out.hsic)) {
    std::ostringstream msg;
    msg << "vae: non-finite loss at epoch " << epoch << ", batch " << batch_index
        << " (reconstruction " << out.reconstruction << ", supervision " << out.supervision
        << ", kl_z " << out.kl_z << ", kl_c " << out.kl_c << ", hsic " << out.hsic << ")";
    throw DivergenceError(msg.str());
  }

  // Backward. Group means give per-row upstreams of w/n_group; the decoder
  // assigns d_z/d_c, so independence-penalty contributions are added after.
  opt.zero_grad();
  b.d_xhat.resize(xhat.shape());
  for (int r = 0; r < n; ++r) {
    float scale = -static_cast<float>(w.recon) / (r < n_lab ? n_lab : n_un);
    recon_grad_row(net.kind, b.x.data() + static_cast<std::int64_t>(r) * d,
                   xhat.data() + static_cast<std::int64_t>(r) * d, scale,
                   b.d_xhat.data() + static_cast<std::int64_t>(r) * d, d);
  }
  b.d_z.resize({n, zd});
  b.d_c.resize({n, k});
  net.decoder->backward(b.d_xhat, b.d_z, b.d_c);

  if (w.hsic > 0.0) {
    MatD dz_h = MatD::Zero(n, zd), dc_h = MatD::Zero(n, k);
    losses::hsic_rbf_grad<double>(z_d, c_d, sigma_z, sigma_c, w.hsic, dz_h, dc_h);
    for (int r = 0; r < n; ++r) {
      for (int j = 0; j < zd; ++j)
        b.d_z[static_cast<std::int64_t>(r) * zd + j] += static_cast<float>(dz_h(r, j));
      // Labelled rows decode a constant one-hot: no path back to the logits.
      if (r >= n_lab)
        for (int j = 0; j < k; ++j)
          b.d_c[static_cast<std::int64_t>(r) * k + j] += static_cast<float>(dc_h(r, j));
    }
  }

  b.d_eh.resize({n, 2 * zd});
  b.d_eh.zero();
  for (int r = 0; r < n; ++r) {
    float u = static_cast<float>(w.kl) / (r < n_lab ? n_lab : n_un);
    const float* mu = eh.data() + static_cast<std::int64_t>(r) * 2 * zd;
    const float* lv = mu + zd;
    const float* z = b.z.data() + static_cast<std::int64_t>(r) * zd;
    const float* dz = b.d_z.data() + static_cast<std::int64_t>(r) * zd;
    float* dmu = b.d_eh.data() + static_cast<std::int64_t>(r) * 2 * zd;
    float* dlv = dmu + zd;
    for (int j = 0; j < zd; ++j) {
      dmu[j] = u * mu[j] + dz[j];
      // d z / d log-var = 0.5 * std * eps = 0.5 (z - mu).
      dlv[j] = u * 0.5f * (std::exp(lv[j]) - 1.0f) + dz[j] * 0.5f * (z[j] - mu[j]);
    }
  }
  net.encoder_z->backward(b.d_eh);

  b.d_logits.resize({n, k});
  b.d_logits.zero();
  std::vector<float> prior_f = losses::uniform_prior<float>(static_cast<std::size_t>(k));
  std::vector<float> dprobs(static_cast<std::size_t>(k));
  for (int r = 0; r < n; ++r) {
    std::span<const float> pr{b.probs.data() + static_cast<std::int64_t>(r) * k,
                              static_cast<std::size_t>(k)};
    std::span<float> dl{b.d_logits.data() + static_cast<std::int64_t>(r) * k,
                        static_cast<std::size_t>(k)};
    std::fill(dprobs.begin(), dprobs.end(), 0.0f);
    if (r < n_lab) {
      losses::categorical_kl_grad<float>(pr, prior_f, static_cast<float>(w.kl) / n_lab, dprobs);
      losses::supervision_term_grad<float>(pr, b.labels[static_cast<std::size_t>(r)],
                                           -static_cast<float>(w.label) / n_lab, dprobs);
      losses::softmax_grad<float>(pr, dprobs, dl);
    } else {
      losses::categorical_kl_grad<float>(pr, prior_f, static_cast<float>(w.kl) / n_un, dprobs);
      losses::softmax_grad<float>(pr, dprobs, dl);
      std::span<const float> y{b.c_dec.data() + static_cast<std::int64_t>(r) * k,
                               static_cast<std::size_t>(k)};
      std::span<const float> dc{b.d_c.data() + static_cast<std::int64_t>(r) * k,
                                static_cast<std::size_t>(k)};
      losses::gumbel_softmax_grad<float>(y, tau, dc, dl);
    }
  }
  net.encoder_c->backward(b.d_logits);

  float norm = opt.clip_global_norm(grad_clip);
  if (!std::isfinite(norm)) {
    std::ostringstream msg;
    msg << "vae: non-finite gradients at epoch " << epoch << ", batch " << batch_index;
    throw DivergenceError(msg.str());
  }
  opt.step();
  return out;
}

/// Deterministic monitoring loss on held-out rows: posterior-mean z, soft
/// class probabilities as the decoder condition, unlabelled objective.
double validation_loss(VaeModel& m, const dataio::ObservationDataset& data,
                       const std::vector<std::size_t>& rows, const losses::ElboWeights& w) {
  nets::Vae& net = m.net;
  const int zd = net.latent.z_dim;
  const int k = net.latent.c_dim;
  const std::int64_t d = data.obs_elements();
  const int chunk = net.kind == envs::Observation::Kind::pixel ? 100 : 512;
  double recon = 0.0, klz = 0.0, klc = 0.0;
  std::vector<double> mu_d(static_cast<std::size_t>(zd)), lv_d(static_cast<std::size_t>(zd));
  std::vector<double> pr_d(static_cast<std::size_t>(k));
  std::vector<double> prior_d = losses::uniform_prior<double>(static_cast<std::size_t>(k));
  Tensor x, z, probs;
  std::vector<int> shape = data.obs_shape();
  for (std::size_t at = 0; at < rows.size(); at += static_cast<std::size_t>(chunk)) {
    const int n = static_cast<int>(std::min<std::size_t>(chunk, rows.size() - at));
    std::vector<int> xs = shape;
    xs.insert(xs.begin(), n);
    x.resize(xs);
    for (int r = 0; r < n; ++r)
      data.get_into(rows[at + static_cast<std::size_t>(r)], x.data() + r * d);
    standardize_rows(m, x);
    const Tensor& eh = net.encoder_z->forward(x, false);
    const Tensor& logits = net.encoder_c->forward(x, false);
    z.resize({n, zd});
    probs.resize({n, k});
    for (int r = 0; r < n; ++r) {
      const float* mu = eh.data() + static_cast<std::int64_t>(r) * 2 * zd;
      std::copy(mu, mu + zd, z.data() + static_cast<std::int64_t>(r) * zd);
      std::span<const float> lg{logits.data() + static_cast<std::int64_t>(r) * k,
                                static_cast<std::size_t>(k)};
      std::span<float> pr{probs.data() + static_cast<std::int64_t>(r) * k,
                          static_cast<std::size_t>(k)};
      losses::softmax<float>(lg, pr);
    }
    const Tensor& xhat = net.decoder->forward(z, probs);
    for (int r = 0; r < n; ++r) {
      recon += recon_ll_row(net.kind, x.data() + static_cast<std::int64_t>(r) * d,
                            xhat.data() + static_cast<std::int64_t>(r) * d, d);
      const float* mu = eh.data() + static_cast<std::int64_t>(r) * 2 * zd;
      for (int j = 0; j < zd; ++j) {
        mu_d[static_cast<std::size_t>(j)] = mu[j];
        lv_d[static_cast<std::size_t>(j)] = mu[zd + j];
      }
      klz += losses::gaussian_kl<double>(mu_d, lv_d);
      const float* pr = probs.data() + static_cast<std::int64_t>(r) * k;
      for (int j = 0; j < k; ++j) pr_d[static_cast<std::size_t>(j)] = pr[j];
      klc += losses::categorical_kl<double>(pr_d, prior_d);
    }
  }
  const double n = static_cast<double>(rows.size());
  return losses::elbo_unlabelled(recon / n, klz / n, klc / n, w).total;
}

Tensor obs_batch(const VaeModel& m, const std::vector<envs::Observation>& seeds) {
  if (seeds.empty()) throw std::invalid_argument("traverse: need at least one seed");
  std::vector<int> shape = m.net.obs_shape;
  shape.insert(shape.begin(), static_cast<int>(seeds.size()));
  Tensor x(shape);
  const std::int64_t d = x.size() / static_cast<std::int64_t>(seeds.size());
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    if (seeds[i].kind != m.net.kind || seeds[i].data.shape() != m.net.obs_shape)
      throw std::invalid_argument("traverse: seed observation does not match the model");
    std::copy(seeds[i].data.data(), seeds[i].data.data() + d,
              x.data() + static_cast<std::int64_t>(i) * d);
  }
  return x;
}

}  // namespace

float temperature_at(const VaeTrainConfig& cfg, long long step, long long total_steps) {
  if (total_steps <= 1) return cfg.temp_end;
  double f = std::clamp(static_cast<double>(step) / static_cast<double>(total_steps - 1), 0.0, 1.0);
  return static_cast<float>(cfg.temp_start *
                            std::pow(cfg.temp_end / cfg.temp_start, f));
}

TrainResult train_vae(const dataio::ObservationDataset& data,
                      const std::vector<dataio::LabeledSample>& labels,
                      const VaeTrainConfig& cfg, std::uint64_t seed,
                      const std::string& curve_csv) {
  validate_config(cfg);
  if (data.size() == 0) throw std::invalid_argument("vae: empty dataset");
  const envs::Observation::Kind kind = data.kind();
  nets::LatentSpec latent = latent_for(kind);
  if (cfg.z_dim > 0) latent.z_dim = cfg.z_dim;
  validate_labels(data, labels, latent.c_dim);

  VaeModel m;
  m.net = nets::build_vae(kind, data.obs_shape(), latent, seed);
  m.seed = seed;
  if (kind == envs::Observation::Kind::feature) feature_moments(data, m.feat_mean, m.feat_std);

  // Index pools. Labelled rows train through the supervised half only; the
  // unlabelled stream is their complement, minus a held-out validation slice.
  std::vector<char> is_lab(data.size(), 0);
  for (const auto& l : labels) is_lab[l.index] = 1;
  std::vector<std::size_t> unlab;
  unlab.reserve(data.size());
  for (std::size_t i = 0; i < data.size(); ++i)
    if (!is_lab[i]) unlab.push_back(i);

  Rng rng(seed);
  Rng shuffle_rng = rng.split(1);
  Rng label_rng = rng.split(2);
  Rng noise_rng = rng.split(3);
  Rng gumbel_rng = rng.split(4);

  shuffle_indices(unlab, shuffle_rng);
  const int half = cfg.batch / 2;
  std::size_t val_n = std::min<std::size_t>(static_cast<std::size_t>(cfg.val_rows),
                                            unlab.size() / 5);
  if (unlab.size() < val_n + static_cast<std::size_t>(half))
    throw std::invalid_argument("vae: unlabelled pool too small for the batch size");
  std::vector<std::size_t> val_rows(unlab.begin(), unlab.begin() + static_cast<std::ptrdiff_t>(val_n));
  std::vector<std::size_t> pool(unlab.begin() + static_cast<std::ptrdiff_t>(val_n), unlab.end());

  const long long spe = cfg.steps_per_epoch > 0
                            ? cfg.steps_per_epoch
                            : std::max<long long>(1, static_cast<long long>(pool.size()) / half);
  const long long total_steps = spe * cfg.epochs;

  nn::Adam::Config oc;
  oc.lr = cfg.lr;
  nn::Adam opt(oc);
  opt.attach(m.net.params());

  StepBuffers buf;
  std::vector<int> xshape = data.obs_shape();
  xshape.insert(xshape.begin(), cfg.batch);
  buf.x.resize(xshape);
  buf.labels.assign(static_cast<std::size_t>(cfg.batch), 0);
  const std::int64_t d = data.obs_elements();

  std::optional<dataio::CsvWriter> csv;
  if (!curve_csv.empty())
    csv.emplace(curve_csv,
                std::vector<std::string>{"epoch", "total", "reconstruction", "supervision",
                                         "kl_z", "kl_c", "hsic", "val_total", "temperature"});

  TrainResult res;
  double best_val = std::numeric_limits<double>::infinity();
  int since_best = 0;
  std::size_t cursor = 0;
  long long gstep = 0;
  float tau = cfg.temp_start;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    ElboBreakdown acc;
    for (long long b = 0; b < spe; ++b) {
      tau = temperature_at(cfg, gstep, total_steps);
      for (int i = 0; i < half; ++i) {
        const auto& l = labels[static_cast<std::size_t>(
            label_rng.uniform_int(static_cast<int>(labels.size())))];
        data.get_into(l.index, buf.x.data() + static_cast<std::int64_t>(i) * d);
        buf.labels[static_cast<std::size_t>(i)] = l.label;
      }
      for (int i = 0; i < half; ++i) {
        if (cursor >= pool.size()) {
          shuffle_indices(pool, shuffle_rng);
          cursor = 0;
        }
        data.get_into(pool[cursor++], buf.x.data() + static_cast<std::int64_t>(half + i) * d);
        buf.labels[static_cast<std::size_t>(half + i)] = 0;
      }
      standardize_rows(m, buf.x);
      ElboBreakdown step = run_step(m, opt, buf, cfg.weights, tau, cfg.grad_clip, noise_rng,
                                    gumbel_rng, half, epoch, static_cast<int>(b));
      acc.reconstruction += step.reconstruction;
      acc.supervision += step.supervision;
      acc.kl_z += step.kl_z;
      acc.kl_c += step.kl_c;
      acc.hsic += step.hsic;
      acc.total += step.total;
      ++gstep;
    }
    EpochStats es;
    es.epoch = epoch;
    es.train.reconstruction = acc.reconstruction / static_cast<double>(spe);
    es.train.supervision = acc.supervision / static_cast<double>(spe);
    es.train.kl_z = acc.kl_z / static_cast<double>(spe);
    es.train.kl_c = acc.kl_c / static_cast<double>(spe);
    es.train.hsic = acc.hsic / static_cast<double>(spe);
    es.train.total = acc.total / static_cast<double>(spe);
    es.val_total =
        val_rows.empty() ? es.train.total : validation_loss(m, data, val_rows, cfg.weights);
    es.temperature = tau;
    res.curve.push_back(es);
    if (csv)
      csv->row({std::to_string(epoch), dataio::CsvWriter::num(es.train.total),
                dataio::CsvWriter::num(es.train.reconstruction),
                dataio::CsvWriter::num(es.train.supervision),
                dataio::CsvWriter::num(es.train.kl_z), dataio::CsvWriter::num(es.train.kl_c),
                dataio::CsvWriter::num(es.train.hsic), dataio::CsvWriter::num(es.val_total),
                dataio::CsvWriter::num(es.temperature)});
    bool improved = es.val_total < best_val - 1e-6 * std::abs(best_val) - 1e-9;
    if (improved) {
      best_val = es.val_total;
      since_best = 0;
    } else if (cfg.early_stop_patience > 0 && ++since_best >= cfg.early_stop_patience) {
      break;
    }
  }
  m.steps = gstep;
  m.temperature = tau;
  res.model = std::move(m);
  return res;
}

EncodedBatch encode_batch(VaeModel& m, const Tensor& x, EncodeMode mode, Rng* rng) {
  const std::vector<int>& os = m.net.obs_shape;
  bool shape_ok = x.ndim() == static_cast<int>(os.size()) + 1;
  for (std::size_t i = 0; shape_ok && i < os.size(); ++i)
    shape_ok = x.dim(static_cast<int>(i) + 1) == os[i];
  if (!shape_ok) throw std::invalid_argument("encode: observation shape mismatch");
  if (mode == EncodeMode::sample && rng == nullptr)
    throw std::invalid_argument("encode: sample mode needs an rng");

  Tensor xs = x;
  standardize_rows(m, xs);
  const int n = xs.dim(0);
  const int zd = m.net.latent.z_dim;
  const int k = m.net.latent.c_dim;
  const Tensor& eh = m.net.encoder_z->forward(xs, false);
  const Tensor& logits = m.net.encoder_c->forward(xs, false);
  EncodedBatch out;
  out.z.resize({n, zd});
  out.class_probs.resize({n, k});
  for (int r = 0; r < n; ++r) {
    const float* mu = eh.data() + static_cast<std::int64_t>(r) * 2 * zd;
    const float* lv = mu + zd;
    float* z = out.z.data() + static_cast<std::int64_t>(r) * zd;
    for (int j = 0; j < zd; ++j) {
      z[j] = mu[j];
      if (mode == EncodeMode::sample)
        z[j] += std::exp(0.5f * lv[j]) * static_cast<float>(rng->normal());
    }
    std::span<const float> lg{logits.data() + static_cast<std::int64_t>(r) * k,
                              static_cast<std::size_t>(k)};
    std::span<float> pr{out.class_probs.data() + static_cast<std::int64_t>(r) * k,
                        static_cast<std::size_t>(k)};
    losses::softmax<float>(lg, pr);
  }
  return out;
}

Encoded encode(VaeModel& m, const envs::Observation& obs, EncodeMode mode, Rng* rng) {
  if (obs.kind != m.net.kind || obs.data.shape() != m.net.obs_shape)
    throw std::invalid_argument("encode: observation does not match the model");
  std::vector<int> shape = m.net.obs_shape;
  shape.insert(shape.begin(), 1);
  Tensor x = obs.data.reshaped(shape);
  EncodedBatch b = encode_batch(m, x, mode, rng);
  Encoded out;
  out.z.assign(b.z.data(), b.z.data() + b.z.size());
  out.class_probs.assign(b.class_probs.data(), b.class_probs.data() + b.class_probs.size());
  return out;
}

Tensor decode_class(VaeModel& m, const Tensor& z, int cls) {
  const int k = m.net.latent.c_dim;
  if (cls < 1 || cls > k) throw std::invalid_argument("imagine: class out of range");
  if (z.ndim() != 2 || z.dim(1) != m.net.latent.z_dim)
    throw std::invalid_argument("imagine: latent shape mismatch");
  const int n = z.dim(0);
  Tensor c({n, k});
  for (int r = 0; r < n; ++r) c[static_cast<std::int64_t>(r) * k + cls - 1] = 1.0f;
  Tensor out = m.net.decoder->forward(z, c);
  destandardize_rows(m, out);
  return out;
}

Tensor imagine_batch(VaeModel& m, const Tensor& x, const std::vector<int>& class_sequence) {
  if (class_sequence.empty())
    throw std::invalid_argument("imagine: class sequence must be nonempty");
  for (int cls : class_sequence)
    if (cls < 1 || cls > m.net.latent.c_dim)
      throw std::invalid_argument("imagine: class out of range");
  Tensor cur = x;
  for (int cls : class_sequence) {
    EncodedBatch e = encode_batch(m, cur, EncodeMode::mean);
    cur = decode_class(m, e.z, cls);
  }
  return cur;
}

envs::Observation imagine(VaeModel& m, const envs::Observation& obs,
                          const std::vector<int>& class_sequence) {
  if (obs.kind != m.net.kind || obs.data.shape() != m.net.obs_shape)
    throw std::invalid_argument("imagine: observation does not match the model");
  std::vector<int> shape = m.net.obs_shape;
  shape.insert(shape.begin(), 1);
  Tensor x = obs.data.reshaped(shape);
  Tensor y = imagine_batch(m, x, class_sequence);
  envs::Observation out;
  out.kind = m.net.kind;
  out.data = y.reshaped(m.net.obs_shape);
  return out;
}

Tensor traverse(VaeModel& m, const std::vector<envs::Observation>& row_seeds,
                const std::vector<envs::Observation>& col_seeds) {
  if (m.net.kind != envs::Observation::Kind::pixel)
    throw std::invalid_argument("traverse: pixel models only (use traverse_table for features)");
  Tensor xr = obs_batch(m, row_seeds);
  Tensor xc = obs_batch(m, col_seeds);
  EncodedBatch er = encode_batch(m, xr, EncodeMode::mean);
  EncodedBatch ec = encode_batch(m, xc, EncodeMode::mean);
  const int rows = static_cast<int>(row_seeds.size());
  const int cols = static_cast<int>(col_seeds.size());
  const int zd = m.net.latent.z_dim;
  const int k = m.net.latent.c_dim;
  std::vector<int> shape = {rows, cols};
  for (int s : m.net.obs_shape) shape.push_back(s);
  Tensor out(shape);
  const std::int64_t d = out.size() / (static_cast<std::int64_t>(rows) * cols);
  Tensor zb({cols, zd}), cb({cols, k});
  for (int i = 0; i < rows; ++i) {
    cb.zero();
    for (int j = 0; j < cols; ++j) {
      std::copy(er.z.data() + static_cast<std::int64_t>(i) * zd,
                er.z.data() + static_cast<std::int64_t>(i + 1) * zd,
                zb.data() + static_cast<std::int64_t>(j) * zd);
      int cls = argmax_row(ec.class_probs.data() + static_cast<std::int64_t>(j) * k, k);
      cb[static_cast<std::int64_t>(j) * k + cls] = 1.0f;
    }
    const Tensor& dec = m.net.decoder->forward(zb, cb);
    std::copy(dec.data(), dec.data() + dec.size(),
              out.data() + static_cast<std::int64_t>(i) * cols * d);
  }
  return out;
}

Tensor traverse_table(VaeModel& m, const std::vector<envs::Observation>& row_seeds,
                      const std::vector<envs::Observation>& col_seeds) {
  if (m.net.kind != envs::Observation::Kind::feature)
    throw std::invalid_argument("traverse_table: feature models only");
  Tensor xr = obs_batch(m, row_seeds);
  Tensor xc = obs_batch(m, col_seeds);
  EncodedBatch er = encode_batch(m, xr, EncodeMode::mean);
  EncodedBatch ec = encode_batch(m, xc, EncodeMode::mean);
  const int rows = static_cast<int>(row_seeds.size());
  const int cols = static_cast<int>(col_seeds.size());
  const int zd = m.net.latent.z_dim;
  const int k = m.net.latent.c_dim;
  const int d = m.net.obs_shape[0];
  Tensor out({rows, cols, d});
  Tensor zb({cols, zd}), cb({cols, k});
  for (int i = 0; i < rows; ++i) {
    cb.zero();
    for (int j = 0; j < cols; ++j) {
      std::copy(er.z.data() + static_cast<std::int64_t>(i) * zd,
                er.z.data() + static_cast<std::int64_t>(i + 1) * zd,
                zb.data() + static_cast<std::int64_t>(j) * zd);
      int cls = argmax_row(ec.class_probs.data() + static_cast<std::int64_t>(j) * k, k);
      cb[static_cast<std::int64_t>(j) * k + cls] = 1.0f;
    }
    Tensor dec = m.net.decoder->forward(zb, cb);
    destandardize_rows(m, dec);
    std::copy(dec.data(), dec.data() + dec.size(),
              out.data() + static_cast<std::int64_t>(i) * cols * d);
  }
  return out;
}

Diagnostics run_diagnostics(VaeModel& m, const dataio::ObservationDataset& data,
                            const std::vector<dataio::LabeledSample>& train_labels,
                            std::uint64_t seed, int holdout_rows) {
  if (data.kind() != m.net.kind)
    throw std::invalid_argument("diagnostics: dataset kind does not match the model");
  if (holdout_rows < 1) throw std::invalid_argument("diagnostics: holdout_rows must be positive");
  std::vector<char> is_train(data.size(), 0);
  for (const auto& l : train_labels) {
    if (l.index < data.size()) is_train[l.index] = 1;
  }
  std::vector<std::size_t> candidates;
  for (std::size_t i = 0; i < data.size(); ++i)
    if (!is_train[i]) candidates.push_back(i);
  if (candidates.empty()) throw std::invalid_argument("diagnostics: no held-out rows available");
  Rng rng(seed);
  shuffle_indices(candidates, rng);
  const int n = static_cast<int>(
      std::min<std::size_t>(static_cast<std::size_t>(holdout_rows), candidates.size()));
  candidates.resize(static_cast<std::size_t>(n));

  const bool pixel = m.net.kind == envs::Observation::Kind::pixel;
  const int zd = m.net.latent.z_dim;
  const int k = m.net.latent.c_dim;
  const std::int64_t d = data.obs_elements();
  const int chunk = pixel ? 100 : 512;
  const int cyc_n = std::min(n, pixel ? 120 : 400);
  const int hs_n = std::min(n, 256);

  Diagnostics out;
  out.holdout_rows = n;

  // One encoding sweep: accuracy everywhere, plus retained z/probs for the
  // cycle study (first cyc_n rows) and the HSIC batch (first hs_n rows).
  Tensor z_keep({std::max(cyc_n, hs_n), zd});
  Tensor probs_keep({std::max(cyc_n, hs_n), k});
  std::vector<int> pred(static_cast<std::size_t>(n), 0);
  int correct = 0;
  Tensor x;
  for (int at = 0; at < n; at += chunk) {
    const int b = std::min(chunk, n - at);
    std::vector<int> xs = data.obs_shape();
    xs.insert(xs.begin(), b);
    x.resize(xs);
    for (int r = 0; r < b; ++r)
      data.get_into(candidates[static_cast<std::size_t>(at + r)],
                    x.data() + static_cast<std::int64_t>(r) * d);
    EncodedBatch e = encode_batch(m, x, EncodeMode::mean);
    for (int r = 0; r < b; ++r) {
      const int row = at + r;
      int p = argmax_row(e.class_probs.data() + static_cast<std::int64_t>(r) * k, k) + 1;
      pred[static_cast<std::size_t>(row)] = p;
      if (p == data.oracle_class(candidates[static_cast<std::size_t>(row)])) ++correct;
      if (row < std::max(cyc_n, hs_n)) {
        std::copy(e.z.data() + static_cast<std::int64_t>(r) * zd,
                  e.z.data() + static_cast<std::int64_t>(r + 1) * zd,
                  z_keep.data() + static_cast<std::int64_t>(row) * zd);
        std::copy(e.class_probs.data() + static_cast<std::int64_t>(r) * k,
                  e.class_probs.data() + static_cast<std::int64_t>(r + 1) * k,
                  probs_keep.data() + static_cast<std::int64_t>(row) * k);
      }
    }
  }
  out.holdout_accuracy = static_cast<double>(correct) / n;

  // Cycle consistency and z stability, batched per (swap class, home class).
  long long cyc_pass = 0, cyc_total = 0;
  std::vector<double> shifts;
  for (int bcls = 1; bcls <= k; ++bcls) {
    std::vector<int> rows;
    for (int i = 0; i < cyc_n; ++i)
      if (pred[static_cast<std::size_t>(i)] != bcls) rows.push_back(i);
    if (rows.empty()) continue;
    Tensor zi({static_cast<int>(rows.size()), zd});
    for (std::size_t r = 0; r < rows.size(); ++r)
      std::copy(z_keep.data() + static_cast<std::int64_t>(rows[r]) * zd,
                z_keep.data() + static_cast<std::int64_t>(rows[r] + 1) * zd,
                zi.data() + static_cast<std::int64_t>(r) * zd);
    Tensor y = decode_class(m, zi, bcls);
    EncodedBatch ey = encode_batch(m, y, EncodeMode::mean);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      double s2 = 0.0;
      for (int j = 0; j < zd; ++j) {
        double dzj = static_cast<double>(ey.z[static_cast<std::int64_t>(r) * zd + j]) -
                     z_keep[static_cast<std::int64_t>(rows[r]) * zd + j];
        s2 += dzj * dzj;
      }
      shifts.push_back(std::sqrt(s2));
    }
    for (int acls = 1; acls <= k; ++acls) {
      if (acls == bcls) continue;
      // Only rows that started away from the home class count: a decoder
      // that ignores its class input reproduces the original observation,
      // which would pass for free if the row already sat at `acls`.
      std::vector<int> sub;
      for (std::size_t r = 0; r < rows.size(); ++r)
        if (pred[static_cast<std::size_t>(rows[r])] != acls) sub.push_back(static_cast<int>(r));
      if (sub.empty()) continue;
      Tensor zy({static_cast<int>(sub.size()), zd});
      for (std::size_t r = 0; r < sub.size(); ++r)
        std::copy(ey.z.data() + static_cast<std::int64_t>(sub[r]) * zd,
                  ey.z.data() + static_cast<std::int64_t>(sub[r] + 1) * zd,
                  zy.data() + static_cast<std::int64_t>(r) * zd);
      Tensor back = decode_class(m, zy, acls);
      EncodedBatch eb = encode_batch(m, back, EncodeMode::mean);
      for (std::size_t r = 0; r < sub.size(); ++r) {
        ++cyc_total;
        if (argmax_row(eb.class_probs.data() + static_cast<std::int64_t>(r) * k, k) + 1 == acls)
          ++cyc_pass;
      }
    }
  }
  out.cycle_consistency = cyc_total > 0 ? static_cast<double>(cyc_pass) / cyc_total : 0.0;

  std::vector<double> pair_d;
  const int pn = std::min(cyc_n, 100);
  for (int i = 0; i < pn; ++i)
    for (int j = i + 1; j < pn; ++j) {
      double s2 = 0.0;
      for (int t = 0; t < zd; ++t) {
        double dt = static_cast<double>(z_keep[static_cast<std::int64_t>(i) * zd + t]) -
                    z_keep[static_cast<std::int64_t>(j) * zd + t];
        s2 += dt * dt;
      }
      pair_d.push_back(std::sqrt(s2));
    }
  auto median = [](std::vector<double>& v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
  };
  double med_pair = median(pair_d);
  out.z_stability = med_pair > 0.0 ? median(shifts) / med_pair : 0.0;

  // Independence pressure: HSIC(z, class probabilities) on the same rows,
  // through the trained model and through an untrained twin rebuilt from the
  // stored seed.
  auto hsic_of = [&](VaeModel& model) {
    Tensor xh;
    std::vector<int> xs = data.obs_shape();
    xs.insert(xs.begin(), hs_n);
    xh.resize(xs);
    for (int r = 0; r < hs_n; ++r)
      data.get_into(candidates[static_cast<std::size_t>(r)],
                    xh.data() + static_cast<std::int64_t>(r) * d);
    EncodedBatch e = encode_batch(model, xh, EncodeMode::mean);
    MatD zD(hs_n, zd), cD(hs_n, k);
    for (int r = 0; r < hs_n; ++r) {
      for (int j = 0; j < zd; ++j) zD(r, j) = e.z[static_cast<std::int64_t>(r) * zd + j];
      for (int j = 0; j < k; ++j) cD(r, j) = e.class_probs[static_cast<std::int64_t>(r) * k + j];
    }
    return static_cast<double>(losses::hsic(zD, cD));
  };
  out.hsic_trained = hsic_of(m);
  VaeModel twin;
  twin.net = nets::build_vae(m.net.kind, m.net.obs_shape, m.net.latent, m.seed);
  twin.feat_mean = m.feat_mean;
  twin.feat_std = m.feat_std;
  twin.seed = m.seed;
  out.hsic_init = hsic_of(twin);
  return out;
}

void save_vae(const VaeModel& m, const std::string& path) {
  json meta;
  meta["schema"] = "vae";
  meta["kind"] = m.net.kind == envs::Observation::Kind::pixel ? "pixel" : "feature";
  meta["obs_shape"] = m.net.obs_shape;
  meta["z_dim"] = m.net.latent.z_dim;
  meta["c_dim"] = m.net.latent.c_dim;
  meta["seed"] = m.seed;
  meta["steps"] = m.steps;
  meta["temperature"] = m.temperature;
  meta["feat_mean"] = m.feat_mean;
  meta["feat_std"] = m.feat_std;
  nets::save_checkpoint(path, m.net.params(), m.net.states(), meta.dump());
}

VaeModel load_vae(const std::string& path) {
  dataio::Container c = dataio::Container::load(path);
  json meta = json::parse(c.bytes("meta"), nullptr, false);
  if (meta.is_discarded() || !meta.contains("schema") || meta["schema"] != "vae")
    throw dataio::IoException(dataio::IoError::bad_value,
                              path + ": not a trained-model checkpoint");
  VaeModel m;
  envs::Observation::Kind kind = meta.at("kind") == "pixel" ? envs::Observation::Kind::pixel
                                                            : envs::Observation::Kind::feature;
  nets::LatentSpec latent;
  latent.z_dim = meta.at("z_dim").get<int>();
  latent.c_dim = meta.at("c_dim").get<int>();
  m.seed = meta.at("seed").get<std::uint64_t>();
  m.net = nets::build_vae(kind, meta.at("obs_shape").get<std::vector<int>>(), latent, m.seed);
  nets::load_checkpoint(path, m.net.params(), m.net.states());
  m.steps = meta.at("steps").get<long long>();
  m.temperature = meta.at("temperature").get<float>();
  m.feat_mean = meta.at("feat_mean").get<std::vector<float>>();
  m.feat_std = meta.at("feat_std").get<std::vector<float>>();
  return m;
}

}  // namespace magik::imagination
