#include "magik/nets.hpp"

#include <set>
#include <stdexcept>

#include "magik/dataio.hpp"

namespace magik::nets {

// ---------------------------------------------------------------------------
// ConvTrunk
// ---------------------------------------------------------------------------

ConvTrunk::ConvTrunk(Rng& rng, const std::string& name)
    : c1_(3, 64, 7, 1, 3, rng, name + ".conv1"),
      c2_(64, 128, 4, 2, 1, rng, name + ".conv2"),
      c3_(128, 256, 4, 2, 1, rng, name + ".conv3"),
      r1_(256, 64, rng, name + ".res1"),
      r2_(256, 64, rng, name + ".res2"),
      f1_(kMapChannels * kMapSize * kMapSize, 2048, rng, name + ".fc1"),
      f2_(2048, kOutDim, rng, name + ".fc2") {}

const Tensor& ConvTrunk::forward(const Tensor& x) {
  c1_.forward(x, t1_);
  a1_.forward(t1_, t2_);
  c2_.forward(t2_, t3_);
  a2_.forward(t3_, t4_);
  c3_.forward(t4_, t5_);
  a3_.forward(t5_, t6_);
  r1_.forward(t6_, t7_);
  r2_.forward(t7_, t8_);
  f1_.forward(t8_, t9_);  // [N,10,10,256] reads as [N,25600]
  a4_.forward(t9_, t10_);
  f2_.forward(t10_, t11_);
  a5_.forward(t11_, out_);
  return out_;
}

void ConvTrunk::backward(const Tensor& d_out) {
  const int n = t8_.dim(0);
  a5_.backward(d_out, d11_);
  f2_.backward(d11_, d10_);
  a4_.backward(d10_, d9_);
  f1_.backward(d9_, d8_);
  Tensor d8r = d8_.reshaped({n, kMapSize, kMapSize, kMapChannels});
  r2_.backward(d8r, d7_);
  r1_.backward(d7_, d6_);
  a3_.backward(d6_, d5_);
  c3_.backward(d5_, d4_);
  a2_.backward(d4_, d3_);
  c2_.backward(d3_, d2_);
  a1_.backward(d2_, d1_);
  c1_.backward_no_dx(d1_);
}

std::vector<nn::Param*> ConvTrunk::params() {
  return nn::concat_params({c1_.params(), c2_.params(), c3_.params(), r1_.params(), r2_.params(),
                            f1_.params(), f2_.params()});
}

// ---------------------------------------------------------------------------
// FeatureTrunk
// ---------------------------------------------------------------------------

FeatureTrunk::FeatureTrunk(int in_dim, Rng& rng, const std::string& name)
    : name_(name),
      l1_(in_dim, 128, rng, name + ".fc1"),
      l2_(128, 128, rng, name + ".fc2"),
      l3_(128, kOutDim, rng, name + ".fc3"),
      bn1_(128, name + ".bn1"),
      bn2_(128, name + ".bn2"),
      res_(128, rng, name + ".res") {}

const Tensor& FeatureTrunk::forward(const Tensor& x, bool train) {
  l1_.forward(x, t1_);
  bn1_.forward(t1_, t2_, train);
  a1_.forward(t2_, t3_);
  l2_.forward(t3_, t4_);
  bn2_.forward(t4_, t5_, train);
  a2_.forward(t5_, t6_);
  res_.forward(t6_, t7_);
  l3_.forward(t7_, out_);
  return out_;
}

void FeatureTrunk::backward(const Tensor& d_out) {
  l3_.backward(d_out, d7_);
  res_.backward(d7_, d6_);
  a2_.backward(d6_, d5_);
  bn2_.backward(d5_, d4_);
  l2_.backward(d4_, d3_);
  a1_.backward(d3_, d2_);
  bn1_.backward(d2_, d1_);
  l1_.backward_no_dx(d1_);
}

std::vector<nn::Param*> FeatureTrunk::params() {
  return nn::concat_params(
      {l1_.params(), bn1_.params(), l2_.params(), bn2_.params(), res_.params(), l3_.params()});
}

std::vector<NamedState> FeatureTrunk::states() {
  return {
      {name_ + ".bn1.running_mean", &bn1_.running_mean()},
      {name_ + ".bn1.running_var", &bn1_.running_var()},
      {name_ + ".bn2.running_mean", &bn2_.running_mean()},
      {name_ + ".bn2.running_var", &bn2_.running_var()},
  };
}

// ---------------------------------------------------------------------------
// Encoder
// ---------------------------------------------------------------------------

Encoder::Encoder(envs::Observation::Kind kind, int feature_dim, int out_dim, Rng& rng,
                 const std::string& name)
    : kind_(kind),
      head_(kind == envs::Observation::Kind::pixel ? ConvTrunk::kOutDim : FeatureTrunk::kOutDim,
            out_dim, rng, name + ".head") {
  if (kind_ == envs::Observation::Kind::pixel) {
    conv_.emplace(rng, name + ".trunk");
  } else {
    mlp_.emplace(feature_dim, rng, name + ".trunk");
  }
}

const Tensor& Encoder::forward(const Tensor& x, bool train) {
  const Tensor& body =
      kind_ == envs::Observation::Kind::pixel ? conv_->forward(x) : mlp_->forward(x, train);
  head_.forward(body, out_);
  return out_;
}

void Encoder::backward(const Tensor& d_out) {
  head_.backward(d_out, d_body_);
  if (kind_ == envs::Observation::Kind::pixel) {
    conv_->backward(d_body_);
  } else {
    mlp_->backward(d_body_);
  }
}

std::vector<nn::Param*> Encoder::params() {
  auto body = kind_ == envs::Observation::Kind::pixel ? conv_->params() : mlp_->params();
  auto head = head_.params();
  body.insert(body.end(), head.begin(), head.end());
  return body;
}

std::vector<NamedState> Encoder::states() {
  if (kind_ == envs::Observation::Kind::pixel) return {};
  return mlp_->states();
}

// ---------------------------------------------------------------------------
// PixelDecoder
// ---------------------------------------------------------------------------

namespace {
constexpr int kMap = ConvTrunk::kMapSize;
constexpr int kMapC = ConvTrunk::kMapChannels;
constexpr int kUpMidChannels = 64;  // width of the intermediate upsample stage
}  // namespace

PixelDecoder::PixelDecoder(const LatentSpec& latent, Rng& rng, const std::string& name)
    : latent_(latent),
      fc_(latent.z_dim, kMapC * kMap * kMap, rng, name + ".fc"),
      res_(kMapC, 64, rng, name + ".res"),
      film1_(latent.c_dim, kMapC, name + ".film1"),
      film2_(latent.c_dim, 3, name + ".film2"),
      uc1_(kMapC, kUpMidChannels, 3, 1, 1, rng, name + ".upconv1"),
      uc2_(kUpMidChannels, 3, 3, 1, 1, rng, name + ".upconv2") {}

const Tensor& PixelDecoder::forward(const Tensor& z, const Tensor& c) {
  const int n = z.dim(0);
  fc_.forward(z, t1_);
  t2_ = t1_.reshaped({n, kMap, kMap, kMapC});
  res_.forward(t2_, t3_);
  film1_.forward(t3_, c, t4_);
  up1_.forward(t4_, t5_);
  uc1_.forward(t5_, t6_);
  ua1_.forward(t6_, t7_);
  up2_.forward(t7_, t8_);
  uc2_.forward(t8_, t9_);
  film2_.forward(t9_, c, t10_);
  sig_.forward(t10_, out_);
  return out_;
}

void PixelDecoder::backward(const Tensor& d_out, Tensor& d_z, Tensor& d_c) {
  const int n = d_out.dim(0);
  sig_.backward(d_out, d10_);
  film2_.backward(d10_, d9_, &d_c);
  uc2_.backward(d9_, d8_);
  up2_.backward(d8_, d7_);
  ua1_.backward(d7_, d6_);
  uc1_.backward(d6_, d5_);
  up1_.backward(d5_, d4_);
  film1_.backward(d4_, d3_, &dc2_);
  d_c.mat(n, latent_.c_dim) += dc2_.mat(n, latent_.c_dim);
  res_.backward(d3_, d2_);
  d1_ = d2_.reshaped({n, kMapC * kMap * kMap});
  fc_.backward(d1_, d_z);
}

std::vector<nn::Param*> PixelDecoder::params() {
  return nn::concat_params({fc_.params(), res_.params(), film1_.params(), uc1_.params(),
                            uc2_.params(), film2_.params()});
}

// ---------------------------------------------------------------------------
// FeatureDecoder
// ---------------------------------------------------------------------------

FeatureDecoder::FeatureDecoder(int out_dim, const LatentSpec& latent, Rng& rng,
                               const std::string& name)
    : latent_(latent),
      fc1_(latent.z_dim, 256, rng, name + ".fc1"),
      fc2_(256, 128, rng, name + ".fc2"),
      fc3_(128, out_dim, rng, name + ".fc3"),
      film_(latent.c_dim, 256, name + ".film") {}

const Tensor& FeatureDecoder::forward(const Tensor& z, const Tensor& c) {
  fc1_.forward(z, t1_);
  a1_.forward(t1_, t2_);
  film_.forward(t2_, c, t3_);
  fc2_.forward(t3_, t4_);
  a2_.forward(t4_, t5_);
  fc3_.forward(t5_, out_);
  return out_;
}

void FeatureDecoder::backward(const Tensor& d_out, Tensor& d_z, Tensor& d_c) {
  fc3_.backward(d_out, d5_);
  a2_.backward(d5_, d4_);
  fc2_.backward(d4_, d3_);
  film_.backward(d3_, d2_, &d_c);
  a1_.backward(d2_, d1_);
  fc1_.backward(d1_, d_z);
}

std::vector<nn::Param*> FeatureDecoder::params() {
  return nn::concat_params({fc1_.params(), film_.params(), fc2_.params(), fc3_.params()});
}

// ---------------------------------------------------------------------------
// Decoder / Vae
// ---------------------------------------------------------------------------

Decoder::Decoder(envs::Observation::Kind kind, const std::vector<int>& obs_shape,
                 const LatentSpec& latent, Rng& rng, const std::string& name)
    : kind_(kind) {
  if (kind_ == envs::Observation::Kind::pixel) {
    px_.emplace(latent, rng, name);
  } else {
    ft_.emplace(obs_shape.at(0), latent, rng, name);
  }
}

const Tensor& Decoder::forward(const Tensor& z, const Tensor& c) {
  return kind_ == envs::Observation::Kind::pixel ? px_->forward(z, c) : ft_->forward(z, c);
}

void Decoder::backward(const Tensor& d_out, Tensor& d_z, Tensor& d_c) {
  if (kind_ == envs::Observation::Kind::pixel) {
    px_->backward(d_out, d_z, d_c);
  } else {
    ft_->backward(d_out, d_z, d_c);
  }
}

std::vector<nn::Param*> Decoder::params() {
  return kind_ == envs::Observation::Kind::pixel ? px_->params() : ft_->params();
}

std::vector<nn::Param*> Vae::params() const {
  return nn::concat_params({encoder_z->params(), encoder_c->params(), decoder->params()});
}

std::vector<NamedState> Vae::states() const {
  auto out = encoder_z->states();
  auto more = encoder_c->states();
  out.insert(out.end(), more.begin(), more.end());
  return out;
}

Vae build_vae(envs::Observation::Kind kind, const std::vector<int>& obs_shape,
              const LatentSpec& latent, std::uint64_t seed) {
  if (latent.z_dim < 1) throw std::invalid_argument("z_dim must be at least 1");
  if (latent.c_dim != envs::kNumClasses)
    throw std::invalid_argument("class latent width must equal the environment class count (" +
                                std::to_string(envs::kNumClasses) + ")");
  int feature_dim = 0;
  if (kind == envs::Observation::Kind::pixel) {
    std::vector<int> expect{envs::GridPickEnv::kImageSize, envs::GridPickEnv::kImageSize, 3};
    if (obs_shape != expect)
      throw std::invalid_argument("pixel model expects a 40x40x3 observation");
  } else {
    if (obs_shape.size() != 1 || obs_shape[0] < 1)
      throw std::invalid_argument("feature model expects a flat observation shape");
    feature_dim = obs_shape[0];
  }

  Rng rng(seed);
  Vae v;
  v.kind = kind;
  v.obs_shape = obs_shape;
  v.latent = latent;
  v.encoder_z = std::make_unique<Encoder>(kind, feature_dim, 2 * latent.z_dim, rng, "encoder_z");
  v.encoder_c = std::make_unique<Encoder>(kind, feature_dim, latent.c_dim, rng, "encoder_c");
  v.decoder = std::make_unique<Decoder>(kind, obs_shape, latent, rng, "decoder");
  return v;
}

// ---------------------------------------------------------------------------
// MlpNet
// ---------------------------------------------------------------------------

MlpNet::MlpNet(int in_dim, std::vector<int> hidden, int out_dim, Rng& rng,
               const std::string& name) {
  int prev = in_dim;
  int layer = 1;
  for (int h : hidden) {
    fcs_.emplace_back(prev, h, rng, name + ".fc" + std::to_string(layer));
    prev = h;
    ++layer;
  }
  fcs_.emplace_back(prev, out_dim, rng, name + ".fc" + std::to_string(layer));
  acts_.resize(hidden.size());
  fwd_.resize(2 * hidden.size() + 1);
  bwd_.resize(2 * hidden.size());
}

const Tensor& MlpNet::forward(const Tensor& x) {
  const Tensor* cur = &x;
  for (std::size_t i = 0; i < acts_.size(); ++i) {
    fcs_[i].forward(*cur, fwd_[2 * i]);
    acts_[i].forward(fwd_[2 * i], fwd_[2 * i + 1]);
    cur = &fwd_[2 * i + 1];
  }
  fcs_.back().forward(*cur, fwd_.back());
  return fwd_.back();
}

void MlpNet::backward(const Tensor& d_out, Tensor* dx) {
  const std::size_t h = acts_.size();
  if (h == 0) {
    if (dx) {
      fcs_[0].backward(d_out, *dx);
    } else {
      fcs_[0].backward_no_dx(d_out);
    }
    return;
  }
  fcs_.back().backward(d_out, bwd_[2 * h - 1]);
  for (std::size_t i = h; i-- > 0;) {
    acts_[i].backward(bwd_[2 * i + 1], bwd_[2 * i]);
    if (i > 0) {
      fcs_[i].backward(bwd_[2 * i], bwd_[2 * i - 1]);
    } else if (dx) {
      fcs_[0].backward(bwd_[0], *dx);
    } else {
      fcs_[0].backward_no_dx(bwd_[0]);
    }
  }
}

std::vector<nn::Param*> MlpNet::params() {
  std::vector<nn::Param*> out;
  for (auto& fc : fcs_) {
    auto p = fc.params();
    out.insert(out.end(), p.begin(), p.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// PixelNet
// ---------------------------------------------------------------------------

PixelNet::PixelNet(int out_dim, Rng& rng, const std::string& name)
    : c1_(3, 16, 7, 2, 3, rng, name + ".conv1"),
      c2_(16, 32, 4, 2, 1, rng, name + ".conv2"),
      c3_(32, 32, 3, 2, 1, rng, name + ".conv3"),
      f1_(32 * 5 * 5, 256, rng, name + ".fc1"),
      head_(256, out_dim, rng, name + ".head") {}

const Tensor& PixelNet::forward(const Tensor& x) {
  c1_.forward(x, t1_);
  a1_.forward(t1_, t2_);
  c2_.forward(t2_, t3_);
  a2_.forward(t3_, t4_);
  c3_.forward(t4_, t5_);
  a3_.forward(t5_, t6_);
  f1_.forward(t6_, t7_);
  a4_.forward(t7_, t8_);
  head_.forward(t8_, out_);
  return out_;
}

void PixelNet::backward(const Tensor& d_out, Tensor* dx) {
  if (dx) throw std::logic_error("PixelNet does not expose input gradients");
  const int n = t6_.dim(0);
  head_.backward(d_out, d8_);
  a4_.backward(d8_, d7_);
  f1_.backward(d7_, d6_);
  Tensor d6r = d6_.reshaped({n, 5, 5, 32});
  a3_.backward(d6r, d5_);
  c3_.backward(d5_, d4_);
  a2_.backward(d4_, d3_);
  c2_.backward(d3_, d2_);
  a1_.backward(d2_, d1_);
  c1_.backward_no_dx(d1_);
}

std::vector<nn::Param*> PixelNet::params() {
  return nn::concat_params(
      {c1_.params(), c2_.params(), c3_.params(), f1_.params(), head_.params()});
}

// ---------------------------------------------------------------------------
// SacNets
// ---------------------------------------------------------------------------

std::vector<nn::Param*> SacNets::q_params() const {
  return nn::concat_params({q1->params(), q2->params()});
}

std::vector<nn::Param*> SacNets::all_params() const {
  return nn::concat_params({policy->params(), q1->params(), q2->params()});
}

SacNets build_sac_nets(envs::Observation::Kind obs_kind, const ActionSpec& action,
                       const std::vector<int>& obs_shape, std::uint64_t seed) {
  if (action.dim < 1) throw std::invalid_argument("action dimension must be positive");
  Rng rng(seed);
  SacNets nets;
  nets.obs_kind = obs_kind;
  nets.action = action;

  if (obs_kind == envs::Observation::Kind::pixel) {
    if (action.kind != ActionSpec::Kind::discrete)
      throw std::invalid_argument("pixel observations support only discrete actions here");
    nets.policy = std::make_unique<PixelNet>(action.dim, rng, "policy");
    nets.q1 = std::make_unique<PixelNet>(action.dim, rng, "q1");
    nets.q2 = std::make_unique<PixelNet>(action.dim, rng, "q2");
    return nets;
  }

  if (obs_shape.size() != 1 || obs_shape[0] < 1)
    throw std::invalid_argument("feature networks expect a flat observation shape");
  const int obs_dim = obs_shape[0];
  const std::vector<int> hidden{256, 256};
  if (action.kind == ActionSpec::Kind::box) {
    nets.policy = std::make_unique<MlpNet>(obs_dim, hidden, 2 * action.dim, rng, "policy");
    nets.q1 = std::make_unique<MlpNet>(obs_dim + action.dim, hidden, 1, rng, "q1");
    nets.q2 = std::make_unique<MlpNet>(obs_dim + action.dim, hidden, 1, rng, "q2");
  } else {
    nets.policy = std::make_unique<MlpNet>(obs_dim, hidden, action.dim, rng, "policy");
    nets.q1 = std::make_unique<MlpNet>(obs_dim, hidden, action.dim, rng, "q1");
    nets.q2 = std::make_unique<MlpNet>(obs_dim, hidden, action.dim, rng, "q2");
  }
  return nets;
}

// ---------------------------------------------------------------------------
// Parameter plumbing
// ---------------------------------------------------------------------------

void copy_params(const std::vector<nn::Param*>& dst, const std::vector<nn::Param*>& src) {
  if (dst.size() != src.size()) throw std::invalid_argument("parameter list size mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    if (dst[i]->value.shape() != src[i]->value.shape())
      throw std::invalid_argument("parameter shape mismatch at '" + src[i]->name + "'");
    dst[i]->value = src[i]->value;
  }
}

void polyak_update(const std::vector<nn::Param*>& dst, const std::vector<nn::Param*>& src,
                   float tau) {
  if (dst.size() != src.size()) throw std::invalid_argument("parameter list size mismatch");
  for (std::size_t i = 0; i < dst.size(); ++i) {
    float* d = dst[i]->value.data();
    const float* s = src[i]->value.data();
    for (std::int64_t k = 0; k < dst[i]->value.size(); ++k) d[k] = tau * s[k] + (1 - tau) * d[k];
  }
}

std::size_t param_count(const std::vector<nn::Param*>& params) {
  std::size_t n = 0;
  for (const auto* p : params) n += p->count();
  return n;
}

std::uint64_t param_checksum(const std::vector<nn::Param*>& params) {
  std::uint64_t h = 1469598103934665603ull;
  for (const auto* p : params) {
    auto bytes = reinterpret_cast<const unsigned char*>(p->value.data());
    std::size_t n = p->count() * sizeof(float);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

void save_checkpoint(const std::string& path, const std::vector<nn::Param*>& params,
                     const std::vector<NamedState>& states, const std::string& meta_json) {
  dataio::Container c;
  std::set<std::string> seen;
  for (const auto* p : params) {
    if (p->name.empty() || !seen.insert(p->name).second)
      throw std::logic_error("checkpoint needs unique parameter names: '" + p->name + "'");
    c.put_array("p:" + p->name, p->value);
  }
  for (const auto& s : states) {
    if (s.name.empty() || !seen.insert(s.name).second)
      throw std::logic_error("checkpoint needs unique state names: '" + s.name + "'");
    c.put_array("s:" + s.name, *s.tensor);
  }
  c.put_bytes("meta", meta_json.empty() ? "{}" : meta_json);
  c.save(path);
}

std::string load_checkpoint(const std::string& path, const std::vector<nn::Param*>& params,
                            const std::vector<NamedState>& states) {
  dataio::Container c = dataio::Container::load(path);
  for (auto* p : params) {
    const Tensor& t = c.array("p:" + p->name);
    if (t.shape() != p->value.shape())
      throw dataio::IoException(dataio::IoError::bad_value,
                                "checkpoint shape mismatch at '" + p->name + "'");
    p->value = t;
  }
  for (const auto& s : states) {
    const Tensor& t = c.array("s:" + s.name);
    if (t.shape() != s.tensor->shape())
      throw dataio::IoException(dataio::IoError::bad_value,
                                "checkpoint shape mismatch at '" + s.name + "'");
    *s.tensor = t;
  }
  return c.has("meta") ? c.bytes("meta") : "{}";
}

}  // namespace magik::nets
