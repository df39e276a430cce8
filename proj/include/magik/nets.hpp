#pragma once

// Network builders: the dual-encoder VAE (conv stack for pixels, batch-norm
// MLP for features) with FiLM-conditioned decoders, and the actor/critic
// networks used by the soft actor-critic trainers. Composites wire layers
// from layers.hpp and expose explicit forward/backward plus a named
// parameter registry for checkpointing.

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "magik/envs.hpp"
#include "magik/layers.hpp"
#include "magik/tensor.hpp"

namespace magik::dataio {
class Container;
}

namespace magik::nets {

struct LatentSpec {
  int z_dim = 32;  // class-agnostic code width (feature model uses 11)
  int c_dim = 4;   // one slot per view class
};

/// Non-parameter tensors (running statistics) that checkpoints must carry.
struct NamedState {
  std::string name;
  Tensor* tensor;
};

// ---------------------------------------------------------------------------
// VAE bodies
// ---------------------------------------------------------------------------

/// Pixel encoder body: three convolutions (64/128/256 channels, kernels
/// 7/4/4, strides 1/2/2, pads 3/1/1 — a 40x40x3 image lands at 256x10x10),
/// two residual blocks, then a 2048-512 MLP.
class ConvTrunk {
 public:
  static constexpr int kOutDim = 512;
  static constexpr int kMapChannels = 256;
  static constexpr int kMapSize = 10;

  ConvTrunk(Rng& rng, const std::string& name);

  const Tensor& forward(const Tensor& x);  // [N,40,40,3] -> [N,512]
  void backward(const Tensor& d_out);      // accumulates param grads only
  std::vector<nn::Param*> params();

 private:
  nn::Conv2d c1_, c2_, c3_;
  nn::ReLU a1_, a2_, a3_, a4_, a5_;
  nn::ResidualBlock2d r1_, r2_;
  nn::Linear f1_, f2_;
  Tensor t1_, t2_, t3_, t4_, t5_, t6_, t7_, t8_, t9_, t10_, t11_, out_;
  Tensor d1_, d2_, d3_, d4_, d5_, d6_, d7_, d8_, d9_, d10_, d11_;
};

/// Feature encoder body: two 128-wide linear layers with batch
/// normalization between them and a final rectifier, one residual block,
/// then a linear map to a 32-dim code.
class FeatureTrunk {
 public:
  static constexpr int kOutDim = 32;

  FeatureTrunk(int in_dim, Rng& rng, const std::string& name);

  const Tensor& forward(const Tensor& x, bool train);  // [N,in] -> [N,32]
  void backward(const Tensor& d_out);
  std::vector<nn::Param*> params();
  std::vector<NamedState> states();

 private:
  std::string name_;
  nn::Linear l1_, l2_, l3_;
  nn::BatchNorm1d bn1_, bn2_;
  nn::ReLU a1_, a2_;
  nn::ResidualBlock1d res_;
  Tensor t1_, t2_, t3_, t4_, t5_, t6_, t7_, out_;
  Tensor d1_, d2_, d3_, d4_, d5_, d6_, d7_;
};

/// One of the two parallel VAE encoders: a body of the observation kind's
/// architecture plus a linear head (2*z_dim for the Gaussian branch, c_dim
/// logits for the class branch).
class Encoder {
 public:
  Encoder(envs::Observation::Kind kind, int feature_dim, int out_dim, Rng& rng,
          const std::string& name);

  const Tensor& forward(const Tensor& x, bool train);  // -> [N, out_dim]
  void backward(const Tensor& d_out);
  std::vector<nn::Param*> params();
  std::vector<NamedState> states();
  int out_dim() const { return head_.out_features(); }

 private:
  envs::Observation::Kind kind_;
  std::optional<ConvTrunk> conv_;
  std::optional<FeatureTrunk> mlp_;
  nn::Linear head_;
  Tensor d_body_, out_;
};

/// Pixel decoder: linear z->(10,10,256), residual block, FiLM(c), two
/// nearest-neighbour-upsample + 3x3 conv stages to 40x40x3, FiLM(c),
/// sigmoid.
class PixelDecoder {
 public:
  PixelDecoder(const LatentSpec& latent, Rng& rng, const std::string& name);

  const Tensor& forward(const Tensor& z, const Tensor& c);  // -> [N,40,40,3]
  /// Writes d_z and d_c (both FiLM contributions summed).
  void backward(const Tensor& d_out, Tensor& d_z, Tensor& d_c);
  std::vector<nn::Param*> params();

 private:
  LatentSpec latent_;
  nn::Linear fc_;
  nn::ResidualBlock2d res_;
  nn::Film film1_, film2_;
  nn::UpsampleNearest2x up1_, up2_;
  nn::Conv2d uc1_, uc2_;
  nn::ReLU ua1_;
  nn::Sigmoid sig_;
  Tensor t1_, t2_, t3_, t4_, t5_, t6_, t7_, t8_, t9_, t10_, out_;
  Tensor d1_, d2_, d3_, d4_, d5_, d6_, d7_, d8_, d9_, d10_, dc2_;
};

/// Feature decoder: MLP with hidden sizes 256 and 128 and a FiLM(c) stage
/// between them; linear output (callers model features as unit-variance
/// Gaussians, so no squashing).
class FeatureDecoder {
 public:
  FeatureDecoder(int out_dim, const LatentSpec& latent, Rng& rng, const std::string& name);

  const Tensor& forward(const Tensor& z, const Tensor& c);  // -> [N,out_dim]
  void backward(const Tensor& d_out, Tensor& d_z, Tensor& d_c);
  std::vector<nn::Param*> params();

 private:
  LatentSpec latent_;
  nn::Linear fc1_, fc2_, fc3_;
  nn::ReLU a1_, a2_;
  nn::Film film_;
  Tensor t1_, t2_, t3_, t4_, t5_, out_;
  Tensor d1_, d2_, d3_, d4_, d5_;
};

/// Kind-dispatching decoder wrapper.
class Decoder {
 public:
  Decoder(envs::Observation::Kind kind, const std::vector<int>& obs_shape,
          const LatentSpec& latent, Rng& rng, const std::string& name);

  const Tensor& forward(const Tensor& z, const Tensor& c);
  void backward(const Tensor& d_out, Tensor& d_z, Tensor& d_c);
  std::vector<nn::Param*> params();

 private:
  envs::Observation::Kind kind_;
  std::optional<PixelDecoder> px_;
  std::optional<FeatureDecoder> ft_;
};

/// The full model: two parallel encoders (Gaussian z branch and class
/// branch) plus the conditioned decoder.
struct Vae {
  envs::Observation::Kind kind;
  std::vector<int> obs_shape;
  LatentSpec latent;
  std::unique_ptr<Encoder> encoder_z;  // head emits [mu | log variance]
  std::unique_ptr<Encoder> encoder_c;  // head emits class logits
  std::unique_ptr<Decoder> decoder;

  std::vector<nn::Param*> params() const;
  std::vector<NamedState> states() const;
};

/// Builds the VAE for an observation kind. obs_shape is {40,40,3} for
/// pixels or {feature_dim} for features. Throws std::invalid_argument on a
/// latent/class-dimension mismatch.
Vae build_vae(envs::Observation::Kind kind, const std::vector<int>& obs_shape,
              const LatentSpec& latent, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Actor/critic networks
// ---------------------------------------------------------------------------

struct ActionSpec {
  enum class Kind { discrete, box };
  Kind kind = Kind::discrete;
  int dim = 0;  // action count (discrete) or action dimensions (box)
};

/// Uniform interface the actor-critic trainer drives.
class Net {
 public:
  virtual ~Net() = default;
  virtual const Tensor& forward(const Tensor& x) = 0;
  /// Accumulates parameter gradients; writes input gradients when dx given.
  virtual void backward(const Tensor& d_out, Tensor* dx = nullptr) = 0;
  virtual std::vector<nn::Param*> params() = 0;
};

/// Plain rectified MLP.
class MlpNet : public Net {
 public:
  MlpNet(int in_dim, std::vector<int> hidden, int out_dim, Rng& rng, const std::string& name);

  const Tensor& forward(const Tensor& x) override;
  void backward(const Tensor& d_out, Tensor* dx = nullptr) override;
  std::vector<nn::Param*> params() override;

 private:
  std::vector<nn::Linear> fcs_;
  std::vector<nn::ReLU> acts_;
  std::vector<Tensor> fwd_, bwd_;
};

/// Compact conv trunk for pixel policies/critics: channels 16/32/32
/// (kernels 7/4/3, all stride 2) then a 256-wide head. Far smaller than the
/// VAE trunk so actor-critic training fits a single-core budget.
class PixelNet : public Net {
 public:
  PixelNet(int out_dim, Rng& rng, const std::string& name);

  const Tensor& forward(const Tensor& x) override;
  void backward(const Tensor& d_out, Tensor* dx = nullptr) override;
  std::vector<nn::Param*> params() override;

 private:
  nn::Conv2d c1_, c2_, c3_;
  nn::ReLU a1_, a2_, a3_, a4_;
  nn::Linear f1_, head_;
  Tensor t1_, t2_, t3_, t4_, t5_, t6_, t7_, t8_, out_;
  Tensor d1_, d2_, d3_, d4_, d5_, d6_, d7_, d8_;
};

/// Actor plus twin critics.
///  - discrete: policy emits |A| logits; critics map observation to |A|
///    action values.
///  - box: policy emits [mean | raw log-std] (squashing and clamping live in
///    the trainer); critics map observation⊕action to one value and expose
///    action gradients through backward's dx.
struct SacNets {
  envs::Observation::Kind obs_kind;
  ActionSpec action;
  std::unique_ptr<Net> policy, q1, q2;

  std::vector<nn::Param*> q_params() const;
  std::vector<nn::Param*> all_params() const;
};

/// Throws std::invalid_argument for combinations the workbench does not
/// support (pixel observations pair with discrete actions, features with
/// box actions).
SacNets build_sac_nets(envs::Observation::Kind obs_kind, const ActionSpec& action,
                       const std::vector<int>& obs_shape, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Parameter plumbing
// ---------------------------------------------------------------------------

void copy_params(const std::vector<nn::Param*>& dst, const std::vector<nn::Param*>& src);
/// dst <- tau * src + (1 - tau) * dst
void polyak_update(const std::vector<nn::Param*>& dst, const std::vector<nn::Param*>& src,
                   float tau);
std::size_t param_count(const std::vector<nn::Param*>& params);
/// Order-sensitive FNV-1a hash over the raw float bytes of every parameter.
std::uint64_t param_checksum(const std::vector<nn::Param*>& params);

/// Writes params (and running state) into a container under "p:"/"s:" keys
/// plus a "meta" JSON blob supplied by the caller.
void save_checkpoint(const std::string& path, const std::vector<nn::Param*>& params,
                     const std::vector<NamedState>& states, const std::string& meta_json);
/// Restores by name into an already-built network; verifies every shape and
/// that no parameter is missing. Returns the stored meta JSON.
std::string load_checkpoint(const std::string& path, const std::vector<nn::Param*>& params,
                            const std::vector<NamedState>& states);

}  // namespace magik::nets
