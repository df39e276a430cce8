#pragma once

// Minimal neural-network building blocks over the NHWC Tensor type. Each
// layer owns its parameters and caches whatever the backward pass needs from
// the most recent forward call; composites wire layers together by hand and
// call backward in reverse order. Single-threaded, float storage throughout.

#include <memory>
#include <string>
#include <vector>

#include "magik/rng.hpp"
#include "magik/tensor.hpp"

namespace magik::nn {

/// One learnable array: value, gradient accumulator, and a name used by the
/// checkpoint container. Gradients accumulate across backward calls until
/// the optimizer clears them.
struct Param {
  Tensor value;
  Tensor grad;
  std::string name;

  explicit Param(std::vector<int> shape, std::string n = {})
      : value(shape), grad(std::move(shape), 0.0f), name(std::move(n)) {}
  std::size_t count() const { return static_cast<std::size_t>(value.size()); }
};

/// Fan-in uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
void init_fan_in(Param& p, int fan_in, Rng& rng);

// ---------------------------------------------------------------------------

class Linear {
 public:
  Linear(int in, int out, Rng& rng, std::string name);
  /// Zero-initialized variant, for producer heads that must start inert.
  Linear(int in, int out, std::string name);

  /// x: [N, in] -> y: [N, out]
  void forward(const Tensor& x, Tensor& y);
  /// dy: [N, out]; accumulates into weight/bias grads, writes dx: [N, in].
  void backward(const Tensor& dy, Tensor& dx);
  /// backward without computing dx (first layer of a chain).
  void backward_no_dx(const Tensor& dy);

  std::vector<Param*> params() { return {&weight_, &bias_}; }
  int in_features() const { return in_; }
  int out_features() const { return out_; }
  Param& weight() { return weight_; }
  Param& bias() { return bias_; }

 private:
  void accumulate_param_grads(const Tensor& dy);
  int in_, out_;
  Param weight_;  // [out, in]
  Param bias_;    // [out]
  Tensor x_cache_;
};

// ---------------------------------------------------------------------------

/// 2-D convolution over NHWC tensors via per-image im2col + sgemm.
class Conv2d {
 public:
  Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, Rng& rng, std::string name);

  /// x: [N, H, W, in_ch] -> y: [N, H_out, W_out, out_ch]
  void forward(const Tensor& x, Tensor& y);
  void backward(const Tensor& dy, Tensor& dx);
  void backward_no_dx(const Tensor& dy);

  std::vector<Param*> params() { return {&weight_, &bias_}; }
  int out_size(int in_size) const { return (in_size + 2 * pad_ - kernel_) / stride_ + 1; }
  int in_channels() const { return in_ch_; }
  int out_channels() const { return out_ch_; }

 private:
  void im2col(const float* img, int h, int w, MatF& col) const;
  void col2im(const MatF& col, int h, int w, float* img) const;
  void backward_impl(const Tensor& dy, Tensor* dx);

  int in_ch_, out_ch_, kernel_, stride_, pad_;
  Param weight_;  // [out_ch, kernel*kernel*in_ch]
  Param bias_;    // [out_ch]
  Tensor x_cache_;
  MatF col_;  // scratch, reused across images
};

// ---------------------------------------------------------------------------

/// Batch normalization over the last axis of [N, D]. Training mode uses batch
/// statistics and maintains running estimates; eval mode uses the running
/// estimates and is deterministic.
class BatchNorm1d {
 public:
  BatchNorm1d(int dim, std::string name, float momentum = 0.1f, float eps = 1e-5f);

  void forward(const Tensor& x, Tensor& y, bool train);
  /// Only valid after a training-mode forward (batch statistics are cached).
  void backward(const Tensor& dy, Tensor& dx);

  std::vector<Param*> params() { return {&gamma_, &beta_}; }
  /// Running statistics are state, not optimized parameters; the checkpoint
  /// writer stores them alongside the params.
  Tensor& running_mean() { return running_mean_; }
  Tensor& running_var() { return running_var_; }

 private:
  int dim_;
  float momentum_, eps_;
  Param gamma_, beta_;
  Tensor running_mean_, running_var_;
  Tensor x_cache_, xhat_;
  std::vector<float> mean_, inv_std_;
};

// ---------------------------------------------------------------------------

class ReLU {
 public:
  void forward(const Tensor& x, Tensor& y);
  void backward(const Tensor& dy, Tensor& dx);

 private:
  Tensor y_cache_;
};

class Sigmoid {
 public:
  void forward(const Tensor& x, Tensor& y);
  void backward(const Tensor& dy, Tensor& dx);

 private:
  Tensor y_cache_;
};

class Tanh {
 public:
  void forward(const Tensor& x, Tensor& y);
  void backward(const Tensor& dy, Tensor& dx);

 private:
  Tensor y_cache_;
};

// ---------------------------------------------------------------------------

/// Feature-wise linear modulation: y = (1 + Wg c + bg) * h + (Wb c + bb),
/// broadcast per channel over spatial positions when h is [N, H, W, C].
/// Producers are zero-initialized so the layer starts as the identity.
class Film {
 public:
  Film(int cond_dim, int channels, std::string name);

  /// h: [N, C] or [N, H, W, C]; cond: [N, K].
  void forward(const Tensor& h, const Tensor& cond, Tensor& y);
  /// Writes dh; accumulates producer grads and (optionally) d_cond.
  void backward(const Tensor& dy, Tensor& dh, Tensor* d_cond = nullptr);

  std::vector<Param*> params();

 private:
  int cond_dim_, channels_;
  Linear gamma_producer_, beta_producer_;
  Tensor h_cache_, gamma_, beta_;  // gamma_/beta_: [N, C] (gamma minus the +1 shift)
};

// ---------------------------------------------------------------------------

/// Nearest-neighbour 2x spatial upsampling for NHWC tensors.
class UpsampleNearest2x {
 public:
  void forward(const Tensor& x, Tensor& y);
  void backward(const Tensor& dy, Tensor& dx);

 private:
  std::vector<int> x_shape_;
};

// ---------------------------------------------------------------------------

/// Pre-activation bottleneck residual block for NHWC maps:
///   y = x + conv1x1_out(relu(conv3x3(relu(conv1x1_in(relu(x))))))
/// with the 3x3 stage at `width` channels.
class ResidualBlock2d {
 public:
  ResidualBlock2d(int channels, int width, Rng& rng, const std::string& name);

  void forward(const Tensor& x, Tensor& y);
  void backward(const Tensor& dy, Tensor& dx);

  std::vector<Param*> params();

 private:
  Conv2d reduce_, conv_, expand_;
  ReLU relu0_, relu1_, relu2_;
  Tensor t0_, t1_, t2_, t3_, t4_, t5_;
  Tensor d0_, d1_, d2_, d3_, d4_, d5_;
};

/// Residual block for flat features: y = x + W2 relu(W1 x).
class ResidualBlock1d {
 public:
  ResidualBlock1d(int dim, Rng& rng, const std::string& name);

  void forward(const Tensor& x, Tensor& y);
  void backward(const Tensor& dy, Tensor& dx);

  std::vector<Param*> params();

 private:
  Linear fc1_, fc2_;
  ReLU relu_;
  Tensor t0_, t1_, t2_;
  Tensor d0_, d1_, d2_;
};

// ---------------------------------------------------------------------------

/// Adam with optional global-norm gradient clipping across every attached
/// parameter. Moments are kept per parameter in attachment order, so the
/// attachment list must be stable across steps (and across save/load).
class Adam {
 public:
  struct Config {
    float lr = 5e-4f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps = 1e-8f;
  };

  Adam();
  explicit Adam(Config cfg);

  void attach(const std::vector<Param*>& params);
  void zero_grad();
  /// Scales all gradients so their joint L2 norm is at most max_norm.
  /// Returns the pre-clip norm.
  float clip_global_norm(float max_norm);
  void step();

  float lr() const { return cfg_.lr; }
  void set_lr(float lr) { cfg_.lr = lr; }
  int steps_taken() const { return t_; }
  std::vector<Param*>& attached() { return params_; }

 private:
  Config cfg_;
  int t_ = 0;
  std::vector<Param*> params_;
  std::vector<Tensor> m_, v_;
};

/// Collects every parameter of a set of layer param lists into one flat list.
std::vector<Param*> concat_params(std::initializer_list<std::vector<Param*>> lists);

}  // namespace magik::nn
