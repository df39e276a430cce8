#include "magik/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace magik::nn {

// Convention used throughout: backward() OVERWRITES the input-gradient
// argument and ACCUMULATES into parameter gradients. Callers that merge
// several gradient paths into one tensor sum temporaries themselves.

void init_fan_in(Param& p, int fan_in, Rng& rng) {
  float bound = 1.0f / std::sqrt(static_cast<float>(fan_in));
  for (auto& v : p.value.span()) v = static_cast<float>(rng.uniform(-bound, bound));
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

Linear::Linear(int in, int out, Rng& rng, std::string name)
    : in_(in),
      out_(out),
      weight_({out, in}, name + ".weight"),
      bias_({out}, name + ".bias") {
  init_fan_in(weight_, in, rng);
  init_fan_in(bias_, in, rng);
}

Linear::Linear(int in, int out, std::string name)
    : in_(in),
      out_(out),
      weight_({out, in}, name + ".weight"),
      bias_({out}, name + ".bias") {}

void Linear::forward(const Tensor& x, Tensor& y) {
  const int n = x.dim(0);
  if (x.size() != static_cast<std::int64_t>(n) * in_)
    throw std::invalid_argument("Linear: input width mismatch");
  x_cache_ = x;
  y.resize({n, out_});
  auto X = x.mat(n, in_);
  auto W = weight_.value.mat(out_, in_);
  auto Y = y.mat(n, out_);
  Y.noalias() = X * W.transpose();
  auto B = Eigen::Map<const Eigen::RowVectorXf>(bias_.value.data(), out_);
  Y.rowwise() += B;
}

void Linear::accumulate_param_grads(const Tensor& dy) {
  const int n = dy.dim(0);
  auto dY = dy.mat(n, out_);
  auto X = x_cache_.mat(n, in_);
  weight_.grad.mat(out_, in_).noalias() += dY.transpose() * X;
  Eigen::Map<Eigen::RowVectorXf>(bias_.grad.data(), out_) += dY.colwise().sum();
}

void Linear::backward(const Tensor& dy, Tensor& dx) {
  const int n = dy.dim(0);
  accumulate_param_grads(dy);
  dx.resize({n, in_});
  dx.mat(n, in_).noalias() = dy.mat(n, out_) * weight_.value.mat(out_, in_);
}

void Linear::backward_no_dx(const Tensor& dy) { accumulate_param_grads(dy); }

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

Conv2d::Conv2d(int in_ch, int out_ch, int kernel, int stride, int pad, Rng& rng,
               std::string name)
    : in_ch_(in_ch),
      out_ch_(out_ch),
      kernel_(kernel),
      stride_(stride),
      pad_(pad),
      weight_({out_ch, kernel * kernel * in_ch}, name + ".weight"),
      bias_({out_ch}, name + ".bias") {
  init_fan_in(weight_, kernel * kernel * in_ch, rng);
  init_fan_in(bias_, kernel * kernel * in_ch, rng);
}

void Conv2d::im2col(const float* img, int h, int w, MatF& col) const {
  const int oh = out_size(h), ow = out_size(w);
  const int patch = kernel_ * kernel_ * in_ch_;
  col.resize(oh * ow, patch);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      float* row = col.data() + static_cast<std::ptrdiff_t>(oy * ow + ox) * patch;
      for (int ky = 0; ky < kernel_; ++ky) {
        int iy = oy * stride_ + ky - pad_;
        for (int kx = 0; kx < kernel_; ++kx) {
          int ix = ox * stride_ + kx - pad_;
          float* dst = row + (ky * kernel_ + kx) * in_ch_;
          if (iy < 0 || iy >= h || ix < 0 || ix >= w) {
            std::fill(dst, dst + in_ch_, 0.0f);
          } else {
            const float* src = img + (static_cast<std::ptrdiff_t>(iy) * w + ix) * in_ch_;
            std::copy(src, src + in_ch_, dst);
          }
        }
      }
    }
  }
}

void Conv2d::col2im(const MatF& col, int h, int w, float* img) const {
  const int oh = out_size(h), ow = out_size(w);
  const int patch = kernel_ * kernel_ * in_ch_;
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      const float* row = col.data() + static_cast<std::ptrdiff_t>(oy * ow + ox) * patch;
      for (int ky = 0; ky < kernel_; ++ky) {
        int iy = oy * stride_ + ky - pad_;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kernel_; ++kx) {
          int ix = ox * stride_ + kx - pad_;
          if (ix < 0 || ix >= w) continue;
          const float* src = row + (ky * kernel_ + kx) * in_ch_;
          float* dst = img + (static_cast<std::ptrdiff_t>(iy) * w + ix) * in_ch_;
          for (int c = 0; c < in_ch_; ++c) dst[c] += src[c];
        }
      }
    }
  }
}

void Conv2d::forward(const Tensor& x, Tensor& y) {
  if (x.ndim() != 4 || x.dim(3) != in_ch_)
    throw std::invalid_argument("Conv2d: expected NHWC input with matching channels");
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int oh = out_size(h), ow = out_size(w);
  x_cache_ = x;
  y.resize({n, oh, ow, out_ch_});
  auto W = weight_.value.mat(out_ch_, kernel_ * kernel_ * in_ch_);
  auto B = Eigen::Map<const Eigen::RowVectorXf>(bias_.value.data(), out_ch_);
  const std::ptrdiff_t in_img = static_cast<std::ptrdiff_t>(h) * w * in_ch_;
  const std::ptrdiff_t out_img = static_cast<std::ptrdiff_t>(oh) * ow * out_ch_;
  for (int i = 0; i < n; ++i) {
    im2col(x.data() + i * in_img, h, w, col_);
    MapMatF Y(y.data() + i * out_img, oh * ow, out_ch_);
    Y.noalias() = col_ * W.transpose();
    Y.rowwise() += B;
  }
}

void Conv2d::backward_impl(const Tensor& dy, Tensor* dx) {
  const int n = x_cache_.dim(0), h = x_cache_.dim(1), w = x_cache_.dim(2);
  const int oh = out_size(h), ow = out_size(w);
  auto W = weight_.value.mat(out_ch_, kernel_ * kernel_ * in_ch_);
  auto dW = weight_.grad.mat(out_ch_, kernel_ * kernel_ * in_ch_);
  auto dB = Eigen::Map<Eigen::RowVectorXf>(bias_.grad.data(), out_ch_);
  const std::ptrdiff_t in_img = static_cast<std::ptrdiff_t>(h) * w * in_ch_;
  const std::ptrdiff_t out_img = static_cast<std::ptrdiff_t>(oh) * ow * out_ch_;
  if (dx) {
    dx->resize({n, h, w, in_ch_});
    dx->zero();
  }
  MatF dcol;
  for (int i = 0; i < n; ++i) {
    im2col(x_cache_.data() + i * in_img, h, w, col_);
    CMapMatF dY(dy.data() + i * out_img, oh * ow, out_ch_);
    dW.noalias() += dY.transpose() * col_;
    dB += dY.colwise().sum();
    if (dx) {
      dcol.noalias() = dY * W;
      col2im(dcol, h, w, dx->data() + i * in_img);
    }
  }
}

void Conv2d::backward(const Tensor& dy, Tensor& dx) { backward_impl(dy, &dx); }
void Conv2d::backward_no_dx(const Tensor& dy) { backward_impl(dy, nullptr); }

// ---------------------------------------------------------------------------
// BatchNorm1d
// ---------------------------------------------------------------------------

BatchNorm1d::BatchNorm1d(int dim, std::string name, float momentum, float eps)
    : dim_(dim),
      momentum_(momentum),
      eps_(eps),
      gamma_({dim}, name + ".gamma"),
      beta_({dim}, name + ".beta"),
      running_mean_({dim}, 0.0f),
      running_var_({dim}, 1.0f) {
  gamma_.value.fill(1.0f);
}

void BatchNorm1d::forward(const Tensor& x, Tensor& y, bool train) {
  const int n = x.dim(0);
  if (x.size() != static_cast<std::int64_t>(n) * dim_)
    throw std::invalid_argument("BatchNorm1d: input width mismatch");
  y.resize({n, dim_});
  if (!train) {
    for (int i = 0; i < n; ++i)
      for (int d = 0; d < dim_; ++d) {
        float xhat = (x[i * dim_ + d] - running_mean_[d]) /
                     std::sqrt(running_var_[d] + eps_);
        y[i * dim_ + d] = gamma_.value[d] * xhat + beta_.value[d];
      }
    return;
  }
  if (n < 2) throw std::invalid_argument("BatchNorm1d: training batch must have n >= 2");
  x_cache_ = x;
  xhat_.resize({n, dim_});
  mean_.assign(dim_, 0.0f);
  inv_std_.assign(dim_, 0.0f);
  for (int d = 0; d < dim_; ++d) {
    float m = 0.0f;
    for (int i = 0; i < n; ++i) m += x[i * dim_ + d];
    m /= n;
    float var = 0.0f;
    for (int i = 0; i < n; ++i) {
      float c = x[i * dim_ + d] - m;
      var += c * c;
    }
    var /= n;  // biased, as used for normalization
    mean_[d] = m;
    inv_std_[d] = 1.0f / std::sqrt(var + eps_);
    running_mean_[d] = (1.0f - momentum_) * running_mean_[d] + momentum_ * m;
    float unbiased = var * static_cast<float>(n) / static_cast<float>(n - 1);
    running_var_[d] = (1.0f - momentum_) * running_var_[d] + momentum_ * unbiased;
    for (int i = 0; i < n; ++i) {
      float xh = (x[i * dim_ + d] - m) * inv_std_[d];
      xhat_[i * dim_ + d] = xh;
      y[i * dim_ + d] = gamma_.value[d] * xh + beta_.value[d];
    }
  }
}

void BatchNorm1d::backward(const Tensor& dy, Tensor& dx) {
  const int n = dy.dim(0);
  dx.resize({n, dim_});
  for (int d = 0; d < dim_; ++d) {
    float sum_dy = 0.0f, sum_dy_xhat = 0.0f;
    for (int i = 0; i < n; ++i) {
      float g = dy[i * dim_ + d];
      sum_dy += g;
      sum_dy_xhat += g * xhat_[i * dim_ + d];
    }
    gamma_.grad[d] += sum_dy_xhat;
    beta_.grad[d] += sum_dy;
    float k = gamma_.value[d] * inv_std_[d] / static_cast<float>(n);
    for (int i = 0; i < n; ++i) {
      float g = dy[i * dim_ + d];
      dx[i * dim_ + d] =
          k * (n * g - sum_dy - xhat_[i * dim_ + d] * sum_dy_xhat);
    }
  }
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

void ReLU::forward(const Tensor& x, Tensor& y) {
  y.resize(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
  y_cache_ = y;
}

void ReLU::backward(const Tensor& dy, Tensor& dx) {
  dx.resize(dy.shape());
  for (std::int64_t i = 0; i < dy.size(); ++i)
    dx[i] = y_cache_[i] > 0.0f ? dy[i] : 0.0f;
}

void Sigmoid::forward(const Tensor& x, Tensor& y) {
  y.resize(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) y[i] = 1.0f / (1.0f + std::exp(-x[i]));
  y_cache_ = y;
}

void Sigmoid::backward(const Tensor& dy, Tensor& dx) {
  dx.resize(dy.shape());
  for (std::int64_t i = 0; i < dy.size(); ++i) {
    float s = y_cache_[i];
    dx[i] = dy[i] * s * (1.0f - s);
  }
}

void Tanh::forward(const Tensor& x, Tensor& y) {
  y.resize(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) y[i] = std::tanh(x[i]);
  y_cache_ = y;
}

void Tanh::backward(const Tensor& dy, Tensor& dx) {
  dx.resize(dy.shape());
  for (std::int64_t i = 0; i < dy.size(); ++i) {
    float t = y_cache_[i];
    dx[i] = dy[i] * (1.0f - t * t);
  }
}

// ---------------------------------------------------------------------------
// Film
// ---------------------------------------------------------------------------

Film::Film(int cond_dim, int channels, std::string name)
    : cond_dim_(cond_dim),
      channels_(channels),
      // Zero producers: the layer starts as the identity and learns a modulation.
      gamma_producer_(cond_dim, channels, name + ".gamma"),
      beta_producer_(cond_dim, channels, name + ".beta") {}

std::vector<Param*> Film::params() {
  return concat_params({gamma_producer_.params(), beta_producer_.params()});
}

void Film::forward(const Tensor& h, const Tensor& cond, Tensor& y) {
  const int n = h.dim(0);
  if (h.dim(h.ndim() - 1) != channels_)
    throw std::invalid_argument("Film: channel mismatch");
  if (cond.dim(0) != n) throw std::invalid_argument("Film: batch mismatch");
  const std::int64_t spatial = h.size() / (static_cast<std::int64_t>(n) * channels_);
  h_cache_ = h;
  gamma_producer_.forward(cond, gamma_);
  beta_producer_.forward(cond, beta_);
  y.resize(h.shape());
  for (int i = 0; i < n; ++i) {
    const float* g = gamma_.data() + static_cast<std::ptrdiff_t>(i) * channels_;
    const float* b = beta_.data() + static_cast<std::ptrdiff_t>(i) * channels_;
    const float* hp = h.data() + static_cast<std::ptrdiff_t>(i) * spatial * channels_;
    float* yp = y.data() + static_cast<std::ptrdiff_t>(i) * spatial * channels_;
    for (std::int64_t p = 0; p < spatial; ++p)
      for (int c = 0; c < channels_; ++c)
        yp[p * channels_ + c] = (1.0f + g[c]) * hp[p * channels_ + c] + b[c];
  }
}

void Film::backward(const Tensor& dy, Tensor& dh, Tensor* d_cond) {
  const int n = dy.dim(0);
  const std::int64_t spatial = dy.size() / (static_cast<std::int64_t>(n) * channels_);
  dh.resize(dy.shape());
  Tensor d_gamma({n, channels_}, 0.0f), d_beta({n, channels_}, 0.0f);
  for (int i = 0; i < n; ++i) {
    const float* g = gamma_.data() + static_cast<std::ptrdiff_t>(i) * channels_;
    const float* hp = h_cache_.data() + static_cast<std::ptrdiff_t>(i) * spatial * channels_;
    const float* dyp = dy.data() + static_cast<std::ptrdiff_t>(i) * spatial * channels_;
    float* dhp = dh.data() + static_cast<std::ptrdiff_t>(i) * spatial * channels_;
    float* dg = d_gamma.data() + static_cast<std::ptrdiff_t>(i) * channels_;
    float* db = d_beta.data() + static_cast<std::ptrdiff_t>(i) * channels_;
    for (std::int64_t p = 0; p < spatial; ++p)
      for (int c = 0; c < channels_; ++c) {
        float d = dyp[p * channels_ + c];
        dhp[p * channels_ + c] = d * (1.0f + g[c]);
        dg[c] += d * hp[p * channels_ + c];
        db[c] += d;
      }
  }
  if (d_cond) {
    Tensor tmp;
    gamma_producer_.backward(d_gamma, *d_cond);
    beta_producer_.backward(d_beta, tmp);
    auto D = d_cond->mat(n, cond_dim_);
    D += tmp.mat(n, cond_dim_);
  } else {
    gamma_producer_.backward_no_dx(d_gamma);
    beta_producer_.backward_no_dx(d_beta);
  }
}

// ---------------------------------------------------------------------------
// UpsampleNearest2x
// ---------------------------------------------------------------------------

void UpsampleNearest2x::forward(const Tensor& x, Tensor& y) {
  const int n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  x_shape_ = x.shape();
  y.resize({n, 2 * h, 2 * w, c});
  for (int i = 0; i < n; ++i)
    for (int yy = 0; yy < 2 * h; ++yy)
      for (int xx = 0; xx < 2 * w; ++xx) {
        const float* src =
            x.data() + (((static_cast<std::ptrdiff_t>(i) * h + yy / 2) * w + xx / 2) * c);
        float* dst =
            y.data() + (((static_cast<std::ptrdiff_t>(i) * 2 * h + yy) * 2 * w + xx) * c);
        std::copy(src, src + c, dst);
      }
}

void UpsampleNearest2x::backward(const Tensor& dy, Tensor& dx) {
  const int n = x_shape_[0], h = x_shape_[1], w = x_shape_[2], c = x_shape_[3];
  dx.resize(x_shape_);
  dx.zero();
  for (int i = 0; i < n; ++i)
    for (int yy = 0; yy < 2 * h; ++yy)
      for (int xx = 0; xx < 2 * w; ++xx) {
        const float* src =
            dy.data() + (((static_cast<std::ptrdiff_t>(i) * 2 * h + yy) * 2 * w + xx) * c);
        float* dst =
            dx.data() + (((static_cast<std::ptrdiff_t>(i) * h + yy / 2) * w + xx / 2) * c);
        for (int ch = 0; ch < c; ++ch) dst[ch] += src[ch];
      }
}

// ---------------------------------------------------------------------------
// Residual blocks
// ---------------------------------------------------------------------------

ResidualBlock2d::ResidualBlock2d(int channels, int width, Rng& rng, const std::string& name)
    : reduce_(channels, width, 1, 1, 0, rng, name + ".reduce"),
      conv_(width, width, 3, 1, 1, rng, name + ".conv"),
      expand_(width, channels, 1, 1, 0, rng, name + ".expand") {}

std::vector<Param*> ResidualBlock2d::params() {
  return concat_params({reduce_.params(), conv_.params(), expand_.params()});
}

void ResidualBlock2d::forward(const Tensor& x, Tensor& y) {
  relu0_.forward(x, t0_);
  reduce_.forward(t0_, t1_);
  relu1_.forward(t1_, t2_);
  conv_.forward(t2_, t3_);
  relu2_.forward(t3_, t4_);
  expand_.forward(t4_, t5_);
  y.resize(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) y[i] = x[i] + t5_[i];
}

void ResidualBlock2d::backward(const Tensor& dy, Tensor& dx) {
  expand_.backward(dy, d4_);
  relu2_.backward(d4_, d3_);
  conv_.backward(d3_, d2_);
  relu1_.backward(d2_, d1_);
  reduce_.backward(d1_, d0_);
  relu0_.backward(d0_, d5_);
  dx.resize(dy.shape());
  for (std::int64_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] + d5_[i];
}

ResidualBlock1d::ResidualBlock1d(int dim, Rng& rng, const std::string& name)
    : fc1_(dim, dim, rng, name + ".fc1"), fc2_(dim, dim, rng, name + ".fc2") {}

std::vector<Param*> ResidualBlock1d::params() {
  return concat_params({fc1_.params(), fc2_.params()});
}

void ResidualBlock1d::forward(const Tensor& x, Tensor& y) {
  fc1_.forward(x, t0_);
  relu_.forward(t0_, t1_);
  fc2_.forward(t1_, t2_);
  y.resize(x.shape());
  for (std::int64_t i = 0; i < x.size(); ++i) y[i] = x[i] + t2_[i];
}

void ResidualBlock1d::backward(const Tensor& dy, Tensor& dx) {
  fc2_.backward(dy, d1_);
  relu_.backward(d1_, d0_);
  fc1_.backward(d0_, d2_);
  dx.resize(dy.shape());
  for (std::int64_t i = 0; i < dy.size(); ++i) dx[i] = dy[i] + d2_[i];
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

Adam::Adam() = default;
Adam::Adam(Config cfg) : cfg_(cfg) {}

void Adam::attach(const std::vector<Param*>& params) {
  for (Param* p : params) {
    params_.push_back(p);
    m_.emplace_back(p->value.shape(), 0.0f);
    v_.emplace_back(p->value.shape(), 0.0f);
  }
}

void Adam::zero_grad() {
  for (Param* p : params_) p->grad.zero();
}

float Adam::clip_global_norm(float max_norm) {
  double sq = 0.0;
  for (Param* p : params_)
    for (float g : p->grad.span()) sq += static_cast<double>(g) * g;
  float norm = static_cast<float>(std::sqrt(sq));
  if (norm > max_norm && norm > 0.0f) {
    float scale = max_norm / norm;
    for (Param* p : params_)
      for (auto& g : p->grad.span()) g *= scale;
  }
  return norm;
}

void Adam::step() {
  ++t_;
  float c1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(t_));
  float c2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Param* p = params_[k];
    for (std::int64_t i = 0; i < p->value.size(); ++i) {
      float g = p->grad[i];
      m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0f - cfg_.beta1) * g;
      v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0f - cfg_.beta2) * g * g;
      float mhat = m_[k][i] / c1;
      float vhat = v_[k][i] / c2;
      p->value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

std::vector<Param*> concat_params(std::initializer_list<std::vector<Param*>> lists) {
  std::vector<Param*> out;
  for (const auto& l : lists) out.insert(out.end(), l.begin(), l.end());
  return out;
}

}  // namespace magik::nn
