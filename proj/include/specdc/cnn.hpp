#pragma once

// Residual convolutional network for single-channel spectrogram tiles with
// explicit forward/backward passes, SGD-with-momentum training on
// pseudo-labels, feature extraction and SPCK checkpointing.
//
// Templated on the scalar type: float for training speed, double where the
// tests need finite-difference-grade precision. Convolutions run as
// im2col + GEMM; all reductions are sequential and order-fixed, so results
// are bit-reproducible given the seed.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "specdc/common.hpp"
#include "specdc/ingest.hpp"
#include "specdc/kmeans.hpp"
#include "specdc/pca.hpp"

namespace specdc {

template <typename T>
struct Tensor4 {
  int n = 0, c = 0, h = 0, w = 0;
  std::vector<T> v;

  Tensor4() = default;
  Tensor4(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_),
        v(static_cast<std::size_t>(n_) * c_ * h_ * w_, T(0)) {}

  T& at(int in, int ic, int ih, int iw) {
    return v[((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw];
  }
  T at(int in, int ic, int ih, int iw) const {
    return v[((static_cast<std::size_t>(in) * c + ic) * h + ih) * w + iw];
  }
  std::size_t size() const { return v.size(); }
};

template <typename T>
struct Param {
  std::string name;
  std::vector<int> dims;
  std::vector<T> w;   // value
  std::vector<T> g;   // gradient
  std::vector<T> vel; // SGD momentum buffer
  bool trainable = true;

  void init_size(std::size_t n) {
    w.assign(n, T(0));
    g.assign(n, T(0));
    vel.assign(n, T(0));
  }
  std::size_t size() const { return w.size(); }
};

template <typename T>
using RowMajorMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

namespace cnn_detail {

template <typename T>
void he_init(Param<T>& p, std::size_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& x : p.w) x = static_cast<T>(stddev * rng.normal());
}

}  // namespace cnn_detail

// ---------------------------------------------------------------------------
// Layers

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(std::string name, int in_ch, int out_ch, int kernel, int stride, int pad)
      : ic_(in_ch), oc_(out_ch), k_(kernel), stride_(stride), pad_(pad) {
    weight_.name = std::move(name);
    weight_.dims = {oc_, ic_, k_, k_};
    weight_.init_size(static_cast<std::size_t>(oc_) * ic_ * k_ * k_);
  }

  void init(Rng& rng) {
    cnn_detail::he_init(weight_, static_cast<std::size_t>(ic_) * k_ * k_, rng);
  }

  int out_dim(int in) const { return (in + 2 * pad_ - k_) / stride_ + 1; }

  Tensor4<T> forward(const Tensor4<T>& x) {
    if (x.c != ic_) throw ShapeError("conv: channel mismatch");
    x_cache_ = x;
    const int oh = out_dim(x.h), ow = out_dim(x.w);
    Tensor4<T> y(x.n, oc_, oh, ow);
    const int ck2 = ic_ * k_ * k_;
    RowMajorMat<T> cols(ck2, oh * ow);
    Eigen::Map<const RowMajorMat<T>> wmat(weight_.w.data(), oc_, ck2);
    for (int in = 0; in < x.n; ++in) {
      im2col(x, in, cols);
      Eigen::Map<RowMajorMat<T>> ymat(&y.at(in, 0, 0, 0), oc_, oh * ow);
      ymat.noalias() = wmat * cols;
    }
    return y;
  }

  Tensor4<T> backward(const Tensor4<T>& dy) {
    const Tensor4<T>& x = x_cache_;
    const int oh = dy.h, ow = dy.w;
    const int ck2 = ic_ * k_ * k_;
    Tensor4<T> dx(x.n, x.c, x.h, x.w);
    RowMajorMat<T> cols(ck2, oh * ow);
    RowMajorMat<T> dcols(ck2, oh * ow);
    Eigen::Map<const RowMajorMat<T>> wmat(weight_.w.data(), oc_, ck2);
    Eigen::Map<RowMajorMat<T>> gmat(weight_.g.data(), oc_, ck2);
    for (int in = 0; in < x.n; ++in) {
      im2col(x, in, cols);
      Eigen::Map<const RowMajorMat<T>> dymat(&dy.v[((static_cast<std::size_t>(in) * oc_) * oh) * ow],
                                             oc_, oh * ow);
      gmat.noalias() += dymat * cols.transpose();
      dcols.noalias() = wmat.transpose() * dymat;
      col2im(dcols, in, dx);
    }
    return dx;
  }

  void params(std::vector<Param<T>*>& out) { out.push_back(&weight_); }

 private:
  void im2col(const Tensor4<T>& x, int in, RowMajorMat<T>& cols) const {
    const int oh = out_dim(x.h), ow = out_dim(x.w);
    for (int c = 0; c < ic_; ++c) {
      for (int ki = 0; ki < k_; ++ki) {
        for (int kj = 0; kj < k_; ++kj) {
          const int r = (c * k_ + ki) * k_ + kj;
          T* dst = cols.data() + static_cast<std::size_t>(r) * oh * ow;
          for (int oi = 0; oi < oh; ++oi) {
            const int si = oi * stride_ - pad_ + ki;
            for (int oj = 0; oj < ow; ++oj) {
              const int sj = oj * stride_ - pad_ + kj;
              dst[oi * ow + oj] = (si >= 0 && si < x.h && sj >= 0 && sj < x.w)
                                      ? x.at(in, c, si, sj)
                                      : T(0);
            }
          }
        }
      }
    }
  }

  void col2im(const RowMajorMat<T>& dcols, int in, Tensor4<T>& dx) const {
    const int oh = out_dim(dx.h), ow = out_dim(dx.w);
    for (int c = 0; c < ic_; ++c) {
      for (int ki = 0; ki < k_; ++ki) {
        for (int kj = 0; kj < k_; ++kj) {
          const int r = (c * k_ + ki) * k_ + kj;
          const T* src = dcols.data() + static_cast<std::size_t>(r) * oh * ow;
          for (int oi = 0; oi < oh; ++oi) {
            const int si = oi * stride_ - pad_ + ki;
            if (si < 0 || si >= dx.h) continue;
            for (int oj = 0; oj < ow; ++oj) {
              const int sj = oj * stride_ - pad_ + kj;
              if (sj < 0 || sj >= dx.w) continue;
              dx.at(in, c, si, sj) += src[oi * ow + oj];
            }
          }
        }
      }
    }
  }

  int ic_ = 0, oc_ = 0, k_ = 0, stride_ = 1, pad_ = 0;
  Param<T> weight_;
  Tensor4<T> x_cache_;
};

template <typename T>
class BatchNorm2d {
 public:
  static constexpr double kEps = 1e-5;
  static constexpr double kMomentum = 0.1;

  BatchNorm2d() = default;
  BatchNorm2d(const std::string& name, int channels) : c_(channels) {
    gamma_.name = name + ".gamma";
    beta_.name = name + ".beta";
    rmean_.name = name + ".rmean";
    rvar_.name = name + ".rvar";
    gamma_.dims = beta_.dims = rmean_.dims = rvar_.dims = {c_};
    gamma_.init_size(static_cast<std::size_t>(c_));
    beta_.init_size(static_cast<std::size_t>(c_));
    rmean_.init_size(static_cast<std::size_t>(c_));
    rvar_.init_size(static_cast<std::size_t>(c_));
    rmean_.trainable = rvar_.trainable = false;
    for (auto& g : gamma_.w) g = T(1);
    for (auto& v : rvar_.w) v = T(1);
  }

  Tensor4<T> forward(const Tensor4<T>& x, bool train, bool update_stats) {
    train_mode_ = train;
    const std::size_t m = static_cast<std::size_t>(x.n) * x.h * x.w;
    Tensor4<T> y(x.n, x.c, x.h, x.w);
    mean_.assign(static_cast<std::size_t>(c_), T(0));
    invstd_.assign(static_cast<std::size_t>(c_), T(0));
    if (train) {
      for (int c = 0; c < c_; ++c) {
        double sum = 0.0;
        for (int in = 0; in < x.n; ++in)
          for (int i = 0; i < x.h; ++i)
            for (int j = 0; j < x.w; ++j) sum += static_cast<double>(x.at(in, c, i, j));
        const double mu = sum / static_cast<double>(m);
        double var = 0.0;
        for (int in = 0; in < x.n; ++in)
          for (int i = 0; i < x.h; ++i)
            for (int j = 0; j < x.w; ++j) {
              const double d = static_cast<double>(x.at(in, c, i, j)) - mu;
              var += d * d;
            }
        var /= static_cast<double>(m);  // biased, used for normalization
        mean_[static_cast<std::size_t>(c)] = static_cast<T>(mu);
        invstd_[static_cast<std::size_t>(c)] = static_cast<T>(1.0 / std::sqrt(var + kEps));
        if (update_stats) {
          rmean_.w[static_cast<std::size_t>(c)] = static_cast<T>(
              (1.0 - kMomentum) * static_cast<double>(rmean_.w[static_cast<std::size_t>(c)]) +
              kMomentum * mu);
          rvar_.w[static_cast<std::size_t>(c)] = static_cast<T>(
              (1.0 - kMomentum) * static_cast<double>(rvar_.w[static_cast<std::size_t>(c)]) +
              kMomentum * var);
        }
      }
    } else {
      for (int c = 0; c < c_; ++c) {
        mean_[static_cast<std::size_t>(c)] = rmean_.w[static_cast<std::size_t>(c)];
        invstd_[static_cast<std::size_t>(c)] = static_cast<T>(
            1.0 / std::sqrt(static_cast<double>(rvar_.w[static_cast<std::size_t>(c)]) + kEps));
      }
    }
    xhat_ = Tensor4<T>(x.n, x.c, x.h, x.w);
    for (int in = 0; in < x.n; ++in)
      for (int c = 0; c < c_; ++c) {
        const T mu = mean_[static_cast<std::size_t>(c)];
        const T is = invstd_[static_cast<std::size_t>(c)];
        const T ga = gamma_.w[static_cast<std::size_t>(c)];
        const T be = beta_.w[static_cast<std::size_t>(c)];
        for (int i = 0; i < x.h; ++i)
          for (int j = 0; j < x.w; ++j) {
            const T xh = (x.at(in, c, i, j) - mu) * is;
            xhat_.at(in, c, i, j) = xh;
            y.at(in, c, i, j) = ga * xh + be;
          }
      }
    return y;
  }

  Tensor4<T> backward(const Tensor4<T>& dy) {
    const std::size_t m = static_cast<std::size_t>(dy.n) * dy.h * dy.w;
    Tensor4<T> dx(dy.n, dy.c, dy.h, dy.w);
    for (int c = 0; c < c_; ++c) {
      double dgamma = 0.0, dbeta = 0.0;
      for (int in = 0; in < dy.n; ++in)
        for (int i = 0; i < dy.h; ++i)
          for (int j = 0; j < dy.w; ++j) {
            dgamma += static_cast<double>(dy.at(in, c, i, j)) *
                      static_cast<double>(xhat_.at(in, c, i, j));
            dbeta += static_cast<double>(dy.at(in, c, i, j));
          }
      gamma_.g[static_cast<std::size_t>(c)] += static_cast<T>(dgamma);
      beta_.g[static_cast<std::size_t>(c)] += static_cast<T>(dbeta);
      const double ga = static_cast<double>(gamma_.w[static_cast<std::size_t>(c)]);
      const double is = static_cast<double>(invstd_[static_cast<std::size_t>(c)]);
      if (train_mode_) {
        const double scale = ga * is / static_cast<double>(m);
        for (int in = 0; in < dy.n; ++in)
          for (int i = 0; i < dy.h; ++i)
            for (int j = 0; j < dy.w; ++j)
              dx.at(in, c, i, j) = static_cast<T>(
                  scale * (static_cast<double>(m) * static_cast<double>(dy.at(in, c, i, j)) -
                           dbeta -
                           static_cast<double>(xhat_.at(in, c, i, j)) * dgamma));
      } else {
        const double scale = ga * is;
        for (int in = 0; in < dy.n; ++in)
          for (int i = 0; i < dy.h; ++i)
            for (int j = 0; j < dy.w; ++j)
              dx.at(in, c, i, j) = static_cast<T>(scale * static_cast<double>(dy.at(in, c, i, j)));
      }
    }
    return dx;
  }

  void params(std::vector<Param<T>*>& out) {
    out.push_back(&gamma_);
    out.push_back(&beta_);
    out.push_back(&rmean_);
    out.push_back(&rvar_);
  }

 private:
  int c_ = 0;
  bool train_mode_ = false;
  Param<T> gamma_, beta_, rmean_, rvar_;
  std::vector<T> mean_, invstd_;
  Tensor4<T> xhat_;
};

template <typename T>
class Relu {
 public:
  Tensor4<T> forward(const Tensor4<T>& x) {
    mask_.assign(x.size(), 0);
    Tensor4<T> y(x.n, x.c, x.h, x.w);
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x.v[i] > T(0)) {
        y.v[i] = x.v[i];
        mask_[i] = 1;
      }
    }
    return y;
  }
  Tensor4<T> backward(const Tensor4<T>& dy) {
    Tensor4<T> dx(dy.n, dy.c, dy.h, dy.w);
    for (std::size_t i = 0; i < dy.size(); ++i)
      if (mask_[i]) dx.v[i] = dy.v[i];
    return dx;
  }

 private:
  std::vector<char> mask_;
};

// 3x3 stride-2 pad-1 max pool (full ResNet stem only).
template <typename T>
class MaxPool3x3s2 {
 public:
  Tensor4<T> forward(const Tensor4<T>& x) {
    in_h_ = x.h;
    in_w_ = x.w;
    const int oh = (x.h + 2 - 3) / 2 + 1;
    const int ow = (x.w + 2 - 3) / 2 + 1;
    Tensor4<T> y(x.n, x.c, oh, ow);
    argmax_.assign(y.size(), 0);
    std::size_t p = 0;
    for (int in = 0; in < x.n; ++in)
      for (int c = 0; c < x.c; ++c)
        for (int oi = 0; oi < oh; ++oi)
          for (int oj = 0; oj < ow; ++oj, ++p) {
            T best = -std::numeric_limits<T>::infinity();
            std::uint32_t best_idx = 0;
            for (int ki = 0; ki < 3; ++ki) {
              const int si = oi * 2 - 1 + ki;
              if (si < 0 || si >= x.h) continue;
              for (int kj = 0; kj < 3; ++kj) {
                const int sj = oj * 2 - 1 + kj;
                if (sj < 0 || sj >= x.w) continue;
                const T v = x.at(in, c, si, sj);
                if (v > best) {
                  best = v;
                  best_idx = static_cast<std::uint32_t>(si * x.w + sj);
                }
              }
            }
            y.v[p] = best;
            argmax_[p] = best_idx;
          }
    return y;
  }

  Tensor4<T> backward(const Tensor4<T>& dy) {
    Tensor4<T> dx(dy.n, dy.c, in_h_, in_w_);
    std::size_t p = 0;
    for (int in = 0; in < dy.n; ++in)
      for (int c = 0; c < dy.c; ++c)
        for (int oi = 0; oi < dy.h; ++oi)
          for (int oj = 0; oj < dy.w; ++oj, ++p) {
            const std::uint32_t idx = argmax_[p];
            dx.at(in, c, static_cast<int>(idx) / in_w_, static_cast<int>(idx) % in_w_) += dy.v[p];
          }
    return dx;
  }

 private:
  int in_h_ = 0, in_w_ = 0;
  std::vector<std::uint32_t> argmax_;
};

template <typename T>
class GlobalAvgPool {
 public:
  Tensor4<T> forward(const Tensor4<T>& x) {
    in_h_ = x.h;
    in_w_ = x.w;
    Tensor4<T> y(x.n, x.c, 1, 1);
    const double inv = 1.0 / (static_cast<double>(x.h) * x.w);
    for (int in = 0; in < x.n; ++in)
      for (int c = 0; c < x.c; ++c) {
        double s = 0.0;
        for (int i = 0; i < x.h; ++i)
          for (int j = 0; j < x.w; ++j) s += static_cast<double>(x.at(in, c, i, j));
        y.at(in, c, 0, 0) = static_cast<T>(s * inv);
      }
    return y;
  }
  Tensor4<T> backward(const Tensor4<T>& dy) {
    Tensor4<T> dx(dy.n, dy.c, in_h_, in_w_);
    const T inv = static_cast<T>(1.0 / (static_cast<double>(in_h_) * in_w_));
    for (int in = 0; in < dy.n; ++in)
      for (int c = 0; c < dy.c; ++c) {
        const T g = dy.at(in, c, 0, 0) * inv;
        for (int i = 0; i < in_h_; ++i)
          for (int j = 0; j < in_w_; ++j) dx.at(in, c, i, j) = g;
      }
    return dx;
  }

 private:
  int in_h_ = 0, in_w_ = 0;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(const std::string& name, int in_dim, int out_dim) : fi_(in_dim), fo_(out_dim) {
    weight_.name = name + ".w";
    weight_.dims = {fo_, fi_};
    weight_.init_size(static_cast<std::size_t>(fo_) * fi_);
    bias_.name = name + ".b";
    bias_.dims = {fo_};
    bias_.init_size(static_cast<std::size_t>(fo_));
  }

  void init(Rng& rng) {
    cnn_detail::he_init(weight_, static_cast<std::size_t>(fi_), rng);
    for (auto& b : bias_.w) b = T(0);
  }

  int out_dim() const { return fo_; }
  int in_dim() const { return fi_; }

  // x: n x fi_ (as tensor n,fi,1,1)
  Tensor4<T> forward(const Tensor4<T>& x) {
    x_cache_ = x;
    Tensor4<T> y(x.n, fo_, 1, 1);
    Eigen::Map<const RowMajorMat<T>> xm(x.v.data(), x.n, fi_);
    Eigen::Map<const RowMajorMat<T>> wm(weight_.w.data(), fo_, fi_);
    Eigen::Map<RowMajorMat<T>> ym(y.v.data(), x.n, fo_);
    ym.noalias() = xm * wm.transpose();
    for (int in = 0; in < x.n; ++in)
      for (int o = 0; o < fo_; ++o) y.at(in, o, 0, 0) += bias_.w[static_cast<std::size_t>(o)];
    return y;
  }

  Tensor4<T> backward(const Tensor4<T>& dy) {
    Tensor4<T> dx(x_cache_.n, fi_, 1, 1);
    Eigen::Map<const RowMajorMat<T>> dym(dy.v.data(), dy.n, fo_);
    Eigen::Map<const RowMajorMat<T>> xm(x_cache_.v.data(), x_cache_.n, fi_);
    Eigen::Map<const RowMajorMat<T>> wm(weight_.w.data(), fo_, fi_);
    Eigen::Map<RowMajorMat<T>> gm(weight_.g.data(), fo_, fi_);
    Eigen::Map<RowMajorMat<T>> dxm(dx.v.data(), dx.n, fi_);
    gm.noalias() += dym.transpose() * xm;
    for (int in = 0; in < dy.n; ++in)
      for (int o = 0; o < fo_; ++o) bias_.g[static_cast<std::size_t>(o)] += dy.at(in, o, 0, 0);
    dxm.noalias() = dym * wm;
    return dx;
  }

  void params(std::vector<Param<T>*>& out) {
    out.push_back(&weight_);
    out.push_back(&bias_);
  }

 private:
  int fi_ = 0, fo_ = 0;
  Param<T> weight_, bias_;
  Tensor4<T> x_cache_;
};

// conv-bn-relu-conv-bn plus identity or 1x1-projection shortcut, relu after
// the join.
template <typename T>
class BasicBlock {
 public:
  BasicBlock() = default;
  BasicBlock(const std::string& prefix, int in_ch, int out_ch, int stride)
      : has_proj_(stride != 1 || in_ch != out_ch),
        conv1_(prefix + ".conv1.w", in_ch, out_ch, 3, stride, 1),
        bn1_(prefix + ".bn1", out_ch),
        conv2_(prefix + ".conv2.w", out_ch, out_ch, 3, 1, 1),
        bn2_(prefix + ".bn2", out_ch) {
    if (has_proj_) {
      proj_ = Conv2d<T>(prefix + ".proj.w", in_ch, out_ch, 1, stride, 0);
      bnp_ = BatchNorm2d<T>(prefix + ".bnp", out_ch);
    }
  }

  void init(Rng& rng) {
    conv1_.init(rng);
    conv2_.init(rng);
    if (has_proj_) proj_.init(rng);
  }

  Tensor4<T> forward(const Tensor4<T>& x, bool train, bool update_stats) {
    Tensor4<T> y = relu1_.forward(bn1_.forward(conv1_.forward(x), train, update_stats));
    y = bn2_.forward(conv2_.forward(y), train, update_stats);
    Tensor4<T> sc = has_proj_ ? bnp_.forward(proj_.forward(x), train, update_stats) : x;
    for (std::size_t i = 0; i < y.size(); ++i) y.v[i] += sc.v[i];
    return relu_out_.forward(y);
  }

  Tensor4<T> backward(const Tensor4<T>& dy) {
    Tensor4<T> dsum = relu_out_.backward(dy);
    Tensor4<T> dx = conv1_.backward(bn1_.backward(
        relu1_.backward(conv2_.backward(bn2_.backward(dsum)))));
    if (has_proj_) {
      Tensor4<T> dsc = proj_.backward(bnp_.backward(dsum));
      for (std::size_t i = 0; i < dx.size(); ++i) dx.v[i] += dsc.v[i];
    } else {
      for (std::size_t i = 0; i < dx.size(); ++i) dx.v[i] += dsum.v[i];
    }
    return dx;
  }

  void params(std::vector<Param<T>*>& out) {
    conv1_.params(out);
    bn1_.params(out);
    conv2_.params(out);
    bn2_.params(out);
    if (has_proj_) {
      proj_.params(out);
      bnp_.params(out);
    }
  }

 private:
  bool has_proj_ = false;
  Conv2d<T> conv1_;
  BatchNorm2d<T> bn1_;
  Relu<T> relu1_;
  Conv2d<T> conv2_;
  BatchNorm2d<T> bn2_;
  Conv2d<T> proj_;
  BatchNorm2d<T> bnp_;
  Relu<T> relu_out_;
};

// ---------------------------------------------------------------------------
// Network description

struct StageSpec {
  int out_channels = 0;
  int blocks = 1;
  int stride = 1;
};

struct NetSpec {
  int window = 32;
  int stem_channels = 16;
  int stem_kernel = 3;
  int stem_stride = 1;
  bool stem_maxpool = false;
  std::vector<StageSpec> stages;
  int classes = 2;
  std::uint64_t seed = 0;

  int feature_dim() const {
    return stages.empty() ? stem_channels : stages.back().out_channels;
  }

  int downsampling_factor() const {
    int f = stem_stride * (stem_maxpool ? 2 : 1);
    for (const StageSpec& s : stages) f *= s.stride;
    return f;
  }

  std::string canonical_text() const {
    std::ostringstream ss;
    ss << "specdcnet/1;in=1x" << window << ";stem=" << stem_channels << ",k" << stem_kernel
       << ",s" << stem_stride << ";pool=" << (stem_maxpool ? "max3s2" : "none") << ";stages=";
    for (std::size_t i = 0; i < stages.size(); ++i) {
      if (i) ss << ',';
      ss << stages[i].out_channels << 'x' << stages[i].blocks << 's' << stages[i].stride;
    }
    ss << ";K=" << classes << ";seed=" << seed;
    return ss.str();
  }

  static NetSpec parse(const std::string& text);
};

inline NetSpec NetSpec::parse(const std::string& text) {
  NetSpec spec;
  std::istringstream ss(text);
  std::string field;
  bool have_header = false;
  while (std::getline(ss, field, ';')) {
    if (field == "specdcnet/1") {
      have_header = true;
    } else if (field.rfind("in=", 0) == 0) {
      if (std::sscanf(field.c_str(), "in=1x%d", &spec.window) != 1)
        throw FormatError("bad net descriptor field: " + field);
    } else if (field.rfind("stem=", 0) == 0) {
      if (std::sscanf(field.c_str(), "stem=%d,k%d,s%d", &spec.stem_channels,
                      &spec.stem_kernel, &spec.stem_stride) != 3)
        throw FormatError("bad net descriptor field: " + field);
    } else if (field.rfind("pool=", 0) == 0) {
      spec.stem_maxpool = (field == "pool=max3s2");
      if (!spec.stem_maxpool && field != "pool=none")
        throw FormatError("bad net descriptor field: " + field);
    } else if (field.rfind("stages=", 0) == 0) {
      std::istringstream st(field.substr(7));
      std::string item;
      while (std::getline(st, item, ',')) {
        StageSpec stage;
        if (std::sscanf(item.c_str(), "%dx%ds%d", &stage.out_channels, &stage.blocks,
                        &stage.stride) != 3)
          throw FormatError("bad stage descriptor: " + item);
        spec.stages.push_back(stage);
      }
    } else if (field.rfind("K=", 0) == 0) {
      spec.classes = std::stoi(field.substr(2));
    } else if (field.rfind("seed=", 0) == 0) {
      spec.seed = std::stoull(field.substr(5));
    } else {
      throw FormatError("unknown net descriptor field: " + field);
    }
  }
  if (!have_header) throw FormatError("missing net descriptor header");
  return spec;
}

enum class Arch { reduced, resnet18 };

inline NetSpec make_net_spec(Arch arch, int window, int classes, std::uint64_t seed) {
  NetSpec spec;
  spec.window = window;
  spec.classes = classes;
  spec.seed = seed;
  if (arch == Arch::reduced) {
    spec.stem_channels = 16;
    spec.stem_kernel = 3;
    spec.stem_stride = 1;
    spec.stem_maxpool = false;
    spec.stages = {{32, 2, 2}, {64, 2, 2}};
  } else {
    spec.stem_channels = 64;
    spec.stem_kernel = 7;
    spec.stem_stride = 2;
    spec.stem_maxpool = true;
    spec.stages = {{64, 2, 1}, {128, 2, 2}, {256, 2, 2}, {512, 2, 2}};
  }
  return spec;
}

// ---------------------------------------------------------------------------
// Network

struct TrainConfig {
  double learning_rate = 0.01;
  double momentum = 0.9;
  double weight_decay = 1e-5;
  int batch_size = 64;
  bool balanced_sampling = true;
  std::uint64_t seed = 0;
};

template <typename T>
class CnnModel {
 public:
  CnnModel() = default;

  explicit CnnModel(const NetSpec& spec) : spec_(spec) {
    if (spec.window < 8) throw ConfigError("cnn: window must be >= 8");
    if (spec.classes < 2) throw ConfigError("cnn: need at least 2 classes");
    if (spec.window % spec.downsampling_factor() != 0)
      throw ConfigError("cnn: window not divisible by total downsampling factor");
    stem_conv_ = Conv2d<T>("stem.conv.w", 1, spec.stem_channels, spec.stem_kernel,
                           spec.stem_stride, spec.stem_kernel / 2);
    stem_bn_ = BatchNorm2d<T>("stem.bn", spec.stem_channels);
    int ch = spec.stem_channels;
    for (std::size_t s = 0; s < spec.stages.size(); ++s) {
      for (int b = 0; b < spec.stages[s].blocks; ++b) {
        const int stride = (b == 0) ? spec.stages[s].stride : 1;
        std::ostringstream name;
        name << "s" << s << ".b" << b;
        blocks_.emplace_back(name.str(), ch, spec.stages[s].out_channels, stride);
        ch = spec.stages[s].out_channels;
      }
    }
    head_ = Linear<T>("head", ch, spec.classes);

    Rng rng(spec.seed);
    stem_conv_.init(rng);
    for (auto& b : blocks_) b.init(rng);
    head_.init(rng);
  }

  const NetSpec& spec() const { return spec_; }
  int feature_dim() const { return spec_.feature_dim(); }
  int classes() const { return spec_.classes; }

  // Returns (features rows x F, logits rows x K).
  std::pair<Eigen::MatrixXd, Eigen::MatrixXd> forward(const Tensor4<T>& batch, bool train,
                                                      bool update_stats = true) {
    if (batch.n == 0) throw ShapeError("forward: empty batch");
    if (batch.c != 1 || batch.h != spec_.window || batch.w != spec_.window)
      throw ShapeError("forward: input shape mismatch");
    Tensor4<T> x = stem_relu_.forward(
        stem_bn_.forward(stem_conv_.forward(batch), train, train && update_stats));
    if (spec_.stem_maxpool) x = stem_pool_.forward(x);
    for (auto& b : blocks_) x = b.forward(x, train, train && update_stats);
    features_cache_ = gap_.forward(x);
    Tensor4<T> logits = head_.forward(features_cache_);

    Eigen::MatrixXd f(batch.n, feature_dim());
    Eigen::MatrixXd l(batch.n, spec_.classes);
    for (int i = 0; i < batch.n; ++i) {
      for (int c = 0; c < feature_dim(); ++c) f(i, c) = static_cast<double>(features_cache_.at(i, c, 0, 0));
      for (int c = 0; c < spec_.classes; ++c) l(i, c) = static_cast<double>(logits.at(i, c, 0, 0));
    }
    return {std::move(f), std::move(l)};
  }

  // Backward from d(loss)/d(logits); accumulates into parameter gradients.
  void backward(const Eigen::MatrixXd& dlogits) {
    Tensor4<T> dl(static_cast<int>(dlogits.rows()), spec_.classes, 1, 1);
    for (int i = 0; i < dl.n; ++i)
      for (int c = 0; c < spec_.classes; ++c)
        dl.at(i, c, 0, 0) = static_cast<T>(dlogits(i, c));
    Tensor4<T> dx = gap_.backward(head_.backward(dl));
    for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) dx = it->backward(dx);
    if (spec_.stem_maxpool) dx = stem_pool_.backward(dx);
    stem_conv_.backward(stem_bn_.backward(stem_relu_.backward(dx)));
  }

  std::vector<Param<T>*> parameters() {
    std::vector<Param<T>*> out;
    stem_conv_.params(out);
    stem_bn_.params(out);
    for (auto& b : blocks_) b.params(out);
    head_.params(out);
    return out;
  }

  void zero_grad() {
    for (Param<T>* p : parameters()) std::fill(p->g.begin(), p->g.end(), T(0));
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (Param<T>* p : parameters())
      if (p->trainable) n += p->size();
    return n;
  }

  // Mean softmax cross-entropy and its gradient w.r.t. logits.
  static std::pair<double, Eigen::MatrixXd> cross_entropy(const Eigen::MatrixXd& logits,
                                                          const std::vector<int>& labels) {
    const Eigen::Index n = logits.rows();
    const Eigen::Index k = logits.cols();
    if (static_cast<Eigen::Index>(labels.size()) != n)
      throw ShapeError("cross_entropy: label count mismatch");
    Eigen::MatrixXd dlogits(n, k);
    double loss = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      if (labels[static_cast<std::size_t>(i)] < 0 || labels[static_cast<std::size_t>(i)] >= k)
        throw LabelRangeError("cross_entropy: label out of range");
      const double mx = logits.row(i).maxCoeff();
      Eigen::VectorXd e = (logits.row(i).array() - mx).exp();
      const double z = e.sum();
      loss -= std::log(e(labels[static_cast<std::size_t>(i)]) / z);
      dlogits.row(i) = (e / z).transpose() / static_cast<double>(n);
      dlogits(i, labels[static_cast<std::size_t>(i)]) -= 1.0 / static_cast<double>(n);
    }
    return {loss / static_cast<double>(n), std::move(dlogits)};
  }

  // One SGD-with-momentum step on a batch; returns the pre-update loss.
  double train_step(const Tensor4<T>& batch, const std::vector<int>& labels,
                    const TrainConfig& cfg) {
    if (cfg.learning_rate < 0) throw ConfigError("train_step: negative learning rate");
    zero_grad();
    // learning_rate 0 freezes the model entirely, batchnorm statistics included.
    auto [features, logits] =
        forward(batch, /*train=*/true, /*update_stats=*/cfg.learning_rate > 0);
    auto [loss, dlogits] = cross_entropy(logits, labels);
    backward(dlogits);
    for (Param<T>* p : parameters()) {
      if (!p->trainable) continue;
      for (std::size_t i = 0; i < p->size(); ++i) {
        const T g = p->g[i] + static_cast<T>(cfg.weight_decay) * p->w[i];
        p->vel[i] = static_cast<T>(cfg.momentum) * p->vel[i] + g;
        p->w[i] -= static_cast<T>(cfg.learning_rate) * p->vel[i];
      }
    }
    return loss;
  }

  // Fresh seeded head of shape F -> K; the trunk is untouched.
  void reinit_head(int classes, std::uint64_t seed) {
    if (classes < 2) throw ConfigError("reinit_head: need at least 2 classes");
    spec_.classes = classes;
    head_ = Linear<T>("head", feature_dim(), classes);
    Rng rng(seed);
    head_.init(rng);
  }

 private:
  NetSpec spec_;
  Conv2d<T> stem_conv_;
  BatchNorm2d<T> stem_bn_;
  Relu<T> stem_relu_;
  MaxPool3x3s2<T> stem_pool_;
  std::vector<BasicBlock<T>> blocks_;
  GlobalAvgPool<T> gap_;
  Linear<T> head_;
  Tensor4<T> features_cache_;
};

// ---------------------------------------------------------------------------
// Tile <-> tensor helpers and feature extraction.

template <typename T>
Tensor4<T> tiles_to_tensor(const TileSet& tiles, std::size_t begin, std::size_t end) {
  const int w = tiles.window;
  Tensor4<T> batch(static_cast<int>(end - begin), 1, w, w);
  for (std::size_t r = begin; r < end; ++r)
    for (int i = 0; i < w; ++i)
      for (int j = 0; j < w; ++j)
        batch.at(static_cast<int>(r - begin), 0, i, j) =
            static_cast<T>(tiles.tiles[r].pixels(i, j));
  return batch;
}

// Eval-mode features aligned with the TileSet order.
template <typename T>
FeatureMatrix extract_features(CnnModel<T>& model, const TileSet& tiles, int batch_size = 64) {
  if (tiles.empty()) throw EmptySetError("extract_features: empty tile set");
  if (batch_size < 1) throw ConfigError("extract_features: batch_size must be >= 1");
  FeatureMatrix out(static_cast<Eigen::Index>(tiles.size()), model.feature_dim());
  for (std::size_t begin = 0; begin < tiles.size(); begin += static_cast<std::size_t>(batch_size)) {
    const std::size_t end = std::min(tiles.size(), begin + static_cast<std::size_t>(batch_size));
    Tensor4<T> batch = tiles_to_tensor<T>(tiles, begin, end);
    auto [features, logits] = model.forward(batch, /*train=*/false);
    out.middleRows(static_cast<Eigen::Index>(begin), static_cast<Eigen::Index>(end - begin)) =
        features;
  }
  return out;
}

// ---------------------------------------------------------------------------
// SPCK checkpoints.
//
//   "SPCK" u32 version=1, u32 descriptor length + UTF-8 canonical text,
//   u32 tensor count; per tensor: u16 name length + name, u8 rank,
//   rank x u32 dims, LE f32 payload; then optional "PCA1"/"KMN1" sections.

struct Checkpoint {
  NetSpec spec;
  std::map<std::string, std::pair<std::vector<int>, std::vector<float>>> tensors;
  std::optional<PcaModel> pca;
  std::optional<Eigen::MatrixXd> centroids;
};

template <typename T>
void save_checkpoint(CnnModel<T>& model, const std::string& path,
                     const PcaModel* pca = nullptr,
                     const Eigen::MatrixXd* centroids = nullptr) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for writing: " + path);
  io::write_magic(os, "SPCK");
  io::write_le<std::uint32_t>(os, 1);
  const std::string desc = model.spec().canonical_text();
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(desc.size()));
  os.write(desc.data(), static_cast<std::streamsize>(desc.size()));
  auto params = model.parameters();
  io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.size()));
  std::vector<float> buf;
  for (const Param<T>* p : params) {
    io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(p->name.size()));
    os.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(p->dims.size()));
    for (int d : p->dims) io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    buf.resize(p->size());
    for (std::size_t i = 0; i < p->size(); ++i) buf[i] = static_cast<float>(p->w[i]);
    io::write_f32_span(os, buf.data(), buf.size());
  }
  if (pca) write_pca_section(os, *pca);
  if (centroids) write_kmeans_section(os, *centroids);
  if (!os) throw IoError("write failed: " + path);
}

inline Checkpoint load_checkpoint_raw(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  io::expect_magic(is, "SPCK");
  const auto version = io::read_le<std::uint32_t>(is);
  if (version != 1) throw VersionError("SPCK: unsupported version");
  const auto desc_len = io::read_le<std::uint32_t>(is);
  std::string desc(desc_len, '\0');
  is.read(desc.data(), desc_len);
  if (!is) throw FormatError("SPCK: truncated descriptor");
  Checkpoint ck;
  ck.spec = NetSpec::parse(desc);
  const auto n_tensors = io::read_le<std::uint32_t>(is);
  for (std::uint32_t t = 0; t < n_tensors; ++t) {
    const auto name_len = io::read_le<std::uint16_t>(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    if (!is) throw FormatError("SPCK: truncated tensor name");
    const auto rank = io::read_le<std::uint8_t>(is);
    std::vector<int> dims(rank);
    std::size_t count = 1;
    for (int d = 0; d < rank; ++d) {
      dims[static_cast<std::size_t>(d)] = static_cast<int>(io::read_le<std::uint32_t>(is));
      count *= static_cast<std::size_t>(dims[static_cast<std::size_t>(d)]);
    }
    std::vector<float> payload(count);
    io::read_f32_span(is, payload.data(), count);
    ck.tensors[name] = {std::move(dims), std::move(payload)};
  }
  while (true) {
    const std::string tag = io::read_tag(is);
    if (tag.empty()) break;
    if (tag == "PCA1")
      ck.pca = read_pca_section(is);
    else if (tag == "KMN1")
      ck.centroids = read_kmeans_section(is);
    else
      throw FormatError("SPCK: unknown section tag '" + tag + "'");
  }
  return ck;
}

template <typename T>
CnnModel<T> model_from_checkpoint(const Checkpoint& ck) {
  CnnModel<T> model(ck.spec);
  auto params = model.parameters();
  if (params.size() != ck.tensors.size())
    throw FormatError("SPCK: tensor count does not match architecture");
  for (Param<T>* p : params) {
    auto it = ck.tensors.find(p->name);
    if (it == ck.tensors.end()) throw FormatError("SPCK: missing tensor " + p->name);
    if (it->second.first != p->dims || it->second.second.size() != p->size())
      throw FormatError("SPCK: shape mismatch for tensor " + p->name);
    for (std::size_t i = 0; i < p->size(); ++i) p->w[i] = static_cast<T>(it->second.second[i]);
  }
  return model;
}

template <typename T>
std::pair<CnnModel<T>, Checkpoint> load_checkpoint(const std::string& path) {
  Checkpoint ck = load_checkpoint_raw(path);
  return {model_from_checkpoint<T>(ck), std::move(ck)};
}

}  // namespace specdc
