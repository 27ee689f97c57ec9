#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "dpnas/errors.hpp"
#include "dpnas/rng.hpp"
#include "dpnas/tensor.hpp"

namespace dpnas {

// Trainable buffer: value, accumulated gradient and Adam moments. Flat
// storage; dims are kept only for bookkeeping and serialization.
template <typename T>
struct Param {
  std::string name;
  std::vector<int> dims;
  std::vector<T> value;
  std::vector<T> grad;
  std::vector<T> m;
  std::vector<T> v;
  std::int64_t step = 0;

  static Param zeros(std::string name, std::vector<int> dims) {
    Param p;
    p.name = std::move(name);
    p.dims = std::move(dims);
    std::int64_t n = 1;
    for (int d : p.dims) n *= d;
    p.value.assign(static_cast<std::size_t>(n), T(0));
    p.grad.assign(static_cast<std::size_t>(n), T(0));
    p.m.assign(static_cast<std::size_t>(n), T(0));
    p.v.assign(static_cast<std::size_t>(n), T(0));
    return p;
  }

  std::int64_t size() const { return static_cast<std::int64_t>(value.size()); }

  void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }

  void fill_value(T x) { std::fill(value.begin(), value.end(), x); }
};

// He initialization: zero-mean Gaussian with std sqrt(2 / fan_in).
template <typename T>
void kaiming_init(Param<T>& p, std::int64_t fan_in, RngStream& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  for (auto& x : p.value) x = static_cast<T>(rng.normal() * stddev);
}

// 2-D cross-correlation, stride 1, same (zero) padding, odd kernel.
// w dims {co, ci, k, k}, b dims {co}.
template <typename T>
void conv2d_forward(const Tensor<T>& x, const Param<T>& w, const Param<T>& b,
                    Tensor<T>& y) {
  const int co = w.dims[0], ci = w.dims[1], k = w.dims[2];
  if (x.c != ci)
    throw ShapeMismatchError("conv2d: input has " + std::to_string(x.c) +
                             " channels, weight expects " + std::to_string(ci));
  const int pad = (k - 1) / 2;
  y = Tensor<T>(co, x.h, x.w);
  for (int oc = 0; oc < co; ++oc) {
    T* yp = y.plane(oc);
    std::fill(yp, yp + static_cast<std::size_t>(x.h) * x.w, b.value[oc]);
    for (int ic = 0; ic < ci; ++ic) {
      const T* xp = x.plane(ic);
      const T* wk = &w.value[(static_cast<std::size_t>(oc) * ci + ic) * k * k];
      for (int kh = 0; kh < k; ++kh) {
        for (int kw = 0; kw < k; ++kw) {
          const T wv = wk[kh * k + kw];
          const int dh = kh - pad, dw = kw - pad;
          const int h0 = std::max(0, -dh), h1 = std::min(x.h, x.h - dh);
          const int w0 = std::max(0, -dw), w1 = std::min(x.w, x.w - dw);
          for (int hi = h0; hi < h1; ++hi) {
            const T* xr = xp + static_cast<std::size_t>(hi + dh) * x.w + dw;
            T* yr = yp + static_cast<std::size_t>(hi) * x.w;
            for (int wi = w0; wi < w1; ++wi) yr[wi] += wv * xr[wi];
          }
        }
      }
    }
  }
}

// Accumulates into w.grad / b.grad; writes dx if non-null.
template <typename T>
void conv2d_backward(const Tensor<T>& x, Param<T>& w, Param<T>& b,
                     const Tensor<T>& dy, Tensor<T>* dx) {
  const int co = w.dims[0], ci = w.dims[1], k = w.dims[2];
  const int pad = (k - 1) / 2;
  if (dx) {
    *dx = Tensor<T>(ci, x.h, x.w);
    for (int oc = 0; oc < co; ++oc) {
      const T* dyp = dy.plane(oc);
      for (int ic = 0; ic < ci; ++ic) {
        T* dxp = dx->plane(ic);
        const T* wk = &w.value[(static_cast<std::size_t>(oc) * ci + ic) * k * k];
        for (int kh = 0; kh < k; ++kh) {
          for (int kw = 0; kw < k; ++kw) {
            const T wv = wk[kh * k + kw];
            const int dh = pad - kh, dw = pad - kw;
            const int h0 = std::max(0, -dh), h1 = std::min(x.h, x.h - dh);
            const int w0 = std::max(0, -dw), w1 = std::min(x.w, x.w - dw);
            for (int hi = h0; hi < h1; ++hi) {
              const T* dyr = dyp + static_cast<std::size_t>(hi + dh) * x.w + dw;
              T* dxr = dxp + static_cast<std::size_t>(hi) * x.w;
              for (int wi = w0; wi < w1; ++wi) dxr[wi] += wv * dyr[wi];
            }
          }
        }
      }
    }
  }
  for (int oc = 0; oc < co; ++oc) {
    const T* dyp = dy.plane(oc);
    for (int ic = 0; ic < ci; ++ic) {
      const T* xp = x.plane(ic);
      T* gw = &w.grad[(static_cast<std::size_t>(oc) * ci + ic) * k * k];
      for (int kh = 0; kh < k; ++kh) {
        for (int kw = 0; kw < k; ++kw) {
          const int dh = kh - pad, dw = kw - pad;
          const int h0 = std::max(0, -dh), h1 = std::min(x.h, x.h - dh);
          const int w0 = std::max(0, -dw), w1 = std::min(x.w, x.w - dw);
          T acc = T(0);
          for (int hi = h0; hi < h1; ++hi) {
            const T* xr = xp + static_cast<std::size_t>(hi + dh) * x.w + dw;
            const T* dyr = dyp + static_cast<std::size_t>(hi) * x.w;
            for (int wi = w0; wi < w1; ++wi) acc += xr[wi] * dyr[wi];
          }
          gw[kh * k + kw] += acc;
        }
      }
    }
    T acc = T(0);
    const std::size_t plane = static_cast<std::size_t>(dy.h) * dy.w;
    for (std::size_t i = 0; i < plane; ++i) acc += dyp[i];
    b.grad[oc] += acc;
  }
}

// Per-channel PReLU. a dims {c}.
template <typename T>
void prelu_forward(const Tensor<T>& x, const Param<T>& a, Tensor<T>& y) {
  y = Tensor<T>(x.c, x.h, x.w);
  const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
  for (int ci = 0; ci < x.c; ++ci) {
    const T s = a.value[ci];
    const T* xp = x.plane(ci);
    T* yp = y.plane(ci);
    for (std::size_t i = 0; i < plane; ++i)
      yp[i] = xp[i] >= T(0) ? xp[i] : s * xp[i];
  }
}

template <typename T>
void prelu_backward(const Tensor<T>& x, Param<T>& a, const Tensor<T>& dy,
                    Tensor<T>& dx) {
  dx = Tensor<T>(x.c, x.h, x.w);
  const std::size_t plane = static_cast<std::size_t>(x.h) * x.w;
  for (int ci = 0; ci < x.c; ++ci) {
    const T s = a.value[ci];
    const T* xp = x.plane(ci);
    const T* dyp = dy.plane(ci);
    T* dxp = dx.plane(ci);
    T ga = T(0);
    for (std::size_t i = 0; i < plane; ++i) {
      if (xp[i] >= T(0)) {
        dxp[i] = dyp[i];
      } else {
        dxp[i] = s * dyp[i];
        ga += dyp[i] * xp[i];
      }
    }
    a.grad[ci] += ga;
  }
}

// out[c][h*r+i][w*r+j] = in[c*r*r + i*r + j][h][w]
template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int r) {
  if (x.c % (r * r) != 0)
    throw ShapeMismatchError("pixel_shuffle: channels " + std::to_string(x.c) +
                             " not divisible by " + std::to_string(r * r));
  Tensor<T> y(x.c / (r * r), x.h * r, x.w * r);
  for (int oc = 0; oc < y.c; ++oc) {
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < r; ++j) {
        const T* xp = x.plane(oc * r * r + i * r + j);
        for (int hi = 0; hi < x.h; ++hi) {
          const T* xr = xp + static_cast<std::size_t>(hi) * x.w;
          T* yr = y.plane(oc) + static_cast<std::size_t>(hi * r + i) * y.w + j;
          for (int wi = 0; wi < x.w; ++wi) yr[wi * r] = xr[wi];
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int r) {
  if (x.h % r != 0 || x.w % r != 0)
    throw ShapeMismatchError("pixel_unshuffle: spatial size " +
                             std::to_string(x.h) + "x" + std::to_string(x.w) +
                             " not divisible by " + std::to_string(r));
  Tensor<T> y(x.c * r * r, x.h / r, x.w / r);
  for (int ic = 0; ic < x.c; ++ic) {
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < r; ++j) {
        T* yp = y.plane(ic * r * r + i * r + j);
        for (int hi = 0; hi < y.h; ++hi) {
          const T* xr =
              x.plane(ic) + static_cast<std::size_t>(hi * r + i) * x.w + j;
          T* yr = yp + static_cast<std::size_t>(hi) * y.w;
          for (int wi = 0; wi < y.w; ++wi) yr[wi] = xr[wi * r];
        }
      }
    }
  }
  return y;
}

template <typename T>
Tensor<T> add_tensors(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b))
    throw ShapeMismatchError("add: operand shapes differ");
  Tensor<T> y(a.c, a.h, a.w);
  for (std::size_t i = 0; i < a.data.size(); ++i)
    y.data[i] = a.data[i] + b.data[i];
  return y;
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.h != b.h || a.w != b.w)
    throw ShapeMismatchError("concat: spatial sizes differ");
  Tensor<T> y(a.c + b.c, a.h, a.w);
  std::copy(a.data.begin(), a.data.end(), y.data.begin());
  std::copy(b.data.begin(), b.data.end(), y.data.begin() + a.data.size());
  return y;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int c0, int c1) {
  Tensor<T> y(c1 - c0, x.h, x.w);
  std::copy(x.plane(c0), x.plane(c0) + y.data.size(), y.data.begin());
  return y;
}

template <typename T>
Tensor<T> clamp01(const Tensor<T>& x) {
  Tensor<T> y = x;
  for (auto& v : y.data) v = std::clamp(v, T(0), T(1));
  return y;
}

// Mean squared error, accumulated in double regardless of T.
template <typename T>
double mse(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b))
    throw ShapeMismatchError("mse: operand shapes differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - static_cast<double>(b.data[i]);
    acc += d * d;
  }
  return acc / static_cast<double>(a.data.size());
}

// 10*log10(maxv^2 / mse), capped at 99 dB; the cap absorbs mse below 1e-12.
inline double psnr_from_mse(double mse_v, double maxv = 1.0) {
  if (mse_v < 1e-12) return 99.0;
  return std::min(99.0, 10.0 * std::log10(maxv * maxv / mse_v));
}

template <typename T>
double psnr(const Tensor<T>& a, const Tensor<T>& b, double maxv = 1.0) {
  return psnr_from_mse(mse(a, b), maxv);
}

template <typename T>
void adam_step(Param<T>& p, double lr, double beta1 = 0.9,
               double beta2 = 0.999, double eps = 1e-8) {
  p.step += 1;
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(p.step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(p.step));
  for (std::size_t i = 0; i < p.value.size(); ++i) {
    const double g = static_cast<double>(p.grad[i]);
    const double m = beta1 * static_cast<double>(p.m[i]) + (1.0 - beta1) * g;
    const double v = beta2 * static_cast<double>(p.v[i]) + (1.0 - beta2) * g * g;
    p.m[i] = static_cast<T>(m);
    p.v[i] = static_cast<T>(v);
    p.value[i] -=
        static_cast<T>(lr * (m / bc1) / (std::sqrt(v / bc2) + eps));
  }
}

struct GradCheckItem {
  std::string param;
  std::int64_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::int64_t coords_checked = 0;
  GradCheckItem worst;
  bool ok(double tol) const { return coords_checked > 0 && max_rel_err < tol; }
};

struct GradCheckOptions {
  double h = 1e-5;
  std::int64_t max_coords_per_param = 0;  // 0 = all
  std::uint64_t seed = 1234;
};

// Central-difference check of analytic gradients. loss(true) must zero and
// refill every grad buffer; loss(false) must not touch them.
inline GradCheckReport grad_check(
    const std::vector<Param<double>*>& params,
    const std::function<double(bool)>& loss,
    const GradCheckOptions& opt = {}) {
  GradCheckReport rep;
  loss(true);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto* p : params) analytic.push_back(p->grad);
  RngStream pick(opt.seed);
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Param<double>& p = *params[pi];
    const std::int64_t n = p.size();
    std::vector<std::int64_t> coords;
    if (opt.max_coords_per_param <= 0 || n <= opt.max_coords_per_param) {
      coords.resize(static_cast<std::size_t>(n));
      std::iota(coords.begin(), coords.end(), 0);
    } else {
      for (std::int64_t i = 0; i < opt.max_coords_per_param; ++i)
        coords.push_back(static_cast<std::int64_t>(
            pick.uniform_int(static_cast<std::uint64_t>(n))));
    }
    for (std::int64_t ci : coords) {
      const double orig = p.value[ci];
      const double h = opt.h * std::max(1.0, std::abs(orig));
      p.value[ci] = orig + h;
      const double lp = loss(false);
      p.value[ci] = orig - h;
      const double lm = loss(false);
      p.value[ci] = orig;
      const double numeric = (lp - lm) / (2.0 * h);
      const double a = analytic[pi][ci];
      const double rel =
          std::abs(a - numeric) /
          std::max({1e-3, std::abs(a), std::abs(numeric)});
      rep.coords_checked += 1;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst = {p.name, ci, a, numeric, rel};
      }
    }
  }
  return rep;
}

}  // namespace dpnas
