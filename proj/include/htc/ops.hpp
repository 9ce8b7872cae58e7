#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "htc/tensor.hpp"

// Differentiable operations. Forward evaluation is eager; each op attaches a
// backward closure that accumulates into the gradients of parents that
// require them. GEMM-shaped inner loops go through Eigen; everything stays
// single-threaded and deterministic.

namespace htc {

namespace detail {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapRM = Eigen::Map<MatRM<S>>;
template <typename S>
using CMapRM = Eigen::Map<const MatRM<S>>;

inline void check(bool cond, const std::string& msg) {
  if (!cond) throw std::invalid_argument(msg);
}

// Unpadded cross-correlation patch matrix: rows = C*kh*kw, cols = oh*ow.
template <typename S>
void im2col(const S* src, int C, int H, int W, int kh, int kw, int stride, int pad,
            int oh, int ow, S* dst) {
  for (int c = 0; c < C; ++c) {
    const S* plane = src + static_cast<int64_t>(c) * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        S* row = dst + (static_cast<int64_t>(c) * kh * kw + ki * kw + kj) *
                           static_cast<int64_t>(oh) * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= H) {
            for (int ox = 0; ox < ow; ++ox) row[oy * ow + ox] = S(0);
            continue;
          }
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kj - pad;
            row[oy * ow + ox] = (ix >= 0 && ix < W) ? plane[iy * W + ix] : S(0);
          }
        }
      }
    }
  }
}

template <typename S>
void col2im_accum(const S* cols, int C, int H, int W, int kh, int kw, int stride,
                  int pad, int oh, int ow, S* dst) {
  for (int c = 0; c < C; ++c) {
    S* plane = dst + static_cast<int64_t>(c) * H * W;
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const S* row = cols + (static_cast<int64_t>(c) * kh * kw + ki * kw + kj) *
                                  static_cast<int64_t>(oh) * ow;
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride + ki - pad;
          if (iy < 0 || iy >= H) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride + kj - pad;
            if (ix >= 0 && ix < W) plane[iy * W + ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, NCHW. weight [K,C,kh,kw], bias [K].
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> conv2d(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias,
                 int stride = 1, int padding = 0) {
  using detail::check;
  check(input.ndim() == 4, "conv2d: input must be [N,C,H,W], got " + shape_str(input.shape()));
  check(weight.ndim() == 4, "conv2d: weight must be [K,C,kh,kw], got " + shape_str(weight.shape()));
  const int N = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  const int K = weight.dim(0), kh = weight.dim(2), kw = weight.dim(3);
  check(weight.dim(1) == C, "conv2d: weight channel dim " + std::to_string(weight.dim(1)) +
                                " != input channel dim " + std::to_string(C));
  check(bias.ndim() == 1 && bias.dim(0) == K,
        "conv2d: bias dim must equal K=" + std::to_string(K) + ", got " + shape_str(bias.shape()));
  check(kh % 2 == 1 && kw % 2 == 1, "conv2d: kernel dims must be odd");
  check(padding >= 0, "conv2d: padding must be >= 0");
  check(stride >= 1, "conv2d: stride must be >= 1");
  check((H + 2 * padding - kh) % stride == 0, "conv2d: height " + std::to_string(H) +
                                                  " not compatible with stride/padding");
  check((W + 2 * padding - kw) % stride == 0, "conv2d: width " + std::to_string(W) +
                                                  " not compatible with stride/padding");
  const int oh = (H + 2 * padding - kh) / stride + 1;
  const int ow = (W + 2 * padding - kw) / stride + 1;
  const int64_t patch = static_cast<int64_t>(C) * kh * kw;
  const int64_t opix = static_cast<int64_t>(oh) * ow;

  std::vector<S> out(static_cast<size_t>(N) * K * opix);
  std::vector<S> cols(static_cast<size_t>(patch) * opix);
  detail::CMapRM<S> Wm(weight.data().data(), K, patch);
  for (int n = 0; n < N; ++n) {
    detail::im2col(input.data().data() + static_cast<int64_t>(n) * C * H * W, C, H, W, kh, kw,
                   stride, padding, oh, ow, cols.data());
    detail::CMapRM<S> Cm(cols.data(), patch, opix);
    detail::MapRM<S> Om(out.data() + static_cast<int64_t>(n) * K * opix, K, opix);
    Om.noalias() = Wm * Cm;
    for (int k = 0; k < K; ++k) Om.row(k).array() += bias.data()[static_cast<size_t>(k)];
  }

  auto in_n = input.raw();
  auto w_n = weight.raw();
  auto b_n = bias.raw();
  return make_op<S>(
      {N, K, oh, ow}, std::move(out), {input, weight, bias},
      [in_n, w_n, b_n, N, C, H, W, K, kh, kw, stride, padding, oh, ow, patch,
       opix](detail::Node<S>& self) {
        if (w_n->requires_grad) w_n->ensure_grad();
        if (b_n->requires_grad) b_n->ensure_grad();
        if (in_n->requires_grad) in_n->ensure_grad();
        detail::CMapRM<S> Wm(w_n->value.data(), K, patch);
        std::vector<S> cols(static_cast<size_t>(patch) * opix);
        std::vector<S> dcols;
        for (int n = 0; n < N; ++n) {
          detail::CMapRM<S> dOm(self.grad.data() + static_cast<int64_t>(n) * K * opix, K, opix);
          if (b_n->requires_grad) {
            detail::MapRM<S> dBm(b_n->grad.data(), K, 1);
            dBm.noalias() += dOm.rowwise().sum();
          }
          if (w_n->requires_grad || in_n->requires_grad) {
            detail::im2col(in_n->value.data() + static_cast<int64_t>(n) * C * H * W, C, H, W, kh,
                           kw, stride, padding, oh, ow, cols.data());
          }
          if (w_n->requires_grad) {
            detail::CMapRM<S> Cm(cols.data(), patch, opix);
            detail::MapRM<S> dWm(w_n->grad.data(), K, patch);
            dWm.noalias() += dOm * Cm.transpose();
          }
          if (in_n->requires_grad) {
            dcols.assign(static_cast<size_t>(patch) * opix, S(0));
            detail::MapRM<S> dCm(dcols.data(), patch, opix);
            dCm.noalias() = Wm.transpose() * dOm;
            detail::col2im_accum(dcols.data(), C, H, W, kh, kw, stride, padding, oh, ow,
                                 in_n->grad.data() + static_cast<int64_t>(n) * C * H * W);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// deconv2d: transposed convolution, kernel = 2*stride, padding = stride/2,
// so the output spatial size is exactly input*stride. weight [Cin,Cout,k,k].
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> deconv2d(const Tensor<S>& input, const Tensor<S>& weight, int stride) {
  using detail::check;
  check(input.ndim() == 4, "deconv2d: input must be [N,C,h,w], got " + shape_str(input.shape()));
  check(weight.ndim() == 4, "deconv2d: weight must be [Cin,Cout,k,k]");
  check(stride >= 1, "deconv2d: stride must be >= 1");
  const int N = input.dim(0), Cin = input.dim(1), h = input.dim(2), w = input.dim(3);
  const int k = 2 * stride, pad = stride / 2;
  check(weight.dim(0) == Cin, "deconv2d: weight input-channel dim " +
                                  std::to_string(weight.dim(0)) + " != input channels " +
                                  std::to_string(Cin));
  check(weight.dim(2) == k && weight.dim(3) == k,
        "deconv2d: kernel must be 2*stride=" + std::to_string(k) + ", got " +
            shape_str(weight.shape()));
  const int Cout = weight.dim(1);
  const int H = h * stride, W = w * stride;
  const int64_t patch = static_cast<int64_t>(Cout) * k * k;
  const int64_t ipix = static_cast<int64_t>(h) * w;

  std::vector<S> out(static_cast<size_t>(N) * Cout * H * W, S(0));
  std::vector<S> cols(static_cast<size_t>(patch) * ipix);
  detail::CMapRM<S> Wm(weight.data().data(), Cin, patch);
  for (int n = 0; n < N; ++n) {
    detail::CMapRM<S> Im(input.data().data() + static_cast<int64_t>(n) * Cin * ipix, Cin, ipix);
    detail::MapRM<S> Cm(cols.data(), patch, ipix);
    Cm.noalias() = Wm.transpose() * Im;
    detail::col2im_accum(cols.data(), Cout, H, W, k, k, stride, pad, h, w,
                         out.data() + static_cast<int64_t>(n) * Cout * H * W);
  }

  auto in_n = input.raw();
  auto w_n = weight.raw();
  return make_op<S>(
      {N, Cout, H, W}, std::move(out), {input, weight},
      [in_n, w_n, N, Cin, Cout, h, w, H, W, k, stride, pad, patch, ipix](detail::Node<S>& self) {
        if (in_n->requires_grad) in_n->ensure_grad();
        if (w_n->requires_grad) w_n->ensure_grad();
        std::vector<S> gcols(static_cast<size_t>(patch) * ipix);
        for (int n = 0; n < N; ++n) {
          // im2col of the output gradient plays the role of the conv cols
          detail::im2col(self.grad.data() + static_cast<int64_t>(n) * Cout * H * W, Cout, H, W, k,
                         k, stride, pad, h, w, gcols.data());
          detail::CMapRM<S> Gm(gcols.data(), patch, ipix);
          if (in_n->requires_grad) {
            detail::CMapRM<S> Wm(w_n->value.data(), Cin, patch);
            detail::MapRM<S> dIm(in_n->grad.data() + static_cast<int64_t>(n) * Cin * ipix, Cin,
                                 ipix);
            dIm.noalias() += Wm * Gm;
          }
          if (w_n->requires_grad) {
            detail::CMapRM<S> Im(in_n->value.data() + static_cast<int64_t>(n) * Cin * ipix, Cin,
                                 ipix);
            detail::MapRM<S> dWm(w_n->grad.data(), Cin, patch);
            dWm.noalias() += Im * Gm.transpose();
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Elementwise and shape ops
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> relu(const Tensor<S>& x) {
  std::vector<S> out(x.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] > S(0) ? x.data()[i] : S(0);
  auto xn = x.raw();
  return make_op<S>(x.shape(), std::move(out), {x}, [xn](detail::Node<S>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (xn->value[i] > S(0)) xn->grad[i] += self.grad[i];  // subgradient at 0 is 0
  });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& x) {
  std::vector<S> out(x.data().size());
  for (size_t i = 0; i < out.size(); ++i) {
    const S v = x.data()[i];
    out[i] = v >= S(0) ? S(1) / (S(1) + std::exp(-v)) : std::exp(v) / (S(1) + std::exp(v));
  }
  auto xn = x.raw();
  return make_op<S>(x.shape(), std::move(out), {x}, [xn](detail::Node<S>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const S y = self.value[i];
      xn->grad[i] += self.grad[i] * y * (S(1) - y);
    }
  });
}

template <typename S>
Tensor<S> elementwise_add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check(a.shape() == b.shape(), "elementwise_add: shape mismatch " +
                                            shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  std::vector<S> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  auto an = a.raw(), bn = b.raw();
  return make_op<S>(a.shape(), std::move(out), {a, b}, [an, bn](detail::Node<S>& self) {
    if (an->requires_grad) {
      an->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) an->grad[i] += self.grad[i];
    }
    if (bn->requires_grad) {
      bn->ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) bn->grad[i] += self.grad[i];
    }
  });
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& x, S c) {
  std::vector<S> out(x.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * c;
  auto xn = x.raw();
  return make_op<S>(x.shape(), std::move(out), {x}, [xn, c](detail::Node<S>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i] * c;
  });
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& x, Shape new_shape) {
  detail::check(shape_numel(new_shape) == x.numel(),
                "reshape: element count mismatch " + shape_str(x.shape()) + " -> " +
                    shape_str(new_shape));
  std::vector<S> out = x.data();
  auto xn = x.raw();
  return make_op<S>(std::move(new_shape), std::move(out), {x}, [xn](detail::Node<S>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[i] += self.grad[i];
  });
}

// Concatenates along dim 0. Shapes must agree on trailing dims.
template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  detail::check(!parts.empty(), "concat_rows: empty input list");
  Shape s = parts[0].shape();
  int64_t rows = 0;
  int64_t row_elems = parts[0].numel() / std::max(1, s[0]);
  for (const auto& p : parts) {
    Shape ps = p.shape();
    detail::check(ps.size() == s.size(), "concat_rows: rank mismatch");
    for (size_t d = 1; d < s.size(); ++d)
      detail::check(ps[d] == s[d], "concat_rows: trailing dim " + std::to_string(d) + " mismatch");
    rows += ps[0];
  }
  s[0] = static_cast<int>(rows);
  std::vector<S> out;
  out.reserve(static_cast<size_t>(rows) * row_elems);
  for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
  std::vector<std::shared_ptr<detail::Node<S>>> raws;
  for (const auto& p : parts) raws.push_back(p.raw());
  return make_op<S>(std::move(s), std::move(out), parts, [raws](detail::Node<S>& self) {
    size_t off = 0;
    for (auto& r : raws) {
      const size_t n = r->value.size();
      if (r->requires_grad) {
        r->ensure_grad();
        for (size_t i = 0; i < n; ++i) r->grad[i] += self.grad[off + i];
      }
      off += n;
    }
  });
}

// ---------------------------------------------------------------------------
// maxpool2d (kernel k, stride) on NCHW
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> maxpool2d(const Tensor<S>& x, int k, int stride) {
  using detail::check;
  check(x.ndim() == 4, "maxpool2d: input must be [N,C,H,W]");
  check(k >= 1 && stride >= 1, "maxpool2d: kernel and stride must be >= 1");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  check((H - k) % stride == 0 && (W - k) % stride == 0,
        "maxpool2d: size " + std::to_string(H) + "x" + std::to_string(W) +
            " not divisible by kernel/stride");
  const int oh = (H - k) / stride + 1, ow = (W - k) / stride + 1;
  std::vector<S> out(static_cast<size_t>(N) * C * oh * ow);
  auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
  const S* in = x.data().data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const int64_t base = (static_cast<int64_t>(n) * C + c) * H * W;
      const int64_t obase = (static_cast<int64_t>(n) * C + c) * oh * ow;
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          S best = -std::numeric_limits<S>::infinity();
          int64_t best_idx = -1;
          for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
              const int64_t idx = base + (oy * stride + ki) * static_cast<int64_t>(W) +
                                  (ox * stride + kj);
              if (in[idx] > best) {
                best = in[idx];
                best_idx = idx;
              }
            }
          out[obase + oy * ow + ox] = best;
          (*argmax)[obase + oy * ow + ox] = best_idx;
        }
    }
  auto xn = x.raw();
  return make_op<S>({N, C, oh, ow}, std::move(out), {x}, [xn, argmax](detail::Node<S>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) xn->grad[(*argmax)[i]] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// bilinear_resize on NCHW, half-pixel centers (identity at equal size)
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> bilinear_resize(const Tensor<S>& x, int out_h, int out_w) {
  using detail::check;
  check(x.ndim() == 4, "bilinear_resize: input must be [N,C,H,W]");
  check(out_h >= 1 && out_w >= 1, "bilinear_resize: output size must be positive");
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  struct Tap {
    int i0, i1;
    S w0, w1;
  };
  auto make_taps = [](int in_size, int out_size) {
    std::vector<Tap> taps(static_cast<size_t>(out_size));
    const double scale = static_cast<double>(in_size) / out_size;
    for (int o = 0; o < out_size; ++o) {
      double src = (o + 0.5) * scale - 0.5;
      if (src < 0) src = 0;
      if (src > in_size - 1) src = in_size - 1;
      const int i0 = static_cast<int>(std::floor(src));
      const int i1 = std::min(i0 + 1, in_size - 1);
      const S f = static_cast<S>(src - i0);
      taps[static_cast<size_t>(o)] = {i0, i1, S(1) - f, f};
    }
    return taps;
  };
  auto ty = std::make_shared<std::vector<Tap>>(make_taps(H, out_h));
  auto tx = std::make_shared<std::vector<Tap>>(make_taps(W, out_w));

  std::vector<S> out(static_cast<size_t>(N) * C * out_h * out_w);
  const S* in = x.data().data();
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c) {
      const S* plane = in + (static_cast<int64_t>(n) * C + c) * H * W;
      S* oplane = out.data() + (static_cast<int64_t>(n) * C + c) * out_h * out_w;
      for (int oy = 0; oy < out_h; ++oy) {
        const Tap& a = (*ty)[static_cast<size_t>(oy)];
        for (int ox = 0; ox < out_w; ++ox) {
          const Tap& b = (*tx)[static_cast<size_t>(ox)];
          oplane[oy * out_w + ox] = a.w0 * (b.w0 * plane[a.i0 * W + b.i0] +
                                            b.w1 * plane[a.i0 * W + b.i1]) +
                                    a.w1 * (b.w0 * plane[a.i1 * W + b.i0] +
                                            b.w1 * plane[a.i1 * W + b.i1]);
        }
      }
    }
  auto xn = x.raw();
  return make_op<S>(
      {N, C, out_h, out_w}, std::move(out), {x},
      [xn, ty, tx, N, C, H, W, out_h, out_w](detail::Node<S>& self) {
        if (!xn->requires_grad) return;
        xn->ensure_grad();
        for (int n = 0; n < N; ++n)
          for (int c = 0; c < C; ++c) {
            S* gplane = xn->grad.data() + (static_cast<int64_t>(n) * C + c) * H * W;
            const S* oplane = self.grad.data() + (static_cast<int64_t>(n) * C + c) * out_h * out_w;
            for (int oy = 0; oy < out_h; ++oy) {
              const Tap& a = (*ty)[static_cast<size_t>(oy)];
              for (int ox = 0; ox < out_w; ++ox) {
                const Tap& b = (*tx)[static_cast<size_t>(ox)];
                const S g = oplane[oy * out_w + ox];
                gplane[a.i0 * W + b.i0] += g * a.w0 * b.w0;
                gplane[a.i0 * W + b.i1] += g * a.w0 * b.w1;
                gplane[a.i1 * W + b.i0] += g * a.w1 * b.w0;
                gplane[a.i1 * W + b.i1] += g * a.w1 * b.w1;
              }
            }
          }
      });
}

// ---------------------------------------------------------------------------
// linear: input [N,I] x weight [O,I]^T + bias [O]
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> linear(const Tensor<S>& input, const Tensor<S>& weight, const Tensor<S>& bias) {
  using detail::check;
  check(input.ndim() == 2, "linear: input must be [N,I], got " + shape_str(input.shape()));
  check(weight.ndim() == 2, "linear: weight must be [O,I]");
  const int N = input.dim(0), I = input.dim(1), O = weight.dim(0);
  check(weight.dim(1) == I, "linear: weight inner dim " + std::to_string(weight.dim(1)) +
                                " != input feature dim " + std::to_string(I));
  check(bias.ndim() == 1 && bias.dim(0) == O, "linear: bias must be [O]");
  std::vector<S> out(static_cast<size_t>(N) * O);
  if (N > 0) {
    detail::CMapRM<S> Im(input.data().data(), N, I);
    detail::CMapRM<S> Wm(weight.data().data(), O, I);
    detail::MapRM<S> Om(out.data(), N, O);
    Om.noalias() = Im * Wm.transpose();
    for (int n = 0; n < N; ++n)
      for (int o = 0; o < O; ++o) out[static_cast<size_t>(n) * O + o] += bias.data()[static_cast<size_t>(o)];
  }
  auto in_n = input.raw(), w_n = weight.raw(), b_n = bias.raw();
  return make_op<S>({N, O}, std::move(out), {input, weight, bias},
                    [in_n, w_n, b_n, N, I, O](detail::Node<S>& self) {
                      if (N == 0) return;
                      detail::CMapRM<S> dOm(self.grad.data(), N, O);
                      if (in_n->requires_grad) {
                        in_n->ensure_grad();
                        detail::CMapRM<S> Wm(w_n->value.data(), O, I);
                        detail::MapRM<S> dIm(in_n->grad.data(), N, I);
                        dIm.noalias() += dOm * Wm;
                      }
                      if (w_n->requires_grad) {
                        w_n->ensure_grad();
                        detail::CMapRM<S> Im(in_n->value.data(), N, I);
                        detail::MapRM<S> dWm(w_n->grad.data(), O, I);
                        dWm.noalias() += dOm.transpose() * Im;
                      }
                      if (b_n->requires_grad) {
                        b_n->ensure_grad();
                        for (int n = 0; n < N; ++n)
                          for (int o = 0; o < O; ++o)
                            b_n->grad[static_cast<size_t>(o)] += self.grad[static_cast<size_t>(n) * O + o];
                      }
                    });
}

// ---------------------------------------------------------------------------
// softmax along an axis
// ---------------------------------------------------------------------------
template <typename S>
Tensor<S> softmax(const Tensor<S>& x, int axis) {
  using detail::check;
  check(axis >= 0 && axis < x.ndim(),
        "softmax: axis " + std::to_string(axis) + " out of range for " + shape_str(x.shape()));
  const Shape& sh = x.shape();
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= sh[static_cast<size_t>(d)];
  for (int d = axis + 1; d < x.ndim(); ++d) inner *= sh[static_cast<size_t>(d)];
  const int64_t L = sh[static_cast<size_t>(axis)];
  std::vector<S> out(x.data().size());
  const S* in = x.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t i = 0; i < inner; ++i) {
      const int64_t base = o * L * inner + i;
      S mx = -std::numeric_limits<S>::infinity();
      for (int64_t l = 0; l < L; ++l) mx = std::max(mx, in[base + l * inner]);
      S sum = S(0);
      for (int64_t l = 0; l < L; ++l) {
        const S e = std::exp(in[base + l * inner] - mx);
        out[base + l * inner] = e;
        sum += e;
      }
      for (int64_t l = 0; l < L; ++l) out[base + l * inner] /= sum;
    }
  auto xn = x.raw();
  return make_op<S>(x.shape(), std::move(out), {x},
                    [xn, outer, inner, L](detail::Node<S>& self) {
                      if (!xn->requires_grad) return;
                      xn->ensure_grad();
                      for (int64_t o = 0; o < outer; ++o)
                        for (int64_t i = 0; i < inner; ++i) {
                          const int64_t base = o * L * inner + i;
                          S dot = S(0);
                          for (int64_t l = 0; l < L; ++l)
                            dot += self.grad[base + l * inner] * self.value[base + l * inner];
                          for (int64_t l = 0; l < L; ++l) {
                            const S y = self.value[base + l * inner];
                            xn->grad[base + l * inner] += y * (self.grad[base + l * inner] - dot);
                          }
                        }
                    });
}

// ---------------------------------------------------------------------------
// Losses (mean reduction over contributing elements)
// ---------------------------------------------------------------------------

inline constexpr int kIgnoreNone = std::numeric_limits<int>::min();

// logits [N,C] with labels[N], or [N,C,H,W] with labels[N*H*W] (row-major
// over N,H,W). Mean of -log softmax(logits)[label] over non-ignored entries.
template <typename S>
Tensor<S> cross_entropy_loss(const Tensor<S>& logits, const std::vector<int>& labels,
                             int ignore_index = kIgnoreNone) {
  using detail::check;
  check(logits.ndim() == 2 || logits.ndim() == 4,
        "cross_entropy_loss: logits must be [N,C] or [N,C,H,W]");
  const int N = logits.dim(0);
  const int C = logits.dim(1);
  const int64_t spatial = logits.ndim() == 4 ? static_cast<int64_t>(logits.dim(2)) * logits.dim(3) : 1;
  const int64_t P = N * spatial;
  check(static_cast<int64_t>(labels.size()) == P,
        "cross_entropy_loss: expected " + std::to_string(P) + " labels, got " +
            std::to_string(labels.size()));
  for (int64_t p = 0; p < P; ++p)
    check(labels[static_cast<size_t>(p)] == ignore_index ||
              (labels[static_cast<size_t>(p)] >= 0 && labels[static_cast<size_t>(p)] < C),
          "cross_entropy_loss: label " + std::to_string(labels[static_cast<size_t>(p)]) +
              " out of range [0," + std::to_string(C) + ")");

  // position p = (n, s): logits index = (n*C + c)*spatial + s
  const S* in = logits.data().data();
  auto logit_at = [&](int64_t p, int c) {
    const int64_t n = p / spatial, s = p % spatial;
    return in[(n * C + c) * spatial + s];
  };
  double total = 0.0;
  int64_t count = 0;
  for (int64_t p = 0; p < P; ++p) {
    const int lab = labels[static_cast<size_t>(p)];
    if (lab == ignore_index) continue;
    S mx = -std::numeric_limits<S>::infinity();
    for (int c = 0; c < C; ++c) mx = std::max(mx, logit_at(p, c));
    double lse = 0.0;
    for (int c = 0; c < C; ++c) lse += std::exp(static_cast<double>(logit_at(p, c) - mx));
    total += std::log(lse) + static_cast<double>(mx) - static_cast<double>(logit_at(p, lab));
    ++count;
  }
  const S loss = count > 0 ? static_cast<S>(total / count) : S(0);
  auto xn = logits.raw();
  auto labs = std::make_shared<std::vector<int>>(labels);
  return make_op<S>(
      {1}, {loss}, {logits},
      [xn, labs, C, spatial, P, count, ignore_index](detail::Node<S>& self) {
        if (!xn->requires_grad || count == 0) return;
        xn->ensure_grad();
        const S g = self.grad[0] / static_cast<S>(count);
        const S* in = xn->value.data();
        for (int64_t p = 0; p < P; ++p) {
          const int lab = (*labs)[static_cast<size_t>(p)];
          if (lab == ignore_index) continue;
          const int64_t n = p / spatial, s = p % spatial;
          S mx = -std::numeric_limits<S>::infinity();
          for (int c = 0; c < C; ++c) mx = std::max(mx, in[(n * C + c) * spatial + s]);
          S sum = S(0);
          for (int c = 0; c < C; ++c) sum += std::exp(in[(n * C + c) * spatial + s] - mx);
          for (int c = 0; c < C; ++c) {
            const S sm = std::exp(in[(n * C + c) * spatial + s] - mx) / sum;
            xn->grad[(n * C + c) * spatial + s] += g * (sm - (c == lab ? S(1) : S(0)));
          }
        }
      });
}

// Numerically stable mean BCE with logits. Targets must be exactly 0 or 1.
template <typename S>
Tensor<S> binary_cross_entropy_loss(const Tensor<S>& logits, const Tensor<S>& target) {
  using detail::check;
  check(logits.shape() == target.shape(),
        "binary_cross_entropy_loss: shape mismatch " + shape_str(logits.shape()) + " vs " +
            shape_str(target.shape()));
  const int64_t n = logits.numel();
  for (int64_t i = 0; i < n; ++i) {
    const S t = target.data()[static_cast<size_t>(i)];
    check(t == S(0) || t == S(1), "binary_cross_entropy_loss: target value " +
                                      std::to_string(static_cast<double>(t)) + " not in {0,1}");
  }
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double x = static_cast<double>(logits.data()[static_cast<size_t>(i)]);
    const double t = static_cast<double>(target.data()[static_cast<size_t>(i)]);
    total += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  const S loss = n > 0 ? static_cast<S>(total / n) : S(0);
  auto xn = logits.raw();
  auto tn = target.raw();
  return make_op<S>({1}, {loss}, {logits, target}, [xn, tn, n](detail::Node<S>& self) {
    if (!xn->requires_grad || n == 0) return;
    xn->ensure_grad();
    const S g = self.grad[0] / static_cast<S>(n);
    for (int64_t i = 0; i < n; ++i) {
      const S x = xn->value[static_cast<size_t>(i)];
      const S sig = x >= S(0) ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
      xn->grad[static_cast<size_t>(i)] += g * (sig - tn->value[static_cast<size_t>(i)]);
    }
  });
}

// mean over elements of: 0.5 d^2/beta if |d| < beta else |d| - 0.5 beta
template <typename S>
Tensor<S> smooth_l1_loss(const Tensor<S>& pred, const Tensor<S>& target, S beta) {
  using detail::check;
  check(pred.shape() == target.shape(), "smooth_l1_loss: shape mismatch " +
                                            shape_str(pred.shape()) + " vs " +
                                            shape_str(target.shape()));
  check(beta > S(0), "smooth_l1_loss: beta must be > 0");
  const int64_t n = pred.numel();
  double total = 0.0;
  for (int64_t i = 0; i < n; ++i) {
    const double d = static_cast<double>(pred.data()[static_cast<size_t>(i)] -
                                         target.data()[static_cast<size_t>(i)]);
    const double b = static_cast<double>(beta);
    total += std::abs(d) < b ? 0.5 * d * d / b : std::abs(d) - 0.5 * b;
  }
  const S loss = n > 0 ? static_cast<S>(total / n) : S(0);
  auto pn = pred.raw(), tn = target.raw();
  return make_op<S>({1}, {loss}, {pred, target}, [pn, tn, n, beta](detail::Node<S>& self) {
    if (!pn->requires_grad || n == 0) return;
    pn->ensure_grad();
    const S g = self.grad[0] / static_cast<S>(n);
    for (int64_t i = 0; i < n; ++i) {
      const S d = pn->value[static_cast<size_t>(i)] - tn->value[static_cast<size_t>(i)];
      const S dd = std::abs(d) < beta ? d / beta : (d > S(0) ? S(1) : (d < S(0) ? S(-1) : S(0)));
      pn->grad[static_cast<size_t>(i)] += g * dd;
    }
  });
}

// Picks rows idx[k] from x [R, ...] -> [K, ...]. Used to select positive
// RoIs out of a stage batch.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& x, const std::vector<int>& idx) {
  using detail::check;
  check(x.ndim() >= 1, "gather_rows: input must have at least one dim");
  const int R = x.dim(0);
  const int64_t row = x.numel() / std::max(1, R);
  for (int i : idx)
    check(i >= 0 && i < R,
          "gather_rows: row index " + std::to_string(i) + " out of range [0," + std::to_string(R) + ")");
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<int>(idx.size());
  std::vector<S> out(static_cast<size_t>(idx.size()) * row);
  for (size_t k = 0; k < idx.size(); ++k)
    std::copy(x.data().begin() + idx[k] * row, x.data().begin() + (idx[k] + 1) * row,
              out.begin() + static_cast<int64_t>(k) * row);
  auto xn = x.raw();
  auto ids = std::make_shared<std::vector<int>>(idx);
  return make_op<S>(std::move(out_shape), std::move(out), {x}, [xn, ids, row](detail::Node<S>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    for (size_t k = 0; k < ids->size(); ++k) {
      const S* g = self.grad.data() + static_cast<int64_t>(k) * row;
      S* dst = xn->grad.data() + static_cast<int64_t>((*ids)[k]) * row;
      for (int64_t i = 0; i < row; ++i) dst[i] += g[i];
    }
  });
}

// Picks channel idx[p] from x [P,C,h,w] -> [P,1,h,w]. Used to select the
// mask channel of the assigned class.
template <typename S>
Tensor<S> gather_channel(const Tensor<S>& x, const std::vector<int>& idx) {
  using detail::check;
  check(x.ndim() == 4, "gather_channel: input must be [P,C,h,w]");
  const int P = x.dim(0), C = x.dim(1), h = x.dim(2), w = x.dim(3);
  check(static_cast<int>(idx.size()) == P, "gather_channel: index count mismatch");
  for (int p = 0; p < P; ++p)
    check(idx[static_cast<size_t>(p)] >= 0 && idx[static_cast<size_t>(p)] < C,
          "gather_channel: channel index " + std::to_string(idx[static_cast<size_t>(p)]) +
              " out of range [0," + std::to_string(C) + ")");
  const int64_t hw = static_cast<int64_t>(h) * w;
  std::vector<S> out(static_cast<size_t>(P) * hw);
  for (int p = 0; p < P; ++p) {
    const S* src = x.data().data() + (static_cast<int64_t>(p) * C + idx[static_cast<size_t>(p)]) * hw;
    std::copy(src, src + hw, out.begin() + static_cast<int64_t>(p) * hw);
  }
  auto xn = x.raw();
  auto ids = std::make_shared<std::vector<int>>(idx);
  return make_op<S>({P, 1, h, w}, std::move(out), {x}, [xn, ids, C, hw](detail::Node<S>& self) {
    if (!xn->requires_grad) return;
    xn->ensure_grad();
    const int P = static_cast<int>(ids->size());
    for (int p = 0; p < P; ++p) {
      S* dst = xn->grad.data() + (static_cast<int64_t>(p) * C + (*ids)[static_cast<size_t>(p)]) * hw;
      const S* g = self.grad.data() + static_cast<int64_t>(p) * hw;
      for (int64_t i = 0; i < hw; ++i) dst[i] += g[i];
    }
  });
}

}  // namespace htc
