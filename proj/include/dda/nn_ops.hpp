#pragma once

#include <memory>

#include "dda/tensor.hpp"

namespace dda {

// ---------------------------------------------------------------------------
// conv2d: direct NCHW convolution with explicit zero padding.
// groups == 1 uses im2col + GEMM; groups == Cin is a depthwise path.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, int64_t stride = 1,
                 int64_t pad = 0, int64_t groups = 1) {
  require(x.ndim() == 4 && w.ndim() == 4,
          "conv2d: expected NCHW input and OIHW weight, got " + shape_str(x.shape()) +
              " and " + shape_str(w.shape()));
  const int64_t N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Cout = w.dim(0), Cw = w.dim(1), kh = w.dim(2), kw = w.dim(3);
  require(groups == 1 || groups == Cin, "conv2d: unsupported group count " +
                                            std::to_string(groups));
  require(Cw == Cin / groups, "conv2d: weight " + shape_str(w.shape()) +
                                  " does not match input " + shape_str(x.shape()) +
                                  " with groups=" + std::to_string(groups));
  if (groups == Cin) require(Cout == Cin, "conv2d: depthwise expects Cout == Cin");
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  const int64_t Ho = (H + 2 * pad - kh) / stride + 1;
  const int64_t Wo = (W + 2 * pad - kw) / stride + 1;
  require(Ho >= 1 && Wo >= 1, "conv2d: kernel " + shape_str(w.shape()) +
                                  " larger than padded input " + shape_str(x.shape()));

  Tensor<T> out(Shape{N, Cout, Ho, Wo});

  if (groups == Cin) {
    // depthwise
    const T* xp = x.ptr();
    const T* wp = w.ptr();
    T* yp = out.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t nc = 0; nc < N * Cin; ++nc) {
      const int64_t n = nc / Cin, c = nc % Cin;
      const T* xs = xp + (n * Cin + c) * H * W;
      const T* ws = wp + c * kh * kw;
      T* ys = yp + (n * Cin + c) * Ho * Wo;
      for (int64_t ho = 0; ho < Ho; ++ho)
        for (int64_t wo = 0; wo < Wo; ++wo) {
          T acc = T(0);
          for (int64_t u = 0; u < kh; ++u) {
            const int64_t hi = ho * stride - pad + u;
            if (hi < 0 || hi >= H) continue;
            for (int64_t v = 0; v < kw; ++v) {
              const int64_t wi = wo * stride - pad + v;
              if (wi < 0 || wi >= W) continue;
              acc += xs[hi * W + wi] * ws[u * kw + v];
            }
          }
          ys[ho * Wo + wo] = acc;
        }
    }
    Tape<T>* tp = common_tape<T>("conv2d", {&x, &w});
    if (!tp) return out;
    const int64_t xn = x.on_tape() ? x.node() : -1;
    const int64_t wn = w.on_tape() ? w.node() : -1;
    Tensor<T> xv = x.detached(), wv = w.detached();
    return tp->track(std::move(out), [=](Tape<T>& t, int64_t self) {
      const T* g = t.grad(self)->data();
      if (xn >= 0) {
        std::vector<T>& gx = t.grad_acc(xn, N * Cin * H * W);
        const T* wp2 = wv.ptr();
#pragma omp parallel for schedule(static)
        for (int64_t nc = 0; nc < N * Cin; ++nc) {
          const int64_t n = nc / Cin, c = nc % Cin;
          T* gxs = gx.data() + (n * Cin + c) * H * W;
          const T* ws = wp2 + c * kh * kw;
          const T* gs = g + (n * Cin + c) * Ho * Wo;
          for (int64_t ho = 0; ho < Ho; ++ho)
            for (int64_t wo = 0; wo < Wo; ++wo) {
              const T gv = gs[ho * Wo + wo];
              for (int64_t u = 0; u < kh; ++u) {
                const int64_t hi = ho * stride - pad + u;
                if (hi < 0 || hi >= H) continue;
                for (int64_t v = 0; v < kw; ++v) {
                  const int64_t wi = wo * stride - pad + v;
                  if (wi < 0 || wi >= W) continue;
                  gxs[hi * W + wi] += gv * ws[u * kw + v];
                }
              }
            }
        }
      }
      if (wn >= 0) {
        std::vector<T>& gw = t.grad_acc(wn, Cin * kh * kw);
        const T* xp2 = xv.ptr();
#pragma omp parallel for schedule(static)
        for (int64_t c = 0; c < Cin; ++c) {
          T* gws = gw.data() + c * kh * kw;
          for (int64_t n = 0; n < N; ++n) {
            const T* xs = xp2 + (n * Cin + c) * H * W;
            const T* gs = g + (n * Cin + c) * Ho * Wo;
            for (int64_t ho = 0; ho < Ho; ++ho)
              for (int64_t wo = 0; wo < Wo; ++wo) {
                const T gv = gs[ho * Wo + wo];
                for (int64_t u = 0; u < kh; ++u) {
                  const int64_t hi = ho * stride - pad + u;
                  if (hi < 0 || hi >= H) continue;
                  for (int64_t v = 0; v < kw; ++v) {
                    const int64_t wi = wo * stride - pad + v;
                    if (wi < 0 || wi >= W) continue;
                    gws[u * kw + v] += gv * xs[hi * W + wi];
                  }
                }
              }
          }
        }
      }
    });
  }

  // groups == 1: im2col + GEMM
  const int64_t K = Cin * kh * kw;
  const int64_t cols = N * Ho * Wo;
  auto col = std::make_shared<std::vector<T>>(static_cast<size_t>(K * cols), T(0));
  {
    const T* xp = x.ptr();
    T* cp = col->data();
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < N; ++n) {
      for (int64_t ci = 0; ci < Cin; ++ci) {
        const T* xs = xp + (n * Cin + ci) * H * W;
        for (int64_t u = 0; u < kh; ++u)
          for (int64_t v = 0; v < kw; ++v) {
            T* crow = cp + ((ci * kh + u) * kw + v) * cols + n * Ho * Wo;
            for (int64_t ho = 0; ho < Ho; ++ho) {
              const int64_t hi = ho * stride - pad + u;
              if (hi < 0 || hi >= H) {
                // leave zeros
                continue;
              }
              for (int64_t wo = 0; wo < Wo; ++wo) {
                const int64_t wi = wo * stride - pad + v;
                if (wi >= 0 && wi < W) crow[ho * Wo + wo] = xs[hi * W + wi];
              }
            }
          }
      }
    }
  }
  // y_mat [Cout, cols] = W_mat [Cout, K] * col [K, cols]
  std::vector<T> ymat(static_cast<size_t>(Cout * cols));
  {
    Eigen::Map<const EigenRowMat<T>> Wm(w.ptr(), Cout, K), Cm(col->data(), K, cols);
    Eigen::Map<EigenRowMat<T>> Ym(ymat.data(), Cout, cols);
    Ym.noalias() = Wm * Cm;
  }
  {
    T* yp = out.ptr();
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < N; ++n)
      for (int64_t co = 0; co < Cout; ++co)
        std::memcpy(yp + (n * Cout + co) * Ho * Wo,
                    ymat.data() + co * cols + n * Ho * Wo,
                    static_cast<size_t>(Ho * Wo) * sizeof(T));
  }

  Tape<T>* tp = common_tape<T>("conv2d", {&x, &w});
  if (!tp) return out;
  const int64_t xn = x.on_tape() ? x.node() : -1;
  const int64_t wn = w.on_tape() ? w.node() : -1;
  Tensor<T> wv = w.detached();
  return tp->track(std::move(out), [=](Tape<T>& t, int64_t self) {
    // regroup out-grad as [Cout, cols]
    const T* g = t.grad(self)->data();
    std::vector<T> gmat(static_cast<size_t>(Cout * cols));
#pragma omp parallel for schedule(static)
    for (int64_t n = 0; n < N; ++n)
      for (int64_t co = 0; co < Cout; ++co)
        std::memcpy(gmat.data() + co * cols + n * Ho * Wo,
                    g + (n * Cout + co) * Ho * Wo,
                    static_cast<size_t>(Ho * Wo) * sizeof(T));
    if (wn >= 0) {
      Eigen::Map<EigenRowMat<T>> GW(t.grad_acc(wn, Cout * K).data(), Cout, K);
      Eigen::Map<const EigenRowMat<T>> Gm(gmat.data(), Cout, cols),
          Cm(col->data(), K, cols);
      GW.noalias() += Gm * Cm.transpose();
    }
    if (xn >= 0) {
      std::vector<T> gcol(static_cast<size_t>(K * cols));
      {
        Eigen::Map<const EigenRowMat<T>> Wm(wv.ptr(), Cout, K),
            Gm(gmat.data(), Cout, cols);
        Eigen::Map<EigenRowMat<T>> GC(gcol.data(), K, cols);
        GC.noalias() = Wm.transpose() * Gm;
      }
      std::vector<T>& gx = t.grad_acc(xn, N * Cin * H * W);
#pragma omp parallel for schedule(static)
      for (int64_t n = 0; n < N; ++n) {
        for (int64_t ci = 0; ci < Cin; ++ci) {
          T* gxs = gx.data() + (n * Cin + ci) * H * W;
          for (int64_t u = 0; u < kh; ++u)
            for (int64_t v = 0; v < kw; ++v) {
              const T* crow = gcol.data() + ((ci * kh + u) * kw + v) * cols + n * Ho * Wo;
              for (int64_t ho = 0; ho < Ho; ++ho) {
                const int64_t hi = ho * stride - pad + u;
                if (hi < 0 || hi >= H) continue;
                for (int64_t wo = 0; wo < Wo; ++wo) {
                  const int64_t wi = wo * stride - pad + v;
                  if (wi >= 0 && wi < W) gxs[hi * W + wi] += crow[ho * Wo + wo];
                }
              }
            }
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Replicate padding on H/W of an NCHW tensor.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> pad2d_replicate(const Tensor<T>& x, int64_t pt, int64_t pb, int64_t pl,
                          int64_t pr) {
  require(x.ndim() == 4, "pad2d: expected NCHW, got " + shape_str(x.shape()));
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int64_t Ho = H + pt + pb, Wo = W + pl + pr;
  Tensor<T> out(Shape{N, C, Ho, Wo});
  const T* xp = x.ptr();
  T* yp = out.ptr();
#pragma omp parallel for schedule(static)
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* xs = xp + nc * H * W;
    T* ys = yp + nc * Ho * Wo;
    for (int64_t ho = 0; ho < Ho; ++ho) {
      const int64_t hi = std::clamp(ho - pt, int64_t(0), H - 1);
      for (int64_t wo = 0; wo < Wo; ++wo) {
        const int64_t wi = std::clamp(wo - pl, int64_t(0), W - 1);
        ys[ho * Wo + wo] = xs[hi * W + wi];
      }
    }
  }
  if (!x.on_tape()) return out;
  const int64_t xn = x.node();
  return x.tape()->track(std::move(out), [=](Tape<T>& t, int64_t self) {
    const T* g = t.grad(self)->data();
    std::vector<T>& gx = t.grad_acc(xn, N * C * H * W);
#pragma omp parallel for schedule(static)
    for (int64_t nc = 0; nc < N * C; ++nc) {
      T* gxs = gx.data() + nc * H * W;
      const T* gs = g + nc * Ho * Wo;
      for (int64_t ho = 0; ho < Ho; ++ho) {
        const int64_t hi = std::clamp(ho - pt, int64_t(0), H - 1);
        for (int64_t wo = 0; wo < Wo; ++wo) {
          const int64_t wi = std::clamp(wo - pl, int64_t(0), W - 1);
          gxs[hi * W + wi] += gs[ho * Wo + wo];
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// 2x2 average pooling, stride 2.
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> avg_pool2x2(const Tensor<T>& x) {
  require(x.ndim() == 4, "avg_pool: expected NCHW, got " + shape_str(x.shape()));
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H % 2 == 0 && W % 2 == 0, "avg_pool: spatial dims must be even, got " +
                                        shape_str(x.shape()));
  const int64_t Ho = H / 2, Wo = W / 2;
  Tensor<T> out(Shape{N, C, Ho, Wo});
  const T* xp = x.ptr();
  T* yp = out.ptr();
#pragma omp parallel for schedule(static)
  for (int64_t nc = 0; nc < N * C; ++nc) {
    const T* xs = xp + nc * H * W;
    T* ys = yp + nc * Ho * Wo;
    for (int64_t ho = 0; ho < Ho; ++ho)
      for (int64_t wo = 0; wo < Wo; ++wo) {
        const int64_t h = ho * 2, w = wo * 2;
        ys[ho * Wo + wo] = (xs[h * W + w] + xs[h * W + w + 1] + xs[(h + 1) * W + w] +
                            xs[(h + 1) * W + w + 1]) *
                           T(0.25);
      }
  }
  if (!x.on_tape()) return out;
  const int64_t xn = x.node();
  return x.tape()->track(std::move(out), [=](Tape<T>& t, int64_t self) {
    const T* g = t.grad(self)->data();
    std::vector<T>& gx = t.grad_acc(xn, N * C * H * W);
#pragma omp parallel for schedule(static)
    for (int64_t nc = 0; nc < N * C; ++nc) {
      T* gxs = gx.data() + nc * H * W;
      const T* gs = g + nc * Ho * Wo;
      for (int64_t ho = 0; ho < Ho; ++ho)
        for (int64_t wo = 0; wo < Wo; ++wo) {
          const T q = gs[ho * Wo + wo] * T(0.25);
          const int64_t h = ho * 2, w = wo * 2;
          gxs[h * W + w] += q;
          gxs[h * W + w + 1] += q;
          gxs[(h + 1) * W + w] += q;
          gxs[(h + 1) * W + w + 1] += q;
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Batch normalization.
// ---------------------------------------------------------------------------

// Train-mode primitive: normalizes with batch statistics and (optionally)
// updates caller-owned running statistics in place.
template <typename T>
Tensor<T> batch_norm_train(const Tensor<T>& x, const Tensor<T>& gamma,
                           const Tensor<T>& beta, T eps, T momentum,
                           std::vector<T>* running_mean,
                           std::vector<T>* running_var) {
  require(x.ndim() == 4, "batch_norm: expected NCHW, got " + shape_str(x.shape()));
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(gamma.size() == C && beta.size() == C, "batch_norm: parameter size mismatch");
  const int64_t M = N * H * W;  // per-channel sample count
  auto xhat = std::make_shared<std::vector<T>>(static_cast<size_t>(x.size()));
  auto inv_std = std::make_shared<std::vector<T>>(static_cast<size_t>(C));
  Tensor<T> out(x.shape());
  const T* xp = x.ptr();
  const T* gp = gamma.ptr();
  const T* bp = beta.ptr();
  T* yp = out.ptr();
#pragma omp parallel for schedule(static)
  for (int64_t c = 0; c < C; ++c) {
    double m = 0.0;
    for (int64_t n = 0; n < N; ++n) {
      const T* xs = xp + (n * C + c) * H * W;
      for (int64_t i = 0; i < H * W; ++i) m += xs[i];
    }
    m /= static_cast<double>(M);
    double v = 0.0;
    for (int64_t n = 0; n < N; ++n) {
      const T* xs = xp + (n * C + c) * H * W;
      for (int64_t i = 0; i < H * W; ++i) {
        const double d = xs[i] - m;
        v += d * d;
      }
    }
    v /= static_cast<double>(M);
    const T is = T(1) / std::sqrt(static_cast<T>(v) + eps);
    (*inv_std)[static_cast<size_t>(c)] = is;
    for (int64_t n = 0; n < N; ++n) {
      const T* xs = xp + (n * C + c) * H * W;
      T* hs = xhat->data() + (n * C + c) * H * W;
      T* ys = yp + (n * C + c) * H * W;
      for (int64_t i = 0; i < H * W; ++i) {
        const T h = (xs[i] - static_cast<T>(m)) * is;
        hs[i] = h;
        ys[i] = gp[c] * h + bp[c];
      }
    }
    if (running_mean && running_var) {
      (*running_mean)[static_cast<size_t>(c)] =
          (T(1) - momentum) * (*running_mean)[static_cast<size_t>(c)] +
          momentum * static_cast<T>(m);
      (*running_var)[static_cast<size_t>(c)] =
          (T(1) - momentum) * (*running_var)[static_cast<size_t>(c)] +
          momentum * static_cast<T>(v);
    }
  }
  Tape<T>* tp = common_tape<T>("batch_norm", {&x, &gamma, &beta});
  if (!tp) return out;
  const int64_t xn = x.on_tape() ? x.node() : -1;
  const int64_t gn = gamma.on_tape() ? gamma.node() : -1;
  const int64_t bn = beta.on_tape() ? beta.node() : -1;
  Tensor<T> gv = gamma.detached();
  return tp->track(std::move(out), [=](Tape<T>& t, int64_t self) {
    const T* g = t.grad(self)->data();
    const T* gam = gv.ptr();
    if (bn >= 0) {
      std::vector<T>& gb = t.grad_acc(bn, C);
      for (int64_t c = 0; c < C; ++c) {
        T s = T(0);
        for (int64_t n = 0; n < N; ++n) {
          const T* gs = g + (n * C + c) * H * W;
          for (int64_t i = 0; i < H * W; ++i) s += gs[i];
        }
        gb[static_cast<size_t>(c)] += s;
      }
    }
    if (gn >= 0) {
      std::vector<T>& gg = t.grad_acc(gn, C);
      for (int64_t c = 0; c < C; ++c) {
        T s = T(0);
        for (int64_t n = 0; n < N; ++n) {
          const T* gs = g + (n * C + c) * H * W;
          const T* hs = xhat->data() + (n * C + c) * H * W;
          for (int64_t i = 0; i < H * W; ++i) s += gs[i] * hs[i];
        }
        gg[static_cast<size_t>(c)] += s;
      }
    }
    if (xn >= 0) {
      std::vector<T>& gx = t.grad_acc(xn, N * C * H * W);
#pragma omp parallel for schedule(static)
      for (int64_t c = 0; c < C; ++c) {
        T sum_g = T(0), sum_gh = T(0);
        for (int64_t n = 0; n < N; ++n) {
          const T* gs = g + (n * C + c) * H * W;
          const T* hs = xhat->data() + (n * C + c) * H * W;
          for (int64_t i = 0; i < H * W; ++i) {
            sum_g += gs[i];
            sum_gh += gs[i] * hs[i];
          }
        }
        const T is = (*inv_std)[static_cast<size_t>(c)];
        const T scale = gam[c] * is / static_cast<T>(M);
        for (int64_t n = 0; n < N; ++n) {
          const T* gs = g + (n * C + c) * H * W;
          const T* hs = xhat->data() + (n * C + c) * H * W;
          T* gxs = gx.data() + (n * C + c) * H * W;
          for (int64_t i = 0; i < H * W; ++i)
            gxs[i] += scale * (static_cast<T>(M) * gs[i] - sum_g - hs[i] * sum_gh);
        }
      }
    }
  });
}

// Eval-mode batch norm: a per-channel affine map with frozen statistics.
template <typename T>
Tensor<T> batch_norm_eval(const Tensor<T>& x, const Tensor<T>& gamma,
                          const Tensor<T>& beta, const std::vector<T>& running_mean,
                          const std::vector<T>& running_var, T eps) {
  const int64_t C = x.dim(1);
  require(static_cast<int64_t>(running_mean.size()) == C &&
              static_cast<int64_t>(running_var.size()) == C,
          "batch_norm: running statistics size mismatch");
  Tensor<T> rm(Shape{1, C, 1, 1}, std::vector<T>(running_mean));
  std::vector<T> is(running_var.size());
  for (size_t c = 0; c < is.size(); ++c)
    is[c] = T(1) / std::sqrt(running_var[c] + eps);
  Tensor<T> rs(Shape{1, C, 1, 1}, std::move(is));
  Tensor<T> g4 = reshape(gamma, Shape{1, C, 1, 1});
  Tensor<T> b4 = reshape(beta, Shape{1, C, 1, 1});
  return (x - rm) * rs * g4 + b4;
}

// ---------------------------------------------------------------------------
// Quarter-turn rotations of square NCHW images (a pixel permutation).
// ---------------------------------------------------------------------------

inline std::vector<int64_t> rot90_perm(int64_t H, int64_t W, int turns) {
  std::vector<int64_t> perm(static_cast<size_t>(H * W));
  turns = ((turns % 4) + 4) % 4;
  for (int64_t h = 0; h < H; ++h)
    for (int64_t w = 0; w < W; ++w) {
      int64_t src;
      switch (turns) {
        case 0: src = h * W + w; break;
        case 1: src = w * W + (H - 1 - h); break;
        case 2: src = (H - 1 - h) * W + (W - 1 - w); break;
        default: src = (W - 1 - w) * W + h; break;
      }
      perm[static_cast<size_t>(h * W + w)] = src;
    }
  return perm;
}

// Per-image quarter-turn rotation of a batch; square images only.
template <typename T>
Tensor<T> rot90_batch(const Tensor<T>& x, const std::vector<int>& turns) {
  require(x.ndim() == 4, "rot90: expected NCHW");
  const int64_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  require(H == W, "rot90: requires square images");
  require(static_cast<int64_t>(turns.size()) == N, "rot90: turns size mismatch");
  std::vector<std::vector<int64_t>> perms;
  for (int k = 0; k < 4; ++k) perms.push_back(rot90_perm(H, W, k));
  std::vector<int64_t> flat(static_cast<size_t>(x.size()));
  for (int64_t n = 0; n < N; ++n) {
    const auto& p = perms[static_cast<size_t>(((turns[static_cast<size_t>(n)] % 4) + 4) % 4)];
    for (int64_t c = 0; c < C; ++c) {
      const int64_t base = (n * C + c) * H * W;
      for (int64_t i = 0; i < H * W; ++i)
        flat[static_cast<size_t>(base + i)] = base + p[static_cast<size_t>(i)];
    }
  }
  Tensor<T> xf = reshape(x, Shape{x.size()});
  Tensor<T> yf = index_select(xf, 0, flat);
  return reshape(yf, x.shape());
}

}  // namespace dda
