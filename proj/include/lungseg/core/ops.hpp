#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "lungseg/core/tensor.hpp"

// Differentiable primitives over rank-4 tensors. Forward code fixes the
// floating-point summation order (plain ascending loops, no reassociation),
// which is what the determinism contract and the nested-loop conv oracle
// rely on.

namespace lungseg {

namespace detail {

template <typename T>
inline void axpy_into(std::vector<T>& dst, std::size_t off, const T* src,
                      std::size_t n, T a) {
    for (std::size_t i = 0; i < n; ++i) dst[off + i] += a * src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

// out[n,co,i,j] = bias[co] + sum_{ci,a,b} xpad[n,ci,i*s+a,j*s+b] * k[co,ci,a,b]
// Accumulation runs in ascending (ci,a,b) order per output pixel.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel,
                 const Tensor<T>& bias, int stride = 1, int padding = 0) {
    const Shape xs = x.shape(), ks = kernel.shape();
    require(xs.c == ks.c, "conv2d: input channel count " + std::to_string(xs.c) +
                              " does not match kernel input channels " +
                              std::to_string(ks.c));
    require(bias.numel() == static_cast<std::size_t>(ks.n),
            "conv2d: bias length " + std::to_string(bias.numel()) +
                " does not match kernel output channels " + std::to_string(ks.n));
    require(stride >= 1, "conv2d: stride must be >= 1");
    require(padding >= 0, "conv2d: padding must be >= 0");
    const int ho = (xs.h + 2 * padding - ks.h) / stride + 1;
    const int wo = (xs.w + 2 * padding - ks.w) / stride + 1;
    require(xs.h + 2 * padding >= ks.h && xs.w + 2 * padding >= ks.w && ho >= 1 && wo >= 1,
            "conv2d: output spatial dims < 1 for input " + xs.str() + " kernel " +
                ks.str());

    const Shape os{xs.n, ks.n, ho, wo};
    const std::size_t K = static_cast<std::size_t>(ks.c) * ks.h * ks.w;
    const std::size_t P = static_cast<std::size_t>(ho) * wo;

    auto im2col = [=](const std::vector<T>& xv, int n, std::vector<T>& col) {
        std::size_t kidx = 0;
        for (int ci = 0; ci < xs.c; ++ci)
            for (int a = 0; a < ks.h; ++a)
                for (int b = 0; b < ks.w; ++b, ++kidx) {
                    T* row = col.data() + kidx * P;
                    std::size_t p = 0;
                    for (int oi = 0; oi < ho; ++oi) {
                        const int ih = oi * stride + a - padding;
                        for (int oj = 0; oj < wo; ++oj, ++p) {
                            const int iw = oj * stride + b - padding;
                            row[p] = (ih >= 0 && ih < xs.h && iw >= 0 && iw < xs.w)
                                         ? xv[xs.index(n, ci, ih, iw)]
                                         : T(0);
                        }
                    }
                }
    };

    std::vector<T> out(os.numel());
    {
        std::vector<T> col(K * P);
        const std::vector<T>& xv = x.value();
        const std::vector<T>& kv = kernel.value();
        const std::vector<T>& bv = bias.value();
        for (int n = 0; n < xs.n; ++n) {
            im2col(xv, n, col);
            for (int co = 0; co < ks.n; ++co) {
                T* orow = out.data() + os.index(n, co, 0, 0);
                for (std::size_t p = 0; p < P; ++p) orow[p] = bv[co];
                const T* krow = kv.data() + static_cast<std::size_t>(co) * K;
                for (std::size_t k = 0; k < K; ++k)
                    detail::axpy_into(out, os.index(n, co, 0, 0), col.data() + k * P,
                                      P, krow[k]);
            }
        }
    }

    Tensor<T> xc = x, kc = kernel, bc = bias;
    return Tensor<T>::make_op(
        os, std::move(out), {x, kernel, bias},
        [=](const std::vector<T>& g) mutable {
            const std::vector<T>& xv = xc.value();
            const std::vector<T>& kv = kc.value();
            std::vector<T> col(K * P);
            std::vector<T> gcol(K * P);
            const bool need_dx = xc.tracked();
            const bool need_dk = kc.tracked();
            const bool need_db = bc.tracked();
            std::vector<T>* dx = need_dx ? &xc.grad_buffer() : nullptr;
            std::vector<T>* dk = need_dk ? &kc.grad_buffer() : nullptr;
            std::vector<T>* db = need_db ? &bc.grad_buffer() : nullptr;
            for (int n = 0; n < xs.n; ++n) {
                if (need_dx || need_dk) im2col(xv, n, col);
                if (need_dx) std::fill(gcol.begin(), gcol.end(), T(0));
                for (int co = 0; co < ks.n; ++co) {
                    const T* grow = g.data() + os.index(n, co, 0, 0);
                    if (need_db)
                        for (std::size_t p = 0; p < P; ++p) (*db)[co] += grow[p];
                    const T* krow = kv.data() + static_cast<std::size_t>(co) * K;
                    for (std::size_t k = 0; k < K; ++k) {
                        if (need_dk) {
                            T acc = T(0);
                            const T* crow = col.data() + k * P;
                            for (std::size_t p = 0; p < P; ++p) acc += crow[p] * grow[p];
                            (*dk)[static_cast<std::size_t>(co) * K + k] += acc;
                        }
                        if (need_dx)
                            detail::axpy_into(gcol, k * P, grow, P, krow[k]);
                    }
                }
                if (need_dx) {
                    std::size_t kidx = 0;
                    for (int ci = 0; ci < xs.c; ++ci)
                        for (int a = 0; a < ks.h; ++a)
                            for (int b = 0; b < ks.w; ++b, ++kidx) {
                                const T* grow = gcol.data() + kidx * P;
                                std::size_t p = 0;
                                for (int oi = 0; oi < ho; ++oi) {
                                    const int ih = oi * stride + a - padding;
                                    if (ih < 0 || ih >= xs.h) {
                                        p += wo;
                                        continue;
                                    }
                                    for (int oj = 0; oj < wo; ++oj, ++p) {
                                        const int iw = oj * stride + b - padding;
                                        if (iw >= 0 && iw < xs.w)
                                            (*dx)[xs.index(n, ci, ih, iw)] += grow[p];
                                    }
                                }
                            }
                }
            }
        });
}

// Adjoint of conv2d under a shared (C0,C1,Kh,Kw) kernel: maps C0 -> C1
// channels, output spatial size (H-1)*stride - 2*padding + Kh.
template <typename T>
Tensor<T> conv2d_transpose(const Tensor<T>& x, const Tensor<T>& kernel,
                           const Tensor<T>& bias, int stride = 1,
                           int padding = 0) {
    const Shape xs = x.shape(), ks = kernel.shape();
    require(xs.c == ks.n, "conv2d_transpose: input channel count " +
                              std::to_string(xs.c) + " does not match kernel dim0 " +
                              std::to_string(ks.n));
    require(bias.numel() == static_cast<std::size_t>(ks.c),
            "conv2d_transpose: bias length " + std::to_string(bias.numel()) +
                " does not match kernel dim1 " + std::to_string(ks.c));
    require(stride >= 1, "conv2d_transpose: stride must be >= 1");
    require(padding >= 0, "conv2d_transpose: padding must be >= 0");
    const int ho = (xs.h - 1) * stride - 2 * padding + ks.h;
    const int wo = (xs.w - 1) * stride - 2 * padding + ks.w;
    require(ho >= 1 && wo >= 1, "conv2d_transpose: output spatial dims < 1 for input " +
                                    xs.str() + " kernel " + ks.str());

    const Shape os{xs.n, ks.c, ho, wo};
    const int kh = ks.h, kw = ks.w;

    std::vector<T> out(os.numel());
    {
        const std::vector<T>& xv = x.value();
        const std::vector<T>& kv = kernel.value();
        const std::vector<T>& bv = bias.value();
        for (int n = 0; n < os.n; ++n)
            for (int c1 = 0; c1 < os.c; ++c1) {
                T* plane = out.data() + os.index(n, c1, 0, 0);
                const std::size_t np = static_cast<std::size_t>(ho) * wo;
                for (std::size_t p = 0; p < np; ++p) plane[p] = bv[c1];
            }
        for (int n = 0; n < xs.n; ++n)
            for (int c0 = 0; c0 < xs.c; ++c0)
                for (int i = 0; i < xs.h; ++i)
                    for (int j = 0; j < xs.w; ++j) {
                        const T xv0 = xv[xs.index(n, c0, i, j)];
                        for (int c1 = 0; c1 < os.c; ++c1)
                            for (int a = 0; a < kh; ++a) {
                                const int u = i * stride + a - padding;
                                if (u < 0 || u >= ho) continue;
                                for (int b = 0; b < kw; ++b) {
                                    const int v = j * stride + b - padding;
                                    if (v < 0 || v >= wo) continue;
                                    out[os.index(n, c1, u, v)] +=
                                        xv0 * kv[ks.index(c0, c1, a, b)];
                                }
                            }
                    }
    }

    Tensor<T> xc = x, kc = kernel, bc = bias;
    return Tensor<T>::make_op(
        os, std::move(out), {x, kernel, bias},
        [=](const std::vector<T>& g) mutable {
            const std::vector<T>& xv = xc.value();
            const std::vector<T>& kv = kc.value();
            const bool need_dx = xc.tracked();
            const bool need_dk = kc.tracked();
            if (bc.tracked()) {
                std::vector<T>& db = bc.grad_buffer();
                for (int n = 0; n < os.n; ++n)
                    for (int c1 = 0; c1 < os.c; ++c1) {
                        const T* plane = g.data() + os.index(n, c1, 0, 0);
                        const std::size_t np = static_cast<std::size_t>(ho) * wo;
                        for (std::size_t p = 0; p < np; ++p) db[c1] += plane[p];
                    }
            }
            if (!need_dx && !need_dk) return;
            std::vector<T>* dx = need_dx ? &xc.grad_buffer() : nullptr;
            std::vector<T>* dk = need_dk ? &kc.grad_buffer() : nullptr;
            for (int n = 0; n < xs.n; ++n)
                for (int c0 = 0; c0 < xs.c; ++c0)
                    for (int i = 0; i < xs.h; ++i)
                        for (int j = 0; j < xs.w; ++j) {
                            const T xv0 = xv[xs.index(n, c0, i, j)];
                            T acc = T(0);
                            for (int c1 = 0; c1 < os.c; ++c1)
                                for (int a = 0; a < kh; ++a) {
                                    const int u = i * stride + a - padding;
                                    if (u < 0 || u >= ho) continue;
                                    for (int b = 0; b < kw; ++b) {
                                        const int v = j * stride + b - padding;
                                        if (v < 0 || v >= wo) continue;
                                        const T gv = g[os.index(n, c1, u, v)];
                                        if (need_dk)
                                            (*dk)[ks.index(c0, c1, a, b)] += xv0 * gv;
                                        if (need_dx)
                                            acc += kv[ks.index(c0, c1, a, b)] * gv;
                                    }
                                }
                            if (need_dx) (*dx)[xs.index(n, c0, i, j)] += acc;
                        }
        });
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

// Non-overlapping k x k max. Gradient goes to the first element in scan
// order attaining the window max.
template <typename T>
Tensor<T> max_pool2d(const Tensor<T>& x, int k = 2) {
    const Shape xs = x.shape();
    require(k >= 1, "max_pool2d: k must be >= 1");
    require(xs.h % k == 0 && xs.w % k == 0,
            "max_pool2d: spatial dims " + xs.str() + " not divisible by k=" +
                std::to_string(k));
    const Shape os{xs.n, xs.c, xs.h / k, xs.w / k};
    std::vector<T> out(os.numel());
    auto argmax = std::make_shared<std::vector<std::size_t>>(os.numel());
    const std::vector<T>& xv = x.value();
    std::size_t o = 0;
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c)
            for (int oi = 0; oi < os.h; ++oi)
                for (int oj = 0; oj < os.w; ++oj, ++o) {
                    std::size_t best_idx = xs.index(n, c, oi * k, oj * k);
                    T best = xv[best_idx];
                    for (int a = 0; a < k; ++a)
                        for (int b = 0; b < k; ++b) {
                            const std::size_t idx = xs.index(n, c, oi * k + a, oj * k + b);
                            if (xv[idx] > best) {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    out[o] = best;
                    (*argmax)[o] = best_idx;
                }

    Tensor<T> xc = x;
    return Tensor<T>::make_op(os, std::move(out), {x},
                              [xc, argmax](const std::vector<T>& g) mutable {
                                  if (!xc.tracked()) return;
                                  std::vector<T>& dx = xc.grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                      dx[(*argmax)[i]] += g[i];
                              });
}

// 2x2 sliding max with stride 1 and border-clipped windows; output keeps the
// input's spatial size. Used by the inception pool branch.
template <typename T>
Tensor<T> max_pool2d_same(const Tensor<T>& x, int k = 2) {
    const Shape xs = x.shape();
    require(k >= 1, "max_pool2d_same: k must be >= 1");
    std::vector<T> out(xs.numel());
    auto argmax = std::make_shared<std::vector<std::size_t>>(xs.numel());
    const std::vector<T>& xv = x.value();
    std::size_t o = 0;
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c)
            for (int i = 0; i < xs.h; ++i)
                for (int j = 0; j < xs.w; ++j, ++o) {
                    std::size_t best_idx = xs.index(n, c, i, j);
                    T best = xv[best_idx];
                    for (int a = 0; a < k; ++a) {
                        if (i + a >= xs.h) break;
                        for (int b = 0; b < k; ++b) {
                            if (j + b >= xs.w) break;
                            const std::size_t idx = xs.index(n, c, i + a, j + b);
                            if (xv[idx] > best) {
                                best = xv[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    out[o] = best;
                    (*argmax)[o] = best_idx;
                }

    Tensor<T> xc = x;
    return Tensor<T>::make_op(xs, std::move(out), {x},
                              [xc, argmax](const std::vector<T>& g) mutable {
                                  if (!xc.tracked()) return;
                                  std::vector<T>& dx = xc.grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                      dx[(*argmax)[i]] += g[i];
                              });
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

// Affine map on the flattened per-item features: x (N,*) -> (N,M,1,1).
// weights (1,1,D,M), bias (1,M,1,1).
template <typename T>
Tensor<T> dense(const Tensor<T>& x, const Tensor<T>& weights,
                const Tensor<T>& bias) {
    const Shape xs = x.shape(), ws = weights.shape();
    const int D = xs.c * xs.h * xs.w;
    require(ws.h == D, "dense: flattened input size " + std::to_string(D) +
                           " does not match weight rows " + std::to_string(ws.h));
    const int M = ws.w;
    require(bias.numel() == static_cast<std::size_t>(M),
            "dense: bias length " + std::to_string(bias.numel()) +
                " does not match output size " + std::to_string(M));
    const Shape os{xs.n, M, 1, 1};
    std::vector<T> out(os.numel());
    const std::vector<T>& xv = x.value();
    const std::vector<T>& wv = weights.value();
    const std::vector<T>& bv = bias.value();
    for (int n = 0; n < xs.n; ++n) {
        const T* xrow = xv.data() + static_cast<std::size_t>(n) * D;
        T* orow = out.data() + static_cast<std::size_t>(n) * M;
        for (int m = 0; m < M; ++m) orow[m] = bv[m];
        for (int d = 0; d < D; ++d)
            detail::axpy_into(out, static_cast<std::size_t>(n) * M,
                              wv.data() + static_cast<std::size_t>(d) * M,
                              static_cast<std::size_t>(M), xrow[d]);
    }

    Tensor<T> xc = x, wc = weights, bc = bias;
    return Tensor<T>::make_op(
        os, std::move(out), {x, weights, bias},
        [=](const std::vector<T>& g) mutable {
            const std::vector<T>& xv = xc.value();
            const std::vector<T>& wv = wc.value();
            const bool need_dx = xc.tracked();
            const bool need_dw = wc.tracked();
            std::vector<T>* dx = need_dx ? &xc.grad_buffer() : nullptr;
            std::vector<T>* dw = need_dw ? &wc.grad_buffer() : nullptr;
            if (bc.tracked()) {
                std::vector<T>& db = bc.grad_buffer();
                for (int n = 0; n < xs.n; ++n)
                    for (int m = 0; m < M; ++m)
                        db[m] += g[static_cast<std::size_t>(n) * M + m];
            }
            for (int n = 0; n < xs.n; ++n) {
                const T* xrow = xv.data() + static_cast<std::size_t>(n) * D;
                const T* grow = g.data() + static_cast<std::size_t>(n) * M;
                for (int d = 0; d < D; ++d) {
                    const T* wrow = wv.data() + static_cast<std::size_t>(d) * M;
                    if (need_dx) {
                        T acc = T(0);
                        for (int m = 0; m < M; ++m) acc += grow[m] * wrow[m];
                        (*dx)[static_cast<std::size_t>(n) * D + d] += acc;
                    }
                    if (need_dw)
                        detail::axpy_into(*dw, static_cast<std::size_t>(d) * M, grow,
                                          static_cast<std::size_t>(M), xrow[d]);
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    std::vector<T> out(x.value());
    for (T& v : out) v = v > T(0) ? v : T(0);
    Tensor<T> xc = x;
    return Tensor<T>::make_op(x.shape(), std::move(out), {x},
                              [xc](const std::vector<T>& g) mutable {
                                  if (!xc.tracked()) return;
                                  std::vector<T>& dx = xc.grad_buffer();
                                  const std::vector<T>& xv = xc.value();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                      if (xv[i] > T(0)) dx[i] += g[i];
                              });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T alpha) {
    std::vector<T> out(x.value());
    for (T& v : out) v = v > T(0) ? v : alpha * v;
    Tensor<T> xc = x;
    return Tensor<T>::make_op(x.shape(), std::move(out), {x},
                              [xc, alpha](const std::vector<T>& g) mutable {
                                  if (!xc.tracked()) return;
                                  std::vector<T>& dx = xc.grad_buffer();
                                  const std::vector<T>& xv = xc.value();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                      dx[i] += xv[i] > T(0) ? g[i] : alpha * g[i];
                              });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    std::vector<T> out(x.numel());
    const std::vector<T>& xv = x.value();
    for (std::size_t i = 0; i < out.size(); ++i)
        out[i] = T(1) / (T(1) + std::exp(-xv[i]));
    Tensor<T> xc = x;
    auto saved = std::make_shared<std::vector<T>>(out);
    return Tensor<T>::make_op(x.shape(), std::move(out), {x},
                              [xc, saved](const std::vector<T>& g) mutable {
                                  if (!xc.tracked()) return;
                                  std::vector<T>& dx = xc.grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) {
                                      const T s = (*saved)[i];
                                      dx[i] += g[i] * s * (T(1) - s);
                                  }
                              });
}

template <typename T>
Tensor<T> add(const Tensor<T>& x, const Tensor<T>& y) {
    require(x.shape() == y.shape(), "add: shape mismatch " + x.shape().str() +
                                        " vs " + y.shape().str());
    std::vector<T> out(x.numel());
    const std::vector<T>& xv = x.value();
    const std::vector<T>& yv = y.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] + yv[i];
    Tensor<T> xc = x, yc = y;
    return Tensor<T>::make_op(x.shape(), std::move(out), {x, y},
                              [xc, yc](const std::vector<T>& g) mutable {
                                  if (xc.tracked()) {
                                      std::vector<T>& dx = xc.grad_buffer();
                                      for (std::size_t i = 0; i < g.size(); ++i)
                                          dx[i] += g[i];
                                  }
                                  if (yc.tracked()) {
                                      std::vector<T>& dy = yc.grad_buffer();
                                      for (std::size_t i = 0; i < g.size(); ++i)
                                          dy[i] += g[i];
                                  }
                              });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& x, const Tensor<T>& y) {
    require(x.shape() == y.shape(), "mul: shape mismatch " + x.shape().str() +
                                        " vs " + y.shape().str());
    std::vector<T> out(x.numel());
    const std::vector<T>& xv = x.value();
    const std::vector<T>& yv = y.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[i] * yv[i];
    Tensor<T> xc = x, yc = y;
    return Tensor<T>::make_op(x.shape(), std::move(out), {x, y},
                              [xc, yc](const std::vector<T>& g) mutable {
                                  if (xc.tracked()) {
                                      std::vector<T>& dx = xc.grad_buffer();
                                      const std::vector<T>& yv = yc.value();
                                      for (std::size_t i = 0; i < g.size(); ++i)
                                          dx[i] += g[i] * yv[i];
                                  }
                                  if (yc.tracked()) {
                                      std::vector<T>& dy = yc.grad_buffer();
                                      const std::vector<T>& xv = xc.value();
                                      for (std::size_t i = 0; i < g.size(); ++i)
                                          dy[i] += g[i] * xv[i];
                                  }
                              });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
    std::vector<T> out(x.value());
    for (T& v : out) v *= factor;
    Tensor<T> xc = x;
    return Tensor<T>::make_op(x.shape(), std::move(out), {x},
                              [xc, factor](const std::vector<T>& g) mutable {
                                  if (!xc.tracked()) return;
                                  std::vector<T>& dx = xc.grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                      dx[i] += g[i] * factor;
                              });
}

// Per-channel gate: every pixel of channel c in batch item n is multiplied
// by w[n,c]. w has shape (N,C,1,1).
template <typename T>
Tensor<T> channel_scale(const Tensor<T>& x, const Tensor<T>& w) {
    const Shape xs = x.shape(), ws = w.shape();
    require(ws.n == xs.n && ws.c == xs.c && ws.h == 1 && ws.w == 1,
            "channel_scale: weights " + ws.str() + " do not match input " + xs.str());
    const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
    std::vector<T> out(x.numel());
    const std::vector<T>& xv = x.value();
    const std::vector<T>& wv = w.value();
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
            const T s = wv[ws.index(n, c, 0, 0)];
            const std::size_t off = xs.index(n, c, 0, 0);
            for (std::size_t p = 0; p < plane; ++p) out[off + p] = xv[off + p] * s;
        }
    Tensor<T> xc = x, wc = w;
    return Tensor<T>::make_op(
        xs, std::move(out), {x, w}, [=](const std::vector<T>& g) mutable {
            const std::vector<T>& xv = xc.value();
            const std::vector<T>& wv = wc.value();
            if (xc.tracked()) {
                std::vector<T>& dx = xc.grad_buffer();
                for (int n = 0; n < xs.n; ++n)
                    for (int c = 0; c < xs.c; ++c) {
                        const T s = wv[ws.index(n, c, 0, 0)];
                        const std::size_t off = xs.index(n, c, 0, 0);
                        for (std::size_t p = 0; p < plane; ++p)
                            dx[off + p] += g[off + p] * s;
                    }
            }
            if (wc.tracked()) {
                std::vector<T>& dw = wc.grad_buffer();
                for (int n = 0; n < xs.n; ++n)
                    for (int c = 0; c < xs.c; ++c) {
                        const std::size_t off = xs.index(n, c, 0, 0);
                        T acc = T(0);
                        for (std::size_t p = 0; p < plane; ++p)
                            acc += g[off + p] * xv[off + p];
                        dw[ws.index(n, c, 0, 0)] += acc;
                    }
            }
        });
}

// Per-position gate: every channel at pixel (h,w) of batch item n is
// multiplied by m[n,0,h,w]. m has shape (N,1,H,W).
template <typename T>
Tensor<T> spatial_scale(const Tensor<T>& x, const Tensor<T>& m) {
    const Shape xs = x.shape(), ms = m.shape();
    require(ms.n == xs.n && ms.c == 1 && ms.h == xs.h && ms.w == xs.w,
            "spatial_scale: map " + ms.str() + " does not match input " + xs.str());
    const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
    std::vector<T> out(x.numel());
    const std::vector<T>& xv = x.value();
    const std::vector<T>& mv = m.value();
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
            const std::size_t off = xs.index(n, c, 0, 0);
            const std::size_t moff = ms.index(n, 0, 0, 0);
            for (std::size_t p = 0; p < plane; ++p)
                out[off + p] = xv[off + p] * mv[moff + p];
        }
    Tensor<T> xc = x, mc = m;
    return Tensor<T>::make_op(
        xs, std::move(out), {x, m}, [=](const std::vector<T>& g) mutable {
            const std::vector<T>& xv = xc.value();
            const std::vector<T>& mv = mc.value();
            if (xc.tracked()) {
                std::vector<T>& dx = xc.grad_buffer();
                for (int n = 0; n < xs.n; ++n)
                    for (int c = 0; c < xs.c; ++c) {
                        const std::size_t off = xs.index(n, c, 0, 0);
                        const std::size_t moff = ms.index(n, 0, 0, 0);
                        for (std::size_t p = 0; p < plane; ++p)
                            dx[off + p] += g[off + p] * mv[moff + p];
                    }
            }
            if (mc.tracked()) {
                std::vector<T>& dm = mc.grad_buffer();
                for (int n = 0; n < xs.n; ++n)
                    for (int c = 0; c < xs.c; ++c) {
                        const std::size_t off = xs.index(n, c, 0, 0);
                        const std::size_t moff = ms.index(n, 0, 0, 0);
                        for (std::size_t p = 0; p < plane; ++p)
                            dm[moff + p] += g[off + p] * xv[off + p];
                    }
            }
        });
}

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& x, const Tensor<T>& y) {
    const Shape xs = x.shape(), ys = y.shape();
    require(xs.n == ys.n && xs.h == ys.h && xs.w == ys.w,
            "concat_channels: N/H/W mismatch " + xs.str() + " vs " + ys.str());
    const Shape os{xs.n, xs.c + ys.c, xs.h, xs.w};
    const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
    std::vector<T> out(os.numel());
    const std::vector<T>& xv = x.value();
    const std::vector<T>& yv = y.value();
    for (int n = 0; n < os.n; ++n) {
        std::copy_n(xv.data() + xs.index(n, 0, 0, 0), plane * xs.c,
                    out.data() + os.index(n, 0, 0, 0));
        std::copy_n(yv.data() + ys.index(n, 0, 0, 0), plane * ys.c,
                    out.data() + os.index(n, xs.c, 0, 0));
    }
    Tensor<T> xc = x, yc = y;
    return Tensor<T>::make_op(
        os, std::move(out), {x, y}, [=](const std::vector<T>& g) mutable {
            if (xc.tracked()) {
                std::vector<T>& dx = xc.grad_buffer();
                for (int n = 0; n < os.n; ++n) {
                    const std::size_t go = os.index(n, 0, 0, 0);
                    const std::size_t xo = xs.index(n, 0, 0, 0);
                    for (std::size_t p = 0; p < plane * xs.c; ++p)
                        dx[xo + p] += g[go + p];
                }
            }
            if (yc.tracked()) {
                std::vector<T>& dy = yc.grad_buffer();
                for (int n = 0; n < os.n; ++n) {
                    const std::size_t go = os.index(n, xs.c, 0, 0);
                    const std::size_t yo = ys.index(n, 0, 0, 0);
                    for (std::size_t p = 0; p < plane * ys.c; ++p)
                        dy[yo + p] += g[go + p];
                }
            }
        });
}

// Reverses the W axis. Involution: hflip(hflip(x)) == x bit-exactly.
template <typename T>
Tensor<T> hflip(const Tensor<T>& x) {
    const Shape xs = x.shape();
    std::vector<T> out(x.numel());
    const std::vector<T>& xv = x.value();
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c)
            for (int h = 0; h < xs.h; ++h)
                for (int w = 0; w < xs.w; ++w)
                    out[xs.index(n, c, h, w)] = xv[xs.index(n, c, h, xs.w - 1 - w)];
    Tensor<T> xc = x;
    return Tensor<T>::make_op(xs, std::move(out), {x},
                              [xc, xs](const std::vector<T>& g) mutable {
                                  if (!xc.tracked()) return;
                                  std::vector<T>& dx = xc.grad_buffer();
                                  for (int n = 0; n < xs.n; ++n)
                                      for (int c = 0; c < xs.c; ++c)
                                          for (int h = 0; h < xs.h; ++h)
                                              for (int w = 0; w < xs.w; ++w)
                                                  dx[xs.index(n, c, h, xs.w - 1 - w)] +=
                                                      g[xs.index(n, c, h, w)];
                              });
}

// ---------------------------------------------------------------------------
// Pooled summaries feeding the attention blocks
// ---------------------------------------------------------------------------

// (N,C,H,W) -> (N,1,2,C): row 0 per-channel spatial max, row 1 per-channel
// spatial mean. Laid out as a 1-channel 2xC image so 2x1 convs apply.
template <typename T>
Tensor<T> channel_pool(const Tensor<T>& x) {
    const Shape xs = x.shape();
    const Shape os{xs.n, 1, 2, xs.c};
    const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
    std::vector<T> out(os.numel());
    auto argmax = std::make_shared<std::vector<std::size_t>>(
        static_cast<std::size_t>(xs.n) * xs.c);
    const std::vector<T>& xv = x.value();
    for (int n = 0; n < xs.n; ++n)
        for (int c = 0; c < xs.c; ++c) {
            const std::size_t off = xs.index(n, c, 0, 0);
            std::size_t best = off;
            T mx = xv[off];
            T sum = T(0);
            for (std::size_t p = 0; p < plane; ++p) {
                if (xv[off + p] > mx) {
                    mx = xv[off + p];
                    best = off + p;
                }
                sum += xv[off + p];
            }
            out[os.index(n, 0, 0, c)] = mx;
            out[os.index(n, 0, 1, c)] = sum / static_cast<T>(plane);
            (*argmax)[static_cast<std::size_t>(n) * xs.c + c] = best;
        }
    Tensor<T> xc = x;
    return Tensor<T>::make_op(
        os, std::move(out), {x}, [=](const std::vector<T>& g) mutable {
            if (!xc.tracked()) return;
            std::vector<T>& dx = xc.grad_buffer();
            for (int n = 0; n < xs.n; ++n)
                for (int c = 0; c < xs.c; ++c) {
                    dx[(*argmax)[static_cast<std::size_t>(n) * xs.c + c]] +=
                        g[os.index(n, 0, 0, c)];
                    const T gm = g[os.index(n, 0, 1, c)] / static_cast<T>(plane);
                    const std::size_t off = xs.index(n, c, 0, 0);
                    for (std::size_t p = 0; p < plane; ++p) dx[off + p] += gm;
                }
        });
}

// (N,C,H,W) -> (N,2,H,W): channel 0 across-channel max map, channel 1
// across-channel mean map.
template <typename T>
Tensor<T> spatial_pool(const Tensor<T>& x) {
    const Shape xs = x.shape();
    const Shape os{xs.n, 2, xs.h, xs.w};
    const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
    std::vector<T> out(os.numel());
    auto argmax = std::make_shared<std::vector<int>>(
        static_cast<std::size_t>(xs.n) * plane);
    const std::vector<T>& xv = x.value();
    for (int n = 0; n < xs.n; ++n)
        for (std::size_t p = 0; p < plane; ++p) {
            const std::size_t base = xs.index(n, 0, 0, 0) + p;
            T mx = xv[base];
            int bc = 0;
            T sum = T(0);
            for (int c = 0; c < xs.c; ++c) {
                const T v = xv[base + static_cast<std::size_t>(c) * plane];
                if (v > mx) {
                    mx = v;
                    bc = c;
                }
                sum += v;
            }
            out[os.index(n, 0, 0, 0) + p] = mx;
            out[os.index(n, 1, 0, 0) + p] = sum / static_cast<T>(xs.c);
            (*argmax)[static_cast<std::size_t>(n) * plane + p] = bc;
        }
    Tensor<T> xc = x;
    return Tensor<T>::make_op(
        os, std::move(out), {x}, [=](const std::vector<T>& g) mutable {
            if (!xc.tracked()) return;
            std::vector<T>& dx = xc.grad_buffer();
            for (int n = 0; n < xs.n; ++n)
                for (std::size_t p = 0; p < plane; ++p) {
                    const std::size_t base = xs.index(n, 0, 0, 0) + p;
                    const int bc = (*argmax)[static_cast<std::size_t>(n) * plane + p];
                    dx[base + static_cast<std::size_t>(bc) * plane] +=
                        g[os.index(n, 0, 0, 0) + p];
                    const T gm = g[os.index(n, 1, 0, 0) + p] / static_cast<T>(xs.c);
                    for (int c = 0; c < xs.c; ++c)
                        dx[base + static_cast<std::size_t>(c) * plane] += gm;
                }
        });
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

// Running statistics live in non-tracked tensors so they ride through the
// parameter checkpoint alongside gamma/beta.
template <typename T>
struct BatchNormState {
    Tensor<T> running_mean;  // (1,C,1,1)
    Tensor<T> running_var;   // (1,C,1,1)

    BatchNormState() = default;
    explicit BatchNormState(int channels)
        : running_mean(Tensor<T>::zeros(Shape{1, channels, 1, 1})),
          running_var(Tensor<T>::full(Shape{1, channels, 1, 1}, T(1))) {}
};

// Training mode normalizes by batch statistics (biased variance, eps 1e-5)
// and updates running stats with momentum 0.1; inference mode uses the
// running stats.
template <typename T>
Tensor<T> batchnorm2d(const Tensor<T>& x, const Tensor<T>& gamma,
                      const Tensor<T>& beta, BatchNormState<T>& state,
                      bool training, T momentum = T(0.1), T eps = T(1e-5)) {
    const Shape xs = x.shape();
    require(gamma.numel() == static_cast<std::size_t>(xs.c) &&
                beta.numel() == static_cast<std::size_t>(xs.c),
            "batchnorm2d: gamma/beta length does not match channels " +
                std::to_string(xs.c));
    require(state.running_mean.defined() &&
                state.running_mean.numel() == static_cast<std::size_t>(xs.c),
            "batchnorm2d: running stats sized for " +
                std::to_string(state.running_mean.defined()
                                   ? state.running_mean.numel()
                                   : 0) +
                " channels, input has " + std::to_string(xs.c));
    const std::size_t plane = static_cast<std::size_t>(xs.h) * xs.w;
    const std::size_t per_channel = static_cast<std::size_t>(xs.n) * plane;

    const std::vector<T>& xv = x.value();
    const std::vector<T>& gv = gamma.value();
    const std::vector<T>& bv = beta.value();
    std::vector<T>& rm = state.running_mean.mutable_value();
    std::vector<T>& rv = state.running_var.mutable_value();

    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto invstd = std::make_shared<std::vector<T>>(xs.c);
    std::vector<T> out(x.numel());

    for (int c = 0; c < xs.c; ++c) {
        T mean, var;
        if (training) {
            T sum = T(0);
            for (int n = 0; n < xs.n; ++n) {
                const std::size_t off = xs.index(n, c, 0, 0);
                for (std::size_t p = 0; p < plane; ++p) sum += xv[off + p];
            }
            mean = sum / static_cast<T>(per_channel);
            T sq = T(0);
            for (int n = 0; n < xs.n; ++n) {
                const std::size_t off = xs.index(n, c, 0, 0);
                for (std::size_t p = 0; p < plane; ++p) {
                    const T d = xv[off + p] - mean;
                    sq += d * d;
                }
            }
            var = sq / static_cast<T>(per_channel);
            state.running_mean[c] = (T(1) - momentum) * state.running_mean[c] +
                                    momentum * mean;
            state.running_var[c] = (T(1) - momentum) * state.running_var[c] +
                                   momentum * var;
        } else {
            mean = state.running_mean[c];
            var = state.running_var[c];
        }
        const T is = T(1) / std::sqrt(var + eps);
        (*invstd)[c] = is;
        for (int n = 0; n < xs.n; ++n) {
            const std::size_t off = xs.index(n, c, 0, 0);
            for (std::size_t p = 0; p < plane; ++p) {
                const T xh = (xv[off + p] - mean) * is;
                (*xhat)[off + p] = xh;
                out[off + p] = gv[c] * xh + bv[c];
            }
        }
    }

    Tensor<T> xc = x, gc = gamma, bc = beta;
    return Tensor<T>::make_op(
        xs, std::move(out), {x, gamma, beta},
        [=](const std::vector<T>& g) mutable {
            const std::vector<T>& gv = gc.value();
            if (bc.tracked()) {
                std::vector<T>& db = bc.grad_buffer();
                for (int c = 0; c < xs.c; ++c)
                    for (int n = 0; n < xs.n; ++n) {
                        const std::size_t off = xs.index(n, c, 0, 0);
                        for (std::size_t p = 0; p < plane; ++p) db[c] += g[off + p];
                    }
            }
            if (gc.tracked()) {
                std::vector<T>& dg = gc.grad_buffer();
                for (int c = 0; c < xs.c; ++c)
                    for (int n = 0; n < xs.n; ++n) {
                        const std::size_t off = xs.index(n, c, 0, 0);
                        for (std::size_t p = 0; p < plane; ++p)
                            dg[c] += g[off + p] * (*xhat)[off + p];
                    }
            }
            if (!xc.tracked()) return;
            std::vector<T>& dx = xc.grad_buffer();
            for (int c = 0; c < xs.c; ++c) {
                const T is = (*invstd)[c];
                if (training) {
                    T gsum = T(0), gxsum = T(0);
                    for (int n = 0; n < xs.n; ++n) {
                        const std::size_t off = xs.index(n, c, 0, 0);
                        for (std::size_t p = 0; p < plane; ++p) {
                            gsum += g[off + p];
                            gxsum += g[off + p] * (*xhat)[off + p];
                        }
                    }
                    const T gmean = gsum / static_cast<T>(per_channel);
                    const T gxmean = gxsum / static_cast<T>(per_channel);
                    for (int n = 0; n < xs.n; ++n) {
                        const std::size_t off = xs.index(n, c, 0, 0);
                        for (std::size_t p = 0; p < plane; ++p)
                            dx[off + p] += gv[c] * is *
                                           (g[off + p] - gmean -
                                            (*xhat)[off + p] * gxmean);
                    }
                } else {
                    for (int n = 0; n < xs.n; ++n) {
                        const std::size_t off = xs.index(n, c, 0, 0);
                        for (std::size_t p = 0; p < plane; ++p)
                            dx[off + p] += gv[c] * is * g[off + p];
                    }
                }
            }
        });
}

// ---------------------------------------------------------------------------
// Reductions and losses
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.value()) acc += v;
    Tensor<T> xc = x;
    return Tensor<T>::make_op(Shape{1, 1, 1, 1}, {acc}, {x},
                              [xc](const std::vector<T>& g) mutable {
                                  if (!xc.tracked()) return;
                                  std::vector<T>& dx = xc.grad_buffer();
                                  for (T& v : dx) v += g[0];
                              });
}

inline constexpr double kBceClamp = 1e-7;

// Mean binary cross entropy; predictions are clamped to
// [kBceClamp, 1 - kBceClamp] before the logs. Targets are constants.
template <typename T>
Tensor<T> bce(const Tensor<T>& pred, const Tensor<T>& target) {
    require(pred.shape() == target.shape(),
            "bce: shape mismatch " + pred.shape().str() + " vs " +
                target.shape().str());
    const T lo = static_cast<T>(kBceClamp);
    const T hi = T(1) - lo;
    const std::vector<T>& pv = pred.value();
    const std::vector<T>& tv = target.value();
    const std::size_t n = pv.size();
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        const T pc = std::min(std::max(pv[i], lo), hi);
        acc += tv[i] * std::log(pc) + (T(1) - tv[i]) * std::log(T(1) - pc);
    }
    const T loss = -acc / static_cast<T>(n);
    Tensor<T> pc_ = pred, tc_ = target;
    return Tensor<T>::make_op(
        Shape{1, 1, 1, 1}, {loss}, {pred, target},
        [=](const std::vector<T>& g) mutable {
            if (!pc_.tracked()) return;
            std::vector<T>& dp = pc_.grad_buffer();
            const std::vector<T>& pv = pc_.value();
            const std::vector<T>& tv = tc_.value();
            const T gn = g[0] / static_cast<T>(n);
            for (std::size_t i = 0; i < n; ++i) {
                if (pv[i] < lo || pv[i] > hi) continue;  // clamp region: zero slope
                dp[i] += gn * (pv[i] - tv[i]) / (pv[i] * (T(1) - pv[i]));
            }
        });
}

// Mean absolute difference.
template <typename T>
Tensor<T> l1(const Tensor<T>& a, const Tensor<T>& b) {
    require(a.shape() == b.shape(), "l1: shape mismatch " + a.shape().str() +
                                        " vs " + b.shape().str());
    const std::vector<T>& av = a.value();
    const std::vector<T>& bv = b.value();
    const std::size_t n = av.size();
    T acc = T(0);
    for (std::size_t i = 0; i < n; ++i) acc += std::abs(av[i] - bv[i]);
    Tensor<T> ac = a, bc = b;
    return Tensor<T>::make_op(
        Shape{1, 1, 1, 1}, {acc / static_cast<T>(n)}, {a, b},
        [=](const std::vector<T>& g) mutable {
            const std::vector<T>& av = ac.value();
            const std::vector<T>& bv = bc.value();
            const T gn = g[0] / static_cast<T>(n);
            auto sign = [](T d) { return d > T(0) ? T(1) : (d < T(0) ? T(-1) : T(0)); };
            if (ac.tracked()) {
                std::vector<T>& da = ac.grad_buffer();
                for (std::size_t i = 0; i < n; ++i) da[i] += gn * sign(av[i] - bv[i]);
            }
            if (bc.tracked()) {
                std::vector<T>& db = bc.grad_buffer();
                for (std::size_t i = 0; i < n; ++i) db[i] -= gn * sign(av[i] - bv[i]);
            }
        });
}

}  // namespace lungseg
