// Copyright 2026 The emofuse Authors
// SPDX-License-Identifier: Apache-2.0
//
// Differentiable operations. Each op computes its output eagerly and, when
// any input requires a gradient, records a backward rule on the tape.
// Backward rules accumulate (+=) into input gradient buffers.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <memory>
#include <string>
#include <type_traits>
#include <vector>

#include "emofuse/common.hpp"
#include "emofuse/rng.hpp"
#include "emofuse/tape.hpp"
#include "emofuse/tensor.hpp"

namespace emofuse {

enum class Padding { valid, same };
enum class Mode { train, eval };

namespace detail {

template <class T>
inline void axpy(std::span<T> dst, std::span<const T> src) {
  for (size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

template <class T>
inline bool any_grad(std::initializer_list<const TensorPtr<T>*> ts) {
  for (auto* t : ts)
    if (*t && (*t)->requires_grad()) return true;
  return false;
}

}  // namespace detail

// Leaf copy: same values, no gradient, detached from the tape.
template <class T>
TensorPtr<T> detach(const TensorPtr<T>& t) {
  return Tensor<T>::make(t->shape(), std::vector<T>(t->values().begin(), t->values().end()), false);
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <class T>
TensorPtr<T> add(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (a->shape() != b->shape())
    throw ShapeError("add: shape mismatch " + shape_str(a->shape()) + " vs " + shape_str(b->shape()));
  const bool rg = a->requires_grad() || b->requires_grad();
  auto out = Tensor<T>::make(a->shape(), rg);
  auto av = a->values(), bv = b->values(), ov = out->values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] + bv[i];
  tape.note_output(out, "add");
  if (rg) {
    tape.record("add", {a->id(), b->id()}, out->id(), [a, b, out] {
      auto g = out->grad();
      if (a->requires_grad()) detail::axpy<T>(a->grad(), {g.data(), g.size()});
      if (b->requires_grad()) detail::axpy<T>(b->grad(), {g.data(), g.size()});
    });
  }
  return out;
}

template <class T>
TensorPtr<T> mul(Tape<T>& tape, const TensorPtr<T>& a, const TensorPtr<T>& b) {
  if (a->shape() != b->shape())
    throw ShapeError("mul: shape mismatch " + shape_str(a->shape()) + " vs " + shape_str(b->shape()));
  const bool rg = a->requires_grad() || b->requires_grad();
  auto out = Tensor<T>::make(a->shape(), rg);
  auto av = a->values(), bv = b->values(), ov = out->values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  tape.note_output(out, "mul");
  if (rg) {
    tape.record("mul", {a->id(), b->id()}, out->id(), [a, b, out] {
      auto g = out->grad();
      auto av = a->values(), bv = b->values();
      if (a->requires_grad()) {
        auto ga = a->grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
      }
      if (b->requires_grad()) {
        auto gb = b->grad();
        for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
      }
    });
  }
  return out;
}

// max(0, x). The subgradient at exactly 0 is taken as 0.
template <class T>
TensorPtr<T> relu(Tape<T>& tape, const TensorPtr<T>& x) {
  auto out = Tensor<T>::make(x->shape(), x->requires_grad());
  auto xv = x->values(), ov = out->values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] > T(0) ? xv[i] : T(0);
  tape.note_output(out, "relu");
  if (x->requires_grad()) {
    tape.record("relu", {x->id()}, out->id(), [x, out] {
      auto g = out->grad();
      auto xv = x->values();
      auto gx = x->grad();
      for (size_t i = 0; i < g.size(); ++i)
        if (xv[i] > T(0)) gx[i] += g[i];
    });
  }
  return out;
}

template <class T>
TensorPtr<T> sigmoid(Tape<T>& tape, const TensorPtr<T>& x) {
  auto out = Tensor<T>::make(x->shape(), x->requires_grad());
  auto xv = x->values(), ov = out->values();
  for (size_t i = 0; i < ov.size(); ++i) {
    const T v = xv[i];
    if (v >= T(0)) {
      ov[i] = T(1) / (T(1) + std::exp(-v));
    } else {
      const T e = std::exp(v);
      ov[i] = e / (T(1) + e);
    }
  }
  tape.note_output(out, "sigmoid");
  if (x->requires_grad()) {
    tape.record("sigmoid", {x->id()}, out->id(), [x, out] {
      auto g = out->grad();
      auto ov = out->values();
      auto gx = x->grad();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * ov[i] * (T(1) - ov[i]);
    });
  }
  return out;
}

template <class T>
TensorPtr<T> tanh_op(Tape<T>& tape, const TensorPtr<T>& x) {
  auto out = Tensor<T>::make(x->shape(), x->requires_grad());
  auto xv = x->values(), ov = out->values();
  for (size_t i = 0; i < ov.size(); ++i) ov[i] = std::tanh(xv[i]);
  tape.note_output(out, "tanh");
  if (x->requires_grad()) {
    tape.record("tanh", {x->id()}, out->id(), [x, out] {
      auto g = out->grad();
      auto ov = out->values();
      auto gx = x->grad();
      for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (T(1) - ov[i] * ov[i]);
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Affine
// ---------------------------------------------------------------------------

// y = x . W + b with W of shape [N x M]. Accepts x as [N] or as a batch
// [B x N]; bias may be null.
template <class T>
TensorPtr<T> dense(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& w,
                   const std::type_identity_t<TensorPtr<T>>& b) {
  if (w->rank() != 2) throw ShapeError("dense: weights must be 2-D, got " + shape_str(w->shape()));
  const size_t n = w->dim(0), m = w->dim(1);
  size_t batch = 1;
  bool batched = false;
  if (x->rank() == 1) {
    if (x->dim(0) != n)
      throw ShapeError("dense: input " + shape_str(x->shape()) + " does not match weights " +
                       shape_str(w->shape()));
  } else if (x->rank() == 2) {
    if (x->dim(1) != n)
      throw ShapeError("dense: input " + shape_str(x->shape()) + " does not match weights " +
                       shape_str(w->shape()));
    batch = x->dim(0);
    batched = true;
  } else {
    throw ShapeError("dense: input must be 1-D or 2-D, got " + shape_str(x->shape()));
  }
  if (b && !(b->rank() == 1 && b->dim(0) == m))
    throw ShapeError("dense: bias " + shape_str(b->shape()) + " does not match output width " +
                     std::to_string(m));

  const bool rg = detail::any_grad<T>({&x, &w, &b});
  auto out = Tensor<T>::make(batched ? std::vector<size_t>{batch, m} : std::vector<size_t>{m}, rg);
  auto xv = x->values(), wv = w->values(), ov = out->values();
  for (size_t r = 0; r < batch; ++r) {
    T* orow = ov.data() + r * m;
    const T* xrow = xv.data() + r * n;
    if (b) {
      auto bv = b->values();
      std::copy(bv.begin(), bv.end(), orow);
    } else {
      std::fill(orow, orow + m, T(0));
    }
    for (size_t i = 0; i < n; ++i) {
      const T a = xrow[i];
      if (a == T(0)) continue;
      const T* wrow = wv.data() + i * m;
      for (size_t j = 0; j < m; ++j) orow[j] += a * wrow[j];
    }
  }
  tape.note_output(out, "dense");
  if (rg) {
    std::vector<uint64_t> ids = {x->id(), w->id()};
    if (b) ids.push_back(b->id());
    tape.record("dense", std::move(ids), out->id(), [x, w, b, out, batch, n, m] {
      auto g = out->grad();
      auto xv = x->values(), wv = w->values();
      for (size_t r = 0; r < batch; ++r) {
        const T* grow = g.data() + r * m;
        const T* xrow = xv.data() + r * n;
        if (b && b->requires_grad()) {
          auto gb = b->grad();
          for (size_t j = 0; j < m; ++j) gb[j] += grow[j];
        }
        if (w->requires_grad()) {
          auto gw = w->grad();
          for (size_t i = 0; i < n; ++i) {
            const T a = xrow[i];
            if (a == T(0)) continue;
            T* gwrow = gw.data() + i * m;
            for (size_t j = 0; j < m; ++j) gwrow[j] += a * grow[j];
          }
        }
        if (x->requires_grad()) {
          auto gx = x->grad();
          T* gxrow = gx.data() + r * n;
          for (size_t i = 0; i < n; ++i) {
            const T* wrow = wv.data() + i * m;
            T s = T(0);
            for (size_t j = 0; j < m; ++j) s += wrow[j] * grow[j];
            gxrow[i] += s;
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution and pooling
// ---------------------------------------------------------------------------

// Cross-correlation of an [H x W x Cin] input with [kh x kw x Cin x Cout]
// kernels. 'same' zero-pads so the spatial extents are preserved.
template <class T>
TensorPtr<T> conv2d(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& k,
                    const std::type_identity_t<TensorPtr<T>>& b, Padding padding) {
  if (x->rank() != 3) throw ShapeError("conv2d: input must be [HxWxC], got " + shape_str(x->shape()));
  if (k->rank() != 4)
    throw ShapeError("conv2d: kernels must be [khxkwxCinxCout], got " + shape_str(k->shape()));
  const size_t h = x->dim(0), w = x->dim(1), cin = x->dim(2);
  const size_t kh = k->dim(0), kw = k->dim(1), cout = k->dim(3);
  if (k->dim(2) != cin)
    throw ShapeError("conv2d: kernel channels " + std::to_string(k->dim(2)) +
                     " do not match input channels " + std::to_string(cin));
  if (b && !(b->rank() == 1 && b->dim(0) == cout))
    throw ShapeError("conv2d: bias " + shape_str(b->shape()) + " does not match " +
                     std::to_string(cout) + " output channels");
  if (padding == Padding::valid && (kh > h || kw > w))
    throw ShapeError("conv2d: kernel " + shape_str(k->shape()) + " larger than input " +
                     shape_str(x->shape()) + " with valid padding");

  const size_t oh = padding == Padding::same ? h : h - kh + 1;
  const size_t ow = padding == Padding::same ? w : w - kw + 1;
  const long pt = padding == Padding::same ? static_cast<long>((kh - 1) / 2) : 0;
  const long pl = padding == Padding::same ? static_cast<long>((kw - 1) / 2) : 0;

  const bool rg = detail::any_grad<T>({&x, &k, &b});
  auto out = Tensor<T>::make({oh, ow, cout}, rg);
  auto xv = x->values(), kv = k->values(), ov = out->values();
  for (size_t r = 0; r < oh; ++r) {
    for (size_t c = 0; c < ow; ++c) {
      T* orow = ov.data() + (r * ow + c) * cout;
      if (b) {
        auto bv = b->values();
        std::copy(bv.begin(), bv.end(), orow);
      }
      for (size_t i = 0; i < kh; ++i) {
        const long hr = static_cast<long>(r + i) - pt;
        if (hr < 0 || hr >= static_cast<long>(h)) continue;
        for (size_t j = 0; j < kw; ++j) {
          const long wc = static_cast<long>(c + j) - pl;
          if (wc < 0 || wc >= static_cast<long>(w)) continue;
          const T* px = xv.data() + (static_cast<size_t>(hr) * w + static_cast<size_t>(wc)) * cin;
          const T* kbase = kv.data() + (i * kw + j) * cin * cout;
          for (size_t ci = 0; ci < cin; ++ci) {
            const T a = px[ci];
            if (a == T(0)) continue;
            const T* kp = kbase + ci * cout;
            for (size_t co = 0; co < cout; ++co) orow[co] += a * kp[co];
          }
        }
      }
    }
  }
  tape.note_output(out, "conv2d");
  if (rg) {
    std::vector<uint64_t> ids = {x->id(), k->id()};
    if (b) ids.push_back(b->id());
    tape.record("conv2d", std::move(ids), out->id(),
                [x, k, b, out, h, w, cin, kh, kw, cout, oh, ow, pt, pl] {
      auto g = out->grad();
      auto xv = x->values(), kv = k->values();
      const bool gx_on = x->requires_grad(), gk_on = k->requires_grad();
      const bool gb_on = b && b->requires_grad();
      for (size_t r = 0; r < oh; ++r) {
        for (size_t c = 0; c < ow; ++c) {
          const T* grow = g.data() + (r * ow + c) * cout;
          if (gb_on) {
            auto gb = b->grad();
            for (size_t co = 0; co < cout; ++co) gb[co] += grow[co];
          }
          for (size_t i = 0; i < kh; ++i) {
            const long hr = static_cast<long>(r + i) - pt;
            if (hr < 0 || hr >= static_cast<long>(h)) continue;
            for (size_t j = 0; j < kw; ++j) {
              const long wc = static_cast<long>(c + j) - pl;
              if (wc < 0 || wc >= static_cast<long>(w)) continue;
              const size_t pix = (static_cast<size_t>(hr) * w + static_cast<size_t>(wc)) * cin;
              const T* px = xv.data() + pix;
              const size_t koff = (i * kw + j) * cin * cout;
              if (gk_on) {
                auto gk = k->grad();
                for (size_t ci = 0; ci < cin; ++ci) {
                  const T a = px[ci];
                  if (a == T(0)) continue;
                  T* gkp = gk.data() + koff + ci * cout;
                  for (size_t co = 0; co < cout; ++co) gkp[co] += a * grow[co];
                }
              }
              if (gx_on) {
                auto gx = x->grad();
                const T* kbase = kv.data() + koff;
                for (size_t ci = 0; ci < cin; ++ci) {
                  const T* kp = kbase + ci * cout;
                  T s = T(0);
                  for (size_t co = 0; co < cout; ++co) s += kp[co] * grow[co];
                  gx[pix + ci] += s;
                }
              }
            }
          }
        }
      }
    });
  }
  return out;
}

// 2x2 max pooling with stride 2 over [H x W x C]. Odd trailing rows/columns
// pool over the clipped window. Gradient routes to the first maximal element
// in row-major window order.
template <class T>
TensorPtr<T> maxpool2d(Tape<T>& tape, const TensorPtr<T>& x) {
  if (x->rank() != 3)
    throw ShapeError("maxpool2d: input must be [HxWxC], got " + shape_str(x->shape()));
  const size_t h = x->dim(0), w = x->dim(1), c = x->dim(2);
  const size_t oh = (h + 1) / 2, ow = (w + 1) / 2;
  auto out = Tensor<T>::make({oh, ow, c}, x->requires_grad());
  auto xv = x->values(), ov = out->values();
  auto argmax = std::make_shared<std::vector<size_t>>(out->size());
  for (size_t r = 0; r < oh; ++r) {
    for (size_t cc = 0; cc < ow; ++cc) {
      for (size_t ch = 0; ch < c; ++ch) {
        T best{};
        size_t best_idx = 0;
        bool first = true;
        for (size_t dr = 0; dr < 2; ++dr) {
          const size_t hr = 2 * r + dr;
          if (hr >= h) break;
          for (size_t dc = 0; dc < 2; ++dc) {
            const size_t wc = 2 * cc + dc;
            if (wc >= w) break;
            const size_t idx = (hr * w + wc) * c + ch;
            if (first || xv[idx] > best) {
              best = xv[idx];
              best_idx = idx;
              first = false;
            }
          }
        }
        const size_t oidx = (r * ow + cc) * c + ch;
        ov[oidx] = best;
        (*argmax)[oidx] = best_idx;
      }
    }
  }
  tape.note_output(out, "maxpool2d");
  if (x->requires_grad()) {
    tape.record("maxpool2d", {x->id()}, out->id(), [x, out, argmax] {
      auto g = out->grad();
      auto gx = x->grad();
      for (size_t i = 0; i < g.size(); ++i) gx[(*argmax)[i]] += g[i];
    });
  }
  return out;
}

// Column-wise max over a [P x F] matrix -> [F]. Ties go to the earliest row.
template <class T>
TensorPtr<T> max_over_time(Tape<T>& tape, const TensorPtr<T>& x) {
  if (x->rank() != 2)
    throw ShapeError("max_over_time: input must be [PxF], got " + shape_str(x->shape()));
  const size_t p = x->dim(0), f = x->dim(1);
  auto out = Tensor<T>::make({f}, x->requires_grad());
  auto xv = x->values(), ov = out->values();
  auto argrow = std::make_shared<std::vector<size_t>>(f, 0);
  for (size_t j = 0; j < f; ++j) ov[j] = xv[j];
  for (size_t r = 1; r < p; ++r) {
    const T* row = xv.data() + r * f;
    for (size_t j = 0; j < f; ++j) {
      if (row[j] > ov[j]) {
        ov[j] = row[j];
        (*argrow)[j] = r;
      }
    }
  }
  tape.note_output(out, "max_over_time");
  if (x->requires_grad()) {
    tape.record("max_over_time", {x->id()}, out->id(), [x, out, argrow, f] {
      auto g = out->grad();
      auto gx = x->grad();
      for (size_t j = 0; j < f; ++j) gx[(*argrow)[j] * f + j] += g[j];
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

// Trainable scale/shift plus running statistics for one normalized feature
// group. Running buffers are plain tensors without gradients; train-mode
// forward updates them in place.
template <class T>
struct BatchNormLayer {
  TensorPtr<T> gamma;
  TensorPtr<T> beta;
  TensorPtr<T> running_mean;
  TensorPtr<T> running_var;
  T momentum = T(0.9);
  T eps = T(1e-5);
};

// Normalizes the columns of a [B x F] matrix. Train mode uses batch
// statistics (biased variance) and folds them into the running buffers with
// an exponential moving average; eval mode uses the running buffers.
// Backward differentiates through the batch mean and variance.
template <class T>
TensorPtr<T> batchnorm(Tape<T>& tape, const TensorPtr<T>& x, BatchNormLayer<T>& layer, Mode mode) {
  if (x->rank() != 2)
    throw ShapeError("batchnorm: input must be [BxF], got " + shape_str(x->shape()));
  const size_t bsz = x->dim(0), f = x->dim(1);
  const auto& gamma = layer.gamma;
  const auto& beta = layer.beta;
  if (gamma->size() != f || beta->size() != f)
    throw ShapeError("batchnorm: gamma/beta width " + std::to_string(gamma->size()) +
                     " does not match features " + std::to_string(f));
  if (mode == Mode::train && bsz < 2)
    throw ValueError("batchnorm: train mode needs a batch of at least 2 rows, got " +
                     std::to_string(bsz));

  auto mean = std::make_shared<std::vector<T>>(f, T(0));
  auto invstd = std::make_shared<std::vector<T>>(f, T(0));
  auto xv = x->values();
  if (mode == Mode::train) {
    std::vector<T> var(f, T(0));
    for (size_t r = 0; r < bsz; ++r) {
      const T* row = xv.data() + r * f;
      for (size_t j = 0; j < f; ++j) (*mean)[j] += row[j];
    }
    for (size_t j = 0; j < f; ++j) (*mean)[j] /= static_cast<T>(bsz);
    for (size_t r = 0; r < bsz; ++r) {
      const T* row = xv.data() + r * f;
      for (size_t j = 0; j < f; ++j) {
        const T d = row[j] - (*mean)[j];
        var[j] += d * d;
      }
    }
    auto rm = layer.running_mean->values();
    auto rv = layer.running_var->values();
    for (size_t j = 0; j < f; ++j) {
      var[j] /= static_cast<T>(bsz);
      (*invstd)[j] = T(1) / std::sqrt(var[j] + layer.eps);
      rm[j] = layer.momentum * rm[j] + (T(1) - layer.momentum) * (*mean)[j];
      rv[j] = layer.momentum * rv[j] + (T(1) - layer.momentum) * var[j];
    }
  } else {
    auto rm = layer.running_mean->values();
    auto rv = layer.running_var->values();
    for (size_t j = 0; j < f; ++j) {
      (*mean)[j] = rm[j];
      (*invstd)[j] = T(1) / std::sqrt(rv[j] + layer.eps);
    }
  }

  const bool rg = detail::any_grad<T>({&x, &gamma, &beta});
  auto out = Tensor<T>::make(x->shape(), rg);
  auto gv = gamma->values(), bv = beta->values(), ov = out->values();
  for (size_t r = 0; r < bsz; ++r) {
    const T* row = xv.data() + r * f;
    T* orow = ov.data() + r * f;
    for (size_t j = 0; j < f; ++j)
      orow[j] = gv[j] * (row[j] - (*mean)[j]) * (*invstd)[j] + bv[j];
  }
  tape.note_output(out, "batchnorm");
  if (rg) {
    auto gamma_t = gamma;
    auto beta_t = beta;
    tape.record("batchnorm", {x->id(), gamma->id(), beta->id()}, out->id(),
                [x, gamma_t, beta_t, out, mean, invstd, mode, bsz, f] {
      auto g = out->grad();
      auto xv = x->values();
      auto gv = gamma_t->values();
      std::vector<T> sum_dy(f, T(0)), sum_dy_xhat(f, T(0));
      for (size_t r = 0; r < bsz; ++r) {
        const T* grow = g.data() + r * f;
        const T* row = xv.data() + r * f;
        for (size_t j = 0; j < f; ++j) {
          sum_dy[j] += grow[j];
          sum_dy_xhat[j] += grow[j] * (row[j] - (*mean)[j]) * (*invstd)[j];
        }
      }
      if (gamma_t->requires_grad()) detail::axpy<T>(gamma_t->grad(), {sum_dy_xhat.data(), f});
      if (beta_t->requires_grad()) detail::axpy<T>(beta_t->grad(), {sum_dy.data(), f});
      if (x->requires_grad()) {
        auto gx = x->grad();
        const T n = static_cast<T>(bsz);
        for (size_t r = 0; r < bsz; ++r) {
          const T* grow = g.data() + r * f;
          const T* row = xv.data() + r * f;
          T* gxrow = gx.data() + r * f;
          for (size_t j = 0; j < f; ++j) {
            if (mode == Mode::train) {
              const T xhat = (row[j] - (*mean)[j]) * (*invstd)[j];
              gxrow[j] += gv[j] * (*invstd)[j] *
                          (grow[j] - sum_dy[j] / n - xhat * sum_dy_xhat[j] / n);
            } else {
              gxrow[j] += gv[j] * (*invstd)[j] * grow[j];
            }
          }
        }
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dropout
// ---------------------------------------------------------------------------

// Inverted dropout: train mode zeroes each element with probability `rate`
// and scales survivors by 1/(1-rate); eval mode (and rate 0) is the identity.
template <class T>
TensorPtr<T> dropout(Tape<T>& tape, const TensorPtr<T>& x, double rate, Mode mode, RngStream& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw ValueError("dropout: rate must lie in [0,1), got " + std::to_string(rate));
  if (mode == Mode::eval || rate == 0.0) return x;
  const T scale = T(1.0 / (1.0 - rate));
  auto mask = std::make_shared<std::vector<unsigned char>>(x->size());
  auto out = Tensor<T>::make(x->shape(), x->requires_grad());
  auto xv = x->values(), ov = out->values();
  for (size_t i = 0; i < ov.size(); ++i) {
    const bool keep = rng.uniform01() >= rate;
    (*mask)[i] = keep;
    ov[i] = keep ? xv[i] * scale : T(0);
  }
  tape.note_output(out, "dropout");
  if (x->requires_grad()) {
    tape.record("dropout", {x->id()}, out->id(), [x, out, mask, scale] {
      auto g = out->grad();
      auto gx = x->grad();
      for (size_t i = 0; i < g.size(); ++i)
        if ((*mask)[i]) gx[i] += g[i] * scale;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Softmax and cross-entropy
// ---------------------------------------------------------------------------

template <class T>
TensorPtr<T> softmax(Tape<T>& tape, const TensorPtr<T>& logits) {
  if (logits->rank() != 1 || logits->size() == 0)
    throw ShapeError("softmax: input must be a non-empty vector, got " + shape_str(logits->shape()));
  auto out = Tensor<T>::make(logits->shape(), logits->requires_grad());
  auto xv = logits->values(), ov = out->values();
  T mx = xv[0];
  for (const T v : xv) mx = std::max(mx, v);
  T sum = T(0);
  for (size_t i = 0; i < xv.size(); ++i) {
    ov[i] = std::exp(xv[i] - mx);
    sum += ov[i];
  }
  for (auto& v : ov) v /= sum;
  tape.note_output(out, "softmax");
  if (logits->requires_grad()) {
    tape.record("softmax", {logits->id()}, out->id(), [logits, out] {
      auto g = out->grad();
      auto ov = out->values();
      auto gx = logits->grad();
      T dot = T(0);
      for (size_t i = 0; i < g.size(); ++i) dot += g[i] * ov[i];
      for (size_t i = 0; i < g.size(); ++i) gx[i] += ov[i] * (g[i] - dot);
    });
  }
  return out;
}

// -ln(max(probs[label], eps)) for an explicit probability vector.
template <class T>
TensorPtr<T> cross_entropy(Tape<T>& tape, const TensorPtr<T>& probs, size_t label,
                           T eps = T(1e-12)) {
  if (probs->rank() != 1)
    throw ShapeError("cross_entropy: probs must be a vector, got " + shape_str(probs->shape()));
  if (label >= probs->size())
    throw ValueError("cross_entropy: label " + std::to_string(label) + " out of range for " +
                     std::to_string(probs->size()) + " classes");
  auto pv = probs->values();
  T sum = T(0);
  for (const T v : pv) sum += v;
  if (std::abs(sum - T(1)) > T(1e-3))
    throw ValueError("cross_entropy: probs sum to " + std::to_string(static_cast<double>(sum)) +
                     ", not a distribution");
  const T p = std::max(pv[label], eps);
  auto out = Tensor<T>::make({1}, {-std::log(p)}, probs->requires_grad());
  tape.note_output(out, "cross_entropy");
  if (probs->requires_grad()) {
    tape.record("cross_entropy", {probs->id()}, out->id(), [probs, out, label, eps] {
      const T g = out->grad()[0];
      const T p = probs->values()[label];
      if (p > eps) probs->grad()[label] += -g / p;
    });
  }
  return out;
}

// Numerically fused softmax followed by cross-entropy; backward uses the
// (p - y) shortcut.
template <class T>
TensorPtr<T> softmax_cross_entropy(Tape<T>& tape, const TensorPtr<T>& logits, size_t label,
                                   T eps = T(1e-12)) {
  if (logits->rank() != 1 || logits->size() == 0)
    throw ShapeError("softmax_cross_entropy: logits must be a non-empty vector, got " +
                     shape_str(logits->shape()));
  if (label >= logits->size())
    throw ValueError("softmax_cross_entropy: label " + std::to_string(label) +
                     " out of range for " + std::to_string(logits->size()) + " classes");
  auto xv = logits->values();
  auto probs = std::make_shared<std::vector<T>>(xv.size());
  T mx = xv[0];
  for (const T v : xv) mx = std::max(mx, v);
  T sum = T(0);
  for (size_t i = 0; i < xv.size(); ++i) {
    (*probs)[i] = std::exp(xv[i] - mx);
    sum += (*probs)[i];
  }
  for (auto& v : *probs) v /= sum;
  const T p = std::max((*probs)[label], eps);
  auto out = Tensor<T>::make({1}, {-std::log(p)}, logits->requires_grad());
  tape.note_output(out, "softmax_cross_entropy");
  if (logits->requires_grad()) {
    tape.record("softmax_cross_entropy", {logits->id()}, out->id(), [logits, out, probs, label] {
      const T g = out->grad()[0];
      auto gx = logits->grad();
      for (size_t i = 0; i < gx.size(); ++i)
        gx[i] += g * ((*probs)[i] - (i == label ? T(1) : T(0)));
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape plumbing: concatenation, stacking, slicing, lookup, reductions
// ---------------------------------------------------------------------------

// Ordered concatenation of 1-D tensors.
template <class T>
TensorPtr<T> concat(Tape<T>& tape, const std::vector<TensorPtr<T>>& parts) {
  if (parts.empty()) throw ValueError("concat: empty part list");
  size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p->rank() != 1)
      throw ShapeError("concat: all parts must be 1-D, got " + shape_str(p->shape()));
    total += p->size();
    rg = rg || p->requires_grad();
  }
  auto out = Tensor<T>::make({total}, rg);
  auto ov = out->values();
  size_t off = 0;
  for (const auto& p : parts) {
    auto pv = p->values();
    std::copy(pv.begin(), pv.end(), ov.begin() + off);
    off += pv.size();
  }
  tape.note_output(out, "concat");
  if (rg) {
    std::vector<uint64_t> ids;
    for (const auto& p : parts) ids.push_back(p->id());
    tape.record("concat", std::move(ids), out->id(), [parts, out] {
      auto g = out->grad();
      size_t off = 0;
      for (const auto& p : parts) {
        if (p->requires_grad()) {
          auto gp = p->grad();
          for (size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
        }
        off += p->size();
      }
    });
  }
  return out;
}

// Vertical concatenation of [Ri x F] matrices into [sum(Ri) x F].
template <class T>
TensorPtr<T> concat_rows(Tape<T>& tape, const std::vector<TensorPtr<T>>& parts) {
  if (parts.empty()) throw ValueError("concat_rows: empty part list");
  const size_t f = parts.front()->rank() == 2 ? parts.front()->dim(1) : 0;
  size_t rows = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p->rank() != 2 || p->dim(1) != f)
      throw ShapeError("concat_rows: parts must be 2-D with matching columns");
    rows += p->dim(0);
    rg = rg || p->requires_grad();
  }
  auto out = Tensor<T>::make({rows, f}, rg);
  auto ov = out->values();
  size_t off = 0;
  for (const auto& p : parts) {
    auto pv = p->values();
    std::copy(pv.begin(), pv.end(), ov.begin() + off);
    off += pv.size();
  }
  tape.note_output(out, "concat_rows");
  if (rg) {
    std::vector<uint64_t> ids;
    for (const auto& p : parts) ids.push_back(p->id());
    tape.record("concat_rows", std::move(ids), out->id(), [parts, out] {
      auto g = out->grad();
      size_t off = 0;
      for (const auto& p : parts) {
        if (p->requires_grad()) {
          auto gp = p->grad();
          for (size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
        }
        off += p->size();
      }
    });
  }
  return out;
}

// Stacks equal-length vectors as the rows of a new matrix.
template <class T>
TensorPtr<T> stack_rows(Tape<T>& tape, const std::vector<TensorPtr<T>>& parts) {
  if (parts.empty()) throw ValueError("stack_rows: empty part list");
  const size_t f = parts.front()->size();
  bool rg = false;
  for (const auto& p : parts) {
    if (p->rank() != 1 || p->size() != f)
      throw ShapeError("stack_rows: parts must be 1-D of equal length");
    rg = rg || p->requires_grad();
  }
  auto out = Tensor<T>::make({parts.size(), f}, rg);
  auto ov = out->values();
  for (size_t r = 0; r < parts.size(); ++r) {
    auto pv = parts[r]->values();
    std::copy(pv.begin(), pv.end(), ov.begin() + r * f);
  }
  tape.note_output(out, "stack_rows");
  if (rg) {
    std::vector<uint64_t> ids;
    for (const auto& p : parts) ids.push_back(p->id());
    tape.record("stack_rows", std::move(ids), out->id(), [parts, out, f] {
      auto g = out->grad();
      for (size_t r = 0; r < parts.size(); ++r) {
        if (parts[r]->requires_grad()) {
          auto gp = parts[r]->grad();
          for (size_t i = 0; i < f; ++i) gp[i] += g[r * f + i];
        }
      }
    });
  }
  return out;
}

// Contiguous row range of a [R x F] matrix.
template <class T>
TensorPtr<T> slice_rows(Tape<T>& tape, const TensorPtr<T>& x, size_t row0, size_t nrows) {
  if (x->rank() != 2)
    throw ShapeError("slice_rows: input must be 2-D, got " + shape_str(x->shape()));
  if (row0 + nrows > x->dim(0))
    throw ShapeError("slice_rows: range [" + std::to_string(row0) + "," +
                     std::to_string(row0 + nrows) + ") exceeds " + std::to_string(x->dim(0)) +
                     " rows");
  const size_t f = x->dim(1);
  auto out = Tensor<T>::make({nrows, f}, x->requires_grad());
  auto xv = x->values(), ov = out->values();
  std::copy(xv.begin() + row0 * f, xv.begin() + (row0 + nrows) * f, ov.begin());
  tape.note_output(out, "slice_rows");
  if (x->requires_grad()) {
    tape.record("slice_rows", {x->id()}, out->id(), [x, out, row0, f] {
      auto g = out->grad();
      auto gx = x->grad();
      for (size_t i = 0; i < g.size(); ++i) gx[row0 * f + i] += g[i];
    });
  }
  return out;
}

// Copies row `row` out of a [V x E] table; backward scatters into that row.
template <class T>
TensorPtr<T> embedding_lookup(Tape<T>& tape, const TensorPtr<T>& table, size_t row) {
  if (table->rank() != 2)
    throw ShapeError("embedding_lookup: table must be 2-D, got " + shape_str(table->shape()));
  if (row >= table->dim(0))
    throw ValueError("embedding_lookup: row " + std::to_string(row) + " out of range for " +
                     std::to_string(table->dim(0)) + " entries");
  const size_t e = table->dim(1);
  auto out = Tensor<T>::make({e}, table->requires_grad());
  auto tv = table->values(), ov = out->values();
  std::copy(tv.begin() + row * e, tv.begin() + (row + 1) * e, ov.begin());
  tape.note_output(out, "embedding_lookup");
  if (table->requires_grad()) {
    tape.record("embedding_lookup", {table->id()}, out->id(), [table, out, row, e] {
      auto g = out->grad();
      auto gt = table->grad();
      for (size_t i = 0; i < e; ++i) gt[row * e + i] += g[i];
    });
  }
  return out;
}

template <class T>
TensorPtr<T> sum_all(Tape<T>& tape, const TensorPtr<T>& x) {
  T s = T(0);
  for (const T v : x->values()) s += v;
  auto out = Tensor<T>::make({1}, {s}, x->requires_grad());
  tape.note_output(out, "sum_all");
  if (x->requires_grad()) {
    tape.record("sum_all", {x->id()}, out->id(), [x, out] {
      const T g = out->grad()[0];
      auto gx = x->grad();
      for (auto& v : gx) v += g;
    });
  }
  return out;
}

template <class T>
TensorPtr<T> mean_all(Tape<T>& tape, const TensorPtr<T>& x) {
  const T n = static_cast<T>(x->size());
  T s = T(0);
  for (const T v : x->values()) s += v;
  auto out = Tensor<T>::make({1}, {s / n}, x->requires_grad());
  tape.note_output(out, "mean_all");
  if (x->requires_grad()) {
    tape.record("mean_all", {x->id()}, out->id(), [x, out, n] {
      const T g = out->grad()[0] / n;
      auto gx = x->grad();
      for (auto& v : gx) v += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// LSTM cell
// ---------------------------------------------------------------------------

template <class T>
struct LstmWeights {
  TensorPtr<T> w_xi, w_hi, b_i;  // input gate
  TensorPtr<T> w_xf, w_hf, b_f;  // forget gate
  TensorPtr<T> w_xg, w_hg, b_g;  // candidate
  TensorPtr<T> w_xo, w_ho, b_o;  // output gate
};

template <class T>
struct LstmState {
  TensorPtr<T> h;
  TensorPtr<T> c;
};

// One step of a standard LSTM cell, composed from primitive ops so that
// backward-through-time falls out of tape replay over the unrolled sequence.
template <class T>
LstmState<T> lstm_step(Tape<T>& tape, const TensorPtr<T>& x, const TensorPtr<T>& h_prev,
                       const TensorPtr<T>& c_prev, const LstmWeights<T>& w) {
  auto gate = [&](const TensorPtr<T>& wx, const TensorPtr<T>& wh, const TensorPtr<T>& b) {
    return add(tape, dense(tape, x, wx, b), dense(tape, h_prev, wh, nullptr));
  };
  auto i = sigmoid(tape, gate(w.w_xi, w.w_hi, w.b_i));
  auto f = sigmoid(tape, gate(w.w_xf, w.w_hf, w.b_f));
  auto g = tanh_op(tape, gate(w.w_xg, w.w_hg, w.b_g));
  auto o = sigmoid(tape, gate(w.w_xo, w.w_ho, w.b_o));
  auto c = add(tape, mul(tape, f, c_prev), mul(tape, i, g));
  auto h = mul(tape, o, tanh_op(tape, c));
  return {h, c};
}

}  // namespace emofuse
