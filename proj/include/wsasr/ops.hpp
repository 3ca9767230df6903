// wsasr: differentiable primitives registered on the tape. Each op validates
// shapes, computes the forward result, and registers a backward rule.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <vector>

#include "wsasr/autograd.hpp"
#include "wsasr/common.hpp"
#include "wsasr/tensor.hpp"

namespace wsasr {

namespace detail {

// C[m,n] += A[m,k] * B[k,n]
template <typename T>
void mm_nn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    const T* arow = a + i * k;
    for (int64_t p = 0; p < k; ++p) {
      T av = arow[p];
      if (av == T(0)) continue;
      const T* brow = b + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,k] += A[m,n] * B^T where B is [k,n]
template <typename T>
void mm_nt(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * n;
    T* crow = c + i * k;
    for (int64_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T s = 0;
      for (int64_t j = 0; j < n; ++j) s += arow[j] * brow[j];
      crow[p] += s;
    }
  }
}

// C[k,n] += A^T * B where A is [m,k], B is [m,n]
template <typename T>
void mm_tn(const T* a, const T* b, T* c, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* brow = b + i * n;
    for (int64_t p = 0; p < k; ++p) {
      T av = arow[p];
      if (av == T(0)) continue;
      T* crow = c + p * n;
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

template <typename T>
Value<T> matmul(Tape<T>& tp, Value<T> a, Value<T> b) {
  const Tensor<T>& A = tp.val(a);
  const Tensor<T>& B = tp.val(b);
  require(A.ndim() == 2 && B.ndim() == 2, "matmul: expects 2-D tensors");
  require(A.cols() == B.rows(), "matmul: inner dimensions disagree " + A.shape_str() + " x " + B.shape_str());
  int64_t m = A.rows(), k = A.cols(), n = B.cols();
  Tensor<T> out({m, n});
  detail::mm_nn(A.data.data(), B.data.data(), out.data.data(), m, k, n);
  return tp.push(std::move(out), {a.id, b.id}, "matmul",
                 [a, b, m, k, n](Tape<T>& t, const typename Tape<T>::Node& self) {
                   const T* g = self.grad.data.data();
                   detail::mm_nt(g, t.val(b).data.data(), t.grad(a).data.data(), m, n, k);
                   detail::mm_tn(t.val(a).data.data(), g, t.grad(b).data.data(), m, k, n);
                 });
}

template <typename T>
Value<T> transpose(Tape<T>& tp, Value<T> a) {
  const Tensor<T>& A = tp.val(a);
  require(A.ndim() == 2, "transpose: expects 2-D tensor");
  int64_t m = A.rows(), n = A.cols();
  Tensor<T> out({n, m});
  for (int64_t i = 0; i < m; ++i)
    for (int64_t j = 0; j < n; ++j) out.at(j, i) = A.at(i, j);
  return tp.push(std::move(out), {a.id}, "transpose",
                 [a, m, n](Tape<T>& t, const typename Tape<T>::Node& self) {
                   Tensor<T>& da = t.grad(a);
                   for (int64_t i = 0; i < m; ++i)
                     for (int64_t j = 0; j < n; ++j) da.at(i, j) += self.grad.at(j, i);
                 });
}

template <typename T>
Value<T> add(Tape<T>& tp, Value<T> a, Value<T> b) {
  const Tensor<T>& A = tp.val(a);
  const Tensor<T>& B = tp.val(b);
  require(A.same_shape(B), "add: shape mismatch " + A.shape_str() + " vs " + B.shape_str());
  Tensor<T> out = A;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] += B.data[i];
  return tp.push(std::move(out), {a.id, b.id}, "add",
                 [a, b](Tape<T>& t, const typename Tape<T>::Node& self) {
                   Tensor<T>& da = t.grad(a);
                   Tensor<T>& db = t.grad(b);
                   for (size_t i = 0; i < self.grad.data.size(); ++i) {
                     da.data[i] += self.grad.data[i];
                     db.data[i] += self.grad.data[i];
                   }
                 });
}

// x: [n, d] plus a length-d bias broadcast over rows.
template <typename T>
Value<T> add_bias(Tape<T>& tp, Value<T> x, Value<T> bias) {
  const Tensor<T>& X = tp.val(x);
  const Tensor<T>& B = tp.val(bias);
  require(X.ndim() == 2 && B.numel() == X.cols(), "add_bias: bias length must equal columns");
  Tensor<T> out = X;
  int64_t n = X.rows(), d = X.cols();
  for (int64_t i = 0; i < n; ++i)
    for (int64_t j = 0; j < d; ++j) out.at(i, j) += B.data[size_t(j)];
  return tp.push(std::move(out), {x.id, bias.id}, "add_bias",
                 [x, bias, n, d](Tape<T>& t, const typename Tape<T>::Node& self) {
                   Tensor<T>& dx = t.grad(x);
                   Tensor<T>& db = t.grad(bias);
                   for (int64_t i = 0; i < n; ++i)
                     for (int64_t j = 0; j < d; ++j) {
                       dx.at(i, j) += self.grad.at(i, j);
                       db.data[size_t(j)] += self.grad.at(i, j);
                     }
                 });
}

template <typename T>
Value<T> mul(Tape<T>& tp, Value<T> a, Value<T> b) {
  const Tensor<T>& A = tp.val(a);
  const Tensor<T>& B = tp.val(b);
  require(A.same_shape(B), "mul: shape mismatch");
  Tensor<T> out = A;
  for (size_t i = 0; i < out.data.size(); ++i) out.data[i] *= B.data[i];
  return tp.push(std::move(out), {a.id, b.id}, "mul",
                 [a, b](Tape<T>& t, const typename Tape<T>::Node& self) {
                   const Tensor<T>& A = t.val(a);
                   const Tensor<T>& B = t.val(b);
                   Tensor<T>& da = t.grad(a);
                   Tensor<T>& db = t.grad(b);
                   for (size_t i = 0; i < self.grad.data.size(); ++i) {
                     da.data[i] += self.grad.data[i] * B.data[i];
                     db.data[i] += self.grad.data[i] * A.data[i];
                   }
                 });
}

template <typename T>
Value<T> mul_scalar(Tape<T>& tp, Value<T> a, T c) {
  Tensor<T> out = tp.val(a);
  for (T& v : out.data) v *= c;
  return tp.push(std::move(out), {a.id}, "mul_scalar",
                 [a, c](Tape<T>& t, const typename Tape<T>::Node& self) {
                   Tensor<T>& da = t.grad(a);
                   for (size_t i = 0; i < self.grad.data.size(); ++i)
                     da.data[i] += c * self.grad.data[i];
                 });
}

template <typename T>
Value<T> relu(Tape<T>& tp, Value<T> a) {
  Tensor<T> out = tp.val(a);
  for (T& v : out.data) v = v > T(0) ? v : T(0);
  return tp.push(std::move(out), {a.id}, "relu",
                 [a](Tape<T>& t, const typename Tape<T>::Node& self) {
                   const Tensor<T>& x = t.val(a);
                   Tensor<T>& da = t.grad(a);
                   for (size_t i = 0; i < x.data.size(); ++i)
                     if (x.data[i] > T(0)) da.data[i] += self.grad.data[i];
                 });
}

template <typename T>
Value<T> sum(Tape<T>& tp, Value<T> a) {
  const Tensor<T>& A = tp.val(a);
  T s = 0;
  for (T v : A.data) s += v;
  return tp.push(Tensor<T>::scalar(s), {a.id}, "sum",
                 [a](Tape<T>& t, const typename Tape<T>::Node& self) {
                   Tensor<T>& da = t.grad(a);
                   T g = self.grad.data[0];
                   for (T& v : da.data) v += g;
                 });
}

template <typename T>
Value<T> reshape(Tape<T>& tp, Value<T> a, std::vector<int64_t> new_shape) {
  const Tensor<T>& A = tp.val(a);
  require(Tensor<T>::numel_of(new_shape) == A.numel(), "reshape: element count mismatch");
  Tensor<T> out(new_shape, A.data);
  return tp.push(std::move(out), {a.id}, "reshape",
                 [a](Tape<T>& t, const typename Tape<T>::Node& self) {
                   Tensor<T>& da = t.grad(a);
                   for (size_t i = 0; i < da.data.size(); ++i) da.data[i] += self.grad.data[i];
                 });
}

// Row-wise softmax with optional masking. `causal` restricts row i to keys
// j <= i; `key_valid`, when non-null, additionally invalidates keys globally.
// A row with no valid key is an error (fully masked attention row).
template <typename T>
Value<T> attention_softmax(Tape<T>& tp, Value<T> scores, bool causal,
                           const std::vector<uint8_t>* key_valid = nullptr) {
  const Tensor<T>& S = tp.val(scores);
  require(S.ndim() == 2 && S.cols() >= 1, "softmax: expects 2-D with >=1 column");
  if (key_valid) require(int64_t(key_valid->size()) == S.cols(), "softmax: key mask length mismatch");
  int64_t n = S.rows(), d = S.cols();
  Tensor<T> out({n, d});
  auto valid = [&](int64_t i, int64_t j) {
    if (causal && j > i) return false;
    if (key_valid && !(*key_valid)[size_t(j)]) return false;
    return true;
  };
  for (int64_t i = 0; i < n; ++i) {
    T mx = -std::numeric_limits<T>::infinity();
    for (int64_t j = 0; j < d; ++j)
      if (valid(i, j)) mx = std::max(mx, S.at(i, j));
    require(std::isfinite(double(mx)), "softmax: fully masked attention row " + std::to_string(i));
    T z = 0;
    for (int64_t j = 0; j < d; ++j) {
      if (valid(i, j)) {
        T e = std::exp(S.at(i, j) - mx);
        out.at(i, j) = e;
        z += e;
      }
    }
    for (int64_t j = 0; j < d; ++j)
      if (valid(i, j)) out.at(i, j) /= z;
  }
  bool has_mask = causal || key_valid;
  return tp.push(std::move(out), {scores.id}, "softmax",
                 [scores, n, d, has_mask](Tape<T>& t, const typename Tape<T>::Node& self) {
                   // dx_j = y_j * (g_j - sum_k g_k y_k); masked entries have y = 0.
                   Tensor<T>& ds = t.grad(scores);
                   const Tensor<T>& y = self.value;
                   (void)has_mask;
                   for (int64_t i = 0; i < n; ++i) {
                     T dot = 0;
                     for (int64_t j = 0; j < d; ++j) dot += self.grad.at(i, j) * y.at(i, j);
                     for (int64_t j = 0; j < d; ++j)
                       ds.at(i, j) += y.at(i, j) * (self.grad.at(i, j) - dot);
                   }
                 });
}

template <typename T>
Value<T> softmax_rows(Tape<T>& tp, Value<T> scores) {
  return attention_softmax(tp, scores, /*causal=*/false, nullptr);
}

template <typename T>
Value<T> log_softmax_rows(Tape<T>& tp, Value<T> logits) {
  const Tensor<T>& L = tp.val(logits);
  require(L.ndim() == 2 && L.cols() >= 1, "log_softmax: expects 2-D with >=1 column");
  int64_t n = L.rows(), d = L.cols();
  Tensor<T> out({n, d});
  for (int64_t i = 0; i < n; ++i) {
    T mx = L.at(i, 0);
    for (int64_t j = 1; j < d; ++j) mx = std::max(mx, L.at(i, j));
    T z = 0;
    for (int64_t j = 0; j < d; ++j) z += std::exp(L.at(i, j) - mx);
    T lse = mx + std::log(z);
    for (int64_t j = 0; j < d; ++j) out.at(i, j) = L.at(i, j) - lse;
  }
  return tp.push(std::move(out), {logits.id}, "log_softmax",
                 [logits, n, d](Tape<T>& t, const typename Tape<T>::Node& self) {
                   Tensor<T>& dl = t.grad(logits);
                   for (int64_t i = 0; i < n; ++i) {
                     T gsum = 0;
                     for (int64_t j = 0; j < d; ++j) gsum += self.grad.at(i, j);
                     for (int64_t j = 0; j < d; ++j)
                       dl.at(i, j) += self.grad.at(i, j) - std::exp(self.value.at(i, j)) * gsum;
                   }
                 });
}

// Per-row normalization to zero mean / unit variance, then affine gain+bias.
template <typename T>
Value<T> layer_norm(Tape<T>& tp, Value<T> x, Value<T> gain, Value<T> bias, T eps = T(1e-5)) {
  const Tensor<T>& X = tp.val(x);
  require(X.ndim() == 2, "layer_norm: expects 2-D tensor");
  int64_t n = X.rows(), d = X.cols();
  require(tp.val(gain).numel() == d && tp.val(bias).numel() == d,
          "layer_norm: gain/bias length must equal last dimension");
  Tensor<T> out({n, d});
  Tensor<T> xhat({n, d});
  std::vector<T> inv_std(static_cast<size_t>(n));
  const Tensor<T>& G = tp.val(gain);
  const Tensor<T>& B = tp.val(bias);
  for (int64_t i = 0; i < n; ++i) {
    T mean = 0;
    for (int64_t j = 0; j < d; ++j) mean += X.at(i, j);
    mean /= T(d);
    T var = 0;
    for (int64_t j = 0; j < d; ++j) {
      T c = X.at(i, j) - mean;
      var += c * c;
    }
    var /= T(d);
    T istd = T(1) / std::sqrt(var + eps);
    inv_std[size_t(i)] = istd;
    for (int64_t j = 0; j < d; ++j) {
      T h = (X.at(i, j) - mean) * istd;
      xhat.at(i, j) = h;
      out.at(i, j) = G.data[size_t(j)] * h + B.data[size_t(j)];
    }
  }
  return tp.push(std::move(out), {x.id, gain.id, bias.id}, "layer_norm",
                 [x, gain, bias, n, d, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                     Tape<T>& t, const typename Tape<T>::Node& self) {
                   Tensor<T>& dx = t.grad(x);
                   Tensor<T>& dg = t.grad(gain);
                   Tensor<T>& db = t.grad(bias);
                   const Tensor<T>& G = t.val(gain);
                   for (int64_t i = 0; i < n; ++i) {
                     T mean_gy = 0, mean_gyh = 0;
                     for (int64_t j = 0; j < d; ++j) {
                       T gy = self.grad.at(i, j) * G.data[size_t(j)];
                       mean_gy += gy;
                       mean_gyh += gy * xhat.at(i, j);
                       dg.data[size_t(j)] += self.grad.at(i, j) * xhat.at(i, j);
                       db.data[size_t(j)] += self.grad.at(i, j);
                     }
                     mean_gy /= T(d);
                     mean_gyh /= T(d);
                     for (int64_t j = 0; j < d; ++j) {
                       T gy = self.grad.at(i, j) * G.data[size_t(j)];
                       dx.at(i, j) += (gy - mean_gy - xhat.at(i, j) * mean_gyh) * inv_std[size_t(i)];
                     }
                   }
                 });
}

// 2-D cross-correlation over time x frequency, stride 1, "same" padding.
// x: [T, F, Cin], kernel: [KH, KW, Cin, Cout], bias: [Cout].
template <typename T>
Value<T> conv2d_same(Tape<T>& tp, Value<T> x, Value<T> kernel, Value<T> bias) {
  const Tensor<T>& X = tp.val(x);
  const Tensor<T>& K = tp.val(kernel);
  require(X.ndim() == 3 && K.ndim() == 4, "conv2d: x must be 3-D, kernel 4-D");
  int64_t H = X.dim(0), W = X.dim(1), Cin = X.dim(2);
  int64_t KH = K.dim(0), KW = K.dim(1), Cout = K.dim(3);
  require(K.dim(2) == Cin, "conv2d: kernel input channels mismatch");
  require(KH % 2 == 1 && KW % 2 == 1, "conv2d: same padding requires odd kernel");
  require(tp.val(bias).numel() == Cout, "conv2d: bias length mismatch");
  int64_t ph = KH / 2, pw = KW / 2;
  Tensor<T> out({H, W, Cout});
  const Tensor<T>& B = tp.val(bias);
  for (int64_t h = 0; h < H; ++h)
    for (int64_t w = 0; w < W; ++w)
      for (int64_t c = 0; c < Cout; ++c) out.at(h, w, c) = B.data[size_t(c)];
  for (int64_t h = 0; h < H; ++h) {
    for (int64_t kh = 0; kh < KH; ++kh) {
      int64_t ih = h + kh - ph;
      if (ih < 0 || ih >= H) continue;
      for (int64_t w = 0; w < W; ++w) {
        T* orow = &out.at(h, w, 0);
        for (int64_t kw = 0; kw < KW; ++kw) {
          int64_t iw = w + kw - pw;
          if (iw < 0 || iw >= W) continue;
          const T* xrow = &X.at(ih, iw, 0);
          const T* krow = &K.data[size_t(((kh * KW + kw) * Cin) * Cout)];
          for (int64_t ci = 0; ci < Cin; ++ci) {
            T xv = xrow[ci];
            if (xv == T(0)) continue;
            const T* kc = krow + ci * Cout;
            for (int64_t c = 0; c < Cout; ++c) orow[c] += xv * kc[c];
          }
        }
      }
    }
  }
  return tp.push(std::move(out), {x.id, kernel.id, bias.id}, "conv2d",
                 [x, kernel, bias, H, W, Cin, KH, KW, Cout, ph, pw](
                     Tape<T>& t, const typename Tape<T>::Node& self) {
                   Tensor<T>& dx = t.grad(x);
                   Tensor<T>& dk = t.grad(kernel);
                   Tensor<T>& db = t.grad(bias);
                   const Tensor<T>& X = t.val(x);
                   const Tensor<T>& K = t.val(kernel);
                   for (int64_t h = 0; h < H; ++h) {
                     for (int64_t w = 0; w < W; ++w) {
                       const T* grow = &self.grad.at(h, w, 0);
                       for (int64_t c = 0; c < Cout; ++c) db.data[size_t(c)] += grow[c];
                       for (int64_t kh = 0; kh < KH; ++kh) {
                         int64_t ih = h + kh - ph;
                         if (ih < 0 || ih >= H) continue;
                         for (int64_t kw = 0; kw < KW; ++kw) {
                           int64_t iw = w + kw - pw;
                           if (iw < 0 || iw >= W) continue;
                           for (int64_t ci = 0; ci < Cin; ++ci) {
                             T xv = X.at(ih, iw, ci);
                             size_t kbase = size_t(((kh * KW + kw) * Cin + ci) * Cout);
                             T dxv = 0;
                             for (int64_t c = 0; c < Cout; ++c) {
                               dxv += K.data[kbase + size_t(c)] * grow[c];
                               dk.data[kbase + size_t(c)] += xv * grow[c];
                             }
                             dx.at(ih, iw, ci) += dxv;
                           }
                         }
                       }
                     }
                   }
                 });
}

// 2x2 max-pooling over [T, F, C] with ceil semantics: edge windows are
// clipped, so output dims are ceil(T/2) x ceil(F/2).
template <typename T>
Value<T> maxpool2x2_ceil(Tape<T>& tp, Value<T> x) {
  const Tensor<T>& X = tp.val(x);
  require(X.ndim() == 3, "maxpool: expects 3-D tensor");
  int64_t H = X.dim(0), W = X.dim(1), C = X.dim(2);
  int64_t OH = (H + 1) / 2, OW = (W + 1) / 2;
  Tensor<T> out({OH, OW, C});
  std::vector<int64_t> argmax(size_t(OH * OW * C));
  for (int64_t oh = 0; oh < OH; ++oh) {
    for (int64_t ow = 0; ow < OW; ++ow) {
      for (int64_t c = 0; c < C; ++c) {
        T best = -std::numeric_limits<T>::infinity();
        int64_t best_idx = -1;
        for (int64_t dh = 0; dh < 2; ++dh) {
          int64_t ih = oh * 2 + dh;
          if (ih >= H) continue;
          for (int64_t dw = 0; dw < 2; ++dw) {
            int64_t iw = ow * 2 + dw;
            if (iw >= W) continue;
            T v = X.at(ih, iw, c);
            if (v > best) {
              best = v;
              best_idx = (ih * W + iw) * C + c;
            }
          }
        }
        out.at(oh, ow, c) = best;
        argmax[size_t((oh * OW + ow) * C + c)] = best_idx;
      }
    }
  }
  return tp.push(std::move(out), {x.id}, "maxpool2x2",
                 [x, argmax = std::move(argmax)](Tape<T>& t, const typename Tape<T>::Node& self) {
                   Tensor<T>& dx = t.grad(x);
                   for (size_t i = 0; i < argmax.size(); ++i)
                     dx.data[size_t(argmax[i])] += self.grad.data[i];
                 });
}

// Causal 1-D convolution over [M, Cin] with kernel [K, Cin, Cout]: output at
// position i sees inputs i-K+1..i (left zero padding).
template <typename T>
Value<T> conv1d_causal(Tape<T>& tp, Value<T> x, Value<T> kernel, Value<T> bias) {
  const Tensor<T>& X = tp.val(x);
  const Tensor<T>& K = tp.val(kernel);
  require(X.ndim() == 2 && K.ndim() == 3, "conv1d: x must be 2-D, kernel 3-D");
  int64_t M = X.dim(0), Cin = X.dim(1);
  int64_t KS = K.dim(0), Cout = K.dim(2);
  require(K.dim(1) == Cin, "conv1d: kernel input channels mismatch");
  require(tp.val(bias).numel() == Cout, "conv1d: bias length mismatch");
  Tensor<T> out({M, Cout});
  const Tensor<T>& B = tp.val(bias);
  for (int64_t i = 0; i < M; ++i)
    for (int64_t c = 0; c < Cout; ++c) out.at(i, c) = B.data[size_t(c)];
  for (int64_t i = 0; i < M; ++i) {
    T* orow = &out.at(i, 0);
    for (int64_t k = 0; k < KS; ++k) {
      int64_t src = i - (KS - 1) + k;
      if (src < 0) continue;
      const T* xrow = &X.at(src, 0);
      const T* kmat = &K.data[size_t(k * Cin * Cout)];
      for (int64_t ci = 0; ci < Cin; ++ci) {
        T xv = xrow[ci];
        if (xv == T(0)) continue;
        const T* kc = kmat + ci * Cout;
        for (int64_t c = 0; c < Cout; ++c) orow[c] += xv * kc[c];
      }
    }
  }
  return tp.push(std::move(out), {x.id, kernel.id, bias.id}, "conv1d",
                 [x, kernel, bias, M, Cin, KS, Cout](Tape<T>& t, const typename Tape<T>::Node& self) {
                   Tensor<T>& dx = t.grad(x);
                   Tensor<T>& dk = t.grad(kernel);
                   Tensor<T>& db = t.grad(bias);
                   const Tensor<T>& X = t.val(x);
                   const Tensor<T>& K = t.val(kernel);
                   for (int64_t i = 0; i < M; ++i) {
                     const T* grow = &self.grad.at(i, 0);
                     for (int64_t c = 0; c < Cout; ++c) db.data[size_t(c)] += grow[c];
                     for (int64_t k = 0; k < KS; ++k) {
                       int64_t src = i - (KS - 1) + k;
                       if (src < 0) continue;
                       for (int64_t ci = 0; ci < Cin; ++ci) {
                         T xv = X.at(src, ci);
                         size_t kbase = size_t((k * Cin + ci) * Cout);
                         T dxv = 0;
                         for (int64_t c = 0; c < Cout; ++c) {
                           dxv += K.data[kbase + size_t(c)] * grow[c];
                           dk.data[kbase + size_t(c)] += xv * grow[c];
                         }
                         dx.at(src, ci) += dxv;
                       }
                     }
                   }
                 });
}

// Gathers rows of `table` ([V, E]) for each id; backward scatter-adds.
template <typename T>
Value<T> embedding(Tape<T>& tp, Value<T> table, const std::vector<int>& ids) {
  const Tensor<T>& W = tp.val(table);
  require(W.ndim() == 2, "embedding: table must be 2-D");
  require(!ids.empty(), "embedding: empty id sequence");
  int64_t V = W.rows(), E = W.cols();
  Tensor<T> out({int64_t(ids.size()), E});
  for (size_t i = 0; i < ids.size(); ++i) {
    require(ids[i] >= 0 && ids[i] < V, "embedding: id out of range");
    std::copy_n(&W.at(ids[i], 0), size_t(E), &out.at(int64_t(i), 0));
  }
  return tp.push(std::move(out), {table.id}, "embedding",
                 [table, ids, E](Tape<T>& t, const typename Tape<T>::Node& self) {
                   Tensor<T>& dw = t.grad(table);
                   for (size_t i = 0; i < ids.size(); ++i)
                     for (int64_t j = 0; j < E; ++j)
                       dw.at(ids[i], j) += self.grad.at(int64_t(i), j);
                 });
}

// Inverted dropout. Identity when the tape is not training or p == 0. The
// mask stream is derived from the tape seed and a per-op counter, so a fixed
// global seed reproduces runs exactly.
template <typename T>
Value<T> dropout(Tape<T>& tp, Value<T> x, double p) {
  require(p >= 0.0 && p < 1.0, "dropout: p must be in [0, 1)");
  if (!tp.training || p == 0.0) return x;
  tp.mark_dropout_used();
  Rng rng(tp.next_dropout_stream());
  const Tensor<T>& X = tp.val(x);
  std::vector<uint8_t> keep(X.data.size());
  Tensor<T> out = X;
  T scale = T(1.0 / (1.0 - p));
  for (size_t i = 0; i < out.data.size(); ++i) {
    keep[i] = rng.next_double() >= p;
    out.data[i] = keep[i] ? out.data[i] * scale : T(0);
  }
  return tp.push(std::move(out), {x.id}, "dropout",
                 [x, keep = std::move(keep), scale](Tape<T>& t, const typename Tape<T>::Node& self) {
                   Tensor<T>& dx = t.grad(x);
                   for (size_t i = 0; i < keep.size(); ++i)
                     if (keep[i]) dx.data[i] += self.grad.data[i] * scale;
                 });
}

template <typename T>
Value<T> concat_cols(Tape<T>& tp, const std::vector<Value<T>>& parts) {
  require(!parts.empty(), "concat_cols: no inputs");
  int64_t n = tp.val(parts[0]).rows();
  int64_t total = 0;
  for (auto v : parts) {
    require(tp.val(v).ndim() == 2 && tp.val(v).rows() == n, "concat_cols: row mismatch");
    total += tp.val(v).cols();
  }
  Tensor<T> out({n, total});
  int64_t off = 0;
  std::vector<int> ids;
  std::vector<int64_t> widths;
  for (auto v : parts) {
    const Tensor<T>& P = tp.val(v);
    for (int64_t i = 0; i < n; ++i)
      std::copy_n(&P.at(i, 0), size_t(P.cols()), &out.at(i, off));
    ids.push_back(v.id);
    widths.push_back(P.cols());
    off += P.cols();
  }
  return tp.push(std::move(out), ids, "concat_cols",
                 [parts, widths, n](Tape<T>& t, const typename Tape<T>::Node& self) {
                   int64_t off = 0;
                   for (size_t pi = 0; pi < parts.size(); ++pi) {
                     Tensor<T>& dp = t.grad(parts[pi]);
                     for (int64_t i = 0; i < n; ++i)
                       for (int64_t j = 0; j < widths[pi]; ++j)
                         dp.at(i, j) += self.grad.at(i, off + j);
                     off += widths[pi];
                   }
                 });
}

// linear = matmul + bias.
template <typename T>
Value<T> linear(Tape<T>& tp, Value<T> x, Value<T> w, Value<T> b) {
  return add_bias(tp, matmul(tp, x, w), b);
}

// Mean over non-pad target positions of -log softmax(logits)[target].
template <typename T>
Value<T> cross_entropy_mean(Tape<T>& tp, Value<T> logits, const std::vector<int>& targets,
                            int pad_id) {
  const Tensor<T>& L = tp.val(logits);
  require(L.ndim() == 2, "cross_entropy: logits must be 2-D");
  require(int64_t(targets.size()) == L.rows(), "cross_entropy: target length mismatch");
  int64_t V = L.cols();
  int64_t n_valid = 0;
  double total = 0;
  for (size_t i = 0; i < targets.size(); ++i) {
    if (targets[i] == pad_id) continue;
    require(targets[i] >= 0 && targets[i] < V, "cross_entropy: target id out of vocabulary");
    const T* row = &L.at(int64_t(i), 0);
    T mx = row[0];
    for (int64_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
    T z = 0;
    for (int64_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
    total += double(mx) + std::log(double(z)) - double(row[targets[i]]);
    ++n_valid;
  }
  require(n_valid > 0, "cross_entropy: no non-pad targets");
  Tensor<T> out = Tensor<T>::scalar(T(total / double(n_valid)));
  return tp.push(std::move(out), {logits.id}, "cross_entropy",
                 [logits, targets, pad_id, V, n_valid](Tape<T>& t, const typename Tape<T>::Node& self) {
                   Tensor<T>& dl = t.grad(logits);
                   const Tensor<T>& L = t.val(logits);
                   T g = self.grad.data[0] / T(n_valid);
                   for (size_t i = 0; i < targets.size(); ++i) {
                     if (targets[i] == pad_id) continue;
                     const T* row = &L.at(int64_t(i), 0);
                     T mx = row[0];
                     for (int64_t j = 1; j < V; ++j) mx = std::max(mx, row[j]);
                     T z = 0;
                     for (int64_t j = 0; j < V; ++j) z += std::exp(row[j] - mx);
                     for (int64_t j = 0; j < V; ++j) {
                       T p = std::exp(row[j] - mx) / z;
                       dl.at(int64_t(i), j) += g * (p - (j == targets[i] ? T(1) : T(0)));
                     }
                   }
                 });
}

}  // namespace wsasr
