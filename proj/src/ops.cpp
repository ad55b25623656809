#include "stydesty/ops.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "stydesty/rng.hpp"

namespace stydesty {
namespace {

template <typename T>
using Buffer = typename Tape<T>::GradBuffer;

void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, float alpha, const float* a, int lda,
          const float* b, int ldb, float beta, float* c, int ldc) {
  cblas_sgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

void gemm(CBLAS_TRANSPOSE ta, CBLAS_TRANSPOSE tb, int m, int n, int k, double alpha, const double* a, int lda,
          const double* b, int ldb, double beta, double* c, int ldc) {
  cblas_dgemm(CblasRowMajor, ta, tb, m, n, k, alpha, a, lda, b, ldb, beta, c, ldc);
}

template <typename T>
Tape<T>* tape_of(std::initializer_list<const BasicTensor<T>*> ins) {
  for (const auto* t : ins) {
    if (t->tape() != nullptr) return t->tape();
  }
  return nullptr;
}

[[noreturn]] void shape_fail(const std::string& op, const std::string& what) { throw ShapeError(op + ": " + what); }

template <typename T>
void require_rank(const std::string& op, const char* name, const BasicTensor<T>& t, int rank) {
  if (!t.defined()) shape_fail(op, std::string(name) + " is undefined");
  if (t.rank() != rank) {
    shape_fail(op, std::string(name) + " must have rank " + std::to_string(rank) + ", got " + shape_str(t.shape()));
  }
}

template <typename T>
void require_same(const std::string& op, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) shape_fail(op, "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

struct ConvGeometry {
  int channels, height, width;  // image side
  int kh, kw, stride, padding;
  int out_h, out_w;             // column side
  int rows() const { return channels * kh * kw; }
  int cols() const { return out_h * out_w; }
};

template <typename T>
void im2col(const T* img, const ConvGeometry& g, T* cols) {
  const int n_cols = g.cols();
  for (int c = 0; c < g.channels; ++c) {
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        T* row = cols + static_cast<std::ptrdiff_t>((c * g.kh + i) * g.kw + j) * n_cols;
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.padding + i;
          T* dst = row + oh * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = img + (static_cast<std::ptrdiff_t>(c) * g.height + ih) * g.width;
          for (int ow = 0; ow < g.out_w; ++ow) {
            const int iw = ow * g.stride - g.padding + j;
            dst[ow] = (iw >= 0 && iw < g.width) ? src[iw] : T(0);
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeometry& g, T* img) {
  const int n_cols = g.cols();
  for (int c = 0; c < g.channels; ++c) {
    for (int i = 0; i < g.kh; ++i) {
      for (int j = 0; j < g.kw; ++j) {
        const T* row = cols + static_cast<std::ptrdiff_t>((c * g.kh + i) * g.kw + j) * n_cols;
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.padding + i;
          if (ih < 0 || ih >= g.height) continue;
          T* dst = img + (static_cast<std::ptrdiff_t>(c) * g.height + ih) * g.width;
          const T* src = row + oh * g.out_w;
          for (int ow = 0; ow < g.out_w; ++ow) {
            const int iw = ow * g.stride - g.padding + j;
            if (iw >= 0 && iw < g.width) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

void fold(std::uint64_t& h, std::uint64_t v) { h = mix64(h ^ v); }

thread_local KinkProbe* g_probe = nullptr;

}  // namespace

KinkProbe::KinkProbe() : previous_(g_probe) { g_probe = this; }
KinkProbe::~KinkProbe() { g_probe = previous_; }
bool KinkProbe::active() { return g_probe != nullptr; }
void KinkProbe::note(std::uint64_t value) {
  if (g_probe != nullptr) fold(g_probe->hash_, value);
}

// --------------------------------------------------------------------------
// Convolutions
// --------------------------------------------------------------------------

template <typename T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& kernel, int stride, int padding) {
  const std::string op = "conv2d";
  require_rank(op, "input", x, 4);
  require_rank(op, "kernel", kernel, 4);
  if (stride < 1 || padding < 0) shape_fail(op, "stride must be >= 1 and padding >= 0");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int o = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(1) != c) {
    shape_fail(op, "kernel in-channels " + std::to_string(kernel.dim(1)) + " do not match input channels " +
                       std::to_string(c) + " (input " + shape_str(x.shape()) + ", kernel " +
                       shape_str(kernel.shape()) + ")");
  }
  if (h + 2 * padding < kh || w + 2 * padding < kw) {
    shape_fail(op, "kernel " + shape_str(kernel.shape()) + " does not fit input " + shape_str(x.shape()) +
                       " with padding " + std::to_string(padding));
  }
  const ConvGeometry g{c, h, w, kh, kw, stride, padding, (h + 2 * padding - kh) / stride + 1,
                       (w + 2 * padding - kw) / stride + 1};
  const std::size_t col_size = static_cast<std::size_t>(g.rows()) * g.cols();
  const std::size_t in_size = static_cast<std::size_t>(c) * h * w;
  const std::size_t out_size = static_cast<std::size_t>(o) * g.cols();

  const bool save_cols = kernel.requires_grad();
  auto cols = std::make_shared<std::vector<T>>(save_cols ? col_size * n : col_size);
  std::vector<T> out(out_size * n);
  const T* xd = x.data().data();
  const T* kd = kernel.data().data();
  for (int s = 0; s < n; ++s) {
    T* cs = cols->data() + (save_cols ? col_size * s : 0);
    im2col(xd + in_size * s, g, cs);
    gemm(CblasNoTrans, CblasNoTrans, o, g.cols(), g.rows(), T(1), kd, g.rows(), cs, g.cols(), T(0),
         out.data() + out_size * s, g.cols());
  }
  BasicTensor<T> result({n, o, g.out_h, g.out_w}, std::move(out));
  auto* tape = tape_of({&x, &kernel});
  if (tape == nullptr) return result;
  return tape->record(std::move(result), {&x, &kernel},
                      [g, n, o, col_size, in_size, out_size, kernel, cols, save_cols](std::span<const T> gout,
                                                                                      std::span<Buffer<T>* const> gin) {
                        const T* kd = kernel.data().data();
                        std::vector<T> dcols(gin[0] ? col_size : 0);
                        for (int s = 0; s < n; ++s) {
                          const T* gs = gout.data() + out_size * s;
                          if (gin[1] && save_cols) {
                            gemm(CblasNoTrans, CblasTrans, o, g.rows(), g.cols(), T(1), gs, g.cols(),
                                 cols->data() + col_size * s, g.cols(), T(1), gin[1]->data(), g.rows());
                          }
                          if (gin[0]) {
                            gemm(CblasTrans, CblasNoTrans, g.rows(), g.cols(), o, T(1), kd, g.rows(), gs, g.cols(),
                                 T(0), dcols.data(), g.cols());
                            col2im(dcols.data(), g, gin[0]->data() + in_size * s);
                          }
                        }
                      });
}

template <typename T>
BasicTensor<T> conv_transpose2d(const BasicTensor<T>& x, const BasicTensor<T>& kernel, int stride, int padding) {
  const std::string op = "conv_transpose2d";
  require_rank(op, "input", x, 4);
  require_rank(op, "kernel", kernel, 4);
  if (stride < 1 || padding < 0) shape_fail(op, "stride must be >= 1 and padding >= 0");
  const int n = x.dim(0), o = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int i_ch = kernel.dim(1), kh = kernel.dim(2), kw = kernel.dim(3);
  if (kernel.dim(0) != o) {
    shape_fail(op, "kernel dim 0 (" + std::to_string(kernel.dim(0)) + ") must match input channels " +
                       std::to_string(o) + " (input " + shape_str(x.shape()) + ", kernel " +
                       shape_str(kernel.shape()) + ")");
  }
  const int out_h = (h - 1) * stride - 2 * padding + kh;
  const int out_w = (w - 1) * stride - 2 * padding + kw;
  if (out_h < 1 || out_w < 1) {
    shape_fail(op, "empty output for input " + shape_str(x.shape()) + " and kernel " + shape_str(kernel.shape()));
  }
  // Column geometry of the forward convolution this operator is the adjoint of.
  const ConvGeometry g{i_ch, out_h, out_w, kh, kw, stride, padding, h, w};
  const std::size_t col_size = static_cast<std::size_t>(g.rows()) * g.cols();
  const std::size_t in_size = static_cast<std::size_t>(o) * h * w;
  const std::size_t out_size = static_cast<std::size_t>(i_ch) * out_h * out_w;

  std::vector<T> out(out_size * n, T(0));
  std::vector<T> cols(col_size);
  const T* xd = x.data().data();
  const T* kd = kernel.data().data();
  for (int s = 0; s < n; ++s) {
    gemm(CblasTrans, CblasNoTrans, g.rows(), g.cols(), o, T(1), kd, g.rows(), xd + in_size * s, g.cols(), T(0),
         cols.data(), g.cols());
    col2im(cols.data(), g, out.data() + out_size * s);
  }
  BasicTensor<T> result({n, i_ch, out_h, out_w}, std::move(out));
  auto* tape = tape_of({&x, &kernel});
  if (tape == nullptr) return result;
  return tape->record(std::move(result), {&x, &kernel},
                      [g, n, o, col_size, in_size, out_size, x, kernel](std::span<const T> gout,
                                                                        std::span<Buffer<T>* const> gin) {
                        std::vector<T> gcols(col_size);
                        const T* kd = kernel.data().data();
                        const T* xd = x.data().data();
                        for (int s = 0; s < n; ++s) {
                          im2col(gout.data() + out_size * s, g, gcols.data());
                          if (gin[0]) {
                            gemm(CblasNoTrans, CblasNoTrans, o, g.cols(), g.rows(), T(1), kd, g.rows(),
                                 gcols.data(), g.cols(), T(1), gin[0]->data() + in_size * s, g.cols());
                          }
                          if (gin[1]) {
                            gemm(CblasNoTrans, CblasTrans, o, g.rows(), g.cols(), T(1), xd + in_size * s, g.cols(),
                                 gcols.data(), g.cols(), T(1), gin[1]->data(), g.rows());
                          }
                        }
                      });
}

// --------------------------------------------------------------------------
// Normalization
// --------------------------------------------------------------------------

template <typename T>
InstanceStats<T> instance_stats(const BasicTensor<T>& f) {
  const std::string op = "instance_stats";
  require_rank(op, "input", f, 4);
  const int n = f.dim(0), c = f.dim(1);
  const int hw = f.dim(2) * f.dim(3);
  if (hw < 1) shape_fail(op, "spatial size must be >= 1, got " + shape_str(f.shape()));

  std::vector<T> mean(static_cast<std::size_t>(n) * c), sd(mean.size());
  const T* fd = f.data().data();
  for (int p = 0; p < n * c; ++p) {
    const T* v = fd + static_cast<std::ptrdiff_t>(p) * hw;
    double m = 0;
    for (int k = 0; k < hw; ++k) m += v[k];
    m /= hw;
    double var = 0;
    for (int k = 0; k < hw; ++k) var += (v[k] - m) * (v[k] - m);
    var /= hw;
    mean[p] = static_cast<T>(m);
    sd[p] = static_cast<T>(std::sqrt(var + kStdEpsilon));
  }
  InstanceStats<T> out{BasicTensor<T>({n, c}, std::move(mean)), BasicTensor<T>({n, c}, std::move(sd))};
  auto* tape = f.tape();
  if (tape == nullptr) return out;

  out.mean = tape->record(std::move(out.mean), {&f}, [hw](std::span<const T> gout, std::span<Buffer<T>* const> gin) {
    T* gf = gin[0]->data();
    for (std::size_t p = 0; p < gout.size(); ++p) {
      const T gm = gout[p] / static_cast<T>(hw);
      for (int k = 0; k < hw; ++k) gf[p * hw + k] += gm;
    }
  });
  auto mean_saved = out.mean.detach();
  auto std_saved = out.std.detach();
  out.std = tape->record(std::move(out.std), {&f},
                         [hw, f, mean_saved, std_saved](std::span<const T> gout, std::span<Buffer<T>* const> gin) {
                           T* gf = gin[0]->data();
                           const T* fd = f.data().data();
                           for (std::size_t p = 0; p < gout.size(); ++p) {
                             const T k0 = gout[p] / (static_cast<T>(hw) * std_saved[static_cast<std::int64_t>(p)]);
                             const T m = mean_saved[static_cast<std::int64_t>(p)];
                             for (int k = 0; k < hw; ++k) gf[p * hw + k] += k0 * (fd[p * hw + k] - m);
                           }
                         });
  return out;
}

template <typename T>
BasicTensor<T> normalize_affine(const BasicTensor<T>& f, const BasicTensor<T>& mean, const BasicTensor<T>& std,
                                const BasicTensor<T>& scale, const BasicTensor<T>& shift) {
  const std::string op = "normalize_affine";
  require_rank(op, "input", f, 4);
  const int n = f.dim(0), c = f.dim(1), hw = f.dim(2) * f.dim(3);
  const Shape nc{n, c};
  if (mean.shape() != nc || std.shape() != nc) {
    shape_fail(op, "statistics must be " + shape_str(nc) + ", got " + shape_str(mean.shape()) + " and " +
                       shape_str(std.shape()));
  }
  if (scale.numel() != shift.numel()) {
    shape_fail(op, "scale " + shape_str(scale.shape()) + " and shift " + shape_str(shift.shape()) + " differ in size");
  }
  const bool per_position = scale.numel() == static_cast<std::int64_t>(c) * hw && hw > 1;
  if (!per_position && scale.numel() != c) {
    shape_fail(op, "affine parameters " + shape_str(scale.shape()) + " match neither " + std::to_string(c) +
                       " channels nor " + std::to_string(c) + "x" + std::to_string(hw) + " positions of input " +
                       shape_str(f.shape()));
  }
  const auto aff = [per_position, hw](int ch, int k) {
    return per_position ? static_cast<std::size_t>(ch) * hw + k : static_cast<std::size_t>(ch);
  };

  std::vector<T> out(static_cast<std::size_t>(f.numel()));
  const T* fd = f.data().data();
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t p = static_cast<std::size_t>(s) * c + ch;
      const T m = mean[p], inv = T(1) / std[p];
      const std::size_t base = p * hw;
      for (int k = 0; k < hw; ++k) {
        const std::size_t a = aff(ch, k);
        out[base + k] = scale[a] * ((fd[base + k] - m) * inv) + shift[a];
      }
    }
  }
  BasicTensor<T> result(f.shape(), std::move(out));
  auto* tape = tape_of({&f, &mean, &std, &scale, &shift});
  if (tape == nullptr) return result;
  return tape->record(
      std::move(result), {&f, &mean, &std, &scale, &shift},
      [n, c, hw, aff, f, mean, std, scale](std::span<const T> gout, std::span<Buffer<T>* const> gin) {
        const T* fd = f.data().data();
        for (int s = 0; s < n; ++s) {
          for (int ch = 0; ch < c; ++ch) {
            const std::size_t p = static_cast<std::size_t>(s) * c + ch;
            const T m = mean[p], inv = T(1) / std[p];
            const std::size_t base = p * hw;
            T gmean = 0, gstd = 0;
            for (int k = 0; k < hw; ++k) {
              const std::size_t a = aff(ch, k);
              const T g = gout[base + k];
              const T xhat = (fd[base + k] - m) * inv;
              const T gs = g * scale[a];
              if (gin[0]) (*gin[0])[base + k] += gs * inv;
              gmean -= gs * inv;
              gstd -= gs * xhat * inv;
              if (gin[3]) (*gin[3])[a] += g * xhat;
              if (gin[4]) (*gin[4])[a] += g;
            }
            if (gin[1]) (*gin[1])[p] += gmean;
            if (gin[2]) (*gin[2])[p] += gstd;
          }
        }
      });
}

// --------------------------------------------------------------------------
// Elementwise and dense
// --------------------------------------------------------------------------

template <typename T>
BasicTensor<T> pointwise(const BasicTensor<T>& x, Pointwise kind) {
  if (!x.defined()) shape_fail("pointwise", "input is undefined");
  const auto xs = x.data();
  std::vector<T> out(xs.size());
  switch (kind) {
    case Pointwise::relu: {
      std::uint64_t mask_hash = 0;
      const bool probe = KinkProbe::active();
      for (std::size_t i = 0; i < xs.size(); ++i) {
        out[i] = xs[i] > T(0) ? xs[i] : T(0);
        if (probe && xs[i] > T(0)) fold(mask_hash, i);
      }
      if (probe) KinkProbe::note(mask_hash);
      break;
    }
    case Pointwise::sigmoid: {
      constexpr T lo = std::numeric_limits<T>::min();
      constexpr T hi = T(1) - std::numeric_limits<T>::epsilon() / 2;
      for (std::size_t i = 0; i < xs.size(); ++i) {
        const T v = xs[i];
        const T s = v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
        out[i] = std::clamp(s, lo, hi);
      }
      break;
    }
    case Pointwise::cos:
      for (std::size_t i = 0; i < xs.size(); ++i) out[i] = std::cos(xs[i]);
      break;
  }
  BasicTensor<T> result(x.shape(), std::move(out));
  if (x.tape() == nullptr) return result;
  auto y = result.detach();
  return x.tape()->record(std::move(result), {&x},
                          [kind, x, y](std::span<const T> gout, std::span<Buffer<T>* const> gin) {
                            auto& gx = *gin[0];
                            for (std::size_t i = 0; i < gout.size(); ++i) {
                              const auto k = static_cast<std::int64_t>(i);
                              switch (kind) {
                                case Pointwise::relu:
                                  if (x[k] > T(0)) gx[i] += gout[i];
                                  break;
                                case Pointwise::sigmoid:
                                  gx[i] += gout[i] * y[k] * (T(1) - y[k]);
                                  break;
                                case Pointwise::cos:
                                  gx[i] -= gout[i] * std::sin(x[k]);
                                  break;
                              }
                            }
                          });
}

template <typename T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight, const BasicTensor<T>& bias) {
  const std::string op = "linear";
  require_rank(op, "input", x, 2);
  require_rank(op, "weight", weight, 2);
  require_rank(op, "bias", bias, 1);
  const int n = x.dim(0), d = x.dim(1), k = weight.dim(1);
  if (weight.dim(0) != d) {
    shape_fail(op, "input " + shape_str(x.shape()) + " and weight " + shape_str(weight.shape()) +
                       " disagree on the inner dimension");
  }
  if (bias.dim(0) != k) {
    shape_fail(op, "bias " + shape_str(bias.shape()) + " does not match weight " + shape_str(weight.shape()));
  }
  std::vector<T> out(static_cast<std::size_t>(n) * k);
  for (int r = 0; r < n; ++r) std::copy(bias.data().begin(), bias.data().end(), out.begin() + r * k);
  if (n > 0 && d > 0) {
    gemm(CblasNoTrans, CblasNoTrans, n, k, d, T(1), x.data().data(), d, weight.data().data(), k, T(1), out.data(),
         k);
  }
  BasicTensor<T> result({n, k}, std::move(out));
  auto* tape = tape_of({&x, &weight, &bias});
  if (tape == nullptr) return result;
  return tape->record(std::move(result), {&x, &weight, &bias},
                      [n, d, k, x, weight](std::span<const T> gout, std::span<Buffer<T>* const> gin) {
                        if (gin[0]) {
                          gemm(CblasNoTrans, CblasTrans, n, d, k, T(1), gout.data(), k, weight.data().data(), k, T(1),
                               gin[0]->data(), d);
                        }
                        if (gin[1]) {
                          gemm(CblasTrans, CblasNoTrans, d, k, n, T(1), x.data().data(), d, gout.data(), k, T(1),
                               gin[1]->data(), k);
                        }
                        if (gin[2]) {
                          for (int r = 0; r < n; ++r) {
                            for (int j = 0; j < k; ++j) (*gin[2])[j] += gout[static_cast<std::size_t>(r) * k + j];
                          }
                        }
                      });
}

template <typename T>
BasicTensor<T> pool(const BasicTensor<T>& x, PoolKind kind, int window, int stride) {
  const std::string op = "pool";
  require_rank(op, "input", x, 4);
  if (window < 1 || stride < 1) shape_fail(op, "window and stride must be >= 1");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (window > h || window > w) {
    shape_fail(op, "window " + std::to_string(window) + " does not fit input " + shape_str(x.shape()));
  }
  const int oh = (h - window) / stride + 1, ow = (w - window) / stride + 1;
  const std::size_t planes = static_cast<std::size_t>(n) * c;
  std::vector<T> out(planes * oh * ow);
  auto argmax = std::make_shared<std::vector<std::int32_t>>(kind == PoolKind::max ? out.size() : 0);
  const T* xd = x.data().data();
  const T inv = T(1) / static_cast<T>(window * window);
  std::uint64_t probe_hash = 0;
  const bool probe = KinkProbe::active();
  for (std::size_t p = 0; p < planes; ++p) {
    const T* plane = xd + p * h * w;
    for (int i = 0; i < oh; ++i) {
      for (int j = 0; j < ow; ++j) {
        const std::size_t o = (p * oh + i) * ow + j;
        if (kind == PoolKind::max) {
          int best = (i * stride) * w + j * stride;
          for (int a = 0; a < window; ++a) {
            for (int b = 0; b < window; ++b) {
              const int idx = (i * stride + a) * w + (j * stride + b);
              if (plane[idx] > plane[best]) best = idx;
            }
          }
          out[o] = plane[best];
          (*argmax)[o] = best;
          if (probe) fold(probe_hash, static_cast<std::uint64_t>(best));
        } else {
          T acc = 0;
          for (int a = 0; a < window; ++a) {
            for (int b = 0; b < window; ++b) acc += plane[(i * stride + a) * w + (j * stride + b)];
          }
          out[o] = acc * inv;
        }
      }
    }
  }
  if (probe && kind == PoolKind::max) KinkProbe::note(probe_hash);
  BasicTensor<T> result({n, c, oh, ow}, std::move(out));
  if (x.tape() == nullptr) return result;
  return x.tape()->record(
      std::move(result), {&x},
      [kind, planes, h, w, oh, ow, window, stride, inv, argmax](std::span<const T> gout,
                                                                 std::span<Buffer<T>* const> gin) {
        T* gx = gin[0]->data();
        for (std::size_t p = 0; p < planes; ++p) {
          T* gplane = gx + p * h * w;
          for (int i = 0; i < oh; ++i) {
            for (int j = 0; j < ow; ++j) {
              const std::size_t o = (p * oh + i) * ow + j;
              if (kind == PoolKind::max) {
                gplane[(*argmax)[o]] += gout[o];
              } else {
                for (int a = 0; a < window; ++a) {
                  for (int b = 0; b < window; ++b) gplane[(i * stride + a) * w + (j * stride + b)] += gout[o] * inv;
                }
              }
            }
          }
        }
      });
}

// --------------------------------------------------------------------------
// Losses
// --------------------------------------------------------------------------

template <typename T>
BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels) {
  const std::string op = "softmax_cross_entropy";
  require_rank(op, "logits", logits, 2);
  const int n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(labels.size()) != n) {
    shape_fail(op, std::to_string(labels.size()) + " labels for logits " + shape_str(logits.shape()));
  }
  if (n < 1 || k < 1) shape_fail(op, "empty logits " + shape_str(logits.shape()));
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || labels[r] >= k) {
      throw std::out_of_range(op + ": label " + std::to_string(labels[r]) + " at row " + std::to_string(r) +
                              " outside [0, " + std::to_string(k) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n) * k);
  const T* ld = logits.data().data();
  double total = 0;
  for (int r = 0; r < n; ++r) {
    const T* row = ld + static_cast<std::ptrdiff_t>(r) * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0;
    for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    for (int j = 0; j < k; ++j) (*probs)[static_cast<std::size_t>(r) * k + j] = static_cast<T>(std::exp(row[j] - mx) / z);
    total += std::log(z) + mx - row[labels[r]];
  }
  BasicTensor<T> result = BasicTensor<T>::scalar(static_cast<T>(total / n));
  if (logits.tape() == nullptr) return result;
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape()->record(std::move(result), {&logits},
                               [n, k, probs, lab](std::span<const T> gout, std::span<Buffer<T>* const> gin) {
                                 const T g = gout[0] / static_cast<T>(n);
                                 auto& gl = *gin[0];
                                 for (int r = 0; r < n; ++r) {
                                   for (int j = 0; j < k; ++j) {
                                     const std::size_t i = static_cast<std::size_t>(r) * k + j;
                                     gl[i] += g * ((*probs)[i] - (j == lab[static_cast<std::size_t>(r)] ? T(1) : T(0)));
                                   }
                                 }
                               });
}

template <typename T>
BasicTensor<T> sq_l2(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const std::string op = "sq_l2";
  if (!a.defined() || !b.defined()) shape_fail(op, "undefined operand");
  require_same(op, a, b);
  if (a.rank() < 1 || a.dim(0) < 1) shape_fail(op, "needs a leading batch axis, got " + shape_str(a.shape()));
  const int n = a.dim(0);
  double total = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    total += d * d;
  }
  BasicTensor<T> result = BasicTensor<T>::scalar(static_cast<T>(total / n));
  auto* tape = tape_of({&a, &b});
  if (tape == nullptr) return result;
  return tape->record(std::move(result), {&a, &b},
                      [n, a, b](std::span<const T> gout, std::span<Buffer<T>* const> gin) {
                        const T g = T(2) * gout[0] / static_cast<T>(n);
                        for (std::int64_t i = 0; i < a.numel(); ++i) {
                          const T d = g * (a[i] - b[i]);
                          if (gin[0]) (*gin[0])[static_cast<std::size_t>(i)] += d;
                          if (gin[1]) (*gin[1])[static_cast<std::size_t>(i)] -= d;
                        }
                      });
}

template <typename T>
BasicTensor<T> gaussian_nll(const BasicTensor<T>& target, const BasicTensor<T>& mean, const BasicTensor<T>& logvar) {
  const std::string op = "gaussian_nll";
  require_rank(op, "target", target, 2);
  require_same(op, target, mean);
  require_same(op, target, logvar);
  const int n = target.dim(0);
  if (n < 1) shape_fail(op, "empty batch");
  const double log2pi = std::log(2.0 * std::numbers::pi);
  double total = 0;
  for (std::int64_t i = 0; i < target.numel(); ++i) {
    const double d = static_cast<double>(target[i]) - mean[i];
    total += 0.5 * (log2pi + logvar[i] + d * d * std::exp(-static_cast<double>(logvar[i])));
  }
  BasicTensor<T> result = BasicTensor<T>::scalar(static_cast<T>(total / n));
  auto* tape = tape_of({&target, &mean, &logvar});
  if (tape == nullptr) return result;
  return tape->record(std::move(result), {&target, &mean, &logvar},
                      [n, target, mean, logvar](std::span<const T> gout, std::span<Buffer<T>* const> gin) {
                        const T g = gout[0] / static_cast<T>(n);
                        for (std::int64_t i = 0; i < target.numel(); ++i) {
                          const auto u = static_cast<std::size_t>(i);
                          const T prec = std::exp(-logvar[i]);
                          const T d = target[i] - mean[i];
                          if (gin[0]) (*gin[0])[u] += g * d * prec;
                          if (gin[1]) (*gin[1])[u] -= g * d * prec;
                          if (gin[2]) (*gin[2])[u] += g * T(0.5) * (T(1) - d * d * prec);
                        }
                      });
}

// --------------------------------------------------------------------------
// Glue
// --------------------------------------------------------------------------

template <typename T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same("add", a, b);
  std::vector<T> out(static_cast<std::size_t>(a.numel()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  BasicTensor<T> result(a.shape(), std::move(out));
  auto* tape = tape_of({&a, &b});
  if (tape == nullptr) return result;
  return tape->record(std::move(result), {&a, &b}, [](std::span<const T> gout, std::span<Buffer<T>* const> gin) {
    for (int k = 0; k < 2; ++k) {
      if (!gin[k]) continue;
      for (std::size_t i = 0; i < gout.size(); ++i) (*gin[k])[i] += gout[i];
    }
  });
}

template <typename T>
BasicTensor<T> sub(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  require_same("sub", a, b);
  std::vector<T> out(static_cast<std::size_t>(a.numel()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  BasicTensor<T> result(a.shape(), std::move(out));
  auto* tape = tape_of({&a, &b});
  if (tape == nullptr) return result;
  return tape->record(std::move(result), {&a, &b}, [](std::span<const T> gout, std::span<Buffer<T>* const> gin) {
    for (std::size_t i = 0; i < gout.size(); ++i) {
      if (gin[0]) (*gin[0])[i] += gout[i];
      if (gin[1]) (*gin[1])[i] -= gout[i];
    }
  });
}

template <typename T>
BasicTensor<T> scale(const BasicTensor<T>& a, double factor) {
  if (!a.defined()) shape_fail("scale", "undefined operand");
  const T f = static_cast<T>(factor);
  std::vector<T> out(static_cast<std::size_t>(a.numel()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * f;
  BasicTensor<T> result(a.shape(), std::move(out));
  if (a.tape() == nullptr) return result;
  return a.tape()->record(std::move(result), {&a}, [f](std::span<const T> gout, std::span<Buffer<T>* const> gin) {
    for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i] * f;
  });
}

template <typename T>
BasicTensor<T> add_channel_bias(const BasicTensor<T>& x, const BasicTensor<T>& bias) {
  const std::string op = "add_channel_bias";
  if (!x.defined() || (x.rank() != 2 && x.rank() != 4)) shape_fail(op, "input must be N×C or N×C×H×W");
  const int n = x.dim(0), c = x.dim(1);
  const int hw = x.rank() == 4 ? x.dim(2) * x.dim(3) : 1;
  if (bias.numel() != c) shape_fail(op, "bias " + shape_str(bias.shape()) + " for input " + shape_str(x.shape()));
  std::vector<T> out(static_cast<std::size_t>(x.numel()));
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t base = (static_cast<std::size_t>(s) * c + ch) * hw;
      for (int k = 0; k < hw; ++k) out[base + k] = x[static_cast<std::int64_t>(base + k)] + bias[ch];
    }
  }
  BasicTensor<T> result(x.shape(), std::move(out));
  auto* tape = tape_of({&x, &bias});
  if (tape == nullptr) return result;
  return tape->record(std::move(result), {&x, &bias},
                      [n, c, hw](std::span<const T> gout, std::span<Buffer<T>* const> gin) {
                        for (int s = 0; s < n; ++s) {
                          for (int ch = 0; ch < c; ++ch) {
                            const std::size_t base = (static_cast<std::size_t>(s) * c + ch) * hw;
                            for (int k = 0; k < hw; ++k) {
                              if (gin[0]) (*gin[0])[base + k] += gout[base + k];
                              if (gin[1]) (*gin[1])[static_cast<std::size_t>(ch)] += gout[base + k];
                            }
                          }
                        }
                      });
}

template <typename T>
BasicTensor<T> blend(const BasicTensor<T>& t, const BasicTensor<T>& a, const BasicTensor<T>& b) {
  const std::string op = "blend";
  if (!t.defined() || t.numel() != 1) shape_fail(op, "weight must be a scalar");
  require_same(op, a, b);
  const T w = t.item();
  std::vector<T> out(static_cast<std::size_t>(a.numel()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = w * a.data()[i] + (T(1) - w) * b.data()[i];
  BasicTensor<T> result(a.shape(), std::move(out));
  auto* tape = tape_of({&t, &a, &b});
  if (tape == nullptr) return result;
  return tape->record(std::move(result), {&t, &a, &b},
                      [w, a, b](std::span<const T> gout, std::span<Buffer<T>* const> gin) {
                        T gt = 0;
                        for (std::size_t i = 0; i < gout.size(); ++i) {
                          if (gin[1]) (*gin[1])[i] += w * gout[i];
                          if (gin[2]) (*gin[2])[i] += (T(1) - w) * gout[i];
                          gt += gout[i] * (a.data()[i] - b.data()[i]);
                        }
                        if (gin[0]) (*gin[0])[0] += gt;
                      });
}

template <typename T>
BasicTensor<T> sum(const BasicTensor<T>& a) {
  if (!a.defined()) shape_fail("sum", "undefined operand");
  double total = 0;
  for (T v : a.data()) total += v;
  BasicTensor<T> result = BasicTensor<T>::scalar(static_cast<T>(total));
  if (a.tape() == nullptr) return result;
  return a.tape()->record(std::move(result), {&a}, [](std::span<const T> gout, std::span<Buffer<T>* const> gin) {
    for (auto& g : *gin[0]) g += gout[0];
  });
}

template <typename T>
BasicTensor<T> batch_mean(const BasicTensor<T>& a) {
  const std::string op = "batch_mean";
  if (!a.defined() || a.rank() < 1 || a.dim(0) < 1) shape_fail(op, "needs a non-empty leading axis");
  const int n = a.dim(0);
  const std::size_t row = static_cast<std::size_t>(a.numel() / n);
  std::vector<double> acc(row, 0.0);
  for (int s = 0; s < n; ++s) {
    for (std::size_t j = 0; j < row; ++j) acc[j] += a.data()[s * row + j];
  }
  std::vector<T> out(row);
  for (std::size_t j = 0; j < row; ++j) out[j] = static_cast<T>(acc[j] / n);
  Shape shape = a.shape();
  shape[0] = 1;
  BasicTensor<T> result(std::move(shape), std::move(out));
  if (a.tape() == nullptr) return result;
  return a.tape()->record(std::move(result), {&a},
                          [n, row](std::span<const T> gout, std::span<Buffer<T>* const> gin) {
                            const T inv = T(1) / static_cast<T>(n);
                            for (int s = 0; s < n; ++s) {
                              for (std::size_t j = 0; j < row; ++j) (*gin[0])[s * row + j] += gout[j] * inv;
                            }
                          });
}

template <typename T>
BasicTensor<T> element(const BasicTensor<T>& a, std::int64_t index) {
  if (!a.defined() || index < 0 || index >= a.numel()) {
    shape_fail("element", "index " + std::to_string(index) + " outside tensor of shape " + shape_str(a.shape()));
  }
  BasicTensor<T> result = BasicTensor<T>::scalar(a[index]);
  if (a.tape() == nullptr) return result;
  return a.tape()->record(std::move(result), {&a},
                          [index](std::span<const T> gout, std::span<Buffer<T>* const> gin) {
                            (*gin[0])[static_cast<std::size_t>(index)] += gout[0];
                          });
}

template <typename T>
BasicTensor<T> reshape(const BasicTensor<T>& a, Shape shape) {
  if (!a.defined() || shape_numel(shape) != a.numel()) {
    shape_fail("reshape", "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> data(a.data().begin(), a.data().end());
  BasicTensor<T> result(std::move(shape), std::move(data));
  if (a.tape() == nullptr) return result;
  return a.tape()->record(std::move(result), {&a}, [](std::span<const T> gout, std::span<Buffer<T>* const> gin) {
    for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i];
  });
}

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& a) {
  require_rank("softmax", "input", a, 1);
  const auto xs = a.data();
  if (xs.empty()) shape_fail("softmax", "empty input");
  const double mx = *std::max_element(xs.begin(), xs.end());
  double z = 0;
  for (T v : xs) z += std::exp(v - mx);
  std::vector<T> out(xs.size());
  for (std::size_t i = 0; i < xs.size(); ++i) out[i] = static_cast<T>(std::exp(xs[i] - mx) / z);
  BasicTensor<T> result(a.shape(), std::move(out));
  if (a.tape() == nullptr) return result;
  auto y = result.detach();
  return a.tape()->record(std::move(result), {&a}, [y](std::span<const T> gout, std::span<Buffer<T>* const> gin) {
    T dot = 0;
    for (std::size_t i = 0; i < gout.size(); ++i) dot += gout[i] * y.data()[i];
    for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += y.data()[i] * (gout[i] - dot);
  });
}

template <typename T>
BasicTensor<T> straight_through_one_hot(const BasicTensor<T>& soft) {
  require_rank("straight_through_one_hot", "input", soft, 1);
  const auto xs = soft.data();
  if (xs.empty()) shape_fail("straight_through_one_hot", "empty input");
  const auto best = static_cast<std::size_t>(std::max_element(xs.begin(), xs.end()) - xs.begin());
  KinkProbe::note(best);
  std::vector<T> out(xs.size(), T(0));
  out[best] = T(1);
  BasicTensor<T> result(soft.shape(), std::move(out));
  if (soft.tape() == nullptr) return result;
  return soft.tape()->record(std::move(result), {&soft},
                             [](std::span<const T> gout, std::span<Buffer<T>* const> gin) {
                               for (std::size_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i];
                             });
}

#define STYDESTY_INSTANTIATE_OPS(T)                                                                           \
  template BasicTensor<T> conv2d(const BasicTensor<T>&, const BasicTensor<T>&, int, int);                      \
  template BasicTensor<T> conv_transpose2d(const BasicTensor<T>&, const BasicTensor<T>&, int, int);            \
  template InstanceStats<T> instance_stats(const BasicTensor<T>&);                                             \
  template BasicTensor<T> normalize_affine(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&, \
                                           const BasicTensor<T>&, const BasicTensor<T>&);                      \
  template BasicTensor<T> pointwise(const BasicTensor<T>&, Pointwise);                                         \
  template BasicTensor<T> linear(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);         \
  template BasicTensor<T> pool(const BasicTensor<T>&, PoolKind, int, int);                                     \
  template BasicTensor<T> softmax_cross_entropy(const BasicTensor<T>&, std::span<const int>);                  \
  template BasicTensor<T> sq_l2(const BasicTensor<T>&, const BasicTensor<T>&);                                 \
  template BasicTensor<T> gaussian_nll(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);   \
  template BasicTensor<T> add(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
  template BasicTensor<T> sub(const BasicTensor<T>&, const BasicTensor<T>&);                                   \
  template BasicTensor<T> scale(const BasicTensor<T>&, double);                                                \
  template BasicTensor<T> add_channel_bias(const BasicTensor<T>&, const BasicTensor<T>&);                      \
  template BasicTensor<T> blend(const BasicTensor<T>&, const BasicTensor<T>&, const BasicTensor<T>&);          \
  template BasicTensor<T> sum(const BasicTensor<T>&);                                                          \
  template BasicTensor<T> batch_mean(const BasicTensor<T>&);                                                   \
  template BasicTensor<T> element(const BasicTensor<T>&, std::int64_t);                                        \
  template BasicTensor<T> reshape(const BasicTensor<T>&, Shape);                                               \
  template BasicTensor<T> softmax(const BasicTensor<T>&);                                                      \
  template BasicTensor<T> straight_through_one_hot(const BasicTensor<T>&);

STYDESTY_INSTANTIATE_OPS(float)
STYDESTY_INSTANTIATE_OPS(double)

#undef STYDESTY_INSTANTIATE_OPS

}  // namespace stydesty
