#pragma once

// Forward and backward implementations of every network building block.
// Convolutions go through one generic gather (im2col) + GEMM path; the
// transposed convolution reuses it per output parity phase. All parallel
// sections write disjoint outputs over a fixed chunk decomposition, so
// results do not depend on the thread count.

#include <array>
#include <cmath>
#include <memory>
#include <vector>

#include <Eigen/Core>

#include "dcnseg/nn/tape.hpp"
#include "dcnseg/rng.hpp"

namespace dcnseg::nn {

namespace detail {

constexpr std::int64_t kChunkRows = 4096;

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<RowMat>;
using MapCRM = Eigen::Map<const RowMat>;

inline void gemm_rm(const float* a, const float* b, float* c, std::int64_t m, std::int64_t k,
                    std::int64_t n, bool accumulate) {
  MapCRM A(a, m, k);
  MapCRM B(b, k, n);
  MapRM C(c, m, n);
  if (accumulate)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
}

struct Tap {
  Vec3i offset;  // source-space offset (x, y, z)
  int weight_index = 0;
};

/// Fills col (rows x taps*cin) for destination rows [row0, row0+rows).
/// Destination voxel (n, z, y, x) on the dest grid reads source voxel
/// (z*stride + off.z, y*stride + off.y, x*stride + off.x), zero outside.
inline void gather_rows(const Tensor& src, Vec3i dest_dims, int stride,
                        const std::vector<Tap>& taps, std::int64_t row0, std::int64_t rows,
                        float* col) {
  const int cin = src.shape.c;
  const std::int64_t k = std::int64_t(taps.size()) * cin;
  const std::int64_t per_sample = std::int64_t(dest_dims.z) * dest_dims.y * dest_dims.x;
  for (std::int64_t r = 0; r < rows; ++r) {
    const std::int64_t g = row0 + r;
    const int n = int(g / per_sample);
    std::int64_t rem = g % per_sample;
    const int z = int(rem / (std::int64_t(dest_dims.y) * dest_dims.x));
    rem %= std::int64_t(dest_dims.y) * dest_dims.x;
    const int y = int(rem / dest_dims.x);
    const int x = int(rem % dest_dims.x);
    float* out = col + r * k;
    for (size_t t = 0; t < taps.size(); ++t) {
      const Vec3i o = taps[t].offset;
      const int sz = z * stride + o.z, sy = y * stride + o.y, sx = x * stride + o.x;
      if (sz < 0 || sz >= src.shape.d || sy < 0 || sy >= src.shape.h || sx < 0 ||
          sx >= src.shape.w) {
        std::fill(out, out + cin, 0.f);
      } else {
        const std::int64_t voxel =
            ((std::int64_t(n) * src.shape.d + sz) * src.shape.h + sy) * src.shape.w + sx;
        const float* p = src.data() + voxel * cin;
        std::copy(p, p + cin, out);
      }
      out += cin;
    }
  }
}

inline std::vector<Tap> conv_taps(int dilation) {
  std::vector<Tap> taps;
  taps.reserve(27);
  int idx = 0;
  for (int kz = 0; kz < 3; ++kz)
    for (int ky = 0; ky < 3; ++ky)
      for (int kx = 0; kx < 3; ++kx, ++idx)
        taps.push_back({{(kx - 1) * dilation, (ky - 1) * dilation, (kz - 1) * dilation}, idx});
  return taps;
}

inline bool is_pointwise(const std::vector<Tap>& taps) {
  return taps.size() == 1 && taps[0].offset == Vec3i{0, 0, 0};
}

/// y(rows x cout) = gather(x) * w + bias over an arbitrary dest grid.
/// writer(r_global, row_ptr) stores each finished output row.
template <class Writer>
void gather_gemm(const Tensor& x, Vec3i dest_dims, int stride, const std::vector<Tap>& taps,
                 const float* w, const float* bias, int cout, Writer&& writer) {
  const int cin = x.shape.c;
  const std::int64_t k = std::int64_t(taps.size()) * cin;
  const std::int64_t m =
      std::int64_t(x.shape.n) * dest_dims.z * dest_dims.y * dest_dims.x;
  const std::int64_t nchunks = (m + kChunkRows - 1) / kChunkRows;
  const bool direct = is_pointwise(taps) && stride == 1;
  parallel_for(nchunks, [&](std::int64_t ci) {
    const std::int64_t row0 = ci * kChunkRows;
    const std::int64_t rows = std::min(kChunkRows, m - row0);
    std::vector<float> colbuf;
    const float* col;
    if (direct) {
      col = x.data() + row0 * cin;
    } else {
      colbuf.resize(size_t(rows * k));
      gather_rows(x, dest_dims, stride, taps, row0, rows, colbuf.data());
      col = colbuf.data();
    }
    std::vector<float> out(static_cast<size_t>(rows) * cout);
    gemm_rm(col, w, out.data(), rows, k, cout, false);
    if (bias)
      for (std::int64_t r = 0; r < rows; ++r)
        for (int c = 0; c < cout; ++c) out[size_t(r * cout + c)] += bias[c];
    for (std::int64_t r = 0; r < rows; ++r) writer(row0 + r, out.data() + r * cout);
  });
}

/// dW(k x cout) += gather(x)^T * dy with deterministic chunk-ordered reduction.
inline void accumulate_weight_grad(const Tensor& x, Vec3i dest_dims, int stride,
                                   const std::vector<Tap>& taps, const float* dy_rows,
                                   std::int64_t m, int cout, float* dw) {
  const int cin = x.shape.c;
  const std::int64_t k = std::int64_t(taps.size()) * cin;
  const std::int64_t nchunks = (m + kChunkRows - 1) / kChunkRows;
  const bool direct = is_pointwise(taps) && stride == 1;
  std::vector<std::vector<float>> partial(static_cast<size_t>(nchunks));
  parallel_for(nchunks, [&](std::int64_t ci) {
    const std::int64_t row0 = ci * kChunkRows;
    const std::int64_t rows = std::min(kChunkRows, m - row0);
    std::vector<float> colbuf;
    const float* col;
    if (direct) {
      col = x.data() + row0 * cin;
    } else {
      colbuf.resize(size_t(rows * k));
      gather_rows(x, dest_dims, stride, taps, row0, rows, colbuf.data());
      col = colbuf.data();
    }
    partial[size_t(ci)].assign(size_t(k * cout), 0.f);
    // dW_chunk = col^T (k x rows) * dy_chunk (rows x cout)
    MapCRM A(col, rows, k);
    MapCRM Dy(dy_rows + row0 * cout, rows, cout);
    MapRM P(partial[size_t(ci)].data(), k, cout);
    P.noalias() = A.transpose() * Dy;
  });
  for (const auto& p : partial)
    for (std::int64_t i = 0; i < k * cout; ++i) dw[i] += p[size_t(i)];
}

inline void accumulate_bias_grad(const float* dy_rows, std::int64_t m, int cout, float* db) {
  for (std::int64_t r = 0; r < m; ++r)
    for (int c = 0; c < cout; ++c) db[c] += dy_rows[r * cout + c];
}

template <class Fn>
void parallel_elements(std::int64_t n, Fn&& fn) {
  constexpr std::int64_t kBlock = 1 << 16;
  const std::int64_t nblocks = (n + kBlock - 1) / kBlock;
  parallel_for(nblocks, [&](std::int64_t b) {
    const std::int64_t lo = b * kBlock, hi = std::min(n, lo + kBlock);
    for (std::int64_t i = lo; i < hi; ++i) fn(i);
  });
}

}  // namespace detail

/// 3x3x3 convolution with the given dilation and "same" zero padding.
/// Weight layout: (tap, cin, cout) flattened; bias length cout.
inline Node* conv3d(Tape& tape, Node* x, Node* w, Node* b, int dilation) {
  const int cin = x->value.shape.c;
  const int cout = int(w->value.shape.c);
  const auto taps = detail::conv_taps(dilation);
  if (w->value.shape.count() != std::int64_t(27) * cin * cout)
    throw std::logic_error("conv3d: weight shape does not match input channels");
  const Shape5 xs = x->value.shape;
  Tensor out({xs.n, xs.d, xs.h, xs.w, cout});
  const Vec3i dims = {xs.w, xs.h, xs.d};
  detail::gather_gemm(x->value, dims, 1, taps, w->value.data(), b ? b->value.data() : nullptr,
                      cout, [&](std::int64_t r, const float* row) {
                        std::copy(row, row + cout, out.data() + r * cout);
                      });
  Node* y = tape.make(std::move(out), x->needs_grad || w->needs_grad);
  if (y->needs_grad) {
    y->backward = [x, w, b, y, taps, dims, cin, cout]() {
      const std::int64_t m = y->value.shape.voxels();
      const float* dy = y->grad.data();
      if (x->needs_grad) {
        // dX = conv(dY, W~): flipped taps, swapped channel roles.
        std::vector<float> wt(static_cast<size_t>(27) * cout * cin);
        const float* wv = w->value.data();
        for (int t = 0; t < 27; ++t)
          for (int ci = 0; ci < cin; ++ci)
            for (int co = 0; co < cout; ++co)
              wt[size_t((t * cout + co) * cin + ci)] =
                  wv[size_t(((26 - t) * cin + ci) * cout + co)];
        float* dx = x->grad_data();
        detail::gather_gemm(y->grad, dims, 1, taps, wt.data(), nullptr, cin,
                            [&](std::int64_t r, const float* row) {
                              float* dst = dx + r * cin;
                              for (int c = 0; c < cin; ++c) dst[c] += row[c];
                            });
      }
      if (w->needs_grad)
        detail::accumulate_weight_grad(x->value, dims, 1, taps, dy, m, cout, w->grad_data());
      if (b && b->needs_grad) detail::accumulate_bias_grad(dy, m, cout, b->grad_data());
    };
  }
  return y;
}

/// 1x1x1 (pointwise) convolution; weight layout (cin, cout).
inline Node* conv1x1(Tape& tape, Node* x, Node* w, Node* b) {
  const int cin = x->value.shape.c;
  const int cout = int(w->value.shape.c);
  if (w->value.shape.count() != std::int64_t(cin) * cout)
    throw std::logic_error("conv1x1: weight shape does not match input channels");
  const Shape5 xs = x->value.shape;
  Tensor out({xs.n, xs.d, xs.h, xs.w, cout});
  const Vec3i dims = {xs.w, xs.h, xs.d};
  const std::vector<detail::Tap> taps = {{{0, 0, 0}, 0}};
  detail::gather_gemm(x->value, dims, 1, taps, w->value.data(), b ? b->value.data() : nullptr,
                      cout, [&](std::int64_t r, const float* row) {
                        std::copy(row, row + cout, out.data() + r * cout);
                      });
  Node* y = tape.make(std::move(out), x->needs_grad || w->needs_grad);
  if (y->needs_grad) {
    y->backward = [x, w, b, y, dims, cin, cout]() {
      const std::int64_t m = y->value.shape.voxels();
      const float* dy = y->grad.data();
      const std::vector<detail::Tap> taps0 = {{{0, 0, 0}, 0}};
      if (x->needs_grad) {
        std::vector<float> wt(static_cast<size_t>(cout) * cin);
        for (int ci = 0; ci < cin; ++ci)
          for (int co = 0; co < cout; ++co)
            wt[size_t(co * cin + ci)] = w->value.v[size_t(ci * cout + co)];
        float* dx = x->grad_data();
        detail::gather_gemm(y->grad, dims, 1, taps0, wt.data(), nullptr, cin,
                            [&](std::int64_t r, const float* row) {
                              float* dst = dx + r * cin;
                              for (int c = 0; c < cin; ++c) dst[c] += row[c];
                            });
      }
      if (w->needs_grad)
        detail::accumulate_weight_grad(x->value, dims, 1, taps0, dy, m, cout, w->grad_data());
      if (b && b->needs_grad) detail::accumulate_bias_grad(dy, m, cout, b->grad_data());
    };
  }
  return y;
}

namespace detail {

struct PhaseTaps {
  std::vector<Tap> taps;      // source offsets into the input
  std::array<int, 3> parity;  // output parity (z, y, x)
};

/// Output-parity decomposition of the 3x3x3, stride-2 transposed convolution
/// (padding 1, output padding 1): out = 2*in, out[2i+p] collects the kernel
/// taps k with k == p+1 (mod 2) reading in[i + (p-k+1)/2].
inline std::vector<PhaseTaps> tconv_phases() {
  std::vector<PhaseTaps> phases;
  for (int pz = 0; pz < 2; ++pz)
    for (int py = 0; py < 2; ++py)
      for (int px = 0; px < 2; ++px) {
        PhaseTaps ph;
        ph.parity = {pz, py, px};
        auto axis = [](int p) {
          std::vector<std::pair<int, int>> v;  // (k, delta)
          for (int k = 0; k < 3; ++k)
            if ((p - k + 1) % 2 == 0) v.push_back({k, (p - k + 1) / 2});
          return v;
        };
        for (auto [kz, dz] : axis(pz))
          for (auto [ky, dy] : axis(py))
            for (auto [kx, dx] : axis(px))
              ph.taps.push_back({{dx, dy, dz}, (kz * 3 + ky) * 3 + kx});
        phases.push_back(std::move(ph));
      }
  return phases;
}

}  // namespace detail

/// Transposed 3x3x3 convolution, stride 2, exact x2 upsampling.
/// Weight layout (27 taps, cin, cout), bias length cout.
inline Node* conv_transpose3d(Tape& tape, Node* x, Node* w, Node* b) {
  const int cin = x->value.shape.c;
  const int cout = int(w->value.shape.c);
  if (w->value.shape.count() != std::int64_t(27) * cin * cout)
    throw std::logic_error("conv_transpose3d: weight shape does not match input channels");
  const Shape5 xs = x->value.shape;
  const Shape5 os = {xs.n, xs.d * 2, xs.h * 2, xs.w * 2, cout};
  Tensor out(os);
  const Vec3i in_dims = {xs.w, xs.h, xs.d};
  static const auto phases = detail::tconv_phases();
  const float* wv = w->value.data();
  for (const auto& ph : phases) {
    // Per-phase weight submatrix (taps*cin x cout).
    std::vector<float> wp(ph.taps.size() * size_t(cin) * cout);
    for (size_t t = 0; t < ph.taps.size(); ++t)
      std::copy(wv + std::int64_t(ph.taps[t].weight_index) * cin * cout,
                wv + std::int64_t(ph.taps[t].weight_index + 1) * cin * cout,
                wp.data() + t * size_t(cin) * cout);
    detail::gather_gemm(
        x->value, in_dims, 1, ph.taps, wp.data(), b ? b->value.data() : nullptr, cout,
        [&](std::int64_t r, const float* row) {
          const std::int64_t per = std::int64_t(xs.d) * xs.h * xs.w;
          const int n = int(r / per);
          std::int64_t rem = r % per;
          const int z = int(rem / (std::int64_t(xs.h) * xs.w));
          rem %= std::int64_t(xs.h) * xs.w;
          const int y = int(rem / xs.w), xx = int(rem % xs.w);
          float* dst = out.data() +
                       (((std::int64_t(n) * os.d + 2 * z + ph.parity[0]) * os.h + 2 * y +
                         ph.parity[1]) *
                            os.w +
                        2 * xx + ph.parity[2]) *
                           cout;
          std::copy(row, row + cout, dst);
        });
  }
  Node* y = tape.make(std::move(out), x->needs_grad || w->needs_grad);
  if (y->needs_grad) {
    y->backward = [x, w, b, y, in_dims, xs, cin, cout]() {
      const float* dy = y->grad.data();
      if (x->needs_grad) {
        // dIn[i] = sum_k W[k] . dOut[2i + k - 1]: stride-2 gather on dY.
        std::vector<detail::Tap> taps;
        for (int kz = 0; kz < 3; ++kz)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx)
              taps.push_back({{kx - 1, ky - 1, kz - 1}, (kz * 3 + ky) * 3 + kx});
        std::vector<float> wt(static_cast<size_t>(27) * cout * cin);
        const float* wv = w->value.data();
        for (int t = 0; t < 27; ++t)
          for (int ci = 0; ci < cin; ++ci)
            for (int co = 0; co < cout; ++co)
              wt[size_t((t * cout + co) * cin + ci)] = wv[size_t((t * cin + ci) * cout + co)];
        float* dx = x->grad_data();
        detail::gather_gemm(y->grad, in_dims, 2, taps, wt.data(), nullptr, cin,
                            [&](std::int64_t r, const float* row) {
                              float* dst = dx + r * cin;
                              for (int c = 0; c < cin; ++c) dst[c] += row[c];
                            });
      }
      if (w->needs_grad) {
        static const auto phases = detail::tconv_phases();
        const Shape5 os = y->value.shape;
        const std::int64_t m = xs.voxels();
        for (const auto& ph : phases) {
          // Gather the phase rows of dY, then accumulate into the phase taps.
          std::vector<float> dyp(static_cast<size_t>(m) * cout);
          detail::parallel_elements(m, [&](std::int64_t r) {
            const std::int64_t per = std::int64_t(xs.d) * xs.h * xs.w;
            const int n = int(r / per);
            std::int64_t rem = r % per;
            const int z = int(rem / (std::int64_t(xs.h) * xs.w));
            rem %= std::int64_t(xs.h) * xs.w;
            const int yy = int(rem / xs.w), xx = int(rem % xs.w);
            const float* src = dy + (((std::int64_t(n) * os.d + 2 * z + ph.parity[0]) * os.h +
                                      2 * yy + ph.parity[1]) *
                                         os.w +
                                     2 * xx + ph.parity[2]) *
                                        cout;
            std::copy(src, src + cout, dyp.data() + r * cout);
          });
          std::vector<float> dwp(ph.taps.size() * size_t(cin) * cout, 0.f);
          detail::accumulate_weight_grad(x->value, in_dims, 1, ph.taps, dyp.data(), m, cout,
                                         dwp.data());
          float* dw = w->grad_data();
          for (size_t t = 0; t < ph.taps.size(); ++t) {
            const float* src = dwp.data() + t * size_t(cin) * cout;
            float* dst = dw + std::int64_t(ph.taps[t].weight_index) * cin * cout;
            for (std::int64_t i = 0; i < std::int64_t(cin) * cout; ++i) dst[i] += src[i];
          }
        }
      }
      if (b && b->needs_grad)
        detail::accumulate_bias_grad(dy, y->value.shape.voxels(), cout, b->grad_data());
    };
  }
  return y;
}

/// Non-overlapping max pooling with cubic window k.
inline Node* max_pool(Tape& tape, Node* x, int k) {
  const Shape5 xs = x->value.shape;
  if (xs.d % k || xs.h % k || xs.w % k)
    throw std::invalid_argument("max_pool: spatial dims " + to_string(xs) +
                                " not divisible by " + std::to_string(k));
  const Shape5 os = {xs.n, xs.d / k, xs.h / k, xs.w / k, xs.c};
  Tensor out(os);
  auto argmax = std::make_shared<std::vector<std::int64_t>>(size_t(os.count()));
  detail::parallel_elements(os.voxels(), [&](std::int64_t ov) {
    const std::int64_t per = std::int64_t(os.d) * os.h * os.w;
    const int n = int(ov / per);
    std::int64_t rem = ov % per;
    const int z = int(rem / (std::int64_t(os.h) * os.w));
    rem %= std::int64_t(os.h) * os.w;
    const int y = int(rem / os.w), xx = int(rem % os.w);
    for (int c = 0; c < os.c; ++c) {
      float best = -std::numeric_limits<float>::infinity();
      std::int64_t best_i = -1;
      for (int dz = 0; dz < k; ++dz)
        for (int dy = 0; dy < k; ++dy)
          for (int dx = 0; dx < k; ++dx) {
            const std::int64_t iv =
                (((std::int64_t(n) * xs.d + z * k + dz) * xs.h + y * k + dy) * xs.w + xx * k +
                 dx) *
                    xs.c +
                c;
            if (x->value.v[size_t(iv)] > best) {
              best = x->value.v[size_t(iv)];
              best_i = iv;
            }
          }
      out.v[size_t(ov * os.c + c)] = best;
      (*argmax)[size_t(ov * os.c + c)] = best_i;
    }
  });
  Node* y = tape.make(std::move(out), x->needs_grad);
  if (y->needs_grad) {
    y->backward = [x, y, argmax]() {
      float* dx = x->grad_data();
      const float* dy = y->grad.data();
      for (std::int64_t i = 0; i < y->value.shape.count(); ++i)
        dx[(*argmax)[size_t(i)]] += dy[i];
    };
  }
  return y;
}

/// Nearest-neighbour x2 upsampling.
inline Node* upsample_nearest2(Tape& tape, Node* x) {
  const Shape5 xs = x->value.shape;
  const Shape5 os = {xs.n, xs.d * 2, xs.h * 2, xs.w * 2, xs.c};
  Tensor out(os);
  detail::parallel_elements(os.voxels(), [&](std::int64_t ov) {
    const std::int64_t per = std::int64_t(os.d) * os.h * os.w;
    const int n = int(ov / per);
    std::int64_t rem = ov % per;
    const int z = int(rem / (std::int64_t(os.h) * os.w));
    rem %= std::int64_t(os.h) * os.w;
    const int y = int(rem / os.w), xx = int(rem % os.w);
    const std::int64_t iv =
        ((std::int64_t(n) * xs.d + z / 2) * xs.h + y / 2) * xs.w + xx / 2;
    std::copy(x->value.data() + iv * xs.c, x->value.data() + (iv + 1) * xs.c,
              out.data() + ov * xs.c);
  });
  Node* y = tape.make(std::move(out), x->needs_grad);
  if (y->needs_grad) {
    y->backward = [x, y]() {
      const Shape5 xs2 = x->value.shape;
      const Shape5 os2 = y->value.shape;
      float* dx = x->grad_data();
      const float* dy = y->grad.data();
      detail::parallel_elements(xs2.voxels(), [&](std::int64_t iv) {
        const std::int64_t per = std::int64_t(xs2.d) * xs2.h * xs2.w;
        const int n = int(iv / per);
        std::int64_t rem = iv % per;
        const int z = int(rem / (std::int64_t(xs2.h) * xs2.w));
        rem %= std::int64_t(xs2.h) * xs2.w;
        const int y2 = int(rem / xs2.w), xx = int(rem % xs2.w);
        for (int dz = 0; dz < 2; ++dz)
          for (int dyy = 0; dyy < 2; ++dyy)
            for (int dxx = 0; dxx < 2; ++dxx) {
              const std::int64_t ov =
                  ((std::int64_t(n) * os2.d + 2 * z + dz) * os2.h + 2 * y2 + dyy) * os2.w +
                  2 * xx + dxx;
              for (int c = 0; c < xs2.c; ++c)
                dx[iv * xs2.c + c] += dy[ov * xs2.c + c];
            }
      });
    };
  }
  return y;
}

/// Batch normalization over (n, d, h, w) per channel. Training mode uses
/// batch statistics and updates the running buffers in place.
inline Node* batch_norm(Tape& tape, Node* x, Node* gamma, Node* beta, Parameter& running_mean,
                        Parameter& running_var, bool training, double momentum = 0.2,
                        double eps = 1e-5) {
  const Shape5 xs = x->value.shape;
  const int C = xs.c;
  const std::int64_t rows = xs.voxels();
  auto mean = std::make_shared<std::vector<float>>(size_t(C));
  auto inv_std = std::make_shared<std::vector<float>>(size_t(C));
  if (training) {
    std::vector<double> sum(static_cast<size_t>(C), 0.0);
    std::vector<double> sumsq(static_cast<size_t>(C), 0.0);
    const float* p = x->value.data();
    for (std::int64_t r = 0; r < rows; ++r, p += C)
      for (int c = 0; c < C; ++c) {
        sum[size_t(c)] += p[c];
        sumsq[size_t(c)] += double(p[c]) * p[c];
      }
    for (int c = 0; c < C; ++c) {
      const double mu = sum[size_t(c)] / double(rows);
      const double var = std::max(0.0, sumsq[size_t(c)] / double(rows) - mu * mu);
      (*mean)[size_t(c)] = float(mu);
      (*inv_std)[size_t(c)] = float(1.0 / std::sqrt(var + eps));
      running_mean.value.v[size_t(c)] =
          float((1.0 - momentum) * running_mean.value.v[size_t(c)] + momentum * mu);
      running_var.value.v[size_t(c)] =
          float((1.0 - momentum) * running_var.value.v[size_t(c)] + momentum * var);
    }
  } else {
    for (int c = 0; c < C; ++c) {
      (*mean)[size_t(c)] = running_mean.value.v[size_t(c)];
      (*inv_std)[size_t(c)] =
          float(1.0 / std::sqrt(double(running_var.value.v[size_t(c)]) + eps));
    }
  }
  Tensor out(xs);
  detail::parallel_elements(rows, [&](std::int64_t r) {
    const float* src = x->value.data() + r * C;
    float* dst = out.data() + r * C;
    for (int c = 0; c < C; ++c)
      dst[c] = gamma->value.v[size_t(c)] * (src[c] - (*mean)[size_t(c)]) *
                   (*inv_std)[size_t(c)] +
               beta->value.v[size_t(c)];
  });
  Node* y = tape.make(std::move(out),
                      x->needs_grad || gamma->needs_grad || beta->needs_grad);
  if (y->needs_grad) {
    y->backward = [x, gamma, beta, y, mean, inv_std, training]() {
      const Shape5 s = x->value.shape;
      const int C2 = s.c;
      const std::int64_t n = s.voxels();
      const float* dy = y->grad.data();
      const float* xv = x->value.data();
      std::vector<double> dsum(static_cast<size_t>(C2), 0.0);
      std::vector<double> dxhat_sum(static_cast<size_t>(C2), 0.0);
      for (std::int64_t r = 0; r < n; ++r)
        for (int c = 0; c < C2; ++c) {
          const float xhat =
              (xv[r * C2 + c] - (*mean)[size_t(c)]) * (*inv_std)[size_t(c)];
          dsum[size_t(c)] += dy[r * C2 + c];
          dxhat_sum[size_t(c)] += double(dy[r * C2 + c]) * xhat;
        }
      if (beta->needs_grad) {
        float* db = beta->grad_data();
        for (int c = 0; c < C2; ++c) db[c] += float(dsum[size_t(c)]);
      }
      if (gamma->needs_grad) {
        float* dg = gamma->grad_data();
        for (int c = 0; c < C2; ++c) dg[c] += float(dxhat_sum[size_t(c)]);
      }
      if (x->needs_grad) {
        float* dx = x->grad_data();
        if (training) {
          detail::parallel_elements(n, [&](std::int64_t r) {
            for (int c = 0; c < C2; ++c) {
              const float xhat =
                  (xv[r * C2 + c] - (*mean)[size_t(c)]) * (*inv_std)[size_t(c)];
              const double g = gamma->value.v[size_t(c)] * (*inv_std)[size_t(c)];
              dx[r * C2 + c] += float(
                  g * (double(dy[r * C2 + c]) - dsum[size_t(c)] / double(n) -
                       double(xhat) * dxhat_sum[size_t(c)] / double(n)));
            }
          });
        } else {
          detail::parallel_elements(n, [&](std::int64_t r) {
            for (int c = 0; c < C2; ++c)
              dx[r * C2 + c] += dy[r * C2 + c] * gamma->value.v[size_t(c)] *
                                (*inv_std)[size_t(c)];
          });
        }
      }
    };
  }
  return y;
}

namespace detail {

template <class FwdFn, class BwdFn>
Node* elementwise(Tape& tape, Node* x, FwdFn fwd, BwdFn bwd) {
  Tensor out(x->value.shape);
  const std::int64_t n = out.shape.count();
  parallel_elements(n, [&](std::int64_t i) { out.v[size_t(i)] = fwd(x->value.v[size_t(i)]); });
  Node* y = tape.make(std::move(out), x->needs_grad);
  if (y->needs_grad) {
    y->backward = [x, y, bwd]() {
      float* dx = x->grad_data();
      const std::int64_t n2 = y->value.shape.count();
      parallel_elements(n2, [&](std::int64_t i) {
        dx[i] += y->grad.v[size_t(i)] * bwd(x->value.v[size_t(i)], y->value.v[size_t(i)]);
      });
    };
  }
  return y;
}

}  // namespace detail

inline Node* relu(Tape& tape, Node* x) {
  return detail::elementwise(
      tape, x, [](float v) { return v > 0.f ? v : 0.f; },
      [](float v, float) { return v > 0.f ? 1.f : 0.f; });
}

inline Node* elu(Tape& tape, Node* x) {
  return detail::elementwise(
      tape, x, [](float v) { return v > 0.f ? v : std::expm1(v); },
      [](float v, float yv) { return v > 0.f ? 1.f : yv + 1.f; });
}

inline Node* sigmoid(Tape& tape, Node* x) {
  return detail::elementwise(
      tape, x, [](float v) { return 1.f / (1.f + std::exp(-v)); },
      [](float, float yv) { return yv * (1.f - yv); });
}

/// Per-voxel softmax over the channel dimension.
inline Node* softmax_channels(Tape& tape, Node* x) {
  const int C = x->value.shape.c;
  Tensor out(x->value.shape);
  detail::parallel_elements(x->value.shape.voxels(), [&](std::int64_t r) {
    const float* src = x->value.data() + r * C;
    float* dst = out.data() + r * C;
    float mx = src[0];
    for (int c = 1; c < C; ++c) mx = std::max(mx, src[c]);
    float sum = 0.f;
    for (int c = 0; c < C; ++c) {
      dst[c] = std::exp(src[c] - mx);
      sum += dst[c];
    }
    for (int c = 0; c < C; ++c) dst[c] /= sum;
  });
  Node* y = tape.make(std::move(out), x->needs_grad);
  if (y->needs_grad) {
    y->backward = [x, y, C]() {
      float* dx = x->grad_data();
      const float* p = y->value.data();
      const float* dp = y->grad.data();
      detail::parallel_elements(y->value.shape.voxels(), [&](std::int64_t r) {
        float dot = 0.f;
        for (int c = 0; c < C; ++c) dot += p[r * C + c] * dp[r * C + c];
        for (int c = 0; c < C; ++c)
          dx[r * C + c] += p[r * C + c] * (dp[r * C + c] - dot);
      });
    };
  }
  return y;
}

/// Channel concatenation.
inline Node* concat_channels(Tape& tape, const std::vector<Node*>& xs) {
  if (xs.empty()) throw std::logic_error("concat_channels: empty input list");
  const Shape5 s0 = xs[0]->value.shape;
  int ctot = 0;
  bool needs = false;
  for (Node* x : xs) {
    const Shape5 s = x->value.shape;
    if (s.n != s0.n || s.d != s0.d || s.h != s0.h || s.w != s0.w)
      throw std::logic_error("concat_channels: spatial shape mismatch");
    ctot += s.c;
    needs = needs || x->needs_grad;
  }
  Tensor out({s0.n, s0.d, s0.h, s0.w, ctot});
  const std::int64_t rows = s0.voxels();
  detail::parallel_elements(rows, [&](std::int64_t r) {
    float* dst = out.data() + r * ctot;
    for (Node* x : xs) {
      const int c = x->value.shape.c;
      std::copy(x->value.data() + r * c, x->value.data() + (r + 1) * c, dst);
      dst += c;
    }
  });
  Node* y = tape.make(std::move(out), needs);
  if (y->needs_grad) {
    auto parts = xs;
    y->backward = [parts, y, ctot]() {
      const std::int64_t rows2 = y->value.shape.voxels();
      int off = 0;
      for (Node* x : parts) {
        const int c = x->value.shape.c;
        if (x->needs_grad) {
          float* dx = x->grad_data();
          const float* dy = y->grad.data();
          const int o = off;
          detail::parallel_elements(rows2, [&, o, c](std::int64_t r) {
            for (int k = 0; k < c; ++k) dx[r * c + k] += dy[r * ctot + o + k];
          });
        }
        off += c;
      }
    };
  }
  return y;
}

inline Node* add(Tape& tape, Node* a, Node* b) {
  if (a->value.shape != b->value.shape) throw std::logic_error("add: shape mismatch");
  Tensor out(a->value.shape);
  detail::parallel_elements(out.shape.count(), [&](std::int64_t i) {
    out.v[size_t(i)] = a->value.v[size_t(i)] + b->value.v[size_t(i)];
  });
  Node* y = tape.make(std::move(out), a->needs_grad || b->needs_grad);
  if (y->needs_grad) {
    y->backward = [a, b, y]() {
      if (a->needs_grad) accumulate_grad(a, y->grad);
      if (b->needs_grad) accumulate_grad(b, y->grad);
    };
  }
  return y;
}

/// Per-voxel mean over channels -> single channel.
inline Node* channel_mean(Tape& tape, Node* x) {
  const Shape5 xs = x->value.shape;
  Tensor out({xs.n, xs.d, xs.h, xs.w, 1});
  detail::parallel_elements(xs.voxels(), [&](std::int64_t r) {
    const float* src = x->value.data() + r * xs.c;
    float s = 0.f;
    for (int c = 0; c < xs.c; ++c) s += src[c];
    out.v[size_t(r)] = s / float(xs.c);
  });
  Node* y = tape.make(std::move(out), x->needs_grad);
  if (y->needs_grad) {
    y->backward = [x, y]() {
      const int C = x->value.shape.c;
      float* dx = x->grad_data();
      const float* dy = y->grad.data();
      detail::parallel_elements(x->value.shape.voxels(), [&](std::int64_t r) {
        for (int c = 0; c < C; ++c) dx[r * C + c] += dy[r] / float(C);
      });
    };
  }
  return y;
}

/// Per-voxel max over channels -> single channel.
inline Node* channel_max(Tape& tape, Node* x) {
  const Shape5 xs = x->value.shape;
  Tensor out({xs.n, xs.d, xs.h, xs.w, 1});
  auto arg = std::make_shared<std::vector<std::int32_t>>(size_t(xs.voxels()));
  detail::parallel_elements(xs.voxels(), [&](std::int64_t r) {
    const float* src = x->value.data() + r * xs.c;
    int best = 0;
    for (int c = 1; c < xs.c; ++c)
      if (src[c] > src[best]) best = c;
    out.v[size_t(r)] = src[best];
    (*arg)[size_t(r)] = best;
  });
  Node* y = tape.make(std::move(out), x->needs_grad);
  if (y->needs_grad) {
    y->backward = [x, y, arg]() {
      const int C = x->value.shape.c;
      float* dx = x->grad_data();
      const float* dy = y->grad.data();
      detail::parallel_elements(x->value.shape.voxels(), [&](std::int64_t r) {
        dx[r * C + (*arg)[size_t(r)]] += dy[r];
      });
    };
  }
  return y;
}

/// features (.., C) scaled by a single-channel score map.
inline Node* broadcast_mul(Tape& tape, Node* feat, Node* score) {
  const Shape5 fs = feat->value.shape;
  if (score->value.shape.c != 1 || score->value.shape.voxels() != fs.voxels())
    throw std::logic_error("broadcast_mul: score map shape mismatch");
  Tensor out(fs);
  detail::parallel_elements(fs.voxels(), [&](std::int64_t r) {
    const float s = score->value.v[size_t(r)];
    const float* src = feat->value.data() + r * fs.c;
    float* dst = out.data() + r * fs.c;
    for (int c = 0; c < fs.c; ++c) dst[c] = src[c] * s;
  });
  Node* y = tape.make(std::move(out), feat->needs_grad || score->needs_grad);
  if (y->needs_grad) {
    y->backward = [feat, score, y]() {
      const int C = feat->value.shape.c;
      const std::int64_t rows = feat->value.shape.voxels();
      const float* dy = y->grad.data();
      if (feat->needs_grad) {
        float* df = feat->grad_data();
        detail::parallel_elements(rows, [&](std::int64_t r) {
          const float s = score->value.v[size_t(r)];
          for (int c = 0; c < C; ++c) df[r * C + c] += dy[r * C + c] * s;
        });
      }
      if (score->needs_grad) {
        float* ds = score->grad_data();
        detail::parallel_elements(rows, [&](std::int64_t r) {
          float acc = 0.f;
          for (int c = 0; c < C; ++c) acc += dy[r * C + c] * feat->value.v[size_t(r * C + c)];
          ds[r] += acc;
        });
      }
    };
  }
  return y;
}

/// Inverted dropout; active only during training with rate > 0.
inline Node* dropout(Tape& tape, Node* x, double rate, Rng& rng) {
  if (rate <= 0.0) return x;
  const float keep = float(1.0 - rate);
  auto mask = std::make_shared<std::vector<float>>(size_t(x->value.shape.count()));
  for (auto& m : *mask) m = rng.uniform() < rate ? 0.f : 1.f / keep;
  Tensor out(x->value.shape);
  for (std::int64_t i = 0; i < out.shape.count(); ++i)
    out.v[size_t(i)] = x->value.v[size_t(i)] * (*mask)[size_t(i)];
  Node* y = tape.make(std::move(out), x->needs_grad);
  if (y->needs_grad) {
    y->backward = [x, y, mask]() {
      float* dx = x->grad_data();
      for (std::int64_t i = 0; i < y->value.shape.count(); ++i)
        dx[i] += y->grad.v[size_t(i)] * (*mask)[size_t(i)];
    };
  }
  return y;
}

}  // namespace dcnseg::nn
