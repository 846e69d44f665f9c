#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "dcnseg/volume.hpp"

namespace dcnseg {

/// Weights and constants for the hybrid training objective. The defaults are
/// the tuned operating point: Tversky alpha/beta 0.3/0.7, equal Tversky/focal
/// mix, term weights 1.0/1.0/0.5/0.1.
struct LossConfig {
  double alpha = 0.3;
  double beta = 0.7;
  double pi_t = 0.5;
  double pi_f = 0.5;
  double lambda_d = 1.0;
  double lambda_i = 1.0;
  double lambda_a = 0.5;
  double lambda_o = 0.1;
  double epsilon = 1e-7;
  std::array<double, 2> class_weights_d = {0.5, 0.5};
  std::array<double, 2> class_weights_i = {0.5, 0.5};

  void validate() const {
    if (alpha <= 0 || beta <= 0) throw ConfigError("loss: alpha and beta must be > 0");
    if (epsilon <= 0 || epsilon >= 1e-3) throw ConfigError("loss: epsilon must be in (0, 1e-3)");
    for (double w : {class_weights_d[0], class_weights_d[1], class_weights_i[0],
                     class_weights_i[1]})
      if (w <= 0) throw ConfigError("loss: class weights must be > 0");
  }
};

// All loss functions take channels-last arrays shaped (n, m, 2): n samples,
// m voxels per sample, 2 classes per head. Gradients, when requested, are
// accumulated (+=) into buffers of the same shape.

/// One-hot encoding of a head-local label array with values 1 (background)
/// and 2 (foreground).
template <class Real>
std::vector<Real> one_hot_encode(std::span<const std::uint8_t> labels) {
  std::vector<Real> g(labels.size() * 2, Real(0));
  for (size_t j = 0; j < labels.size(); ++j) {
    if (labels[j] != 1 && labels[j] != 2)
      throw std::invalid_argument("one_hot_encode: label " + std::to_string(int(labels[j])) +
                                  " out of range {1,2} at voxel " + std::to_string(j));
    g[j * 2 + (labels[j] - 1)] = Real(1);
  }
  return g;
}

enum class Head { kDentate = 1, kInterposed = 2 };

/// Per-class weights w_c = 1 - f_c from the pooled voxel fraction of the head
/// foreground across the given maps, clamped to [1e-3, 1].
inline std::array<double, 2> class_weights(const std::vector<const LabelMap*>& maps, Head head) {
  if (maps.empty()) throw std::invalid_argument("class_weights: empty label map list");
  std::int64_t fg = 0, total = 0;
  for (const auto* m : maps) {
    fg += m->count_label(std::uint8_t(int(head)));
    total += m->voxels();
  }
  const double f_fg = double(fg) / double(total);
  if (fg == 0)
    std::cerr << "warning: class absent from all label maps; weight clamped\n";
  auto clamp = [](double w) { return std::min(1.0, std::max(1e-3, w)); };
  return {clamp(1.0 - (1.0 - f_fg)), clamp(1.0 - f_fg)};
}

namespace detail {

template <class Real>
inline Real clip_prob(Real p, Real eps) {
  return std::min(Real(1) - eps, std::max(eps, p));
}

}  // namespace detail

/// Tversky loss per class: TL_c = 1 - mean_i of
/// sum_j p_c g_c / (sum_j p_c g_c + alpha sum_j p_cbar g_c + beta sum_j p_c g_cbar).
/// A sample whose raw sums are all zero for class c (class absent and the
/// prediction identically zero) contributes ratio 1, i.e. zero loss.
/// When grad != nullptr, d(sum_c grad_weights[c] * TL_c)/dp is accumulated.
template <class Real>
std::array<Real, 2> tversky_loss(std::span<const Real> p, std::span<const Real> g,
                                 std::int64_t n, std::int64_t m, Real alpha, Real beta,
                                 Real eps = Real(1e-7), Real* grad = nullptr,
                                 std::array<Real, 2> grad_weights = {Real(1), Real(1)}) {
  if (p.size() != size_t(n * m * 2) || g.size() != size_t(n * m * 2))
    throw std::invalid_argument("tversky_loss: shape mismatch");
  std::array<Real, 2> tl{};
  for (int c = 0; c < 2; ++c) {
    const int cb = 1 - c;
    Real ratio_sum = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      const Real* pi = p.data() + i * m * 2;
      const Real* gi = g.data() + i * m * 2;
      Real num = 0, fn = 0, fp = 0, raw = 0;
      for (std::int64_t j = 0; j < m; ++j) {
        const Real pc = detail::clip_prob(pi[j * 2 + c], eps);
        const Real pcb = detail::clip_prob(pi[j * 2 + cb], eps);
        num += pc * gi[j * 2 + c];
        fn += pcb * gi[j * 2 + c];
        fp += pc * gi[j * 2 + cb];
        raw += pi[j * 2 + c] * gi[j * 2 + c] + pi[j * 2 + cb] * gi[j * 2 + c] +
               pi[j * 2 + c] * gi[j * 2 + cb];
      }
      const Real denom = num + alpha * fn + beta * fp;
      if (raw == Real(0) || denom == Real(0)) {
        ratio_sum += Real(1);  // degenerate 0/0: absent class, empty prediction
        continue;
      }
      ratio_sum += num / denom;
      if (grad) {
        const Real gw = grad_weights[size_t(c)];
        if (gw != Real(0)) {
          const Real inv_d2 = Real(1) / (denom * denom);
          Real* gr = grad + i * m * 2;
          for (std::int64_t j = 0; j < m; ++j) {
            const Real gc = gi[j * 2 + c];
            const Real gcb = gi[j * 2 + cb];
            const Real pc_raw = pi[j * 2 + c];
            const Real pcb_raw = pi[j * 2 + cb];
            // through the clip: zero slope outside [eps, 1-eps]
            if (pc_raw > eps && pc_raw < Real(1) - eps) {
              const Real dr = (gc * (denom - num) - num * beta * gcb) * inv_d2;
              gr[j * 2 + c] += gw * (-dr / Real(n));
            }
            if (pcb_raw > eps && pcb_raw < Real(1) - eps) {
              const Real dr = -num * alpha * gc * inv_d2;
              gr[j * 2 + cb] += gw * (-dr / Real(n));
            }
          }
        }
      }
    }
    tl[size_t(c)] = Real(1) - ratio_sum / Real(n);
  }
  return tl;
}

/// Focal loss per class: FL_c = -(1/nm) sum_ij (g - p)^2 log(p).
template <class Real>
std::array<Real, 2> focal_loss(std::span<const Real> p, std::span<const Real> g, std::int64_t n,
                               std::int64_t m, Real eps = Real(1e-7), Real* grad = nullptr,
                               std::array<Real, 2> grad_weights = {Real(1), Real(1)}) {
  if (p.size() != size_t(n * m * 2) || g.size() != size_t(n * m * 2))
    throw std::invalid_argument("focal_loss: shape mismatch");
  std::array<Real, 2> fl{};
  const Real norm = Real(1) / (Real(n) * Real(m));
  for (std::int64_t k = 0; k < n * m; ++k) {
    for (int c = 0; c < 2; ++c) {
      const Real praw = p[size_t(k * 2 + c)];
      const Real pc = detail::clip_prob(praw, eps);
      const Real diff = g[size_t(k * 2 + c)] - pc;
      fl[size_t(c)] -= diff * diff * std::log(pc) * norm;
      if (grad && praw > eps && praw < Real(1) - eps) {
        grad[k * 2 + c] +=
            grad_weights[size_t(c)] * (-norm) * (-2 * diff * std::log(pc) + diff * diff / pc);
      }
    }
  }
  return fl;
}

/// Hybrid head loss: sum_c w_c (pi_t TL_c + pi_f FL_c).
template <class Real>
Real hybrid_loss(std::span<const Real> p, std::span<const Real> g, std::int64_t n,
                 std::int64_t m, std::array<Real, 2> w, Real pi_t, Real pi_f, Real alpha,
                 Real beta, Real eps = Real(1e-7), Real* grad = nullptr, Real grad_scale = Real(1)) {
  const std::array<Real, 2> wt = {grad_scale * w[0] * pi_t, grad_scale * w[1] * pi_t};
  const std::array<Real, 2> wf = {grad_scale * w[0] * pi_f, grad_scale * w[1] * pi_f};
  const auto tl = tversky_loss(p, g, n, m, alpha, beta, eps, grad, wt);
  const auto fl = focal_loss(p, g, n, m, eps, grad, wf);
  Real total = 0;
  for (int c = 0; c < 2; ++c)
    total += w[size_t(c)] * (pi_t * tl[size_t(c)] + pi_f * fl[size_t(c)]);
  return total;
}

/// Attention regularizer: categorical cross-entropy against the union
/// (background vs dentate-or-interposed) one-hot map.
template <class Real>
Real attention_loss(std::span<const Real> p_a, std::span<const Real> g_union, std::int64_t n,
                    std::int64_t m, Real eps = Real(1e-7), Real* grad = nullptr,
                    Real grad_scale = Real(1)) {
  if (p_a.size() != size_t(n * m * 2) || g_union.size() != size_t(n * m * 2))
    throw std::invalid_argument("attention_loss: shape mismatch");
  Real loss = 0;
  const Real norm = Real(1) / (Real(n) * Real(m));
  for (std::int64_t k = 0; k < n * m * 2; ++k) {
    const Real gk = g_union[size_t(k)];
    if (gk == Real(0)) continue;
    const Real praw = p_a[size_t(k)];
    const Real pc = detail::clip_prob(praw, eps);
    loss -= gk * std::log(pc) * norm;
    if (grad && praw > eps && praw < Real(1) - eps)
      grad[k] += grad_scale * (-norm) * gk / pc;
  }
  return loss;
}

/// Overlap penalty: mean over samples of the soft Dice between the two heads'
/// foreground probability maps. Both maps identically zero -> 0.
template <class Real>
Real overlap_loss(std::span<const Real> p_d, std::span<const Real> p_i, std::int64_t n,
                  std::int64_t m, Real* grad_d = nullptr, Real* grad_i = nullptr,
                  Real grad_scale = Real(1)) {
  if (p_d.size() != size_t(n * m * 2) || p_i.size() != size_t(n * m * 2))
    throw std::invalid_argument("overlap_loss: shape mismatch");
  Real total = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    const Real* a = p_d.data() + i * m * 2;
    const Real* b = p_i.data() + i * m * 2;
    Real prod = 0, sum = 0;
    for (std::int64_t j = 0; j < m; ++j) {
      prod += a[j * 2 + 1] * b[j * 2 + 1];
      sum += a[j * 2 + 1] + b[j * 2 + 1];
    }
    if (sum == Real(0)) continue;  // no foreground claimed anywhere: no overlap
    total += 2 * prod / sum;
    if (grad_d && grad_i) {
      const Real inv_s2 = Real(1) / (sum * sum);
      Real* gd = grad_d + i * m * 2;
      Real* gi = grad_i + i * m * 2;
      for (std::int64_t j = 0; j < m; ++j) {
        gd[j * 2 + 1] += grad_scale * (2 * b[j * 2 + 1] * sum - 2 * prod) * inv_s2 / Real(n);
        gi[j * 2 + 1] += grad_scale * (2 * a[j * 2 + 1] * sum - 2 * prod) * inv_s2 / Real(n);
      }
    }
  }
  return total / Real(n);
}

template <class Real>
struct LossBreakdown {
  Real l_d = 0, l_i = 0, l_a = 0, l_o = 0, total = 0;
};

/// Total objective: lambda_d L_D + lambda_i L_I + lambda_a L_A + lambda_o L_O.
/// Gradients with respect to the three probability arrays are accumulated
/// when the buffers are given.
template <class Real>
LossBreakdown<Real> total_loss(std::span<const Real> p_d, std::span<const Real> p_i,
                               std::span<const Real> p_a, std::span<const Real> g_d,
                               std::span<const Real> g_i, std::span<const Real> g_union,
                               std::int64_t n, std::int64_t m, const LossConfig& cfg,
                               Real* grad_d = nullptr, Real* grad_i = nullptr,
                               Real* grad_a = nullptr) {
  LossBreakdown<Real> out;
  const std::array<Real, 2> wd = {Real(cfg.class_weights_d[0]), Real(cfg.class_weights_d[1])};
  const std::array<Real, 2> wi = {Real(cfg.class_weights_i[0]), Real(cfg.class_weights_i[1])};
  const Real eps = Real(cfg.epsilon);
  out.l_d = hybrid_loss(p_d, g_d, n, m, wd, Real(cfg.pi_t), Real(cfg.pi_f), Real(cfg.alpha),
                        Real(cfg.beta), eps, grad_d, Real(cfg.lambda_d));
  out.l_i = hybrid_loss(p_i, g_i, n, m, wi, Real(cfg.pi_t), Real(cfg.pi_f), Real(cfg.alpha),
                        Real(cfg.beta), eps, grad_i, Real(cfg.lambda_i));
  out.l_a = attention_loss(p_a, g_union, n, m, eps, grad_a, Real(cfg.lambda_a));
  out.l_o = overlap_loss(p_d, p_i, n, m, grad_d, grad_i, Real(cfg.lambda_o));
  out.total = Real(cfg.lambda_d) * out.l_d + Real(cfg.lambda_i) * out.l_i +
              Real(cfg.lambda_a) * out.l_a + Real(cfg.lambda_o) * out.l_o;
  return out;
}

/// Per-voxel two-class softmax; shared by the gradient checks and tests.
template <class Real>
std::vector<Real> softmax2(std::span<const Real> logits) {
  std::vector<Real> p(logits.size());
  for (size_t k = 0; k + 1 < logits.size(); k += 2) {
    const Real mx = std::max(logits[k], logits[k + 1]);
    const Real e0 = std::exp(logits[k] - mx);
    const Real e1 = std::exp(logits[k + 1] - mx);
    p[k] = e0 / (e0 + e1);
    p[k + 1] = e1 / (e0 + e1);
  }
  return p;
}

/// Jacobian-transpose product of softmax2: dL/dz from dL/dp.
template <class Real>
std::vector<Real> softmax2_backward(std::span<const Real> p, std::span<const Real> dp) {
  std::vector<Real> dz(p.size());
  for (size_t k = 0; k + 1 < p.size(); k += 2) {
    const Real dot = p[k] * dp[k] + p[k + 1] * dp[k + 1];
    dz[k] = p[k] * (dp[k] - dot);
    dz[k + 1] = p[k + 1] * (dp[k + 1] - dot);
  }
  return dz;
}

}  // namespace dcnseg
