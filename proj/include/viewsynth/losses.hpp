#pragma once

// Descriptor distances, the contrastive matching loss and the view synthesis
// loss.

#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <vector>

#include "viewsynth/geometry.hpp"
#include "viewsynth/ops.hpp"

namespace viewsynth {

inline double positive_distance(std::span<const double> a, std::span<const double> b) {
  double ss = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) ss += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(ss);
}

/// Fiber of an h x w x f map at `cell`.
inline std::span<const double> fiber(const Tensor& map, Cell cell) {
  const std::size_t w = map.dim(1), f = map.dim(2);
  return map.values().subspan((static_cast<std::size_t>(cell.row) * w + cell.col) * f, f);
}

inline double positive_distance(const Tensor& d1, const Tensor& d2, Cell c1, Cell c2) {
  return positive_distance(fiber(d1, c1), fiber(d2, c2));
}

struct NegativeMatch {
  double distance = 0.0;
  Cell cell;
};

/// Closest fiber of `others` to `anchor` among cells farther than `tau`
/// (Euclidean, in cells) from `center`. Ties go to the first cell in
/// row-major order.
inline NegativeMatch hardest_negative(std::span<const double> anchor, const Tensor& others,
                                      Cell center, double tau) {
  const std::size_t h = others.dim(0), w = others.dim(1), f = others.dim(2);
  const auto v = others.values();
  const double tau_sq = tau * tau;
  double best = std::numeric_limits<double>::infinity();
  Cell best_cell{-1, -1};
  for (std::size_t i = 0; i < h; ++i) {
    const double dr = static_cast<double>(i) - center.row;
    for (std::size_t j = 0; j < w; ++j) {
      const double dc = static_cast<double>(j) - center.col;
      if (dr * dr + dc * dc <= tau_sq) continue;
      const double* o = v.data() + (i * w + j) * f;
      double ss = 0.0;
      for (std::size_t k = 0; k < f; ++k) ss += (anchor[k] - o[k]) * (anchor[k] - o[k]);
      if (ss < best) {
        best = ss;
        best_cell = {static_cast<int>(i), static_cast<int>(j)};
      }
    }
  }
  if (best_cell.row < 0) throw NoNegativeError("no cell lies outside the exclusion radius");
  return {std::sqrt(best), best_cell};
}

/// n(c1, c2): hardest negative for D1[c1] searched in D2 around c2.
inline NegativeMatch hardest_negative(const Tensor& d1, const Tensor& d2, Cell c1, Cell c2,
                                      double tau) {
  return hardest_negative(fiber(d1, c1), d2, c2, tau);
}

inline double contrastive(double p, double n, double margin) {
  const double hinge = std::max(0.0, margin - n);
  return 0.5 * p * p + 0.5 * hinge * hinge;
}

struct CorrespondenceBatch {
  Tensor descriptors1;  // h1 x w1 x f
  Tensor descriptors2;  // h2 x w2 x f
  Tensor scores1;       // h1 x w1
  Tensor scores2;       // h2 x w2
  std::vector<Correspondence> pairs;
  double tau = 4.0;
  double margin = 1.5;
};

/// Score-weighted average of the symmetric contrastive losses over the
/// correspondences. Pairs without an eligible negative on either side are
/// dropped; returns nullopt when nothing remains. Gradients reach both
/// descriptor maps and both score maps.
inline std::optional<Tensor> contrastive_matching_loss(const CorrespondenceBatch& batch) {
  const Tensor& d1 = batch.descriptors1;
  const Tensor& d2 = batch.descriptors2;
  detail::require_rank(d1, 3, "contrastive_matching_loss descriptors");
  detail::require_rank(d2, 3, "contrastive_matching_loss descriptors");
  if (d1.dim(2) != d2.dim(2)) throw ShapeError("descriptor dimensionality differs");
  if (batch.scores1.shape() != Shape{d1.dim(0), d1.dim(1)} ||
      batch.scores2.shape() != Shape{d2.dim(0), d2.dim(1)}) {
    throw ShapeError("score maps do not match descriptor grids");
  }
  if (batch.tau < 0.0 || !(batch.margin > 0.0)) throw ConfigError("need tau >= 0 and margin > 0");
  auto in_bounds = [](const Tensor& t, Cell c) {
    return c.row >= 0 && c.col >= 0 && static_cast<std::size_t>(c.row) < t.dim(0) &&
           static_cast<std::size_t>(c.col) < t.dim(1);
  };

  struct Term {
    Cell c1, c2;
    NegativeMatch n12, n21;
    double loss = 0.0;  // L_c(c1, c2) + L_c(c2, c1)
    double weight = 0.0;
  };
  std::vector<Term> terms;
  terms.reserve(batch.pairs.size());
  const std::size_t w1 = d1.dim(1), w2 = d2.dim(1);
  double num = 0.0, den = 0.0;
  for (const auto& pr : batch.pairs) {
    if (!in_bounds(d1, pr.first) || !in_bounds(d2, pr.second)) {
      throw ShapeError("correspondence cell out of bounds");
    }
    Term t{pr.first, pr.second, {}, {}, 0.0, 0.0};
    try {
      t.n12 = hardest_negative(fiber(d1, t.c1), d2, t.c2, batch.tau);
      t.n21 = hardest_negative(fiber(d2, t.c2), d1, t.c1, batch.tau);
    } catch (const NoNegativeError&) {
      continue;
    }
    const double p = positive_distance(fiber(d1, t.c1), fiber(d2, t.c2));
    t.loss = contrastive(p, t.n12.distance, batch.margin) +
             contrastive(p, t.n21.distance, batch.margin);
    t.weight = batch.scores1[static_cast<std::size_t>(t.c1.row) * w1 + t.c1.col] *
               batch.scores2[static_cast<std::size_t>(t.c2.row) * w2 + t.c2.col];
    num += t.weight * t.loss;
    den += t.weight;
    terms.push_back(t);
  }
  if (terms.empty() || !(den > 0.0)) return std::nullopt;

  const double margin = batch.margin;
  return detail::make_result(
      {}, {num / den}, {d1, d2, batch.scores1, batch.scores2},
      [terms = std::move(terms), num, den, margin, w1, w2](Node& n) {
        const double g = n.grad[0];
        const double dnum = g / den;
        const double dden = -g * num / (den * den);
        const auto& dv1 = n.inputs[0]->value;
        const auto& dv2 = n.inputs[1]->value;
        const auto& sv1 = n.inputs[2]->value;
        const auto& sv2 = n.inputs[3]->value;
        const std::size_t f = n.inputs[0]->shape[2];
        double* gd1 = detail::wants_grad(n, 0) ? n.inputs[0]->ensure_grad().data() : nullptr;
        double* gd2 = detail::wants_grad(n, 1) ? n.inputs[1]->ensure_grad().data() : nullptr;
        double* gs1 = detail::wants_grad(n, 2) ? n.inputs[2]->ensure_grad().data() : nullptr;
        double* gs2 = detail::wants_grad(n, 3) ? n.inputs[3]->ensure_grad().data() : nullptr;
        auto offset = [f](Cell c, std::size_t width) {
          return (static_cast<std::size_t>(c.row) * width + c.col) * f;
        };
        for (const auto& t : terms) {
          const std::size_t i1 = static_cast<std::size_t>(t.c1.row) * w1 + t.c1.col;
          const std::size_t i2 = static_cast<std::size_t>(t.c2.row) * w2 + t.c2.col;
          const double dweight = dnum * t.loss + dden;
          if (gs1) gs1[i1] += dweight * sv2[i2];
          if (gs2) gs2[i2] += dweight * sv1[i1];
          const double dl = dnum * t.weight;
          const std::size_t a = offset(t.c1, w1), b = offset(t.c2, w2);
          // Both directions share 0.5 * p^2, so d(loss)/d(p^2) = 1.
          for (std::size_t k = 0; k < f; ++k) {
            const double diff = dv1[a + k] - dv2[b + k];
            if (gd1) gd1[a + k] += 2.0 * dl * diff;
            if (gd2) gd2[b + k] -= 2.0 * dl * diff;
          }
          const double h12 = std::max(0.0, margin - t.n12.distance);
          if (h12 > 0.0 && t.n12.distance > 1e-12) {
            const std::size_t k2 = offset(t.n12.cell, w2);
            const double coef = -dl * h12 / t.n12.distance;
            for (std::size_t k = 0; k < f; ++k) {
              const double diff = dv1[a + k] - dv2[k2 + k];
              if (gd1) gd1[a + k] += coef * diff;
              if (gd2) gd2[k2 + k] -= coef * diff;
            }
          }
          const double h21 = std::max(0.0, margin - t.n21.distance);
          if (h21 > 0.0 && t.n21.distance > 1e-12) {
            const std::size_t k1 = offset(t.n21.cell, w1);
            const double coef = -dl * h21 / t.n21.distance;
            for (std::size_t k = 0; k < f; ++k) {
              const double diff = dv2[b + k] - dv1[k1 + k];
              if (gd2) gd2[b + k] += coef * diff;
              if (gd1) gd1[k1 + k] -= coef * diff;
            }
          }
        }
      });
}

/// Mean absolute error between the synthesized and target rasters over the
/// masked cells; nullopt when the mask is empty.
inline std::optional<Tensor> view_synthesis_loss(const Tensor& synth,
                                                 std::span<const double> target,
                                                 std::span<const std::uint8_t> mask) {
  if (synth.numel() != target.size() || target.size() != mask.size()) {
    throw ShapeError("view_synthesis_loss: synthesized, target and mask sizes differ");
  }
  std::size_t count = 0;
  double total = 0.0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (!mask[i]) continue;
    total += std::abs(synth[i] - target[i]);
    ++count;
  }
  if (count == 0) return std::nullopt;
  std::vector<double> sign(target.size(), 0.0);
  for (std::size_t i = 0; i < target.size(); ++i) {
    if (!mask[i]) continue;
    const double d = synth[i] - target[i];
    sign[i] = d > 0.0 ? 1.0 : (d < 0.0 ? -1.0 : 0.0);
  }
  const double inv = 1.0 / static_cast<double>(count);
  return detail::make_result({}, {total * inv}, {synth},
                             [sign = std::move(sign), inv](Node& n) {
    auto& g = n.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[0] * inv * sign[i];
  });
}

inline double total_loss(double l_cm, double l_v, double alpha) { return l_cm + alpha * l_v; }

inline Tensor total_loss(const Tensor& l_cm, const Tensor& l_v, double alpha) {
  return add(l_cm, scale(l_v, alpha));
}

}  // namespace viewsynth
