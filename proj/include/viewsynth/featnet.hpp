#pragma once

// Dense feature extraction, descriptors, soft detection scores and hard
// keypoint detection.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "viewsynth/geometry.hpp"
#include "viewsynth/ops.hpp"
#include "viewsynth/optim.hpp"

namespace viewsynth {

struct FeatureNetConfig {
  std::vector<std::size_t> stage_channels{16, 32, 64};
  std::size_t feature_dim = 64;
};

/// Three stages of [3x3 conv, relu, 3x3 stride-2 conv, relu] followed by a
/// 3x3 conv to `feature_dim` channels; output is 8x downsampled. The last
/// conv has no activation so descriptor fibers are never forced to zero.
class FeatureNet {
 public:
  static constexpr int kDownsample = 8;

  FeatureNet(ParameterSet& params, const FeatureNetConfig& cfg, std::mt19937_64& rng)
      : config_(cfg) {
    if (cfg.stage_channels.size() != 3) throw ConfigError("feature net needs three stages");
    std::size_t cin = 1;
    for (std::size_t s = 0; s < 3; ++s) {
      const std::size_t c = cfg.stage_channels[s];
      const std::string base = "phi.stage" + std::to_string(s + 1);
      layers_.push_back(make_layer(params, base + ".conv", cin, c, 1, rng));
      layers_.push_back(make_layer(params, base + ".down", c, c, 2, rng));
      cin = c;
    }
    layers_.push_back(make_layer(params, "phi.out", cin, cfg.feature_dim, 1, rng));
  }

  const FeatureNetConfig& config() const { return config_; }

  /// image: H x W x 1 normalized depth.
  Tensor forward(const Tensor& image) const {
    Tensor x = image;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& layer = layers_[i];
      x = bias_add(conv2d(x, layer.kernel->tensor, layer.stride, Padding::Same),
                   layer.bias->tensor);
      if (i + 1 < layers_.size()) x = relu(x);
    }
    return x;
  }

 private:
  struct Layer {
    Parameter* kernel;
    Parameter* bias;
    std::size_t stride;
  };

  static Layer make_layer(ParameterSet& params, const std::string& name, std::size_t cin,
                          std::size_t cout, std::size_t stride, std::mt19937_64& rng) {
    Layer l;
    l.kernel = &params.add_he(name + ".kernel", {3, 3, cin, cout}, 9 * cin, rng);
    l.bias = &params.add_zeros(name + ".bias", {cout});
    l.stride = stride;
    return l;
  }

  FeatureNetConfig config_;
  std::vector<Layer> layers_;
};

struct FeatureMap {
  Tensor features;  // h x w x f
  int image_id = -1;
  double scale = 1.0;

  std::size_t height() const { return features.dim(0); }
  std::size_t width() const { return features.dim(1); }
  std::size_t channels() const { return features.dim(2); }
};

struct DescriptorMap {
  Tensor descriptors;  // h x w x f, unit fibers
};

struct ScoreMap {
  Tensor scores;  // h x w, sums to one
};

struct Keypoint3D {
  Eigen::Vector2d position = Eigen::Vector2d::Zero();  // full-resolution px
  double score = 0.0;
  std::vector<double> descriptor;
  std::optional<Eigen::Vector3d> world;
};

/// Runs the feature network on a normalized W x H raster (row-major).
inline FeatureMap extract_features(std::span<const double> normalized, int width, int height,
                                   const FeatureNet& net, int image_id = -1) {
  if (width < 16 || height < 16) {
    throw InputTooSmallError("input " + std::to_string(width) + "x" + std::to_string(height) +
                             " is smaller than 16x16");
  }
  if (normalized.size() != static_cast<std::size_t>(width) * height) {
    throw ShapeError("raster size does not match its extents");
  }
  Tensor image = Tensor::from_values(
      {static_cast<std::size_t>(height), static_cast<std::size_t>(width), 1},
      std::vector<double>(normalized.begin(), normalized.end()));
  return {net.forward(image), image_id, 1.0};
}

inline DescriptorMap describe(const FeatureMap& fm) {
  return {l2_normalize(fm.features, 1e-8)};
}

namespace detail {

inline constexpr double kScoreFloor = 1e-12;
inline constexpr double kRatioEpsilon = 1e-12;

}  // namespace detail

/// Soft detection scores on relu(F):
///   alpha = exp(F) / sum over the 3x3 window of exp(F)   (per channel,
///           window clamped to the map edge),
///   beta  = F / max over channels of F,
///   gamma = max over channels of alpha * beta,  S = gamma / sum(gamma).
/// A tiny floor is added to gamma so all-zero maps score uniformly.
inline ScoreMap soft_scores(const FeatureMap& fm) {
  const Tensor& input = fm.features;
  detail::require_rank(input, 3, "soft_scores");
  const std::size_t h = input.dim(0), w = input.dim(1), f = input.dim(2);
  const std::size_t cells = h * w;
  const auto fv = input.values();

  std::vector<double> r(fv.size());
  for (std::size_t i = 0; i < r.size(); ++i) r[i] = fv[i] > 0.0 ? fv[i] : 0.0;

  auto window = [h, w](std::size_t i, std::size_t j, std::size_t (&out)[9]) {
    int n = 0;
    for (int di = -1; di <= 1; ++di) {
      for (int dj = -1; dj <= 1; ++dj) {
        const long ii = std::clamp(static_cast<long>(i) + di, 0L, static_cast<long>(h) - 1);
        const long jj = std::clamp(static_cast<long>(j) + dj, 0L, static_cast<long>(w) - 1);
        out[n++] = static_cast<std::size_t>(ii) * w + static_cast<std::size_t>(jj);
      }
    }
  };

  struct CellState {
    std::size_t best_k = 0;     // channel maximizing alpha * beta
    std::size_t max_t = 0;      // channel maximizing relu(F)
    double channel_max = 0.0;
    double alpha = 0.0;
    double beta = 0.0;
    double window_max = 0.0;
    double window_sum = 0.0;
  };
  std::vector<CellState> state(cells);
  std::vector<double> gamma(cells);
  double gamma_sum = 0.0;

  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const std::size_t p = i * w + j;
      std::size_t nb[9];
      window(i, j, nb);
      CellState& st = state[p];
      st.channel_max = r[p * f];
      for (std::size_t t = 1; t < f; ++t) {
        if (r[p * f + t] > st.channel_max) {
          st.channel_max = r[p * f + t];
          st.max_t = t;
        }
      }
      const double denom = std::max(st.channel_max, detail::kRatioEpsilon);
      double best = -1.0;
      for (std::size_t k = 0; k < f; ++k) {
        double m = r[nb[0] * f + k];
        for (int n = 1; n < 9; ++n) m = std::max(m, r[nb[n] * f + k]);
        double z = 0.0;
        for (int n = 0; n < 9; ++n) z += std::exp(r[nb[n] * f + k] - m);
        const double alpha = std::exp(r[p * f + k] - m) / z;
        const double beta = r[p * f + k] / denom;
        if (alpha * beta > best) {
          best = alpha * beta;
          st.best_k = k;
          st.alpha = alpha;
          st.beta = beta;
          st.window_max = m;
          st.window_sum = z;
        }
      }
      gamma[p] = best + detail::kScoreFloor;
      gamma_sum += gamma[p];
    }
  }

  std::vector<double> out(cells);
  for (std::size_t p = 0; p < cells; ++p) out[p] = gamma[p] / gamma_sum;

  return {detail::make_result(
      {h, w}, std::move(out), {input},
      [h, w, f, cells, gamma_sum, window, state = std::move(state),
       r = std::move(r)](Node& n) {
        const auto& fv = n.inputs[0]->value;
        auto& g = n.inputs[0]->ensure_grad();
        double weighted = 0.0;
        for (std::size_t p = 0; p < cells; ++p) weighted += n.grad[p] * n.value[p];
        std::vector<double> dr(r.size(), 0.0);
        for (std::size_t i = 0; i < h; ++i) {
          for (std::size_t j = 0; j < w; ++j) {
            const std::size_t p = i * w + j;
            const CellState& st = state[p];
            const double dgamma = (n.grad[p] - weighted) / gamma_sum;
            const double dalpha = dgamma * st.beta;
            const double dbeta = dgamma * st.alpha;
            const std::size_t k = st.best_k;
            if (st.channel_max > detail::kRatioEpsilon) {
              dr[p * f + k] += dbeta / st.channel_max;
              dr[p * f + st.max_t] -= dbeta * r[p * f + k] / (st.channel_max * st.channel_max);
            } else {
              dr[p * f + k] += dbeta / detail::kRatioEpsilon;
            }
            std::size_t nb[9];
            window(i, j, nb);
            dr[p * f + k] += dalpha * st.alpha;
            for (int q = 0; q < 9; ++q) {
              const double e = std::exp(r[nb[q] * f + k] - st.window_max);
              dr[nb[q] * f + k] -= dalpha * st.alpha * e / st.window_sum;
            }
          }
        }
        for (std::size_t idx = 0; idx < g.size(); ++idx) {
          if (fv[idx] > 0.0) g[idx] += dr[idx];
        }
      })};
}

/// Strict 3x3 maxima of the score map (in-bounds neighbours only), sorted by
/// score descending and truncated to `top_k`. Positions are cell centers in
/// the original image: ((c + 0.5) * 8 / scale, (r + 0.5) * 8 / scale).
inline std::vector<Keypoint3D> detect_hard(const DescriptorMap& dm, const ScoreMap& sm,
                                           std::size_t top_k, double scale = 1.0) {
  if (top_k < 1) throw ConfigError("top_k must be at least 1");
  const Tensor& s = sm.scores;
  const std::size_t h = s.dim(0), w = s.dim(1);
  const std::size_t f = dm.descriptors.dim(2);
  std::vector<std::size_t> maxima;
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double v = s[i * w + j];
      bool strict = true;
      for (int di = -1; di <= 1 && strict; ++di) {
        for (int dj = -1; dj <= 1; ++dj) {
          if (di == 0 && dj == 0) continue;
          const long ii = static_cast<long>(i) + di, jj = static_cast<long>(j) + dj;
          if (ii < 0 || jj < 0 || ii >= static_cast<long>(h) || jj >= static_cast<long>(w)) continue;
          if (s[static_cast<std::size_t>(ii) * w + static_cast<std::size_t>(jj)] >= v) {
            strict = false;
            break;
          }
        }
      }
      if (strict) maxima.push_back(i * w + j);
    }
  }
  std::stable_sort(maxima.begin(), maxima.end(),
                   [&](std::size_t a, std::size_t b) { return s[a] > s[b]; });
  if (maxima.size() > top_k) maxima.resize(top_k);

  const double cell = FeatureNet::kDownsample / scale;
  std::vector<Keypoint3D> out;
  out.reserve(maxima.size());
  for (std::size_t p : maxima) {
    Keypoint3D kp;
    kp.position = {(static_cast<double>(p % w) + 0.5) * cell,
                   (static_cast<double>(p / w) + 0.5) * cell};
    kp.score = s[p];
    const auto d = dm.descriptors.values().subspan(p * f, f);
    kp.descriptor.assign(d.begin(), d.end());
    out.push_back(std::move(kp));
  }
  return out;
}

/// Bilinear resize of a row-major raster; samples at pixel centers with
/// edge clamping.
inline std::vector<double> resize_bilinear(std::span<const double> src, int width, int height,
                                           int out_width, int out_height) {
  std::vector<double> out(static_cast<std::size_t>(out_width) * out_height);
  const double sx = static_cast<double>(width) / out_width;
  const double sy = static_cast<double>(height) / out_height;
  for (int y = 0; y < out_height; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, height - 1.0);
    const int y0 = static_cast<int>(std::floor(fy));
    const int y1 = std::min(y0 + 1, height - 1);
    const double ty = fy - y0;
    for (int x = 0; x < out_width; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, width - 1.0);
      const int x0 = static_cast<int>(std::floor(fx));
      const int x1 = std::min(x0 + 1, width - 1);
      const double tx = fx - x0;
      auto at = [&](int xx, int yy) { return src[static_cast<std::size_t>(yy) * width + xx]; };
      out[static_cast<std::size_t>(y) * out_width + x] =
          (1 - ty) * ((1 - tx) * at(x0, y0) + tx * at(x1, y0)) +
          ty * ((1 - tx) * at(x0, y1) + tx * at(x1, y1));
    }
  }
  return out;
}

struct MultiscaleConfig {
  std::vector<double> scales{0.5, 1.0, 2.0};
  std::size_t top_k = 50;
  std::size_t max_pixels = 1'000'000;  // scales producing larger rasters are skipped
  double dedup_radius_px = 4.0;
};

/// Greedy merge of keypoints from several scales: highest score first, drop
/// any keypoint within `radius` px of one already kept, stop at `top_k`.
inline std::vector<Keypoint3D> merge_keypoints(std::vector<Keypoint3D> all, std::size_t top_k,
                                               double radius) {
  std::stable_sort(all.begin(), all.end(),
                   [](const Keypoint3D& a, const Keypoint3D& b) { return a.score > b.score; });
  std::vector<Keypoint3D> kept;
  for (auto& kp : all) {
    if (kept.size() >= top_k) break;
    const bool near = std::any_of(kept.begin(), kept.end(), [&](const Keypoint3D& k) {
      return (k.position - kp.position).norm() <= radius;
    });
    if (!near) kept.push_back(std::move(kp));
  }
  return kept;
}

/// Detects keypoints at several image scales and merges them in original
/// image coordinates.
inline std::vector<Keypoint3D> extract_multiscale(const DepthImage& image, const FeatureNet& net,
                                                  const MultiscaleConfig& cfg) {
  if (cfg.scales.empty()) throw ConfigError("multi-scale extraction needs at least one scale");
  NoGradGuard no_grad;
  const std::vector<double> normalized = normalize_depth(image);
  std::vector<Keypoint3D> all;
  for (double s : cfg.scales) {
    if (!(s > 0.0)) throw ConfigError("scales must be positive");
    const int w = std::max(1, static_cast<int>(std::lround(image.width * s)));
    const int h = std::max(1, static_cast<int>(std::lround(image.height * s)));
    if (static_cast<std::size_t>(w) * h > cfg.max_pixels || w < 16 || h < 16) continue;
    const std::vector<double> raster =
        (w == image.width && h == image.height)
            ? normalized
            : resize_bilinear(normalized, image.width, image.height, w, h);
    const FeatureMap fm = extract_features(raster, w, h, net);
    auto kps = detect_hard(describe(fm), soft_scores(fm), cfg.top_k);
    const double back_x = static_cast<double>(image.width) / w;
    const double back_y = static_cast<double>(image.height) / h;
    for (auto& kp : kps) {
      kp.position = {kp.position.x() * back_x, kp.position.y() * back_y};
      all.push_back(std::move(kp));
    }
  }
  return merge_keypoints(std::move(all), cfg.top_k, cfg.dedup_radius_px);
}

}  // namespace viewsynth
