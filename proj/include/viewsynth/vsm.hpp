#pragma once

// View synthesis module: warps view-1 features into view 2, encodes the
// per-cell transformation with the grid transformation encoder (GTE) and
// synthesizes view-2 normalized depth with the depthmap synthesis network
// (DSN). Only used while training.

#include <optional>
#include <random>
#include <string>
#include <vector>

#include "viewsynth/geometry.hpp"
#include "viewsynth/ops.hpp"
#include "viewsynth/optim.hpp"

namespace viewsynth {

/// Channel layout of a transformation grid cell:
///   [0]      warped view-1 depth
///   [1, 2]   target cell position (row, col) / grid extent
///   [3, 4]   mapped source position (row, col) / source extent, 0 if invalid
///   [5, 13]  relative rotation, row-major
///   [14, 16] relative translation
inline constexpr std::size_t kTransformChannels = 17;
inline constexpr std::size_t kTransformCodeChannels = 96;

inline constexpr double kSmallGain = 0.05;

inline Tensor build_transform_grid(std::span<const double> warped_depth,
                                   const GridPositions& positions, const MappingGrid& mapping,
                                   const RigidTransform& rel_pose) {
  const std::size_t h = positions.height, w = positions.width;
  if (mapping.height != h || mapping.width != w || warped_depth.size() != h * w) {
    throw ShapeError("build_transform_grid: inputs disagree on grid extent");
  }
  std::vector<double> g(h * w * kTransformChannels, 0.0);
  for (std::size_t r = 0; r < h; ++r) {
    for (std::size_t c = 0; c < w; ++c) {
      const std::size_t p = r * w + c;
      double* cell = g.data() + p * kTransformChannels;
      cell[0] = warped_depth[p];
      const GridCoord pos = positions.at(r, c);
      cell[1] = pos.row / static_cast<double>(h);
      cell[2] = pos.col / static_cast<double>(w);
      if (mapping.valid[p]) {
        cell[3] = mapping.coords[p].row / static_cast<double>(mapping.source_height);
        cell[4] = mapping.coords[p].col / static_cast<double>(mapping.source_width);
      }
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j) cell[5 + 3 * i + j] = rel_pose.rotation(i, j);
      for (int i = 0; i < 3; ++i) cell[14 + i] = rel_pose.translation(i);
    }
  }
  return Tensor::from_values({h, w, kTransformChannels}, std::move(g));
}

struct SynthesisResult {
  Tensor synthesized;  // h x w, values in (0, 1)
  MappingGrid grid;    // validity is the frustum set used by the loss
};

/// The last layer of every residual branch and the output layer use a small
/// init gain: blocks start close to identities and the first synthesis close
/// to 0.5, while every parameter still receives gradient.
class ViewSynthesisModule {
 public:
  ViewSynthesisModule(ParameterSet& params, std::size_t feature_dim, std::mt19937_64& rng)
      : feature_dim_(feature_dim) {
    const std::size_t fc = feature_dim + kTransformCodeChannels;
    gte_in_ = dense(params, "vsm.gte.in", kTransformChannels, kTransformCodeChannels, rng);
    for (int b = 0; b < 2; ++b) {
      const std::string base = "vsm.gte.block" + std::to_string(b + 1);
      gte_blocks_[b][0] = dense(params, base + ".fc1", kTransformCodeChannels,
                                kTransformCodeChannels, rng);
      gte_blocks_[b][1] = dense(params, base + ".fc2", kTransformCodeChannels,
                                kTransformCodeChannels, rng, kSmallGain);
    }
    dsn_global_[0] = dense(params, "vsm.dsn.global1", 2 * feature_dim, feature_dim, rng);
    dsn_global_[1] = dense(params, "vsm.dsn.global2", feature_dim, feature_dim, rng);
    for (int b = 0; b < 3; ++b) {
      const std::string base = "vsm.dsn.res" + std::to_string(b + 1);
      for (int l = 0; l < 2; ++l) {
        const std::string name = base + ".conv" + std::to_string(l + 1);
        dsn_res_[b][l].kernel =
            l == 0 ? &params.add_he(name + ".kernel", {3, 3, fc, fc}, 9 * fc, rng)
                   : &params.add_he(name + ".kernel", {3, 3, fc, fc}, 9 * fc, rng, kSmallGain);
        dsn_res_[b][l].bias = &params.add_zeros(name + ".bias", {fc});
      }
    }
    dsn_out_ = dense(params, "vsm.dsn.out", fc, 1, rng, kSmallGain);
  }

  std::size_t feature_dim() const { return feature_dim_; }

  /// Per-cell encoder 17 -> 96: affine + relu, then two residual blocks
  /// [affine, relu, affine] + skip, relu.
  Tensor gte_forward(const Tensor& grid) const {
    Tensor x = relu(apply(gte_in_, grid));
    for (const auto& block : gte_blocks_) {
      Tensor y = apply(block[1], relu(apply(block[0], x)));
      x = relu(add(x, y));
    }
    return x;
  }

  Tensor dsn_forward(const Tensor& warped_features, const Tensor& code) const {
    detail::require_rank(warped_features, 3, "dsn_forward features");
    const std::size_t h = warped_features.dim(0), w = warped_features.dim(1);
    if (code.rank() != 3 || code.dim(0) != h || code.dim(1) != w ||
        code.dim(2) != kTransformCodeChannels) {
      throw ShapeError("dsn_forward: transform code does not match warped features");
    }
    Tensor global = tile_spatial(global_average_pool(warped_features), h, w);
    Tensor x = concat_channels(warped_features, global);
    x = relu(apply(dsn_global_[0], x));
    x = relu(apply(dsn_global_[1], x));
    x = concat_channels(x, code);
    for (const auto& block : dsn_res_) {
      Tensor y = relu(bias_add(conv2d(x, block[0].kernel->tensor, 1, Padding::Same),
                               block[0].bias->tensor));
      y = bias_add(conv2d(y, block[1].kernel->tensor, 1, Padding::Same), block[1].bias->tensor);
      x = relu(add(x, y));
    }
    return reshape(sigmoid(apply(dsn_out_, x)), {h, w});
  }

  /// Synthesis given a precomputed mapping grid (target view 2, source view
  /// 1). View-2 depth is not an input here.
  SynthesisResult synthesize_with_grid(const Tensor& features1,
                                       std::span<const double> coarse1_normalized,
                                       MappingGrid grid, const RigidTransform& rel_pose) const {
    const std::size_t hs = features1.dim(0), ws = features1.dim(1);
    if (coarse1_normalized.size() != hs * ws) {
      throw ShapeError("synthesize: coarse depth does not match the feature grid");
    }
    Tensor depth1 = Tensor::from_values(
        {hs, ws, 1}, std::vector<double>(coarse1_normalized.begin(), coarse1_normalized.end()));
    const Tensor warped_depth = bilinear_sample(depth1, grid);
    const Tensor warped = bilinear_sample(features1, grid);
    const Tensor g = build_transform_grid(warped_depth.values(),
                                          GridPositions{grid.height, grid.width}, grid, rel_pose);
    Tensor synthesized = dsn_forward(warped, gte_forward(g));
    return {std::move(synthesized), std::move(grid)};
  }

  /// Synthesizes view 2 from view-1 features. `coarse1` and `coarse2` are the
  /// 8x-downsampled depth images with cell-unit cameras; `coarse2` is only
  /// used to build the mapping grid. nullopt when no cell maps into view 1.
  std::optional<SynthesisResult> synthesize_view(const Tensor& features1,
                                                 const DepthImage& coarse1,
                                                 const DepthImage& coarse2) const {
    MappingGrid grid = compute_mapping_grid(coarse2, coarse2.camera, coarse1.camera,
                                            features1.dim(0), features1.dim(1));
    if (grid.valid_count() == 0) return std::nullopt;
    return synthesize_with_grid(features1, normalize_depth(coarse1), std::move(grid),
                                relative_pose(coarse1.camera, coarse2.camera));
  }

  /// Parameters of the final 1x1 output layer.
  Parameter& output_weight() const { return *dsn_out_.weight; }
  Parameter& output_bias() const { return *dsn_out_.bias; }

 private:
  struct Dense {
    Parameter* weight = nullptr;
    Parameter* bias = nullptr;
  };
  struct Conv {
    Parameter* kernel = nullptr;
    Parameter* bias = nullptr;
  };

  static Dense dense(ParameterSet& params, const std::string& name, std::size_t in,
                     std::size_t out, std::mt19937_64& rng, double gain = 1.0) {
    return {&params.add_he(name + ".weight", {in, out}, in, rng, gain),
            &params.add_zeros(name + ".bias", {out})};
  }

  static Tensor apply(const Dense& d, const Tensor& x) {
    return linear(x, d.weight->tensor, d.bias->tensor);
  }

  std::size_t feature_dim_;
  Dense gte_in_;
  Dense gte_blocks_[2][2];
  Dense dsn_global_[2];
  Conv dsn_res_[3][2];
  Dense dsn_out_;
};

}  // namespace viewsynth
