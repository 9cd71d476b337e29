#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "viewsynth/mapping_grid.hpp"
#include "viewsynth/tensor.hpp"

namespace viewsynth {

namespace detail {

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " +
                     shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got " + shape_string(t.shape()));
  }
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](Node& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants_grad(n, k)) continue;
      auto& g = n.inputs[k]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return detail::make_result(a.shape(), std::move(out), {a, b}, [](Node& n) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (!detail::wants_grad(n, k)) continue;
      const double sign = k == 0 ? 1.0 : -1.0;
      auto& g = n.inputs[k]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign * n.grad[i];
    }
  });
}

enum class Elementwise { Relu, Sigmoid, Square, Scale };

/// Pointwise map. `factor` is only read by Elementwise::Scale.
inline Tensor elementwise(const Tensor& x, Elementwise fn, double factor = 1.0) {
  const auto in = x.values();
  std::vector<double> out(in.size());
  switch (fn) {
    case Elementwise::Relu:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
      break;
    case Elementwise::Sigmoid:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = 1.0 / (1.0 + std::exp(-in[i]));
      break;
    case Elementwise::Square:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * in[i];
      break;
    case Elementwise::Scale:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] * factor;
      break;
  }
  return detail::make_result(x.shape(), std::move(out), {x}, [fn, factor](Node& n) {
    const auto& xv = n.inputs[0]->value;
    auto& g = n.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      double d = 0.0;
      switch (fn) {
        case Elementwise::Relu: d = xv[i] > 0.0 ? 1.0 : 0.0; break;
        case Elementwise::Sigmoid: d = n.value[i] * (1.0 - n.value[i]); break;
        case Elementwise::Square: d = 2.0 * xv[i]; break;
        case Elementwise::Scale: d = factor; break;
      }
      g[i] += d * n.grad[i];
    }
  });
}

inline Tensor relu(const Tensor& x) { return elementwise(x, Elementwise::Relu); }
inline Tensor sigmoid(const Tensor& x) { return elementwise(x, Elementwise::Sigmoid); }
inline Tensor square(const Tensor& x) { return elementwise(x, Elementwise::Square); }
inline Tensor scale(const Tensor& x, double factor) {
  return elementwise(x, Elementwise::Scale, factor);
}

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  return detail::make_result({}, {s}, {x}, [](Node& n) {
    auto& g = n.inputs[0]->ensure_grad();
    for (auto& gi : g) gi += n.grad[0];
  });
}

inline Tensor mean(const Tensor& x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.numel()));
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + shape_string(x.shape()) + " -> " + shape_string(shape));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  return detail::make_result(std::move(shape), std::move(out), {x}, [](Node& n) {
    auto& g = n.inputs[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

enum class Padding { Same, Valid };

/// 2-D cross-correlation of an h x w x c_in map with a k x k x c_in x c_out
/// kernel. "Same" padding follows the ceil(h / stride) convention with the
/// extra row/column of padding placed at the bottom/right.
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride,
                     Padding padding) {
  detail::require_rank(input, 3, "conv2d input");
  detail::require_rank(kernel, 4, "conv2d kernel");
  const long h = static_cast<long>(input.dim(0));
  const long w = static_cast<long>(input.dim(1));
  const long cin = static_cast<long>(input.dim(2));
  const long k = static_cast<long>(kernel.dim(0));
  const long cout = static_cast<long>(kernel.dim(3));
  if (kernel.dim(1) != kernel.dim(0) || k % 2 == 0) {
    throw ShapeError("conv2d: kernel must be square with odd extent");
  }
  if (static_cast<long>(kernel.dim(2)) != cin) {
    throw ShapeError("conv2d: channel mismatch, input has " + std::to_string(cin) +
                     ", kernel expects " + std::to_string(kernel.dim(2)));
  }
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  if (h < 1 || w < 1) throw ShapeError("conv2d: empty input");
  const long s = static_cast<long>(stride);

  long oh = 0, ow = 0, pad_top = 0, pad_left = 0;
  if (padding == Padding::Same) {
    oh = (h + s - 1) / s;
    ow = (w + s - 1) / s;
    pad_top = std::max((oh - 1) * s + k - h, 0L) / 2;
    pad_left = std::max((ow - 1) * s + k - w, 0L) / 2;
  } else {
    if (h < k || w < k) throw ShapeError("conv2d: input smaller than kernel for valid padding");
    oh = (h - k) / s + 1;
    ow = (w - k) / s + 1;
  }

  std::vector<double> out(static_cast<std::size_t>(oh * ow * cout), 0.0);
  const double* x = input.values().data();
  const double* wt = kernel.values().data();
  for (long oy = 0; oy < oh; ++oy) {
    for (long ox = 0; ox < ow; ++ox) {
      double* o = out.data() + (oy * ow + ox) * cout;
      for (long ky = 0; ky < k; ++ky) {
        const long iy = oy * s - pad_top + ky;
        if (iy < 0 || iy >= h) continue;
        for (long kx = 0; kx < k; ++kx) {
          const long ix = ox * s - pad_left + kx;
          if (ix < 0 || ix >= w) continue;
          const double* xi = x + (iy * w + ix) * cin;
          const double* wk = wt + (ky * k + kx) * cin * cout;
          for (long ci = 0; ci < cin; ++ci) {
            const double a = xi[ci];
            const double* wr = wk + ci * cout;
            for (long co = 0; co < cout; ++co) o[co] += a * wr[co];
          }
        }
      }
    }
  }

  return detail::make_result(
      {static_cast<std::size_t>(oh), static_cast<std::size_t>(ow),
       static_cast<std::size_t>(cout)},
      std::move(out), {input, kernel},
      [=](Node& n) {
        const double* xv = n.inputs[0]->value.data();
        const double* wv = n.inputs[1]->value.data();
        double* gx = detail::wants_grad(n, 0) ? n.inputs[0]->ensure_grad().data() : nullptr;
        double* gw = detail::wants_grad(n, 1) ? n.inputs[1]->ensure_grad().data() : nullptr;
        for (long oy = 0; oy < oh; ++oy) {
          for (long ox = 0; ox < ow; ++ox) {
            const double* go = n.grad.data() + (oy * ow + ox) * cout;
            for (long ky = 0; ky < k; ++ky) {
              const long iy = oy * s - pad_top + ky;
              if (iy < 0 || iy >= h) continue;
              for (long kx = 0; kx < k; ++kx) {
                const long ix = ox * s - pad_left + kx;
                if (ix < 0 || ix >= w) continue;
                const long xoff = (iy * w + ix) * cin;
                const long woff = (ky * k + kx) * cin * cout;
                for (long ci = 0; ci < cin; ++ci) {
                  const double* wr = wv + woff + ci * cout;
                  if (gx) {
                    double acc = 0.0;
                    for (long co = 0; co < cout; ++co) acc += go[co] * wr[co];
                    gx[xoff + ci] += acc;
                  }
                  if (gw) {
                    const double a = xv[xoff + ci];
                    double* gr = gw + woff + ci * cout;
                    for (long co = 0; co < cout; ++co) gr[co] += a * go[co];
                  }
                }
              }
            }
          }
        }
      });
}

/// Adds a per-channel bias along the last axis.
inline Tensor bias_add(const Tensor& x, const Tensor& bias) {
  detail::require_rank(bias, 1, "bias_add bias");
  const std::size_t c = bias.dim(0);
  if (x.rank() == 0 || x.shape().back() != c) {
    throw ShapeError("bias_add: last axis of " + shape_string(x.shape()) +
                     " does not match bias " + shape_string(bias.shape()));
  }
  std::vector<double> out(x.values().begin(), x.values().end());
  const auto b = bias.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i % c];
  return detail::make_result(x.shape(), std::move(out), {x, bias}, [c](Node& n) {
    if (detail::wants_grad(n, 0)) {
      auto& g = n.inputs[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (detail::wants_grad(n, 1)) {
      auto& g = n.inputs[1]->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % c] += n.grad[i];
    }
  });
}

/// Affine map along the last axis: y = x W + b.
inline Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  detail::require_rank(weight, 2, "linear weight");
  detail::require_rank(bias, 1, "linear bias");
  const std::size_t din = weight.dim(0);
  const std::size_t dout = weight.dim(1);
  if (input.rank() == 0 || input.shape().back() != din) {
    throw ShapeError("linear: input " + shape_string(input.shape()) +
                     " incompatible with weight " + shape_string(weight.shape()));
  }
  if (bias.dim(0) != dout) throw ShapeError("linear: bias size mismatch");
  const std::size_t rows = input.numel() / din;
  Shape out_shape = input.shape();
  out_shape.back() = dout;

  std::vector<double> out(rows * dout);
  const double* x = input.values().data();
  const double* wv = weight.values().data();
  const double* bv = bias.values().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double* o = out.data() + r * dout;
    std::copy(bv, bv + dout, o);
    for (std::size_t i = 0; i < din; ++i) {
      const double a = x[r * din + i];
      const double* wr = wv + i * dout;
      for (std::size_t j = 0; j < dout; ++j) o[j] += a * wr[j];
    }
  }

  return detail::make_result(std::move(out_shape), std::move(out), {input, weight, bias},
                             [rows, din, dout](Node& n) {
    const double* xv = n.inputs[0]->value.data();
    const double* wv = n.inputs[1]->value.data();
    double* gx = detail::wants_grad(n, 0) ? n.inputs[0]->ensure_grad().data() : nullptr;
    double* gw = detail::wants_grad(n, 1) ? n.inputs[1]->ensure_grad().data() : nullptr;
    double* gb = detail::wants_grad(n, 2) ? n.inputs[2]->ensure_grad().data() : nullptr;
    for (std::size_t r = 0; r < rows; ++r) {
      const double* go = n.grad.data() + r * dout;
      if (gb) for (std::size_t j = 0; j < dout; ++j) gb[j] += go[j];
      for (std::size_t i = 0; i < din; ++i) {
        const double* wr = wv + i * dout;
        if (gx) {
          double acc = 0.0;
          for (std::size_t j = 0; j < dout; ++j) acc += go[j] * wr[j];
          gx[r * din + i] += acc;
        }
        if (gw) {
          const double a = xv[r * din + i];
          double* gr = gw + i * dout;
          for (std::size_t j = 0; j < dout; ++j) gr[j] += a * go[j];
        }
      }
    }
  });
}

/// Divides every fiber along the last axis by max(||fiber||, epsilon).
inline Tensor l2_normalize(const Tensor& input, double epsilon = 1e-8) {
  if (input.rank() == 0) throw ShapeError("l2_normalize: scalar input");
  const std::size_t f = input.shape().back();
  const std::size_t fibers = f == 0 ? 0 : input.numel() / f;
  const auto x = input.values();
  std::vector<double> out(x.size());
  std::vector<double> norms(fibers);
  for (std::size_t p = 0; p < fibers; ++p) {
    double ss = 0.0;
    for (std::size_t c = 0; c < f; ++c) ss += x[p * f + c] * x[p * f + c];
    norms[p] = std::sqrt(ss);
    const double d = std::max(norms[p], epsilon);
    for (std::size_t c = 0; c < f; ++c) out[p * f + c] = x[p * f + c] / d;
  }
  return detail::make_result(input.shape(), std::move(out), {input},
                             [f, fibers, epsilon, norms = std::move(norms)](Node& n) {
    auto& g = n.inputs[0]->ensure_grad();
    for (std::size_t p = 0; p < fibers; ++p) {
      const double* y = n.value.data() + p * f;
      const double* gy = n.grad.data() + p * f;
      if (norms[p] > epsilon) {
        double dot = 0.0;
        for (std::size_t c = 0; c < f; ++c) dot += y[c] * gy[c];
        for (std::size_t c = 0; c < f; ++c) g[p * f + c] += (gy[c] - y[c] * dot) / norms[p];
      } else {
        for (std::size_t c = 0; c < f; ++c) g[p * f + c] += gy[c] / epsilon;
      }
    }
  });
}

/// Per-channel spatial mean of an h x w x f map.
inline Tensor global_average_pool(const Tensor& input) {
  detail::require_rank(input, 3, "global_average_pool");
  const std::size_t cells = input.dim(0) * input.dim(1);
  const std::size_t f = input.dim(2);
  std::vector<double> out(f, 0.0);
  const auto x = input.values();
  for (std::size_t p = 0; p < cells; ++p) {
    for (std::size_t c = 0; c < f; ++c) out[c] += x[p * f + c];
  }
  for (auto& v : out) v /= static_cast<double>(cells);
  return detail::make_result({f}, std::move(out), {input}, [cells, f](Node& n) {
    auto& g = n.inputs[0]->ensure_grad();
    const double inv = 1.0 / static_cast<double>(cells);
    for (std::size_t p = 0; p < cells; ++p) {
      for (std::size_t c = 0; c < f; ++c) g[p * f + c] += n.grad[c] * inv;
    }
  });
}

/// Broadcasts an f-vector to every cell of an h x w grid.
inline Tensor tile_spatial(const Tensor& v, std::size_t h, std::size_t w) {
  detail::require_rank(v, 1, "tile_spatial");
  const std::size_t f = v.dim(0);
  std::vector<double> out(h * w * f);
  for (std::size_t p = 0; p < h * w; ++p) {
    std::copy(v.values().begin(), v.values().end(), out.begin() + static_cast<long>(p * f));
  }
  return detail::make_result({h, w, f}, std::move(out), {v}, [h, w, f](Node& n) {
    auto& g = n.inputs[0]->ensure_grad();
    for (std::size_t p = 0; p < h * w; ++p) {
      for (std::size_t c = 0; c < f; ++c) g[c] += n.grad[p * f + c];
    }
  });
}

/// Concatenates two tensors along the last axis; leading extents must agree.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.rank() == 0 || a.rank() != b.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 1, b.shape().begin())) {
    throw ShapeError("concat_channels: " + shape_string(a.shape()) + " vs " +
                     shape_string(b.shape()));
  }
  const std::size_t fa = a.shape().back();
  const std::size_t fb = b.shape().back();
  const std::size_t cells = fa ? a.numel() / fa : b.numel() / std::max<std::size_t>(fb, 1);
  Shape shape = a.shape();
  shape.back() = fa + fb;
  std::vector<double> out(cells * (fa + fb));
  for (std::size_t p = 0; p < cells; ++p) {
    std::copy_n(a.values().data() + p * fa, fa, out.data() + p * (fa + fb));
    std::copy_n(b.values().data() + p * fb, fb, out.data() + p * (fa + fb) + fa);
  }
  return detail::make_result(std::move(shape), std::move(out), {a, b}, [cells, fa, fb](Node& n) {
    const std::size_t ft = fa + fb;
    if (detail::wants_grad(n, 0)) {
      auto& g = n.inputs[0]->ensure_grad();
      for (std::size_t p = 0; p < cells; ++p)
        for (std::size_t c = 0; c < fa; ++c) g[p * fa + c] += n.grad[p * ft + c];
    }
    if (detail::wants_grad(n, 1)) {
      auto& g = n.inputs[1]->ensure_grad();
      for (std::size_t p = 0; p < cells; ++p)
        for (std::size_t c = 0; c < fb; ++c) g[p * fb + c] += n.grad[p * ft + fa + c];
    }
  });
}

namespace detail {

struct BilinearTap {
  std::size_t index[4];
  double weight[4];
};

// Neighbours outside the source grid are clamped to the nearest edge cell.
inline BilinearTap bilinear_tap(GridCoord at, std::size_t h, std::size_t w) {
  const double fy = at.row - 0.5;
  const double fx = at.col - 0.5;
  const double y0f = std::floor(fy);
  const double x0f = std::floor(fx);
  const double ty = fy - y0f;
  const double tx = fx - x0f;
  auto clamp = [](double v, std::size_t n) {
    return static_cast<std::size_t>(std::clamp(v, 0.0, static_cast<double>(n - 1)));
  };
  const std::size_t y0 = clamp(y0f, h), y1 = clamp(y0f + 1.0, h);
  const std::size_t x0 = clamp(x0f, w), x1 = clamp(x0f + 1.0, w);
  return {{y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1},
          {(1 - ty) * (1 - tx), (1 - ty) * tx, ty * (1 - tx), ty * tx}};
}

}  // namespace detail

/// Samples an h_s x w_s x f source map at every grid cell. Invalid cells
/// produce zero fibers. Gradients flow into the source values only.
inline Tensor bilinear_sample(const Tensor& input, const MappingGrid& grid) {
  detail::require_rank(input, 3, "bilinear_sample");
  const std::size_t hs = input.dim(0), ws = input.dim(1), f = input.dim(2);
  if (grid.source_height != hs || grid.source_width != ws) {
    throw ShapeError("bilinear_sample: grid source extent does not match input " +
                     shape_string(input.shape()));
  }
  const std::size_t cells = grid.height * grid.width;
  std::vector<detail::BilinearTap> taps(cells);
  std::vector<double> out(cells * f, 0.0);
  const double* x = input.values().data();
  for (std::size_t p = 0; p < cells; ++p) {
    if (!grid.valid[p]) continue;
    taps[p] = detail::bilinear_tap(grid.coords[p], hs, ws);
    double* o = out.data() + p * f;
    for (int t = 0; t < 4; ++t) {
      const double wgt = taps[p].weight[t];
      const double* src = x + taps[p].index[t] * f;
      for (std::size_t c = 0; c < f; ++c) o[c] += wgt * src[c];
    }
  }
  return detail::make_result({grid.height, grid.width, f}, std::move(out), {input},
                             [f, cells, valid = grid.valid, taps = std::move(taps)](Node& n) {
    auto& g = n.inputs[0]->ensure_grad();
    for (std::size_t p = 0; p < cells; ++p) {
      if (!valid[p]) continue;
      const double* go = n.grad.data() + p * f;
      for (int t = 0; t < 4; ++t) {
        double* dst = g.data() + taps[p].index[t] * f;
        const double wgt = taps[p].weight[t];
        for (std::size_t c = 0; c < f; ++c) dst[c] += wgt * go[c];
      }
    }
  });
}

}  // namespace viewsynth
