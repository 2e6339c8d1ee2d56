#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "rvox/tensor.hpp"

namespace rvox::net {

// One 3D (de)convolution. Weight shapes:
//   conv:       [out_channels, in_channels, kz, ky, kx]
//   transposed: [in_channels, out_channels, kz, ky, kx]
// Activations are [n, c, z, y, x]. Zero padding, scalar stride.
struct ConvSpec {
  int in_channels = 1;
  int out_channels = 1;
  std::array<int, 3> kernel{3, 3, 3};  // kz, ky, kx
  int stride = 1;
  int padding = 0;
  bool transposed = false;

  bool operator==(const ConvSpec&) const = default;
};

inline std::vector<std::int64_t> weight_shape(const ConvSpec& s) {
  if (s.transposed)
    return {s.in_channels, s.out_channels, s.kernel[0], s.kernel[1], s.kernel[2]};
  return {s.out_channels, s.in_channels, s.kernel[0], s.kernel[1], s.kernel[2]};
}

inline std::vector<std::int64_t> bias_shape(const ConvSpec& s) {
  return {s.out_channels};
}

inline std::int64_t conv_out_dim(std::int64_t in, int k, int stride, int pad) {
  return (in + 2 * pad - k) / stride + 1;
}

inline std::int64_t deconv_out_dim(std::int64_t in, int k, int stride, int pad) {
  return (in - 1) * stride - 2 * pad + k;
}

// Output spatial dims for an input [n, c, z, y, x].
inline std::array<std::int64_t, 3> out_spatial(const ConvSpec& s,
                                               std::array<std::int64_t, 3> in) {
  std::array<std::int64_t, 3> o{};
  for (int a = 0; a < 3; ++a) {
    o[a] = s.transposed
               ? deconv_out_dim(in[a], s.kernel[a], s.stride, s.padding)
               : conv_out_dim(in[a], s.kernel[a], s.stride, s.padding);
    if (o[a] < 1)
      throw DomainError("shape error: non-positive conv output dim");
  }
  return o;
}

namespace detail {

template <typename T>
void check_layer_shapes(const Tensor<T>& x, const ConvSpec& s,
                        const Tensor<T>& w, const Tensor<T>& b) {
  if (x.shape.size() != 5)
    throw DomainError("shape error: activations must be 5-axis");
  if (x.shape[1] != s.in_channels)
    throw DomainError("shape error: input channels " +
                      std::to_string(x.shape[1]) + " != spec " +
                      std::to_string(s.in_channels));
  if (w.shape != weight_shape(s))
    throw DomainError("shape error: weight shape does not match spec");
  if (b.shape != bias_shape(s))
    throw DomainError("shape error: bias shape does not match spec");
}

// Smallest index o in [0, count) with o*st - pd + koff >= 0.
inline std::int64_t row_lo(std::int64_t count, int st, int pd, int koff) {
  std::int64_t lo = 0;
  while (lo < count && lo * st - pd + koff < 0) ++lo;
  return lo;
}

// One past the largest index o in [0, count) with o*st - pd + koff < limit.
inline std::int64_t row_hi(std::int64_t count, std::int64_t limit, int st,
                           int pd, int koff) {
  std::int64_t hi = count;
  while (hi > 0 && (hi - 1) * st - pd + koff >= limit) --hi;
  return hi;
}

}  // namespace detail

// Bounds checks are hoisted to the per-kernel-offset row ranges so the inner
// x loops are branch-free and contiguous where stride is 1.
template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const ConvSpec& s,
                         const Tensor<T>& w, const Tensor<T>& b) {
  if (s.transposed) throw DomainError("spec is transposed; use deconv3d_forward");
  detail::check_layer_shapes(x, s, w, b);
  const std::int64_t N = x.shape[0], C = x.shape[1];
  const std::int64_t Z = x.shape[2], Y = x.shape[3], X = x.shape[4];
  const auto [OZ, OY, OX] = out_spatial(s, {Z, Y, X});
  const std::int64_t OC = s.out_channels;
  const int kz = s.kernel[0], ky = s.kernel[1], kx = s.kernel[2];
  const int st = s.stride, pd = s.padding;

  Tensor<T> out({N, OC, OZ, OY, OX});
  const std::int64_t oplane = OZ * OY * OX;
  const std::int64_t xplane = Z * Y * X;
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t oc = 0; oc < OC; ++oc) {
      T* obase = &out.data[std::size_t((n * OC + oc) * oplane)];
      const T bias = b.data[std::size_t(oc)];
      for (std::int64_t i = 0; i < oplane; ++i) obase[i] = bias;
      for (std::int64_t ic = 0; ic < C; ++ic) {
        const T* xbase = &x.data[std::size_t((n * C + ic) * xplane)];
        const T* wbase =
            &w.data[std::size_t(((oc * C + ic) * kz) * ky * kx)];
        for (int dz = 0; dz < kz; ++dz) {
          const std::int64_t zlo = detail::row_lo(OZ, st, pd, dz);
          const std::int64_t zhi = detail::row_hi(OZ, Z, st, pd, dz);
          for (int dy = 0; dy < ky; ++dy) {
            const std::int64_t ylo = detail::row_lo(OY, st, pd, dy);
            const std::int64_t yhi = detail::row_hi(OY, Y, st, pd, dy);
            for (int dx = 0; dx < kx; ++dx) {
              const std::int64_t xlo = detail::row_lo(OX, st, pd, dx);
              const std::int64_t xhi = detail::row_hi(OX, X, st, pd, dx);
              if (xlo >= xhi) continue;
              const T wv = wbase[std::size_t((dz * ky + dy) * kx + dx)];
              for (std::int64_t oz = zlo; oz < zhi; ++oz) {
                const std::int64_t iz = oz * st - pd + dz;
                for (std::int64_t oy = ylo; oy < yhi; ++oy) {
                  const std::int64_t iy = oy * st - pd + dy;
                  const T* xrow =
                      xbase + (iz * Y + iy) * X + (xlo * st - pd + dx);
                  T* orow = obase + (oz * OY + oy) * OX;
                  if (st == 1) {
                    for (std::int64_t ox = xlo; ox < xhi; ++ox)
                      orow[ox] += wv * xrow[ox - xlo];
                  } else {
                    for (std::int64_t ox = xlo; ox < xhi; ++ox)
                      orow[ox] += wv * xrow[(ox - xlo) * st];
                  }
                }
              }
            }
          }
        }
      }
    }
  return out;
}

template <typename T>
struct ConvGrads {
  Tensor<T> input;
  Tensor<T> weight;
  Tensor<T> bias;
};

template <typename T>
ConvGrads<T> conv3d_backward(const Tensor<T>& x, const ConvSpec& s,
                             const Tensor<T>& w, const Tensor<T>& g) {
  if (s.transposed) throw DomainError("spec is transposed; use deconv3d_backward");
  const std::int64_t N = x.shape[0], C = x.shape[1];
  const std::int64_t Z = x.shape[2], Y = x.shape[3], X = x.shape[4];
  const auto [OZ, OY, OX] = out_spatial(s, {Z, Y, X});
  const std::int64_t OC = s.out_channels;
  if (g.shape != std::vector<std::int64_t>{N, OC, OZ, OY, OX})
    throw DomainError("shape error: upstream grad does not match conv output");
  const int kz = s.kernel[0], ky = s.kernel[1], kx = s.kernel[2];
  const int st = s.stride, pd = s.padding;

  ConvGrads<T> out;
  out.input = zeros_like(x);
  out.weight = Tensor<T>(weight_shape(s));
  out.bias = Tensor<T>(bias_shape(s));
  const std::int64_t oplane = OZ * OY * OX;
  const std::int64_t xplane = Z * Y * X;

  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t oc = 0; oc < OC; ++oc) {
      const T* gbase = &g.data[std::size_t((n * OC + oc) * oplane)];
      T acc = T(0);
      for (std::int64_t i = 0; i < oplane; ++i) acc += gbase[i];
      out.bias.data[std::size_t(oc)] += acc;
    }

  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t oc = 0; oc < OC; ++oc) {
      const T* gbase = &g.data[std::size_t((n * OC + oc) * oplane)];
      for (std::int64_t ic = 0; ic < C; ++ic) {
        const T* xbase = &x.data[std::size_t((n * C + ic) * xplane)];
        T* gibase = &out.input.data[std::size_t((n * C + ic) * xplane)];
        const T* wbase = &w.data[std::size_t(((oc * C + ic) * kz) * ky * kx)];
        T* gwbase =
            &out.weight.data[std::size_t(((oc * C + ic) * kz) * ky * kx)];
        for (int dz = 0; dz < kz; ++dz) {
          const std::int64_t zlo = detail::row_lo(OZ, st, pd, dz);
          const std::int64_t zhi = detail::row_hi(OZ, Z, st, pd, dz);
          for (int dy = 0; dy < ky; ++dy) {
            const std::int64_t ylo = detail::row_lo(OY, st, pd, dy);
            const std::int64_t yhi = detail::row_hi(OY, Y, st, pd, dy);
            for (int dx = 0; dx < kx; ++dx) {
              const std::int64_t xlo = detail::row_lo(OX, st, pd, dx);
              const std::int64_t xhi = detail::row_hi(OX, X, st, pd, dx);
              if (xlo >= xhi || zlo >= zhi || ylo >= yhi) continue;
              const T wv = wbase[std::size_t((dz * ky + dy) * kx + dx)];
              T wacc = T(0);
              for (std::int64_t oz = zlo; oz < zhi; ++oz) {
                const std::int64_t iz = oz * st - pd + dz;
                for (std::int64_t oy = ylo; oy < yhi; ++oy) {
                  const std::int64_t iy = oy * st - pd + dy;
                  const T* xrow =
                      xbase + (iz * Y + iy) * X + (xlo * st - pd + dx);
                  T* girow =
                      gibase + (iz * Y + iy) * X + (xlo * st - pd + dx);
                  const T* grow = gbase + (oz * OY + oy) * OX;
                  if (st == 1) {
                    for (std::int64_t ox = xlo; ox < xhi; ++ox) {
                      const T gv = grow[ox];
                      wacc += gv * xrow[ox - xlo];
                      girow[ox - xlo] += gv * wv;
                    }
                  } else {
                    for (std::int64_t ox = xlo; ox < xhi; ++ox) {
                      const T gv = grow[ox];
                      wacc += gv * xrow[(ox - xlo) * st];
                      girow[(ox - xlo) * st] += gv * wv;
                    }
                  }
                }
              }
              gwbase[std::size_t((dz * ky + dy) * kx + dx)] += wacc;
            }
          }
        }
      }
    }
  return out;
}

// Transposed convolution: out[i*st - pd + k] += x[i] * w. The scatter order
// is fixed (single-threaded, row-major), so results are deterministic.
template <typename T>
Tensor<T> deconv3d_forward(const Tensor<T>& x, const ConvSpec& s,
                           const Tensor<T>& w, const Tensor<T>& b) {
  if (!s.transposed) throw DomainError("spec is not transposed; use conv3d_forward");
  detail::check_layer_shapes(x, s, w, b);
  const std::int64_t N = x.shape[0], C = x.shape[1];
  const std::int64_t Z = x.shape[2], Y = x.shape[3], X = x.shape[4];
  const auto [OZ, OY, OX] = out_spatial(s, {Z, Y, X});
  const std::int64_t OC = s.out_channels;
  const int kz = s.kernel[0], ky = s.kernel[1], kx = s.kernel[2];
  const int st = s.stride, pd = s.padding;

  Tensor<T> out({N, OC, OZ, OY, OX});
  const std::int64_t oplane = OZ * OY * OX;
  const std::int64_t xplane = Z * Y * X;
  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t oc = 0; oc < OC; ++oc) {
      T* obase = &out.data[std::size_t((n * OC + oc) * oplane)];
      const T bias = b.data[std::size_t(oc)];
      for (std::int64_t i = 0; i < oplane; ++i) obase[i] = bias;
      for (std::int64_t ic = 0; ic < C; ++ic) {
        const T* xbase = &x.data[std::size_t((n * C + ic) * xplane)];
        const T* wbase =
            &w.data[std::size_t(((ic * OC + oc) * kz) * ky * kx)];
        for (int dz = 0; dz < kz; ++dz) {
          // input rows whose scatter target oz = iz*st - pd + dz is in range
          const std::int64_t zlo = detail::row_lo(Z, st, pd, dz);
          const std::int64_t zhi = detail::row_hi(Z, OZ, st, pd, dz);
          for (int dy = 0; dy < ky; ++dy) {
            const std::int64_t ylo = detail::row_lo(Y, st, pd, dy);
            const std::int64_t yhi = detail::row_hi(Y, OY, st, pd, dy);
            for (int dx = 0; dx < kx; ++dx) {
              const std::int64_t xlo = detail::row_lo(X, st, pd, dx);
              const std::int64_t xhi = detail::row_hi(X, OX, st, pd, dx);
              if (xlo >= xhi || zlo >= zhi || ylo >= yhi) continue;
              const T wv = wbase[std::size_t((dz * ky + dy) * kx + dx)];
              for (std::int64_t iz = zlo; iz < zhi; ++iz) {
                const std::int64_t oz = iz * st - pd + dz;
                for (std::int64_t iy = ylo; iy < yhi; ++iy) {
                  const std::int64_t oy = iy * st - pd + dy;
                  const T* xrow = xbase + (iz * Y + iy) * X;
                  T* orow =
                      obase + (oz * OY + oy) * OX + (xlo * st - pd + dx);
                  if (st == 1) {
                    for (std::int64_t ix = xlo; ix < xhi; ++ix)
                      orow[ix - xlo] += wv * xrow[ix];
                  } else {
                    for (std::int64_t ix = xlo; ix < xhi; ++ix)
                      orow[(ix - xlo) * st] += wv * xrow[ix];
                  }
                }
              }
            }
          }
        }
      }
    }
  return out;
}

template <typename T>
ConvGrads<T> deconv3d_backward(const Tensor<T>& x, const ConvSpec& s,
                               const Tensor<T>& w, const Tensor<T>& g) {
  if (!s.transposed) throw DomainError("spec is not transposed; use conv3d_backward");
  const std::int64_t N = x.shape[0], C = x.shape[1];
  const std::int64_t Z = x.shape[2], Y = x.shape[3], X = x.shape[4];
  const auto [OZ, OY, OX] = out_spatial(s, {Z, Y, X});
  const std::int64_t OC = s.out_channels;
  if (g.shape != std::vector<std::int64_t>{N, OC, OZ, OY, OX})
    throw DomainError("shape error: upstream grad does not match deconv output");
  const int kz = s.kernel[0], ky = s.kernel[1], kx = s.kernel[2];
  const int st = s.stride, pd = s.padding;

  ConvGrads<T> out;
  out.input = zeros_like(x);
  out.weight = Tensor<T>(weight_shape(s));
  out.bias = Tensor<T>(bias_shape(s));
  const std::int64_t oplane = OZ * OY * OX;
  const std::int64_t xplane = Z * Y * X;

  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t oc = 0; oc < OC; ++oc) {
      const T* gbase = &g.data[std::size_t((n * OC + oc) * oplane)];
      T acc = T(0);
      for (std::int64_t i = 0; i < oplane; ++i) acc += gbase[i];
      out.bias.data[std::size_t(oc)] += acc;
    }

  for (std::int64_t n = 0; n < N; ++n)
    for (std::int64_t ic = 0; ic < C; ++ic) {
      const T* xbase = &x.data[std::size_t((n * C + ic) * xplane)];
      T* gibase = &out.input.data[std::size_t((n * C + ic) * xplane)];
      for (std::int64_t oc = 0; oc < OC; ++oc) {
        const T* gbase = &g.data[std::size_t((n * OC + oc) * oplane)];
        const T* wbase = &w.data[std::size_t(((ic * OC + oc) * kz) * ky * kx)];
        T* gwbase =
            &out.weight.data[std::size_t(((ic * OC + oc) * kz) * ky * kx)];
        for (int dz = 0; dz < kz; ++dz) {
          const std::int64_t zlo = detail::row_lo(Z, st, pd, dz);
          const std::int64_t zhi = detail::row_hi(Z, OZ, st, pd, dz);
          for (int dy = 0; dy < ky; ++dy) {
            const std::int64_t ylo = detail::row_lo(Y, st, pd, dy);
            const std::int64_t yhi = detail::row_hi(Y, OY, st, pd, dy);
            for (int dx = 0; dx < kx; ++dx) {
              const std::int64_t xlo = detail::row_lo(X, st, pd, dx);
              const std::int64_t xhi = detail::row_hi(X, OX, st, pd, dx);
              if (xlo >= xhi || zlo >= zhi || ylo >= yhi) continue;
              const T wv = wbase[std::size_t((dz * ky + dy) * kx + dx)];
              T wacc = T(0);
              for (std::int64_t iz = zlo; iz < zhi; ++iz) {
                const std::int64_t oz = iz * st - pd + dz;
                for (std::int64_t iy = ylo; iy < yhi; ++iy) {
                  const std::int64_t oy = iy * st - pd + dy;
                  const T* xrow = xbase + (iz * Y + iy) * X;
                  T* girow = gibase + (iz * Y + iy) * X;
                  const T* grow =
                      gbase + (oz * OY + oy) * OX + (xlo * st - pd + dx);
                  if (st == 1) {
                    for (std::int64_t ix = xlo; ix < xhi; ++ix) {
                      const T gv = grow[ix - xlo];
                      wacc += gv * xrow[ix];
                      girow[ix] += gv * wv;
                    }
                  } else {
                    for (std::int64_t ix = xlo; ix < xhi; ++ix) {
                      const T gv = grow[(ix - xlo) * st];
                      wacc += gv * xrow[ix];
                      girow[ix] += gv * wv;
                    }
                  }
                }
              }
              gwbase[std::size_t((dz * ky + dy) * kx + dx)] += wacc;
            }
          }
        }
      }
    }
  return out;
}

}  // namespace rvox::net
