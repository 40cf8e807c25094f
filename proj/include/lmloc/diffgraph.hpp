#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <stdexcept>
#include <unordered_set>
#include <vector>

#include "lmloc/memtrack.hpp"
#include "lmloc/volume.hpp"

namespace lmloc {

// Physical frame of a feature map: where voxel (0,0,0) sits and how far
// apart voxel centers are. This is what turns heatmap weights into mm.
struct GridGeometry {
  Vec3 spacing{1, 1, 1};
  Vec3 origin{0, 0, 0};
};

struct Shape4 {
  int c = 1, nx = 1, ny = 1, nz = 1;
  bool operator==(const Shape4&) const = default;
  std::size_t numel() const {
    return static_cast<std::size_t>(c) * nx * ny * nz;
  }
  std::size_t spatial() const {
    return static_cast<std::size_t>(nx) * ny * nz;
  }
};

// One value buffer plus its gradient accumulator on the reverse-mode tape.
// `grad` persists across backward passes (+= semantics); `grad_in` is the
// per-pass propagation buffer managed by Tape::backward.
template <class T>
struct Node {
  Shape4 shape;
  Buffer<T> value;
  Buffer<T> grad;
  Buffer<T> grad_in;
  bool requires_grad = true;
  int tape_index = -1;  // -1 for external leaves (parameters)
  std::vector<Node*> parents;
  std::function<void()> backward_fn;

  std::size_t idx(int c, int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(shape.nx) *
               (static_cast<std::size_t>(y) +
                static_cast<std::size_t>(shape.ny) *
                    (static_cast<std::size_t>(z) +
                     static_cast<std::size_t>(shape.nz) * c));
  }

  T v(int c, int x, int y, int z) const { return value[idx(c, x, y, z)]; }

  void alloc(Shape4 s) {
    shape = s;
    value.assign(s.numel(), T(0));
  }
  void ensure_grad_in() {
    if (grad_in.size() != value.size()) grad_in.assign(value.size(), T(0));
  }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
  void zero_grad() { grad.assign(value.size(), T(0)); }
};

template <class T>
class Tape {
 public:
  Node<T>* make(Shape4 s, bool requires_grad = true) {
    auto n = std::make_unique<Node<T>>();
    n->alloc(s);
    n->requires_grad = requires_grad;
    n->tape_index = static_cast<int>(nodes_.size());
    nodes_.push_back(std::move(n));
    return nodes_.back().get();
  }

  Node<T>* leaf(Shape4 s, const T* data, bool requires_grad = true) {
    Node<T>* n = make(s, requires_grad);
    std::copy(data, data + s.numel(), n->value.begin());
    n->backward_fn = nullptr;
    return n;
  }

  // Reverse pass seeded with an explicit cotangent on `root`. Gradients of
  // every reachable node (tape nodes and external parameter leaves alike)
  // are accumulated into .grad, so calling backward twice doubles them.
  void backward(Node<T>* root, const std::vector<T>& seed) {
    if (root->tape_index < 0)
      throw std::invalid_argument("backward: root must live on this tape");
    if (seed.size() != root->value.size())
      throw std::invalid_argument("backward: seed size mismatch");
    std::unordered_set<Node<T>*> touched;
    for (int i = root->tape_index; i >= 0; --i) {
      Node<T>* n = nodes_[static_cast<std::size_t>(i)].get();
      n->grad_in.clear();
      touched.insert(n);
      for (Node<T>* p : n->parents)
        if (p->tape_index < 0) {
          p->grad_in.clear();
          touched.insert(p);
        }
    }
    root->ensure_grad_in();
    for (std::size_t i = 0; i < seed.size(); ++i) root->grad_in[i] += seed[i];
    for (int i = root->tape_index; i >= 0; --i) {
      Node<T>* n = nodes_[static_cast<std::size_t>(i)].get();
      if (n->backward_fn && !n->grad_in.empty()) n->backward_fn();
    }
    for (Node<T>* n : touched) {
      if (n->requires_grad && !n->grad_in.empty()) {
        n->ensure_grad();
        for (std::size_t i = 0; i < n->grad.size(); ++i)
          n->grad[i] += n->grad_in[i];
      }
      n->grad_in.clear();
    }
  }

  // Scalar convenience: seed with 1.
  void backward(Node<T>* root) {
    if (root->value.size() != 1)
      throw std::invalid_argument("backward: implicit seed requires a scalar root");
    backward(root, std::vector<T>{T(1)});
  }

  void clear() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::vector<std::unique_ptr<Node<T>>> nodes_;
};

namespace detail {
template <class T>
inline void accum(Node<T>* p, std::size_t i, T g) {
  if (!p->requires_grad) return;
  p->grad_in[i] += g;
}
template <class T>
inline void prep(Node<T>* p) {
  if (p->requires_grad) p->ensure_grad_in();
}
}  // namespace detail

// ---------------------------------------------------------------------------
// conv3d: cross-correlation with zero padding. Weights are stored as a node
// of shape (cout*cin, k, k, k); bias as (cout, 1, 1, 1).
// ---------------------------------------------------------------------------
template <class T>
Node<T>* conv3d(Tape<T>& tape, Node<T>* x, Node<T>* w, Node<T>* b, int stride = 1,
                int pad = 0) {
  const int cin = x->shape.c;
  const int k = w->shape.nx;
  if (w->shape.ny != k || w->shape.nz != k || k % 2 == 0)
    throw std::invalid_argument("conv3d: kernel must be k*k*k with k odd");
  if (w->shape.c % cin != 0)
    throw std::invalid_argument("conv3d: weight channels incompatible with input");
  const int cout = w->shape.c / cin;
  if (b->shape.c != cout || b->shape.spatial() != 1)
    throw std::invalid_argument("conv3d: bias shape mismatch");
  if (stride < 1) throw std::invalid_argument("conv3d: stride must be >= 1");
  auto osz = [&](int n) { return (n + 2 * pad - k) / stride + 1; };
  Shape4 os{cout, osz(x->shape.nx), osz(x->shape.ny), osz(x->shape.nz)};
  if (os.nx < 1 || os.ny < 1 || os.nz < 1)
    throw std::invalid_argument("conv3d: output would be empty");

  Node<T>* out = tape.make(os);
  // weight index for (co, ci, kx, ky, kz)
  auto widx = [=](int co, int ci, int kx, int ky, int kz) {
    return w->idx(co * cin + ci, kx, ky, kz);
  };
  for (int co = 0; co < cout; ++co) {
    const T bias = b->value[static_cast<std::size_t>(co)];
    for (int oz = 0; oz < os.nz; ++oz)
      for (int oy = 0; oy < os.ny; ++oy)
        for (int ox = 0; ox < os.nx; ++ox) {
          T acc = bias;
          for (int ci = 0; ci < cin; ++ci)
            for (int kz = 0; kz < k; ++kz) {
              const int iz = oz * stride - pad + kz;
              if (iz < 0 || iz >= x->shape.nz) continue;
              for (int ky = 0; ky < k; ++ky) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= x->shape.ny) continue;
                for (int kx = 0; kx < k; ++kx) {
                  const int ix = ox * stride - pad + kx;
                  if (ix < 0 || ix >= x->shape.nx) continue;
                  acc += x->v(ci, ix, iy, iz) * w->value[widx(co, ci, kx, ky, kz)];
                }
              }
            }
          out->value[out->idx(co, ox, oy, oz)] = acc;
        }
  }

  out->parents = {x, w, b};
  out->backward_fn = [=]() {
    detail::prep(x);
    detail::prep(w);
    detail::prep(b);
    for (int co = 0; co < cout; ++co)
      for (int oz = 0; oz < os.nz; ++oz)
        for (int oy = 0; oy < os.ny; ++oy)
          for (int ox = 0; ox < os.nx; ++ox) {
            const T g = out->grad_in[out->idx(co, ox, oy, oz)];
            if (g == T(0)) continue;
            detail::accum(b, static_cast<std::size_t>(co), g);
            for (int ci = 0; ci < cin; ++ci)
              for (int kz = 0; kz < k; ++kz) {
                const int iz = oz * stride - pad + kz;
                if (iz < 0 || iz >= x->shape.nz) continue;
                for (int ky = 0; ky < k; ++ky) {
                  const int iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= x->shape.ny) continue;
                  for (int kx = 0; kx < k; ++kx) {
                    const int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= x->shape.nx) continue;
                    detail::accum(x, x->idx(ci, ix, iy, iz),
                                  g * w->value[widx(co, ci, kx, ky, kz)]);
                    detail::accum(w, widx(co, ci, kx, ky, kz),
                                  g * x->v(ci, ix, iy, iz));
                  }
                }
              }
          }
  };
  return out;
}

template <class T>
Node<T>* relu(Tape<T>& tape, Node<T>* x) {
  Node<T>* out = tape.make(x->shape);
  for (std::size_t i = 0; i < x->value.size(); ++i)
    out->value[i] = x->value[i] > T(0) ? x->value[i] : T(0);
  out->parents = {x};
  out->backward_fn = [=]() {
    detail::prep(x);
    for (std::size_t i = 0; i < x->value.size(); ++i)
      if (x->value[i] > T(0)) detail::accum(x, i, out->grad_in[i]);
  };
  return out;
}

// 2x max pooling; gradient routes to the argmax voxel, ties broken by the
// lowest linear index.
template <class T>
Node<T>* maxpool2(Tape<T>& tape, Node<T>* x) {
  if (x->shape.nx % 2 || x->shape.ny % 2 || x->shape.nz % 2)
    throw std::invalid_argument("maxpool2: spatial dims must be even");
  Shape4 os{x->shape.c, x->shape.nx / 2, x->shape.ny / 2, x->shape.nz / 2};
  Node<T>* out = tape.make(os);
  auto argmax = std::make_shared<std::vector<std::size_t>>(os.numel());
  for (int c = 0; c < os.c; ++c)
    for (int oz = 0; oz < os.nz; ++oz)
      for (int oy = 0; oy < os.ny; ++oy)
        for (int ox = 0; ox < os.nx; ++ox) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_i = 0;
          // scan in increasing linear index order so strict > keeps the
          // lowest-index maximum
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const std::size_t i =
                    x->idx(c, 2 * ox + dx, 2 * oy + dy, 2 * oz + dz);
                if (x->value[i] > best) {
                  best = x->value[i];
                  best_i = i;
                }
              }
          const std::size_t o = out->idx(c, ox, oy, oz);
          out->value[o] = best;
          (*argmax)[o] = best_i;
        }
  out->parents = {x};
  out->backward_fn = [=]() {
    detail::prep(x);
    for (std::size_t o = 0; o < out->value.size(); ++o)
      detail::accum(x, (*argmax)[o], out->grad_in[o]);
  };
  return out;
}

// Doubles every spatial dim; output voxel j samples the input trilinearly at
// (j + 0.5)/2 - 0.5, clamped at the borders.
template <class T>
Node<T>* trilinear_upsample2(Tape<T>& tape, Node<T>* x) {
  Shape4 os{x->shape.c, x->shape.nx * 2, x->shape.ny * 2, x->shape.nz * 2};
  Node<T>* out = tape.make(os);
  auto axis = [](int j, int n, int& i0, T& f) {
    T u = (T(j) + T(0.5)) / T(2) - T(0.5);
    if (u < T(0)) u = T(0);
    if (u > T(n - 1)) u = T(n - 1);
    i0 = static_cast<int>(std::floor(static_cast<double>(u)));
    if (i0 > n - 2) i0 = std::max(0, n - 2);
    f = u - T(i0);
  };
  auto apply = [=](auto&& visit) {
    for (int c = 0; c < os.c; ++c)
      for (int oz = 0; oz < os.nz; ++oz)
        for (int oy = 0; oy < os.ny; ++oy)
          for (int ox = 0; ox < os.nx; ++ox) {
            int x0, y0, z0;
            T fx, fy, fz;
            axis(ox, x->shape.nx, x0, fx);
            axis(oy, x->shape.ny, y0, fy);
            axis(oz, x->shape.nz, z0, fz);
            const int x1 = std::min(x0 + 1, x->shape.nx - 1);
            const int y1 = std::min(y0 + 1, x->shape.ny - 1);
            const int z1 = std::min(z0 + 1, x->shape.nz - 1);
            const std::size_t o = out->idx(c, ox, oy, oz);
            for (int dz = 0; dz < 2; ++dz)
              for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                  const T wgt = (dx ? fx : T(1) - fx) * (dy ? fy : T(1) - fy) *
                                (dz ? fz : T(1) - fz);
                  if (wgt == T(0)) continue;
                  visit(o, x->idx(c, dx ? x1 : x0, dy ? y1 : y0, dz ? z1 : z0),
                        wgt);
                }
          }
  };
  apply([&](std::size_t o, std::size_t i, T wgt) {
    out->value[o] += wgt * x->value[i];
  });
  out->parents = {x};
  out->backward_fn = [=]() {
    detail::prep(x);
    apply([&](std::size_t o, std::size_t i, T wgt) {
      detail::accum(x, i, wgt * out->grad_in[o]);
    });
  };
  return out;
}

template <class T>
Node<T>* concat_channels(Tape<T>& tape, Node<T>* a, Node<T>* b) {
  if (a->shape.nx != b->shape.nx || a->shape.ny != b->shape.ny ||
      a->shape.nz != b->shape.nz)
    throw std::invalid_argument("concat_channels: spatial dims differ");
  Shape4 os{a->shape.c + b->shape.c, a->shape.nx, a->shape.ny, a->shape.nz};
  Node<T>* out = tape.make(os);
  const std::size_t na = a->value.size();
  std::copy(a->value.begin(), a->value.end(), out->value.begin());
  std::copy(b->value.begin(), b->value.end(), out->value.begin() + na);
  out->parents = {a, b};
  out->backward_fn = [=]() {
    detail::prep(a);
    detail::prep(b);
    for (std::size_t i = 0; i < na; ++i) detail::accum(a, i, out->grad_in[i]);
    for (std::size_t i = 0; i < b->value.size(); ++i)
      detail::accum(b, i, out->grad_in[na + i]);
  };
  return out;
}

template <class T>
Node<T>* slice_channel(Tape<T>& tape, Node<T>* x, int c) {
  if (c < 0 || c >= x->shape.c)
    throw std::invalid_argument("slice_channel: channel out of range");
  Shape4 os{1, x->shape.nx, x->shape.ny, x->shape.nz};
  Node<T>* out = tape.make(os);
  const std::size_t off = static_cast<std::size_t>(c) * os.spatial();
  std::copy(x->value.begin() + off, x->value.begin() + off + os.numel(),
            out->value.begin());
  out->parents = {x};
  out->backward_fn = [=]() {
    detail::prep(x);
    for (std::size_t i = 0; i < out->value.size(); ++i)
      detail::accum(x, off + i, out->grad_in[i]);
  };
  return out;
}

// Softmax over all voxels of a single-channel map, with max subtraction.
// The result is a valid weighting for the center-of-mass readout: strictly
// positive and summing to 1.
template <class T>
Node<T>* spatial_softmax(Tape<T>& tape, Node<T>* x, T temperature) {
  if (x->shape.c != 1)
    throw std::invalid_argument("spatial_softmax: single-channel input required");
  if (!(temperature > T(0)))
    throw std::invalid_argument("spatial_softmax: temperature must be > 0");
  Node<T>* out = tape.make(x->shape);
  T mx = -std::numeric_limits<T>::infinity();
  for (T v : x->value) mx = std::max(mx, v);
  T sum = T(0);
  for (std::size_t i = 0; i < x->value.size(); ++i) {
    out->value[i] = std::exp((x->value[i] - mx) / temperature);
    sum += out->value[i];
  }
  const T inv = T(1) / sum;
  for (T& v : out->value) v *= inv;
  out->parents = {x};
  out->backward_fn = [=]() {
    detail::prep(x);
    T dot = T(0);
    for (std::size_t i = 0; i < out->value.size(); ++i)
      dot += out->grad_in[i] * out->value[i];
    for (std::size_t i = 0; i < out->value.size(); ++i)
      detail::accum(x, i,
                    out->value[i] * (out->grad_in[i] - dot) / temperature);
  };
  return out;
}

// Weighted average of voxel-center world coordinates. Output is a (3,1,1,1)
// node holding mm coordinates. The origin enters additively after the local
// average so that translating the geometry translates the output exactly.
template <class T>
Node<T>* center_of_mass(Tape<T>& tape, Node<T>* w, const GridGeometry& geom) {
  if (w->shape.c != 1)
    throw std::invalid_argument("center_of_mass: single-channel weights required");
  T wsum = T(0);
  for (T v : w->value) wsum += v;
  if (!(wsum > T(0)))
    throw std::invalid_argument("center_of_mass: weight sum must be > 0 (degenerate heatmap)");
  Node<T>* out = tape.make(Shape4{3, 1, 1, 1});
  double local[3] = {0, 0, 0};
  for (int z = 0; z < w->shape.nz; ++z)
    for (int y = 0; y < w->shape.ny; ++y)
      for (int x = 0; x < w->shape.nx; ++x) {
        const double wv = static_cast<double>(w->v(0, x, y, z));
        local[0] += wv * x * geom.spacing.x;
        local[1] += wv * y * geom.spacing.y;
        local[2] += wv * z * geom.spacing.z;
      }
  for (int d = 0; d < 3; ++d)
    out->value[static_cast<std::size_t>(d)] =
        static_cast<T>(local[d] / static_cast<double>(wsum)) +
        static_cast<T>(geom.origin[d]);
  out->parents = {w};
  const T inv = T(1) / wsum;
  out->backward_fn = [=]() {
    detail::prep(w);
    const T g0 = out->grad_in[0], g1 = out->grad_in[1], g2 = out->grad_in[2];
    for (int z = 0; z < w->shape.nz; ++z)
      for (int y = 0; y < w->shape.ny; ++y)
        for (int x = 0; x < w->shape.nx; ++x) {
          // d c[d] / d w_v = (g_v[d] - c[d]) / sum(w)
          const T gx = static_cast<T>(geom.origin.x + x * geom.spacing.x);
          const T gy = static_cast<T>(geom.origin.y + y * geom.spacing.y);
          const T gz = static_cast<T>(geom.origin.z + z * geom.spacing.z);
          detail::accum(w, w->idx(0, x, y, z),
                        inv * (g0 * (gx - out->value[0]) +
                               g1 * (gy - out->value[1]) +
                               g2 * (gz - out->value[2])));
        }
  };
  return out;
}

// ---------------------------------------------------------------------------
// diff_crop_resample: extracts a fixed-size patch at a target spacing,
// centered on a (differentiable) world point. Output voxel j samples the
// source trilinearly at center + (j - (dims-1)/2) * out_spacing; samples
// outside the source take `fill`. Gradients flow to the source values and,
// through the trilinear weights, to the center coordinates.
// ---------------------------------------------------------------------------
template <class T>
Node<T>* diff_crop_resample(Tape<T>& tape, Node<T>* src, const GridGeometry& src_geom,
                            Node<T>* center, Dims3 out_dims, Vec3 out_spacing,
                            T fill = T(0)) {
  if (center->shape.numel() != 3)
    throw std::invalid_argument("diff_crop_resample: center must be a 3-vector node");
  if (out_dims.nx < 1 || out_dims.ny < 1 || out_dims.nz < 1)
    throw std::invalid_argument("diff_crop_resample: out_dims must be >= 1");
  if (!(out_spacing.x > 0 && out_spacing.y > 0 && out_spacing.z > 0))
    throw std::invalid_argument("diff_crop_resample: out_spacing must be > 0");

  Shape4 os{src->shape.c, out_dims.nx, out_dims.ny, out_dims.nz};
  Node<T>* out = tape.make(os);

  const Vec3 half{0.5 * (out_dims.nx - 1) * out_spacing.x,
                  0.5 * (out_dims.ny - 1) * out_spacing.y,
                  0.5 * (out_dims.nz - 1) * out_spacing.z};
  const double cx = static_cast<double>(center->value[0]);
  const double cy = static_cast<double>(center->value[1]);
  const double cz = static_cast<double>(center->value[2]);
  const int snx = src->shape.nx, sny = src->shape.ny, snz = src->shape.nz;

  // visit(out_index, corner ix/iy/iz valid?, trilinear weight, dW/dv per axis)
  auto sweep = [=](auto&& emit) {
    for (int oz = 0; oz < os.nz; ++oz)
      for (int oy = 0; oy < os.ny; ++oy)
        for (int ox = 0; ox < os.nx; ++ox) {
          const double px = cx + ox * out_spacing.x - half.x;
          const double py = cy + oy * out_spacing.y - half.y;
          const double pz = cz + oz * out_spacing.z - half.z;
          const double vx = (px - src_geom.origin.x) / src_geom.spacing.x;
          const double vy = (py - src_geom.origin.y) / src_geom.spacing.y;
          const double vz = (pz - src_geom.origin.z) / src_geom.spacing.z;
          const int x0 = static_cast<int>(std::floor(vx));
          const int y0 = static_cast<int>(std::floor(vy));
          const int z0 = static_cast<int>(std::floor(vz));
          const double fx = vx - x0, fy = vy - y0, fz = vz - z0;
          for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const double wx = dx ? fx : 1.0 - fx;
                const double wy = dy ? fy : 1.0 - fy;
                const double wz = dz ? fz : 1.0 - fz;
                const int ix = x0 + dx, iy = y0 + dy, iz = z0 + dz;
                const bool in = ix >= 0 && ix < snx && iy >= 0 && iy < sny &&
                                iz >= 0 && iz < snz;
                const double dwx = (dx ? 1.0 : -1.0) * wy * wz;
                const double dwy = (dy ? 1.0 : -1.0) * wx * wz;
                const double dwz = (dz ? 1.0 : -1.0) * wx * wy;
                emit(ox, oy, oz, in, ix, iy, iz, wx * wy * wz, dwx, dwy, dwz);
              }
        }
  };

  sweep([&](int ox, int oy, int oz, bool in, int ix, int iy, int iz, double wgt,
            double, double, double) {
    for (int c = 0; c < os.c; ++c) {
      const double val = in ? static_cast<double>(src->v(c, ix, iy, iz))
                            : static_cast<double>(fill);
      out->value[out->idx(c, ox, oy, oz)] += static_cast<T>(wgt * val);
    }
  });

  out->parents = {src, center};
  out->backward_fn = [=]() {
    detail::prep(src);
    detail::prep(center);
    double dc[3] = {0, 0, 0};
    sweep([&](int ox, int oy, int oz, bool in, int ix, int iy, int iz,
              double wgt, double dwx, double dwy, double dwz) {
      for (int c = 0; c < os.c; ++c) {
        const double g =
            static_cast<double>(out->grad_in[out->idx(c, ox, oy, oz)]);
        if (g == 0.0) continue;
        const double val = in ? static_cast<double>(src->v(c, ix, iy, iz))
                              : static_cast<double>(fill);
        if (in) detail::accum(src, src->idx(c, ix, iy, iz), static_cast<T>(g * wgt));
        // chain rule: d sample / d center = d sample / d voxel coords / spacing
        dc[0] += g * val * dwx / src_geom.spacing.x;
        dc[1] += g * val * dwy / src_geom.spacing.y;
        dc[2] += g * val * dwz / src_geom.spacing.z;
      }
    });
    for (int d = 0; d < 3; ++d)
      detail::accum(center, static_cast<std::size_t>(d), static_cast<T>(dc[d]));
  };
  return out;
}

// ---------------------------------------------------------------------------
// Small arithmetic helpers used to compose losses and shift crop frames.
// ---------------------------------------------------------------------------

template <class T>
Node<T>* point_leaf(Tape<T>& tape, const Vec3& p, bool requires_grad = false) {
  const T v[3] = {static_cast<T>(p.x), static_cast<T>(p.y), static_cast<T>(p.z)};
  return tape.leaf(Shape4{3, 1, 1, 1}, v, requires_grad);
}

template <class T>
Vec3 point_value(const Node<T>* p) {
  return {static_cast<double>(p->value[0]), static_cast<double>(p->value[1]),
          static_cast<double>(p->value[2])};
}

template <class T>
Node<T>* add_nodes(Tape<T>& tape, Node<T>* a, Node<T>* b) {
  if (!(a->shape == b->shape))
    throw std::invalid_argument("add_nodes: shape mismatch");
  Node<T>* out = tape.make(a->shape);
  for (std::size_t i = 0; i < a->value.size(); ++i)
    out->value[i] = a->value[i] + b->value[i];
  out->parents = {a, b};
  out->backward_fn = [=]() {
    detail::prep(a);
    detail::prep(b);
    for (std::size_t i = 0; i < out->value.size(); ++i) {
      detail::accum(a, i, out->grad_in[i]);
      detail::accum(b, i, out->grad_in[i]);
    }
  };
  return out;
}

template <class T>
Node<T>* add_const_point(Tape<T>& tape, Node<T>* a, const Vec3& t) {
  Node<T>* out = tape.make(a->shape);
  for (int d = 0; d < 3; ++d)
    out->value[static_cast<std::size_t>(d)] =
        a->value[static_cast<std::size_t>(d)] + static_cast<T>(t[d]);
  out->parents = {a};
  out->backward_fn = [=]() {
    detail::prep(a);
    for (std::size_t i = 0; i < 3; ++i) detail::accum(a, i, out->grad_in[i]);
  };
  return out;
}

// Squared Euclidean distance (mm^2) between a point node and a fixed target.
template <class T>
Node<T>* squared_distance(Tape<T>& tape, Node<T>* p, const Vec3& target) {
  if (p->shape.numel() != 3)
    throw std::invalid_argument("squared_distance: point node required");
  Node<T>* out = tape.make(Shape4{1, 1, 1, 1});
  T acc = T(0);
  for (int d = 0; d < 3; ++d) {
    const T diff = p->value[static_cast<std::size_t>(d)] - static_cast<T>(target[d]);
    acc += diff * diff;
  }
  out->value[0] = acc;
  out->parents = {p};
  out->backward_fn = [=]() {
    detail::prep(p);
    for (int d = 0; d < 3; ++d) {
      const T diff =
          p->value[static_cast<std::size_t>(d)] - static_cast<T>(target[d]);
      detail::accum(p, static_cast<std::size_t>(d), T(2) * diff * out->grad_in[0]);
    }
  };
  return out;
}

template <class T>
Node<T>* weighted_sum(Tape<T>& tape, const std::vector<Node<T>*>& scalars,
                      const std::vector<double>& weights) {
  if (scalars.size() != weights.size() || scalars.empty())
    throw std::invalid_argument("weighted_sum: size mismatch");
  Node<T>* out = tape.make(Shape4{1, 1, 1, 1});
  T acc = T(0);
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (scalars[i]->value.size() != 1)
      throw std::invalid_argument("weighted_sum: scalar nodes required");
    acc += static_cast<T>(weights[i]) * scalars[i]->value[0];
  }
  out->value[0] = acc;
  out->parents.assign(scalars.begin(), scalars.end());
  out->backward_fn = [=]() {
    for (std::size_t i = 0; i < scalars.size(); ++i) {
      detail::prep(scalars[i]);
      detail::accum(scalars[i], std::size_t{0},
                    static_cast<T>(weights[i]) * out->grad_in[0]);
    }
  };
  return out;
}

// Mean squared error against a fixed target tensor.
template <class T>
Node<T>* l2_loss(Tape<T>& tape, Node<T>* x, const Buffer<double>& target) {
  if (x->value.size() != target.size())
    throw std::invalid_argument("l2_loss: target size mismatch");
  Node<T>* out = tape.make(Shape4{1, 1, 1, 1});
  const T invn = T(1) / static_cast<T>(x->value.size());
  T acc = T(0);
  for (std::size_t i = 0; i < x->value.size(); ++i) {
    const T diff = x->value[i] - static_cast<T>(target[i]);
    acc += diff * diff;
  }
  out->value[0] = acc * invn;
  out->parents = {x};
  auto tgt = std::make_shared<Buffer<double>>(target);
  out->backward_fn = [=]() {
    detail::prep(x);
    for (std::size_t i = 0; i < x->value.size(); ++i) {
      const T diff = x->value[i] - static_cast<T>((*tgt)[i]);
      detail::accum(x, i, T(2) * diff * invn * out->grad_in[0]);
    }
  };
  return out;
}

}  // namespace lmloc
