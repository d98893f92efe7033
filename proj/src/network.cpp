#include "oarstd/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "oarstd/kernels.hpp"
#include "oarstd/rng.hpp"

namespace oarstd {

namespace {

int conv_out_dim(int in, int k, int s, int p) {
  const int span = in + 2 * p - k;
  if (span < 0 || s < 1) return 0;
  return span / s + 1;
}

// Unpacks (C, D, H, W) patches into a (C*kz*ky*kx, Do*Ho*Wo) matrix so the
// convolution becomes a single GEMM.
template <typename T>
void im2col(const T* x, int c_in, int d, int h, int w, int kz, int ky, int kx,
            Stride3 s, Pad3 p, int od, int oh, int ow, T* col) {
  const std::int64_t plane = static_cast<std::int64_t>(oh) * ow;
  for (int c = 0; c < c_in; ++c)
    for (int dz = 0; dz < kz; ++dz)
      for (int dy = 0; dy < ky; ++dy)
        for (int dx = 0; dx < kx; ++dx) {
          T* out = col;
          col += static_cast<std::int64_t>(od) * plane;
          for (int z = 0; z < od; ++z) {
            const int iz = z * s.z - p.z + dz;
            if (iz < 0 || iz >= d) {
              std::fill(out, out + plane, T(0));
              out += plane;
              continue;
            }
            for (int y = 0; y < oh; ++y) {
              const int iy = y * s.y - p.y + dy;
              if (iy < 0 || iy >= h) {
                std::fill(out, out + ow, T(0));
                out += ow;
                continue;
              }
              const T* row = x + ((static_cast<std::int64_t>(c) * d + iz) * h + iy) * w;
              for (int xo = 0; xo < ow; ++xo) {
                const int ix = xo * s.x - p.x + dx;
                *out++ = (ix >= 0 && ix < w) ? row[ix] : T(0);
              }
            }
          }
        }
}

// Scatter-add transpose of im2col.
template <typename T>
void col2im_add(const T* col, int c_in, int d, int h, int w, int kz, int ky,
                int kx, Stride3 s, Pad3 p, int od, int oh, int ow, T* gx) {
  for (int c = 0; c < c_in; ++c)
    for (int dz = 0; dz < kz; ++dz)
      for (int dy = 0; dy < ky; ++dy)
        for (int dx = 0; dx < kx; ++dx) {
          for (int z = 0; z < od; ++z) {
            const int iz = z * s.z - p.z + dz;
            if (iz < 0 || iz >= d) {
              col += static_cast<std::int64_t>(oh) * ow;
              continue;
            }
            for (int y = 0; y < oh; ++y) {
              const int iy = y * s.y - p.y + dy;
              if (iy < 0 || iy >= h) {
                col += ow;
                continue;
              }
              T* row = gx + ((static_cast<std::int64_t>(c) * d + iz) * h + iy) * w;
              for (int xo = 0; xo < ow; ++xo) {
                const int ix = xo * s.x - p.x + dx;
                if (ix >= 0 && ix < w) row[ix] += *col;
                ++col;
              }
            }
          }
        }
}

template <typename T>
void add_bias_rows(T* m, const T* bias, int rows, std::int64_t cols) {
  for (int r = 0; r < rows; ++r) {
    T* row = m + r * cols;
    const T b = bias[r];
    for (std::int64_t i = 0; i < cols; ++i) row[i] += b;
  }
}

template <typename T>
void accumulate_row_sums(const T* m, int rows, std::int64_t cols, T* out) {
  for (int r = 0; r < rows; ++r) {
    T s = T(0);
    const T* row = m + r * cols;
    for (std::int64_t i = 0; i < cols; ++i) s += row[i];
    out[r] += s;
  }
}

template <typename T>
bool is_pointwise(const Tensor<T>& w, Stride3 s, Pad3 p) {
  return w.dim(2) == 1 && w.dim(3) == 1 && w.dim(4) == 1 && s.z == 1 &&
         s.y == 1 && s.x == 1 && p.z == 0 && p.y == 0 && p.x == 0;
}

}  // namespace

void NetworkConfig::validate() const {
  for (int n : stage_blocks)
    if (n < 1) throw std::invalid_argument("stage_blocks entries must be >= 1");
  if (base_width < 1) throw std::invalid_argument("base_width must be >= 1");
  if (feature_dim < 1) throw std::invalid_argument("feature_dim must be >= 1");
  if (num_classes < 2) throw std::invalid_argument("num_classes must be >= 2");
  if (nonlocal_ratio < 1) throw std::invalid_argument("nonlocal_ratio must be >= 1");
  for (int s : nonlocal_stages) {
    if (s < 1 || s > 4) throw std::invalid_argument("nonlocal_stages entries must be in 1..4");
    const int channels = 4 * base_width * (1 << (s - 1));
    if (channels % nonlocal_ratio != 0)
      throw std::invalid_argument("nonlocal_ratio must divide stage channels");
  }
}

NetworkConfig NetworkConfig::toy(int num_classes) {
  NetworkConfig c;
  c.stage_blocks = {1, 1, 1, 1};
  c.base_width = 8;
  c.feature_dim = 32;
  c.num_classes = num_classes;
  return c;
}

template <typename T>
Tensor<T> conv3d_forward(const Tensor<T>& x, const Tensor<T>& w,
                         const Tensor<T>& b, Stride3 stride, Pad3 pad) {
  if (x.rank() != 5 || w.rank() != 5) throw std::invalid_argument("conv3d expects rank-5 tensors");
  if (w.dim(1) != x.dim(1)) throw std::invalid_argument("conv3d channel mismatch");
  if (b.size() != w.dim(0)) throw std::invalid_argument("conv3d bias size mismatch");
  const int batch = static_cast<int>(x.dim(0));
  const int c_in = static_cast<int>(x.dim(1));
  const int d = static_cast<int>(x.dim(2)), h = static_cast<int>(x.dim(3)),
            ww = static_cast<int>(x.dim(4));
  const int c_out = static_cast<int>(w.dim(0));
  const int kz = static_cast<int>(w.dim(2)), ky = static_cast<int>(w.dim(3)),
            kx = static_cast<int>(w.dim(4));
  const int od = conv_out_dim(d, kz, stride.z, pad.z);
  const int oh = conv_out_dim(h, ky, stride.y, pad.y);
  const int ow = conv_out_dim(ww, kx, stride.x, pad.x);
  if (od < 1 || oh < 1 || ow < 1) throw std::invalid_argument("conv3d output would be empty");

  const std::int64_t n = static_cast<std::int64_t>(od) * oh * ow;
  const std::int64_t k = static_cast<std::int64_t>(c_in) * kz * ky * kx;
  Tensor<T> y({batch, c_out, od, oh, ow});
  const bool pointwise = is_pointwise(w, stride, pad);
  std::vector<T> col;
  if (!pointwise) col.resize(k * n);
  for (int item = 0; item < batch; ++item) {
    const T* xi = x.data() + static_cast<std::int64_t>(item) * c_in * d * h * ww;
    const T* patches = xi;
    if (!pointwise) {
      im2col(xi, c_in, d, h, ww, kz, ky, kx, stride, pad, od, oh, ow, col.data());
      patches = col.data();
    }
    T* yi = y.data() + static_cast<std::int64_t>(item) * c_out * n;
    kernels::gemm<T>(kernels::Op::none, kernels::Op::none, c_out,
                     static_cast<int>(n), static_cast<int>(k), T(1), w.data(),
                     patches, T(0), yi);
    add_bias_rows(yi, b.data(), c_out, n);
  }
  return y;
}

template <typename T>
void conv3d_backward(const Tensor<T>& x, const Tensor<T>& w, Stride3 stride,
                     Pad3 pad, const Tensor<T>& gy, Tensor<T>* gx, Tensor<T>& gw,
                     Tensor<T>& gb) {
  const int batch = static_cast<int>(x.dim(0));
  const int c_in = static_cast<int>(x.dim(1));
  const int d = static_cast<int>(x.dim(2)), h = static_cast<int>(x.dim(3)),
            ww = static_cast<int>(x.dim(4));
  const int c_out = static_cast<int>(w.dim(0));
  const int kz = static_cast<int>(w.dim(2)), ky = static_cast<int>(w.dim(3)),
            kx = static_cast<int>(w.dim(4));
  const int od = static_cast<int>(gy.dim(2)), oh = static_cast<int>(gy.dim(3)),
            ow = static_cast<int>(gy.dim(4));
  if (gy.dim(0) != batch || gy.dim(1) != c_out)
    throw std::invalid_argument("conv3d_backward gradient shape mismatch");
  if (!gw.same_shape(w) || gb.size() != c_out)
    throw std::invalid_argument("conv3d_backward gradient buffers mismatch");

  const std::int64_t n = static_cast<std::int64_t>(od) * oh * ow;
  const std::int64_t k = static_cast<std::int64_t>(c_in) * kz * ky * kx;
  const bool pointwise = is_pointwise(w, stride, pad);
  if (gx) *gx = Tensor<T>(x.shape());
  std::vector<T> col, gcol;
  if (!pointwise) {
    col.resize(k * n);
    if (gx) gcol.resize(k * n);
  }
  for (int item = 0; item < batch; ++item) {
    const T* xi = x.data() + static_cast<std::int64_t>(item) * c_in * d * h * ww;
    const T* gyi = gy.data() + static_cast<std::int64_t>(item) * c_out * n;
    const T* patches = xi;
    if (!pointwise) {
      im2col(xi, c_in, d, h, ww, kz, ky, kx, stride, pad, od, oh, ow, col.data());
      patches = col.data();
    }
    kernels::gemm<T>(kernels::Op::none, kernels::Op::trans, c_out,
                     static_cast<int>(k), static_cast<int>(n), T(1), gyi,
                     patches, T(1), gw.data());
    accumulate_row_sums(gyi, c_out, n, gb.data());
    if (!gx) continue;
    T* gxi = gx->data() + static_cast<std::int64_t>(item) * c_in * d * h * ww;
    if (pointwise) {
      kernels::gemm<T>(kernels::Op::trans, kernels::Op::none,
                       static_cast<int>(k), static_cast<int>(n), c_out, T(1),
                       w.data(), gyi, T(0), gxi);
    } else {
      kernels::gemm<T>(kernels::Op::trans, kernels::Op::none,
                       static_cast<int>(k), static_cast<int>(n), c_out, T(1),
                       w.data(), gyi, T(0), gcol.data());
      col2im_add(gcol.data(), c_in, d, h, ww, kz, ky, kx, stride, pad, od, oh,
                 ow, gxi);
    }
  }
}

std::vector<std::string> nonlocal_param_names(const std::string& prefix) {
  return {prefix + "theta.weight", prefix + "theta.bias", prefix + "mu.weight",
          prefix + "mu.bias",      prefix + "psi.weight", prefix + "psi.bias",
          prefix + "sigma.weight", prefix + "sigma.bias", prefix + "wf"};
}

template <typename T>
Tensor<T> nonlocal_forward(const Tensor<T>& x, const ParameterSet<T>& params,
                           const std::string& prefix, NonLocalCache<T>* cache) {
  if (x.rank() != 5) throw std::invalid_argument("nonlocal expects rank-5 input");
  const int batch = static_cast<int>(x.dim(0));
  const int c = static_cast<int>(x.dim(1));
  const std::int64_t n64 = static_cast<std::int64_t>(x.dim(2)) * x.dim(3) * x.dim(4);
  const int n = static_cast<int>(n64);

  const Tensor<T>& wt = params.get(prefix + "theta.weight");
  const Tensor<T>& wm = params.get(prefix + "mu.weight");
  const Tensor<T>& wp = params.get(prefix + "psi.weight");
  const Tensor<T>& ws = params.get(prefix + "sigma.weight");
  const Tensor<T>& wf = params.get(prefix + "wf");
  const int cr = static_cast<int>(wt.dim(0));
  if (wt.dim(1) != c || ws.dim(0) != c || ws.dim(1) != cr || wf.size() != 2 * cr)
    throw std::invalid_argument("nonlocal parameter shapes do not match input");
  const T* afirst = wf.data();        // score weight on theta embeddings
  const T* bsecond = wf.data() + cr;  // score weight on mu embeddings

  Tensor<T> z(x.shape());
  if (cache) {
    cache->x = x;
    cache->theta.clear(); cache->mu.clear(); cache->psi.clear();
    cache->u.clear(); cache->v.clear(); cache->s.clear(); cache->y.clear();
  }
  const T inv_n = T(1) / T(n);
  for (int item = 0; item < batch; ++item) {
    const T* xi = x.data() + static_cast<std::int64_t>(item) * c * n64;
    Tensor<T> theta({cr, n}), mu({cr, n}), psi({cr, n});
    kernels::gemm<T>(kernels::Op::none, kernels::Op::none, cr, n, c, T(1),
                     wt.data(), xi, T(0), theta.data());
    add_bias_rows(theta.data(), params.get(prefix + "theta.bias").data(), cr, n);
    kernels::gemm<T>(kernels::Op::none, kernels::Op::none, cr, n, c, T(1),
                     wm.data(), xi, T(0), mu.data());
    add_bias_rows(mu.data(), params.get(prefix + "mu.bias").data(), cr, n);
    kernels::gemm<T>(kernels::Op::none, kernels::Op::none, cr, n, c, T(1),
                     wp.data(), xi, T(0), psi.data());
    add_bias_rows(psi.data(), params.get(prefix + "psi.bias").data(), cr, n);

    Tensor<T> u({n}), v({n});
    kernels::gemm<T>(kernels::Op::trans, kernels::Op::none, n, 1, cr, T(1),
                     theta.data(), afirst, T(0), u.data());
    kernels::gemm<T>(kernels::Op::trans, kernels::Op::none, n, 1, cr, T(1),
                     mu.data(), bsecond, T(0), v.data());

    // Rectified pairwise scores on concatenated embeddings.
    Tensor<T> s({n, n});
    for (int i = 0; i < n; ++i) {
      const T ui = u[i];
      T* row = s.data() + static_cast<std::int64_t>(i) * n;
      for (int j = 0; j < n; ++j) row[j] = std::max(T(0), ui + v[j]);
    }

    // y_i = (1/N) sum_j s_ij psi_j, as Y = (1/N) P S^T.
    Tensor<T> y({cr, n});
    kernels::gemm<T>(kernels::Op::none, kernels::Op::trans, cr, n, n, inv_n,
                     psi.data(), s.data(), T(0), y.data());

    T* zi = z.data() + static_cast<std::int64_t>(item) * c * n64;
    kernels::gemm<T>(kernels::Op::none, kernels::Op::none, c, n, cr, T(1),
                     ws.data(), y.data(), T(0), zi);
    add_bias_rows(zi, params.get(prefix + "sigma.bias").data(), c, n);
    kernels::add<T>(static_cast<std::int64_t>(c) * n, zi, xi, zi);

    if (cache) {
      cache->theta.push_back(std::move(theta));
      cache->mu.push_back(std::move(mu));
      cache->psi.push_back(std::move(psi));
      cache->u.push_back(std::move(u));
      cache->v.push_back(std::move(v));
      cache->s.push_back(std::move(s));
      cache->y.push_back(std::move(y));
    }
  }
  return z;
}

template <typename T>
void nonlocal_backward(const Tensor<T>& gz, const NonLocalCache<T>& cache,
                       const ParameterSet<T>& params, const std::string& prefix,
                       ParameterSet<T>& grads, Tensor<T>& gx) {
  const Tensor<T>& x = cache.x;
  if (!gz.same_shape(x)) throw std::invalid_argument("nonlocal_backward shape mismatch");
  const int batch = static_cast<int>(x.dim(0));
  const int c = static_cast<int>(x.dim(1));
  const std::int64_t n64 = static_cast<std::int64_t>(x.dim(2)) * x.dim(3) * x.dim(4);
  const int n = static_cast<int>(n64);

  const Tensor<T>& wt = params.get(prefix + "theta.weight");
  const Tensor<T>& wm = params.get(prefix + "mu.weight");
  const Tensor<T>& wp = params.get(prefix + "psi.weight");
  const Tensor<T>& ws = params.get(prefix + "sigma.weight");
  const Tensor<T>& wf = params.get(prefix + "wf");
  const int cr = static_cast<int>(wt.dim(0));
  const T* afirst = wf.data();
  const T* bsecond = wf.data() + cr;

  Tensor<T>& gwt = grads.get(prefix + "theta.weight");
  Tensor<T>& gbt = grads.get(prefix + "theta.bias");
  Tensor<T>& gwm = grads.get(prefix + "mu.weight");
  Tensor<T>& gbm = grads.get(prefix + "mu.bias");
  Tensor<T>& gwp = grads.get(prefix + "psi.weight");
  Tensor<T>& gbp = grads.get(prefix + "psi.bias");
  Tensor<T>& gws = grads.get(prefix + "sigma.weight");
  Tensor<T>& gbs = grads.get(prefix + "sigma.bias");
  Tensor<T>& gwf = grads.get(prefix + "wf");
  T* ga = gwf.data();
  T* gb = gwf.data() + cr;

  gx = Tensor<T>(x.shape());
  const T inv_n = T(1) / T(n);
  for (int item = 0; item < batch; ++item) {
    const std::int64_t off = static_cast<std::int64_t>(item) * c * n64;
    const T* gzi = gz.data() + off;
    const T* xi = x.data() + off;
    T* gxi = gx.data() + off;
    const Tensor<T>& theta = cache.theta[item];
    const Tensor<T>& mu = cache.mu[item];
    const Tensor<T>& psi = cache.psi[item];
    const Tensor<T>& s = cache.s[item];
    const Tensor<T>& y = cache.y[item];

    // Residual term.
    std::copy(gzi, gzi + static_cast<std::int64_t>(c) * n, gxi);

    // sigma conv.
    kernels::gemm<T>(kernels::Op::none, kernels::Op::trans, c, cr, n, T(1), gzi,
                     y.data(), T(1), gws.data());
    accumulate_row_sums(gzi, c, n, gbs.data());
    Tensor<T> gy({cr, n});
    kernels::gemm<T>(kernels::Op::trans, kernels::Op::none, cr, n, c, T(1),
                     ws.data(), gzi, T(0), gy.data());

    // Score matrix gradient, masked by the rectifier.
    Tensor<T> gs({n, n});
    kernels::gemm<T>(kernels::Op::trans, kernels::Op::none, n, n, cr, inv_n,
                     gy.data(), psi.data(), T(0), gs.data());
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n) * n; ++i)
      if (!(s[i] > T(0))) gs[i] = T(0);

    Tensor<T> gpsi({cr, n});
    kernels::gemm<T>(kernels::Op::none, kernels::Op::none, cr, n, n, inv_n,
                     gy.data(), s.data(), T(0), gpsi.data());

    Tensor<T> gu({n}), gv({n});
    for (int i = 0; i < n; ++i) {
      const T* row = gs.data() + static_cast<std::int64_t>(i) * n;
      T acc = T(0);
      for (int j = 0; j < n; ++j) acc += row[j];
      gu[i] = acc;
      kernels::axpy<T>(n, T(1), row, gv.data());
    }

    kernels::gemm<T>(kernels::Op::none, kernels::Op::none, cr, 1, n, T(1),
                     theta.data(), gu.data(), T(1), ga);
    kernels::gemm<T>(kernels::Op::none, kernels::Op::none, cr, 1, n, T(1),
                     mu.data(), gv.data(), T(1), gb);

    Tensor<T> gtheta({cr, n}), gmu({cr, n});
    kernels::gemm<T>(kernels::Op::none, kernels::Op::none, cr, n, 1, T(1),
                     afirst, gu.data(), T(0), gtheta.data());
    kernels::gemm<T>(kernels::Op::none, kernels::Op::none, cr, n, 1, T(1),
                     bsecond, gv.data(), T(0), gmu.data());

    // Embedding convs: accumulate weight/bias grads and fold into gx.
    const Tensor<T>* embeds[3] = {&gtheta, &gmu, &gpsi};
    Tensor<T>* wgrads[3] = {&gwt, &gwm, &gwp};
    Tensor<T>* bgrads[3] = {&gbt, &gbm, &gbp};
    const Tensor<T>* weights[3] = {&wt, &wm, &wp};
    for (int e = 0; e < 3; ++e) {
      kernels::gemm<T>(kernels::Op::none, kernels::Op::trans, cr, c, n, T(1),
                       embeds[e]->data(), xi, T(1), wgrads[e]->data());
      accumulate_row_sums(embeds[e]->data(), cr, n, bgrads[e]->data());
      kernels::gemm<T>(kernels::Op::trans, kernels::Op::none, c, n, cr, T(1),
                       weights[e]->data(), embeds[e]->data(), T(1), gxi);
    }
  }
}

template <typename T>
SoftmaxLossResult<T> softmax_cross_entropy(const Tensor<T>& logits,
                                           const std::vector<int>& labels) {
  if (logits.rank() != 2) throw std::invalid_argument("logits must be (batch, classes)");
  const int batch = static_cast<int>(logits.dim(0));
  const int k = static_cast<int>(logits.dim(1));
  if (static_cast<int>(labels.size()) != batch)
    throw std::invalid_argument("label count must match batch size");
  SoftmaxLossResult<T> out;
  out.probs = Tensor<T>({batch, k});
  out.glogits = Tensor<T>({batch, k});
  double loss = 0.0;
  for (int i = 0; i < batch; ++i) {
    const int label = labels[i];
    if (label < 0 || label >= k) throw std::invalid_argument("label out of range");
    const T* row = logits.data() + static_cast<std::int64_t>(i) * k;
    T* prow = out.probs.data() + static_cast<std::int64_t>(i) * k;
    T mx = row[0];
    for (int j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int j = 0; j < k; ++j) {
      const double e = std::exp(static_cast<double>(row[j] - mx));
      prow[j] = static_cast<T>(e);
      denom += e;
    }
    for (int j = 0; j < k; ++j) prow[j] = static_cast<T>(prow[j] / denom);
    loss -= std::log(std::max(static_cast<double>(prow[label]), 1e-300));
    T* grow = out.glogits.data() + static_cast<std::int64_t>(i) * k;
    const T scale = T(1) / T(batch);
    for (int j = 0; j < k; ++j)
      grow[j] = (prow[j] - (j == label ? T(1) : T(0))) * scale;
  }
  out.loss = static_cast<T>(loss / batch);
  return out;
}

template <typename T>
Backbone<T>::Backbone(NetworkConfig config) : config_(std::move(config)) {
  config_.validate();
  int c_prev = config_.base_width;
  for (int stage = 1; stage <= 4; ++stage) {
    const int width = config_.base_width * (1 << (stage - 1));
    const int c_out = 4 * width;
    const Stride3 stage_stride =
        stage == 1 ? Stride3{1, 2, 2} : Stride3{2, 2, 2};
    const bool nl = config_.nonlocal_stages.count(stage) != 0;
    for (int b = 0; b < config_.stage_blocks[stage - 1]; ++b) {
      BlockDef def;
      def.prefix = "res" + std::to_string(stage) + ".b" + std::to_string(b) + ".";
      def.c_in = c_prev;
      def.c_mid = width;
      def.c_out = c_out;
      def.stride = b == 0 ? stage_stride : Stride3{1, 1, 1};
      def.has_proj = def.c_in != def.c_out || def.stride.z != 1 ||
                     def.stride.y != 1 || def.stride.x != 1;
      def.has_nonlocal = nl;
      blocks_.push_back(def);
      c_prev = c_out;
    }
  }
  last_channels_ = c_prev;
}

template <typename T>
int Backbone<T>::stage_channels(int stage) const {
  if (stage < 1 || stage > 4) throw std::invalid_argument("stage must be 1..4");
  return 4 * config_.base_width * (1 << (stage - 1));
}

template <typename T>
ParameterSet<T> Backbone<T>::zero_parameters() const {
  ParameterSet<T> params;
  params.add("stem.weight", Tensor<T>({config_.base_width, 2, 3, 5, 5}));
  params.add("stem.bias", Tensor<T>({config_.base_width}));
  for (const BlockDef& def : blocks_) {
    params.add(def.prefix + "conv1.weight", Tensor<T>({def.c_mid, def.c_in, 1, 1, 1}));
    params.add(def.prefix + "conv1.bias", Tensor<T>({def.c_mid}));
    params.add(def.prefix + "conv2.weight", Tensor<T>({def.c_mid, def.c_mid, 3, 3, 3}));
    params.add(def.prefix + "conv2.bias", Tensor<T>({def.c_mid}));
    params.add(def.prefix + "conv3.weight", Tensor<T>({def.c_out, def.c_mid, 1, 1, 1}));
    params.add(def.prefix + "conv3.bias", Tensor<T>({def.c_out}));
    if (def.has_proj) {
      params.add(def.prefix + "proj.weight", Tensor<T>({def.c_out, def.c_in, 1, 1, 1}));
      params.add(def.prefix + "proj.bias", Tensor<T>({def.c_out}));
    }
    if (def.has_nonlocal) {
      const int cr = def.c_out / config_.nonlocal_ratio;
      const std::string nl = def.prefix + "nl.";
      params.add(nl + "theta.weight", Tensor<T>({cr, def.c_out, 1, 1, 1}));
      params.add(nl + "theta.bias", Tensor<T>({cr}));
      params.add(nl + "mu.weight", Tensor<T>({cr, def.c_out, 1, 1, 1}));
      params.add(nl + "mu.bias", Tensor<T>({cr}));
      params.add(nl + "psi.weight", Tensor<T>({cr, def.c_out, 1, 1, 1}));
      params.add(nl + "psi.bias", Tensor<T>({cr}));
      params.add(nl + "sigma.weight", Tensor<T>({def.c_out, cr, 1, 1, 1}));
      params.add(nl + "sigma.bias", Tensor<T>({def.c_out}));
      params.add(nl + "wf", Tensor<T>({2 * cr}));
    }
  }
  params.add("feature.weight", Tensor<T>({config_.feature_dim, last_channels_}));
  params.add("feature.bias", Tensor<T>({config_.feature_dim}));
  params.add("head.weight", Tensor<T>({config_.num_classes, config_.feature_dim}));
  params.add("head.bias", Tensor<T>({config_.num_classes}));
  return params;
}

template <typename T>
ParameterSet<T> Backbone<T>::init_parameters(std::uint64_t seed) const {
  ParameterSet<T> params = zero_parameters();
  Rng rng(seed);
  for (std::size_t i = 0; i < params.count(); ++i) {
    auto& [name, t] = params.item(i);
    const bool is_bias = name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
    const bool is_sigma = name.find("sigma.") != std::string::npos;
    if (is_bias || is_sigma) continue;  // zeros; sigma zero makes the block an identity
    std::int64_t fan_in;
    if (t.rank() == 5) fan_in = t.dim(1) * t.dim(2) * t.dim(3) * t.dim(4);
    else if (t.rank() == 2) fan_in = t.dim(1);
    else fan_in = t.size();  // wf maps the 2*cr concatenation to a scalar
    const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (std::int64_t j = 0; j < t.size(); ++j)
      t[j] = static_cast<T>(rng.normal(0.0, stddev));
  }
  return params;
}

template <typename T>
Tensor<T> Backbone<T>::forward(const Tensor<T>& input, const ParameterSet<T>& params,
                               Cache* cache) const {
  if (input.rank() != 5 || input.dim(1) != 2)
    throw std::invalid_argument("backbone expects (batch, 2, d, h, w) input");
  const auto min_dims = min_input_dims();
  if (input.dim(2) < min_dims[0] || input.dim(3) < min_dims[1] ||
      input.dim(4) < min_dims[2])
    throw std::invalid_argument("backbone input below minimum size 8x32x32");

  if (cache) {
    cache->input = input;
    cache->blocks.clear();
    cache->blocks.reserve(blocks_.size());
  }

  Tensor<T> x = conv3d_forward(input, params.get("stem.weight"),
                               params.get("stem.bias"), {1, 2, 2}, {1, 2, 2});
  kernels::relu<T>(x.size(), x.data(), x.data());
  if (cache) cache->stem_out = x;

  for (const BlockDef& def : blocks_) {
    BlockCache* bc = nullptr;
    if (cache) {
      cache->blocks.emplace_back();
      bc = &cache->blocks.back();
    }
    Tensor<T> r1 = conv3d_forward(x, params.get(def.prefix + "conv1.weight"),
                                  params.get(def.prefix + "conv1.bias"),
                                  {1, 1, 1}, {0, 0, 0});
    kernels::relu<T>(r1.size(), r1.data(), r1.data());
    Tensor<T> r2 = conv3d_forward(r1, params.get(def.prefix + "conv2.weight"),
                                  params.get(def.prefix + "conv2.bias"),
                                  def.stride, {1, 1, 1});
    kernels::relu<T>(r2.size(), r2.data(), r2.data());
    Tensor<T> out = conv3d_forward(r2, params.get(def.prefix + "conv3.weight"),
                                   params.get(def.prefix + "conv3.bias"),
                                   {1, 1, 1}, {0, 0, 0});
    if (def.has_proj) {
      Tensor<T> shortcut = conv3d_forward(x, params.get(def.prefix + "proj.weight"),
                                          params.get(def.prefix + "proj.bias"),
                                          def.stride, {0, 0, 0});
      kernels::add<T>(out.size(), out.data(), shortcut.data(), out.data());
    } else {
      kernels::add<T>(out.size(), out.data(), x.data(), out.data());
    }
    kernels::relu<T>(out.size(), out.data(), out.data());
    if (bc) {
      bc->x_in = std::move(x);
      bc->r1 = std::move(r1);
      bc->r2 = std::move(r2);
    }
    if (def.has_nonlocal) {
      // The relu output doubles as the non-local cache input, so bc->out
      // stays empty for these blocks.
      Tensor<T> z = nonlocal_forward(out, params, def.prefix + "nl.",
                                     bc ? &bc->nl : nullptr);
      x = std::move(z);
    } else {
      if (bc) bc->out = out;
      x = std::move(out);
    }
  }

  const int batch = static_cast<int>(x.dim(0));
  const int channels = static_cast<int>(x.dim(1));
  const std::int64_t n = static_cast<std::int64_t>(x.dim(2)) * x.dim(3) * x.dim(4);
  Tensor<T> pooled({batch, channels});
  for (int item = 0; item < batch; ++item)
    for (int ch = 0; ch < channels; ++ch) {
      const T* src = x.data() + (static_cast<std::int64_t>(item) * channels + ch) * n;
      T acc = T(0);
      for (std::int64_t i = 0; i < n; ++i) acc += src[i];
      pooled.data()[static_cast<std::int64_t>(item) * channels + ch] = acc / T(n);
    }
  if (cache) {
    cache->map_shape = x.shape();
    cache->gap_out = pooled;
  }

  const Tensor<T>& fw = params.get("feature.weight");
  const Tensor<T>& fb = params.get("feature.bias");
  const int fdim = static_cast<int>(fw.dim(0));
  Tensor<T> features({batch, fdim});
  kernels::gemm<T>(kernels::Op::none, kernels::Op::trans, batch, fdim, channels,
                   T(1), pooled.data(), fw.data(), T(0), features.data());
  for (int item = 0; item < batch; ++item)
    kernels::axpy<T>(fdim, T(1), fb.data(),
                     features.data() + static_cast<std::int64_t>(item) * fdim);
  return features;
}

template <typename T>
Tensor<T> Backbone<T>::classify(const Tensor<T>& features,
                                const ParameterSet<T>& params) const {
  const Tensor<T>& hw = params.get("head.weight");
  const Tensor<T>& hb = params.get("head.bias");
  const int batch = static_cast<int>(features.dim(0));
  const int fdim = static_cast<int>(features.dim(1));
  const int k = static_cast<int>(hw.dim(0));
  if (hw.dim(1) != fdim) throw std::invalid_argument("head expects feature_dim inputs");
  Tensor<T> logits({batch, k});
  kernels::gemm<T>(kernels::Op::none, kernels::Op::trans, batch, k, fdim, T(1),
                   features.data(), hw.data(), T(0), logits.data());
  for (int item = 0; item < batch; ++item)
    kernels::axpy<T>(k, T(1), hb.data(),
                     logits.data() + static_cast<std::int64_t>(item) * k);
  return logits;
}

template <typename T>
void Backbone<T>::classify_backward(const Tensor<T>& features,
                                    const Tensor<T>& glogits,
                                    const ParameterSet<T>& params,
                                    ParameterSet<T>& grads,
                                    Tensor<T>& gfeatures) const {
  const int batch = static_cast<int>(features.dim(0));
  const int fdim = static_cast<int>(features.dim(1));
  const int k = static_cast<int>(glogits.dim(1));
  kernels::gemm<T>(kernels::Op::trans, kernels::Op::none, k, fdim, batch, T(1),
                   glogits.data(), features.data(), T(1),
                   grads.get("head.weight").data());
  Tensor<T>& ghb = grads.get("head.bias");
  for (int item = 0; item < batch; ++item)
    kernels::axpy<T>(k, T(1), glogits.data() + static_cast<std::int64_t>(item) * k,
                     ghb.data());
  gfeatures = Tensor<T>({batch, fdim});
  kernels::gemm<T>(kernels::Op::none, kernels::Op::none, batch, fdim, k, T(1),
                   glogits.data(), params.get("head.weight").data(), T(0),
                   gfeatures.data());
}

template <typename T>
void Backbone<T>::backward(const Tensor<T>& gfeatures, const Cache& cache,
                           const ParameterSet<T>& params,
                           ParameterSet<T>& grads) const {
  const int batch = static_cast<int>(gfeatures.dim(0));
  const int fdim = static_cast<int>(gfeatures.dim(1));
  const int channels = static_cast<int>(cache.map_shape[1]);
  const std::int64_t n =
      static_cast<std::int64_t>(cache.map_shape[2]) * cache.map_shape[3] * cache.map_shape[4];

  // Feature linear.
  kernels::gemm<T>(kernels::Op::trans, kernels::Op::none, fdim, channels, batch,
                   T(1), gfeatures.data(), cache.gap_out.data(), T(1),
                   grads.get("feature.weight").data());
  Tensor<T>& gfb = grads.get("feature.bias");
  for (int item = 0; item < batch; ++item)
    kernels::axpy<T>(fdim, T(1),
                     gfeatures.data() + static_cast<std::int64_t>(item) * fdim,
                     gfb.data());
  Tensor<T> gpool({batch, channels});
  kernels::gemm<T>(kernels::Op::none, kernels::Op::none, batch, channels, fdim,
                   T(1), gfeatures.data(), params.get("feature.weight").data(),
                   T(0), gpool.data());

  // Average pooling broadcast.
  Tensor<T> g(cache.map_shape);
  for (int item = 0; item < batch; ++item)
    for (int ch = 0; ch < channels; ++ch) {
      const T val =
          gpool.data()[static_cast<std::int64_t>(item) * channels + ch] / T(n);
      T* dst = g.data() + (static_cast<std::int64_t>(item) * channels + ch) * n;
      std::fill(dst, dst + n, val);
    }

  for (std::size_t bi = blocks_.size(); bi-- > 0;) {
    const BlockDef& def = blocks_[bi];
    const BlockCache& bc = cache.blocks[bi];
    if (def.has_nonlocal) {
      Tensor<T> gin;
      nonlocal_backward(g, bc.nl, params, def.prefix + "nl.", grads, gin);
      g = std::move(gin);
    }
    const Tensor<T>& block_out = def.has_nonlocal ? bc.nl.x : bc.out;
    Tensor<T> gsum(block_out.shape());
    kernels::relu_bwd<T>(block_out.size(), block_out.data(), g.data(), gsum.data());

    Tensor<T> gr2;
    conv3d_backward(bc.r2, params.get(def.prefix + "conv3.weight"), {1, 1, 1},
                    {0, 0, 0}, gsum, &gr2,
                    grads.get(def.prefix + "conv3.weight"),
                    grads.get(def.prefix + "conv3.bias"));
    Tensor<T> gc2(bc.r2.shape());
    kernels::relu_bwd<T>(bc.r2.size(), bc.r2.data(), gr2.data(), gc2.data());

    Tensor<T> gr1;
    conv3d_backward(bc.r1, params.get(def.prefix + "conv2.weight"), def.stride,
                    {1, 1, 1}, gc2, &gr1,
                    grads.get(def.prefix + "conv2.weight"),
                    grads.get(def.prefix + "conv2.bias"));
    Tensor<T> gc1(bc.r1.shape());
    kernels::relu_bwd<T>(bc.r1.size(), bc.r1.data(), gr1.data(), gc1.data());

    Tensor<T> gx;
    conv3d_backward(bc.x_in, params.get(def.prefix + "conv1.weight"), {1, 1, 1},
                    {0, 0, 0}, gc1, &gx,
                    grads.get(def.prefix + "conv1.weight"),
                    grads.get(def.prefix + "conv1.bias"));
    if (def.has_proj) {
      Tensor<T> gshort;
      conv3d_backward(bc.x_in, params.get(def.prefix + "proj.weight"),
                      def.stride, {0, 0, 0}, gsum, &gshort,
                      grads.get(def.prefix + "proj.weight"),
                      grads.get(def.prefix + "proj.bias"));
      kernels::axpy<T>(gx.size(), T(1), gshort.data(), gx.data());
    } else {
      kernels::axpy<T>(gx.size(), T(1), gsum.data(), gx.data());
    }
    g = std::move(gx);
  }

  Tensor<T> gstem(cache.stem_out.shape());
  kernels::relu_bwd<T>(cache.stem_out.size(), cache.stem_out.data(), g.data(),
                       gstem.data());
  conv3d_backward(cache.input, params.get("stem.weight"), {1, 2, 2}, {1, 2, 2},
                  gstem, static_cast<Tensor<T>*>(nullptr),
                  grads.get("stem.weight"), grads.get("stem.bias"));
}

template Tensor<float> conv3d_forward(const Tensor<float>&, const Tensor<float>&,
                                      const Tensor<float>&, Stride3, Pad3);
template Tensor<double> conv3d_forward(const Tensor<double>&, const Tensor<double>&,
                                       const Tensor<double>&, Stride3, Pad3);
template void conv3d_backward(const Tensor<float>&, const Tensor<float>&, Stride3,
                              Pad3, const Tensor<float>&, Tensor<float>*,
                              Tensor<float>&, Tensor<float>&);
template void conv3d_backward(const Tensor<double>&, const Tensor<double>&, Stride3,
                              Pad3, const Tensor<double>&, Tensor<double>*,
                              Tensor<double>&, Tensor<double>&);
template Tensor<float> nonlocal_forward(const Tensor<float>&, const ParameterSet<float>&,
                                        const std::string&, NonLocalCache<float>*);
template Tensor<double> nonlocal_forward(const Tensor<double>&, const ParameterSet<double>&,
                                         const std::string&, NonLocalCache<double>*);
template void nonlocal_backward(const Tensor<float>&, const NonLocalCache<float>&,
                                const ParameterSet<float>&, const std::string&,
                                ParameterSet<float>&, Tensor<float>&);
template void nonlocal_backward(const Tensor<double>&, const NonLocalCache<double>&,
                                const ParameterSet<double>&, const std::string&,
                                ParameterSet<double>&, Tensor<double>&);
template SoftmaxLossResult<float> softmax_cross_entropy(const Tensor<float>&,
                                                        const std::vector<int>&);
template SoftmaxLossResult<double> softmax_cross_entropy(const Tensor<double>&,
                                                         const std::vector<int>&);
template class Backbone<float>;
template class Backbone<double>;

}  // namespace oarstd
