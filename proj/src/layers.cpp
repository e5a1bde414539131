#include "menet/layers.hpp"

#include <Eigen/Core>
#include <cmath>
#include <memory>

namespace menet {

std::size_t ConvGeometry::output_extent(std::size_t in) const {
  if (kernel < 1 || pad < 0) throw ContractError("conv geometry: invalid kernel/padding");
  if (stride != 1 && stride != 2) throw ContractError("conv geometry: stride must be 1 or 2");
  if (in % static_cast<std::size_t>(stride) != 0)
    throw ContractError("conv geometry: spatial size " + std::to_string(in) +
                        " not divisible by stride " + std::to_string(stride));
  const long padded = static_cast<long>(in) + 2L * pad - kernel;
  if (padded < 0) throw ContractError("conv geometry: kernel larger than padded input");
  const std::size_t out = static_cast<std::size_t>(padded / stride + 1);
  if (out != in / static_cast<std::size_t>(stride))
    throw ContractError("conv geometry: kernel " + std::to_string(kernel) + " / pad " +
                        std::to_string(pad) + " does not map size " + std::to_string(in) + " to " +
                        std::to_string(in / stride));
  return out;
}

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using CMapMat = Eigen::Map<const RowMat<T>>;

struct Geom {
  std::size_t n, c, h, w;     // input image extent
  std::size_t ho, wo;         // output extent
  std::size_t k, s, p;
  std::size_t cols() const { return n * ho * wo; }
  std::size_t rows() const { return c * k * k; }
};

// rows (ci, ky, kx), columns (n, oy, ox)
template <typename T>
void im2col(const T* x, const Geom& g, T* col) {
  const std::size_t ncols = g.cols();
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        T* row = col + ((ci * g.k + ky) * g.k + kx) * ncols;
        for (std::size_t b = 0; b < g.n; ++b) {
          const T* img = x + (b * g.c + ci) * g.h * g.w;
          T* dst = row + b * g.ho * g.wo;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.s + ky) - static_cast<long>(g.p);
            T* drow = dst + oy * g.wo;
            if (iy < 0 || iy >= static_cast<long>(g.h)) {
              std::fill_n(drow, g.wo, T{0});
              continue;
            }
            const T* srow = img + iy * g.w;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox * g.s + kx) - static_cast<long>(g.p);
              drow[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T{0} : srow[ix];
            }
          }
        }
      }
}

template <typename T>
void col2im(const T* col, const Geom& g, T* x) {
  const std::size_t ncols = g.cols();
  for (std::size_t ci = 0; ci < g.c; ++ci)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const T* row = col + ((ci * g.k + ky) * g.k + kx) * ncols;
        for (std::size_t b = 0; b < g.n; ++b) {
          T* img = x + (b * g.c + ci) * g.h * g.w;
          const T* src = row + b * g.ho * g.wo;
          for (std::size_t oy = 0; oy < g.ho; ++oy) {
            const long iy = static_cast<long>(oy * g.s + ky) - static_cast<long>(g.p);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            T* drow = img + iy * g.w;
            const T* srow = src + oy * g.wo;
            for (std::size_t ox = 0; ox < g.wo; ++ox) {
              const long ix = static_cast<long>(ox * g.s + kx) - static_cast<long>(g.p);
              if (ix >= 0 && ix < static_cast<long>(g.w)) drow[ix] += srow[ox];
            }
          }
        }
      }
}

// N x C x HW  <->  C x (N HW)
template <typename T>
void to_channel_major(const T* x, std::size_t n, std::size_t c, std::size_t hw, T* out) {
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      std::copy_n(x + (b * c + ch) * hw, hw, out + ch * n * hw + b * hw);
}

template <typename T>
void add_from_channel_major(const T* m, std::size_t n, std::size_t c, std::size_t hw, T* out) {
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const T* src = m + ch * n * hw + b * hw;
      T* dst = out + (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) dst[i] += src[i];
    }
}

template <typename T>
Tensor<T> abs_copy(const Tensor<T>& t) {
  Tensor<T> a = t;
  for (auto& v : a.data()) v = std::abs(v);
  return a;
}

void require_rank4(const Shape& s, const char* op) {
  if (s.size() != 4) throw ContractError(std::string(op) + ": expected N x C x H x W, got " + shape_str(s));
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> weight, Var<T> bias, ConvGeometry geo) {
  const auto& xs = x.shape();
  require_rank4(xs, "conv2d");
  const auto& ws = weight.shape();
  if (ws.size() != 4 || ws[2] != static_cast<std::size_t>(geo.kernel) || ws[3] != ws[2])
    throw ContractError("conv2d: weight " + shape_str(ws) + " does not match kernel size " +
                        std::to_string(geo.kernel));
  if (ws[1] != xs[1])
    throw ContractError("conv2d: input has " + std::to_string(xs[1]) + " channels, weight expects " +
                        std::to_string(ws[1]));
  const std::size_t cout = ws[0];
  if (bias.shape() != Shape{cout}) throw ContractError("conv2d: bias shape mismatch");
  Geom g{xs[0], xs[1], xs[2], xs[3], geo.output_extent(xs[2]), geo.output_extent(xs[3]),
         static_cast<std::size_t>(geo.kernel), static_cast<std::size_t>(geo.stride),
         static_cast<std::size_t>(geo.pad)};

  auto col = std::make_shared<std::vector<T>>(g.rows() * g.cols());
  im2col(x.value().raw(), g, col->data());
  RowMat<T> out_m(cout, g.cols());
  out_m.noalias() = CMapMat<T>(weight.value().raw(), cout, g.rows()) *
                    CMapMat<T>(col->data(), g.rows(), g.cols());
  Tensor<T> out({g.n, cout, g.ho, g.wo});
  const std::size_t ohw = g.ho * g.wo;
  const auto& B = bias.value();
  for (std::size_t b = 0; b < g.n; ++b)
    for (std::size_t co = 0; co < cout; ++co) {
      const T* src = out_m.data() + co * g.cols() + b * ohw;
      T* dst = out.raw() + (b * cout + co) * ohw;
      for (std::size_t i = 0; i < ohw; ++i) dst[i] = src[i] + B[co];
    }

  const std::size_t wid = weight.id;
  auto exact = [g, cout, col, wid](const Tape<T>& tape, const Tensor<T>& gout,
                                   std::span<Tensor<T>*> gin) {
    const std::size_t ohw = g.ho * g.wo;
    RowMat<T> gm(cout, g.cols());
    to_channel_major(gout.raw(), g.n, cout, ohw, gm.data());
    if (gin[1])
      MapMat<T>(gin[1]->raw(), cout, g.rows()).noalias() +=
          gm * CMapMat<T>(col->data(), g.rows(), g.cols()).transpose();
    if (gin[2])
      for (std::size_t co = 0; co < cout; ++co) (*gin[2])[co] += gm.row(co).sum();
    if (gin[0]) {
      RowMat<T> dcol(g.rows(), g.cols());
      dcol.noalias() = CMapMat<T>(tape.value(wid).raw(), cout, g.rows()).transpose() * gm;
      col2im(dcol.data(), g, gin[0]->raw());
    }
  };
  auto bound = [g, cout, wid](const Tape<T>& tape, const Tensor<T>& gout, std::span<Tensor<T>*> gin) {
    if (!gin[0]) return;
    const std::size_t ohw = g.ho * g.wo;
    RowMat<T> gm(cout, g.cols());
    to_channel_major(gout.raw(), g.n, cout, ohw, gm.data());
    RowMat<T> dcol(g.rows(), g.cols());
    dcol.noalias() =
        CMapMat<T>(tape.value(wid).raw(), cout, g.rows()).cwiseAbs().transpose() * gm;
    col2im(dcol.data(), g, gin[0]->raw());
  };
  return x.tape->record("conv2d", std::move(out), {x, weight, bias}, exact, bound);
}

template <typename T>
Var<T> deconv2d(Var<T> x, Var<T> weight, Var<T> bias, ConvGeometry geo) {
  const auto& xs = x.shape();
  require_rank4(xs, "deconv2d");
  if (geo.stride != 2) throw ContractError("deconv2d: stride must be 2");
  const auto& ws = weight.shape();
  if (ws.size() != 4 || ws[2] != static_cast<std::size_t>(geo.kernel) || ws[3] != ws[2])
    throw ContractError("deconv2d: weight " + shape_str(ws) + " does not match kernel size " +
                        std::to_string(geo.kernel));
  if (ws[0] != xs[1])
    throw ContractError("deconv2d: input has " + std::to_string(xs[1]) +
                        " channels, weight expects " + std::to_string(ws[0]));
  const std::size_t cin = xs[1], cout = ws[1];
  if (bias.shape() != Shape{cout}) throw ContractError("deconv2d: bias shape mismatch");
  const std::size_t n = xs[0], h = xs[2], w = xs[3];
  // Geometry of the adjoint convolution: (2h x 2w, cout channels) -> (h x w).
  Geom g{n, cout, 2 * h, 2 * w, h, w, static_cast<std::size_t>(geo.kernel), 2,
         static_cast<std::size_t>(geo.pad)};
  if (geo.output_extent(2 * h) != h || geo.output_extent(2 * w) != w)
    throw ContractError("deconv2d: geometry does not double the spatial size");
  const std::size_t hw = h * w;

  auto xm = std::make_shared<RowMat<T>>(cin, g.cols());
  to_channel_major(x.value().raw(), n, cin, hw, xm->data());
  RowMat<T> col(g.rows(), g.cols());
  col.noalias() = CMapMat<T>(weight.value().raw(), cin, g.rows()).transpose() * (*xm);
  Tensor<T> out({n, cout, 2 * h, 2 * w});
  col2im(col.data(), g, out.raw());
  const auto& B = bias.value();
  const std::size_t ohw = 4 * hw;
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t co = 0; co < cout; ++co) {
      T* dst = out.raw() + (b * cout + co) * ohw;
      for (std::size_t i = 0; i < ohw; ++i) dst[i] += B[co];
    }

  const std::size_t wid = weight.id;
  auto exact = [g, cin, cout, hw, xm, wid](const Tape<T>& tape, const Tensor<T>& gout,
                                           std::span<Tensor<T>*> gin) {
    std::vector<T> gcol(g.rows() * g.cols());
    im2col(gout.raw(), g, gcol.data());
    CMapMat<T> gc(gcol.data(), g.rows(), g.cols());
    if (gin[0]) {
      RowMat<T> gx(cin, g.cols());
      gx.noalias() = CMapMat<T>(tape.value(wid).raw(), cin, g.rows()) * gc;
      add_from_channel_major(gx.data(), g.n, cin, hw, gin[0]->raw());
    }
    if (gin[1]) MapMat<T>(gin[1]->raw(), cin, g.rows()).noalias() += (*xm) * gc.transpose();
    if (gin[2]) {
      const std::size_t ohw = 4 * hw;
      for (std::size_t b = 0; b < g.n; ++b)
        for (std::size_t co = 0; co < cout; ++co) {
          const T* src = gout.raw() + (b * cout + co) * ohw;
          T acc = 0;
          for (std::size_t i = 0; i < ohw; ++i) acc += src[i];
          (*gin[2])[co] += acc;
        }
    }
  };
  auto bound = [g, cin, hw, wid](const Tape<T>& tape, const Tensor<T>& gout, std::span<Tensor<T>*> gin) {
    if (!gin[0]) return;
    std::vector<T> gcol(g.rows() * g.cols());
    im2col(gout.raw(), g, gcol.data());
    RowMat<T> gx(cin, g.cols());
    gx.noalias() = CMapMat<T>(tape.value(wid).raw(), cin, g.rows()).cwiseAbs() *
                   CMapMat<T>(gcol.data(), g.rows(), g.cols());
    add_from_channel_major(gx.data(), g.n, cin, hw, gin[0]->raw());
  };
  return x.tape->record("deconv2d", std::move(out), {x, weight, bias}, exact, bound);
}

template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, const BatchNormStats<T>& running, Mode mode,
                  BatchNormOptions opts, BatchNormStats<T>* batch_stats) {
  const auto& xs = x.shape();
  require_rank4(xs, "batch_norm");
  const std::size_t n = xs[0], c = xs[1], hw = xs[2] * xs[3];
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c})
    throw ContractError("batch_norm: gamma/beta must have " + std::to_string(c) + " entries");
  if (!(opts.eps > 0)) throw ContractError("batch_norm: epsilon must be > 0");
  const T eps = static_cast<T>(opts.eps);
  const auto& X = x.value();
  const auto& G = gamma.value();
  const auto& Bt = beta.value();
  Tensor<T> out(xs);

  if (mode == Mode::inference) {
    if (running.mean.shape() != Shape{c} || running.var.shape() != Shape{c})
      throw ContractError("batch_norm: running statistics have the wrong size");
    auto inv = std::make_shared<std::vector<T>>(c);
    for (std::size_t ch = 0; ch < c; ++ch) {
      if (running.var[ch] < 0) throw ContractError("batch_norm: negative running variance");
      (*inv)[ch] = T{1} / std::sqrt(running.var[ch] + eps);
    }
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T* src = X.raw() + (b * c + ch) * hw;
        T* dst = out.raw() + (b * c + ch) * hw;
        const T a = G[ch] * (*inv)[ch];
        const T m = running.mean[ch];
        for (std::size_t i = 0; i < hw; ++i) dst[i] = a * (src[i] - m) + Bt[ch];
      }
    Tensor<T> rmean = running.mean;
    const std::size_t xid = x.id, gid = gamma.id;
    auto exact = [=](const Tape<T>& tape, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
      const auto& Xv = tape.value(xid);
      const auto& Gv = tape.value(gid);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t off = (b * c + ch) * hw;
          T sg = 0, sgx = 0;
          for (std::size_t i = 0; i < hw; ++i) {
            sg += g[off + i];
            sgx += g[off + i] * (Xv[off + i] - rmean[ch]) * (*inv)[ch];
          }
          if (gin[0]) {
            const T a = Gv[ch] * (*inv)[ch];
            for (std::size_t i = 0; i < hw; ++i) (*gin[0])[off + i] += a * g[off + i];
          }
          if (gin[1]) (*gin[1])[ch] += sgx;
          if (gin[2]) (*gin[2])[ch] += sg;
        }
    };
    auto bound = [=](const Tape<T>& tape, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
      if (!gin[0]) return;
      const auto& Gv = tape.value(gid);
      for (std::size_t b = 0; b < n; ++b)
        for (std::size_t ch = 0; ch < c; ++ch) {
          const std::size_t off = (b * c + ch) * hw;
          const T a = std::abs(Gv[ch]) * (*inv)[ch];
          for (std::size_t i = 0; i < hw; ++i) (*gin[0])[off + i] += a * g[off + i];
        }
    };
    return x.tape->record("batch_norm[inference]", std::move(out), {x, gamma, beta}, exact, bound);
  }

  if (n < 2) throw ContractError("batch_norm: train mode needs a batch of at least 2");
  const std::size_t m = n * hw;
  auto xhat = std::make_shared<Tensor<T>>(xs);
  auto inv = std::make_shared<std::vector<T>>(c);
  BatchNormStats<T> stats{Tensor<T>({c}), Tensor<T>({c})};
  for (std::size_t ch = 0; ch < c; ++ch) {
    double mean = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* src = X.raw() + (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) mean += src[i];
    }
    mean /= static_cast<double>(m);
    double var = 0;
    for (std::size_t b = 0; b < n; ++b) {
      const T* src = X.raw() + (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) var += (src[i] - mean) * (src[i] - mean);
    }
    var /= static_cast<double>(m);
    const T is = static_cast<T>(1.0 / std::sqrt(var + opts.eps));
    (*inv)[ch] = is;
    stats.mean[ch] = static_cast<T>(mean);
    stats.var[ch] = static_cast<T>(var * static_cast<double>(m) / static_cast<double>(m - 1));
    for (std::size_t b = 0; b < n; ++b) {
      const std::size_t off = (b * c + ch) * hw;
      for (std::size_t i = 0; i < hw; ++i) {
        const T xh = static_cast<T>((X[off + i] - mean) * is);
        (*xhat)[off + i] = xh;
        out[off + i] = G[ch] * xh + Bt[ch];
      }
    }
  }
  if (batch_stats) *batch_stats = std::move(stats);

  const std::size_t gid = gamma.id;
  auto exact = [=](const Tape<T>& tape, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    const auto& Gv = tape.value(gid);
    const auto& xh = *xhat;
    for (std::size_t ch = 0; ch < c; ++ch) {
      T sg = 0, sgx = 0;
      for (std::size_t b = 0; b < n; ++b) {
        const std::size_t off = (b * c + ch) * hw;
        for (std::size_t i = 0; i < hw; ++i) {
          sg += g[off + i];
          sgx += g[off + i] * xh[off + i];
        }
      }
      if (gin[1]) (*gin[1])[ch] += sgx;
      if (gin[2]) (*gin[2])[ch] += sg;
      if (gin[0]) {
        const T k = Gv[ch] * (*inv)[ch] / static_cast<T>(m);
        for (std::size_t b = 0; b < n; ++b) {
          const std::size_t off = (b * c + ch) * hw;
          for (std::size_t i = 0; i < hw; ++i)
            (*gin[0])[off + i] += k * (static_cast<T>(m) * g[off + i] - sg - xh[off + i] * sgx);
        }
      }
    }
  };
  return x.tape->record("batch_norm[train]", std::move(out), {x, gamma, beta}, exact);
}

template <typename T>
void update_running_stats(BatchNormStats<T>& running, const BatchNormStats<T>& batch, double momentum) {
  running.mean.require_same_shape(batch.mean, "update_running_stats");
  running.var.require_same_shape(batch.var, "update_running_stats");
  const T mo = static_cast<T>(momentum);
  for (std::size_t i = 0; i < running.mean.size(); ++i) {
    running.mean[i] = mo * running.mean[i] + (T{1} - mo) * batch.mean[i];
    running.var[i] = mo * running.var[i] + (T{1} - mo) * batch.var[i];
  }
}

template <typename T>
Var<T> relu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  const std::size_t xid = x.id;
  auto exact = [xid](const Tape<T>& tape, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    if (!gin[0]) return;
    const auto& X = tape.value(xid);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (X[i] > T{0}) (*gin[0])[i] += g[i];
  };
  auto bound = [](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    if (!gin[0]) return;
    for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
  };
  return x.tape->record("relu", std::move(out), {x}, exact, bound);
}

template <typename T>
Var<T> softmax2(Var<T> x) {
  const auto& xs = x.shape();
  require_rank4(xs, "softmax2");
  if (xs[1] != 2)
    throw ContractError("softmax2: expected 2 channels, got " + std::to_string(xs[1]));
  const std::size_t n = xs[0], hw = xs[2] * xs[3];
  Tensor<T> out(xs);
  const auto& X = x.value();
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < hw; ++i) {
      const T z0 = X[(b * 2) * hw + i], z1 = X[(b * 2 + 1) * hw + i];
      const T mx = std::max(z0, z1);
      const T e0 = std::exp(z0 - mx), e1 = std::exp(z1 - mx);
      const T s = e0 + e1;
      out[(b * 2) * hw + i] = e0 / s;
      out[(b * 2 + 1) * hw + i] = e1 / s;
    }
  auto probs = std::make_shared<Tensor<T>>(out);
  auto exact = [n, hw, probs](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    if (!gin[0]) return;
    const auto& P = *probs;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t i0 = (b * 2) * hw + i, i1 = (b * 2 + 1) * hw + i;
        const T dot = P[i0] * g[i0] + P[i1] * g[i1];
        (*gin[0])[i0] += P[i0] * (g[i0] - dot);
        (*gin[0])[i1] += P[i1] * (g[i1] - dot);
      }
  };
  auto bound = [n, hw](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    if (!gin[0]) return;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        const std::size_t i0 = (b * 2) * hw + i, i1 = (b * 2 + 1) * hw + i;
        const T s = g[i0] + g[i1];
        (*gin[0])[i0] += s;
        (*gin[0])[i1] += s;
      }
  };
  return x.tape->record("softmax2", std::move(out), {x}, exact, bound);
}

template <typename T>
Var<T> replicate_upsample(Var<T> x, int factor) {
  if (factor < 1) throw ContractError("replicate_upsample: factor must be >= 1");
  const auto& xs = x.shape();
  require_rank4(xs, "replicate_upsample");
  const std::size_t f = static_cast<std::size_t>(factor);
  const std::size_t planes = xs[0] * xs[1], h = xs[2], w = xs[3];
  const std::size_t oh = h * f, ow = w * f;
  Tensor<T> out({xs[0], xs[1], oh, ow});
  const auto& X = x.value();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        out[(p * oh + oy) * ow + ox] = X[(p * h + oy / f) * w + ox / f];
  auto fn = [=](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    if (!gin[0]) return;
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t oy = 0; oy < oh; ++oy)
        for (std::size_t ox = 0; ox < ow; ++ox)
          (*gin[0])[(p * h + oy / f) * w + ox / f] += g[(p * oh + oy) * ow + ox];
  };
  return x.tape->record("replicate_upsample", std::move(out), {x}, fn, fn);
}

template <typename T>
Var<T> concat_channels(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ContractError("concat_channels: no inputs");
  const Shape& s0 = xs[0].shape();
  require_rank4(s0, "concat_channels");
  std::vector<std::size_t> chans;
  std::size_t total = 0;
  for (const auto& v : xs) {
    const auto& s = v.shape();
    require_rank4(s, "concat_channels");
    if (s[0] != s0[0] || s[2] != s0[2] || s[3] != s0[3])
      throw ContractError("concat_channels: spatial/batch mismatch " + shape_str(s) + " vs " +
                          shape_str(s0));
    chans.push_back(s[1]);
    total += s[1];
  }
  const std::size_t n = s0[0], hw = s0[2] * s0[3];
  Tensor<T> out({n, total, s0[2], s0[3]});
  for (std::size_t b = 0; b < n; ++b) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < xs.size(); ++k) {
      std::copy_n(xs[k].value().raw() + b * chans[k] * hw, chans[k] * hw,
                  out.raw() + (b * total + off) * hw);
      off += chans[k];
    }
  }
  auto fn = [=](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    for (std::size_t b = 0; b < n; ++b) {
      std::size_t off = 0;
      for (std::size_t k = 0; k < chans.size(); ++k) {
        if (gin[k]) {
          const T* src = g.raw() + (b * total + off) * hw;
          T* dst = gin[k]->raw() + b * chans[k] * hw;
          for (std::size_t i = 0; i < chans[k] * hw; ++i) dst[i] += src[i];
        }
        off += chans[k];
      }
    }
  };
  return xs[0].tape->record("concat_channels", std::move(out), xs, fn, fn);
}

template <typename T>
Var<T> max_pool2(Var<T> x) {
  const auto& xs = x.shape();
  require_rank4(xs, "max_pool2");
  if (xs[2] % 2 || xs[3] % 2) throw ContractError("max_pool2: spatial size must be even");
  const std::size_t planes = xs[0] * xs[1], h = xs[2], w = xs[3], oh = h / 2, ow = w / 2;
  Tensor<T> out({xs[0], xs[1], oh, ow});
  auto arg = std::make_shared<std::vector<std::size_t>>(out.size());
  const auto& X = x.value();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (p * h + 2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (p * h + 2 * oy + dy) * w + 2 * ox + dx;
            if (X[idx] > X[best]) best = idx;
          }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = X[best];
        (*arg)[o] = best;
      }
  auto exact = [arg](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    if (!gin[0]) return;
    for (std::size_t o = 0; o < g.size(); ++o) (*gin[0])[(*arg)[o]] += g[o];
  };
  auto bound = [=](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    if (!gin[0]) return;
    for (std::size_t p = 0; p < planes; ++p)
      for (std::size_t y = 0; y < h; ++y)
        for (std::size_t xx = 0; xx < w; ++xx)
          (*gin[0])[(p * h + y) * w + xx] += g[(p * oh + y / 2) * ow + xx / 2];
  };
  return x.tape->record("max_pool2", std::move(out), {x}, exact, bound);
}

#define MENET_INSTANTIATE(T)                                                                   \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, ConvGeometry);                                \
  template Var<T> deconv2d(Var<T>, Var<T>, Var<T>, ConvGeometry);                              \
  template Var<T> batch_norm(Var<T>, Var<T>, Var<T>, const BatchNormStats<T>&, Mode,           \
                             BatchNormOptions, BatchNormStats<T>*);                            \
  template void update_running_stats(BatchNormStats<T>&, const BatchNormStats<T>&, double);    \
  template Var<T> relu(Var<T>);                                                                \
  template Var<T> softmax2(Var<T>);                                                            \
  template Var<T> replicate_upsample(Var<T>, int);                                             \
  template Var<T> concat_channels(const std::vector<Var<T>>&);                                 \
  template Var<T> max_pool2(Var<T>);

MENET_INSTANTIATE(float)
MENET_INSTANTIATE(double)
#undef MENET_INSTANTIATE

}  // namespace menet
