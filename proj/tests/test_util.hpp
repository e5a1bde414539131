#pragma once

#include <cmath>
#include <functional>

#include "menet/autodiff.hpp"
#include "menet/layers.hpp"

namespace menet::testing {

inline Tensor<double> randn(Rng& rng, Shape s, double std = 1.0) {
  return random_normal<double>(rng, std::move(s), 0.0, std);
}

/// Direct nested-loop cross-correlation with zero padding.
inline Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                                  int stride, int pad) {
  const long n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const long cout = w.dim(0), k = w.dim(2);
  const long ho = (h + 2 * pad - k) / stride + 1, wo = (wd + 2 * pad - k) / stride + 1;
  Tensor<double> out({std::size_t(n), std::size_t(cout), std::size_t(ho), std::size_t(wo)});
  for (long s = 0; s < n; ++s)
    for (long co = 0; co < cout; ++co)
      for (long oy = 0; oy < ho; ++oy)
        for (long ox = 0; ox < wo; ++ox) {
          double acc = b[co];
          for (long ci = 0; ci < cin; ++ci)
            for (long ky = 0; ky < k; ++ky)
              for (long kx = 0; kx < k; ++kx) {
                const long iy = oy * stride + ky - pad, ix = ox * stride + kx - pad;
                if (iy < 0 || ix < 0 || iy >= h || ix >= wd) continue;
                acc += w[((co * cin + ci) * k + ky) * k + kx] * x.at(s, ci, iy, ix);
              }
          out.at(s, co, oy, ox) = acc;
        }
  return out;
}

using UnaryFn = std::function<Var<double>(Tape<double>&, Var<double>)>;

/// Returns |<J dx, dy> - <dx, J^T dy>| / max(1, |<dx, J^T dy>|) with J dx
/// from central differences and J^T dy from the tape.
inline double adjoint_gap(const UnaryFn& fn, const Tensor<double>& x, Rng& rng, double h = 1e-6) {
  Tensor<double> dx = randn(rng, x.shape());
  Tensor<double> y0;
  {
    Tape<double> t;
    y0 = fn(t, t.constant(x)).value();
  }
  Tensor<double> dy = randn(rng, y0.shape());
  Tape<double> tape;
  auto xv = tape.leaf(x, "x");
  auto y = fn(tape, xv);
  const auto jt = tape.backward(y, dy).take("x");
  auto eval = [&](double s) {
    Tensor<double> xs = x;
    for (std::size_t i = 0; i < xs.size(); ++i) xs[i] += s * dx[i];
    Tape<double> t;
    return fn(t, t.constant(xs)).value();
  };
  const auto yp = eval(h), ym = eval(-h);
  double lhs = 0;
  for (std::size_t i = 0; i < dy.size(); ++i) lhs += (yp[i] - ym[i]) / (2 * h) * dy[i];
  const double rhs = dot(dx, jt);
  return std::abs(lhs - rhs) / std::max(1.0, std::abs(rhs));
}

}  // namespace menet::testing
