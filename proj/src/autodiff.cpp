#include "menet/autodiff.hpp"

#include <cmath>
#include <sstream>

namespace menet {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

template <typename T>
void require_same(const Var<T>& a, const Var<T>& b, const char* op) {
  if (a.shape() != b.shape())
    throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
}

template <typename T>
void accumulate(Tensor<T>* dst, const Tensor<T>& src, T s = T{1}) {
  if (!dst) return;
  auto d = dst->data();
  auto g = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s * g[i];
}

}  // namespace

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  require_same(a, b, "add");
  Tensor<T> out = a.value();
  out += b.value();
  auto fn = [](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    accumulate(gin[0], g);
    accumulate(gin[1], g);
  };
  return a.tape->record("add", std::move(out), {a, b}, fn, fn);
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  require_same(a, b, "sub");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  auto exact = [](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    accumulate(gin[0], g);
    accumulate(gin[1], g, T{-1});
  };
  auto bound = [](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    accumulate(gin[0], g);
    accumulate(gin[1], g);
  };
  return a.tape->record("sub", std::move(out), {a, b}, exact, bound);
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  require_same(a, b, "mul");
  Tensor<T> out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  const std::size_t ia = a.id, ib = b.id;
  auto exact = [ia, ib](const Tape<T>& tape, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    const auto& va = tape.value(ia);
    const auto& vb = tape.value(ib);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (gin[0]) (*gin[0])[i] += g[i] * vb[i];
      if (gin[1]) (*gin[1])[i] += g[i] * va[i];
    }
  };
  return a.tape->record("mul", std::move(out), {a, b}, exact);
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  Tensor<T> out = a.value();
  out *= s;
  auto exact = [s](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    accumulate(gin[0], g, s);
  };
  auto bound = [s](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    accumulate(gin[0], g, std::abs(s));
  };
  return a.tape->record("scale", std::move(out), {a}, exact, bound);
}

template <typename T>
Var<T> tanh(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.data()) v = std::tanh(v);
  const std::size_t ia = a.id;
  auto exact = [ia](const Tape<T>& tape, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    if (!gin[0]) return;
    const auto& x = tape.value(ia);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const T y = std::tanh(x[i]);
      (*gin[0])[i] += g[i] * (T{1} - y * y);
    }
  };
  auto bound = [](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    accumulate(gin[0], g);
  };
  return a.tape->record("tanh", std::move(out), {a}, exact, bound);
}

template <typename T>
Var<T> sum(Var<T> a) {
  long double acc = 0;
  for (T v : a.value().data()) acc += v;
  Tensor<T> out({1}, static_cast<T>(acc));
  auto fn = [](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    if (!gin[0]) return;
    for (auto& v : gin[0]->data()) v += g[0];
  };
  return a.tape->record("sum", std::move(out), {a}, fn, fn);
}

template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias) {
  const auto& xs = x.shape();
  if (xs.empty()) throw ContractError("linear: input must have a batch dimension");
  const std::size_t n = xs[0];
  const std::size_t in = x.value().size() / n;
  if (weight.shape().size() != 2 || weight.dim(1) != in)
    throw ContractError("linear: weight " + shape_str(weight.shape()) + " incompatible with input " +
                        shape_str(xs));
  const std::size_t out_dim = weight.dim(0);
  if (bias.shape() != Shape{out_dim}) throw ContractError("linear: bias shape mismatch");
  const auto& X = x.value();
  const auto& W = weight.value();
  const auto& B = bias.value();
  Tensor<T> out({n, out_dim});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < out_dim; ++o) {
      T acc = B[o];
      for (std::size_t i = 0; i < in; ++i) acc += W[o * in + i] * X[s * in + i];
      out[s * out_dim + o] = acc;
    }
  const std::size_t ix = x.id, iw = weight.id;
  auto exact = [=](const Tape<T>& tape, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    const auto& Xv = tape.value(ix);
    const auto& Wv = tape.value(iw);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t o = 0; o < out_dim; ++o) {
        const T go = g[s * out_dim + o];
        if (gin[2]) (*gin[2])[o] += go;
        for (std::size_t i = 0; i < in; ++i) {
          if (gin[0]) (*gin[0])[s * in + i] += go * Wv[o * in + i];
          if (gin[1]) (*gin[1])[o * in + i] += go * Xv[s * in + i];
        }
      }
  };
  auto bound = [=](const Tape<T>& tape, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    if (!gin[0]) return;
    const auto& Wv = tape.value(iw);
    for (std::size_t s = 0; s < n; ++s)
      for (std::size_t o = 0; o < out_dim; ++o)
        for (std::size_t i = 0; i < in; ++i)
          (*gin[0])[s * in + i] += g[s * out_dim + o] * std::abs(Wv[o * in + i]);
  };
  return x.tape->record("linear", std::move(out), {x, weight, bias}, exact, bound);
}

template <typename T>
Var<T> select_channel(Var<T> x, std::size_t c) {
  const auto& s = x.shape();
  if (s.size() != 4 || c >= s[1]) throw ContractError("select_channel: channel out of range");
  const std::size_t n = s[0], ch = s[1], hw = s[2] * s[3];
  Tensor<T> out({n, 1, s[2], s[3]});
  for (std::size_t b = 0; b < n; ++b)
    std::copy_n(x.value().raw() + (b * ch + c) * hw, hw, out.raw() + b * hw);
  auto fn = [=](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    if (!gin[0]) return;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < hw; ++i) (*gin[0])[(b * ch + c) * hw + i] += g[b * hw + i];
  };
  return x.tape->record("select_channel", std::move(out), {x}, fn, fn);
}

template <typename T>
Var<T> pixel_distance(Var<T> field, const Tensor<T>& refs) {
  const auto& s = field.shape();
  if (s.size() != 4) throw ContractError("pixel_distance: field must be N x C x H x W");
  const std::size_t n = s[0], ch = s[1], hw = s[2] * s[3];
  if (refs.shape() != Shape{n, ch})
    throw ContractError("pixel_distance: reference shape " + shape_str(refs.shape()) +
                        " does not match field " + shape_str(s));
  const auto& F = field.value();
  Tensor<T> out({n, 1, s[2], s[3]});
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t i = 0; i < hw; ++i) {
      T acc = 0;
      for (std::size_t c = 0; c < ch; ++c) {
        const T d = F[(b * ch + c) * hw + i] - refs[b * ch + c];
        acc += d * d;
      }
      out[b * hw + i] = std::sqrt(acc);
    }
  const std::size_t fid = field.id;
  Tensor<T> r = refs;
  auto exact = [=](const Tape<T>& tape, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    if (!gin[0]) return;
    const auto& Fv = tape.value(fid);
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t i = 0; i < hw; ++i) {
        T norm2 = 0;
        for (std::size_t c = 0; c < ch; ++c) {
          const T d = Fv[(b * ch + c) * hw + i] - r[b * ch + c];
          norm2 += d * d;
        }
        if (norm2 <= T{0}) continue;  // subgradient 0 at the reference point
        const T inv = g[b * hw + i] / std::sqrt(norm2);
        for (std::size_t c = 0; c < ch; ++c)
          (*gin[0])[(b * ch + c) * hw + i] += inv * (Fv[(b * ch + c) * hw + i] - r[b * ch + c]);
      }
  };
  auto bound = [=](const Tape<T>&, const Tensor<T>& g, std::span<Tensor<T>*> gin) {
    if (!gin[0]) return;
    for (std::size_t b = 0; b < n; ++b)
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t i = 0; i < hw; ++i) (*gin[0])[(b * ch + c) * hw + i] += g[b * hw + i];
  };
  return field.tape->record("pixel_distance", std::move(out), {field}, exact, bound);
}

#define MENET_INSTANTIATE(T)                                          \
  template Var<T> add(Var<T>, Var<T>);                                \
  template Var<T> sub(Var<T>, Var<T>);                                \
  template Var<T> mul(Var<T>, Var<T>);                                \
  template Var<T> scale(Var<T>, T);                                   \
  template Var<T> tanh(Var<T>);                                       \
  template Var<T> sum(Var<T>);                                        \
  template Var<T> linear(Var<T>, Var<T>, Var<T>);                     \
  template Var<T> select_channel(Var<T>, std::size_t);                \
  template Var<T> pixel_distance(Var<T>, const Tensor<T>&);

MENET_INSTANTIATE(float)
MENET_INSTANTIATE(double)
#undef MENET_INSTANTIATE

// ---------------------------------------------------------------------------

FiniteDiffReport finite_diff_check(const ScalarFn& fn, std::span<const Tensor<double>> points,
                                   double eps) {
  if (!(eps > 0)) throw ContractError("finite_diff_check: eps must be > 0");
  auto evaluate = [&](std::span<const Tensor<double>> pts) {
    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& p : pts) vars.push_back(tape.constant(p));
    const double v = scalar(fn(tape, vars));
    if (!std::isfinite(v)) throw NumericalError("finite_diff_check: non-finite forward value");
    return v;
  };

  Tape<double> tape;
  std::vector<Var<double>> vars;
  for (std::size_t i = 0; i < points.size(); ++i)
    vars.push_back(tape.leaf(points[i], "input" + std::to_string(i)));
  Var<double> out = fn(tape, vars);
  if (out.value().size() != 1) throw ContractError("finite_diff_check: function must be scalar");
  if (!std::isfinite(out.value()[0]))
    throw NumericalError("finite_diff_check: non-finite forward value");
  auto grads = tape.backward(out, Tensor<double>({1}, 1.0));

  std::vector<Tensor<double>> work(points.begin(), points.end());
  FiniteDiffReport report;
  for (std::size_t k = 0; k < work.size(); ++k) {
    const Tensor<double>& ga = grads[vars[k]];
    for (std::size_t i = 0; i < work[k].size(); ++i) {
      const double orig = work[k][i];
      work[k][i] = orig + eps;
      const double fp = evaluate(work);
      work[k][i] = orig - eps;
      const double fm = evaluate(work);
      work[k][i] = orig;
      const double gn = (fp - fm) / (2 * eps);
      const double err = std::abs(ga[i] - gn) / std::max(1.0, std::abs(gn));
      if (err > report.max_rel_error || (k == 0 && i == 0)) {
        report = {std::max(err, report.max_rel_error), k, i, ga[i], gn};
      }
    }
  }
  return report;
}

double finite_diff_check(const std::function<Var<double>(Tape<double>&, Var<double>)>& fn,
                         const Tensor<double>& point, double eps) {
  ScalarFn wrapped = [&fn](Tape<double>& tape, std::span<const Var<double>> vars) {
    return fn(tape, vars[0]);
  };
  return finite_diff_check(wrapped, std::span<const Tensor<double>>(&point, 1), eps).max_rel_error;
}

}  // namespace menet
