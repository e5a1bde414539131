#pragma once

#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "menet/tensor.hpp"

namespace menet {

/// `exact` runs the ordinary adjoint. `absolute_bound` runs every op's bound
/// rule instead: linear operators use the absolute values of their
/// coefficients and nonlinearities use a derivative bound of 1. With an
/// all-ones seed this yields an input-independent element-wise upper bound
/// on the Jacobian of the recorded function.
enum class BackwardMode { exact, absolute_bound };

template <typename T>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape(); }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
};

template <typename T>
class Gradients {
 public:
  const Tensor<T>& operator[](const Var<T>& v) const { return at(v.id); }
  const Tensor<T>& operator[](const std::string& name) const {
    auto it = names_.find(name);
    if (it == names_.end()) throw ContractError("no gradient recorded for '" + name + "'");
    return at(it->second);
  }
  bool contains(const std::string& name) const { return names_.count(name) != 0; }
  const std::map<std::string, std::size_t>& names() const { return names_; }
  Tensor<T> take(const std::string& name) {
    auto it = names_.find(name);
    if (it == names_.end()) throw ContractError("no gradient recorded for '" + name + "'");
    return std::move(by_id_.at(it->second));
  }

 private:
  friend class Tape<T>;
  const Tensor<T>& at(std::size_t id) const {
    auto it = by_id_.find(id);
    if (it == by_id_.end()) throw ContractError("variable is not a tracked leaf");
    return it->second;
  }
  std::unordered_map<std::size_t, Tensor<T>> by_id_;
  std::map<std::string, std::size_t> names_;
};

/// Define-by-run record of a forward computation. Built fresh per forward
/// pass and consumed by one backward pass. Confined to one thread.
template <typename T>
class Tape {
 public:
  /// Accumulates (+=) input adjoints given the output adjoint. Entries of
  /// `grad_in` are null for inputs that do not need a gradient.
  using GradFn =
      std::function<void(const Tape& tape, const Tensor<T>& grad_out, std::span<Tensor<T>*> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Tracked leaf owning its value.
  Var<T> leaf(Tensor<T> value, std::string name = {}) {
    Node n;
    n.owned = std::move(value);
    n.op = "leaf";
    n.requires_grad = true;
    n.is_leaf = true;
    n.name = name.empty() ? "leaf#" + std::to_string(nodes_.size()) : std::move(name);
    return push(std::move(n));
  }

  /// Tracked leaf aliasing external storage, which must outlive the tape
  /// and stay unmodified until backward completes.
  Var<T> leaf_ref(const Tensor<T>& value, std::string name) {
    Node n;
    n.ref = &value;
    n.op = "leaf";
    n.requires_grad = true;
    n.is_leaf = true;
    n.name = std::move(name);
    return push(std::move(n));
  }

  Var<T> constant(Tensor<T> value) {
    Node n;
    n.owned = std::move(value);
    n.op = "constant";
    return push(std::move(n));
  }

  Var<T> constant_ref(const Tensor<T>& value) {
    Node n;
    n.ref = &value;
    n.op = "constant";
    return push(std::move(n));
  }

  /// Records an op result. `bound` may be empty, in which case an
  /// absolute_bound backward through this op is rejected.
  Var<T> record(std::string op, Tensor<T> value, std::initializer_list<Var<T>> inputs, GradFn exact,
                GradFn bound = {}) {
    return record(std::move(op), std::move(value), std::vector<Var<T>>(inputs), std::move(exact),
                  std::move(bound));
  }

  Var<T> record(std::string op, Tensor<T> value, const std::vector<Var<T>>& inputs, GradFn exact,
                GradFn bound = {}) {
    if constexpr (kCheckFinite) {
      if (!value.all_finite()) throw NumericalError("non-finite output from op '" + op + "'");
    }
    Node n;
    n.owned = std::move(value);
    n.op = std::move(op);
    n.exact = std::move(exact);
    n.bound = std::move(bound);
    for (const auto& v : inputs) {
      if (v.tape != this) throw ContractError("op '" + n.op + "': input from a different tape");
      n.inputs.push_back(v.id);
      n.requires_grad = n.requires_grad || nodes_[v.id].requires_grad;
    }
    return push(std::move(n));
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_.at(id);
    return n.ref ? *n.ref : n.owned;
  }
  const std::string& op_name(std::size_t id) const { return nodes_.at(id).op; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Reverse sweep from `output` seeded with `seed`. Returns the adjoint of
  /// every tracked leaf (zero where the output does not depend on it).
  Gradients<T> backward(Var<T> output, const Tensor<T>& seed,
                        BackwardMode mode = BackwardMode::exact) {
    if (nodes_.empty()) throw ContractError("backward on an empty tape");
    if (consumed_) throw ContractError("tape already consumed by a backward pass");
    if (output.tape != this) throw ContractError("backward: output belongs to a different tape");
    if (seed.shape() != value(output.id).shape())
      throw ContractError("backward: seed shape " + shape_str(seed.shape()) +
                          " does not match output shape " + shape_str(value(output.id).shape()));
    consumed_ = true;

    std::vector<std::optional<Tensor<T>>> grads(output.id + 1);
    grads[output.id] = seed;
    std::vector<Tensor<T>*> gin;
    for (std::size_t k = output.id + 1; k-- > 0;) {
      Node& n = nodes_[k];
      if (n.is_leaf || !grads[k] || !n.requires_grad) continue;
      const GradFn& fn = mode == BackwardMode::exact ? n.exact : n.bound;
      if (!fn)
        throw ContractError("op '" + n.op + "' has no " +
                            (mode == BackwardMode::exact ? std::string("adjoint")
                                                         : std::string("absolute-bound rule")));
      gin.assign(n.inputs.size(), nullptr);
      for (std::size_t j = 0; j < n.inputs.size(); ++j) {
        const std::size_t in = n.inputs[j];
        if (!nodes_[in].requires_grad) continue;
        if (!grads[in]) grads[in] = Tensor<T>::zeros_like(value(in));
        gin[j] = &*grads[in];
      }
      fn(*this, *grads[k], gin);
      grads[k].reset();
      if constexpr (kCheckFinite) {
        for (auto* g : gin)
          if (g && !g->all_finite()) throw NumericalError("non-finite adjoint from op '" + n.op + "'");
      }
    }

    Gradients<T> out;
    for (std::size_t k = 0; k < nodes_.size(); ++k) {
      const Node& n = nodes_[k];
      if (!n.is_leaf) continue;
      if (k <= output.id && grads[k])
        out.by_id_.emplace(k, std::move(*grads[k]));
      else
        out.by_id_.emplace(k, Tensor<T>::zeros_like(value(k)));
      out.names_[n.name] = k;
    }
    return out;
  }

 private:
  struct Node {
    Tensor<T> owned;
    const Tensor<T>* ref = nullptr;
    std::string op;
    std::string name;
    std::vector<std::size_t> inputs;
    GradFn exact;
    GradFn bound;
    bool requires_grad = false;
    bool is_leaf = false;
  };

  Var<T> push(Node n) {
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

// ---------------------------------------------------------------------------
// Elementwise and reduction primitives.

template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> sub(Var<T> a, Var<T> b);
/// Elementwise product. Has no absolute-bound rule.
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> a, T s);
template <typename T>
Var<T> tanh(Var<T> a);
/// Sum of all elements, shape {1}.
template <typename T>
Var<T> sum(Var<T> a);
/// Dense layer on the flattened trailing dims: x [N, ...] -> [N, out],
/// weight [out, in], bias [out].
template <typename T>
Var<T> linear(Var<T> x, Var<T> weight, Var<T> bias);
/// Channel `c` of an N x C x H x W tensor as N x 1 x H x W.
template <typename T>
Var<T> select_channel(Var<T> x, std::size_t c);
/// Per-pixel Euclidean distance ||f_i - ref|| of an N x C x H x W field to a
/// fixed reference vector per image (refs: N x C). Output N x 1 x H x W.
template <typename T>
Var<T> pixel_distance(Var<T> field, const Tensor<T>& refs);

/// Scalar value of a shape-{1} variable.
template <typename T>
T scalar(const Var<T>& v) {
  if (v.value().size() != 1) throw ContractError("scalar: variable is not a scalar");
  return v.value()[0];
}

// ---------------------------------------------------------------------------
// Finite-difference verification harness.

using ScalarFn = std::function<Var<double>(Tape<double>&, std::span<const Var<double>>)>;

struct FiniteDiffReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares the reverse-mode gradient of a scalar function of several
/// tensors against central differences. Error per coordinate is
/// |g_a - g_n| / max(1, |g_n|).
FiniteDiffReport finite_diff_check(const ScalarFn& fn, std::span<const Tensor<double>> points,
                                   double eps = 1e-5);

double finite_diff_check(const std::function<Var<double>(Tape<double>&, Var<double>)>& fn,
                         const Tensor<double>& point, double eps = 1e-5);

}  // namespace menet
