#pragma once

// Reverse-mode differentiation over dense tensors.
//
// A Tape records every primitive applied during one forward pass. Leaves are
// constants or views of named parameters held in a ParameterStore; backward()
// replays the adjoints in reverse order and accumulates into the store.

#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mkr/tensor.hpp"

namespace mkr {

class ParameterStore {
 public:
  struct Entry {
    Tensor value;
    Tensor grad;
  };

  void add(const std::string& name, Tensor value) {
    if (entries_.contains(name)) throw ContractError("duplicate parameter name '" + name + "'");
    Tensor grad(value.shape());
    entries_.emplace(name, Entry{std::move(value), std::move(grad)});
  }

  bool contains(const std::string& name) const { return entries_.contains(name); }

  const Tensor& value(const std::string& name) const { return entry(name).value; }
  Tensor& value(const std::string& name) { return entry(name).value; }
  const Tensor& grad(const std::string& name) const { return entry(name).grad; }
  Tensor& grad(const std::string& name) { return entry(name).grad; }

  /// Replace a parameter's value, keeping its shape.
  void set(const std::string& name, Tensor value) {
    auto& e = entry(name);
    if (value.shape() != e.value.shape()) {
      throw DimensionError("parameter '" + name + "' expects " + shape_string(e.value.shape()) +
                           ", got " + shape_string(value.shape()));
    }
    e.value = std::move(value);
  }

  void zero_grad() {
    for (auto& [_, e] : entries_) e.grad.fill(0.0);
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& [name, _] : entries_) out.push_back(name);
    return out;
  }

  std::size_t size() const { return entries_.size(); }

  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  Entry& entry(const std::string& name) {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Entry& entry(const std::string& name) const {
    auto it = entries_.find(name);
    if (it == entries_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }

  std::map<std::string, Entry> entries_;
};

class Tape;

/// Handle to a node on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Adjoint callback: receives the output gradient and accumulates into the
/// gradients of inputs that require one (null pointers for the rest).
using Adjoint = std::function<void(const Tensor& grad_out, std::span<Tensor* const> grad_in,
                                   std::span<const Tensor* const> in, const Tensor& out)>;

/// The ComputationRecord of one forward pass.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value) {
    nodes_.push_back(Node{std::move(value), {}, nullptr, {}, {}, false, false});
    return Var(this, nodes_.size() - 1);
  }

  /// Leaf viewing the full value of a stored parameter.
  Var parameter(const ParameterStore& store, const std::string& name) {
    nodes_.push_back(Node{store.value(name), {}, nullptr, name, {}, false, true, true});
    return Var(this, nodes_.size() - 1);
  }

  /// Leaf holding selected rows of a rank-2 parameter (an embedding lookup).
  Var gather(const ParameterStore& store, const std::string& name, std::span<const std::size_t> rows) {
    const Tensor& table = store.value(name);
    if (table.rank() != 2) throw DimensionError("gather needs a rank-2 table, '" + name + "' is " + shape_string(table.shape()));
    const std::size_t n = table.dim(0), d = table.dim(1);
    if (rows.empty()) throw ContractError("gather with no rows from '" + name + "'");
    Tensor out(Shape{rows.size(), d});
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r] >= n) {
        throw ContractError("row " + std::to_string(rows[r]) + " out of range for '" + name + "' with " +
                            std::to_string(n) + " rows");
      }
      std::copy_n(table.data().begin() + rows[r] * d, d, out.data().begin() + r * d);
    }
    nodes_.push_back(Node{std::move(out), {}, nullptr, name, std::vector<std::size_t>(rows.begin(), rows.end()),
                          true, true, true});
    return Var(this, nodes_.size() - 1);
  }

  /// Record a primitive. Used by the op functions below.
  Var record(Tensor value, std::vector<std::size_t> inputs, Adjoint adjoint) {
    bool needs = false;
    for (std::size_t in : inputs) needs = needs || nodes_.at(in).requires_grad;
    nodes_.push_back(Node{std::move(value), std::move(inputs), needs ? std::move(adjoint) : nullptr, {}, {}, false,
                          needs});
    return Var(this, nodes_.size() - 1);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  std::size_t size() const noexcept { return nodes_.size(); }

  /// Populate store gradients with d(loss)/d(parameter). Every gradient in
  /// the store is reset first, so parameters off the path end up at zero.
  /// Returns the names of parameters reached from the loss.
  std::set<std::string> backward(const Var& loss, ParameterStore& store) {
    if (loss.tape() != this) throw ContractError("loss belongs to a different tape");
    const Tensor& lv = value(loss.id());
    if (!lv.is_scalar()) throw ContractError("backward needs a scalar loss, got " + shape_string(lv.shape()));
    store.zero_grad();
    std::set<std::string> reached;
    const std::size_t n = loss.id() + 1;
    std::vector<Tensor> grads(n);
    std::vector<bool> has(n, false);
    grads[loss.id()] = Tensor(lv.shape(), 1.0);
    has[loss.id()] = true;

    std::vector<Tensor*> gin;
    std::vector<const Tensor*> xin;
    for (std::size_t i = n; i-- > 0;) {
      if (!has[i]) continue;
      Node& node = nodes_[i];
      if (node.is_param) {
        reached.insert(node.param);
        Tensor& g = store.grad(node.param);
        if (node.gathered) {
          const std::size_t d = g.dim(1);
          for (std::size_t r = 0; r < node.rows.size(); ++r) {
            for (std::size_t j = 0; j < d; ++j) g[node.rows[r] * d + j] += grads[i][r * d + j];
          }
        } else {
          g += grads[i];
        }
        continue;
      }
      if (!node.adjoint) continue;
      gin.assign(node.inputs.size(), nullptr);
      xin.assign(node.inputs.size(), nullptr);
      for (std::size_t k = 0; k < node.inputs.size(); ++k) {
        const std::size_t in = node.inputs[k];
        xin[k] = &nodes_[in].value;
        if (!nodes_[in].requires_grad) continue;
        if (!has[in]) {
          grads[in] = Tensor(nodes_[in].value.shape());
          has[in] = true;
        }
        gin[k] = &grads[in];
      }
      node.adjoint(grads[i], gin, xin, node.value);
    }
    return reached;
  }

 private:
  struct Node {
    Tensor value;
    std::vector<std::size_t> inputs;
    Adjoint adjoint;
    std::string param;
    std::vector<std::size_t> rows;
    bool gathered = false;
    bool requires_grad = false;
    bool is_param = false;
  };

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const {
  if (!tape_) throw ContractError("unbound Var");
  return tape_->value(id_);
}

namespace detail {

inline Tape& same_tape(const Var& a, const Var& b) {
  if (!a.tape() || a.tape() != b.tape()) throw ContractError("operands live on different tapes");
  return *a.tape();
}

// Binary elementwise with identical shapes or a scalar operand.
inline Shape broadcast_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() == b.shape()) return a.shape();
  if (b.is_scalar()) return a.shape();
  if (a.is_scalar()) return b.shape();
  throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                       shape_string(b.shape()));
}

inline double bval(const Tensor& t, std::size_t i) { return t.is_scalar() ? t[0] : t[i]; }

inline void badd(Tensor* g, std::size_t i, double v) {
  if (!g) return;
  if (g->is_scalar()) (*g)[0] += v;
  else (*g)[i] += v;
}

}  // namespace detail

/// Numerically stable logistic function, kept strictly inside (0, 1).
inline double stable_sigmoid(double x) {
  constexpr double lo = std::numeric_limits<double>::denorm_min();
  constexpr double hi = 1.0 - std::numeric_limits<double>::epsilon() / 2.0;
  double s;
  if (x >= 0.0) {
    s = 1.0 / (1.0 + std::exp(-x));
  } else {
    const double ex = std::exp(x);
    s = ex / (1.0 + ex);
  }
  return std::clamp(s, lo, hi);
}

inline Var add(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor &x = a.value(), &y = b.value();
  Tensor out(detail::broadcast_shape(x, y, "add"));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::bval(x, i) + detail::bval(y, i);
  return tape.record(std::move(out), {a.id(), b.id()},
                     [](const Tensor& g, std::span<Tensor* const> gi, auto, const Tensor&) {
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         detail::badd(gi[0], i, g[i]);
                         detail::badd(gi[1], i, g[i]);
                       }
                     });
}

inline Var sub(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor &x = a.value(), &y = b.value();
  Tensor out(detail::broadcast_shape(x, y, "sub"));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::bval(x, i) - detail::bval(y, i);
  return tape.record(std::move(out), {a.id(), b.id()},
                     [](const Tensor& g, std::span<Tensor* const> gi, auto, const Tensor&) {
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         detail::badd(gi[0], i, g[i]);
                         detail::badd(gi[1], i, -g[i]);
                       }
                     });
}

inline Var mul(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor &x = a.value(), &y = b.value();
  Tensor out(detail::broadcast_shape(x, y, "mul"));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = detail::bval(x, i) * detail::bval(y, i);
  return tape.record(std::move(out), {a.id(), b.id()},
                     [](const Tensor& g, std::span<Tensor* const> gi, std::span<const Tensor* const> in,
                        const Tensor&) {
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         detail::badd(gi[0], i, g[i] * detail::bval(*in[1], i));
                         detail::badd(gi[1], i, g[i] * detail::bval(*in[0], i));
                       }
                     });
}

inline Var scale(const Var& a, double factor) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = factor * x[i];
  return a.tape()->record(std::move(out), {a.id()},
                          [factor](const Tensor& g, std::span<Tensor* const> gi, auto, const Tensor&) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += factor * g[i];
                          });
}

inline Var sigmoid(const Var& a) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = stable_sigmoid(x[i]);
  return a.tape()->record(std::move(out), {a.id()},
                          [](const Tensor& g, std::span<Tensor* const> gi, auto, const Tensor& y) {
                            for (std::size_t i = 0; i < g.size(); ++i) (*gi[0])[i] += g[i] * y[i] * (1.0 - y[i]);
                          });
}

inline Var relu(const Var& a) {
  const Tensor& x = a.value();
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  return a.tape()->record(std::move(out), {a.id()},
                          [](const Tensor& g, std::span<Tensor* const> gi, std::span<const Tensor* const> in,
                             const Tensor&) {
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              if ((*in[0])[i] > 0.0) (*gi[0])[i] += g[i];
                            }
                          });
}

/// Sum of all elements, as a rank-0 tensor.
inline Var sum(const Var& a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v;
  return a.tape()->record(Tensor::scalar(s), {a.id()},
                          [](const Tensor& g, std::span<Tensor* const> gi, auto, const Tensor&) {
                            for (double& v : gi[0]->data()) v += g[0];
                          });
}

inline Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

inline Var sum_squares(const Var& a) {
  const Tensor& x = a.value();
  double s = 0.0;
  for (double v : x.data()) s += v * v;
  return a.tape()->record(Tensor::scalar(s), {a.id()},
                          [](const Tensor& g, std::span<Tensor* const> gi, std::span<const Tensor* const> in,
                             const Tensor&) {
                            for (std::size_t i = 0; i < in[0]->size(); ++i) (*gi[0])[i] += 2.0 * (*in[0])[i] * g[0];
                          });
}

inline Var matmul(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor &x = a.value(), &y = b.value();
  if (x.rank() != 2 || y.rank() != 2 || x.dim(1) != y.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_string(x.shape()) + " and " +
                         shape_string(y.shape()));
  }
  const std::size_t m = x.dim(0), n = x.dim(1), p = y.dim(1);
  Tensor out(Shape{m, p});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      const double xik = x[i * n + k];
      for (std::size_t j = 0; j < p; ++j) out[i * p + j] += xik * y[k * p + j];
    }
  }
  return tape.record(std::move(out), {a.id(), b.id()},
                     [m, n, p](const Tensor& g, std::span<Tensor* const> gi, std::span<const Tensor* const> in,
                               const Tensor&) {
                       const Tensor &x = *in[0], &y = *in[1];
                       if (gi[0]) {
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t k = 0; k < n; ++k) {
                             double s = 0.0;
                             for (std::size_t j = 0; j < p; ++j) s += g[i * p + j] * y[k * p + j];
                             (*gi[0])[i * n + k] += s;
                           }
                       }
                       if (gi[1]) {
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t k = 0; k < n; ++k) {
                             const double xik = x[i * n + k];
                             for (std::size_t j = 0; j < p; ++j) (*gi[1])[k * p + j] += xik * g[i * p + j];
                           }
                       }
                     });
}

/// Swap the last two axes (rank 2 or 3).
inline Var transpose(const Var& a) {
  const Tensor& x = a.value();
  if (x.rank() != 2 && x.rank() != 3) throw DimensionError("transpose needs rank 2 or 3, got " + shape_string(x.shape()));
  const std::size_t batch = x.rank() == 3 ? x.dim(0) : 1;
  const std::size_t r = x.dim(x.rank() - 2), c = x.dim(x.rank() - 1);
  Shape s = x.shape();
  std::swap(s[s.size() - 1], s[s.size() - 2]);
  Tensor out(s);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) out[b * r * c + j * r + i] = x[b * r * c + i * c + j];
  return a.tape()->record(std::move(out), {a.id()},
                          [batch, r, c](const Tensor& g, std::span<Tensor* const> gi, auto, const Tensor&) {
                            for (std::size_t b = 0; b < batch; ++b)
                              for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < c; ++j)
                                  (*gi[0])[b * r * c + i * c + j] += g[b * r * c + j * r + i];
                          });
}

/// x[B x d] + bias[d], broadcast over rows. Also accepts x[d].
inline Var add_bias(const Var& x, const Var& bias) {
  Tape& tape = detail::same_tape(x, bias);
  const Tensor &a = x.value(), &b = bias.value();
  if (b.rank() != 1 || a.shape().back() != b.dim(0) || a.rank() > 2) {
    throw DimensionError("add_bias: " + shape_string(a.shape()) + " with bias " + shape_string(b.shape()));
  }
  const std::size_t d = b.dim(0), rows = a.size() / d;
  Tensor out = a;
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] += b[j];
  return tape.record(std::move(out), {x.id(), bias.id()},
                     [rows, d](const Tensor& g, std::span<Tensor* const> gi, auto, const Tensor&) {
                       if (gi[0]) *gi[0] += g;
                       if (gi[1])
                         for (std::size_t r = 0; r < rows; ++r)
                           for (std::size_t j = 0; j < d; ++j) (*gi[1])[j] += g[r * d + j];
                     });
}

/// Outer product per row: v[d], e[d] -> [d x d]; v[B x d], e[B x d] -> [B x d x d].
inline Var outer(const Var& v, const Var& e) {
  Tape& tape = detail::same_tape(v, e);
  const Tensor &a = v.value(), &b = e.value();
  if (a.shape() != b.shape() || a.rank() < 1 || a.rank() > 2) {
    throw DimensionError("outer: dimension mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  const std::size_t d = a.shape().back(), batch = a.size() / d;
  Shape s = a.shape();
  s.push_back(d);
  Tensor out(s);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) out[n * d * d + i * d + j] = a[n * d + i] * b[n * d + j];
  return tape.record(std::move(out), {v.id(), e.id()},
                     [batch, d](const Tensor& g, std::span<Tensor* const> gi, std::span<const Tensor* const> in,
                                const Tensor&) {
                       const Tensor &a = *in[0], &b = *in[1];
                       for (std::size_t n = 0; n < batch; ++n)
                         for (std::size_t i = 0; i < d; ++i)
                           for (std::size_t j = 0; j < d; ++j) {
                             const double gij = g[n * d * d + i * d + j];
                             if (gi[0]) (*gi[0])[n * d + i] += gij * b[n * d + j];
                             if (gi[1]) (*gi[1])[n * d + j] += gij * a[n * d + i];
                           }
                     });
}

/// Matrix-vector product over the last two axes: C[d x d] w[d] -> [d], C[B x d x d] w[d] -> [B x d].
inline Var matvec(const Var& c, const Var& w) {
  Tape& tape = detail::same_tape(c, w);
  const Tensor &m = c.value(), &x = w.value();
  if (x.rank() != 1 || m.rank() < 2 || m.rank() > 3 || m.dim(m.rank() - 1) != x.dim(0)) {
    throw DimensionError("matvec: " + shape_string(m.shape()) + " with " + shape_string(x.shape()));
  }
  const std::size_t cols = x.dim(0), rows = m.dim(m.rank() - 2), batch = m.rank() == 3 ? m.dim(0) : 1;
  Shape s(m.shape().begin(), m.shape().end() - 1);
  Tensor out(s);
  for (std::size_t n = 0; n < batch; ++n)
    for (std::size_t i = 0; i < rows; ++i) {
      double acc = 0.0;
      for (std::size_t j = 0; j < cols; ++j) acc += m[(n * rows + i) * cols + j] * x[j];
      out[n * rows + i] = acc;
    }
  return tape.record(std::move(out), {c.id(), w.id()},
                     [batch, rows, cols](const Tensor& g, std::span<Tensor* const> gi,
                                         std::span<const Tensor* const> in, const Tensor&) {
                       const Tensor &m = *in[0], &x = *in[1];
                       for (std::size_t n = 0; n < batch; ++n)
                         for (std::size_t i = 0; i < rows; ++i) {
                           const double go = g[n * rows + i];
                           for (std::size_t j = 0; j < cols; ++j) {
                             if (gi[0]) (*gi[0])[(n * rows + i) * cols + j] += go * x[j];
                             if (gi[1]) (*gi[1])[j] += go * m[(n * rows + i) * cols + j];
                           }
                         }
                     });
}

/// Multiply row n of x[B x d] by s[n] (s has shape [B]).
inline Var row_scale(const Var& x, const Var& s) {
  Tape& tape = detail::same_tape(x, s);
  const Tensor &a = x.value(), &f = s.value();
  if (a.rank() != 2 || f.rank() != 1 || f.dim(0) != a.dim(0)) {
    throw DimensionError("row_scale: " + shape_string(a.shape()) + " with " + shape_string(f.shape()));
  }
  const std::size_t rows = a.dim(0), d = a.dim(1);
  Tensor out(a.shape());
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = a[r * d + j] * f[r];
  return tape.record(std::move(out), {x.id(), s.id()},
                     [rows, d](const Tensor& g, std::span<Tensor* const> gi, std::span<const Tensor* const> in,
                               const Tensor&) {
                       const Tensor &a = *in[0], &f = *in[1];
                       for (std::size_t r = 0; r < rows; ++r)
                         for (std::size_t j = 0; j < d; ++j) {
                           if (gi[0]) (*gi[0])[r * d + j] += g[r * d + j] * f[r];
                           if (gi[1]) (*gi[1])[r] += g[r * d + j] * a[r * d + j];
                         }
                     });
}

/// Reduce the last axis: [B x d] -> [B], [d] -> scalar.
inline Var sum_last(const Var& a) {
  const Tensor& x = a.value();
  if (x.rank() < 1 || x.rank() > 2) throw DimensionError("sum_last needs rank 1 or 2, got " + shape_string(x.shape()));
  const std::size_t d = x.shape().back(), rows = x.size() / d;
  Tensor out = x.rank() == 2 ? Tensor(Shape{rows}) : Tensor::scalar(0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) out[r] += x[r * d + j];
  return a.tape()->record(std::move(out), {a.id()},
                          [rows, d](const Tensor& g, std::span<Tensor* const> gi, auto, const Tensor&) {
                            for (std::size_t r = 0; r < rows; ++r)
                              for (std::size_t j = 0; j < d; ++j) (*gi[0])[r * d + j] += g[r];
                          });
}

/// Row-wise dot product of two [B x d] (or [d]) tensors.
inline Var rowdot(const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("rowdot: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
  return sum_last(mul(a, b));
}

/// Concatenate along the last axis: [B x p], [B x q] -> [B x (p+q)].
inline Var concat_last(const Var& a, const Var& b) {
  Tape& tape = detail::same_tape(a, b);
  const Tensor &x = a.value(), &y = b.value();
  if (x.rank() != y.rank() || x.rank() < 1 || x.rank() > 2 || (x.rank() == 2 && x.dim(0) != y.dim(0))) {
    throw DimensionError("concat: " + shape_string(x.shape()) + " with " + shape_string(y.shape()));
  }
  const std::size_t p = x.shape().back(), q = y.shape().back(), rows = x.size() / p;
  Shape s = x.shape();
  s.back() = p + q;
  Tensor out(s);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t j = 0; j < p; ++j) out[r * (p + q) + j] = x[r * p + j];
    for (std::size_t j = 0; j < q; ++j) out[r * (p + q) + p + j] = y[r * q + j];
  }
  return tape.record(std::move(out), {a.id(), b.id()},
                     [rows, p, q](const Tensor& g, std::span<Tensor* const> gi, auto, const Tensor&) {
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (gi[0])
                           for (std::size_t j = 0; j < p; ++j) (*gi[0])[r * p + j] += g[r * (p + q) + j];
                         if (gi[1])
                           for (std::size_t j = 0; j < q; ++j) (*gi[1])[r * q + j] += g[r * (p + q) + p + j];
                       }
                     });
}

/// Mean binary cross-entropy of probabilities p against 0/1 labels, with p
/// clamped to [1e-12, 1 - 1e-12]. Clamped entries pass no gradient.
inline Var binary_cross_entropy(const Var& p, std::span<const double> labels) {
  const Tensor& x = p.value();
  if (x.size() != labels.size()) {
    throw DimensionError("binary_cross_entropy: " + std::to_string(x.size()) + " predictions vs " +
                         std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw ContractError("binary_cross_entropy on empty batch");
  constexpr double lo = 1e-12, hi = 1.0 - 1e-12;
  const double n = static_cast<double>(labels.size());
  double total = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double q = std::clamp(x[i], lo, hi);
    total -= labels[i] * std::log(q) + (1.0 - labels[i]) * std::log(1.0 - q);
  }
  std::vector<double> y(labels.begin(), labels.end());
  return p.tape()->record(Tensor::scalar(total / n), {p.id()},
                          [y = std::move(y), n](const Tensor& g, std::span<Tensor* const> gi,
                                                std::span<const Tensor* const> in, const Tensor&) {
                            const Tensor& x = *in[0];
                            for (std::size_t i = 0; i < x.size(); ++i) {
                              const double q = x[i];
                              if (q < lo || q > hi) continue;
                              (*gi[0])[i] += g[0] * (-(y[i] / q) + (1.0 - y[i]) / (1.0 - q)) / n;
                            }
                          });
}

}  // namespace mkr
