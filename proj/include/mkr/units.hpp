#pragma once

// Layers shared by the recommender and knowledge-graph towers.
//
// Each layer type is a set of parameter names inside a ParameterStore plus a
// forward function that records onto a Tape. The Tensor-level functions at the
// bottom evaluate a layer once, outside of training.

#include <cmath>
#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <utility>

#include "mkr/autodiff.hpp"

namespace mkr {

using Rng = std::mt19937_64;

enum class Activation { relu, sigmoid, identity };

inline Var activate(const Var& x, Activation act) {
  switch (act) {
    case Activation::relu: return relu(x);
    case Activation::sigmoid: return sigmoid(x);
    case Activation::identity: return x;
  }
  return x;
}

inline Tensor uniform_tensor(Shape shape, double limit, Rng& rng) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(-limit, limit);
  for (double& x : t.data()) x = dist(rng);
  return t;
}

/// Uniform in [-1/sqrt(d), 1/sqrt(d)]; used for unit weight vectors and embeddings.
inline Tensor unit_init(Shape shape, std::size_t d, Rng& rng) {
  return uniform_tensor(std::move(shape), 1.0 / std::sqrt(static_cast<double>(d)), rng);
}

/// M(x) = act(W x + b) with W[d_out x d_in].
struct DenseLayer {
  std::string weight;
  std::string bias;
  std::size_t d_in = 0;
  std::size_t d_out = 0;
  Activation activation = Activation::relu;

  static DenseLayer create(ParameterStore& store, const std::string& prefix, std::size_t d_in, std::size_t d_out,
                           Activation act, Rng& rng) {
    DenseLayer layer{prefix + ".weight", prefix + ".bias", d_in, d_out, act};
    const double limit = std::sqrt(6.0 / static_cast<double>(d_in + d_out));
    store.add(layer.weight, uniform_tensor({d_out, d_in}, limit, rng));
    store.add(layer.bias, Tensor({d_out}));
    return layer;
  }

  /// x is [B x d_in]; returns [B x d_out].
  Var forward(Tape& tape, const ParameterStore& store, const Var& x) const {
    if (x.value().rank() != 2 || x.value().dim(1) != d_in) {
      throw DimensionError("dense layer '" + weight + "' expects [B x " + std::to_string(d_in) + "], got " +
                           shape_string(x.value().shape()));
    }
    Var w = tape.parameter(store, weight);
    Var b = tape.parameter(store, bias);
    return activate(add_bias(matmul(x, transpose(w)), b), activation);
  }
};

struct UnitOutput {
  Var v;
  Var e;
};

/// Cross&compress unit: C = v e^T, then
///   v' = C w_vv + C^T w_ev + b_v
///   e' = C w_ve + C^T w_ee + b_e
struct CrossCompressUnit {
  std::string w_vv, w_ev, w_ve, w_ee, b_v, b_e;
  std::size_t dim = 0;

  static CrossCompressUnit names(const std::string& prefix, std::size_t d) {
    return {prefix + ".w_vv", prefix + ".w_ev", prefix + ".w_ve", prefix + ".w_ee",
            prefix + ".b_v",  prefix + ".b_e",  d};
  }

  static CrossCompressUnit create(ParameterStore& store, const std::string& prefix, std::size_t d, Rng& rng) {
    auto u = names(prefix, d);
    for (const auto* n : {&u.w_vv, &u.w_ev, &u.w_ve, &u.w_ee}) store.add(*n, unit_init({d}, d, rng));
    store.add(u.b_v, Tensor({d}));
    store.add(u.b_e, Tensor({d}));
    return u;
  }

  UnitOutput forward(Tape& tape, const ParameterStore& store, const Var& v, const Var& e) const {
    Var c = outer(v, e);
    Var ct = transpose(c);
    Var nv = add_bias(add(matvec(c, tape.parameter(store, w_vv)), matvec(ct, tape.parameter(store, w_ev))),
                      tape.parameter(store, b_v));
    Var ne = add_bias(add(matvec(c, tape.parameter(store, w_ve)), matvec(ct, tape.parameter(store, w_ee))),
                      tape.parameter(store, b_e));
    return {nv, ne};
  }
};

/// Layer-0 inputs of the current pass, required by the DCN-restricted layer.
struct Anchors {
  Var v0;
  Var e0;
};

/// DCN-restricted unit:
///   v' = e_0 v^T w_ev + v + b_v
///   e' = v_0 e^T w_ve + e + b_e
struct DcnLayer {
  std::string w_ev, w_ve, b_v, b_e;
  std::size_t dim = 0;

  static DcnLayer create(ParameterStore& store, const std::string& prefix, std::size_t d, Rng& rng) {
    DcnLayer u{prefix + ".w_ev", prefix + ".w_ve", prefix + ".b_v", prefix + ".b_e", d};
    store.add(u.w_ev, unit_init({d}, d, rng));
    store.add(u.w_ve, unit_init({d}, d, rng));
    store.add(u.b_v, Tensor({d}));
    store.add(u.b_e, Tensor({d}));
    return u;
  }

  UnitOutput forward(Tape& tape, const ParameterStore& store, const Var& v, const Var& e,
                     const std::optional<Anchors>& anchors) const {
    if (!anchors) throw ContractError("DCN layer applied without layer-0 anchors");
    Var nv = add_bias(add(matvec(outer(anchors->e0, v), tape.parameter(store, w_ev)), v), tape.parameter(store, b_v));
    Var ne = add_bias(add(matvec(outer(anchors->v0, e), tape.parameter(store, w_ve)), e), tape.parameter(store, b_e));
    return {nv, ne};
  }
};

/// Cross-stitch unit with four trainable scalars:
///   [v'; e'] = [[a_aa, a_ab], [a_ba, a_bb]] [v; e]
struct StitchUnit {
  std::string a_aa, a_ab, a_ba, a_bb;

  static StitchUnit names(const std::string& prefix) {
    return {prefix + ".alpha_aa", prefix + ".alpha_ab", prefix + ".alpha_ba", prefix + ".alpha_bb"};
  }

  // Starts mostly task-specific with a little transfer, the usual cross-stitch initialization.
  static StitchUnit create(ParameterStore& store, const std::string& prefix) {
    auto u = names(prefix);
    store.add(u.a_aa, Tensor({1}, 0.9));
    store.add(u.a_ab, Tensor({1}, 0.1));
    store.add(u.a_ba, Tensor({1}, 0.1));
    store.add(u.a_bb, Tensor({1}, 0.9));
    return u;
  }

  UnitOutput forward(Tape& tape, const ParameterStore& store, const Var& v, const Var& e) const {
    Var nv = add(mul(v, tape.parameter(store, a_aa)), mul(e, tape.parameter(store, a_ab)));
    Var ne = add(mul(v, tape.parameter(store, a_ba)), mul(e, tape.parameter(store, a_bb)));
    return {nv, ne};
  }
};

// ---------------------------------------------------------------------------
// Single evaluation on plain tensors.

/// C = v e^T.
inline Tensor cross(const Tensor& v, const Tensor& e) {
  if (v.rank() != 1 || v.shape() != e.shape()) {
    throw DimensionError("cross: dimension mismatch " + shape_string(v.shape()) + " vs " + shape_string(e.shape()));
  }
  Tape tape;
  return outer(tape.constant(v), tape.constant(e)).value();
}

/// Project a cross matrix back to the item and entity spaces.
inline std::pair<Tensor, Tensor> compress(const Tensor& c, const CrossCompressUnit& unit, const ParameterStore& store) {
  const Tensor& wvv = store.value(unit.w_vv);
  if (c.rank() != 2 || c.dim(0) != c.dim(1) || c.dim(0) != wvv.size()) {
    throw DimensionError("compress: cross matrix " + shape_string(c.shape()) + " vs unit dimension " +
                         std::to_string(wvv.size()));
  }
  Tape tape;
  Var cv = tape.constant(c);
  Var ct = transpose(cv);
  Var nv = add_bias(add(matvec(cv, tape.parameter(store, unit.w_vv)), matvec(ct, tape.parameter(store, unit.w_ev))),
                    tape.parameter(store, unit.b_v));
  Var ne = add_bias(add(matvec(cv, tape.parameter(store, unit.w_ve)), matvec(ct, tape.parameter(store, unit.w_ee))),
                    tape.parameter(store, unit.b_e));
  return {nv.value(), ne.value()};
}

inline std::pair<Tensor, Tensor> cross_compress_apply(const Tensor& v, const Tensor& e, const CrossCompressUnit& unit,
                                                      const ParameterStore& store) {
  return compress(cross(v, e), unit, store);
}

/// v_0 and e_0 for a DCN layer evaluated on plain tensors.
struct TensorAnchors {
  Tensor v0;
  Tensor e0;
};

inline std::pair<Tensor, Tensor> dcn_apply(const Tensor& v, const Tensor& e, const DcnLayer& layer,
                                           const ParameterStore& store, const std::optional<TensorAnchors>& anchors) {
  if (!anchors) throw ContractError("DCN layer applied without layer-0 anchors");
  if (v.rank() != 1 || v.shape() != e.shape() || anchors->v0.shape() != v.shape() || anchors->e0.shape() != v.shape()) {
    throw DimensionError("dcn_apply: dimension mismatch");
  }
  Tape tape;
  auto out = layer.forward(tape, store, tape.constant(v), tape.constant(e),
                           Anchors{tape.constant(anchors->v0), tape.constant(anchors->e0)});
  return {out.v.value(), out.e.value()};
}

inline std::pair<Tensor, Tensor> stitch_apply(const Tensor& v, const Tensor& e, const StitchUnit& unit,
                                              const ParameterStore& store) {
  if (v.shape() != e.shape()) {
    throw DimensionError("stitch_apply: dimension mismatch " + shape_string(v.shape()) + " vs " +
                         shape_string(e.shape()));
  }
  Tape tape;
  auto out = unit.forward(tape, store, tape.constant(v), tape.constant(e));
  return {out.v.value(), out.e.value()};
}

}  // namespace mkr
