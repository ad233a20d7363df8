#include <gtest/gtest.h>

#include <random>

#include "mkr/units.hpp"

using namespace mkr;

namespace {

CrossCompressUnit make_unit(ParameterStore& store, const Tensor& wvv, const Tensor& wev, const Tensor& wve,
                            const Tensor& wee, const Tensor& bv, const Tensor& be, const std::string& prefix = "u") {
  auto u = CrossCompressUnit::names(prefix, wvv.size());
  store.add(u.w_vv, wvv);
  store.add(u.w_ev, wev);
  store.add(u.w_ve, wve);
  store.add(u.w_ee, wee);
  store.add(u.b_v, bv);
  store.add(u.b_e, be);
  return u;
}

Tensor rand_vec(std::size_t d, Rng& rng) { return uniform_tensor({d}, 1.0, rng); }

double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST(Cross, NaiveDoubleLoopOracle) {
  const Tensor v = Tensor::vector({1, 2}), e = Tensor::vector({3, 4});
  const Tensor c = cross(v, e);
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j < 2; ++j) EXPECT_DOUBLE_EQ(c.at(i, j), v[i] * e[j]);
  EXPECT_EQ(cross(Tensor::vector({1, 2, 3}), Tensor({3})), Tensor({3, 3}));
  EXPECT_EQ(cross(Tensor::vector({1}), Tensor::vector({5})), Tensor::matrix({{5}}));
  EXPECT_THROW(cross(Tensor::vector({1, 2}), Tensor::vector({1, 2, 3})), DimensionError);
}

TEST(Cross, EveryTwoByTwoMinorVanishes) {
  Rng rng(11);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor c = cross(rand_vec(5, rng), rand_vec(5, rng));
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 5; ++j) {
        const double scale = std::max(1.0, std::abs(c.at(i, i) * c.at(j, j)));
        EXPECT_LT(std::abs(c.at(i, i) * c.at(j, j) - c.at(i, j) * c.at(j, i)) / scale, 1e-9);
      }
  }
}

TEST(Compress, HandExpansion) {
  ParameterStore store;
  const auto u = make_unit(store, Tensor::vector({1, 0}), Tensor::vector({0, 1}), Tensor({2}), Tensor({2}), Tensor({2}),
                           Tensor({2}));
  const auto [v1, e1] = cross_compress_apply(Tensor::vector({1, 2}), Tensor::vector({3, 4}), u, store);
  // C w_vv = [3, 6], C^T w_ev = [6, 8]
  EXPECT_EQ(v1, Tensor::vector({9, 14}));
  EXPECT_EQ(e1, Tensor({2}));
}

TEST(Compress, ZeroEntityLeavesBiases) {
  Rng rng(2);
  ParameterStore store;
  const auto u = make_unit(store, rand_vec(3, rng), rand_vec(3, rng), rand_vec(3, rng), rand_vec(3, rng), rand_vec(3, rng),
                           rand_vec(3, rng));
  const auto [v1, e1] = cross_compress_apply(rand_vec(3, rng), Tensor({3}), u, store);
  EXPECT_EQ(v1, store.value(u.b_v));
  EXPECT_EQ(e1, store.value(u.b_e));
}

TEST(Compress, SwappingRolesSwapsOutputs) {
  Rng rng(3);
  const Tensor wvv = rand_vec(4, rng), wev = rand_vec(4, rng), wve = rand_vec(4, rng), wee = rand_vec(4, rng);
  const Tensor bv = rand_vec(4, rng), be = rand_vec(4, rng), v = rand_vec(4, rng), e = rand_vec(4, rng);
  ParameterStore store;
  const auto a = make_unit(store, wvv, wev, wve, wee, bv, be, "a");
  const auto b = make_unit(store, wee, wve, wev, wvv, be, bv, "b");
  const auto [va, ea] = cross_compress_apply(v, e, a, store);
  const auto [vb, eb] = cross_compress_apply(e, v, b, store);
  EXPECT_LT(max_abs_diff(va, eb), 1e-12);
  EXPECT_LT(max_abs_diff(ea, vb), 1e-12);
}

TEST(Compress, DimensionChecks) {
  ParameterStore store;
  const auto u = make_unit(store, Tensor({2}), Tensor({2}), Tensor({2}), Tensor({2}), Tensor({2}), Tensor({2}));
  EXPECT_THROW(compress(Tensor({3, 3}), u, store), DimensionError);
  EXPECT_THROW(compress(Tensor({2, 3}), u, store), DimensionError);
}

TEST(CrossCompress, ScalarCase) {
  const double a = 1.5, b = -0.7, wvv = 0.3, wev = 2.0, bv = 0.25;
  ParameterStore store;
  const auto u = make_unit(store, Tensor::vector({wvv}), Tensor::vector({wev}), Tensor::vector({1}), Tensor::vector({1}),
                           Tensor::vector({bv}), Tensor::vector({0}));
  const auto [v1, e1] = cross_compress_apply(Tensor::vector({a}), Tensor::vector({b}), u, store);
  EXPECT_NEAR(v1[0], a * b * wvv + b * a * wev + bv, 1e-15);
}

TEST(CrossCompress, MatchesFactoredForm) {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 1 + trial % 6;
    ParameterStore store;
    const auto u = make_unit(store, rand_vec(d, rng), rand_vec(d, rng), rand_vec(d, rng), rand_vec(d, rng),
                             rand_vec(d, rng), rand_vec(d, rng));
    const Tensor v = rand_vec(d, rng), e = rand_vec(d, rng);
    const auto [v1, e1] = cross_compress_apply(v, e, u, store);
    const double evv = dot(e, store.value(u.w_vv)), vev = dot(v, store.value(u.w_ev));
    const double eve = dot(e, store.value(u.w_ve)), vee = dot(v, store.value(u.w_ee));
    for (std::size_t i = 0; i < d; ++i) {
      EXPECT_NEAR(v1[i], v[i] * evv + e[i] * vev + store.value(u.b_v)[i], 1e-12);
      EXPECT_NEAR(e1[i], v[i] * eve + e[i] * vee + store.value(u.b_e)[i], 1e-12);
    }
  }
}

TEST(CrossCompress, SignedSumMatchesFmForm) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 1 + trial % 4;
    ParameterStore store;
    const auto u = make_unit(store, rand_vec(d, rng), rand_vec(d, rng), rand_vec(d, rng), rand_vec(d, rng),
                             rand_vec(d, rng), rand_vec(d, rng));
    const Tensor v = rand_vec(d, rng), e = rand_vec(d, rng);
    const auto [v1, e1] = cross_compress_apply(v, e, u, store);
    double lhs = 0, b = 0, rhs = 0;
    for (std::size_t i = 0; i < d; ++i) {
      lhs += v1[i];
      b += store.value(u.b_v)[i];
      for (std::size_t j = 0; j < d; ++j) rhs += (store.value(u.w_ev)[i] + store.value(u.w_vv)[j]) * v[i] * e[j];
    }
    EXPECT_NEAR(std::abs(lhs), std::abs(b + rhs), 1e-10);
  }
}

TEST(Dcn, ResidualIdentityWhenWeightsVanish) {
  Rng rng(6);
  ParameterStore store;
  const DcnLayer layer = DcnLayer::create(store, "dcn", 3, rng);
  store.value(layer.w_ev).fill(0.0);
  store.value(layer.w_ve).fill(0.0);
  const Tensor v = rand_vec(3, rng), e = rand_vec(3, rng);
  const auto [v1, e1] = dcn_apply(v, e, layer, store, TensorAnchors{rand_vec(3, rng), rand_vec(3, rng)});
  EXPECT_EQ(v1, v);
  EXPECT_EQ(e1, e);
}

TEST(Dcn, HandExpansion) {
  ParameterStore store;
  DcnLayer layer{"w_ev", "w_ve", "b_v", "b_e", 2};
  store.add("w_ev", Tensor::vector({1, 0}));
  store.add("w_ve", Tensor({2}));
  store.add("b_v", Tensor({2}));
  store.add("b_e", Tensor({2}));
  const auto [v1, e1] = dcn_apply(Tensor::vector({1, 2}), Tensor::vector({5, 6}), layer, store,
                                  TensorAnchors{Tensor::vector({0, 0}), Tensor::vector({1, 1})});
  EXPECT_EQ(v1, Tensor::vector({2, 3}));
  EXPECT_EQ(e1, Tensor::vector({5, 6}));
}

TEST(Dcn, MissingAnchorsIsAContractError) {
  Rng rng(7);
  ParameterStore store;
  const DcnLayer layer = DcnLayer::create(store, "dcn", 2, rng);
  EXPECT_THROW(dcn_apply(Tensor({2}), Tensor({2}), layer, store, std::nullopt), ContractError);
  Tape tape;
  EXPECT_THROW(layer.forward(tape, store, tape.constant(Tensor({1, 2})), tape.constant(Tensor({1, 2})), std::nullopt),
               ContractError);
}

TEST(Stitch, IdentityAndTaskSpecific) {
  ParameterStore store;
  const StitchUnit u = StitchUnit::create(store, "s");
  store.set(u.a_aa, Tensor({1}, 1.0));
  store.set(u.a_ab, Tensor({1}, 0.0));
  store.set(u.a_ba, Tensor({1}, 0.0));
  store.set(u.a_bb, Tensor({1}, 1.0));
  const Tensor v = Tensor::vector({1, -2}), e = Tensor::vector({3, 4});
  auto [v1, e1] = stitch_apply(v, e, u, store);
  EXPECT_EQ(v1, v);
  EXPECT_EQ(e1, e);
  store.set(u.a_aa, Tensor({1}, 0.5));
  store.set(u.a_bb, Tensor({1}, 2.0));
  const auto a = stitch_apply(v, e, u, store);
  const auto b = stitch_apply(v, Tensor::vector({-9, 9}), u, store);
  EXPECT_EQ(a.first, b.first);
  EXPECT_THROW(stitch_apply(v, Tensor({3}), u, store), DimensionError);
}

TEST(Stitch, BiasFreeCrossCompressEqualsTransferMatrixForm) {
  Rng rng(8);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t d = 1 + trial % 5;
    ParameterStore store;
    const auto u = make_unit(store, rand_vec(d, rng), rand_vec(d, rng), rand_vec(d, rng), rand_vec(d, rng), Tensor({d}),
                             Tensor({d}));
    const Tensor v = rand_vec(d, rng), e = rand_vec(d, rng);
    const auto [v1, e1] = cross_compress_apply(v, e, u, store);
    // Feed the transfer scalars to a stitch unit and compare.
    ParameterStore s;
    const StitchUnit st = StitchUnit::create(s, "st");
    s.set(st.a_aa, Tensor({1}, dot(e, store.value(u.w_vv))));
    s.set(st.a_ab, Tensor({1}, dot(v, store.value(u.w_ev))));
    s.set(st.a_ba, Tensor({1}, dot(e, store.value(u.w_ve))));
    s.set(st.a_bb, Tensor({1}, dot(v, store.value(u.w_ee))));
    const auto [v2, e2] = stitch_apply(v, e, st, s);
    EXPECT_LT(max_abs_diff(v1, v2), 1e-12);
    EXPECT_LT(max_abs_diff(e1, e2), 1e-12);
  }
}

TEST(DenseLayer, ShapesAndInitialisation) {
  Rng rng(9);
  ParameterStore store;
  const DenseLayer layer = DenseLayer::create(store, "fc", 4, 3, Activation::identity, rng);
  EXPECT_EQ(store.value(layer.weight).shape(), (Shape{3, 4}));
  EXPECT_EQ(store.value(layer.bias), Tensor({3}));
  const double limit = std::sqrt(6.0 / 7.0);
  for (double w : store.value(layer.weight).data()) EXPECT_LE(std::abs(w), limit);
  Tape tape;
  EXPECT_EQ(layer.forward(tape, store, tape.constant(Tensor({5, 4}))).value().shape(), (Shape{5, 3}));
  EXPECT_THROW(layer.forward(tape, store, tape.constant(Tensor({5, 3}))), DimensionError);
}

namespace {

double unit_gradient_error(const std::function<UnitOutput(Tape&, const ParameterStore&, const Var&, const Var&)>& f,
                           ParameterStore& store, std::size_t d) {
  Rng rng(21);
  store.add("in.v", uniform_tensor({3, d}, 1.0, rng));
  store.add("in.e", uniform_tensor({3, d}, 1.0, rng));
  const Tensor wv = uniform_tensor({3, d}, 1.0, rng), we = uniform_tensor({3, d}, 1.0, rng);
  auto build = [&](Tape& t) {
    const auto out = f(t, store, t.parameter(store, "in.v"), t.parameter(store, "in.e"));
    return add(sum(mul(out.v, t.constant(wv))), sum(mul(out.e, t.constant(we))));
  };
  {
    Tape t;
    t.backward(build(t), store);
  }
  double worst = 0;
  for (const auto& name : store.names()) {
    const Tensor g = store.grad(name);
    Tensor& w = store.value(name);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double s = w[i];
      w[i] = s + 1e-6;
      Tape a;
      const double up = build(a).value().item();
      w[i] = s - 1e-6;
      Tape b;
      const double dn = build(b).value().item();
      w[i] = s;
      worst = std::max(worst, std::abs(g[i] - (up - dn) / 2e-6) / std::max(std::abs(g[i]), 1e-8));
    }
  }
  return worst;
}

}  // namespace

TEST(UnitGradients, AllThreeUnitTypesMatchFiniteDifferences) {
  for (std::size_t d : {1, 3}) {
    {
      ParameterStore store;
      Rng rng(1);
      const auto u = CrossCompressUnit::create(store, "cc", d, rng);
      for (const auto* b : {&u.b_v, &u.b_e}) store.value(*b) = uniform_tensor({d}, 1.0, rng);
      EXPECT_LT(unit_gradient_error([&](Tape& t, const ParameterStore& s, const Var& v, const Var& e) { return u.forward(t, s, v, e); },
                                    store, d),
                1e-4);
    }
    {
      ParameterStore store;
      Rng rng(2);
      const auto u = DcnLayer::create(store, "dcn", d, rng);
      EXPECT_LT(unit_gradient_error(
                    [&](Tape& t, const ParameterStore& s, const Var& v, const Var& e) {
                      return u.forward(t, s, v, e, Anchors{scale(v, 0.5), scale(e, -1.5)});
                    },
                    store, d),
                1e-4);
    }
    {
      ParameterStore store;
      const auto u = StitchUnit::create(store, "st");
      EXPECT_LT(unit_gradient_error([&](Tape& t, const ParameterStore& s, const Var& v, const Var& e) { return u.forward(t, s, v, e); },
                                    store, d),
                1e-4);
    }
  }
}
