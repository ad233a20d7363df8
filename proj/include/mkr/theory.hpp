#pragma once

// Executable checks of the cross&compress algebra: exact polynomial expansion
// for the cross-term degree bound, numeric oracles for the FM, DCN and
// cross-stitch reductions, a finite-difference gradient check of the joint
// loss, and the item-pair correlation study between interaction and KG
// structure.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "mkr/data.hpp"
#include "mkr/model.hpp"
#include "mkr/training.hpp"
#include "mkr/units.hpp"

namespace mkr {

/// Raised by checks whose budget or preconditions are exceeded.
class BudgetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Exact arithmetic

/// Reduced fraction over int64 with overflow detection.
class Rational {
 public:
  Rational(std::int64_t n = 0, std::int64_t d = 1) : num_(n), den_(d) {
    if (d == 0) throw ContractError("rational with zero denominator");
    normalize();
  }

  std::int64_t num() const noexcept { return num_; }
  std::int64_t den() const noexcept { return den_; }
  bool is_zero() const noexcept { return num_ == 0; }
  double to_double() const noexcept { return static_cast<double>(num_) / static_cast<double>(den_); }

  friend Rational operator+(const Rational& a, const Rational& b) {
    const std::int64_t g = std::gcd(a.den_, b.den_);
    const std::int64_t db = b.den_ / g, da = a.den_ / g;
    return Rational(checked_add(checked_mul(a.num_, db), checked_mul(b.num_, da)), checked_mul(a.den_, db));
  }
  friend Rational operator-(const Rational& a) { return Rational(checked_mul(a.num_, -1), a.den_); }
  friend Rational operator-(const Rational& a, const Rational& b) { return a + (-b); }
  friend Rational operator*(const Rational& a, const Rational& b) {
    const std::int64_t g1 = std::gcd(a.num_, b.den_), g2 = std::gcd(b.num_, a.den_);
    const std::int64_t n1 = g1 ? a.num_ / g1 : a.num_, d2 = g1 ? b.den_ / g1 : b.den_;
    const std::int64_t n2 = g2 ? b.num_ / g2 : b.num_, d1 = g2 ? a.den_ / g2 : a.den_;
    return Rational(checked_mul(n1, n2), checked_mul(d1, d2));
  }
  friend bool operator==(const Rational&, const Rational&) = default;

  std::string to_string() const { return den_ == 1 ? std::to_string(num_) : std::to_string(num_) + "/" + std::to_string(den_); }

 private:
  static std::int64_t checked_mul(std::int64_t a, std::int64_t b) {
    std::int64_t r;
    if (__builtin_mul_overflow(a, b, &r)) throw BudgetError("rational coefficient overflow");
    return r;
  }
  static std::int64_t checked_add(std::int64_t a, std::int64_t b) {
    std::int64_t r;
    if (__builtin_add_overflow(a, b, &r)) throw BudgetError("rational coefficient overflow");
    return r;
  }
  void normalize() {
    if (den_ < 0) {
      num_ = checked_mul(num_, -1);
      den_ = checked_mul(den_, -1);
    }
    const std::int64_t g = std::gcd(num_, den_);
    if (g > 1) {
      num_ /= g;
      den_ /= g;
    }
    if (num_ == 0) den_ = 1;
  }

  std::int64_t num_;
  std::int64_t den_;
};

/// Sparse polynomial over a fixed number of variables with exact
/// coefficients. A monomial is a byte string of exponents.
class Polynomial {
 public:
  using Monomial = std::string;
  static constexpr std::size_t kTermBudget = 1'000'000;

  explicit Polynomial(std::size_t num_vars = 0) : n_(num_vars) {}

  static Polynomial constant(std::size_t num_vars, Rational c) {
    Polynomial p(num_vars);
    if (!c.is_zero()) p.terms_.emplace(Monomial(num_vars, '\0'), c);
    return p;
  }
  static Polynomial variable(std::size_t num_vars, std::size_t index) {
    if (index >= num_vars) throw ContractError("polynomial variable index out of range");
    Monomial m(num_vars, '\0');
    m[index] = 1;
    Polynomial p(num_vars);
    p.terms_.emplace(std::move(m), Rational(1));
    return p;
  }

  std::size_t num_vars() const noexcept { return n_; }
  std::size_t size() const noexcept { return terms_.size(); }
  const std::unordered_map<Monomial, Rational>& terms() const noexcept { return terms_; }

  static unsigned exponent(const Monomial& m, std::size_t var) { return static_cast<unsigned char>(m[var]); }

  Polynomial& operator+=(const Polynomial& q) {
    check(q);
    for (const auto& [m, c] : q.terms_) accumulate(m, c);
    return *this;
  }
  Polynomial& operator-=(const Polynomial& q) {
    check(q);
    for (const auto& [m, c] : q.terms_) accumulate(m, -c);
    return *this;
  }
  friend Polynomial operator+(Polynomial p, const Polynomial& q) { return p += q; }
  friend Polynomial operator-(Polynomial p, const Polynomial& q) { return p -= q; }

  friend Polynomial operator*(const Polynomial& p, const Polynomial& q) {
    p.check(q);
    Polynomial out(p.n_);
    Monomial m(p.n_, '\0');
    for (const auto& [mp, cp] : p.terms_) {
      for (const auto& [mq, cq] : q.terms_) {
        for (std::size_t i = 0; i < p.n_; ++i) {
          const unsigned e = exponent(mp, i) + exponent(mq, i);
          if (e > 255) throw BudgetError("monomial exponent exceeds 255");
          m[i] = static_cast<char>(e);
        }
        out.accumulate(m, cp * cq);
      }
    }
    return out;
  }

  friend bool operator==(const Polynomial& a, const Polynomial& b) { return a.n_ == b.n_ && a.terms_ == b.terms_; }

  /// Numeric value with variable i set to values[i].
  double evaluate(std::span<const double> values) const {
    if (values.size() != n_) throw DimensionError("evaluate: expected " + std::to_string(n_) + " values");
    double total = 0.0;
    for (const auto& [m, c] : terms_) {
      double t = c.to_double();
      for (std::size_t i = 0; i < n_; ++i)
        for (unsigned k = 0; k < exponent(m, i); ++k) t *= values[i];
      total += t;
    }
    return total;
  }

 private:
  void check(const Polynomial& q) const {
    if (q.n_ != n_) throw DimensionError("polynomials over different variable sets");
  }
  void accumulate(const Monomial& m, const Rational& c) {
    auto [it, fresh] = terms_.try_emplace(m, c);
    if (!fresh) {
      it->second = it->second + c;
      if (it->second.is_zero()) terms_.erase(it);
    } else if (c.is_zero()) {
      terms_.erase(it);
    } else if (terms_.size() > kTermBudget) {
      throw BudgetError("polynomial exceeds the term budget of " + std::to_string(kTermBudget));
    }
  }

  std::size_t n_;
  std::unordered_map<Monomial, Rational> terms_;
};

// ---------------------------------------------------------------------------
// Symbolic cross&compress

/// Variable layout: v_1..v_d, e_1..e_d, then per layer l the six vectors
/// w_vv, w_ev, w_ve, w_ee, b_v, b_e (d symbols each).
struct SymbolTable {
  std::size_t layers = 0;
  std::size_t dim = 0;

  enum Slot : std::size_t { w_vv = 0, w_ev, w_ve, w_ee, b_v, b_e };

  std::size_t size() const noexcept { return 2 * dim + 6 * dim * layers; }
  std::size_t v(std::size_t i) const { return i; }
  std::size_t e(std::size_t i) const { return dim + i; }
  std::size_t weight(std::size_t layer, Slot slot, std::size_t i) const { return 2 * dim + (layer * 6 + slot) * dim + i; }
  bool is_v(std::size_t var) const noexcept { return var < dim; }
  bool is_e(std::size_t var) const noexcept { return var >= dim && var < 2 * dim; }

  std::string name(std::size_t var) const {
    if (is_v(var)) return "v" + std::to_string(var + 1);
    if (is_e(var)) return "e" + std::to_string(var - dim + 1);
    static const char* slots[] = {"w_vv", "w_ev", "w_ve", "w_ee", "b_v", "b_e"};
    const std::size_t k = var - 2 * dim;
    return slots[(k / dim) % 6] + std::string("[") + std::to_string(k / (6 * dim) + 1) + "," + std::to_string(k % dim + 1) + "]";
  }

  /// (v-degree, e-degree) of a monomial.
  std::pair<unsigned, unsigned> degrees(const Polynomial::Monomial& m) const {
    unsigned dv = 0, de = 0;
    for (std::size_t i = 0; i < dim; ++i) {
      dv += Polynomial::exponent(m, v(i));
      de += Polynomial::exponent(m, e(i));
    }
    return {dv, de};
  }

  std::string format(const Polynomial::Monomial& m, const Rational& c) const {
    std::string out = c.to_string();
    for (std::size_t i = 0; i < m.size(); ++i) {
      const unsigned k = Polynomial::exponent(m, i);
      if (k == 0) continue;
      out += "*" + name(i);
      if (k > 1) out += "^" + std::to_string(k);
    }
    return out;
  }
};

struct SymbolicLayers {
  SymbolTable symbols;
  std::vector<Polynomial> v;  // v_L components
  std::vector<Polynomial> e;  // e_L components
};

/// Expand L stacked cross&compress units with a distinct symbol for every
/// weight and bias component.
inline SymbolicLayers symbolic_cross_compress(std::size_t L, std::size_t d) {
  if (L < 1 || d < 1) throw ContractError("symbolic expansion needs L >= 1 and d >= 1");
  if (L > 3 || d > 2) throw BudgetError("symbolic expansion is limited to L <= 3 and d <= 2");
  SymbolTable s{L, d};
  const std::size_t n = s.size();
  std::vector<Polynomial> v, e;
  for (std::size_t i = 0; i < d; ++i) {
    v.push_back(Polynomial::variable(n, s.v(i)));
    e.push_back(Polynomial::variable(n, s.e(i)));
  }
  auto sym = [&](std::size_t l, SymbolTable::Slot slot, std::size_t i) { return Polynomial::variable(n, s.weight(l, slot, i)); };
  for (std::size_t l = 0; l < L; ++l) {
    // C w = v (e . w) and C^T w = e (v . w).
    Polynomial e_wvv(n), v_wev(n), e_wve(n), v_wee(n);
    for (std::size_t j = 0; j < d; ++j) {
      e_wvv += e[j] * sym(l, SymbolTable::w_vv, j);
      v_wev += v[j] * sym(l, SymbolTable::w_ev, j);
      e_wve += e[j] * sym(l, SymbolTable::w_ve, j);
      v_wee += v[j] * sym(l, SymbolTable::w_ee, j);
    }
    std::vector<Polynomial> nv, ne;
    for (std::size_t i = 0; i < d; ++i) {
      nv.push_back(v[i] * e_wvv + e[i] * v_wev + sym(l, SymbolTable::b_v, i));
      ne.push_back(v[i] * e_wve + e[i] * v_wee + sym(l, SymbolTable::b_e, i));
    }
    v = std::move(nv);
    e = std::move(ne);
  }
  return {s, std::move(v), std::move(e)};
}

/// Sum of the components of a polynomial vector.
inline Polynomial component_sum(const std::vector<Polynomial>& xs) {
  if (xs.empty()) throw ContractError("component_sum of an empty vector");
  Polynomial out(xs.front().num_vars());
  for (const auto& x : xs) out += x;
  return out;
}

/// Symbol values for a numeric stack of units and inputs, in SymbolTable order.
inline std::vector<double> symbol_values(const SymbolTable& s, const std::vector<CrossCompressUnit>& units,
                                         const ParameterStore& store, const Tensor& v, const Tensor& e) {
  if (units.size() != s.layers || v.size() != s.dim || e.size() != s.dim) throw DimensionError("symbol_values: size mismatch");
  std::vector<double> out(s.size());
  for (std::size_t i = 0; i < s.dim; ++i) {
    out[s.v(i)] = v[i];
    out[s.e(i)] = e[i];
  }
  for (std::size_t l = 0; l < s.layers; ++l) {
    const std::string* names[] = {&units[l].w_vv, &units[l].w_ev, &units[l].w_ve, &units[l].w_ee, &units[l].b_v, &units[l].b_e};
    for (std::size_t slot = 0; slot < 6; ++slot)
      for (std::size_t i = 0; i < s.dim; ++i)
        out[s.weight(l, static_cast<SymbolTable::Slot>(slot), i)] = store.value(*names[slot])[i];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Check results

struct CheckResult {
  std::string check;
  nlohmann::json params = nlohmann::json::object();
  bool passed = false;
  std::optional<std::string> witness;
  std::optional<double> deviation;
  std::string note;

  nlohmann::json to_json() const {
    nlohmann::json j{{"check", check}, {"params", params}, {"status", passed ? "pass" : "fail"}};
    if (witness) j["witness"] = *witness;
    if (deviation) j["deviation"] = *deviation;
    if (!note.empty()) j["note"] = note;
    return j;
  }
};

struct DegreeReport {
  unsigned max_v_degree = 0;
  unsigned max_e_degree = 0;
  std::string witness;  // a cross term attaining both maxima when one exists
};

/// Maximal v- and e-degree over cross terms (monomials with positive degree
/// in both v and e).
inline DegreeReport cross_term_degrees(const SymbolTable& s, const Polynomial& p) {
  DegreeReport r;
  for (const auto& [m, c] : p.terms()) {
    const auto [dv, de] = s.degrees(m);
    if (dv == 0 || de == 0) continue;
    r.max_v_degree = std::max(r.max_v_degree, dv);
    r.max_e_degree = std::max(r.max_e_degree, de);
  }
  std::optional<std::string> best;
  for (const auto& [m, c] : p.terms()) {
    const auto [dv, de] = s.degrees(m);
    if (dv == r.max_v_degree && de == r.max_e_degree && dv > 0 && de > 0) {
      std::string text = s.format(m, c);
      if (!best || text < *best) best = std::move(text);
    }
  }
  r.witness = best.value_or("");
  return r;
}

/// Cross terms of sum_i v_L^(i) and of sum_i e_L^(i) reach v-degree and
/// e-degree 2^(L-1) and no higher.
inline CheckResult check_theorem1(std::size_t L, std::size_t d) {
  CheckResult r;
  r.check = "theorem1";
  r.params = {{"L", L}, {"d", d}};
  const auto layers = symbolic_cross_compress(L, d);
  const unsigned expected = 1u << (L - 1);
  const auto dv = cross_term_degrees(layers.symbols, component_sum(layers.v));
  const auto de = cross_term_degrees(layers.symbols, component_sum(layers.e));
  r.passed = dv.max_v_degree == expected && dv.max_e_degree == expected && de.max_v_degree == expected &&
             de.max_e_degree == expected && !dv.witness.empty() && !de.witness.empty();
  r.witness = dv.witness;
  r.params["expected_degree"] = expected;
  r.params["v_sum_degrees"] = {dv.max_v_degree, dv.max_e_degree};
  r.params["e_sum_degrees"] = {de.max_v_degree, de.max_e_degree};
  r.params["e_witness"] = de.witness;
  return r;
}

// ---------------------------------------------------------------------------
// Numeric oracles

namespace detail {

inline Tensor random_vector(std::size_t d, Rng& rng, double limit = 1.0) { return uniform_tensor({d}, limit, rng); }

inline CrossCompressUnit random_unit(ParameterStore& store, const std::string& prefix, std::size_t d, Rng& rng,
                                     bool with_bias = true) {
  auto u = CrossCompressUnit::names(prefix, d);
  for (const auto* n : {&u.w_vv, &u.w_ev, &u.w_ve, &u.w_ee}) store.add(*n, random_vector(d, rng));
  store.add(u.b_v, with_bias ? random_vector(d, rng) : Tensor({d}));
  store.add(u.b_e, with_bias ? random_vector(d, rng) : Tensor({d}));
  return u;
}

inline double dot(const Tensor& a, const Tensor& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace detail

/// max over trials of | |sum_i v_1^(i)| - |b + sum_ij (w_ev^(i) + w_vv^(j)) v_i e_j| |
/// and the same for e_1 with (w_ee, w_ve).
inline CheckResult check_prop1(std::size_t trials, std::size_t d, std::uint64_t seed, double tolerance = 1e-10) {
  Rng rng(seed);
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    ParameterStore store;
    const auto unit = detail::random_unit(store, "u", d, rng);
    const Tensor v = detail::random_vector(d, rng), e = detail::random_vector(d, rng);
    const auto [v1, e1] = cross_compress_apply(v, e, unit, store);
    const auto& wvv = store.value(unit.w_vv);
    const auto& wev = store.value(unit.w_ev);
    const auto& wve = store.value(unit.w_ve);
    const auto& wee = store.value(unit.w_ee);
    double bv = 0, be = 0, sv = 0, se = 0, lhs_v = 0, lhs_e = 0;
    for (std::size_t i = 0; i < d; ++i) {
      bv += store.value(unit.b_v)[i];
      be += store.value(unit.b_e)[i];
      lhs_v += v1[i];
      lhs_e += e1[i];
      for (std::size_t j = 0; j < d; ++j) {
        sv += (wev[i] + wvv[j]) * v[i] * e[j];
        se += (wee[i] + wve[j]) * v[i] * e[j];
      }
    }
    worst = std::max({worst, std::abs(std::abs(lhs_v) - std::abs(bv + sv)), std::abs(std::abs(lhs_e) - std::abs(be + se))});
  }
  CheckResult r;
  r.check = "prop1";
  r.params = {{"trials", trials}, {"d", d}, {"seed", seed}, {"tolerance", tolerance}};
  r.deviation = worst;
  r.passed = worst < tolerance;
  return r;
}

/// Restricted cross&compress (w_vv rescaled so e_l . w_vv = 1, the second-term
/// entity replaced by e_0, and symmetrically for e) against the DCN layer.
inline CheckResult check_prop2(std::size_t trials, std::size_t d, std::uint64_t seed, double tolerance = 1e-10) {
  Rng rng(seed);
  double worst = 0.0;
  std::size_t skipped = 0;
  constexpr double kDegenerate = 1e-2;
  for (std::size_t t = 0; t < trials; ++t) {
    ParameterStore store;
    const auto unit = detail::random_unit(store, "cc", d, rng);
    const Tensor v0 = detail::random_vector(d, rng), e0 = detail::random_vector(d, rng);
    const Tensor vl = detail::random_vector(d, rng), el = detail::random_vector(d, rng);
    const double dot_vv = detail::dot(el, store.value(unit.w_vv));
    const double dot_ee = detail::dot(vl, store.value(unit.w_ee));
    if (std::abs(dot_vv) < kDegenerate || std::abs(dot_ee) < kDegenerate) {
      ++skipped;
      continue;
    }
    for (double& x : store.value(unit.w_vv).data()) x /= dot_vv;
    for (double& x : store.value(unit.w_ee).data()) x /= dot_ee;

    // Each output is a sum of compress() terms over two different cross matrices.
    auto part = [&](const Tensor& a, const Tensor& b, bool vv, bool ev, bool ve, bool ee, bool bias) {
      ParameterStore s;
      auto u = CrossCompressUnit::names("p", d);
      s.add(u.w_vv, vv ? store.value(unit.w_vv) : Tensor({d}));
      s.add(u.w_ev, ev ? store.value(unit.w_ev) : Tensor({d}));
      s.add(u.w_ve, ve ? store.value(unit.w_ve) : Tensor({d}));
      s.add(u.w_ee, ee ? store.value(unit.w_ee) : Tensor({d}));
      s.add(u.b_v, bias ? store.value(unit.b_v) : Tensor({d}));
      s.add(u.b_e, bias ? store.value(unit.b_e) : Tensor({d}));
      return compress(cross(a, b), u, s);
    };
    const auto first = part(vl, el, true, false, false, true, true);     // C w_vv + b_v, C^T w_ee + b_e
    const auto anchored_v = part(vl, e0, false, true, false, false, false);  // e_0 (v_l . w_ev)
    const auto anchored_e = part(v0, el, false, false, true, false, false);  // v_0 (e_l . w_ve)
    Tensor restricted_v = first.first, restricted_e = first.second;
    restricted_v += anchored_v.first;
    restricted_e += anchored_e.second;

    ParameterStore dstore;
    DcnLayer layer{"dcn.w_ev", "dcn.w_ve", "dcn.b_v", "dcn.b_e", d};
    dstore.add(layer.w_ev, store.value(unit.w_ev));
    dstore.add(layer.w_ve, store.value(unit.w_ve));
    dstore.add(layer.b_v, store.value(unit.b_v));
    dstore.add(layer.b_e, store.value(unit.b_e));
    const auto [dv, de] = dcn_apply(vl, el, layer, dstore, TensorAnchors{v0, e0});
    worst = std::max({worst, max_abs_diff(restricted_v, dv), max_abs_diff(restricted_e, de)});
  }
  CheckResult r;
  r.check = "prop2";
  r.params = {{"trials", trials}, {"d", d}, {"seed", seed}, {"tolerance", tolerance}, {"skipped_degenerate", skipped}};
  r.deviation = worst;
  r.passed = worst < tolerance && skipped < trials;
  if (skipped) r.note = std::to_string(skipped) + " trials skipped: restriction unsatisfiable (|e.w_vv| or |v.w_ee| < 1e-2)";
  return r;
}

using UnitFunction = std::function<std::pair<Tensor, Tensor>(const Tensor&, const Tensor&, const CrossCompressUnit&,
                                                             const ParameterStore&)>;

/// Bias-free cross&compress against the transfer-matrix form
/// [v'; e'] = [[e.w_vv, v.w_ev], [e.w_ve, v.w_ee]] [v; e].
inline CheckResult check_prop3(std::size_t trials, std::size_t d, std::uint64_t seed, double tolerance = 1e-12,
                               const UnitFunction& unit_fn = cross_compress_apply) {
  Rng rng(seed);
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    ParameterStore store;
    const auto unit = detail::random_unit(store, "u", d, rng, false);
    const Tensor v = detail::random_vector(d, rng), e = detail::random_vector(d, rng);
    const auto [v1, e1] = unit_fn(v, e, unit, store);
    const double a_vv = detail::dot(e, store.value(unit.w_vv)), a_ve = detail::dot(v, store.value(unit.w_ev));
    const double a_ev = detail::dot(e, store.value(unit.w_ve)), a_ee = detail::dot(v, store.value(unit.w_ee));
    for (std::size_t i = 0; i < d; ++i) {
      worst = std::max(worst, std::abs(v1[i] - (a_vv * v[i] + a_ve * e[i])));
      worst = std::max(worst, std::abs(e1[i] - (a_ev * v[i] + a_ee * e[i])));
    }
  }
  CheckResult r;
  r.check = "prop3";
  r.params = {{"trials", trials}, {"d", d}, {"seed", seed}, {"tolerance", tolerance}};
  r.deviation = worst;
  r.passed = worst < tolerance;
  return r;
}

/// Symbolic polynomials evaluated at random points against the numeric
/// forward pass of the same unit stack.
inline CheckResult check_symbolic_consistency(std::size_t L, std::size_t d, std::size_t trials, std::uint64_t seed,
                                              double tolerance = 1e-9) {
  const auto layers = symbolic_cross_compress(L, d);
  Rng rng(seed);
  double worst = 0.0;
  for (std::size_t t = 0; t < trials; ++t) {
    ParameterStore store;
    std::vector<CrossCompressUnit> units;
    for (std::size_t l = 0; l < L; ++l) units.push_back(detail::random_unit(store, "l" + std::to_string(l), d, rng));
    const Tensor v0 = detail::random_vector(d, rng), e0 = detail::random_vector(d, rng);
    const auto values = symbol_values(layers.symbols, units, store, v0, e0);
    Tensor v = v0, e = e0;
    for (const auto& u : units) std::tie(v, e) = cross_compress_apply(v, e, u, store);
    for (std::size_t i = 0; i < d; ++i) {
      worst = std::max(worst, std::abs(layers.v[i].evaluate(values) - v[i]));
      worst = std::max(worst, std::abs(layers.e[i].evaluate(values) - e[i]));
    }
  }
  CheckResult r;
  r.check = "symbolic_consistency";
  r.params = {{"L", L}, {"d", d}, {"trials", trials}, {"seed", seed}, {"tolerance", tolerance}};
  r.deviation = worst;
  r.passed = worst < tolerance;
  return r;
}

// ---------------------------------------------------------------------------
// Gradient check of the joint loss

struct GradientCheckOptions {
  std::size_t entities = 4;  // users = items = entities = relations
  std::size_t dim = 2;
  double step = 1e-6;
  double tolerance = 1e-4;
  double floor = 1e-8;       // denominator floor in the relative error
  Variant variant = Variant::full;
  RsHead f_rs = RsHead::inner_product;
};

/// rs_loss + kg_loss + reg_loss on a tiny model, analytic gradient against
/// central differences for every component of every parameter. Relative error
/// uses max(|analytic|, floor) as denominator.
inline CheckResult check_gradients(std::uint64_t seed, const GradientCheckOptions& opt = {}) {
  const std::size_t n = opt.entities;
  HyperParams hp;
  hp.low_layers = 1;
  hp.high_layers = 1;
  hp.dim = opt.dim;
  hp.kg_weight = 0.5;
  hp.l2_weight = 0.01;
  hp.variant = opt.variant;
  hp.f_rs = opt.f_rs;
  MkrModel model(hp, {n, n, n, n}, seed);
  Rng rng(seed + 7);
  // Biases start at zero; perturb them so their gradients are generic.
  for (const auto& name : model.store().names())
    if (MkrModel::is_bias(name)) model.store().value(name) = uniform_tensor(model.store().value(name).shape(), 0.3, rng);

  Alignment alignment(n, n);
  for (std::size_t i = 0; i < n; ++i) alignment.link(i, i);
  RsBatch rs;
  KgBatch kg;
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  for (std::size_t i = 0; i < 2 * n; ++i) {
    rs.users.push_back(i % n);
    rs.items.push_back(pick(rng));
    rs.entities.push_back(rs.items.back());
    rs.labels.push_back(static_cast<double>(i % 2));
    const std::size_t head = pick(rng);
    kg.heads.push_back(head);
    kg.relations.push_back(pick(rng));
    kg.items.push_back(i % 3 == 0 ? kNoItem : head);
    kg.tails.push_back(pick(rng));
    kg.positive.push_back(i % 2 == 0);
  }

  auto loss_of = [&](Tape& tape) {
    return add(add(rs_loss(tape, model, rs), kg_loss(tape, model, kg)), reg_loss(tape, model));
  };
  {
    Tape tape;
    tape.backward(loss_of(tape), model.store());
  }
  ParameterStore& store = model.store();
  double worst = 0.0;
  std::string worst_at;
  std::size_t components = 0;
  for (const auto& name : store.names()) {
    const Tensor analytic = store.grad(name);
    Tensor& w = store.value(name);
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double saved = w[i];
      w[i] = saved + opt.step;
      double up, down;
      {
        Tape tape;
        up = loss_of(tape).value().item();
      }
      w[i] = saved - opt.step;
      {
        Tape tape;
        down = loss_of(tape).value().item();
      }
      w[i] = saved;
      const double numeric = (up - down) / (2 * opt.step);
      const double rel = std::abs(analytic[i] - numeric) / std::max(std::abs(analytic[i]), opt.floor);
      ++components;
      if (rel > worst) {
        worst = rel;
        worst_at = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  CheckResult r;
  r.check = "gradient";
  r.params = {{"seed", seed}, {"size", n}, {"d", opt.dim}, {"variant", to_string(opt.variant)},
              {"components", components}, {"tolerance", opt.tolerance}};
  r.deviation = worst;
  r.witness = worst_at;
  r.passed = worst < opt.tolerance;
  return r;
}

// ---------------------------------------------------------------------------
// Correlation study

struct BucketStat {
  double lo = 0;     // inclusive bound on the bucketing count
  double hi = 0;     // inclusive bound
  std::size_t pairs = 0;
  double mean = 0;   // mean of the other count
  double std_error = 0;
};

struct CorrelationDirection {
  std::vector<BucketStat> buckets;
  double global_mean = 0;
  double global_stderr = 0;

  bool strictly_increasing() const {
    if (buckets.size() < 2) return false;
    for (std::size_t i = 1; i < buckets.size(); ++i)
      if (!(buckets[i].mean > buckets[i - 1].mean)) return false;
    return true;
  }

  /// Largest |bucket mean - global mean| in units of the bucket's standard error.
  double max_deviation_in_se() const {
    double worst = 0;
    for (const auto& b : buckets) {
      if (b.std_error > 0) worst = std::max(worst, std::abs(b.mean - global_mean) / b.std_error);
      else if (b.mean != global_mean) worst = std::numeric_limits<double>::infinity();
    }
    return worst;
  }
};

struct CorrelationReport {
  std::size_t pairs = 0;
  CorrelationDirection rs_to_kg;  // bucket by common raters, mean common KG neighbours
  CorrelationDirection kg_to_rs;  // bucket by common KG neighbours, mean common raters

  nlohmann::json to_json() const {
    auto dir = [](const CorrelationDirection& d) {
      nlohmann::json rows = nlohmann::json::array();
      for (const auto& b : d.buckets)
        rows.push_back({{"lo", b.lo}, {"hi", b.hi}, {"pairs", b.pairs}, {"mean", b.mean}, {"stderr", b.std_error}});
      return nlohmann::json{{"buckets", rows}, {"global_mean", d.global_mean}, {"global_stderr", d.global_stderr}};
    };
    return {{"pairs", pairs}, {"rs_to_kg", dir(rs_to_kg)}, {"kg_to_rs", dir(kg_to_rs)}};
  }
};

namespace detail {

inline std::size_t intersection_size(const std::vector<std::size_t>& a, const std::vector<std::size_t>& b) {
  std::size_t n = 0;
  auto i = a.begin(), j = b.begin();
  while (i != a.end() && j != b.end()) {
    if (*i < *j) ++i;
    else if (*j < *i) ++j;
    else {
      ++n;
      ++i;
      ++j;
    }
  }
  return n;
}

/// Quantile buckets over `key`; cut points are snapped to observed values so
/// equal keys never straddle a boundary. A quantile that falls inside a run of
/// equal keys moves up to the next distinct value, so a heavy atom at zero
/// still leaves buckets above it. Fewer buckets result when there are fewer
/// distinct values.
///
/// With `members` (the two items behind each sample) standard errors come from
/// a delete-one-item jackknife, since samples sharing an item are dependent.
inline CorrelationDirection bucketize(const std::vector<double>& key, const std::vector<double>& value, std::size_t buckets,
                                      const std::vector<std::pair<std::size_t, std::size_t>>* members = nullptr,
                                      std::size_t num_members = 0) {
  CorrelationDirection out;
  const std::size_t n = key.size();
  std::vector<double> sorted = key;
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> cuts;
  for (std::size_t k = 1; k < buckets; ++k) {
    double c = sorted[k * n / buckets];
    const double floor = cuts.empty() ? sorted.front() : cuts.back();
    if (c <= floor) {
      const auto next = std::upper_bound(sorted.begin(), sorted.end(), floor);
      if (next == sorted.end()) break;
      c = *next;
    }
    cuts.push_back(c);
  }
  const std::size_t nb = cuts.size() + 1;
  std::vector<double> sum(nb, 0), sq(nb, 0), lo(nb, std::numeric_limits<double>::infinity()), hi(nb, -lo[0]);
  std::vector<std::size_t> count(nb, 0);
  double gs = 0, gq = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t b = static_cast<std::size_t>(std::upper_bound(cuts.begin(), cuts.end(), key[i]) - cuts.begin());
    sum[b] += value[i];
    sq[b] += value[i] * value[i];
    lo[b] = std::min(lo[b], key[i]);
    hi[b] = std::max(hi[b], key[i]);
    ++count[b];
    gs += value[i];
    gq += value[i] * value[i];
  }
  auto se = [](double s, double q, std::size_t c) {
    if (c < 2) return 0.0;
    const double m = s / static_cast<double>(c);
    const double var = std::max(0.0, (q - static_cast<double>(c) * m * m) / static_cast<double>(c - 1));
    return std::sqrt(var / static_cast<double>(c));
  };
  for (std::size_t b = 0; b < nb; ++b)
    out.buckets.push_back({lo[b], hi[b], count[b], sum[b] / static_cast<double>(count[b]), se(sum[b], sq[b], count[b])});
  out.global_mean = gs / static_cast<double>(n);
  out.global_stderr = se(gs, gq, n);
  if (!members) return out;

  if (members->size() != n) throw DimensionError("bucketize: one member pair per sample required");
  // Column nb holds the all-bucket totals.
  std::vector<std::vector<double>> msum(num_members, std::vector<double>(nb + 1, 0.0));
  std::vector<std::vector<double>> mcount(num_members, std::vector<double>(nb + 1, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t b = static_cast<std::size_t>(std::upper_bound(cuts.begin(), cuts.end(), key[i]) - cuts.begin());
    const auto [x, y] = (*members)[i];
    for (std::size_t m : {x, y}) {
      if (m == y && x == y) continue;
      msum[m][b] += value[i];
      mcount[m][b] += 1;
      msum[m][nb] += value[i];
      mcount[m][nb] += 1;
    }
  }
  auto jackknife = [&](std::size_t col, double total_sum, double total_count) {
    std::vector<double> reps;
    for (std::size_t m = 0; m < num_members; ++m) {
      const double c = total_count - mcount[m][col];
      if (c > 0) reps.push_back((total_sum - msum[m][col]) / c);
    }
    if (reps.size() < 2) return 0.0;
    double mean = 0;
    for (double r : reps) mean += r;
    mean /= static_cast<double>(reps.size());
    double ss = 0;
    for (double r : reps) ss += (r - mean) * (r - mean);
    const double g = static_cast<double>(reps.size());
    return std::sqrt((g - 1) / g * ss);
  };
  for (std::size_t b = 0; b < nb; ++b) out.buckets[b].std_error = jackknife(b, sum[b], static_cast<double>(count[b]));
  out.global_stderr = jackknife(nb, gs, static_cast<double>(n));
  return out;
}

}  // namespace detail

/// Sample distinct-item pairs uniformly with replacement; count common raters
/// (users with a positive interaction on both) and common KG neighbours (union
/// of undirected neighbours of each item's aligned entities); bucket each count
/// by quantiles of the other.
inline CorrelationReport correlation_study(const DatasetBundle& bundle, std::size_t pair_samples, std::uint64_t seed,
                                           std::size_t buckets = 5) {
  if (bundle.num_items < 2) throw DataError("correlation study needs at least two items");
  if (pair_samples == 0 || buckets == 0) throw ContractError("correlation study needs pairs and buckets");
  std::vector<std::vector<std::size_t>> raters(bundle.num_items);
  for (const auto& r : bundle.interactions)
    if (r.value > 0.5) raters[r.item].push_back(r.user);
  std::vector<std::vector<std::size_t>> entity_nb(bundle.num_entities);
  for (const auto& t : bundle.triples) {
    if (t.head == t.tail) continue;
    entity_nb[t.head].push_back(t.tail);
    entity_nb[t.tail].push_back(t.head);
  }
  std::vector<std::vector<std::size_t>> item_nb(bundle.num_items);
  for (std::size_t v = 0; v < bundle.num_items; ++v) {
    for (std::size_t e : bundle.alignment.entities_of(v)) item_nb[v].insert(item_nb[v].end(), entity_nb[e].begin(), entity_nb[e].end());
  }
  auto dedupe = [](std::vector<std::size_t>& xs) {
    std::sort(xs.begin(), xs.end());
    xs.erase(std::unique(xs.begin(), xs.end()), xs.end());
  };
  for (auto& r : raters) dedupe(r);
  for (auto& nb : item_nb) dedupe(nb);

  Rng rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, bundle.num_items - 1);
  std::vector<double> common_raters, common_nb;
  std::vector<std::pair<std::size_t, std::size_t>> members;
  common_raters.reserve(pair_samples);
  common_nb.reserve(pair_samples);
  members.reserve(pair_samples);
  for (std::size_t s = 0; s < pair_samples; ++s) {
    const std::size_t a = pick(rng);
    std::size_t b = pick(rng);
    while (b == a) b = pick(rng);
    members.emplace_back(a, b);
    common_raters.push_back(static_cast<double>(detail::intersection_size(raters[a], raters[b])));
    common_nb.push_back(static_cast<double>(detail::intersection_size(item_nb[a], item_nb[b])));
  }
  CorrelationReport r;
  r.pairs = pair_samples;
  r.rs_to_kg = detail::bucketize(common_raters, common_nb, buckets, &members, bundle.num_items);
  r.kg_to_rs = detail::bucketize(common_nb, common_raters, buckets, &members, bundle.num_items);
  return r;
}

}  // namespace mkr
