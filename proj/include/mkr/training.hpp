#pragma once

// Joint loss, negative samplers, Adam, and the alternating training schedule:
// each epoch makes t passes over the recommender data, then one pass over the
// knowledge graph.

#include <chrono>
#include <cmath>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "mkr/data.hpp"
#include "mkr/eval.hpp"
#include "mkr/model.hpp"

namespace mkr {

/// Raised when a loss becomes NaN or infinite.
class DivergenceError : public std::runtime_error {
 public:
  DivergenceError(std::size_t epoch, std::size_t step, const std::string& task)
      : std::runtime_error("training diverged: " + task + " loss is not finite at epoch " + std::to_string(epoch) +
                           ", step " + std::to_string(step)),
        epoch(epoch),
        step(step) {}
  std::size_t epoch;
  std::size_t step;
};

/// Rows (user, item, sampled entity, label).
struct RsBatch {
  std::vector<std::size_t> users;
  std::vector<std::size_t> items;
  std::vector<std::size_t> entities;
  std::vector<double> labels;

  std::size_t size() const noexcept { return users.size(); }
};

/// Rows (head, relation, sampled item or kNoItem, tail); `positive` marks true triples.
struct KgBatch {
  std::vector<std::size_t> heads;
  std::vector<std::size_t> relations;
  std::vector<std::size_t> items;
  std::vector<std::size_t> tails;
  std::vector<bool> positive;

  std::size_t size() const noexcept { return heads.size(); }
};

// ---------------------------------------------------------------------------
// Losses

/// Mean clamped cross-entropy of the click probabilities.
inline Var rs_loss(Tape& tape, const MkrModel& model, const RsBatch& batch) {
  if (batch.size() == 0) throw ContractError("rs_loss on an empty batch");
  return binary_cross_entropy(model.rs_probabilities(tape, batch.users, batch.items, batch.entities), batch.labels);
}

/// -lambda1 * (mean true score - mean corrupted score) from per-row scores.
inline Var kg_loss_from_scores(Tape& tape, const Var& scores, const std::vector<bool>& positive, double lambda1) {
  std::size_t n_pos = 0;
  for (bool p : positive) n_pos += p;
  const std::size_t n_neg = positive.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw ContractError("kg_loss needs both true and corrupted triples");
  Tensor w({positive.size()});
  for (std::size_t i = 0; i < positive.size(); ++i)
    w[i] = positive[i] ? -lambda1 / static_cast<double>(n_pos) : lambda1 / static_cast<double>(n_neg);
  return sum(mul(scores, tape.constant(std::move(w))));
}

inline Var kg_loss(Tape& tape, const MkrModel& model, const KgBatch& batch) {
  if (batch.size() == 0) throw ContractError("kg_loss on an empty batch");
  const Var scores = model.kg_scores(tape, batch.heads, batch.relations, batch.items, batch.tails);
  return kg_loss_from_scores(tape, scores, batch.positive, model.hyper().kg_weight);
}

/// lambda2 * sum of squared weights over `names` (every parameter when empty),
/// biases excluded.
inline Var reg_loss(Tape& tape, const MkrModel& model, const std::set<std::string>& names = {}) {
  Var total = tape.constant(Tensor::scalar(0.0));
  for (const auto& [name, entry] : model.store()) {
    if (MkrModel::is_bias(name) || (!names.empty() && !names.contains(name))) continue;
    total = add(total, sum_squares(tape.parameter(model.store(), name)));
  }
  return scale(total, model.hyper().l2_weight);
}

namespace detail {

// Penalty on the embedding rows looked up by a batch plus every non-embedding
// weight of the task. Rows are counted once per occurrence.
inline Var batch_reg(Tape& tape, const MkrModel& model, const std::set<std::string>& names,
                     const std::vector<std::pair<std::string, const std::vector<std::size_t>*>>& lookups) {
  Var total = tape.constant(Tensor::scalar(0.0));
  for (const auto& name : names) {
    if (MkrModel::is_bias(name) || name.starts_with("emb.")) continue;
    total = add(total, sum_squares(tape.parameter(model.store(), name)));
  }
  for (const auto& [table, rows] : lookups) {
    std::vector<std::size_t> kept;
    for (std::size_t r : *rows)
      if (r != kNoItem) kept.push_back(r);
    if (!kept.empty() && names.contains(table)) total = add(total, sum_squares(tape.gather(model.store(), table, kept)));
  }
  return scale(total, model.hyper().l2_weight);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Negative sampling

/// `count` distinct items the user has not engaged with, uniformly. Empty when
/// the user has engaged with every item.
inline std::vector<std::size_t> sample_rs_negatives(const std::unordered_set<std::size_t>& engaged,
                                                    std::size_t num_items, std::size_t count, Rng& rng) {
  return sample_unwatched(engaged, num_items, count, rng);
}

/// Filtered tail corruption against the full triple set.
class KgNegativeSampler {
 public:
  KgNegativeSampler(const std::vector<TripleRecord>& graph, std::size_t num_entities) : num_entities_(num_entities) {
    if (num_entities == 0) throw ContractError("KgNegativeSampler needs entities");
    for (const auto& t : graph) {
      if (t.tail >= num_entities) throw ContractError("triple tail out of range");
      true_tails_[key(t)].insert(t.tail);
    }
  }

  /// (h, r, t') with t' uniform over entities such that (h, r, t') is not a
  /// known triple. After 100 rejections the smallest absent tail is used.
  TripleRecord sample(const TripleRecord& triple, Rng& rng) const {
    static const std::unordered_set<std::size_t> none;
    const auto it = true_tails_.find(key(triple));
    const auto& known = it == true_tails_.end() ? none : it->second;
    if (known.size() >= num_entities_) {
      throw ContractError("every entity is a true tail for head " + std::to_string(triple.head) + ", relation " +
                          std::to_string(triple.relation) + "; no corrupted triple exists");
    }
    std::uniform_int_distribution<std::size_t> pick(0, num_entities_ - 1);
    for (int attempt = 0; attempt < 100; ++attempt) {
      const std::size_t t = pick(rng);
      if (!known.count(t)) return {triple.head, triple.relation, t};
    }
    for (std::size_t t = 0; t < num_entities_; ++t)
      if (!known.count(t)) return {triple.head, triple.relation, t};
    throw ContractError("unreachable: no absent tail");
  }

  bool contains(const TripleRecord& t) const {
    const auto it = true_tails_.find(key(t));
    return it != true_tails_.end() && it->second.count(t.tail);
  }

 private:
  static std::uint64_t key(const TripleRecord& t) {
    return (static_cast<std::uint64_t>(t.head) << 32) ^ static_cast<std::uint64_t>(t.relation);
  }
  std::size_t num_entities_;
  std::unordered_map<std::uint64_t, std::unordered_set<std::size_t>> true_tails_;
};

inline TripleRecord sample_kg_negative(const TripleRecord& triple, const KgNegativeSampler& sampler, Rng& rng) {
  return sampler.sample(triple, rng);
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with per-parameter step counts, so parameters that sit out a step
/// keep their own bias correction.
class Adam {
 public:
  explicit Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
    if (!(learning_rate > 0)) throw ContractError("Adam learning rate must be positive");
  }

  /// Apply one update to the named parameters using the gradients in `store`.
  void step(ParameterStore& store, const std::set<std::string>& names) {
    for (const auto& name : names) {
      Tensor& w = store.value(name);
      const Tensor& g = store.grad(name);
      auto [it, fresh] = state_.try_emplace(name);
      Moments& s = it->second;
      if (fresh) {
        s.m = Tensor(w.shape());
        s.v = Tensor(w.shape());
      }
      ++s.t;
      const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(s.t));
      const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(s.t));
      for (std::size_t i = 0; i < w.size(); ++i) {
        s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g[i];
        s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g[i] * g[i];
        w[i] -= lr_ * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps_);
      }
    }
  }

  std::size_t steps(const std::string& name) const {
    const auto it = state_.find(name);
    return it == state_.end() ? 0 : it->second.t;
  }

 private:
  struct Moments {
    Tensor m, v;
    std::size_t t = 0;
  };
  double lr_, beta1_, beta2_, eps_;
  std::map<std::string, Moments> state_;
};

// ---------------------------------------------------------------------------
// Batch assembly

template <typename T>
const T& pick_one(const std::vector<T>& options, Rng& rng) {
  std::uniform_int_distribution<std::size_t> d(0, options.size() - 1);
  return options[d(rng)];
}

/// One pass of recommender examples: every training positive in shuffled
/// order, each followed by a fresh negative for the same user. Users who have
/// engaged with every item contribute no negatives.
inline RsBatch rs_epoch_examples(const DatasetBundle& bundle, const std::vector<InteractionRecord>& positives,
                                 const std::vector<std::unordered_set<std::size_t>>& engaged, Rng& rng) {
  std::vector<std::size_t> order(positives.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  RsBatch out;
  auto push = [&](std::size_t u, std::size_t v, double y) {
    out.users.push_back(u);
    out.items.push_back(v);
    out.entities.push_back(pick_one(bundle.alignment.entities_of(v), rng));
    out.labels.push_back(y);
  };
  for (std::size_t i : order) {
    const auto& r = positives[i];
    const auto neg = sample_rs_negatives(engaged[r.user], bundle.num_items, 1, rng);
    if (neg.empty()) continue;
    push(r.user, r.item, 1.0);
    push(r.user, neg.front(), 0.0);
  }
  return out;
}

/// One pass of knowledge-graph examples: each training triple in shuffled
/// order followed by one corrupted copy.
inline KgBatch kg_epoch_examples(const DatasetBundle& bundle, const std::vector<TripleRecord>& triples,
                                 const KgNegativeSampler& sampler, bool use_items, Rng& rng) {
  std::vector<std::size_t> order(triples.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  KgBatch out;
  auto push = [&](const TripleRecord& t, bool pos) {
    const auto& its = bundle.alignment.items_of(t.head);
    out.heads.push_back(t.head);
    out.relations.push_back(t.relation);
    out.items.push_back(use_items && !its.empty() ? pick_one(its, rng) : kNoItem);
    out.tails.push_back(t.tail);
    out.positive.push_back(pos);
  };
  for (std::size_t i : order) {
    push(triples[i], true);
    push(sampler.sample(triples[i], rng), false);
  }
  return out;
}

template <typename Batch>
Batch slice(const Batch& all, std::size_t begin, std::size_t end) {
  Batch b;
  auto cut = [&](auto& dst, const auto& src) { dst.assign(src.begin() + begin, src.begin() + end); };
  if constexpr (std::is_same_v<Batch, RsBatch>) {
    cut(b.users, all.users);
    cut(b.items, all.items);
    cut(b.entities, all.entities);
    cut(b.labels, all.labels);
  } else {
    cut(b.heads, all.heads);
    cut(b.relations, all.relations);
    cut(b.items, all.items);
    cut(b.tails, all.tails);
    cut(b.positive, all.positive);
  }
  return b;
}

inline std::size_t steps_per_pass(std::size_t rows, std::size_t batch_size) {
  return (rows + batch_size - 1) / batch_size;
}

// ---------------------------------------------------------------------------
// Training

struct EpochLog {
  std::size_t epoch = 0;
  double rs_loss = 0.0;  // mean over the epoch's recommender steps (NaN when none ran)
  double kg_loss = 0.0;
  double val_auc = 0.0;
  double val_acc = 0.0;
  double seconds = 0.0;

  nlohmann::json to_json() const {
    auto num = [](double x) { return std::isfinite(x) ? nlohmann::json(x) : nlohmann::json(nullptr); };
    return {{"epoch", epoch}, {"rs_loss", num(rs_loss)}, {"kg_loss", num(kg_loss)},
            {"val_auc", num(val_auc)}, {"val_acc", num(val_acc)}, {"seconds", seconds}};
  }
};

struct TrainOptions {
  std::ostream* log = nullptr;   // receives one JSON line per epoch
  bool early_stopping = true;    // restore the best-validation checkpoint
};

struct TrainResult {
  MkrModel model;
  std::vector<EpochLog> epochs;
  std::size_t best_epoch = 0;
  double best_val_auc = 0.0;
  std::size_t steps = 0;
};

/// Validation AUC/accuracy of a model; NaN when the split lacks a class.
inline std::pair<double, double> validation_metrics(const MkrModel& model, const DatasetBundle& bundle) {
  const auto records = bundle.interactions_in(Split::validation);
  if (records.empty()) return {std::nan(""), std::nan("")};
  const auto scored = score_records(model_scorer(model, bundle.alignment), records);
  bool pos = false, neg = false;
  for (const auto& p : scored) (p.label ? pos : neg) = true;
  return {pos && neg ? auc(scored) : std::nan(""), accuracy(scored)};
}

/// Multi-task training. Model selection keeps the epoch with the best
/// validation AUC and stops after `patience` epochs without improvement; in
/// kg_only mode the final epoch is kept.
inline TrainResult train(const DatasetBundle& bundle, const HyperParams& hp, std::uint64_t seed,
                         const TrainOptions& options = {}) {
  hp.validate();
  bundle.validate();
  MkrModel model(hp, ModelSizes::of(bundle), seed);
  Rng rng(seed ^ 0x5DEECE66DULL);
  Adam adam(hp.learning_rate);

  const auto rs_train = [&] {
    std::vector<InteractionRecord> pos;
    for (const auto& r : bundle.interactions_in(Split::train))
      if (r.value > 0.5) pos.push_back(r);
    return pos;
  }();
  const auto engaged = bundle.positives_by_user(Split::train);
  const auto kg_train = bundle.triples_in(Split::train);
  const KgNegativeSampler kg_sampler(bundle.triples, bundle.num_entities);

  const bool run_rs = hp.task != Task::kg_only && !rs_train.empty();
  const bool run_kg = hp.task != Task::rs_only && !kg_train.empty();
  if (!run_rs && !run_kg) throw DataError("nothing to train: the selected tasks have no training records");

  const auto rs_names = model.rs_parameters();
  const auto kg_names = hp.kg_weight == 0.0 ? model.kg_exclusive_parameters() : model.kg_parameters();
  const bool kg_uses_items = hp.variant != Variant::none;

  TrainResult result{model, {}, 0, -1.0, 0};
  std::size_t since_best = 0;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= hp.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    double rs_total = 0, kg_total = 0;
    std::size_t rs_steps = 0, kg_steps = 0;

    if (run_rs) {
      for (std::size_t pass = 0; pass < hp.rs_steps; ++pass) {
        const RsBatch all = rs_epoch_examples(bundle, rs_train, engaged, rng);
        for (std::size_t b = 0; b < all.size(); b += hp.batch_size_rs) {
          const RsBatch batch = slice(all, b, std::min(all.size(), b + hp.batch_size_rs));
          Tape tape;
          Var loss = rs_loss(tape, model, batch);
          const double data_loss = loss.value().item();
          loss = add(loss, detail::batch_reg(tape, model, rs_names,
                                             {{"emb.user", &batch.users}, {"emb.item", &batch.items},
                                              {"emb.entity", &batch.entities}}));
          ++step;
          if (!std::isfinite(loss.value().item())) throw DivergenceError(epoch, step, "recommender");
          const auto reached = tape.backward(loss, model.store());
          std::set<std::string> update;
          for (const auto& n : reached)
            if (rs_names.contains(n)) update.insert(n);
          adam.step(model.store(), update);
          rs_total += data_loss;
          ++rs_steps;
        }
      }
    }

    if (run_kg) {
      const KgBatch all = kg_epoch_examples(bundle, kg_train, kg_sampler, kg_uses_items, rng);
      for (std::size_t b = 0; b < all.size(); b += hp.batch_size_kg) {
        const KgBatch batch = slice(all, b, std::min(all.size(), b + hp.batch_size_kg));
        Tape tape;
        Var loss = kg_loss(tape, model, batch);
        const double data_loss = loss.value().item();
        loss = add(loss, detail::batch_reg(tape, model, kg_names,
                                           {{"emb.entity", &batch.heads}, {"emb.entity", &batch.tails},
                                            {"emb.relation", &batch.relations}, {"emb.item", &batch.items}}));
        ++step;
        if (!std::isfinite(loss.value().item())) throw DivergenceError(epoch, step, "knowledge-graph");
        const auto reached = tape.backward(loss, model.store());
        std::set<std::string> update;
        for (const auto& n : reached)
          if (kg_names.contains(n)) update.insert(n);
        adam.step(model.store(), update);
        kg_total += data_loss;
        ++kg_steps;
      }
    }

    EpochLog log;
    log.epoch = epoch;
    log.rs_loss = rs_steps ? rs_total / static_cast<double>(rs_steps) : std::nan("");
    log.kg_loss = kg_steps ? kg_total / static_cast<double>(kg_steps) : std::nan("");
    std::tie(log.val_auc, log.val_acc) = validation_metrics(model, bundle);
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    result.epochs.push_back(log);
    if (options.log) *options.log << log.to_json().dump() << '\n' << std::flush;

    const bool select = options.early_stopping && hp.task != Task::kg_only && std::isfinite(log.val_auc);
    if (!select) {
      result.model = model;
      result.best_epoch = epoch;
      result.best_val_auc = log.val_auc;
      continue;
    }
    if (log.val_auc > result.best_val_auc) {
      result.model = model;
      result.best_epoch = epoch;
      result.best_val_auc = log.val_auc;
      since_best = 0;
    } else if (++since_best >= hp.patience && hp.patience > 0) {
      break;
    }
  }
  result.steps = step;
  return result;
}

}  // namespace mkr
