#pragma once

// CTR metrics, top-K ranking metrics and tail-prediction RMSE.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "mkr/data.hpp"
#include "mkr/model.hpp"

namespace mkr {

struct ScoredPair {
  std::size_t user = 0;
  std::size_t item = 0;
  int label = 0;
  double score = 0.0;
};

/// P(score of a random positive > score of a random negative), ties as 1/2,
/// via the rank-sum statistic with midranks.
inline double auc(std::span<const ScoredPair> pairs) {
  for (const auto& p : pairs)
    if (!std::isfinite(p.score)) throw ContractError("auc: non-finite score");
  std::vector<std::size_t> order(pairs.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return pairs[a].score < pairs[b].score; });
  double pos = 0, neg = 0, rank_sum = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && pairs[order[j]].score == pairs[order[i]].score) ++j;
    const double midrank = 0.5 * static_cast<double>(i + 1 + j);  // ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (pairs[order[k]].label == 1) {
        pos += 1;
        rank_sum += midrank;
      } else {
        neg += 1;
      }
    }
    i = j;
  }
  if (pos == 0 || neg == 0) throw ContractError("auc needs both positive and negative labels");
  return (rank_sum - pos * (pos + 1) / 2) / (pos * neg);
}

inline double accuracy(std::span<const ScoredPair> pairs, double threshold = 0.5) {
  if (pairs.empty()) throw ContractError("accuracy of an empty set");
  std::size_t hits = 0;
  for (const auto& p : pairs) hits += (p.score >= threshold) == (p.label == 1);
  return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

/// Scores (user, item) rows; must return one probability per row.
using Scorer = std::function<std::vector<double>(std::span<const std::size_t>, std::span<const std::size_t>)>;

inline Scorer model_scorer(const MkrModel& model, const Alignment& alignment) {
  return [&model, &alignment](std::span<const std::size_t> u, std::span<const std::size_t> v) {
    return model.predict(alignment, u, v);
  };
}

/// Score labelled records in chunks.
inline std::vector<ScoredPair> score_records(const Scorer& scorer, const std::vector<InteractionRecord>& records,
                                             std::size_t chunk = 8192) {
  std::vector<ScoredPair> out;
  out.reserve(records.size());
  std::vector<std::size_t> users, items;
  for (std::size_t start = 0; start < records.size(); start += chunk) {
    const std::size_t end = std::min(records.size(), start + chunk);
    users.clear();
    items.clear();
    for (std::size_t i = start; i < end; ++i) {
      users.push_back(records[i].user);
      items.push_back(records[i].item);
    }
    const auto scores = scorer(users, items);
    for (std::size_t i = start; i < end; ++i)
      out.push_back({records[i].user, records[i].item, records[i].value > 0.5 ? 1 : 0, scores[i - start]});
  }
  return out;
}

struct TopK {
  std::map<std::size_t, double> precision;
  std::map<std::size_t, double> recall;
  std::size_t users = 0;
};

/// Precision@K and Recall@K on the positives of `split`, macro-averaged over
/// users with at least one such positive. Candidates are all items except the
/// user's training positives; ties go to the smaller item id.
inline TopK top_k(const Scorer& scorer, const DatasetBundle& bundle, Split split, std::span<const std::size_t> ks) {
  if (ks.empty()) throw ContractError("top_k needs at least one K");
  for (std::size_t k : ks)
    if (k == 0) throw ContractError("top_k: K must be positive");
  const auto train_pos = bundle.positives_by_user(Split::train);
  const auto eval_pos = bundle.positives_by_user(split);
  const std::size_t k_max = *std::max_element(ks.begin(), ks.end());
  TopK out;
  for (std::size_t k : ks) out.precision[k] = out.recall[k] = 0.0;
  std::vector<std::size_t> users, items;
  for (std::size_t u = 0; u < bundle.num_users; ++u) {
    if (eval_pos[u].empty()) continue;
    users.clear();
    items.clear();
    for (std::size_t v = 0; v < bundle.num_items; ++v) {
      if (train_pos[u].count(v)) continue;
      users.push_back(u);
      items.push_back(v);
    }
    ++out.users;
    if (items.empty()) continue;
    const auto scores = scorer(users, items);
    std::vector<std::size_t> order(items.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t keep = std::min(k_max, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep), order.end(),
                      [&](std::size_t a, std::size_t b) {
                        if (scores[a] != scores[b]) return scores[a] > scores[b];
                        return items[a] < items[b];
                      });
    for (std::size_t k : ks) {
      std::size_t hits = 0;
      for (std::size_t r = 0; r < std::min(k, keep); ++r) hits += eval_pos[u].count(items[order[r]]);
      out.precision[k] += static_cast<double>(hits) / static_cast<double>(k);
      out.recall[k] += static_cast<double>(hits) / static_cast<double>(eval_pos[u].size());
    }
  }
  if (out.users == 0) throw ContractError("top_k: no user has a positive in the " + std::string(split_name(split)) + " split");
  for (std::size_t k : ks) {
    out.precision[k] /= static_cast<double>(out.users);
    out.recall[k] /= static_cast<double>(out.users);
  }
  return out;
}

/// sqrt(mean over triples and components of (t_hat - t)^2).
inline double rmse(const Tensor& predicted, const Tensor& actual) {
  if (predicted.shape() != actual.shape()) {
    throw DimensionError("rmse: " + shape_string(predicted.shape()) + " vs " + shape_string(actual.shape()));
  }
  double total = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) total += (predicted[i] - actual[i]) * (predicted[i] - actual[i]);
  return std::sqrt(total / static_cast<double>(predicted.size()));
}

inline double kge_rmse(const MkrModel& model, const DatasetBundle& bundle, Split split) {
  const auto triples = bundle.triples_in(split);
  if (triples.empty()) throw ContractError("kge_rmse: no triples in the " + std::string(split_name(split)) + " split");
  std::vector<std::size_t> heads, relations, tails;
  for (const auto& t : triples) {
    heads.push_back(t.head);
    relations.push_back(t.relation);
    tails.push_back(t.tail);
  }
  const Tensor predicted = model.predict_tails(bundle.alignment, heads, relations);
  Tape tape;
  const Tensor actual = tape.gather(model.store(), "emb.entity", tails).value();
  return rmse(predicted, actual);
}

struct MetricReport {
  double auc = 0.0;
  double acc = 0.0;
  std::map<std::size_t, double> precision_at;
  std::map<std::size_t, double> recall_at;
  std::optional<double> kge_rmse;

  nlohmann::json to_json() const {
    nlohmann::json j;
    j["auc"] = auc;
    j["acc"] = acc;
    j["precision_at"] = nlohmann::json::object();
    j["recall_at"] = nlohmann::json::object();
    for (const auto& [k, v] : precision_at) j["precision_at"][std::to_string(k)] = v;
    for (const auto& [k, v] : recall_at) j["recall_at"][std::to_string(k)] = v;
    j["kge_rmse"] = kge_rmse ? nlohmann::json(*kge_rmse) : nlohmann::json(nullptr);
    return j;
  }

  /// One row per (metric, K); K is empty for metrics without one.
  std::string to_csv() const {
    std::ostringstream os;
    os.precision(10);
    os << "metric,k,value\n";
    os << "auc,," << auc << "\nacc,," << acc << '\n';
    for (const auto& [k, v] : precision_at) os << "precision," << k << ',' << v << '\n';
    for (const auto& [k, v] : recall_at) os << "recall," << k << ',' << v << '\n';
    if (kge_rmse) os << "kge_rmse,," << *kge_rmse << '\n';
    return os.str();
  }
};

/// Full report on one split: CTR metrics, top-K for `ks` (skipped when empty)
/// and tail RMSE when the split has triples.
inline MetricReport evaluate(const MkrModel& model, const DatasetBundle& bundle, Split split,
                             std::span<const std::size_t> ks) {
  if (ModelSizes::of(bundle) != model.sizes()) {
    throw DataError("model was trained for " + std::to_string(model.sizes().users) + " users, " +
                    std::to_string(model.sizes().items) + " items, " + std::to_string(model.sizes().entities) +
                    " entities and " + std::to_string(model.sizes().relations) + " relations; the bundle differs");
  }
  const Scorer scorer = model_scorer(model, bundle.alignment);
  const auto scored = score_records(scorer, bundle.interactions_in(split));
  MetricReport r;
  r.auc = auc(scored);
  r.acc = accuracy(scored);
  if (!ks.empty()) {
    auto tk = top_k(scorer, bundle, split, ks);
    r.precision_at = std::move(tk.precision);
    r.recall_at = std::move(tk.recall);
  }
  if (!bundle.triples_in(split).empty()) r.kge_rmse = kge_rmse(model, bundle, split);
  return r;
}

}  // namespace mkr
