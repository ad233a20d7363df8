#pragma once

// Interaction / knowledge-graph ingestion, implicit-feedback labelling,
// alignment filtering, splitting and the synthetic aligned-data generator.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

namespace mkr {

/// Malformed or unusable input data.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split : std::uint8_t { train, validation, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::validation: return "validation";
    case Split::test: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "test") return Split::test;
  throw DataError("unknown split '" + s + "'");
}

/// `value` is the raw rating before labelling and 0/1 after.
struct InteractionRecord {
  std::size_t user = 0;
  std::size_t item = 0;
  double value = 0.0;

  friend bool operator==(const InteractionRecord&, const InteractionRecord&) = default;
};

struct TripleRecord {
  std::size_t head = 0;
  std::size_t relation = 0;
  std::size_t tail = 0;

  friend auto operator<=>(const TripleRecord&, const TripleRecord&) = default;
};

/// Dense id <-> raw string id table.
class IdMap {
 public:
  std::size_t intern(const std::string& raw) {
    auto [it, inserted] = index_.try_emplace(raw, raw_.size());
    if (inserted) raw_.push_back(raw);
    return it->second;
  }

  std::optional<std::size_t> find(const std::string& raw) const {
    auto it = index_.find(raw);
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  const std::string& raw(std::size_t id) const { return raw_.at(id); }
  std::size_t size() const noexcept { return raw_.size(); }

  static IdMap identity(std::size_t n) {
    IdMap m;
    for (std::size_t i = 0; i < n; ++i) m.intern(std::to_string(i));
    return m;
  }

  /// New map whose id k is the old id `old_ids[k]`.
  IdMap remapped(const std::vector<std::size_t>& old_ids) const {
    IdMap m;
    for (std::size_t old : old_ids) m.intern(raw_.at(old));
    return m;
  }

  friend bool operator==(const IdMap& a, const IdMap& b) { return a.raw_ == b.raw_; }

 private:
  std::vector<std::string> raw_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// S(v): entities of an item, and the inverse S(h): items of an entity.
class Alignment {
 public:
  Alignment() = default;
  Alignment(std::size_t num_items, std::size_t num_entities) : item_to_entities_(num_items), entity_to_items_(num_entities) {}

  void link(std::size_t item, std::size_t entity) {
    if (item >= item_to_entities_.size() || entity >= entity_to_items_.size()) {
      throw DataError("alignment pair (" + std::to_string(item) + ", " + std::to_string(entity) + ") out of range");
    }
    insert_sorted(item_to_entities_[item], entity);
    insert_sorted(entity_to_items_[entity], item);
  }

  const std::vector<std::size_t>& entities_of(std::size_t item) const { return item_to_entities_.at(item); }
  const std::vector<std::size_t>& items_of(std::size_t entity) const { return entity_to_items_.at(entity); }
  std::size_t num_items() const noexcept { return item_to_entities_.size(); }
  std::size_t num_entities() const noexcept { return entity_to_items_.size(); }

  std::vector<std::pair<std::size_t, std::size_t>> pairs() const {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    for (std::size_t i = 0; i < item_to_entities_.size(); ++i)
      for (std::size_t e : item_to_entities_[i]) out.emplace_back(i, e);
    return out;
  }

  friend bool operator==(const Alignment&, const Alignment&) = default;

 private:
  static void insert_sorted(std::vector<std::size_t>& v, std::size_t x) {
    auto it = std::lower_bound(v.begin(), v.end(), x);
    if (it == v.end() || *it != x) v.insert(it, x);
  }

  std::vector<std::vector<std::size_t>> item_to_entities_;
  std::vector<std::vector<std::size_t>> entity_to_items_;
};

struct DatasetBundle {
  std::size_t num_users = 0;
  std::size_t num_items = 0;
  std::size_t num_entities = 0;
  std::size_t num_relations = 0;
  std::vector<InteractionRecord> interactions;  // labelled 0/1
  std::vector<TripleRecord> triples;
  Alignment alignment;
  std::vector<Split> interaction_split;
  std::vector<Split> triple_split;
  IdMap users, items, entities, relations;

  std::vector<InteractionRecord> interactions_in(Split s) const {
    std::vector<InteractionRecord> out;
    for (std::size_t i = 0; i < interactions.size(); ++i)
      if (interaction_split.at(i) == s) out.push_back(interactions[i]);
    return out;
  }

  std::vector<TripleRecord> triples_in(Split s) const {
    std::vector<TripleRecord> out;
    for (std::size_t i = 0; i < triples.size(); ++i)
      if (triple_split.at(i) == s) out.push_back(triples[i]);
    return out;
  }

  /// Items with label 1 in the given split, per user.
  std::vector<std::unordered_set<std::size_t>> positives_by_user(Split s) const {
    std::vector<std::unordered_set<std::size_t>> out(num_users);
    for (std::size_t i = 0; i < interactions.size(); ++i)
      if (interaction_split.at(i) == s && interactions[i].value > 0.5) out[interactions[i].user].insert(interactions[i].item);
    return out;
  }

  /// Structural checks: id ranges, split vector lengths, alignment sizes.
  void validate() const {
    if (interaction_split.size() != interactions.size() || triple_split.size() != triples.size()) {
      throw DataError("split assignment length does not match record count");
    }
    if (alignment.num_items() != num_items || alignment.num_entities() != num_entities) {
      throw DataError("alignment sized for " + std::to_string(alignment.num_items()) + " items / " +
                      std::to_string(alignment.num_entities()) + " entities, bundle has " + std::to_string(num_items) +
                      " / " + std::to_string(num_entities));
    }
    for (const auto& r : interactions) {
      if (r.user >= num_users || r.item >= num_items) throw DataError("interaction id out of range");
      if (r.value != 0.0 && r.value != 1.0) throw DataError("interaction label must be 0 or 1");
    }
    for (const auto& t : triples) {
      if (t.head >= num_entities || t.tail >= num_entities || t.relation >= num_relations) {
        throw DataError("triple id out of range");
      }
    }
  }

  friend bool operator==(const DatasetBundle&, const DatasetBundle&) = default;
};

// ---------------------------------------------------------------------------
// Implicit feedback

/// Draw up to `count` distinct items uniformly from those not in `watched`.
/// Returns fewer when not enough unwatched items exist.
template <typename Set>
std::vector<std::size_t> sample_unwatched(const Set& watched, std::size_t num_items, std::size_t count, std::mt19937_64& rng) {
  std::vector<std::size_t> out;
  if (watched.size() >= num_items) return out;
  const std::size_t eligible = num_items - watched.size();
  count = std::min(count, eligible);
  if (watched.size() * 2 < num_items && count * 2 < eligible) {
    std::unordered_set<std::size_t> taken;
    std::uniform_int_distribution<std::size_t> pick(0, num_items - 1);
    while (out.size() < count) {
      const std::size_t item = pick(rng);
      if (watched.count(item) || !taken.insert(item).second) continue;
      out.push_back(item);
    }
    return out;
  }
  std::vector<std::size_t> pool;
  pool.reserve(eligible);
  for (std::size_t i = 0; i < num_items; ++i)
    if (!watched.count(i)) pool.push_back(i);
  for (std::size_t k = 0; k < count; ++k) {
    std::uniform_int_distribution<std::size_t> pick(k, pool.size() - 1);
    std::swap(pool[k], pool[pick(rng)]);
    out.push_back(pool[k]);
  }
  return out;
}

/// Ratings >= threshold become label 1 (every rating when no threshold); each
/// user then gets an equal number of unwatched items labelled 0. Users left
/// without positives are dropped.
inline std::vector<InteractionRecord> to_implicit(const std::vector<InteractionRecord>& ratings,
                                                  std::optional<double> threshold, std::size_t num_items,
                                                  std::uint64_t seed) {
  std::size_t num_users = 0;
  for (const auto& r : ratings) {
    num_users = std::max(num_users, r.user + 1);
    if (r.item >= num_items) throw DataError("item id " + std::to_string(r.item) + " out of range");
  }
  std::vector<std::set<std::size_t>> watched(num_users), positive(num_users);
  for (const auto& r : ratings) {
    watched[r.user].insert(r.item);
    if (!threshold || r.value >= *threshold) positive[r.user].insert(r.item);
  }
  std::mt19937_64 rng(seed);
  std::vector<InteractionRecord> out;
  for (std::size_t u = 0; u < num_users; ++u) {
    if (positive[u].empty()) continue;
    for (std::size_t item : positive[u]) out.push_back({u, item, 1.0});
    for (std::size_t item : sample_unwatched(watched[u], num_items, positive[u].size(), rng)) out.push_back({u, item, 0.0});
  }
  if (out.empty()) throw DataError("rating threshold leaves no positive interaction for any user");
  return out;
}

struct FilteredInteractions {
  std::vector<InteractionRecord> records;
  std::vector<std::size_t> user_old_ids;  // new id -> old id
  std::vector<std::size_t> item_old_ids;
};

/// Drop interactions whose item has no aligned entity, then renumber users
/// and items densely in order of first appearance.
inline FilteredInteractions filter_aligned(const std::vector<InteractionRecord>& records, const Alignment& alignment) {
  FilteredInteractions out;
  std::unordered_map<std::size_t, std::size_t> user_new, item_new;
  for (const auto& r : records) {
    if (r.item >= alignment.num_items() || alignment.entities_of(r.item).empty()) continue;
    auto [u, nu] = user_new.try_emplace(r.user, out.user_old_ids.size());
    if (nu) out.user_old_ids.push_back(r.user);
    auto [i, ni] = item_new.try_emplace(r.item, out.item_old_ids.size());
    if (ni) out.item_old_ids.push_back(r.item);
    out.records.push_back({u->second, i->second, r.value});
  }
  if (out.records.empty()) throw DataError("no interaction has an item aligned to the knowledge graph");
  return out;
}

// ---------------------------------------------------------------------------
// Splits

/// 6:2:2 assignment of n records, uniformly at random.
inline std::vector<Split> split_assignments(std::size_t n, std::uint64_t seed) {
  if (n < 5) throw DataError("cannot split fewer than 5 records (got " + std::to_string(n) + ")");
  const auto fifth = static_cast<std::size_t>(std::llround(0.2 * static_cast<double>(n)));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<Split> out(n, Split::train);
  for (std::size_t k = 0; k < fifth; ++k) out[order[k]] = Split::validation;
  for (std::size_t k = fifth; k < 2 * fifth; ++k) out[order[k]] = Split::test;
  return out;
}

inline void split(DatasetBundle& bundle, std::uint64_t seed) {
  bundle.interaction_split = split_assignments(bundle.interactions.size(), seed);
  bundle.triple_split = split_assignments(bundle.triples.size(), seed ^ 0x9e3779b97f4a7c15ULL);
}

namespace detail {

// Indices of the k records with the smallest seeded keys. Keys depend only on
// (seed, index), so a smaller fraction is always a subset of a larger one.
inline std::vector<bool> nested_keep(const std::vector<std::size_t>& candidates, double ratio, std::uint64_t seed,
                                     std::size_t total) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unif(0.0, 1.0);
  std::vector<double> keys(total);
  for (double& k : keys) k = unif(rng);
  std::vector<std::size_t> order = candidates;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return keys[a] < keys[b]; });
  const auto keep = static_cast<std::size_t>(std::llround(ratio * static_cast<double>(candidates.size())));
  std::vector<bool> kept(total, true);
  for (std::size_t k = keep; k < order.size(); ++k) kept[order[k]] = false;
  return kept;
}

}  // namespace detail

/// Keep a uniform `ratio` fraction of training interactions. Validation and
/// test records are untouched. Nested in `ratio` for a fixed seed.
inline DatasetBundle subsample_training(const DatasetBundle& bundle, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw DataError("training ratio must lie in (0, 1], got " + std::to_string(ratio));
  std::vector<std::size_t> train;
  for (std::size_t i = 0; i < bundle.interactions.size(); ++i)
    if (bundle.interaction_split[i] == Split::train) train.push_back(i);
  const auto kept = detail::nested_keep(train, ratio, seed, bundle.interactions.size());
  DatasetBundle out = bundle;
  out.interactions.clear();
  out.interaction_split.clear();
  for (std::size_t i = 0; i < bundle.interactions.size(); ++i) {
    if (!kept[i]) continue;
    out.interactions.push_back(bundle.interactions[i]);
    out.interaction_split.push_back(bundle.interaction_split[i]);
  }
  return out;
}

/// Keep a uniform `ratio` fraction of training triples (knowledge-graph size axis).
inline DatasetBundle subsample_triples(const DatasetBundle& bundle, double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio <= 1.0)) throw DataError("triple ratio must lie in (0, 1], got " + std::to_string(ratio));
  std::vector<std::size_t> train;
  for (std::size_t i = 0; i < bundle.triples.size(); ++i)
    if (bundle.triple_split[i] == Split::train) train.push_back(i);
  const auto kept = detail::nested_keep(train, ratio, seed, bundle.triples.size());
  DatasetBundle out = bundle;
  out.triples.clear();
  out.triple_split.clear();
  for (std::size_t i = 0; i < bundle.triples.size(); ++i) {
    if (!kept[i]) continue;
    out.triples.push_back(bundle.triples[i]);
    out.triple_split.push_back(bundle.triple_split[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Raw ingestion

/// Whole-line TSV reader: skips blank and '#' lines, reports line numbers.
class TsvReader {
 public:
  explicit TsvReader(const std::filesystem::path& path) : path_(path), in_(path) {
    if (!in_) throw DataError("cannot open " + path.string());
  }

  /// Next row with exactly `columns` fields; false at end of file.
  bool next(std::vector<std::string>& fields, std::size_t columns) {
    std::string line;
    while (std::getline(in_, line)) {
      ++line_no_;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty() || line[0] == '#') continue;
      fields.clear();
      std::size_t start = 0;
      while (true) {
        const std::size_t tab = line.find('\t', start);
        fields.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
        if (tab == std::string::npos) break;
        start = tab + 1;
      }
      if (fields.size() != columns) {
        throw DataError(path_.string() + ":" + std::to_string(line_no_) + ": expected " + std::to_string(columns) +
                        " tab-separated columns, found " + std::to_string(fields.size()));
      }
      for (const auto& f : fields) {
        if (f.empty()) throw DataError(path_.string() + ":" + std::to_string(line_no_) + ": empty field");
      }
      return true;
    }
    return false;
  }

  double number(const std::string& field) const {
    try {
      std::size_t used = 0;
      const double v = std::stod(field, &used);
      if (used != field.size() || !std::isfinite(v)) throw std::invalid_argument(field);
      return v;
    } catch (const std::exception&) {
      throw DataError(path_.string() + ":" + std::to_string(line_no_) + ": not a number: '" + field + "'");
    }
  }

  std::size_t index(const std::string& field) const {
    const double v = number(field);
    if (v < 0 || v != std::floor(v)) {
      throw DataError(path_.string() + ":" + std::to_string(line_no_) + ": not a non-negative integer: '" + field + "'");
    }
    return static_cast<std::size_t>(v);
  }

  std::size_t line() const noexcept { return line_no_; }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  std::size_t line_no_ = 0;
};

/// Unprocessed inputs with string ids interned to dense ones.
struct RawData {
  IdMap users, items, entities, relations;
  std::vector<InteractionRecord> ratings;
  std::vector<TripleRecord> triples;
  std::vector<std::pair<std::size_t, std::size_t>> alignment;  // (item, entity)
};

inline RawData read_raw(const std::filesystem::path& interactions, const std::filesystem::path& kg,
                        const std::filesystem::path& alignment) {
  RawData raw;
  std::vector<std::string> f;
  {
    TsvReader in(interactions);
    while (in.next(f, 3)) {
      raw.ratings.push_back({raw.users.intern(f[0]), raw.items.intern(f[1]), in.number(f[2])});
    }
  }
  {
    TsvReader in(kg);
    std::set<TripleRecord> seen;
    while (in.next(f, 3)) {
      TripleRecord t{raw.entities.intern(f[0]), raw.relations.intern(f[1]), raw.entities.intern(f[2])};
      if (seen.insert(t).second) raw.triples.push_back(t);
    }
  }
  {
    TsvReader in(alignment);
    while (in.next(f, 2)) raw.alignment.emplace_back(raw.items.intern(f[0]), raw.entities.intern(f[1]));
  }
  return raw;
}

/// Alignment filter, implicit-feedback labelling and 6:2:2 split.
inline DatasetBundle preprocess(const RawData& raw, std::optional<double> threshold, std::uint64_t seed) {
  Alignment raw_align(raw.items.size(), raw.entities.size());
  for (auto [item, entity] : raw.alignment) raw_align.link(item, entity);
  const auto filtered = filter_aligned(raw.ratings, raw_align);

  DatasetBundle b;
  b.users = raw.users.remapped(filtered.user_old_ids);
  b.items = raw.items.remapped(filtered.item_old_ids);
  b.entities = raw.entities;
  b.relations = raw.relations;
  b.num_items = filtered.item_old_ids.size();
  b.num_entities = raw.entities.size();
  b.num_relations = raw.relations.size();
  b.interactions = to_implicit(filtered.records, threshold, b.num_items, seed);

  // Users without positives are dropped by labelling; renumber densely again.
  std::vector<std::size_t> user_old;
  std::unordered_map<std::size_t, std::size_t> user_new;
  for (auto& r : b.interactions) {
    auto [it, inserted] = user_new.try_emplace(r.user, user_old.size());
    if (inserted) user_old.push_back(r.user);
    r.user = it->second;
  }
  b.users = b.users.remapped(user_old);
  b.num_users = user_old.size();

  b.alignment = Alignment(b.num_items, b.num_entities);
  for (std::size_t i = 0; i < b.num_items; ++i)
    for (std::size_t e : raw_align.entities_of(filtered.item_old_ids[i])) b.alignment.link(i, e);
  b.triples = raw.triples;
  split(b, seed);
  return b;
}

// ---------------------------------------------------------------------------
// Bundle directory I/O

namespace detail {

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream out(p);
  if (!out) throw DataError("cannot write " + p.string());
  return out;
}

inline void write_map(const std::filesystem::path& p, const IdMap& m) {
  auto out = open_out(p);
  out << "# dense_id\traw_id\n";
  for (std::size_t i = 0; i < m.size(); ++i) out << i << '\t' << m.raw(i) << '\n';
}

inline IdMap read_map(const std::filesystem::path& p) {
  IdMap m;
  TsvReader in(p);
  std::vector<std::string> f;
  while (in.next(f, 2)) {
    if (in.index(f[0]) != m.size()) throw DataError(p.string() + ":" + std::to_string(in.line()) + ": ids must be dense and ordered");
    if (m.find(f[1])) throw DataError(p.string() + ":" + std::to_string(in.line()) + ": duplicate raw id '" + f[1] + "'");
    m.intern(f[1]);
  }
  return m;
}

}  // namespace detail

/// Directory with interactions.tsv, kg.tsv, alignment.tsv, splits.tsv and the
/// four id maps (users/items/entities/relations.tsv).
inline void write_bundle(const DatasetBundle& b, const std::filesystem::path& dir) {
  b.validate();
  std::filesystem::create_directories(dir);
  {
    auto out = detail::open_out(dir / "interactions.tsv");
    out << "# user_id\titem_id\tlabel\n";
    for (const auto& r : b.interactions) out << r.user << '\t' << r.item << '\t' << static_cast<int>(r.value) << '\n';
  }
  {
    auto out = detail::open_out(dir / "kg.tsv");
    out << "# head_id\trelation_id\ttail_id\n";
    for (const auto& t : b.triples) out << t.head << '\t' << t.relation << '\t' << t.tail << '\n';
  }
  {
    auto out = detail::open_out(dir / "alignment.tsv");
    out << "# item_id\tentity_id\n";
    for (auto [i, e] : b.alignment.pairs()) out << i << '\t' << e << '\n';
  }
  {
    auto out = detail::open_out(dir / "splits.tsv");
    out << "# kind\tindex\tsplit\n";
    for (std::size_t i = 0; i < b.interaction_split.size(); ++i)
      out << "interaction\t" << i << '\t' << split_name(b.interaction_split[i]) << '\n';
    for (std::size_t i = 0; i < b.triple_split.size(); ++i)
      out << "triple\t" << i << '\t' << split_name(b.triple_split[i]) << '\n';
  }
  detail::write_map(dir / "users.tsv", b.users);
  detail::write_map(dir / "items.tsv", b.items);
  detail::write_map(dir / "entities.tsv", b.entities);
  detail::write_map(dir / "relations.tsv", b.relations);
}

inline DatasetBundle read_bundle(const std::filesystem::path& dir) {
  DatasetBundle b;
  b.users = detail::read_map(dir / "users.tsv");
  b.items = detail::read_map(dir / "items.tsv");
  b.entities = detail::read_map(dir / "entities.tsv");
  b.relations = detail::read_map(dir / "relations.tsv");
  b.num_users = b.users.size();
  b.num_items = b.items.size();
  b.num_entities = b.entities.size();
  b.num_relations = b.relations.size();
  std::vector<std::string> f;
  {
    TsvReader in(dir / "interactions.tsv");
    while (in.next(f, 3)) b.interactions.push_back({in.index(f[0]), in.index(f[1]), in.number(f[2])});
  }
  {
    TsvReader in(dir / "kg.tsv");
    while (in.next(f, 3)) b.triples.push_back({in.index(f[0]), in.index(f[1]), in.index(f[2])});
  }
  b.alignment = Alignment(b.num_items, b.num_entities);
  {
    TsvReader in(dir / "alignment.tsv");
    while (in.next(f, 2)) b.alignment.link(in.index(f[0]), in.index(f[1]));
  }
  b.interaction_split.assign(b.interactions.size(), Split::train);
  b.triple_split.assign(b.triples.size(), Split::train);
  {
    TsvReader in(dir / "splits.tsv");
    std::vector<bool> seen_i(b.interactions.size()), seen_t(b.triples.size());
    while (in.next(f, 3)) {
      const std::size_t idx = in.index(f[1]);
      auto& target = f[0] == "interaction" ? b.interaction_split : b.triple_split;
      auto& seen = f[0] == "interaction" ? seen_i : seen_t;
      if ((f[0] != "interaction" && f[0] != "triple") || idx >= target.size()) {
        throw DataError("splits.tsv:" + std::to_string(in.line()) + ": bad row");
      }
      target[idx] = parse_split(f[2]);
      seen[idx] = true;
    }
    if (std::find(seen_i.begin(), seen_i.end(), false) != seen_i.end() ||
        std::find(seen_t.begin(), seen_t.end(), false) != seen_t.end()) {
      throw DataError("splits.tsv does not assign every record");
    }
  }
  b.validate();
  return b;
}

// ---------------------------------------------------------------------------
// Synthetic aligned data

struct SyntheticOptions {
  std::size_t latent_dim = 4;
  double density = 0.05;            // mean fraction of items a user engages with
  double sharpness = 4.0;           // scale of user-item affinity in the engagement logit
  std::size_t triples_per_entity = 6;
  double kg_temperature = 8.0;      // concentration of tail sampling around latent neighbours
};

/// Planted latent vectors, row per id.
struct SyntheticLatents {
  std::vector<std::vector<double>> users, items, entities;
};

/// Planted-latent generator. Users, items and entities get Gaussian latent
/// vectors; entity j (aligned 1-to-1 with item j) mixes item j's latent with
/// independent noise: rho * z_j + sqrt(1 - rho^2) * noise. Engagements are
/// Bernoulli(sigmoid(a u.z + c)); each user gets as many unwatched negatives as
/// positives. Triples connect a head to tails drawn by latent proximity under
/// a relation-specific sign flip.
inline DatasetBundle generate_synthetic(std::size_t num_users, std::size_t num_items, std::size_t num_entities,
                                        std::size_t num_relations, double rho, std::uint64_t seed,
                                        const SyntheticOptions& opt = {}, SyntheticLatents* latents = nullptr) {
  if (num_users < 2 || num_items < 2 || num_relations < 1 || num_entities < num_items) {
    throw DataError("generate_synthetic: need >=2 users, >=2 items, >=1 relation and at least one entity per item");
  }
  if (!(rho >= 0.0 && rho <= 1.0)) throw DataError("generate_synthetic: correlation must lie in [0, 1]");
  if (opt.latent_dim == 0 || !(opt.density > 0.0 && opt.density < 0.5) || opt.triples_per_entity == 0 ||
      opt.triples_per_entity + 1 > num_entities) {
    throw DataError("generate_synthetic: invalid options");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const std::size_t k = opt.latent_dim;
  auto draw = [&](std::size_t n) {
    std::vector<std::vector<double>> m(n, std::vector<double>(k));
    for (auto& row : m)
      for (double& x : row) x = gauss(rng);
    return m;
  };
  const auto user_lat = draw(num_users);
  const auto item_lat = draw(num_items);
  auto entity_lat = draw(num_entities);
  const double noise = std::sqrt(std::max(0.0, 1.0 - rho * rho));
  for (std::size_t j = 0; j < num_items; ++j)
    for (std::size_t c = 0; c < k; ++c) entity_lat[j][c] = rho * item_lat[j][c] + noise * entity_lat[j][c];

  // Engagement logits; the offset is found by bisection to hit the target density.
  const double a = opt.sharpness / std::sqrt(static_cast<double>(k));
  std::vector<double> affinity(num_users * num_items);
  for (std::size_t u = 0; u < num_users; ++u)
    for (std::size_t i = 0; i < num_items; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < k; ++c) s += user_lat[u][c] * item_lat[i][c];
      affinity[u * num_items + i] = a * s;
    }
  auto mean_prob = [&](double offset) {
    double total = 0.0;
    for (double s : affinity) total += 1.0 / (1.0 + std::exp(-(s + offset)));
    return total / static_cast<double>(affinity.size());
  };
  double lo = -50.0, hi = 50.0;
  for (int it = 0; it < 100; ++it) {
    const double mid = 0.5 * (lo + hi);
    (mean_prob(mid) < opt.density ? lo : hi) = mid;
  }
  const double offset = 0.5 * (lo + hi);

  DatasetBundle b;
  b.num_users = num_users;
  b.num_items = num_items;
  b.num_entities = num_entities;
  b.num_relations = num_relations;
  b.users = IdMap::identity(num_users);
  b.items = IdMap::identity(num_items);
  b.entities = IdMap::identity(num_entities);
  b.relations = IdMap::identity(num_relations);

  std::uniform_real_distribution<double> unif(0.0, 1.0);
  for (std::size_t u = 0; u < num_users; ++u) {
    std::unordered_set<std::size_t> pos;
    for (std::size_t i = 0; i < num_items; ++i) {
      if (unif(rng) < 1.0 / (1.0 + std::exp(-(affinity[u * num_items + i] + offset)))) pos.insert(i);
    }
    if (pos.empty()) {
      // Every user engages with at least their highest-affinity item.
      std::size_t best = 0;
      for (std::size_t i = 1; i < num_items; ++i)
        if (affinity[u * num_items + i] > affinity[u * num_items + best]) best = i;
      pos.insert(best);
    }
    std::vector<std::size_t> sorted(pos.begin(), pos.end());
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i : sorted) b.interactions.push_back({u, i, 1.0});
    for (std::size_t i : sample_unwatched(pos, num_items, pos.size(), rng)) b.interactions.push_back({u, i, 0.0});
  }

  // Relation r flips the sign of a random subset of latent axes.
  std::vector<std::vector<double>> flips(num_relations, std::vector<double>(k));
  for (auto& f : flips)
    for (double& x : f) x = unif(rng) < 0.5 ? -1.0 : 1.0;
  std::vector<double> norms(num_entities);
  for (std::size_t e = 0; e < num_entities; ++e) {
    double s = 0.0;
    for (double x : entity_lat[e]) s += x * x;
    norms[e] = std::sqrt(s) + 1e-12;
  }
  std::set<TripleRecord> seen;
  std::uniform_int_distribution<std::size_t> pick_rel(0, num_relations - 1);
  std::vector<double> weight(num_entities);
  for (std::size_t h = 0; h < num_entities; ++h) {
    for (std::size_t n = 0; n < opt.triples_per_entity; ++n) {
      const std::size_t r = pick_rel(rng);
      double max_logit = -std::numeric_limits<double>::infinity();
      for (std::size_t t = 0; t < num_entities; ++t) {
        if (t == h || seen.count({h, r, t})) {
          weight[t] = -std::numeric_limits<double>::infinity();
          continue;
        }
        double s = 0.0;
        for (std::size_t c = 0; c < k; ++c) s += flips[r][c] * entity_lat[h][c] * entity_lat[t][c];
        weight[t] = opt.kg_temperature * s / (norms[h] * norms[t]);
        max_logit = std::max(max_logit, weight[t]);
      }
      double total = 0.0;
      for (double& w : weight) {
        w = std::isinf(w) ? 0.0 : std::exp(w - max_logit);
        total += w;
      }
      double target = unif(rng) * total;
      std::size_t tail = 0;
      for (std::size_t t = 0; t < num_entities; ++t) {
        if (weight[t] == 0.0) continue;
        tail = t;
        target -= weight[t];
        if (target <= 0.0) break;
      }
      seen.insert({h, r, tail});
      b.triples.push_back({h, r, tail});
    }
  }

  b.alignment = Alignment(num_items, num_entities);
  for (std::size_t j = 0; j < num_items; ++j) b.alignment.link(j, j);
  split(b, seed + 1);
  if (latents) *latents = {user_lat, item_lat, entity_lat};
  return b;
}

}  // namespace mkr
