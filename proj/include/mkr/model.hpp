#pragma once

// The two-tower network: a recommender tower (user MLP, item pathway, f_RS
// head) and a knowledge-graph tower (head pathway, relation MLP, tail
// predictor) that share the low-level item/entity layers.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "mkr/autodiff.hpp"
#include "mkr/data.hpp"
#include "mkr/units.hpp"

namespace mkr {

/// Which layer bridges the item and entity pathways. `none` is the ablation
/// with no bridge: items pass through their own dense layers.
enum class Variant { full, dcn, stitch, none };
enum class RsHead { inner_product, mlp };
/// Which tasks the trainer runs.
enum class Task { joint, rs_only, kg_only };

inline const char* to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::dcn: return "dcn";
    case Variant::stitch: return "stitch";
    case Variant::none: return "none";
  }
  return "?";
}
inline const char* to_string(RsHead h) { return h == RsHead::mlp ? "mlp" : "inner_product"; }
inline const char* to_string(Task t) {
  switch (t) {
    case Task::joint: return "joint";
    case Task::rs_only: return "rs_only";
    case Task::kg_only: return "kg_only";
  }
  return "?";
}

inline Variant parse_variant(const std::string& s) {
  if (s == "full") return Variant::full;
  if (s == "dcn") return Variant::dcn;
  if (s == "stitch") return Variant::stitch;
  if (s == "none") return Variant::none;
  throw ContractError("unknown variant '" + s + "' (full, dcn, stitch, none)");
}
inline RsHead parse_rs_head(const std::string& s) {
  if (s == "inner_product") return RsHead::inner_product;
  if (s == "mlp") return RsHead::mlp;
  throw ContractError("unknown f_rs_kind '" + s + "' (inner_product, mlp)");
}
inline Task parse_task(const std::string& s) {
  if (s == "joint") return Task::joint;
  if (s == "rs_only") return Task::rs_only;
  if (s == "kg_only") return Task::kg_only;
  throw ContractError("unknown task '" + s + "' (joint, rs_only, kg_only)");
}

struct HyperParams {
  std::size_t low_layers = 1;    // L
  std::size_t dim = 8;           // d
  std::size_t rs_steps = 3;      // t: recommender passes per knowledge-graph pass
  double kg_weight = 0.5;        // lambda1
  double l2_weight = 1e-6;       // lambda2
  std::size_t high_layers = 1;   // K
  std::size_t head_layers = 1;   // H, used when f_rs = mlp
  std::size_t batch_size_rs = 4096;
  std::size_t batch_size_kg = 4096;
  double learning_rate = 0.01;
  std::size_t epochs = 50;
  std::size_t patience = 5;
  Variant variant = Variant::full;
  RsHead f_rs = RsHead::inner_product;
  Task task = Task::joint;

  void validate() const {
    auto need = [](bool ok, const char* what) {
      if (!ok) throw ContractError(std::string("invalid hyperparameter: ") + what);
    };
    need(low_layers >= 1, "L >= 1");
    need(dim >= 1, "d >= 1");
    need(rs_steps >= 1, "t >= 1");
    need(high_layers >= 1, "K >= 1");
    need(head_layers >= 1, "H >= 1");
    need(kg_weight >= 0.0, "lambda1 >= 0");
    need(l2_weight >= 0.0, "lambda2 >= 0");
    need(batch_size_rs >= 2 && batch_size_rs % 2 == 0, "batch_size_rs even and >= 2");
    need(batch_size_kg >= 2 && batch_size_kg % 2 == 0, "batch_size_kg even and >= 2");
    need(learning_rate > 0.0, "learning_rate > 0");
    need(epochs >= 1, "epochs >= 1");
  }

  std::map<std::string, std::string> to_map() const {
    auto num = [](double x) {
      std::ostringstream os;
      os.precision(17);
      os << x;
      return os.str();
    };
    return {{"L", std::to_string(low_layers)},
            {"d", std::to_string(dim)},
            {"t", std::to_string(rs_steps)},
            {"lambda1", num(kg_weight)},
            {"lambda2", num(l2_weight)},
            {"K", std::to_string(high_layers)},
            {"H", std::to_string(head_layers)},
            {"batch_size_rs", std::to_string(batch_size_rs)},
            {"batch_size_kg", std::to_string(batch_size_kg)},
            {"learning_rate", num(learning_rate)},
            {"epochs", std::to_string(epochs)},
            {"patience", std::to_string(patience)},
            {"variant", to_string(variant)},
            {"f_rs_kind", to_string(f_rs)},
            {"task", to_string(task)}};
  }

  /// Apply one key; returns false for keys that are not hyperparameters.
  bool set(const std::string& key, const std::string& value) {
    auto count = [&](std::size_t& field) {
      std::size_t used = 0;
      long long v = 0;
      try {
        v = std::stoll(value, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != value.size() || v < 0) throw ContractError("'" + key + "' needs a non-negative integer, got '" + value + "'");
      field = static_cast<std::size_t>(v);
    };
    auto real = [&](double& field) {
      std::size_t used = 0;
      double v = 0;
      try {
        v = std::stod(value, &used);
      } catch (const std::exception&) {
        used = 0;
      }
      if (used != value.size()) throw ContractError("'" + key + "' needs a number, got '" + value + "'");
      field = v;
    };
    if (key == "L") count(low_layers);
    else if (key == "d") count(dim);
    else if (key == "t") count(rs_steps);
    else if (key == "lambda1") real(kg_weight);
    else if (key == "lambda2") real(l2_weight);
    else if (key == "K") count(high_layers);
    else if (key == "H") count(head_layers);
    else if (key == "batch_size_rs") count(batch_size_rs);
    else if (key == "batch_size_kg") count(batch_size_kg);
    else if (key == "learning_rate") real(learning_rate);
    else if (key == "epochs") count(epochs);
    else if (key == "patience") count(patience);
    else if (key == "variant") variant = parse_variant(value);
    else if (key == "f_rs_kind") f_rs = parse_rs_head(value);
    else if (key == "task") task = parse_task(value);
    else return false;
    return true;
  }

  friend bool operator==(const HyperParams&, const HyperParams&) = default;
};

struct ModelSizes {
  std::size_t users = 0;
  std::size_t items = 0;
  std::size_t entities = 0;
  std::size_t relations = 0;

  static ModelSizes of(const DatasetBundle& b) { return {b.num_users, b.num_items, b.num_entities, b.num_relations}; }
  friend bool operator==(const ModelSizes&, const ModelSizes&) = default;
};

/// Marks "no associated item" for a knowledge-graph head.
inline constexpr std::size_t kNoItem = static_cast<std::size_t>(-1);

class MkrModel {
 public:
  using SharedLayer = std::variant<CrossCompressUnit, DcnLayer, StitchUnit>;

  MkrModel(const HyperParams& hp, const ModelSizes& sizes, std::uint64_t seed) : hp_(hp), sizes_(sizes) {
    hp_.validate();
    if (!sizes.users || !sizes.items || !sizes.entities || !sizes.relations) {
      throw ContractError("model needs at least one user, item, entity and relation");
    }
    Rng rng(seed);
    const std::size_t d = hp_.dim;
    store_.add("emb.user", unit_init({sizes.users, d}, d, rng));
    store_.add("emb.item", unit_init({sizes.items, d}, d, rng));
    store_.add("emb.entity", unit_init({sizes.entities, d}, d, rng));
    store_.add("emb.relation", unit_init({sizes.relations, d}, d, rng));
    for (std::size_t l = 0; l < hp_.low_layers; ++l) {
      const std::string idx = std::to_string(l);
      user_mlp_.push_back(DenseLayer::create(store_, "user_mlp." + idx, d, d, Activation::relu, rng));
      relation_mlp_.push_back(DenseLayer::create(store_, "relation_mlp." + idx, d, d, Activation::relu, rng));
      entity_mlp_.push_back(DenseLayer::create(store_, "entity_mlp." + idx, d, d, Activation::relu, rng));
      switch (hp_.variant) {
        case Variant::full: shared_.emplace_back(CrossCompressUnit::create(store_, "shared." + idx, d, rng)); break;
        case Variant::dcn: shared_.emplace_back(DcnLayer::create(store_, "shared." + idx, d, rng)); break;
        case Variant::stitch: shared_.emplace_back(StitchUnit::create(store_, "shared." + idx)); break;
        case Variant::none: break;
      }
    }
    for (std::size_t k = 0; k < hp_.high_layers; ++k) {
      const bool last = k + 1 == hp_.high_layers;
      kge_head_.push_back(DenseLayer::create(store_, "kge_head." + std::to_string(k), k == 0 ? 2 * d : d, d,
                                             last ? Activation::identity : Activation::relu, rng));
    }
    if (hp_.f_rs == RsHead::mlp) {
      for (std::size_t h = 0; h < hp_.head_layers; ++h) {
        const bool last = h + 1 == hp_.head_layers;
        rs_head_.push_back(DenseLayer::create(store_, "rs_head." + std::to_string(h), h == 0 ? 2 * d : d,
                                              last ? 1 : d, last ? Activation::identity : Activation::relu, rng));
      }
    }
  }

  const HyperParams& hyper() const noexcept { return hp_; }
  const ModelSizes& sizes() const noexcept { return sizes_; }
  ParameterStore& store() noexcept { return store_; }
  const ParameterStore& store() const noexcept { return store_; }
  const std::vector<SharedLayer>& shared_layers() const noexcept { return shared_; }

  /// Parameters reached by the recommender loss.
  std::set<std::string> rs_parameters() const {
    std::set<std::string> out;
    for (const auto& name : store_.names()) {
      if (name == "emb.user" || name == "emb.item" || name.starts_with("user_mlp.") || name.starts_with("rs_head.") ||
          name.starts_with("shared."))
        out.insert(name);
    }
    if (hp_.variant != Variant::none) out.insert("emb.entity");
    return out;
  }
  /// Parameters reached by the knowledge-graph loss.
  std::set<std::string> kg_parameters() const {
    std::set<std::string> out;
    for (const auto& name : store_.names()) {
      if (name == "emb.entity" || name == "emb.relation" || name.starts_with("relation_mlp.") ||
          name.starts_with("kge_head.") || name.starts_with("entity_mlp.") || name.starts_with("shared."))
        out.insert(name);
    }
    if (hp_.variant != Variant::none) out.insert("emb.item");
    return out;
  }
  std::set<std::string> shared_parameters() const {
    std::set<std::string> out;
    const auto rs = rs_parameters();
    for (const auto& name : kg_parameters())
      if (rs.contains(name)) out.insert(name);
    return out;
  }
  std::set<std::string> kg_exclusive_parameters() const {
    std::set<std::string> out;
    const auto rs = rs_parameters();
    for (const auto& name : kg_parameters())
      if (!rs.contains(name)) out.insert(name);
    return out;
  }

  static bool is_bias(const std::string& name) {
    return name.ends_with(".bias") || name.ends_with(".b_v") || name.ends_with(".b_e");
  }

  // -------------------------------------------------------------------------
  // Tape-level forward passes over batches.

  /// u_L = M^L(u): [B x d].
  Var user_tower(Tape& tape, std::span<const std::size_t> users) const {
    Var x = tape.gather(store_, "emb.user", users);
    for (const auto& layer : user_mlp_) x = layer.forward(tape, store_, x);
    return x;
  }

  /// r_L = M^L(r): [B x d].
  Var relation_tower(Tape& tape, std::span<const std::size_t> relations) const {
    Var x = tape.gather(store_, "emb.relation", relations);
    for (const auto& layer : relation_mlp_) x = layer.forward(tape, store_, x);
    return x;
  }

  /// Runs the L shared layers on (item, entity) rows; returns [v_L, e_L].
  UnitOutput shared_tower(Tape& tape, std::span<const std::size_t> items, std::span<const std::size_t> entities) const {
    if (hp_.variant == Variant::none) throw ContractError("the ablation variant has no shared layers");
    if (items.size() != entities.size()) throw DimensionError("shared_tower: item and entity batches differ in length");
    Var v = tape.gather(store_, "emb.item", items);
    Var e = tape.gather(store_, "emb.entity", entities);
    const Anchors anchors{v, e};
    for (const auto& layer : shared_) {
      UnitOutput out = std::visit(
          [&](const auto& unit) -> UnitOutput {
            using T = std::decay_t<decltype(unit)>;
            if constexpr (std::is_same_v<T, DcnLayer>) return unit.forward(tape, store_, v, e, anchors);
            else return unit.forward(tape, store_, v, e);
          },
          layer);
      v = out.v;
      e = out.e;
    }
    return {v, e};
  }

  /// v_L for the ablation (no bridge): the item embedding itself.
  Var item_tower(Tape& tape, std::span<const std::size_t> items) const { return tape.gather(store_, "emb.item", items); }

  /// Entity-only head pathway for heads without an associated item.
  Var entity_tower(Tape& tape, std::span<const std::size_t> entities) const {
    Var x = tape.gather(store_, "emb.entity", entities);
    for (const auto& layer : entity_mlp_) x = layer.forward(tape, store_, x);
    return x;
  }

  /// f_RS(u_L, v_L) before the sigmoid: [B].
  Var rs_head(Tape& tape, const Var& u, const Var& v) const {
    if (hp_.f_rs == RsHead::inner_product) return rowdot(u, v);
    Var x = concat_last(u, v);
    for (const auto& layer : rs_head_) x = layer.forward(tape, store_, x);
    return sum_last(x);
  }

  /// Item pathway for training rows (one sampled entity per row).
  Var item_features(Tape& tape, std::span<const std::size_t> items, std::span<const std::size_t> entities) const {
    if (hp_.variant == Variant::none) return item_tower(tape, items);
    return shared_tower(tape, items, entities).v;
  }

  /// Click probabilities for (user, item, sampled entity) rows.
  Var rs_probabilities(Tape& tape, std::span<const std::size_t> users, std::span<const std::size_t> items,
                       std::span<const std::size_t> entities) const {
    return sigmoid(rs_head(tape, user_tower(tape, users), item_features(tape, items, entities)));
  }

  /// h_L for heads with one sampled associated item each (kNoItem for none).
  Var head_features(Tape& tape, std::span<const std::size_t> heads, std::span<const std::size_t> items) const {
    const std::size_t n = heads.size();
    std::vector<std::size_t> with, without;
    for (std::size_t i = 0; i < n; ++i) (items[i] == kNoItem || hp_.variant == Variant::none ? without : with).push_back(i);
    if (without.empty()) return shared_tower(tape, items, heads).e;
    if (with.empty()) return entity_tower(tape, heads);
    // Mixed batch: evaluate both pathways and select per row.
    std::vector<std::size_t> safe_items(items.begin(), items.end());
    for (std::size_t i : without) safe_items[i] = items[with.front()];
    Tensor mask({n}, 0.0), inv({n}, 1.0);
    for (std::size_t i : with) {
      mask[i] = 1.0;
      inv[i] = 0.0;
    }
    Var shared = shared_tower(tape, safe_items, heads).e;
    Var plain = entity_tower(tape, heads);
    return add(row_scale(shared, tape.constant(mask)), row_scale(plain, tape.constant(inv)));
  }

  /// t_hat = M^K([h_L; r_L]).
  Var tail_predictor(Tape& tape, const Var& head, const Var& relation) const {
    Var x = concat_last(head, relation);
    for (const auto& layer : kge_head_) x = layer.forward(tape, store_, x);
    return x;
  }

  /// Triple scores sigma(t . t_hat) for rows (head, relation, sampled item, tail).
  Var kg_scores(Tape& tape, std::span<const std::size_t> heads, std::span<const std::size_t> relations,
                std::span<const std::size_t> items, std::span<const std::size_t> tails) const {
    Var t_hat = tail_predictor(tape, head_features(tape, heads, items), relation_tower(tape, relations));
    Var t = tape.gather(store_, "emb.entity", tails);
    return sigmoid(rowdot(t, t_hat));
  }

  // -------------------------------------------------------------------------
  // Evaluation-time passes: expectations over S(v) / S(h) taken as means.

  /// Click probabilities with v_L averaged over every entity of each item.
  std::vector<double> predict(const Alignment& alignment, std::span<const std::size_t> users,
                              std::span<const std::size_t> items) const {
    if (users.size() != items.size()) throw DimensionError("predict: user and item batches differ in length");
    if (users.empty()) return {};
    Tape tape;
    Var v_mean;
    if (hp_.variant == Variant::none) {
      v_mean = item_tower(tape, items);
    } else {
      std::vector<std::size_t> rows_item, rows_entity, counts;
      for (std::size_t item : items) {
        const auto& ents = alignment.entities_of(item);
        if (ents.empty()) throw ContractError("item " + std::to_string(item) + " has no associated entity");
        counts.push_back(ents.size());
        for (std::size_t e : ents) {
          rows_item.push_back(item);
          rows_entity.push_back(e);
        }
      }
      const Tensor v_rows = shared_tower(tape, rows_item, rows_entity).v.value();
      v_mean = tape.constant(segment_mean(v_rows, counts));
    }
    const Tensor probs = sigmoid(rs_head(tape, user_tower(tape, users), v_mean)).value();
    return probs.values();
  }

  /// Predicted tail vectors with h_L averaged over every item of each head.
  Tensor predict_tails(const Alignment& alignment, std::span<const std::size_t> heads,
                       std::span<const std::size_t> relations) const {
    if (heads.size() != relations.size()) throw DimensionError("predict_tails: batch lengths differ");
    Tape tape;
    std::vector<std::size_t> rows_item, rows_head, counts;
    for (std::size_t h : heads) {
      const auto& its = alignment.items_of(h);
      if (its.empty() || hp_.variant == Variant::none) {
        rows_item.push_back(kNoItem);
        rows_head.push_back(h);
        counts.push_back(1);
      } else {
        counts.push_back(its.size());
        for (std::size_t v : its) {
          rows_item.push_back(v);
          rows_head.push_back(h);
        }
      }
    }
    const Tensor h_rows = head_features(tape, rows_head, rows_item).value();
    Var h_mean = tape.constant(segment_mean(h_rows, counts));
    return tail_predictor(tape, h_mean, relation_tower(tape, relations)).value();
  }

  // -------------------------------------------------------------------------
  // Checkpoints: magic, hyperparameters as text, then every parameter as
  // (name, shape, little-endian float64 data).

  static constexpr char kMagic[8] = {'M', 'K', 'R', 'C', 'K', 'P', 'T', '1'};

  void save(const std::filesystem::path& path) const {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(kMagic, sizeof kMagic);
    std::ostringstream meta;
    for (const auto& [k, v] : hp_.to_map()) meta << k << '=' << v << '\n';
    meta << "users=" << sizes_.users << "\nitems=" << sizes_.items << "\nentities=" << sizes_.entities
         << "\nrelations=" << sizes_.relations << '\n';
    write_string(out, meta.str());
    write_u64(out, store_.size());
    for (const auto& [name, entry] : store_) {
      write_string(out, name);
      write_u64(out, entry.value.rank());
      for (std::size_t dim : entry.value.shape()) write_u64(out, dim);
      for (double x : entry.value.data()) write_u64(out, std::bit_cast<std::uint64_t>(x));
    }
    if (!out) throw DataError("failed writing checkpoint " + path.string());
  }

  static MkrModel load(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    char magic[sizeof kMagic];
    in.read(magic, sizeof magic);
    if (!in || std::memcmp(magic, kMagic, sizeof kMagic) != 0) throw DataError(path.string() + " is not a checkpoint (bad magic)");
    HyperParams hp;
    ModelSizes sizes;
    std::istringstream meta(read_string(in));
    std::string line;
    while (std::getline(meta, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw DataError("corrupt checkpoint header");
      const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
      if (key == "users") sizes.users = std::stoull(value);
      else if (key == "items") sizes.items = std::stoull(value);
      else if (key == "entities") sizes.entities = std::stoull(value);
      else if (key == "relations") sizes.relations = std::stoull(value);
      else if (!hp.set(key, value)) throw DataError("unknown checkpoint header key '" + key + "'");
    }
    MkrModel model(hp, sizes, 0);
    const std::uint64_t count = read_u64(in);
    if (count != model.store_.size()) throw DataError("checkpoint parameter count does not match its hyperparameters");
    for (std::uint64_t p = 0; p < count; ++p) {
      const std::string name = read_string(in);
      Shape shape(read_u64(in));
      for (auto& dim : shape) dim = read_u64(in);
      std::vector<double> data(shape_size(shape));
      for (double& x : data) x = std::bit_cast<double>(read_u64(in));
      if (!model.store_.contains(name)) throw DataError("checkpoint has unexpected parameter '" + name + "'");
      model.store_.set(name, Tensor(std::move(shape), std::move(data)));
    }
    return model;
  }

 private:
  // Mean of consecutive row groups; group g spans counts[g] rows.
  static Tensor segment_mean(const Tensor& rows, const std::vector<std::size_t>& counts) {
    const std::size_t d = rows.dim(1);
    Tensor out({counts.size(), d});
    std::size_t r = 0;
    for (std::size_t g = 0; g < counts.size(); ++g) {
      const double n = static_cast<double>(counts[g]);
      for (std::size_t k = 0; k < counts[g]; ++k, ++r)
        for (std::size_t j = 0; j < d; ++j) out.at(g, j) += rows.at(r, j) / n;
    }
    return out;
  }

  static void write_u64(std::ostream& out, std::uint64_t x) {
    unsigned char bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<unsigned char>(x >> (8 * i));
    out.write(reinterpret_cast<const char*>(bytes), 8);
  }
  static std::uint64_t read_u64(std::istream& in) {
    unsigned char bytes[8];
    in.read(reinterpret_cast<char*>(bytes), 8);
    if (!in) throw DataError("truncated checkpoint");
    std::uint64_t x = 0;
    for (int i = 0; i < 8; ++i) x |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return x;
  }
  static void write_string(std::ostream& out, const std::string& s) {
    write_u64(out, s.size());
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
  }
  static std::string read_string(std::istream& in) {
    const std::uint64_t n = read_u64(in);
    if (n > (1u << 24)) throw DataError("corrupt checkpoint string length");
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    if (!in) throw DataError("truncated checkpoint");
    return s;
  }

  HyperParams hp_;
  ModelSizes sizes_;
  ParameterStore store_;
  std::vector<DenseLayer> user_mlp_, relation_mlp_, entity_mlp_, kge_head_, rs_head_;
  std::vector<SharedLayer> shared_;
};

// ---------------------------------------------------------------------------
// Single-example passes.

/// y_hat for one (user, item) with a specific associated entity.
inline double rs_forward(const MkrModel& model, const Alignment& alignment, std::size_t user, std::size_t item,
                         std::size_t entity) {
  const auto& ents = alignment.entities_of(item);
  if (ents.empty()) throw ContractError("item " + std::to_string(item) + " has no associated entity");
  if (!std::binary_search(ents.begin(), ents.end(), entity)) {
    throw ContractError("entity " + std::to_string(entity) + " is not associated with item " + std::to_string(item));
  }
  Tape tape;
  const std::size_t u[] = {user}, v[] = {item}, e[] = {entity};
  return model.rs_probabilities(tape, u, v, e).value()[0];
}

/// y_hat for one (user, item) with v_L averaged over S(item).
inline double rs_forward_eval(const MkrModel& model, const Alignment& alignment, std::size_t user, std::size_t item) {
  const std::size_t u[] = {user}, v[] = {item};
  return model.predict(alignment, u, v)[0];
}

struct KgeOutput {
  Tensor tail_prediction;
  double score = 0.0;
};

/// (t_hat, sigma(t . t_hat)) for one triple with a specific associated item
/// of the head (kNoItem when the head has none).
inline KgeOutput kge_forward(const MkrModel& model, const Alignment& alignment, std::size_t head, std::size_t relation,
                             std::size_t item, std::size_t tail) {
  if (tail >= model.sizes().entities) throw ContractError("tail " + std::to_string(tail) + " out of range");
  if (item != kNoItem) {
    const auto& its = alignment.items_of(head);
    if (!std::binary_search(its.begin(), its.end(), item)) {
      throw ContractError("item " + std::to_string(item) + " is not associated with entity " + std::to_string(head));
    }
  }
  Tape tape;
  const std::size_t h[] = {head}, r[] = {relation}, v[] = {item}, t[] = {tail};
  Var t_hat = model.tail_predictor(tape, model.head_features(tape, h, v), model.relation_tower(tape, r));
  Var t_emb = tape.gather(model.store(), "emb.entity", t);
  const double score = sigmoid(rowdot(t_emb, t_hat)).value()[0];
  const std::size_t d = model.hyper().dim;
  return {t_hat.value().reshaped({d}), score};
}

}  // namespace mkr
