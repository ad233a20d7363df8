// mkr: preprocess, train, evaluate, sweep, verify and generate.
//
// Exit codes: 0 success, 1 usage or configuration error, 2 data error,
// 3 verification failure, 4 training divergence.

#include <openssl/evp.h>

#include <CLI11.hpp>
#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "mkr/mkr.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace mkr;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kVerify = 3, kDiverged = 4 };

std::string sha256_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read " + path.string());
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return os.str();
}

/// Hash a file, or every regular file under a directory in path order.
json hash_inputs(const std::vector<fs::path>& paths) {
  json out = json::object();
  for (const auto& p : paths) {
    if (p.empty()) continue;
    if (fs::is_directory(p)) {
      std::vector<fs::path> files;
      for (const auto& e : fs::recursive_directory_iterator(p))
        if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(e.path());
      std::sort(files.begin(), files.end());
      for (const auto& f : files) out[f.string()] = sha256_file(f);
    } else {
      out[p.string()] = sha256_file(p);
    }
  }
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

void write_manifest(const fs::path& dir, const std::string& command, const RunConfig& config, const json& inputs,
                    const json& extra = json::object()) {
  json m{{"command", command},
         {"version", kVersion},
         {"seed", config.seed},
         {"config", config.to_map()},
         {"inputs", inputs}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  write_text(dir / "manifest.json", m.dump(2) + "\n");
}

/// Shared flags: --config file first, then --set key=value pairs, then the
/// dedicated flags.
struct Common {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::string out;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "key=value configuration file")->check(CLI::ExistingFile);
    app->add_option("--set", sets, "override one configuration key (key=value), repeatable");
    app->add_option("--seed", seed, "random seed");
    app->add_option("--out", out, "output directory");
  }

  RunConfig resolve() const {
    RunConfig c;
    if (!config_file.empty()) apply_config_file(c, config_file);
    for (const auto& s : sets) apply_config_text(c, s, "--set");
    if (seed) c.seed = *seed;
    if (!out.empty()) c.out = out;
    c.validate();
    return c;
  }
};

// ---------------------------------------------------------------------------

struct PreprocessArgs {
  Common common;
  std::string interactions, kg, alignment;
  std::optional<double> threshold;
};

int cmd_preprocess(const PreprocessArgs& a) {
  RunConfig c = a.common.resolve();
  if (a.threshold) c.threshold = a.threshold;
  const auto raw = read_raw(a.interactions, a.kg, a.alignment);
  const auto bundle = preprocess(raw, c.threshold, c.seed);
  write_bundle(bundle, c.out);
  write_manifest(c.out, "preprocess", c, hash_inputs({a.interactions, a.kg, a.alignment}),
                 {{"counts",
                   {{"users", bundle.num_users},
                    {"items", bundle.num_items},
                    {"entities", bundle.num_entities},
                    {"relations", bundle.num_relations},
                    {"interactions", bundle.interactions.size()},
                    {"triples", bundle.triples.size()}}}});
  std::cout << json{{"bundle", c.out.string()}, {"interactions", bundle.interactions.size()},
                    {"triples", bundle.triples.size()}}
                   .dump()
            << "\n";
  return kOk;
}

struct GenerateArgs {
  Common common;
  std::size_t users = 500, items = 500, entities = 500, relations = 1;
  double rho = 0.9;
  SyntheticOptions options;
};

int cmd_generate(const GenerateArgs& a) {
  const RunConfig c = a.common.resolve();
  const auto bundle = generate_synthetic(a.users, a.items, a.entities, a.relations, a.rho, c.seed, a.options);
  write_bundle(bundle, c.out);
  write_manifest(c.out, "generate", c, json::object(),
                 {{"generator",
                   {{"users", a.users},
                    {"items", a.items},
                    {"entities", a.entities},
                    {"relations", a.relations},
                    {"rho", a.rho},
                    {"latent_dim", a.options.latent_dim},
                    {"density", a.options.density},
                    {"sharpness", a.options.sharpness},
                    {"triples_per_entity", a.options.triples_per_entity},
                    {"kg_temperature", a.options.kg_temperature}}}});
  std::cout << json{{"bundle", c.out.string()}, {"interactions", bundle.interactions.size()},
                    {"triples", bundle.triples.size()}}
                   .dump()
            << "\n";
  return kOk;
}

struct TrainArgs {
  Common common;
  std::string bundle;
};

int cmd_train(const TrainArgs& a) {
  RunConfig c = a.common.resolve();
  if (!a.bundle.empty()) c.bundle = a.bundle;
  if (c.bundle.empty()) throw ConfigError("train needs a bundle (--bundle or bundle= in the config)");
  const auto bundle = read_bundle(c.bundle);
  fs::create_directories(c.out);
  std::ofstream log(c.out / "epochs.jsonl");
  if (!log) throw DataError("cannot write " + (c.out / "epochs.jsonl").string());
  const auto result = train(bundle, c.hyper, c.seed, {&log, true});
  const fs::path checkpoint = c.out / "model.ckpt";
  result.model.save(checkpoint);
  write_manifest(c.out, "train", c, hash_inputs({c.bundle}),
                 {{"outputs", hash_inputs({checkpoint})},
                  {"best_epoch", result.best_epoch},
                  {"epochs_run", result.epochs.size()},
                  {"steps", result.steps}});
  std::cout << json{{"checkpoint", checkpoint.string()},
                    {"best_epoch", result.best_epoch},
                    {"best_val_auc", std::isfinite(result.best_val_auc) ? json(result.best_val_auc) : json(nullptr)}}
                   .dump()
            << "\n";
  return kOk;
}

struct EvalArgs {
  Common common;
  std::string bundle, checkpoint;
  std::string split = "test";
  std::optional<std::vector<std::size_t>> ks;
};

int cmd_eval(const EvalArgs& a) {
  RunConfig c = a.common.resolve();
  if (!a.bundle.empty()) c.bundle = a.bundle;
  if (!a.checkpoint.empty()) c.checkpoint = a.checkpoint;
  if (a.ks) c.ks = *a.ks;
  if (c.bundle.empty() || c.checkpoint.empty()) throw ConfigError("eval needs --bundle and --checkpoint");
  const auto bundle = read_bundle(c.bundle);
  const auto model = MkrModel::load(c.checkpoint);
  const auto report = evaluate(model, bundle, parse_split(a.split), c.ks);
  fs::create_directories(c.out);
  write_text(c.out / "metrics.json", report.to_json().dump(2) + "\n");
  write_text(c.out / "metrics.csv", report.to_csv());
  write_manifest(c.out, "eval", c, hash_inputs({c.bundle, c.checkpoint}), {{"split", a.split}});
  std::cout << report.to_json().dump() << "\n";
  return kOk;
}

int cmd_sweep(const Common& common, const std::string& bundle_flag) {
  RunConfig c = common.resolve();
  if (!bundle_flag.empty()) c.bundle = bundle_flag;
  if (c.bundle.empty()) throw ConfigError("sweep needs a bundle (--bundle or bundle= in the config)");
  struct Cell {
    std::string axis;
    double value;
  };
  std::vector<Cell> cells;
  for (auto d : c.sweep_d) cells.push_back({"d", static_cast<double>(d)});
  for (auto t : c.sweep_t) cells.push_back({"t", static_cast<double>(t)});
  for (auto r : c.sweep_kg_ratio) cells.push_back({"kg_ratio", r});
  for (auto r : c.sweep_train_ratio) cells.push_back({"train_ratio", r});
  if (cells.empty()) throw ConfigError("sweep needs at least one of sweep_d, sweep_t, sweep_kg_ratio, sweep_train_ratio");

  const auto base = read_bundle(c.bundle);
  fs::create_directories(c.out);
  write_manifest(c.out, "sweep", c, hash_inputs({c.bundle}));
  std::ofstream csv(c.out / "sweep.csv");
  if (!csv) throw DataError("cannot write " + (c.out / "sweep.csv").string());
  csv.precision(10);
  csv << "axis,value,seeds,auc,acc\n" << std::flush;
  for (const auto& cell : cells) {
    double auc_sum = 0, acc_sum = 0;
    for (std::size_t r = 0; r < c.seeds; ++r) {
      const std::uint64_t seed = c.seed + r;
      HyperParams hp = c.hyper;
      const DatasetBundle* bundle = &base;
      DatasetBundle sub;
      if (cell.axis == "d") hp.dim = static_cast<std::size_t>(cell.value);
      else if (cell.axis == "t") hp.rs_steps = static_cast<std::size_t>(cell.value);
      else if (cell.axis == "kg_ratio") bundle = &(sub = subsample_triples(base, cell.value, seed));
      else bundle = &(sub = subsample_training(base, cell.value, seed));
      const auto result = train(*bundle, hp, seed, {nullptr, true});
      const auto report = evaluate(result.model, *bundle, Split::test, {});
      auc_sum += report.auc;
      acc_sum += report.acc;
    }
    const double n = static_cast<double>(c.seeds);
    csv << cell.axis << ',' << cell.value << ',' << c.seeds << ',' << auc_sum / n << ',' << acc_sum / n << '\n'
        << std::flush;
    std::cout << json{{"axis", cell.axis}, {"value", cell.value}, {"auc", auc_sum / n}, {"acc", acc_sum / n}}.dump()
              << std::endl;
  }
  return kOk;
}

struct VerifyArgs {
  Common common;
  std::size_t trials = 1000;
  std::size_t gradient_seeds = 20;
  bool inject_fault = false;
};

int cmd_verify(const VerifyArgs& a) {
  const RunConfig c = a.common.resolve();
  std::vector<CheckResult> results;
  for (std::size_t L : {1, 2, 3})
    for (std::size_t d : {1, 2}) results.push_back(check_theorem1(L, d));
  for (std::size_t L : {1, 2})
    for (std::size_t d : {1, 2}) results.push_back(check_symbolic_consistency(L, d, 50, c.seed));
  UnitFunction unit = cross_compress_apply;
  if (a.inject_fault) {
    // Flip the sign of the v (e . w_vv) term.
    unit = [](const Tensor& v, const Tensor& e, const CrossCompressUnit& u, const ParameterStore& s) {
      auto out = cross_compress_apply(v, e, u, s);
      const Tensor& w = s.value(u.w_vv);
      double ew = 0;
      for (std::size_t i = 0; i < e.size(); ++i) ew += e[i] * w[i];
      for (std::size_t i = 0; i < out.first.size(); ++i) out.first[i] -= 2 * v[i] * ew;
      return out;
    };
  }
  for (std::size_t d : {1, 2, 8}) {
    results.push_back(check_prop1(a.trials, d, c.seed + d));
    results.push_back(check_prop2(a.trials, d, c.seed + d));
    results.push_back(check_prop3(a.trials, d, c.seed + d, 1e-12, unit));
  }
  for (std::size_t s = 0; s < a.gradient_seeds; ++s) {
    for (Variant v : {Variant::full, Variant::dcn, Variant::stitch, Variant::none}) {
      GradientCheckOptions opt;
      opt.variant = v;
      results.push_back(check_gradients(c.seed + s, opt));
    }
  }
  std::size_t failed = 0;
  json suite = json::array();
  for (const auto& r : results) {
    failed += !r.passed;
    suite.push_back(r.to_json());
    std::cout << r.to_json().dump() << "\n";
  }
  if (!a.common.out.empty()) {
    fs::create_directories(c.out);
    write_text(c.out / "verify.json",
               json{{"checks", suite}, {"failed", failed}, {"total", results.size()}}.dump(2) + "\n");
    write_manifest(c.out, "verify", c, json::object(), {{"inject_fault", a.inject_fault}});
  }
  std::cerr << results.size() - failed << "/" << results.size() << " checks passed\n";
  return failed ? kVerify : kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-task recommendation with knowledge graph embedding"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);

  PreprocessArgs pre;
  auto* p = app.add_subcommand("preprocess", "labelled ratings + KG + alignment -> processed bundle");
  pre.common.attach(p);
  p->add_option("--interactions", pre.interactions, "user<TAB>item<TAB>rating")->required()->check(CLI::ExistingFile);
  p->add_option("--kg", pre.kg, "head<TAB>relation<TAB>tail")->required()->check(CLI::ExistingFile);
  p->add_option("--alignment", pre.alignment, "item<TAB>entity")->required()->check(CLI::ExistingFile);
  p->add_option("--threshold", pre.threshold, "ratings at or above become positives; omit for implicit input");

  GenerateArgs gen;
  auto* g = app.add_subcommand("generate", "write a synthetic bundle with planted RS/KG correlation");
  gen.common.attach(g);
  g->add_option("--users", gen.users);
  g->add_option("--items", gen.items);
  g->add_option("--entities", gen.entities);
  g->add_option("--relations", gen.relations);
  g->add_option("--rho", gen.rho, "item/entity latent correlation in [0, 1]");
  g->add_option("--latent-dim", gen.options.latent_dim);
  g->add_option("--density", gen.options.density);
  g->add_option("--sharpness", gen.options.sharpness);
  g->add_option("--triples-per-entity", gen.options.triples_per_entity);
  g->add_option("--kg-temperature", gen.options.kg_temperature);

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "train a model on a bundle");
  tr.common.attach(t);
  t->add_option("--bundle", tr.bundle, "processed bundle directory");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "evaluate a checkpoint");
  ev.common.attach(e);
  e->add_option("--bundle", ev.bundle, "processed bundle directory");
  e->add_option("--checkpoint", ev.checkpoint, "model checkpoint");
  e->add_option("--split", ev.split, "train, validation or test")->check(CLI::IsMember({"train", "validation", "test"}));
  e->add_option("--ks", ev.ks, "cut-offs for precision/recall@K")->delimiter(',');

  Common sweep;
  std::string sweep_bundle;
  auto* s = app.add_subcommand("sweep", "train and evaluate over the configured axes");
  sweep.attach(s);
  s->add_option("--bundle", sweep_bundle, "processed bundle directory");

  VerifyArgs ver;
  auto* v = app.add_subcommand("verify", "run the symbolic and numeric checks of the model's algebra");
  ver.common.attach(v);
  v->add_option("--trials", ver.trials, "random inputs per proposition check");
  v->add_option("--gradient-seeds", ver.gradient_seeds, "seeds per variant for the gradient check");
  v->add_flag("--inject-fault", ver.inject_fault, "swap in a deliberately wrong unit to see the checks fail");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*p) return cmd_preprocess(pre);
    if (*g) return cmd_generate(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*s) return cmd_sweep(sweep, sweep_bundle);
    if (*v) return cmd_verify(ver);
  } catch (const DivergenceError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kDiverged;
  } catch (const DataError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kData;
  } catch (const BudgetError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const std::invalid_argument& err) {  // ConfigError, DimensionError
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const std::logic_error& err) {  // ContractError
    std::cerr << "error: " << err.what() << "\n";
    return kUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return kData;
  }
  return kUsage;
}
