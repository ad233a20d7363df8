#pragma once

// Run configuration: hyperparameters plus paths, seed and sweep axes, read
// from a flat key=value file.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "mkr/data.hpp"
#include "mkr/model.hpp"

namespace mkr {

/// Raised for malformed or unknown configuration entries.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

template <typename T>
std::vector<T> parse_list(const std::string& key, const std::string& value) {
  std::vector<T> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    std::istringstream is(item);
    T x{};
    is >> x;
    if (!is || !is.eof()) throw ConfigError("'" + key + "': cannot parse list element '" + item + "'");
    out.push_back(x);
  }
  return out;
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < xs.size(); ++i) os << (i ? "," : "") << xs[i];
  return os.str();
}

}  // namespace detail

struct RunConfig {
  HyperParams hyper;
  std::uint64_t seed = 1;
  std::filesystem::path bundle;
  std::filesystem::path out = "out";
  std::filesystem::path checkpoint;
  std::vector<std::size_t> ks;
  std::optional<double> threshold;  // preprocessing
  std::size_t seeds = 1;            // replicates per sweep cell
  std::vector<std::size_t> sweep_d;
  std::vector<std::size_t> sweep_t;
  std::vector<double> sweep_kg_ratio;
  std::vector<double> sweep_train_ratio;

  void set(const std::string& key, const std::string& raw) {
    const std::string value = detail::trim(raw);
    try {
      if (hyper.set(key, value)) return;
    } catch (const ContractError& e) {
      throw ConfigError(e.what());
    }
    if (key == "seed") seed = std::stoull(value);
    else if (key == "bundle") bundle = value;
    else if (key == "out") out = value;
    else if (key == "checkpoint") checkpoint = value;
    else if (key == "ks") ks = detail::parse_list<std::size_t>(key, value);
    else if (key == "threshold") threshold = value.empty() ? std::nullopt : std::optional<double>(std::stod(value));
    else if (key == "seeds") seeds = std::stoull(value);
    else if (key == "sweep_d") sweep_d = detail::parse_list<std::size_t>(key, value);
    else if (key == "sweep_t") sweep_t = detail::parse_list<std::size_t>(key, value);
    else if (key == "sweep_kg_ratio") sweep_kg_ratio = detail::parse_list<double>(key, value);
    else if (key == "sweep_train_ratio") sweep_train_ratio = detail::parse_list<double>(key, value);
    else throw ConfigError("unknown configuration key '" + key + "'");
  }

  void validate() const {
    try {
      hyper.validate();
    } catch (const ContractError& e) {
      throw ConfigError(e.what());
    }
    if (seeds == 0) throw ConfigError("seeds must be at least 1");
    for (std::size_t k : ks)
      if (k == 0) throw ConfigError("ks entries must be positive");
    for (std::size_t d : sweep_d)
      if (d == 0) throw ConfigError("sweep_d entries must be positive");
    for (std::size_t t : sweep_t)
      if (t == 0) throw ConfigError("sweep_t entries must be positive");
    for (double r : sweep_kg_ratio)
      if (!(r > 0 && r <= 1)) throw ConfigError("sweep_kg_ratio entries must lie in (0, 1]");
    for (double r : sweep_train_ratio)
      if (!(r > 0 && r <= 1)) throw ConfigError("sweep_train_ratio entries must lie in (0, 1]");
  }

  std::map<std::string, std::string> to_map() const {
    auto m = hyper.to_map();
    m["seed"] = std::to_string(seed);
    m["bundle"] = bundle.string();
    m["out"] = out.string();
    m["checkpoint"] = checkpoint.string();
    m["ks"] = detail::join(ks);
    if (threshold) {
      std::ostringstream os;
      os.precision(17);
      os << *threshold;
      m["threshold"] = os.str();
    } else {
      m["threshold"] = "";
    }
    m["seeds"] = std::to_string(seeds);
    m["sweep_d"] = detail::join(sweep_d);
    m["sweep_t"] = detail::join(sweep_t);
    m["sweep_kg_ratio"] = detail::join(sweep_kg_ratio);
    m["sweep_train_ratio"] = detail::join(sweep_train_ratio);
    return m;
  }

  std::string to_text() const {
    std::ostringstream os;
    for (const auto& [k, v] : to_map()) os << k << '=' << v << '\n';
    return os.str();
  }
};

/// Apply a key=value file on top of `config`. Blank lines and lines starting
/// with '#' are ignored.
inline void apply_config_text(RunConfig& config, const std::string& text, const std::string& origin = "config") {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const std::string t = detail::trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected key=value");
    try {
      config.set(detail::trim(t.substr(0, eq)), t.substr(eq + 1));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const std::logic_error&) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": bad value for '" + detail::trim(t.substr(0, eq)) + "'");
    }
  }
}

inline void apply_config_file(RunConfig& config, const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  apply_config_text(config, ss.str(), path.string());
}

}  // namespace mkr
