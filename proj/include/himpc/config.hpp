#pragma once

// Training configuration and its flat key-value file format:
//
//   # comment
//   h = 64
//   loss = himpc-h
//   levels = 1,2,3

#include "himpc/core.hpp"
#include "himpc/loss.hpp"
#include "himpc/model.hpp"

#include <json.hpp>

#include <array>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>

namespace himpc {

struct TrainConfig {
  int frames = 6;       // F
  int stride = 0;       // window stride; 0 = F
  int embed = 256;      // h
  int heads = 8;        // M
  double eps = 0.6;
  int min_samples = 2;
  double lr = 0.00035;
  int batch_size = 256;
  int max_epoch = 300;
  int max_patience = 50;
  std::uint64_t seed = 0;
  bool center_root = false;
  bool heterogeneous_heads = false;
  bool stop_grad_weights = true;
  bool normalize_instances = false;
  LossVariant loss = LossVariant::himpc_h;
  Activation activation = Activation::relu;
  std::array<bool, kLevels> levels{true, true, true};

  int window_stride() const { return stride > 0 ? stride : frames; }
  double tau() const { return Temperature::for_embedding(embed).tau; }

  bool operator==(const TrainConfig&) const = default;
};

inline void validate(const TrainConfig& c) {
  require(c.frames >= 2, "f must be >= 2");
  require(c.stride >= 0, "stride must be >= 0");
  require(c.embed >= 1, "h must be >= 1");
  require(c.heads >= 1 || c.loss == LossVariant::dpc, "m must be >= 1 for meta-prototype losses");
  require(c.eps > 0.0, "eps must be positive");
  require(c.min_samples >= 1, "min_samples must be >= 1");
  require(c.lr > 0.0, "lr must be positive");
  require(c.batch_size >= 1, "batch_size must be >= 1");
  require(c.max_epoch >= 0, "max_epoch must be >= 0");
  require(c.max_patience >= 1, "max_patience must be >= 1");
  require(c.levels[0] || c.levels[1] || c.levels[2], "at least one level must be active");
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& v) {
  T out{};
  const auto* end = v.data() + v.size();
  auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ValidationError("bad value for '" + key + "': '" + v + "'");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ValidationError("bad boolean for '" + key + "': '" + v + "'");
}

inline std::array<bool, kLevels> parse_levels(const std::string& v) {
  std::array<bool, kLevels> out{false, false, false};
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item == "1" || item == "2" || item == "3")
      out[static_cast<std::size_t>(item[0] - '1')] = true;
    else
      throw ValidationError("bad level '" + item + "' (expected 1, 2 or 3)");
  }
  return out;
}

inline std::string levels_string(const std::array<bool, kLevels>& lv) {
  std::string s;
  for (int l = 0; l < kLevels; ++l)
    if (lv[l]) s += (s.empty() ? "" : ",") + std::to_string(l + 1);
  return s;
}

}  // namespace detail

/// Sets one field by its key-file name; dashes and underscores are
/// interchangeable.
inline void set_config_value(TrainConfig& c, std::string key, const std::string& raw) {
  for (auto& ch : key)
    if (ch == '-') ch = '_';
  const std::string v = detail::trim(raw);
  using detail::parse_bool;
  using detail::parse_number;
  if (key == "f") c.frames = parse_number<int>(key, v);
  else if (key == "stride") c.stride = parse_number<int>(key, v);
  else if (key == "h") c.embed = parse_number<int>(key, v);
  else if (key == "m") c.heads = parse_number<int>(key, v);
  else if (key == "eps") c.eps = parse_number<double>(key, v);
  else if (key == "min_samples") c.min_samples = parse_number<int>(key, v);
  else if (key == "lr") c.lr = parse_number<double>(key, v);
  else if (key == "batch_size") c.batch_size = parse_number<int>(key, v);
  else if (key == "max_epoch") c.max_epoch = parse_number<int>(key, v);
  else if (key == "max_patience") c.max_patience = parse_number<int>(key, v);
  else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, v);
  else if (key == "center_root") c.center_root = parse_bool(key, v);
  else if (key == "heterogeneous_heads") c.heterogeneous_heads = parse_bool(key, v);
  else if (key == "stop_grad_weights") c.stop_grad_weights = parse_bool(key, v);
  else if (key == "normalize_instances") c.normalize_instances = parse_bool(key, v);
  else if (key == "loss") c.loss = loss_variant_from_string(v);
  else if (key == "activation") c.activation = activation_from_string(v);
  else if (key == "levels") c.levels = detail::parse_levels(v);
  else throw ValidationError("unknown config key '" + key + "'");
}

inline void apply_config_text(TrainConfig& c, std::istream& is, const std::string& name = "<config>") {
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ValidationError(name + ":" + std::to_string(lineno) + ": expected key = value");
    try {
      set_config_value(c, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const ValidationError& e) {
      throw ValidationError(name + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline TrainConfig load_config(const std::string& path, TrainConfig base = {}) {
  std::ifstream is(path);
  if (!is) throw ValidationError("cannot open config file " + path);
  apply_config_text(base, is, path);
  return base;
}

/// Every field as key -> string, in key-file syntax.
inline std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& c) {
  auto num = [](double d) {
    std::ostringstream os;
    os.precision(17);
    os << d;
    return os.str();
  };
  auto b = [](bool x) { return std::string(x ? "true" : "false"); };
  return {{"f", std::to_string(c.frames)},
          {"stride", std::to_string(c.stride)},
          {"h", std::to_string(c.embed)},
          {"m", std::to_string(c.heads)},
          {"eps", num(c.eps)},
          {"min_samples", std::to_string(c.min_samples)},
          {"lr", num(c.lr)},
          {"batch_size", std::to_string(c.batch_size)},
          {"max_epoch", std::to_string(c.max_epoch)},
          {"max_patience", std::to_string(c.max_patience)},
          {"seed", std::to_string(c.seed)},
          {"center_root", b(c.center_root)},
          {"heterogeneous_heads", b(c.heterogeneous_heads)},
          {"stop_grad_weights", b(c.stop_grad_weights)},
          {"normalize_instances", b(c.normalize_instances)},
          {"loss", to_string(c.loss)},
          {"activation", to_string(c.activation)},
          {"levels", detail::levels_string(c.levels)}};
}

inline std::string config_to_text(const TrainConfig& c) {
  std::string out;
  for (const auto& [k, v] : config_entries(c)) out += k + " = " + v + "\n";
  return out;
}

inline nlohmann::json config_to_json(const TrainConfig& c) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [k, v] : config_entries(c)) j[k] = v;
  return j;
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  for (const auto& [k, v] : j.items()) set_config_value(c, k, v.get<std::string>());
  return c;
}

}  // namespace himpc
