#pragma once

// Run configuration as a "key = value" text file. Blank lines and lines
// starting with '#' are ignored; unknown keys are rejected.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <sstream>
#include <string>
#include <string_view>

#include "fmfa/hyperparams.hpp"
#include "fmfa/objectives.hpp"
#include "fmfa/synth.hpp"

namespace fmfa {

struct TrainerSettings {
  std::size_t epochs = 60;
  double lr = 0.005;
  std::size_t batch_size = 4;
  std::uint64_t seed = 0;
  bool cosine_decay = true;
  std::size_t embed_dim = 0;  // 0 means the raw feature width
  LossSwitches switches;
  SynthConfig data;
};

struct RunConfig {
  HyperParams hp;
  TrainerSettings trainer;

  void validate() const {
    hp.validate();
    trainer.data.validate();
    if (trainer.epochs < 1) throw Error("RunConfig: epochs must be at least 1");
    if (!(trainer.lr > 0.0)) throw Error("RunConfig: lr must be positive");
    if (trainer.batch_size < 2) throw Error("RunConfig: batch_size must be at least 2");
    if (trainer.embed_dim == 1) throw Error("RunConfig: embed_dim must be at least 2");
    for (double w : {trainer.switches.global_weight, trainer.switches.efa_weight, trainer.switches.id_weight})
      if (!(w >= 0.0)) throw Error("RunConfig: component weights must be non-negative");
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline double parse_real(std::string_view v, std::string_view key) {
  double out = 0.0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size() || !std::isfinite(out))
    throw Error(concat("config: '", key, "' expects a real number, got '", v, "'"));
  return out;
}

inline std::uint64_t parse_count(std::string_view v, std::string_view key) {
  std::uint64_t out = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), out);
  if (res.ec != std::errc{} || res.ptr != v.data() + v.size())
    throw Error(concat("config: '", key, "' expects a non-negative integer, got '", v, "'"));
  return out;
}

inline bool parse_switch(std::string_view v, std::string_view key) {
  if (v == "on" || v == "true" || v == "1") return true;
  if (v == "off" || v == "false" || v == "0") return false;
  throw Error(concat("config: '", key, "' expects on/off, got '", v, "'"));
}

inline GlobalLoss parse_global(std::string_view v) {
  if (v == "asdm") return GlobalLoss::asdm;
  if (v == "sdm") return GlobalLoss::sdm;
  if (v == "none") return GlobalLoss::none;
  throw Error(concat("config: 'global_loss' expects asdm, sdm or none, got '", v, "'"));
}

using Setter = std::function<void(RunConfig&, std::string_view, std::string_view)>;

inline const std::map<std::string, Setter, std::less<>>& config_setters() {
  static const std::map<std::string, Setter, std::less<>> setters = {
      {"tau1", [](RunConfig& c, auto v, auto k) { c.hp.tau1 = parse_real(v, k); }},
      {"tau2", [](RunConfig& c, auto v, auto k) { c.hp.tau2 = parse_real(v, k); }},
      {"alpha", [](RunConfig& c, auto v, auto k) { c.hp.alpha = parse_real(v, k); }},
      {"lambda", [](RunConfig& c, auto v, auto k) { c.hp.lambda = parse_real(v, k); }},
      {"sigma",
       [](RunConfig& c, auto v, auto k) {
         if (v == "auto") {
           c.hp.sigma.reset();
         } else {
           c.hp.sigma = parse_real(v, k);
         }
       }},
      {"epsilon", [](RunConfig& c, auto v, auto k) { c.hp.epsilon = parse_real(v, k); }},
      {"margin_text_joint", [](RunConfig& c, auto v, auto k) { c.hp.margin_text_joint = parse_real(v, k); }},
      {"margin_image_joint", [](RunConfig& c, auto v, auto k) { c.hp.margin_image_joint = parse_real(v, k); }},
      {"epochs", [](RunConfig& c, auto v, auto k) { c.trainer.epochs = parse_count(v, k); }},
      {"lr", [](RunConfig& c, auto v, auto k) { c.trainer.lr = parse_real(v, k); }},
      {"batch_size", [](RunConfig& c, auto v, auto k) { c.trainer.batch_size = parse_count(v, k); }},
      {"seed", [](RunConfig& c, auto v, auto k) { c.trainer.seed = parse_count(v, k); }},
      {"cosine_decay", [](RunConfig& c, auto v, auto k) { c.trainer.cosine_decay = parse_switch(v, k); }},
      {"embed_dim", [](RunConfig& c, auto v, auto k) { c.trainer.embed_dim = parse_count(v, k); }},
      {"global_loss", [](RunConfig& c, auto v, auto) { c.trainer.switches.global = parse_global(v); }},
      {"efa", [](RunConfig& c, auto v, auto k) { c.trainer.switches.efa = parse_switch(v, k); }},
      {"id", [](RunConfig& c, auto v, auto k) { c.trainer.switches.id = parse_switch(v, k); }},
      {"global_weight", [](RunConfig& c, auto v, auto k) { c.trainer.switches.global_weight = parse_real(v, k); }},
      {"efa_weight", [](RunConfig& c, auto v, auto k) { c.trainer.switches.efa_weight = parse_real(v, k); }},
      {"id_weight", [](RunConfig& c, auto v, auto k) { c.trainer.switches.id_weight = parse_real(v, k); }},
      {"num_identities", [](RunConfig& c, auto v, auto k) { c.trainer.data.num_identities = parse_count(v, k); }},
      {"samples_per_id", [](RunConfig& c, auto v, auto k) { c.trainer.data.samples_per_id = parse_count(v, k); }},
      {"dim", [](RunConfig& c, auto v, auto k) { c.trainer.data.dim = parse_count(v, k); }},
      {"tokens", [](RunConfig& c, auto v, auto k) { c.trainer.data.tokens = parse_count(v, k); }},
      {"patches", [](RunConfig& c, auto v, auto k) { c.trainer.data.patches = parse_count(v, k); }},
      {"noise", [](RunConfig& c, auto v, auto k) { c.trainer.data.noise_sigma = parse_real(v, k); }},
      {"data_seed", [](RunConfig& c, auto v, auto k) { c.trainer.data.seed = parse_count(v, k); }},
  };
  return setters;
}

}  // namespace detail

/// Applies one key/value pair to `cfg`.
inline void set_config_value(RunConfig& cfg, std::string_view key, std::string_view value) {
  const auto& setters = detail::config_setters();
  const auto it = setters.find(key);
  if (it == setters.end()) throw Error(detail::concat("config: unknown key '", key, "'"));
  it->second(cfg, detail::trim(value), key);
}

inline RunConfig parse_run_config(std::string_view text, RunConfig cfg = {}) {
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const auto line = detail::trim(text.substr(start, end - start));
    start = end + 1;
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos)
      throw Error(detail::concat("config line ", line_no, ": expected 'key = value'"));
    try {
      set_config_value(cfg, detail::trim(line.substr(0, eq)), line.substr(eq + 1));
    } catch (const Error& e) {
      throw Error(detail::concat("config line ", line_no, ": ", e.what()));
    }
  }
  cfg.validate();
  return cfg;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_run_config(text);
}

/// Serialises every key, so that parse_run_config(to_text(c)) reproduces c.
inline std::string to_text(const RunConfig& c) {
  std::ostringstream os;
  os.precision(17);
  os << "tau1 = " << c.hp.tau1 << '\n'
     << "tau2 = " << c.hp.tau2 << '\n'
     << "alpha = " << c.hp.alpha << '\n'
     << "lambda = " << c.hp.lambda << '\n';
  if (c.hp.sigma) {
    os << "sigma = " << *c.hp.sigma << '\n';
  } else {
    os << "sigma = auto\n";
  }
  os << "epsilon = " << c.hp.epsilon << '\n'
     << "margin_text_joint = " << c.hp.margin_text_joint << '\n'
     << "margin_image_joint = " << c.hp.margin_image_joint << '\n'
     << "epochs = " << c.trainer.epochs << '\n'
     << "lr = " << c.trainer.lr << '\n'
     << "batch_size = " << c.trainer.batch_size << '\n'
     << "seed = " << c.trainer.seed << '\n'
     << "cosine_decay = " << (c.trainer.cosine_decay ? "on" : "off") << '\n'
     << "embed_dim = " << c.trainer.embed_dim << '\n'
     << "global_loss = " << to_string(c.trainer.switches.global) << '\n'
     << "efa = " << (c.trainer.switches.efa ? "on" : "off") << '\n'
     << "id = " << (c.trainer.switches.id ? "on" : "off") << '\n'
     << "global_weight = " << c.trainer.switches.global_weight << '\n'
     << "efa_weight = " << c.trainer.switches.efa_weight << '\n'
     << "id_weight = " << c.trainer.switches.id_weight << '\n'
     << "num_identities = " << c.trainer.data.num_identities << '\n'
     << "samples_per_id = " << c.trainer.data.samples_per_id << '\n'
     << "dim = " << c.trainer.data.dim << '\n'
     << "tokens = " << c.trainer.data.tokens << '\n'
     << "patches = " << c.trainer.data.patches << '\n'
     << "noise = " << c.trainer.data.noise_sigma << '\n'
     << "data_seed = " << c.trainer.data.seed << '\n';
  return os.str();
}

}  // namespace fmfa
