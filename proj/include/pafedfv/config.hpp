#pragma once

// Experiment configuration: a flat, typed key-value text format with
// [section] headers and '#' comments. Every key has a default; unknown keys,
// repeated keys and malformed values are errors reported with their line.
//
//   [training]
//   lr = 0.01
//   [data]
//   classes = 20, 20, 20, 10     # one value per client, or one for all

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "pafedfv/aggregation.hpp"
#include "pafedfv/client.hpp"
#include "pafedfv/errors.hpp"
#include "pafedfv/losses.hpp"
#include "pafedfv/sim.hpp"
#include "pafedfv/synth.hpp"
#include "pafedfv/text_io.hpp"

namespace pafedfv {

enum class ExperimentMode { Solo, FedAvg, PAFedFV };

inline const char* to_string(ExperimentMode m) {
  switch (m) {
    case ExperimentMode::Solo: return "solo";
    case ExperimentMode::FedAvg: return "fedavg";
    case ExperimentMode::PAFedFV: return "pafedfv";
  }
  return "?";
}

inline ExperimentMode parse_mode(std::string_view s) {
  if (s == "solo") return ExperimentMode::Solo;
  if (s == "fedavg") return ExperimentMode::FedAvg;
  if (s == "pafedfv") return ExperimentMode::PAFedFV;
  throw ConfigError("unknown mode '" + std::string(s) + "' (expected solo, fedavg or pafedfv)");
}

// Toggle value; `Auto` follows the mode (on for pafedfv, off for fedavg).
enum class Toggle { Auto, On, Off };

inline const char* to_string(Toggle t) {
  switch (t) {
    case Toggle::Auto: return "auto";
    case Toggle::On: return "on";
    case Toggle::Off: return "off";
  }
  return "?";
}

inline Toggle parse_toggle(std::string_view s) {
  if (s == "auto") return Toggle::Auto;
  if (s == "on" || s == "true" || s == "1") return Toggle::On;
  if (s == "off" || s == "false" || s == "0") return Toggle::Off;
  throw ConfigError("expected on, off or auto, got '" + std::string(s) + "'");
}

enum class FedAvgWeighting { Samples, Uniform };

struct ExperimentConfig {
  ExperimentMode mode = ExperimentMode::PAFedFV;
  std::uint64_t seed = 1;
  std::string output_dir = "out";

  Toggle async = Toggle::Auto;
  Toggle total_loss = Toggle::Auto;
  Toggle personalized = Toggle::Auto;

  // training
  double lr = 0.01;
  std::size_t epochs = 3;
  std::size_t rounds = 10;
  std::size_t batch = 16;
  double center_lr = 0.5;

  LossWeights loss;

  // aggregation
  double gamma = 0.5;
  double clamp_epsilon = 1e-6;
  std::size_t probe_count = 32;
  FedAvgWeighting fedavg_weighting = FedAvgWeighting::Samples;

  ClientModelConfig model;

  // sim
  std::vector<Ticks> local_step_duration{1};
  std::vector<Ticks> upload_latency{10};
  std::vector<Ticks> download_latency{10};
  Ticks server_compute_time = 5;
  Ticks async_step_duration = 2;
  Ticks latency_jitter = 0;

  // data; list-valued keys take one entry per client or a single shared entry
  std::size_t clients = 4;
  std::vector<std::size_t> classes{20, 20, 20, 10};
  std::vector<std::size_t> samples_per_class{12};
  std::vector<double> rotation_deg{0.0, 20.0, 40.0, 60.0};
  std::vector<double> offset{0.0, 0.5, 1.0, 1.5};
  std::vector<double> noise_scale{1.0, 1.1, 0.9, 1.2};
  double split = 0.8;
  std::size_t identity_dim = 8;
  double prototype_scale = 1.0;
  double identity_noise = 0.25;
  double nuisance_noise = 1.0;
  std::size_t probe_pool = 128;
  std::vector<std::size_t> client_subset;  // empty: every client

  bool async_on() const { return resolve(async); }
  bool total_loss_on() const { return mode == ExperimentMode::Solo ? total_loss != Toggle::Off : resolve(total_loss); }
  bool personalized_on() const { return resolve(personalized); }

  LossWeights effective_loss_weights() const { return total_loss_on() ? loss : LossWeights::cross_entropy_only(); }

  // Indices of the generated clients that take part, in order.
  std::vector<std::size_t> participants() const {
    if (!client_subset.empty()) return client_subset;
    std::vector<std::size_t> all(clients);
    for (std::size_t i = 0; i < clients; ++i) all[i] = i;
    return all;
  }

  void validate() const;

private:
  bool resolve(Toggle t) const {
    if (t == Toggle::Auto) return mode == ExperimentMode::PAFedFV;
    return t == Toggle::On;
  }
};

namespace detail {

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ", ";
    if constexpr (std::is_floating_point_v<T>) s += format_double(v[i]);
    else s += std::to_string(v[i]);
  }
  return s;
}

template <typename T>
std::vector<T> parse_list(std::string_view s, bool allow_empty = false) {
  std::vector<T> out;
  if (trim(s).empty()) {
    if (allow_empty) return out;
    throw ConfigError("expected a value");
  }
  for (auto cell : split(s, ',')) {
    if constexpr (std::is_floating_point_v<T>) out.push_back(parse_double(cell));
    else if constexpr (std::is_signed_v<T>) {
      if (!cell.empty() && cell.front() == '-') throw ConfigError("expected a non-negative integer, got '" + std::string(cell) + "'");
      out.push_back(static_cast<T>(parse_u64(cell)));
    } else out.push_back(static_cast<T>(parse_u64(cell)));
  }
  return out;
}

inline bool parse_bool(std::string_view s) {
  if (s == "true" || s == "on" || s == "1") return true;
  if (s == "false" || s == "off" || s == "0") return false;
  throw ConfigError("expected true or false, got '" + std::string(s) + "'");
}

}  // namespace detail

struct ConfigKey {
  std::string section;
  std::string key;
  std::string doc;
  std::function<std::string(const ExperimentConfig&)> get;
  std::function<void(ExperimentConfig&, std::string_view)> set;

  std::string name() const { return section + "." + key; }
};

// The complete key table; its order is the canonical echo order.
inline const std::vector<ConfigKey>& config_schema() {
  using C = ExperimentConfig;
  using detail::join;
  using detail::parse_list;
  auto num = [](auto member) {
    return std::pair{std::function<std::string(const C&)>([member](const C& c) {
                       using T = std::remove_cvref_t<decltype(c.*member)>;
                       if constexpr (std::is_floating_point_v<T>) return format_double(c.*member);
                       else return std::to_string(c.*member);
                     }),
                     std::function<void(C&, std::string_view)>([member](C& c, std::string_view v) {
                       using T = std::remove_cvref_t<decltype(c.*member)>;
                       if constexpr (std::is_floating_point_v<T>) c.*member = parse_double(v);
                       else {
                         if (!v.empty() && v.front() == '-') throw ConfigError("expected a non-negative integer, got '" + std::string(v) + "'");
                         c.*member = static_cast<T>(parse_u64(v));
                       }
                     })};
  };
  auto list = [](auto member, bool allow_empty = false) {
    return std::pair{std::function<std::string(const C&)>([member](const C& c) { return join(c.*member); }),
                     std::function<void(C&, std::string_view)>([member, allow_empty](C& c, std::string_view v) {
                       using T = typename std::remove_cvref_t<decltype(c.*member)>::value_type;
                       c.*member = parse_list<T>(v, allow_empty);
                     })};
  };
  auto toggle = [](Toggle C::*member) {
    return std::pair{std::function<std::string(const C&)>([member](const C& c) { return std::string(to_string(c.*member)); }),
                     std::function<void(C&, std::string_view)>([member](C& c, std::string_view v) { c.*member = parse_toggle(v); })};
  };
  auto entry = [](std::string section, std::string key, std::string doc, auto accessors) {
    return ConfigKey{std::move(section), std::move(key), std::move(doc), std::move(accessors.first),
                     std::move(accessors.second)};
  };

  static const std::vector<ConfigKey> schema = [&] {
    std::vector<ConfigKey> s;
    s.push_back(ConfigKey{"experiment", "mode", "solo | fedavg | pafedfv",
                          [](const C& c) { return std::string(to_string(c.mode)); },
                          [](C& c, std::string_view v) { c.mode = parse_mode(v); }});
    s.push_back(entry("experiment", "seed", "master seed for data, init and shuffles", num(&C::seed)));
    s.push_back(ConfigKey{"experiment", "output_dir", "directory that receives run folders",
                          [](const C& c) { return c.output_dir; },
                          [](C& c, std::string_view v) {
                            if (v.empty()) throw ConfigError("output_dir must not be empty");
                            c.output_dir = std::string(v);
                          }});
    s.push_back(entry("toggles", "async", "train the local channel while waiting", toggle(&C::async)));
    s.push_back(entry("toggles", "total_loss", "total loss instead of cross-entropy only", toggle(&C::total_loss)));
    s.push_back(entry("toggles", "personalized", "personalized instead of averaged aggregation", toggle(&C::personalized)));
    s.push_back(entry("training", "lr", "SGD learning rate", num(&C::lr)));
    s.push_back(entry("training", "epochs", "local epochs per round", num(&C::epochs)));
    s.push_back(entry("training", "rounds", "federated rounds", num(&C::rounds)));
    s.push_back(entry("training", "batch", "minibatch size", num(&C::batch)));
    s.push_back(entry("training", "center_lr", "center update rate in [0, 1]", num(&C::center_lr)));
    s.push_back(ConfigKey{"loss", "alpha1", "weight of the channel alignment loss",
                          [](const C& c) { return format_double(c.loss.alpha1); },
                          [](C& c, std::string_view v) { c.loss.alpha1 = parse_double(v); }});
    s.push_back(ConfigKey{"loss", "alpha2", "weight of the fused cross-entropy",
                          [](const C& c) { return format_double(c.loss.alpha2); },
                          [](C& c, std::string_view v) { c.loss.alpha2 = parse_double(v); }});
    s.push_back(ConfigKey{"loss", "alpha3", "weight of the center loss",
                          [](const C& c) { return format_double(c.loss.alpha3); },
                          [](C& c, std::string_view v) { c.loss.alpha3 = parse_double(v); }});
    s.push_back(entry("aggregation", "gamma", "share of the others' weighted mean in [0, 1]", num(&C::gamma)));
    s.push_back(entry("aggregation", "clamp_epsilon", "floor for correlation entries", num(&C::clamp_epsilon)));
    s.push_back(entry("aggregation", "probe_count", "probe items used for correlations", num(&C::probe_count)));
    s.push_back(ConfigKey{"aggregation", "fedavg_weighting", "samples | uniform",
                          [](const C& c) {
                            return std::string(c.fedavg_weighting == FedAvgWeighting::Samples ? "samples" : "uniform");
                          },
                          [](C& c, std::string_view v) {
                            if (v == "samples") c.fedavg_weighting = FedAvgWeighting::Samples;
                            else if (v == "uniform") c.fedavg_weighting = FedAvgWeighting::Uniform;
                            else throw ConfigError("expected samples or uniform, got '" + std::string(v) + "'");
                          }});
    s.push_back(ConfigKey{"model", "local_hidden", "hidden width of the local channel",
                          [](const C& c) { return std::to_string(c.model.local_hidden); },
                          [](C& c, std::string_view v) { c.model.local_hidden = parse_u64(v); }});
    s.push_back(ConfigKey{"model", "fed_hidden", "hidden width of the federated channel",
                          [](const C& c) { return std::to_string(c.model.fed_hidden); },
                          [](C& c, std::string_view v) { c.model.fed_hidden = parse_u64(v); }});
    s.push_back(ConfigKey{"model", "embedding_dim", "channel output and fused embedding width",
                          [](const C& c) { return std::to_string(c.model.embedding_dim); },
                          [](C& c, std::string_view v) { c.model.embedding_dim = parse_u64(v); }});
    s.push_back(entry("sim", "local_step_duration", "ticks per local SGD step (per client)", list(&C::local_step_duration)));
    s.push_back(entry("sim", "upload_latency", "ticks (per client)", list(&C::upload_latency)));
    s.push_back(entry("sim", "download_latency", "ticks (per client)", list(&C::download_latency)));
    s.push_back(entry("sim", "server_compute_time", "ticks", num(&C::server_compute_time)));
    s.push_back(entry("sim", "async_step_duration", "ticks per async step", num(&C::async_step_duration)));
    s.push_back(entry("sim", "latency_jitter", "seeded extra ticks in [0, jitter] per transfer", num(&C::latency_jitter)));
    s.push_back(entry("data", "clients", "number of generated clients", num(&C::clients)));
    s.push_back(entry("data", "classes", "identities per client", list(&C::classes)));
    s.push_back(entry("data", "samples_per_class", "samples per identity", list(&C::samples_per_class)));
    s.push_back(entry("data", "rotation_deg", "pairwise rotation per client", list(&C::rotation_deg)));
    s.push_back(entry("data", "offset", "translation length per client", list(&C::offset)));
    s.push_back(entry("data", "noise_scale", "within-identity noise multiplier per client", list(&C::noise_scale)));
    s.push_back(entry("data", "split", "train fraction of identities (floor)", num(&C::split)));
    s.push_back(entry("data", "identity_dim", "dimension of the identity subspace", num(&C::identity_dim)));
    s.push_back(entry("data", "prototype_scale", "spread of identity prototypes", num(&C::prototype_scale)));
    s.push_back(entry("data", "identity_noise", "within-identity noise in the identity subspace", num(&C::identity_noise)));
    s.push_back(entry("data", "nuisance_noise", "within-identity noise elsewhere", num(&C::nuisance_noise)));
    s.push_back(entry("data", "probe_pool", "size of the server probe pool", num(&C::probe_pool)));
    s.push_back(entry("data", "client_subset", "participating client indices; empty for all", list(&C::client_subset, true)));
    return s;
  }();
  return schema;
}

inline const ConfigKey& find_config_key(std::string_view name) {
  for (const auto& k : config_schema()) {
    if (k.name() == name) return k;
  }
  throw ConfigError("unknown key '" + std::string(name) + "'");
}

inline void ExperimentConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (rounds == 0) fail("training.rounds must be >= 1");
  if (batch == 0) fail("training.batch must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) fail("training.lr must be finite and >= 0");
  if (!(center_lr >= 0.0 && center_lr <= 1.0)) fail("training.center_lr must lie in [0, 1]");
  effective_loss_weights().validate();
  loss.validate();
  AggregationConfig{gamma, clamp_epsilon}.validate();
  if (probe_count == 0) fail("aggregation.probe_count must be >= 1");
  if (probe_pool < probe_count) fail("data.probe_pool must be >= aggregation.probe_count");
  if (model.local_hidden == 0 || model.fed_hidden == 0 || model.embedding_dim == 0) fail("model widths must be >= 1");
  if (clients == 0) fail("data.clients must be >= 1");
  auto check_len = [&](std::size_t n, const char* key) {
    if (n != 1 && n != clients) fail(std::string(key) + " needs 1 or data.clients entries");
  };
  check_len(classes.size(), "data.classes");
  check_len(samples_per_class.size(), "data.samples_per_class");
  check_len(rotation_deg.size(), "data.rotation_deg");
  check_len(offset.size(), "data.offset");
  check_len(noise_scale.size(), "data.noise_scale");
  const std::size_t n_part = participants().size();
  for (std::size_t i = 0; i < client_subset.size(); ++i) {
    if (client_subset[i] >= clients) fail("data.client_subset entry out of range");
    for (std::size_t j = 0; j < i; ++j) {
      if (client_subset[j] == client_subset[i]) fail("data.client_subset has duplicates");
    }
  }
  for (const auto* v : {&local_step_duration, &upload_latency, &download_latency}) {
    if (v->size() != 1 && v->size() != clients) fail("sim per-client durations need 1 or data.clients entries");
  }
  if (async_on()) {
    if (async_step_duration <= 0) fail("sim.async_step_duration must be > 0 when async training is on");
  }
  if (mode == ExperimentMode::Solo && (async == Toggle::On || personalized == Toggle::On)) {
    fail("solo mode has no server; async and personalized toggles do not apply");
  }
  (void)n_part;
}

struct ParsedConfig {
  ExperimentConfig config;
  std::vector<std::string> set_keys;  // keys given explicitly, in file order
};

// Parses the text format. `origin` prefixes diagnostics (usually the path).
inline ParsedConfig parse_config(std::string_view text, const std::string& origin = "config") {
  ParsedConfig out;
  std::string section;
  std::map<std::string, std::size_t> seen;
  std::size_t lineno = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++lineno;
    const std::string where = origin + ":" + std::to_string(lineno) + ": ";
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') throw ConfigError(where + "malformed section header");
      section = std::string(trim(line.substr(1, line.size() - 2)));
      bool known = false;
      for (const auto& k : config_schema()) known = known || k.section == section;
      if (!known) throw ConfigError(where + "unknown section [" + section + "]");
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ConfigError(where + "expected 'key = value'");
    if (section.empty()) throw ConfigError(where + "key outside of any [section]");
    const std::string name = section + "." + std::string(trim(line.substr(0, eq)));
    const auto value = trim(line.substr(eq + 1));
    if (auto it = seen.find(name); it != seen.end()) {
      throw ConfigError(where + "'" + name + "' already set on line " + std::to_string(it->second));
    }
    const ConfigKey* key = nullptr;
    try {
      key = &find_config_key(name);
    } catch (const ConfigError& e) {
      throw ConfigError(where + e.what());
    }
    try {
      key->set(out.config, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + name + ": " + e.what());
    }
    seen.emplace(name, lineno);
    out.set_keys.push_back(name);
  }
  try {
    out.config.validate();
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
  return out;
}

// `section.key=value` override, as given on the command line.
inline void apply_override(ExperimentConfig& cfg, std::string_view assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string_view::npos) throw ConfigError("override '" + std::string(assignment) + "' is not key=value");
  const auto name = trim(assignment.substr(0, eq));
  try {
    find_config_key(name).set(cfg, trim(assignment.substr(eq + 1)));
  } catch (const ConfigError& e) {
    throw ConfigError("override " + std::string(name) + ": " + e.what());
  }
}

// Every key with its resolved value, in schema order. Parsing the echo
// yields the same configuration.
inline std::string echo_config(const ExperimentConfig& cfg) {
  std::ostringstream os;
  std::string section;
  for (const auto& k : config_schema()) {
    if (k.section != section) {
      if (!section.empty()) os << '\n';
      section = k.section;
      os << '[' << section << "]\n";
    }
    os << k.key << " = " << k.get(cfg) << '\n';
  }
  return os.str();
}

}  // namespace pafedfv
