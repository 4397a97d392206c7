#pragma once

// Synthetic non-IID open-set verification data.
//
// Identities are Gaussian prototypes inside a shared low-dimensional identity
// subspace. Within-identity variation is dominated by a shared nuisance
// subspace, so a good embedding must learn to discard it; that structure is
// what clients can usefully share. Each client then applies its own
// transform: pairwise rotation of coordinates (0,1), (2,3), ... by a fixed
// angle, a translation along a client-specific direction, and a noise scale.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pafedfv/errors.hpp"
#include "pafedfv/random.hpp"
#include "pafedfv/text_io.hpp"

namespace pafedfv {

struct ClientSynthSpec {
  std::size_t num_classes = 20;
  std::size_t samples_per_class = 12;
  double rotation_deg = 0.0;
  double offset = 0.0;
  double noise_scale = 1.0;
  std::uint64_t seed = 0;
};

struct SynthSpec {
  std::size_t input_dim = 32;
  std::vector<ClientSynthSpec> clients;
  double open_set_split = 0.8;  // fraction of identities used for training (floor)

  // Shared latent structure.
  std::size_t identity_dim = 8;
  double prototype_scale = 1.0;
  double identity_noise = 0.25;   // within-identity spread inside the identity subspace
  double nuisance_noise = 1.0;    // within-identity spread in the complementary subspace
  std::uint64_t structure_seed = 1;

  // Server probe pool, drawn from fresh identities without any client transform.
  std::size_t probe_pool_size = 128;
  std::uint64_t probe_seed = 7;

  void validate() const {
    if (input_dim < 2) throw ConfigError("synth: input_dim must be >= 2");
    if (identity_dim == 0 || identity_dim > input_dim) throw ConfigError("synth: identity_dim must lie in [1, input_dim]");
    if (clients.empty()) throw ConfigError("synth: need at least one client");
    if (!(open_set_split > 0.0 && open_set_split < 1.0)) throw ConfigError("synth: open_set_split must lie in (0, 1)");
    for (double v : {prototype_scale, identity_noise, nuisance_noise}) {
      if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("synth: scales must be finite and >= 0");
    }
    for (std::size_t k = 0; k < clients.size(); ++k) {
      const auto& c = clients[k];
      const std::string who = "synth client " + std::to_string(k) + ": ";
      if (c.num_classes < 2) throw ConfigError(who + "num_classes must be >= 2");
      if (c.samples_per_class < 1) throw ConfigError(who + "samples_per_class must be >= 1");
      const auto train = train_class_count(c.num_classes);
      if (train < 1 || train >= c.num_classes) throw ConfigError(who + "split leaves an empty train or test role");
      if (!std::isfinite(c.rotation_deg) || !std::isfinite(c.offset)) throw ConfigError(who + "non-finite transform");
      if (!(c.noise_scale >= 0.0) || !std::isfinite(c.noise_scale)) throw ConfigError(who + "noise_scale must be >= 0");
    }
  }

  std::size_t train_class_count(std::size_t num_classes) const {
    return static_cast<std::size_t>(std::floor(static_cast<double>(num_classes) * open_set_split));
  }
};

enum class DatasetRole { Train, Test };

inline const char* to_string(DatasetRole r) { return r == DatasetRole::Train ? "train" : "test"; }

// Labels are dense 0..K-1 within the role; identity = identity_offset + label
// names the client-level identity, so train and test identities never overlap.
struct LabeledDataset {
  std::vector<std::vector<double>> inputs;
  std::vector<std::size_t> labels;
  DatasetRole role = DatasetRole::Train;
  std::size_t num_classes = 0;
  std::size_t identity_offset = 0;

  std::size_t size() const noexcept { return inputs.size(); }
  std::size_t identity(std::size_t i) const { return identity_offset + labels.at(i); }

  friend bool operator==(const LabeledDataset&, const LabeledDataset&) = default;
};

struct ClientData {
  LabeledDataset train;
  LabeledDataset test;
};

struct SynthData {
  std::vector<ClientData> clients;
  std::vector<std::vector<double>> probe_pool;
};

namespace detail {

// Rows are an orthonormal basis of R^dim (modified Gram-Schmidt on Gaussian rows).
inline std::vector<std::vector<double>> random_orthonormal_basis(std::size_t dim, Rng& rng) {
  std::vector<std::vector<double>> q;
  q.reserve(dim);
  while (q.size() < dim) {
    std::vector<double> v(dim);
    for (double& x : v) x = rng.normal();
    for (const auto& b : q) {
      double d = 0.0;
      for (std::size_t i = 0; i < dim; ++i) d += v[i] * b[i];
      for (std::size_t i = 0; i < dim; ++i) v[i] -= d * b[i];
    }
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n < 1e-8) continue;
    for (double& x : v) x /= n;
    q.push_back(std::move(v));
  }
  return q;
}

struct LatentStructure {
  std::vector<std::vector<double>> basis;  // first identity_dim rows span identities
};

inline LatentStructure make_structure(const SynthSpec& spec) {
  Rng rng(mix_seed(spec.structure_seed, 0));
  return {random_orthonormal_basis(spec.input_dim, rng)};
}

// One identity's prototype: identity-subspace coordinates only.
inline std::vector<double> draw_prototype(const SynthSpec& spec, const LatentStructure& s, Rng& rng) {
  std::vector<double> p(spec.input_dim, 0.0);
  for (std::size_t b = 0; b < spec.identity_dim; ++b) {
    const double z = spec.prototype_scale * rng.normal();
    for (std::size_t i = 0; i < spec.input_dim; ++i) p[i] += z * s.basis[b][i];
  }
  return p;
}

inline std::vector<double> draw_sample(const SynthSpec& spec, const LatentStructure& s, std::span<const double> proto,
                                       double noise_scale, Rng& rng) {
  std::vector<double> x(proto.begin(), proto.end());
  if (noise_scale == 0.0) return x;
  for (std::size_t b = 0; b < spec.input_dim; ++b) {
    const double sd = b < spec.identity_dim ? spec.identity_noise : spec.nuisance_noise;
    const double z = noise_scale * sd * rng.normal();
    for (std::size_t i = 0; i < spec.input_dim; ++i) x[i] += z * s.basis[b][i];
  }
  return x;
}

}  // namespace detail

// Rotates coordinate pairs (0,1), (2,3), ... by `deg` degrees. An odd trailing
// coordinate is left alone.
inline std::vector<double> rotate_pairs(std::span<const double> x, double deg) {
  std::vector<double> y(x.begin(), x.end());
  if (deg == 0.0) return y;
  const double rad = deg * std::numbers::pi / 180.0;
  // Exact values at quarter turns so that rotated data is bit-reproducible.
  double c = std::cos(rad), s = std::sin(rad);
  const double quarter = deg / 90.0;
  if (quarter == std::round(quarter)) {
    const auto q = ((static_cast<long long>(std::round(quarter)) % 4) + 4) % 4;
    constexpr double cs[4][2] = {{1, 0}, {0, 1}, {-1, 0}, {0, -1}};
    c = cs[q][0];
    s = cs[q][1];
  }
  for (std::size_t i = 0; i + 1 < y.size(); i += 2) {
    const double a = x[i], b = x[i + 1];
    y[i] = c * a - s * b;
    y[i + 1] = s * a + c * b;
  }
  return y;
}

// Unit translation direction of one client, derived from its seed.
inline std::vector<double> offset_direction(std::size_t dim, std::uint64_t client_seed) {
  Rng rng(mix_seed(client_seed, 0xD1));
  std::vector<double> d(dim);
  double n = 0.0;
  for (double& v : d) {
    v = rng.normal();
    n += v * v;
  }
  n = std::sqrt(n);
  for (double& v : d) v /= n;
  return d;
}

inline ClientData generate_client(const SynthSpec& spec, const detail::LatentStructure& s, const ClientSynthSpec& c) {
  Rng proto_rng(mix_seed(c.seed, 1));
  Rng sample_rng(mix_seed(c.seed, 2));
  const auto dir = offset_direction(spec.input_dim, c.seed);
  const std::size_t n_train = spec.train_class_count(c.num_classes);

  ClientData out;
  out.train.role = DatasetRole::Train;
  out.train.num_classes = n_train;
  out.train.identity_offset = 0;
  out.test.role = DatasetRole::Test;
  out.test.num_classes = c.num_classes - n_train;
  out.test.identity_offset = n_train;

  for (std::size_t k = 0; k < c.num_classes; ++k) {
    const auto proto = detail::draw_prototype(spec, s, proto_rng);
    auto& ds = k < n_train ? out.train : out.test;
    const std::size_t label = k < n_train ? k : k - n_train;
    for (std::size_t j = 0; j < c.samples_per_class; ++j) {
      auto x = rotate_pairs(detail::draw_sample(spec, s, proto, c.noise_scale, sample_rng), c.rotation_deg);
      if (c.offset != 0.0) {
        for (std::size_t i = 0; i < x.size(); ++i) x[i] += c.offset * dir[i];
      }
      ds.inputs.push_back(std::move(x));
      ds.labels.push_back(label);
    }
  }
  return out;
}

inline SynthData generate(const SynthSpec& spec) {
  spec.validate();
  const auto structure = detail::make_structure(spec);
  SynthData data;
  for (const auto& c : spec.clients) data.clients.push_back(generate_client(spec, structure, c));

  // Probe pool: each item comes from a fresh identity.
  Rng rng(mix_seed(spec.probe_seed, 3));
  data.probe_pool.reserve(spec.probe_pool_size);
  for (std::size_t i = 0; i < spec.probe_pool_size; ++i) {
    const auto proto = detail::draw_prototype(spec, structure, rng);
    data.probe_pool.push_back(detail::draw_sample(spec, structure, proto, 1.0, rng));
  }
  return data;
}

// Plain-text dataset file. Two header lines echo provenance, then one row per
// sample: label followed by the input values.
inline std::string export_dataset(const LabeledDataset& ds, const std::string& spec_echo) {
  std::ostringstream os;
  os << "# pafedfv-dataset v1 " << spec_echo << '\n';
  const std::size_t dim = ds.inputs.empty() ? 0 : ds.inputs.front().size();
  os << "# role=" << to_string(ds.role) << " classes=" << ds.num_classes << " identity_offset=" << ds.identity_offset
     << " dim=" << dim << " rows=" << ds.size() << '\n';
  for (std::size_t i = 0; i < ds.size(); ++i) {
    os << ds.labels[i];
    for (double v : ds.inputs[i]) os << ',' << format_double(v);
    os << '\n';
  }
  return os.str();
}

inline LabeledDataset import_dataset(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line.rfind("# pafedfv-dataset v1", 0) != 0) {
    throw ConfigError("dataset: missing 'pafedfv-dataset v1' header");
  }
  if (!std::getline(is, line) || line.rfind("# ", 0) != 0) throw ConfigError("dataset: missing metadata line");
  LabeledDataset ds;
  std::size_t dim = 0, rows = 0;
  for (auto field : split(std::string_view(line).substr(2), ' ')) {
    const auto eq = field.find('=');
    if (eq == std::string_view::npos) continue;
    const auto key = field.substr(0, eq);
    const auto val = field.substr(eq + 1);
    if (key == "role") {
      if (val == "train") ds.role = DatasetRole::Train;
      else if (val == "test") ds.role = DatasetRole::Test;
      else throw ConfigError("dataset: unknown role '" + std::string(val) + "'");
    } else if (key == "classes") ds.num_classes = parse_u64(val);
    else if (key == "identity_offset") ds.identity_offset = parse_u64(val);
    else if (key == "dim") dim = parse_u64(val);
    else if (key == "rows") rows = parse_u64(val);
  }
  std::size_t lineno = 2;
  while (std::getline(is, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    const auto cells = split(line, ',');
    if (cells.size() != dim + 1) {
      throw ConfigError("dataset line " + std::to_string(lineno) + ": expected " + std::to_string(dim + 1) + " cells");
    }
    ds.labels.push_back(parse_u64(cells[0]));
    if (ds.labels.back() >= ds.num_classes) throw ConfigError("dataset line " + std::to_string(lineno) + ": label out of range");
    std::vector<double> x;
    x.reserve(dim);
    for (std::size_t i = 1; i < cells.size(); ++i) x.push_back(parse_double(cells[i]));
    ds.inputs.push_back(std::move(x));
  }
  if (ds.size() != rows) throw ConfigError("dataset: row count does not match header");
  return ds;
}

}  // namespace pafedfv
