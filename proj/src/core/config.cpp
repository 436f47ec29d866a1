#include "udsx/config.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

#include "udsx/error.hpp"

namespace udsx {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

[[noreturn]] void bad_value(const std::string& key, const std::string& value, const char* expected) {
  fail(ErrorKind::Config, key + ": invalid value '" + value + "' (expected " + expected + ")");
}

double as_double(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const double x = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE) bad_value(key, v, "a number");
  return x;
}

long long as_int(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  const long long x = std::strtoll(v.c_str(), &end, 10);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE) bad_value(key, v, "an integer");
  return x;
}

std::size_t as_size(const std::string& key, const std::string& v) {
  const long long x = as_int(key, v);
  if (x < 0) bad_value(key, v, "a non-negative integer");
  return static_cast<std::size_t>(x);
}

std::uint64_t as_u64(const std::string& key, const std::string& v) {
  errno = 0;
  char* end = nullptr;
  if (!v.empty() && v[0] == '-') bad_value(key, v, "a non-negative integer");
  const unsigned long long x = std::strtoull(v.c_str(), &end, 10);
  if (v.empty() || end != v.c_str() + v.size() || errno == ERANGE) bad_value(key, v, "a non-negative integer");
  return x;
}

bool as_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  bad_value(key, v, "true|false");
}

template <class T, class F>
std::vector<T> as_list(const std::string& key, const std::string& v, F conv) {
  std::vector<T> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) continue;
    out.push_back(static_cast<T>(conv(key, item)));
  }
  return out;
}

std::string num(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
std::string join(const std::vector<T>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

using TrainSetter = std::function<void(TrainConfig&, const std::string&, const std::string&)>;
using DataSetter = std::function<void(SynthSpec&, const std::string&, const std::string&)>;

struct TrainKey {
  const char* name;
  const char* help;
  TrainSetter set;
};

struct DataKey {
  const char* name;
  const char* help;
  DataSetter set;
};

const std::vector<TrainKey>& train_table() {
  static const std::vector<TrainKey> t{
      {"mode", "udsx|dex_only|pste_only|dex_naive|dex_dsd|dex_dsd_pste",
       [](TrainConfig& c, auto&, auto& v) { c.mode = parse_mode(v); }},
      {"beta1", "weight of the cross-entropy stream", [](TrainConfig& c, auto& k, auto& v) { c.beta1 = as_double(k, v); }},
      {"beta2", "weight of the DEX stream", [](TrainConfig& c, auto& k, auto& v) { c.beta2 = as_double(k, v); }},
      {"lambda", "DEX strength", [](TrainConfig& c, auto& k, auto& v) { c.lambda = as_double(k, v); }},
      {"freeze_gamma", "treat the DEX offsets as constants", [](TrainConfig& c, auto& k, auto& v) { c.freeze_gamma = as_bool(k, v); }},
      {"lr", "peak learning rate", [](TrainConfig& c, auto& k, auto& v) { c.lr = as_double(k, v); }},
      {"warmup_epochs", "linear warm-up from 0.01*lr", [](TrainConfig& c, auto& k, auto& v) { c.warmup_epochs = static_cast<int>(as_int(k, v)); }},
      {"decay_epochs", "comma list of epochs at which lr is multiplied by decay_factor",
       [](TrainConfig& c, auto& k, auto& v) { c.decay_epochs = as_list<int>(k, v, as_int); }},
      {"decay_factor", "step decay multiplier", [](TrainConfig& c, auto& k, auto& v) { c.decay_factor = as_double(k, v); }},
      {"weight_decay", "L2 coefficient added to every gradient", [](TrainConfig& c, auto& k, auto& v) { c.weight_decay = as_double(k, v); }},
      {"optimizer", "adam|momentum",
       [](TrainConfig& c, auto& k, auto& v) {
         if (v == "adam") c.optimizer = OptimizerKind::Adam;
         else if (v == "momentum") c.optimizer = OptimizerKind::Momentum;
         else bad_value(k, v, "adam|momentum");
       }},
      {"momentum", "momentum coefficient (optimizer=momentum)", [](TrainConfig& c, auto& k, auto& v) { c.momentum = as_double(k, v); }},
      {"adam.beta1", "first-moment decay", [](TrainConfig& c, auto& k, auto& v) { c.adam_beta1 = as_double(k, v); }},
      {"adam.beta2", "second-moment decay", [](TrainConfig& c, auto& k, auto& v) { c.adam_beta2 = as_double(k, v); }},
      {"adam.eps", "denominator epsilon", [](TrainConfig& c, auto& k, auto& v) { c.adam_eps = as_double(k, v); }},
      {"batch_p", "classes per batch", [](TrainConfig& c, auto& k, auto& v) { c.batch_p = as_size(k, v); }},
      {"batch_k", "instances per class", [](TrainConfig& c, auto& k, auto& v) { c.batch_k = as_size(k, v); }},
      {"epochs", "total epochs", [](TrainConfig& c, auto& k, auto& v) { c.total_epochs = static_cast<int>(as_int(k, v)); }},
      {"seed", "run seed (also settable with --seed)", [](TrainConfig& c, auto& k, auto& v) { c.seed = as_u64(k, v); }},
      {"channels", "comma list of stage widths",
       [](TrainConfig& c, auto& k, auto& v) { c.channels = as_list<std::size_t>(k, v, as_size); }},
      {"pste.enabled", "perturb the explicit stream", [](TrainConfig& c, auto& k, auto& v) { c.pste.enabled = as_bool(k, v); }},
      {"pste.layers", "comma list of tap layers",
       [](TrainConfig& c, auto& k, auto& v) { c.pste.layers = as_list<std::size_t>(k, v, as_size); }},
      {"pste.min_width", "number of taps available from epoch 0", [](TrainConfig& c, auto& k, auto& v) { c.pste.min_width = as_size(k, v); }},
      {"pste.horizon_epochs", "epoch at which every tap is available",
       [](TrainConfig& c, auto& k, auto& v) { c.pste.horizon_epochs = static_cast<int>(as_int(k, v)); }},
      {"pste.strata_lo", "lower activation quantile of perturbed channels", [](TrainConfig& c, auto& k, auto& v) { c.pste.strata_lo = as_double(k, v); }},
      {"pste.strata_hi", "upper activation quantile of perturbed channels", [](TrainConfig& c, auto& k, auto& v) { c.pste.strata_hi = as_double(k, v); }},
      {"pste.schedule", "linear|step",
       [](TrainConfig& c, auto& k, auto& v) {
         if (v == "linear") c.pste.schedule = PteSchedule::Linear;
         else if (v == "step") c.pste.schedule = PteSchedule::Step;
         else bad_value(k, v, "linear|step");
       }},
      {"pste.per_element", "independent noise per position", [](TrainConfig& c, auto& k, auto& v) { c.pste.per_element = as_bool(k, v); }},
      {"csr.psi1", "weight of the pairwise L1 term", [](TrainConfig& c, auto& k, auto& v) { c.csr.psi1 = as_double(k, v); }},
      {"csr.psi2", "weight of the cross-stream center term", [](TrainConfig& c, auto& k, auto& v) { c.csr.psi2 = as_double(k, v); }},
      {"csr.psi3", "weight of the cross-stream triplet term", [](TrainConfig& c, auto& k, auto& v) { c.csr.psi3 = as_double(k, v); }},
      {"csr.margin", "triplet margin", [](TrainConfig& c, auto& k, auto& v) { c.csr.margin = as_double(k, v); }},
      {"cold_start", "samples per domain before offsets and noise switch on", [](TrainConfig& c, auto& k, auto& v) { c.cold_start = as_size(k, v); }},
      {"stats.momentum", "0 = exact running statistics, otherwise EMA factor", [](TrainConfig& c, auto& k, auto& v) { c.stats_momentum = as_double(k, v); }},
      {"eval.every", "evaluate every N epochs (0 = never; the last epoch is always evaluated otherwise)",
       [](TrainConfig& c, auto& k, auto& v) { c.eval_every = static_cast<int>(as_int(k, v)); }},
      {"eval.distance", "euclidean|cosine", [](TrainConfig& c, auto&, auto& v) { c.eval_distance = parse_distance(v); }},
      {"eval.ranks", "comma list of CMC ranks", [](TrainConfig& c, auto& k, auto& v) { c.eval_ranks = as_list<int>(k, v, as_int); }},
      {"eval.select", "best-epoch criterion: map|rank1",
       [](TrainConfig& c, auto& k, auto& v) {
         if (v != "map" && v != "rank1") bad_value(k, v, "map|rank1");
         c.eval_select = v;
       }},
  };
  return t;
}

const std::vector<DataKey>& data_table() {
  static const std::vector<DataKey> t{
      {"data.domains", "number of domains", [](SynthSpec& s, auto& k, auto& v) { s.n_domains = static_cast<int>(as_int(k, v)); }},
      {"data.classes", "number of identities", [](SynthSpec& s, auto& k, auto& v) { s.n_classes = static_cast<int>(as_int(k, v)); }},
      {"data.samples_per_cell", "samples per (domain, class)",
       [](SynthSpec& s, auto& k, auto& v) { s.samples_per_cell = static_cast<int>(as_int(k, v)); }},
      {"data.channels", "image channels", [](SynthSpec& s, auto& k, auto& v) { s.channels = as_size(k, v); }},
      {"data.height", "image height", [](SynthSpec& s, auto& k, auto& v) { s.height = as_size(k, v); }},
      {"data.width", "image width", [](SynthSpec& s, auto& k, auto& v) { s.width = as_size(k, v); }},
      {"data.prototype_seed", "seed of the class prototypes", [](SynthSpec& s, auto& k, auto& v) { s.prototype_seed = as_u64(k, v); }},
      {"data.block_h", "prototype cell height", [](SynthSpec& s, auto& k, auto& v) { s.block_h = as_size(k, v); }},
      {"data.block_w", "prototype cell width", [](SynthSpec& s, auto& k, auto& v) { s.block_w = as_size(k, v); }},
      {"data.detail", "fine-detail amplitude", [](SynthSpec& s, auto& k, auto& v) { s.detail = as_double(k, v); }},
      {"data.style_scale", "log-gain spread across domains", [](SynthSpec& s, auto& k, auto& v) { s.style_scale = as_double(k, v); }},
      {"data.style_shift", "offset spread across domains", [](SynthSpec& s, auto& k, auto& v) { s.style_shift = as_double(k, v); }},
      {"data.noise_spread", "log-noise spread across domains", [](SynthSpec& s, auto& k, auto& v) { s.noise_spread = as_double(k, v); }},
      {"data.sigma", "base pixel noise", [](SynthSpec& s, auto& k, auto& v) { s.sigma = as_double(k, v); }},
      {"data.cell_sigma", "per-sample noise constant over each coarse cell", [](SynthSpec& s, auto& k, auto& v) { s.cell_sigma = as_double(k, v); }},
      {"data.noise_anisotropy", "share of noise variance on one colour direction per domain",
       [](SynthSpec& s, auto& k, auto& v) { s.noise_anisotropy = as_double(k, v); }},
      {"data.holdout", "held-out domain (-1 = last)", [](SynthSpec& s, auto& k, auto& v) { s.holdout_domain = static_cast<int>(as_int(k, v)); }},
  };
  return t;
}

// Keys owned by the CLI rather than either config struct.
bool is_cli_key(const std::string& k) { return k == "data.path" || k == "out"; }

}  // namespace

KeyValues parse_key_values(const std::string& text, const std::string& origin) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      fail(ErrorKind::Config, origin + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    if (key.empty()) fail(ErrorKind::Config, origin + ":" + std::to_string(lineno) + ": empty key");
    if (kv.count(key)) fail(ErrorKind::Config, origin + ":" + std::to_string(lineno) + ": duplicate key " + key);
    kv[key] = trim(line.substr(eq + 1));
  }
  return kv;
}

KeyValues load_key_values(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::Io, "cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_key_values(ss.str(), path.string());
}

void apply_override(KeyValues& kv, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || trim(assignment.substr(0, eq)).empty())
    fail(ErrorKind::Config, "--set expects key=value, got '" + assignment + "'");
  kv[trim(assignment.substr(0, eq))] = trim(assignment.substr(eq + 1));
}

const std::vector<std::pair<std::string, std::string>>& train_keys() {
  static const auto keys = [] {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& k : train_table()) out.emplace_back(k.name, k.help);
    return out;
  }();
  return keys;
}

const std::vector<std::pair<std::string, std::string>>& data_keys() {
  static const auto keys = [] {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& k : data_table()) out.emplace_back(k.name, k.help);
    return out;
  }();
  return keys;
}

TrainConfig train_config_from(const KeyValues& kv) {
  TrainConfig cfg;
  for (const auto& k : train_table())
    if (auto it = kv.find(k.name); it != kv.end()) k.set(cfg, it->first, it->second);
  cfg.validate();
  return cfg;
}

SynthSpec synth_spec_from(const KeyValues& kv) {
  SynthSpec spec;
  for (const auto& k : data_table())
    if (auto it = kv.find(k.name); it != kv.end()) k.set(spec, it->first, it->second);
  spec.validate();
  return spec;
}

void check_known_keys(const KeyValues& kv) {
  for (const auto& [key, value] : kv) {
    if (is_cli_key(key)) continue;
    bool known = false;
    for (const auto& k : train_table()) known = known || key == k.name;
    for (const auto& k : data_table()) known = known || key == k.name;
    if (!known) fail(ErrorKind::Config, key + ": unknown configuration key");
  }
}

KeyValues to_key_values(const TrainConfig& c) {
  KeyValues kv;
  kv["mode"] = to_string(c.mode);
  kv["beta1"] = num(c.beta1);
  kv["beta2"] = num(c.beta2);
  kv["lambda"] = num(c.lambda);
  kv["freeze_gamma"] = c.freeze_gamma ? "true" : "false";
  kv["lr"] = num(c.lr);
  kv["warmup_epochs"] = std::to_string(c.warmup_epochs);
  kv["decay_epochs"] = join(c.decay_epochs);
  kv["decay_factor"] = num(c.decay_factor);
  kv["weight_decay"] = num(c.weight_decay);
  kv["optimizer"] = c.optimizer == OptimizerKind::Adam ? "adam" : "momentum";
  kv["momentum"] = num(c.momentum);
  kv["adam.beta1"] = num(c.adam_beta1);
  kv["adam.beta2"] = num(c.adam_beta2);
  kv["adam.eps"] = num(c.adam_eps);
  kv["batch_p"] = std::to_string(c.batch_p);
  kv["batch_k"] = std::to_string(c.batch_k);
  kv["epochs"] = std::to_string(c.total_epochs);
  kv["seed"] = std::to_string(c.seed);
  kv["channels"] = join(c.channels);
  kv["pste.enabled"] = c.pste.enabled ? "true" : "false";
  kv["pste.layers"] = join(c.pste.layers);
  kv["pste.min_width"] = std::to_string(c.pste.min_width);
  kv["pste.horizon_epochs"] = std::to_string(c.pste.horizon_epochs);
  kv["pste.strata_lo"] = num(c.pste.strata_lo);
  kv["pste.strata_hi"] = num(c.pste.strata_hi);
  kv["pste.schedule"] = c.pste.schedule == PteSchedule::Linear ? "linear" : "step";
  kv["pste.per_element"] = c.pste.per_element ? "true" : "false";
  kv["csr.psi1"] = num(c.csr.psi1);
  kv["csr.psi2"] = num(c.csr.psi2);
  kv["csr.psi3"] = num(c.csr.psi3);
  kv["csr.margin"] = num(c.csr.margin);
  kv["cold_start"] = std::to_string(c.cold_start);
  kv["stats.momentum"] = num(c.stats_momentum);
  kv["eval.every"] = std::to_string(c.eval_every);
  kv["eval.distance"] = to_string(c.eval_distance);
  kv["eval.ranks"] = join(c.eval_ranks);
  kv["eval.select"] = c.eval_select;
  return kv;
}

KeyValues to_key_values(const SynthSpec& s) {
  KeyValues kv;
  kv["data.domains"] = std::to_string(s.n_domains);
  kv["data.classes"] = std::to_string(s.n_classes);
  kv["data.samples_per_cell"] = std::to_string(s.samples_per_cell);
  kv["data.channels"] = std::to_string(s.channels);
  kv["data.height"] = std::to_string(s.height);
  kv["data.width"] = std::to_string(s.width);
  kv["data.prototype_seed"] = std::to_string(s.prototype_seed);
  kv["data.block_h"] = std::to_string(s.block_h);
  kv["data.block_w"] = std::to_string(s.block_w);
  kv["data.detail"] = num(s.detail);
  kv["data.style_scale"] = num(s.style_scale);
  kv["data.style_shift"] = num(s.style_shift);
  kv["data.noise_spread"] = num(s.noise_spread);
  kv["data.sigma"] = num(s.sigma);
  kv["data.cell_sigma"] = num(s.cell_sigma);
  kv["data.noise_anisotropy"] = num(s.noise_anisotropy);
  kv["data.holdout"] = std::to_string(s.holdout_domain);
  return kv;
}

std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
  return out;
}

}  // namespace udsx
