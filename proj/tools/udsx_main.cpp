// udsx command-line tool: data generation, training runs, evaluation, the
// lambda sweep and the numerical self-checks.

#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "udsx/checks.hpp"
#include "udsx/config.hpp"
#include "udsx/error.hpp"
#include "udsx/eval.hpp"
#include "udsx/harness.hpp"
#include "udsx/kernels.hpp"
#include "udsx/synthdata.hpp"
#include "udsx/version.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace udsx;

namespace {

constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitIo = 4;

const char* kRunLogHelp =
    "run.csv columns (one row per epoch, empty when a value does not apply to the mode):\n"
    "  epoch            0-based epoch index\n"
    "  lr               learning rate used during the epoch\n"
    "  loss_ce          cross-entropy of the explicit (perturbed) stream\n"
    "  loss_dex         DEX loss of the implicit (clean) stream\n"
    "  loss_csp         pairwise L1 between sibling embeddings (udsx only)\n"
    "  loss_csc         cross-stream center loss; standard center loss in pste_only\n"
    "  loss_cst         cross-stream triplet loss; standard batch-hard triplet in pste_only\n"
    "  loss_se          beta1 * loss_ce + beta2 * loss_dex\n"
    "  loss_csr         psi1 * csp + psi2 * csc + psi3 * cst\n"
    "  loss_udsx        loss_se + loss_csr\n"
    "  max_weight_dist  largest Euclidean distance between two classifier rows\n"
    "  rank<k>          CMC rank-k on the held-out domain (evaluated epochs only)\n"
    "  map              mean average precision on the held-out domain\n"
    "Losses are epoch means of the per-step values.\n"
    "Exit codes: 0 ok, 2 configuration error, 3 non-finite loss, 4 I/O error, 1 other.";

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
  out << text;
  if (!out) fail(ErrorKind::Io, "write failed: " + path.string());
}

void ensure_fresh_dir(const fs::path& dir, bool overwrite) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
  if (!overwrite && fs::exists(dir / "manifest.json"))
    fail(ErrorKind::Io, dir.string() + " already holds a run (pass --overwrite to replace it)");
}

struct ConfigArgs {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
};

void add_config_options(CLI::App* cmd, ConfigArgs& a, bool needs_seed) {
  cmd->add_option("--config", a.config, "flat key = value configuration file");
  cmd->add_option("--set", a.sets, "override one key (key=value); repeatable")->take_all();
  auto* opt = cmd->add_option("--seed", a.seed, "run seed");
  if (needs_seed) opt->required();
}

KeyValues resolve(const ConfigArgs& a) {
  KeyValues kv = a.config.empty() ? KeyValues{} : load_key_values(a.config);
  for (const auto& s : a.sets) apply_override(kv, s);
  if (a.seed) kv["seed"] = std::to_string(*a.seed);
  check_known_keys(kv);
  return kv;
}

json key_values_json(const KeyValues& kv) {
  json j = json::object();
  for (const auto& [k, v] : kv) j[k] = v;
  return j;
}

json retrieval_to_json(const RetrievalResult& r) {
  json j;
  for (const auto& [k, v] : r.rank_k) j["rank" + std::to_string(k)] = v;
  j["map"] = r.mAP;
  return j;
}

struct LoadedData {
  Dataset data;
  json source;
};

// Either load --data or generate from the data.* keys with the run seed.
LoadedData obtain_data(const KeyValues& kv, const std::string& data_path, std::uint64_t seed) {
  LoadedData out;
  std::string path = data_path;
  if (path.empty())
    if (auto it = kv.find("data.path"); it != kv.end()) path = it->second;
  if (!path.empty()) {
    out.data = load_dataset(path);
    out.source["path"] = path;
  } else {
    const SynthSpec spec = synth_spec_from(kv);
    out.data = generate(spec, seed);
    out.source["generated"] = key_values_json(to_key_values(spec));
    out.source["seed"] = seed;
  }
  char buf[20];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(dataset_checksum(out.data)));
  out.source["checksum"] = buf;
  return out;
}

struct RunSummary {
  int best_epoch = -1;
  std::optional<RetrievalResult> best;
  double final_weight_distance = 0.0;
};

RunSummary train_into(const fs::path& dir, const LoadedData& data, const TrainConfig& cfg, const std::string& command,
                      bool overwrite) {
  ensure_fresh_dir(dir, overwrite);
  json manifest;
  manifest["tool"] = "udsx";
  manifest["version"] = kVersion;
  manifest["command"] = command;
  manifest["seed"] = cfg.seed;
  manifest["output_dir"] = dir.string();
  manifest["kernels"] = std::string(kernels::active().name);
  manifest["data"] = data.source;
  manifest["config"] = key_values_json(to_key_values(cfg));
  manifest["started"] = utc_now();
  manifest["status"] = "running";
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");

  std::ofstream log(dir / "run.csv", std::ios::binary | std::ios::trunc);
  if (!log) fail(ErrorKind::Io, "cannot write " + (dir / "run.csv").string());
  log << run_log_header(cfg.eval_ranks) << '\n';
  log.flush();

  RunSummary summary;
  try {
    TrainRun run = run_training(data.data, cfg, [&](const EpochLog& row) {
      log << run_log_row(row, cfg.eval_ranks) << '\n';
      log.flush();
      if (!log) fail(ErrorKind::Io, "write failed: " + (dir / "run.csv").string());
    });
    {
      std::ofstream ck(dir / "checkpoint.txt", std::ios::binary);
      run.model.save(ck);
      std::ofstream st(dir / "stats.txt", std::ios::binary);
      run.stats.save(st);
      if (!ck || !st) fail(ErrorKind::Io, "cannot write checkpoint or stats in " + dir.string());
    }
    summary.best_epoch = run.best_epoch;
    summary.best = run.best;
    summary.final_weight_distance = run.log.back().losses.max_weight_distance;

    json metrics;
    metrics["best_epoch"] = run.best_epoch;
    metrics["select"] = cfg.eval_select;
    metrics["best"] = run.best ? retrieval_to_json(*run.best) : json(nullptr);
    metrics["final"] = run.final_eval ? retrieval_to_json(*run.final_eval) : json(nullptr);
    metrics["final_max_weight_dist"] = summary.final_weight_distance;
    write_text(dir / "metrics.json", metrics.dump(2) + "\n");

    manifest["status"] = "completed";
  } catch (const Error& e) {
    manifest["status"] = e.kind() == ErrorKind::Numeric ? "aborted_numeric" : "failed";
    manifest["error"] = e.what();
    manifest["finished"] = utc_now();
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
    throw;
  }
  manifest["finished"] = utc_now();
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
  return summary;
}

std::string key_help() {
  std::string s = "Training keys:\n";
  for (const auto& [k, h] : train_keys()) s += "  " + k + "  " + h + "\n";
  s += "Data keys (used when --data is not given):\n";
  for (const auto& [k, h] : data_keys()) s += "  " + k + "  " + h + "\n";
  s += "  data.path  dataset file to load instead of generating\n";
  return s;
}

std::vector<double> parse_lambdas(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    char* end = nullptr;
    const double v = std::strtod(item.c_str(), &end);
    if (item.empty() || *end != '\0' || v < 0.0) fail(ErrorKind::Config, "--lambdas: invalid value '" + item + "'");
    out.push_back(v);
  }
  if (out.empty()) fail(ErrorKind::Config, "--lambdas: empty list");
  return out;
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Config: return kExitConfig;
    case ErrorKind::Numeric: return kExitNumeric;
    case ErrorKind::Io: return kExitIo;
    default: return kExitOther;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"udsx: dual-stream semantic expansion on synthetic multi-domain data"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);

  // gen-data
  ConfigArgs gen_args;
  std::string gen_out;
  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset file");
  add_config_options(gen, gen_args, true);
  gen->add_option("--out", gen_out, "dataset file to write")->required();
  gen->footer(key_help());

  // train
  ConfigArgs train_args;
  std::string train_data, train_out;
  bool train_overwrite = false;
  auto* train = app.add_subcommand("train", "train one model and write a run directory");
  add_config_options(train, train_args, true);
  train->add_option("--data", train_data, "dataset file (default: generate from data.* keys)");
  train->add_option("--out", train_out, "run directory")->required();
  train->add_flag("--overwrite", train_overwrite, "replace an existing run directory");
  train->footer(key_help() + "\nRun directory: manifest.json, run.csv, checkpoint.txt, stats.txt, metrics.json\n" +
                kRunLogHelp);

  // eval
  std::string eval_ckpt, eval_data, eval_out, eval_distance = "euclidean";
  std::vector<int> eval_ranks{1, 5, 10};
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint on the held-out domain of a dataset");
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint.txt from a run")->required();
  eval->add_option("--data", eval_data, "dataset file")->required();
  eval->add_option("--distance", eval_distance, "euclidean|cosine");
  eval->add_option("--ranks", eval_ranks, "CMC ranks")->delimiter(',');
  eval->add_option("--out", eval_out, "metrics JSON file (default: stdout)");

  // sweep-lambda
  ConfigArgs sweep_args;
  std::string sweep_data, sweep_out, sweep_lambdas = "0,5,15,25,50";
  bool sweep_overwrite = false;
  auto* sweep = app.add_subcommand("sweep-lambda", "train once per DEX strength and summarize");
  add_config_options(sweep, sweep_args, true);
  sweep->add_option("--lambdas", sweep_lambdas, "comma list of lambda values");
  sweep->add_option("--data", sweep_data, "dataset file (default: generate from data.* keys)");
  sweep->add_option("--out", sweep_out, "sweep directory")->required();
  sweep->add_flag("--overwrite", sweep_overwrite, "replace existing run directories");
  sweep->footer(
      "Writes lambda_<value>/ run directories and sweep.csv with columns:\n"
      "  lambda, best_epoch, rank1, map (at the best epoch), max_weight_dist (final epoch)\n\n" +
      std::string(kRunLogHelp));

  // check-grads
  std::uint64_t grads_seed = 0;
  GradSuiteOptions grad_opts;
  auto* grads = app.add_subcommand("check-grads", "finite-difference check of every analytic gradient");
  grads->add_option("--seed", grads_seed, "instance seed")->required();
  grads->add_option("--instances", grad_opts.instances, "instances per gradient");
  grads->add_option("--tolerance", grad_opts.tolerance, "relative error limit");

  // check-bounds
  std::uint64_t bounds_seed = 0;
  BoundSuiteOptions bound_opts;
  auto* bounds = app.add_subcommand("check-bounds", "Monte-Carlo check that the DEX loss bounds the expected loss");
  bounds->add_option("--seed", bounds_seed, "instance seed")->required();
  bounds->add_option("--instances", bound_opts.instances, "random instances");
  bounds->add_option("--samples", bound_opts.samples, "Monte-Carlo samples per instance");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) {
      const KeyValues kv = resolve(gen_args);
      const SynthSpec spec = synth_spec_from(kv);
      const Dataset data = generate(spec, *gen_args.seed);
      save_dataset(data, gen_out);
      const NearestCentroidReport nc = nearest_centroid_accuracy(data);
      json j;
      j["out"] = gen_out;
      j["records"] = data.records.size();
      char buf[20];
      std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(dataset_checksum(data)));
      j["checksum"] = buf;
      j["nearest_centroid"] = {{"within_domain", nc.within_domain}, {"cross_domain", nc.cross_domain}};
      std::cout << j.dump(2) << '\n';
    } else if (*train) {
      const KeyValues kv = resolve(train_args);
      const TrainConfig cfg = train_config_from(kv);
      const LoadedData data = obtain_data(kv, train_data, cfg.seed);
      const RunSummary s = train_into(train_out, data, cfg, "train", train_overwrite);
      std::cout << "best_epoch " << s.best_epoch;
      if (s.best) std::cout << " rank1 " << fmt(s.best->rank(1)) << " map " << fmt(s.best->mAP);
      std::cout << " max_weight_dist " << fmt(s.final_weight_distance) << '\n';
    } else if (*eval) {
      std::ifstream in(eval_ckpt);
      if (!in) fail(ErrorKind::Io, "cannot read checkpoint " + eval_ckpt);
      const BackboneModel model = BackboneModel::load(in);
      const Dataset data = load_dataset(eval_data);
      const auto& spec = model.spec();
      if (data.channels != spec.in_channels || data.height != spec.height || data.width != spec.width)
        fail(ErrorKind::Shape, "checkpoint expects " + std::to_string(spec.in_channels) + "x" +
                                   std::to_string(spec.height) + "x" + std::to_string(spec.width) +
                                   " inputs, dataset has " + std::to_string(data.channels) + "x" +
                                   std::to_string(data.height) + "x" + std::to_string(data.width));
      const RetrievalResult r = evaluate_held_out(model, data, eval_ranks, parse_distance(eval_distance));
      const std::string text = retrieval_json(r, {{"checkpoint", eval_ckpt}, {"data", eval_data},
                                                  {"distance", eval_distance}});
      if (eval_out.empty()) std::cout << text << '\n';
      else write_text(eval_out, text + "\n");
    } else if (*sweep) {
      const KeyValues kv = resolve(sweep_args);
      const TrainConfig base = train_config_from(kv);
      const std::vector<double> lambdas = parse_lambdas(sweep_lambdas);
      const LoadedData data = obtain_data(kv, sweep_data, base.seed);
      const fs::path root = sweep_out;
      std::error_code ec;
      fs::create_directories(root, ec);
      if (ec) fail(ErrorKind::Io, "cannot create " + root.string() + ": " + ec.message());
      std::string csv = "lambda,best_epoch,rank1,map,max_weight_dist\n";
      for (double lambda : lambdas) {
        TrainConfig cfg = base;
        cfg.lambda = lambda;
        char name[64];
        std::snprintf(name, sizeof name, "lambda_%g", lambda);
        const RunSummary s = train_into(root / name, data, cfg, "sweep-lambda", sweep_overwrite);
        csv += fmt(lambda) + "," + std::to_string(s.best_epoch) + "," + (s.best ? fmt(s.best->rank(1)) : "") + "," +
               (s.best ? fmt(s.best->mAP) : "") + "," + fmt(s.final_weight_distance) + "\n";
        std::cerr << name << " done: best_epoch " << s.best_epoch << '\n';
      }
      write_text(root / "sweep.csv", csv);
      std::cout << csv;
    } else if (*grads) {
      bool ok = true;
      for (const CheckResult& r : gradient_suite(grads_seed, grad_opts)) {
        std::cout << format_check(r) << '\n';
        ok = ok && r.passed();
      }
      return ok ? 0 : kExitOther;
    } else if (*bounds) {
      const CheckResult r = jensen_suite(bounds_seed, bound_opts);
      std::cout << format_check(r) << '\n';
      return r.passed() ? 0 : kExitOther;
    }
  } catch (const Error& e) {
    std::cerr << "udsx: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "udsx: " << e.what() << '\n';
    return kExitOther;
  }
  return 0;
}
