#pragma once
// Dual-stream training. A batch is duplicated into an implicit stream (clean
// forward, DEX loss) and an explicit stream (PSTE-perturbed forward, CE loss)
// that share one parameter store; the reunification losses tie the two
// embeddings together. The ablation modes are degenerate configurations of
// the same step.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "udsx/backbone.hpp"
#include "udsx/csr.hpp"
#include "udsx/domain_stats.hpp"
#include "udsx/eval.hpp"
#include "udsx/pste.hpp"
#include "udsx/synthdata.hpp"

namespace udsx {

enum class Mode { Udsx, DexOnly, PsteOnly, DexNaive, DexDsd, DexDsdPste };

Mode parse_mode(const std::string& name);
std::string to_string(Mode m);

enum class OptimizerKind { Adam, Momentum };

struct TrainConfig {
  Mode mode = Mode::Udsx;
  double beta1 = 1.0;
  double beta2 = 1.0;
  double lambda = 15.0;
  bool freeze_gamma = false;

  double lr = 1.75e-4;
  int warmup_epochs = 10;
  std::vector<int> decay_epochs{30, 55};
  double decay_factor = 0.1;
  double weight_decay = 5e-4;
  OptimizerKind optimizer = OptimizerKind::Adam;
  double momentum = 0.9;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;

  std::size_t batch_p = 16;
  std::size_t batch_k = 2;
  int total_epochs = 120;
  std::uint64_t seed = 0;

  std::vector<std::size_t> channels{8, 12, 16, 24, 32};
  PsteConfig pste;
  CsrConfig csr;
  std::size_t cold_start = 32;
  double stats_momentum = 0.0;

  int eval_every = 1;
  Distance eval_distance = Distance::Euclidean;
  std::vector<int> eval_ranks{1, 5, 10};
  std::string eval_select = "map";  // map | rank1

  void validate() const;
};

// Which streams run and what each one optimizes.
struct StreamPlan {
  bool dex_stream = false;
  bool dex_perturbed = false;
  bool ce_stream = false;
  bool ce_perturbed = false;
  bool cross_stream_csr = false;
  bool single_stream_metric = false;  // standard center + triplet on the CE stream
};

StreamPlan plan_for(const TrainConfig& cfg);

struct LossReport {
  int epoch = 0;
  std::optional<double> ce;
  std::optional<double> dex;
  std::optional<double> csp;
  std::optional<double> csc;
  std::optional<double> cst;
  std::optional<double> csr;
  double se = 0.0;
  double udsx = 0.0;
  double max_weight_distance = 0.0;
};

struct Batch {
  std::vector<std::span<const double>> inputs;
  std::vector<int> labels;
  std::vector<int> domains;

  std::size_t size() const noexcept { return labels.size(); }
};

// Two views of the same samples. The views alias one Batch; only the rng
// streams differ.
struct DualStreamInputs {
  const Batch* dex = nullptr;
  const Batch* pste = nullptr;
  std::uint64_t dex_seed = 0;
  std::uint64_t pste_seed = 0;
  std::size_t forward_passes = 0;
};

DualStreamInputs duplicate_batch(const Batch& batch, std::uint64_t step_seed);

class Optimizer {
 public:
  Optimizer(const BackboneModel& model, const TrainConfig& cfg);
  void step(BackboneModel& model, const ModelGradients& grads, double lr);
  std::size_t steps() const noexcept { return t_; }

 private:
  OptimizerKind kind_;
  double weight_decay_, momentum_, b1_, b2_, eps_;
  std::size_t t_ = 0;
  std::vector<Vector> m_, v_;
};

struct StepOutcome {
  LossReport report;
  ModelGradients grads;
  // Clean forward traces (one per sample) used for the statistics update.
  std::vector<ForwardTrace> clean_traces;
  std::vector<PsteDecision> decisions;
};

// Loss and parameter gradients of one step without touching the model or the
// statistics. Deterministic given step_seed.
StepOutcome compute_step(const BackboneModel& model, const Batch& batch, const DomainStats& stats,
                         const TrainConfig& cfg, int epoch, std::uint64_t step_seed);

// compute_step, NaN check, one optimizer update, then statistics update.
LossReport train_step(BackboneModel& model, Optimizer& opt, const Batch& batch, DomainStats& stats,
                      const TrainConfig& cfg, int epoch, std::uint64_t step_seed);

double lr_schedule(const TrainConfig& cfg, int epoch);

double weight_distance_track(const BackboneModel& model);

// P classes x K instances per batch, drawn from the training split.
class PkSampler {
 public:
  PkSampler(const Dataset& data, std::size_t p, std::size_t k);
  Batch next(Rng& rng) const;
  std::size_t steps_per_epoch() const noexcept { return steps_; }
  std::size_t train_size() const noexcept { return train_size_; }

 private:
  const Dataset* data_;
  std::size_t p_, k_, steps_ = 0, train_size_ = 0;
  std::vector<int> classes_;
  std::vector<std::vector<std::size_t>> by_class_;
};

struct EpochLog {
  int epoch = 0;
  double lr = 0.0;
  LossReport losses;  // epoch means
  std::optional<RetrievalResult> eval;
};

struct TrainRun {
  std::vector<EpochLog> log;
  BackboneModel model;
  DomainStats stats;
  int best_epoch = -1;
  std::optional<RetrievalResult> best;
  std::optional<RetrievalResult> final_eval;
};

BackboneModel make_model(const Dataset& data, const TrainConfig& cfg);
DomainStats make_stats(const BackboneModel& model, const Dataset& data, const TrainConfig& cfg);

TrainRun run_training(const Dataset& data, const TrainConfig& cfg,
                      const std::function<void(const EpochLog&)>& on_epoch = {});

int best_epoch(const std::vector<EpochLog>& log, const std::string& select);

std::string run_log_header(const std::vector<int>& ranks);
std::string run_log_row(const EpochLog& row, const std::vector<int>& ranks);

}  // namespace udsx
