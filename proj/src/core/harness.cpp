#include "udsx/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <sstream>

#include "udsx/error.hpp"
#include "udsx/kernels.hpp"
#include "udsx/sem_losses.hpp"

namespace udsx {

namespace {

constexpr std::uint64_t kTagInit = 0x696e6974;
constexpr std::uint64_t kTagSampler = 0x73616d70;
constexpr std::uint64_t kTagStep = 0x73746570;

const std::map<std::string, Mode>& mode_names() {
  static const std::map<std::string, Mode> names{
      {"udsx", Mode::Udsx},       {"dex_only", Mode::DexOnly}, {"pste_only", Mode::PsteOnly},
      {"dex_naive", Mode::DexNaive}, {"dex_dsd", Mode::DexDsd},   {"dex_dsd_pste", Mode::DexDsdPste}};
  return names;
}

}  // namespace

Mode parse_mode(const std::string& name) {
  auto it = mode_names().find(name);
  if (it == mode_names().end())
    fail(ErrorKind::Config,
         "mode: unknown value '" + name + "' (expected udsx|dex_only|pste_only|dex_naive|dex_dsd|dex_dsd_pste)");
  return it->second;
}

std::string to_string(Mode m) {
  for (const auto& [k, v] : mode_names())
    if (v == m) return k;
  return "?";
}

void TrainConfig::validate() const {
  require(beta1 >= 0.0 && beta2 >= 0.0, ErrorKind::Config, "beta1/beta2 must be >= 0");
  require(lambda >= 0.0, ErrorKind::Config, "lambda must be >= 0");
  require(lr > 0.0, ErrorKind::Config, "lr must be > 0");
  require(warmup_epochs >= 0, ErrorKind::Config, "warmup_epochs must be >= 0");
  require(total_epochs >= 1, ErrorKind::Config, "epochs must be >= 1");
  require(warmup_epochs <= total_epochs, ErrorKind::Config, "warmup_epochs must not exceed epochs");
  require(std::is_sorted(decay_epochs.begin(), decay_epochs.end()), ErrorKind::Config,
          "decay_epochs must be sorted");
  require(decay_factor > 0.0, ErrorKind::Config, "decay_factor must be > 0");
  require(weight_decay >= 0.0, ErrorKind::Config, "weight_decay must be >= 0");
  require(batch_p >= 2 && batch_k >= 2, ErrorKind::Config, "batch_p and batch_k must be >= 2");
  require(eval_every >= 0, ErrorKind::Config, "eval.every must be >= 0");
  require(eval_select == "map" || eval_select == "rank1", ErrorKind::Config, "eval.select must be map|rank1");
  require(std::find(eval_ranks.begin(), eval_ranks.end(), 1) != eval_ranks.end(), ErrorKind::Config,
          "eval.ranks must include 1");
  require(stats_momentum >= 0.0 && stats_momentum < 1.0, ErrorKind::Config, "stats.momentum must be in [0, 1)");
  pste.validate();
  csr.validate();
  require(pste.layers.back() < channels.size(), ErrorKind::Config, "pste.layers refers to a missing stage");
}

StreamPlan plan_for(const TrainConfig& cfg) {
  StreamPlan p;
  switch (cfg.mode) {
    case Mode::Udsx:
      p = {true, false, true, cfg.pste.enabled, true, false};
      break;
    case Mode::DexOnly:
      p = {true, false, false, false, false, false};
      break;
    case Mode::PsteOnly:
      p = {false, false, true, cfg.pste.enabled, false, true};
      break;
    case Mode::DexNaive:
      p = {true, cfg.pste.enabled, false, false, false, false};
      break;
    case Mode::DexDsd:
      p = {true, false, true, false, false, false};
      break;
    case Mode::DexDsdPste:
      p = {true, false, true, cfg.pste.enabled, false, false};
      break;
  }
  return p;
}

DualStreamInputs duplicate_batch(const Batch& batch, std::uint64_t step_seed) {
  DualStreamInputs d;
  d.dex = &batch;
  d.pste = &batch;
  d.dex_seed = derive_seed(step_seed, {0});
  d.pste_seed = derive_seed(step_seed, {1});
  d.forward_passes = 2 * batch.size();
  return d;
}

double lr_schedule(const TrainConfig& cfg, int epoch) {
  require(epoch >= 0, ErrorKind::Config, "lr_schedule: epoch must be >= 0");
  if (epoch < cfg.warmup_epochs)
    return cfg.lr * (0.01 + 0.99 * static_cast<double>(epoch) / static_cast<double>(cfg.warmup_epochs));
  double lr = cfg.lr;
  for (int e : cfg.decay_epochs)
    if (epoch >= e) lr *= cfg.decay_factor;
  return lr;
}

double weight_distance_track(const BackboneModel& model) {
  return max_interclass_weight_distance(model.classifier());
}

Optimizer::Optimizer(const BackboneModel& model, const TrainConfig& cfg)
    : kind_(cfg.optimizer),
      weight_decay_(cfg.weight_decay),
      momentum_(cfg.momentum),
      b1_(cfg.adam_beta1),
      b2_(cfg.adam_beta2),
      eps_(cfg.adam_eps) {
  for (auto p : model.parameters()) {
    m_.emplace_back(p.size(), 0.0);
    v_.emplace_back(kind_ == OptimizerKind::Adam ? p.size() : 0, 0.0);
  }
}

void Optimizer::step(BackboneModel& model, const ModelGradients& grads, double lr) {
  ++t_;
  auto params = model.mutable_parameters();
  const auto g = grads.blocks();
  require(params.size() == g.size() && params.size() == m_.size(), ErrorKind::Shape,
          "optimizer: gradient layout does not match parameters");
  const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
  for (std::size_t b = 0; b < params.size(); ++b) {
    auto p = params[b];
    const auto gb = g[b];
    Vector& m = m_[b];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = gb[i] + weight_decay_ * p[i];
      if (kind_ == OptimizerKind::Momentum) {
        m[i] = momentum_ * m[i] + gi;
        p[i] -= lr * m[i];
      } else {
        Vector& v = v_[b];
        m[i] = b1_ * m[i] + (1.0 - b1_) * gi;
        v[i] = b2_ * v[i] + (1.0 - b2_) * gi * gi;
        p[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
      }
    }
  }
}

namespace {

struct StreamResult {
  std::vector<ForwardTrace> traces;
  std::vector<PsteDecision> decisions;
  Matrix embeddings;
};

StreamResult run_stream(const BackboneModel& model, const Batch& batch, const DomainStats& stats,
                        const TrainConfig& cfg, int epoch, bool perturb, std::uint64_t seed) {
  StreamResult out;
  const std::size_t m = batch.size();
  out.embeddings = Matrix(m, model.embedding_dim());
  out.traces.reserve(m);
  Rng rng(seed);
  const auto candidates = perturb ? candidate_layers(cfg.pste, epoch) : std::vector<std::size_t>{};
  for (std::size_t i = 0; i < m; ++i) {
    if (!perturb) {
      out.traces.push_back(forward(model, batch.inputs[i]));
    } else {
      PsteDecision dec;
      dec.epoch = epoch;
      dec.layer = select_layer(candidates, rng);
      const int d = batch.domains[i];
      const bool warm = stats.channel_variance(d, dec.layer).count() >= cfg.cold_start;
      PerturbHook hook;
      hook.layer = dec.layer;
      hook.transform = [&](std::span<double> x, const LayerShape& shape) {
        dec.channels = stratify_channels(x, shape, cfg.pste.strata_lo, cfg.pste.strata_hi);
        if (warm)
          dec.perturbation = apply_expansion_inplace(x, shape, d, dec.layer, stats, dec.channels, rng,
                                                     cfg.pste.per_element);
        else
          dec.perturbation.assign(x.size(), 0.0);
      };
      out.traces.push_back(forward(model, batch.inputs[i], &hook));
      out.decisions.push_back(std::move(dec));
    }
    std::copy(out.traces.back().embedding.begin(), out.traces.back().embedding.end(), out.embeddings.row(i).begin());
  }
  return out;
}

// Mean classification loss over the stream; adds scale/m * grads.
double classification_term(const BackboneModel& model, const Batch& batch, const Matrix& f,
                           const std::map<int, Matrix>* sigmas, const TrainConfig& cfg, double weight,
                           Matrix& grad_f, Matrix& grad_w) {
  const std::size_t m = batch.size();
  const double scale = weight / static_cast<double>(m);
  DexConfig dc{cfg.lambda, cfg.freeze_gamma};
  double total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const Matrix* sigma = nullptr;
    if (sigmas) {
      auto it = sigmas->find(batch.domains[i]);
      if (it != sigmas->end()) sigma = &it->second;
    }
    total += softmax_loss_accumulate(model.classifier(), f.row(i), batch.labels[i], sigma, dc, scale,
                                     grad_f.row(i), grad_w);
  }
  return total / static_cast<double>(m);
}

bool all_zero(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0; });
}

void backprop_stream(const BackboneModel& model, const StreamResult& s, const Matrix& grad_f,
                     ModelGradients& grads) {
  for (std::size_t i = 0; i < s.traces.size(); ++i) {
    if (all_zero(grad_f.row(i))) continue;
    backward(model, s.traces[i], grad_f.row(i), grads);
  }
}

std::string describe(const LossReport& r) {
  std::ostringstream os;
  auto put = [&](const char* name, const std::optional<double>& v) {
    if (v) os << ' ' << name << '=' << *v;
  };
  os << "epoch " << r.epoch << ':';
  put("ce", r.ce);
  put("dex", r.dex);
  put("csp", r.csp);
  put("csc", r.csc);
  put("cst", r.cst);
  put("csr", r.csr);
  os << " se=" << r.se << " udsx=" << r.udsx;
  return os.str();
}

}  // namespace

StepOutcome compute_step(const BackboneModel& model, const Batch& batch, const DomainStats& stats,
                         const TrainConfig& cfg, int epoch, std::uint64_t step_seed) {
  const StreamPlan plan = plan_for(cfg);
  const std::size_t m = batch.size();
  require(m >= 1 && batch.inputs.size() == m && batch.domains.size() == m, ErrorKind::Shape,
          "compute_step: malformed batch");
  const std::size_t dim = model.embedding_dim();

  // Covariance snapshot; cold domains are left out so their gamma is zero.
  std::map<int, Matrix> sigmas;
  if (plan.dex_stream && cfg.lambda > 0.0) {
    for (int d : batch.domains) {
      if (sigmas.count(d)) continue;
      const auto& rc = stats.covariance(d);
      if (rc.count() >= cfg.cold_start) sigmas.emplace(d, rc.covariance());
    }
  }

  const DualStreamInputs streams = duplicate_batch(batch, step_seed);
  StepOutcome out{LossReport{}, ModelGradients(model), {}, {}};
  out.report.epoch = epoch;

  StreamResult dex, ce;
  if (plan.dex_stream) dex = run_stream(model, *streams.dex, stats, cfg, epoch, plan.dex_perturbed, streams.dex_seed);
  if (plan.ce_stream) ce = run_stream(model, *streams.pste, stats, cfg, epoch, plan.ce_perturbed, streams.pste_seed);

  Matrix grad_dex(m, dim), grad_ce(m, dim);
  double se = 0.0;
  if (plan.dex_stream) {
    const double v = classification_term(model, batch, dex.embeddings, &sigmas, cfg, cfg.beta2, grad_dex,
                                         out.grads.classifier);
    out.report.dex = v;
    se += cfg.beta2 * v;
  }
  if (plan.ce_stream) {
    const double v =
        classification_term(model, batch, ce.embeddings, nullptr, cfg, cfg.beta1, grad_ce, out.grads.classifier);
    out.report.ce = v;
    se += cfg.beta1 * v;
  }
  out.report.se = se;

  double csr_total = 0.0;
  if (plan.cross_stream_csr) {
    StreamBatch sb{batch.labels, batch.domains, dex.embeddings, ce.embeddings};
    const CsrBreakdown c = csr_loss(sb, cfg.csr);
    out.report.csp = c.csp;
    out.report.csc = c.csc;
    out.report.cst = c.cst;
    csr_total = c.total;
    out.report.csr = c.total;
    kernels::axpy(1.0, c.grad_dex.data(), grad_dex.data(), grad_dex.size());
    kernels::axpy(1.0, c.grad_pste.data(), grad_ce.data(), grad_ce.size());
  } else if (plan.single_stream_metric) {
    const SingleLoss center = center_loss(ce.embeddings, batch.labels);
    const SingleLoss trip = batch_hard_triplet(ce.embeddings, batch.labels, cfg.csr.margin);
    out.report.csc = center.value;
    out.report.cst = trip.value;
    csr_total = cfg.csr.psi2 * center.value + cfg.csr.psi3 * trip.value;
    out.report.csr = csr_total;
    if (cfg.csr.psi2 != 0.0) kernels::axpy(cfg.csr.psi2, center.grad.data(), grad_ce.data(), grad_ce.size());
    if (cfg.csr.psi3 != 0.0) kernels::axpy(cfg.csr.psi3, trip.grad.data(), grad_ce.data(), grad_ce.size());
  }
  out.report.udsx = se + csr_total;

  if (plan.dex_stream) backprop_stream(model, dex, grad_dex, out.grads);
  if (plan.ce_stream) backprop_stream(model, ce, grad_ce, out.grads);

  out.decisions = plan.ce_perturbed ? std::move(ce.decisions) : std::move(dex.decisions);
  if (plan.dex_stream && !plan.dex_perturbed) {
    out.clean_traces = std::move(dex.traces);
  } else if (plan.ce_stream && !plan.ce_perturbed) {
    out.clean_traces = std::move(ce.traces);
  } else {
    // No clean stream in this mode; statistics still come from clean activations.
    out.clean_traces.reserve(m);
    for (std::size_t i = 0; i < m; ++i) out.clean_traces.push_back(forward(model, batch.inputs[i]));
  }
  return out;
}

LossReport train_step(BackboneModel& model, Optimizer& opt, const Batch& batch, DomainStats& stats,
                      const TrainConfig& cfg, int epoch, std::uint64_t step_seed) {
  StepOutcome s = compute_step(model, batch, stats, cfg, epoch, step_seed);
  const LossReport& r = s.report;
  for (const auto& v : {r.ce, r.dex, r.csp, r.csc, r.cst, r.csr, std::optional<double>(r.se),
                        std::optional<double>(r.udsx)})
    if (v && !std::isfinite(*v)) fail(ErrorKind::Numeric, "non-finite loss, aborting: " + describe(r));

  opt.step(model, s.grads, lr_schedule(cfg, epoch));

  for (std::size_t i = 0; i < batch.size(); ++i) {
    const ForwardTrace& t = s.clean_traces[i];
    stats.update_covariance(batch.domains[i], t.embedding);
    for (std::size_t k = 0; k < t.outputs.size(); ++k) stats.update_channel_variance(batch.domains[i], k, t.outputs[k]);
  }
  s.report.max_weight_distance = weight_distance_track(model);
  return s.report;
}

PkSampler::PkSampler(const Dataset& data, std::size_t p, std::size_t k) : data_(&data), p_(p), k_(k) {
  by_class_.resize(static_cast<std::size_t>(data.n_classes));
  for (std::size_t i : data.indices(Split::Train)) by_class_[static_cast<std::size_t>(data.records[i].label)].push_back(i);
  for (std::size_t y = 0; y < by_class_.size(); ++y) {
    train_size_ += by_class_[y].size();
    if (by_class_[y].size() >= k_) classes_.push_back(static_cast<int>(y));
  }
  require(classes_.size() >= p_, ErrorKind::Config,
          "sampler: batch_p=" + std::to_string(p_) + " but only " + std::to_string(classes_.size()) +
              " classes have >= batch_k=" + std::to_string(k_) + " training samples");
  steps_ = std::max<std::size_t>(1, train_size_ / (p_ * k_));
}

Batch PkSampler::next(Rng& rng) const {
  std::vector<int> classes = classes_;
  std::shuffle(classes.begin(), classes.end(), rng);
  Batch b;
  for (std::size_t c = 0; c < p_; ++c) {
    std::vector<std::size_t> pool = by_class_[static_cast<std::size_t>(classes[c])];
    for (std::size_t j = 0; j < k_; ++j) {
      std::uniform_int_distribution<std::size_t> u(j, pool.size() - 1);
      std::swap(pool[j], pool[u(rng)]);
      const Record& r = data_->records[pool[j]];
      b.inputs.emplace_back(r.pixels);
      b.labels.push_back(r.label);
      b.domains.push_back(r.domain);
    }
  }
  return b;
}

BackboneModel make_model(const Dataset& data, const TrainConfig& cfg) {
  BackboneSpec spec;
  spec.in_channels = data.channels;
  spec.height = data.height;
  spec.width = data.width;
  spec.channels = cfg.channels;
  spec.num_classes = static_cast<std::size_t>(data.n_classes);
  return BackboneModel(spec, derive_seed(cfg.seed, {kTagInit}));
}

DomainStats make_stats(const BackboneModel& model, const Dataset& data, const TrainConfig& cfg) {
  DomainStats stats(model.embedding_dim(), model.layer_shapes(), cfg.stats_momentum);
  for (const Record& r : data.records)
    if (r.split == Split::Train) stats.register_domain(r.domain);
  return stats;
}

int best_epoch(const std::vector<EpochLog>& log, const std::string& select) {
  int best = -1;
  double best_v = -1.0;
  for (const auto& row : log) {
    if (!row.eval) continue;
    const double v = select == "rank1" ? row.eval->rank(1) : row.eval->mAP;
    if (v > best_v) best_v = v, best = row.epoch;
  }
  return best;
}

TrainRun run_training(const Dataset& data, const TrainConfig& cfg, const std::function<void(const EpochLog&)>& on_epoch) {
  cfg.validate();
  TrainRun run;
  run.model = make_model(data, cfg);
  run.stats = make_stats(run.model, data, cfg);
  Optimizer opt(run.model, cfg);
  PkSampler sampler(data, cfg.batch_p, cfg.batch_k);
  const bool has_eval_split = !data.indices(Split::Query).empty();

  for (int epoch = 0; epoch < cfg.total_epochs; ++epoch) {
    Rng srng(derive_seed(cfg.seed, {kTagSampler, static_cast<std::uint64_t>(epoch)}));
    EpochLog row;
    row.epoch = epoch;
    row.lr = lr_schedule(cfg, epoch);
    LossReport mean;
    mean.epoch = epoch;
    const auto steps = sampler.steps_per_epoch();
    auto add = [&](std::optional<double>& dst, const std::optional<double>& v) {
      if (v) dst = dst.value_or(0.0) + *v / static_cast<double>(steps);
    };
    for (std::size_t s = 0; s < steps; ++s) {
      const Batch batch = sampler.next(srng);
      const LossReport r = train_step(run.model, opt, batch, run.stats, cfg, epoch,
                                      derive_seed(cfg.seed, {kTagStep, static_cast<std::uint64_t>(epoch), s}));
      add(mean.ce, r.ce);
      add(mean.dex, r.dex);
      add(mean.csp, r.csp);
      add(mean.csc, r.csc);
      add(mean.cst, r.cst);
      add(mean.csr, r.csr);
      mean.se += r.se / static_cast<double>(steps);
      mean.udsx += r.udsx / static_cast<double>(steps);
    }
    mean.max_weight_distance = weight_distance_track(run.model);
    row.losses = mean;
    const bool last = epoch + 1 == cfg.total_epochs;
    if (has_eval_split && cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || last))
      row.eval = evaluate_held_out(run.model, data, cfg.eval_ranks, cfg.eval_distance);
    if (on_epoch) on_epoch(row);
    run.log.push_back(std::move(row));
  }
  run.best_epoch = best_epoch(run.log, cfg.eval_select);
  for (const auto& row : run.log)
    if (row.epoch == run.best_epoch) run.best = row.eval;
  if (!run.log.empty()) run.final_eval = run.log.back().eval;
  return run;
}

std::string run_log_header(const std::vector<int>& ranks) {
  std::string h = "epoch,lr,loss_ce,loss_dex,loss_csp,loss_csc,loss_cst,loss_se,loss_csr,loss_udsx,max_weight_dist";
  for (int k : ranks) h += ",rank" + std::to_string(k);
  h += ",map";
  return h;
}

std::string run_log_row(const EpochLog& row, const std::vector<int>& ranks) {
  char buf[40];
  auto num = [&](double v) {
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return std::string(buf);
  };
  auto opt = [&](const std::optional<double>& v) { return v ? num(*v) : std::string(); };
  const LossReport& l = row.losses;
  std::string s = std::to_string(row.epoch) + "," + num(row.lr) + "," + opt(l.ce) + "," + opt(l.dex) + "," +
                  opt(l.csp) + "," + opt(l.csc) + "," + opt(l.cst) + "," + num(l.se) + "," + opt(l.csr) + "," +
                  num(l.udsx) + "," + num(l.max_weight_distance);
  for (int k : ranks) s += "," + (row.eval ? num(row.eval->rank(k)) : std::string());
  s += "," + (row.eval ? num(row.eval->mAP) : std::string());
  return s;
}

}  // namespace udsx
