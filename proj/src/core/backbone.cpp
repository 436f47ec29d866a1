#include "udsx/backbone.hpp"

#include <cmath>
#include <cstdio>
#include <istream>
#include <ostream>
#include <string>

#include "udsx/error.hpp"
#include "udsx/kernels.hpp"
#include "udsx/rng.hpp"

namespace udsx {

void BackboneSpec::validate() const {
  require(in_channels >= 1, ErrorKind::Config, "model: input channels must be >= 1");
  require(!channels.empty(), ErrorKind::Config, "model.channels must not be empty");
  for (std::size_t c : channels) require(c >= 4, ErrorKind::Config, "model.channels: every stage needs >= 4 channels");
  require(num_classes >= 2, ErrorKind::Config, "model: need at least 2 classes");
  const std::size_t spatial = height * width;
  require(spatial > 0 && spatial % (std::size_t{1} << channels.size()) == 0, ErrorKind::Config,
          "model: height*width must be divisible by 2^stages");
}

BackboneModel::BackboneModel(const BackboneSpec& spec, std::uint64_t seed) : spec_(spec) {
  spec_.validate();
  Rng rng(seed);
  std::size_t in_c = spec_.in_channels;
  std::size_t spatial = spec_.height * spec_.width;
  for (std::size_t out_c : spec_.channels) {
    Stage s;
    s.spec = {in_c, out_c, 2};
    s.in_spatial = spatial;
    s.out_spatial = spatial / 2;
    s.weight = Matrix(out_c, in_c);
    s.bias.assign(out_c, 0.0);
    // Rectifier gain sqrt(6) on the stage weights keeps activation scale
    // roughly constant through depth; biases use the plain 1/sqrt(fan_in).
    const double bound = 1.0 / std::sqrt(static_cast<double>(in_c));
    std::uniform_real_distribution<double> uw(-std::sqrt(6.0) * bound, std::sqrt(6.0) * bound);
    std::uniform_real_distribution<double> ub(-bound, bound);
    for (auto& v : s.weight.values()) v = uw(rng);
    for (auto& v : s.bias) v = ub(rng);
    stages_.push_back(std::move(s));
    in_c = out_c;
    spatial /= 2;
  }
  classifier_.w = Matrix(spec_.num_classes, in_c);
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_c));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : classifier_.w.values()) v = u(rng);
}

std::vector<LayerShape> BackboneModel::layer_shapes() const {
  std::vector<LayerShape> out;
  for (const auto& s : stages_) out.push_back({s.spec.out_channels, s.out_spatial});
  return out;
}

std::vector<std::span<double>> BackboneModel::mutable_parameters() {
  ++version_;
  std::vector<std::span<double>> out;
  for (auto& s : stages_) {
    out.emplace_back(s.weight.values());
    out.emplace_back(s.bias);
  }
  out.emplace_back(classifier_.w.values());
  return out;
}

std::vector<std::span<const double>> BackboneModel::parameters() const {
  std::vector<std::span<const double>> out;
  for (const auto& s : stages_) {
    out.emplace_back(s.weight.values());
    out.emplace_back(s.bias);
  }
  out.emplace_back(classifier_.w.values());
  return out;
}

std::vector<std::string> BackboneModel::parameter_names() const {
  std::vector<std::string> out;
  for (std::size_t k = 0; k < stages_.size(); ++k) {
    out.push_back("stage" + std::to_string(k) + ".weight");
    out.push_back("stage" + std::to_string(k) + ".bias");
  }
  out.emplace_back("classifier");
  return out;
}

std::size_t BackboneModel::parameter_count() const {
  std::size_t n = 0;
  for (auto p : parameters()) n += p.size();
  return n;
}

ForwardTrace forward(const BackboneModel& model, std::span<const double> input, const PerturbHook* hook) {
  const auto& spec = model.spec();
  require(input.size() == spec.input_size(), ErrorKind::Shape,
          "forward: input has " + std::to_string(input.size()) + " values, expected " +
              std::to_string(spec.input_size()));
  const auto& k = kernels::active();
  const auto& stages = model.stages();

  ForwardTrace t;
  t.version = model.version();
  t.pooled.resize(stages.size());
  t.preact.resize(stages.size());
  t.outputs.resize(stages.size());

  const double* in = input.data();
  for (std::size_t si = 0; si < stages.size(); ++si) {
    const Stage& s = stages[si];
    const std::size_t cin = s.spec.in_channels, cout = s.spec.out_channels, sp = s.out_spatial;
    Vector& pooled = t.pooled[si];
    pooled.resize(cin * sp);
    for (std::size_t c = 0; c < cin; ++c) k.pool_pairs(in + c * s.in_spatial, pooled.data() + c * sp, sp);

    Vector& pre = t.preact[si];
    pre.resize(cout * sp);
    for (std::size_t o = 0; o < cout; ++o) {
      double* row = pre.data() + o * sp;
      std::fill(row, row + sp, s.bias[o]);
      for (std::size_t c = 0; c < cin; ++c) k.axpy(s.weight(o, c), pooled.data() + c * sp, row, sp);
    }
    Vector& out = t.outputs[si];
    out = pre;
    k.relu(out.data(), out.size());
    if (hook && hook->layer == si && hook->transform) hook->transform(out, LayerShape{cout, sp});
    in = out.data();
  }

  const Stage& last = stages.back();
  const std::size_t dim = last.spec.out_channels;
  t.embedding.resize(dim);
  const double inv = 1.0 / static_cast<double>(last.out_spatial);
  for (std::size_t c = 0; c < dim; ++c) t.embedding[c] = k.sum(in + c * last.out_spatial, last.out_spatial) * inv;

  const auto& w = model.classifier().w;
  t.logits.resize(w.rows());
  for (std::size_t j = 0; j < w.rows(); ++j) t.logits[j] = k.dot(w.row(j).data(), t.embedding.data(), dim);
  return t;
}

ModelGradients::ModelGradients(const BackboneModel& model) {
  for (const auto& s : model.stages()) {
    weight.emplace_back(s.weight.rows(), s.weight.cols());
    bias.emplace_back(s.bias.size(), 0.0);
  }
  classifier = Matrix(model.classifier().w.rows(), model.classifier().w.cols());
}

std::vector<std::span<double>> ModelGradients::blocks() {
  std::vector<std::span<double>> out;
  for (std::size_t i = 0; i < weight.size(); ++i) {
    out.emplace_back(weight[i].values());
    out.emplace_back(bias[i]);
  }
  out.emplace_back(classifier.values());
  return out;
}

std::vector<std::span<const double>> ModelGradients::blocks() const {
  std::vector<std::span<const double>> out;
  for (std::size_t i = 0; i < weight.size(); ++i) {
    out.emplace_back(weight[i].values());
    out.emplace_back(bias[i]);
  }
  out.emplace_back(classifier.values());
  return out;
}

void ModelGradients::zero() {
  for (auto b : blocks()) std::fill(b.begin(), b.end(), 0.0);
}

void backward(const BackboneModel& model, const ForwardTrace& trace, std::span<const double> grad_embedding,
              ModelGradients& grads, Vector* grad_input) {
  require(trace.version == model.version(), ErrorKind::Shape,
          "backward: stale trace (parameters changed since forward)");
  const auto& stages = model.stages();
  require(trace.outputs.size() == stages.size(), ErrorKind::Shape, "backward: trace does not match model");
  require(grad_embedding.size() == model.embedding_dim(), ErrorKind::Shape, "backward: embedding gradient size");
  require(grads.weight.size() == stages.size(), ErrorKind::Shape, "backward: gradient buffer does not match model");
  const auto& k = kernels::active();

  // d(mean over positions)/dx = 1/S at every position.
  const Stage& last = stages.back();
  Vector g(last.spec.out_channels * last.out_spatial);
  const double inv = 1.0 / static_cast<double>(last.out_spatial);
  for (std::size_t c = 0; c < last.spec.out_channels; ++c) {
    double* row = g.data() + c * last.out_spatial;
    std::fill(row, row + last.out_spatial, grad_embedding[c] * inv);
  }

  Vector gpool;
  for (std::size_t si = stages.size(); si-- > 0;) {
    const Stage& s = stages[si];
    const std::size_t cin = s.spec.in_channels, cout = s.spec.out_channels, sp = s.out_spatial;
    // Additive perturbations are constants: dL/dx_k passes straight through.
    k.relu_mask(trace.preact[si].data(), g.data(), g.size());

    Matrix& gw = grads.weight[si];
    Vector& gb = grads.bias[si];
    const Vector& pooled = trace.pooled[si];
    for (std::size_t o = 0; o < cout; ++o) {
      const double* go = g.data() + o * sp;
      gb[o] += k.sum(go, sp);
      for (std::size_t c = 0; c < cin; ++c) gw(o, c) += k.dot(go, pooled.data() + c * sp, sp);
    }

    if (si == 0 && grad_input == nullptr) break;
    gpool.assign(cin * sp, 0.0);
    for (std::size_t o = 0; o < cout; ++o)
      for (std::size_t c = 0; c < cin; ++c) k.axpy(s.weight(o, c), g.data() + o * sp, gpool.data() + c * sp, sp);

    Vector gin(cin * s.in_spatial);
    for (std::size_t c = 0; c < cin; ++c) {
      const double* src = gpool.data() + c * sp;
      double* dst = gin.data() + c * s.in_spatial;
      for (std::size_t p = 0; p < sp; ++p) dst[2 * p] = dst[2 * p + 1] = 0.5 * src[p];
    }
    g = std::move(gin);
  }
  if (grad_input) *grad_input = std::move(g);
}

namespace {

constexpr const char* kCkptMagic = "UDSX-CKPT";
constexpr int kCkptVersion = 1;

}  // namespace

void BackboneModel::save(std::ostream& out) const {
  out << kCkptMagic << ' ' << kCkptVersion << '\n';
  out << "input " << spec_.in_channels << ' ' << spec_.height << ' ' << spec_.width << '\n';
  out << "channels " << spec_.channels.size();
  for (auto c : spec_.channels) out << ' ' << c;
  out << '\n';
  out << "classes " << spec_.num_classes << '\n';
  const auto names = parameter_names();
  const auto params = parameters();
  char buf[32];
  for (std::size_t i = 0; i < params.size(); ++i) {
    out << "tensor " << names[i] << ' ' << params[i].size() << '\n';
    for (std::size_t j = 0; j < params[i].size(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g", params[i][j]);
      out << (j ? " " : "") << buf;
    }
    out << '\n';
  }
}

BackboneModel BackboneModel::load(std::istream& in) {
  std::string magic, tok;
  int version = 0;
  if (!(in >> magic >> version) || magic != kCkptMagic)
    fail(ErrorKind::Io, "checkpoint: bad magic '" + magic + "'");
  if (version != kCkptVersion) fail(ErrorKind::Io, "checkpoint: unsupported version " + std::to_string(version));
  BackboneSpec spec;
  std::size_t nstages = 0;
  if (!(in >> tok) || tok != "input" || !(in >> spec.in_channels >> spec.height >> spec.width))
    fail(ErrorKind::Io, "checkpoint: malformed input line");
  if (!(in >> tok) || tok != "channels" || !(in >> nstages)) fail(ErrorKind::Io, "checkpoint: malformed channels");
  spec.channels.resize(nstages);
  for (auto& c : spec.channels)
    if (!(in >> c)) fail(ErrorKind::Io, "checkpoint: truncated channel list");
  if (!(in >> tok) || tok != "classes" || !(in >> spec.num_classes)) fail(ErrorKind::Io, "checkpoint: malformed classes");

  BackboneModel model(spec, 0);
  const auto names = model.parameter_names();
  auto params = model.mutable_parameters();
  for (std::size_t i = 0; i < params.size(); ++i) {
    std::string name;
    std::size_t n = 0;
    if (!(in >> tok >> name >> n) || tok != "tensor")
      fail(ErrorKind::Io, "checkpoint: truncated before tensor " + names[i]);
    if (name != names[i] || n != params[i].size())
      fail(ErrorKind::Io, "checkpoint: tensor " + name + " does not match expected " + names[i]);
    for (auto& v : params[i])
      if (!(in >> v)) fail(ErrorKind::Io, "checkpoint: truncated inside tensor " + name);
  }
  return model;
}

}  // namespace udsx
