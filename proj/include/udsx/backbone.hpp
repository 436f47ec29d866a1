#pragma once
// Staged feature extractor. Each stage averages adjacent spatial pairs,
// mixes channels with a dense affine map at every site, then applies a
// rectifier. The embedding is the spatial mean of the last stage and the
// classifier is a bias-free linear layer on top.

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "udsx/domain_stats.hpp"
#include "udsx/matrix.hpp"
#include "udsx/sem_losses.hpp"

namespace udsx {

struct StageSpec {
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t spatial_reduction = 2;
};

struct BackboneSpec {
  std::size_t in_channels = 3;
  std::size_t height = 32;
  std::size_t width = 16;
  std::vector<std::size_t> channels{8, 12, 16, 24, 32};
  std::size_t num_classes = 20;

  std::size_t input_size() const { return in_channels * height * width; }
  void validate() const;
};

struct Stage {
  StageSpec spec;
  std::size_t in_spatial = 0;
  std::size_t out_spatial = 0;
  Matrix weight;  // out_channels x in_channels
  Vector bias;    // out_channels
};

class BackboneModel {
 public:
  BackboneModel() = default;
  BackboneModel(const BackboneSpec& spec, std::uint64_t seed);

  const BackboneSpec& spec() const noexcept { return spec_; }
  const std::vector<Stage>& stages() const noexcept { return stages_; }
  const ClassifierWeights& classifier() const noexcept { return classifier_; }
  std::size_t embedding_dim() const noexcept { return spec_.channels.back(); }
  std::vector<LayerShape> layer_shapes() const;

  // Mutable access bumps the parameter version so older traces are rejected.
  std::vector<std::span<double>> mutable_parameters();
  std::vector<std::span<const double>> parameters() const;
  std::vector<std::string> parameter_names() const;
  std::size_t parameter_count() const;

  std::uint64_t version() const noexcept { return version_; }

  void save(std::ostream& out) const;
  static BackboneModel load(std::istream& in);

 private:
  BackboneSpec spec_;
  std::vector<Stage> stages_;
  ClassifierWeights classifier_;
  std::uint64_t version_ = 0;
};

struct ForwardTrace {
  std::vector<Vector> pooled;   // stage input after pooling, in_channels x out_spatial
  std::vector<Vector> preact;   // out_channels x out_spatial
  std::vector<Vector> outputs;  // x_k after the rectifier (and after the hook, if any)
  Vector embedding;
  Vector logits;
  std::uint64_t version = 0;
};

// Replaces x_k by transform(x_k) before stage k+1 sees it.
struct PerturbHook {
  std::size_t layer = 0;
  std::function<void(std::span<double> feature, const LayerShape& shape)> transform;
};

ForwardTrace forward(const BackboneModel& model, std::span<const double> input, const PerturbHook* hook = nullptr);

// Same layout as BackboneModel::mutable_parameters().
struct ModelGradients {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;
  Matrix classifier;

  explicit ModelGradients(const BackboneModel& model);
  ModelGradients() = default;
  std::vector<std::span<double>> blocks();
  std::vector<std::span<const double>> blocks() const;
  void zero();
};

// Accumulates d(loss)/d(params) of the backbone stages given dL/d(embedding).
// The classifier gradient is produced by the losses, not here.
void backward(const BackboneModel& model, const ForwardTrace& trace, std::span<const double> grad_embedding,
              ModelGradients& grads, Vector* grad_input = nullptr);

}  // namespace udsx
