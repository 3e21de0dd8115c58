#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cpm/concepts.hpp"
#include "cpm/env.hpp"
#include "cpm/linalg.hpp"
#include "cpm/nn.hpp"
#include "cpm/rng.hpp"
#include "cpm/whitening.hpp"

// Concept policy model:
//   obs -> dense x2 -> LSTM -> x
//   [concept(x) ; residual(x)] -> IterNorm -> per-dimension affine
//   concept slice -> sigmoid (binary) / group softmax (discrete) / identity
//   [v_hat ; residual] -> policy head (logits), value head (scalar)
// Interventions overwrite v_hat after the activations and before the heads.
namespace cpm::policy {

enum class ModelKind : std::uint8_t { Hard, Soft, Base };
std::string_view model_kind_name(ModelKind kind);
ModelKind model_kind_from_name(std::string_view name);

struct ConceptPolicyConfig {
  int obs_dim = 0;
  int action_count = env::kActionCount;
  concepts::ConceptSchema schema;
  int k = 0;  // residual width
  std::vector<int> encoder_sizes{128, 128};
  int recurrent_size = 128;
  std::vector<int> head_sizes{128, 128};
  bool whiten = true;
  int whitening_iterations = 2;
  double whitening_momentum = 0.1;
  double whitening_eps = 1e-5;
  int max_sequence_length = 50;

  int j() const { return schema.dim; }
  int bottleneck() const { return j() + k; }
  ModelKind kind() const;
  void validate() const;  // throws ConfigError
};

// Standard scenario presets. Soft bottlenecks are 32 / 64 / 96 for 2v2 / 3v3 /
// 5v5; Hard uses k = 0; Base has no concepts and a 128-wide residual.
ConceptPolicyConfig preset(int n_per_team, ModelKind kind);
int soft_bottleneck(int n_per_team);  // throws ConfigError for unknown sizes

struct PolicyParams {
  std::vector<nn::Dense> encoder;
  nn::Lstm lstm;
  nn::Dense concept_layer;   // x -> j (absent when j = 0)
  nn::Dense residual_layer;  // x -> k (absent when k = 0)
  Matrix scale;              // 1 x (j+k), applied after whitening
  Matrix shift;              // 1 x (j+k)
  std::vector<nn::Dense> policy_head;
  std::vector<nn::Dense> value_head;

  struct Named {
    std::string name;
    Matrix* tensor;
  };
  // Every trainable tensor in a fixed order; names are stable archive keys.
  std::vector<Named> named_tensors();
  std::vector<Matrix*> tensors();
  std::size_t parameter_count() const;
};

struct ConceptPolicy {
  ConceptPolicyConfig config;
  PolicyParams params;
  whitening::WhiteningState whitening;
};

ConceptPolicy make_policy(const ConceptPolicyConfig& config, std::uint64_t seed);

enum class Provenance : std::uint8_t { Oracle, Manual };
std::string_view provenance_name(Provenance p);
Provenance provenance_from_name(std::string_view name);

struct Intervention {
  std::vector<bool> mask;  // length j
  Vector values;           // length j; read where mask is set
  Provenance provenance = Provenance::Manual;

  bool empty() const;
  std::size_t masked_count() const;
  friend bool operator==(const Intervention&, const Intervention&) = default;
};

// Throws UsageError unless the mask covers whole concept instances, matches
// the schema width, and discrete groups carry one-hot values.
void validate_intervention(const concepts::ConceptSchema& schema, const Intervention& intervention);

// Masks exactly the named concepts and copies their oracle values.
Intervention apply_oracle_intervention(const Vector& predicted, const Vector& truth,
                                       const concepts::ConceptSchema& schema, std::span<const std::string> subset);

// Overwrites masked entries of `concepts`.
Vector apply_intervention(const Vector& concepts, const Intervention& intervention);

struct PolicyOutput {
  Matrix logits;             // batch x |u|
  Vector values;             // batch
  Matrix concepts;           // batch x j, after intervention
  Matrix predicted_concepts; // batch x j, before intervention
  Matrix residual;           // batch x k
};

// One inference step for a batch of agents (rows of `obs`). Whitening uses
// the running statistics. `interventions` is empty or holds one entry per
// row (entries may be empty). `hidden` is advanced in place.
PolicyOutput forward(const ConceptPolicy& model, const Matrix& obs, nn::RecurrentState& hidden,
                     std::span<const Intervention> interventions = {});

enum class ActMode : std::uint8_t { Sample, Greedy };

struct ActionChoice {
  env::Action action = env::Action::NoOp;
  int index = 0;
  double logprob = 0.0;
};

ActionChoice act(const Eigen::Ref<const RowVector>& logits, Rng& rng, ActMode mode);

// Sequence-major training batch: obs[t] is B x obs_dim, masks[t] marks real
// (1) or padded (0) rows. Padded rows never reach the whitening statistics
// or the outputs.
struct SequenceBatch {
  std::vector<Matrix> obs;
  std::vector<Vector> masks;
  nn::RecurrentState initial;
};

struct RowRef {
  int t = 0;
  int b = 0;
};

struct HeadCache {
  Matrix x;  // recurrent outputs of the valid rows
  nn::DenseCache concept_cache, residual_cache;
  whitening::WhiteningCache white_cache;
  Matrix normalized;  // whitened, before the affine
  Matrix concepts;    // post-activation
  Matrix head_in;
  std::vector<nn::DenseCache> policy_caches, value_caches;
};

struct SequenceForward {
  std::vector<RowRef> rows;  // t-major order of valid rows
  Matrix logits;
  Vector values;
  Matrix concepts;
  std::vector<nn::DenseCache> encoder_caches;
  nn::LstmSequenceCache lstm_cache;
  HeadCache head;
  whitening::Mode mode = whitening::Mode::Train;
};

// Train mode whitens with minibatch statistics and updates the running
// statistics in `model.whitening`.
SequenceForward forward_sequence(ConceptPolicy& model, const SequenceBatch& batch, whitening::Mode mode);

struct PolicyGrad {
  std::vector<Matrix> tensors;  // aligned with PolicyParams::tensors()
  static PolicyGrad zeros_like(ConceptPolicy& model);
  double norm() const;
  void scale(double factor);
};

// Gradients w.r.t. every parameter given dL/dlogits, dL/dvalues and
// dL/dconcepts (post-activation) on the valid rows.
PolicyGrad backward_sequence(const ConceptPolicy& model, const SequenceForward& fwd, const Matrix& d_logits,
                             const Vector& d_values, const Matrix& d_concepts);

}  // namespace cpm::policy
