#pragma once

#include <span>
#include <vector>

#include "cpm/concepts.hpp"
#include "cpm/linalg.hpp"

// Training objectives. The trainer minimizes
//   total = policy_loss + value_coef * value_loss - entropy_coef * entropy
//           + concept_coef * concept_loss,
// so lowering `total` raises the clipped surrogate advantage objective while
// pushing the concept layer towards the oracle values.
namespace cpm::losses {

struct LossConfig {
  double gamma = 0.99;
  double lambda = 0.95;
  double clip = 0.2;
  double value_coef = 0.5;
  double concept_coef = 10.0;
  double focal_gamma = 2.0;

  void validate() const;  // throws ConfigError
};

// Weights applied to one minibatch (entropy_coef comes from the schedule).
struct LossCoeffs {
  double clip = 0.2;
  double value = 0.5;
  double entropy = 0.01;
  double concept_weight = 10.0;
};

struct LossBreakdown {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double concept_loss = 0.0;
  std::vector<double> concept_terms;  // one per schema concept
  double total = 0.0;
};

inline constexpr double kLogFloor = 1e-12;

// -(1 - p_t)^gamma * log(max(p_t, 1e-12)).
double focal_loss(std::span<const double> probs, int target, double gamma);
double focal_loss_of(double p_target, double gamma);
// d focal / d p_target (zero where the log argument is clamped).
double focal_loss_derivative(double p_target, double gamma);

struct ConceptLoss {
  double total = 0.0;                 // mean over rows of the per-row sum
  std::vector<double> per_concept;    // mean over rows, aligned with schema.specs
  Matrix grad;                        // d total / d predicted
};

// `predicted` holds post-activation concept values (simplex slices for
// groups, sigmoid outputs for binary nodes). Truth is the oracle vector.
ConceptLoss concept_loss(const Matrix& predicted, const Matrix& truth, const concepts::ConceptSchema& schema,
                         double gamma);

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

// `bootstrap_value` is V(s_T) after the last step; it is ignored when the
// last step is terminal. dones[t] stops bootstrapping from step t+1.
GaeResult gae_advantages(std::span<const double> rewards, std::span<const double> values,
                         std::span<const bool> dones, double gamma, double lambda, double bootstrap_value);

// Rescales to zero mean and unit standard deviation (no-op for size < 2).
void normalize_advantages(std::span<double> advantages);

LossBreakdown ppo_objective(std::span<const double> logp_new, std::span<const double> logp_old,
                            std::span<const double> advantages, std::span<const double> values_new,
                            std::span<const double> returns, double entropy, double concept_loss,
                            std::vector<double> concept_terms, const LossCoeffs& coeffs);

// Policy, value and entropy part of the objective together with its
// gradient w.r.t. the action logits and value predictions.
struct ActorCriticTerms {
  LossBreakdown breakdown;  // concept fields left at zero
  Vector logp_new;
  Matrix d_logits;
  Vector d_values;
};

ActorCriticTerms actor_critic_loss(const Matrix& logits, std::span<const int> actions,
                                   std::span<const double> logp_old, std::span<const double> advantages,
                                   const Vector& values, std::span<const double> returns, const LossCoeffs& coeffs);

// Row-wise log-softmax.
Matrix log_softmax(const Matrix& logits);

}  // namespace cpm::losses
