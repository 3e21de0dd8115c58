#include "cpm/losses.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cpm/errors.hpp"

namespace cpm::losses {

using concepts::ConceptKind;
using concepts::ConceptSpec;

void LossConfig::validate() const {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("loss: gamma must lie in [0, 1]");
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw ConfigError("loss: lambda must lie in [0, 1]");
  if (!(clip > 0.0)) throw ConfigError("loss: clip must be positive");
  if (!(value_coef >= 0.0) || !(concept_coef >= 0.0)) throw ConfigError("loss: coefficients must be non-negative");
  if (!(focal_gamma >= 0.0)) throw ConfigError("loss: focal_gamma must be non-negative");
}

double focal_loss_of(double p_target, double gamma) {
  const double p = std::max(p_target, kLogFloor);
  const double miss = std::max(0.0, 1.0 - p_target);
  return -std::pow(miss, gamma) * std::log(p);
}

double focal_loss_derivative(double p_target, double gamma) {
  if (p_target < kLogFloor) return 0.0;
  const double miss = std::max(0.0, 1.0 - p_target);
  double d = -std::pow(miss, gamma) / p_target;
  if (gamma != 0.0 && miss > 0.0) d += gamma * std::pow(miss, gamma - 1.0) * std::log(p_target);
  return d;
}

double focal_loss(std::span<const double> probs, int target, double gamma) {
  if (target < 0 || target >= static_cast<int>(probs.size()))
    throw UsageError("focal_loss: target " + std::to_string(target) + " out of range");
  return focal_loss_of(probs[target], gamma);
}

ConceptLoss concept_loss(const Matrix& predicted, const Matrix& truth, const concepts::ConceptSchema& schema,
                         double gamma) {
  if (predicted.cols() != schema.dim || truth.cols() != schema.dim || predicted.rows() != truth.rows())
    throw UsageError("concept_loss: shapes do not match the schema");
  const Eigen::Index B = predicted.rows();
  ConceptLoss out;
  out.per_concept.assign(schema.specs.size(), 0.0);
  out.grad = Matrix::Zero(B, schema.dim);
  if (B == 0) return out;
  const double inv_b = 1.0 / static_cast<double>(B);

  for (std::size_t s = 0; s < schema.specs.size(); ++s) {
    const ConceptSpec& spec = schema.specs[s];
    double sum = 0.0;
    for (Eigen::Index r = 0; r < B; ++r) {
      for (int m = 0; m < spec.multiplicity; ++m) {
        const concepts::IndexRange g = spec.instance(m);
        if (spec.kind == ConceptKind::Continuous) {
          const double diff = predicted(r, g.begin) - truth(r, g.begin);
          sum += diff * diff;
          out.grad(r, g.begin) = 2.0 * diff * inv_b;
        } else if (spec.kind == ConceptKind::Binary) {
          const bool positive = truth(r, g.begin) > 0.5;
          const double p = predicted(r, g.begin);
          const double pt = positive ? p : 1.0 - p;
          sum += focal_loss_of(pt, gamma);
          out.grad(r, g.begin) = (positive ? 1.0 : -1.0) * focal_loss_derivative(pt, gamma) * inv_b;
        } else {
          Eigen::Index target = 0;
          truth.row(r).segment(g.begin, g.size).maxCoeff(&target);
          const double pt = predicted(r, g.begin + target);
          sum += focal_loss_of(pt, gamma);
          out.grad(r, g.begin + target) = focal_loss_derivative(pt, gamma) * inv_b;
        }
      }
    }
    out.per_concept[s] = sum * inv_b;
    out.total += out.per_concept[s];
  }
  return out;
}

GaeResult gae_advantages(std::span<const double> rewards, std::span<const double> values,
                         std::span<const bool> dones, double gamma, double lambda, double bootstrap_value) {
  const std::size_t T = rewards.size();
  if (values.size() != T || dones.size() != T) throw UsageError("gae_advantages: length mismatch");
  GaeResult out;
  out.advantages.assign(T, 0.0);
  out.returns.assign(T, 0.0);
  double next_value = bootstrap_value;
  double next_adv = 0.0;
  for (std::size_t k = T; k-- > 0;) {
    const double live = dones[k] ? 0.0 : 1.0;
    const double delta = rewards[k] + gamma * next_value * live - values[k];
    next_adv = delta + gamma * lambda * live * next_adv;
    out.advantages[k] = next_adv;
    out.returns[k] = next_adv + values[k];
    next_value = values[k];
  }
  return out;
}

void normalize_advantages(std::span<double> advantages) {
  const std::size_t n = advantages.size();
  if (n < 2) return;
  double mean = 0.0;
  for (double a : advantages) mean += a;
  mean /= static_cast<double>(n);
  double var = 0.0;
  for (double a : advantages) var += (a - mean) * (a - mean);
  var /= static_cast<double>(n);
  const double scale = 1.0 / (std::sqrt(var) + 1e-8);
  for (double& a : advantages) a = (a - mean) * scale;
}

namespace {

double clipped_term(double ratio, double adv, double clip) {
  const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip);
  return std::min(ratio * adv, clipped * adv);
}

// The unclipped branch carries the gradient whenever it is the minimum.
bool ratio_has_gradient(double ratio, double adv, double clip) {
  const double clipped = std::clamp(ratio, 1.0 - clip, 1.0 + clip);
  return ratio * adv <= clipped * adv;
}

}  // namespace

LossBreakdown ppo_objective(std::span<const double> logp_new, std::span<const double> logp_old,
                            std::span<const double> advantages, std::span<const double> values_new,
                            std::span<const double> returns, double entropy, double concept_loss,
                            std::vector<double> concept_terms, const LossCoeffs& coeffs) {
  const std::size_t n = logp_new.size();
  if (logp_old.size() != n || advantages.size() != n || values_new.size() != n || returns.size() != n)
    throw UsageError("ppo_objective: length mismatch");
  LossBreakdown out;
  if (n > 0) {
    double surrogate = 0.0;
    double value = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      surrogate += clipped_term(std::exp(logp_new[k] - logp_old[k]), advantages[k], coeffs.clip);
      const double diff = values_new[k] - returns[k];
      value += diff * diff;
    }
    out.policy_loss = -surrogate / static_cast<double>(n);
    out.value_loss = value / static_cast<double>(n);
  }
  out.entropy = entropy;
  out.concept_loss = concept_loss;
  out.concept_terms = std::move(concept_terms);
  out.total = out.policy_loss + coeffs.value * out.value_loss - coeffs.entropy * out.entropy +
              coeffs.concept_weight * out.concept_loss;
  if (!std::isfinite(out.total)) throw NumericError("ppo_objective: non-finite loss");
  return out;
}

Matrix log_softmax(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double peak = logits.row(r).maxCoeff();
    const double lse = peak + std::log((logits.row(r).array() - peak).exp().sum());
    out.row(r) = logits.row(r).array() - lse;
  }
  return out;
}

ActorCriticTerms actor_critic_loss(const Matrix& logits, std::span<const int> actions,
                                   std::span<const double> logp_old, std::span<const double> advantages,
                                   const Vector& values, std::span<const double> returns, const LossCoeffs& coeffs) {
  const Eigen::Index n = logits.rows();
  const std::size_t un = static_cast<std::size_t>(n);
  if (actions.size() != un || logp_old.size() != un || advantages.size() != un ||
      values.size() != n || returns.size() != un)
    throw UsageError("actor_critic_loss: length mismatch");
  check_finite(logits, "policy logits");

  ActorCriticTerms out;
  const Matrix logp = log_softmax(logits);
  const Matrix probs = logp.array().exp().matrix();
  out.logp_new.resize(n);
  out.d_logits = Matrix::Zero(n, logits.cols());
  out.d_values = Vector::Zero(n);
  if (n == 0) return out;
  const double inv_n = 1.0 / static_cast<double>(n);

  double entropy = 0.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const int a = actions[r];
    if (a < 0 || a >= logits.cols()) throw UsageError("actor_critic_loss: action out of range");
    out.logp_new[r] = logp(r, a);
    const double ratio = std::exp(out.logp_new[r] - logp_old[r]);

    // d(-clipped/n)/dlogp = -A ratio / n on the unclipped branch.
    if (ratio_has_gradient(ratio, advantages[r], coeffs.clip)) {
      const double d_logp = -advantages[r] * ratio * inv_n;
      out.d_logits.row(r) -= d_logp * probs.row(r);
      out.d_logits(r, a) += d_logp;
    }

    // H = -sum p log p, dH/dz_k = -p_k (log p_k + H); total has -c_e H / n.
    const double h = -(probs.row(r).array() * logp.row(r).array()).sum();
    entropy += h;
    out.d_logits.row(r).array() +=
        coeffs.entropy * inv_n * probs.row(r).array() * (logp.row(r).array() + h);

    out.d_values[r] = coeffs.value * 2.0 * (values[r] - returns[r]) * inv_n;
  }
  std::vector<double> logp_copy(out.logp_new.data(), out.logp_new.data() + n);
  std::vector<double> value_copy(values.data(), values.data() + n);
  out.breakdown = ppo_objective(logp_copy, logp_old, advantages, value_copy, returns, entropy * inv_n, 0.0, {},
                                coeffs);
  return out;
}

}  // namespace cpm::losses
