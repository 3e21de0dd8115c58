#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <vector>

#include "cpm/concepts.hpp"
#include "cpm/errors.hpp"
#include "cpm/losses.hpp"
#include "cpm/nn.hpp"
#include "fd.hpp"

using namespace cpm;
using namespace cpm::losses;

namespace {

// Sum over l of (gamma lambda)^l delta_{t+l}, stopping at the first done.
std::vector<double> gae_oracle(const std::vector<double>& r, const std::vector<double>& v,
                               const std::vector<bool>& done, double g, double l, double boot) {
  const std::size_t T = r.size();
  std::vector<double> adv(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    double acc = 0.0;
    double w = 1.0;
    for (std::size_t k = t; k < T; ++k) {
      const double next_v = done[k] ? 0.0 : (k + 1 < T ? v[k + 1] : boot);
      acc += w * (r[k] + g * next_v - v[k]);
      if (done[k]) break;
      w *= g * l;
    }
    adv[t] = acc;
  }
  return adv;
}

Matrix random_simplex_rows(const concepts::ConceptSchema& schema, int rows, Rng& rng) {
  Matrix raw = fd::random_matrix(rows, schema.dim, rng);
  Matrix out = nn::groupwise_softmax(raw, schema.softmax_groups());
  for (const auto& s : schema.specs)
    if (s.kind == concepts::ConceptKind::Binary)
      for (int r = 0; r < rows; ++r)
        for (int i = s.offset; i < s.range().end(); ++i) out(r, i) = rng.uniform(0.05, 0.95);
  return out;
}

Matrix random_truth(const concepts::ConceptSchema& schema, int rows, Rng& rng) {
  Matrix t = Matrix::Zero(rows, schema.dim);
  for (int r = 0; r < rows; ++r)
    for (const auto& s : schema.specs)
      for (int m = 0; m < s.multiplicity; ++m) {
        const auto g = s.instance(m);
        if (s.kind == concepts::ConceptKind::Continuous) t(r, g.begin) = rng.normal();
        else if (s.kind == concepts::ConceptKind::Binary) t(r, g.begin) = rng.uniform() < 0.5 ? 1.0 : 0.0;
        else t(r, g.begin + rng.uniform_int(g.size)) = 1.0;
      }
  return t;
}

}  // namespace

TEST_CASE("focal loss degenerate cases") {
  Rng rng(1);
  for (int i = 0; i < 1000; ++i) {
    const double p = rng.uniform(1e-6, 1.0);
    CHECK(std::abs(focal_loss_of(p, 0.0) - (-std::log(p))) < 1e-12);
  }
  const std::vector<double> probs = {0.2, 0.8};
  CHECK(focal_loss(probs, 1, 0.0) == doctest::Approx(-std::log(0.8)).epsilon(1e-14));
  CHECK(focal_loss_of(1.0, 2.0) == 0.0);
  CHECK(std::abs(focal_loss_of(0.5, 2.0) - 0.25 * std::log(2.0)) < 1e-12);
  CHECK(std::isfinite(focal_loss_of(0.0, 2.0)));
  CHECK(focal_loss_of(0.0, 2.0) == doctest::Approx(-std::log(kLogFloor)));
  CHECK_THROWS_AS(focal_loss(probs, 2, 2.0), UsageError);
}

TEST_CASE("focal loss derivative matches finite differences") {
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const double p = rng.uniform(0.01, 0.99);
    const double gamma = rng.uniform(0.0, 4.0);
    const double h = 1e-7;
    const double num = (focal_loss_of(p + h, gamma) - focal_loss_of(p - h, gamma)) / (2 * h);
    CHECK(std::abs(focal_loss_derivative(p, gamma) - num) / std::max(1.0, std::abs(num)) < 1e-6);
  }
}

TEST_CASE("concept loss values and gradient") {
  Rng rng(3);
  const concepts::ConceptSchema schema = concepts::build_schema(2, concepts::ConceptMode::Hard);
  for (int trial = 0; trial < 100; ++trial) {
    const int B = 1 + rng.uniform_int(4);
    Matrix pred = random_simplex_rows(schema, B, rng);
    const Matrix truth = random_truth(schema, B, rng);
    const ConceptLoss cl = concept_loss(pred, truth, schema, 2.0);
    auto f = [&] { return concept_loss(pred, truth, schema, 2.0).total; };
    CHECK(fd::rel_error(cl.grad, fd::numeric_grad(f, pred)) < 1e-5);

    // Loop oracle for the per-concept terms.
    double total = 0.0;
    for (std::size_t s = 0; s < schema.specs.size(); ++s) {
      const auto& spec = schema.specs[s];
      double sum = 0.0;
      for (int r = 0; r < B; ++r)
        for (int m = 0; m < spec.multiplicity; ++m) {
          const int i = spec.instance(m).begin;
          if (spec.name == "Orientation" || spec.name == "Position") {
            sum += std::pow(pred(r, i) - truth(r, i), 2);
          } else if (spec.name == "Range") {
            const double pt = truth(r, i) == 1.0 ? pred(r, i) : 1.0 - pred(r, i);
            sum += -std::pow(1 - pt, 2) * std::log(pt);
          } else {
            for (int k = 0; k < spec.group_size; ++k)
              if (truth(r, i + k) == 1.0) sum += -std::pow(1 - pred(r, i + k), 2) * std::log(pred(r, i + k));
          }
        }
      CHECK(cl.per_concept[s] == doctest::Approx(sum / B).epsilon(1e-12));
      total += sum / B;
    }
    CHECK(cl.total == doctest::Approx(total).epsilon(1e-12));
  }
  CHECK(concept_loss(random_truth(schema, 3, rng), random_truth(schema, 3, rng), schema, 2.0).grad.allFinite());
  CHECK_THROWS_AS(concept_loss(Matrix::Zero(2, 12), Matrix::Zero(2, 12), schema, 2.0), UsageError);
}

TEST_CASE("perfect concept predictions cost nothing") {
  Rng rng(4);
  const concepts::ConceptSchema schema = concepts::build_schema(3, concepts::ConceptMode::Hard);
  const Matrix truth = random_truth(schema, 5, rng);
  const ConceptLoss cl = concept_loss(truth, truth, schema, 2.0);
  CHECK(cl.total == 0.0);
  CHECK(cl.grad.isZero());
}

TEST_CASE("GAE matches the brute-force sum") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int T = 1 + rng.uniform_int(30);
    std::vector<double> r(T), v(T);
    std::vector<bool> done(T);
    for (int t = 0; t < T; ++t) {
      r[t] = rng.normal();
      v[t] = rng.normal();
      done[t] = rng.uniform() < 0.1;
    }
    const double g = rng.uniform(0.8, 1.0), l = rng.uniform(0.0, 1.0), boot = rng.normal();
    std::unique_ptr<bool[]> flags(new bool[T]);
    for (int t = 0; t < T; ++t) flags[t] = done[t];
    const GaeResult res = gae_advantages(r, v, std::span<const bool>(flags.get(), T), g, l, boot);
    const std::vector<double> want = gae_oracle(r, v, done, g, l, boot);
    for (int t = 0; t < T; ++t) {
      CHECK(res.advantages[t] == doctest::Approx(want[t]).epsilon(1e-12));
      CHECK(res.returns[t] == doctest::Approx(want[t] + v[t]).epsilon(1e-12));
    }
  }
}

TEST_CASE("GAE special cases") {
  // lambda = 1, gamma = 1: return-to-go minus the value.
  const std::vector<double> r = {1, 2, 3}, v = {0.5, 0.25, 0.0};
  const bool done[] = {false, false, true};
  const GaeResult a = gae_advantages(r, v, done, 1.0, 1.0, 100.0);
  CHECK(a.advantages[0] == doctest::Approx(6 - 0.5));
  CHECK(a.advantages[1] == doctest::Approx(5 - 0.25));
  CHECK(a.returns[2] == doctest::Approx(3));
  // Linearity: scaling rewards and values scales the advantages.
  const std::vector<double> r2 = {2, 4, 6}, v2 = {1.0, 0.5, 0.0};
  const GaeResult b = gae_advantages(r2, v2, done, 0.9, 0.7, 0.0);
  const GaeResult c = gae_advantages(r, v, done, 0.9, 0.7, 0.0);
  for (int t = 0; t < 3; ++t) CHECK(b.advantages[t] == doctest::Approx(2 * c.advantages[t]));
  const bool open[] = {false, false, false};
  const GaeResult d = gae_advantages(r, v, open, 0.5, 0.0, 8.0);
  CHECK(d.advantages[2] == doctest::Approx(3 + 0.5 * 8.0));
  CHECK_THROWS_AS(gae_advantages(r, std::vector<double>{1.0}, done, 0.9, 0.9, 0.0), UsageError);
}

TEST_CASE("advantage normalization") {
  std::vector<double> a = {1, 2, 3, 4, 10};
  normalize_advantages(a);
  double m = 0, s = 0;
  for (double x : a) m += x;
  m /= 5;
  for (double x : a) s += (x - m) * (x - m);
  CHECK(std::abs(m) < 1e-12);
  CHECK(std::sqrt(s / 5) == doctest::Approx(1.0).epsilon(1e-6));
  std::vector<double> one = {3.0};
  normalize_advantages(one);
  CHECK(one[0] == 3.0);
}

TEST_CASE("PPO surrogate clipping") {
  LossCoeffs k;
  k.clip = 0.2;
  k.value = 0.0;
  k.entropy = 0.0;
  k.concept_weight = 0.0;
  const std::vector<double> zero = {0.0}, adv = {1.0}, neg = {-1.0};
  const std::vector<double> up = {std::log(1.5)}, down = {std::log(0.5)};
  CHECK(ppo_objective(zero, zero, adv, zero, zero, 0, 0, {}, k).policy_loss == doctest::Approx(-1.0));
  CHECK(ppo_objective(up, zero, adv, zero, zero, 0, 0, {}, k).policy_loss == doctest::Approx(-1.2));
  CHECK(ppo_objective(down, zero, adv, zero, zero, 0, 0, {}, k).policy_loss == doctest::Approx(-0.5));
  CHECK(ppo_objective(down, zero, neg, zero, zero, 0, 0, {}, k).policy_loss == doctest::Approx(0.8));
  CHECK(ppo_objective(up, zero, neg, zero, zero, 0, 0, {}, k).policy_loss == doctest::Approx(1.5));
  LossCoeffs all;
  all.value = 0.5;
  all.entropy = 0.1;
  all.concept_weight = 10.0;
  const std::vector<double> v = {2.0}, ret = {1.0};
  const LossBreakdown b = ppo_objective(zero, zero, adv, v, ret, 1.5, 0.3, {0.1, 0.2}, all);
  CHECK(b.total == doctest::Approx(-1.0 + 0.5 * 1.0 - 0.1 * 1.5 + 10 * 0.3));
  CHECK(b.concept_terms.size() == 2u);
  const std::vector<double> nan = {std::nan("")};
  CHECK_THROWS_AS(ppo_objective(nan, zero, adv, zero, zero, 0, 0, {}, k), NumericError);
}

TEST_CASE("actor-critic gradient matches finite differences") {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + rng.uniform_int(6), A = 2 + rng.uniform_int(5);
    Matrix logits = fd::random_matrix(n, A, rng);
    std::vector<int> actions(n);
    std::vector<double> old(n), adv(n), ret(n);
    Matrix values = fd::random_matrix(n, 1, rng);
    const Matrix lp = log_softmax(logits);
    for (int i = 0; i < n; ++i) {
      actions[i] = rng.uniform_int(A);
      // Stay away from the clip boundary where the objective has a kink.
      double shift = rng.uniform(-0.5, 0.5);
      if (std::abs(std::abs(shift) - std::log(1.2)) < 0.03) shift += 0.1;
      old[i] = lp(i, actions[i]) + shift;
      adv[i] = rng.normal();
      ret[i] = rng.normal();
    }
    LossCoeffs k;
    k.entropy = rng.uniform(0.0, 0.2);
    auto loss = [&] {
      const Vector vv = Eigen::Map<const Vector>(values.data(), n);
      return actor_critic_loss(logits, actions, old, adv, vv, ret, k).breakdown.total;
    };
    const Vector vv = Eigen::Map<const Vector>(values.data(), n);
    const ActorCriticTerms t = actor_critic_loss(logits, actions, old, adv, vv, ret, k);
    CHECK(fd::rel_error(t.d_logits, fd::numeric_grad(loss, logits)) < 1e-5);
    const Matrix dv = Eigen::Map<const Matrix>(t.d_values.data(), n, 1);
    CHECK(fd::rel_error(dv, fd::numeric_grad(loss, values)) < 1e-5);
  }
}

TEST_CASE("a descent step raises the probability of an advantaged action") {
  Matrix logits = Matrix::Zero(1, 4);
  const std::vector<int> act = {2};
  const std::vector<double> old = {std::log(0.25)}, adv = {1.0}, ret = {0.0};
  const Vector v = Vector::Zero(1);
  LossCoeffs k;
  k.entropy = 0.0;
  const ActorCriticTerms t = actor_critic_loss(logits, act, old, adv, v, ret, k);
  logits -= 0.1 * t.d_logits;
  CHECK(log_softmax(logits)(0, 2) > std::log(0.25));
  const std::vector<double> bad_adv = {-1.0};
  const ActorCriticTerms u = actor_critic_loss(Matrix::Zero(1, 4), act, old, bad_adv, v, ret, k);
  CHECK((Matrix::Zero(1, 4) - 0.1 * u.d_logits)(0, 2) < 0.0);
}

TEST_CASE("log_softmax is stable") {
  Matrix z(1, 3);
  z << 1000, 0, -1000;
  const Matrix l = log_softmax(z);
  CHECK(l.allFinite());
  CHECK(l(0, 0) == doctest::Approx(0.0));
}
