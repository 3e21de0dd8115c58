// Acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance --work-dir DIR [--only 1,2,7] [--reuse]
//
// Training artifacts for the learning and systems criteria go under DIR.
// --reuse picks up models a previous run left there instead of retraining.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <memory>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"

#include "cpm/archive.hpp"
#include "cpm/concepts.hpp"
#include "cpm/config.hpp"
#include "cpm/errors.hpp"
#include "cpm/eval.hpp"
#include "cpm/game.hpp"
#include "cpm/losses.hpp"
#include "cpm/nn.hpp"
#include "cpm/policy.hpp"
#include "cpm/serve.hpp"
#include "cpm/stats.hpp"
#include "cpm/trainer.hpp"
#include "cpm/whitening.hpp"
#include "fd.hpp"

using namespace cpm;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

void progress(const std::string& line) { std::cout << "  .. " << line << std::endl; }

// ---------------------------------------------------------------- 1

struct WorstCase {
  double err = 0.0;
  int cases = 0;
  void add(double e) {
    err = std::max(err, e);
    ++cases;
  }
};

double check_dense(Rng& rng) {
  const int in = 1 + rng.uniform_int(6), out = 1 + rng.uniform_int(6), batch = 1 + rng.uniform_int(5);
  nn::Dense layer(in, out, rng.uniform() < 0.5);
  nn::init_dense(layer, rng);
  layer.bias = fd::random_matrix(1, out, rng, 0.1);
  Matrix x = fd::random_matrix(batch, in, rng);
  const Matrix w = fd::random_matrix(batch, out, rng);
  auto loss = [&] { return fd::weighted_sum(nn::fc_forward(layer, x), w); };
  nn::DenseCache cache;
  nn::fc_forward(layer, x, &cache);
  nn::DenseGrad g(layer);
  const Matrix dx = nn::fc_backward(layer, cache, w, g);
  return std::max({fd::rel_error(dx, fd::numeric_grad(loss, x)),
                   fd::rel_error(g.weight, fd::numeric_grad(loss, layer.weight)),
                   fd::rel_error(g.bias, fd::numeric_grad(loss, layer.bias))});
}

double check_lstm(Rng& rng) {
  const int in = 1 + rng.uniform_int(4), H = 1 + rng.uniform_int(4), B = 1 + rng.uniform_int(3);
  const int T = 1 + rng.uniform_int(5);
  nn::Lstm cell(in, H);
  nn::init_lstm(cell, rng);
  cell.bias = fd::random_matrix(1, 4 * H, rng, 0.2);
  std::vector<Matrix> xs, ws;
  std::vector<Vector> masks;
  for (int t = 0; t < T; ++t) {
    xs.push_back(fd::random_matrix(B, in, rng));
    ws.push_back(fd::random_matrix(B, H, rng));
    Vector m(B);
    for (int b = 0; b < B; ++b) m[b] = rng.uniform() < 0.2 ? 0.0 : 1.0;
    masks.push_back(m);
  }
  nn::RecurrentState init{fd::random_matrix(B, H, rng, 0.5), fd::random_matrix(B, H, rng, 0.5)};
  auto loss = [&] {
    nn::RecurrentState s = init;
    const std::vector<Matrix> hs = nn::recurrent_forward(cell, xs, s, nullptr, &masks);
    double l = 0.0;
    for (int t = 0; t < T; ++t) l += fd::weighted_sum(hs[t], ws[t]);
    return l;
  };
  nn::RecurrentState s = init;
  nn::LstmSequenceCache cache;
  nn::recurrent_forward(cell, xs, s, &cache, &masks);
  nn::LstmGrad g(cell);
  nn::RecurrentState dinit;
  const std::vector<Matrix> dxs = nn::recurrent_backward(cell, cache, ws, g, &dinit);
  double e = std::max({fd::rel_error(g.w_input, fd::numeric_grad(loss, cell.w_input)),
                       fd::rel_error(g.w_hidden, fd::numeric_grad(loss, cell.w_hidden)),
                       fd::rel_error(g.bias, fd::numeric_grad(loss, cell.bias)),
                       fd::rel_error(dinit.h, fd::numeric_grad(loss, init.h)),
                       fd::rel_error(dinit.c, fd::numeric_grad(loss, init.c))});
  for (int t = 0; t < T; ++t) e = std::max(e, fd::rel_error(dxs[t], fd::numeric_grad(loss, xs[t])));
  return e;
}

double check_group_softmax(Rng& rng) {
  const std::vector<concepts::IndexRange> groups = {{0, 2}, {3, 3}};
  Matrix x = fd::random_matrix(2, 7, rng, 2.0);
  const Matrix w = fd::random_matrix(2, 7, rng);
  auto loss = [&] { return fd::weighted_sum(nn::groupwise_softmax(x, groups), w); };
  const Matrix y = nn::groupwise_softmax(x, groups);
  return fd::rel_error(nn::groupwise_softmax_backward(y, groups, w), fd::numeric_grad(loss, x));
}

Matrix correlated_batch(int b, int d, Rng& rng) {
  Vector scales(d);
  for (int i = 0; i < d; ++i) scales[i] = rng.uniform(0.5, 2.0);
  const Matrix q = nn::orthogonal(d, rng);
  Matrix x = fd::random_matrix(b, d, rng) * scales.asDiagonal() * q;
  const Matrix offset = fd::random_matrix(1, d, rng, 3.0);
  x.rowwise() += offset.row(0);
  return x;
}

double check_iternorm(Rng& rng) {
  const int d = 2 + rng.uniform_int(4), b = d + 2 + rng.uniform_int(6), T = rng.uniform_int(6);
  Matrix x = correlated_batch(b, d, rng);
  const Matrix w = fd::random_matrix(b, d, rng);
  const whitening::WhiteningState init(d, T, 0.1, 1e-3);
  auto loss = [&] {
    whitening::WhiteningState st = init;
    return fd::weighted_sum(whitening::iternorm_forward(x, st, whitening::Mode::Train), w);
  };
  whitening::WhiteningState st = init;
  whitening::WhiteningCache cache;
  whitening::iternorm_forward(x, st, whitening::Mode::Train, &cache);
  return fd::rel_error(whitening::iternorm_backward(cache, w), fd::numeric_grad(loss, x));
}

Matrix random_probabilities(const concepts::ConceptSchema& s, int rows, Rng& rng) {
  Matrix p(rows, s.dim);
  for (int r = 0; r < rows; ++r)
    for (const concepts::ConceptSpec& spec : s.specs)
      for (int m = 0; m < spec.multiplicity; ++m) {
        const concepts::IndexRange g = spec.instance(m);
        if (spec.kind == concepts::ConceptKind::Continuous) {
          p(r, g.begin) = rng.normal();
        } else if (spec.kind == concepts::ConceptKind::Binary) {
          p(r, g.begin) = rng.uniform(0.05, 0.95);
        } else {
          double total = 0.0;
          for (int i = 0; i < g.size; ++i) total += (p(r, g.begin + i) = rng.uniform(0.1, 1.0));
          for (int i = 0; i < g.size; ++i) p(r, g.begin + i) /= total;
        }
      }
  return p;
}

Matrix random_truth(const concepts::ConceptSchema& s, int rows, Rng& rng) {
  Matrix t = Matrix::Zero(rows, s.dim);
  for (int r = 0; r < rows; ++r)
    for (const concepts::ConceptSpec& spec : s.specs)
      for (int m = 0; m < spec.multiplicity; ++m) {
        const concepts::IndexRange g = spec.instance(m);
        if (spec.kind == concepts::ConceptKind::Continuous) t(r, g.begin) = rng.normal();
        else if (spec.kind == concepts::ConceptKind::Binary) t(r, g.begin) = rng.uniform() < 0.5 ? 1.0 : 0.0;
        else t(r, g.begin + rng.uniform_int(g.size)) = 1.0;
      }
  return t;
}

double check_focal(Rng& rng) {
  const concepts::ConceptSchema s = concepts::build_schema(2, concepts::ConceptMode::Hard);
  const int rows = 1 + rng.uniform_int(4);
  Matrix p = random_probabilities(s, rows, rng);
  const Matrix truth = random_truth(s, rows, rng);
  const double gamma = rng.uniform(0.0, 3.0);
  auto loss = [&] { return losses::concept_loss(p, truth, s, gamma).total; };
  return fd::rel_error(losses::concept_loss(p, truth, s, gamma).grad, fd::numeric_grad(loss, p));
}

double check_ppo(Rng& rng) {
  const int n = 1 + rng.uniform_int(6), A = 2 + rng.uniform_int(5);
  Matrix logits = fd::random_matrix(n, A, rng);
  std::vector<int> actions(n);
  std::vector<double> old(n), adv(n), ret(n);
  Matrix values = fd::random_matrix(n, 1, rng);
  const Matrix lp = losses::log_softmax(logits);
  losses::LossCoeffs k;
  k.entropy = rng.uniform(0.0, 0.2);
  for (int i = 0; i < n; ++i) {
    actions[i] = rng.uniform_int(A);
    double shift = rng.uniform(-0.5, 0.5);
    // Stay off the clip kink, where the objective is not differentiable.
    const double edge = std::min(std::abs(shift - std::log(1.0 + k.clip)), std::abs(shift - std::log(1.0 - k.clip)));
    if (edge < 0.03) shift += 0.1;
    old[i] = lp(i, actions[i]) - shift;
    adv[i] = rng.normal();
    ret[i] = rng.normal();
  }
  auto loss = [&] {
    const Vector vv = Eigen::Map<const Vector>(values.data(), n);
    return losses::actor_critic_loss(logits, actions, old, adv, vv, ret, k).breakdown.total;
  };
  const Vector vv = Eigen::Map<const Vector>(values.data(), n);
  const losses::ActorCriticTerms t = losses::actor_critic_loss(logits, actions, old, adv, vv, ret, k);
  const Matrix dv = Eigen::Map<const Matrix>(t.d_values.data(), n, 1);
  return std::max(fd::rel_error(t.d_logits, fd::numeric_grad(loss, logits)),
                  fd::rel_error(dv, fd::numeric_grad(loss, values)));
}

double check_end_to_end(Rng& rng, int trial) {
  policy::ConceptPolicyConfig c;
  c.obs_dim = 6;
  c.encoder_sizes = {5};
  c.recurrent_size = 4;
  c.head_sizes = {5};
  c.whitening_iterations = 3;
  c.whitening_eps = 1e-3;
  switch (trial % 3) {
    case 0:
      c.schema = concepts::build_schema_subset(1, std::vector<std::string>{"Range", "Target"});
      c.k = 2;
      break;
    case 1:
      c.schema = concepts::build_schema(1, concepts::ConceptMode::Hard);
      c.k = 0;
      break;
    default:
      c.k = 3;
      c.whiten = false;
      break;
  }
  policy::ConceptPolicy model = policy::make_policy(c, 100 + trial);
  const int width = c.j() + c.k;
  model.params.scale = Matrix::Ones(1, width) + fd::random_matrix(1, width, rng, 0.2);
  model.params.shift = fd::random_matrix(1, width, rng, 0.2);
  model.params.policy_head.back().weight = fd::random_matrix(5, c.action_count, rng, 0.5);

  const int T = 3, B = 3;
  policy::SequenceBatch batch;
  for (int t = 0; t < T; ++t) {
    batch.obs.push_back(fd::random_matrix(B, c.obs_dim, rng));
    Vector m(B);
    for (int b = 0; b < B; ++b) m[b] = t >= b % 2 ? 1.0 : 0.0;
    batch.masks.push_back(m);
  }
  batch.initial = {fd::random_matrix(B, c.recurrent_size, rng, 0.3), fd::random_matrix(B, c.recurrent_size, rng, 0.3)};

  const policy::ConceptPolicy frozen = model;
  policy::ConceptPolicy scratch = frozen;
  const policy::SequenceForward f = policy::forward_sequence(scratch, batch, whitening::Mode::Train);
  const int n = static_cast<int>(f.rows.size());
  std::vector<int> actions(n);
  std::vector<double> old(n), adv(n), ret(n);
  const Matrix lp = losses::log_softmax(f.logits);
  for (int i = 0; i < n; ++i) {
    actions[i] = rng.uniform_int(c.action_count);
    old[i] = lp(i, actions[i]) + rng.uniform(-0.1, 0.1);
    adv[i] = rng.normal();
    ret[i] = rng.normal();
  }
  const Matrix truth = random_truth(c.schema, n, rng);
  losses::LossCoeffs k;
  k.entropy = 0.05;
  auto objective = [&](const policy::ConceptPolicy& m) {
    policy::ConceptPolicy copy = m;
    const policy::SequenceForward g = policy::forward_sequence(copy, batch, whitening::Mode::Train);
    double total = losses::actor_critic_loss(g.logits, actions, old, adv, g.values, ret, k).breakdown.total;
    if (c.j() > 0) total += k.concept_weight * losses::concept_loss(g.concepts, truth, c.schema, 2.0).total;
    return total;
  };
  const losses::ActorCriticTerms ac = losses::actor_critic_loss(f.logits, actions, old, adv, f.values, ret, k);
  Matrix d_concepts = Matrix::Zero(n, c.j());
  if (c.j() > 0) d_concepts = k.concept_weight * losses::concept_loss(f.concepts, truth, c.schema, 2.0).grad;
  const policy::PolicyGrad grad = policy::backward_sequence(frozen, f, ac.d_logits, ac.d_values, d_concepts);

  policy::ConceptPolicy probe = frozen;
  const auto named = probe.params.named_tensors();
  double worst = 0.0;
  for (std::size_t i = 0; i < named.size(); ++i) {
    if (named[i].tensor->size() == 0) continue;
    const Matrix num = fd::numeric_grad([&] { return objective(probe); }, *named[i].tensor);
    // Biases feeding the whitening have exactly zero gradient (the batch
    // mean removes them); compare absolutely there.
    if (c.whiten && (named[i].name == "concept.bias" || named[i].name == "residual.bias")) {
      worst = std::max(worst, std::max(grad.tensors[i].norm(), num.norm()) * 1e-2);
      continue;
    }
    worst = std::max(worst, fd::rel_error(grad.tensors[i], num));
  }
  return worst;
}

Outcome criterion_gradients() {
  const Clock::time_point t0 = Clock::now();
  Rng rng(20240601);
  struct Family {
    const char* name;
    std::function<double(int)> run;
    double tol;
    WorstCase worst;
  };
  std::vector<Family> families = {
      {"dense", [&](int) { return check_dense(rng); }, 1e-5, {}},
      {"recurrent", [&](int) { return check_lstm(rng); }, 1e-5, {}},
      {"group_softmax", [&](int) { return check_group_softmax(rng); }, 1e-5, {}},
      {"iternorm", [&](int) { return check_iternorm(rng); }, 1e-5, {}},
      {"focal_loss", [&](int) { return check_focal(rng); }, 1e-5, {}},
      {"ppo_objective", [&](int) { return check_ppo(rng); }, 1e-5, {}},
      {"end_to_end", [&](int i) { return check_end_to_end(rng, i); }, 1e-4, {}},
  };
  bool pass = true;
  std::string detail;
  for (Family& f : families) {
    for (int i = 0; i < 100; ++i) f.worst.add(f.run(i));
    pass = pass && f.worst.err < f.tol;
    detail += fmt("%s %.1e%s ", f.name, f.worst.err, f.worst.err < f.tol ? "" : "(!)");
  }
  const double secs = seconds_since(t0);
  pass = pass && secs < 120.0;
  return {pass, detail + fmt("| 100 cases each, %.1fs", secs)};
}

// ---------------------------------------------------------------- 2

Outcome criterion_whitening() {
  const Clock::time_point t0 = Clock::now();
  Rng rng(77);
  double worst = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const int d = std::vector<int>{4, 8, 16}[trial % 3];
    const Matrix x = correlated_batch(512, d, rng);
    whitening::WhiteningState st(d, 20, 0.1, 0.0);
    const Matrix y = whitening::iternorm_forward(x, st, whitening::Mode::Train);
    worst = std::max(worst, (y - whitening::exact_zca(x, 0.0)).cwiseAbs().maxCoeff());
  }
  bool monotone = true;
  for (int trial = 0; trial < 30; ++trial) {
    const int d = std::vector<int>{4, 8, 16}[trial % 3];
    const Matrix x = correlated_batch(512, d, rng);
    const Matrix xc = x.rowwise() - x.colwise().mean();
    double last = 1e300;
    for (int T : {0, 1, 2, 4, 8, 16}) {
      const Matrix w = whitening::iternorm_whitener(x, T, 0.0);
      const double e = (whitening::covariance(xc * w) - Matrix::Identity(d, d)).norm();
      monotone = monotone && e <= last * (1.0 + 1e-9) + 1e-12;
      last = e;
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-3 && monotone && secs < 60.0,
          fmt("max |IterNorm(T=20) - ZCA| = %.2e over 50 batches (tol 1e-3); ||cov-I|| monotone in T: %s; %.1fs", worst,
              monotone ? "yes" : "no", secs)};
}

// ---------------------------------------------------------------- 3

Outcome criterion_focal() {
  Rng rng(3);
  double ce_gap = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const double p = rng.uniform(1e-9, 1.0);
    ce_gap = std::max(ce_gap, std::abs(losses::focal_loss_of(p, 0.0) + std::log(p)));
  }
  const double at_one = std::abs(losses::focal_loss_of(1.0, 2.0));
  const double closed = std::abs(losses::focal_loss_of(0.5, 2.0) - 0.25 * std::log(2.0));
  return {ce_gap < 1e-12 && at_one == 0.0 && closed < 1e-12,
          fmt("gamma=0 vs CE max gap %.1e; FL(1)=%g; |FL(0.5, 2) - 0.25 log 2| = %.1e", ce_gap, at_one, closed)};
}

// ---------------------------------------------------------------- 4

Outcome criterion_schema() {
  bool pass = true;
  std::string detail;
  const int ns[] = {2, 3, 5};
  const int hard_j[] = {13, 18, 28}, soft_j[] = {9, 12, 18}, soft_b[] = {32, 64, 96};
  for (int i = 0; i < 3; ++i) {
    const int hj = concepts::build_schema(ns[i], concepts::ConceptMode::Hard).dim;
    const int sj = concepts::build_schema(ns[i], concepts::ConceptMode::Soft).dim;
    const int hb = policy::preset(ns[i], policy::ModelKind::Hard).bottleneck();
    const int sb = policy::preset(ns[i], policy::ModelKind::Soft).bottleneck();
    const int bb = policy::preset(ns[i], policy::ModelKind::Base).bottleneck();
    pass = pass && hj == hard_j[i] && sj == soft_j[i] && hb == hj && sb == soft_b[i] && bb == 128;
    detail += fmt("%dv%d hard j=%d soft j=%d soft=%d base=%d; ", ns[i], ns[i], hj, sj, sb, bb);
  }
  return {pass, detail};
}

// ---------------------------------------------------------------- 5

Outcome criterion_geometry() {
  env::ArenaConfig c;
  Rng rng(5);
  const concepts::ConceptSchema schema = concepts::build_schema(2, concepts::ConceptMode::Hard);
  const concepts::ConceptSpec& range = schema.at("Range");
  const concepts::ConceptSpec& orient = schema.at("Orientation");
  const concepts::ConceptSpec& pos = schema.at("Position");
  int cases = 0, range_mismatch = 0;
  double orient_gap = 0.0, pos_gap = 0.0;
  while (cases < 100000) {
    env::WorldState s;
    for (int i = 0; i < c.agent_count(); ++i) {
      env::AgentState a;
      a.team = i < c.n_per_team ? env::Team::Attacker : env::Team::Defender;
      a.position = {rng.uniform(-1, 1), rng.uniform(-1, 1)};
      a.heading = rng.uniform(-env::kPi, env::kPi);
      a.tagged = rng.uniform() < 0.15;
      a.cooldown = rng.uniform_int(c.tag_cooldown + 1);
      s.agents.push_back(a);
    }
    for (int agent = 0; agent < c.agent_count() && cases < 100000; ++agent) {
      if (s.agents[agent].tagged) continue;
      const concepts::TargetMemory mem = concepts::update_target_memory({}, s, agent);
      const Vector v = concepts::oracle_eval(c, s, agent, schema, mem, strategies::StrategyKind::Left);
      const std::vector<int> opp = concepts::opponents_of(s, agent);
      for (int m = 0; m < 2; ++m) {
        const env::AgentState& me = s.agents[agent];
        const env::AgentState& o = s.agents[opp[m]];
        range_mismatch += (v[range.instance(m).begin] == 1.0) != env::tag_check(c, s, agent, opp[m], true);
        const double dx = o.position.x - me.position.x, dy = o.position.y - me.position.y;
        const double fwd = std::cos(me.heading) * dx + std::sin(me.heading) * dy;
        const double left = -std::sin(me.heading) * dx + std::cos(me.heading) * dy;
        double gap = std::abs(v[orient.instance(m).begin] - std::atan2(left, fwd));
        gap = std::min(gap, 2 * env::kPi - gap);
        orient_gap = std::max(orient_gap, gap);
        pos_gap = std::max(pos_gap, std::abs(v[pos.instance(m).begin] - std::hypot(fwd, left) / c.diagonal()));
        ++cases;
      }
    }
  }
  return {range_mismatch == 0 && orient_gap < 1e-12 && pos_gap < 1e-12,
          fmt("%d cases: Range mismatches %d, max Orientation gap %.1e, max Position gap %.1e", cases, range_mismatch,
              orient_gap, pos_gap)};
}

// ---------------------------------------------------------------- 6

Outcome criterion_ppo_smoke(const fs::path& work) {
  const Clock::time_point t0 = Clock::now();
  ExperimentConfig cfg = config_from_json(json::parse(R"({
    "task": {"kind": "reward_identification"},
    "trainer": {"total_steps": 49152, "batch_size": 2048, "num_envs": 8}
  })"));
  const trainer::TrainResult r = trainer::train(cfg, 1, work / "ppo_smoke");
  const trainer::LoadedPolicy lp = trainer::load_policy(r.final_checkpoint);
  game::RewardIdentificationEnv env(cfg.reward_id);
  double p_sum = 0.0;
  int greedy_hits = 0, n = 0;
  for (int ep = 0; ep < 20; ++ep) {
    env.reset(derive_seed(99, ep));
    nn::RecurrentState h = nn::RecurrentState::zeros(1, cfg.policy.recurrent_size);
    while (!env.episode_done()) {
      const policy::PolicyOutput out = policy::forward(lp.model, env.observe(0).transpose(), h);
      const Matrix p = losses::log_softmax(out.logits).array().exp().matrix();
      Eigen::Index best = 0;
      p.row(0).maxCoeff(&best);
      p_sum += p(0, cfg.reward_id.rewarded_action);
      greedy_hits += best == cfg.reward_id.rewarded_action;
      ++n;
      const env::Action a = static_cast<env::Action>(best);
      env.step(std::span<const env::Action>(&a, 1));
    }
  }
  const double mean_p = p_sum / n;
  const double secs = seconds_since(t0);
  const std::int64_t steps = r.metrics.back()["steps"].get<std::int64_t>();
  return {mean_p > 0.95 && greedy_hits == n && steps <= 50000 && secs < 600.0,
          fmt("P(optimal) = %.4f, greedy optimal on %d/%d steps after %lld steps, %.0fs", mean_p, greedy_hits, n,
              static_cast<long long>(steps), secs)};
}

// ---------------------------------------------------------------- 7, 8, 9, 11

constexpr std::uint64_t kGameSeeds[] = {1, 2, 3};
constexpr std::uint64_t kHeldOutEvalSeed = 424242;

ExperimentConfig desk_config(policy::ModelKind kind) {
  ExperimentConfig cfg = config_from_json(json::parse(R"({
    "env": {"reward": {"miss": 0.0}},
    "trainer": {"total_steps": 500000, "schedule_horizon": 500000, "eval_interval": 102400, "eval_episodes": 100}
  })"));
  cfg.policy = policy::preset(cfg.arena.n_per_team, kind);
  cfg.validate();
  return cfg;
}

struct TrainedModel {
  fs::path best;
  eval::EvalReport held_out;
};

struct Models {
  std::vector<TrainedModel> hard, base;
  double seconds = 0.0;
};

fs::path run_dir(const fs::path& work, policy::ModelKind kind, std::uint64_t seed) {
  return work / (std::string(policy::model_kind_name(kind)) + "_seed" + std::to_string(seed));
}

TrainedModel train_or_reuse(const fs::path& work, policy::ModelKind kind, std::uint64_t seed, bool reuse) {
  const ExperimentConfig cfg = desk_config(kind);
  const fs::path dir = run_dir(work, kind, seed);
  TrainedModel m;
  m.best = dir / "best.ckpt";
  bool have = false;
  if (reuse && fs::exists(m.best) && fs::exists(dir / "final.ckpt")) {
    const trainer::LoadedPolicy lp = trainer::load_policy(m.best);
    have = lp.config.fingerprint() == cfg.fingerprint();
  }
  if (!have) {
    const Clock::time_point t0 = Clock::now();
    const trainer::TrainResult r = trainer::train(cfg, seed, dir);
    progress(fmt("trained %s seed %llu in %.0fs (best periodic eval win rate %.2f)",
                 std::string(policy::model_kind_name(kind)).c_str(), static_cast<unsigned long long>(seed),
                 seconds_since(t0), r.best_win_rate));
  }
  const trainer::LoadedPolicy lp = trainer::load_policy(m.best);
  eval::EvalOptions eo;
  eo.episodes = 100;
  eo.seed = derive_seed(kHeldOutEvalSeed, seed);
  m.held_out = eval::evaluate(lp.model, lp.config, eo);
  return m;
}

Models& trained_models(const fs::path& work, bool reuse) {
  static std::optional<Models> models;
  if (!models) {
    const Clock::time_point t0 = Clock::now();
    models.emplace();
    for (std::uint64_t s : kGameSeeds) models->hard.push_back(train_or_reuse(work, policy::ModelKind::Hard, s, reuse));
    for (std::uint64_t s : kGameSeeds) models->base.push_back(train_or_reuse(work, policy::ModelKind::Base, s, reuse));
    models->seconds = seconds_since(t0);
  }
  return *models;
}

Outcome criterion_concept_benefit(const fs::path& work, bool reuse) {
  const Models& m = trained_models(work, reuse);
  std::vector<double> hard, base, range;
  for (const TrainedModel& t : m.hard) {
    hard.push_back(t.held_out.win_rate);
    range.push_back(t.held_out.error("Range")->value);
  }
  for (const TrainedModel& t : m.base) base.push_back(t.held_out.win_rate);
  const double hm = stats::mean(hard), bm = stats::mean(base), rm = stats::mean(range);
  std::string per_seed;
  for (std::size_t i = 0; i < hard.size(); ++i) per_seed += fmt("%.2f/%.2f ", hard[i], base[i]);
  return {hm >= bm && rm < 0.10 && m.seconds < 4 * 3600.0,
          fmt("hard WR %.3f vs base WR %.3f (per seed hard/base: %s), hard Range error %.3f (tol 0.10), %.0fs", hm, bm,
              per_seed.c_str(), rm, m.seconds)};
}

Outcome criterion_intervention_shift(const fs::path& work, bool reuse) {
  const Models& m = trained_models(work, reuse);
  const trainer::LoadedPolicy lp = trainer::load_policy(m.hard.front().best);
  eval::EvalOptions eo;
  eo.episodes = 200;
  eo.seed = 8080;
  eo.shift = game::ShiftConfig::sim_to_real();
  const eval::EvalReport plain = eval::evaluate(lp.model, lp.config, eo);
  eo.intervene = {"Range", "Strategy", "Target", "Orientation", "Position"};
  const eval::EvalReport full = eval::evaluate(lp.model, lp.config, eo);
  const double p = stats::fisher_exact_two_sided(full.wins, full.episodes - full.wins, plain.wins,
                                                 plain.episodes - plain.wins);
  const double gap = full.win_rate - plain.win_rate;
  const bool pass = gap >= 0.0 && (gap <= 0.15 || p < 0.05);
  return {pass, fmt("under shift: intervened WR %.3f vs plain WR %.3f over 200 episodes, gap %.3f, Fisher p = %.3g",
                    full.win_rate, plain.win_rate, gap, p)};
}

Outcome criterion_probe(const fs::path& work, bool reuse) {
  const Models& m = trained_models(work, reuse);
  const trainer::LoadedPolicy lp = trainer::load_policy(m.hard.front().best);
  const concepts::ConceptSchema& s = lp.config.policy.schema;
  const eval::ProbeArm on = eval::run_probe_arm(lp.model, lp.config, eval::probe_intervention(s, eval::ProbeKind::ForceRange, 1),
                                                "range=1", 1000, 9090);
  const eval::ProbeArm off = eval::run_probe_arm(
      lp.model, lp.config, eval::probe_intervention(s, eval::ProbeKind::ForceRange, 0), "range=0", 1000, 9090);
  return {on.tag_frequency > off.tag_frequency,
          fmt("tag frequency with Range forced to 1: %.4f, forced to 0: %.4f (1000 episodes each)", on.tag_frequency,
              off.tag_frequency)};
}

Outcome criterion_serve(const fs::path& work, bool reuse) {
  const Models& m = trained_models(work, reuse);
  const trainer::LoadedPolicy lp = trainer::load_policy(m.hard.front().best);
  constexpr int kEpisodes = 5;
  constexpr std::uint64_t kSeed = 31337;
  std::ostringstream log;
  eval::EvalOptions eo;
  eo.episodes = kEpisodes;
  eo.seed = kSeed;
  eo.log = &log;
  eval::evaluate(lp.model, lp.config, eo);
  std::istringstream in(log.str());
  const std::vector<std::string> expected = serve::read_log(in);

  serve::ServeOptions so;
  so.bind = "127.0.0.1:0";
  so.seed = kSeed;
  so.steps_per_second = 0.0;
  so.wait_for_client = true;
  so.max_episodes = kEpisodes;
  auto server = std::make_unique<serve::Server>(lp.model, lp.config, so);
  const int port = server->port();
  std::thread t([&server] {
    server->run();
    server.reset();
  });
  std::vector<std::string> got;
  {
    serve::Client client("127.0.0.1", port);
    while (std::optional<std::string> payload = client.receive_payload())
      if (json::parse(*payload).value("type", "") == "frame") got.push_back(*payload);
  }
  t.join();
  std::size_t same = 0;
  while (same < got.size() && same < expected.size() && got[same] == expected[same]) ++same;
  return {got == expected, fmt("%zu streamed frames, %zu logged, identical prefix %zu", got.size(), expected.size(), same)};
}

// ---------------------------------------------------------------- 10

Outcome criterion_determinism(const fs::path& work) {
  const ExperimentConfig cfg = default_config();
  trainer::Trainer a(cfg, 17), b(cfg, 17);
  bool same = true;
  std::vector<std::string> ma;
  for (int i = 0; i < 3; ++i) {
    ma.push_back(a.run_phase().dump());
    same = same && ma.back() == b.run_phase().dump();
  }
  same = same && archive::to_bytes(a.checkpoint()) == archive::to_bytes(b.checkpoint());

  trainer::Trainer c(cfg, 17);
  c.run_phase();
  const fs::path ckpt = work / "determinism_phase1.ckpt";
  fs::create_directories(work);
  archive::save(c.checkpoint(), ckpt);
  trainer::Trainer resumed(archive::load(ckpt));
  bool transparent = archive::to_bytes(resumed.checkpoint()) == archive::to_bytes(c.checkpoint());
  for (int i = 1; i < 3; ++i) transparent = transparent && resumed.run_phase().dump() == ma[i];
  transparent = transparent && archive::to_bytes(resumed.checkpoint()) == archive::to_bytes(a.checkpoint());
  return {same && transparent,
          fmt("3 phases twice: %s; save after phase 1, resume, 2 more phases: %s", same ? "bit-identical" : "DIFFERENT",
              transparent ? "bit-identical" : "DIFFERENT")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string work_dir = "acceptance_work";
  std::vector<int> only;
  bool reuse = false;
  app.add_option("--work-dir", work_dir, "Directory for training artifacts");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  app.add_flag("--reuse", reuse, "Reuse trained models found in the work directory");
  CLI11_PARSE(app, argc, argv);
  const fs::path work(work_dir);
  fs::create_directories(work);

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> all = {
      {1, "gradient suite", [] { return criterion_gradients(); }},
      {2, "whitening oracle", [] { return criterion_whitening(); }},
      {3, "focal loss degeneracies", [] { return criterion_focal(); }},
      {4, "schema arithmetic", [] { return criterion_schema(); }},
      {5, "oracle geometry", [] { return criterion_geometry(); }},
      {6, "PPO smoke test", [&] { return criterion_ppo_smoke(work); }},
      {7, "directional concept benefit", [&] { return criterion_concept_benefit(work, reuse); }},
      {8, "intervention under shift", [&] { return criterion_intervention_shift(work, reuse); }},
      {9, "behavioral probe direction", [&] { return criterion_probe(work, reuse); }},
      {10, "determinism", [&] { return criterion_determinism(work); }},
      {11, "serve/eval consistency", [&] { return criterion_serve(work, reuse); }},
  };
  const std::set<int> wanted(only.begin(), only.end());
  int failed = 0;
  for (const Criterion& c : all) {
    if (!wanted.empty() && !wanted.count(c.id)) continue;
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += o.pass ? 0 : 1;
    std::cout << (o.pass ? "PASS" : "FAIL") << " [" << c.id << "] " << c.name << ": " << o.detail << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
