#include "cpm/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "cpm/errors.hpp"
#include "cpm/eval.hpp"
#include "cpm/losses.hpp"

namespace cpm::trainer {

double linear_schedule(double start, double end, std::int64_t step, std::int64_t horizon) {
  if (step <= 0) return start;
  if (step >= horizon) return end;
  const double frac = static_cast<double>(step) / static_cast<double>(horizon);
  return start + (end - start) * frac;
}

void compute_advantages(RolloutBuffer& buffer, double gamma, double lambda) {
  buffer.advantages.assign(buffer.steps.size(), 0.0);
  buffer.returns.assign(buffer.steps.size(), 0.0);
  std::vector<double> rewards, values;
  std::vector<bool> dones_vec;
  std::vector<int> index;
  for (const Trajectory& traj : buffer.trajectories) {
    rewards.clear();
    values.clear();
    dones_vec.clear();
    index.clear();
    for (int s : traj.sequences) {
      const Sequence& seq = buffer.sequences[s];
      for (int k = seq.begin; k < seq.begin + seq.length; ++k) {
        rewards.push_back(buffer.steps[k].reward);
        values.push_back(buffer.steps[k].value);
        dones_vec.push_back(buffer.steps[k].done);
        index.push_back(k);
      }
    }
    // std::vector<bool> has no contiguous storage; copy into a plain array.
    std::unique_ptr<bool[]> dones(new bool[dones_vec.size()]);
    for (std::size_t i = 0; i < dones_vec.size(); ++i) dones[i] = dones_vec[i];
    const losses::GaeResult g = losses::gae_advantages(rewards, values, std::span<const bool>(dones.get(), dones_vec.size()),
                                                       gamma, lambda, traj.bootstrap);
    for (std::size_t i = 0; i < index.size(); ++i) {
      buffer.advantages[index[i]] = g.advantages[i];
      buffer.returns[index[i]] = g.returns[i];
    }
  }
}

namespace {

constexpr std::uint64_t kModelStream = 1;
constexpr std::uint64_t kTrainerStream = 2;
constexpr std::uint64_t kEnvStreamBase = 0x1000;

}  // namespace

Trainer::Trainer(ExperimentConfig config, std::uint64_t seed) : config_(std::move(config)), seed_(seed) {
  config_.validate();
  model_ = policy::make_policy(config_.policy, derive_seed(seed_, kModelStream));
  adam_ = nn::make_adam_state(model_.params.tensors());
  rng_ = Rng(derive_seed(seed_, kTrainerStream));
  init_envs();
  for (int e = 0; e < config_.trainer.num_envs; ++e) reset_env(e);
}

void Trainer::init_envs() {
  envs_.clear();
  for (int e = 0; e < config_.trainer.num_envs; ++e) envs_.push_back(game::make_env(config_));
  env_episodes_.assign(envs_.size(), 0);
  const int rows = config_.trainer.num_envs * envs_[0]->learner_count();
  hidden_ = nn::RecurrentState::zeros(rows, config_.policy.recurrent_size);
}

void Trainer::reset_env(int e) {
  const std::uint64_t base = derive_seed(seed_, kEnvStreamBase + static_cast<std::uint64_t>(e));
  envs_[e]->reset(derive_seed(base, env_episodes_[e]));
  ++env_episodes_[e];
  const int L = envs_[e]->learner_count();
  hidden_.h.middleRows(e * L, L).setZero();
  hidden_.c.middleRows(e * L, L).setZero();
}

void Trainer::close_sequence(RolloutBuffer& buffer, Slot& slot) {
  if (slot.pending.empty()) return;
  Sequence seq;
  seq.trajectory = slot.trajectory;
  seq.begin = buffer.size();
  seq.length = static_cast<int>(slot.pending.size());
  seq.h0 = slot.h0;
  seq.c0 = slot.c0;
  for (Transition& t : slot.pending) buffer.steps.push_back(std::move(t));
  slot.pending.clear();
  buffer.trajectories[slot.trajectory].sequences.push_back(static_cast<int>(buffer.sequences.size()));
  buffer.sequences.push_back(std::move(seq));
}

void Trainer::close_trajectory(RolloutBuffer& buffer, Slot& slot, double bootstrap) {
  if (slot.trajectory < 0) return;
  close_sequence(buffer, slot);
  buffer.trajectories[slot.trajectory].bootstrap = bootstrap;
  slot.trajectory = -1;
}

CollectStats Trainer::collect(RolloutBuffer& buffer) {
  const TrainerConfig& tc = config_.trainer;
  buffer = RolloutBuffer{};
  buffer.capacity = tc.batch_size;
  const int E = static_cast<int>(envs_.size());
  const int L = envs_[0]->learner_count();
  const int rows = E * L;
  const int obs_dim = envs_[0]->obs_dim();
  std::vector<Slot> slots(static_cast<std::size_t>(rows));
  CollectStats stats;
  int recorded = 0;

  Matrix obs(rows, obs_dim);
  std::vector<env::Action> actions(static_cast<std::size_t>(L));
  while (recorded < buffer.capacity) {
    for (int e = 0; e < E; ++e)
      for (int s = 0; s < L; ++s) obs.row(e * L + s) = envs_[e]->observe(s).transpose();
    const nn::RecurrentState before = hidden_;
    const policy::PolicyOutput out = policy::forward(model_, obs, hidden_);

    int room = buffer.capacity - recorded;
    for (int e = 0; e < E; ++e) {
      game::MultiAgentEnv& env = *envs_[e];
      std::vector<int> rec_slots;
      std::vector<policy::ActionChoice> choices(static_cast<std::size_t>(L));
      for (int s = 0; s < L; ++s) {
        const int r = e * L + s;
        actions[s] = env::Action::NoOp;
        if (!env.active(s)) continue;
        choices[s] = policy::act(out.logits.row(r), rng_, policy::ActMode::Sample);
        actions[s] = choices[s].action;
        Slot& slot = slots[r];
        if (room > 0) {
          --room;
          rec_slots.push_back(s);
          if (slot.trajectory < 0) {
            slot.trajectory = static_cast<int>(buffer.trajectories.size());
            buffer.trajectories.emplace_back();
          }
          if (slot.pending.empty()) {
            slot.h0 = before.h.row(r);
            slot.c0 = before.c.row(r);
          }
          Transition t;
          t.obs = obs.row(r).transpose();
          t.action = choices[s].index;
          t.logprob = choices[s].logprob;
          t.value = out.values[r];
          t.concepts = env.concepts(s);
          slot.pending.push_back(std::move(t));
        } else {
          // Out of room: this step is not stored, so cut the trajectory here
          // and bootstrap from the value of the unrecorded state.
          close_trajectory(buffer, slot, out.values[r]);
        }
      }

      const game::StepOutcome so = env.step(actions);
      ++stats.env_steps;
      for (int s : rec_slots) {
        Slot& slot = slots[e * L + s];
        Transition& t = slot.pending.back();
        t.reward = so.rewards[s];
        t.done = so.slot_done[s];
        stats.reward_sum += t.reward;
        ++recorded;
        if (t.done) {
          close_trajectory(buffer, slot, 0.0);
        } else if (static_cast<int>(slot.pending.size()) == tc.sequence_length) {
          close_sequence(buffer, slot);
        }
      }
      if (so.episode_done) {
        ++stats.episodes;
        stats.wins += so.learners_won ? 1 : 0;
        for (int s = 0; s < L; ++s) close_trajectory(buffer, slots[e * L + s], 0.0);
        reset_env(e);
      }
    }
  }

  // Bootstrap the trajectories still open with V of the next observation,
  // leaving the live hidden state untouched for the next collection.
  bool open = false;
  for (const Slot& s : slots) open = open || s.trajectory >= 0;
  if (open) {
    for (int e = 0; e < E; ++e)
      for (int s = 0; s < L; ++s) obs.row(e * L + s) = envs_[e]->observe(s).transpose();
    nn::RecurrentState scratch = hidden_;
    const policy::PolicyOutput out = policy::forward(model_, obs, scratch);
    for (int r = 0; r < rows; ++r) close_trajectory(buffer, slots[r], out.values[r]);
  }
  if (!buffer.full()) throw std::logic_error("collect: buffer not filled");
  return stats;
}

namespace {

struct MinibatchLayout {
  std::vector<int> sequences;
  int T = 0;
  std::vector<int> step_of_row;  // forward row -> buffer step
};

}  // namespace

json Trainer::train_on(RolloutBuffer& buffer) {
  const TrainerConfig& tc = config_.trainer;
  const losses::LossConfig& lc = config_.loss;
  const concepts::ConceptSchema& schema = config_.policy.schema;
  const int j = config_.policy.j();
  compute_advantages(buffer, lc.gamma, lc.lambda);

  const double lr = linear_schedule(tc.lr_start, tc.lr_end, steps_, tc.schedule_horizon);
  losses::LossCoeffs coeffs;
  coeffs.clip = lc.clip;
  coeffs.value = lc.value_coef;
  coeffs.entropy = linear_schedule(tc.entropy_start, tc.entropy_end, steps_, tc.schedule_horizon);
  coeffs.concept_weight = j > 0 ? lc.concept_coef : 0.0;

  const int n_seq = static_cast<int>(buffer.sequences.size());
  const int per_mb = std::min(tc.minibatch_sequences, n_seq);
  const int n_mb = n_seq / per_mb;

  double sum_policy = 0, sum_value = 0, sum_entropy = 0, sum_concept = 0, sum_total = 0, sum_grad = 0;
  std::vector<double> sum_terms(schema.specs.size(), 0.0);
  std::vector<double> err_sum(schema.specs.size(), 0.0);
  std::vector<std::int64_t> err_n(schema.specs.size(), 0);
  double clip_frac = 0.0;
  std::int64_t rows_seen = 0;
  int updates = 0;

  std::vector<int> order(n_seq);
  for (int i = 0; i < n_seq; ++i) order[i] = i;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    for (int i = n_seq - 1; i > 0; --i) std::swap(order[i], order[rng_.uniform_int(i + 1)]);
    for (int mb = 0; mb < n_mb; ++mb) {
      MinibatchLayout lay;
      lay.sequences.assign(order.begin() + mb * per_mb, order.begin() + (mb + 1) * per_mb);
      for (int s : lay.sequences) lay.T = std::max(lay.T, buffer.sequences[s].length);
      const int B = per_mb;
      const int T = lay.T;

      policy::SequenceBatch batch;
      batch.obs.assign(T, Matrix::Zero(B, config_.policy.obs_dim));
      batch.masks.assign(T, Vector::Zero(B));
      batch.initial = nn::RecurrentState::zeros(B, config_.policy.recurrent_size);
      for (int b = 0; b < B; ++b) {
        const Sequence& seq = buffer.sequences[lay.sequences[b]];
        const int pad = T - seq.length;
        batch.initial.h.row(b) = seq.h0;
        batch.initial.c.row(b) = seq.c0;
        for (int k = 0; k < seq.length; ++k) {
          batch.obs[pad + k].row(b) = buffer.steps[seq.begin + k].obs.transpose();
          batch.masks[pad + k][b] = 1.0;
        }
      }

      policy::SequenceForward fwd = policy::forward_sequence(model_, batch, whitening::Mode::Train);
      const int N = static_cast<int>(fwd.rows.size());
      std::vector<int> actions(N);
      std::vector<double> logp_old(N), adv(N), ret(N);
      Matrix truth(N, j);
      for (int r = 0; r < N; ++r) {
        const Sequence& seq = buffer.sequences[lay.sequences[fwd.rows[r].b]];
        const int k = seq.begin + fwd.rows[r].t - (T - seq.length);
        const Transition& tr = buffer.steps[k];
        actions[r] = tr.action;
        logp_old[r] = tr.logprob;
        adv[r] = buffer.advantages[k];
        ret[r] = buffer.returns[k];
        if (j > 0) truth.row(r) = tr.concepts.transpose();
      }
      losses::normalize_advantages(adv);

      losses::ActorCriticTerms ac =
          losses::actor_critic_loss(fwd.logits, actions, logp_old, adv, fwd.values, ret, coeffs);
      Matrix d_concepts = Matrix::Zero(N, j);
      losses::LossBreakdown bd = ac.breakdown;
      if (j > 0) {
        losses::ConceptLoss cl = losses::concept_loss(fwd.concepts, truth, schema, lc.focal_gamma);
        d_concepts = cl.grad * coeffs.concept_weight;
        bd.concept_loss = cl.total;
        bd.concept_terms = cl.per_concept;
        bd.total += coeffs.concept_weight * cl.total;
        if (epoch == 0) {
          for (std::size_t c = 0; c < schema.specs.size(); ++c) {
            for (int r = 0; r < N; ++r) {
              const std::vector<double> e =
                  eval::concept_sample_errors(schema.specs[c], fwd.concepts.row(r).transpose(), truth.row(r).transpose());
              for (double v : e) err_sum[c] += v;
              err_n[c] += static_cast<std::int64_t>(e.size());
            }
          }
        }
      }
      if (!std::isfinite(bd.total)) throw NumericError("train: non-finite loss");

      policy::PolicyGrad grad = policy::backward_sequence(model_, fwd, ac.d_logits, ac.d_values, d_concepts);
      const double gnorm = grad.norm();
      if (!std::isfinite(gnorm)) throw NumericError("train: non-finite gradient");
      if (tc.max_grad_norm > 0.0 && gnorm > tc.max_grad_norm) grad.scale(tc.max_grad_norm / gnorm);
      nn::adam_step(model_.params.tensors(), grad.tensors, adam_, lr);

      for (int r = 0; r < N; ++r) {
        const double ratio = std::exp(ac.logp_new[r] - logp_old[r]);
        clip_frac += std::abs(ratio - 1.0) > lc.clip ? 1.0 : 0.0;
      }
      rows_seen += N;
      sum_policy += bd.policy_loss;
      sum_value += bd.value_loss;
      sum_entropy += bd.entropy;
      sum_concept += bd.concept_loss;
      sum_total += bd.total;
      sum_grad += gnorm;
      for (std::size_t c = 0; c < bd.concept_terms.size(); ++c) sum_terms[c] += bd.concept_terms[c];
      ++updates;
    }
  }

  const double u = std::max(1, updates);
  json per_concept = json::object();
  json concept_errors = json::object();
  for (std::size_t c = 0; c < schema.specs.size(); ++c) {
    per_concept[schema.specs[c].name] = sum_terms[c] / u;
    concept_errors[schema.specs[c].name] = err_n[c] > 0 ? err_sum[c] / static_cast<double>(err_n[c]) : 0.0;
  }
  return {{"lr", lr},
          {"entropy_coef", coeffs.entropy},
          {"updates", updates},
          {"sequences", n_seq},
          {"policy_loss", sum_policy / u},
          {"value_loss", sum_value / u},
          {"entropy", sum_entropy / u},
          {"concept_loss", sum_concept / u},
          {"concept_losses", per_concept},
          {"concept_errors", concept_errors},
          {"total_loss", sum_total / u},
          {"grad_norm", sum_grad / u},
          {"clip_fraction", rows_seen > 0 ? clip_frac / static_cast<double>(rows_seen) : 0.0}};
}

json Trainer::run_phase() {
  const archive::Archive backup = checkpoint();
  try {
    RolloutBuffer buffer;
    const CollectStats cs = collect(buffer);
    json m = train_on(buffer);
    steps_ += buffer.size();
    env_steps_ += cs.env_steps;
    episodes_ += cs.episodes;
    ++phase_;
    m["phase"] = phase_;
    m["steps"] = steps_;
    m["env_steps"] = env_steps_;
    m["transitions"] = buffer.size();
    m["episodes"] = cs.episodes;
    m["total_episodes"] = episodes_;
    m["win_rate"] = cs.episodes > 0 ? static_cast<double>(cs.wins) / cs.episodes : 0.0;
    m["mean_reward"] = cs.reward_sum / buffer.size();
    return m;
  } catch (const NumericError&) {
    *this = Trainer(backup);
    throw;
  }
}

namespace {

const char* kCheckpointKind = "cpm-checkpoint";

void put_policy(archive::Archive& a, const ExperimentConfig& config, const policy::ConceptPolicy& model) {
  a.meta["kind"] = kCheckpointKind;
  a.meta["config"] = config_to_json(config);
  a.meta["config_fingerprint"] = hex64(config.fingerprint());
  a.meta["schema"] = to_json(config.policy.schema);
  policy::ConceptPolicy& m = const_cast<policy::ConceptPolicy&>(model);
  for (const auto& t : m.params.named_tensors()) a.tensors.push_back({"param/" + t.name, *t.tensor});
  a.tensors.push_back({"whitening/running_mean", model.whitening.running_mean.transpose()});
  a.tensors.push_back({"whitening/running_whitener", model.whitening.running_whitener});
}

}  // namespace

archive::Archive policy_archive(const ExperimentConfig& config, const policy::ConceptPolicy& model) {
  archive::Archive a;
  put_policy(a, config, model);
  return a;
}

LoadedPolicy load_policy(const archive::Archive& a) {
  if (a.meta.value("kind", "") != kCheckpointKind) throw ParseError("archive is not a policy checkpoint");
  LoadedPolicy out;
  out.meta = a.meta;
  try {
    out.config = config_from_json(a.meta.at("config"));
  } catch (const ConfigError& e) {
    throw ParseError(std::string("checkpoint config: ") + e.what());
  }
  if (schema_from_json(a.meta.at("schema")) != out.config.policy.schema)
    throw ParseError("checkpoint schema does not match its config");
  out.model = policy::make_policy(out.config.policy, 0);
  for (const auto& t : out.model.params.named_tensors()) {
    const Matrix& m = a.at("param/" + t.name);
    if (m.rows() != t.tensor->rows() || m.cols() != t.tensor->cols())
      throw ParseError("checkpoint tensor '" + t.name + "' has the wrong shape");
    *t.tensor = m;
  }
  const Matrix& mean = a.at("whitening/running_mean");
  const Matrix& white = a.at("whitening/running_whitener");
  const int d = out.config.policy.bottleneck();
  if (mean.size() != d || white.rows() != d || white.cols() != d)
    throw ParseError("checkpoint whitening statistics have the wrong shape");
  out.model.whitening.running_mean = mean.transpose();
  out.model.whitening.running_whitener = white;
  return out;
}

LoadedPolicy load_policy(const std::filesystem::path& path) { return load_policy(archive::load(path)); }

archive::Archive Trainer::checkpoint() const {
  archive::Archive a = policy_archive(config_, model_);
  json envs = json::array();
  for (const auto& e : envs_) envs.push_back(e->save());
  a.meta["trainer"] = {{"seed", seed_},
                       {"steps", steps_},
                       {"env_steps", env_steps_},
                       {"phase", phase_},
                       {"episodes", episodes_},
                       {"best_win_rate", best_win_rate_},
                       {"rng", rng_.state()},
                       {"adam_step", adam_.step},
                       {"env_episodes", env_episodes_},
                       {"envs", envs}};
  policy::ConceptPolicy& m = const_cast<policy::ConceptPolicy&>(model_);
  const auto named = m.params.named_tensors();
  for (std::size_t i = 0; i < named.size(); ++i) {
    a.tensors.push_back({"adam.m/" + named[i].name, adam_.m[i]});
    a.tensors.push_back({"adam.v/" + named[i].name, adam_.v[i]});
  }
  a.tensors.push_back({"hidden/h", hidden_.h});
  a.tensors.push_back({"hidden/c", hidden_.c});
  return a;
}

Trainer::Trainer(const archive::Archive& a) {
  LoadedPolicy lp = load_policy(a);
  if (!a.meta.contains("trainer")) throw ParseError("checkpoint carries no trainer state");
  config_ = std::move(lp.config);
  model_ = std::move(lp.model);
  const json& t = a.meta.at("trainer");
  try {
    seed_ = t.at("seed").get<std::uint64_t>();
    steps_ = t.at("steps").get<std::int64_t>();
    env_steps_ = t.at("env_steps").get<std::int64_t>();
    phase_ = t.at("phase").get<int>();
    episodes_ = t.at("episodes").get<std::int64_t>();
    best_win_rate_ = t.at("best_win_rate").get<double>();
    rng_.set_state(t.at("rng").get<std::string>());
    adam_ = nn::make_adam_state(model_.params.tensors());
    adam_.step = t.at("adam_step").get<std::int64_t>();
    const auto named = model_.params.named_tensors();
    for (std::size_t i = 0; i < named.size(); ++i) {
      adam_.m[i] = a.at("adam.m/" + named[i].name);
      adam_.v[i] = a.at("adam.v/" + named[i].name);
    }
    init_envs();
    env_episodes_ = t.at("env_episodes").get<std::vector<std::uint64_t>>();
    const json& envs = t.at("envs");
    if (envs.size() != envs_.size() || env_episodes_.size() != envs_.size())
      throw ParseError("checkpoint environment count does not match the config");
    for (std::size_t e = 0; e < envs_.size(); ++e) envs_[e]->load(envs[e]);
    hidden_.h = a.at("hidden/h");
    hidden_.c = a.at("hidden/c");
  } catch (const json::exception& e) {
    throw ParseError(std::string("checkpoint trainer state: ") + e.what());
  }
}

TrainResult train(const ExperimentConfig& config, std::uint64_t seed, const std::filesystem::path& out_dir,
                  const std::optional<std::filesystem::path>& resume, const std::function<void(const json&)>& on_metrics) {
  std::error_code ec;
  std::filesystem::create_directories(out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + out_dir.string() + ": " + ec.message());

  std::unique_ptr<Trainer> trainer =
      resume ? std::make_unique<Trainer>(archive::load(*resume)) : std::make_unique<Trainer>(config, seed);
  const ExperimentConfig& cfg = trainer->config();
  const TrainerConfig& tc = cfg.trainer;

  TrainResult result;
  result.final_checkpoint = out_dir / "final.ckpt";
  result.best_checkpoint = out_dir / "best.ckpt";
  std::ofstream metrics(out_dir / "metrics.jsonl", resume ? std::ios::app : std::ios::trunc);
  if (!metrics) throw IoError("cannot write metrics to " + (out_dir / "metrics.jsonl").string());

  const bool evaluating = tc.eval_interval > 0 && cfg.task == TaskKind::TagGame;
  std::int64_t last_eval = trainer->steps() / std::max<std::int64_t>(1, tc.eval_interval);
  std::int64_t last_ckpt = trainer->steps() / std::max<std::int64_t>(1, tc.checkpoint_interval);

  while (!trainer->done()) {
    json m = trainer->run_phase();
    const std::int64_t steps = trainer->steps();
    if (evaluating && (steps / tc.eval_interval > last_eval || trainer->done())) {
      last_eval = steps / tc.eval_interval;
      eval::EvalOptions eo;
      eo.episodes = tc.eval_episodes;
      eo.seed = tc.eval_seed;
      const eval::EvalReport report = eval::evaluate(trainer->model(), cfg, eo);
      m["eval_win_rate"] = report.win_rate;
      if (report.win_rate > trainer->best_win_rate()) {
        trainer->set_best_win_rate(report.win_rate);
        archive::save(policy_archive(cfg, trainer->model()), result.best_checkpoint);
        m["best"] = true;
      }
    }
    if (tc.checkpoint_interval > 0 && steps / tc.checkpoint_interval > last_ckpt) {
      last_ckpt = steps / tc.checkpoint_interval;
      archive::save(trainer->checkpoint(), out_dir / ("step_" + std::to_string(steps) + ".ckpt"));
    }
    metrics << m.dump() << '\n';
    metrics.flush();
    if (on_metrics) on_metrics(m);
    result.metrics.push_back(std::move(m));
  }
  archive::save(trainer->checkpoint(), result.final_checkpoint);
  if (!evaluating || !std::filesystem::exists(result.best_checkpoint))
    archive::save(policy_archive(cfg, trainer->model()), result.best_checkpoint);
  result.best_win_rate = trainer->best_win_rate();
  return result;
}

}  // namespace cpm::trainer
