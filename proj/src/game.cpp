#include "cpm/game.hpp"

#include <fstream>

#include "cpm/errors.hpp"

namespace cpm::game {

using cpm::to_json;

void ShiftConfig::validate() const {
  if (!(accel_scale > 0.0) || !(rot_scale > 0.0)) throw ConfigError("shift: scale factors must be positive");
  if (!(obs_noise >= 0.0)) throw ConfigError("shift: obs_noise must be non-negative");
  if (latency < 0) throw ConfigError("shift: latency must be non-negative");
}

json to_json(const ShiftConfig& s) {
  return {{"accel_scale", s.accel_scale}, {"rot_scale", s.rot_scale}, {"obs_noise", s.obs_noise},
          {"latency", s.latency}};
}

ShiftConfig shift_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("shift config must be a JSON object");
  ShiftConfig s;
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    try {
      if (k == "accel_scale") s.accel_scale = it->get<double>();
      else if (k == "rot_scale") s.rot_scale = it->get<double>();
      else if (k == "obs_noise") s.obs_noise = it->get<double>();
      else if (k == "latency") s.latency = it->get<int>();
      else throw ConfigError("unknown shift key '" + k + "'");
    } catch (const json::exception& e) {
      throw ConfigError("shift." + k + ": " + e.what());
    }
  }
  s.validate();
  return s;
}

ShiftConfig load_shift(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open shift file " + path.string());
  try {
    return shift_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ConfigError("shift file " + path.string() + ": " + e.what());
  }
}

TagGameEnv::TagGameEnv(env::ArenaConfig arena, strategies::AttackerConfig attackers, concepts::ConceptSchema schema,
                       ShiftConfig shift)
    : arena_(std::move(arena)), attackers_(attackers), schema_(std::move(schema)), shift_(shift) {
  arena_.validate();
  attackers_.validate();
  shift_.validate();
  if (!schema_.empty() && schema_.n_opponents != arena_.n_per_team)
    throw UsageError("TagGameEnv: concept schema does not match the team size");
  dynamics_ = arena_;
  dynamics_.accel_delta *= shift_.accel_scale;
  dynamics_.rot_delta *= shift_.rot_scale;
  reset(0);
}

void TagGameEnv::reset(std::uint64_t seed) {
  world_ = env::reset(dynamics_, derive_seed(seed, 0));
  Rng strategy_rng(derive_seed(seed, 1));
  strategy_ = strategies::sample_team_strategy(strategy_rng, attackers_);
  attacker_policies_.clear();
  for (int i = 0; i < arena_.n_per_team; ++i)
    attacker_policies_.push_back(strategies::sample_individual_policy(arena_, attackers_, strategy_, i, strategy_rng));
  attacker_rng_ = Rng(derive_seed(seed, 2));
  noise_rng_ = Rng(derive_seed(seed, 3));
  memories_.assign(static_cast<std::size_t>(arena_.n_per_team), {});
  for (int s = 0; s < arena_.n_per_team; ++s)
    memories_[s] = concepts::update_target_memory(memories_[s], world_, defender_agent(s));
  history_.clear();
  last_info_ = {};
  last_actions_.assign(static_cast<std::size_t>(arena_.agent_count()), env::Action::NoOp);
  last_rewards_.assign(static_cast<std::size_t>(arena_.agent_count()), 0.0);
  refresh_observations();
}

void TagGameEnv::refresh_observations() {
  std::vector<Vector> clean;
  for (int s = 0; s < arena_.n_per_team; ++s) clean.push_back(env::observe(arena_, world_, defender_agent(s)));
  history_.push_back(std::move(clean));
  while (static_cast<int>(history_.size()) > shift_.latency + 1) history_.pop_front();
  observations_ = history_.front();
  if (shift_.obs_noise > 0.0)
    for (Vector& o : observations_)
      for (Eigen::Index i = 0; i < o.size(); ++i) o[i] += noise_rng_.normal(0.0, shift_.obs_noise);
}

bool TagGameEnv::active(int slot) const {
  if (slot < 0 || slot >= arena_.n_per_team) throw UsageError("TagGameEnv: slot out of range");
  return !episode_done() && !world_.agents[defender_agent(slot)].tagged;
}

Vector TagGameEnv::observe(int slot) const {
  if (slot < 0 || slot >= arena_.n_per_team) throw UsageError("TagGameEnv: slot out of range");
  return observations_[slot];
}

Vector TagGameEnv::concepts(int slot) const {
  if (schema_.empty()) return Vector(0);
  return concepts::oracle_eval(arena_, world_, defender_agent(slot), schema_, memories_[slot], strategy_);
}

StepOutcome TagGameEnv::step(std::span<const env::Action> actions) {
  const int n = arena_.n_per_team;
  if (static_cast<int>(actions.size()) != n) throw UsageError("TagGameEnv: one action per learner slot expected");
  if (episode_done()) throw UsageError("TagGameEnv: step after the episode ended");

  std::vector<env::Action> all(static_cast<std::size_t>(arena_.agent_count()), env::Action::NoOp);
  for (int i = 0; i < n; ++i)
    if (!world_.agents[i].tagged)
      all[i] = strategies::attacker_act(dynamics_, attackers_, attacker_policies_[i], world_, i, attacker_rng_);
  for (int s = 0; s < n; ++s)
    if (!world_.agents[defender_agent(s)].tagged) all[defender_agent(s)] = actions[s];

  env::StepResult r = env::step(dynamics_, world_, all);
  StepOutcome out;
  out.rewards.assign(static_cast<std::size_t>(n), 0.0);
  out.slot_done.assign(static_cast<std::size_t>(n), false);
  for (int s = 0; s < n; ++s) {
    const int a = defender_agent(s);
    if (world_.agents[a].tagged) continue;
    out.rewards[s] = r.rewards[a];
    out.slot_done[s] = r.state.agents[a].tagged || r.state.outcome != env::Outcome::Ongoing;
  }
  out.episode_done = r.state.outcome != env::Outcome::Ongoing;
  out.learners_won = r.state.outcome == env::Outcome::DefendersWin;

  world_ = std::move(r.state);
  last_info_ = std::move(r.info);
  last_actions_ = std::move(all);
  last_rewards_ = std::move(r.rewards);
  for (int s = 0; s < n; ++s) memories_[s] = concepts::update_target_memory(memories_[s], world_, defender_agent(s));
  refresh_observations();
  return out;
}

json TagGameEnv::save() const {
  json policies = json::array();
  for (const auto& p : attacker_policies_) policies.push_back(to_json(p));
  json memories = json::array();
  for (const auto& m : memories_) memories.push_back(to_json(m));
  json history = json::array();
  for (const auto& frame : history_) {
    json f = json::array();
    for (const Vector& o : frame) f.push_back(to_json(o));
    history.push_back(f);
  }
  json observations = json::array();
  for (const Vector& o : observations_) observations.push_back(to_json(o));
  json actions = json::array();
  for (env::Action a : last_actions_) actions.push_back(static_cast<int>(a));
  return {{"world", to_json(world_)},
          {"strategy", strategies::strategy_name(strategy_)},
          {"attacker_policies", policies},
          {"memories", memories},
          {"attacker_rng", attacker_rng_.state()},
          {"noise_rng", noise_rng_.state()},
          {"history", history},
          {"observations", observations},
          {"last_actions", actions},
          {"last_rewards", last_rewards_}};
}

void TagGameEnv::load(const json& j) {
  try {
    world_ = world_from_json(j.at("world"));
    strategy_ = strategies::strategy_from_name(j.at("strategy").get<std::string>());
    attacker_policies_.clear();
    for (const json& p : j.at("attacker_policies")) attacker_policies_.push_back(attacker_policy_from_json(p));
    memories_.clear();
    for (const json& m : j.at("memories")) memories_.push_back(target_memory_from_json(m));
    attacker_rng_.set_state(j.at("attacker_rng").get<std::string>());
    noise_rng_.set_state(j.at("noise_rng").get<std::string>());
    history_.clear();
    for (const json& f : j.at("history")) {
      std::vector<Vector> frame;
      for (const json& o : f) frame.push_back(vector_from_json(o));
      history_.push_back(std::move(frame));
    }
    observations_.clear();
    for (const json& o : j.at("observations")) observations_.push_back(vector_from_json(o));
    last_actions_.clear();
    for (const json& a : j.at("last_actions")) last_actions_.push_back(static_cast<env::Action>(a.get<int>()));
    last_rewards_ = j.at("last_rewards").get<std::vector<double>>();
    last_info_ = {};
  } catch (const json::exception& e) {
    throw ParseError(std::string("tag game state: ") + e.what());
  }
  if (static_cast<int>(world_.agents.size()) != arena_.agent_count() ||
      static_cast<int>(memories_.size()) != arena_.n_per_team)
    throw ParseError("tag game state does not match the arena configuration");
}

RewardIdentificationEnv::RewardIdentificationEnv(RewardIdConfig config) : config_(config) {
  config_.validate();
  reset(0);
}

void RewardIdentificationEnv::reset(std::uint64_t seed) {
  rng_ = Rng(derive_seed(seed, 0));
  t_ = 0;
  hits_ = 0;
  obs_.resize(config_.obs_dim);
  for (Eigen::Index i = 0; i < obs_.size(); ++i) obs_[i] = rng_.normal();
}

Vector RewardIdentificationEnv::observe(int slot) const {
  if (slot != 0) throw UsageError("RewardIdentificationEnv: slot out of range");
  return obs_;
}

StepOutcome RewardIdentificationEnv::step(std::span<const env::Action> actions) {
  if (actions.size() != 1) throw UsageError("RewardIdentificationEnv: one action expected");
  if (episode_done()) throw UsageError("RewardIdentificationEnv: step after the episode ended");
  const bool hit = static_cast<int>(actions[0]) == config_.rewarded_action;
  hits_ += hit ? 1 : 0;
  ++t_;
  for (Eigen::Index i = 0; i < obs_.size(); ++i) obs_[i] = rng_.normal();
  StepOutcome out;
  out.rewards = {hit ? 1.0 : 0.0};
  out.episode_done = episode_done();
  out.slot_done = {out.episode_done};
  // "Won" when the rewarded action was chosen on most steps.
  out.learners_won = out.episode_done && 2 * hits_ > config_.episode_length;
  return out;
}

json RewardIdentificationEnv::save() const {
  return {{"rng", rng_.state()}, {"t", t_}, {"hits", hits_}, {"obs", to_json(obs_)}};
}

void RewardIdentificationEnv::load(const json& j) {
  try {
    rng_.set_state(j.at("rng").get<std::string>());
    t_ = j.at("t").get<int>();
    hits_ = j.at("hits").get<int>();
    obs_ = vector_from_json(j.at("obs"));
  } catch (const json::exception& e) {
    throw ParseError(std::string("reward identification state: ") + e.what());
  }
}

std::unique_ptr<MultiAgentEnv> make_env(const ExperimentConfig& config, const ShiftConfig& shift) {
  if (config.task == TaskKind::RewardIdentification) return std::make_unique<RewardIdentificationEnv>(config.reward_id);
  return std::make_unique<TagGameEnv>(config.arena, config.attackers, config.policy.schema, shift);
}

}  // namespace cpm::game
