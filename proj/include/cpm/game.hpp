#pragma once

#include <cstdint>
#include <deque>
#include <memory>
#include <span>
#include <vector>

#include "cpm/concepts.hpp"
#include "cpm/config.hpp"
#include "cpm/env.hpp"
#include "cpm/strategies.hpp"

// Multi-agent environments seen from the learners' side. Each learner slot
// is one agent driven by the shared policy; everything else (scripted
// attackers, observation noise, delays) lives inside the environment.
namespace cpm::game {

// Sim-to-real proxy: scaled dynamics, noisy and delayed observations.
struct ShiftConfig {
  double accel_scale = 1.0;
  double rot_scale = 1.0;
  double obs_noise = 0.0;
  int latency = 0;

  bool identity() const { return accel_scale == 1.0 && rot_scale == 1.0 && obs_noise == 0.0 && latency == 0; }
  void validate() const;  // throws ConfigError
  static ShiftConfig sim_to_real() { return {0.7, 0.6, 0.02, 1}; }
};

json to_json(const ShiftConfig& s);
ShiftConfig shift_from_json(const json& j);
ShiftConfig load_shift(const std::filesystem::path& path);

struct StepOutcome {
  std::vector<double> rewards;      // per learner slot (0 for inactive slots)
  std::vector<bool> slot_done;      // slot stopped acting after this step
  bool episode_done = false;
  bool learners_won = false;        // only meaningful once episode_done
};

class MultiAgentEnv {
 public:
  virtual ~MultiAgentEnv() = default;

  virtual int learner_count() const = 0;
  virtual int obs_dim() const = 0;
  virtual void reset(std::uint64_t seed) = 0;
  virtual bool active(int slot) const = 0;
  virtual bool episode_done() const = 0;
  // Observation as the policy sees it (after any shift).
  virtual Vector observe(int slot) const = 0;
  // Ground-truth concept vector for an active slot (empty if no schema).
  virtual Vector concepts(int slot) const = 0;
  // Actions for every slot; inactive slots are ignored.
  virtual StepOutcome step(std::span<const env::Action> actions) = 0;

  virtual json save() const = 0;
  virtual void load(const json& j) = 0;
};

class TagGameEnv final : public MultiAgentEnv {
 public:
  TagGameEnv(env::ArenaConfig arena, strategies::AttackerConfig attackers, concepts::ConceptSchema schema,
             ShiftConfig shift = {});

  int learner_count() const override { return arena_.n_per_team; }
  int obs_dim() const override { return env::observation_size(arena_.n_per_team); }
  void reset(std::uint64_t seed) override;
  bool active(int slot) const override;
  bool episode_done() const override { return world_.outcome != env::Outcome::Ongoing; }
  Vector observe(int slot) const override;
  Vector concepts(int slot) const override;
  StepOutcome step(std::span<const env::Action> actions) override;
  json save() const override;
  void load(const json& j) override;

  const env::WorldState& world() const { return world_; }
  const env::ArenaConfig& arena() const { return arena_; }
  const env::ArenaConfig& dynamics() const { return dynamics_; }
  const concepts::ConceptSchema& schema() const { return schema_; }
  strategies::StrategyKind strategy() const { return strategy_; }
  const std::vector<strategies::AttackerPolicy>& attacker_policies() const { return attacker_policies_; }
  const concepts::TargetMemory& target_memory(int slot) const { return memories_[slot]; }
  const env::StepInfo& last_info() const { return last_info_; }
  const std::vector<env::Action>& last_actions() const { return last_actions_; }
  const std::vector<double>& last_rewards() const { return last_rewards_; }
  int defender_agent(int slot) const { return arena_.n_per_team + slot; }

 private:
  void refresh_observations();

  env::ArenaConfig arena_;
  env::ArenaConfig dynamics_;
  strategies::AttackerConfig attackers_;
  concepts::ConceptSchema schema_;
  ShiftConfig shift_;

  env::WorldState world_;
  strategies::StrategyKind strategy_ = strategies::StrategyKind::Random;
  std::vector<strategies::AttackerPolicy> attacker_policies_;
  std::vector<concepts::TargetMemory> memories_;
  Rng attacker_rng_;
  Rng noise_rng_;
  std::deque<std::vector<Vector>> history_;  // clean observations, newest last
  std::vector<Vector> observations_;
  env::StepInfo last_info_;
  std::vector<env::Action> last_actions_;
  std::vector<double> last_rewards_;
};

class RewardIdentificationEnv final : public MultiAgentEnv {
 public:
  explicit RewardIdentificationEnv(RewardIdConfig config);

  int learner_count() const override { return 1; }
  int obs_dim() const override { return config_.obs_dim; }
  void reset(std::uint64_t seed) override;
  bool active(int) const override { return !episode_done(); }
  bool episode_done() const override { return t_ >= config_.episode_length; }
  Vector observe(int slot) const override;
  Vector concepts(int) const override { return Vector(0); }
  StepOutcome step(std::span<const env::Action> actions) override;
  json save() const override;
  void load(const json& j) override;

 private:
  RewardIdConfig config_;
  Rng rng_;
  int t_ = 0;
  int hits_ = 0;
  Vector obs_;
};

// Environment for an experiment's task.
std::unique_ptr<MultiAgentEnv> make_env(const ExperimentConfig& config, const ShiftConfig& shift = {});

}  // namespace cpm::game
