#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "json.hpp"

#include "cpm/concepts.hpp"
#include "cpm/env.hpp"
#include "cpm/losses.hpp"
#include "cpm/policy.hpp"
#include "cpm/strategies.hpp"

// Experiment configuration and JSON conversions for the core value types.
//
// The config file is a JSON object with the sections `env`, `attackers`,
// `policy`, `whitening`, `loss`, `trainer` and optionally `task`. Every
// section and key is optional; unknown keys are rejected.
namespace cpm {

using json = nlohmann::json;

enum class TaskKind : std::uint8_t { TagGame, RewardIdentification };
std::string_view task_name(TaskKind kind);
TaskKind task_from_name(std::string_view name);

// One-agent diagnostic task: observations are noise and a fixed action
// always pays 1 while every other action pays 0.
struct RewardIdConfig {
  int obs_dim = 4;
  int episode_length = 16;
  int rewarded_action = 3;
  void validate() const;
};

struct TrainerConfig {
  std::int64_t total_steps = 10'000'000;
  int batch_size = 10240;
  int num_envs = 32;
  int sequence_length = 50;
  int minibatch_sequences = 32;
  int epochs = 4;
  double lr_start = 1e-3;
  double lr_end = 1e-4;
  double entropy_start = 0.1;
  double entropy_end = 0.01;
  std::int64_t schedule_horizon = 10'000'000;
  double max_grad_norm = 0.0;  // 0 disables clipping
  std::int64_t eval_interval = 0;  // steps between evaluations; 0 disables
  int eval_episodes = 100;
  std::uint64_t eval_seed = 1'000'003;
  std::int64_t checkpoint_interval = 0;  // steps between checkpoints; 0 = end only
  void validate() const;
};

struct ExperimentConfig {
  TaskKind task = TaskKind::TagGame;
  env::ArenaConfig arena;
  strategies::AttackerConfig attackers;
  policy::ConceptPolicyConfig policy;
  losses::LossConfig loss;
  TrainerConfig trainer;
  RewardIdConfig reward_id;

  void validate() const;
  // Stable hash of the canonical JSON form (seed is not part of the config).
  std::uint64_t fingerprint() const;
};

// Builds the default configuration: 2v2 tag game with a hard concept model.
ExperimentConfig default_config();

ExperimentConfig config_from_json(const json& j);
json config_to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);  // throws IoError / ConfigError

json to_json(const env::ArenaConfig& c);
env::ArenaConfig arena_from_json(const json& j);
json to_json(const strategies::AttackerConfig& c);
strategies::AttackerConfig attackers_from_json(const json& j);

json to_json(const env::WorldState& s);
env::WorldState world_from_json(const json& j);
json to_json(const strategies::AttackerPolicy& p);
strategies::AttackerPolicy attacker_policy_from_json(const json& j);
json to_json(const concepts::TargetMemory& m);
concepts::TargetMemory target_memory_from_json(const json& j);

json to_json(const concepts::ConceptSchema& s);
concepts::ConceptSchema schema_from_json(const json& j);
json to_json(const policy::Intervention& iv);
policy::Intervention intervention_from_json(const json& j);

json to_json(const Vector& v);
Vector vector_from_json(const json& j);
json to_json(const Matrix& m);
Matrix matrix_from_json(const json& j);

std::string hex64(std::uint64_t v);

}  // namespace cpm
