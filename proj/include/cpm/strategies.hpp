#pragma once

#include <array>
#include <cstdint>
#include <string_view>
#include <vector>

#include "cpm/env.hpp"
#include "cpm/rng.hpp"

// Scripted attacker team: one team-level strategy per episode, with each
// attacker following its own noisy copy of the strategy's route.
namespace cpm::strategies {

enum class StrategyKind : std::uint8_t { Left, Right, Random };
inline constexpr int kStrategyCount = 3;
std::string_view strategy_name(StrategyKind kind);
StrategyKind strategy_from_name(std::string_view name);

struct AttackerConfig {
  double noise_scale = 0.1;
  int waypoint_count = 3;
  std::array<double, kStrategyCount> strategy_weights{1.0, 1.0, 1.0};
  double capture_radius = 0.15;

  void validate() const;  // throws ConfigError
};

struct AttackerPolicy {
  StrategyKind kind = StrategyKind::Random;
  // Intermediate points down one side, then the goal. Empty for Random.
  std::vector<env::Vec2> waypoints;
  double noise_scale = 0.0;
  std::uint64_t rng_stream = 0;
  int waypoint_index = 0;

  friend bool operator==(const AttackerPolicy&, const AttackerPolicy&) = default;
};

StrategyKind sample_team_strategy(Rng& rng, const AttackerConfig& config = {});

AttackerPolicy sample_individual_policy(const env::ArenaConfig& arena, const AttackerConfig& config,
                                        StrategyKind kind, int agent, Rng& rng);

// Advances `policy.waypoint_index` when the current waypoint is captured.
// Throws UsageError for a tagged agent or a defender.
env::Action attacker_act(const env::ArenaConfig& arena, const AttackerConfig& config, AttackerPolicy& policy,
                         const env::WorldState& state, int agent, Rng& rng);

}  // namespace cpm::strategies
