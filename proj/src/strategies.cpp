#include "cpm/strategies.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cpm/errors.hpp"

namespace cpm::strategies {

using env::Action;
using env::Vec2;

std::string_view strategy_name(StrategyKind kind) {
  switch (kind) {
    case StrategyKind::Left: return "left";
    case StrategyKind::Right: return "right";
    case StrategyKind::Random: return "random";
  }
  return "?";
}

StrategyKind strategy_from_name(std::string_view name) {
  if (name == "left") return StrategyKind::Left;
  if (name == "right") return StrategyKind::Right;
  if (name == "random") return StrategyKind::Random;
  throw ParseError("unknown strategy '" + std::string(name) + "'");
}

void AttackerConfig::validate() const {
  if (!(noise_scale >= 0.0)) throw ConfigError("attackers: noise_scale must be non-negative");
  if (waypoint_count < 1) throw ConfigError("attackers: waypoint_count must be at least 1");
  if (!(capture_radius > 0.0)) throw ConfigError("attackers: capture_radius must be positive");
  double total = 0.0;
  for (double w : strategy_weights) {
    if (!(w >= 0.0)) throw ConfigError("attackers: strategy weights must be non-negative");
    total += w;
  }
  if (!(total > 0.0)) throw ConfigError("attackers: strategy weights sum to zero");
}

StrategyKind sample_team_strategy(Rng& rng, const AttackerConfig& config) {
  const auto& w = config.strategy_weights;
  const double total = w[0] + w[1] + w[2];
  const double u = rng.uniform() * total;
  if (u < w[0]) return StrategyKind::Left;
  if (u < w[0] + w[1]) return StrategyKind::Right;
  return StrategyKind::Random;
}

AttackerPolicy sample_individual_policy(const env::ArenaConfig& arena, const AttackerConfig& config,
                                        StrategyKind kind, int agent, Rng& rng) {
  AttackerPolicy policy;
  policy.kind = kind;
  policy.noise_scale = config.noise_scale;
  policy.rng_stream = static_cast<std::uint64_t>(agent);
  if (kind == StrategyKind::Random) return policy;

  const double side = kind == StrategyKind::Left ? -1.0 : 1.0;
  const double h = arena.half_extent;
  const int m = config.waypoint_count;
  for (int i = 0; i < m; ++i) {
    const double frac = m == 1 ? 0.5 : static_cast<double>(i) / (m - 1);
    Vec2 p{side * h * (0.7 - 0.25 * frac * frac), h * (-0.35 + 0.85 * frac)};
    p.x += rng.normal(0.0, config.noise_scale);
    p.y += rng.normal(0.0, config.noise_scale);
    // Keep the route on its side of the arena.
    const double inner = 0.05 * h;
    const double outer = 0.95 * h;
    p.x = side < 0 ? std::clamp(p.x, -outer, -inner) : std::clamp(p.x, inner, outer);
    p.y = std::clamp(p.y, -outer, outer);
    policy.waypoints.push_back(p);
  }
  policy.waypoints.push_back(arena.goal_position);
  return policy;
}

namespace {

constexpr double kSteeringLead = 3.0;  // steps

}  // namespace

Action attacker_act(const env::ArenaConfig& arena, const AttackerConfig& config, AttackerPolicy& policy,
                    const env::WorldState& state, int agent, Rng& rng) {
  if (agent < 0 || agent >= static_cast<int>(state.agents.size()))
    throw UsageError("attacker_act: agent index out of range");
  const env::AgentState& self = state.agents[agent];
  if (self.team != env::Team::Attacker) throw UsageError("attacker_act: agent is not an attacker");
  if (self.tagged) throw UsageError("attacker_act: agent is tagged");

  const int defender = env::nearest_active_opponent(state, agent);
  if (defender >= 0 && env::tag_check(arena, state, agent, defender)) return Action::Tag;

  if (policy.kind == StrategyKind::Random) {
    static constexpr Action kMoves[] = {Action::AccelForward, Action::AccelBackward, Action::RotateLeft,
                                        Action::RotateRight};
    return kMoves[rng.uniform_int(4)];
  }
  if (policy.waypoints.empty()) throw UsageError("attacker_act: waypoint policy without waypoints");

  const int last = static_cast<int>(policy.waypoints.size()) - 1;
  policy.waypoint_index = std::clamp(policy.waypoint_index, 0, last);
  if (policy.waypoint_index < last &&
      env::norm(policy.waypoints[policy.waypoint_index] - self.position) <= config.capture_radius)
    ++policy.waypoint_index;

  // Steer from where momentum carries the agent a few steps ahead; aiming
  // from the current position orbits the waypoint under drag.
  const Vec2 d = policy.waypoints[policy.waypoint_index] - (self.position + kSteeringLead * self.velocity);
  const double err = env::wrap_angle(std::atan2(d.y, d.x) - self.heading);
  if (std::abs(err) > arena.rot_delta) return err > 0 ? Action::RotateLeft : Action::RotateRight;
  return Action::AccelForward;
}

}  // namespace cpm::strategies
