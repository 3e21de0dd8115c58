#pragma once

#include <cstdint>
#include <numbers>
#include <span>
#include <string_view>
#include <vector>

#include "cpm/linalg.hpp"
#include "cpm/rng.hpp"

// Tag-game simulator. Attackers spawn in the lower half of a square arena and
// try to reach a goal near the top edge; defenders try to tag every attacker
// (or run out the clock). A tag lands when the target is within `tag_range`
// and inside the tagger's facing cone.
namespace cpm::env {

inline constexpr double kPi = std::numbers::pi;

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  friend Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }
  friend bool operator==(Vec2, Vec2) = default;
};

double norm(Vec2 v);

// Wraps an angle into [-pi, pi).
double wrap_angle(double radians);

enum class Team : std::uint8_t { Attacker, Defender };

enum class Action : std::uint8_t { AccelForward, AccelBackward, RotateLeft, RotateRight, Tag, NoOp };
inline constexpr int kActionCount = 6;
std::string_view action_name(Action a);

enum class Outcome : std::uint8_t { Ongoing, AttackersWin, DefendersWin };
std::string_view outcome_name(Outcome o);
Outcome outcome_from_name(std::string_view name);

struct RewardConfig {
  double tag = 1.0;
  double win = 5.0;
  double tagged = 1.0;
  double lose = 5.0;
  double miss = 0.1;
  // Per-step penalty scale: orientation * |bearing error| / pi.
  double orientation = 0.01;
};

struct ArenaConfig {
  double half_extent = 1.0;
  Vec2 goal_position{0.0, 0.75};
  double goal_radius = 0.15;
  int max_steps = 100;
  int n_per_team = 2;
  double accel_delta = 0.01;
  double rot_delta = kPi / 8.0;
  double tag_range = 0.8;
  double tag_half_angle = kPi / 5.0;
  int tag_cooldown = 5;
  double drag = 0.9;
  double max_speed = 0.08;
  double defender_spawn_radius = 0.3;
  RewardConfig reward;

  // Throws ConfigError.
  void validate() const;
  int agent_count() const { return 2 * n_per_team; }
  double diagonal() const { return 2.0 * std::numbers::sqrt2 * half_extent; }
};

struct AgentState {
  Vec2 position;
  Vec2 velocity;
  double heading = 0.0;
  bool tagged = false;
  Team team = Team::Attacker;
  int cooldown = 0;

  friend bool operator==(const AgentState&, const AgentState&) = default;
};

struct WorldState {
  std::vector<AgentState> agents;  // attackers first, then defenders
  int t = 0;
  Rng rng;
  Outcome outcome = Outcome::Ongoing;

  int n_per_team() const { return static_cast<int>(agents.size()) / 2; }
  friend bool operator==(const WorldState&, const WorldState&) = default;
};

inline int attacker_index(int i) { return i; }
inline int defender_index(const WorldState& s, int i) { return s.n_per_team() + i; }

struct TagEvent {
  int tagger = -1;
  int target = -1;
  friend bool operator==(TagEvent, TagEvent) = default;
};

struct StepInfo {
  std::vector<TagEvent> tags;
  std::vector<int> misses;
  std::vector<bool> tagged_this_step;
  bool attackers_win = false;
  bool defenders_win = false;
};

struct StepResult {
  WorldState state;
  std::vector<double> rewards;  // one per agent; attackers always 0
  StepInfo info;
};

WorldState reset(const ArenaConfig& config, std::uint64_t seed);

// `actions` holds one entry per agent in roster order; entries for tagged
// agents are ignored. Throws UsageError once the episode is over.
StepResult step(const ArenaConfig& config, const WorldState& state, std::span<const Action> actions);

bool tag_check(const ArenaConfig& config, const WorldState& state, int tagger, int target,
               bool ignore_cooldown = false);

// Feature layout (all in the observing agent's frame):
//   own   [x/h, y/h, vx/vmax, vy/vmax, cos(heading), sin(heading), cooldown/tag_cooldown, tagged]
//   other [fwd/h, left/h, dist/h, bearing, dvx_fwd/vmax, dvy_left/vmax, rel_heading, tagged]
// repeated for every other agent in roster order. h = half_extent.
inline constexpr int kOwnFeatures = 8;
inline constexpr int kOtherFeatures = 8;
inline int observation_size(int n_per_team) { return kOwnFeatures + kOtherFeatures * (2 * n_per_team - 1); }
Vector observe(const ArenaConfig& config, const WorldState& state, int agent);

double reward(const ArenaConfig& config, const WorldState& prev, const WorldState& next,
              const StepInfo& info, int agent);

Outcome win_check(const ArenaConfig& config, const WorldState& state);

// Index of the closest untagged agent on the other team, ties to the lowest
// index; -1 when none remain.
int nearest_active_opponent(const WorldState& state, int agent);

}  // namespace cpm::env
