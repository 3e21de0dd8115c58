#include "cpm/env.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "cpm/errors.hpp"

namespace cpm::env {

double norm(Vec2 v) { return std::hypot(v.x, v.y); }

double wrap_angle(double radians) {
  double wrapped = radians - 2.0 * kPi * std::floor((radians + kPi) / (2.0 * kPi));
  // floor() rounding can land exactly on +pi for inputs just below it.
  if (wrapped >= kPi) wrapped -= 2.0 * kPi;
  if (wrapped < -kPi) wrapped += 2.0 * kPi;
  return wrapped;
}

std::string_view action_name(Action a) {
  switch (a) {
    case Action::AccelForward: return "accel_forward";
    case Action::AccelBackward: return "accel_backward";
    case Action::RotateLeft: return "rotate_left";
    case Action::RotateRight: return "rotate_right";
    case Action::Tag: return "tag";
    case Action::NoOp: return "noop";
  }
  return "?";
}

std::string_view outcome_name(Outcome o) {
  switch (o) {
    case Outcome::Ongoing: return "ongoing";
    case Outcome::AttackersWin: return "attackers_win";
    case Outcome::DefendersWin: return "defenders_win";
  }
  return "?";
}

Outcome outcome_from_name(std::string_view name) {
  if (name == "ongoing") return Outcome::Ongoing;
  if (name == "attackers_win") return Outcome::AttackersWin;
  if (name == "defenders_win") return Outcome::DefendersWin;
  throw ParseError("unknown outcome '" + std::string(name) + "'");
}

void ArenaConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError("env: " + msg); };
  if (!(half_extent > 0.0)) fail("half_extent must be positive");
  if (!(tag_range > 0.0)) fail("tag_range must be positive");
  if (!(tag_half_angle > 0.0 && tag_half_angle < kPi)) fail("tag_half_angle must lie in (0, pi)");
  if (max_steps <= 0) fail("max_steps must be positive");
  if (n_per_team < 1) fail("n_per_team must be at least 1");
  if (!(goal_radius > 0.0)) fail("goal_radius must be positive");
  if (std::abs(goal_position.x) > half_extent || goal_position.y < 0.0 || goal_position.y > half_extent)
    fail("goal_position must lie in the upper half of the arena");
  if (!(accel_delta >= 0.0) || !(rot_delta >= 0.0)) fail("accel_delta and rot_delta must be non-negative");
  if (!(drag > 0.0 && drag <= 1.0)) fail("drag must lie in (0, 1]");
  if (!(max_speed > 0.0)) fail("max_speed must be positive");
  if (tag_cooldown < 0) fail("tag_cooldown must be non-negative");
  if (!(defender_spawn_radius > 0.0)) fail("defender_spawn_radius must be positive");
}

namespace {

double bearing_offset(const AgentState& from, Vec2 to) {
  const Vec2 d = to - from.position;
  return wrap_angle(std::atan2(d.y, d.x) - from.heading);
}

void check_agent(const WorldState& state, int agent) {
  if (agent < 0 || agent >= static_cast<int>(state.agents.size()))
    throw UsageError("agent index " + std::to_string(agent) + " out of range");
}

}  // namespace

WorldState reset(const ArenaConfig& config, std::uint64_t seed) {
  config.validate();
  WorldState state;
  state.rng = Rng(seed);
  const int n = config.n_per_team;
  const double h = config.half_extent;
  state.agents.reserve(2 * n);
  for (int i = 0; i < n; ++i) {
    AgentState a;
    a.team = Team::Attacker;
    a.position.x = state.rng.uniform(-h, h);
    a.position.y = state.rng.uniform(-h, 0.0);
    a.heading = kPi / 2.0;
    state.agents.push_back(a);
  }
  const double r = config.defender_spawn_radius;
  for (int i = 0; i < n; ++i) {
    AgentState d;
    d.team = Team::Defender;
    d.heading = -kPi / 2.0;
    // Rejection sample a uniform point of the disc around the goal that also
    // lies inside the arena.
    for (;;) {
      const double dx = state.rng.uniform(-r, r);
      const double dy = state.rng.uniform(-r, r);
      if (dx * dx + dy * dy > r * r) continue;
      const Vec2 p = config.goal_position + Vec2{dx, dy};
      if (std::abs(p.x) > h || std::abs(p.y) > h) continue;
      d.position = p;
      break;
    }
    state.agents.push_back(d);
  }
  return state;
}

bool tag_check(const ArenaConfig& config, const WorldState& state, int tagger, int target,
               bool ignore_cooldown) {
  check_agent(state, tagger);
  check_agent(state, target);
  const AgentState& a = state.agents[tagger];
  const AgentState& b = state.agents[target];
  if (a.team == b.team) throw UsageError("tag_check: tagger and target are on the same team");
  if (a.tagged) throw UsageError("tag_check: tagger is tagged");
  if (b.tagged) return false;
  if (!ignore_cooldown && a.cooldown != 0) return false;
  if (norm(b.position - a.position) > config.tag_range) return false;
  return std::abs(bearing_offset(a, b.position)) <= config.tag_half_angle;
}

int nearest_active_opponent(const WorldState& state, int agent) {
  check_agent(state, agent);
  const AgentState& self = state.agents[agent];
  int best = -1;
  double best_distance = 0.0;
  for (int j = 0; j < static_cast<int>(state.agents.size()); ++j) {
    const AgentState& other = state.agents[j];
    if (other.team == self.team || other.tagged) continue;
    const double d = norm(other.position - self.position);
    if (best < 0 || d < best_distance) {
      best = j;
      best_distance = d;
    }
  }
  return best;
}

Outcome win_check(const ArenaConfig& config, const WorldState& state) {
  bool all_tagged = true;
  for (const AgentState& a : state.agents) {
    if (a.team != Team::Attacker || a.tagged) continue;
    all_tagged = false;
    if (norm(a.position - config.goal_position) <= config.goal_radius) return Outcome::AttackersWin;
  }
  if (all_tagged || state.t >= config.max_steps) return Outcome::DefendersWin;
  return Outcome::Ongoing;
}

StepResult step(const ArenaConfig& config, const WorldState& state, std::span<const Action> actions) {
  if (state.outcome != Outcome::Ongoing) throw UsageError("step: episode already finished");
  const int count = static_cast<int>(state.agents.size());
  if (static_cast<int>(actions.size()) != count)
    throw UsageError("step: expected " + std::to_string(count) + " actions, got " +
                     std::to_string(actions.size()));

  StepResult result;
  result.state = state;
  WorldState& next = result.state;
  StepInfo& info = result.info;
  info.tagged_this_step.assign(count, false);

  // Tags resolve against the pre-step poses, all at once, so mutual tags
  // land on both agents.
  std::vector<bool> attempted(count, false);
  for (int i = 0; i < count; ++i) {
    const AgentState& a = state.agents[i];
    if (a.tagged || actions[i] != Action::Tag) continue;
    if (a.cooldown != 0) {
      info.misses.push_back(i);
      continue;
    }
    attempted[i] = true;
    int best = -1;
    double best_distance = 0.0;
    for (int j = 0; j < count; ++j) {
      if (state.agents[j].team == a.team || !tag_check(config, state, i, j)) continue;
      const double d = norm(state.agents[j].position - a.position);
      if (best < 0 || d < best_distance) {
        best = j;
        best_distance = d;
      }
    }
    if (best >= 0) {
      info.tags.push_back({i, best});
    } else {
      info.misses.push_back(i);
    }
  }
  for (const TagEvent& e : info.tags) {
    next.agents[e.target].tagged = true;
    info.tagged_this_step[e.target] = true;
  }

  const double h = config.half_extent;
  for (int i = 0; i < count; ++i) {
    if (state.agents[i].tagged) continue;
    AgentState& a = next.agents[i];
    a.cooldown = attempted[i] ? config.tag_cooldown : std::max(0, a.cooldown - 1);
    if (a.tagged) continue;  // tagged this step: pose freezes

    const Action act = actions[i];
    if (act == Action::RotateLeft) a.heading = wrap_angle(a.heading + config.rot_delta);
    if (act == Action::RotateRight) a.heading = wrap_angle(a.heading - config.rot_delta);

    a.position = a.position + a.velocity;
    if (a.position.x > h) { a.position.x = h; a.velocity.x = std::min(a.velocity.x, 0.0); }
    if (a.position.x < -h) { a.position.x = -h; a.velocity.x = std::max(a.velocity.x, 0.0); }
    if (a.position.y > h) { a.position.y = h; a.velocity.y = std::min(a.velocity.y, 0.0); }
    if (a.position.y < -h) { a.position.y = -h; a.velocity.y = std::max(a.velocity.y, 0.0); }

    double accel = 0.0;
    if (act == Action::AccelForward) accel = config.accel_delta;
    if (act == Action::AccelBackward) accel = -config.accel_delta;
    a.velocity = config.drag * (a.velocity + accel * Vec2{std::cos(a.heading), std::sin(a.heading)});
    const double speed = norm(a.velocity);
    if (speed > config.max_speed) a.velocity = (config.max_speed / speed) * a.velocity;
  }

  next.t = state.t + 1;
  next.outcome = win_check(config, next);
  info.attackers_win = next.outcome == Outcome::AttackersWin;
  info.defenders_win = next.outcome == Outcome::DefendersWin;

  result.rewards.assign(count, 0.0);
  for (int i = 0; i < count; ++i)
    if (state.agents[i].team == Team::Defender) result.rewards[i] = reward(config, state, next, info, i);
  return result;
}

double reward(const ArenaConfig& config, const WorldState& prev, const WorldState& next,
              const StepInfo& info, int agent) {
  check_agent(prev, agent);
  if (prev.agents[agent].team != Team::Defender) throw UsageError("reward: only defenders are rewarded");
  const RewardConfig& rc = config.reward;
  double r = 0.0;
  if (!prev.agents[agent].tagged) {
    const int opponent = nearest_active_opponent(next, agent);
    if (opponent >= 0) {
      const double err = std::abs(bearing_offset(next.agents[agent], next.agents[opponent].position));
      r -= rc.orientation * err / kPi;
    }
    if (std::find(info.misses.begin(), info.misses.end(), agent) != info.misses.end()) r -= rc.miss;
    if (info.tagged_this_step.size() > static_cast<std::size_t>(agent) && info.tagged_this_step[agent])
      r -= rc.tagged;
    for (const TagEvent& e : info.tags)
      if (e.tagger == agent) r += rc.tag;
  }
  if (next.outcome == Outcome::AttackersWin) r -= rc.lose;
  if (next.outcome == Outcome::DefendersWin) r += rc.win;
  return r;
}

Vector observe(const ArenaConfig& config, const WorldState& state, int agent) {
  check_agent(state, agent);
  const int count = static_cast<int>(state.agents.size());
  const AgentState& self = state.agents[agent];
  const double h = config.half_extent;
  const double vmax = config.max_speed;
  const double c = std::cos(self.heading);
  const double s = std::sin(self.heading);

  Vector obs(kOwnFeatures + kOtherFeatures * (count - 1));
  obs[0] = self.position.x / h;
  obs[1] = self.position.y / h;
  obs[2] = self.velocity.x / vmax;
  obs[3] = self.velocity.y / vmax;
  obs[4] = c;
  obs[5] = s;
  obs[6] = config.tag_cooldown > 0 ? static_cast<double>(self.cooldown) / config.tag_cooldown : 0.0;
  obs[7] = self.tagged ? 1.0 : 0.0;

  int k = kOwnFeatures;
  for (int j = 0; j < count; ++j) {
    if (j == agent) continue;
    const AgentState& other = state.agents[j];
    const Vec2 d = other.position - self.position;
    const Vec2 dv = other.velocity - self.velocity;
    obs[k + 0] = (c * d.x + s * d.y) / h;
    obs[k + 1] = (-s * d.x + c * d.y) / h;
    obs[k + 2] = norm(d) / h;
    obs[k + 3] = bearing_offset(self, other.position);
    obs[k + 4] = (c * dv.x + s * dv.y) / vmax;
    obs[k + 5] = (-s * dv.x + c * dv.y) / vmax;
    obs[k + 6] = wrap_angle(other.heading - self.heading);
    obs[k + 7] = other.tagged ? 1.0 : 0.0;
    k += kOtherFeatures;
  }
  return obs;
}

}  // namespace cpm::env
