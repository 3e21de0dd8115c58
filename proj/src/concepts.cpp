#include "cpm/concepts.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>

#include "cpm/errors.hpp"

namespace cpm::concepts {

std::string_view mode_name(ConceptMode mode) {
  switch (mode) {
    case ConceptMode::Hard: return "hard";
    case ConceptMode::Soft: return "soft";
    case ConceptMode::Custom: return "custom";
  }
  return "?";
}

ConceptMode mode_from_name(std::string_view name) {
  if (name == "hard") return ConceptMode::Hard;
  if (name == "soft") return ConceptMode::Soft;
  if (name == "custom") return ConceptMode::Custom;
  throw ParseError("unknown concept mode '" + std::string(name) + "'");
}

std::string_view kind_name(ConceptKind kind) {
  switch (kind) {
    case ConceptKind::Binary: return "binary";
    case ConceptKind::DiscreteGroup: return "group";
    case ConceptKind::Continuous: return "continuous";
  }
  return "?";
}

ConceptKind kind_from_name(std::string_view name) {
  if (name == "binary") return ConceptKind::Binary;
  if (name == "group") return ConceptKind::DiscreteGroup;
  if (name == "continuous") return ConceptKind::Continuous;
  throw ParseError("unknown concept kind '" + std::string(name) + "'");
}

const ConceptSpec* ConceptSchema::find(std::string_view name) const {
  for (const ConceptSpec& s : specs)
    if (s.name == name) return &s;
  return nullptr;
}

const ConceptSpec& ConceptSchema::at(std::string_view name) const {
  const ConceptSpec* s = find(name);
  if (s == nullptr) throw UsageError("concept '" + std::string(name) + "' is not in the schema");
  return *s;
}

std::vector<IndexRange> ConceptSchema::softmax_groups() const {
  std::vector<IndexRange> groups;
  for (const ConceptSpec& s : specs)
    if (s.kind == ConceptKind::DiscreteGroup)
      for (int m = 0; m < s.multiplicity; ++m) groups.push_back(s.instance(m));
  return groups;
}

std::uint64_t ConceptSchema::fingerprint() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
      h ^= (v >> (8 * i)) & 0xFF;
      h *= 0x100000001b3ULL;
    }
  };
  mix(static_cast<std::uint64_t>(mode));
  mix(static_cast<std::uint64_t>(n_opponents));
  for (const ConceptSpec& s : specs) {
    for (char c : s.name) mix(static_cast<unsigned char>(c));
    mix(static_cast<std::uint64_t>(s.kind));
    mix(static_cast<std::uint64_t>(s.group_size));
    mix(static_cast<std::uint64_t>(s.multiplicity));
  }
  return h;
}

std::string canonical_concept_name(std::string_view name) {
  for (std::string_view known : kConceptNames) {
    if (known.size() != name.size()) continue;
    bool same = true;
    for (std::size_t i = 0; i < known.size(); ++i)
      same = same && std::tolower(static_cast<unsigned char>(known[i])) ==
                         std::tolower(static_cast<unsigned char>(name[i]));
    if (same) return std::string(known);
  }
  throw UsageError("unknown concept '" + std::string(name) + "'");
}

namespace {

ConceptSpec make_spec(std::string_view name, int n) {
  if (name == "Range") return {"Range", ConceptKind::Binary, 1, n, 0};
  if (name == "Strategy") return {"Strategy", ConceptKind::DiscreteGroup, strategies::kStrategyCount, 1, 0};
  if (name == "Target") return {"Target", ConceptKind::DiscreteGroup, 2, n, 0};
  if (name == "Orientation") return {"Orientation", ConceptKind::Continuous, 1, n, 0};
  return {"Position", ConceptKind::Continuous, 1, n, 0};
}

}  // namespace

ConceptSchema build_schema_subset(int n_opponents, std::span<const std::string> names) {
  if (n_opponents < 1) throw UsageError("build_schema: n_opponents must be at least 1");
  std::vector<std::string> wanted;
  for (const std::string& n : names) wanted.push_back(canonical_concept_name(n));

  ConceptSchema schema;
  schema.n_opponents = n_opponents;
  for (std::string_view name : kConceptNames) {
    if (std::find(wanted.begin(), wanted.end(), name) == wanted.end()) continue;
    ConceptSpec spec = make_spec(name, n_opponents);
    spec.offset = schema.dim;
    schema.dim += spec.node_count();
    schema.specs.push_back(spec);
  }
  const auto has = [&](std::string_view n) { return schema.find(n) != nullptr; };
  if (schema.specs.size() == 5) {
    schema.mode = ConceptMode::Hard;
  } else if (schema.specs.size() == 3 && has("Range") && has("Strategy") && has("Target")) {
    schema.mode = ConceptMode::Soft;
  } else {
    schema.mode = ConceptMode::Custom;
  }
  return schema;
}

ConceptSchema build_schema(int n_opponents, ConceptMode mode) {
  std::vector<std::string> names;
  if (mode == ConceptMode::Hard) {
    names.assign(kConceptNames.begin(), kConceptNames.end());
  } else if (mode == ConceptMode::Soft) {
    names = {"Range", "Strategy", "Target"};
  } else {
    throw UsageError("build_schema: use build_schema_subset for custom schemas");
  }
  return build_schema_subset(n_opponents, names);
}

std::vector<int> opponents_of(const env::WorldState& state, int agent) {
  std::vector<int> out;
  const env::Team team = state.agents.at(agent).team;
  for (int j = 0; j < static_cast<int>(state.agents.size()); ++j)
    if (state.agents[j].team != team) out.push_back(j);
  return out;
}

TargetMemory update_target_memory(TargetMemory memory, const env::WorldState& state, int agent) {
  const std::vector<int> opponents = opponents_of(state, agent);
  const bool need_pick = !memory.initialized ||
                         (memory.target >= 0 && state.agents[opponents[memory.target]].tagged);
  if (!need_pick) return memory;

  const env::Vec2 self = state.agents[agent].position;
  int best = -1;
  double best_distance = 0.0;
  for (int m = 0; m < static_cast<int>(opponents.size()); ++m) {
    const env::AgentState& o = state.agents[opponents[m]];
    if (o.tagged) continue;
    const double d = env::norm(o.position - self);
    if (best < 0 || d < best_distance) {
      best = m;
      best_distance = d;
    }
  }
  if (memory.initialized && best != memory.target) ++memory.changes;
  memory.initialized = true;
  memory.target = best;
  return memory;
}

Vector oracle_eval(const env::ArenaConfig& config, const env::WorldState& state, int agent,
                   const ConceptSchema& schema, const TargetMemory& memory, strategies::StrategyKind strategy) {
  if (agent < 0 || agent >= static_cast<int>(state.agents.size()))
    throw UsageError("oracle_eval: agent index out of range");
  const env::AgentState& self = state.agents[agent];
  if (self.tagged) throw UsageError("oracle_eval: agent is tagged");
  const std::vector<int> opponents = opponents_of(state, agent);
  if (static_cast<int>(opponents.size()) != schema.n_opponents && !schema.empty())
    throw UsageError("oracle_eval: schema opponent count does not match the world");

  Vector v = Vector::Zero(schema.dim);
  for (const ConceptSpec& spec : schema.specs) {
    for (int m = 0; m < spec.multiplicity; ++m) {
      const int node = spec.instance(m).begin;
      if (spec.name == "Strategy") {
        v[node + static_cast<int>(strategy)] = 1.0;
        continue;
      }
      if (spec.name == "Target") {
        v[node + (memory.target == m ? 0 : 1)] = 1.0;
        continue;
      }
      const env::AgentState& o = state.agents[opponents[m]];
      const double dx = o.position.x - self.position.x;
      const double dy = o.position.y - self.position.y;
      const double distance = std::sqrt(dx * dx + dy * dy);
      const double bearing = env::wrap_angle(std::atan2(dy, dx) - self.heading);
      if (spec.name == "Range") {
        v[node] = (!o.tagged && distance <= config.tag_range && std::abs(bearing) <= config.tag_half_angle) ? 1.0
                                                                                                          : 0.0;
      } else if (spec.name == "Orientation") {
        v[node] = bearing;
      } else {
        v[node] = distance / config.diagonal();
      }
    }
  }
  return v;
}

}  // namespace cpm::concepts
