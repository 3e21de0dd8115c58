#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cpm/env.hpp"
#include "cpm/linalg.hpp"
#include "cpm/strategies.hpp"

namespace cpm::concepts {

// Binary: one node per instance, read through a sigmoid and thresholded at 0.5.
// DiscreteGroup: `group_size` nodes per instance, normalized by a softmax.
// Continuous: one real-valued node per instance.
enum class ConceptKind : std::uint8_t { Binary, DiscreteGroup, Continuous };
enum class ConceptMode : std::uint8_t { Hard, Soft, Custom };

std::string_view mode_name(ConceptMode mode);
ConceptMode mode_from_name(std::string_view name);
std::string_view kind_name(ConceptKind kind);
ConceptKind kind_from_name(std::string_view name);

struct IndexRange {
  int begin = 0;
  int size = 0;
  int end() const { return begin + size; }
  friend bool operator==(IndexRange, IndexRange) = default;
};

struct ConceptSpec {
  std::string name;
  ConceptKind kind = ConceptKind::Continuous;
  int group_size = 1;
  int multiplicity = 1;
  int offset = 0;

  bool discrete() const { return kind != ConceptKind::Continuous; }
  int node_count() const { return multiplicity * group_size; }
  IndexRange range() const { return {offset, node_count()}; }
  // Nodes of instance `m` (one opponent, or the single team-level instance).
  IndexRange instance(int m) const { return {offset + m * group_size, group_size}; }

  friend bool operator==(const ConceptSpec&, const ConceptSpec&) = default;
};

inline constexpr std::array<std::string_view, 5> kConceptNames = {"Range", "Strategy", "Target", "Orientation",
                                                                  "Position"};

struct ConceptSchema {
  std::vector<ConceptSpec> specs;
  ConceptMode mode = ConceptMode::Custom;
  int n_opponents = 0;
  int dim = 0;

  bool empty() const { return dim == 0; }
  const ConceptSpec* find(std::string_view name) const;
  const ConceptSpec& at(std::string_view name) const;  // throws UsageError
  // Every softmax group (each instance of each DiscreteGroup concept).
  std::vector<IndexRange> softmax_groups() const;
  // 64-bit FNV-1a over the layout; equal schemas share a fingerprint.
  std::uint64_t fingerprint() const;

  friend bool operator==(const ConceptSchema&, const ConceptSchema&) = default;
};

// Hard: all five concepts; Soft: Range, Strategy, Target.
ConceptSchema build_schema(int n_opponents, ConceptMode mode);

// Any subset of the five concept names (case-insensitive), laid out in the
// canonical order. The mode is Hard/Soft when the subset matches one of them.
ConceptSchema build_schema_subset(int n_opponents, std::span<const std::string> names);

// Canonical spelling of a concept name; throws UsageError when unknown.
std::string canonical_concept_name(std::string_view name);

struct TargetMemory {
  int target = -1;  // opponent ordinal in [0, n), -1 when none remain
  bool initialized = false;
  int changes = 0;
  friend bool operator==(const TargetMemory&, const TargetMemory&) = default;
};

// Picks the closest untagged opponent on first use, then only re-picks when
// the current target has been tagged.
TargetMemory update_target_memory(TargetMemory memory, const env::WorldState& state, int agent);

// Ground-truth concept vector V(.) for an untagged agent.
Vector oracle_eval(const env::ArenaConfig& config, const env::WorldState& state, int agent,
                   const ConceptSchema& schema, const TargetMemory& memory, strategies::StrategyKind strategy);

// Agent indices of `agent`'s opponents, in roster order.
std::vector<int> opponents_of(const env::WorldState& state, int agent);

}  // namespace cpm::concepts
