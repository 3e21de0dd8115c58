#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "cpm/config.hpp"
#include "cpm/game.hpp"
#include "cpm/policy.hpp"
#include "cpm/stats.hpp"

// Evaluation: greedy rollouts of a trained policy with optional oracle
// interventions and distribution shift, concept error measurement, and the
// behavioral probes. Episodes run through EpisodeRunner, which the live
// server shares, so offline logs and streamed frames agree bit for bit.
namespace cpm::eval {

struct SlotFrame {
  int agent = 0;
  bool active = false;
  Vector predicted;  // before intervention
  Vector concepts;   // after intervention, what the heads read
  Vector oracle;
  policy::Intervention intervention;  // empty mask when none
  int action = -1;
  double value = 0.0;
};

// Frame t shows state s_t, the decisions taken there, and the rewards and
// events of the transition that produced s_t. The terminal frame carries
// the final state and no decisions.
struct Frame {
  std::uint64_t episode = 0;
  std::uint64_t seed = 0;
  int t = 0;
  env::WorldState state;
  strategies::StrategyKind strategy = strategies::StrategyKind::Random;
  std::vector<SlotFrame> defenders;
  std::vector<int> actions;         // every agent, chosen at s_t
  std::vector<double> rewards;      // every agent, from the previous transition
  std::vector<env::TagEvent> tags;  // previous transition
  std::vector<int> misses;          // previous transition
  env::Outcome outcome = env::Outcome::Ongoing;
  bool terminal = false;
};

// Scripted defenders for policy-free rollouts: one action per learner slot.
using DefenderController = std::function<std::vector<env::Action>(const game::TagGameEnv&)>;

struct RunnerOptions {
  policy::ActMode act_mode = policy::ActMode::Greedy;
  std::vector<std::string> oracle_subset;  // recomputed every step
  std::optional<policy::Intervention> fixed;  // applied to every defender
  game::ShiftConfig shift;
};

class EpisodeRunner {
 public:
  EpisodeRunner(const policy::ConceptPolicy* model, const ExperimentConfig& config, RunnerOptions options,
                DefenderController controller = {});

  void reset(std::uint64_t episode_id, std::uint64_t seed);
  bool finished() const { return finished_; }
  // Frame for the current state; advances the episode unless it is over.
  Frame next();

  void set_manual(int slot, policy::Intervention intervention);
  void clear_manual(int slot);
  void set_oracle_subset(std::vector<std::string> subset);
  const std::optional<policy::Intervention>& manual(int slot) const { return manual_.at(slot); }
  const game::TagGameEnv& env() const { return env_; }
  std::uint64_t episode() const { return episode_; }

 private:
  policy::Intervention intervention_for(int slot, const Vector& predicted, const Vector& truth) const;

  const policy::ConceptPolicy* model_;
  ExperimentConfig config_;
  RunnerOptions options_;
  DefenderController controller_;
  game::TagGameEnv env_;
  nn::RecurrentState hidden_;
  std::vector<std::optional<policy::Intervention>> manual_;
  Rng rng_;
  std::uint64_t episode_ = 0;
  std::uint64_t seed_ = 0;
  bool finished_ = false;
};

std::uint64_t episode_seed(std::uint64_t base_seed, std::uint64_t episode);

struct ConceptError {
  std::string name;
  std::string metric;  // accuracy_error or mse
  double value = 0.0;
  double stderr_ = 0.0;  // across episodes
  std::int64_t samples = 0;
};

struct EvalOptions {
  int episodes = 100;
  std::uint64_t seed = 0;
  std::vector<std::string> intervene;
  game::ShiftConfig shift;
  policy::ActMode act_mode = policy::ActMode::Greedy;
  std::optional<policy::Intervention> fixed;
  std::ostream* log = nullptr;  // NDJSON frames
  std::function<void(const Frame&)> on_frame;
};

struct EvalReport {
  int episodes = 0;
  int wins = 0;
  double win_rate = 0.0;
  double win_rate_stderr = 0.0;
  stats::Interval win_rate_ci;
  double mean_length = 0.0;
  std::int64_t tag_actions = 0;
  std::int64_t active_steps = 0;
  std::vector<ConceptError> concept_errors;
  std::vector<std::string> intervened;
  game::ShiftConfig shift;
  std::uint64_t config_fingerprint = 0;
  std::uint64_t seed = 0;

  const ConceptError* error(std::string_view name) const;
  json to_json() const;
};

EvalReport evaluate(const policy::ConceptPolicy& model, const ExperimentConfig& config, const EvalOptions& options);
EvalReport evaluate_scripted(const DefenderController& controller, const ExperimentConfig& config,
                             const EvalOptions& options);

// Per-step accuracy of a concept prediction against the oracle.
std::vector<double> concept_sample_errors(const concepts::ConceptSpec& spec, const Vector& predicted,
                                          const Vector& truth);

enum class ProbeKind : std::uint8_t { ForceStrategy, ForceRange, ShareTarget };
ProbeKind probe_kind_from_name(std::string_view name);
std::string_view probe_kind_name(ProbeKind kind);

// `value`: strategy index, Range bit, or shared target opponent. Throws
// UsageError when the schema lacks the probed concept.
policy::Intervention probe_intervention(const concepts::ConceptSchema& schema, ProbeKind kind, int value);

struct TraceStats {
  std::vector<double> mean_x, mean_y, ci_x, ci_y;  // ci = 95% half-width
  std::vector<std::int64_t> count;
};

struct ProbeArm {
  std::string label;
  EvalReport report;
  double tag_frequency = 0.0;
  stats::Interval tag_ci;
  TraceStats trace;
};

struct ProbeReport {
  ProbeKind kind = ProbeKind::ForceRange;
  std::vector<ProbeArm> arms;
  double fisher_p = 1.0;  // ShareTarget: best shared arm vs independent
  json to_json() const;
};

// ForceStrategy: one arm per strategy. ForceRange: Range forced to 0, 1, and
// left alone. ShareTarget: every defender forced onto opponent i, plus the
// unforced baseline.
ProbeReport behavioral_probe(const policy::ConceptPolicy& model, const ExperimentConfig& config, ProbeKind kind,
                             int episodes, std::uint64_t seed);

ProbeArm run_probe_arm(const policy::ConceptPolicy& model, const ExperimentConfig& config,
                       std::optional<policy::Intervention> fixed, std::string label, int episodes,
                       std::uint64_t seed);

struct AblationRow {
  std::vector<std::string> concepts;
  int j = 0;
  std::vector<double> win_rates;  // one per seed
  double mean = 0.0;
  double stddev = 0.0;
};

// Trains one hard model per concept subset and seed at `budget` steps and
// evaluates its best checkpoint.
std::vector<AblationRow> concept_ablation_run(const ExperimentConfig& base, const std::vector<std::vector<std::string>>& subsets,
                                              std::int64_t budget, const std::vector<std::uint64_t>& seeds,
                                              int episodes, const std::filesystem::path& out_dir);
json ablation_to_json(const std::vector<AblationRow>& rows);

}  // namespace cpm::eval
