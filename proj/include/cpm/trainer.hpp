#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "cpm/archive.hpp"
#include "cpm/config.hpp"
#include "cpm/game.hpp"
#include "cpm/nn.hpp"
#include "cpm/policy.hpp"

// Centralized training with decentralized execution: every defender in every
// environment acts through one shared policy on its own observation and
// hidden state; one optimizer owns the parameters.
//
// Step counts are agent transitions (buffer entries), so the default batch
// of 10240 is 10240 decisions regardless of team size.
namespace cpm::trainer {

// Linear interpolation from `start` at step 0 to `end` at `horizon`,
// clamped at both ends.
double linear_schedule(double start, double end, std::int64_t step, std::int64_t horizon);

struct Transition {
  Vector obs;
  int action = 0;
  double logprob = 0.0;
  double value = 0.0;
  double reward = 0.0;
  bool done = false;  // no bootstrap past this step
  Vector concepts;
};

// A run of at most sequence_length consecutive steps of one agent, with the
// recurrent state it started from.
struct Sequence {
  int trajectory = 0;
  int begin = 0;  // index into RolloutBuffer::steps
  int length = 0;
  Matrix h0;      // 1 x H
  Matrix c0;      // 1 x H
};

// Consecutive steps of one agent within one collection phase.
struct Trajectory {
  std::vector<int> sequences;  // in time order
  double bootstrap = 0.0;      // V after the last step (0 when terminal)
};

struct RolloutBuffer {
  int capacity = 0;
  std::vector<Transition> steps;
  std::vector<Sequence> sequences;
  std::vector<Trajectory> trajectories;
  std::vector<double> advantages;
  std::vector<double> returns;

  int size() const { return static_cast<int>(steps.size()); }
  bool full() const { return size() == capacity; }
};

// Fills advantages and returns trajectory by trajectory.
void compute_advantages(RolloutBuffer& buffer, double gamma, double lambda);

struct CollectStats {
  std::int64_t env_steps = 0;  // lockstep environment transitions
  int episodes = 0;
  int wins = 0;
  double reward_sum = 0.0;
};

class Trainer {
 public:
  Trainer(ExperimentConfig config, std::uint64_t seed);
  // Restores the complete training state written by checkpoint().
  explicit Trainer(const archive::Archive& checkpoint);

  // Collect one buffer and optimize on it. Returns the phase metrics. On a
  // numeric error the pre-phase state is restored and the error rethrown.
  json run_phase();

  CollectStats collect(RolloutBuffer& buffer);
  json train_on(RolloutBuffer& buffer);

  bool done() const { return steps_ >= config_.trainer.total_steps; }
  std::int64_t steps() const { return steps_; }
  int phase() const { return phase_; }
  const ExperimentConfig& config() const { return config_; }
  const policy::ConceptPolicy& model() const { return model_; }
  policy::ConceptPolicy& mutable_model() { return model_; }
  std::uint64_t seed() const { return seed_; }

  double best_win_rate() const { return best_win_rate_; }
  void set_best_win_rate(double w) { best_win_rate_ = w; }

  archive::Archive checkpoint() const;

 private:
  struct Slot {
    int trajectory = -1;
    std::vector<Transition> pending;  // open sequence
    Matrix h0, c0;
  };

  void init_envs();
  void reset_env(int e);
  void close_sequence(RolloutBuffer& buffer, Slot& slot);
  void close_trajectory(RolloutBuffer& buffer, Slot& slot, double bootstrap);

  ExperimentConfig config_;
  std::uint64_t seed_ = 0;
  policy::ConceptPolicy model_;
  nn::AdamState adam_;
  Rng rng_;
  std::vector<std::unique_ptr<game::MultiAgentEnv>> envs_;
  std::vector<std::uint64_t> env_episodes_;
  nn::RecurrentState hidden_;  // (envs x learners) x H
  std::int64_t steps_ = 0;
  std::int64_t env_steps_ = 0;
  int phase_ = 0;
  std::int64_t episodes_ = 0;
  double best_win_rate_ = -1.0;
};

struct LoadedPolicy {
  ExperimentConfig config;
  policy::ConceptPolicy model;
  json meta;
};

archive::Archive policy_archive(const ExperimentConfig& config, const policy::ConceptPolicy& model);
LoadedPolicy load_policy(const archive::Archive& archive);
LoadedPolicy load_policy(const std::filesystem::path& path);

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path best_checkpoint;
  double best_win_rate = -1.0;
  std::vector<json> metrics;
};

// Runs phases until the step budget is spent. Writes metrics.jsonl,
// final.ckpt and best.ckpt (highest periodic evaluation win rate, or the
// final model when evaluation is disabled) into `out_dir`.
TrainResult train(const ExperimentConfig& config, std::uint64_t seed, const std::filesystem::path& out_dir,
                  const std::optional<std::filesystem::path>& resume = std::nullopt,
                  const std::function<void(const json&)>& on_metrics = {});

}  // namespace cpm::trainer
