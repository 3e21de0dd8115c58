#include "cpm/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "cpm/errors.hpp"

namespace cpm {

std::string_view task_name(TaskKind kind) {
  return kind == TaskKind::TagGame ? "tag_game" : "reward_identification";
}

TaskKind task_from_name(std::string_view name) {
  if (name == "tag_game") return TaskKind::TagGame;
  if (name == "reward_identification") return TaskKind::RewardIdentification;
  throw ConfigError("unknown task '" + std::string(name) + "'");
}

void RewardIdConfig::validate() const {
  if (obs_dim < 1) throw ConfigError("task: obs_dim must be positive");
  if (episode_length < 1) throw ConfigError("task: episode_length must be positive");
  if (rewarded_action < 0 || rewarded_action >= env::kActionCount)
    throw ConfigError("task: rewarded_action out of range");
}

void TrainerConfig::validate() const {
  if (total_steps < 0) throw ConfigError("trainer: total_steps must be non-negative");
  if (batch_size < 1) throw ConfigError("trainer: batch_size must be positive");
  if (num_envs < 1) throw ConfigError("trainer: num_envs must be positive");
  if (sequence_length < 1) throw ConfigError("trainer: sequence_length must be positive");
  if (minibatch_sequences < 1) throw ConfigError("trainer: minibatch_sequences must be positive");
  if (epochs < 1) throw ConfigError("trainer: epochs must be positive");
  if (!(lr_start > 0.0) || !(lr_end > 0.0)) throw ConfigError("trainer: learning rates must be positive");
  if (!(entropy_start >= 0.0) || !(entropy_end >= 0.0))
    throw ConfigError("trainer: entropy coefficients must be non-negative");
  if (schedule_horizon < 1) throw ConfigError("trainer: schedule_horizon must be positive");
  if (!(max_grad_norm >= 0.0)) throw ConfigError("trainer: max_grad_norm must be non-negative");
  if (eval_interval < 0 || checkpoint_interval < 0) throw ConfigError("trainer: intervals must be non-negative");
  if (eval_episodes < 1) throw ConfigError("trainer: eval_episodes must be positive");
}

void ExperimentConfig::validate() const {
  arena.validate();
  attackers.validate();
  policy.validate();
  loss.validate();
  trainer.validate();
  reward_id.validate();
  if (trainer.sequence_length > policy.max_sequence_length)
    throw ConfigError("trainer: sequence_length exceeds the policy's max_sequence_length");
  const int want_obs =
      task == TaskKind::TagGame ? env::observation_size(arena.n_per_team) : reward_id.obs_dim;
  if (policy.obs_dim != want_obs) throw ConfigError("policy: obs_dim does not match the task");
  if (task == TaskKind::TagGame && policy.j() > 0 && policy.schema.n_opponents != arena.n_per_team)
    throw ConfigError("policy: concept schema does not match the team size");
  if (task == TaskKind::RewardIdentification && policy.j() > 0)
    throw ConfigError("policy: the reward identification task has no concepts");
}

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << v;
  return os.str();
}

namespace {

std::uint64_t fnv1a(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// Reads optional keys from one section and rejects unknown ones.
class Section {
 public:
  Section(const json& j, std::string name) : name_(std::move(name)) {
    if (j.is_null()) return;
    if (!j.is_object()) throw ConfigError("config section '" + name_ + "' must be an object");
    j_ = &j;
  }

  template <class T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (j_ == nullptr || !j_->contains(key)) return;
    try {
      out = (*j_)[key].get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(name_ + "." + key + ": " + e.what());
    }
  }

  bool has(const char* key) const { return j_ != nullptr && j_->contains(key); }
  const json& raw(const char* key) {
    seen_.insert(key);
    return (*j_)[key];
  }

  void finish() const {
    if (j_ == nullptr) return;
    for (auto it = j_->begin(); it != j_->end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError("unknown key '" + name_ + "." + it.key() + "'");
  }

 private:
  std::string name_;
  const json* j_ = nullptr;
  std::set<std::string> seen_;
};

const json& section(const json& root, const char* name) {
  static const json null_json;
  return root.contains(name) ? root[name] : null_json;
}

void read_arena(Section& s, env::ArenaConfig& c) {
  s.read("half_extent", c.half_extent);
  if (s.has("goal_position")) {
    std::array<double, 2> g{};
    s.read("goal_position", g);
    c.goal_position = {g[0], g[1]};
  }
  s.read("goal_radius", c.goal_radius);
  s.read("max_steps", c.max_steps);
  s.read("n_per_team", c.n_per_team);
  s.read("accel_delta", c.accel_delta);
  s.read("rot_delta", c.rot_delta);
  s.read("tag_range", c.tag_range);
  s.read("tag_half_angle", c.tag_half_angle);
  s.read("tag_cooldown", c.tag_cooldown);
  s.read("drag", c.drag);
  s.read("max_speed", c.max_speed);
  s.read("defender_spawn_radius", c.defender_spawn_radius);
  if (s.has("reward")) {
    Section r(s.raw("reward"), "env.reward");
    r.read("tag", c.reward.tag);
    r.read("win", c.reward.win);
    r.read("tagged", c.reward.tagged);
    r.read("lose", c.reward.lose);
    r.read("miss", c.reward.miss);
    r.read("orientation", c.reward.orientation);
    r.finish();
  }
}

void read_attackers(Section& s, strategies::AttackerConfig& c) {
  s.read("noise_scale", c.noise_scale);
  s.read("waypoint_count", c.waypoint_count);
  s.read("strategy_weights", c.strategy_weights);
  s.read("capture_radius", c.capture_radius);
}

}  // namespace

json to_json(const env::ArenaConfig& c) {
  return {{"half_extent", c.half_extent},
          {"goal_position", {c.goal_position.x, c.goal_position.y}},
          {"goal_radius", c.goal_radius},
          {"max_steps", c.max_steps},
          {"n_per_team", c.n_per_team},
          {"accel_delta", c.accel_delta},
          {"rot_delta", c.rot_delta},
          {"tag_range", c.tag_range},
          {"tag_half_angle", c.tag_half_angle},
          {"tag_cooldown", c.tag_cooldown},
          {"drag", c.drag},
          {"max_speed", c.max_speed},
          {"defender_spawn_radius", c.defender_spawn_radius},
          {"reward",
           {{"tag", c.reward.tag},
            {"win", c.reward.win},
            {"tagged", c.reward.tagged},
            {"lose", c.reward.lose},
            {"miss", c.reward.miss},
            {"orientation", c.reward.orientation}}}};
}

env::ArenaConfig arena_from_json(const json& j) {
  env::ArenaConfig c;
  Section s(j, "env");
  read_arena(s, c);
  s.finish();
  return c;
}

json to_json(const strategies::AttackerConfig& c) {
  return {{"noise_scale", c.noise_scale},
          {"waypoint_count", c.waypoint_count},
          {"strategy_weights", c.strategy_weights},
          {"capture_radius", c.capture_radius}};
}

strategies::AttackerConfig attackers_from_json(const json& j) {
  strategies::AttackerConfig c;
  Section s(j, "attackers");
  read_attackers(s, c);
  s.finish();
  return c;
}

ExperimentConfig default_config() {
  ExperimentConfig c;
  c.policy = policy::preset(c.arena.n_per_team, policy::ModelKind::Hard);
  return c;
}

ExperimentConfig config_from_json(const json& root) {
  if (!root.is_object()) throw ConfigError("config must be a JSON object");
  for (auto it = root.begin(); it != root.end(); ++it) {
    static const std::set<std::string> known = {"task", "env", "attackers", "policy", "whitening", "loss", "trainer"};
    if (!known.count(it.key())) throw ConfigError("unknown config section '" + it.key() + "'");
  }
  ExperimentConfig c;

  {
    Section s(section(root, "task"), "task");
    std::string kind = std::string(task_name(c.task));
    s.read("kind", kind);
    c.task = task_from_name(kind);
    s.read("obs_dim", c.reward_id.obs_dim);
    s.read("episode_length", c.reward_id.episode_length);
    s.read("rewarded_action", c.reward_id.rewarded_action);
    s.finish();
  }
  {
    Section s(section(root, "env"), "env");
    read_arena(s, c.arena);
    s.finish();
  }
  {
    Section s(section(root, "attackers"), "attackers");
    read_attackers(s, c.attackers);
    s.finish();
  }
  {
    Section s(section(root, "policy"), "policy");
    std::string model = c.task == TaskKind::RewardIdentification ? "base" : "hard";
    s.read("model", model);
    const policy::ModelKind kind = policy::model_kind_from_name(model);
    const int n = c.arena.n_per_team;
    policy::ConceptPolicyConfig& p = c.policy;
    if (c.task == TaskKind::RewardIdentification) {
      if (kind != policy::ModelKind::Base) throw ConfigError("policy: reward identification requires model 'base'");
      p = policy::preset(1, policy::ModelKind::Base);
      p.obs_dim = c.reward_id.obs_dim;
    } else if (kind == policy::ModelKind::Soft && s.has("k")) {
      p = policy::preset(n, policy::ModelKind::Hard);
      p.schema = concepts::build_schema(n, concepts::ConceptMode::Soft);
    } else {
      p = policy::preset(n, kind);
    }
    if (s.has("concepts")) {
      if (kind == policy::ModelKind::Base) throw ConfigError("policy: base models take no concepts");
      std::vector<std::string> names;
      s.read("concepts", names);
      if (names.empty()) throw ConfigError("policy: concepts list is empty");
      try {
        p.schema = concepts::build_schema_subset(n, names);
      } catch (const UsageError& e) {
        throw ConfigError(std::string("policy.concepts: ") + e.what());
      }
    }
    s.read("k", p.k);
    s.read("encoder_sizes", p.encoder_sizes);
    s.read("recurrent_size", p.recurrent_size);
    s.read("head_sizes", p.head_sizes);
    s.read("max_sequence_length", p.max_sequence_length);
    s.finish();
    if (kind == policy::ModelKind::Hard && p.k != 0) throw ConfigError("policy: hard models have k = 0");
    if (kind == policy::ModelKind::Soft && p.k == 0) throw ConfigError("policy: soft models need k > 0");
  }
  {
    Section s(section(root, "whitening"), "whitening");
    s.read("enabled", c.policy.whiten);
    s.read("iterations", c.policy.whitening_iterations);
    s.read("momentum", c.policy.whitening_momentum);
    s.read("eps", c.policy.whitening_eps);
    s.finish();
  }
  {
    Section s(section(root, "loss"), "loss");
    s.read("gamma", c.loss.gamma);
    s.read("lambda", c.loss.lambda);
    s.read("clip", c.loss.clip);
    s.read("value_coef", c.loss.value_coef);
    s.read("concept_coef", c.loss.concept_coef);
    s.read("focal_gamma", c.loss.focal_gamma);
    s.finish();
  }
  {
    Section s(section(root, "trainer"), "trainer");
    TrainerConfig& t = c.trainer;
    s.read("total_steps", t.total_steps);
    s.read("batch_size", t.batch_size);
    s.read("num_envs", t.num_envs);
    s.read("sequence_length", t.sequence_length);
    s.read("minibatch_sequences", t.minibatch_sequences);
    s.read("epochs", t.epochs);
    s.read("lr_start", t.lr_start);
    s.read("lr_end", t.lr_end);
    s.read("entropy_start", t.entropy_start);
    s.read("entropy_end", t.entropy_end);
    s.read("schedule_horizon", t.schedule_horizon);
    s.read("max_grad_norm", t.max_grad_norm);
    s.read("eval_interval", t.eval_interval);
    s.read("eval_episodes", t.eval_episodes);
    s.read("eval_seed", t.eval_seed);
    s.read("checkpoint_interval", t.checkpoint_interval);
    s.finish();
  }
  c.validate();
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  const policy::ConceptPolicyConfig& p = c.policy;
  std::vector<std::string> names;
  for (const concepts::ConceptSpec& spec : p.schema.specs) names.push_back(spec.name);
  json policy_json = {{"model", policy::model_kind_name(p.kind())},
                      {"k", p.k},
                      {"encoder_sizes", p.encoder_sizes},
                      {"recurrent_size", p.recurrent_size},
                      {"head_sizes", p.head_sizes},
                      {"max_sequence_length", p.max_sequence_length}};
  if (!names.empty()) policy_json["concepts"] = names;
  const TrainerConfig& t = c.trainer;
  return {{"task",
           {{"kind", task_name(c.task)},
            {"obs_dim", c.reward_id.obs_dim},
            {"episode_length", c.reward_id.episode_length},
            {"rewarded_action", c.reward_id.rewarded_action}}},
          {"env", to_json(c.arena)},
          {"attackers", to_json(c.attackers)},
          {"policy", policy_json},
          {"whitening",
           {{"enabled", p.whiten},
            {"iterations", p.whitening_iterations},
            {"momentum", p.whitening_momentum},
            {"eps", p.whitening_eps}}},
          {"loss",
           {{"gamma", c.loss.gamma},
            {"lambda", c.loss.lambda},
            {"clip", c.loss.clip},
            {"value_coef", c.loss.value_coef},
            {"concept_coef", c.loss.concept_coef},
            {"focal_gamma", c.loss.focal_gamma}}},
          {"trainer",
           {{"total_steps", t.total_steps},
            {"batch_size", t.batch_size},
            {"num_envs", t.num_envs},
            {"sequence_length", t.sequence_length},
            {"minibatch_sequences", t.minibatch_sequences},
            {"epochs", t.epochs},
            {"lr_start", t.lr_start},
            {"lr_end", t.lr_end},
            {"entropy_start", t.entropy_start},
            {"entropy_end", t.entropy_end},
            {"schedule_horizon", t.schedule_horizon},
            {"max_grad_norm", t.max_grad_norm},
            {"eval_interval", t.eval_interval},
            {"eval_episodes", t.eval_episodes},
            {"eval_seed", t.eval_seed},
            {"checkpoint_interval", t.checkpoint_interval}}}};
}

std::uint64_t ExperimentConfig::fingerprint() const { return fnv1a(config_to_json(*this).dump()); }

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

json to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Vector vector_from_json(const json& j) {
  const std::vector<double> d = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(d.data(), static_cast<Eigen::Index>(d.size()));
}

json to_json(const Matrix& m) {
  return {{"rows", m.rows()}, {"cols", m.cols()}, {"data", std::vector<double>(m.data(), m.data() + m.size())}};
}

Matrix matrix_from_json(const json& j) {
  const auto rows = j.at("rows").get<Eigen::Index>();
  const auto cols = j.at("cols").get<Eigen::Index>();
  const std::vector<double> d = j.at("data").get<std::vector<double>>();
  if (static_cast<Eigen::Index>(d.size()) != rows * cols) throw ParseError("matrix data length mismatch");
  Matrix m(rows, cols);
  std::copy(d.begin(), d.end(), m.data());
  return m;
}

json to_json(const env::WorldState& s) {
  json agents = json::array();
  for (const env::AgentState& a : s.agents)
    agents.push_back({{"position", {a.position.x, a.position.y}},
                      {"velocity", {a.velocity.x, a.velocity.y}},
                      {"heading", a.heading},
                      {"tagged", a.tagged},
                      {"team", a.team == env::Team::Attacker ? "attacker" : "defender"},
                      {"cooldown", a.cooldown}});
  return {{"agents", agents}, {"t", s.t}, {"rng", s.rng.state()}, {"outcome", env::outcome_name(s.outcome)}};
}

env::WorldState world_from_json(const json& j) {
  try {
    env::WorldState s;
    for (const json& a : j.at("agents")) {
      env::AgentState st;
      st.position = {a.at("position")[0].get<double>(), a.at("position")[1].get<double>()};
      st.velocity = {a.at("velocity")[0].get<double>(), a.at("velocity")[1].get<double>()};
      st.heading = a.at("heading").get<double>();
      st.tagged = a.at("tagged").get<bool>();
      const std::string team = a.at("team").get<std::string>();
      if (team != "attacker" && team != "defender") throw ParseError("unknown team '" + team + "'");
      st.team = team == "attacker" ? env::Team::Attacker : env::Team::Defender;
      st.cooldown = a.at("cooldown").get<int>();
      s.agents.push_back(st);
    }
    s.t = j.at("t").get<int>();
    if (j.contains("rng")) s.rng.set_state(j.at("rng").get<std::string>());
    s.outcome = env::outcome_from_name(j.at("outcome").get<std::string>());
    return s;
  } catch (const json::exception& e) {
    throw ParseError(std::string("world state: ") + e.what());
  }
}

json to_json(const strategies::AttackerPolicy& p) {
  json wps = json::array();
  for (const env::Vec2& w : p.waypoints) wps.push_back({w.x, w.y});
  return {{"kind", strategies::strategy_name(p.kind)},
          {"waypoints", wps},
          {"noise_scale", p.noise_scale},
          {"rng_stream", p.rng_stream},
          {"waypoint_index", p.waypoint_index}};
}

strategies::AttackerPolicy attacker_policy_from_json(const json& j) {
  strategies::AttackerPolicy p;
  p.kind = strategies::strategy_from_name(j.at("kind").get<std::string>());
  for (const json& w : j.at("waypoints")) p.waypoints.push_back({w[0].get<double>(), w[1].get<double>()});
  p.noise_scale = j.at("noise_scale").get<double>();
  p.rng_stream = j.at("rng_stream").get<std::uint64_t>();
  p.waypoint_index = j.at("waypoint_index").get<int>();
  return p;
}

json to_json(const concepts::TargetMemory& m) {
  return {{"target", m.target}, {"initialized", m.initialized}, {"changes", m.changes}};
}

concepts::TargetMemory target_memory_from_json(const json& j) {
  return {j.at("target").get<int>(), j.at("initialized").get<bool>(), j.at("changes").get<int>()};
}

json to_json(const concepts::ConceptSchema& s) {
  json specs = json::array();
  for (const concepts::ConceptSpec& c : s.specs)
    specs.push_back({{"name", c.name},
                     {"kind", concepts::kind_name(c.kind)},
                     {"group_size", c.group_size},
                     {"multiplicity", c.multiplicity},
                     {"offset", c.offset}});
  return {{"mode", concepts::mode_name(s.mode)},
          {"n_opponents", s.n_opponents},
          {"dim", s.dim},
          {"fingerprint", hex64(s.fingerprint())},
          {"specs", specs}};
}

concepts::ConceptSchema schema_from_json(const json& j) {
  try {
    concepts::ConceptSchema s;
    s.mode = concepts::mode_from_name(j.at("mode").get<std::string>());
    s.n_opponents = j.at("n_opponents").get<int>();
    s.dim = j.at("dim").get<int>();
    for (const json& c : j.at("specs"))
      s.specs.push_back({c.at("name").get<std::string>(), concepts::kind_from_name(c.at("kind").get<std::string>()),
                         c.at("group_size").get<int>(), c.at("multiplicity").get<int>(), c.at("offset").get<int>()});
    if (j.contains("fingerprint") && j.at("fingerprint").get<std::string>() != hex64(s.fingerprint()))
      throw ParseError("concept schema fingerprint mismatch");
    return s;
  } catch (const json::exception& e) {
    throw ParseError(std::string("concept schema: ") + e.what());
  }
}

json to_json(const policy::Intervention& iv) {
  return {{"mask", iv.mask}, {"values", to_json(iv.values)}, {"provenance", policy::provenance_name(iv.provenance)}};
}

policy::Intervention intervention_from_json(const json& j) {
  policy::Intervention iv;
  iv.mask = j.at("mask").get<std::vector<bool>>();
  iv.values = vector_from_json(j.at("values"));
  iv.provenance = policy::provenance_from_name(j.at("provenance").get<std::string>());
  return iv;
}

}  // namespace cpm
