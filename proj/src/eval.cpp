#include "cpm/eval.hpp"

#include <cmath>
#include <ostream>

#include "cpm/errors.hpp"
#include "cpm/protocol.hpp"
#include "cpm/trainer.hpp"

namespace cpm::eval {

using concepts::ConceptKind;
using concepts::ConceptSpec;

std::uint64_t episode_seed(std::uint64_t base_seed, std::uint64_t episode) { return derive_seed(base_seed, episode); }

EpisodeRunner::EpisodeRunner(const policy::ConceptPolicy* model, const ExperimentConfig& config, RunnerOptions options,
                             DefenderController controller)
    : model_(model),
      config_(config),
      options_(std::move(options)),
      controller_(std::move(controller)),
      env_(config.arena, config.attackers, config.policy.schema, options_.shift) {
  if (config_.task != TaskKind::TagGame) throw UsageError("EpisodeRunner: only the tag game can be evaluated");
  if ((model_ == nullptr) == !controller_) throw UsageError("EpisodeRunner: give exactly one of a model or a controller");
  if (model_ != nullptr && model_->config.schema != config_.policy.schema)
    throw UsageError("EpisodeRunner: checkpoint schema does not match the scenario");
  for (const std::string& name : options_.oracle_subset) config_.policy.schema.at(concepts::canonical_concept_name(name));
  if (options_.fixed) policy::validate_intervention(config_.policy.schema, *options_.fixed);
  manual_.assign(static_cast<std::size_t>(config_.arena.n_per_team), std::nullopt);
  reset(0, 0);
}

void EpisodeRunner::reset(std::uint64_t episode_id, std::uint64_t seed) {
  episode_ = episode_id;
  seed_ = seed;
  env_.reset(seed);
  hidden_ = nn::RecurrentState::zeros(config_.arena.n_per_team, config_.policy.recurrent_size);
  rng_ = Rng(derive_seed(seed, 7));
  finished_ = false;
}

void EpisodeRunner::set_manual(int slot, policy::Intervention intervention) {
  policy::validate_intervention(config_.policy.schema, intervention);
  intervention.provenance = policy::Provenance::Manual;
  manual_.at(slot) = std::move(intervention);
}

void EpisodeRunner::clear_manual(int slot) { manual_.at(slot).reset(); }

void EpisodeRunner::set_oracle_subset(std::vector<std::string> subset) {
  for (const std::string& name : subset) config_.policy.schema.at(concepts::canonical_concept_name(name));
  options_.oracle_subset = std::move(subset);
}

policy::Intervention EpisodeRunner::intervention_for(int slot, const Vector& predicted, const Vector& truth) const {
  const concepts::ConceptSchema& schema = config_.policy.schema;
  policy::Intervention iv;
  if (!options_.oracle_subset.empty()) {
    iv = policy::apply_oracle_intervention(predicted, truth, schema, options_.oracle_subset);
  } else {
    iv.mask.assign(static_cast<std::size_t>(schema.dim), false);
    iv.values = Vector::Zero(schema.dim);
    iv.provenance = policy::Provenance::Oracle;
  }
  auto overlay = [&iv](const policy::Intervention& top) {
    for (std::size_t i = 0; i < top.mask.size(); ++i) {
      if (!top.mask[i]) continue;
      iv.mask[i] = true;
      iv.values[static_cast<Eigen::Index>(i)] = top.values[static_cast<Eigen::Index>(i)];
      iv.provenance = policy::Provenance::Manual;
    }
  };
  if (options_.fixed) overlay(*options_.fixed);
  if (manual_[slot]) overlay(*manual_[slot]);
  return iv;
}

Frame EpisodeRunner::next() {
  if (finished_) throw UsageError("EpisodeRunner: episode already finished");
  const env::WorldState& w = env_.world();
  const int n = config_.arena.n_per_team;
  Frame f;
  f.episode = episode_;
  f.seed = seed_;
  f.t = w.t;
  f.state = w;
  f.strategy = env_.strategy();
  f.rewards = env_.last_rewards();
  f.tags = env_.last_info().tags;
  f.misses = env_.last_info().misses;
  f.outcome = w.outcome;
  f.defenders.resize(static_cast<std::size_t>(n));
  for (int s = 0; s < n; ++s) {
    f.defenders[s].agent = env_.defender_agent(s);
    f.defenders[s].active = env_.active(s);
  }
  if (env_.episode_done()) {
    f.terminal = true;
    finished_ = true;
    return f;
  }

  std::vector<env::Action> actions(static_cast<std::size_t>(n), env::Action::NoOp);
  const int j = config_.policy.j();
  for (int s = 0; s < n; ++s)
    if (f.defenders[s].active && j > 0) f.defenders[s].oracle = env_.concepts(s);

  if (model_ != nullptr) {
    Matrix obs(n, env_.obs_dim());
    for (int s = 0; s < n; ++s) obs.row(s) = env_.observe(s).transpose();
    std::vector<policy::Intervention> ivs(static_cast<std::size_t>(n));
    bool any = false;
    for (int s = 0; s < n; ++s) {
      if (!f.defenders[s].active || j == 0) continue;
      ivs[s] = intervention_for(s, f.defenders[s].oracle, f.defenders[s].oracle);
      any = any || !ivs[s].empty();
    }
    const policy::PolicyOutput out =
        policy::forward(*model_, obs, hidden_, any ? std::span<const policy::Intervention>(ivs)
                                                   : std::span<const policy::Intervention>{});
    for (int s = 0; s < n; ++s) {
      SlotFrame& d = f.defenders[s];
      if (!d.active) continue;
      const policy::ActionChoice c = policy::act(out.logits.row(s), rng_, options_.act_mode);
      actions[s] = c.action;
      d.action = c.index;
      d.value = out.values[s];
      d.predicted = out.predicted_concepts.row(s).transpose();
      d.concepts = out.concepts.row(s).transpose();
      if (!ivs[s].empty()) d.intervention = ivs[s];
    }
  } else {
    const std::vector<env::Action> scripted = controller_(env_);
    if (static_cast<int>(scripted.size()) != n) throw UsageError("DefenderController: one action per defender expected");
    for (int s = 0; s < n; ++s) {
      if (!f.defenders[s].active) continue;
      actions[s] = scripted[s];
      f.defenders[s].action = static_cast<int>(scripted[s]);
    }
  }

  env_.step(actions);
  for (env::Action a : env_.last_actions()) f.actions.push_back(static_cast<int>(a));
  return f;
}

std::vector<double> concept_sample_errors(const ConceptSpec& spec, const Vector& predicted, const Vector& truth) {
  std::vector<double> out;
  for (int m = 0; m < spec.multiplicity; ++m) {
    const concepts::IndexRange g = spec.instance(m);
    if (spec.kind == ConceptKind::Continuous) {
      const double d = predicted[g.begin] - truth[g.begin];
      out.push_back(d * d);
    } else if (spec.kind == ConceptKind::Binary) {
      out.push_back((predicted[g.begin] > 0.5) == (truth[g.begin] > 0.5) ? 0.0 : 1.0);
    } else {
      Eigen::Index p = 0, t = 0;
      predicted.segment(g.begin, g.size).maxCoeff(&p);
      truth.segment(g.begin, g.size).maxCoeff(&t);
      out.push_back(p == t ? 0.0 : 1.0);
    }
  }
  return out;
}

const ConceptError* EvalReport::error(std::string_view name) const {
  for (const ConceptError& e : concept_errors)
    if (e.name == name) return &e;
  return nullptr;
}

json EvalReport::to_json() const {
  json errors = json::object();
  for (const ConceptError& e : concept_errors)
    errors[e.name] = {{"metric", e.metric}, {"value", e.value}, {"stderr", e.stderr_}, {"samples", e.samples}};
  return {{"type", "eval_report"},
          {"version", 1},
          {"episodes", episodes},
          {"wins", wins},
          {"win_rate", win_rate},
          {"win_rate_stderr", win_rate_stderr},
          {"win_rate_ci95", {win_rate_ci.lo, win_rate_ci.hi}},
          {"mean_episode_length", mean_length},
          {"tag_actions", tag_actions},
          {"active_steps", active_steps},
          {"tag_frequency", active_steps > 0 ? static_cast<double>(tag_actions) / active_steps : 0.0},
          {"concept_errors", errors},
          {"intervened", intervened},
          {"shift", game::to_json(shift)},
          {"config_fingerprint", hex64(config_fingerprint)},
          {"seed", seed}};
}

namespace {

EvalReport run_evaluation(const policy::ConceptPolicy* model, const DefenderController& controller,
                          const ExperimentConfig& config, const EvalOptions& options) {
  if (options.episodes < 1) throw UsageError("evaluate: need at least one episode");
  RunnerOptions ro;
  ro.act_mode = options.act_mode;
  ro.oracle_subset = options.intervene;
  ro.fixed = options.fixed;
  ro.shift = options.shift;
  EpisodeRunner runner(model, config, ro, controller);
  const concepts::ConceptSchema& schema = config.policy.schema;
  const std::size_t C = schema.specs.size();

  EvalReport rep;
  rep.episodes = options.episodes;
  rep.intervened = options.intervene;
  rep.shift = options.shift;
  rep.config_fingerprint = config.fingerprint();
  rep.seed = options.seed;
  std::vector<double> total_sum(C, 0.0);
  std::vector<std::int64_t> total_n(C, 0);
  std::vector<std::vector<double>> episode_means(C);
  double length_sum = 0.0;

  for (int ep = 0; ep < options.episodes; ++ep) {
    runner.reset(static_cast<std::uint64_t>(ep), episode_seed(options.seed, static_cast<std::uint64_t>(ep)));
    std::vector<double> ep_sum(C, 0.0);
    std::vector<std::int64_t> ep_n(C, 0);
    while (!runner.finished()) {
      const Frame f = runner.next();
      if (options.log != nullptr) *options.log << protocol::frame_to_json(f, schema).dump() << '\n';
      if (options.on_frame) options.on_frame(f);
      if (f.terminal) {
        rep.wins += f.outcome == env::Outcome::DefendersWin ? 1 : 0;
        length_sum += f.t;
        break;
      }
      for (const SlotFrame& d : f.defenders) {
        if (!d.active) continue;
        ++rep.active_steps;
        rep.tag_actions += d.action == static_cast<int>(env::Action::Tag) ? 1 : 0;
        if (d.predicted.size() == 0) continue;
        for (std::size_t c = 0; c < C; ++c)
          for (double e : concept_sample_errors(schema.specs[c], d.predicted, d.oracle)) {
            ep_sum[c] += e;
            ++ep_n[c];
          }
      }
    }
    for (std::size_t c = 0; c < C; ++c) {
      total_sum[c] += ep_sum[c];
      total_n[c] += ep_n[c];
      if (ep_n[c] > 0) episode_means[c].push_back(ep_sum[c] / static_cast<double>(ep_n[c]));
    }
  }

  rep.win_rate = static_cast<double>(rep.wins) / rep.episodes;
  rep.win_rate_stderr = stats::proportion_stderr(rep.wins, rep.episodes);
  rep.win_rate_ci = stats::wilson_interval(rep.wins, rep.episodes);
  rep.mean_length = length_sum / rep.episodes;
  if (model != nullptr) {
    for (std::size_t c = 0; c < C; ++c) {
      ConceptError e;
      e.name = schema.specs[c].name;
      e.metric = schema.specs[c].kind == ConceptKind::Continuous ? "mse" : "accuracy_error";
      e.samples = total_n[c];
      e.value = total_n[c] > 0 ? total_sum[c] / static_cast<double>(total_n[c]) : 0.0;
      e.stderr_ = stats::standard_error(episode_means[c]);
      rep.concept_errors.push_back(std::move(e));
    }
  }
  return rep;
}

}  // namespace

EvalReport evaluate(const policy::ConceptPolicy& model, const ExperimentConfig& config, const EvalOptions& options) {
  return run_evaluation(&model, {}, config, options);
}

EvalReport evaluate_scripted(const DefenderController& controller, const ExperimentConfig& config,
                             const EvalOptions& options) {
  if (!controller) throw UsageError("evaluate_scripted: empty controller");
  return run_evaluation(nullptr, controller, config, options);
}

ProbeKind probe_kind_from_name(std::string_view name) {
  if (name == "strategy") return ProbeKind::ForceStrategy;
  if (name == "range") return ProbeKind::ForceRange;
  if (name == "target") return ProbeKind::ShareTarget;
  throw UsageError("unknown probe '" + std::string(name) + "' (expected strategy, range or target)");
}

std::string_view probe_kind_name(ProbeKind kind) {
  switch (kind) {
    case ProbeKind::ForceStrategy: return "strategy";
    case ProbeKind::ForceRange: return "range";
    case ProbeKind::ShareTarget: return "target";
  }
  return "?";
}

policy::Intervention probe_intervention(const concepts::ConceptSchema& schema, ProbeKind kind, int value) {
  policy::Intervention iv;
  iv.mask.assign(static_cast<std::size_t>(schema.dim), false);
  iv.values = Vector::Zero(schema.dim);
  iv.provenance = policy::Provenance::Manual;
  const char* name = kind == ProbeKind::ForceStrategy ? "Strategy" : kind == ProbeKind::ForceRange ? "Range" : "Target";
  const ConceptSpec* spec = schema.find(name);
  if (spec == nullptr) throw UsageError(std::string("probe needs the ") + name + " concept, which the model lacks");
  for (int i = spec->offset; i < spec->range().end(); ++i) iv.mask[i] = true;
  switch (kind) {
    case ProbeKind::ForceStrategy:
      if (value < 0 || value >= strategies::kStrategyCount) throw UsageError("probe: strategy index out of range");
      iv.values[spec->offset + value] = 1.0;
      break;
    case ProbeKind::ForceRange:
      if (value != 0 && value != 1) throw UsageError("probe: Range must be forced to 0 or 1");
      for (int i = spec->offset; i < spec->range().end(); ++i) iv.values[i] = value;
      break;
    case ProbeKind::ShareTarget:
      if (value < 0 || value >= spec->multiplicity) throw UsageError("probe: target index out of range");
      for (int m = 0; m < spec->multiplicity; ++m) iv.values[spec->instance(m).begin + (m == value ? 0 : 1)] = 1.0;
      break;
  }
  return iv;
}

ProbeArm run_probe_arm(const policy::ConceptPolicy& model, const ExperimentConfig& config,
                       std::optional<policy::Intervention> fixed, std::string label, int episodes, std::uint64_t seed) {
  ProbeArm arm;
  arm.label = std::move(label);
  const int steps = config.arena.max_steps;
  std::vector<double> sx(steps, 0.0), sy(steps, 0.0), sxx(steps, 0.0), syy(steps, 0.0);
  std::vector<std::int64_t> cnt(steps, 0);
  EvalOptions eo;
  eo.episodes = episodes;
  eo.seed = seed;
  eo.fixed = std::move(fixed);
  eo.on_frame = [&](const Frame& f) {
    if (f.terminal || f.t >= steps) return;
    for (const SlotFrame& d : f.defenders) {
      if (!d.active) continue;
      const env::Vec2 p = f.state.agents[d.agent].position;
      sx[f.t] += p.x;
      sy[f.t] += p.y;
      sxx[f.t] += p.x * p.x;
      syy[f.t] += p.y * p.y;
      ++cnt[f.t];
    }
  };
  arm.report = evaluate(model, config, eo);
  arm.tag_frequency =
      arm.report.active_steps > 0 ? static_cast<double>(arm.report.tag_actions) / arm.report.active_steps : 0.0;
  arm.tag_ci = stats::wilson_interval(arm.report.tag_actions, arm.report.active_steps);
  for (int t = 0; t < steps; ++t) {
    const double n = static_cast<double>(cnt[t]);
    const double mx = n > 0 ? sx[t] / n : 0.0;
    const double my = n > 0 ? sy[t] / n : 0.0;
    const auto half = [n](double ss, double m) {
      if (n < 2) return 0.0;
      const double var = std::max(0.0, (ss - n * m * m) / (n - 1.0));
      return 1.959963984540054 * std::sqrt(var / n);
    };
    arm.trace.mean_x.push_back(mx);
    arm.trace.mean_y.push_back(my);
    arm.trace.ci_x.push_back(half(sxx[t], mx));
    arm.trace.ci_y.push_back(half(syy[t], my));
    arm.trace.count.push_back(cnt[t]);
  }
  return arm;
}

ProbeReport behavioral_probe(const policy::ConceptPolicy& model, const ExperimentConfig& config, ProbeKind kind,
                             int episodes, std::uint64_t seed) {
  const concepts::ConceptSchema& schema = config.policy.schema;
  ProbeReport rep;
  rep.kind = kind;
  switch (kind) {
    case ProbeKind::ForceStrategy:
      for (int k = 0; k < strategies::kStrategyCount; ++k)
        rep.arms.push_back(run_probe_arm(model, config, probe_intervention(schema, kind, k),
                                         std::string(strategies::strategy_name(static_cast<strategies::StrategyKind>(k))),
                                         episodes, seed));
      break;
    case ProbeKind::ForceRange:
      rep.arms.push_back(run_probe_arm(model, config, probe_intervention(schema, kind, 0), "range=0", episodes, seed));
      rep.arms.push_back(run_probe_arm(model, config, probe_intervention(schema, kind, 1), "range=1", episodes, seed));
      rep.arms.push_back(run_probe_arm(model, config, std::nullopt, "none", episodes, seed));
      break;
    case ProbeKind::ShareTarget: {
      const int n = schema.at("Target").multiplicity;
      rep.arms.push_back(run_probe_arm(model, config, std::nullopt, "independent", episodes, seed));
      for (int i = 0; i < n; ++i)
        rep.arms.push_back(run_probe_arm(model, config, probe_intervention(schema, kind, i),
                                         "shared=" + std::to_string(i), episodes, seed));
      std::size_t best = 1;
      for (std::size_t a = 2; a < rep.arms.size(); ++a)
        if (rep.arms[a].report.wins > rep.arms[best].report.wins) best = a;
      const EvalReport& s = rep.arms[best].report;
      const EvalReport& i = rep.arms[0].report;
      rep.fisher_p = stats::fisher_exact_two_sided(s.wins, s.episodes - s.wins, i.wins, i.episodes - i.wins);
      break;
    }
  }
  return rep;
}

json ProbeReport::to_json() const {
  json arms_json = json::array();
  for (const ProbeArm& a : arms) {
    json arm = {{"label", a.label},
                {"win_rate", a.report.win_rate},
                {"win_rate_ci95", {a.report.win_rate_ci.lo, a.report.win_rate_ci.hi}},
                {"tag_frequency", a.tag_frequency},
                {"tag_frequency_ci95", {a.tag_ci.lo, a.tag_ci.hi}},
                {"episodes", a.report.episodes}};
    if (kind == ProbeKind::ForceStrategy)
      arm["trace"] = {{"mean_x", a.trace.mean_x},
                      {"mean_y", a.trace.mean_y},
                      {"ci95_x", a.trace.ci_x},
                      {"ci95_y", a.trace.ci_y},
                      {"count", a.trace.count}};
    arms_json.push_back(std::move(arm));
  }
  json out = {{"type", "probe_report"}, {"version", 1}, {"probe", probe_kind_name(kind)}, {"arms", arms_json}};
  if (kind == ProbeKind::ShareTarget) out["fisher_p"] = fisher_p;
  return out;
}

std::vector<AblationRow> concept_ablation_run(const ExperimentConfig& base,
                                              const std::vector<std::vector<std::string>>& subsets, std::int64_t budget,
                                              const std::vector<std::uint64_t>& seeds, int episodes,
                                              const std::filesystem::path& out_dir) {
  if (base.task != TaskKind::TagGame) throw UsageError("ablation: only the tag game is supported");
  if (seeds.empty()) throw UsageError("ablation: need at least one seed");
  std::vector<AblationRow> rows;
  for (const std::vector<std::string>& subset : subsets) {
    if (subset.empty()) throw UsageError("ablation: empty concept subset");
    ExperimentConfig cfg = base;
    cfg.policy.schema = concepts::build_schema_subset(cfg.arena.n_per_team, subset);
    cfg.policy.k = 0;
    cfg.policy.whiten = true;
    cfg.trainer.total_steps = budget;
    cfg.validate();

    AblationRow row;
    for (const concepts::ConceptSpec& s : cfg.policy.schema.specs) row.concepts.push_back(s.name);
    row.j = cfg.policy.j();
    std::string tag;
    for (const std::string& n : row.concepts) tag += (tag.empty() ? "" : "-") + n;
    for (std::uint64_t seed : seeds) {
      const std::filesystem::path dir = out_dir / (tag + "_seed" + std::to_string(seed));
      const trainer::TrainResult tr = trainer::train(cfg, seed, dir);
      const trainer::LoadedPolicy best = trainer::load_policy(tr.best_checkpoint);
      EvalOptions eo;
      eo.episodes = episodes;
      eo.seed = derive_seed(seed, 0xE7A1);
      row.win_rates.push_back(evaluate(best.model, best.config, eo).win_rate);
    }
    row.mean = stats::mean(row.win_rates);
    row.stddev = stats::stddev(row.win_rates);
    rows.push_back(std::move(row));
  }
  return rows;
}

json ablation_to_json(const std::vector<AblationRow>& rows) {
  json out = json::array();
  for (const AblationRow& r : rows)
    out.push_back({{"concepts", r.concepts}, {"j", r.j}, {"win_rates", r.win_rates}, {"mean", r.mean}, {"std", r.stddev}});
  return {{"type", "ablation_report"}, {"version", 1}, {"rows", out}};
}

}  // namespace cpm::eval
