#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "cpm/config.hpp"
#include "cpm/errors.hpp"
#include "cpm/eval.hpp"
#include "cpm/game.hpp"
#include "cpm/serve.hpp"
#include "cpm/trainer.hpp"

namespace {

using cpm::json;

cpm::serve::Server* g_server = nullptr;

void on_signal(int) {
  if (g_server != nullptr) g_server->request_stop();
}

void write_json(const std::string& path, const json& j) {
  if (path.empty() || path == "-") {
    std::cout << j.dump(2) << '\n';
    return;
  }
  std::ofstream out(path);
  if (!out) throw cpm::IoError("cannot write " + path);
  out << j.dump(2) << '\n';
}

std::vector<std::string> split_names(const std::string& text, const cpm::concepts::ConceptSchema& schema) {
  std::vector<std::string> out;
  if (text == "all") {
    for (const auto& s : schema.specs) out.push_back(s.name);
    return out;
  }
  std::size_t start = 0;
  while (start <= text.size()) {
    const std::size_t comma = text.find(',', start);
    const std::string part = text.substr(start, comma == std::string::npos ? std::string::npos : comma - start);
    if (!part.empty()) out.push_back(cpm::concepts::canonical_concept_name(part));
    if (comma == std::string::npos) break;
    start = comma + 1;
  }
  return out;
}

cpm::game::ShiftConfig read_shift(const std::string& arg) {
  if (arg.empty() || arg == "none") return {};
  if (arg == "sim-to-real") return cpm::game::ShiftConfig::sim_to_real();
  return cpm::game::load_shift(arg);
}

json load_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw cpm::IoError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw cpm::ParseError(path + ": " + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Concept policy models for multi-agent tag: train, evaluate, probe and serve"};
  app.require_subcommand(1);

  // train
  auto* train = app.add_subcommand("train", "Train a policy");
  std::string train_config, train_out = "run";
  std::uint64_t train_seed = 0;
  std::string train_resume;
  bool train_quiet = false;
  train->add_option("--config", train_config, "Experiment config (JSON); defaults when omitted");
  train->add_option("--seed", train_seed, "Run seed");
  train->add_option("--out", train_out, "Output directory");
  train->add_option("--resume", train_resume, "Checkpoint to resume from");
  train->add_flag("--quiet", train_quiet, "Do not echo metrics");

  // eval
  auto* evalc = app.add_subcommand("eval", "Evaluate a checkpoint");
  std::string eval_ckpt, eval_intervene, eval_shift, eval_report = "-", eval_log, eval_config;
  int eval_episodes = 100;
  std::uint64_t eval_seed = 0;
  evalc->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  evalc->add_option("--episodes", eval_episodes, "Episodes")->check(CLI::PositiveNumber);
  evalc->add_option("--intervene", eval_intervene, "Oracle-intervened concepts: comma list or 'all'");
  evalc->add_option("--shift", eval_shift, "Shift config file, 'sim-to-real' or 'none'");
  evalc->add_option("--report", eval_report, "Report path ('-' for stdout)");
  evalc->add_option("--seed", eval_seed, "Evaluation seed");
  evalc->add_option("--log", eval_log, "Write every frame as NDJSON");
  evalc->add_option("--config", eval_config, "Override the scenario stored in the checkpoint");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "Concept subset ablation");
  std::string ablate_spec;
  ablate->add_option("--spec", ablate_spec, "Ablation spec (JSON)")->required();

  // probe
  auto* probe = app.add_subcommand("probe", "Behavioral probe by forced concepts");
  std::string probe_kind, probe_ckpt, probe_report = "-";
  int probe_episodes = 1000;
  std::uint64_t probe_seed = 0;
  probe->add_option("--kind", probe_kind, "strategy, range or target")->required();
  probe->add_option("--checkpoint", probe_ckpt, "Checkpoint file")->required();
  probe->add_option("--episodes", probe_episodes, "Episodes per arm")->check(CLI::PositiveNumber);
  probe->add_option("--seed", probe_seed, "Evaluation seed");
  probe->add_option("--report", probe_report, "Report path ('-' for stdout)");

  // serve
  auto* serve = app.add_subcommand("serve", "Stream live episodes over a socket");
  std::string serve_ckpt, serve_config, serve_bind = "127.0.0.1:7878", serve_intervene, serve_shift, serve_log;
  cpm::serve::ServeOptions serve_opts;
  serve->add_option("--checkpoint", serve_ckpt, "Checkpoint file")->required();
  serve->add_option("--config", serve_config, "Scenario config; the checkpoint's when omitted");
  serve->add_option("--bind", serve_bind, "host:port");
  serve->add_option("--seed", serve_opts.seed, "Base episode seed");
  serve->add_option("--speed", serve_opts.speed, "Speed factor over 10 steps/s")->check(CLI::PositiveNumber);
  serve->add_option("--episodes", serve_opts.max_episodes, "Stop after N episodes (0 runs forever)");
  serve->add_option("--intervene", serve_intervene, "Oracle-intervened concepts: comma list or 'all'");
  serve->add_option("--shift", serve_shift, "Shift config file, 'sim-to-real' or 'none'");
  serve->add_option("--log", serve_log, "Also write frames as NDJSON");
  serve->add_flag("--paused", serve_opts.start_paused, "Start paused");
  serve->add_flag("--wait", serve_opts.wait_for_client, "Hold the first step until a client connects");

  // replay
  auto* replay = app.add_subcommand("replay", "Re-emit a recorded episode log");
  std::string replay_log, replay_bind;
  double replay_speed = 1.0;
  replay->add_option("--log", replay_log, "NDJSON episode log")->required();
  replay->add_option("--bind", replay_bind, "host:port; stdout when omitted");
  replay->add_option("--speed", replay_speed, "Speed factor over 10 steps/s; 0 disables pacing")
      ->check(CLI::NonNegativeNumber);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train) {
      cpm::ExperimentConfig cfg = train_config.empty() ? cpm::default_config() : cpm::load_config(train_config);
      std::optional<std::filesystem::path> resume;
      if (!train_resume.empty()) resume = train_resume;
      const auto result = cpm::trainer::train(cfg, train_seed, train_out, resume, [&](const json& m) {
        if (!train_quiet) std::cout << m.dump() << std::endl;
      });
      std::cerr << "final " << result.final_checkpoint.string() << "\nbest " << result.best_checkpoint.string()
                << " (win rate " << result.best_win_rate << ")\n";
    } else if (*evalc) {
      const cpm::trainer::LoadedPolicy loaded = cpm::trainer::load_policy(eval_ckpt);
      const cpm::ExperimentConfig cfg = eval_config.empty() ? loaded.config : cpm::load_config(eval_config);
      cpm::eval::EvalOptions opts;
      opts.episodes = eval_episodes;
      opts.seed = eval_seed;
      opts.shift = read_shift(eval_shift);
      if (!eval_intervene.empty()) opts.intervene = split_names(eval_intervene, cfg.policy.schema);
      std::ofstream log;
      if (!eval_log.empty()) {
        log.open(eval_log);
        if (!log) throw cpm::IoError("cannot write " + eval_log);
        opts.log = &log;
      }
      write_json(eval_report, cpm::eval::evaluate(loaded.model, cfg, opts).to_json());
    } else if (*ablate) {
      const json spec = load_json_file(ablate_spec);
      const cpm::ExperimentConfig base = !spec.contains("config")         ? cpm::default_config()
                                         : spec["config"].is_string()     ? cpm::load_config(spec["config"].get<std::string>())
                                                                          : cpm::config_from_json(spec["config"]);
      const auto subsets = spec.at("subsets").get<std::vector<std::vector<std::string>>>();
      const auto seeds = spec.value("seeds", std::vector<std::uint64_t>{0, 1, 2});
      const auto rows = cpm::eval::concept_ablation_run(base, subsets, spec.value("budget", std::int64_t{500'000}),
                                                        seeds, spec.value("episodes", 100),
                                                        spec.value("out", std::string("ablation")));
      write_json(spec.value("report", std::string("-")), cpm::eval::ablation_to_json(rows));
    } else if (*probe) {
      const cpm::trainer::LoadedPolicy loaded = cpm::trainer::load_policy(probe_ckpt);
      const auto kind = cpm::eval::probe_kind_from_name(probe_kind);
      write_json(probe_report,
                 cpm::eval::behavioral_probe(loaded.model, loaded.config, kind, probe_episodes, probe_seed).to_json());
    } else if (*serve) {
      const cpm::trainer::LoadedPolicy loaded = cpm::trainer::load_policy(serve_ckpt);
      const cpm::ExperimentConfig cfg = serve_config.empty() ? loaded.config : cpm::load_config(serve_config);
      serve_opts.bind = serve_bind;
      serve_opts.shift = read_shift(serve_shift);
      if (!serve_intervene.empty()) serve_opts.oracle_subset = split_names(serve_intervene, cfg.policy.schema);
      std::ofstream log;
      if (!serve_log.empty()) {
        log.open(serve_log);
        if (!log) throw cpm::IoError("cannot write " + serve_log);
        serve_opts.log = &log;
      }
      cpm::serve::Server server(loaded.model, cfg, serve_opts);
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "serving on port " << server.port() << std::endl;
      const auto stats = server.run();
      g_server = nullptr;
      std::cerr << stats.frames << " frames, " << stats.episodes << " episodes\n";
    } else if (*replay) {
      std::vector<std::string> frames = cpm::serve::load_log(replay_log);
      if (replay_bind.empty()) {
        cpm::serve::replay_to_stream(frames, std::cout, replay_speed);
      } else {
        cpm::serve::ServeOptions opts;
        opts.bind = replay_bind;
        opts.speed = replay_speed > 0.0 ? replay_speed : 1.0;
        if (replay_speed == 0.0) opts.steps_per_second = 0.0;
        opts.wait_for_client = true;
        cpm::serve::Server server = cpm::serve::Server::replay(std::move(frames), opts);
        g_server = &server;
        std::signal(SIGINT, on_signal);
        std::signal(SIGTERM, on_signal);
        std::cerr << "replaying on port " << server.port() << std::endl;
        server.run();
        g_server = nullptr;
      }
    }
  } catch (const cpm::ParseError& e) {
    std::cerr << "parse error: " << e.what() << '\n';
    return 3;
  } catch (const cpm::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const cpm::UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
