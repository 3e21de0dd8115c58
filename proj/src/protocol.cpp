#include "cpm/protocol.hpp"

#include "cpm/errors.hpp"

namespace cpm::protocol {

namespace {

json vec2(env::Vec2 v) { return {v.x, v.y}; }

json optional_vector(const Vector& v) { return v.size() == 0 ? json(nullptr) : to_json(v); }

}  // namespace

json frame_to_json(const eval::Frame& f, const concepts::ConceptSchema& schema) {
  json agents = json::array();
  for (const env::AgentState& a : f.state.agents)
    agents.push_back({{"team", a.team == env::Team::Attacker ? "attacker" : "defender"},
                      {"position", vec2(a.position)},
                      {"velocity", vec2(a.velocity)},
                      {"heading", a.heading},
                      {"tagged", a.tagged},
                      {"cooldown", a.cooldown}});
  json defenders = json::array();
  for (std::size_t s = 0; s < f.defenders.size(); ++s) {
    const eval::SlotFrame& d = f.defenders[s];
    defenders.push_back({{"slot", s},
                         {"agent", d.agent},
                         {"active", d.active},
                         {"predicted", optional_vector(d.predicted)},
                         {"concepts", optional_vector(d.concepts)},
                         {"oracle", optional_vector(d.oracle)},
                         {"intervention", d.intervention.empty() ? json(nullptr) : to_json(d.intervention)},
                         {"action", d.action < 0 ? json(nullptr)
                                                 : json(env::action_name(static_cast<env::Action>(d.action)))},
                         {"value", d.value}});
  }
  json actions = json::array();
  for (int a : f.actions) actions.push_back(env::action_name(static_cast<env::Action>(a)));
  json tags = json::array();
  for (const env::TagEvent& e : f.tags) tags.push_back({e.tagger, e.target});
  return {{"type", "frame"},
          {"version", kProtocolVersion},
          {"episode", f.episode},
          {"seed", f.seed},
          {"t", f.t},
          {"terminal", f.terminal},
          {"outcome", env::outcome_name(f.outcome)},
          {"strategy", strategies::strategy_name(f.strategy)},
          {"schema_fingerprint", hex64(schema.fingerprint())},
          {"agents", agents},
          {"defenders", defenders},
          {"actions", actions},
          {"rewards", f.rewards},
          {"events", {{"tags", tags}, {"misses", f.misses}}}};
}

json hello_message(const concepts::ConceptSchema& schema, const json& info) {
  return {{"type", "hello"}, {"version", kProtocolVersion}, {"schema", to_json(schema)}, {"info", info}};
}

std::string encode_payload(const std::string& payload) {
  if (payload.size() > kMaxMessageBytes) throw UsageError("protocol: message too large");
  const auto n = static_cast<std::uint32_t>(payload.size());
  std::string out;
  out.reserve(4 + payload.size());
  out.push_back(static_cast<char>((n >> 24) & 0xFF));
  out.push_back(static_cast<char>((n >> 16) & 0xFF));
  out.push_back(static_cast<char>((n >> 8) & 0xFF));
  out.push_back(static_cast<char>(n & 0xFF));
  out += payload;
  return out;
}

std::string encode(const json& message) { return encode_payload(message.dump()); }

bool try_decode(std::string& buffer, json& message) {
  if (buffer.size() < 4) return false;
  const auto b = [&](int i) { return static_cast<std::uint32_t>(static_cast<unsigned char>(buffer[i])); };
  const std::uint32_t n = (b(0) << 24) | (b(1) << 16) | (b(2) << 8) | b(3);
  if (n > kMaxMessageBytes) throw ParseError("protocol: message of " + std::to_string(n) + " bytes exceeds the limit");
  if (buffer.size() < 4 + static_cast<std::size_t>(n)) return false;
  const std::string payload = buffer.substr(4, n);
  buffer.erase(0, 4 + static_cast<std::size_t>(n));
  try {
    message = json::parse(payload);
  } catch (const json::parse_error& e) {
    throw ParseError(std::string("protocol: malformed JSON: ") + e.what());
  }
  return true;
}

std::string_view command_name(CommandKind kind) {
  switch (kind) {
    case CommandKind::Pause: return "pause";
    case CommandKind::Resume: return "resume";
    case CommandKind::StepOnce: return "step_once";
    case CommandKind::SetIntervention: return "set_intervention";
    case CommandKind::ClearIntervention: return "clear_intervention";
    case CommandKind::SetSpeed: return "set_speed";
    case CommandKind::ResetEpisode: return "reset_episode";
  }
  return "?";
}

namespace {

CommandKind command_from_name(const std::string& name) {
  for (CommandKind k : {CommandKind::Pause, CommandKind::Resume, CommandKind::StepOnce, CommandKind::SetIntervention,
                        CommandKind::ClearIntervention, CommandKind::SetSpeed, CommandKind::ResetEpisode})
    if (command_name(k) == name) return k;
  throw ParseError("unknown command '" + name + "'");
}

int read_slot(const json& m, int slots) {
  if (!m.contains("agent") || !m["agent"].is_number_integer()) throw ParseError("command needs an integer 'agent'");
  const int slot = m["agent"].get<int>();
  if (slot < 0 || slot >= slots) throw UsageError("agent " + std::to_string(slot) + " is not a defender slot");
  return slot;
}

}  // namespace

Command parse_command(const json& m, const concepts::ConceptSchema& schema, int slots) {
  if (!m.is_object() || m.value("type", "") != "command") throw ParseError("expected a command message");
  if (!m.contains("command") || !m["command"].is_string()) throw ParseError("command message needs 'command'");
  Command c;
  c.kind = command_from_name(m["command"].get<std::string>());
  if (m.contains("id")) c.id = m["id"];
  try {
    switch (c.kind) {
      case CommandKind::SetIntervention: {
        c.slot = read_slot(m, slots);
        policy::Intervention iv;
        iv.provenance = policy::Provenance::Manual;
        if (m.contains("concepts")) {
          iv.mask.assign(static_cast<std::size_t>(schema.dim), false);
          iv.values = Vector::Zero(schema.dim);
          const json& cs = m["concepts"];
          if (!cs.is_object() || cs.empty()) throw ParseError("'concepts' must be a non-empty object");
          for (auto it = cs.begin(); it != cs.end(); ++it) {
            const concepts::ConceptSpec& spec = schema.at(concepts::canonical_concept_name(it.key()));
            const std::vector<double> vals = it->get<std::vector<double>>();
            if (static_cast<int>(vals.size()) != spec.node_count())
              throw UsageError(spec.name + " takes " + std::to_string(spec.node_count()) + " values");
            for (int i = 0; i < spec.node_count(); ++i) {
              iv.mask[spec.offset + i] = true;
              iv.values[spec.offset + i] = vals[i];
            }
          }
        } else {
          iv.mask = m.at("mask").get<std::vector<bool>>();
          iv.values = vector_from_json(m.at("values"));
        }
        policy::validate_intervention(schema, iv);
        if (iv.empty()) throw UsageError("intervention masks nothing");
        c.intervention = std::move(iv);
        break;
      }
      case CommandKind::ClearIntervention:
        c.slot = read_slot(m, slots);
        break;
      case CommandKind::SetSpeed:
        c.speed = m.at("factor").get<double>();
        if (!(c.speed > 0.0) || !std::isfinite(c.speed)) throw UsageError("speed factor must be positive");
        break;
      case CommandKind::ResetEpisode:
        if (m.contains("seed") && !m["seed"].is_null()) c.seed = m["seed"].get<std::uint64_t>();
        break;
      default:
        break;
    }
  } catch (const json::exception& e) {
    throw ParseError(std::string("command ") + std::string(command_name(c.kind)) + ": " + e.what());
  }
  return c;
}

json ack_message(const Command& c, std::uint64_t episode, int effective_step) {
  json m = {{"type", "ack"},
            {"command", command_name(c.kind)},
            {"episode", episode},
            {"effective_step", effective_step}};
  if (!c.id.is_null()) m["id"] = c.id;
  if (c.slot >= 0) m["agent"] = c.slot;
  return m;
}

json error_message(const std::string& what, const json& id) {
  json m = {{"type", "error"}, {"message", what}};
  if (!id.is_null()) m["id"] = id;
  return m;
}

}  // namespace cpm::protocol
