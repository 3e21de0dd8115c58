#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include "cpm/config.hpp"
#include "cpm/eval.hpp"

// Wire protocol shared by `serve`, `replay` and the episode logs.
//
// Each socket message is a 4-byte big-endian unsigned payload length
// followed by that many bytes of UTF-8 JSON. Every JSON message has a
// "type" field: "hello", "frame", "ack" or "error" from the server,
// "command" from the client. Episode logs store one frame message per line.
namespace cpm::protocol {

inline constexpr int kProtocolVersion = 1;
inline constexpr std::uint32_t kMaxMessageBytes = 16u << 20;

json frame_to_json(const eval::Frame& frame, const concepts::ConceptSchema& schema);
json hello_message(const concepts::ConceptSchema& schema, const json& info);

std::string encode(const json& message);
std::string encode_payload(const std::string& payload);
// Pops one complete message off the front of `buffer`. Returns false when
// more bytes are needed. Throws ParseError on oversize or malformed JSON.
bool try_decode(std::string& buffer, json& message);

enum class CommandKind : std::uint8_t {
  Pause,
  Resume,
  StepOnce,
  SetIntervention,
  ClearIntervention,
  SetSpeed,
  ResetEpisode
};
std::string_view command_name(CommandKind kind);

struct Command {
  CommandKind kind = CommandKind::Pause;
  int slot = -1;                     // defender ordinal for (Set|Clear)Intervention
  policy::Intervention intervention; // SetIntervention
  double speed = 1.0;                // SetSpeed factor
  std::optional<std::uint64_t> seed; // ResetEpisode
  json id;                           // echoed back in the ack
};

// Parses {"type": "command", "command": "...", ...}. SetIntervention takes
// either {"concepts": {"Strategy": [0, 1, 0], ...}} or a raw
// {"mask": [...], "values": [...]} pair. Throws ParseError / UsageError.
Command parse_command(const json& message, const concepts::ConceptSchema& schema, int slots);

json ack_message(const Command& command, std::uint64_t episode, int effective_step);
json error_message(const std::string& what, const json& id = nullptr);

}  // namespace cpm::protocol
