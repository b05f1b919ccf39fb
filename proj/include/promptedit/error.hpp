#pragma once

#include <stdexcept>
#include <string>

namespace promptedit {

enum class ErrorCode {
  InvalidInstruction,
  RenderOverflow,
  InvalidAction,
  InvalidConfig,
  InvalidTask,
  ScorerUnavailable,
  ProtocolError,
  EpisodeFinished,
  ShapeError,
  NoActions,
  NoTape,
  NonFiniteLoss,
  InsufficientData,
  ConfigMismatch,
  EmptySplit,
  IoError,
};

const char* to_string(ErrorCode code) noexcept;

// Every failure raised by the library carries one of the codes above so the
// C API can map it to a status without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& message)
      : std::runtime_error(std::string(to_string(code)) + ": " + message),
        code_(code) {}

  ErrorCode code() const noexcept { return code_; }

  // Remote transport failures may succeed on a later attempt.
  bool retryable() const noexcept { return code_ == ErrorCode::ScorerUnavailable; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
  throw Error(code, message);
}

}  // namespace promptedit
