#include "promptedit/error.hpp"

namespace promptedit {

const char* to_string(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::InvalidInstruction: return "InvalidInstruction";
    case ErrorCode::RenderOverflow: return "RenderOverflow";
    case ErrorCode::InvalidAction: return "InvalidAction";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::InvalidTask: return "InvalidTask";
    case ErrorCode::ScorerUnavailable: return "ScorerUnavailable";
    case ErrorCode::ProtocolError: return "ProtocolError";
    case ErrorCode::EpisodeFinished: return "EpisodeFinished";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::NoActions: return "NoActions";
    case ErrorCode::NoTape: return "NoTape";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::InsufficientData: return "InsufficientData";
    case ErrorCode::ConfigMismatch: return "ConfigMismatch";
    case ErrorCode::EmptySplit: return "EmptySplit";
    case ErrorCode::IoError: return "IoError";
  }
  return "Unknown";
}

}  // namespace promptedit
