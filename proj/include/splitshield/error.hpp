#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace splitshield {

enum class Errc {
  InvalidMatrix,
  NumericalFailure,
  DimensionError,
  ShapeError,
  BackwardBeforeForward,
  InsufficientBatch,
  InvalidSplit,
  InvalidBudget,
  InvalidM,
  MaskError,
  MissingHiddenLabels,
  UnknownAttribute,
  EmptySplit,
  NoFeasibleConfig,
  SpecError,
  MagicMismatch,
  LengthMismatch,
  CheckpointError,
  ProtocolError,
  Incompatible,
  ConnectionError,
  ConfigError,
  IoError,
};

constexpr std::string_view errc_name(Errc e) {
  switch (e) {
    case Errc::InvalidMatrix: return "InvalidMatrix";
    case Errc::NumericalFailure: return "NumericalFailure";
    case Errc::DimensionError: return "DimensionError";
    case Errc::ShapeError: return "ShapeError";
    case Errc::BackwardBeforeForward: return "BackwardBeforeForward";
    case Errc::InsufficientBatch: return "InsufficientBatch";
    case Errc::InvalidSplit: return "InvalidSplit";
    case Errc::InvalidBudget: return "InvalidBudget";
    case Errc::InvalidM: return "InvalidM";
    case Errc::MaskError: return "MaskError";
    case Errc::MissingHiddenLabels: return "MissingHiddenLabels";
    case Errc::UnknownAttribute: return "UnknownAttribute";
    case Errc::EmptySplit: return "EmptySplit";
    case Errc::NoFeasibleConfig: return "NoFeasibleConfig";
    case Errc::SpecError: return "SpecError";
    case Errc::MagicMismatch: return "MagicMismatch";
    case Errc::LengthMismatch: return "LengthMismatch";
    case Errc::CheckpointError: return "CheckpointError";
    case Errc::ProtocolError: return "ProtocolError";
    case Errc::Incompatible: return "Incompatible";
    case Errc::ConnectionError: return "ConnectionError";
    case Errc::ConfigError: return "ConfigError";
    case Errc::IoError: return "IoError";
  }
  return "Unknown";
}

/// Every failure raised by the library carries one of the `Errc` kinds.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool cond, Errc code, const std::string& what) {
  if (!cond) fail(code, what);
}

}  // namespace splitshield
