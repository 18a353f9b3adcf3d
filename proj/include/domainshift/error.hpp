#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace domainshift {

enum class ErrorKind {
  EmptyCorpus,
  ClassMismatch,
  ParseError,
  InvariantViolation,
  DecodeError,
  EmptyPool,
  DimensionMismatch,
  LengthMismatch,
  NotADistribution,
  NoUsableClass,
  EmptyDomain,
  ShapeMismatch,
  LabelOutOfRange,
  NonFiniteLoss,
  PreconditionFailed,
  IoError,
  UsageError,
  Internal,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::EmptyCorpus: return "EmptyCorpus";
    case ErrorKind::ClassMismatch: return "ClassMismatch";
    case ErrorKind::ParseError: return "ParseError";
    case ErrorKind::InvariantViolation: return "InvariantViolation";
    case ErrorKind::DecodeError: return "DecodeError";
    case ErrorKind::EmptyPool: return "EmptyPool";
    case ErrorKind::DimensionMismatch: return "DimensionMismatch";
    case ErrorKind::LengthMismatch: return "LengthMismatch";
    case ErrorKind::NotADistribution: return "NotADistribution";
    case ErrorKind::NoUsableClass: return "NoUsableClass";
    case ErrorKind::EmptyDomain: return "EmptyDomain";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::LabelOutOfRange: return "LabelOutOfRange";
    case ErrorKind::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorKind::PreconditionFailed: return "PreconditionFailed";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::UsageError: return "UsageError";
    case ErrorKind::Internal: return "Internal";
  }
  return "Unknown";
}

/// Every failure raised by the library. `kind()` is stable and is what the
/// CLI prints in its error JSON; `where()` names the offending key, path or
/// argument when there is one.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message, std::string where = {})
      : std::runtime_error(std::string(to_string(kind)) + ": " + message),
        kind_(kind),
        detail_(message),
        where_(std::move(where)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& detail() const noexcept { return detail_; }
  const std::string& where() const noexcept { return where_; }

 private:
  ErrorKind kind_;
  std::string detail_;
  std::string where_;
};

inline void require(bool condition, ErrorKind kind, const std::string& message,
                    std::string where = {}) {
  if (!condition) throw Error(kind, message, std::move(where));
}

}  // namespace domainshift
