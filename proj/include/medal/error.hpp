#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace medal {

enum class ErrorKind {
  InvalidArgument,
  InvalidConfig,
  PositionNotMasked,
  TokenIsMask,
  NoMaskedPositions,
  NonFiniteLogits,
  MissingPosition,
  EmptyCorpus,
  ZeroBaselineEntropy,
  NoChildren,
  AlreadyExpanded,
  EmptyPool,
  SubsetNotMasked,
  ZeroMassContext,
  InstanceTooLarge,
  BoundViolated,
  Protocol,
  Io,
};

std::string_view to_string(ErrorKind kind) noexcept;

/// Every failure raised by the library carries a kind so callers (and tests)
/// can dispatch on it without parsing messages.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

}  // namespace medal
