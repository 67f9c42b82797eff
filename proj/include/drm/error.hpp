// Copyright 2026 The DRM Merge Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace drm {

enum class ErrorKind {
  // bundle format
  BadMagic,
  UnsupportedVersion,
  CorruptHeader,
  OffsetOutOfRange,
  NonFiniteValue,
  IoFailure,
  // shapes and bundle alignment
  ShapeMismatch,
  MissingTensor,
  ExtraTensor,
  InvalidTensor,
  // numerics
  ConvergenceFailure,
  SingularSystem,
  SizeTooLarge,
  // arguments
  NeedTwoTasks,
  InvalidArgument,
};

constexpr std::string_view to_string(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::BadMagic: return "BadMagic";
    case ErrorKind::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorKind::CorruptHeader: return "CorruptHeader";
    case ErrorKind::OffsetOutOfRange: return "OffsetOutOfRange";
    case ErrorKind::NonFiniteValue: return "NonFiniteValue";
    case ErrorKind::IoFailure: return "IoFailure";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::MissingTensor: return "MissingTensor";
    case ErrorKind::ExtraTensor: return "ExtraTensor";
    case ErrorKind::InvalidTensor: return "InvalidTensor";
    case ErrorKind::ConvergenceFailure: return "ConvergenceFailure";
    case ErrorKind::SingularSystem: return "SingularSystem";
    case ErrorKind::SizeTooLarge: return "SizeTooLarge";
    case ErrorKind::NeedTwoTasks: return "NeedTwoTasks";
    case ErrorKind::InvalidArgument: return "InvalidArgument";
  }
  return "Unknown";
}

/// Broad category used by the command-line front end to pick an exit code.
enum class ErrorCategory { Argument, Io, Numerical };

constexpr ErrorCategory category_of(ErrorKind kind) noexcept {
  switch (kind) {
    case ErrorKind::BadMagic:
    case ErrorKind::UnsupportedVersion:
    case ErrorKind::CorruptHeader:
    case ErrorKind::OffsetOutOfRange:
    case ErrorKind::NonFiniteValue:
    case ErrorKind::IoFailure:
      return ErrorCategory::Io;
    case ErrorKind::ConvergenceFailure:
    case ErrorKind::SingularSystem:
    case ErrorKind::SizeTooLarge:
      return ErrorCategory::Numerical;
    default:
      return ErrorCategory::Argument;
  }
}

/// Every failure raised by the library. `subject()` names the offending
/// tensor or layer when one is known, and is empty otherwise.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, std::string message, std::string subject = {})
      : std::runtime_error(compose(kind, message, subject)),
        kind_(kind),
        subject_(std::move(subject)) {}

  ErrorKind kind() const noexcept { return kind_; }
  const std::string& subject() const noexcept { return subject_; }

 private:
  static std::string compose(ErrorKind kind, const std::string& message,
                             const std::string& subject) {
    std::string out(to_string(kind));
    if (!subject.empty()) out += "(" + subject + ")";
    if (!message.empty()) out += ": " + message;
    return out;
  }

  ErrorKind kind_;
  std::string subject_;
};

}  // namespace drm
