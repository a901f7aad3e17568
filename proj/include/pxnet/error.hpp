#pragma once
#include <stdexcept>
#include <string>

namespace pxnet {

enum class Err {
  // imagery / file formats
  NonDivisibleGeometry,
  MissingTile,
  GeometryMismatch,
  BadMagic,
  TruncatedFile,
  DimensionOverflow,
  // synthgen
  EventOutOfBounds,
  EmptyEpochList,
  // calib
  FlatDivisionByZero,
  AlignmentAmbiguous,
  DegenerateFrame,
  ShiftExceedsFrame,
  // trigger1
  NonFiniteInput,
  InsufficientData,
  EmptyPeakList,
  // trigger2
  SingularNormalMatrix,
  InsufficientOverlap,
  // netproto
  BindFailure,
  RunAborted,
  VersionMismatch,
  ProtocolViolation,
  UnknownWorker,
  UnknownTask,
  // dispatch
  CoordinateOutOfTile,
  IoFailure,
  BadPredicate,
  SinkUnreachable,
  // generic
  PreconditionViolation,
  ConfigError,
};

const char* err_name(Err e);

class PxError : public std::runtime_error {
public:
  PxError(Err code, const std::string& what)
      : std::runtime_error(std::string(err_name(code)) + ": " + what), code_(code) {}
  Err code() const { return code_; }

private:
  Err code_;
};

[[noreturn]] inline void raise(Err code, const std::string& what) {
  throw PxError(code, what);
}

inline void require(bool ok, Err code, const std::string& what) {
  if (!ok) raise(code, what);
}

}  // namespace pxnet
