#include "pxnet/error.hpp"

namespace pxnet {

const char* err_name(Err e) {
  switch (e) {
    case Err::NonDivisibleGeometry: return "NonDivisibleGeometry";
    case Err::MissingTile: return "MissingTile";
    case Err::GeometryMismatch: return "GeometryMismatch";
    case Err::BadMagic: return "BadMagic";
    case Err::TruncatedFile: return "TruncatedFile";
    case Err::DimensionOverflow: return "DimensionOverflow";
    case Err::EventOutOfBounds: return "EventOutOfBounds";
    case Err::EmptyEpochList: return "EmptyEpochList";
    case Err::FlatDivisionByZero: return "FlatDivisionByZero";
    case Err::AlignmentAmbiguous: return "AlignmentAmbiguous";
    case Err::DegenerateFrame: return "DegenerateFrame";
    case Err::ShiftExceedsFrame: return "ShiftExceedsFrame";
    case Err::NonFiniteInput: return "NonFiniteInput";
    case Err::InsufficientData: return "InsufficientData";
    case Err::EmptyPeakList: return "EmptyPeakList";
    case Err::SingularNormalMatrix: return "SingularNormalMatrix";
    case Err::InsufficientOverlap: return "InsufficientOverlap";
    case Err::BindFailure: return "BindFailure";
    case Err::RunAborted: return "RunAborted";
    case Err::VersionMismatch: return "VersionMismatch";
    case Err::ProtocolViolation: return "ProtocolViolation";
    case Err::UnknownWorker: return "UnknownWorker";
    case Err::UnknownTask: return "UnknownTask";
    case Err::CoordinateOutOfTile: return "CoordinateOutOfTile";
    case Err::IoFailure: return "IoFailure";
    case Err::BadPredicate: return "BadPredicate";
    case Err::SinkUnreachable: return "SinkUnreachable";
    case Err::PreconditionViolation: return "PreconditionViolation";
    case Err::ConfigError: return "ConfigError";
  }
  return "UnknownError";
}

}  // namespace pxnet
