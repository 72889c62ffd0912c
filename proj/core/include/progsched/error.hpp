#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace progsched {

// Machine-readable error codes. The gateway serializes these verbatim into
// error bodies, so names are part of the wire contract.
enum class ErrorCode {
    DuplicateId,
    IllegalTransition,
    InvalidChunk,
    NoPrefillActivity,
    FewerThanTwoBackends,
    InvalidSpec,
    Shortfall,
    CapacityExceeded,
    AlreadyResident,
    NotResident,
    ConfigError,
    DiskExhausted,
    PortsExhausted,
    AlreadyPreparing,
    EnvNotReady,
    WrongOwner,
    ProgramStillActive,
    MissingProgramId,
    ProgramStopped,
    BackendUnhealthy,
    UnknownProgram,
    UnknownPreset,
    IncomparableReports,
    ParkTimeout,
    InvalidArgument,
};

inline std::string_view error_code_name(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::DuplicateId: return "DuplicateId";
        case ErrorCode::IllegalTransition: return "IllegalTransition";
        case ErrorCode::InvalidChunk: return "InvalidChunk";
        case ErrorCode::NoPrefillActivity: return "NoPrefillActivity";
        case ErrorCode::FewerThanTwoBackends: return "FewerThanTwoBackends";
        case ErrorCode::InvalidSpec: return "InvalidSpec";
        case ErrorCode::Shortfall: return "Shortfall";
        case ErrorCode::CapacityExceeded: return "CapacityExceeded";
        case ErrorCode::AlreadyResident: return "AlreadyResident";
        case ErrorCode::NotResident: return "NotResident";
        case ErrorCode::ConfigError: return "ConfigError";
        case ErrorCode::DiskExhausted: return "DiskExhausted";
        case ErrorCode::PortsExhausted: return "PortsExhausted";
        case ErrorCode::AlreadyPreparing: return "AlreadyPreparing";
        case ErrorCode::EnvNotReady: return "EnvNotReady";
        case ErrorCode::WrongOwner: return "WrongOwner";
        case ErrorCode::ProgramStillActive: return "ProgramStillActive";
        case ErrorCode::MissingProgramId: return "MissingProgramId";
        case ErrorCode::ProgramStopped: return "ProgramStopped";
        case ErrorCode::BackendUnhealthy: return "BackendUnhealthy";
        case ErrorCode::UnknownProgram: return "UnknownProgram";
        case ErrorCode::UnknownPreset: return "UnknownPreset";
        case ErrorCode::IncomparableReports: return "IncomparableReports";
        case ErrorCode::ParkTimeout: return "ParkTimeout";
        case ErrorCode::InvalidArgument: return "InvalidArgument";
    }
    return "Unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(error_code_name(code)) + ": " + message), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

}  // namespace progsched
