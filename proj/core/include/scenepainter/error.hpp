#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace scenepainter {

enum class ErrorCode {
    // scene graph
    DuplicateHandle,
    MissingParentRegion,
    InvalidEdgeKind,
    DuplicateEdge,
    InvalidGraph,
    MaskSizeMismatch,
    MaskSubsetViolation,
    NotLevelThree,
    UnknownNode,
    UnknownEdge,
    MutedEndpoint,
    UnknownHandle,
    InvalidInstruction,
    SegmentationEmpty,
    SchemaVersionMismatch,
    CorruptMask,
    CorruptDocument,
    // diffusion backend
    TimestepOutOfRange,
    ShapeMismatch,
    UnknownToken,
    // customization
    MissingMap,
    MissingMask,
    EmptyGraph,
    DivergedLoss,
    OutpaintFailure,
    // outpaint
    EmptyImage,
    AllUnknownWithoutPrompt,
    // geometry
    NonPositiveDepth,
    EmptyScene,
    DegenerateFit,
    // pipeline
    TrajectoryExhausted,
    ConstructionDiverged,
    SessionBusy,
    UnknownSession,
    // eval
    EmptySet,
    // plumbing
    InvalidConfig,
    ImageTooLarge,
    IoError,
};

std::string_view to_string(ErrorCode code) noexcept;

/// Domain error carrying a stable machine-readable code. The CLI maps these
/// to exit code 1 and the service to a `{code, message}` body.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code), detail_(message) {}

    ErrorCode code() const noexcept { return code_; }
    const std::string& detail() const noexcept { return detail_; }

private:
    ErrorCode code_;
    std::string detail_;
};

}  // namespace scenepainter
