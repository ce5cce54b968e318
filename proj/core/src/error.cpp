#include "scenepainter/error.hpp"

namespace scenepainter {

std::string_view to_string(ErrorCode code) noexcept {
    switch (code) {
        case ErrorCode::DuplicateHandle: return "DuplicateHandle";
        case ErrorCode::MissingParentRegion: return "MissingParentRegion";
        case ErrorCode::InvalidEdgeKind: return "InvalidEdgeKind";
        case ErrorCode::DuplicateEdge: return "DuplicateEdge";
        case ErrorCode::InvalidGraph: return "InvalidGraph";
        case ErrorCode::MaskSizeMismatch: return "MaskSizeMismatch";
        case ErrorCode::MaskSubsetViolation: return "MaskSubsetViolation";
        case ErrorCode::NotLevelThree: return "NotLevelThree";
        case ErrorCode::UnknownNode: return "UnknownNode";
        case ErrorCode::UnknownEdge: return "UnknownEdge";
        case ErrorCode::MutedEndpoint: return "MutedEndpoint";
        case ErrorCode::UnknownHandle: return "UnknownHandle";
        case ErrorCode::InvalidInstruction: return "InvalidInstruction";
        case ErrorCode::SegmentationEmpty: return "SegmentationEmpty";
        case ErrorCode::SchemaVersionMismatch: return "SchemaVersionMismatch";
        case ErrorCode::CorruptMask: return "CorruptMask";
        case ErrorCode::CorruptDocument: return "CorruptDocument";
        case ErrorCode::TimestepOutOfRange: return "TimestepOutOfRange";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::UnknownToken: return "UnknownToken";
        case ErrorCode::MissingMap: return "MissingMap";
        case ErrorCode::MissingMask: return "MissingMask";
        case ErrorCode::EmptyGraph: return "EmptyGraph";
        case ErrorCode::DivergedLoss: return "DivergedLoss";
        case ErrorCode::OutpaintFailure: return "OutpaintFailure";
        case ErrorCode::EmptyImage: return "EmptyImage";
        case ErrorCode::AllUnknownWithoutPrompt: return "AllUnknownWithoutPrompt";
        case ErrorCode::NonPositiveDepth: return "NonPositiveDepth";
        case ErrorCode::EmptyScene: return "EmptyScene";
        case ErrorCode::DegenerateFit: return "DegenerateFit";
        case ErrorCode::TrajectoryExhausted: return "TrajectoryExhausted";
        case ErrorCode::ConstructionDiverged: return "ConstructionDiverged";
        case ErrorCode::SessionBusy: return "SessionBusy";
        case ErrorCode::UnknownSession: return "UnknownSession";
        case ErrorCode::EmptySet: return "EmptySet";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::ImageTooLarge: return "ImageTooLarge";
        case ErrorCode::IoError: return "IoError";
    }
    return "Unknown";
}

}  // namespace scenepainter
