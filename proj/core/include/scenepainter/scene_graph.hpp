#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "scenepainter/raster.hpp"

namespace scenepainter::graph {

/// Concept hierarchy level: 1 = whole environment, 2 = category region,
/// 3 = individual object inside a region.
enum class Level : int { Environment = 1, Region = 2, Object = 3 };

enum class EdgeKind { R1, R2, R3 };

std::string_view to_string(EdgeKind kind) noexcept;
EdgeKind edge_kind_from_string(std::string_view text);

struct NodeId {
    std::uint32_t value = 0;
    auto operator<=>(const NodeId&) const = default;
};

struct EdgeId {
    std::uint32_t value = 0;
    auto operator<=>(const EdgeId&) const = default;
};

struct ConceptNode {
    NodeId id;
    Level level = Level::Region;
    std::string handle;
    std::string embedding_ref;
    Mask mask;
    std::optional<NodeId> parent_region;
    bool muted = false;

    bool operator==(const ConceptNode&) const = default;
};

struct RelationEdge {
    EdgeId id;
    EdgeKind kind = EdgeKind::R1;
    std::pair<NodeId, NodeId> endpoints;
    std::string handle;
    std::string embedding_ref;

    bool operator==(const RelationEdge&) const = default;
};

/// Three-level concept graph over a reference image. Immutable once built;
/// every mutating operation returns a new value.
class SceneConceptGraph {
public:
    SceneConceptGraph() = default;

    /// Validates every structural invariant and throws the matching Error on
    /// the first violation.
    static SceneConceptGraph from_parts(int height, int width, std::vector<ConceptNode> nodes,
                                        std::vector<RelationEdge> edges);

    int height() const noexcept { return height_; }
    int width() const noexcept { return width_; }
    const std::vector<ConceptNode>& nodes() const noexcept { return nodes_; }
    const std::vector<RelationEdge>& edges() const noexcept { return edges_; }

    const ConceptNode& node(NodeId id) const;
    const RelationEdge& edge(EdgeId id) const;
    const ConceptNode* find_node(std::string_view handle) const noexcept;
    const RelationEdge* find_edge(std::string_view handle) const noexcept;
    const ConceptNode& environment() const;
    std::optional<EdgeId> edge_between(NodeId a, NodeId b) const noexcept;

    /// All node and edge handles, nodes first, in id order.
    std::vector<std::string> handles() const;

    bool operator==(const SceneConceptGraph&) const = default;

private:
    int height_ = 0;
    int width_ = 0;
    std::vector<ConceptNode> nodes_;
    std::vector<RelationEdge> edges_;
};

/// Concept supplied by config, UI or a segmenter. `name` may be bare
/// ("forest") or already a token ("<forest>"); empty names get an automatic
/// handle.
struct ConceptSpec {
    std::string name;
    Level level = Level::Region;
    Mask mask;
    std::optional<std::string> parent;
};

struct RelationSpec {
    EdgeKind kind = EdgeKind::R1;
    std::string first;
    std::string second;
};

/// Builds a validated graph. When no level-1 concept is supplied one is
/// created with an all-ones mask. When `relations` is empty-optional the
/// default edge set is used: R1 from the environment to every region, R2
/// between every pair of regions, R3 from every object to its region.
SceneConceptGraph build_graph(int height, int width, const std::vector<ConceptSpec>& concepts,
                              const std::optional<std::vector<RelationSpec>>& relations = std::nullopt);

inline SceneConceptGraph build_graph(const Image& reference, const std::vector<ConceptSpec>& concepts,
                                     const std::optional<std::vector<RelationSpec>>& relations = std::nullopt) {
    return build_graph(reference.height(), reference.width(), concepts, relations);
}

/// Parent region of a level-3 node.
NodeId region_of(const SceneConceptGraph& graph, NodeId node);

/// Union of the two endpoint masks.
Mask edge_mask(const SceneConceptGraph& graph, EdgeId edge);

/// Relation-concept prompt unit: (first concept, relation, second concept).
struct PromptTriple {
    std::array<std::string, 3> tokens;
    /// Union of the two concept masks.
    Mask union_mask;
    /// One mask per token; the relation token owns the union mask.
    std::array<Mask, 3> handle_masks;
};

PromptTriple prompt_triple(const SceneConceptGraph& graph, EdgeId edge);

struct RefineInstruction {
    enum class Kind { Add, Change, Mute };

    Kind kind = Kind::Add;
    std::string target_handle;
    std::string description;
    std::optional<Mask> mask_hint;

    bool operator==(const RefineInstruction&) const = default;
};

std::string_view to_string(RefineInstruction::Kind kind) noexcept;

/// Mask source used by add-instructions: (description, hint) -> binary mask
/// at the graph's reference size.
using Segmenter = std::function<Mask(const std::string& description, const std::optional<Mask>& hint)>;

struct InstructionResult {
    SceneConceptGraph graph;
    std::optional<EdgeId> affected_edge;
    std::vector<std::string> new_handles;
};

InstructionResult apply_instruction(const SceneConceptGraph& graph, const RefineInstruction& instruction,
                                    const Segmenter& segmenter);

/// Returns human-readable descriptions of every violated invariant; empty
/// when the graph is well formed.
std::vector<std::string> invariant_violations(const SceneConceptGraph& graph);

// Run-length encoding over row-major order: comma-separated run lengths,
// alternating 0-runs and 1-runs, starting with a (possibly empty) 0-run.
std::string encode_rle(const Mask& mask);
Mask decode_rle(std::string_view text, int height, int width);

inline constexpr int kGraphSchemaVersion = 1;

nlohmann::json serialize(const SceneConceptGraph& graph);
SceneConceptGraph deserialize(const nlohmann::json& document);

nlohmann::json instruction_to_json(const RefineInstruction& instruction);
RefineInstruction instruction_from_json(const nlohmann::json& document, int height, int width);

}  // namespace scenepainter::graph
