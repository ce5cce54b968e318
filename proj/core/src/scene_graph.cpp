#include "scenepainter/scene_graph.hpp"

#include <algorithm>
#include <charconv>
#include <map>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "scenepainter/error.hpp"

namespace scenepainter::graph {

namespace {

std::string as_token(std::string_view name) {
    if (name.size() >= 2 && name.front() == '<' && name.back() == '>') return std::string(name);
    return "<" + std::string(name) + ">";
}

std::string numbered_handle(char prefix, std::uint32_t n) {
    std::string digits = std::to_string(n);
    if (digits.size() < 2) digits.insert(digits.begin(), '0');
    return std::string("<") + prefix + digits + ">";
}

std::pair<NodeId, NodeId> unordered(std::pair<NodeId, NodeId> p) {
    return p.first < p.second ? p : std::pair{p.second, p.first};
}

class HandleAllocator {
public:
    explicit HandleAllocator(const SceneConceptGraph& graph) {
        for (const auto& h : graph.handles()) taken_.insert(h);
        for (const auto& n : graph.nodes()) next_node_ = std::max(next_node_, n.id.value + 1);
        for (const auto& e : graph.edges()) next_edge_ = std::max(next_edge_, e.id.value + 1);
    }
    HandleAllocator() = default;

    std::string fresh(char prefix) {
        for (;;) {
            std::string h = numbered_handle(prefix, ++counter_[prefix]);
            if (taken_.insert(h).second) return h;
        }
    }
    bool claim(const std::string& handle) { return taken_.insert(handle).second; }
    NodeId next_node() { return NodeId{next_node_++}; }
    EdgeId next_edge() { return EdgeId{next_edge_++}; }

private:
    std::set<std::string> taken_;
    std::map<char, std::uint32_t> counter_;
    std::uint32_t next_node_ = 0;
    std::uint32_t next_edge_ = 0;
};

void check_edge_kind(const SceneConceptGraph& g, const RelationEdge& e) {
    const auto& a = g.node(e.endpoints.first);
    const auto& b = g.node(e.endpoints.second);
    bool ok = false;
    switch (e.kind) {
        case EdgeKind::R1: ok = a.level == Level::Environment && b.level == Level::Region; break;
        case EdgeKind::R2: ok = a.level == Level::Region && b.level == Level::Region && a.id != b.id; break;
        case EdgeKind::R3:
            ok = a.level == Level::Object && b.level == Level::Region && a.parent_region == b.id;
            break;
    }
    if (!ok)
        throw Error(ErrorCode::InvalidEdgeKind, std::string(to_string(e.kind)) + " edge " + e.handle +
                                                    " cannot join " + a.handle + " and " + b.handle);
}

}  // namespace

std::string_view to_string(EdgeKind kind) noexcept {
    switch (kind) {
        case EdgeKind::R1: return "R1";
        case EdgeKind::R2: return "R2";
        case EdgeKind::R3: return "R3";
    }
    return "?";
}

EdgeKind edge_kind_from_string(std::string_view text) {
    if (text == "R1") return EdgeKind::R1;
    if (text == "R2") return EdgeKind::R2;
    if (text == "R3") return EdgeKind::R3;
    throw Error(ErrorCode::InvalidEdgeKind, "unknown edge kind '" + std::string(text) + "'");
}

std::string_view to_string(RefineInstruction::Kind kind) noexcept {
    switch (kind) {
        case RefineInstruction::Kind::Add: return "add";
        case RefineInstruction::Kind::Change: return "change";
        case RefineInstruction::Kind::Mute: return "mute";
    }
    return "?";
}

// ---------------------------------------------------------------------------
// SceneConceptGraph

SceneConceptGraph SceneConceptGraph::from_parts(int height, int width, std::vector<ConceptNode> nodes,
                                                std::vector<RelationEdge> edges) {
    SceneConceptGraph g;
    g.height_ = height;
    g.width_ = width;
    std::sort(nodes.begin(), nodes.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    std::sort(edges.begin(), edges.end(), [](const auto& a, const auto& b) { return a.id < b.id; });
    g.nodes_ = std::move(nodes);
    g.edges_ = std::move(edges);

    std::set<std::string> handles;
    for (std::size_t i = 0; i < g.nodes_.size(); ++i) {
        const auto& n = g.nodes_[i];
        if (i > 0 && g.nodes_[i - 1].id == n.id)
            throw Error(ErrorCode::InvalidGraph, "duplicate node id " + std::to_string(n.id.value));
        if (n.handle.empty() || !handles.insert(n.handle).second)
            throw Error(ErrorCode::DuplicateHandle, "handle '" + n.handle + "' is not unique");
        if (n.mask.height() != height || n.mask.width() != width || n.mask.channels() != 1)
            throw Error(ErrorCode::MaskSizeMismatch, "mask of " + n.handle + " does not match reference size");
        if (!n.mask.is_binary()) throw Error(ErrorCode::CorruptMask, "mask of " + n.handle + " is not binary");
    }
    std::size_t environments = 0;
    for (const auto& n : g.nodes_) {
        if (n.level == Level::Environment) {
            ++environments;
            if (!n.mask.all_set())
                throw Error(ErrorCode::InvalidGraph, "environment mask of " + n.handle + " must be all ones");
        }
        if (n.level == Level::Object) {
            if (!n.parent_region) throw Error(ErrorCode::MissingParentRegion, n.handle + " has no parent region");
            const ConceptNode* parent = nullptr;
            for (const auto& p : g.nodes_)
                if (p.id == *n.parent_region) parent = &p;
            if (parent == nullptr || parent->level != Level::Region)
                throw Error(ErrorCode::MissingParentRegion, n.handle + " parent is not a level-2 node");
            if (!n.mask.subset_of(parent->mask))
                throw Error(ErrorCode::MaskSubsetViolation, n.handle + " mask exceeds region " + parent->handle);
        } else if (n.parent_region) {
            throw Error(ErrorCode::InvalidGraph, n.handle + " is not level 3 but has a parent region");
        }
    }
    if (environments != 1)
        throw Error(ErrorCode::InvalidGraph,
                    "graph needs exactly one level-1 node, found " + std::to_string(environments));

    std::set<std::pair<NodeId, NodeId>> pairs;
    for (std::size_t i = 0; i < g.edges_.size(); ++i) {
        const auto& e = g.edges_[i];
        if (i > 0 && g.edges_[i - 1].id == e.id)
            throw Error(ErrorCode::InvalidGraph, "duplicate edge id " + std::to_string(e.id.value));
        if (e.handle.empty() || !handles.insert(e.handle).second)
            throw Error(ErrorCode::DuplicateHandle, "handle '" + e.handle + "' is not unique");
        check_edge_kind(g, e);  // also resolves endpoints
        if (!pairs.insert(unordered(e.endpoints)).second)
            throw Error(ErrorCode::DuplicateEdge, "endpoints of " + e.handle + " are already connected");
    }
    return g;
}

const ConceptNode& SceneConceptGraph::node(NodeId id) const {
    auto it = std::lower_bound(nodes_.begin(), nodes_.end(), id, [](const auto& n, NodeId v) { return n.id < v; });
    if (it == nodes_.end() || it->id != id) throw Error(ErrorCode::UnknownNode, "node " + std::to_string(id.value));
    return *it;
}

const RelationEdge& SceneConceptGraph::edge(EdgeId id) const {
    auto it = std::lower_bound(edges_.begin(), edges_.end(), id, [](const auto& e, EdgeId v) { return e.id < v; });
    if (it == edges_.end() || it->id != id) throw Error(ErrorCode::UnknownEdge, "edge " + std::to_string(id.value));
    return *it;
}

const ConceptNode* SceneConceptGraph::find_node(std::string_view handle) const noexcept {
    for (const auto& n : nodes_)
        if (n.handle == handle) return &n;
    return nullptr;
}

const RelationEdge* SceneConceptGraph::find_edge(std::string_view handle) const noexcept {
    for (const auto& e : edges_)
        if (e.handle == handle) return &e;
    return nullptr;
}

const ConceptNode& SceneConceptGraph::environment() const {
    for (const auto& n : nodes_)
        if (n.level == Level::Environment) return n;
    throw Error(ErrorCode::InvalidGraph, "graph has no level-1 node");
}

std::optional<EdgeId> SceneConceptGraph::edge_between(NodeId a, NodeId b) const noexcept {
    const auto key = unordered({a, b});
    for (const auto& e : edges_)
        if (unordered(e.endpoints) == key) return e.id;
    return std::nullopt;
}

std::vector<std::string> SceneConceptGraph::handles() const {
    std::vector<std::string> out;
    out.reserve(nodes_.size() + edges_.size());
    for (const auto& n : nodes_) out.push_back(n.handle);
    for (const auto& e : edges_) out.push_back(e.handle);
    return out;
}

// ---------------------------------------------------------------------------
// Operations

SceneConceptGraph build_graph(int height, int width, const std::vector<ConceptSpec>& concepts,
                              const std::optional<std::vector<RelationSpec>>& relations) {
    if (height <= 0 || width <= 0) throw Error(ErrorCode::MaskSizeMismatch, "reference size must be positive");

    HandleAllocator alloc;
    std::vector<ConceptNode> nodes;
    std::map<std::string, NodeId> by_name;

    auto resolve = [&](const std::string& name) -> NodeId {
        auto it = by_name.find(as_token(name));
        if (it == by_name.end()) throw Error(ErrorCode::UnknownHandle, "no concept named '" + name + "'");
        return it->second;
    };

    // Named handles are claimed before any automatic handle is generated.
    for (const auto& c : concepts) {
        if (c.name.empty()) continue;
        if (!alloc.claim(as_token(c.name)))
            throw Error(ErrorCode::DuplicateHandle, "concept handle " + as_token(c.name) + " is not unique");
    }

    const bool has_env = std::any_of(concepts.begin(), concepts.end(),
                                     [](const auto& c) { return c.level == Level::Environment; });
    if (!has_env) {
        ConceptNode env;
        env.id = alloc.next_node();
        env.level = Level::Environment;
        env.handle = alloc.claim("<env>") ? std::string("<env>") : alloc.fresh('c');
        env.mask = Mask::ones(height, width);
        by_name[env.handle] = env.id;
        nodes.push_back(std::move(env));
    }

    for (const auto& c : concepts) {
        if (!c.mask.empty() && (c.mask.height() != height || c.mask.width() != width))
            throw Error(ErrorCode::MaskSizeMismatch, "mask of '" + c.name + "' does not match the reference image");
        ConceptNode n;
        n.id = alloc.next_node();
        n.level = c.level;
        n.handle = c.name.empty() ? alloc.fresh('c') : as_token(c.name);
        if (c.level == Level::Environment) {
            n.mask = Mask::ones(height, width);
        } else {
            if (c.mask.empty()) throw Error(ErrorCode::MaskSizeMismatch, "concept '" + c.name + "' has no mask");
            n.mask = c.mask;
        }
        by_name[n.handle] = n.id;
        nodes.push_back(std::move(n));
    }

    for (std::size_t i = 0; i < concepts.size(); ++i) {
        const auto& c = concepts[i];
        auto& n = nodes[i + (has_env ? 0 : 1)];
        if (c.level == Level::Object) {
            if (!c.parent) throw Error(ErrorCode::MissingParentRegion, n.handle + " has no parent region");
            n.parent_region = resolve(*c.parent);
        }
    }

    const auto level_of = [&](NodeId id) {
        for (const auto& n : nodes)
            if (n.id == id) return n.level;
        return Level::Region;
    };

    std::vector<RelationEdge> edges;
    auto add_edge = [&](EdgeKind kind, NodeId a, NodeId b) {
        // Endpoint order follows the kind rule: (level 1, level 2) for R1 and
        // (object, region) for R3.
        if ((kind == EdgeKind::R1 && level_of(a) != Level::Environment && level_of(b) == Level::Environment) ||
            (kind == EdgeKind::R3 && level_of(a) == Level::Region && level_of(b) == Level::Object))
            std::swap(a, b);
        RelationEdge e;
        e.id = alloc.next_edge();
        e.kind = kind;
        e.endpoints = {a, b};
        e.handle = alloc.fresh('r');
        edges.push_back(std::move(e));
    };

    if (relations) {
        for (const auto& r : *relations) add_edge(r.kind, resolve(r.first), resolve(r.second));
    } else {
        NodeId env{};
        std::vector<NodeId> regions;
        for (const auto& n : nodes) {
            if (n.level == Level::Environment) env = n.id;
            if (n.level == Level::Region) regions.push_back(n.id);
        }
        for (auto r : regions) add_edge(EdgeKind::R1, env, r);
        for (std::size_t i = 0; i < regions.size(); ++i)
            for (std::size_t j = i + 1; j < regions.size(); ++j) add_edge(EdgeKind::R2, regions[i], regions[j]);
        for (const auto& n : nodes)
            if (n.level == Level::Object) add_edge(EdgeKind::R3, n.id, *n.parent_region);
    }

    for (auto& n : nodes) n.embedding_ref = n.handle;
    for (auto& e : edges) e.embedding_ref = e.handle;
    return SceneConceptGraph::from_parts(height, width, std::move(nodes), std::move(edges));
}

NodeId region_of(const SceneConceptGraph& graph, NodeId node) {
    const auto& n = graph.node(node);
    if (n.level != Level::Object) throw Error(ErrorCode::NotLevelThree, n.handle + " is not a level-3 node");
    return *n.parent_region;
}

Mask edge_mask(const SceneConceptGraph& graph, EdgeId edge) {
    const auto& e = graph.edge(edge);
    return graph.node(e.endpoints.first).mask | graph.node(e.endpoints.second).mask;
}

PromptTriple prompt_triple(const SceneConceptGraph& graph, EdgeId edge) {
    const auto& e = graph.edge(edge);
    const auto& a = graph.node(e.endpoints.first);
    const auto& b = graph.node(e.endpoints.second);
    for (const auto* n : {&a, &b})
        if (n->muted) throw Error(ErrorCode::MutedEndpoint, n->handle + " is muted");
    PromptTriple t;
    t.tokens = {a.handle, e.handle, b.handle};
    t.union_mask = a.mask | b.mask;
    t.handle_masks = {a.mask, t.union_mask, b.mask};
    return t;
}

InstructionResult apply_instruction(const SceneConceptGraph& graph, const RefineInstruction& instruction,
                                    const Segmenter& segmenter) {
    using Kind = RefineInstruction::Kind;
    std::vector<ConceptNode> nodes = graph.nodes();
    std::vector<RelationEdge> edges = graph.edges();
    HandleAllocator alloc(graph);
    const auto& env = graph.environment();

    InstructionResult result;
    switch (instruction.kind) {
        case Kind::Add: {
            if (instruction.description.empty())
                throw Error(ErrorCode::InvalidInstruction, "add requires a description");
            Mask mask;
            if (segmenter) mask = segmenter(instruction.description, instruction.mask_hint);
            else if (instruction.mask_hint) mask = *instruction.mask_hint;
            if (mask.empty() || mask.none_set())
                throw Error(ErrorCode::SegmentationEmpty, "no region found for '" + instruction.description + "'");
            if (mask.height() != graph.height() || mask.width() != graph.width())
                throw Error(ErrorCode::MaskSizeMismatch, "segmented mask does not match the reference size");

            ConceptNode n;
            n.id = alloc.next_node();
            n.level = Level::Region;
            n.handle = alloc.fresh('c');
            n.embedding_ref = n.handle;
            n.mask = std::move(mask);

            RelationEdge e;
            e.id = alloc.next_edge();
            e.kind = EdgeKind::R1;
            e.endpoints = {env.id, n.id};
            e.handle = alloc.fresh('r');
            e.embedding_ref = e.handle;

            result.affected_edge = e.id;
            result.new_handles = {n.handle, e.handle};
            nodes.push_back(std::move(n));
            edges.push_back(std::move(e));
            break;
        }
        case Kind::Change: {
            if (instruction.description.empty())
                throw Error(ErrorCode::InvalidInstruction, "change requires a description");
            const auto* target = graph.find_node(instruction.target_handle);
            if (target == nullptr) throw Error(ErrorCode::UnknownHandle, instruction.target_handle);
            if (target->level != Level::Region)
                throw Error(ErrorCode::InvalidInstruction, "change targets a level-2 concept, got " + target->handle);
            if (auto existing = graph.edge_between(env.id, target->id)) {
                result.affected_edge = *existing;
            } else {
                RelationEdge e;
                e.id = alloc.next_edge();
                e.kind = EdgeKind::R1;
                e.endpoints = {env.id, target->id};
                e.handle = alloc.fresh('r');
                e.embedding_ref = e.handle;
                result.affected_edge = e.id;
                result.new_handles = {e.handle};
                edges.push_back(std::move(e));
            }
            break;
        }
        case Kind::Mute: {
            const auto* target = graph.find_node(instruction.target_handle);
            if (target == nullptr) throw Error(ErrorCode::UnknownHandle, instruction.target_handle);
            if (target->level == Level::Environment)
                throw Error(ErrorCode::InvalidInstruction, "the environment concept cannot be muted");
            for (auto& n : nodes)
                if (n.id == target->id) n.muted = true;
            break;
        }
    }
    result.graph = SceneConceptGraph::from_parts(graph.height(), graph.width(), std::move(nodes), std::move(edges));
    return result;
}

std::vector<std::string> invariant_violations(const SceneConceptGraph& graph) {
    std::vector<std::string> out;
    const int h = graph.height();
    const int w = graph.width();
    std::set<std::string> handles;
    std::size_t environments = 0;
    std::map<NodeId, const ConceptNode*> by_id;
    for (const auto& n : graph.nodes()) by_id[n.id] = &n;

    for (const auto& n : graph.nodes()) {
        if (!handles.insert(n.handle).second) out.push_back("duplicate handle " + n.handle);
        if (n.mask.height() != h || n.mask.width() != w) out.push_back("mask size of " + n.handle);
        if (n.level == Level::Environment) {
            ++environments;
            if (!n.mask.all_set()) out.push_back("environment mask not all ones");
        }
        if (n.level == Level::Object) {
            auto it = n.parent_region ? by_id.find(*n.parent_region) : by_id.end();
            if (it == by_id.end() || it->second->level != Level::Region) {
                out.push_back("object without region " + n.handle);
            } else {
                for (std::size_t i = 0; i < n.mask.size() && i < it->second->mask.size(); ++i)
                    if (n.mask[i] > it->second->mask[i]) {
                        out.push_back("object mask outside region " + n.handle);
                        break;
                    }
            }
        }
    }
    if (environments != 1) out.push_back("level-1 count " + std::to_string(environments));

    std::set<std::pair<NodeId, NodeId>> pairs;
    for (const auto& e : graph.edges()) {
        if (!handles.insert(e.handle).second) out.push_back("duplicate handle " + e.handle);
        auto a = by_id.find(e.endpoints.first);
        auto b = by_id.find(e.endpoints.second);
        if (a == by_id.end() || b == by_id.end()) {
            out.push_back("dangling edge " + e.handle);
            continue;
        }
        const auto la = a->second->level;
        const auto lb = b->second->level;
        bool ok = false;
        if (e.kind == EdgeKind::R1) ok = la == Level::Environment && lb == Level::Region;
        if (e.kind == EdgeKind::R2) ok = la == Level::Region && lb == Level::Region;
        if (e.kind == EdgeKind::R3) ok = la == Level::Object && lb == Level::Region && a->second->parent_region == b->first;
        if (!ok) out.push_back("edge kind rule broken by " + e.handle);
        if (!pairs.insert(unordered(e.endpoints)).second) out.push_back("duplicate endpoint pair " + e.handle);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Serialization

std::string encode_rle(const Mask& mask) {
    std::string out;
    std::uint8_t current = 0;
    std::size_t run = 0;
    auto flush = [&] {
        if (!out.empty()) out.push_back(',');
        out += std::to_string(run);
    };
    for (std::size_t i = 0; i < mask.size(); ++i) {
        const std::uint8_t v = mask[i] ? 1 : 0;
        if (v != current) {
            flush();
            current = v;
            run = 0;
        }
        ++run;
    }
    flush();
    return out;
}

Mask decode_rle(std::string_view text, int height, int width) {
    if (height <= 0 || width <= 0) throw Error(ErrorCode::CorruptMask, "invalid mask size");
    Mask mask(height, width);
    const std::size_t total = mask.size();
    std::size_t pos = 0;
    std::uint8_t value = 0;
    std::size_t cursor = 0;
    while (cursor <= text.size()) {
        const auto comma = text.find(',', cursor);
        const auto field = text.substr(cursor, comma == std::string_view::npos ? std::string_view::npos : comma - cursor);
        std::size_t run = 0;
        auto [ptr, ec] = std::from_chars(field.data(), field.data() + field.size(), run);
        if (field.empty() || ec != std::errc{} || ptr != field.data() + field.size())
            throw Error(ErrorCode::CorruptMask, "bad run length '" + std::string(field) + "'");
        if (run > total - pos) throw Error(ErrorCode::CorruptMask, "runs exceed mask size");
        std::fill_n(mask.storage().begin() + static_cast<std::ptrdiff_t>(pos), run, value);
        pos += run;
        value ^= 1;
        if (comma == std::string_view::npos) break;
        cursor = comma + 1;
    }
    if (pos != total) throw Error(ErrorCode::CorruptMask, "runs cover " + std::to_string(pos) + " of " +
                                                              std::to_string(total) + " pixels");
    return mask;
}

nlohmann::json serialize(const SceneConceptGraph& graph) {
    nlohmann::json doc;
    doc["version"] = kGraphSchemaVersion;
    doc["size"] = {graph.height(), graph.width()};
    auto& nodes = doc["nodes"] = nlohmann::json::array();
    for (const auto& n : graph.nodes()) {
        nlohmann::json j{{"id", n.id.value},
                         {"level", static_cast<int>(n.level)},
                         {"handle", n.handle},
                         {"embedding_ref", n.embedding_ref},
                         {"mask", encode_rle(n.mask)},
                         {"muted", n.muted}};
        if (n.parent_region) j["parent_region"] = n.parent_region->value;
        nodes.push_back(std::move(j));
    }
    auto& edges = doc["edges"] = nlohmann::json::array();
    for (const auto& e : graph.edges()) {
        edges.push_back({{"id", e.id.value},
                         {"kind", std::string(to_string(e.kind))},
                         {"endpoints", {e.endpoints.first.value, e.endpoints.second.value}},
                         {"handle", e.handle},
                         {"embedding_ref", e.embedding_ref}});
    }
    return doc;
}

SceneConceptGraph deserialize(const nlohmann::json& document) {
    try {
        const int version = document.at("version").get<int>();
        if (version != kGraphSchemaVersion)
            throw Error(ErrorCode::SchemaVersionMismatch, "graph schema version " + std::to_string(version));
        const int h = document.at("size").at(0).get<int>();
        const int w = document.at("size").at(1).get<int>();
        std::vector<ConceptNode> nodes;
        for (const auto& j : document.at("nodes")) {
            ConceptNode n;
            n.id = NodeId{j.at("id").get<std::uint32_t>()};
            const int level = j.at("level").get<int>();
            if (level < 1 || level > 3) throw Error(ErrorCode::CorruptDocument, "node level " + std::to_string(level));
            n.level = static_cast<Level>(level);
            n.handle = j.at("handle").get<std::string>();
            n.embedding_ref = j.value("embedding_ref", n.handle);
            n.mask = decode_rle(j.at("mask").get<std::string>(), h, w);
            if (j.contains("parent_region")) n.parent_region = NodeId{j.at("parent_region").get<std::uint32_t>()};
            n.muted = j.value("muted", false);
            nodes.push_back(std::move(n));
        }
        std::vector<RelationEdge> edges;
        for (const auto& j : document.at("edges")) {
            RelationEdge e;
            e.id = EdgeId{j.at("id").get<std::uint32_t>()};
            e.kind = edge_kind_from_string(j.at("kind").get<std::string>());
            e.endpoints = {NodeId{j.at("endpoints").at(0).get<std::uint32_t>()},
                           NodeId{j.at("endpoints").at(1).get<std::uint32_t>()}};
            e.handle = j.at("handle").get<std::string>();
            e.embedding_ref = j.value("embedding_ref", e.handle);
            edges.push_back(std::move(e));
        }
        return SceneConceptGraph::from_parts(h, w, std::move(nodes), std::move(edges));
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorCode::CorruptDocument, ex.what());
    }
}

nlohmann::json instruction_to_json(const RefineInstruction& instruction) {
    nlohmann::json j{{"kind", std::string(to_string(instruction.kind))}};
    if (!instruction.target_handle.empty()) j["target"] = instruction.target_handle;
    if (!instruction.description.empty()) j["description"] = instruction.description;
    if (instruction.mask_hint) {
        j["mask_hint"] = encode_rle(*instruction.mask_hint);
        j["mask_size"] = {instruction.mask_hint->height(), instruction.mask_hint->width()};
    }
    return j;
}

RefineInstruction instruction_from_json(const nlohmann::json& document, int height, int width) {
    try {
        RefineInstruction in;
        const auto kind = document.at("kind").get<std::string>();
        if (kind == "add") in.kind = RefineInstruction::Kind::Add;
        else if (kind == "change") in.kind = RefineInstruction::Kind::Change;
        else if (kind == "mute") in.kind = RefineInstruction::Kind::Mute;
        else throw Error(ErrorCode::InvalidInstruction, "unknown instruction kind '" + kind + "'");
        if (document.contains("target")) in.target_handle = as_token(document.at("target").get<std::string>());
        in.description = document.value("description", std::string{});
        if (document.contains("mask_hint")) {
            int mh = height, mw = width;
            if (document.contains("mask_size")) {
                mh = document.at("mask_size").at(0).get<int>();
                mw = document.at("mask_size").at(1).get<int>();
            }
            if (mh != height || mw != width) throw Error(ErrorCode::MaskSizeMismatch, "mask hint size");
            in.mask_hint = decode_rle(document.at("mask_hint").get<std::string>(), height, width);
        }
        if (in.kind == RefineInstruction::Kind::Add && in.description.empty())
            throw Error(ErrorCode::InvalidInstruction, "add requires a description");
        if (in.kind != RefineInstruction::Kind::Add && in.target_handle.empty())
            throw Error(ErrorCode::InvalidInstruction, std::string(to_string(in.kind)) + " requires a target handle");
        if (in.kind == RefineInstruction::Kind::Change && in.description.empty())
            throw Error(ErrorCode::InvalidInstruction, "change requires a description");
        return in;
    } catch (const nlohmann::json::exception& ex) {
        throw Error(ErrorCode::InvalidInstruction, ex.what());
    }
}

}  // namespace scenepainter::graph
