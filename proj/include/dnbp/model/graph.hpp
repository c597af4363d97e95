#pragma once

#include <cstddef>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace dnbp::model {

using NodeIndex = std::size_t;
using EdgeIndex = std::size_t;

// Oriented edge: pairwise translations are always taken as
// x[source] - x[destination].
struct Edge {
    NodeIndex source;
    NodeIndex destination;
};

// A message direction over an edge.
struct DirectedEdge {
    EdgeIndex edge;
    NodeIndex from;
    NodeIndex to;
};

struct StateBounds {
    std::vector<double> lower;
    std::vector<double> upper;
};

struct GraphSpec {
    struct Node {
        std::string id;
        bool observed = true;
    };
    std::vector<Node> nodes;
    std::vector<std::pair<std::string, std::string>> edges;
    // Overrides of the default parameter-block names, keyed by the default
    // name (e.g. "unary.2" -> "shared_unary").
    std::map<std::string, std::string> bindings;
    std::size_t state_dim = 2;
    std::optional<StateBounds> bounds;
};

// Validated, immutable pairwise MRF structure.
class GraphModel {
public:
    explicit GraphModel(const GraphSpec& spec);

    static GraphModel pendulum();
    static GraphModel spider();

    std::size_t node_count() const { return ids_.size(); }
    std::size_t edge_count() const { return edges_.size(); }
    std::size_t state_dim() const { return state_dim_; }
    const StateBounds& bounds() const { return bounds_; }

    const std::string& node_id(NodeIndex n) const { return ids_.at(n); }
    NodeIndex index_of(const std::string& id) const;
    bool observed(NodeIndex n) const { return observed_.at(n); }

    const std::vector<Edge>& edges() const { return edges_; }
    const Edge& edge(EdgeIndex e) const { return edges_.at(e); }
    std::optional<EdgeIndex> edge_between(NodeIndex a, NodeIndex b) const;

    // Sorted neighbor set of n.
    std::span<const NodeIndex> neighbors(NodeIndex n) const;
    std::span<const NodeIndex> neighbors(const std::string& id) const { return neighbors(index_of(id)); }

    // Every message direction: edges in construction order, source->dest
    // first, then the reverse.
    std::vector<DirectedEdge> message_schedule() const;
    // Directed edges s->d for all s in neighbors(d), ordered by s.
    std::vector<DirectedEdge> incoming(NodeIndex d) const;

    bool is_tree() const;

    std::string unary_block(NodeIndex n) const;
    std::string diffusion_block(NodeIndex n) const;
    std::string density_block(EdgeIndex e) const;
    std::string sampler_block(EdgeIndex e) const;

    const GraphSpec& spec() const { return spec_; }

private:
    std::string bound_name(const std::string& default_name) const;

    GraphSpec spec_;
    std::vector<std::string> ids_;
    std::vector<bool> observed_;
    std::vector<Edge> edges_;
    std::vector<std::vector<NodeIndex>> adjacency_;
    std::size_t state_dim_;
    StateBounds bounds_;
};

// Line-oriented text format:
//   # comment
//   state_dim 2
//   bounds -1 1 -1 1          (lower/upper per dimension)
//   node <id> [hidden-only]
//   edge <source-id> <destination-id>
//   bind <default-block-name> <block-name>
GraphSpec parse_graph_spec(const std::string& text);
GraphSpec load_graph_spec(const std::filesystem::path& path);
std::string format_graph_spec(const GraphSpec& spec);

}  // namespace dnbp::model
