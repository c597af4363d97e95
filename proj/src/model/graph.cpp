#include "dnbp/model/graph.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace dnbp::model {

GraphModel::GraphModel(const GraphSpec& spec) : spec_(spec), state_dim_(spec.state_dim) {
    if (state_dim_ == 0) throw std::invalid_argument("graph: state dimension must be positive");
    if (spec.nodes.empty()) throw std::invalid_argument("graph: no nodes");
    for (const auto& n : spec.nodes) {
        if (std::find(ids_.begin(), ids_.end(), n.id) != ids_.end()) {
            throw std::invalid_argument("graph: duplicate node id '" + n.id + "'");
        }
        ids_.push_back(n.id);
        observed_.push_back(n.observed);
    }
    adjacency_.resize(ids_.size());
    std::set<std::pair<NodeIndex, NodeIndex>> seen;
    for (const auto& [a, b] : spec.edges) {
        auto find = [&](const std::string& id) {
            auto it = std::find(ids_.begin(), ids_.end(), id);
            if (it == ids_.end()) throw std::invalid_argument("graph: edge " + a + "-" + b + " references unknown node '" + id + "'");
            return static_cast<NodeIndex>(it - ids_.begin());
        };
        const NodeIndex s = find(a), d = find(b);
        if (s == d) throw std::invalid_argument("graph: self-loop on node '" + a + "'");
        if (!seen.insert({std::min(s, d), std::max(s, d)}).second) {
            throw std::invalid_argument("graph: duplicate edge " + a + "-" + b);
        }
        edges_.push_back({s, d});
        adjacency_[s].push_back(d);
        adjacency_[d].push_back(s);
    }
    for (auto& adj : adjacency_) std::sort(adj.begin(), adj.end());
    for (NodeIndex n = 0; n < ids_.size(); ++n) {
        if (adjacency_[n].empty()) throw std::invalid_argument("graph: node '" + ids_[n] + "' has no neighbors");
    }
    // Connectivity.
    std::vector<bool> reached(ids_.size(), false);
    std::vector<NodeIndex> stack{0};
    reached[0] = true;
    while (!stack.empty()) {
        const NodeIndex n = stack.back();
        stack.pop_back();
        for (NodeIndex m : adjacency_[n]) {
            if (!reached[m]) {
                reached[m] = true;
                stack.push_back(m);
            }
        }
    }
    if (std::find(reached.begin(), reached.end(), false) != reached.end()) {
        throw std::invalid_argument("graph: not connected");
    }
    if (spec.bounds) {
        bounds_ = *spec.bounds;
        if (bounds_.lower.size() != state_dim_ || bounds_.upper.size() != state_dim_) {
            throw std::invalid_argument("graph: bounds do not match state dimension");
        }
        for (std::size_t i = 0; i < state_dim_; ++i) {
            if (!(bounds_.lower[i] < bounds_.upper[i])) throw std::invalid_argument("graph: empty state bounds");
        }
    } else {
        bounds_.lower.assign(state_dim_, -1.0);
        bounds_.upper.assign(state_dim_, 1.0);
    }
}

GraphModel GraphModel::pendulum() {
    GraphSpec s;
    s.nodes = {{"0"}, {"1"}, {"2"}};
    s.edges = {{"0", "1"}, {"1", "2"}};
    return GraphModel(s);
}

GraphModel GraphModel::spider() {
    GraphSpec s;
    for (int i = 0; i < 7; ++i) s.nodes.push_back({std::to_string(i)});
    s.edges = {{"0", "1"}, {"0", "2"}, {"0", "3"}, {"1", "4"}, {"2", "5"}, {"3", "6"}};
    return GraphModel(s);
}

NodeIndex GraphModel::index_of(const std::string& id) const {
    auto it = std::find(ids_.begin(), ids_.end(), id);
    if (it == ids_.end()) throw std::out_of_range("graph: unknown node '" + id + "'");
    return static_cast<NodeIndex>(it - ids_.begin());
}

std::optional<EdgeIndex> GraphModel::edge_between(NodeIndex a, NodeIndex b) const {
    for (EdgeIndex e = 0; e < edges_.size(); ++e) {
        const auto& ed = edges_[e];
        if ((ed.source == a && ed.destination == b) || (ed.source == b && ed.destination == a)) return e;
    }
    return std::nullopt;
}

std::span<const NodeIndex> GraphModel::neighbors(NodeIndex n) const {
    if (n >= adjacency_.size()) throw std::out_of_range("graph: unknown node index " + std::to_string(n));
    return adjacency_[n];
}

std::vector<DirectedEdge> GraphModel::message_schedule() const {
    std::vector<DirectedEdge> out;
    for (EdgeIndex e = 0; e < edges_.size(); ++e) {
        out.push_back({e, edges_[e].source, edges_[e].destination});
        out.push_back({e, edges_[e].destination, edges_[e].source});
    }
    return out;
}

std::vector<DirectedEdge> GraphModel::incoming(NodeIndex d) const {
    std::vector<DirectedEdge> out;
    for (NodeIndex s : neighbors(d)) out.push_back({*edge_between(s, d), s, d});
    return out;
}

bool GraphModel::is_tree() const { return edges_.size() + 1 == ids_.size(); }

std::string GraphModel::bound_name(const std::string& default_name) const {
    auto it = spec_.bindings.find(default_name);
    return it == spec_.bindings.end() ? default_name : it->second;
}

std::string GraphModel::unary_block(NodeIndex n) const { return bound_name("unary." + node_id(n)); }
std::string GraphModel::diffusion_block(NodeIndex n) const { return bound_name("diffusion." + node_id(n)); }

std::string GraphModel::density_block(EdgeIndex e) const {
    const auto& ed = edge(e);
    return bound_name("pairwise." + node_id(ed.source) + "-" + node_id(ed.destination) + ".density");
}

std::string GraphModel::sampler_block(EdgeIndex e) const {
    const auto& ed = edge(e);
    return bound_name("pairwise." + node_id(ed.source) + "-" + node_id(ed.destination) + ".sampler");
}

GraphSpec parse_graph_spec(const std::string& text) {
    GraphSpec spec;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
        std::istringstream ls(line);
        std::string key;
        if (!(ls >> key)) continue;
        auto fail = [&](const std::string& why) {
            throw std::invalid_argument("graph spec line " + std::to_string(lineno) + ": " + why);
        };
        if (key == "node") {
            GraphSpec::Node n;
            if (!(ls >> n.id)) fail("node needs an id");
            std::string flag;
            if (ls >> flag) {
                if (flag != "hidden-only") fail("unknown node flag '" + flag + "'");
                n.observed = false;
            }
            spec.nodes.push_back(n);
        } else if (key == "edge") {
            std::string a, b;
            if (!(ls >> a >> b)) fail("edge needs two node ids");
            spec.edges.emplace_back(a, b);
        } else if (key == "bind") {
            std::string from, to;
            if (!(ls >> from >> to)) fail("bind needs a default name and a block name");
            spec.bindings[from] = to;
        } else if (key == "state_dim") {
            if (!(ls >> spec.state_dim)) fail("state_dim needs a count");
        } else if (key == "bounds") {
            StateBounds b;
            double lo, hi;
            while (ls >> lo >> hi) {
                b.lower.push_back(lo);
                b.upper.push_back(hi);
            }
            spec.bounds = b;
        } else {
            fail("unknown directive '" + key + "'");
        }
    }
    return spec;
}

GraphSpec load_graph_spec(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open graph spec " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_graph_spec(ss.str());
}

std::string format_graph_spec(const GraphSpec& spec) {
    std::ostringstream os;
    os << "state_dim " << spec.state_dim << "\n";
    if (spec.bounds) {
        os << "bounds";
        for (std::size_t i = 0; i < spec.bounds->lower.size(); ++i) os << ' ' << spec.bounds->lower[i] << ' ' << spec.bounds->upper[i];
        os << "\n";
    }
    for (const auto& n : spec.nodes) os << "node " << n.id << (n.observed ? "" : " hidden-only") << "\n";
    for (const auto& [a, b] : spec.edges) os << "edge " << a << ' ' << b << "\n";
    for (const auto& [k, v] : spec.bindings) os << "bind " << k << ' ' << v << "\n";
    return os.str();
}

}  // namespace dnbp::model
