#pragma once

// Text-attributed graph data model: CSR adjacency with one raw text string
// per node, optional labels and label texts. Loading, saving, ego-graph
// extraction and a synthetic generator for desk-scale experiments.

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "p2tag/rng.hpp"

namespace p2tag {

using NodeId = std::int64_t;
using ClassId = std::int64_t;

struct ParseError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct IntegrityError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TextAttributedGraph {
    NodeId num_nodes = 0;
    // CSR over directed arcs; undirected graphs store both (i,j) and (j,i)
    std::vector<std::int64_t> offsets;   // size num_nodes + 1
    std::vector<NodeId> columns;         // sorted ascending within each row
    std::vector<std::string> texts;      // size num_nodes
    std::vector<ClassId> labels;         // size num_nodes, -1 = unlabeled
    std::map<ClassId, std::string> label_texts;
    bool directed = false;

    std::int64_t num_arcs() const { return static_cast<std::int64_t>(columns.size()); }

    std::int64_t degree(NodeId v) const { return offsets[v + 1] - offsets[v]; }

    const NodeId* neighbors_begin(NodeId v) const { return columns.data() + offsets[v]; }
    const NodeId* neighbors_end(NodeId v) const { return columns.data() + offsets[v + 1]; }

    bool has_arc(NodeId src, NodeId dst) const {
        return std::binary_search(neighbors_begin(src), neighbors_end(src), dst);
    }

    std::vector<NodeId> nodes_with_label(ClassId c) const {
        std::vector<NodeId> out;
        for (NodeId v = 0; v < num_nodes; ++v)
            if (labels[v] == c) out.push_back(v);
        return out;
    }

    void validate() const {
        if (offsets.size() != static_cast<std::size_t>(num_nodes) + 1)
            throw IntegrityError("graph: offsets size mismatch");
        if (offsets.front() != 0 || offsets.back() != num_arcs())
            throw IntegrityError("graph: offsets endpoints invalid");
        for (std::size_t i = 1; i < offsets.size(); ++i)
            if (offsets[i] < offsets[i - 1])
                throw IntegrityError("graph: offsets not monotone");
        for (NodeId v = 0; v < num_nodes; ++v) {
            for (auto it = neighbors_begin(v); it != neighbors_end(v); ++it) {
                if (*it < 0 || *it >= num_nodes)
                    throw IntegrityError("graph: column index out of range");
                if (it + 1 != neighbors_end(v) && *(it + 1) <= *it)
                    throw IntegrityError("graph: columns not strictly ascending (duplicate arc?)");
            }
        }
        if (texts.size() != static_cast<std::size_t>(num_nodes))
            throw IntegrityError("graph: texts size mismatch");
        if (labels.size() != static_cast<std::size_t>(num_nodes))
            throw IntegrityError("graph: labels size mismatch");
        if (!directed) {
            for (NodeId v = 0; v < num_nodes; ++v)
                for (auto it = neighbors_begin(v); it != neighbors_end(v); ++it)
                    if (!has_arc(*it, v))
                        throw IntegrityError("graph: undirected graph missing reverse arc");
        }
        for (NodeId v = 0; v < num_nodes; ++v)
            if (labels[v] >= 0 && !label_texts.count(labels[v]))
                throw IntegrityError("graph: labeled node " + std::to_string(v) +
                                     " has class " + std::to_string(labels[v]) +
                                     " missing from label_texts");
    }
};

// target-centered ego graph: members[0] is the target, the rest are
// first-order neighbors; edges are in local ids
struct EgoGraph {
    NodeId target = 0;
    std::vector<NodeId> members;                          // global ids, target first
    std::vector<std::pair<NodeId, NodeId>> induced_edges; // local ids, both directions
    std::int64_t size_cap = 100;
};

namespace detail {

// builds CSR from an arc list; dedups; sorts columns ascending
inline void build_csr(TextAttributedGraph& g,
                      std::vector<std::pair<NodeId, NodeId>> arcs) {
    std::sort(arcs.begin(), arcs.end());
    arcs.erase(std::unique(arcs.begin(), arcs.end()), arcs.end());
    g.offsets.assign(static_cast<std::size_t>(g.num_nodes) + 1, 0);
    for (const auto& [s, d] : arcs) {
        (void)d;
        g.offsets[static_cast<std::size_t>(s) + 1]++;
    }
    for (std::size_t i = 1; i < g.offsets.size(); ++i) g.offsets[i] += g.offsets[i - 1];
    g.columns.resize(arcs.size());
    std::vector<std::int64_t> cursor(g.offsets.begin(), g.offsets.end() - 1);
    for (const auto& [s, d] : arcs) g.columns[static_cast<std::size_t>(cursor[s]++)] = d;
}

inline std::vector<std::string> split_tsv(const std::string& line) {
    std::vector<std::string> out;
    std::size_t start = 0;
    while (true) {
        std::size_t tab = line.find('\t', start);
        if (tab == std::string::npos) {
            out.push_back(line.substr(start));
            break;
        }
        out.push_back(line.substr(start, tab - start));
        start = tab + 1;
    }
    return out;
}

inline std::int64_t parse_int(const std::string& s, const std::string& what, std::size_t line_no) {
    try {
        std::size_t pos = 0;
        std::int64_t v = std::stoll(s, &pos);
        if (pos != s.size()) throw std::invalid_argument("trailing chars");
        return v;
    } catch (const std::exception&) {
        throw ParseError(what + ": bad integer '" + s + "' at line " + std::to_string(line_no));
    }
}

}  // namespace detail

// nodes file: id<TAB>label_id<TAB>text  (label_id may be empty)
// edges file: src<TAB>dst
// label-texts file: label_id<TAB>label text
inline TextAttributedGraph load_tag(const std::string& nodes_path,
                                    const std::string& edges_path,
                                    const std::string& labels_path = "",
                                    bool directed = false) {
    std::ifstream nf(nodes_path);
    if (!nf) throw ParseError("load_tag: cannot open nodes file " + nodes_path);

    TextAttributedGraph g;
    g.directed = directed;
    std::string line;
    std::size_t line_no = 0;
    std::vector<std::pair<NodeId, std::pair<ClassId, std::string>>> records;
    while (std::getline(nf, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto fields = detail::split_tsv(line);
        if (fields.size() != 3)
            throw ParseError("nodes file: expected 3 tab-separated fields at line " +
                             std::to_string(line_no));
        NodeId id = detail::parse_int(fields[0], "nodes file", line_no);
        ClassId label = fields[1].empty() ? -1 : detail::parse_int(fields[1], "nodes file", line_no);
        records.push_back({id, {label, fields[2]}});
    }
    g.num_nodes = static_cast<NodeId>(records.size());
    g.texts.assign(records.size(), "");
    g.labels.assign(records.size(), -1);
    std::vector<bool> seen(records.size(), false);
    for (auto& [id, rest] : records) {
        if (id < 0 || id >= g.num_nodes)
            throw IntegrityError("nodes file: id " + std::to_string(id) +
                                 " outside 0.." + std::to_string(g.num_nodes - 1));
        if (seen[static_cast<std::size_t>(id)])
            throw IntegrityError("nodes file: duplicate id " + std::to_string(id));
        seen[static_cast<std::size_t>(id)] = true;
        g.labels[static_cast<std::size_t>(id)] = rest.first;
        g.texts[static_cast<std::size_t>(id)] = std::move(rest.second);
    }

    std::ifstream ef(edges_path);
    if (!ef) throw ParseError("load_tag: cannot open edges file " + edges_path);
    std::vector<std::pair<NodeId, NodeId>> arcs;
    line_no = 0;
    while (std::getline(ef, line)) {
        ++line_no;
        if (line.empty()) continue;
        auto fields = detail::split_tsv(line);
        if (fields.size() != 2)
            throw ParseError("edges file: expected 2 tab-separated fields at line " +
                             std::to_string(line_no));
        NodeId s = detail::parse_int(fields[0], "edges file", line_no);
        NodeId d = detail::parse_int(fields[1], "edges file", line_no);
        if (s < 0 || s >= g.num_nodes || d < 0 || d >= g.num_nodes)
            throw IntegrityError("edges file: arc (" + std::to_string(s) + "," +
                                 std::to_string(d) + ") references unknown node at line " +
                                 std::to_string(line_no));
        if (s == d) continue;  // drop self-loops; the GNN adds its own
        arcs.push_back({s, d});
        if (!directed) arcs.push_back({d, s});
    }
    detail::build_csr(g, std::move(arcs));

    if (!labels_path.empty()) {
        std::ifstream lf(labels_path);
        if (!lf) throw ParseError("load_tag: cannot open label-texts file " + labels_path);
        line_no = 0;
        while (std::getline(lf, line)) {
            ++line_no;
            if (line.empty()) continue;
            auto fields = detail::split_tsv(line);
            if (fields.size() != 2)
                throw ParseError("label-texts file: expected 2 fields at line " +
                                 std::to_string(line_no));
            ClassId c = detail::parse_int(fields[0], "label-texts file", line_no);
            g.label_texts[c] = fields[1];
        }
    } else {
        // labeled nodes without label texts get a numeric placeholder
        for (NodeId v = 0; v < g.num_nodes; ++v)
            if (g.labels[v] >= 0 && !g.label_texts.count(g.labels[v]))
                g.label_texts[g.labels[v]] = "class " + std::to_string(g.labels[v]);
    }

    g.validate();
    return g;
}

inline void save_tag(const TextAttributedGraph& g,
                     const std::string& nodes_path,
                     const std::string& edges_path,
                     const std::string& labels_path = "") {
    std::ofstream nf(nodes_path);
    if (!nf) throw std::runtime_error("save_tag: cannot write " + nodes_path);
    for (NodeId v = 0; v < g.num_nodes; ++v) {
        nf << v << '\t';
        if (g.labels[v] >= 0) nf << g.labels[v];
        nf << '\t' << g.texts[v] << '\n';
    }
    std::ofstream ef(edges_path);
    if (!ef) throw std::runtime_error("save_tag: cannot write " + edges_path);
    for (NodeId v = 0; v < g.num_nodes; ++v)
        for (auto it = g.neighbors_begin(v); it != g.neighbors_end(v); ++it)
            if (g.directed || v < *it) ef << v << '\t' << *it << '\n';
    if (!labels_path.empty()) {
        std::ofstream lf(labels_path);
        if (!lf) throw std::runtime_error("save_tag: cannot write " + labels_path);
        for (const auto& [c, text] : g.label_texts) lf << c << '\t' << text << '\n';
    }
}

// members = target plus up to `cap` first-order neighbors in ascending id
// order; induced edge set restricted to the members
inline EgoGraph extract_ego_graph(const TextAttributedGraph& g, NodeId v,
                                  std::int64_t cap = 100) {
    if (v < 0 || v >= g.num_nodes)
        throw std::out_of_range("extract_ego_graph: node " + std::to_string(v) +
                                " out of range");
    if (cap < 0) throw std::invalid_argument("extract_ego_graph: cap must be >= 0");

    EgoGraph ego;
    ego.target = v;
    ego.size_cap = cap;
    ego.members.push_back(v);
    std::int64_t taken = 0;
    for (auto it = g.neighbors_begin(v); it != g.neighbors_end(v) && taken < cap; ++it) {
        if (*it == v) continue;
        ego.members.push_back(*it);  // CSR columns are already ascending
        ++taken;
    }

    std::map<NodeId, NodeId> local;  // global -> local
    for (std::size_t i = 0; i < ego.members.size(); ++i)
        local[ego.members[i]] = static_cast<NodeId>(i);
    for (std::size_t i = 0; i < ego.members.size(); ++i) {
        NodeId u = ego.members[i];
        for (auto it = g.neighbors_begin(u); it != g.neighbors_end(u); ++it) {
            auto found = local.find(*it);
            if (found != local.end())
                ego.induced_edges.push_back({static_cast<NodeId>(i), found->second});
        }
    }
    return ego;
}

// Synthetic TAG: class-specific vocabularies mixed with shared filler words,
// homophilous edges. Cross-class edges are drawn uniformly from *other*
// classes so the measured same-class edge fraction converges to `homophily`.
inline TextAttributedGraph generate_synthetic_tag(std::int64_t num_classes,
                                                  std::int64_t nodes_per_class,
                                                  std::int64_t vocab_per_class,
                                                  double homophily,
                                                  std::uint64_t seed,
                                                  std::int64_t mean_degree = 8,
                                                  std::int64_t words_per_text = 12) {
    if (num_classes < 1 || nodes_per_class < 1 || vocab_per_class < 1)
        throw std::invalid_argument("generate_synthetic_tag: counts must be >= 1");
    if (homophily < 0.0 || homophily > 1.0)
        throw std::invalid_argument("generate_synthetic_tag: homophily must be in [0,1]");

    static const char* kSyllables[] = {"ba", "de", "ki", "lo", "mu", "na", "po", "ri",
                                       "sa", "tu", "ve", "wo", "xi", "yu", "za", "che"};
    constexpr int kNumSyllables = 16;
    auto make_word = [&](std::uint64_t code) {
        std::string w;
        for (int i = 0; i < 3; ++i) {
            w += kSyllables[code % kNumSyllables];
            code /= kNumSyllables;
        }
        return w;
    };

    Rng rng(seed);
    TextAttributedGraph g;
    g.num_nodes = num_classes * nodes_per_class;
    g.directed = false;

    // disjoint class vocabularies plus a shared filler pool
    std::vector<std::vector<std::string>> class_vocab(static_cast<std::size_t>(num_classes));
    std::set<std::string> used;
    auto fresh_word = [&]() {
        while (true) {
            std::string w = make_word(rng.next_u64());
            if (used.insert(w).second) return w;
        }
    };
    for (auto& vocab : class_vocab)
        for (std::int64_t k = 0; k < vocab_per_class; ++k) vocab.push_back(fresh_word());
    std::vector<std::string> filler;
    for (int k = 0; k < 16; ++k) filler.push_back(fresh_word());

    for (ClassId c = 0; c < num_classes; ++c) {
        const auto& vocab = class_vocab[static_cast<std::size_t>(c)];
        std::string name = vocab[0];
        if (vocab.size() > 1) name += " " + vocab[1];
        g.label_texts[c] = name;
    }

    g.labels.resize(static_cast<std::size_t>(g.num_nodes));
    g.texts.resize(static_cast<std::size_t>(g.num_nodes));
    for (NodeId v = 0; v < g.num_nodes; ++v) {
        ClassId c = v / nodes_per_class;
        g.labels[static_cast<std::size_t>(v)] = c;
        const auto& vocab = class_vocab[static_cast<std::size_t>(c)];
        std::string text;
        for (std::int64_t w = 0; w < words_per_text; ++w) {
            if (!text.empty()) text += ' ';
            if (rng.uniform() < 0.7)
                text += vocab[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(vocab.size())))];
            else
                text += filler[static_cast<std::size_t>(rng.uniform_int(static_cast<std::int64_t>(filler.size())))];
        }
        g.texts[static_cast<std::size_t>(v)] = text;
    }

    std::vector<std::pair<NodeId, NodeId>> arcs;
    std::int64_t edges_per_node = std::max<std::int64_t>(1, mean_degree / 2);
    for (NodeId v = 0; v < g.num_nodes; ++v) {
        ClassId c = v / nodes_per_class;
        for (std::int64_t e = 0; e < edges_per_node; ++e) {
            NodeId u;
            bool same_class = num_classes == 1 || rng.uniform() < homophily;
            if (same_class) {
                if (nodes_per_class == 1) continue;  // no distinct same-class partner
                do {
                    u = c * nodes_per_class + rng.uniform_int(nodes_per_class);
                } while (u == v);
            } else {
                do {
                    u = rng.uniform_int(g.num_nodes);
                } while (u / nodes_per_class == c);
            }
            arcs.push_back({v, u});
            arcs.push_back({u, v});
        }
    }
    detail::build_csr(g, std::move(arcs));
    g.validate();
    return g;
}

// fraction of undirected edges whose endpoints share a label
inline double measured_edge_homophily(const TextAttributedGraph& g) {
    std::int64_t same = 0, total = 0;
    for (NodeId v = 0; v < g.num_nodes; ++v)
        for (auto it = g.neighbors_begin(v); it != g.neighbors_end(v); ++it)
            if (v < *it) {
                ++total;
                if (g.labels[v] >= 0 && g.labels[v] == g.labels[*it]) ++same;
            }
    return total == 0 ? 0.0 : static_cast<double>(same) / static_cast<double>(total);
}

}  // namespace p2tag
