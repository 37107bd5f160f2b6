#include "cdm/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace cdm {

namespace {

void finalize(SimilarityGraph& g) {
    std::sort(g.edges.begin(), g.edges.end());
    g.neighbors.assign(g.n, {});
    for (const auto& [i, j] : g.edges) {
        g.neighbors[i].push_back(j);
        g.neighbors[j].push_back(i);
    }
    for (auto& nb : g.neighbors) std::sort(nb.begin(), nb.end());
    g.degrees.assign(g.n, 0.0);
    for (int i = 0; i < g.n; ++i) g.degrees[i] = static_cast<double>(g.neighbors[i].size());
    g.m = g.edges.size();
}

bool has_edge(const SimilarityGraph& g, int i, int j) {
    const auto& nb = g.neighbors[i];
    return std::binary_search(nb.begin(), nb.end(), j);
}

}  // namespace

CsrMatrix SimilarityGraph::adjacency() const {
    CsrMatrix a;
    a.n = n;
    a.row_ptr.assign(n + 1, 0);
    for (int i = 0; i < n; ++i) {
        a.row_ptr[i + 1] = a.row_ptr[i] + static_cast<int>(neighbors[i].size());
    }
    a.col.reserve(2 * m);
    a.val.reserve(2 * m);
    for (int i = 0; i < n; ++i) {
        for (int j : neighbors[i]) {
            a.col.push_back(j);
            a.val.push_back(1.0);
        }
    }
    return a;
}

SimilarityGraph graph_from_edges(int n, std::vector<std::pair<int, int>> edges, double theta) {
    SimilarityGraph g;
    g.n = n;
    g.theta = theta;
    for (auto& [i, j] : edges) {
        if (i == j) throw ArgumentError("graph_from_edges: self-loop");
        if (i < 0 || j < 0 || i >= n || j >= n) throw ArgumentError("graph_from_edges: range");
        if (i > j) std::swap(i, j);
    }
    std::sort(edges.begin(), edges.end());
    edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
    g.edges = std::move(edges);
    finalize(g);
    return g;
}

SimilarityGraph build_graph(const Matrix& embeddings, double theta) {
    if (embeddings.rows < 2) throw ArgumentError("build_graph: need at least two rows");

    SimilarityGraph g;
    g.n = embeddings.rows;
    g.theta = theta;
    const int d = embeddings.cols;
    for (int i = 0; i < g.n; ++i) {
        const double* a = embeddings.row(i);
        for (int j = i + 1; j < g.n; ++j) {
            const double* b = embeddings.row(j);
            double dot = 0.0;
            for (int c = 0; c < d; ++c) dot += a[c] * b[c];
            if (dot >= theta) g.edges.emplace_back(i, j);  // tie keeps the edge
        }
    }
    finalize(g);
    if (g.m == 0) {
        throw DegenerateGraphError("similarity graph has no edges at theta=" +
                                   std::to_string(theta));
    }
    return g;
}

CsrMatrix normalized_adjacency(const SimilarityGraph& g) {
    if (g.m == 0) throw DegenerateGraphError("normalized_adjacency: graph has no edges");
    CsrMatrix a;
    a.n = g.n;
    a.row_ptr.assign(g.n + 1, 0);
    for (int i = 0; i < g.n; ++i) {
        a.row_ptr[i + 1] = a.row_ptr[i] + static_cast<int>(g.neighbors[i].size()) + 1;
    }
    for (int i = 0; i < g.n; ++i) {
        const double di = g.degrees[i] + 1.0;
        bool self_done = false;
        auto push = [&](int j, double v) {
            a.col.push_back(j);
            a.val.push_back(v);
        };
        for (int j : g.neighbors[i]) {
            if (!self_done && j > i) {
                push(i, 1.0 / di);
                self_done = true;
            }
            push(j, 1.0 / std::sqrt(di * (g.degrees[j] + 1.0)));
        }
        if (!self_done) push(i, 1.0 / di);
    }
    return a;
}

double modularity_oracle(const SimilarityGraph& g, const Partition& p) {
    if (g.m == 0) throw DegenerateGraphError("modularity undefined for edgeless graph");
    if (static_cast<int>(p.labels.size()) != g.n) throw ShapeError("partition size mismatch");
    const double two_m = 2.0 * static_cast<double>(g.m);
    double q = 0.0;
    for (int i = 0; i < g.n; ++i) {
        for (int j = 0; j < g.n; ++j) {
            if (p.labels[i] != p.labels[j]) continue;
            const double a_ij = (i != j && has_edge(g, i, j)) ? 1.0 : 0.0;
            q += a_ij - g.degrees[i] * g.degrees[j] / two_m;
        }
    }
    return q / two_m;
}

namespace {

// Internal and boundary edge counts for a node subset.
void subset_edge_counts(const SimilarityGraph& g, const std::vector<int>& node_set,
                        size_t* internal, size_t* boundary, double* degree_sum) {
    std::vector<char> in_set(g.n, 0);
    for (int v : node_set) {
        if (v < 0 || v >= g.n) throw ArgumentError("node index out of range");
        in_set[v] = 1;
    }
    size_t ms = 0, cs = 0;
    double ds = 0.0;
    for (const auto& [i, j] : g.edges) {
        ms += (in_set[i] && in_set[j]) ? 1 : 0;
        cs += (in_set[i] != in_set[j]) ? 1 : 0;
    }
    for (int v : node_set) ds += g.degrees[v];
    *internal = ms;
    *boundary = cs;
    *degree_sum = ds;
}

}  // namespace

double conductance(const SimilarityGraph& g, const std::vector<int>& node_set) {
    if (node_set.empty() || static_cast<int>(node_set.size()) >= g.n) {
        throw ArgumentError("conductance: node set must be a nonempty proper subset");
    }
    size_t ms = 0, cs = 0;
    double ds = 0.0;
    subset_edge_counts(g, node_set, &ms, &cs, &ds);
    const double denom = 2.0 * static_cast<double>(ms) + static_cast<double>(cs);
    if (denom == 0.0) return 0.0;  // all-isolated subset
    return static_cast<double>(cs) / denom;
}

double modularity_metric(const SimilarityGraph& g, const std::vector<int>& node_set) {
    if (node_set.empty()) throw ArgumentError("modularity_metric: empty node set");
    if (g.m == 0) throw DegenerateGraphError("modularity_metric: graph has no edges");
    size_t ms = 0, cs = 0;
    double ds = 0.0;
    subset_edge_counts(g, node_set, &ms, &cs, &ds);
    const double expected = ds * ds / (4.0 * static_cast<double>(g.m));
    return (static_cast<double>(ms) - expected) / 4.0;
}

PartitionScores partition_scores(const SimilarityGraph& g, const Partition& p) {
    if (static_cast<int>(p.labels.size()) != g.n) throw ShapeError("partition size mismatch");

    std::vector<std::vector<int>> clusters(p.k);
    for (int i = 0; i < g.n; ++i) clusters[p.labels[i]].push_back(i);

    PartitionScores scores;
    double weighted_c = 0.0;
    size_t weight_total = 0;
    double communitywise = 0.0;
    for (const auto& cluster : clusters) {
        if (cluster.empty()) continue;
        communitywise += modularity_metric(g, cluster);
        if (static_cast<int>(cluster.size()) >= g.n) continue;  // single-cluster partition
        size_t ms = 0, cs = 0;
        double ds = 0.0;
        subset_edge_counts(g, cluster, &ms, &cs, &ds);
        if (2 * ms + cs == 0) continue;  // isolated nodes carry no conductance evidence
        weighted_c += cluster.size() * (static_cast<double>(cs) / (2.0 * ms + cs));
        weight_total += cluster.size();
    }
    scores.conductance_c = weight_total > 0 ? 100.0 * weighted_c / weight_total : 0.0;
    scores.modularity_q = 100.0 * modularity_oracle(g, p);
    scores.modularity_communitywise = 100.0 * communitywise;
    return scores;
}

void save_graph(const std::string& path, const SimilarityGraph& g) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open for writing: " + path);
    f.write("CDG1", 4);
    const auto n = static_cast<uint64_t>(g.n);
    const auto m = static_cast<uint64_t>(g.m);
    f.write(reinterpret_cast<const char*>(&n), 8);
    f.write(reinterpret_cast<const char*>(&m), 8);
    for (const auto& [i, j] : g.edges) {
        const auto a = static_cast<uint32_t>(i);
        const auto b = static_cast<uint32_t>(j);
        f.write(reinterpret_cast<const char*>(&a), 4);
        f.write(reinterpret_cast<const char*>(&b), 4);
    }
    if (!f) throw FormatError("short write: " + path);
}

SimilarityGraph load_graph(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError("cannot open graph: " + path);
    char magic[4];
    f.read(magic, 4);
    if (!f || std::memcmp(magic, "CDG1", 4) != 0) throw FormatError("bad graph magic: " + path);
    uint64_t n = 0, m = 0;
    f.read(reinterpret_cast<char*>(&n), 8);
    f.read(reinterpret_cast<char*>(&m), 8);
    if (!f) throw FormatError("truncated graph header: " + path);

    SimilarityGraph g;
    g.n = static_cast<int>(n);
    g.theta = std::nan("");  // carried in sidecar metadata
    g.edges.reserve(m);
    for (uint64_t e = 0; e < m; ++e) {
        uint32_t a = 0, b = 0;
        f.read(reinterpret_cast<char*>(&a), 4);
        f.read(reinterpret_cast<char*>(&b), 4);
        if (!f) throw FormatError("truncated edge list: " + path);
        g.edges.emplace_back(static_cast<int>(a), static_cast<int>(b));
    }
    finalize(g);
    return g;
}

}  // namespace cdm
