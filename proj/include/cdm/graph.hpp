#pragma once

#include <string>
#include <utility>
#include <vector>

#include "cdm/common.hpp"
#include "cdm/sparse.hpp"

namespace cdm {

/// Thresholded frame-similarity graph: undirected, unweighted, no
/// self-loops. Neighbor lists are sorted, degrees and edge count kept in
/// sync. The modularity matrix A - d d^T / 2m is never materialized; the
/// (adjacency, degrees, m) triple represents it implicitly.
struct SimilarityGraph {
    int n = 0;
    std::vector<std::pair<int, int>> edges;     // sorted, i < j
    std::vector<std::vector<int>> neighbors;    // sorted per node
    std::vector<double> degrees;
    size_t m = 0;
    double theta = 0.0;

    /// 0/1 adjacency in CSR with both edge directions stored.
    CsrMatrix adjacency() const;
};

/// Hard node labels in [0, k). Empty clusters are allowed.
struct Partition {
    std::vector<int> labels;
    int k = 0;
};

/// Connects i != j whenever rows i and j of the (unit-norm) embedding
/// matrix have inner product >= theta. Throws DegenerateGraphError if no
/// edge survives (the null model is undefined at 2m = 0).
SimilarityGraph build_graph(const Matrix& embeddings, double theta);

/// Assembles a graph from an explicit undirected edge list. Self-loops are
/// rejected; duplicates collapse to one edge.
SimilarityGraph graph_from_edges(int n, std::vector<std::pair<int, int>> edges,
                                 double theta = 0.0);

/// Renormalized symmetric adjacency for the GCN path: self-loops are added
/// first, entries are 1/sqrt((d_i + 1)(d_j + 1)).
CsrMatrix normalized_adjacency(const SimilarityGraph& g);

/// Exact double-sum modularity: (1/2m) sum_ij (A_ij - d_i d_j / 2m)
/// delta(g_i, g_j). Deliberately written as the O(n^2) literal definition;
/// this is the reference the fast trace form is checked against.
double modularity_oracle(const SimilarityGraph& g, const Partition& p);

/// c_s / (2 m_s + c_s) for a nonempty proper node subset. A subset with no
/// incident edges at all scores 0.
double conductance(const SimilarityGraph& g, const std::vector<int>& node_set);

/// Per-community modularity contribution (m_s - E[m_s]) / 4 with the
/// configuration-model expectation E[m_s] = d_S^2 / 4m.
double modularity_metric(const SimilarityGraph& g, const std::vector<int>& node_set);

struct PartitionScores {
    double conductance_c = 0.0;        // size-weighted mean conductance x 100
    double modularity_q = 0.0;         // Newman modularity x 100
    double modularity_communitywise = 0.0;  // sum of per-community contributions x 100
};

PartitionScores partition_scores(const SimilarityGraph& g, const Partition& p);

// Binary persistence: magic "CDG1", u64 n, u64 m, then m sorted u32 pairs.
// theta travels in the sidecar metadata, not in this container.
void save_graph(const std::string& path, const SimilarityGraph& g);
SimilarityGraph load_graph(const std::string& path);

}  // namespace cdm
