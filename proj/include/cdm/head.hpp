#pragma once

#include <cstdint>
#include <vector>

#include "cdm/graph.hpp"
#include "cdm/optim.hpp"
#include "cdm/tensor.hpp"

namespace cdm {

/// Assignment head: one 512-wide rectified hidden layer, a linear layer to
/// k_max columns and a row softmax. The GCN variant prepends one graph
/// convolution of the same width.
struct HeadConfig {
    int hidden = 512;
    int k_max = 16;
    int max_steps = 2000;
    int patience = 50;       // plateau: stop after this many steps with < min_delta improvement
    double min_delta = 1e-5;
    double lr = 0.5;
    double min_frac = 0.02;  // harden() prunes clusters below max(2, min_frac * n) frames

    void validate() const;
};

enum class HeadArch { mlp, gcn };

ParamStore init_mlp_head(int in_dim, const HeadConfig& config, uint64_t seed);
ParamStore init_gcn_head(int in_dim, const HeadConfig& config, uint64_t seed);

/// Differentiable assignment paths.
ad::Tensor mlp_assign(const BoundParams& params, const ad::Tensor& features);
ad::Tensor gcn_assign(const BoundParams& params, const CsrMatrix& norm_adj, const ad::Tensor& x);

/// Value-only convenience overloads.
Matrix mlp_assign(ParamStore& params, const Matrix& features);
Matrix gcn_assign(ParamStore& params, const CsrMatrix& norm_adj, const Matrix& x);

/// Collapse-regularized modularity loss:
///   -Tr(S^T B S)/2m + (sqrt(k)/n) * ||colsum(S)||_2 - 1
/// with k = the column count of S. The modularity term goes through the
/// sparse trace decomposition, never a dense B.
ad::Tensor dmon_loss(const ad::Tensor& assignments, const SimilarityGraph& g);
double dmon_loss_value(const Matrix& assignments, const SimilarityGraph& g);

struct TrainHeadResult {
    ParamStore params;
    Matrix assignments;          // final soft S for this graph (per-mixture mode)
    std::vector<double> losses;
    int steps_run = 0;
};

/// Test-time optimization of the head on a single graph until the loss
/// plateaus. features drive the mlp arch; the gcn arch consumes
/// (normalized adjacency, features). Deterministic under seed.
TrainHeadResult train_head_per_mixture(const Matrix& features, const SimilarityGraph& g,
                                       const HeadConfig& config, HeadArch arch, uint64_t seed);

/// Amortized mode: one parameter set optimized round-robin across a corpus
/// of graphs; inference is then a pure forward pass (use the assign
/// overloads on the returned params).
ParamStore train_head_amortized(const std::vector<Matrix>& features,
                                const std::vector<SimilarityGraph>& graphs,
                                const HeadConfig& config, HeadArch arch, uint64_t seed,
                                int total_steps);

struct HardenResult {
    Partition partition;                 // compact labels in [0, k_eff)
    std::vector<int> surviving_columns;  // original S columns, ascending
};

/// Row argmax (ties to the lowest column), then dissolves clusters holding
/// fewer than max(2, min_frac * n) frames; their rows move to the next-best
/// surviving column. This is what lets the pipeline run without a known
/// speaker count. Throws DegenerateGraphError if nothing survives.
HardenResult harden(const Matrix& assignments, double min_frac);

}  // namespace cdm
