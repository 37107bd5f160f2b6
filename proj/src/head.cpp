#include "cdm/head.hpp"

#include <algorithm>
#include <cmath>

namespace cdm {

namespace {

std::vector<float> glorot_uniform(size_t count, size_t fan_in, size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<float> out(count);
    for (auto& x : out) x = static_cast<float>(rng.uniform(-limit, limit));
    return out;
}

void add_mlp_params(ParamStore& store, int in_dim, const HeadConfig& config, Rng& rng) {
    store.add("head.fc1.w", {in_dim, config.hidden},
              glorot_uniform(static_cast<size_t>(in_dim) * config.hidden, in_dim, config.hidden,
                             rng));
    store.add("head.fc1.b", {config.hidden}, std::vector<float>(config.hidden, 0.0f));
    store.add("head.fc2.w", {config.hidden, config.k_max},
              glorot_uniform(static_cast<size_t>(config.hidden) * config.k_max, config.hidden,
                             config.k_max, rng));
    store.add("head.fc2.b", {config.k_max}, std::vector<float>(config.k_max, 0.0f));
}

ad::Tensor mlp_tail(const BoundParams& params, const ad::Tensor& features) {
    ad::Tensor h = ad::relu(
        ad::add_row_bias(ad::matmul(features, params["head.fc1.w"]), params["head.fc1.b"]));
    ad::Tensor logits =
        ad::add_row_bias(ad::matmul(h, params["head.fc2.w"]), params["head.fc2.b"]);
    return ad::softmax_rows(logits);
}

}  // namespace

void HeadConfig::validate() const {
    if (k_max < 2) throw ArgumentError("head: k_max must be >= 2");
    if (hidden < k_max) throw ArgumentError("head: hidden width must be >= k_max");
    if (max_steps < 1 || patience < 1) throw ArgumentError("head: bad step limits");
    if (lr <= 0.0 || min_delta < 0.0) throw ArgumentError("head: bad optimizer settings");
    if (min_frac < 0.0 || min_frac >= 1.0) throw ArgumentError("head: min_frac outside [0, 1)");
}

ParamStore init_mlp_head(int in_dim, const HeadConfig& config, uint64_t seed) {
    config.validate();
    ParamStore store;
    Rng rng(derive_seed(seed, "head-init"));
    add_mlp_params(store, in_dim, config, rng);
    return store;
}

ParamStore init_gcn_head(int in_dim, const HeadConfig& config, uint64_t seed) {
    config.validate();
    ParamStore store;
    Rng rng(derive_seed(seed, "gcn-head-init"));
    store.add("gcn.w", {in_dim, config.hidden},
              glorot_uniform(static_cast<size_t>(in_dim) * config.hidden, in_dim, config.hidden,
                             rng));
    store.add("gcn.b", {config.hidden}, std::vector<float>(config.hidden, 0.0f));
    add_mlp_params(store, config.hidden, config, rng);
    return store;
}

ad::Tensor mlp_assign(const BoundParams& params, const ad::Tensor& features) {
    return mlp_tail(params, features);
}

ad::Tensor gcn_assign(const BoundParams& params, const CsrMatrix& norm_adj, const ad::Tensor& x) {
    ad::Tensor z = ad::relu(ad::add_row_bias(ad::spmm(norm_adj, ad::matmul(x, params["gcn.w"])),
                                             params["gcn.b"]));
    return mlp_tail(params, z);
}

Matrix mlp_assign(ParamStore& params, const Matrix& features) {
    BoundParams bound = bind(params, false);
    return mlp_assign(bound, ad::Tensor::from_matrix(features)).to_matrix();
}

Matrix gcn_assign(ParamStore& params, const CsrMatrix& norm_adj, const Matrix& x) {
    BoundParams bound = bind(params, false);
    return gcn_assign(bound, norm_adj, ad::Tensor::from_matrix(x)).to_matrix();
}

namespace {

ad::Tensor dmon_loss_impl(const ad::Tensor& s, const CsrMatrix& adj,
                          const std::vector<double>& degrees, size_t m) {
    if (m == 0) throw DegenerateGraphError("dmon_loss: graph has no edges");
    const int n = s.dim(0);
    const int k = s.dim(1);
    const ad::Tensor modularity = ad::scale(
        ad::trace_quadform(s, adj, degrees, static_cast<double>(m)),
        -1.0 / (2.0 * static_cast<double>(m)));
    const ad::Tensor collapse = ad::add_scalar(
        ad::scale(ad::frobenius_norm(ad::col_sums(s)), std::sqrt(static_cast<double>(k)) / n),
        -1.0);
    return ad::add(modularity, collapse);
}

}  // namespace

ad::Tensor dmon_loss(const ad::Tensor& assignments, const SimilarityGraph& g) {
    if (assignments.rank() != 2 || assignments.dim(0) != g.n) {
        throw ShapeError("dmon_loss: assignment shape mismatch");
    }
    return dmon_loss_impl(assignments, g.adjacency(), g.degrees, g.m);
}

double dmon_loss_value(const Matrix& assignments, const SimilarityGraph& g) {
    return dmon_loss(ad::Tensor::from_matrix(assignments), g).scalar_value();
}

namespace {

struct HeadTrainer {
    const HeadConfig& config;
    HeadArch arch;
    CsrMatrix norm_adj;  // gcn only

    ad::Tensor assign(const BoundParams& bound, const ad::Tensor& feats) const {
        return arch == HeadArch::mlp ? mlp_assign(bound, feats)
                                     : gcn_assign(bound, norm_adj, feats);
    }
};

}  // namespace

TrainHeadResult train_head_per_mixture(const Matrix& features, const SimilarityGraph& g,
                                       const HeadConfig& config, HeadArch arch, uint64_t seed) {
    config.validate();
    if (features.rows != g.n) throw ShapeError("train_head: features/graph size mismatch");

    TrainHeadResult result;
    result.params = arch == HeadArch::mlp ? init_mlp_head(features.cols, config, seed)
                                          : init_gcn_head(features.cols, config, seed);
    HeadTrainer trainer{config, arch, {}};
    if (arch == HeadArch::gcn) trainer.norm_adj = normalized_adjacency(g);

    const CsrMatrix adj = g.adjacency();
    const ad::Tensor feats = ad::Tensor::from_matrix(features);
    double best = 1e300;
    int stall = 0;
    for (int step = 0; step < config.max_steps; ++step) {
        BoundParams bound = bind(result.params);
        const ad::Tensor s = trainer.assign(bound, feats);
        const ad::Tensor loss = dmon_loss_impl(s, adj, g.degrees, g.m);
        const double loss_v = loss.scalar_value();
        if (!std::isfinite(loss_v)) {
            throw StateError("train_head diverged at step " + std::to_string(step));
        }
        ad::backward(loss);
        sgd_step(result.params, bound, config.lr);
        result.losses.push_back(loss_v);
        ++result.steps_run;
        if (best - loss_v >= config.min_delta) {
            best = loss_v;
            stall = 0;
        } else if (++stall >= config.patience) {
            break;
        }
    }

    BoundParams bound = bind(result.params, false);
    result.assignments = trainer.assign(bound, feats).to_matrix();
    return result;
}

ParamStore train_head_amortized(const std::vector<Matrix>& features,
                                const std::vector<SimilarityGraph>& graphs,
                                const HeadConfig& config, HeadArch arch, uint64_t seed,
                                int total_steps) {
    config.validate();
    if (features.empty() || features.size() != graphs.size()) {
        throw ArgumentError("train_head_amortized: features/graphs mismatch");
    }
    const int in_dim = features[0].cols;
    for (size_t i = 0; i < features.size(); ++i) {
        if (features[i].cols != in_dim) throw ShapeError("amortized head: feature width varies");
        if (features[i].rows != graphs[i].n) throw ShapeError("amortized head: size mismatch");
    }

    ParamStore params = arch == HeadArch::mlp ? init_mlp_head(in_dim, config, seed)
                                              : init_gcn_head(in_dim, config, seed);
    std::vector<CsrMatrix> adjs, norm_adjs;
    for (const auto& g : graphs) {
        adjs.push_back(g.adjacency());
        if (arch == HeadArch::gcn) norm_adjs.push_back(normalized_adjacency(g));
    }
    for (int step = 0; step < total_steps; ++step) {
        const size_t which = static_cast<size_t>(step) % graphs.size();
        HeadTrainer trainer{config, arch,
                            arch == HeadArch::gcn ? norm_adjs[which] : CsrMatrix{}};
        BoundParams bound = bind(params);
        const ad::Tensor feats = ad::Tensor::from_matrix(features[which]);
        const ad::Tensor s = trainer.assign(bound, feats);
        const ad::Tensor loss =
            dmon_loss_impl(s, adjs[which], graphs[which].degrees, graphs[which].m);
        if (!std::isfinite(loss.scalar_value())) {
            throw StateError("amortized head diverged at step " + std::to_string(step));
        }
        ad::backward(loss);
        sgd_step(params, bound, config.lr);
    }
    return params;
}

HardenResult harden(const Matrix& assignments, double min_frac) {
    const int n = assignments.rows;
    const int k = assignments.cols;
    if (n < 1 || k < 1) throw ShapeError("harden: empty assignment matrix");

    auto argmax_over = [&](int row, const std::vector<char>& allowed) {
        const double* s = assignments.row(row);
        int best = -1;
        for (int c = 0; c < k; ++c) {
            if (!allowed[c]) continue;
            if (best < 0 || s[c] > s[best]) best = c;  // ties keep the lowest column
        }
        return best;
    };

    const std::vector<char> all(k, 1);
    std::vector<int> raw(n);
    std::vector<size_t> counts(k, 0);
    for (int i = 0; i < n; ++i) {
        raw[i] = argmax_over(i, all);
        ++counts[raw[i]];
    }

    const double threshold = std::max(2.0, min_frac * n);
    std::vector<char> survives(k, 0);
    HardenResult result;
    for (int c = 0; c < k; ++c) {
        if (static_cast<double>(counts[c]) >= threshold) {
            survives[c] = 1;
            result.surviving_columns.push_back(c);
        }
    }
    if (result.surviving_columns.empty()) {
        throw DegenerateGraphError("harden: no cluster holds enough frames");
    }

    std::vector<int> compact(k, -1);
    for (size_t idx = 0; idx < result.surviving_columns.size(); ++idx) {
        compact[result.surviving_columns[idx]] = static_cast<int>(idx);
    }
    result.partition.k = static_cast<int>(result.surviving_columns.size());
    result.partition.labels.resize(n);
    for (int i = 0; i < n; ++i) {
        const int col = survives[raw[i]] ? raw[i] : argmax_over(i, survives);
        result.partition.labels[i] = compact[col];
    }
    return result;
}

}  // namespace cdm
