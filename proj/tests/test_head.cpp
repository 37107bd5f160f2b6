#include <doctest.h>

#include <cmath>

#include "cdm/head.hpp"
#include "testutil.hpp"

using namespace cdm;

namespace {

HeadConfig small_head() {
    HeadConfig c;
    c.hidden = 64;
    c.k_max = 16;
    c.max_steps = 500;
    c.lr = 0.05;
    return c;
}

// Two tight embedding clusters in orthogonal planes; thresholding at 0.5
// yields two disjoint cliques.
Matrix clique_embeddings(int per_cluster, uint64_t seed) {
    Rng rng(seed);
    Matrix m(2 * per_cluster, 8);
    for (int i = 0; i < 2 * per_cluster; ++i) {
        const int axis = i < per_cluster ? 0 : 4;
        std::vector<double> v(8, 0.0);
        v[axis] = 1.0;
        for (int c = 0; c < 8; ++c) v[c] += 0.05 * rng.normal();
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        for (int c = 0; c < 8; ++c) m.at(i, c) = v[c] / norm;
    }
    return m;
}

}  // namespace

TEST_CASE("mlp_assign: uniform at zero weights, row-stochastic, row-wise") {
    HeadConfig config = small_head();
    ParamStore params = init_mlp_head(8, config, 3);

    SUBCASE("zero weights give uniform assignments") {
        for (auto& e : params.entries()) std::fill(e.value.begin(), e.value.end(), 0.0f);
        Rng rng(4);
        const Matrix s = mlp_assign(params, cdmtest::random_matrix(5, 8, rng));
        for (double v : s.v) CHECK(v == doctest::Approx(1.0 / 16.0).epsilon(1e-12));
    }

    SUBCASE("rows sum to one and permute with the input") {
        Rng rng(5);
        const Matrix f = cdmtest::random_matrix(6, 8, rng);
        const Matrix s = mlp_assign(params, f);
        REQUIRE(s.rows == 6);
        REQUIRE(s.cols == 16);
        for (int r = 0; r < s.rows; ++r) {
            double total = 0.0;
            for (int c = 0; c < s.cols; ++c) {
                total += s.at(r, c);
                CHECK(s.at(r, c) > 0.0);
            }
            CHECK(std::abs(total - 1.0) <= 1e-9);
        }

        Matrix reversed(6, 8);
        for (int r = 0; r < 6; ++r) {
            for (int c = 0; c < 8; ++c) reversed.at(r, c) = f.at(5 - r, c);
        }
        const Matrix sr = mlp_assign(params, reversed);
        for (int r = 0; r < 6; ++r) {
            for (int c = 0; c < 16; ++c) {
                CHECK(sr.at(r, c) == doctest::Approx(s.at(5 - r, c)).epsilon(1e-12));
            }
        }
    }
}

TEST_CASE("gcn_assign degenerates to the mlp path under an identity adjacency") {
    HeadConfig config = small_head();
    ParamStore params = init_gcn_head(8, config, 7);

    CsrMatrix identity;
    identity.n = 5;
    identity.row_ptr = {0, 1, 2, 3, 4, 5};
    identity.col = {0, 1, 2, 3, 4};
    identity.val.assign(5, 1.0);

    Rng rng(8);
    const Matrix x = cdmtest::random_matrix(5, 8, rng);
    const Matrix s = gcn_assign(params, identity, x);

    // Reference: relu(x W + b) through the mlp tail with the same weights.
    BoundParams bound = bind(params, false);
    const ad::Tensor z = ad::relu(ad::add_row_bias(
        ad::matmul(ad::Tensor::from_matrix(x), bound["gcn.w"]), bound["gcn.b"]));
    const Matrix expected = mlp_assign(bound, z).to_matrix();
    for (size_t i = 0; i < s.v.size(); ++i) {
        CHECK(s.v[i] == doctest::Approx(expected.v[i]).epsilon(1e-12));
    }

    SUBCASE("zero weights still give uniform assignments") {
        for (auto& e : params.entries()) std::fill(e.value.begin(), e.value.end(), 0.0f);
        const Matrix uniform = gcn_assign(params, identity, x);
        for (double v : uniform.v) CHECK(v == doctest::Approx(1.0 / 16.0).epsilon(1e-12));
    }
}

TEST_CASE("gcn_assign is permutation equivariant") {
    HeadConfig config = small_head();
    ParamStore params = init_gcn_head(4, config, 11);
    const auto g = cdmtest::bridged_triangles();
    const CsrMatrix adj = normalized_adjacency(g);
    Rng rng(12);
    const Matrix x = cdmtest::random_matrix(6, 4, rng);
    const Matrix s = gcn_assign(params, adj, x);

    // Reverse the node order and conjugate the graph.
    std::vector<std::pair<int, int>> redges;
    for (auto [i, j] : g.edges) redges.emplace_back(5 - i, 5 - j);
    const auto rg = graph_from_edges(6, redges);
    Matrix rx(6, 4);
    for (int r = 0; r < 6; ++r) {
        for (int c = 0; c < 4; ++c) rx.at(r, c) = x.at(5 - r, c);
    }
    const Matrix rs = gcn_assign(params, normalized_adjacency(rg), rx);
    for (int r = 0; r < 6; ++r) {
        for (int c = 0; c < 16; ++c) {
            CHECK(rs.at(r, c) == doctest::Approx(s.at(5 - r, c)).epsilon(1e-9));
        }
    }
}

TEST_CASE("dmon loss closed forms") {
    const auto g = cdmtest::two_triangles();

    SUBCASE("uniform assignments zero both terms") {
        Matrix s(6, 16);
        for (auto& v : s.v) v = 1.0 / 16.0;
        CHECK(dmon_loss_value(s, g) == doctest::Approx(0.0).epsilon(1e-12));
    }
    SUBCASE("single-cluster collapse costs sqrt(k) - 1") {
        const Matrix s = cdmtest::one_hot(std::vector<int>(6, 0), 16);
        // Modularity term vanishes for the all-in-one partition.
        CHECK(dmon_loss_value(s, g) == doctest::Approx(3.0).epsilon(1e-12));
    }
    SUBCASE("correct two-cluster assignment embedded in k = 16") {
        const Matrix s = cdmtest::one_hot({0, 0, 0, 1, 1, 1}, 16);
        const double collapse = (4.0 / 6.0) * std::sqrt(18.0) - 1.0;
        CHECK(dmon_loss_value(s, g) == doctest::Approx(-0.5 + collapse).epsilon(1e-9));
        CHECK(dmon_loss_value(s, g) == doctest::Approx(1.3284).epsilon(1e-3));
        // Against the dense materialized-B oracle.
        const double dense_mod =
            -cdmtest::dense_trace_quadform(s, g) / (2.0 * static_cast<double>(g.m));
        CHECK(dmon_loss_value(s, g) == doctest::Approx(dense_mod + collapse).epsilon(1e-9));
    }
}

TEST_CASE("dmon loss properties") {
    Rng rng(63);

    SUBCASE("sparse trace equals the dense route on random graphs") {
        for (int trial = 0; trial < 20; ++trial) {
            const int n = 5 + static_cast<int>(rng.below(40));
            const auto g = cdmtest::random_graph(n, 0.3, rng);
            const Matrix s = cdmtest::random_row_stochastic(n, 8, rng);
            const double fast = dmon_loss_value(s, g);
            const double collapse =
                [&] {
                    std::vector<double> col(8, 0.0);
                    for (int i = 0; i < n; ++i) {
                        for (int c = 0; c < 8; ++c) col[c] += s.at(i, c);
                    }
                    double sq = 0.0;
                    for (double v : col) sq += v * v;
                    return std::sqrt(8.0) / n * std::sqrt(sq) - 1.0;
                }();
            const double dense =
                -cdmtest::dense_trace_quadform(s, g) / (2.0 * static_cast<double>(g.m)) +
                collapse;
            CHECK(std::abs(fast - dense) <= 1e-9);
        }
    }
    SUBCASE("collapse term stays inside [0, sqrt(k) - 1]") {
        const auto g = cdmtest::two_triangles();
        for (int trial = 0; trial < 30; ++trial) {
            const Matrix s = cdmtest::random_row_stochastic(6, 16, rng);
            // Isolate the collapse term by subtracting the modularity part.
            const double mod =
                -cdmtest::dense_trace_quadform(s, g) / (2.0 * static_cast<double>(g.m));
            const double collapse = dmon_loss_value(s, g) - mod;
            CHECK(collapse >= -1e-9);
            CHECK(collapse <= std::sqrt(16.0) - 1.0 + 1e-9);
        }
    }
    SUBCASE("loss is invariant under cluster column permutation") {
        const auto g = cdmtest::bridged_triangles();
        const Matrix s = cdmtest::random_row_stochastic(6, 5, rng);
        Matrix p(6, 5);
        const int perm[5] = {3, 0, 4, 1, 2};
        for (int r = 0; r < 6; ++r) {
            for (int c = 0; c < 5; ++c) p.at(r, perm[c]) = s.at(r, c);
        }
        CHECK(dmon_loss_value(p, g) == doctest::Approx(dmon_loss_value(s, g)).epsilon(1e-12));
    }
    SUBCASE("gradient matches finite differences through the head") {
        const auto g = cdmtest::random_graph(10, 0.4, rng);
        const auto report = ad::grad_check(
            [&g](const std::vector<ad::Tensor>& in) {
                return dmon_loss(ad::softmax_rows(in[0]), g);
            },
            {ad::Tensor::from_data({10, 6}, [&] {
                 std::vector<double> d(60);
                 for (auto& x : d) x = rng.normal();
                 return d;
             }())},
            1e-5);
        CHECK(report.max_rel_err <= 1e-4);
    }
}

TEST_CASE("per-mixture head training separates two cliques") {
    const Matrix emb = clique_embeddings(10, 99);
    const auto g = build_graph(emb, 0.5);
    REQUIRE(g.m == 90);  // two disjoint 10-cliques

    HeadConfig config;  // stock head: 512 hidden, lr 0.5
    config.max_steps = 500;
    const TrainHeadResult result = train_head_per_mixture(emb, g, config, HeadArch::mlp, 1);
    CHECK(result.steps_run <= 500);
    const HardenResult hard = harden(result.assignments, config.min_frac);
    CHECK(hard.partition.k == 2);
    for (int i = 1; i < 10; ++i) CHECK(hard.partition.labels[i] == hard.partition.labels[0]);
    for (int i = 11; i < 20; ++i) CHECK(hard.partition.labels[i] == hard.partition.labels[10]);
    CHECK(hard.partition.labels[0] != hard.partition.labels[10]);
    CHECK(modularity_oracle(g, hard.partition) >= 0.49);

    SUBCASE("same seed reproduces the loss trace") {
        const TrainHeadResult again = train_head_per_mixture(emb, g, config, HeadArch::mlp, 1);
        CHECK(again.losses == result.losses);
    }
}

TEST_CASE("head training on a structureless graph finds no community signal") {
    Rng rng(123);
    const auto g = cdmtest::random_graph(40, 0.5, rng);
    const Matrix features = cdmtest::random_matrix(40, 8, rng);
    HeadConfig config;
    config.max_steps = 500;
    const TrainHeadResult result = train_head_per_mixture(features, g, config, HeadArch::mlp, 2);
    const HardenResult hard = harden(result.assignments, config.min_frac);
    CHECK(std::abs(modularity_oracle(g, hard.partition)) <= 0.05);
}

TEST_CASE("harden prunes small clusters and keeps determinism") {
    SUBCASE("one-hot passes through") {
        const Matrix s = cdmtest::one_hot({0, 0, 1, 1, 1, 0}, 4);
        const HardenResult h = harden(s, 0.02);
        CHECK(h.partition.k == 2);
        CHECK(h.partition.labels == std::vector<int>{0, 0, 1, 1, 1, 0});
    }
    SUBCASE("near-empty clusters dissolve into the dominant two") {
        // 100 rows, two dominant columns, a few stray near-one-hot rows.
        Matrix s(100, 16);
        for (int i = 0; i < 100; ++i) {
            const int dominant = i < 48 ? 0 : 1;
            for (int c = 0; c < 16; ++c) s.at(i, c) = 0.001;
            s.at(i, dominant) = 0.9;
            // second-best mass points at the true dominant cluster
            s.at(i, 2 + (i % 14)) = 0.05;
        }
        // One stray row per small cluster: argmax lands off the dominants.
        for (int stray = 0; stray < 4; ++stray) {
            const int row = 96 + stray;
            for (int c = 0; c < 16; ++c) s.at(row, c) = 0.001;
            s.at(row, 2 + stray) = 0.9;
            s.at(row, 1) = 0.05;
        }
        const HardenResult h = harden(s, 0.02);
        CHECK(h.partition.k == 2);
        CHECK(h.surviving_columns == std::vector<int>{0, 1});
        for (int stray = 0; stray < 4; ++stray) CHECK(h.partition.labels[96 + stray] == 1);
    }
    SUBCASE("uniform rows all tie into cluster zero") {
        Matrix s(8, 16);
        for (auto& v : s.v) v = 1.0 / 16.0;
        const HardenResult h = harden(s, 0.02);
        CHECK(h.partition.k == 1);
        for (int l : h.partition.labels) CHECK(l == 0);
    }
    SUBCASE("no survivor is a degenerate error") {
        const Matrix s = cdmtest::one_hot({0, 1, 2}, 4);  // every cluster below 2 frames
        CHECK_THROWS_AS(harden(s, 0.02), DegenerateGraphError);
    }
}
