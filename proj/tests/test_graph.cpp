#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cdm/graph.hpp"
#include "cdm/tensor.hpp"
#include "testutil.hpp"

using namespace cdm;

namespace {

Matrix unit_rows(std::vector<std::vector<double>> rows) {
    Matrix m(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
    for (int r = 0; r < m.rows; ++r) {
        double norm = 0.0;
        for (int c = 0; c < m.cols; ++c) norm += rows[r][c] * rows[r][c];
        norm = std::sqrt(norm);
        for (int c = 0; c < m.cols; ++c) m.at(r, c) = rows[r][c] / norm;
    }
    return m;
}

// Exhaustive pair enumeration: the reference for build_graph.
std::vector<std::pair<int, int>> enumerate_edges(const Matrix& emb, double theta) {
    std::vector<std::pair<int, int>> edges;
    for (int i = 0; i < emb.rows; ++i) {
        for (int j = i + 1; j < emb.rows; ++j) {
            double dot = 0.0;
            for (int c = 0; c < emb.cols; ++c) dot += emb.at(i, c) * emb.at(j, c);
            if (dot >= theta) edges.emplace_back(i, j);
        }
    }
    return edges;
}

Matrix random_unit_rows(int n, int d, Rng& rng) {
    Matrix m = cdmtest::random_matrix(n, d, rng);
    for (int r = 0; r < n; ++r) {
        double norm = 0.0;
        for (int c = 0; c < d; ++c) norm += m.at(r, c) * m.at(r, c);
        norm = std::sqrt(norm);
        for (int c = 0; c < d; ++c) m.at(r, c) /= norm;
    }
    return m;
}

}  // namespace

TEST_CASE("build_graph thresholds inner products") {
    SUBCASE("identical unit rows connect") {
        const auto g = build_graph(unit_rows({{1, 0}, {1, 0}}), 0.9);
        CHECK(g.m == 1);
        CHECK(g.degrees == std::vector<double>{1.0, 1.0});
    }
    SUBCASE("orthogonal rows leave no edges") {
        CHECK_THROWS_AS(build_graph(unit_rows({{1, 0}, {0, 1}}), 0.5), DegenerateGraphError);
    }
    SUBCASE("pairs above theta survive, cross pairs do not") {
        // sims: (0,1) = 0.8, (2,3) = 0.7, cross = 0.
        const double a = std::sqrt(0.9), b = std::sqrt(0.1);
        const double c = std::sqrt(0.85), d = std::sqrt(0.15);
        const auto g = build_graph(unit_rows({{a, b, 0, 0},
                                              {a, -b, 0, 0},
                                              {0, 0, c, d},
                                              {0, 0, c, -d}}),
                                   0.5);
        CHECK(g.m == 2);
        CHECK(g.edges == std::vector<std::pair<int, int>>{{0, 1}, {2, 3}});
    }
    SUBCASE("matches exhaustive enumeration on random embeddings") {
        Rng rng(40);
        for (int trial = 0; trial < 10; ++trial) {
            const Matrix emb = random_unit_rows(20, 6, rng);
            const double theta = rng.uniform(-0.4, 0.6);
            const auto expected = enumerate_edges(emb, theta);
            if (expected.empty()) {
                CHECK_THROWS_AS(build_graph(emb, theta), DegenerateGraphError);
            } else {
                const auto g = build_graph(emb, theta);
                CHECK(g.edges == expected);
                // 2m = sum of degrees, zero diagonal by construction.
                double degree_sum = 0.0;
                for (double deg : g.degrees) degree_sum += deg;
                CHECK(degree_sum == 2.0 * static_cast<double>(g.m));
            }
        }
    }
    SUBCASE("raising theta never adds edges") {
        Rng rng(41);
        const Matrix emb = random_unit_rows(24, 5, rng);
        size_t last_m = SIZE_MAX;
        for (double theta : {-0.5, -0.2, 0.0, 0.2, 0.4}) {
            const auto g = build_graph(emb, theta);
            CHECK(g.m <= last_m);
            last_m = g.m;
        }
    }
}

TEST_CASE("normalized adjacency uses the self-loop renormalization") {
    SUBCASE("single edge") {
        const auto g = graph_from_edges(2, {{0, 1}});
        const CsrMatrix a = normalized_adjacency(g);
        REQUIRE(a.nnz() == 4);
        for (double v : a.val) CHECK(v == doctest::Approx(0.5).epsilon(1e-12));
    }
    SUBCASE("star center-to-leaf entry") {
        const auto g = graph_from_edges(4, {{0, 1}, {0, 2}, {0, 3}});
        const CsrMatrix a = normalized_adjacency(g);
        // row 0: self at 1/4, leaves at 1/sqrt(4 * 2).
        bool found = false;
        for (int e = a.row_ptr[0]; e < a.row_ptr[1]; ++e) {
            if (a.col[e] == 1) {
                CHECK(a.val[e] == doctest::Approx(1.0 / std::sqrt(8.0)).epsilon(1e-12));
                found = true;
            }
            if (a.col[e] == 0) CHECK(a.val[e] == doctest::Approx(0.25).epsilon(1e-12));
        }
        CHECK(found);
    }
    SUBCASE("rows of a regular graph sum to one") {
        const auto g = graph_from_edges(3, {{0, 1}, {1, 2}, {0, 2}});  // 2-regular triangle
        const CsrMatrix a = normalized_adjacency(g);
        for (int i = 0; i < 3; ++i) {
            double total = 0.0;
            for (int e = a.row_ptr[i]; e < a.row_ptr[i + 1]; ++e) total += a.val[e];
            CHECK(total == doctest::Approx(1.0).epsilon(1e-12));
        }
    }
}

TEST_CASE("modularity oracle on closed-form fixtures") {
    const auto two = cdmtest::two_triangles();
    CHECK(modularity_oracle(two, {{0, 0, 0, 1, 1, 1}, 2}) ==
          doctest::Approx(0.5).epsilon(1e-12));
    CHECK(modularity_oracle(two, {{0, 0, 0, 0, 0, 0}, 1}) ==
          doctest::Approx(0.0).epsilon(1e-12));

    const auto bridged = cdmtest::bridged_triangles();
    CHECK(modularity_oracle(bridged, {{0, 0, 0, 1, 1, 1}, 2}) ==
          doctest::Approx(5.0 / 14.0).epsilon(1e-12));
}

TEST_CASE("modularity oracle stays in range and matches the dense B row-sum identity") {
    Rng rng(55);
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 4 + static_cast<int>(rng.below(30));
        const auto g = cdmtest::random_graph(n, 0.3, rng);
        const Matrix b = cdmtest::dense_modularity_matrix(g);
        for (int i = 0; i < n; ++i) {
            double row = 0.0;
            for (int j = 0; j < n; ++j) row += b.at(i, j);
            CHECK(std::abs(row) <= 1e-9);  // implicit-B rows sum to zero
        }
        const Partition p{cdmtest::random_labels(n, 3, rng), 3};
        const double q = modularity_oracle(g, p);
        CHECK(q >= -0.5 - 1e-12);
        CHECK(q <= 1.0 + 1e-12);
    }
}

TEST_CASE("conductance fixtures") {
    const auto two = cdmtest::two_triangles();
    CHECK(conductance(two, {0, 1, 2}) == doctest::Approx(0.0));

    const auto bridged = cdmtest::bridged_triangles();
    CHECK(conductance(bridged, {0, 1, 2}) == doctest::Approx(1.0 / 7.0).epsilon(1e-12));
    CHECK(conductance(bridged, {0}) == doctest::Approx(1.0));  // d = 2, no internal edges

    CHECK_THROWS_AS(conductance(two, {}), ArgumentError);
    CHECK_THROWS_AS(conductance(two, {0, 1, 2, 3, 4, 5}), ArgumentError);

    Rng rng(77);
    for (int trial = 0; trial < 20; ++trial) {
        const auto g = cdmtest::random_graph(12, 0.3, rng);
        std::vector<int> subset;
        for (int i = 0; i < 6; ++i) subset.push_back(static_cast<int>(rng.below(12)));
        std::sort(subset.begin(), subset.end());
        subset.erase(std::unique(subset.begin(), subset.end()), subset.end());
        if (subset.empty() || static_cast<int>(subset.size()) >= g.n) continue;
        const double c = conductance(g, subset);
        CHECK(c >= 0.0);
        CHECK(c <= 1.0);
    }
}

TEST_CASE("per-community modularity metric fixtures") {
    const auto two = cdmtest::two_triangles();
    CHECK(modularity_metric(two, {0, 1, 2}) == doctest::Approx(0.375).epsilon(1e-12));
    CHECK(modularity_metric(two, {0, 1, 2, 3, 4, 5}) == doctest::Approx(0.0).epsilon(1e-12));
    // Single degree-2 node in the 6-edge graph: (0 - 4/24) / 4.
    CHECK(modularity_metric(two, {0}) == doctest::Approx(-4.0 / 96.0).epsilon(1e-12));
}

TEST_CASE("partition scores on the two-triangle fixture") {
    const auto two = cdmtest::two_triangles();
    const auto perfect = partition_scores(two, {{0, 0, 0, 1, 1, 1}, 2});
    CHECK(perfect.conductance_c == doctest::Approx(0.0));
    CHECK(perfect.modularity_q == doctest::Approx(50.0).epsilon(1e-12));
    CHECK(perfect.modularity_communitywise == doctest::Approx(75.0).epsilon(1e-12));

    const auto lump = partition_scores(two, {{0, 0, 0, 0, 0, 0}, 1});
    CHECK(lump.modularity_q == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("trace form equals oracle under one-hot assignments") {
    Rng rng(88);
    for (int trial = 0; trial < 25; ++trial) {
        const int n = 4 + static_cast<int>(rng.below(47));
        const auto g = cdmtest::random_graph(n, 0.25, rng);
        const int k = 2 + static_cast<int>(rng.below(5));
        const auto labels = cdmtest::random_labels(n, k, rng);
        const Matrix s = cdmtest::one_hot(labels, k);
        const double trace = ad::trace_quadform(ad::Tensor::from_matrix(s), g.adjacency(),
                                                g.degrees, static_cast<double>(g.m))
                                 .scalar_value();
        const double oracle = modularity_oracle(g, {labels, k});
        CHECK(std::abs(trace / (2.0 * static_cast<double>(g.m)) - oracle) <= 1e-9);
    }
}

TEST_CASE("graph persistence round trip") {
    const auto g = cdmtest::bridged_triangles();
    const auto path =
        (std::filesystem::temp_directory_path() / "cdm_test_graph.cdg").string();
    save_graph(path, g);
    const auto back = load_graph(path);
    CHECK(back.n == g.n);
    CHECK(back.m == g.m);
    CHECK(back.edges == g.edges);
    CHECK(back.degrees == g.degrees);
    std::filesystem::remove(path);
}
