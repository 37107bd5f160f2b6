#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cdm/optim.hpp"

using namespace cdm;

namespace {

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

// Hand-rolled Adam recurrence, kept independent of the implementation.
double adam_reference(double x0, double grad, double lr, int steps) {
    double m = 0.0, v = 0.0, x = x0;
    for (int t = 1; t <= steps; ++t) {
        m = 0.9 * m + 0.1 * grad;
        v = 0.999 * v + 0.001 * grad * grad;
        const double mh = m / (1.0 - std::pow(0.9, t));
        const double vh = v / (1.0 - std::pow(0.999, t));
        x -= lr * mh / (std::sqrt(vh) + 1e-8);
    }
    return x;
}

}  // namespace

TEST_CASE("adam first step moves a unit-gradient scalar by about -lr") {
    ParamStore store;
    store.add("w", {1}, {0.0f});
    BoundParams bound = bind(store);
    bound.leaves[0].node()->ensure_grad();
    bound.leaves[0].node()->grad[0] = 1.0;
    adam_step(store, bound, 0.1);
    CHECK(store.entry("w").value[0] ==
          doctest::Approx(adam_reference(0.0, 1.0, 0.1, 1)).epsilon(1e-6));
    CHECK(std::abs(store.entry("w").value[0] + 0.1) <= 1e-6);
    CHECK(store.step() == 1);
    CHECK(bound.leaves[0].grad()[0] == 0.0);  // zeroed after the update

    // Repeated unit gradients follow the reference recurrence.
    for (int t = 2; t <= 5; ++t) {
        bound.leaves[0].node()->grad[0] = 1.0;
        adam_step(store, bound, 0.1);
        CHECK(store.entry("w").value[0] ==
              doctest::Approx(adam_reference(0.0, 1.0, 0.1, t)).epsilon(1e-5));
    }
}

TEST_CASE("adam with zero gradients leaves parameters alone") {
    ParamStore store;
    store.add("w", {2}, {0.5f, -0.25f});
    BoundParams bound = bind(store);
    bound.leaves[0].node()->ensure_grad();
    adam_step(store, bound, 0.1);
    CHECK(store.entry("w").value[0] == 0.5f);
    CHECK(store.entry("w").value[1] == -0.25f);
    CHECK(store.step() == 1);
}

TEST_CASE("adam without gradients is a state error") {
    ParamStore store;
    store.add("w", {1}, {0.0f});
    BoundParams bound = bind(store);
    CHECK_THROWS_AS(adam_step(store, bound, 0.1), StateError);
}

TEST_CASE("adam is deterministic given identical state") {
    auto run = []() {
        ParamStore store;
        store.add("w", {3}, {0.1f, 0.2f, 0.3f});
        for (int t = 0; t < 10; ++t) {
            BoundParams bound = bind(store);
            bound.leaves[0].node()->ensure_grad();
            for (int i = 0; i < 3; ++i) {
                bound.leaves[0].node()->grad[i] = 0.3 * (i + 1) - 0.05 * t;
            }
            adam_step(store, bound, 0.02);
        }
        return store.entry("w").value;
    };
    CHECK(run() == run());
}

TEST_CASE("cyclical lr follows the triangular wave") {
    CyclicalLrSchedule s;
    s.cycle_steps = 2000;
    CHECK(lr_at(s, 0) == doctest::Approx(1e-4));
    CHECK(lr_at(s, 1000) == doctest::Approx(1e-1));
    CHECK(lr_at(s, 2000) == doctest::Approx(1e-4));
    CHECK(lr_at(s, 500) == doctest::Approx(1e-4 + 0.5 * (1e-1 - 1e-4)));
    CHECK(lr_at(s, 1500) == doctest::Approx(1e-1 - 0.5 * (1e-1 - 1e-4)));
    for (uint64_t step = 0; step < 4000; ++step) {
        const double lr = lr_at(s, step);
        CHECK(lr >= s.lr_min - 1e-15);
        CHECK(lr <= s.lr_max + 1e-15);
    }
}

TEST_CASE("checkpoints round-trip bit-exactly with optimizer state") {
    ParamStore store;
    store.add("a.w", {2, 3}, {1.0f, 2.0f, 3.0f, 4.0f, 5.0f, 6.0f});
    store.add("a.b", {3}, {-1.0f, 0.5f, 0.25f});
    // Mutate optimizer state so the round trip covers it.
    BoundParams bound = bind(store);
    for (auto& leaf : bound.leaves) leaf.node()->ensure_grad();
    for (double& g : bound.leaves[0].node()->grad) g = 0.7;
    for (double& g : bound.leaves[1].node()->grad) g = -0.2;
    adam_step(store, bound, 0.05);

    const std::string path = temp_path("cdm_test_ckpt.cdm");
    save_checkpoint(path, store);
    const ParamStore back = load_checkpoint(path);
    CHECK(back.step() == store.step());
    REQUIRE(back.entries().size() == store.entries().size());
    for (size_t i = 0; i < back.entries().size(); ++i) {
        CHECK(back.entries()[i].name == store.entries()[i].name);
        CHECK(back.entries()[i].shape == store.entries()[i].shape);
        CHECK(back.entries()[i].value == store.entries()[i].value);
        CHECK(back.entries()[i].m == store.entries()[i].m);
        CHECK(back.entries()[i].v == store.entries()[i].v);
    }

    // Byte-identical re-serialization.
    const std::string path2 = temp_path("cdm_test_ckpt2.cdm");
    save_checkpoint(path2, back);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
    const std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
    CHECK(b1 == b2);
    std::filesystem::remove(path);
    std::filesystem::remove(path2);
}

TEST_CASE("checkpoint loader rejects garbage") {
    const std::string path = temp_path("cdm_test_bad_ckpt.cdm");
    {
        std::ofstream f(path, std::ios::binary);
        f << "XXXX junk";
    }
    CHECK_THROWS_AS(load_checkpoint(path), FormatError);
    std::filesystem::remove(path);
}

TEST_CASE("matrix container round trip") {
    Matrix m(2, 2);
    m.v = {1.5, -2.5, 0.0, 8.0};
    const std::string path = temp_path("cdm_test_matrix.cdm");
    save_matrix(path, "embeddings", m);
    const Matrix back = load_matrix(path, "embeddings");
    CHECK(back.rows == 2);
    CHECK(back.cols == 2);
    CHECK(back.v == m.v);
    std::filesystem::remove(path);
}
