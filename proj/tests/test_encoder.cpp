#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "cdm/encoder.hpp"
#include "cdm/synth.hpp"
#include "testutil.hpp"

using namespace cdm;

namespace {

// Small encoder for unit tests; the full-size default is exercised in the
// acceptance suite.
EncoderConfig tiny_encoder() {
    EncoderConfig c;
    c.frame_len = 64;
    c.embed_dim = 16;
    for (int l = 0; l < 3; ++l) {
        EncoderLayer layer;
        layer.filters = 8 << l;
        c.layers.push_back(layer);
    }
    return c;
}

std::vector<Matrix> toy_corpus(int speakers, int frames_each, int frame_len, uint64_t seed) {
    Rng rng(seed);
    std::vector<Matrix> corpus;
    for (int s = 0; s < speakers; ++s) {
        Matrix m(frames_each, frame_len);
        for (auto& x : m.v) x = 0.2 * rng.normal();
        corpus.push_back(std::move(m));
    }
    return corpus;
}

Matrix embeddings_with_positive_sim(double pos_sim) {
    // Pairs (0,1) and (2,3); pair 0 has inner product pos_sim, pair 1 stays
    // at 1; the two pairs live in orthogonal planes so negatives stay at 0.
    const double phi = 0.5 * std::acos(pos_sim);
    Matrix m(4, 4);
    m.at(0, 0) = std::cos(phi);
    m.at(0, 1) = std::sin(phi);
    m.at(1, 0) = std::cos(phi);
    m.at(1, 1) = -std::sin(phi);
    m.at(2, 2) = 1.0;
    m.at(3, 2) = 1.0;
    return m;
}

}  // namespace

TEST_CASE("default encoder config reduces 256 samples to the embed dim") {
    const EncoderConfig c = EncoderConfig::defaults();
    CHECK(c.layers.size() == 6);
    CHECK(c.flatten_width() == 128 * 4);
    CHECK(c.embed_dim == 128);
}

TEST_CASE("encode is deterministic with unit-norm finite rows") {
    const EncoderConfig c = tiny_encoder();
    ParamStore params = init_encoder(c, 5);

    FrameMatrix fm;
    fm.frame_len = c.frame_len;
    fm.hop = 16;
    Rng rng(6);
    fm.frames = cdmtest::random_matrix(10, c.frame_len, rng, 0.3);
    fm.source_len = 64 + 9 * 16;

    const Matrix a = encode(c, params, fm);
    const Matrix b = encode(c, params, fm);
    CHECK(a.v == b.v);
    REQUIRE(a.rows == 10);
    REQUIRE(a.cols == c.embed_dim);
    for (int r = 0; r < a.rows; ++r) {
        double norm = 0.0;
        for (int col = 0; col < a.cols; ++col) {
            CHECK(std::isfinite(a.at(r, col)));
            norm += a.at(r, col) * a.at(r, col);
        }
        CHECK(std::abs(std::sqrt(norm) - 1.0) <= 1e-6);
    }

    // Identical input frames embed identically, bit for bit.
    Matrix same(3, c.frame_len);
    for (int r = 0; r < 3; ++r) {
        for (int col = 0; col < c.frame_len; ++col) same.at(r, col) = fm.frames.at(0, col);
    }
    FrameMatrix fm_same{same, c.frame_len, 16, static_cast<size_t>(64 + 2 * 16)};
    const Matrix e = encode(c, params, fm_same);
    for (int col = 0; col < e.cols; ++col) {
        CHECK(e.at(0, col) == e.at(1, col));
        CHECK(e.at(1, col) == e.at(2, col));
    }
}

TEST_CASE("sample_pairs draws legal intra-speaker pairs") {
    const auto corpus = toy_corpus(2, 2, 32, 8);
    const PairBatch batch = sample_pairs(corpus, 4, 3);
    REQUIRE(batch.anchors.rows == 4);
    for (int i = 0; i < 4; ++i) {
        const int p = batch.positive_index[i];
        CHECK(batch.positive_index[p] == i);
        CHECK(batch.speaker[i] == batch.speaker[p]);
    }

    const PairBatch again = sample_pairs(corpus, 4, 3);
    CHECK(batch.anchors.v == again.anchors.v);
    CHECK(batch.positive_index == again.positive_index);

    CHECK_THROWS_AS(sample_pairs(toy_corpus(1, 5, 32, 1), 4, 1), DataError);
    CHECK_THROWS_AS(sample_pairs(corpus, 5, 1), ArgumentError);
}

TEST_CASE("sample_pairs hits each speaker uniformly") {
    const auto corpus = toy_corpus(10, 6, 16, 12);
    std::vector<int> hits(10, 0);
    const int batches = 500;  // 500 batches x 20 pairs = 1e4 pairs
    for (int b = 0; b < batches; ++b) {
        const PairBatch batch = sample_pairs(corpus, 40, 1000 + b);
        for (int i = 0; i < batch.anchors.rows; i += 2) ++hits[batch.speaker[i]];
    }
    const double total = batches * 20.0;
    for (int s = 0; s < 10; ++s) {
        CHECK(std::abs(hits[s] / total - 0.10) <= 0.02);
    }
}

TEST_CASE("contrastive loss closed forms") {
    SUBCASE("identical embeddings give ln(n-1)") {
        Matrix m(4, 3);
        for (int r = 0; r < 4; ++r) m.at(r, 0) = 1.0;
        const auto loss =
            contrastive_loss(ad::Tensor::from_matrix(m), {1, 0, 3, 2}, 1.0).scalar_value();
        CHECK(loss == doctest::Approx(std::log(3.0)).epsilon(1e-9));
        CHECK(loss == doctest::Approx(1.0986).epsilon(1e-3));
        // Temperature cancels when all similarities coincide.
        const auto loss_t =
            contrastive_loss(ad::Tensor::from_matrix(m), {1, 0, 3, 2}, 0.25).scalar_value();
        CHECK(loss_t == doctest::Approx(std::log(3.0)).epsilon(1e-9));
    }
    SUBCASE("unit positives with orthogonal negatives") {
        const Matrix m = embeddings_with_positive_sim(1.0);
        const double expected = -std::log(std::exp(1.0) / (std::exp(1.0) + 2.0));
        const auto loss =
            contrastive_loss(ad::Tensor::from_matrix(m), {1, 0, 3, 2}, 1.0).scalar_value();
        CHECK(loss == doctest::Approx(expected).epsilon(1e-9));
        CHECK(loss == doctest::Approx(0.5514).epsilon(1e-3));
    }
    SUBCASE("saturated case vanishes") {
        Matrix m(4, 2);
        m.at(0, 0) = 1.0;
        m.at(1, 0) = 1.0;
        m.at(2, 0) = -1.0;
        m.at(3, 0) = -1.0;
        const auto loss =
            contrastive_loss(ad::Tensor::from_matrix(m), {1, 0, 3, 2}, 0.1).scalar_value();
        CHECK(loss >= 0.0);
        CHECK(loss <= 1e-8);
    }
    SUBCASE("raising the positive similarity strictly lowers the loss") {
        double last = 1e300;
        for (double sim : {0.0, 0.3, 0.6, 0.9}) {
            const Matrix m = embeddings_with_positive_sim(sim);
            const double loss =
                contrastive_loss(ad::Tensor::from_matrix(m), {1, 0, 3, 2}, 0.5).scalar_value();
            CHECK(loss < last);
            last = loss;
        }
    }
    SUBCASE("batch permutation leaves the loss unchanged") {
        Rng rng(21);
        Matrix m = cdmtest::random_matrix(6, 8, rng);
        for (int r = 0; r < 6; ++r) {
            double norm = 0.0;
            for (int c = 0; c < 8; ++c) norm += m.at(r, c) * m.at(r, c);
            norm = std::sqrt(norm);
            for (int c = 0; c < 8; ++c) m.at(r, c) /= norm;
        }
        const std::vector<int> pos = {1, 0, 3, 2, 5, 4};
        const double base =
            contrastive_loss(ad::Tensor::from_matrix(m), pos, 0.7).scalar_value();

        const std::vector<int> perm = {4, 2, 0, 5, 1, 3};  // new position of old row i
        Matrix pm(6, 8);
        std::vector<int> ppos(6);
        for (int r = 0; r < 6; ++r) {
            for (int c = 0; c < 8; ++c) pm.at(perm[r], c) = m.at(r, c);
            ppos[perm[r]] = perm[pos[r]];
        }
        const double permuted =
            contrastive_loss(ad::Tensor::from_matrix(pm), ppos, 0.7).scalar_value();
        CHECK(permuted == doctest::Approx(base).epsilon(1e-12));
    }
    SUBCASE("gradient matches finite differences") {
        Rng rng(31);
        for (int trial = 0; trial < 5; ++trial) {
            Matrix m = cdmtest::random_matrix(5, 6, rng, 0.5);
            // Pairs (0,1), (2,3); anchor 4 reuses 0 as its positive.
            std::vector<int> pair_map = {1, 0, 3, 2, 0};
            const auto report = ad::grad_check(
                [&pair_map](const std::vector<ad::Tensor>& in) {
                    return contrastive_loss(in[0], pair_map, 0.5);
                },
                {ad::Tensor::from_matrix(m)}, 1e-5);
            CHECK(report.max_rel_err <= 1e-4);
        }
    }
    SUBCASE("argument validation") {
        Matrix m(2, 3);
        m.at(0, 0) = 1.0;
        m.at(1, 1) = 1.0;
        CHECK_THROWS_AS(contrastive_loss(ad::Tensor::from_matrix(m), {1, 0}, 1.0),
                        ArgumentError);
        Matrix m4(4, 3);
        CHECK_THROWS_AS(contrastive_loss(ad::Tensor::from_matrix(m4), {1, 0, 3, 2}, 0.0),
                        ArgumentError);
    }
}

TEST_CASE("pretrain reduces loss and reproduces traces") {
    // Frames drawn from actual synthetic talkers so the task is learnable.
    const auto specs = make_speakers(3, 500);
    std::vector<Matrix> corpus;
    for (const auto& spec : specs) {
        const Waveform utt = synth_utterance(spec, 1.0, 17);
        Matrix frames(40, 64);
        for (int f = 0; f < 40; ++f) {
            for (int j = 0; j < 64; ++j) frames.at(f, j) = utt.samples[f * 64 + j];
        }
        corpus.push_back(std::move(frames));
    }

    const EncoderConfig enc = tiny_encoder();
    PretrainConfig train;
    train.steps = 120;
    train.batch_n = 12;
    train.seed = 9;
    train.lr.cycle_steps = 2000;

    const PretrainResult a = pretrain(corpus, enc, train);
    REQUIRE(a.losses.size() == 120);
    // Windowed means iron out per-batch noise in the trace.
    double head_mean = 0.0, tail_mean = 0.0;
    for (int i = 0; i < 10; ++i) {
        head_mean += a.losses[i] / 10.0;
        tail_mean += a.losses[a.losses.size() - 1 - i] / 10.0;
    }
    CHECK(tail_mean < head_mean);

    const PretrainResult b = pretrain(corpus, enc, train);
    CHECK(a.losses == b.losses);

    SUBCASE("checkpoint resume continues the exact trace") {
        const auto dir = std::filesystem::temp_directory_path() / "cdm_test_resume";
        std::filesystem::remove_all(dir);
        PretrainConfig head = train;
        head.steps = 60;
        head.checkpoint_interval = 60;
        head.checkpoint_dir = dir.string();
        const PretrainResult first = pretrain(corpus, enc, head);
        REQUIRE(!first.checkpoints.empty());

        ParamStore restored = load_checkpoint(first.checkpoints.back().path);
        PretrainConfig tail = train;
        tail.steps = 60;
        const PretrainResult resumed = pretrain(corpus, enc, tail, &restored);
        for (int i = 0; i < 60; ++i) {
            CHECK(resumed.losses[i] == a.losses[60 + i]);
        }
        std::filesystem::remove_all(dir);
    }
}
