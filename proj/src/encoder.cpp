#include "cdm/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

namespace cdm {

namespace {

std::vector<float> he_uniform(size_t count, size_t fan_in, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(std::max<size_t>(fan_in, 1)));
    std::vector<float> out(count);
    for (auto& x : out) x = static_cast<float>(rng.uniform(-limit, limit));
    return out;
}

std::string layer_prefix(int l) { return "enc.l" + std::to_string(l); }

}  // namespace

EncoderConfig EncoderConfig::defaults() {
    EncoderConfig c;
    for (int l = 0; l < 6; ++l) {
        EncoderLayer layer;
        layer.filters = 32 << std::min(l, 2);
        c.layers.push_back(layer);
    }
    return c;
}

int EncoderConfig::flatten_width() const {
    if (layers.empty()) throw ArgumentError("encoder needs at least one layer");
    int len = frame_len;
    int ch = 1;
    for (const auto& layer : layers) {
        if (layer.stride < 1 || layer.pool_stride < 1 || layer.pool < 1 || layer.filters < 1) {
            throw ArgumentError("encoder layer strides/pools must be >= 1");
        }
        const int pad = (layer.kernel - 1) / 2;
        len = (len + 2 * pad - layer.kernel) / layer.stride + 1;
        if (len < layer.pool) throw ArgumentError("encoder stage shrinks input below pool size");
        len = (len - layer.pool) / layer.pool_stride + 1;
        ch = layer.filters;
    }
    return ch * len;
}

ParamStore init_encoder(const EncoderConfig& config, uint64_t seed) {
    const int flat = config.flatten_width();
    ParamStore store;
    Rng rng(derive_seed(seed, "encoder-init"));
    int in_ch = 1;
    for (size_t l = 0; l < config.layers.size(); ++l) {
        const auto& layer = config.layers[l];
        const size_t fan_in = static_cast<size_t>(in_ch) * layer.kernel;
        store.add(layer_prefix(static_cast<int>(l)) + ".conv.w",
                  {layer.filters, in_ch, layer.kernel},
                  he_uniform(static_cast<size_t>(layer.filters) * in_ch * layer.kernel, fan_in,
                             rng));
        store.add(layer_prefix(static_cast<int>(l)) + ".conv.b", {layer.filters},
                  std::vector<float>(layer.filters, 0.0f));
        in_ch = layer.filters;
    }
    store.add("enc.out.w", {flat, config.embed_dim},
              he_uniform(static_cast<size_t>(flat) * config.embed_dim, flat, rng));
    store.add("enc.out.b", {config.embed_dim}, std::vector<float>(config.embed_dim, 0.0f));
    return store;
}

ad::Tensor encoder_forward(const EncoderConfig& config, const BoundParams& params,
                           const Matrix& frames) {
    if (frames.cols != config.frame_len) throw ShapeError("encoder: frame width mismatch");
    const int batch = frames.rows;
    ad::Tensor x = ad::reshape(ad::Tensor::from_matrix(frames), {batch, 1, config.frame_len});
    for (size_t l = 0; l < config.layers.size(); ++l) {
        const auto& layer = config.layers[l];
        const std::string prefix = layer_prefix(static_cast<int>(l));
        x = ad::layer_norm(x, config.ln_eps);
        x = ad::conv1d(x, params[prefix + ".conv.w"], params[prefix + ".conv.b"], layer.stride,
                       (layer.kernel - 1) / 2);
        x = ad::relu(x);
        x = ad::maxpool1d(x, layer.pool, layer.pool_stride);
    }
    x = ad::reshape(x, {batch, config.flatten_width()});
    x = ad::add_row_bias(ad::matmul(x, params["enc.out.w"]), params["enc.out.b"]);
    return ad::l2_normalize_rows(x);
}

Matrix encode(const EncoderConfig& config, ParamStore& params, const FrameMatrix& frames) {
    const int n = frames.n_frames();
    Matrix out(n, config.embed_dim);
    BoundParams bound = bind(params, false);
    constexpr int kChunk = 128;
    for (int start = 0; start < n; start += kChunk) {
        const int count = std::min(kChunk, n - start);
        Matrix chunk(count, config.frame_len);
        for (int i = 0; i < count; ++i) {
            const double* src = frames.frames.row(start + i);
            std::copy(src, src + config.frame_len, chunk.row(i));
        }
        const ad::Tensor emb = encoder_forward(config, bound, chunk);
        for (int i = 0; i < count; ++i) {
            const double* src = emb.value().data() + static_cast<size_t>(i) * config.embed_dim;
            std::copy(src, src + config.embed_dim, out.row(start + i));
        }
    }
    return out;
}

PairBatch sample_pairs(const std::vector<Matrix>& frames_by_speaker, int batch_n, uint64_t seed) {
    if (batch_n < 2 || batch_n % 2 != 0) throw ArgumentError("batch_n must be even and >= 2");
    std::vector<int> eligible;
    for (size_t s = 0; s < frames_by_speaker.size(); ++s) {
        if (frames_by_speaker[s].rows >= 2) eligible.push_back(static_cast<int>(s));
    }
    if (eligible.size() < 2) {
        throw DataError("sample_pairs: need at least two speakers with two frames each");
    }
    const int frame_len = frames_by_speaker[eligible[0]].cols;

    Rng rng(derive_seed(seed, "pairs"));
    PairBatch batch;
    batch.anchors = Matrix(batch_n, frame_len);
    batch.positive_index.resize(batch_n);
    batch.speaker.resize(batch_n);
    for (int p = 0; p < batch_n / 2; ++p) {
        const int spk = eligible[rng.below(eligible.size())];
        const Matrix& pool = frames_by_speaker[spk];
        const auto i = static_cast<int>(rng.below(pool.rows));
        auto j = static_cast<int>(rng.below(pool.rows - 1));
        if (j >= i) ++j;
        const int a = 2 * p, b = 2 * p + 1;
        std::copy(pool.row(i), pool.row(i) + frame_len, batch.anchors.row(a));
        std::copy(pool.row(j), pool.row(j) + frame_len, batch.anchors.row(b));
        batch.positive_index[a] = b;
        batch.positive_index[b] = a;
        batch.speaker[a] = spk;
        batch.speaker[b] = spk;
    }
    return batch;
}

ad::Tensor contrastive_loss(const ad::Tensor& embeddings, const std::vector<int>& positive_index,
                            double temperature) {
    if (embeddings.rank() != 2) throw ShapeError("contrastive_loss: embeddings must be 2-D");
    const int n = embeddings.dim(0);
    if (n < 3) throw ArgumentError("contrastive_loss: need n >= 3 for negatives");
    if (temperature <= 0.0) throw ArgumentError("contrastive_loss: temperature must be > 0");
    if (static_cast<int>(positive_index.size()) != n) {
        throw ShapeError("contrastive_loss: pair map size mismatch");
    }
    for (int i = 0; i < n; ++i) {
        const int p = positive_index[i];
        if (p < 0 || p >= n || p == i) throw ArgumentError("contrastive_loss: bad pair map");
    }

    const ad::Tensor sims = ad::matmul_nt(embeddings, embeddings);
    const double inv_t = 1.0 / temperature;

    // Per-anchor softmax over j != i; saved for the backward pass.
    auto softmaxes = std::make_shared<std::vector<double>>(static_cast<size_t>(n) * n, 0.0);
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const double* row = sims.value().data() + static_cast<size_t>(i) * n;
        double mx = -1e300;
        for (int j = 0; j < n; ++j) {
            if (j != i) mx = std::max(mx, row[j] * inv_t);
        }
        double z = 0.0;
        double* soft = softmaxes->data() + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            if (j == i) continue;
            soft[j] = std::exp(row[j] * inv_t - mx);
            z += soft[j];
        }
        for (int j = 0; j < n; ++j) soft[j] /= z;
        total += (mx + std::log(z)) - row[positive_index[i]] * inv_t;
    }
    total /= static_cast<double>(n);

    std::vector<int> pos = positive_index;
    return ad::custom_op(
        {1}, {total}, {sims},
        [n, inv_t, softmaxes, pos = std::move(pos)](ad::Node& self) {
            ad::Node* p = self.parents[0].get();
            p->ensure_grad();
            const double g = self.grad[0] * inv_t / static_cast<double>(n);
            for (int i = 0; i < n; ++i) {
                const double* soft = softmaxes->data() + static_cast<size_t>(i) * n;
                double* ds = p->grad.data() + static_cast<size_t>(i) * n;
                for (int j = 0; j < n; ++j) {
                    if (j != i) ds[j] += g * soft[j];
                }
                ds[pos[i]] -= g;
            }
        });
}

PretrainResult pretrain(const std::vector<Matrix>& frames_by_speaker, const EncoderConfig& config,
                        const PretrainConfig& train, ParamStore* resume) {
    PretrainResult result;
    result.params = resume ? *resume : init_encoder(config, train.seed);

    const PairBatch probe =
        sample_pairs(frames_by_speaker, train.batch_n, derive_seed(train.seed, "probe"));
    CyclicalLrSchedule schedule = train.lr;

    auto probe_loss = [&]() {
        BoundParams bound = bind(result.params, false);
        const ad::Tensor emb = encoder_forward(config, bound, probe.anchors);
        // The probe is evaluation-only; build the loss on a detached copy.
        const ad::Tensor detached = ad::Tensor::from_data(emb.shape(), emb.value());
        return contrastive_loss(detached, probe.positive_index, train.temperature).scalar_value();
    };
    auto emit_checkpoint = [&](uint64_t step) {
        if (train.checkpoint_dir.empty()) return;
        std::filesystem::create_directories(train.checkpoint_dir);
        char name[64];
        std::snprintf(name, sizeof(name), "ckpt_%06llu.cdm",
                      static_cast<unsigned long long>(step));
        Checkpoint ck;
        ck.step = step;
        ck.probe_loss = probe_loss();
        ck.path = train.checkpoint_dir + "/" + name;
        save_checkpoint(ck.path, result.params);
        std::ofstream meta(ck.path + ".json", std::ios::trunc);
        meta << "{\"step\": " << ck.step << ", \"probe_loss\": " << ck.probe_loss << "}\n";
        result.checkpoints.push_back(std::move(ck));
    };

    const uint64_t start_step = result.params.step();
    if (start_step == 0) emit_checkpoint(0);
    for (int local = 0; local < train.steps; ++local) {
        const uint64_t step = start_step + static_cast<uint64_t>(local);
        const PairBatch batch =
            sample_pairs(frames_by_speaker, train.batch_n, derive_seed(train.seed, "batch", step));
        BoundParams bound = bind(result.params);
        const ad::Tensor emb = encoder_forward(config, bound, batch.anchors);
        const ad::Tensor loss = contrastive_loss(emb, batch.positive_index, train.temperature);
        const double loss_v = loss.scalar_value();
        if (!std::isfinite(loss_v)) {
            throw StateError("pretrain diverged at step " + std::to_string(step));
        }
        ad::backward(loss);
        const double lr = lr_at(schedule, step);
        adam_step(result.params, bound, lr);
        result.losses.push_back(loss_v);
        result.lrs.push_back(lr);
        if (train.checkpoint_interval > 0 &&
            (step + 1) % static_cast<uint64_t>(train.checkpoint_interval) == 0) {
            emit_checkpoint(step + 1);
        }
    }
    if (train.checkpoint_interval > 0 &&
        (result.checkpoints.empty() || result.checkpoints.back().step != result.params.step())) {
        emit_checkpoint(result.params.step());
    }
    return result;
}

}  // namespace cdm
