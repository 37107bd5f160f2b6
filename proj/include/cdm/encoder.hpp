#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cdm/dsp.hpp"
#include "cdm/optim.hpp"
#include "cdm/tensor.hpp"

namespace cdm {

struct EncoderLayer {
    int filters = 32;
    int kernel = 3;
    int stride = 1;
    int pool = 2;
    int pool_stride = 2;
};

/// Frame encoder: six (layer_norm -> conv1d -> relu -> maxpool) stages over
/// the raw 256-sample frame, then a linear projection to embed_dim and row
/// L2 normalization.
struct EncoderConfig {
    std::vector<EncoderLayer> layers;
    int frame_len = 256;
    int embed_dim = 128;
    double ln_eps = 1e-5;

    static EncoderConfig defaults();
    /// Channels * length after the conv/pool stack; validates every stage.
    int flatten_width() const;
};

ParamStore init_encoder(const EncoderConfig& config, uint64_t seed);

/// Differentiable forward over a (batch x frame_len) matrix of frames.
ad::Tensor encoder_forward(const EncoderConfig& config, const BoundParams& params,
                           const Matrix& frames);

/// Inference path: embeds every frame, rows unit-norm. Deterministic.
Matrix encode(const EncoderConfig& config, ParamStore& params, const FrameMatrix& frames);

/// Training batch: batch_n frames arranged as batch_n/2 disjoint positive
/// pairs; positive_index is an involution (each anchor's partner).
struct PairBatch {
    Matrix anchors;
    std::vector<int> positive_index;
    std::vector<int> speaker;
};

/// Draws batch_n/2 pairs i.i.d.: a uniformly random speaker, then two
/// distinct frames of that speaker. Only speakers holding >= 2 frames are
/// eligible; fewer than two such speakers is a DataError.
PairBatch sample_pairs(const std::vector<Matrix>& frames_by_speaker, int batch_n, uint64_t seed);

/// Mean over anchors of -log( exp(s_ip/t) / sum_{j != i} exp(s_ij/t) )
/// where s = embeddings @ embeddings^T. The denominator spans the positive
/// and the n-2 in-batch negatives; temperature 1 gives the raw form.
ad::Tensor contrastive_loss(const ad::Tensor& embeddings, const std::vector<int>& positive_index,
                            double temperature);

struct PretrainConfig {
    int steps = 600;
    int batch_n = 64;
    double temperature = 0.5;
    CyclicalLrSchedule lr;
    uint64_t seed = 1;
    int checkpoint_interval = 0;  // 0 disables mid-run checkpoints
    std::string checkpoint_dir;
};

struct Checkpoint {
    uint64_t step = 0;
    double probe_loss = 0.0;
    std::string path;
};

struct PretrainResult {
    ParamStore params;
    std::vector<double> losses;
    std::vector<double> lrs;
    std::vector<Checkpoint> checkpoints;
};

/// Contrastive pretraining with Adam under the cyclical schedule. Each
/// checkpoint records the loss of a fixed probe batch so models from
/// different steps are comparable. NaN loss aborts with a StateError.
/// Continues from params if resume is non-null.
PretrainResult pretrain(const std::vector<Matrix>& frames_by_speaker, const EncoderConfig& config,
                        const PretrainConfig& train, ParamStore* resume = nullptr);

}  // namespace cdm
