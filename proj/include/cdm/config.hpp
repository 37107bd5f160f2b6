#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cdm/encoder.hpp"
#include "cdm/head.hpp"
#include "cdm/synth.hpp"

namespace cdm {

/// One JSON document drives every stage. Every field has a default, unknown
/// keys are rejected with their full path, and `--set key=value` overrides
/// individual entries so experiment manifests stay reproducible.
struct PipelineConfig {
    uint64_t seed = 42;
    int sample_rate = 8000;

    struct Framing {
        int frame_len = 256;
        int hop = 64;
    } framing;

    struct Corpus {
        int speakers = 8;
        int utterances_per_speaker = 5;
        double utterance_seconds = 4.0;
    } corpus;

    struct Mixtures {
        int count = 20;
        int sources = 2;
        double seconds = 4.0;
        double overlap_fraction = 0.25;
        double gain_db_lo = 0.0;
        double gain_db_hi = 5.0;
    } mixtures;

    struct Encoder {
        int embed_dim = 128;
        double ln_eps = 1e-5;
        std::vector<EncoderLayer> layers;  // empty selects the stock 6-layer stack
    } encoder;

    struct Pretrain {
        int steps = 600;
        int batch = 64;
        double temperature = 0.5;
        double lr_min = 1e-4;
        double lr_max = 1e-1;
        int cycle_steps = 2000;
        int checkpoint_interval = 200;
        int finetune_steps = 0;  // optional pass over isolated mixture tracks
    } pretrain;

    struct Graph {
        double theta = 0.5;
    } graph;

    struct Head {
        int hidden = 512;
        int k_max = 16;
        int max_steps = 2000;
        int patience = 50;
        double min_delta = 1e-5;
        double lr = 0.5;
        double min_frac = 0.02;
        std::string mode = "per-mixture";  // or "amortized"
        std::string arch = "mlp";          // or "gcn"
        std::string gcn_features = "frames";
        int amortized_steps = 2000;
    } head;

    struct Trend {
        int mixtures = 8;
        int max_checkpoints = 5;  // evenly thinned after the decreasing-loss filter
    } trend;

    struct Eval {
        double silence_rms = 1e-5;
    } eval;

    EncoderConfig encoder_config() const;
    HeadConfig head_config() const;
    CyclicalLrSchedule lr_schedule() const;
    MixtureParams mixture_params() const;
    void validate() const;
};

/// Loads the config (defaults when path is empty), applies dotted-path
/// overrides like "graph.theta=0.7", validates, rejects unknown keys.
PipelineConfig load_config(const std::string& path, const std::vector<std::string>& overrides);

std::string config_to_json_string(const PipelineConfig& config);

}  // namespace cdm
