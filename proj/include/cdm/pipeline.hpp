#pragma once

#include <functional>
#include <string>
#include <vector>

#include "cdm/config.hpp"

namespace cdm {

// Stage functions behind the CLI subcommands. Each one is idempotent for
// fixed inputs and seed: re-running writes byte-identical artifacts.
// Layout under the workdir:
//   corpus/<speaker_id>/<utt_id>.wav
//   mix/<mix_id>/{mixture.wav, s<c>.wav, meta.json}
//   model/{ckpt_<step>.cdm[.json], final.cdm, loss_trace.csv}
//   graph/<mix_id>/{graph.bin, embeddings.cdm, graph.json}
//   <head_dir>/<mix_id>/{result.json, head.cdm}
//   out/<mix_id>/est<c>.wav
//   eval/{<mix_id>.json, summary.csv, summary.json}
//   trend/{trend.csv, trend.json}

void stage_synth(const PipelineConfig& config, const std::string& workdir);
void stage_pretrain(const PipelineConfig& config, const std::string& workdir);

/// model_path defaults to <workdir>/model/final.cdm; pass a checkpoint from
/// another run to reuse a pretrained encoder.
void stage_build_graph(const PipelineConfig& config, const std::string& workdir,
                       const std::string& model_path = "");

/// arch_override: "" uses config.head.arch. head_dir names the output
/// subdirectory so baselines can live next to the main head.
void stage_train_head(const PipelineConfig& config, const std::string& workdir,
                      const std::string& head_dir = "head",
                      const std::string& arch_override = "");

void stage_separate(const PipelineConfig& config, const std::string& workdir,
                    const std::string& head_dir = "head");

void stage_eval(const PipelineConfig& config, const std::string& workdir,
                const std::string& head_dir = "head");

void stage_trend_report(const PipelineConfig& config, const std::string& workdir);

struct EvalSummary {
    int mixtures = 0;
    double mean_si_snri = 0.0;
    double mean_sdri = 0.0;
    double mean_purity = 0.0;
    double mean_conductance = 0.0;
    double mean_modularity = 0.0;
};

EvalSummary read_eval_summary(const std::string& workdir);

struct TrendRow {
    uint64_t step = 0;
    double loss = 0.0;
    double conductance = 0.0;
    double modularity = 0.0;
};

struct TrendReport {
    std::vector<TrendRow> rows;
    double spearman_loss_conductance = 0.0;
    double spearman_loss_modularity = 0.0;
};

TrendReport read_trend_report(const std::string& workdir);

/// Mean C and Q over every head result under head_dir (the Table-1 style
/// aggregate for one arch).
struct HeadSummary {
    double mean_conductance = 0.0;
    double mean_modularity = 0.0;
    int mixtures = 0;
};
HeadSummary read_head_summary(const std::string& workdir, const std::string& head_dir);

/// Worker pool over independent mixtures. Thread count is capped by the
/// CONDEEPMOD_THREADS environment variable; outputs do not depend on it.
void parallel_for(int count, const std::function<void(int)>& fn);

/// Sorted mix ids found under <workdir>/mix.
std::vector<std::string> list_mix_ids(const std::string& workdir);

}  // namespace cdm
