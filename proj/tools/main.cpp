// Command-line front end for the separation pipeline. Stages read and write
// artifacts under --workdir; every stage is deterministic for a fixed seed,
// so re-running a stage with unchanged inputs reproduces its outputs byte
// for byte. Errors land on stderr as one JSON object.

#include <cstdio>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cdm/pipeline.hpp"

namespace {

struct CommonArgs {
    std::string workdir;
    std::string config_path;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--workdir", args.workdir, "artifact root directory")->required();
    cmd->add_option("--config", args.config_path, "pipeline config JSON");
    cmd->add_option("--set", args.overrides, "override config entries, e.g. graph.theta=0.7");
}

int fail(const std::string& stage, const std::exception& e) {
    nlohmann::json err;
    err["stage"] = stage;
    err["error"] = e.what();
    std::fprintf(stderr, "%s\n", err.dump().c_str());
    return 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"contrastive deep-modularity speech separation pipeline"};
    app.require_subcommand(1);

    CommonArgs args;
    int speakers_flag = 0;
    uint64_t seed_flag = 0;
    bool seed_set = false, speakers_set = false;
    std::string model_path, arch_override, head_dir = "head";

    CLI::App* synth = app.add_subcommand("synth", "generate the speaker corpus and mixtures");
    add_common(synth, args);
    synth->add_option("--speakers", speakers_flag, "number of synthetic speakers")
        ->each([&](const std::string&) { speakers_set = true; });
    synth->add_option("--seed", seed_flag, "root seed")
        ->each([&](const std::string&) { seed_set = true; });

    CLI::App* pretrain = app.add_subcommand("pretrain", "contrastive encoder pretraining");
    add_common(pretrain, args);

    CLI::App* build_graph =
        app.add_subcommand("build-graph", "embed mixtures and build similarity graphs");
    add_common(build_graph, args);
    build_graph->add_option("--model", model_path, "encoder checkpoint (default final.cdm)");

    CLI::App* train_head = app.add_subcommand("train-head", "optimize the cluster heads");
    add_common(train_head, args);
    train_head->add_option("--arch", arch_override, "head architecture: mlp or gcn");
    train_head->add_option("--head-dir", head_dir, "output subdirectory (default: head)");

    CLI::App* separate = app.add_subcommand("separate", "reconstruct per-cluster estimates");
    add_common(separate, args);
    separate->add_option("--head-dir", head_dir, "head results to use");

    CLI::App* eval = app.add_subcommand("eval", "score estimates against references");
    add_common(eval, args);
    eval->add_option("--head-dir", head_dir, "head results to use");

    CLI::App* trend =
        app.add_subcommand("trend-report", "cluster quality across pretraining checkpoints");
    add_common(trend, args);

    CLI11_PARSE(app, argc, argv);

    const std::string stage = app.get_subcommands().front()->get_name();
    try {
        if (seed_set) args.overrides.push_back("seed=" + std::to_string(seed_flag));
        if (speakers_set) {
            args.overrides.push_back("corpus.speakers=" + std::to_string(speakers_flag));
        }
        const cdm::PipelineConfig config = cdm::load_config(args.config_path, args.overrides);

        if (synth->parsed()) {
            cdm::stage_synth(config, args.workdir);
        } else if (pretrain->parsed()) {
            cdm::stage_pretrain(config, args.workdir);
        } else if (build_graph->parsed()) {
            cdm::stage_build_graph(config, args.workdir, model_path);
        } else if (train_head->parsed()) {
            cdm::stage_train_head(config, args.workdir, head_dir, arch_override);
        } else if (separate->parsed()) {
            cdm::stage_separate(config, args.workdir, head_dir);
        } else if (eval->parsed()) {
            cdm::stage_eval(config, args.workdir, head_dir);
        } else if (trend->parsed()) {
            cdm::stage_trend_report(config, args.workdir);
        }
    } catch (const std::exception& e) {
        return fail(stage, e);
    }
    return 0;
}
