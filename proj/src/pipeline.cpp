#include "cdm/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <thread>

#include <json.hpp>

#include "cdm/graph.hpp"
#include "cdm/metrics.hpp"
#include "cdm/separate.hpp"

namespace cdm {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string mix_id_of(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%04d", index);
    return buf;
}

void write_text(const fs::path& path, const std::string& text) {
    fs::create_directories(path.parent_path());
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open for writing: " + path.string());
    f << text;
}

json read_json(const fs::path& path) {
    std::ifstream f(path);
    if (!f) throw StateError("missing input: " + path.string());
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw FormatError("bad json in " + path.string() + ": " + e.what());
    }
    return j;
}

void require_dir(const fs::path& p, const std::string& stage, const std::string& hint) {
    if (!fs::is_directory(p)) {
        throw StateError(stage + ": missing " + p.string() + "; run " + hint + " first");
    }
}

std::vector<std::string> sorted_dir_names(const fs::path& dir) {
    std::vector<std::string> names;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (entry.is_directory()) names.push_back(entry.path().filename().string());
    }
    std::sort(names.begin(), names.end());
    return names;
}

// Clean-corpus frames grouped by speaker, speakers in sorted id order.
std::vector<Matrix> corpus_frames(const PipelineConfig& config, const std::string& workdir) {
    const fs::path corpus = fs::path(workdir) / "corpus";
    require_dir(corpus, "pretrain", "synth");
    std::vector<Matrix> by_speaker;
    for (const auto& speaker : sorted_dir_names(corpus)) {
        std::vector<Matrix> frames;
        std::vector<std::string> utts;
        for (const auto& entry : fs::directory_iterator(corpus / speaker)) {
            if (entry.path().extension() == ".wav") utts.push_back(entry.path().string());
        }
        std::sort(utts.begin(), utts.end());
        int total_rows = 0;
        for (const auto& utt : utts) {
            const Waveform w = read_wav(utt);
            frames.push_back(frame(w, config.framing.frame_len, config.framing.hop).frames);
            total_rows += frames.back().rows;
        }
        Matrix all(total_rows, config.framing.frame_len);
        int row = 0;
        for (const auto& f : frames) {
            std::copy(f.v.begin(), f.v.end(), all.row(row));
            row += f.rows;
        }
        by_speaker.push_back(std::move(all));
    }
    if (by_speaker.size() < 2) throw DataError("pretrain: corpus has fewer than two speakers");
    return by_speaker;
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.10g", v);
    return buf;
}

struct MixArtifacts {
    Waveform mixture;
    std::vector<Waveform> sources;
    json meta;
};

MixArtifacts load_mix(const fs::path& mix_dir) {
    MixArtifacts art;
    art.mixture = read_wav((mix_dir / "mixture.wav").string());
    art.meta = read_json(mix_dir / "meta.json");
    const auto speaker_ids = art.meta.at("speaker_ids");
    for (size_t c = 0; c < speaker_ids.size(); ++c) {
        art.sources.push_back(
            read_wav((mix_dir / ("s" + std::to_string(c) + ".wav")).string()));
    }
    return art;
}

}  // namespace

void parallel_for(int count, const std::function<void(int)>& fn) {
    int cap = static_cast<int>(std::thread::hardware_concurrency());
    if (const char* env = std::getenv("CONDEEPMOD_THREADS")) {
        const int parsed = std::atoi(env);
        if (parsed > 0) cap = parsed;
    }
    const int workers = std::max(1, std::min(cap, count));
    if (workers == 1) {
        for (int i = 0; i < count; ++i) fn(i);
        return;
    }
    std::atomic<int> next{0};
    std::exception_ptr first_error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (int i = next++; i < count; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!first_error) first_error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (first_error) std::rethrow_exception(first_error);
}

std::vector<std::string> list_mix_ids(const std::string& workdir) {
    const fs::path mix = fs::path(workdir) / "mix";
    if (!fs::is_directory(mix)) return {};
    return sorted_dir_names(mix);
}

void stage_synth(const PipelineConfig& config, const std::string& workdir) {
    const fs::path root(workdir);
    const auto speakers =
        make_speakers(config.corpus.speakers, derive_seed(config.seed, "speakers"));

    // Clean per-speaker utterances for pretraining.
    for (const auto& spec : speakers) {
        const fs::path dir = root / "corpus" / std::to_string(spec.speaker_id);
        fs::create_directories(dir);
        for (int u = 0; u < config.corpus.utterances_per_speaker; ++u) {
            const Waveform w =
                synth_utterance(spec, config.corpus.utterance_seconds,
                                derive_seed(config.seed, "corpus-utt", u), config.sample_rate);
            char name[32];
            std::snprintf(name, sizeof(name), "utt%03d.wav", u);
            write_wav((dir / name).string(), w);
        }
    }

    // Held-out mixtures.
    const MixtureParams params = config.mixture_params();
    parallel_for(config.mixtures.count, [&](int i) {
        Rng rng(derive_seed(config.seed, "mix-speakers", static_cast<uint64_t>(i)));
        std::vector<int> pool(speakers.size());
        for (size_t s = 0; s < speakers.size(); ++s) pool[s] = static_cast<int>(s);
        rng.shuffle(pool);
        std::vector<SpeakerSpec> chosen;
        for (int c = 0; c < config.mixtures.sources; ++c) chosen.push_back(speakers[pool[c]]);

        const uint64_t mix_seed = derive_seed(config.seed, "mixture", static_cast<uint64_t>(i));
        const MixtureRecord rec = synth_mixture(chosen, params, mix_seed);

        const std::string id = mix_id_of(i);
        const fs::path dir = root / "mix" / id;
        fs::create_directories(dir);
        write_wav((dir / "mixture.wav").string(), rec.mixture);
        for (size_t c = 0; c < rec.sources.size(); ++c) {
            write_wav((dir / ("s" + std::to_string(c) + ".wav")).string(), rec.sources[c]);
        }

        json meta;
        meta["mix_id"] = id;
        meta["seed"] = config.seed;
        meta["sample_rate"] = config.sample_rate;
        meta["speaker_ids"] = rec.speaker_ids;
        meta["gains_db"] = rec.gains_db;
        meta["overlap_fraction"] = config.mixtures.overlap_fraction;
        meta["measured_overlap_fraction"] =
            frame_overlap_fraction(rec, config.framing.frame_len, config.framing.hop);
        json activity = json::array();
        for (const auto& ivs : rec.activity) {
            json list = json::array();
            for (const auto& iv : ivs) list.push_back({iv.begin, iv.end});
            activity.push_back(list);
        }
        meta["activity"] = activity;
        write_text(dir / "meta.json", meta.dump(2) + "\n");
    });

    write_text(root / "config.json", config_to_json_string(config));
}

void stage_pretrain(const PipelineConfig& config, const std::string& workdir) {
    const fs::path root(workdir);
    const auto by_speaker = corpus_frames(config, workdir);

    PretrainConfig train;
    train.steps = config.pretrain.steps;
    train.batch_n = config.pretrain.batch;
    train.temperature = config.pretrain.temperature;
    train.lr = config.lr_schedule();
    train.seed = derive_seed(config.seed, "pretrain");
    train.checkpoint_interval = config.pretrain.checkpoint_interval;
    train.checkpoint_dir = (root / "model").string();

    PretrainResult result = pretrain(by_speaker, config.encoder_config(), train);

    // Optional pass over isolated mixture tracks, grouped by speaker.
    if (config.pretrain.finetune_steps > 0) {
        const auto mix_ids = list_mix_ids(workdir);
        std::map<int, std::vector<Matrix>> per_speaker;
        for (const auto& id : mix_ids) {
            const MixArtifacts art = load_mix(root / "mix" / id);
            const auto speaker_ids = art.meta.at("speaker_ids").get<std::vector<int>>();
            for (size_t c = 0; c < art.sources.size(); ++c) {
                per_speaker[speaker_ids[c]].push_back(
                    frame(art.sources[c], config.framing.frame_len, config.framing.hop).frames);
            }
        }
        std::vector<Matrix> tracks;
        for (auto& [speaker, chunks] : per_speaker) {
            int rows = 0;
            for (const auto& m : chunks) rows += m.rows;
            Matrix all(rows, config.framing.frame_len);
            int row = 0;
            for (const auto& m : chunks) {
                std::copy(m.v.begin(), m.v.end(), all.row(row));
                row += m.rows;
            }
            tracks.push_back(std::move(all));
        }
        PretrainConfig tune = train;
        tune.steps = config.pretrain.finetune_steps;
        PretrainResult tuned = pretrain(tracks, config.encoder_config(), tune, &result.params);
        result.params = std::move(tuned.params);
        for (size_t i = 0; i < tuned.losses.size(); ++i) {
            result.losses.push_back(tuned.losses[i]);
            result.lrs.push_back(tuned.lrs[i]);
        }
        for (auto& ck : tuned.checkpoints) result.checkpoints.push_back(std::move(ck));
    }

    save_checkpoint((root / "model" / "final.cdm").string(), result.params);
    std::string csv = "step,loss,lr\n";
    for (size_t i = 0; i < result.losses.size(); ++i) {
        csv += std::to_string(i) + "," + format_double(result.losses[i]) + "," +
               format_double(result.lrs[i]) + "\n";
    }
    write_text(root / "model" / "loss_trace.csv", csv);
}

void stage_build_graph(const PipelineConfig& config, const std::string& workdir,
                       const std::string& model_path) {
    const fs::path root(workdir);
    const std::string model =
        model_path.empty() ? (root / "model" / "final.cdm").string() : model_path;
    if (!fs::exists(model)) {
        throw StateError("build-graph: missing model " + model + "; run pretrain first");
    }
    const auto mix_ids = list_mix_ids(workdir);
    if (mix_ids.empty()) throw StateError("build-graph: no mixtures; run synth first");

    const EncoderConfig enc = config.encoder_config();
    ParamStore params = load_checkpoint(model);

    // Artifacts must not embed machine-specific absolute paths; runs with
    // the same seed compare byte-identical across work directories.
    std::error_code rel_ec;
    const fs::path rel_model = fs::relative(model, root, rel_ec);
    const std::string model_note =
        rel_ec ? fs::path(model).filename().string() : rel_model.string();

    parallel_for(static_cast<int>(mix_ids.size()), [&](int i) {
        const std::string& id = mix_ids[i];
        const Waveform mixture = read_wav((root / "mix" / id / "mixture.wav").string());
        const FrameMatrix fm = frame(mixture, config.framing.frame_len, config.framing.hop);
        ParamStore local = params;  // encode mutates nothing, but keep workers independent
        const Matrix emb = encode(enc, local, fm);
        const SimilarityGraph g = build_graph(emb, config.graph.theta);

        const fs::path dir = root / "graph" / id;
        fs::create_directories(dir);
        save_matrix((dir / "embeddings.cdm").string(), "embeddings", emb);
        save_graph((dir / "graph.bin").string(), g);
        json meta;
        meta["mix_id"] = id;
        meta["n"] = g.n;
        meta["m"] = g.m;
        meta["theta"] = config.graph.theta;
        meta["seed"] = config.seed;
        meta["model"] = model_note;
        write_text(dir / "graph.json", meta.dump(2) + "\n");
    });
}

namespace {

struct HeadOutcome {
    HardenResult hard;
    PartitionScores scores;
    double loss_final = 0.0;
    double q_soft = 0.0;
    int steps_run = 0;
};

// Graph-quality report with the stable key set downstream tooling reads.
json graph_metrics_json(const SimilarityGraph& g, const PartitionScores& scores) {
    json metrics;
    metrics["conductance"] = scores.conductance_c;
    metrics["modularity"] = scores.modularity_q;
    metrics["theta"] = g.theta;
    metrics["n"] = g.n;
    metrics["m"] = g.m;
    return metrics;
}

json head_result_json(const std::string& id, const HeadOutcome& out, uint64_t seed) {
    json result;
    result["mix_id"] = id;
    result["k_eff"] = out.hard.partition.k;
    result["loss_final"] = out.loss_final;
    result["Q"] = out.scores.modularity_q;
    result["C"] = out.scores.conductance_c;
    result["Q_communitywise"] = out.scores.modularity_communitywise;
    result["q_soft"] = out.q_soft;
    result["assignments"] = out.hard.partition.labels;
    result["surviving_columns"] = out.hard.surviving_columns;
    result["steps_run"] = out.steps_run;
    result["seed"] = seed;
    return result;
}

Matrix head_features(const PipelineConfig& config, const fs::path& root, const std::string& id,
                     HeadArch arch) {
    if (arch == HeadArch::gcn && config.head.gcn_features == "frames") {
        const Waveform mixture = read_wav((root / "mix" / id / "mixture.wav").string());
        return frame(mixture, config.framing.frame_len, config.framing.hop).frames;
    }
    return load_matrix((root / "graph" / id / "embeddings.cdm").string(), "embeddings");
}

HeadOutcome summarize_head(const SimilarityGraph& g, const Matrix& soft, double loss_final,
                           int steps_run, double min_frac) {
    HeadOutcome out;
    out.hard = harden(soft, min_frac);
    out.scores = partition_scores(g, out.hard.partition);
    out.loss_final = loss_final;
    out.steps_run = steps_run;
    const double trace = ad::trace_quadform(ad::Tensor::from_matrix(soft), g.adjacency(),
                                            g.degrees, static_cast<double>(g.m))
                             .scalar_value();
    out.q_soft = trace / (2.0 * static_cast<double>(g.m));
    return out;
}

}  // namespace

void stage_train_head(const PipelineConfig& config, const std::string& workdir,
                      const std::string& head_dir, const std::string& arch_override) {
    const fs::path root(workdir);
    const auto mix_ids = list_mix_ids(workdir);
    if (mix_ids.empty()) throw StateError("train-head: no mixtures; run synth first");
    require_dir(root / "graph", "train-head", "build-graph");

    const std::string arch_name = arch_override.empty() ? config.head.arch : arch_override;
    const HeadArch arch = arch_name == "gcn" ? HeadArch::gcn : HeadArch::mlp;
    const HeadConfig head_config = config.head_config();

    if (config.head.mode == "per-mixture") {
        parallel_for(static_cast<int>(mix_ids.size()), [&](int i) {
            const std::string& id = mix_ids[i];
            const SimilarityGraph g = load_graph((root / "graph" / id / "graph.bin").string());
            const Matrix features = head_features(config, root, id, arch);
            const uint64_t seed = derive_seed(config.seed, "head-" + arch_name, i);
            const TrainHeadResult trained =
                train_head_per_mixture(features, g, head_config, arch, seed);
            const HeadOutcome out =
                summarize_head(g, trained.assignments, trained.losses.back(),
                               trained.steps_run, head_config.min_frac);
            const fs::path dir = root / head_dir / id;
            fs::create_directories(dir);
            ParamStore params = trained.params;
            save_checkpoint((dir / "head.cdm").string(), params);
            write_text(dir / "result.json", head_result_json(id, out, seed).dump(2) + "\n");
            SimilarityGraph scored = g;
            scored.theta = config.graph.theta;  // CDG1 does not carry theta
            write_text(dir / "metrics.json",
                       graph_metrics_json(scored, out.scores).dump(2) + "\n");
        });
        return;
    }

    // Amortized: one parameter set over all mixture graphs, forward passes
    // per mixture afterwards.
    std::vector<Matrix> features;
    std::vector<SimilarityGraph> graphs;
    for (const auto& id : mix_ids) {
        graphs.push_back(load_graph((root / "graph" / id / "graph.bin").string()));
        features.push_back(head_features(config, root, id, arch));
    }
    const uint64_t seed = derive_seed(config.seed, "head-amortized-" + arch_name);
    ParamStore params = train_head_amortized(features, graphs, head_config, arch, seed,
                                             config.head.amortized_steps);
    for (size_t i = 0; i < mix_ids.size(); ++i) {
        const std::string& id = mix_ids[i];
        const Matrix soft =
            arch == HeadArch::mlp
                ? mlp_assign(params, features[i])
                : gcn_assign(params, normalized_adjacency(graphs[i]), features[i]);
        const double loss = dmon_loss_value(soft, graphs[i]);
        const HeadOutcome out = summarize_head(graphs[i], soft, loss, 0, head_config.min_frac);
        const fs::path dir = root / head_dir / id;
        fs::create_directories(dir);
        save_checkpoint((dir / "head.cdm").string(), params);
        write_text(dir / "result.json", head_result_json(id, out, seed).dump(2) + "\n");
        SimilarityGraph scored = graphs[i];
        scored.theta = config.graph.theta;
        write_text(dir / "metrics.json", graph_metrics_json(scored, out.scores).dump(2) + "\n");
    }
}

void stage_separate(const PipelineConfig& config, const std::string& workdir,
                    const std::string& head_dir) {
    const fs::path root(workdir);
    const auto mix_ids = list_mix_ids(workdir);
    if (mix_ids.empty()) throw StateError("separate: no mixtures; run synth first");
    require_dir(root / head_dir, "separate", "train-head");

    parallel_for(static_cast<int>(mix_ids.size()), [&](int i) {
        const std::string& id = mix_ids[i];
        const json result = read_json(root / head_dir / id / "result.json");
        Partition p;
        p.labels = result.at("assignments").get<std::vector<int>>();
        p.k = result.at("k_eff").get<int>();

        const Waveform mixture = read_wav((root / "mix" / id / "mixture.wav").string());
        const FrameMatrix fm = frame(mixture, config.framing.frame_len, config.framing.hop);
        const MaskSet masks = masks_from_partition(p);
        const auto estimates = apply_masks(mixture, fm, masks);

        // Mixture-consistency invariant, checked on every run.
        double worst = 0.0;
        for (size_t s = 0; s < mixture.samples.size(); ++s) {
            double total = 0.0;
            for (const auto& est : estimates) total += est.samples[s];
            worst = std::max(worst, std::abs(total - mixture.samples[s]));
        }
        if (worst > 1e-12) {
            throw StateError("separate: estimates do not sum to the mixture (" + id + ")");
        }

        const fs::path dir = root / "out" / id;
        fs::create_directories(dir);
        for (size_t c = 0; c < estimates.size(); ++c) {
            write_wav((dir / ("est" + std::to_string(c) + ".wav")).string(), estimates[c]);
        }
    });
}

void stage_eval(const PipelineConfig& config, const std::string& workdir,
                const std::string& head_dir) {
    const fs::path root(workdir);
    const auto mix_ids = list_mix_ids(workdir);
    if (mix_ids.empty()) throw StateError("eval: no mixtures; run synth first");
    require_dir(root / "out", "eval", "separate");

    std::vector<json> reports(mix_ids.size());
    parallel_for(static_cast<int>(mix_ids.size()), [&](int i) {
        const std::string& id = mix_ids[i];
        const MixArtifacts art = load_mix(root / "mix" / id);
        const json head = read_json(root / head_dir / id / "result.json");

        std::vector<Waveform> estimates;
        for (int c = 0;; ++c) {
            const fs::path p = root / "out" / id / ("est" + std::to_string(c) + ".wav");
            if (!fs::exists(p)) break;
            estimates.push_back(read_wav(p.string()));
        }
        if (estimates.empty()) throw StateError("eval: no estimates for " + id);

        // Permutation matching is defined for up to five tracks; when the
        // head kept more clusters than that, score the five loudest.
        const size_t estimates_total = estimates.size();
        if (estimates.size() > 5) {
            std::vector<std::pair<double, size_t>> by_energy;
            for (size_t c = 0; c < estimates.size(); ++c) {
                double e = 0.0;
                for (double s : estimates[c].samples) e += s * s;
                by_energy.emplace_back(-e, c);
            }
            std::sort(by_energy.begin(), by_energy.end());
            std::vector<Waveform> top;
            std::vector<size_t> keep;
            for (int c = 0; c < 5; ++c) keep.push_back(by_energy[c].second);
            std::sort(keep.begin(), keep.end());
            for (size_t c : keep) top.push_back(std::move(estimates[c]));
            estimates = std::move(top);
        }

        const SeparationScore score = match_and_score(estimates, art.sources, art.mixture);

        // Invariants asserted on every run: the trivial estimate improves
        // nothing, and SI-SNR ignores estimate scale.
        std::vector<Waveform> trivial(art.sources.size(), art.mixture);
        const SeparationScore trivial_score =
            match_and_score(trivial, art.sources, art.mixture);
        if (trivial_score.si_snri_db != 0.0) {
            throw StateError("eval: mixture baseline SI-SNRi is nonzero for " + id);
        }
        Waveform scaled = estimates[0];
        for (double& s : scaled.samples) s *= 3.0;
        const double direct = si_snr(estimates[0], art.sources[0]);
        if (std::abs(si_snr(scaled, art.sources[0]) - direct) > 1e-9) {
            throw StateError("eval: SI-SNR scale invariance violated for " + id);
        }

        const auto oracle = dominant_source_labels(art.sources, config.framing.frame_len,
                                                   config.framing.hop, config.eval.silence_rms);
        const auto assignments = head.at("assignments").get<std::vector<int>>();
        const double purity = cluster_purity(assignments, oracle);

        json report;
        report["mix_id"] = id;
        report["k_eff"] = head.at("k_eff");
        report["si_snr"] = score.si_snr_db;
        report["si_snri"] = score.si_snri_db;
        report["sdr"] = score.sdr_db;
        report["sdri"] = score.sdri_db;
        report["permutation"] = score.permutation;
        report["estimates_total"] = estimates_total;
        report["estimates_scored"] = estimates.size();
        report["per_source_si_snri"] = score.per_source_si_snri;
        report["purity"] = purity;
        report["C"] = head.at("C");
        report["Q"] = head.at("Q");
        report["seed"] = config.seed;
        write_text(root / "eval" / (id + ".json"), report.dump(2) + "\n");
        reports[i] = std::move(report);
    });

    std::string csv = "mix_id,k_eff,si_snri,sdri,purity,C,Q\n";
    EvalSummary summary;
    for (const auto& r : reports) {
        csv += r.at("mix_id").get<std::string>() + "," +
               std::to_string(r.at("k_eff").get<int>()) + "," +
               format_double(r.at("si_snri").get<double>()) + "," +
               format_double(r.at("sdri").get<double>()) + "," +
               format_double(r.at("purity").get<double>()) + "," +
               format_double(r.at("C").get<double>()) + "," +
               format_double(r.at("Q").get<double>()) + "\n";
        summary.mean_si_snri += r.at("si_snri").get<double>();
        summary.mean_sdri += r.at("sdri").get<double>();
        summary.mean_purity += r.at("purity").get<double>();
        summary.mean_conductance += r.at("C").get<double>();
        summary.mean_modularity += r.at("Q").get<double>();
        summary.mixtures += 1;
    }
    write_text(root / "eval" / "summary.csv", csv);

    const double n = std::max(1, summary.mixtures);
    json agg;
    agg["mixtures"] = summary.mixtures;
    agg["mean_si_snri"] = summary.mean_si_snri / n;
    agg["mean_sdri"] = summary.mean_sdri / n;
    agg["mean_purity"] = summary.mean_purity / n;
    agg["mean_C"] = summary.mean_conductance / n;
    agg["mean_Q"] = summary.mean_modularity / n;
    agg["seed"] = config.seed;
    write_text(root / "eval" / "summary.json", agg.dump(2) + "\n");
}

EvalSummary read_eval_summary(const std::string& workdir) {
    const json j = read_json(fs::path(workdir) / "eval" / "summary.json");
    EvalSummary s;
    s.mixtures = j.at("mixtures").get<int>();
    s.mean_si_snri = j.at("mean_si_snri").get<double>();
    s.mean_sdri = j.at("mean_sdri").get<double>();
    s.mean_purity = j.at("mean_purity").get<double>();
    s.mean_conductance = j.at("mean_C").get<double>();
    s.mean_modularity = j.at("mean_Q").get<double>();
    return s;
}

HeadSummary read_head_summary(const std::string& workdir, const std::string& head_dir) {
    const fs::path dir = fs::path(workdir) / head_dir;
    require_dir(dir, "read_head_summary", "train-head");
    HeadSummary s;
    for (const auto& id : sorted_dir_names(dir)) {
        const json r = read_json(dir / id / "result.json");
        s.mean_conductance += r.at("C").get<double>();
        s.mean_modularity += r.at("Q").get<double>();
        s.mixtures += 1;
    }
    if (s.mixtures > 0) {
        s.mean_conductance /= s.mixtures;
        s.mean_modularity /= s.mixtures;
    }
    return s;
}

void stage_trend_report(const PipelineConfig& config, const std::string& workdir) {
    const fs::path root(workdir);
    const fs::path model_dir = root / "model";
    require_dir(model_dir, "trend-report", "pretrain");
    auto mix_ids = list_mix_ids(workdir);
    if (mix_ids.empty()) throw StateError("trend-report: no mixtures; run synth first");
    if (static_cast<int>(mix_ids.size()) > config.trend.mixtures) {
        mix_ids.resize(config.trend.mixtures);
    }

    // Checkpoints in step order, thinned to a strictly decreasing probe loss.
    struct Ckpt {
        uint64_t step;
        double loss;
        std::string path;
    };
    std::vector<Ckpt> all;
    for (const auto& entry : fs::directory_iterator(model_dir)) {
        const std::string name = entry.path().filename().string();
        if (name.rfind("ckpt_", 0) == 0 && entry.path().extension() == ".json") {
            const json meta = read_json(entry.path());
            Ckpt ck;
            ck.step = meta.at("step").get<uint64_t>();
            ck.loss = meta.at("probe_loss").get<double>();
            ck.path = entry.path().string();
            ck.path = ck.path.substr(0, ck.path.size() - 5);  // drop .json
            all.push_back(std::move(ck));
        }
    }
    std::sort(all.begin(), all.end(), [](const Ckpt& a, const Ckpt& b) { return a.step < b.step; });
    if (all.size() < 2) throw StateError("trend-report: need at least two checkpoints");
    std::vector<Ckpt> kept;
    for (const auto& ck : all) {
        if (kept.empty() || ck.loss < kept.back().loss) kept.push_back(ck);
    }
    if (static_cast<int>(kept.size()) > config.trend.max_checkpoints) {
        std::vector<Ckpt> thinned;
        const int target = config.trend.max_checkpoints;
        for (int i = 0; i < target; ++i) {
            const size_t idx = static_cast<size_t>(
                std::llround(static_cast<double>(i) * (kept.size() - 1) / (target - 1)));
            thinned.push_back(kept[idx]);
        }
        kept = std::move(thinned);
    }

    const EncoderConfig enc = config.encoder_config();
    const HeadConfig head_config = config.head_config();
    std::vector<TrendRow> rows(kept.size());

    // One task per (checkpoint, mixture) pair; deterministic reduce after.
    const int tasks = static_cast<int>(kept.size() * mix_ids.size());
    std::vector<PartitionScores> scores(tasks);
    parallel_for(tasks, [&](int t) {
        const size_t ck_idx = static_cast<size_t>(t) / mix_ids.size();
        const size_t mx_idx = static_cast<size_t>(t) % mix_ids.size();
        const std::string& id = mix_ids[mx_idx];
        ParamStore params = load_checkpoint(kept[ck_idx].path);
        const Waveform mixture = read_wav((root / "mix" / id / "mixture.wav").string());
        const FrameMatrix fm = frame(mixture, config.framing.frame_len, config.framing.hop);
        const Matrix emb = encode(enc, params, fm);
        const SimilarityGraph g = build_graph(emb, config.graph.theta);
        const uint64_t seed = derive_seed(config.seed, "trend-head", mx_idx);
        const TrainHeadResult trained =
            train_head_per_mixture(emb, g, head_config, HeadArch::mlp, seed);
        const HardenResult hard = harden(trained.assignments, head_config.min_frac);
        scores[t] = partition_scores(g, hard.partition);
    });

    for (size_t ck_idx = 0; ck_idx < kept.size(); ++ck_idx) {
        TrendRow row;
        row.step = kept[ck_idx].step;
        row.loss = kept[ck_idx].loss;
        for (size_t mx_idx = 0; mx_idx < mix_ids.size(); ++mx_idx) {
            const auto& s = scores[ck_idx * mix_ids.size() + mx_idx];
            row.conductance += s.conductance_c;
            row.modularity += s.modularity_q;
        }
        row.conductance /= static_cast<double>(mix_ids.size());
        row.modularity /= static_cast<double>(mix_ids.size());
        rows[ck_idx] = row;
    }

    std::string csv = "step,loss,conductance,modularity\n";
    std::vector<double> losses, cs, qs;
    json jrows = json::array();
    for (const auto& row : rows) {
        csv += std::to_string(row.step) + "," + format_double(row.loss) + "," +
               format_double(row.conductance) + "," + format_double(row.modularity) + "\n";
        losses.push_back(row.loss);
        cs.push_back(row.conductance);
        qs.push_back(row.modularity);
        jrows.push_back({{"step", row.step},
                         {"loss", row.loss},
                         {"conductance", row.conductance},
                         {"modularity", row.modularity}});
    }
    json out;
    out["rows"] = jrows;
    out["seed"] = config.seed;
    out["spearman_loss_conductance"] = rows.size() >= 2 ? spearman(losses, cs) : 0.0;
    out["spearman_loss_modularity"] = rows.size() >= 2 ? spearman(losses, qs) : 0.0;
    write_text(root / "trend" / "trend.csv", csv);
    write_text(root / "trend" / "trend.json", out.dump(2) + "\n");
}

TrendReport read_trend_report(const std::string& workdir) {
    const json j = read_json(fs::path(workdir) / "trend" / "trend.json");
    TrendReport report;
    for (const auto& r : j.at("rows")) {
        TrendRow row;
        row.step = r.at("step").get<uint64_t>();
        row.loss = r.at("loss").get<double>();
        row.conductance = r.at("conductance").get<double>();
        row.modularity = r.at("modularity").get<double>();
        report.rows.push_back(row);
    }
    report.spearman_loss_conductance = j.at("spearman_loss_conductance").get<double>();
    report.spearman_loss_modularity = j.at("spearman_loss_modularity").get<double>();
    return report;
}

}  // namespace cdm
