#include "cdm/config.hpp"

#include <fstream>

#include <json.hpp>

namespace cdm {

using nlohmann::json;

namespace {

// Strict object reader: every touched key is marked, leftovers are errors
// reported with their dotted path.
class StrictObject {
  public:
    StrictObject(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ArgumentError("config: " + path_ + " must be an object");
    }

    template <typename T>
    void get(const char* key, T& out) {
        auto it = j_.find(key);
        if (it == j_.end()) return;
        used_.push_back(key);
        try {
            out = it->get<T>();
        } catch (const json::exception&) {
            throw ArgumentError("config: bad value type at " + child(key));
        }
    }

    bool has(const char* key) const { return j_.contains(key); }
    void mark(const char* key) { used_.push_back(key); }
    const json& raw(const char* key) { return j_.at(key); }
    std::string child(const char* key) const {
        return path_.empty() ? key : path_ + "." + key;
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it) {
            bool known = false;
            for (const auto& k : used_) known = known || (k == it.key());
            if (!known) throw ArgumentError("config: unknown key " + child(it.key().c_str()));
        }
    }

    const json& object(const char* key) {
        used_.push_back(key);
        return j_.at(key);
    }

  private:
    const json& j_;
    std::string path_;
    std::vector<std::string> used_;
};

PipelineConfig from_json(const json& j) {
    PipelineConfig c;
    StrictObject root(j, "");
    root.get("seed", c.seed);
    root.get("sample_rate", c.sample_rate);

    if (root.has("framing")) {
        StrictObject o(root.object("framing"), "framing");
        o.get("frame_len", c.framing.frame_len);
        o.get("hop", c.framing.hop);
        o.finish();
    }
    if (root.has("corpus")) {
        StrictObject o(root.object("corpus"), "corpus");
        o.get("speakers", c.corpus.speakers);
        o.get("utterances_per_speaker", c.corpus.utterances_per_speaker);
        o.get("utterance_seconds", c.corpus.utterance_seconds);
        o.finish();
    }
    if (root.has("mixtures")) {
        StrictObject o(root.object("mixtures"), "mixtures");
        o.get("count", c.mixtures.count);
        o.get("sources", c.mixtures.sources);
        o.get("seconds", c.mixtures.seconds);
        o.get("overlap_fraction", c.mixtures.overlap_fraction);
        if (o.has("gain_db")) {
            o.mark("gain_db");
            const json& g = o.raw("gain_db");
            if (!g.is_array() || g.size() != 2) {
                throw ArgumentError("config: mixtures.gain_db must be [lo, hi]");
            }
            c.mixtures.gain_db_lo = g[0].get<double>();
            c.mixtures.gain_db_hi = g[1].get<double>();
        }
        o.finish();
    }
    if (root.has("encoder")) {
        StrictObject o(root.object("encoder"), "encoder");
        o.get("embed_dim", c.encoder.embed_dim);
        o.get("ln_eps", c.encoder.ln_eps);
        if (o.has("layers")) {
            o.mark("layers");
            const json& layers = o.raw("layers");
            if (!layers.is_array()) throw ArgumentError("config: encoder.layers must be a list");
            for (size_t i = 0; i < layers.size(); ++i) {
                StrictObject lo(layers[i], "encoder.layers[" + std::to_string(i) + "]");
                EncoderLayer layer;
                lo.get("filters", layer.filters);
                lo.get("kernel", layer.kernel);
                lo.get("stride", layer.stride);
                lo.get("pool", layer.pool);
                lo.get("pool_stride", layer.pool_stride);
                lo.finish();
                c.encoder.layers.push_back(layer);
            }
        }
        o.finish();
    }
    if (root.has("pretrain")) {
        StrictObject o(root.object("pretrain"), "pretrain");
        o.get("steps", c.pretrain.steps);
        o.get("batch", c.pretrain.batch);
        o.get("temperature", c.pretrain.temperature);
        o.get("lr_min", c.pretrain.lr_min);
        o.get("lr_max", c.pretrain.lr_max);
        o.get("cycle_steps", c.pretrain.cycle_steps);
        o.get("checkpoint_interval", c.pretrain.checkpoint_interval);
        o.get("finetune_steps", c.pretrain.finetune_steps);
        o.finish();
    }
    if (root.has("graph")) {
        StrictObject o(root.object("graph"), "graph");
        o.get("theta", c.graph.theta);
        o.finish();
    }
    if (root.has("head")) {
        StrictObject o(root.object("head"), "head");
        o.get("hidden", c.head.hidden);
        o.get("k_max", c.head.k_max);
        o.get("max_steps", c.head.max_steps);
        o.get("patience", c.head.patience);
        o.get("min_delta", c.head.min_delta);
        o.get("lr", c.head.lr);
        o.get("min_frac", c.head.min_frac);
        o.get("mode", c.head.mode);
        o.get("arch", c.head.arch);
        o.get("gcn_features", c.head.gcn_features);
        o.get("amortized_steps", c.head.amortized_steps);
        o.finish();
    }
    if (root.has("trend")) {
        StrictObject o(root.object("trend"), "trend");
        o.get("mixtures", c.trend.mixtures);
        o.get("max_checkpoints", c.trend.max_checkpoints);
        o.finish();
    }
    if (root.has("eval")) {
        StrictObject o(root.object("eval"), "eval");
        o.get("silence_rms", c.eval.silence_rms);
        o.finish();
    }
    root.finish();
    c.validate();
    return c;
}

json to_json(const PipelineConfig& c) {
    json j;
    j["seed"] = c.seed;
    j["sample_rate"] = c.sample_rate;
    j["framing"] = {{"frame_len", c.framing.frame_len}, {"hop", c.framing.hop}};
    j["corpus"] = {{"speakers", c.corpus.speakers},
                   {"utterances_per_speaker", c.corpus.utterances_per_speaker},
                   {"utterance_seconds", c.corpus.utterance_seconds}};
    j["mixtures"] = {{"count", c.mixtures.count},
                     {"sources", c.mixtures.sources},
                     {"seconds", c.mixtures.seconds},
                     {"overlap_fraction", c.mixtures.overlap_fraction},
                     {"gain_db", {c.mixtures.gain_db_lo, c.mixtures.gain_db_hi}}};
    j["encoder"] = {{"embed_dim", c.encoder.embed_dim}, {"ln_eps", c.encoder.ln_eps}};
    if (!c.encoder.layers.empty()) {
        json layers = json::array();
        for (const auto& l : c.encoder.layers) {
            layers.push_back({{"filters", l.filters},
                              {"kernel", l.kernel},
                              {"stride", l.stride},
                              {"pool", l.pool},
                              {"pool_stride", l.pool_stride}});
        }
        j["encoder"]["layers"] = layers;
    }
    j["pretrain"] = {{"steps", c.pretrain.steps},
                     {"batch", c.pretrain.batch},
                     {"temperature", c.pretrain.temperature},
                     {"lr_min", c.pretrain.lr_min},
                     {"lr_max", c.pretrain.lr_max},
                     {"cycle_steps", c.pretrain.cycle_steps},
                     {"checkpoint_interval", c.pretrain.checkpoint_interval},
                     {"finetune_steps", c.pretrain.finetune_steps}};
    j["graph"] = {{"theta", c.graph.theta}};
    j["head"] = {{"hidden", c.head.hidden},
                 {"k_max", c.head.k_max},
                 {"max_steps", c.head.max_steps},
                 {"patience", c.head.patience},
                 {"min_delta", c.head.min_delta},
                 {"lr", c.head.lr},
                 {"min_frac", c.head.min_frac},
                 {"mode", c.head.mode},
                 {"arch", c.head.arch},
                 {"gcn_features", c.head.gcn_features},
                 {"amortized_steps", c.head.amortized_steps}};
    j["trend"] = {{"mixtures", c.trend.mixtures},
                  {"max_checkpoints", c.trend.max_checkpoints}};
    j["eval"] = {{"silence_rms", c.eval.silence_rms}};
    return j;
}

}  // namespace

EncoderConfig PipelineConfig::encoder_config() const {
    EncoderConfig ec = EncoderConfig::defaults();
    if (!encoder.layers.empty()) ec.layers = encoder.layers;
    ec.frame_len = framing.frame_len;
    ec.embed_dim = encoder.embed_dim;
    ec.ln_eps = encoder.ln_eps;
    return ec;
}

HeadConfig PipelineConfig::head_config() const {
    HeadConfig hc;
    hc.hidden = head.hidden;
    hc.k_max = head.k_max;
    hc.max_steps = head.max_steps;
    hc.patience = head.patience;
    hc.min_delta = head.min_delta;
    hc.lr = head.lr;
    hc.min_frac = head.min_frac;
    return hc;
}

CyclicalLrSchedule PipelineConfig::lr_schedule() const {
    CyclicalLrSchedule s;
    s.lr_min = pretrain.lr_min;
    s.lr_max = pretrain.lr_max;
    s.cycle_steps = pretrain.cycle_steps;
    return s;
}

MixtureParams PipelineConfig::mixture_params() const {
    MixtureParams p;
    p.duration_s = mixtures.seconds;
    p.overlap_fraction = mixtures.overlap_fraction;
    p.gain_db_lo = mixtures.gain_db_lo;
    p.gain_db_hi = mixtures.gain_db_hi;
    p.sample_rate = sample_rate;
    p.frame_len = framing.frame_len;
    return p;
}

void PipelineConfig::validate() const {
    if (sample_rate <= 0) throw ArgumentError("config: sample_rate must be positive");
    if (framing.frame_len <= 0 || framing.hop <= 0) {
        throw ArgumentError("config: framing values must be positive");
    }
    if (corpus.speakers < 2) throw ArgumentError("config: corpus.speakers must be >= 2");
    if (corpus.utterances_per_speaker < 1 || corpus.utterance_seconds <= 0.0) {
        throw ArgumentError("config: corpus utterance settings invalid");
    }
    if (mixtures.sources < 2 || mixtures.sources > 5) {
        throw ArgumentError("config: mixtures.sources must be 2..5");
    }
    if (mixtures.overlap_fraction < 0.0 || mixtures.overlap_fraction > 1.0) {
        throw ArgumentError("config: mixtures.overlap_fraction outside [0, 1]");
    }
    if (mixtures.gain_db_hi < mixtures.gain_db_lo) {
        throw ArgumentError("config: mixtures.gain_db range is empty");
    }
    if (pretrain.steps < 0 || pretrain.batch < 2 || pretrain.batch % 2 != 0) {
        throw ArgumentError("config: pretrain.batch must be even and >= 2");
    }
    if (pretrain.temperature <= 0.0) throw ArgumentError("config: pretrain.temperature <= 0");
    if (pretrain.lr_min <= 0.0 || pretrain.lr_min >= pretrain.lr_max) {
        throw ArgumentError("config: pretrain lr range invalid");
    }
    if (head.mode != "per-mixture" && head.mode != "amortized") {
        throw ArgumentError("config: head.mode must be per-mixture or amortized");
    }
    if (head.arch != "mlp" && head.arch != "gcn") {
        throw ArgumentError("config: head.arch must be mlp or gcn");
    }
    if (head.gcn_features != "frames" && head.gcn_features != "embeddings") {
        throw ArgumentError("config: head.gcn_features must be frames or embeddings");
    }
    if (trend.mixtures < 1) throw ArgumentError("config: trend.mixtures must be >= 1");
    if (trend.max_checkpoints < 2) {
        throw ArgumentError("config: trend.max_checkpoints must be >= 2");
    }
    head_config().validate();
    encoder_config().flatten_width();
}

PipelineConfig load_config(const std::string& path, const std::vector<std::string>& overrides) {
    json j = json::object();
    if (!path.empty()) {
        std::ifstream f(path);
        if (!f) throw ArgumentError("config: cannot open " + path);
        try {
            f >> j;
        } catch (const json::exception& e) {
            throw FormatError("config: parse error in " + path + ": " + e.what());
        }
    }
    for (const auto& ov : overrides) {
        const auto eq = ov.find('=');
        if (eq == std::string::npos) {
            throw ArgumentError("config: override must look like key=value: " + ov);
        }
        const std::string key = ov.substr(0, eq);
        const std::string value = ov.substr(eq + 1);
        json parsed;
        try {
            parsed = json::parse(value);
        } catch (const json::exception&) {
            parsed = value;  // bare strings stay strings
        }
        json* cursor = &j;
        size_t pos = 0;
        while (true) {
            const auto dot = key.find('.', pos);
            const std::string part = key.substr(pos, dot - pos);
            if (part.empty()) throw ArgumentError("config: bad override path: " + key);
            if (dot == std::string::npos) {
                (*cursor)[part] = parsed;
                break;
            }
            cursor = &(*cursor)[part];
            pos = dot + 1;
        }
    }
    return from_json(j);
}

std::string config_to_json_string(const PipelineConfig& config) {
    return to_json(config).dump(2) + "\n";
}

}  // namespace cdm
