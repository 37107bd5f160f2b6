#include "cdm/synth.hpp"

#include <algorithm>
#include <cmath>

namespace cdm {

namespace {

constexpr double kTwoPi = 2.0 * M_PI;
constexpr double kAmDepth = 0.92;     // syllable trough amplitude = 1 - depth
constexpr double kAmShape = 3.0;      // sharpens the syllable pulses
constexpr double kActiveRms = 0.05;   // reference RMS per source before gain
constexpr double kFadeSeconds = 0.010;

// Slow gain drift: control points every half second, cosine-interpolated.
struct GainDrift {
    std::vector<double> points;
    double step_s = 0.5;

    GainDrift(Rng& rng, double duration_s) {
        const int n = static_cast<int>(duration_s / step_s) + 2;
        points.reserve(n);
        for (int i = 0; i < n; ++i) points.push_back(rng.uniform(0.7, 1.0));
    }

    double at(double t) const {
        const double x = t / step_s;
        const auto k = static_cast<size_t>(x);
        const size_t k1 = std::min(k + 1, points.size() - 1);
        const double frac = x - static_cast<double>(k);
        const double c = 0.5 * (1.0 - std::cos(M_PI * frac));
        return points[k] * (1.0 - c) + points[k1] * c;
    }
};

}  // namespace

std::vector<SpeakerSpec> make_speakers(int n, uint64_t seed) {
    if (n < 1) throw ArgumentError("need at least one speaker");
    if (n > 24) throw ArgumentError("f0 grid supports at most 24 distinct speakers");

    const double f0_lo = 92.0;
    const double f0_step = n > 1 ? std::min(36.0, 236.0 / (n - 1)) : 0.0;

    std::vector<SpeakerSpec> specs;
    specs.reserve(n);
    for (int i = 0; i < n; ++i) {
        Rng rng(derive_seed(seed, "speaker", static_cast<uint64_t>(i)));
        SpeakerSpec s;
        s.speaker_id = i;
        s.f0 = f0_lo + f0_step * i + rng.uniform(-2.0, 2.0);
        s.am_rate = rng.uniform(2.2, 5.5);
        s.seed = derive_seed(seed, "speaker-stream", static_cast<uint64_t>(i));

        const double gamma = rng.uniform(0.6, 1.4);
        const double even_gain = rng.uniform(0.4, 1.0);
        for (int h = 1; h <= 8; ++h) {
            double amp = std::pow(h, -gamma) * rng.uniform(0.75, 1.25);
            if (h % 2 == 0) amp *= even_gain;
            if (h == 1) amp = 1.0;
            s.harmonics.emplace_back(static_cast<double>(h), amp);
        }
        specs.push_back(std::move(s));
    }
    return specs;
}

Waveform synth_utterance(const SpeakerSpec& spec, double duration_s, uint64_t seed,
                         int sample_rate) {
    if (duration_s <= 0.0) throw ArgumentError("duration_s must be positive");
    if (spec.harmonics.empty()) throw ArgumentError("speaker spec has no harmonics");
    if (spec.f0 < 80.0 || spec.f0 > 400.0) throw ArgumentError("f0 outside [80, 400] Hz");

    Rng rng(derive_seed(spec.seed, "utterance", seed));
    std::vector<double> phases;
    phases.reserve(spec.harmonics.size());
    for (size_t h = 0; h < spec.harmonics.size(); ++h) phases.push_back(rng.uniform(0.0, kTwoPi));
    const double am_phase = rng.uniform(0.0, kTwoPi);
    GainDrift drift(rng, duration_s);

    const auto n = static_cast<size_t>(std::llround(duration_s * sample_rate));
    Waveform w;
    w.sample_rate = sample_rate;
    w.samples.resize(n);

    double peak = 0.0;
    for (size_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(i) / sample_rate;
        double x = 0.0;
        for (size_t h = 0; h < spec.harmonics.size(); ++h) {
            const auto& [mult, amp] = spec.harmonics[h];
            x += amp * std::sin(kTwoPi * spec.f0 * mult * t + phases[h]);
        }
        if (spec.am_rate > 0.0) {
            const double pulse = 0.5 * (1.0 + std::cos(kTwoPi * spec.am_rate * t + am_phase));
            x *= (1.0 - kAmDepth) + kAmDepth * std::pow(pulse, kAmShape);
        }
        x *= drift.at(t);
        w.samples[i] = x;
        peak = std::max(peak, std::abs(x));
    }
    if (peak > 0.0) {
        const double scale = 0.9 / peak;
        for (double& s : w.samples) s *= scale;
    }
    return w;
}

bool intervals_intersect(const std::vector<Interval>& intervals, size_t begin, size_t end) {
    for (const auto& iv : intervals) {
        if (iv.begin < end && begin < iv.end) return true;
    }
    return false;
}

double frame_overlap_fraction(const MixtureRecord& rec, int frame_len, int hop) {
    const size_t n = rec.mixture.samples.size();
    if (n < static_cast<size_t>(frame_len)) return 0.0;
    const size_t n_frames = (n - frame_len) / hop + 1;
    size_t overlapped = 0;
    for (size_t i = 0; i < n_frames; ++i) {
        const size_t begin = i * hop;
        int active = 0;
        for (const auto& ivs : rec.activity) {
            if (intervals_intersect(ivs, begin, begin + frame_len)) ++active;
        }
        if (active >= 2) ++overlapped;
    }
    return static_cast<double>(overlapped) / static_cast<double>(n_frames);
}

MixtureRecord synth_mixture(const std::vector<SpeakerSpec>& specs, const MixtureParams& params,
                            uint64_t seed) {
    const int c_count = static_cast<int>(specs.size());
    if (c_count < 2 || c_count > 5) throw ArgumentError("mixture needs 2..5 speakers");
    if (params.overlap_fraction < 0.0 || params.overlap_fraction > 1.0) {
        throw ArgumentError("overlap_fraction outside [0, 1]");
    }
    if (params.gain_db_hi < params.gain_db_lo) throw ArgumentError("empty gain range");

    const auto n = static_cast<size_t>(std::llround(params.duration_s * params.sample_rate));
    Rng rng(derive_seed(seed, "mixture"));

    // Activity layout: C solo blocks plus one co-active block where every
    // source talks at once, separated by frame-length guard gaps so a frame
    // never straddles two blocks. The co-active block carries the whole
    // overlap budget.
    const size_t co = static_cast<size_t>(std::llround(params.overlap_fraction * n));
    const size_t gap = static_cast<size_t>(params.frame_len);
    const int n_blocks = co > 0 ? c_count + 1 : c_count;
    const size_t gap_total = gap * (n_blocks - 1);
    if (n < co + gap_total + static_cast<size_t>(c_count) * params.frame_len) {
        throw ArgumentError("duration too short for requested overlap layout");
    }
    const size_t solo_total = n - co - gap_total;

    std::vector<double> weights(c_count);
    double wsum = 0.0;
    for (double& w : weights) {
        w = rng.uniform(0.85, 1.15);
        wsum += w;
    }
    std::vector<size_t> solo_sizes(c_count);
    size_t assigned = 0;
    for (int c = 0; c < c_count; ++c) {
        solo_sizes[c] = static_cast<size_t>(solo_total * weights[c] / wsum);
        assigned += solo_sizes[c];
    }
    solo_sizes[c_count - 1] += solo_total - assigned;

    std::vector<int> order(c_count);
    for (int c = 0; c < c_count; ++c) order[c] = c;
    rng.shuffle(order);
    const int co_slot = co > 0 ? static_cast<int>(rng.below(c_count + 1)) : -1;

    MixtureRecord rec;
    rec.activity.assign(c_count, {});
    size_t cursor = 0;
    int solo_idx = 0;
    for (int slot = 0; slot < n_blocks; ++slot) {
        if (slot > 0) cursor += gap;
        if (slot == co_slot) {
            for (int c = 0; c < c_count; ++c) rec.activity[c].push_back({cursor, cursor + co});
            cursor += co;
        } else {
            const int c = order[solo_idx++];
            rec.activity[c].push_back({cursor, cursor + solo_sizes[c]});
            cursor += solo_sizes[c];
        }
    }

    rec.gains_db.resize(c_count);
    for (int c = 0; c < c_count; ++c) {
        rec.gains_db[c] = rng.uniform(params.gain_db_lo, params.gain_db_hi);
    }

    const auto fade = static_cast<size_t>(kFadeSeconds * params.sample_rate);
    rec.sources.reserve(c_count);
    for (int c = 0; c < c_count; ++c) {
        rec.speaker_ids.push_back(specs[c].speaker_id);
        Waveform utt = synth_utterance(specs[c], params.duration_s,
                                       derive_seed(seed, "utterance", static_cast<uint64_t>(c)),
                                       params.sample_rate);
        Waveform track;
        track.sample_rate = params.sample_rate;
        track.samples.assign(n, 0.0);
        for (const auto& iv : rec.activity[c]) {
            for (size_t i = iv.begin; i < iv.end && i < n; ++i) {
                double s = utt.samples[i];
                const size_t into = i - iv.begin;
                const size_t from_end = iv.end - 1 - i;
                if (into < fade) s *= 0.5 * (1.0 - std::cos(M_PI * into / fade));
                if (from_end < fade) s *= 0.5 * (1.0 - std::cos(M_PI * from_end / fade));
                track.samples[i] = s;
            }
        }

        double energy = 0.0;
        size_t active_samples = 0;
        for (const auto& iv : rec.activity[c]) {
            for (size_t i = iv.begin; i < iv.end && i < n; ++i) {
                energy += track.samples[i] * track.samples[i];
            }
            active_samples += iv.end - iv.begin;
        }
        if (active_samples > 0 && energy > 0.0) {
            const double rms = std::sqrt(energy / active_samples);
            const double target = kActiveRms * std::pow(10.0, rec.gains_db[c] / 20.0);
            const double scale = target / rms;
            for (double& s : track.samples) s *= scale;
        }
        rec.sources.push_back(std::move(track));
    }

    rec.mixture = mix(rec.sources);
    return rec;
}

}  // namespace cdm
