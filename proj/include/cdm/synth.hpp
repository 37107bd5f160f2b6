#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "cdm/dsp.hpp"
#include "cdm/wav.hpp"

namespace cdm {

/// Synthetic talker: a harmonic stack at f0 with a syllabic amplitude
/// envelope. Distinct talkers differ in pitch, timbre and modulation rate,
/// which is what the frame embeddings have to pick up on.
struct SpeakerSpec {
    int speaker_id = 0;
    double f0 = 120.0;                                   // Hz, [80, 400]
    std::vector<std::pair<double, double>> harmonics;    // (multiple, relative amplitude)
    double am_rate = 0.0;                                // Hz, 0 disables modulation
    uint64_t seed = 0;
};

/// Sample-accurate activity interval [begin, end).
struct Interval {
    size_t begin = 0;
    size_t end = 0;
};

struct MixtureRecord {
    Waveform mixture;
    std::vector<Waveform> sources;
    std::vector<std::vector<Interval>> activity;  // per source
    std::vector<int> speaker_ids;
    std::vector<double> gains_db;
};

/// Builds n mutually distinct speaker specs (f0 spread over ~90-330 Hz,
/// >= 10 Hz apart, per-speaker timbre and syllable rate).
std::vector<SpeakerSpec> make_speakers(int n, uint64_t seed);

/// Deterministic harmonic utterance: seeded random phases and a slow random
/// gain drift, amplitude-modulated at spec.am_rate. Peak amplitude <= 0.9.
Waveform synth_utterance(const SpeakerSpec& spec, double duration_s, uint64_t seed,
                         int sample_rate = 8000);

struct MixtureParams {
    double duration_s = 4.0;
    double overlap_fraction = 0.25;
    double gain_db_lo = 0.0;
    double gain_db_hi = 5.0;
    int sample_rate = 8000;
    int frame_len = 256;  // guard-gap unit keeping zero-overlap schedules frame-clean
};

/// Synthesizes a mixture from 2..5 speakers. Each source is active on
/// randomized intervals such that the fraction of frames with >= 2
/// simultaneously active sources tracks overlap_fraction; sources are
/// RMS-equalized over their active span and offset by a uniform random
/// gain from [gain_db_lo, gain_db_hi]. mixture = sum of sources, exact.
MixtureRecord synth_mixture(const std::vector<SpeakerSpec>& specs, const MixtureParams& params,
                            uint64_t seed);

/// True if any interval intersects [begin, end).
bool intervals_intersect(const std::vector<Interval>& intervals, size_t begin, size_t end);

/// Fraction of frames (frame_len/hop grid) where >= 2 sources are active.
double frame_overlap_fraction(const MixtureRecord& rec, int frame_len, int hop);

}  // namespace cdm
