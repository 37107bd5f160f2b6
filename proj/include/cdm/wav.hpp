#pragma once

#include <string>
#include <vector>

#include "cdm/common.hpp"

namespace cdm {

/// Mono waveform, amplitudes nominally in [-1, 1].
struct Waveform {
    std::vector<double> samples;
    int sample_rate = 8000;

    size_t size() const { return samples.size(); }
    double duration_s() const {
        return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
    }
};

/// Reads a PCM16 mono little-endian RIFF/WAVE file. Samples are scaled by
/// 1/32768. Throws FormatError on malformed headers and UnsupportedError on
/// multi-channel or non-PCM16 content.
Waveform read_wav(const std::string& path);

/// Writes PCM16 mono. Samples are scaled by 32768, rounded and clamped to
/// [-32768, 32767], so read_wav(write_wav(w)) matches w within 1/32768 per
/// sample. Non-finite samples throw ArgumentError.
void write_wav(const std::string& path, const Waveform& w);

}  // namespace cdm
