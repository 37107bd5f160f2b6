#include "cdm/dsp.hpp"

namespace cdm {

FrameMatrix frame(const Waveform& w, int frame_len, int hop) {
    if (frame_len <= 0 || hop <= 0) throw ArgumentError("frame_len and hop must be positive");
    if (w.samples.size() < static_cast<size_t>(frame_len)) {
        throw EmptyInputError("waveform shorter than one frame");
    }

    const size_t n = w.samples.size();
    const int n_frames = static_cast<int>((n - frame_len) / hop) + 1;

    FrameMatrix fm;
    fm.frame_len = frame_len;
    fm.hop = hop;
    fm.source_len = n;
    fm.frames = Matrix(n_frames, frame_len);
    for (int i = 0; i < n_frames; ++i) {
        const double* src = w.samples.data() + static_cast<size_t>(i) * hop;
        double* dst = fm.frames.row(i);
        for (int j = 0; j < frame_len; ++j) dst[j] = src[j];
    }
    return fm;
}

std::vector<int> coverage_counts(const FrameMatrix& fm) {
    std::vector<int> counts(fm.covered_len(), 0);
    for (int i = 0; i < fm.n_frames(); ++i) {
        const size_t base = static_cast<size_t>(i) * fm.hop;
        for (int j = 0; j < fm.frame_len; ++j) counts[base + j] += 1;
    }
    return counts;
}

Waveform overlap_add(const FrameMatrix& fm, int sample_rate) {
    if (fm.n_frames() == 0) throw EmptyInputError("no frames to reconstruct");

    Waveform w;
    w.sample_rate = sample_rate;
    w.samples.assign(fm.covered_len(), 0.0);
    for (int i = 0; i < fm.n_frames(); ++i) {
        const size_t base = static_cast<size_t>(i) * fm.hop;
        const double* src = fm.frames.row(i);
        for (int j = 0; j < fm.frame_len; ++j) w.samples[base + j] += src[j];
    }
    const std::vector<int> counts = coverage_counts(fm);
    for (size_t i = 0; i < w.samples.size(); ++i) w.samples[i] /= counts[i];
    return w;
}

Waveform mix(const std::vector<Waveform>& sources) {
    if (sources.empty()) throw EmptyInputError("nothing to mix");
    const size_t n = sources[0].samples.size();
    const int sr = sources[0].sample_rate;
    for (const auto& s : sources) {
        if (s.samples.size() != n) throw ShapeError("source length mismatch in mix");
        if (s.sample_rate != sr) throw ShapeError("sample rate mismatch in mix");
    }
    Waveform out;
    out.sample_rate = sr;
    out.samples.assign(n, 0.0);
    for (const auto& s : sources) {
        for (size_t i = 0; i < n; ++i) out.samples[i] += s.samples[i];
    }
    return out;
}

}  // namespace cdm
