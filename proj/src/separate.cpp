#include "cdm/separate.hpp"

namespace cdm {

MaskSet masks_from_partition(const Partition& p) {
    if (p.k < 1) throw ArgumentError("masks_from_partition: partition has no clusters");
    MaskSet ms;
    ms.masks.assign(p.k, std::vector<uint8_t>(p.labels.size(), 0));
    for (size_t i = 0; i < p.labels.size(); ++i) {
        const int label = p.labels[i];
        if (label < 0 || label >= p.k) throw ArgumentError("masks_from_partition: label range");
        ms.masks[label][i] = 1;
    }
    return ms;
}

std::vector<Waveform> apply_masks(const Waveform& mixture, const FrameMatrix& fm,
                                  const MaskSet& ms) {
    if (fm.source_len != mixture.samples.size()) {
        throw ShapeError("apply_masks: frame matrix does not match mixture");
    }
    if (ms.k() < 1 || ms.n_frames() != fm.n_frames()) {
        throw ShapeError("apply_masks: mask length mismatch");
    }
    for (int i = 0; i < fm.n_frames(); ++i) {
        int total = 0;
        for (const auto& mask : ms.masks) total += mask[i];
        if (total != 1) throw ArgumentError("apply_masks: masks must partition the frames");
    }

    const std::vector<int> counts = coverage_counts(fm);
    const size_t covered = fm.covered_len();

    std::vector<Waveform> estimates;
    estimates.reserve(ms.k());
    for (int c = 0; c < ms.k(); ++c) {
        Waveform est;
        est.sample_rate = mixture.sample_rate;
        est.samples.assign(mixture.samples.size(), 0.0);
        for (int i = 0; i < fm.n_frames(); ++i) {
            if (!ms.masks[c][i]) continue;
            const size_t base = static_cast<size_t>(i) * fm.hop;
            const double* src = fm.frames.row(i);
            for (int j = 0; j < fm.frame_len; ++j) est.samples[base + j] += src[j];
        }
        for (size_t i = 0; i < covered; ++i) est.samples[i] /= counts[i];
        estimates.push_back(std::move(est));
    }
    // Uncovered tail rides on estimate 0 so the estimates sum to the mixture.
    for (size_t i = covered; i < mixture.samples.size(); ++i) {
        estimates[0].samples[i] = mixture.samples[i];
    }
    return estimates;
}

}  // namespace cdm
