#pragma once

#include <vector>

#include "cdm/common.hpp"
#include "cdm/wav.hpp"

namespace cdm {

/// Frames of a waveform: n_frames x frame_len rows cut at a fixed hop.
/// The trailing remainder shorter than a full frame is dropped, so
/// n_frames = floor((source_len - frame_len) / hop) + 1.
struct FrameMatrix {
    Matrix frames;
    int frame_len = 256;
    int hop = 64;
    size_t source_len = 0;

    int n_frames() const { return frames.rows; }
    /// Last sample position (exclusive) covered by at least one frame.
    size_t covered_len() const {
        if (frames.rows == 0) return 0;
        return static_cast<size_t>(frames.rows - 1) * hop + frame_len;
    }
};

FrameMatrix frame(const Waveform& w, int frame_len, int hop);

/// Inverse of frame: each output sample is the sum of contributing frame
/// samples divided by the number of frames covering that position.
/// Rectangular windows make this an exact inverse on the covered span.
Waveform overlap_add(const FrameMatrix& fm, int sample_rate = 8000);

/// Per-position frame coverage counts used by overlap_add. Exposed so that
/// masked reconstruction can share the same normalization.
std::vector<int> coverage_counts(const FrameMatrix& fm);

/// Sample-wise sum of equal-length sources. No normalization.
Waveform mix(const std::vector<Waveform>& sources);

}  // namespace cdm
