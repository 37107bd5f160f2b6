#pragma once

#include <cstdint>
#include <vector>

#include "cdm/dsp.hpp"
#include "cdm/graph.hpp"
#include "cdm/wav.hpp"

namespace cdm {

/// One 0/1 vector over frames per surviving cluster. The masks partition
/// the frame axis: they sum to one at every frame.
struct MaskSet {
    std::vector<std::vector<uint8_t>> masks;

    int n_frames() const { return masks.empty() ? 0 : static_cast<int>(masks[0].size()); }
    int k() const { return static_cast<int>(masks.size()); }
};

MaskSet masks_from_partition(const Partition& p);

/// Reconstructs one waveform per mask by overlap-adding only the frames the
/// mask keeps. All masks share the unmasked coverage normalization, so the
/// estimates sum to the mixture exactly on the covered span. The tail the
/// framing dropped is appended to estimate 0; the others are zero there.
std::vector<Waveform> apply_masks(const Waveform& mixture, const FrameMatrix& fm,
                                  const MaskSet& ms);

}  // namespace cdm
