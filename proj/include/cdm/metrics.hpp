#pragma once

#include <vector>

#include "cdm/wav.hpp"

namespace cdm {

/// Scale-invariant SNR in dB, clamped to [-60, 60]:
/// s_t = (<e, r> / ||r||^2) r, score = 10 log10(||s_t||^2 / ||e - s_t||^2).
double si_snr(const Waveform& estimate, const Waveform& reference);

/// Plain-SNR signal-to-distortion ratio, 10 log10(||r||^2 / ||e - r||^2),
/// clamped like si_snr. Sensitive to estimate scale, unlike si_snr.
double sdr(const Waveform& estimate, const Waveform& reference);

struct SeparationScore {
    double si_snr_db = 0.0;   // mean matched SI-SNR over real references
    double si_snri_db = 0.0;  // mean improvement over the mixture baseline
    double sdr_db = 0.0;
    double sdri_db = 0.0;
    std::vector<int> permutation;  // estimate index chosen for each reference slot
    std::vector<double> per_source_si_snr;
    std::vector<double> per_source_si_snri;
    std::vector<double> per_source_sdr;
    std::vector<double> per_source_sdri;
};

/// Brute-force permutation matching (k <= 5) maximizing mean SI-SNR. If the
/// counts differ the shorter side is padded with silence tracks; padded
/// references are excluded from every mean. Improvements are taken against
/// the mixture presented as every estimate.
SeparationScore match_and_score(const std::vector<Waveform>& estimates,
                                const std::vector<Waveform>& references,
                                const Waveform& mixture);

/// Majority-label purity. Entries with oracle label -1 (silence, no
/// dominant source) are excluded from both numerator and denominator.
double cluster_purity(const std::vector<int>& partition_labels,
                      const std::vector<int>& oracle_labels);

/// Per-frame dominant source by frame energy; -1 where every source is
/// quieter than silence_rms.
std::vector<int> dominant_source_labels(const std::vector<Waveform>& sources, int frame_len,
                                        int hop, double silence_rms = 1e-5);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& xs, const std::vector<double>& ys);

}  // namespace cdm
