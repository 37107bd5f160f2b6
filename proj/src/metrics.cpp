#include "cdm/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace cdm {

namespace {

constexpr double kDbClamp = 60.0;

double clamp_db(double ratio) {
    if (ratio <= 0.0) return -kDbClamp;
    return std::clamp(10.0 * std::log10(ratio), -kDbClamp, kDbClamp);
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
    double s = 0.0;
    for (size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double energy(const std::vector<double>& a) { return dot(a, a); }

// si_snr against a possibly silent (padded) reference: silent refs floor out.
double si_snr_padded(const Waveform& estimate, const Waveform& reference) {
    if (energy(reference.samples) == 0.0) return -kDbClamp;
    return si_snr(estimate, reference);
}

}  // namespace

double si_snr(const Waveform& estimate, const Waveform& reference) {
    if (estimate.samples.size() != reference.samples.size()) {
        throw ShapeError("si_snr: length mismatch");
    }
    const double ref_energy = energy(reference.samples);
    if (ref_energy == 0.0) throw ArgumentError("si_snr: reference is all-zero");

    const double proj = dot(estimate.samples, reference.samples) / ref_energy;
    double target_energy = 0.0;
    double error_energy = 0.0;
    for (size_t i = 0; i < estimate.samples.size(); ++i) {
        const double t = proj * reference.samples[i];
        const double e = estimate.samples[i] - t;
        target_energy += t * t;
        error_energy += e * e;
    }
    if (error_energy == 0.0) return kDbClamp;
    return clamp_db(target_energy / error_energy);
}

double sdr(const Waveform& estimate, const Waveform& reference) {
    if (estimate.samples.size() != reference.samples.size()) {
        throw ShapeError("sdr: length mismatch");
    }
    const double ref_energy = energy(reference.samples);
    if (ref_energy == 0.0) throw ArgumentError("sdr: reference is all-zero");

    double error_energy = 0.0;
    for (size_t i = 0; i < estimate.samples.size(); ++i) {
        const double e = estimate.samples[i] - reference.samples[i];
        error_energy += e * e;
    }
    if (error_energy == 0.0) return kDbClamp;
    return clamp_db(ref_energy / error_energy);
}

SeparationScore match_and_score(const std::vector<Waveform>& estimates,
                                const std::vector<Waveform>& references,
                                const Waveform& mixture) {
    if (estimates.empty() || references.empty() || estimates.size() > 5 ||
        references.size() > 5) {
        throw ArgumentError("match_and_score: need 1..5 estimates and references");
    }
    const size_t n_real_refs = references.size();
    const size_t k = std::max(estimates.size(), references.size());

    Waveform silence;
    silence.sample_rate = mixture.sample_rate;
    silence.samples.assign(mixture.samples.size(), 0.0);
    std::vector<Waveform> est(estimates), ref(references);
    while (est.size() < k) est.push_back(silence);
    while (ref.size() < k) ref.push_back(silence);
    for (const auto& w : est) {
        if (w.samples.size() != mixture.samples.size()) {
            throw ShapeError("match_and_score: estimate length mismatch");
        }
    }
    for (const auto& w : ref) {
        if (w.samples.size() != mixture.samples.size()) {
            throw ShapeError("match_and_score: reference length mismatch");
        }
    }

    // perm[r] = estimate assigned to reference slot r. Lexicographically
    // first maximizer wins, which keeps the result deterministic.
    std::vector<int> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::vector<int> best_perm = perm;
    double best_score = -1e300;
    do {
        double total = 0.0;
        for (size_t r = 0; r < n_real_refs; ++r) total += si_snr_padded(est[perm[r]], ref[r]);
        if (total > best_score) {
            best_score = total;
            best_perm = perm;
        }
    } while (std::next_permutation(perm.begin(), perm.end()));

    SeparationScore score;
    score.permutation = best_perm;
    for (size_t r = 0; r < n_real_refs; ++r) {
        const Waveform& e = est[best_perm[r]];
        const double matched_si = si_snr(e, ref[r]);
        const double base_si = si_snr(mixture, ref[r]);
        const double matched_sdr = sdr(e, ref[r]);
        const double base_sdr = sdr(mixture, ref[r]);
        score.per_source_si_snr.push_back(matched_si);
        score.per_source_si_snri.push_back(matched_si - base_si);
        score.per_source_sdr.push_back(matched_sdr);
        score.per_source_sdri.push_back(matched_sdr - base_sdr);
    }
    const auto mean = [](const std::vector<double>& v) {
        return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    score.si_snr_db = mean(score.per_source_si_snr);
    score.si_snri_db = mean(score.per_source_si_snri);
    score.sdr_db = mean(score.per_source_sdr);
    score.sdri_db = mean(score.per_source_sdri);
    return score;
}

double cluster_purity(const std::vector<int>& partition_labels,
                      const std::vector<int>& oracle_labels) {
    if (partition_labels.size() != oracle_labels.size()) {
        throw ShapeError("cluster_purity: length mismatch");
    }
    int max_cluster = -1, max_oracle = -1;
    size_t counted = 0;
    for (size_t i = 0; i < partition_labels.size(); ++i) {
        if (oracle_labels[i] < 0) continue;  // silence frames carry no evidence
        max_cluster = std::max(max_cluster, partition_labels[i]);
        max_oracle = std::max(max_oracle, oracle_labels[i]);
        ++counted;
    }
    if (counted == 0) throw ArgumentError("cluster_purity: no voiced frames");

    std::vector<std::vector<size_t>> table(static_cast<size_t>(max_cluster) + 1,
                                           std::vector<size_t>(max_oracle + 1, 0));
    for (size_t i = 0; i < partition_labels.size(); ++i) {
        if (oracle_labels[i] < 0) continue;
        ++table[partition_labels[i]][oracle_labels[i]];
    }
    size_t majority_total = 0;
    for (const auto& row : table) {
        majority_total += *std::max_element(row.begin(), row.end());
    }
    return static_cast<double>(majority_total) / static_cast<double>(counted);
}

std::vector<int> dominant_source_labels(const std::vector<Waveform>& sources, int frame_len,
                                        int hop, double silence_rms) {
    if (sources.empty()) throw ArgumentError("dominant_source_labels: no sources");
    const size_t n = sources[0].samples.size();
    for (const auto& s : sources) {
        if (s.samples.size() != n) throw ShapeError("dominant_source_labels: length mismatch");
    }
    if (n < static_cast<size_t>(frame_len)) return {};
    const size_t n_frames = (n - frame_len) / hop + 1;
    const double silence_energy = silence_rms * silence_rms * frame_len;

    std::vector<int> labels(n_frames, -1);
    for (size_t f = 0; f < n_frames; ++f) {
        const size_t base = f * hop;
        double best = silence_energy;
        for (size_t c = 0; c < sources.size(); ++c) {
            double e = 0.0;
            for (int j = 0; j < frame_len; ++j) {
                const double x = sources[c].samples[base + j];
                e += x * x;
            }
            if (e > best) {
                best = e;
                labels[f] = static_cast<int>(c);
            }
        }
    }
    return labels;
}

double spearman(const std::vector<double>& xs, const std::vector<double>& ys) {
    if (xs.size() != ys.size() || xs.size() < 2) throw ArgumentError("spearman: need >= 2 pairs");
    auto ranks = [](const std::vector<double>& v) {
        const size_t n = v.size();
        std::vector<size_t> order(n);
        std::iota(order.begin(), order.end(), 0);
        std::sort(order.begin(), order.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
        std::vector<double> r(n);
        size_t i = 0;
        while (i < n) {
            size_t j = i;
            while (j + 1 < n && v[order[j + 1]] == v[order[i]]) ++j;
            const double avg = 0.5 * static_cast<double>(i + j) + 1.0;  // average rank for ties
            for (size_t t = i; t <= j; ++t) r[order[t]] = avg;
            i = j + 1;
        }
        return r;
    };
    const std::vector<double> rx = ranks(xs), ry = ranks(ys);
    const double n = static_cast<double>(xs.size());
    double mx = 0.0, my = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        mx += rx[i];
        my += ry[i];
    }
    mx /= n;
    my /= n;
    double cov = 0.0, vx = 0.0, vy = 0.0;
    for (size_t i = 0; i < xs.size(); ++i) {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    if (vx == 0.0 || vy == 0.0) throw ArgumentError("spearman: constant input");
    return cov / std::sqrt(vx * vy);
}

}  // namespace cdm
