#pragma once

#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "mstts/features.hpp"

namespace mstts {

enum class NormScope { utterance, speaker };

inline const char *norm_scope_name(NormScope s) {
    return s == NormScope::utterance ? "utterance" : "speaker";
}

/// Pitch stats over voiced frames only, energy stats over all frames,
/// population (1/N) variance throughout.
struct NormStats {
    double pitch_mean = 0.0;
    double pitch_std = 0.0;
    double energy_mean = 0.0;
    double energy_std = 0.0;
    NormScope scope = NormScope::utterance;
    int64_t voiced_frames_used = 0;
};

/// Utterance scope expects exactly one utterance; speaker scope pools every
/// utterance of one speaker (callers pass them in utterance-id order so the
/// fold is deterministic).
inline NormStats compute_stats(const std::vector<const AlignedUtterance *> &utts,
                               NormScope scope) {
    if (utts.empty()) throw std::invalid_argument("compute_stats: no utterances");
    if (scope == NormScope::utterance && utts.size() != 1)
        throw std::invalid_argument("compute_stats: utterance scope takes exactly one utterance");
    if (scope == NormScope::speaker)
        for (const auto *u : utts)
            if (u->speaker_id != utts[0]->speaker_id)
                throw std::invalid_argument("compute_stats: speaker scope requires one speaker");

    double psum = 0.0, psq = 0.0, esum = 0.0, esq = 0.0;
    int64_t voiced = 0, frames = 0;
    for (const auto *u : utts) {
        for (float p : u->pitch)
            if (p > 0.0f) {
                psum += p;
                psq += static_cast<double>(p) * p;
                ++voiced;
            }
        for (float e : u->energy) {
            esum += e;
            esq += static_cast<double>(e) * e;
            ++frames;
        }
    }
    if (voiced < 2) throw std::runtime_error("insufficient voiced frames");
    NormStats s;
    s.scope = scope;
    s.voiced_frames_used = voiced;
    s.pitch_mean = psum / voiced;
    s.energy_mean = esum / frames;
    double pvar = psq / voiced - s.pitch_mean * s.pitch_mean;
    double evar = esq / frames - s.energy_mean * s.energy_mean;
    if (pvar <= 1e-12 || evar <= 1e-12) throw std::runtime_error("degenerate stats");
    s.pitch_std = std::sqrt(pvar);
    s.energy_std = std::sqrt(evar);
    return s;
}

/// Z-normalizes pitch (voiced frames only; unvoiced frames stay exactly 0)
/// and energy (all frames).
inline AlignedUtterance apply_norm(const AlignedUtterance &utt, const NormStats &stats) {
    if (!(stats.pitch_std > 0.0) || !(stats.energy_std > 0.0))
        throw std::invalid_argument("apply_norm: invalid stats");
    AlignedUtterance out = utt;
    for (float &p : out.pitch)
        p = p > 0.0f ? static_cast<float>((p - stats.pitch_mean) / stats.pitch_std) : 0.0f;
    for (float &e : out.energy)
        e = static_cast<float>((e - stats.energy_mean) / stats.energy_std);
    return out;
}

/// Inverse affine map v*std + mean for one channel; no voicing logic.
inline std::vector<float> denormalize(const std::vector<float> &values, double mean, double std_dev) {
    std::vector<float> out(values.size());
    for (size_t i = 0; i < values.size(); ++i)
        out[i] = static_cast<float>(values[i] * std_dev + mean);
    return out;
}

/// Human-readable export row: id, scope, 4 stats, voiced count.
inline std::string stats_row(const std::string &id, const NormStats &s) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%s\t%s\t%.9g\t%.9g\t%.9g\t%.9g\t%lld", id.c_str(),
                  norm_scope_name(s.scope), s.pitch_mean, s.pitch_std, s.energy_mean, s.energy_std,
                  static_cast<long long>(s.voiced_frames_used));
    return buf;
}

}  // namespace mstts
