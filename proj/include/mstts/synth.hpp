#pragma once

#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "mstts/features.hpp"
#include "mstts/model.hpp"
#include "mstts/trainer.hpp"

namespace mstts {

struct SynthesisRequest {
    std::vector<std::string> phonemes;
    std::string speaker;
    std::string style;
    std::string source_style;  // empty = plain table-row style
    double style_weight = 1.0;
    uint64_t seed = 0;  // accepted for interface symmetry; inference is deterministic
};

struct SynthesisResult {
    Mat<float> mel;
    VarianceOutputs<float> variance;
    std::vector<float> style_vec;
};

/// Resolves names through the checkpoint id maps, builds the style vector
/// (interpolated when a source style is given), and runs inference.
inline SynthesisResult synthesize(const SynthesisRequest &req, const Checkpoint &ck) {
    if (!(req.style_weight >= 0.0 && req.style_weight <= 1.0))
        throw std::invalid_argument("synthesize: style weight outside [0,1]");
    auto pmap = ck.phoneme_map();
    std::vector<int32_t> ids;
    for (const auto &sym : req.phonemes) {
        auto it = pmap.find(sym);
        if (it == pmap.end()) throw std::runtime_error("unknown phoneme \"" + sym + "\"");
        ids.push_back(it->second);
    }
    if (ids.empty()) throw std::invalid_argument("synthesize: empty phoneme sequence");
    int32_t speaker_id = ck.speaker_id(req.speaker);
    int32_t style_id = ck.style_id(req.style);
    SynthesisResult out;
    if (req.source_style.empty()) {
        const Mat<float> &table = ck.params.at("style_embedding");
        out.style_vec.assign(table.row_ptr(style_id), table.row_ptr(style_id) + table.cols);
    } else {
        int32_t src_id = ck.style_id(req.source_style);
        out.style_vec = interpolate_style(ck.params, src_id, style_id, req.style_weight);
    }
    InferResult<float> inf = forward_infer(ck.params, ck.config, ids, speaker_id, out.style_vec);
    out.mel = std::move(inf.mel);
    out.variance = std::move(inf.variance);
    return out;
}

/// Log-mel -> waveform via the transposed-filterbank pseudo-inverse and 60
/// Griffin-Lim phase refinement iterations on the canonical STFT geometry.
/// `residuals`, when given, receives the per-iteration spectral-convergence
/// error.
inline Waveform griffin_lim(const Mat<float> &mel, int iterations = 60,
                            std::vector<double> *residuals = nullptr) {
    if (mel.rows < 1 || mel.cols != kNumMels)
        throw std::invalid_argument("griffin_lim: expected (F, 80) mel");
    double vmax = -1e300;
    for (float v : mel.data) {
        if (!std::isfinite(static_cast<double>(v)))
            throw std::invalid_argument("griffin_lim: non-finite mel");
        vmax = std::max(vmax, static_cast<double>(v));
    }
    if (vmax <= std::log(kLogFloor) + 1e-6) throw std::runtime_error("silent spectrogram");

    int F = mel.rows;
    const Mat<double> &fb = mel_filterbank();
    std::vector<double> colsum(kNumBins, 0.0);
    for (int b = 0; b < kNumMels; ++b)
        for (int k = 0; k < kNumBins; ++k) colsum[k] += fb(b, k);

    // Target linear magnitudes: transposed-filterbank estimate (nonnegative
    // by construction), then multiplicative nonnegative-least-squares updates
    // toward fb * s = m. The raw transposed estimate alone quantizes spectral
    // peaks to filter centers, which is too coarse below ~500 Hz.
    std::vector<std::vector<double>> target(F, std::vector<double>(kNumBins, 0.0));
    std::vector<double> m(kNumMels), num(kNumBins), ws(kNumMels), wtws(kNumBins);
    for (int f = 0; f < F; ++f) {
        for (int b = 0; b < kNumMels; ++b) m[b] = std::exp(static_cast<double>(mel(f, b)));
        std::fill(num.begin(), num.end(), 0.0);
        for (int b = 0; b < kNumMels; ++b) {
            const double *fr = fb.row_ptr(b);
            for (int k = 0; k < kNumBins; ++k) num[k] += fr[k] * m[b];
        }
        std::vector<double> &s = target[f];
        for (int k = 0; k < kNumBins; ++k)
            if (colsum[k] > 1e-12) s[k] = num[k] / colsum[k];
        for (int iter = 0; iter < 40; ++iter) {
            for (int b = 0; b < kNumMels; ++b) {
                const double *fr = fb.row_ptr(b);
                double acc = 0.0;
                for (int k = 0; k < kNumBins; ++k) acc += fr[k] * s[k];
                ws[b] = acc;
            }
            std::fill(wtws.begin(), wtws.end(), 0.0);
            for (int b = 0; b < kNumMels; ++b) {
                const double *fr = fb.row_ptr(b);
                for (int k = 0; k < kNumBins; ++k) wtws[k] += fr[k] * ws[b];
            }
            for (int k = 0; k < kNumBins; ++k)
                if (s[k] > 0.0) s[k] *= num[k] / std::max(wtws[k], 1e-12);
        }
    }

    int n_out = F * kHopSize;
    std::vector<std::vector<std::complex<double>>> spec(F,
        std::vector<std::complex<double>>(kNumBins));
    for (int f = 0; f < F; ++f)
        for (int k = 0; k < kNumBins; ++k) spec[f][k] = target[f][k];  // zero initial phase
    std::vector<double> x = istft(spec, n_out);

    double target_norm = 0.0;
    for (int f = 0; f < F; ++f)
        for (int k = 0; k < kNumBins; ++k) target_norm += target[f][k] * target[f][k];
    target_norm = std::sqrt(std::max(target_norm, 1e-300));

    for (int it = 0; it < iterations; ++it) {
        auto est = stft(x);
        double err = 0.0;
        for (int f = 0; f < F; ++f)
            for (int k = 0; k < kNumBins; ++k) {
                double d = std::abs(est[f][k]) - target[f][k];
                err += d * d;
            }
        if (residuals) residuals->push_back(std::sqrt(err) / target_norm);
        for (int f = 0; f < F; ++f)
            for (int k = 0; k < kNumBins; ++k) {
                double mag = std::abs(est[f][k]);
                spec[f][k] = mag > 1e-12 ? est[f][k] * (target[f][k] / mag)
                                         : std::complex<double>(target[f][k], 0.0);
            }
        x = istft(spec, n_out);
    }

    double peak = 0.0;
    for (double v : x) peak = std::max(peak, std::abs(v));
    if (peak == 0.0) throw std::runtime_error("silent spectrogram");
    for (double &v : x) v *= kPeakTarget / peak;
    return Waveform{std::move(x), kSampleRate};
}

struct ArtifactPaths {
    std::string wav;
    std::string mel_pgm;
    std::string pitch_csv;
    std::string energy_csv;
};

namespace detail {
inline std::string trajectory_csv(const std::vector<float> &values) {
    std::string out;
    char buf[64];
    for (size_t i = 0; i < values.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%zu,%.9g\n", i, static_cast<double>(values[i]));
        out += buf;
    }
    return out;
}
}  // namespace detail

/// Trajectories as "frame,value" CSV rows (9 significant digits re-parse to
/// the float values exactly), the mel as a min-max scaled binary PGM of
/// width 80 and height F, and the audio as 16 kHz mono PCM16 WAV.
inline void export_artifacts(const SynthesisResult &result, const Waveform &audio,
                             const ArtifactPaths &paths) {
    if (!paths.pitch_csv.empty())
        io::write_file(paths.pitch_csv, detail::trajectory_csv(result.variance.pitch_hat));
    if (!paths.energy_csv.empty())
        io::write_file(paths.energy_csv, detail::trajectory_csv(result.variance.energy_hat));
    if (!paths.mel_pgm.empty()) {
        const Mat<float> &mel = result.mel;
        float lo = mel.data[0], hi = mel.data[0];
        for (float v : mel.data) {
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        std::string pgm = "P5\n" + std::to_string(mel.cols) + " " + std::to_string(mel.rows) +
                          "\n255\n";
        double range = static_cast<double>(hi) - static_cast<double>(lo);
        for (int f = 0; f < mel.rows; ++f)
            for (int c = 0; c < mel.cols; ++c) {
                int g = range > 0.0
                            ? static_cast<int>(std::lround((mel(f, c) - lo) / range * 255.0))
                            : 0;
                pgm.push_back(static_cast<char>(std::clamp(g, 0, 255)));
            }
        io::write_file(paths.mel_pgm, pgm);
    }
    if (!paths.wav.empty()) write_wav(paths.wav, audio.samples, audio.sample_rate);
}

struct SweepEntry {
    double weight;
    SynthesisResult result;
    ArtifactPaths paths;
};

/// One synthesis per weight (shared request and seed), artifacts per weight
/// plus an index file mapping weight -> artifact paths.
inline std::vector<SweepEntry> transition_sweep(const SynthesisRequest &base,
                                                const std::vector<double> &weights,
                                                const Checkpoint &ck, const std::string &out_dir,
                                                int griffin_lim_iterations = 60) {
    if (base.source_style.empty())
        throw std::invalid_argument("transition_sweep: a source style is required");
    for (double w : weights)
        if (!(w >= 0.0 && w <= 1.0))
            throw std::invalid_argument("transition_sweep: weight outside [0,1]");
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::vector<SweepEntry> entries;
    std::string index;
    char buf[512];
    for (size_t i = 0; i < weights.size(); ++i) {
        SynthesisRequest req = base;
        req.style_weight = weights[i];
        SweepEntry e;
        e.weight = weights[i];
        e.result = synthesize(req, ck);
        std::string stem = (fs::path(out_dir) / ("w" + std::to_string(i))).string();
        e.paths = {stem + ".wav", stem + ".pgm", stem + ".pitch.csv", stem + ".energy.csv"};
        Waveform audio = griffin_lim(e.result.mel, griffin_lim_iterations);
        export_artifacts(e.result, audio, e.paths);
        std::snprintf(buf, sizeof(buf), "%.9g\t%s\t%s\t%s\t%s\n", weights[i], e.paths.wav.c_str(),
                      e.paths.mel_pgm.c_str(), e.paths.pitch_csv.c_str(),
                      e.paths.energy_csv.c_str());
        index += buf;
        entries.push_back(std::move(e));
    }
    io::write_file((fs::path(out_dir) / "index.tsv").string(), index);
    return entries;
}

}  // namespace mstts
