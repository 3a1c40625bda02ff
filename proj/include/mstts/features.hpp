#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <complex>
#include <cstdint>
#include <map>
#include <numbers>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "mstts/io.hpp"
#include "mstts/mat.hpp"

namespace mstts {

// Frame geometry: 16 kHz audio, 12 ms hop, 48 ms Hann window, 1024-point FFT
// (next power of two above the window), 80 mel bands over 0..8000 Hz.
constexpr int kSampleRate = 16000;
constexpr int kHopSize = 192;
constexpr int kWinSize = 768;
constexpr int kFftSize = 1024;
constexpr int kNumBins = kFftSize / 2 + 1;
constexpr int kNumMels = 80;
constexpr double kMelFmin = 0.0;
constexpr double kMelFmax = 8000.0;
constexpr double kLogFloor = 1e-5;
constexpr double kHopSeconds = 0.012;
constexpr double kPeakTarget = 0.5011872336272722;  // 10^(-6/20), i.e. -6 dBFS

struct Waveform {
    std::vector<double> samples;  // in [-1, 1]
    int sample_rate = kSampleRate;
};

inline int frame_count_for(size_t n_samples) {
    return static_cast<int>((n_samples + kHopSize - 1) / kHopSize);
}

namespace detail {

inline void fft_inplace(std::vector<std::complex<double>> &a, bool inverse) {
    const size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) throw std::invalid_argument("fft: size must be a power of 2");
    for (size_t i = 1, j = 0; i < n; ++i) {
        size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (size_t len = 2; len <= n; len <<= 1) {
        double ang = 2.0 * std::numbers::pi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        std::complex<double> wlen(std::cos(ang), std::sin(ang));
        for (size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (size_t k = 0; k < len / 2; ++k) {
                std::complex<double> u = a[i + k];
                std::complex<double> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
    if (inverse) {
        double inv = 1.0 / static_cast<double>(n);
        for (auto &x : a) x *= inv;
    }
}

inline size_t reflect_index(int64_t i, size_t n) {
    if (n == 1) return 0;
    int64_t period = 2 * static_cast<int64_t>(n) - 2;
    i = ((i % period) + period) % period;
    if (i >= static_cast<int64_t>(n)) i = period - i;
    return static_cast<size_t>(i);
}

/// Periodic Hann window of length kWinSize.
inline const std::vector<double> &hann_window() {
    static const std::vector<double> w = [] {
        std::vector<double> v(kWinSize);
        for (int i = 0; i < kWinSize; ++i)
            v[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / kWinSize);
        return v;
    }();
    return w;
}

/// Raw (unwindowed) analysis frame f: samples centered at f*hop, reflected
/// at the signal edges.
inline void fill_frame(const std::vector<double> &x, int frame, std::vector<double> &out) {
    out.resize(kWinSize);
    int64_t start = static_cast<int64_t>(frame) * kHopSize - kWinSize / 2;
    for (int j = 0; j < kWinSize; ++j)
        out[j] = x[reflect_index(start + j, x.size())];
}

inline double htk_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double htk_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

}  // namespace detail

/// 80 triangular filters on the HTK mel scale, evaluated at FFT bin centers.
/// Shape (80, 513), unit peak per filter.
inline const Mat<double> &mel_filterbank() {
    static const Mat<double> fb = [] {
        Mat<double> m(kNumMels, kNumBins, 0.0);
        double mlo = detail::htk_mel(kMelFmin), mhi = detail::htk_mel(kMelFmax);
        std::vector<double> edges(kNumMels + 2);
        for (int j = 0; j < kNumMels + 2; ++j)
            edges[j] = detail::htk_hz(mlo + (mhi - mlo) * j / (kNumMels + 1));
        for (int b = 0; b < kNumMels; ++b) {
            double l = edges[b], c = edges[b + 1], r = edges[b + 2];
            for (int k = 0; k < kNumBins; ++k) {
                double f = static_cast<double>(k) * kSampleRate / kFftSize;
                double w = std::min((f - l) / (c - l), (r - f) / (r - c));
                if (w > 0.0) m(b, k) = w;
            }
        }
        return m;
    }();
    return fb;
}

/// Center frequency (Hz) of mel band b; used by tests as a geometry oracle
/// and by griffin_lim's pseudo-inverse.
inline double mel_band_center(int band) {
    double mlo = detail::htk_mel(kMelFmin), mhi = detail::htk_mel(kMelFmax);
    return detail::htk_hz(mlo + (mhi - mlo) * (band + 1) / (kNumMels + 1));
}

/// Complex STFT with the canonical frame geometry. frames[f][k], k < 513.
inline std::vector<std::vector<std::complex<double>>> stft(const std::vector<double> &x) {
    if (x.size() < static_cast<size_t>(kHopSize))
        throw std::runtime_error("stft: input shorter than one hop");
    int frames = frame_count_for(x.size());
    const auto &win = detail::hann_window();
    std::vector<std::vector<std::complex<double>>> out(frames);
    std::vector<double> frame;
    std::vector<std::complex<double>> buf(kFftSize);
    const int off = (kFftSize - kWinSize) / 2;
    for (int f = 0; f < frames; ++f) {
        detail::fill_frame(x, f, frame);
        std::fill(buf.begin(), buf.end(), std::complex<double>(0.0, 0.0));
        for (int j = 0; j < kWinSize; ++j) buf[off + j] = frame[j] * win[j];
        detail::fft_inplace(buf, false);
        out[f].assign(buf.begin(), buf.begin() + kNumBins);
    }
    return out;
}

/// Weighted overlap-add inverse of stft(); returns exactly n_samples values.
inline std::vector<double> istft(const std::vector<std::vector<std::complex<double>>> &frames,
                                 int n_samples) {
    const auto &win = detail::hann_window();
    const int off = (kFftSize - kWinSize) / 2;
    const int pad = kWinSize / 2;
    std::vector<double> num(static_cast<size_t>(n_samples) + 2 * kWinSize, 0.0);
    std::vector<double> den(num.size(), 0.0);
    std::vector<std::complex<double>> buf(kFftSize);
    for (size_t f = 0; f < frames.size(); ++f) {
        if (frames[f].size() != static_cast<size_t>(kNumBins))
            throw std::invalid_argument("istft: bad bin count");
        for (int k = 0; k < kNumBins; ++k) buf[k] = frames[f][k];
        for (int k = kNumBins; k < kFftSize; ++k) buf[k] = std::conj(frames[f][kFftSize - k]);
        detail::fft_inplace(buf, true);
        // frame f covers original coords [f*hop - pad, f*hop + pad); the
        // num/den buffers are shifted by +pad so its first sample lands at f*hop.
        int64_t base = static_cast<int64_t>(f) * kHopSize;
        for (int j = 0; j < kWinSize; ++j) {
            int64_t idx = base + j;
            if (idx < 0 || idx >= static_cast<int64_t>(num.size())) continue;
            num[idx] += win[j] * buf[off + j].real();
            den[idx] += win[j] * win[j];
        }
    }
    std::vector<double> y(n_samples, 0.0);
    for (int i = 0; i < n_samples; ++i) {
        size_t idx = static_cast<size_t>(i) + pad;
        y[i] = den[idx] > 1e-9 ? num[idx] / den[idx] : 0.0;
    }
    return y;
}

/// Resample + peak-normalize to -6 dBFS.
inline Waveform condition_wave(const std::vector<double> &raw, int raw_rate) {
    static const int kRates[] = {16000, 22050, 24000, 44100, 48000};
    if (raw.empty()) throw std::runtime_error("condition_wave: empty input");
    if (std::find(std::begin(kRates), std::end(kRates), raw_rate) == std::end(kRates))
        throw std::runtime_error("condition_wave: unsupported sample rate " +
                                 std::to_string(raw_rate));
    std::vector<double> y;
    if (raw_rate == kSampleRate) {
        y = raw;
    } else {
        double ratio = static_cast<double>(raw_rate) / kSampleRate;  // input samples per output
        int64_t n_out = static_cast<int64_t>(
            std::llround(static_cast<double>(raw.size()) * kSampleRate / raw_rate));
        if (n_out < 1) n_out = 1;
        double cutoff = 0.95 * std::min(1.0, 1.0 / ratio);  // in input Nyquist units
        double half_width = 32.0 * std::max(1.0, ratio);
        y.resize(static_cast<size_t>(n_out));
        for (int64_t m = 0; m < n_out; ++m) {
            double t = static_cast<double>(m) * ratio;
            int64_t lo = static_cast<int64_t>(std::ceil(t - half_width));
            int64_t hi = static_cast<int64_t>(std::floor(t + half_width));
            double acc = 0.0;
            for (int64_t n = lo; n <= hi; ++n) {
                if (n < 0 || n >= static_cast<int64_t>(raw.size())) continue;
                double u = static_cast<double>(n) - t;
                double su = cutoff * u;
                double sinc = su == 0.0 ? 1.0
                                        : std::sin(std::numbers::pi * su) / (std::numbers::pi * su);
                double w = 0.5 + 0.5 * std::cos(std::numbers::pi * u / half_width);
                acc += raw[n] * cutoff * sinc * w;
            }
            y[m] = acc;
        }
    }
    double peak = 0.0;
    for (double v : y) peak = std::max(peak, std::abs(v));
    if (peak == 0.0) throw std::runtime_error("cannot normalize silence");
    double scale = kPeakTarget / peak;
    for (double &v : y) v *= scale;
    return Waveform{std::move(y), kSampleRate};
}

/// Log mel spectrogram, (F, 80) with F = ceil(samples / hop).
inline Mat<float> mel_spectrogram(const Waveform &w) {
    if (w.sample_rate != kSampleRate)
        throw std::invalid_argument("mel_spectrogram: expected 16 kHz input");
    auto spec = stft(w.samples);
    const Mat<double> &fb = mel_filterbank();
    Mat<float> out(static_cast<int>(spec.size()), kNumMels);
    std::vector<double> mag(kNumBins);
    for (size_t f = 0; f < spec.size(); ++f) {
        for (int k = 0; k < kNumBins; ++k) mag[k] = std::abs(spec[f][k]);
        for (int b = 0; b < kNumMels; ++b) {
            const double *fr = fb.row_ptr(b);
            double acc = 0.0;
            for (int k = 0; k < kNumBins; ++k) acc += fr[k] * mag[k];
            out(static_cast<int>(f), b) = static_cast<float>(std::log(std::max(acc, kLogFloor)));
        }
    }
    return out;
}

/// Per-frame L2 norm of the linear magnitude spectrum. Same frame count as
/// the mel spectrogram.
inline std::vector<float> frame_energy(const Waveform &w) {
    if (w.sample_rate != kSampleRate)
        throw std::invalid_argument("frame_energy: expected 16 kHz input");
    auto spec = stft(w.samples);
    std::vector<float> out(spec.size());
    for (size_t f = 0; f < spec.size(); ++f) {
        double acc = 0.0;
        for (int k = 0; k < kNumBins; ++k) {
            double m = std::abs(spec[f][k]);
            acc += m * m;
        }
        out[f] = static_cast<float>(std::sqrt(acc));
    }
    return out;
}

/// Normalized-autocorrelation F0 in Hz per frame, 0 for unvoiced frames.
/// Search band 50..600 Hz, voicing threshold 0.3, parabolic peak refinement.
inline std::vector<float> estimate_f0(const Waveform &w) {
    if (w.sample_rate != kSampleRate)
        throw std::invalid_argument("estimate_f0: expected 16 kHz input");
    if (w.samples.size() < static_cast<size_t>(kHopSize))
        throw std::runtime_error("estimate_f0: input shorter than one hop");
    constexpr double kVoicingThreshold = 0.3;
    const int lag_min = static_cast<int>(std::ceil(kSampleRate / 600.0));  // 27
    const int lag_max = static_cast<int>(std::floor(kSampleRate / 50.0));  // 320
    int frames = frame_count_for(w.samples.size());
    std::vector<float> out(frames, 0.0f);
    std::vector<double> frame, sq_prefix(kWinSize + 1);
    std::vector<double> r(lag_max + 1, 0.0);
    for (int f = 0; f < frames; ++f) {
        detail::fill_frame(w.samples, f, frame);
        double mean = 0.0;
        for (double v : frame) mean += v;
        mean /= kWinSize;
        for (double &v : frame) v -= mean;
        sq_prefix[0] = 0.0;
        for (int i = 0; i < kWinSize; ++i) sq_prefix[i + 1] = sq_prefix[i] + frame[i] * frame[i];
        if (sq_prefix[kWinSize] < 1e-12) continue;  // degenerate frame: unvoiced
        double best = -1.0;
        for (int lag = lag_min; lag <= lag_max; ++lag) {
            int n = kWinSize - lag;
            double num = 0.0;
            for (int i = 0; i < n; ++i) num += frame[i] * frame[i + lag];
            double e0 = sq_prefix[n];
            double e1 = sq_prefix[kWinSize] - sq_prefix[lag];
            r[lag] = (e0 > 1e-12 && e1 > 1e-12) ? num / std::sqrt(e0 * e1) : 0.0;
            best = std::max(best, r[lag]);
        }
        if (best < kVoicingThreshold) continue;
        // Smallest local maximum within 2% of the global peak; picking the
        // shortest qualifying lag avoids octave-down errors on harmonic input.
        int pick = -1;
        for (int lag = lag_min; lag <= lag_max; ++lag) {
            if (r[lag] < 0.98 * best) continue;
            bool left_ok = lag == lag_min || r[lag] >= r[lag - 1];
            bool right_ok = lag == lag_max || r[lag] >= r[lag + 1];
            if (left_ok && right_ok) {
                pick = lag;
                break;
            }
        }
        if (pick < 0) continue;
        double lag_refined = pick;
        if (pick > lag_min && pick < lag_max) {
            double a = r[pick - 1], b = r[pick], c = r[pick + 1];
            double denom = a - 2.0 * b + c;
            if (std::abs(denom) > 1e-12) {
                double delta = 0.5 * (a - c) / denom;
                if (std::abs(delta) <= 1.0) lag_refined = pick + delta;
            }
        }
        out[f] = static_cast<float>(kSampleRate / lag_refined);
    }
    return out;
}

// ----- alignment -----

struct AlignmentInterval {
    std::string phoneme;
    double start = 0.0;
    double end = 0.0;
};

struct AlignmentIntervals {
    std::vector<AlignmentInterval> entries;
};

/// Parses tab-separated "phoneme<TAB>start<TAB>end" lines. '#' starts a
/// comment line; blank lines are skipped.
inline AlignmentIntervals parse_alignment(const std::string &text) {
    AlignmentIntervals out;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    auto parse_num = [&](const std::string &s, double &v) -> bool {
        const char *b = s.data();
        const char *e = b + s.size();
        auto res = std::from_chars(b, e, v);
        return res.ec == std::errc() && res.ptr == e;
    };
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> fields;
        size_t pos = 0;
        while (true) {
            size_t tab = line.find('\t', pos);
            fields.push_back(line.substr(pos, tab == std::string::npos ? tab : tab - pos));
            if (tab == std::string::npos) break;
            pos = tab + 1;
        }
        if (fields.size() != 3)
            throw std::runtime_error("expected 3 tab-separated fields at line " +
                                     std::to_string(line_no));
        AlignmentInterval iv;
        iv.phoneme = fields[0];
        if (iv.phoneme.empty())
            throw std::runtime_error("empty phoneme at line " + std::to_string(line_no));
        if (!parse_num(fields[1], iv.start) || !parse_num(fields[2], iv.end))
            throw std::runtime_error("unparsable number at line " + std::to_string(line_no));
        if (iv.end <= iv.start)
            throw std::runtime_error("end before start at line " + std::to_string(line_no));
        if (out.entries.empty()) {
            if (std::abs(iv.start) > 1e-9)
                throw std::runtime_error("first interval must start at 0 (line " +
                                         std::to_string(line_no) + ")");
        } else if (std::abs(iv.start - out.entries.back().end) > 1e-6) {
            throw std::runtime_error("intervals not contiguous (gap or overlap) at line " +
                                     std::to_string(line_no));
        }
        out.entries.push_back(iv);
    }
    if (out.entries.empty()) throw std::runtime_error("no intervals");
    return out;
}

inline std::string format_alignment(const AlignmentIntervals &iv) {
    std::string out;
    char buf[128];
    for (const auto &e : iv.entries) {
        std::snprintf(buf, sizeof(buf), "%s\t%.17g\t%.17g\n", e.phoneme.c_str(), e.start, e.end);
        out += buf;
    }
    return out;
}

/// Seconds -> frames via boundary rounding at the 12 ms hop; the final
/// duration absorbs a residual of at most +-2 frames.
inline std::vector<int32_t> intervals_to_durations(const AlignmentIntervals &iv, int mel_frames) {
    if (iv.entries.empty()) throw std::runtime_error("no intervals");
    std::vector<int32_t> durations(iv.entries.size());
    int64_t prev = 0;
    for (size_t i = 0; i < iv.entries.size(); ++i) {
        int64_t b = std::llround(iv.entries[i].end / kHopSeconds);
        if (b < prev) throw std::runtime_error("alignment boundaries not monotone");
        durations[i] = static_cast<int32_t>(b - prev);
        prev = b;
    }
    int64_t drift = prev - mel_frames;
    if (std::llabs(drift) > 2)
        throw std::runtime_error("alignment/audio mismatch: alignment spans " +
                                 std::to_string(prev) + " frames but audio has " +
                                 std::to_string(mel_frames));
    durations.back() -= static_cast<int32_t>(drift);
    if (durations.back() < 0) throw std::runtime_error("alignment/audio mismatch: final interval too short");
    return durations;
}

// ----- aligned utterances -----

struct AlignedUtterance {
    std::string id;
    std::vector<int32_t> phonemes;
    std::vector<int32_t> durations;  // frames per phoneme
    std::vector<float> pitch;        // Hz per frame, 0 = unvoiced
    std::vector<float> energy;       // nonneg per frame
    Mat<float> mel;                  // (F, n_mel)
    int32_t speaker_id = 0;
    int32_t style_id = 0;

    int frames() const { return mel.rows; }

    void validate() const {
        if (phonemes.empty()) throw std::runtime_error("utterance " + id + ": no phonemes");
        if (phonemes.size() != durations.size())
            throw std::runtime_error("utterance " + id + ": phoneme/duration length mismatch");
        int64_t total = 0;
        for (int32_t d : durations) {
            if (d < 0) throw std::runtime_error("utterance " + id + ": negative duration");
            total += d;
        }
        if (total != mel.rows || static_cast<size_t>(total) != pitch.size() ||
            static_cast<size_t>(total) != energy.size())
            throw std::runtime_error("utterance " + id +
                                     ": duration sum does not match frame count");
        if (total == 0) throw std::runtime_error("utterance " + id + ": empty (zero frames)");
        for (float p : pitch)
            if (!(p >= 0.0f)) throw std::runtime_error("utterance " + id + ": negative pitch");
        for (float e : energy)
            if (!(e >= 0.0f)) throw std::runtime_error("utterance " + id + ": negative energy");
    }
};

// ----- WAV I/O (PCM 16-bit little-endian mono RIFF) -----

inline std::pair<std::vector<double>, int> read_wav(const std::string &path) {
    auto data = io::read_file(path);
    io::Reader r(data);
    if (r.raw(4, "RIFF tag") != "RIFF") throw std::runtime_error(path + ": not a RIFF file");
    r.u32("riff size");
    if (r.raw(4, "WAVE tag") != "WAVE") throw std::runtime_error(path + ": not a WAVE file");
    int sample_rate = 0;
    bool fmt_seen = false;
    while (r.pos < r.n) {
        std::string tag = r.raw(4, "chunk tag");
        uint32_t size = r.u32("chunk size");
        if (tag == "fmt ") {
            if (size < 16) throw std::runtime_error(path + ": bad fmt chunk");
            uint16_t format = r.u16("audio format");
            uint16_t channels = r.u16("channels");
            sample_rate = static_cast<int>(r.u32("sample rate"));
            r.u32("byte rate");
            r.u16("block align");
            uint16_t bits = r.u16("bits per sample");
            if (format != 1 || bits != 16)
                throw std::runtime_error(path + ": only PCM 16-bit supported");
            if (channels != 1) throw std::runtime_error(path + ": only mono supported");
            if (size > 16) r.raw(size - 16, "fmt extra");
            fmt_seen = true;
        } else if (tag == "data") {
            if (!fmt_seen) throw std::runtime_error(path + ": data chunk before fmt");
            size_t n = size / 2;
            std::vector<double> samples(n);
            for (size_t i = 0; i < n; ++i) {
                int16_t s = std::bit_cast<int16_t>(r.u16("sample"));
                samples[i] = static_cast<double>(s) / 32768.0;
            }
            return {std::move(samples), sample_rate};
        } else {
            r.raw(size + (size & 1), "chunk payload");
        }
    }
    throw std::runtime_error(path + ": no data chunk");
}

inline void write_wav(const std::string &path, const std::vector<double> &samples, int rate) {
    io::Writer w;
    uint32_t data_bytes = static_cast<uint32_t>(samples.size() * 2);
    w.bytes("RIFF", 4);
    w.u32(36 + data_bytes);
    w.bytes("WAVE", 4);
    w.bytes("fmt ", 4);
    w.u32(16);
    w.u16(1);  // PCM
    w.u16(1);  // mono
    w.u32(static_cast<uint32_t>(rate));
    w.u32(static_cast<uint32_t>(rate * 2));
    w.u16(2);
    w.u16(16);
    w.bytes("data", 4);
    w.u32(data_bytes);
    for (double v : samples) {
        long long q = std::llround(std::clamp(v, -1.0, 1.0) * 32768.0);
        q = std::clamp<long long>(q, -32768, 32767);
        w.u16(std::bit_cast<uint16_t>(static_cast<int16_t>(q)));
    }
    io::write_file(path, w.buf);
}

// ----- utterance assembly & cache -----

inline AlignedUtterance build_utterance(const std::string &wav_path,
                                        const std::string &alignment_path,
                                        const std::map<std::string, int32_t> &phoneme_map,
                                        int32_t speaker_id, int32_t style_id,
                                        const std::string &id) {
    auto [raw, rate] = read_wav(wav_path);
    Waveform wave = condition_wave(raw, rate);
    AlignedUtterance utt;
    utt.id = id;
    utt.speaker_id = speaker_id;
    utt.style_id = style_id;
    utt.mel = mel_spectrogram(wave);
    utt.energy = frame_energy(wave);
    utt.pitch = estimate_f0(wave);
    AlignmentIntervals iv = parse_alignment(io::read_text_file(alignment_path));
    for (const auto &e : iv.entries) {
        auto it = phoneme_map.find(e.phoneme);
        if (it == phoneme_map.end())
            throw std::runtime_error("unknown phoneme \"" + e.phoneme + "\" in " + alignment_path);
        utt.phonemes.push_back(it->second);
    }
    utt.durations = intervals_to_durations(iv, utt.mel.rows);
    utt.validate();
    return utt;
}

constexpr char kFeatureCacheMagic[] = "MSMSFEAT1";

inline void write_utterance_cache(const std::string &path, const AlignedUtterance &utt) {
    io::Writer w;
    w.bytes(kFeatureCacheMagic, 9);
    w.str16(utt.id);
    w.u32(static_cast<uint32_t>(utt.phonemes.size()));
    w.u32(static_cast<uint32_t>(utt.mel.rows));
    w.u32(static_cast<uint32_t>(utt.mel.cols));
    w.i32(utt.speaker_id);
    w.i32(utt.style_id);
    for (int32_t p : utt.phonemes) w.i32(p);
    for (int32_t d : utt.durations) w.i32(d);
    for (float v : utt.pitch) w.f32(v);
    for (float v : utt.energy) w.f32(v);
    for (float v : utt.mel.data) w.f32(v);
    io::write_file_atomic(path, w.buf);
}

inline AlignedUtterance read_utterance_cache(const std::string &path) {
    auto data = io::read_file(path);
    io::Reader r(data);
    if (r.raw(9, "magic") != kFeatureCacheMagic)
        throw std::runtime_error(path + ": bad feature cache magic");
    AlignedUtterance utt;
    utt.id = r.str16("id");
    uint32_t L = r.u32("phoneme count");
    uint32_t F = r.u32("frame count");
    uint32_t n_mel = r.u32("mel bands");
    utt.speaker_id = r.i32("speaker id");
    utt.style_id = r.i32("style id");
    utt.phonemes.resize(L);
    for (uint32_t i = 0; i < L; ++i) utt.phonemes[i] = r.i32("phoneme");
    utt.durations.resize(L);
    for (uint32_t i = 0; i < L; ++i) utt.durations[i] = r.i32("duration");
    utt.pitch.resize(F);
    for (uint32_t i = 0; i < F; ++i) utt.pitch[i] = r.f32("pitch");
    utt.energy.resize(F);
    for (uint32_t i = 0; i < F; ++i) utt.energy[i] = r.f32("energy");
    utt.mel = Mat<float>(static_cast<int>(F), static_cast<int>(n_mel));
    for (auto &v : utt.mel.data) v = r.f32("mel");
    if (!r.exhausted()) throw std::runtime_error(path + ": trailing bytes in feature cache");
    utt.validate();
    return utt;
}

}  // namespace mstts
