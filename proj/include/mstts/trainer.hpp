#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "mstts/features.hpp"
#include "mstts/io.hpp"
#include "mstts/model.hpp"
#include "mstts/normalize.hpp"

namespace mstts {

// ----- manifest -----

struct ManifestEntry {
    std::string id;
    std::string wav_path;
    std::string align_path;
    std::string phonemes;  // space-separated symbols
    std::string speaker;
    std::string style;
    int32_t speaker_id = -1;
    int32_t style_id = -1;
};

struct Manifest {
    std::vector<ManifestEntry> entries;
    std::vector<std::string> speaker_names;    // dense id -> name
    std::vector<std::string> style_names;
    std::vector<std::string> phoneme_symbols;  // dense id -> symbol
    std::map<std::string, int32_t> speaker_ids;
    std::map<std::string, int32_t> style_ids;
    std::map<std::string, int32_t> phoneme_ids;
};

/// TSV records: id, wav path, alignment path, space-separated phonemes,
/// speaker, style. Dense ids are assigned in first-appearance order;
/// relative paths resolve against the manifest's directory.
inline Manifest load_manifest(const std::string &path) {
    std::string text = io::read_text_file(path);
    std::filesystem::path base = std::filesystem::path(path).parent_path();
    Manifest m;
    std::istringstream in(text);
    std::string line;
    int line_no = 0;
    std::map<std::string, int> seen_ids;
    auto resolve = [&](const std::string &p) {
        std::filesystem::path fp(p);
        return fp.is_absolute() ? fp.string() : (base / fp).string();
    };
    auto intern = [](std::map<std::string, int32_t> &ids, std::vector<std::string> &names,
                     const std::string &name) {
        auto it = ids.find(name);
        if (it != ids.end()) return it->second;
        int32_t id = static_cast<int32_t>(names.size());
        ids[name] = id;
        names.push_back(name);
        return id;
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
        if (fields.size() != 6)
            throw std::runtime_error(path + ": expected 6 tab-separated fields at line " +
                                     std::to_string(line_no));
        for (size_t i = 0; i < 6; ++i)
            if (fields[i].empty())
                throw std::runtime_error(path + ": missing field " + std::to_string(i + 1) +
                                         " at line " + std::to_string(line_no));
        if (seen_ids.count(fields[0]))
            throw std::runtime_error(path + ": duplicate utterance id \"" + fields[0] +
                                     "\" at line " + std::to_string(line_no));
        seen_ids[fields[0]] = line_no;
        ManifestEntry e;
        e.id = fields[0];
        e.wav_path = resolve(fields[1]);
        e.align_path = resolve(fields[2]);
        e.phonemes = fields[3];
        e.speaker = fields[4];
        e.style = fields[5];
        e.speaker_id = intern(m.speaker_ids, m.speaker_names, e.speaker);
        e.style_id = intern(m.style_ids, m.style_names, e.style);
        std::istringstream ph(e.phonemes);
        std::string sym;
        while (ph >> sym) intern(m.phoneme_ids, m.phoneme_symbols, sym);
        m.entries.push_back(std::move(e));
    }
    if (m.entries.empty()) throw std::runtime_error(path + ": empty manifest");
    return m;
}

/// Builds (or loads from `cache_dir`) every utterance in the manifest.
inline std::vector<AlignedUtterance> load_corpus(const Manifest &m,
                                                 const std::string &cache_dir = "") {
    std::vector<AlignedUtterance> utts;
    utts.reserve(m.entries.size());
    for (const auto &e : m.entries) {
        std::string cache_path;
        if (!cache_dir.empty()) {
            cache_path = (std::filesystem::path(cache_dir) / (e.id + ".feat")).string();
            if (std::filesystem::exists(cache_path)) {
                utts.push_back(read_utterance_cache(cache_path));
                continue;
            }
        }
        AlignedUtterance u =
            build_utterance(e.wav_path, e.align_path, m.phoneme_ids, e.speaker_id, e.style_id, e.id);
        if (!cache_path.empty()) write_utterance_cache(cache_path, u);
        utts.push_back(std::move(u));
    }
    return utts;
}

/// Normalized copies of a corpus under UttNorm or SpkNorm. Speaker scope
/// pools each speaker's utterances in utterance-id order.
inline std::vector<AlignedUtterance> normalize_corpus(const std::vector<AlignedUtterance> &utts,
                                                      NormScope scope) {
    std::vector<AlignedUtterance> out;
    out.reserve(utts.size());
    if (scope == NormScope::utterance) {
        for (const auto &u : utts) out.push_back(apply_norm(u, compute_stats({&u}, scope)));
        return out;
    }
    std::map<int32_t, std::vector<const AlignedUtterance *>> groups;
    for (const auto &u : utts) groups[u.speaker_id].push_back(&u);
    std::map<int32_t, NormStats> stats;
    for (auto &[spk, group] : groups) {
        std::sort(group.begin(), group.end(),
                  [](const AlignedUtterance *a, const AlignedUtterance *b) { return a->id < b->id; });
        stats[spk] = compute_stats(group, scope);
    }
    for (const auto &u : utts) out.push_back(apply_norm(u, stats.at(u.speaker_id)));
    return out;
}

// ----- batches & loss -----

struct Batch {
    Mat<int32_t> phonemes;      // B x Lmax, padded with 0
    Mat<uint8_t> phoneme_mask;  // B x Lmax
    Mat<int32_t> durations;     // B x Lmax
    Mat<float> pitch;           // B x Fmax
    Mat<float> energy;          // B x Fmax
    Mat<uint8_t> frame_mask;    // B x Fmax
    std::vector<Mat<float>> mel;  // per item, (Fmax, n_mel) zero-padded
    std::vector<int32_t> speaker_ids, style_ids;

    int size() const { return phonemes.rows; }
    int phoneme_len(int i) const {
        int n = 0;
        for (int c = 0; c < phoneme_mask.cols; ++c) n += phoneme_mask(i, c);
        return n;
    }
    int frame_len(int i) const {
        int n = 0;
        for (int c = 0; c < frame_mask.cols; ++c) n += frame_mask(i, c);
        return n;
    }
};

inline Batch collate(const std::vector<const AlignedUtterance *> &utts) {
    if (utts.empty()) throw std::invalid_argument("collate: empty batch");
    int B = static_cast<int>(utts.size());
    int lmax = 0, fmax = 0, n_mel = utts[0]->mel.cols;
    for (const auto *u : utts) {
        lmax = std::max(lmax, static_cast<int>(u->phonemes.size()));
        fmax = std::max(fmax, u->frames());
        if (u->mel.cols != n_mel) throw std::invalid_argument("collate: mel band mismatch");
    }
    Batch b;
    b.phonemes = Mat<int32_t>(B, lmax);
    b.phoneme_mask = Mat<uint8_t>(B, lmax);
    b.durations = Mat<int32_t>(B, lmax);
    b.pitch = Mat<float>(B, fmax);
    b.energy = Mat<float>(B, fmax);
    b.frame_mask = Mat<uint8_t>(B, fmax);
    for (int i = 0; i < B; ++i) {
        const AlignedUtterance &u = *utts[i];
        for (size_t j = 0; j < u.phonemes.size(); ++j) {
            b.phonemes(i, static_cast<int>(j)) = u.phonemes[j];
            b.durations(i, static_cast<int>(j)) = u.durations[j];
            b.phoneme_mask(i, static_cast<int>(j)) = 1;
        }
        for (int f = 0; f < u.frames(); ++f) {
            b.pitch(i, f) = u.pitch[f];
            b.energy(i, f) = u.energy[f];
            b.frame_mask(i, f) = 1;
        }
        Mat<float> mel(fmax, n_mel);
        for (int f = 0; f < u.frames(); ++f)
            for (int c = 0; c < n_mel; ++c) mel(f, c) = u.mel(f, c);
        b.mel.push_back(std::move(mel));
        b.speaker_ids.push_back(u.speaker_id);
        b.style_ids.push_back(u.style_id);
    }
    return b;
}

template <typename T>
struct BatchPredictions {
    std::vector<Value<T>> mel;            // (F_i, n_mel)
    std::vector<Value<T>> log_durations;  // (L_i, 1)
    std::vector<Value<T>> pitch;          // (F_i, 1)
    std::vector<Value<T>> energy;         // (F_i, 1)
};

template <typename T>
struct LossValues {
    Value<T> total, mel, duration, pitch, energy;
    double v(Value<T> x) const { return static_cast<double>(x.val()(0, 0)); }
};

/// Masked means: L1 over mel cells, MSE over log(d+1) durations and the
/// normalized pitch/energy trajectories. The valid region of each padded
/// tensor is read through the batch masks, so extra padding cannot move the
/// loss.
template <typename T>
LossValues<T> loss_total(Graph<T> &g, const BatchPredictions<T> &pred, const Batch &batch) {
    int B = batch.size();
    if (static_cast<int>(pred.mel.size()) != B || static_cast<int>(pred.log_durations.size()) != B ||
        static_cast<int>(pred.pitch.size()) != B || static_cast<int>(pred.energy.size()) != B)
        throw std::invalid_argument("loss_total: prediction count != batch size");
    int64_t mel_cells = 0, dur_count = 0, frame_count = 0;
    std::optional<Value<T>> mel_sum, dur_sum, pitch_sum, energy_sum;
    auto fold = [&g](std::optional<Value<T>> &acc, Value<T> v) {
        acc = acc ? g.add(*acc, v) : v;
    };
    for (int i = 0; i < B; ++i) {
        int L = batch.phoneme_len(i), F = batch.frame_len(i);
        int n_mel = batch.mel[i].cols;
        if (pred.mel[i].rows() != F || pred.mel[i].cols() != n_mel)
            throw std::invalid_argument("loss_total: mel prediction shape mismatch");
        if (pred.log_durations[i].rows() != L || pred.pitch[i].rows() != F ||
            pred.energy[i].rows() != F)
            throw std::invalid_argument("loss_total: variance prediction shape mismatch");

        Mat<T> mel_t(F, n_mel);
        for (int f = 0; f < F; ++f)
            for (int c = 0; c < n_mel; ++c) mel_t(f, c) = static_cast<T>(batch.mel[i](f, c));
        Mat<T> dur_t(L, 1), pitch_t(F, 1), energy_t(F, 1);
        for (int j = 0; j < L; ++j)
            dur_t(j, 0) = static_cast<T>(std::log(1.0 + batch.durations(i, j)));
        for (int f = 0; f < F; ++f) {
            pitch_t(f, 0) = static_cast<T>(batch.pitch(i, f));
            energy_t(f, 0) = static_cast<T>(batch.energy(i, f));
        }
        fold(mel_sum, g.sum(g.abs(g.sub(pred.mel[i], g.leaf(std::move(mel_t))))));
        fold(dur_sum, g.sum(g.square(g.sub(pred.log_durations[i], g.leaf(std::move(dur_t))))));
        fold(pitch_sum, g.sum(g.square(g.sub(pred.pitch[i], g.leaf(std::move(pitch_t))))));
        fold(energy_sum, g.sum(g.square(g.sub(pred.energy[i], g.leaf(std::move(energy_t))))));
        mel_cells += static_cast<int64_t>(F) * n_mel;
        dur_count += L;
        frame_count += F;
    }
    LossValues<T> out;
    out.mel = g.scale(*mel_sum, static_cast<T>(1.0 / mel_cells));
    out.duration = g.scale(*dur_sum, static_cast<T>(1.0 / dur_count));
    out.pitch = g.scale(*pitch_sum, static_cast<T>(1.0 / frame_count));
    out.energy = g.scale(*energy_sum, static_cast<T>(1.0 / frame_count));
    out.total = g.add(g.add(out.mel, out.duration), g.add(out.pitch, out.energy));
    const char *names[] = {"mel", "duration", "pitch", "energy", "total"};
    Value<T> terms[] = {out.mel, out.duration, out.pitch, out.energy, out.total};
    for (int i = 0; i < 5; ++i)
        if (!std::isfinite(out.v(terms[i])))
            throw std::runtime_error(std::string("non-finite ") + names[i] + " loss");
    return out;
}

// ----- schedule & optimizer -----

struct TrainingSchedule {
    double peak_lr = 1e-3;
    int64_t warmup_steps = 4000;
    int64_t total_steps = 2000;
    double weight_decay = 1e-6;
    int batch_size = 8;
    uint64_t seed = 1;

    void validate() const {
        if (warmup_steps < 1) throw std::invalid_argument("schedule: warmup_steps < 1");
        if (!(peak_lr > 0.0)) throw std::invalid_argument("schedule: peak_lr <= 0");
        if (total_steps < 1) throw std::invalid_argument("schedule: total_steps < 1");
        if (batch_size < 1) throw std::invalid_argument("schedule: batch_size < 1");
    }
};

/// Noam schedule normalized to its peak: linear warmup to peak_lr, then
/// inverse-square-root decay.
inline double noam_lr(int64_t step, double peak_lr = 1e-3, int64_t warmup_steps = 4000) {
    if (step < 1) throw std::invalid_argument("noam_lr: step must be >= 1");
    double s = static_cast<double>(step), w = static_cast<double>(warmup_steps);
    return peak_lr * std::min(s / w, std::sqrt(w / s));
}

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.98;
constexpr double kAdamEps = 1e-9;

struct AdamState {
    std::vector<Mat<float>> m, v;

    static AdamState zeros_like(const Parameters<float> &params) {
        AdamState s;
        for (const auto &[name, t] : params.tensors) {
            s.m.emplace_back(t.rows, t.cols);
            s.v.emplace_back(t.rows, t.cols);
        }
        return s;
    }
};

/// Adam with bias correction followed by decoupled weight decay
/// (p -= lr * wd * p after the Adam update). `step` is 1-based.
inline void optimizer_step(Parameters<float> &params, const std::vector<Mat<float>> &grads,
                           AdamState &opt, int64_t step, double lr, double weight_decay) {
    if (grads.size() != params.count() || opt.m.size() != params.count())
        throw std::invalid_argument("optimizer_step: shape roster mismatch");
    double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(step));
    double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(step));
    for (size_t t = 0; t < params.count(); ++t) {
        Mat<float> &p = params.tensors[t].second;
        const Mat<float> &g = grads[t];
        if (!p.same_shape(g)) throw std::invalid_argument("optimizer_step: gradient shape mismatch");
        Mat<float> &m = opt.m[t];
        Mat<float> &v = opt.v[t];
        for (size_t i = 0; i < p.data.size(); ++i) {
            double gi = g.data[i];
            double mi = kAdamBeta1 * m.data[i] + (1.0 - kAdamBeta1) * gi;
            double vi = kAdamBeta2 * v.data[i] + (1.0 - kAdamBeta2) * gi * gi;
            m.data[i] = static_cast<float>(mi);
            v.data[i] = static_cast<float>(vi);
            double update = lr * (mi / bc1) / (std::sqrt(vi / bc2) + kAdamEps);
            double next = static_cast<double>(p.data[i]) - update;
            next -= lr * weight_decay * next;
            if (!std::isfinite(next))
                throw std::runtime_error("non-finite update in tensor " + params.tensors[t].first);
            p.data[i] = static_cast<float>(next);
        }
    }
}

// ----- checkpoint -----

constexpr char kCheckpointMagic[] = "MSMS1";
constexpr uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelConfig config;
    Parameters<float> params;
    AdamState opt;
    int64_t step = 0;
    TrainingSchedule schedule;
    std::vector<std::string> phoneme_symbols, speaker_names, style_names;

    std::map<std::string, int32_t> phoneme_map() const {
        std::map<std::string, int32_t> m;
        for (size_t i = 0; i < phoneme_symbols.size(); ++i)
            m[phoneme_symbols[i]] = static_cast<int32_t>(i);
        return m;
    }
    int32_t name_to_id(const std::vector<std::string> &names, const std::string &name,
                       const char *what) const {
        for (size_t i = 0; i < names.size(); ++i)
            if (names[i] == name) return static_cast<int32_t>(i);
        throw std::runtime_error(std::string("unknown ") + what + " name \"" + name + "\"");
    }
    int32_t speaker_id(const std::string &name) const {
        return name_to_id(speaker_names, name, "speaker");
    }
    int32_t style_id(const std::string &name) const { return name_to_id(style_names, name, "style"); }
};

namespace detail {

inline void write_config(io::Writer &w, const ModelConfig &c) {
    w.i32(c.phoneme_vocab_size);
    w.i32(c.hidden_dim);
    w.i32(c.encoder_layers);
    w.i32(c.decoder_layers);
    w.i32(c.attention_heads);
    w.i32(c.conv_kernel);
    w.i32(c.variance_filter_dim);
    w.i32(c.variance_kernel);
    w.f64(c.dropout);
    w.i32(c.n_mel);
    w.i32(c.n_speakers);
    w.i32(c.n_styles);
    w.i32(c.n_bins);
    w.f64(c.bin_low);
    w.f64(c.bin_high);
    w.i32(c.max_frames);
}

inline ModelConfig read_config(io::Reader &r) {
    ModelConfig c;
    c.phoneme_vocab_size = r.i32("config");
    c.hidden_dim = r.i32("config");
    c.encoder_layers = r.i32("config");
    c.decoder_layers = r.i32("config");
    c.attention_heads = r.i32("config");
    c.conv_kernel = r.i32("config");
    c.variance_filter_dim = r.i32("config");
    c.variance_kernel = r.i32("config");
    c.dropout = r.f64("config");
    c.n_mel = r.i32("config");
    c.n_speakers = r.i32("config");
    c.n_styles = r.i32("config");
    c.n_bins = r.i32("config");
    c.bin_low = r.f64("config");
    c.bin_high = r.f64("config");
    c.max_frames = r.i32("config");
    return c;
}

inline void write_names(io::Writer &w, const std::vector<std::string> &names) {
    w.u32(static_cast<uint32_t>(names.size()));
    for (const auto &n : names) w.str16(n);
}

inline std::vector<std::string> read_names(io::Reader &r, const char *what) {
    uint32_t n = r.u32(what);
    std::vector<std::string> names(n);
    for (uint32_t i = 0; i < n; ++i) names[i] = r.str16(what);
    return names;
}

inline void write_mat(io::Writer &w, const Mat<float> &m) {
    w.u32(static_cast<uint32_t>(m.rows));
    w.u32(static_cast<uint32_t>(m.cols));
    for (float v : m.data) w.f32(v);
}

inline Mat<float> read_mat(io::Reader &r, const char *what) {
    uint32_t rows = r.u32(what), cols = r.u32(what);
    Mat<float> m(static_cast<int>(rows), static_cast<int>(cols));
    for (auto &v : m.data) v = r.f32(what);
    return m;
}

}  // namespace detail

inline void save_checkpoint(const std::string &path, const Checkpoint &ck) {
    io::Writer w;
    w.bytes(kCheckpointMagic, 5);
    w.u32(kCheckpointVersion);
    detail::write_config(w, ck.config);
    detail::write_names(w, ck.phoneme_symbols);
    detail::write_names(w, ck.speaker_names);
    detail::write_names(w, ck.style_names);
    w.f64(ck.schedule.peak_lr);
    w.i64(ck.schedule.warmup_steps);
    w.i64(ck.schedule.total_steps);
    w.f64(ck.schedule.weight_decay);
    w.i32(ck.schedule.batch_size);
    w.u64(ck.schedule.seed);
    w.i64(ck.step);
    w.u32(static_cast<uint32_t>(ck.params.count()));
    for (const auto &[name, m] : ck.params.tensors) {
        w.str16(name);
        detail::write_mat(w, m);
    }
    if (ck.opt.m.size() != ck.params.count() || ck.opt.v.size() != ck.params.count())
        throw std::invalid_argument("save_checkpoint: optimizer state roster mismatch");
    for (const auto &m : ck.opt.m) detail::write_mat(w, m);
    for (const auto &v : ck.opt.v) detail::write_mat(w, v);
    io::write_file_atomic(path, w.buf);
}

inline Checkpoint load_checkpoint(const std::string &path) {
    auto data = io::read_file(path);
    io::Reader r(data);
    if (r.raw(5, "magic") != kCheckpointMagic)
        throw std::runtime_error(path + ": bad checkpoint magic");
    uint32_t version = r.u32("version");
    if (version != kCheckpointVersion)
        throw std::runtime_error(path + ": unsupported checkpoint version " +
                                 std::to_string(version));
    Checkpoint ck;
    ck.config = detail::read_config(r);
    ck.phoneme_symbols = detail::read_names(r, "phoneme names");
    ck.speaker_names = detail::read_names(r, "speaker names");
    ck.style_names = detail::read_names(r, "style names");
    ck.schedule.peak_lr = r.f64("schedule");
    ck.schedule.warmup_steps = r.i64("schedule");
    ck.schedule.total_steps = r.i64("schedule");
    ck.schedule.weight_decay = r.f64("schedule");
    ck.schedule.batch_size = r.i32("schedule");
    ck.schedule.seed = r.u64("schedule");
    ck.step = r.i64("step");
    uint32_t n_tensors = r.u32("tensor count");
    for (uint32_t t = 0; t < n_tensors; ++t) {
        std::string name = r.str16("tensor name");
        ck.params.add(name, detail::read_mat(r, "tensor"));
    }
    for (uint32_t t = 0; t < n_tensors; ++t) ck.opt.m.push_back(detail::read_mat(r, "adam m"));
    for (uint32_t t = 0; t < n_tensors; ++t) ck.opt.v.push_back(detail::read_mat(r, "adam v"));
    if (!r.exhausted()) throw std::runtime_error(path + ": trailing bytes in checkpoint");
    return ck;
}

// ----- training loop -----

struct LossRow {
    int64_t step;
    double lr, total, mel, duration, pitch, energy;
};

inline std::string format_loss_row(const LossRow &r) {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%lld %.17g %.17g %.17g %.17g %.17g %.17g",
                  static_cast<long long>(r.step), r.lr, r.total, r.mel, r.duration, r.pitch,
                  r.energy);
    return buf;
}

struct TrainOptions {
    std::string checkpoint_path;   // written at the end and every checkpoint_every steps
    int64_t checkpoint_every = 0;  // 0 = final only
    std::string cache_dir;         // optional feature cache
    const Checkpoint *resume = nullptr;
    std::ostream *log_stream = nullptr;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<LossRow> log;
};

namespace detail {
/// splitmix64-style mixer for deriving per-step/per-epoch RNG streams.
inline uint64_t mix64(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}
}  // namespace detail

/// Deterministic, resumable training. Every source of randomness (init,
/// epoch shuffles, per-step dropout) derives from (schedule.seed, step),
/// so a checkpoint at step k plus the manifest reproduces step k+1 exactly.
inline TrainResult train(const Manifest &manifest, ModelConfig cfg, TrainingSchedule schedule,
                         NormScope norm_mode, const TrainOptions &opts = {}) {
    schedule.validate();
    for (const auto &e : manifest.entries)
        if (e.speaker_id != e.style_id)
            throw std::runtime_error("training data must pair each speaker with its own style: \"" +
                                     e.id + "\" has speaker id " + std::to_string(e.speaker_id) +
                                     " but style id " + std::to_string(e.style_id));
    if (cfg.phoneme_vocab_size == 0)
        cfg.phoneme_vocab_size = static_cast<int>(manifest.phoneme_symbols.size());
    if (cfg.n_speakers == 0) cfg.n_speakers = static_cast<int>(manifest.speaker_names.size());
    if (cfg.n_styles == 0) cfg.n_styles = static_cast<int>(manifest.style_names.size());
    cfg.validate();
    if (cfg.phoneme_vocab_size < static_cast<int>(manifest.phoneme_symbols.size()) ||
        cfg.n_speakers < static_cast<int>(manifest.speaker_names.size()) ||
        cfg.n_styles < static_cast<int>(manifest.style_names.size()))
        throw std::runtime_error("config tables smaller than manifest vocabulary");

    std::vector<AlignedUtterance> corpus = load_corpus(manifest, opts.cache_dir);
    std::vector<AlignedUtterance> normalized = normalize_corpus(corpus, norm_mode);

    Checkpoint ck;
    int64_t start_step = 0;
    if (opts.resume) {
        ck = *opts.resume;
        io::Writer a, b;
        detail::write_config(a, ck.config);
        detail::write_config(b, cfg);
        if (a.buf != b.buf) throw std::runtime_error("resume: checkpoint config differs");
        // total_steps may grow on resume; everything that shapes the step
        // sequence must match or determinism is gone.
        if (schedule.seed != ck.schedule.seed || schedule.peak_lr != ck.schedule.peak_lr ||
            schedule.warmup_steps != ck.schedule.warmup_steps ||
            schedule.weight_decay != ck.schedule.weight_decay ||
            schedule.batch_size != ck.schedule.batch_size)
            throw std::runtime_error("resume: schedule differs from checkpoint");
        ck.schedule = schedule;
        start_step = ck.step;
    } else {
        ck.config = cfg;
        ck.params = init_parameters<float>(cfg, schedule.seed);
        ck.opt = AdamState::zeros_like(ck.params);
        ck.schedule = schedule;
        ck.step = 0;
        ck.phoneme_symbols = manifest.phoneme_symbols;
        ck.speaker_names = manifest.speaker_names;
        ck.style_names = manifest.style_names;
    }

    int64_t n = static_cast<int64_t>(normalized.size());
    int64_t batches_per_epoch = (n + schedule.batch_size - 1) / schedule.batch_size;
    std::vector<int64_t> order(n);
    int64_t shuffled_epoch = -1;
    int64_t last_saved_step = -1;
    TrainResult result;

    auto save = [&](int64_t step) {
        if (opts.checkpoint_path.empty()) return;
        ck.step = step;
        save_checkpoint(opts.checkpoint_path, ck);
        last_saved_step = step;
    };

    for (int64_t step = start_step + 1; step <= schedule.total_steps; ++step) {
        int64_t epoch = (step - 1) / batches_per_epoch;
        int64_t batch_idx = (step - 1) % batches_per_epoch;
        if (epoch != shuffled_epoch) {
            std::iota(order.begin(), order.end(), 0);
            std::mt19937_64 erng(
                detail::mix64(schedule.seed, 0xE000000000000000ULL + static_cast<uint64_t>(epoch)));
            std::shuffle(order.begin(), order.end(), erng);
            shuffled_epoch = epoch;
        }
        int64_t lo = batch_idx * schedule.batch_size;
        int64_t hi = std::min<int64_t>(n, lo + schedule.batch_size);
        std::vector<const AlignedUtterance *> items;
        for (int64_t i = lo; i < hi; ++i) items.push_back(&normalized[order[i]]);

        LossRow row;
        try {
            Batch batch = collate(items);
            std::mt19937_64 drop_rng(
                detail::mix64(schedule.seed, 0xD000000000000000ULL + static_cast<uint64_t>(step)));
            std::mt19937_64 *drop = cfg.dropout > 0.0 ? &drop_rng : nullptr;
            Graph<float> g;
            ParamVars<float> pv = ParamVars<float>::bind(g, ck.params, /*requires_grad=*/true);
            BatchPredictions<float> preds;
            for (const AlignedUtterance *u : items) {
                TeacherForward<float> f = forward_teacher(g, pv, cfg, *u, drop);
                preds.mel.push_back(f.mel);
                preds.log_durations.push_back(f.log_durations);
                preds.pitch.push_back(f.pitch);
                preds.energy.push_back(f.energy);
            }
            LossValues<float> loss = loss_total(g, preds, batch);
            g.backward(loss.total);
            std::vector<Mat<float>> grads = collect_gradients(g, pv);
            double lr = noam_lr(step, schedule.peak_lr, schedule.warmup_steps);
            optimizer_step(ck.params, grads, ck.opt, step, lr, schedule.weight_decay);
            row = LossRow{step, lr, loss.v(loss.total), loss.v(loss.mel), loss.v(loss.duration),
                          loss.v(loss.pitch), loss.v(loss.energy)};
        } catch (const std::exception &e) {
            throw std::runtime_error(std::string(e.what()) + " at step " + std::to_string(step) +
                                     (last_saved_step >= 0
                                          ? "; last good checkpoint at step " +
                                                std::to_string(last_saved_step) + " retained"
                                          : ""));
        }
        result.log.push_back(row);
        if (opts.log_stream) *opts.log_stream << format_loss_row(row) << "\n";
        if (opts.checkpoint_every > 0 && step % opts.checkpoint_every == 0) save(step);
    }
    if (last_saved_step != schedule.total_steps) save(schedule.total_steps);
    ck.step = schedule.total_steps;
    result.checkpoint = std::move(ck);
    return result;
}

// ----- synthetic corpus -----

struct CorpusSpec {
    int n_speakers = 3;
    int utterances_each = 8;
    uint64_t seed = 1;
};

/// 16-symbol toy phoneme inventory; "sil" marks generated silence.
inline const std::vector<std::string> &toy_phoneme_inventory() {
    static const std::vector<std::string> inv = {"sil", "pa", "ta", "ka", "ma", "na", "la", "ra",
                                                 "sa",  "fa", "va", "ja", "wa", "ha", "za", "ba"};
    return inv;
}

inline const std::vector<std::string> &contour_families() {
    static const std::vector<std::string> f = {"rising", "falling", "flat"};
    return f;
}

/// Deterministic desk-scale stand-in corpus: every speaker is a harmonic
/// voice with its own spectral resonance and base F0, and follows exactly one
/// style (a pitch-contour family plus a duration scale). Boundaries land on
/// frame multiples so the emitted alignments are exact.
inline std::string generate_synthetic_corpus(const CorpusSpec &spec, const std::string &out_dir) {
    if (spec.n_speakers < 2)
        throw std::invalid_argument("generate_synthetic_corpus: need at least 2 speakers");
    if (spec.utterances_each < 1)
        throw std::invalid_argument("generate_synthetic_corpus: need at least 1 utterance each");
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "wav");
    fs::create_directories(fs::path(out_dir) / "align");

    const auto &inventory = toy_phoneme_inventory();
    const auto &families = contour_families();
    std::string manifest;
    std::string meta = "{\n  \"seed\": " + std::to_string(spec.seed) + ",\n  \"speakers\": [\n";

    for (int s = 0; s < spec.n_speakers; ++s) {
        std::mt19937_64 rng(detail::mix64(spec.seed, 0xc0450ULL + static_cast<uint64_t>(s)));
        double denom = std::max(1, spec.n_speakers - 1);
        double base_f0 = 130.0 + 170.0 * s / denom;
        double resonance = 600.0 + 2600.0 * s / denom;
        const std::string &family = families[s % families.size()];
        std::string style_name =
            s < static_cast<int>(families.size())
                ? family
                : family + "-" + std::to_string(s / static_cast<int>(families.size()) + 1);
        double dur_scale = family == "rising" ? 1.0 : (family == "falling" ? 1.3 : 0.8);
        std::string spk_name = "spk" + std::to_string(s);

        for (int u = 0; u < spec.utterances_each; ++u) {
            std::string id = spk_name + "_" + (u < 10 ? "0" : "") + std::to_string(u);
            std::uniform_int_distribution<int> n_syms(4, 7);
            std::uniform_int_distribution<int> sym_pick(1, static_cast<int>(inventory.size()) - 1);
            std::uniform_int_distribution<int> jitter(-1, 1);
            std::uniform_real_distribution<double> f0_mult_dist(0.85, 1.15);
            int count = n_syms(rng);
            std::vector<int> syms = {0};
            for (int i = 0; i < count; ++i) syms.push_back(sym_pick(rng));
            syms.push_back(0);
            std::vector<int> frames(syms.size());
            for (size_t i = 0; i < syms.size(); ++i) {
                if (syms[i] == 0) {
                    frames[i] = 3;
                } else {
                    int base = 5 + (syms[i] * 3) % 7 + jitter(rng);
                    frames[i] = std::max(2, static_cast<int>(std::llround(base * dur_scale)));
                }
            }
            double f0_mult = f0_mult_dist(rng);

            int total_frames = std::accumulate(frames.begin(), frames.end(), 0);
            int n_samples = total_frames * kHopSize;
            std::vector<double> wave(n_samples, 0.0);
            int voiced_start = frames[0] * kHopSize;
            int voiced_end = n_samples - frames.back() * kHopSize;
            double utt_f0 = base_f0 * f0_mult;

            auto contour_f0 = [&](int sample) {
                double t = static_cast<double>(sample - voiced_start) /
                           std::max(1, voiced_end - voiced_start);
                if (family == "rising") return utt_f0 * (0.85 + 0.30 * t);
                if (family == "falling") return utt_f0 * (1.15 - 0.30 * t);
                double secs = static_cast<double>(sample) / kSampleRate;
                return utt_f0 * (1.0 + 0.02 * std::sin(2.0 * std::numbers::pi * 5.0 * secs));
            };

            double phase = 0.0;
            int pos = 0;
            for (size_t i = 0; i < syms.size(); ++i) {
                int seg = frames[i] * kHopSize;
                if (syms[i] != 0) {
                    double amp = 0.35 + 0.55 * ((syms[i] * 7) % 15) / 14.0;
                    double mid_f0 = contour_f0(pos + seg / 2);
                    std::vector<double> harm;
                    for (int h = 1; h * mid_f0 < 7400.0; ++h) {
                        double fh = h * mid_f0;
                        double a = std::exp(-(fh - resonance) * (fh - resonance) /
                                            (2.0 * 700.0 * 700.0)) +
                                   0.12 / h;
                        harm.push_back(a);
                    }
                    int fade = kSampleRate / 500;  // 2 ms
                    for (int j = 0; j < seg; ++j) {
                        int sample = pos + j;
                        phase += 2.0 * std::numbers::pi * contour_f0(sample) / kSampleRate;
                        double v = 0.0;
                        for (size_t h = 0; h < harm.size(); ++h)
                            v += harm[h] * std::sin((h + 1) * phase);
                        double env = 1.0;
                        if (j < fade) env = static_cast<double>(j) / fade;
                        if (seg - 1 - j < fade) env = std::min(env, static_cast<double>(seg - 1 - j) / fade);
                        wave[sample] = amp * env * v;
                    }
                }
                pos += seg;
            }
            double peak = 0.0;
            for (double v : wave) peak = std::max(peak, std::abs(v));
            if (peak > 0.0)
                for (double &v : wave) v *= 0.8 / peak;

            std::string wav_rel = "wav/" + id + ".wav";
            std::string align_rel = "align/" + id + ".tsv";
            write_wav((fs::path(out_dir) / wav_rel).string(), wave, kSampleRate);

            std::string align_text;
            std::string phoneme_string;
            int64_t acc = 0;
            char buf[128];
            for (size_t i = 0; i < syms.size(); ++i) {
                double start = static_cast<double>(acc) * kHopSeconds;
                acc += frames[i];
                double end = static_cast<double>(acc) * kHopSeconds;
                std::snprintf(buf, sizeof(buf), "%s\t%.3f\t%.3f\n", inventory[syms[i]].c_str(),
                              start, end);
                align_text += buf;
                if (i) phoneme_string += " ";
                phoneme_string += inventory[syms[i]];
            }
            io::write_file((fs::path(out_dir) / align_rel).string(), align_text);
            manifest += id + "\t" + wav_rel + "\t" + align_rel + "\t" + phoneme_string + "\t" +
                        spk_name + "\t" + style_name + "\n";
        }

        char mbuf[512];
        std::snprintf(mbuf, sizeof(mbuf),
                      "    {\"name\": \"%s\", \"base_f0\": %.6g, \"resonance_hz\": %.6g, "
                      "\"style\": \"%s\", \"contour\": \"%s\", \"duration_scale\": %.6g}%s\n",
                      spk_name.c_str(), base_f0, resonance, style_name.c_str(), family.c_str(),
                      dur_scale, s + 1 < spec.n_speakers ? "," : "");
        meta += mbuf;
    }
    meta += "  ]\n}\n";
    std::string manifest_path = (std::filesystem::path(out_dir) / "manifest.tsv").string();
    io::write_file(manifest_path, manifest);
    io::write_file((std::filesystem::path(out_dir) / "meta.json").string(), meta);
    return manifest_path;
}

}  // namespace mstts
