#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "mstts/features.hpp"
#include "mstts/graph.hpp"
#include "mstts/mat.hpp"

namespace mstts {

struct ModelConfig {
    int phoneme_vocab_size = 0;
    int hidden_dim = 64;
    int encoder_layers = 2;
    int decoder_layers = 2;
    int attention_heads = 2;
    int conv_kernel = 9;        // feed-forward transformer conv kernel
    int variance_filter_dim = 64;
    int variance_kernel = 3;
    double dropout = 0.1;
    int n_mel = kNumMels;
    int n_speakers = 0;
    int n_styles = 0;
    int n_bins = 32;            // pitch/energy quantization bins
    double bin_low = -4.0;      // in normalized units
    double bin_high = 4.0;
    int max_frames = 2000;

    void validate() const {
        if (phoneme_vocab_size < 1) throw std::invalid_argument("config: phoneme_vocab_size < 1");
        if (hidden_dim < 1 || attention_heads < 1 || hidden_dim % attention_heads != 0)
            throw std::invalid_argument("config: hidden_dim must be divisible by attention_heads");
        if (encoder_layers < 1 || decoder_layers < 1)
            throw std::invalid_argument("config: need at least one encoder/decoder layer");
        if (conv_kernel < 1 || variance_kernel < 1 || variance_filter_dim < 1)
            throw std::invalid_argument("config: bad conv geometry");
        if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("config: dropout outside [0,1)");
        if (n_mel < 1) throw std::invalid_argument("config: n_mel < 1");
        if (n_speakers < 1 || n_styles < 1)
            throw std::invalid_argument("config: need speakers and styles");
        if (n_bins < 2) throw std::invalid_argument("config: n_bins must be >= 2");
        if (!(bin_low < bin_high)) throw std::invalid_argument("config: bin_range low >= high");
        if (max_frames < 1) throw std::invalid_argument("config: max_frames < 1");
    }
};

/// Named weight tensors in a fixed construction order; the order defines the
/// checkpoint layout and the parameter-initialization RNG stream.
template <typename T>
struct Parameters {
    std::vector<std::pair<std::string, Mat<T>>> tensors;
    std::unordered_map<std::string, int> index;

    void add(const std::string &name, Mat<T> m) {
        if (index.count(name)) throw std::invalid_argument("duplicate tensor " + name);
        index[name] = static_cast<int>(tensors.size());
        tensors.emplace_back(name, std::move(m));
    }
    Mat<T> &at(const std::string &name) {
        auto it = index.find(name);
        if (it == index.end()) throw std::out_of_range("no tensor named " + name);
        return tensors[it->second].second;
    }
    const Mat<T> &at(const std::string &name) const {
        auto it = index.find(name);
        if (it == index.end()) throw std::out_of_range("no tensor named " + name);
        return tensors[it->second].second;
    }
    size_t count() const { return tensors.size(); }

    template <typename U>
    Parameters<U> cast() const {
        Parameters<U> out;
        for (const auto &[name, m] : tensors) out.add(name, m.template cast<U>());
        return out;
    }
};

namespace detail {

template <typename T>
void init_xavier(Mat<T> &m, int fan_in, int fan_out, std::mt19937_64 &rng) {
    double limit = std::sqrt(6.0 / (fan_in + fan_out));
    std::uniform_real_distribution<double> uni(-limit, limit);
    for (T &v : m.data) v = static_cast<T>(uni(rng));
}

template <typename T>
void init_normal(Mat<T> &m, double stddev, std::mt19937_64 &rng) {
    std::normal_distribution<double> nrm(0.0, stddev);
    for (T &v : m.data) v = static_cast<T>(nrm(rng));
}

template <typename T>
void add_predictor_params(Parameters<T> &p, const std::string &prefix, const ModelConfig &cfg,
                          std::mt19937_64 &rng) {
    int H = cfg.hidden_dim, Fd = cfg.variance_filter_dim, k = cfg.variance_kernel;
    Mat<T> c1(k * H, Fd), c2(k * Fd, Fd), proj(Fd, 1);
    init_xavier(c1, k * H, Fd, rng);
    init_xavier(c2, k * Fd, Fd, rng);
    init_xavier(proj, Fd, 1, rng);
    p.add(prefix + ".conv1.w", std::move(c1));
    p.add(prefix + ".conv1.b", Mat<T>(1, Fd));
    p.add(prefix + ".ln1.gain", Mat<T>(1, Fd, T(1)));
    p.add(prefix + ".ln1.bias", Mat<T>(1, Fd));
    p.add(prefix + ".conv2.w", std::move(c2));
    p.add(prefix + ".conv2.b", Mat<T>(1, Fd));
    p.add(prefix + ".ln2.gain", Mat<T>(1, Fd, T(1)));
    p.add(prefix + ".ln2.bias", Mat<T>(1, Fd));
    p.add(prefix + ".proj.w", std::move(proj));
    p.add(prefix + ".proj.b", Mat<T>(1, 1));
}

template <typename T>
void add_fft_block_params(Parameters<T> &p, const std::string &prefix, const ModelConfig &cfg,
                          std::mt19937_64 &rng) {
    int H = cfg.hidden_dim, k = cfg.conv_kernel;
    for (const char *w : {"wq", "wk", "wv", "wo"}) {
        Mat<T> m(H, H);
        init_xavier(m, H, H, rng);
        p.add(prefix + ".attn." + w, std::move(m));
    }
    for (const char *b : {"bq", "bk", "bv", "bo"}) p.add(prefix + ".attn." + b, Mat<T>(1, H));
    p.add(prefix + ".attn_ln.gain", Mat<T>(1, H, T(1)));
    p.add(prefix + ".attn_ln.bias", Mat<T>(1, H));
    Mat<T> c1(k * H, H), c2(1 * H, H);
    init_xavier(c1, k * H, H, rng);
    init_xavier(c2, H, H, rng);
    p.add(prefix + ".ff.conv1.w", std::move(c1));
    p.add(prefix + ".ff.conv1.b", Mat<T>(1, H));
    p.add(prefix + ".ff.conv2.w", std::move(c2));
    p.add(prefix + ".ff.conv2.b", Mat<T>(1, H));
    p.add(prefix + ".ff_ln.gain", Mat<T>(1, H, T(1)));
    p.add(prefix + ".ff_ln.bias", Mat<T>(1, H));
}

}  // namespace detail

template <typename T>
Parameters<T> init_parameters(const ModelConfig &cfg, uint64_t seed) {
    cfg.validate();
    std::mt19937_64 rng(seed);
    Parameters<T> p;
    int H = cfg.hidden_dim;
    Mat<T> pe(cfg.phoneme_vocab_size, H), se(cfg.n_speakers, H), ste(cfg.n_styles, H);
    Mat<T> pb(cfg.n_bins, H), eb(cfg.n_bins, H);
    detail::init_normal(pe, 0.3, rng);
    detail::init_normal(se, 0.3, rng);
    detail::init_normal(ste, 0.3, rng);
    detail::init_normal(pb, 0.1, rng);
    detail::init_normal(eb, 0.1, rng);
    p.add("phoneme_embedding", std::move(pe));
    p.add("speaker_embedding", std::move(se));
    p.add("style_embedding", std::move(ste));
    p.add("pitch_bin_embedding", std::move(pb));
    p.add("energy_bin_embedding", std::move(eb));
    for (int l = 0; l < cfg.encoder_layers; ++l)
        detail::add_fft_block_params(p, "encoder." + std::to_string(l), cfg, rng);
    for (int l = 0; l < cfg.decoder_layers; ++l)
        detail::add_fft_block_params(p, "decoder." + std::to_string(l), cfg, rng);
    detail::add_predictor_params(p, "predictor.duration", cfg, rng);
    detail::add_predictor_params(p, "predictor.pitch", cfg, rng);
    detail::add_predictor_params(p, "predictor.energy", cfg, rng);
    Mat<T> mw(H, cfg.n_mel);
    detail::init_xavier(mw, H, cfg.n_mel, rng);
    p.add("mel_proj.w", std::move(mw));
    p.add("mel_proj.b", Mat<T>(1, cfg.n_mel));
    return p;
}

/// Parameters bound as graph leaves; one binding is shared by every forward
/// pass recorded on the same tape so batch gradients accumulate naturally.
template <typename T>
struct ParamVars {
    std::vector<std::pair<std::string, Value<T>>> vars;
    std::unordered_map<std::string, int> index;

    static ParamVars bind(Graph<T> &g, const Parameters<T> &params, bool requires_grad) {
        ParamVars pv;
        for (const auto &[name, m] : params.tensors) {
            pv.index[name] = static_cast<int>(pv.vars.size());
            pv.vars.emplace_back(name, g.leaf(m, requires_grad));
        }
        return pv;
    }
    Value<T> at(const std::string &name) const {
        auto it = index.find(name);
        if (it == index.end()) throw std::out_of_range("no bound tensor named " + name);
        return vars[it->second].second;
    }
};

/// Collects d(loss)/d(tensor) after Graph::backward, in parameter order.
/// A non-finite gradient is reported with the offending tensor's name.
template <typename T>
std::vector<Mat<T>> collect_gradients(Graph<T> &g, const ParamVars<T> &pv) {
    std::vector<Mat<T>> grads;
    grads.reserve(pv.vars.size());
    for (const auto &[name, v] : pv.vars) {
        Mat<T> gm = g.grad(v);
        if (!gm.all_finite())
            throw std::runtime_error("non-finite gradient in tensor " + name);
        grads.push_back(std::move(gm));
    }
    return grads;
}

template <typename T>
struct VarianceOutputs {
    std::vector<T> log_durations;  // per phoneme
    std::vector<T> pitch_hat;      // per frame, normalized units
    std::vector<T> energy_hat;     // per frame, normalized units
    int frame_count = 0;
};

/// Sinusoidal position table, (length, dim).
template <typename T>
Mat<T> positional_encoding(int length, int dim) {
    Mat<T> pe(length, dim);
    for (int pos = 0; pos < length; ++pos)
        for (int i = 0; i < dim; ++i) {
            double angle = pos / std::pow(10000.0, 2.0 * (i / 2) / dim);
            pe(pos, i) = static_cast<T>(i % 2 == 0 ? std::sin(angle) : std::cos(angle));
        }
    return pe;
}

enum class VarKind { duration, pitch, energy };

inline const char *var_kind_name(VarKind k) {
    switch (k) {
        case VarKind::duration: return "duration";
        case VarKind::pitch: return "pitch";
        default: return "energy";
    }
}

namespace detail {

template <typename T>
Value<T> multi_head_attention(Graph<T> &g, const ParamVars<T> &pv, const ModelConfig &cfg,
                              const std::string &prefix, Value<T> x) {
    int H = cfg.hidden_dim, heads = cfg.attention_heads, dk = H / heads;
    Value<T> q = g.add_rowvec(g.matmul(x, pv.at(prefix + ".attn.wq")), pv.at(prefix + ".attn.bq"));
    Value<T> k = g.add_rowvec(g.matmul(x, pv.at(prefix + ".attn.wk")), pv.at(prefix + ".attn.bk"));
    Value<T> v = g.add_rowvec(g.matmul(x, pv.at(prefix + ".attn.wv")), pv.at(prefix + ".attn.bv"));
    std::vector<Value<T>> head_outs;
    T inv_sqrt_dk = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));
    for (int h = 0; h < heads; ++h) {
        Value<T> qh = g.slice_cols(q, h * dk, dk);
        Value<T> kh = g.slice_cols(k, h * dk, dk);
        Value<T> vh = g.slice_cols(v, h * dk, dk);
        Value<T> scores = g.scale(g.matmul(qh, g.transpose(kh)), inv_sqrt_dk);
        head_outs.push_back(g.matmul(g.softmax_rows(scores), vh));
    }
    Value<T> cat = heads == 1 ? head_outs[0] : g.concat_cols(head_outs);
    return g.add_rowvec(g.matmul(cat, pv.at(prefix + ".attn.wo")), pv.at(prefix + ".attn.bo"));
}

/// Feed-forward transformer block: self-attention and a conv feed-forward,
/// each with residual + post layer norm.
template <typename T>
Value<T> fft_block(Graph<T> &g, const ParamVars<T> &pv, const ModelConfig &cfg,
                   const std::string &prefix, Value<T> x, std::mt19937_64 *drop) {
    constexpr T kLnEps = static_cast<T>(1e-5);
    Value<T> attn = multi_head_attention(g, pv, cfg, prefix, x);
    if (drop) attn = g.dropout(attn, cfg.dropout, *drop);
    x = g.layer_norm(g.add(x, attn), pv.at(prefix + ".attn_ln.gain"),
                     pv.at(prefix + ".attn_ln.bias"), kLnEps);
    Value<T> ff = g.conv1d(x, pv.at(prefix + ".ff.conv1.w"), pv.at(prefix + ".ff.conv1.b"),
                           cfg.conv_kernel);
    ff = g.relu(ff);
    ff = g.conv1d(ff, pv.at(prefix + ".ff.conv2.w"), pv.at(prefix + ".ff.conv2.b"), 1);
    if (drop) ff = g.dropout(ff, cfg.dropout, *drop);
    return g.layer_norm(g.add(x, ff), pv.at(prefix + ".ff_ln.gain"),
                        pv.at(prefix + ".ff_ln.bias"), kLnEps);
}

}  // namespace detail

/// Phoneme encoder: embedding + sinusoidal positions + FFT blocks.
template <typename T>
Value<T> encode(Graph<T> &g, const ParamVars<T> &pv, const ModelConfig &cfg,
                const std::vector<int32_t> &phonemes, std::mt19937_64 *drop = nullptr) {
    if (phonemes.empty()) throw std::invalid_argument("encode: empty phoneme sequence");
    for (size_t i = 0; i < phonemes.size(); ++i)
        if (phonemes[i] < 0 || phonemes[i] >= cfg.phoneme_vocab_size)
            throw std::out_of_range("encode: phoneme id " + std::to_string(phonemes[i]) +
                                    " out of vocabulary at position " + std::to_string(i));
    Value<T> x = g.lookup_rows(pv.at("phoneme_embedding"), phonemes);
    Value<T> pe = g.leaf(positional_encoding<T>(static_cast<int>(phonemes.size()), cfg.hidden_dim));
    x = g.add(x, pe);
    for (int l = 0; l < cfg.encoder_layers; ++l)
        x = detail::fft_block(g, pv, cfg, "encoder." + std::to_string(l), x, drop);
    return x;
}

/// Variance predictor body: two (conv1d -> ReLU -> LayerNorm -> dropout)
/// stages and a scalar projection. Returns an (N, 1) column.
template <typename T>
Value<T> predictor_body(Graph<T> &g, const ParamVars<T> &pv, const ModelConfig &cfg, VarKind which,
                        Value<T> input, std::mt19937_64 *drop = nullptr) {
    constexpr T kLnEps = static_cast<T>(1e-5);
    std::string prefix = std::string("predictor.") + var_kind_name(which);
    Value<T> h = g.conv1d(input, pv.at(prefix + ".conv1.w"), pv.at(prefix + ".conv1.b"),
                          cfg.variance_kernel);
    h = g.relu(h);
    h = g.layer_norm(h, pv.at(prefix + ".ln1.gain"), pv.at(prefix + ".ln1.bias"), kLnEps);
    if (drop) h = g.dropout(h, cfg.dropout, *drop);
    h = g.conv1d(h, pv.at(prefix + ".conv2.w"), pv.at(prefix + ".conv2.b"), cfg.variance_kernel);
    h = g.relu(h);
    h = g.layer_norm(h, pv.at(prefix + ".ln2.gain"), pv.at(prefix + ".ln2.bias"), kLnEps);
    if (drop) h = g.dropout(h, cfg.dropout, *drop);
    return g.add_rowvec(g.matmul(h, pv.at(prefix + ".proj.w")), pv.at(prefix + ".proj.b"));
}

/// Style-conditioned variance prediction: the style embedding is broadcast-
/// added to the predictor INPUT only; it never touches the residual stream.
template <typename T>
Value<T> predict_variance(Graph<T> &g, const ParamVars<T> &pv, const ModelConfig &cfg,
                          VarKind which, Value<T> hidden, Value<T> style_row,
                          std::mt19937_64 *drop = nullptr) {
    if (style_row.rows() != 1 || style_row.cols() != cfg.hidden_dim)
        throw std::invalid_argument("predict_variance: style embedding must be (1, hidden_dim)");
    return predictor_body(g, pv, cfg, which, g.add_rowvec(hidden, style_row), drop);
}

/// Length regulation with validation; durations must be non-negative and sum
/// to a positive frame count.
template <typename T>
Value<T> length_regulate(Graph<T> &g, Value<T> hidden, const std::vector<int32_t> &durations) {
    if (static_cast<size_t>(hidden.rows()) != durations.size())
        throw std::invalid_argument("length_regulate: durations length mismatch");
    int64_t total = 0;
    for (int32_t d : durations) {
        if (d < 0) throw std::invalid_argument("length_regulate: negative duration");
        total += d;
    }
    if (total == 0) throw std::runtime_error("length_regulate: empty output");
    return g.repeat_rows(hidden, durations);
}

/// Bin index for a normalized scalar value: linear bins over
/// [bin_low, bin_high], end bins absorb out-of-range values.
inline int32_t quantize_bin(double v, const ModelConfig &cfg) {
    double c = std::clamp(v, cfg.bin_low, cfg.bin_high);
    int32_t bin = static_cast<int32_t>(
        std::floor((c - cfg.bin_low) / (cfg.bin_high - cfg.bin_low) * cfg.n_bins));
    return std::clamp(bin, 0, cfg.n_bins - 1);
}

/// Per-frame bin-embedding rows for a trajectory of normalized values.
template <typename T>
Value<T> quantize_embed(Graph<T> &g, const ParamVars<T> &pv, const ModelConfig &cfg,
                        const std::vector<T> &values, VarKind which) {
    if (which == VarKind::duration)
        throw std::invalid_argument("quantize_embed: no bin table for durations");
    for (T v : values)
        if (!std::isfinite(static_cast<double>(v)))
            throw std::invalid_argument("quantize_embed: non-finite value");
    std::vector<int32_t> bins(values.size());
    for (size_t i = 0; i < values.size(); ++i) bins[i] = quantize_bin(values[i], cfg);
    const char *table = which == VarKind::pitch ? "pitch_bin_embedding" : "energy_bin_embedding";
    return g.lookup_rows(pv.at(table), bins);
}

template <typename T>
struct AdaptOutputs {
    Value<T> frame_hidden;   // (F, H)
    Value<T> log_durations;  // (L, 1)
    Value<T> pitch;          // (F, 1)
    Value<T> energy;         // (F, 1)
    std::vector<int32_t> durations;
};

struct TeacherTargets {
    const std::vector<int32_t> *durations = nullptr;
    const std::vector<float> *pitch = nullptr;   // normalized
    const std::vector<float> *energy = nullptr;  // normalized
};

namespace detail {
template <typename T>
std::vector<T> column_values(const Mat<T> &m) {
    std::vector<T> out(m.rows);
    for (int r = 0; r < m.rows; ++r) out[r] = m(r, 0);
    return out;
}
template <typename T>
std::vector<T> to_scalar_vec(const std::vector<float> &v) {
    return std::vector<T>(v.begin(), v.end());
}
}  // namespace detail

/// The variance adaptor. Teacher mode expands with target durations and
/// embeds target pitch/energy; inference expands with max(1, round(exp(d)))
/// and embeds its own predictions. Style reaches predictor inputs only.
template <typename T>
AdaptOutputs<T> variance_adapt(Graph<T> &g, const ParamVars<T> &pv, const ModelConfig &cfg,
                               Value<T> phoneme_hidden, Value<T> style_row,
                               const TeacherTargets *teacher, std::mt19937_64 *drop = nullptr) {
    AdaptOutputs<T> out;
    out.log_durations = predict_variance(g, pv, cfg, VarKind::duration, phoneme_hidden, style_row, drop);

    std::vector<T> pitch_values, energy_values;
    if (teacher) {
        if (!teacher->durations || !teacher->pitch || !teacher->energy)
            throw std::invalid_argument("variance_adapt: incomplete teacher targets");
        int64_t total = 0;
        for (int32_t d : *teacher->durations) total += d;
        if (total != static_cast<int64_t>(teacher->pitch->size()) ||
            total != static_cast<int64_t>(teacher->energy->size()))
            throw std::invalid_argument(
                "variance_adapt: target durations do not sum to pitch/energy frame count");
        out.durations = *teacher->durations;
    } else {
        const Mat<T> &ld = g.value(out.log_durations);
        out.durations.resize(ld.rows);
        int64_t total = 0;
        for (int r = 0; r < ld.rows; ++r) {
            double d = std::exp(static_cast<double>(ld(r, 0)));
            out.durations[r] = static_cast<int32_t>(std::max<int64_t>(1, std::llround(d)));
            total += out.durations[r];
        }
        if (total > cfg.max_frames)
            throw std::runtime_error("runaway duration: predicted " + std::to_string(total) +
                                     " frames exceeds max_frames " + std::to_string(cfg.max_frames));
    }

    Value<T> frame_hidden = length_regulate(g, phoneme_hidden, out.durations);
    out.pitch = predict_variance(g, pv, cfg, VarKind::pitch, frame_hidden, style_row, drop);
    pitch_values = teacher ? detail::to_scalar_vec<T>(*teacher->pitch)
                           : detail::column_values(g.value(out.pitch));
    frame_hidden = g.add(frame_hidden, quantize_embed(g, pv, cfg, pitch_values, VarKind::pitch));

    out.energy = predict_variance(g, pv, cfg, VarKind::energy, frame_hidden, style_row, drop);
    energy_values = teacher ? detail::to_scalar_vec<T>(*teacher->energy)
                            : detail::column_values(g.value(out.energy));
    frame_hidden = g.add(frame_hidden, quantize_embed(g, pv, cfg, energy_values, VarKind::energy));

    out.frame_hidden = frame_hidden;
    return out;
}

/// Mel decoder: speaker embedding + positions at the input, FFT blocks, then
/// the mel projection. Timbre enters the network here and only here.
template <typename T>
Value<T> decode(Graph<T> &g, const ParamVars<T> &pv, const ModelConfig &cfg, Value<T> frame_hidden,
                int32_t speaker_id, std::mt19937_64 *drop = nullptr) {
    if (speaker_id < 0 || speaker_id >= cfg.n_speakers)
        throw std::out_of_range("decode: speaker id " + std::to_string(speaker_id) +
                                " out of range");
    if (frame_hidden.cols() != cfg.hidden_dim)
        throw std::invalid_argument("decode: frame hidden width != hidden_dim");
    Value<T> spk = g.lookup_rows(pv.at("speaker_embedding"), {speaker_id});
    Value<T> x = g.add_rowvec(frame_hidden, spk);
    Value<T> pe = g.leaf(positional_encoding<T>(frame_hidden.rows(), cfg.hidden_dim));
    x = g.add(x, pe);
    for (int l = 0; l < cfg.decoder_layers; ++l)
        x = detail::fft_block(g, pv, cfg, "decoder." + std::to_string(l), x, drop);
    return g.add_rowvec(g.matmul(x, pv.at("mel_proj.w")), pv.at("mel_proj.b"));
}

template <typename T>
struct TeacherForward {
    Value<T> mel;            // (F, n_mel)
    Value<T> log_durations;  // (L, 1)
    Value<T> pitch;          // (F, 1)
    Value<T> energy;         // (F, 1)
};

/// Teacher-forced training pass. The utterance must carry NORMALIZED
/// pitch/energy (see normalize.hpp), so the raw-record sign invariants do
/// not apply here; structural consistency is still enforced.
template <typename T>
TeacherForward<T> forward_teacher(Graph<T> &g, const ParamVars<T> &pv, const ModelConfig &cfg,
                                  const AlignedUtterance &utt, std::mt19937_64 *drop = nullptr) {
    if (utt.phonemes.empty() || utt.phonemes.size() != utt.durations.size())
        throw std::invalid_argument("forward_teacher: phoneme/duration length mismatch");
    int64_t total = 0;
    for (int32_t d : utt.durations) {
        if (d < 0) throw std::invalid_argument("forward_teacher: negative duration");
        total += d;
    }
    if (total != utt.mel.rows || static_cast<size_t>(total) != utt.pitch.size() ||
        static_cast<size_t>(total) != utt.energy.size())
        throw std::invalid_argument("forward_teacher: durations do not sum to frame count");
    if (utt.mel.cols != cfg.n_mel)
        throw std::invalid_argument("forward_teacher: mel band count != n_mel");
    if (utt.style_id < 0 || utt.style_id >= cfg.n_styles)
        throw std::out_of_range("forward_teacher: style id out of range");
    Value<T> enc = encode(g, pv, cfg, utt.phonemes, drop);
    Value<T> style_row = g.lookup_rows(pv.at("style_embedding"), {utt.style_id});
    TeacherTargets targets{&utt.durations, &utt.pitch, &utt.energy};
    AdaptOutputs<T> adapt = variance_adapt(g, pv, cfg, enc, style_row, &targets, drop);
    TeacherForward<T> out;
    out.mel = decode(g, pv, cfg, adapt.frame_hidden, utt.speaker_id, drop);
    out.log_durations = adapt.log_durations;
    out.pitch = adapt.pitch;
    out.energy = adapt.energy;
    return out;
}

template <typename T>
struct InferResult {
    Mat<T> mel;
    VarianceOutputs<T> variance;
};

/// Full inference path with an arbitrary style vector (any hidden_dim
/// vector, not only table rows).
template <typename T>
InferResult<T> forward_infer(const Parameters<T> &params, const ModelConfig &cfg,
                             const std::vector<int32_t> &phonemes, int32_t speaker_id,
                             const std::vector<T> &style_vec) {
    if (static_cast<int>(style_vec.size()) != cfg.hidden_dim)
        throw std::invalid_argument("forward_infer: style vector size != hidden_dim");
    for (T v : style_vec)
        if (!std::isfinite(static_cast<double>(v)))
            throw std::invalid_argument("forward_infer: non-finite style vector");
    Graph<T> g;
    ParamVars<T> pv = ParamVars<T>::bind(g, params, /*requires_grad=*/false);
    Value<T> enc = encode(g, pv, cfg, phonemes, nullptr);
    Value<T> style_row = g.leaf(Mat<T>::row_vector(std::vector<T>(style_vec)));
    AdaptOutputs<T> adapt = variance_adapt<T>(g, pv, cfg, enc, style_row, nullptr, nullptr);
    Value<T> mel = decode(g, pv, cfg, adapt.frame_hidden, speaker_id, nullptr);
    InferResult<T> out;
    out.mel = g.value(mel);
    out.variance.log_durations = detail::column_values(g.value(adapt.log_durations));
    out.variance.pitch_hat = detail::column_values(g.value(adapt.pitch));
    out.variance.energy_hat = detail::column_values(g.value(adapt.energy));
    out.variance.frame_count = out.mel.rows;
    return out;
}

/// Affine combination (1-w)*src + w*tgt of two style table rows. Endpoints
/// return the table rows bit-exactly.
template <typename T>
std::vector<T> interpolate_style(const Parameters<T> &params, int32_t src_style_id,
                                 int32_t tgt_style_id, double w) {
    const Mat<T> &table = params.at("style_embedding");
    if (src_style_id < 0 || src_style_id >= table.rows || tgt_style_id < 0 ||
        tgt_style_id >= table.rows)
        throw std::out_of_range("interpolate_style: style id out of range");
    if (!(w >= 0.0 && w <= 1.0))
        throw std::invalid_argument("interpolate_style: weight outside [0,1]");
    std::vector<T> out(table.cols);
    const T *src = table.row_ptr(src_style_id);
    const T *tgt = table.row_ptr(tgt_style_id);
    if (w == 0.0) {
        std::copy(src, src + table.cols, out.begin());
    } else if (w == 1.0) {
        std::copy(tgt, tgt + table.cols, out.begin());
    } else {
        for (int c = 0; c < table.cols; ++c)
            out[c] = static_cast<T>((1.0 - w) * static_cast<double>(src[c]) +
                                    w * static_cast<double>(tgt[c]));
    }
    return out;
}

}  // namespace mstts
