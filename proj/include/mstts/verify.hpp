#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "mstts/model.hpp"
#include "mstts/normalize.hpp"
#include "mstts/synth.hpp"
#include "mstts/trainer.hpp"

namespace mstts {

enum class CheckStatus { pass, fail, skip };

inline const char *check_status_name(CheckStatus s) {
    switch (s) {
        case CheckStatus::pass: return "PASS";
        case CheckStatus::fail: return "FAIL";
        default: return "SKIP";
    }
}

struct CheckResult {
    std::string name;
    CheckStatus status = CheckStatus::fail;
    double value = 0.0;      // measured
    double threshold = 0.0;
    std::string detail;
};

struct VerificationReport {
    std::vector<CheckResult> entries;

    void add(CheckResult r) {
        entries.push_back(std::move(r));
        std::sort(entries.begin(), entries.end(),
                  [](const CheckResult &a, const CheckResult &b) { return a.name < b.name; });
    }
    bool overall() const {
        for (const auto &e : entries)
            if (e.status == CheckStatus::fail) return false;
        return true;
    }
    std::string text() const {
        std::string out;
        char buf[512];
        for (const auto &e : entries) {
            std::snprintf(buf, sizeof(buf), "%-22s %-4s  measured=%-13.6g threshold=%-10.4g %s\n",
                          e.name.c_str(), check_status_name(e.status), e.value, e.threshold,
                          e.detail.c_str());
            out += buf;
        }
        out += std::string("overall: ") + (overall() ? "PASS" : "FAIL") + "\n";
        return out;
    }
    std::string csv() const {
        std::string out = "check,status,value,threshold\n";
        char buf[256];
        for (const auto &e : entries) {
            std::snprintf(buf, sizeof(buf), "%s,%s,%.9g,%.9g\n", e.name.c_str(),
                          check_status_name(e.status), e.value, e.threshold);
            out += buf;
        }
        return out;
    }
};

// ----- small numeric helpers -----

/// Least-squares slope of values against their index.
template <typename T>
double fit_slope(const std::vector<T> &values) {
    size_t n = values.size();
    if (n < 2) return 0.0;
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    for (size_t i = 0; i < n; ++i) {
        double x = static_cast<double>(i), y = static_cast<double>(values[i]);
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    double denom = n * sxx - sx * sx;
    return denom != 0.0 ? (n * sxy - sx * sy) / denom : 0.0;
}

template <typename T>
double pearson(const std::vector<T> &a, const std::vector<T> &b) {
    if (a.size() != b.size() || a.size() < 2)
        throw std::invalid_argument("pearson: need two equal-length series");
    double ma = 0, mb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        ma += static_cast<double>(a[i]);
        mb += static_cast<double>(b[i]);
    }
    ma /= a.size();
    mb /= b.size();
    double sab = 0, saa = 0, sbb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        double da = a[i] - ma, db = b[i] - mb;
        sab += da * db;
        saa += da * da;
        sbb += db * db;
    }
    if (saa <= 0.0 || sbb <= 0.0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

// ----- style isolation -----

/// Core of the style-isolation check, parameterized over the forward so a
/// deliberately leaky forward (mutation fixture) can be proven to trip it.
inline CheckResult check_style_isolation_fn(
    const std::function<Mat<float>(const AlignedUtterance &, int32_t)> &teacher_mel,
    const std::vector<AlignedUtterance> &normalized_utts, int n_styles, double threshold = 1e-9) {
    CheckResult r;
    r.name = "style-isolation";
    r.threshold = threshold;
    if (normalized_utts.empty() || n_styles < 2) {
        r.status = CheckStatus::skip;
        r.detail = "needs at least one utterance and two styles";
        return r;
    }
    double worst = 0.0;
    int pairs = 0;
    for (const auto &utt : normalized_utts) {
        std::vector<Mat<float>> mels;
        for (int s = 0; s < n_styles; ++s) mels.push_back(teacher_mel(utt, s));
        for (int i = 0; i < n_styles; ++i)
            for (int j = i + 1; j < n_styles; ++j) {
                worst = std::max(worst, max_abs_diff(mels[i], mels[j]));
                ++pairs;
            }
    }
    r.value = worst;
    r.status = worst <= threshold ? CheckStatus::pass : CheckStatus::fail;
    char buf[160];
    std::snprintf(buf, sizeof(buf), "%zu utterances x %d style pairs, teacher-forced mel",
                  normalized_utts.size(), n_styles * (n_styles - 1) / 2);
    r.detail = buf;
    return r;
}

/// Teacher-forced mel must be invariant to the style id: style conditions
/// only the variance predictors, whose outputs teacher forcing bypasses.
inline CheckResult check_style_isolation(const Checkpoint &ck,
                                         const std::vector<AlignedUtterance> &utterances) {
    std::vector<AlignedUtterance> normalized;
    for (const auto &u : utterances)
        normalized.push_back(apply_norm(u, compute_stats({&u}, NormScope::utterance)));
    auto fwd = [&ck](const AlignedUtterance &utt, int32_t style_id) {
        AlignedUtterance probe = utt;
        probe.style_id = style_id;
        Graph<float> g;
        ParamVars<float> pv = ParamVars<float>::bind(g, ck.params, false);
        TeacherForward<float> f = forward_teacher(g, pv, ck.config, probe, nullptr);
        return g.value(f.mel);
    };
    return check_style_isolation_fn(fwd, normalized, ck.config.n_styles);
}

// ----- speaker isolation -----

/// Inference prosody must be invariant to the speaker id (style fixed)
/// while the mels of different speakers differ on a trained model.
inline CheckResult check_speaker_isolation(const Checkpoint &ck,
                                           const std::vector<std::vector<int32_t>> &texts,
                                           bool require_mel_distinct = true,
                                           double mel_threshold = 1e-3, double threshold = 1e-9) {
    CheckResult r;
    r.name = "speaker-isolation";
    r.threshold = threshold;
    if (ck.config.n_speakers < 2) {
        r.status = CheckStatus::skip;
        r.detail = "single-speaker checkpoint";
        return r;
    }
    if (texts.empty()) throw std::invalid_argument("check_speaker_isolation: no texts");
    const Mat<float> &table = ck.params.at("style_embedding");
    std::vector<float> style_vec(table.row_ptr(0), table.row_ptr(0) + table.cols);
    double worst_prosody = 0.0;
    double min_mel_diff = 1e300;
    for (const auto &text : texts) {
        std::vector<InferResult<float>> per_speaker;
        for (int s = 0; s < ck.config.n_speakers; ++s)
            per_speaker.push_back(forward_infer(ck.params, ck.config, text, s, style_vec));
        for (int i = 1; i < ck.config.n_speakers; ++i) {
            const auto &a = per_speaker[0].variance;
            const auto &b = per_speaker[i].variance;
            if (a.frame_count != b.frame_count) {
                r.status = CheckStatus::fail;
                r.value = 1e300;
                r.detail = "durations changed with speaker id";
                return r;
            }
            worst_prosody = std::max({worst_prosody, max_abs_diff(a.log_durations, b.log_durations),
                                      max_abs_diff(a.pitch_hat, b.pitch_hat),
                                      max_abs_diff(a.energy_hat, b.energy_hat)});
        }
        for (int i = 0; i < ck.config.n_speakers; ++i)
            for (int j = i + 1; j < ck.config.n_speakers; ++j)
                min_mel_diff =
                    std::min(min_mel_diff, max_abs_diff(per_speaker[i].mel, per_speaker[j].mel));
    }
    r.value = worst_prosody;
    bool prosody_ok = worst_prosody <= threshold;
    bool mel_ok = !require_mel_distinct || min_mel_diff > mel_threshold;
    r.status = prosody_ok && mel_ok ? CheckStatus::pass : CheckStatus::fail;
    char buf[200];
    std::snprintf(buf, sizeof(buf),
                  "%zu texts x %d speakers; min pairwise mel diff %.4g (%s threshold %.1g)",
                  texts.size(), ck.config.n_speakers, min_mel_diff,
                  require_mel_distinct ? "required >" : "not required,", mel_threshold);
    r.detail = buf;
    return r;
}

// ----- finite-difference gradcheck -----

namespace detail {

inline std::string tensor_family(const std::string &name) {
    size_t dot = name.find('.');
    if (dot == std::string::npos) return name;
    if (name.compare(0, dot, "predictor") == 0) {
        size_t dot2 = name.find('.', dot + 1);
        return name.substr(0, dot2);
    }
    return name.substr(0, dot);
}

/// One random synthetic utterance in the normalized domain (targets only;
/// no DSP involved).
inline AlignedUtterance random_normalized_utterance(const ModelConfig &cfg, std::mt19937_64 &rng,
                                                    const std::string &id) {
    std::uniform_int_distribution<int> n_pho(3, 5);
    std::uniform_int_distribution<int> dur(1, 4);
    std::uniform_int_distribution<int32_t> pho(0, cfg.phoneme_vocab_size - 1);
    std::uniform_int_distribution<int32_t> spk(0, cfg.n_speakers - 1);
    std::uniform_real_distribution<double> val(-2.0, 2.0);
    AlignedUtterance u;
    u.id = id;
    int L = n_pho(rng);
    int F = 0;
    for (int i = 0; i < L; ++i) {
        u.phonemes.push_back(pho(rng));
        u.durations.push_back(dur(rng));
        F += u.durations.back();
    }
    u.speaker_id = spk(rng);
    u.style_id = u.speaker_id % cfg.n_styles;
    for (int f = 0; f < F; ++f) {
        u.pitch.push_back(static_cast<float>(val(rng)));
        u.energy.push_back(static_cast<float>(val(rng)));
    }
    u.mel = Mat<float>(F, cfg.n_mel);
    for (auto &v : u.mel.data) v = static_cast<float>(val(rng));
    return u;
}

}  // namespace detail

/// Reusable finite-difference comparison core: max relative error between
/// analytic gradients of `loss_fn` and central differences over probes
/// stratified across every tensor family.
inline double gradcheck_max_rel_err(
    Parameters<double> &params,
    const std::function<Value<double>(Graph<double> &, const ParamVars<double> &)> &loss_fn,
    uint64_t seed, int n_probes, double h = 1e-5) {
    std::vector<Mat<double>> analytic;
    {
        Graph<double> g;
        ParamVars<double> pv = ParamVars<double>::bind(g, params, true);
        Value<double> loss = loss_fn(g, pv);
        g.backward(loss);
        analytic = collect_gradients(g, pv);
    }
    auto eval_loss = [&]() {
        Graph<double> g;
        ParamVars<double> pv = ParamVars<double>::bind(g, params, false);
        return loss_fn(g, pv).val()(0, 0);
    };
    std::vector<std::string> families;
    std::vector<std::vector<int>> family_tensors;
    for (size_t t = 0; t < params.count(); ++t) {
        std::string fam = detail::tensor_family(params.tensors[t].first);
        auto it = std::find(families.begin(), families.end(), fam);
        if (it == families.end()) {
            families.push_back(fam);
            family_tensors.push_back({static_cast<int>(t)});
        } else {
            family_tensors[it - families.begin()].push_back(static_cast<int>(t));
        }
    }
    std::mt19937_64 rng(seed);
    double max_rel = 0.0;
    for (int p = 0; p < n_probes; ++p) {
        const auto &members = family_tensors[p % families.size()];
        int t = members[std::uniform_int_distribution<size_t>(0, members.size() - 1)(rng)];
        Mat<double> &tensor = params.tensors[t].second;
        size_t e = std::uniform_int_distribution<size_t>(0, tensor.data.size() - 1)(rng);
        double original = tensor.data[e];
        tensor.data[e] = original + h;
        double lp = eval_loss();
        tensor.data[e] = original - h;
        double lm = eval_loss();
        tensor.data[e] = original;
        double fd = (lp - lm) / (2.0 * h);
        double a = analytic[t].data[e];
        double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), 1e-6});
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

/// Full gradcheck on a tiny double-precision model with one synthetic batch:
/// every tensor family probed against central differences, plus the style-
/// isolation corollary (mel-term gradient of the style table is exactly 0
/// under teacher forcing, and its finite difference vanishes).
inline CheckResult gradcheck_fd(const ModelConfig &cfg, uint64_t seed, int n_probes = 50) {
    CheckResult r;
    r.name = "gradcheck-fd";
    r.threshold = 1e-4;
    cfg.validate();
    if (cfg.hidden_dim > 16 || cfg.encoder_layers > 1 || cfg.decoder_layers > 1)
        throw std::invalid_argument("gradcheck_fd: use a tiny config (hidden_dim <= 16, 1 layer)");

    std::mt19937_64 rng(detail::mix64(seed, 0xF0));
    std::vector<AlignedUtterance> utts;
    utts.push_back(detail::random_normalized_utterance(cfg, rng, "probe0"));
    utts.push_back(detail::random_normalized_utterance(cfg, rng, "probe1"));
    Batch batch = collate({&utts[0], &utts[1]});

    auto forward_all = [&](Graph<double> &g, const ParamVars<double> &pv) {
        BatchPredictions<double> preds;
        for (const auto &u : utts) {
            TeacherForward<double> f = forward_teacher(g, pv, cfg, u, nullptr);
            preds.mel.push_back(f.mel);
            preds.log_durations.push_back(f.log_durations);
            preds.pitch.push_back(f.pitch);
            preds.energy.push_back(f.energy);
        }
        return loss_total(g, preds, batch);
    };
    auto total_loss = [&](Graph<double> &g, const ParamVars<double> &pv) {
        return forward_all(g, pv).total;
    };
    auto mel_loss = [&](Graph<double> &g, const ParamVars<double> &pv) {
        return forward_all(g, pv).mel;
    };

    Parameters<double> params = init_parameters<double>(cfg, seed);
    double max_rel = gradcheck_max_rel_err(params, total_loss, detail::mix64(seed, 0xF1), n_probes);

    // Style-isolation corollary, measured against the mel term only: the
    // decoder path never reads the style table, so its analytic gradient is
    // exactly zero and the finite difference is pure noise.
    double style_analytic_max = 0.0, style_fd_max = 0.0;
    {
        Graph<double> g;
        ParamVars<double> pv = ParamVars<double>::bind(g, params, true);
        g.backward(mel_loss(g, pv));
        const Mat<double> &sg = g.grad(pv.at("style_embedding"));
        for (double v : sg.data) style_analytic_max = std::max(style_analytic_max, std::abs(v));
    }
    {
        Mat<double> &table = params.at("style_embedding");
        std::mt19937_64 srng(detail::mix64(seed, 0xF2));
        auto eval_mel = [&]() {
            Graph<double> g;
            ParamVars<double> pv = ParamVars<double>::bind(g, params, false);
            return mel_loss(g, pv).val()(0, 0);
        };
        for (int p = 0; p < 4; ++p) {
            size_t e = std::uniform_int_distribution<size_t>(0, table.data.size() - 1)(srng);
            double original = table.data[e];
            table.data[e] = original + 1e-5;
            double lp = eval_mel();
            table.data[e] = original - 1e-5;
            double lm = eval_mel();
            table.data[e] = original;
            style_fd_max = std::max(style_fd_max, std::abs((lp - lm) / 2e-5));
        }
    }

    r.value = max_rel;
    bool style_ok = style_analytic_max == 0.0 && style_fd_max <= 1e-7;
    r.status = (max_rel <= r.threshold && style_ok) ? CheckStatus::pass : CheckStatus::fail;
    char buf[240];
    std::snprintf(buf, sizeof(buf),
                  "%d probes, h=1e-5, 64-bit; style-table mel-loss grad max %.3g (analytic) / "
                  "%.3g (fd)",
                  n_probes, style_analytic_max, style_fd_max);
    r.detail = buf;
    return r;
}

// ----- cross-style transfer -----

/// Cross-style transfer on the synthetic corpus: synthesizing the rising
/// speaker with the falling style must yield a negative fitted pitch slope
/// and near-perfect prosody correlation with the native falling speaker.
inline CheckResult transfer_experiment(const Checkpoint &ck, const Manifest &manifest) {
    CheckResult r;
    r.name = "transfer-cross-style";
    r.threshold = 0.9;

    // Native (speaker, style) pairs per contour family, from the manifest's
    // speaker<->style pairing.
    auto find_pair = [&](const std::string &family) -> std::pair<int32_t, int32_t> {
        for (const auto &e : manifest.entries)
            if (e.style.rfind(family, 0) == 0) return {e.speaker_id, e.style_id};
        return {-1, -1};
    };
    auto [spk_rising, style_rising] = find_pair("rising");
    auto [spk_falling, style_falling] = find_pair("falling");
    auto [spk_flat, style_flat] = find_pair("flat");
    if (spk_rising < 0 || spk_falling < 0 || spk_flat < 0)
        throw std::runtime_error(
            "transfer_experiment: corpus must contain rising/falling/flat styles");

    std::vector<std::string> text;
    for (const auto &sym : ck.phoneme_symbols) {
        if (sym == "sil") continue;
        text.push_back(sym);
        if (text.size() == 8) break;
    }
    if (text.size() < 2) throw std::runtime_error("transfer_experiment: vocabulary too small");

    auto synth = [&](int32_t speaker_id, int32_t style_id) {
        const Mat<float> &table = ck.params.at("style_embedding");
        std::vector<float> style_vec(table.row_ptr(style_id), table.row_ptr(style_id) + table.cols);
        auto pmap = ck.phoneme_map();
        std::vector<int32_t> ids;
        for (const auto &s : text) ids.push_back(pmap.at(s));
        return forward_infer(ck.params, ck.config, ids, speaker_id, style_vec);
    };

    auto native_rise = synth(spk_rising, style_rising);
    auto native_fall = synth(spk_falling, style_falling);
    auto native_flat = synth(spk_flat, style_flat);
    auto cross = synth(spk_rising, style_falling);

    double s_rr = fit_slope(native_rise.variance.pitch_hat);
    double s_ff = fit_slope(native_fall.variance.pitch_hat);
    double s_flat = fit_slope(native_flat.variance.pitch_hat);
    double s_cross = fit_slope(cross.variance.pitch_hat);
    double corr = cross.variance.pitch_hat.size() == native_fall.variance.pitch_hat.size()
                      ? pearson(cross.variance.pitch_hat, native_fall.variance.pitch_hat)
                      : 0.0;

    bool ok = s_cross < 0.0 && corr >= r.threshold && s_rr > 0.0 &&
              std::abs(s_flat) < std::min(std::abs(s_rr), std::abs(s_ff));
    r.value = corr;
    r.status = ok ? CheckStatus::pass : CheckStatus::fail;
    char buf[240];
    std::snprintf(buf, sizeof(buf),
                  "slopes: rise %.4g, fall %.4g, flat %.4g, cross(rise spk, fall style) %.4g; "
                  "corr %.4f",
                  s_rr, s_ff, s_flat, s_cross, corr);
    r.detail = buf;
    return r;
}

// ----- normalization ablation -----

/// The mechanical premise of the UttNorm ablation: per-utterance stats are
/// exactly 0/1 under UttNorm, while SpkNorm leaves a witness utterance whose
/// voiced-pitch mean deviates when the speaker is heterogeneous.
inline CheckResult uttnorm_ablation(const std::vector<AlignedUtterance> &corpus) {
    CheckResult r;
    r.name = "uttnorm-ablation";
    r.threshold = 0.1;
    if (corpus.empty()) throw std::invalid_argument("uttnorm_ablation: empty corpus");

    auto voiced_mean_std = [](const AlignedUtterance &u) {
        double sum = 0.0, sq = 0.0;
        int64_t n = 0;
        for (float p : u.pitch)
            if (p != 0.0f) {
                sum += p;
                sq += static_cast<double>(p) * p;
                ++n;
            }
        double mean = n ? sum / n : 0.0;
        double var = n ? sq / n - mean * mean : 0.0;
        return std::pair<double, double>(mean, std::sqrt(std::max(0.0, var)));
    };

    std::vector<AlignedUtterance> utt_normed = normalize_corpus(corpus, NormScope::utterance);
    std::vector<AlignedUtterance> spk_normed = normalize_corpus(corpus, NormScope::speaker);
    double utt_max_mean = 0.0, utt_max_std_err = 0.0, spk_max_mean = 0.0;
    for (const auto &u : utt_normed) {
        auto [mean, sd] = voiced_mean_std(u);
        utt_max_mean = std::max(utt_max_mean, std::abs(mean));
        utt_max_std_err = std::max(utt_max_std_err, std::abs(sd - 1.0));
    }
    for (const auto &u : spk_normed) {
        auto [mean, sd] = voiced_mean_std(u);
        (void)sd;
        spk_max_mean = std::max(spk_max_mean, std::abs(mean));
    }

    bool utt_ok = utt_max_mean <= 1e-6 && utt_max_std_err <= 1e-6;
    r.value = spk_max_mean;
    char buf[240];
    std::snprintf(buf, sizeof(buf),
                  "UttNorm max |mean| %.3g, max |std-1| %.3g; SpkNorm max |mean| %.3g",
                  utt_max_mean, utt_max_std_err, spk_max_mean);
    r.detail = buf;
    if (!utt_ok) {
        r.status = CheckStatus::fail;
    } else if (spk_max_mean > r.threshold) {
        r.status = CheckStatus::pass;
    } else {
        r.status = CheckStatus::skip;
        r.detail = std::string("not discriminative (homogeneous speaker); ") + buf;
    }
    return r;
}

// ----- report assembly -----

struct VerifyOptions {
    uint64_t seed = 7;
    int gradcheck_probes = 50;
    int max_isolation_utterances = 20;
    int speaker_isolation_texts = 20;
    bool require_mel_distinct = true;
};

/// Runs every check against a checkpoint and its training manifest. The
/// transfer experiment degrades to a skip when the corpus lacks the
/// rising/falling/flat styles it needs.
inline VerificationReport run_all_checks(const Checkpoint &ck, const Manifest &manifest,
                                         const std::vector<AlignedUtterance> &corpus,
                                         const VerifyOptions &opts = {}) {
    VerificationReport report;

    std::vector<AlignedUtterance> iso(corpus.begin(),
                                      corpus.begin() + std::min<size_t>(corpus.size(),
                                                                        opts.max_isolation_utterances));
    report.add(check_style_isolation(ck, iso));

    std::mt19937_64 rng(detail::mix64(opts.seed, 0x7e57));
    std::vector<std::vector<int32_t>> texts;
    std::vector<int32_t> non_sil;
    for (size_t i = 0; i < ck.phoneme_symbols.size(); ++i)
        if (ck.phoneme_symbols[i] != "sil") non_sil.push_back(static_cast<int32_t>(i));
    if (non_sil.empty()) non_sil.push_back(0);
    for (int t = 0; t < opts.speaker_isolation_texts; ++t) {
        std::uniform_int_distribution<int> len(4, 10);
        std::uniform_int_distribution<size_t> pick(0, non_sil.size() - 1);
        std::vector<int32_t> text;
        int n = len(rng);
        for (int i = 0; i < n; ++i) text.push_back(non_sil[pick(rng)]);
        texts.push_back(std::move(text));
    }
    report.add(check_speaker_isolation(ck, texts, opts.require_mel_distinct));

    ModelConfig tiny;
    tiny.phoneme_vocab_size = std::max(4, ck.config.phoneme_vocab_size);
    tiny.hidden_dim = 12;
    tiny.encoder_layers = 1;
    tiny.decoder_layers = 1;
    tiny.attention_heads = 2;
    tiny.conv_kernel = 3;
    tiny.variance_filter_dim = 12;
    tiny.variance_kernel = 3;
    tiny.dropout = 0.0;
    tiny.n_speakers = std::max(2, ck.config.n_speakers);
    tiny.n_styles = std::max(2, ck.config.n_styles);
    tiny.n_bins = 8;
    report.add(gradcheck_fd(tiny, opts.seed, opts.gradcheck_probes));

    try {
        report.add(transfer_experiment(ck, manifest));
    } catch (const std::exception &e) {
        CheckResult r;
        r.name = "transfer-cross-style";
        r.status = CheckStatus::skip;
        r.detail = std::string("skipped: ") + e.what();
        report.add(r);
    }

    report.add(uttnorm_ablation(corpus));
    return report;
}

}  // namespace mstts
