// Command-line front end: corpus generation, feature extraction, training,
// synthesis, style sweeps, and the verification harness.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mstts/synth.hpp"
#include "mstts/trainer.hpp"
#include "mstts/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

mstts::ModelConfig config_from_json(const std::string &path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config file: " + path);
    json j = json::parse(in);
    mstts::ModelConfig c;
    auto get = [&](const char *key, auto &field) {
        if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
    };
    get("phoneme_vocab_size", c.phoneme_vocab_size);
    get("hidden_dim", c.hidden_dim);
    get("encoder_layers", c.encoder_layers);
    get("decoder_layers", c.decoder_layers);
    get("attention_heads", c.attention_heads);
    get("conv_kernel", c.conv_kernel);
    get("variance_filter_dim", c.variance_filter_dim);
    get("variance_kernel", c.variance_kernel);
    get("dropout", c.dropout);
    get("n_mel", c.n_mel);
    get("n_speakers", c.n_speakers);
    get("n_styles", c.n_styles);
    get("n_bins", c.n_bins);
    get("bin_low", c.bin_low);
    get("bin_high", c.bin_high);
    get("max_frames", c.max_frames);
    return c;
}

std::vector<std::string> split_ws(const std::string &s) {
    std::istringstream in(s);
    std::vector<std::string> out;
    std::string tok;
    while (in >> tok) out.push_back(tok);
    return out;
}

std::vector<double> parse_weights(const std::string &s) {
    std::vector<double> out;
    std::stringstream in(s);
    std::string tok;
    while (std::getline(in, tok, ',')) {
        if (tok.empty()) continue;
        out.push_back(std::stod(tok));
    }
    if (out.empty()) throw std::runtime_error("no weights given");
    return out;
}

}  // namespace

int main(int argc, char **argv) {
    CLI::App app{"multi-speaker multi-style TTS with timbre/style disentanglement"};
    app.require_subcommand(1);

    // gen-corpus
    auto *gen = app.add_subcommand("gen-corpus", "generate the deterministic synthetic corpus");
    mstts::CorpusSpec corpus_spec;
    std::string gen_out;
    gen->add_option("--speakers", corpus_spec.n_speakers, "number of speakers (>= 2)");
    gen->add_option("--utterances", corpus_spec.utterances_each, "utterances per speaker");
    gen->add_option("--seed", corpus_spec.seed, "generation seed");
    gen->add_option("--out", gen_out, "output directory")->required();

    // features
    auto *feat = app.add_subcommand("features", "extract features for a manifest");
    std::string feat_manifest, feat_out, feat_stats;
    feat->add_option("--manifest", feat_manifest, "manifest path")->required();
    feat->add_option("--out", feat_out, "feature cache directory")->required();
    feat->add_option("--stats", feat_stats, "write per-utterance/per-speaker norm stats rows");

    // train
    auto *tr = app.add_subcommand("train", "train the acoustic model");
    std::string tr_manifest, tr_config, tr_out, tr_norm = "utt", tr_cache, tr_resume, tr_losslog;
    mstts::TrainingSchedule schedule;
    int64_t checkpoint_every = 0;
    tr->add_option("--manifest", tr_manifest, "manifest path")->required();
    tr->add_option("--config", tr_config, "model config JSON");
    tr->add_option("--out", tr_out, "checkpoint output path")->required();
    tr->add_option("--norm-mode", tr_norm, "utt or spk")->check(CLI::IsMember({"utt", "spk"}));
    tr->add_option("--steps", schedule.total_steps, "total training steps");
    tr->add_option("--batch-size", schedule.batch_size, "batch size");
    tr->add_option("--seed", schedule.seed, "training seed");
    tr->add_option("--warmup", schedule.warmup_steps, "warmup steps");
    tr->add_option("--peak-lr", schedule.peak_lr, "peak learning rate");
    tr->add_option("--weight-decay", schedule.weight_decay, "decoupled weight decay");
    tr->add_option("--checkpoint-every", checkpoint_every, "periodic checkpoint interval");
    tr->add_option("--cache-dir", tr_cache, "feature cache directory");
    tr->add_option("--resume", tr_resume, "resume from checkpoint");
    tr->add_option("--loss-log", tr_losslog, "write per-step loss rows here");

    // synth
    auto *sy = app.add_subcommand("synth", "synthesize one utterance");
    std::string sy_ckpt, sy_text, sy_speaker, sy_style, sy_source, sy_out;
    double sy_weight = 1.0;
    uint64_t sy_seed = 0;
    int sy_gl_iters = 60;
    sy->add_option("--checkpoint", sy_ckpt, "checkpoint path")->required();
    sy->add_option("--text-phonemes", sy_text, "space-separated phoneme symbols")->required();
    sy->add_option("--speaker", sy_speaker, "speaker name")->required();
    sy->add_option("--style", sy_style, "style name")->required();
    sy->add_option("--source-style", sy_source, "source style for interpolation");
    sy->add_option("--style-weight", sy_weight, "interpolation weight in [0,1]");
    sy->add_option("--seed", sy_seed, "seed (inference is deterministic)");
    sy->add_option("--gl-iters", sy_gl_iters, "Griffin-Lim iterations");
    sy->add_option("--out", sy_out, "output directory")->required();

    // sweep
    auto *sw = app.add_subcommand("sweep", "style transition sweep over weights");
    std::string sw_ckpt, sw_text, sw_speaker, sw_style, sw_source, sw_out;
    std::string sw_weights = "0,0.25,0.5,0.75,1";
    uint64_t sw_seed = 0;
    int sw_gl_iters = 60;
    sw->add_option("--checkpoint", sw_ckpt, "checkpoint path")->required();
    sw->add_option("--text-phonemes", sw_text, "space-separated phoneme symbols")->required();
    sw->add_option("--speaker", sw_speaker, "speaker name")->required();
    sw->add_option("--style", sw_style, "target style name")->required();
    sw->add_option("--source-style", sw_source, "source style name")->required();
    sw->add_option("--weights", sw_weights, "comma-separated weights in [0,1]");
    sw->add_option("--seed", sw_seed, "seed (inference is deterministic)");
    sw->add_option("--gl-iters", sw_gl_iters, "Griffin-Lim iterations");
    sw->add_option("--out", sw_out, "output directory")->required();

    // verify
    auto *ve = app.add_subcommand("verify", "run the disentanglement verification harness");
    std::string ve_ckpt, ve_manifest, ve_out, ve_cache;
    mstts::VerifyOptions ve_opts;
    ve->add_option("--checkpoint", ve_ckpt, "checkpoint path")->required();
    ve->add_option("--manifest", ve_manifest, "manifest path")->required();
    ve->add_option("--out", ve_out, "write machine-readable report rows here");
    ve->add_option("--cache-dir", ve_cache, "feature cache directory");
    ve->add_option("--seed", ve_opts.seed, "harness seed");
    ve->add_option("--probes", ve_opts.gradcheck_probes, "gradcheck probe count");
    bool ve_lenient_mel = false;
    ve->add_flag("--allow-close-mels", ve_lenient_mel,
                 "waive the mel-distinctness leg (untrained checkpoints)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (*gen) {
            std::string manifest = mstts::generate_synthetic_corpus(corpus_spec, gen_out);
            std::cout << "wrote " << manifest << "\n";
        } else if (*feat) {
            mstts::Manifest m = mstts::load_manifest(feat_manifest);
            fs::create_directories(feat_out);
            auto corpus = mstts::load_corpus(m, feat_out);
            std::cout << "extracted " << corpus.size() << " utterances into " << feat_out << "\n";
            if (!feat_stats.empty()) {
                std::string rows;
                std::map<int32_t, std::vector<const mstts::AlignedUtterance *>> by_speaker;
                for (const auto &u : corpus) {
                    rows += mstts::stats_row(
                                u.id, mstts::compute_stats({&u}, mstts::NormScope::utterance)) +
                            "\n";
                    by_speaker[u.speaker_id].push_back(&u);
                }
                for (auto &[spk, group] : by_speaker) {
                    std::sort(group.begin(), group.end(),
                              [](auto *a, auto *b) { return a->id < b->id; });
                    rows += mstts::stats_row(m.speaker_names[spk],
                                             mstts::compute_stats(group, mstts::NormScope::speaker)) +
                            "\n";
                }
                mstts::io::write_file(feat_stats, rows);
            }
        } else if (*tr) {
            mstts::Manifest m = mstts::load_manifest(tr_manifest);
            mstts::ModelConfig cfg;
            if (!tr_config.empty()) cfg = config_from_json(tr_config);
            mstts::NormScope mode =
                tr_norm == "utt" ? mstts::NormScope::utterance : mstts::NormScope::speaker;
            mstts::TrainOptions opts;
            opts.checkpoint_path = tr_out;
            opts.checkpoint_every = checkpoint_every;
            opts.cache_dir = tr_cache;
            std::ofstream losslog;
            if (!tr_losslog.empty()) {
                losslog.open(tr_losslog, std::ios::trunc);
                if (!losslog) throw std::runtime_error("cannot open loss log: " + tr_losslog);
                opts.log_stream = &losslog;
            }
            mstts::Checkpoint resume_ck;
            if (!tr_resume.empty()) {
                resume_ck = mstts::load_checkpoint(tr_resume);
                opts.resume = &resume_ck;
            }
            mstts::TrainResult res = mstts::train(m, cfg, schedule, mode, opts);
            std::cout << "trained to step " << res.checkpoint.step << ", final loss "
                      << (res.log.empty() ? 0.0 : res.log.back().total) << ", checkpoint at "
                      << tr_out << "\n";
        } else if (*sy) {
            mstts::Checkpoint ck = mstts::load_checkpoint(sy_ckpt);
            mstts::SynthesisRequest req;
            req.phonemes = split_ws(sy_text);
            req.speaker = sy_speaker;
            req.style = sy_style;
            req.source_style = sy_source;
            req.style_weight = sy_weight;
            req.seed = sy_seed;
            mstts::SynthesisResult result = mstts::synthesize(req, ck);
            mstts::Waveform audio = mstts::griffin_lim(result.mel, sy_gl_iters);
            fs::create_directories(sy_out);
            mstts::ArtifactPaths paths{(fs::path(sy_out) / "synth.wav").string(),
                                       (fs::path(sy_out) / "mel.pgm").string(),
                                       (fs::path(sy_out) / "pitch.csv").string(),
                                       (fs::path(sy_out) / "energy.csv").string()};
            mstts::export_artifacts(result, audio, paths);
            std::cout << "synthesized " << result.mel.rows << " frames into " << sy_out << "\n";
        } else if (*sw) {
            mstts::Checkpoint ck = mstts::load_checkpoint(sw_ckpt);
            mstts::SynthesisRequest req;
            req.phonemes = split_ws(sw_text);
            req.speaker = sw_speaker;
            req.style = sw_style;
            req.source_style = sw_source;
            req.seed = sw_seed;
            auto entries = mstts::transition_sweep(req, parse_weights(sw_weights), ck, sw_out,
                                                   sw_gl_iters);
            std::cout << "wrote " << entries.size() << " artifact sets and index.tsv under "
                      << sw_out << "\n";
        } else if (*ve) {
            mstts::Checkpoint ck = mstts::load_checkpoint(ve_ckpt);
            mstts::Manifest m = mstts::load_manifest(ve_manifest);
            auto corpus = mstts::load_corpus(m, ve_cache);
            ve_opts.require_mel_distinct = !ve_lenient_mel;
            mstts::VerificationReport report = mstts::run_all_checks(ck, m, corpus, ve_opts);
            std::cout << report.text();
            if (!ve_out.empty()) mstts::io::write_file(ve_out, report.csv());
            return report.overall() ? 0 : 1;
        }
    } catch (const std::exception &e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
