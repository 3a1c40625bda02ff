// Audio front-end: conditioning, mel/energy geometry, F0 estimation,
// alignment parsing, and the utterance cache format.

#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>
#include <random>

#include "mstts/features.hpp"

using namespace mstts;
namespace fs = std::filesystem;

namespace {

std::vector<double> sine(double freq, double seconds, double amp, int rate = kSampleRate) {
    std::vector<double> x(static_cast<size_t>(seconds * rate));
    for (size_t i = 0; i < x.size(); ++i)
        x[i] = amp * std::sin(2.0 * std::numbers::pi * freq * i / rate);
    return x;
}

std::string fresh_dir(const std::string &name) {
    fs::path p = fs::path("feat_test_tmp") / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p.string();
}

}  // namespace

TEST(ConditionWave, PeakNormalizesToMinus6dBFS) {
    Waveform w = condition_wave(sine(300.0, 0.5, 0.9), 16000);
    double peak = 0.0;
    for (double v : w.samples) peak = std::max(peak, std::abs(v));
    EXPECT_NEAR(peak, 0.5012, 1e-4);
    EXPECT_EQ(w.sample_rate, 16000);
}

TEST(ConditionWave, SampleCountPreservedAt16k) {
    std::vector<double> x = sine(220.0, 0.25, 0.5);
    Waveform w = condition_wave(x, 16000);
    EXPECT_EQ(w.samples.size(), x.size());
}

TEST(ConditionWave, SilenceIsError) {
    std::vector<double> zeros(4000, 0.0);
    try {
        condition_wave(zeros, 16000);
        FAIL() << "expected error";
    } catch (const std::runtime_error &e) {
        EXPECT_NE(std::string(e.what()).find("cannot normalize silence"), std::string::npos);
    }
}

TEST(ConditionWave, RejectsUnsupportedRate) {
    EXPECT_THROW(condition_wave(sine(220.0, 0.1, 0.5), 12345), std::runtime_error);
    EXPECT_THROW(condition_wave({}, 16000), std::runtime_error);
}

TEST(ConditionWave, ResamplePreservesToneFrequency) {
    for (int rate : {22050, 24000, 44100, 48000}) {
        Waveform w = condition_wave(sine(440.0, 0.6, 0.7, rate), rate);
        EXPECT_NEAR(static_cast<double>(w.samples.size()),
                    0.6 * 16000.0, 2.0) << rate;
        std::vector<float> f0 = estimate_f0(w);
        int voiced = 0;
        double sum = 0.0;
        for (size_t f = 2; f + 2 < f0.size(); ++f)
            if (f0[f] > 0.0f) {
                ++voiced;
                sum += f0[f];
            }
        ASSERT_GT(voiced, 10) << rate;
        EXPECT_NEAR(sum / voiced, 440.0, 4.0) << rate;
    }
}

TEST(MelSpectrogram, FrameCountRule) {
    Waveform w{sine(400.0, 1.0, 0.5), 16000};
    ASSERT_EQ(w.samples.size(), 16000u);
    Mat<float> mel = mel_spectrogram(w);
    EXPECT_EQ(mel.rows, 84);  // ceil(16000/192)
    EXPECT_EQ(mel.cols, 80);
}

TEST(MelSpectrogram, SilenceHitsLogFloor) {
    Waveform w{std::vector<double>(4096, 0.0), 16000};
    Mat<float> mel = mel_spectrogram(w);
    float expected = static_cast<float>(std::log(1e-5));
    for (float v : mel.data) ASSERT_EQ(v, expected);
}

TEST(MelSpectrogram, ToneEnergyConcentratesAtMatchingBand) {
    Waveform w = condition_wave(sine(1000.0, 0.5, 0.8), 16000);
    Mat<float> mel = mel_spectrogram(w);
    // independent filterbank-geometry oracle: nearest band center to 1 kHz
    auto mel_of = [](double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); };
    auto hz_of = [](double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); };
    double hi = mel_of(8000.0);
    int expected_band = 0;
    double best = 1e9;
    for (int b = 0; b < 80; ++b) {
        double center = hz_of(hi * (b + 1) / 81.0);
        if (std::abs(center - 1000.0) < best) {
            best = std::abs(center - 1000.0);
            expected_band = b;
        }
    }
    for (int f = 4; f < mel.rows - 4; ++f) {
        int argmax = 0;
        for (int b = 1; b < 80; ++b)
            if (mel(f, b) > mel(f, argmax)) argmax = b;
        ASSERT_LE(std::abs(argmax - expected_band), 2) << "frame " << f;
    }
}

TEST(MelSpectrogram, TimeShiftCovariance) {
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> uni(-0.4, 0.4);
    std::vector<double> x(8000);
    for (auto &v : x) v = uni(rng);
    std::vector<double> shifted(x.size() + kHopSize, 0.0);
    std::copy(x.begin(), x.end(), shifted.begin() + kHopSize);
    Mat<float> a = mel_spectrogram(Waveform{x, 16000});
    Mat<float> b = mel_spectrogram(Waveform{shifted, 16000});
    ASSERT_EQ(b.rows, a.rows + 1);
    // interior frames: full window inside the original signal for both
    for (int f = 3; f < a.rows - 3; ++f)
        for (int c = 0; c < 80; ++c)
            ASSERT_NEAR(a(f, c), b(f + 1, c), 1e-5) << "frame " << f;
}

TEST(MelSpectrogram, TooShortIsError) {
    Waveform w{std::vector<double>(100, 0.1), 16000};
    EXPECT_THROW(mel_spectrogram(w), std::runtime_error);
}

TEST(FrameEnergy, SilenceLinearityAndFrameCount) {
    Waveform w{std::vector<double>(4096, 0.0), 16000};
    for (float e : frame_energy(w)) ASSERT_EQ(e, 0.0f);

    std::vector<double> x = sine(250.0, 0.4, 0.3);
    std::vector<double> x2 = x;
    for (double &v : x2) v *= 2.0;
    std::vector<float> e1 = frame_energy(Waveform{x, 16000});
    std::vector<float> e2 = frame_energy(Waveform{x2, 16000});
    ASSERT_EQ(e1.size(), e2.size());
    EXPECT_EQ(e1.size(), static_cast<size_t>(mel_spectrogram(Waveform{x, 16000}).rows));
    for (size_t f = 0; f < e1.size(); ++f)
        if (e1[f] > 1e-3) ASSERT_NEAR(e2[f] / e1[f], 2.0, 1e-5);
}

TEST(EstimateF0, PureToneAccuracy) {
    Waveform w = condition_wave(sine(220.0, 1.0, 0.9), 16000);
    std::vector<float> f0 = estimate_f0(w);
    int n = static_cast<int>(w.samples.size());
    for (int f = 2; f <= (n - kWinSize / 2) / kHopSize; ++f) {
        ASSERT_GT(f0[f], 0.0f) << "frame " << f << " unvoiced";
        ASSERT_NEAR(f0[f], 220.0, 2.0) << "frame " << f;
    }
}

TEST(EstimateF0, SweepAccuracyProperty) {
    for (double freq : {80.0, 130.0, 220.0, 340.0, 500.0}) {
        Waveform w = condition_wave(sine(freq, 0.7, 0.8), 16000);
        std::vector<float> f0 = estimate_f0(w);
        int n = static_cast<int>(w.samples.size());
        for (int f = 2; f <= (n - kWinSize / 2) / kHopSize; ++f) {
            ASSERT_GT(f0[f], 0.0f) << freq << " Hz, frame " << f;
            ASSERT_NEAR(f0[f], freq, 0.01 * freq) << "frame " << f;
        }
    }
}

TEST(EstimateF0, LowNoiseIsMostlyUnvoiced) {
    std::mt19937_64 rng(6);
    std::uniform_real_distribution<double> uni(-0.01, 0.01);
    std::vector<double> x(16000);
    for (auto &v : x) v = uni(rng);
    std::vector<float> f0 = estimate_f0(Waveform{x, 16000});
    int unvoiced = 0;
    for (float v : f0)
        if (v == 0.0f) ++unvoiced;
    EXPECT_GE(unvoiced, static_cast<int>(0.9 * f0.size()));
}

TEST(EstimateF0, SilenceAllUnvoiced) {
    std::vector<float> f0 = estimate_f0(Waveform{std::vector<double>(8192, 0.0), 16000});
    for (float v : f0) ASSERT_EQ(v, 0.0f);
}

TEST(ParseAlignment, ValidDocument) {
    AlignmentIntervals iv = parse_alignment("a\t0.000\t0.120\nb\t0.120\t0.300");
    ASSERT_EQ(iv.entries.size(), 2u);
    EXPECT_EQ(iv.entries[0].phoneme, "a");
    EXPECT_DOUBLE_EQ(iv.entries[0].end, 0.12);
    EXPECT_DOUBLE_EQ(iv.entries[1].end, 0.3);
}

TEST(ParseAlignment, CommentsAndBlanksSkipped) {
    AlignmentIntervals iv = parse_alignment("# header\n\na\t0\t0.1\n# mid\nb\t0.1\t0.2\n");
    EXPECT_EQ(iv.entries.size(), 2u);
}

TEST(ParseAlignment, EndBeforeStart) {
    try {
        parse_alignment("b\t0.2\t0.1");
        FAIL() << "expected error";
    } catch (const std::runtime_error &e) {
        EXPECT_NE(std::string(e.what()).find("end before start at line 1"), std::string::npos);
    }
}

TEST(ParseAlignment, EmptyIsError) {
    try {
        parse_alignment("");
        FAIL() << "expected error";
    } catch (const std::runtime_error &e) {
        EXPECT_NE(std::string(e.what()).find("no intervals"), std::string::npos);
    }
}

TEST(ParseAlignment, BadNumberReportsLine) {
    try {
        parse_alignment("a\t0\t0.1\nb\t0.1\txyz");
        FAIL() << "expected error";
    } catch (const std::runtime_error &e) {
        EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
    }
}

TEST(ParseAlignment, GapOrOverlapRejected) {
    EXPECT_THROW(parse_alignment("a\t0\t0.1\nb\t0.2\t0.3"), std::runtime_error);
    EXPECT_THROW(parse_alignment("a\t0\t0.1\nb\t0.05\t0.3"), std::runtime_error);
    EXPECT_THROW(parse_alignment("a\t0.5\t0.7"), std::runtime_error);  // must start at 0
}

TEST(ParseAlignment, FormatRoundTripIdentity) {
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> step(0.013, 0.41);
    for (int trial = 0; trial < 25; ++trial) {
        AlignmentIntervals iv;
        double t = 0.0;
        int n = std::uniform_int_distribution<int>(1, 12)(rng);
        for (int i = 0; i < n; ++i) {
            double e = t + step(rng);
            iv.entries.push_back({"p" + std::to_string(i), t, e});
            t = e;
        }
        AlignmentIntervals back = parse_alignment(format_alignment(iv));
        ASSERT_EQ(back.entries.size(), iv.entries.size());
        for (size_t i = 0; i < iv.entries.size(); ++i) {
            ASSERT_EQ(back.entries[i].phoneme, iv.entries[i].phoneme);
            ASSERT_EQ(back.entries[i].start, iv.entries[i].start);
            ASSERT_EQ(back.entries[i].end, iv.entries[i].end);
        }
    }
}

TEST(IntervalsToDurations, BoundaryRounding) {
    AlignmentIntervals iv;
    iv.entries = {{"a", 0.0, 0.120}, {"b", 0.120, 0.300}};
    std::vector<int32_t> d = intervals_to_durations(iv, 25);
    ASSERT_EQ(d.size(), 2u);
    EXPECT_EQ(d[0], 10);
    EXPECT_EQ(d[1], 15);
}

TEST(IntervalsToDurations, SingleIntervalAbsorbsAll) {
    AlignmentIntervals iv;
    iv.entries = {{"a", 0.0, 0.492}};
    std::vector<int32_t> d = intervals_to_durations(iv, 41);
    ASSERT_EQ(d.size(), 1u);
    EXPECT_EQ(d[0], 41);
}

TEST(IntervalsToDurations, LargeDriftIsError) {
    AlignmentIntervals iv;
    iv.entries = {{"a", 0.0, 0.120}, {"b", 0.120, 0.300}};  // 25 frames
    try {
        intervals_to_durations(iv, 28);
        FAIL() << "expected error";
    } catch (const std::runtime_error &e) {
        EXPECT_NE(std::string(e.what()).find("alignment/audio mismatch"), std::string::npos);
    }
    EXPECT_NO_THROW(intervals_to_durations(iv, 27));  // drift 2 is absorbed
}

TEST(WavIO, RoundTrip) {
    std::string dir = fresh_dir("wav");
    std::vector<double> x = sine(330.0, 0.3, 0.6);
    write_wav(dir + "/t.wav", x, 16000);
    auto [samples, rate] = read_wav(dir + "/t.wav");
    EXPECT_EQ(rate, 16000);
    ASSERT_EQ(samples.size(), x.size());
    for (size_t i = 0; i < x.size(); ++i) ASSERT_NEAR(samples[i], x[i], 1.0 / 32000.0);
}

TEST(BuildUtterance, EndToEndInvariants) {
    std::string dir = fresh_dir("build_utt");
    // 40 frames of audio: 10 sil + 20 tone + 10 tone2
    int frames = 40;
    std::vector<double> x(frames * kHopSize, 0.0);
    for (int i = 10 * kHopSize; i < 30 * kHopSize; ++i)
        x[i] = 0.7 * std::sin(2.0 * std::numbers::pi * 200.0 * i / 16000.0);
    for (int i = 30 * kHopSize; i < 40 * kHopSize; ++i)
        x[i] = 0.5 * std::sin(2.0 * std::numbers::pi * 280.0 * i / 16000.0);
    write_wav(dir + "/u.wav", x, 16000);
    io::write_file(dir + "/u.tsv", "sil\t0\t0.120\npa\t0.120\t0.360\nta\t0.360\t0.480\n");
    std::map<std::string, int32_t> pm{{"sil", 0}, {"pa", 1}, {"ta", 2}};
    AlignedUtterance u = build_utterance(dir + "/u.wav", dir + "/u.tsv", pm, 1, 1, "u");
    EXPECT_EQ(u.frames(), frames);
    EXPECT_EQ(u.phonemes, (std::vector<int32_t>{0, 1, 2}));
    EXPECT_EQ(u.durations, (std::vector<int32_t>{10, 20, 10}));
    int64_t total = 0;
    for (int32_t d : u.durations) total += d;
    EXPECT_EQ(total, u.frames());
    EXPECT_EQ(u.pitch.size(), static_cast<size_t>(frames));
    EXPECT_EQ(u.energy.size(), static_cast<size_t>(frames));
}

TEST(BuildUtterance, UnknownPhonemeNamed) {
    std::string dir = fresh_dir("unknown_pho");
    write_wav(dir + "/u.wav", sine(200.0, 0.48, 0.6), 16000);
    io::write_file(dir + "/u.tsv", "zz\t0\t0.480\n");
    std::map<std::string, int32_t> pm{{"pa", 0}};
    try {
        build_utterance(dir + "/u.wav", dir + "/u.tsv", pm, 0, 0, "u");
        FAIL() << "expected error";
    } catch (const std::runtime_error &e) {
        EXPECT_NE(std::string(e.what()).find("\"zz\""), std::string::npos);
    }
}

TEST(UtteranceCache, BitExactRoundTrip) {
    std::string dir = fresh_dir("cache");
    AlignedUtterance u;
    u.id = "utt_cache";
    u.phonemes = {1, 2, 3};
    u.durations = {2, 0, 3};
    std::mt19937_64 rng(8);
    std::uniform_real_distribution<float> uni(0.0f, 300.0f);
    for (int f = 0; f < 5; ++f) {
        u.pitch.push_back(uni(rng));
        u.energy.push_back(uni(rng));
    }
    u.mel = Mat<float>(5, 80);
    for (auto &v : u.mel.data) v = uni(rng) - 150.0f;
    u.speaker_id = 2;
    u.style_id = 1;
    write_utterance_cache(dir + "/u.feat", u);
    AlignedUtterance back = read_utterance_cache(dir + "/u.feat");
    EXPECT_EQ(back.id, u.id);
    EXPECT_EQ(back.phonemes, u.phonemes);
    EXPECT_EQ(back.durations, u.durations);
    EXPECT_EQ(back.speaker_id, u.speaker_id);
    EXPECT_EQ(back.style_id, u.style_id);
    EXPECT_EQ(back.pitch, u.pitch);    // bitwise float equality
    EXPECT_EQ(back.energy, u.energy);
    EXPECT_EQ(back.mel.data, u.mel.data);
}

TEST(UtteranceCache, BadMagicAndTruncation) {
    std::string dir = fresh_dir("cache_bad");
    AlignedUtterance u;
    u.id = "x";
    u.phonemes = {0};
    u.durations = {2};
    u.pitch = {100.0f, 0.0f};
    u.energy = {1.0f, 2.0f};
    u.mel = Mat<float>(2, 80, -3.0f);
    write_utterance_cache(dir + "/u.feat", u);
    auto data = io::read_file(dir + "/u.feat");
    data[0] = 'X';
    io::write_file(dir + "/bad.feat", std::string(data.begin(), data.end()));
    EXPECT_THROW(read_utterance_cache(dir + "/bad.feat"), std::runtime_error);
    std::string truncated(data.begin(), data.begin() + data.size() / 2);
    truncated[0] = 'M';
    io::write_file(dir + "/trunc.feat", truncated);
    EXPECT_THROW(read_utterance_cache(dir + "/trunc.feat"), std::runtime_error);
}
