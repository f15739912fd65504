#include <doctest.h>

#include <cmath>
#include <complex>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>

#include "stemjepa/error.h"
#include "stemjepa/frontend.h"
#include "test_util.h"

using namespace stemjepa;

namespace {

FrontendConfig raw_cfg() {
    FrontendConfig cfg;
    cfg.standardize = false;
    return cfg;
}

// Independent HTK mel filterbank and direct DFT, double precision.
double oracle_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double oracle_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

std::vector<double> oracle_band_energies(const AudioChunk& a, int frame, const FrontendConfig& cfg) {
    const int win = 400, hop = 160, n_fft = 512;
    std::vector<double> x(n_fft, 0.0);
    for (int j = 0; j < win; ++j) {
        long idx = static_cast<long>(frame) * hop - win / 2 + j;
        idx = std::clamp(idx, 0L, static_cast<long>(a.size()) - 1);
        const double w = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * j / win);
        x[j] = a.samples[static_cast<std::size_t>(idx)] * w;
    }
    std::vector<double> power(n_fft / 2 + 1);
    for (int k = 0; k <= n_fft / 2; ++k) {
        std::complex<double> acc = 0.0;
        for (int n = 0; n < n_fft; ++n) acc += x[n] * std::polar(1.0, -2.0 * std::numbers::pi * k * n / n_fft);
        power[k] = std::norm(acc);
    }
    const double top = oracle_mel(cfg.sample_rate / 2.0);
    std::vector<double> bands(cfg.n_mels, 0.0);
    for (int m = 0; m < cfg.n_mels; ++m) {
        const double l = oracle_hz(top * m / (cfg.n_mels + 1));
        const double c = oracle_hz(top * (m + 1) / (cfg.n_mels + 1));
        const double r = oracle_hz(top * (m + 2) / (cfg.n_mels + 1));
        for (int k = 0; k <= n_fft / 2; ++k) {
            const double f = k * 16000.0 / n_fft;
            double w = 0.0;
            if (f > l && f <= c) w = (f - l) / (c - l);
            if (f > c && f < r) w = (r - f) / (r - c);
            bands[m] += w * power[k];
        }
    }
    return bands;
}

}  // namespace

TEST_CASE("silence hits the log floor everywhere") {
    const FrontendConfig cfg = raw_cfg();
    const LogMelSpectrogram s = compute_log_mel(testutil::silence(8.0), cfg);
    CHECK(s.n_mels() == 80);
    CHECK(s.n_frames() == 800);
    CHECK(s.values.maxCoeff() == cfg.log_floor());
    CHECK(s.values.minCoeff() == cfg.log_floor());
    CHECK(cfg.log_floor() == static_cast<float>(std::log(1e-10)));
}

TEST_CASE("silence with standardization is all zeros and finite") {
    const LogMelSpectrogram s = compute_log_mel(testutil::silence(8.0), FrontendConfig{});
    CHECK(s.values.allFinite());
    CHECK(s.values.cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("8 s chunk gives 800 frames and 250 tokens") {
    const FrontendConfig cfg;
    const LogMelSpectrogram s = compute_log_mel(testutil::noise(0.1, 8.0, 1), cfg);
    CHECK(s.n_frames() == 800);
    const PatchGrid g = patchify(s, 16, 16);
    CHECK(g.freq_patches == 5);
    CHECK(g.time_patches == 50);
    CHECK(g.tokens() == 250);
    CHECK(g.patches.rows() == 250);
    CHECK(g.patches.cols() == 256);
    CHECK(cfg.tokens_per_chunk() == 250);
}

TEST_CASE("sine at a band centre concentrates in one mel band") {
    const FrontendConfig cfg = raw_cfg();
    // A 25 ms Hann window leaks across neighbouring low bands, which are
    // narrower than its main lobe; the upper bands are wide enough.
    for (int band : {75, 77, 78}) {
        CAPTURE(band);
        const double f = mel_band_center(cfg, band);
        const AudioChunk a = testutil::sine(f, 0.5, 8.0);  // -6 dBFS peak
        const MatrixF power = compute_mel_power(a, cfg);
        int worst_frame = -1;
        double worst = 1.0;
        // Frames whose window reaches into the edge padding are skipped.
        for (int t = 2; t <= 798; ++t) {
            const double total = power.col(t).cast<double>().sum();
            const double share = power(band, t) / total;
            if (share < worst) {
                worst = share;
                worst_frame = t;
            }
        }
        CAPTURE(worst_frame);
        CHECK(worst >= 0.9);

        // Matches the independent DFT + filterbank oracle on a few frames.
        for (int t : {0, 1, 400, 799}) {
            const auto ref = oracle_band_energies(a, t, cfg);
            for (int m = 0; m < cfg.n_mels; ++m) {
                CHECK(power(m, t) == doctest::Approx(ref[m]).epsilon(1e-3).scale(1e-3));
            }
        }
    }
}

TEST_CASE("htk mel scale") {
    CHECK(hz_to_mel(700.0) == doctest::Approx(2595.0 * std::log10(2.0)));
    for (double hz : {0.0, 100.0, 1000.0, 8000.0}) CHECK(mel_to_hz(hz_to_mel(hz)) == doctest::Approx(hz));
    const MatrixF fb = mel_filterbank(FrontendConfig{});
    CHECK(fb.rows() == 80);
    CHECK(fb.cols() == 257);
    CHECK(fb.maxCoeff() <= 1.0f);
    CHECK(fb.minCoeff() >= 0.0f);
}

TEST_CASE("patchify shapes and floor policy") {
    auto spec_of = [](int frames) {
        LogMelSpectrogram s;
        s.values = testutil::random_matrix(80, frames, static_cast<std::uint64_t>(frames));
        return s;
    };
    const PatchGrid a = patchify(spec_of(800), 16, 16);
    CHECK(a.freq_patches == 5);
    CHECK(a.time_patches == 50);
    const PatchGrid b = patchify(spec_of(160), 16, 16);
    CHECK(b.freq_patches == 5);
    CHECK(b.time_patches == 10);
    CHECK(b.tokens() == 50);
    const LogMelSpectrogram s807 = spec_of(807);
    const PatchGrid c = patchify(s807, 16, 16);
    CHECK(c.tokens() == 250);
    const MatrixF back = unpatchify(c);
    CHECK(back.cols() == 800);
    CHECK(back == s807.values.leftCols(800));
}

TEST_CASE("patch contents are the exact sub-matrices") {
    LogMelSpectrogram s;
    s.values = testutil::random_matrix(80, 64, 3);
    const PatchGrid g = patchify(s, 16, 16);
    for (int k = 0; k < g.tokens(); ++k) {
        const PatchCoord pc = g.coords[k];
        CHECK(k == token_index(pc.freq, pc.time, g.freq_patches));
        for (int r = 0; r < 16; ++r) {
            for (int c = 0; c < 16; ++c) {
                REQUIRE(g.patches(k, r * 16 + c) == s.values(pc.freq * 16 + r, pc.time * 16 + c));
            }
        }
    }
}

TEST_CASE("coords are unique and cover the grid") {
    LogMelSpectrogram s;
    s.values = testutil::random_matrix(80, 100, 4);
    const PatchGrid g = patchify(s, 16, 16);
    std::vector<int> seen(static_cast<std::size_t>(g.tokens()), 0);
    for (const auto& c : g.coords) {
        REQUIRE(c.freq >= 0);
        REQUIRE(c.freq < g.freq_patches);
        REQUIRE(c.time >= 0);
        REQUIRE(c.time < g.time_patches);
        ++seen[static_cast<std::size_t>(c.time * g.freq_patches + c.freq)];
    }
    for (int v : seen) CHECK(v == 1);
}

TEST_CASE("patchify errors") {
    LogMelSpectrogram s;
    s.values = MatrixF::Zero(70, 100);
    CHECK_THROWS_AS(patchify(s, 16, 16), ConfigError);
    s.values = MatrixF::Zero(80, 10);
    CHECK_THROWS_AS(patchify(s, 16, 16), InputError);
}

TEST_CASE("property: token-count law and round trip over random durations") {
    std::mt19937_64 rng(11);
    std::uniform_real_distribution<double> dur(0.2, 12.0);
    const FrontendConfig cfg;
    for (int trial = 0; trial < 25; ++trial) {
        const double d = dur(rng);
        CAPTURE(d);
        const LogMelSpectrogram s = compute_log_mel(testutil::noise(0.3, d, static_cast<std::uint64_t>(trial)), cfg);
        CHECK(s.n_frames() == static_cast<int>(std::llround(samples_for(d, 16000) / 160.0)));
        if (s.n_frames() < 16) continue;
        const PatchGrid g = patchify(s, 16, 16);
        CHECK(g.tokens() == (80 / 16) * (s.n_frames() / 16));
        CHECK(unpatchify(g) == s.values.leftCols(g.time_patches * 16));
    }
}

TEST_CASE("determinism") {
    const AudioChunk a = testutil::noise(0.5, 8.0, 99);
    const LogMelSpectrogram s1 = compute_log_mel(a, FrontendConfig{});
    const LogMelSpectrogram s2 = compute_log_mel(a, FrontendConfig{});
    CHECK(std::memcmp(s1.values.data(), s2.values.data(), sizeof(float) * static_cast<std::size_t>(s1.values.size())) ==
          0);
}

TEST_CASE("input contract errors") {
    FrontendConfig cfg;
    AudioChunk a = testutil::noise(0.1, 1.0, 5, 22050);
    CHECK_THROWS_AS(compute_log_mel(a, cfg), ConfigError);
    AudioChunk b = testutil::noise(0.1, 1.0, 5);
    b.samples[100] = std::numeric_limits<float>::quiet_NaN();
    CHECK_THROWS_AS(compute_log_mel(b, cfg), InputError);
    CHECK_THROWS_AS(compute_log_mel(AudioChunk{}, cfg), InputError);
    cfg.patch_f = 15;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
}

TEST_CASE("audio chunk length law") {
    CHECK(samples_for(8.0, 16000) == 128000);
    CHECK(samples_for(0.0251, 16000) == 402);
    const AudioChunk a = testutil::sine(440.0, 0.5, 8.0);
    CHECK(a.size() == 128000);
    CHECK(a.duration() == doctest::Approx(8.0));
}

TEST_CASE("wav round trips") {
    const auto dir = testutil::scratch("wav");
    const AudioChunk a = testutil::noise(0.9, 0.5, 7);
    write_wav(dir / "f.wav", a, WavSampleFormat::kFloat32);
    const AudioChunk f = read_wav(dir / "f.wav");
    CHECK(f.samples == a.samples);
    CHECK(f.sample_rate == 16000);

    write_wav(dir / "p16.wav", a, WavSampleFormat::kPcm16);
    write_wav(dir / "p24.wav", a, WavSampleFormat::kPcm24);
    const AudioChunk p16 = read_wav(dir / "p16.wav");
    const AudioChunk p24 = read_wav(dir / "p24.wav");
    for (std::size_t i = 0; i < a.size(); ++i) {
        REQUIRE(std::abs(p16.samples[i] - a.samples[i]) <= 1.0f / 32767.0f);
        REQUIRE(std::abs(p24.samples[i] - a.samples[i]) <= 1.0f / 8388607.0f);
    }
    const AudioChunk part = read_wav(dir / "f.wav", 100, 50);
    CHECK(part.size() == 50);
    CHECK(part.samples[0] == a.samples[100]);
    CHECK(read_wav_info(dir / "p24.wav").bits_per_sample == 24);
}

TEST_CASE("stereo wav is downmixed by averaging") {
    const auto dir = testutil::scratch("stereo");
    const std::vector<std::int16_t> frames = {1000, 3000, -2000, 2000, 32767, -32767};
    auto put32 = [](std::ofstream& o, std::uint32_t v) { o.write(reinterpret_cast<const char*>(&v), 4); };
    auto put16 = [](std::ofstream& o, std::uint16_t v) { o.write(reinterpret_cast<const char*>(&v), 2); };
    {
        std::ofstream o(dir / "s.wav", std::ios::binary);
        o.write("RIFF", 4);
        put32(o, 36 + 12);
        o.write("WAVEfmt ", 8);
        put32(o, 16);
        put16(o, 1);
        put16(o, 2);
        put32(o, 16000);
        put32(o, 16000 * 4);
        put16(o, 4);
        put16(o, 16);
        o.write("data", 4);
        put32(o, 12);
        o.write(reinterpret_cast<const char*>(frames.data()), 12);
    }
    const AudioChunk a = read_wav(dir / "s.wav");
    REQUIRE(a.size() == 3);
    CHECK(a.samples[0] == doctest::Approx(2000.0 / 32768.0).epsilon(1e-3));
    CHECK(a.samples[1] == doctest::Approx(0.0));
    CHECK(a.samples[2] == doctest::Approx(0.0).scale(1.0).epsilon(1e-4));
}

TEST_CASE("resampling preserves a low tone") {
    const AudioChunk a = testutil::sine(440.0, 0.5, 1.0, 44100);
    const AudioChunk b = resample(a, 16000);
    CHECK(b.sample_rate == 16000);
    CHECK(b.size() == 16000);
    const AudioChunk ref = testutil::sine(440.0, 0.5, 1.0, 16000);
    double err = 0.0;
    for (std::size_t i = 200; i + 200 < b.size(); ++i) err = std::max(err, std::abs(double(b.samples[i]) - ref.samples[i]));
    CHECK(err < 0.01);
}
