#include "stemjepa/frontend.h"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <numbers>
#include <string>

#include "stemjepa/error.h"

namespace stemjepa {

namespace {

// FFTW planning is not thread-safe; plans are created once under a lock and
// executed with the new-array interface afterwards.
class FftPlanCache {
public:
    fftwf_plan get(int n_fft) {
        std::lock_guard<std::mutex> lock(mutex_);
        auto it = plans_.find(n_fft);
        if (it != plans_.end()) return it->second;
        std::vector<float> in(static_cast<std::size_t>(n_fft));
        std::vector<fftwf_complex> out(static_cast<std::size_t>(n_fft / 2 + 1));
        fftwf_plan plan = fftwf_plan_dft_r2c_1d(n_fft, in.data(), out.data(),
                                                FFTW_ESTIMATE | FFTW_UNALIGNED);
        plans_.emplace(n_fft, plan);
        return plan;
    }

private:
    std::mutex mutex_;
    std::map<int, fftwf_plan> plans_;
};

FftPlanCache& plan_cache() {
    static FftPlanCache cache;
    return cache;
}

struct FilterbankKey {
    int sample_rate, n_mels, n_fft;
    double f_min, f_max;
    auto operator<=>(const FilterbankKey&) const = default;
};

const MatrixF& cached_filterbank(const FrontendConfig& cfg) {
    static std::mutex mutex;
    static std::map<FilterbankKey, std::unique_ptr<MatrixF>> cache;
    const FilterbankKey key{cfg.sample_rate, cfg.n_mels, cfg.n_fft, cfg.f_min, cfg.mel_high()};
    std::lock_guard<std::mutex> lock(mutex);
    auto& slot = cache[key];
    if (!slot) slot = std::make_unique<MatrixF>(mel_filterbank(cfg));
    return *slot;
}

}  // namespace

int FrontendConfig::window_samples() const {
    return static_cast<int>(std::lround(window_s * sample_rate));
}

int FrontendConfig::hop_samples() const {
    return static_cast<int>(std::lround(hop_s * sample_rate));
}

float FrontendConfig::log_floor() const { return static_cast<float>(std::log(power_floor)); }

int FrontendConfig::frames_per_chunk() const {
    return static_cast<int>(std::llround(static_cast<double>(chunk_samples()) / hop_samples()));
}

void FrontendConfig::validate() const {
    if (sample_rate <= 0) throw ConfigError("frontend.sample_rate must be positive");
    if (n_mels <= 0) throw ConfigError("frontend.n_mels must be positive");
    if (hop_samples() <= 0 || window_samples() <= 0) {
        throw ConfigError("frontend window and hop must span at least one sample");
    }
    if (n_fft < window_samples()) throw ConfigError("frontend.n_fft must be >= window length");
    if (mel_high() <= f_min || mel_high() > sample_rate / 2.0) {
        throw ConfigError("frontend mel range must satisfy f_min < f_max <= Nyquist");
    }
    if (!(power_floor > 0.0)) throw ConfigError("frontend.power_floor must be positive");
    if (patch_f <= 0 || patch_t <= 0) throw ConfigError("patch sizes must be positive");
    if (n_mels % patch_f != 0) {
        throw ConfigError("n_mels (" + std::to_string(n_mels) + ") is not divisible by patch_f (" +
                          std::to_string(patch_f) + ")");
    }
    if (chunk_duration <= 0.0) throw ConfigError("frontend.chunk_duration must be positive");
    if (frames_per_chunk() < patch_t) throw ConfigError("chunk is shorter than one patch");
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }

double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

double mel_band_center(const FrontendConfig& cfg, int band) {
    const double lo = hz_to_mel(cfg.f_min);
    const double hi = hz_to_mel(cfg.mel_high());
    return mel_to_hz(lo + (hi - lo) * (band + 1) / (cfg.n_mels + 1));
}

MatrixF mel_filterbank(const FrontendConfig& cfg) {
    const int n_bins = cfg.n_fft / 2 + 1;
    const double lo = hz_to_mel(cfg.f_min);
    const double hi = hz_to_mel(cfg.mel_high());
    std::vector<double> edges(static_cast<std::size_t>(cfg.n_mels + 2));
    for (int i = 0; i < cfg.n_mels + 2; ++i) {
        edges[i] = mel_to_hz(lo + (hi - lo) * i / (cfg.n_mels + 1));
    }
    MatrixF fb = MatrixF::Zero(cfg.n_mels, n_bins);
    for (int m = 0; m < cfg.n_mels; ++m) {
        const double left = edges[m], center = edges[m + 1], right = edges[m + 2];
        for (int k = 0; k < n_bins; ++k) {
            const double f = static_cast<double>(k) * cfg.sample_rate / cfg.n_fft;
            double w = 0.0;
            if (f > left && f <= center) {
                w = (f - left) / (center - left);
            } else if (f > center && f < right) {
                w = (right - f) / (right - center);
            }
            fb(m, k) = static_cast<float>(w);
        }
    }
    return fb;
}

MatrixF compute_mel_power(const AudioChunk& audio, const FrontendConfig& cfg) {
    cfg.validate();
    if (audio.sample_rate != cfg.sample_rate) {
        throw ConfigError("sample rate mismatch: audio is " + std::to_string(audio.sample_rate) +
                          " Hz, frontend expects " + std::to_string(cfg.sample_rate) + " Hz");
    }
    if (audio.empty()) throw InputError("cannot compute a spectrogram of empty audio");
    check_finite(audio);

    const int win = cfg.window_samples();
    const int hop = cfg.hop_samples();
    const int n_fft = cfg.n_fft;
    const int n_bins = n_fft / 2 + 1;
    const auto n = static_cast<long>(audio.size());
    const int n_frames = std::max(1, static_cast<int>(std::llround(static_cast<double>(n) / hop)));

    std::vector<float> window(static_cast<std::size_t>(win));
    for (int i = 0; i < win; ++i) {
        window[i] = static_cast<float>(0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / win));
    }

    fftwf_plan plan = plan_cache().get(n_fft);
    std::vector<float> frame(static_cast<std::size_t>(n_fft), 0.0f);
    std::vector<fftwf_complex> spectrum(static_cast<std::size_t>(n_bins));
    MatrixF power(n_bins, n_frames);

    // Frame i is centered on sample i*hop; samples outside the signal repeat the edge value.
    const long half = win / 2;
    for (int i = 0; i < n_frames; ++i) {
        const long start = static_cast<long>(i) * hop - half;
        for (int j = 0; j < win; ++j) {
            const long idx = std::clamp(start + j, 0L, n - 1);
            frame[j] = audio.samples[static_cast<std::size_t>(idx)] * window[j];
        }
        fftwf_execute_dft_r2c(plan, frame.data(), spectrum.data());
        for (int k = 0; k < n_bins; ++k) {
            power(k, i) = spectrum[k][0] * spectrum[k][0] + spectrum[k][1] * spectrum[k][1];
        }
    }
    return cached_filterbank(cfg) * power;
}

LogMelSpectrogram compute_log_mel(const AudioChunk& audio, const FrontendConfig& cfg) {
    LogMelSpectrogram out;
    out.frame_hop = cfg.hop_s;
    out.window = cfg.window_s;
    const auto floor = static_cast<float>(cfg.power_floor);
    out.values = compute_mel_power(audio, cfg).unaryExpr([floor](float v) {
        return std::log(std::max(v, floor));
    });

    if (cfg.standardize) {
        const double count = static_cast<double>(out.values.size());
        const double mean = out.values.cast<double>().sum() / count;
        const double var = (out.values.cast<double>().array() - mean).square().sum() / count;
        const double std = std::max(std::sqrt(var), cfg.std_floor);
        out.values = ((out.values.cast<double>().array() - mean) / std).cast<float>().matrix();
    }
    return out;
}

PatchGrid patchify(const LogMelSpectrogram& spec, int patch_f, int patch_t) {
    if (patch_f <= 0 || patch_t <= 0) throw ConfigError("patch sizes must be positive");
    if (spec.n_mels() % patch_f != 0) {
        throw ConfigError("n_mels (" + std::to_string(spec.n_mels()) +
                          ") is not divisible by patch_f (" + std::to_string(patch_f) + ")");
    }
    if (spec.n_frames() < patch_t) throw InputError("spectrogram has fewer frames than one patch");

    PatchGrid grid;
    grid.patch_f = patch_f;
    grid.patch_t = patch_t;
    grid.freq_patches = spec.n_mels() / patch_f;
    grid.time_patches = spec.n_frames() / patch_t;
    const int k_total = grid.tokens();
    grid.patches.resize(k_total, patch_f * patch_t);
    grid.coords.resize(static_cast<std::size_t>(k_total));
    for (int t = 0; t < grid.time_patches; ++t) {
        for (int f = 0; f < grid.freq_patches; ++f) {
            const int k = token_index(f, t, grid.freq_patches);
            grid.coords[k] = {f, t};
            for (int r = 0; r < patch_f; ++r) {
                grid.patches.block(k, r * patch_t, 1, patch_t) =
                    spec.values.block(f * patch_f + r, t * patch_t, 1, patch_t);
            }
        }
    }
    return grid;
}

MatrixF unpatchify(const PatchGrid& grid) {
    MatrixF out(grid.freq_patches * grid.patch_f, grid.time_patches * grid.patch_t);
    for (int k = 0; k < grid.tokens(); ++k) {
        const auto [f, t] = grid.coords[k];
        for (int r = 0; r < grid.patch_f; ++r) {
            out.block(f * grid.patch_f + r, t * grid.patch_t, 1, grid.patch_t) =
                grid.patches.block(k, r * grid.patch_t, 1, grid.patch_t);
        }
    }
    return out;
}

}  // namespace stemjepa
