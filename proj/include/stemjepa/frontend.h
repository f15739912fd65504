#pragma once

#include <Eigen/Core>
#include <utility>
#include <vector>

#include "stemjepa/audio.h"

namespace stemjepa {

using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct FrontendConfig {
    int sample_rate = 16000;
    int n_mels = 80;
    double window_s = 0.025;
    double hop_s = 0.010;
    int n_fft = 512;
    double f_min = 0.0;
    double f_max = 0.0;  // 0 means Nyquist
    double power_floor = 1e-10;
    bool standardize = true;
    double std_floor = 1e-5;
    int patch_f = 16;
    int patch_t = 16;
    double chunk_duration = 8.0;

    int window_samples() const;
    int hop_samples() const;
    double mel_high() const { return f_max > 0.0 ? f_max : sample_rate / 2.0; }
    // log(power_floor): the value every bin takes for digital silence.
    float log_floor() const;
    std::size_t chunk_samples() const { return samples_for(chunk_duration, sample_rate); }
    int frames_per_chunk() const;
    int freq_patches() const { return n_mels / patch_f; }
    int time_patches_per_chunk() const { return frames_per_chunk() / patch_t; }
    int tokens_per_chunk() const { return freq_patches() * time_patches_per_chunk(); }

    // Throws ConfigError on inconsistent settings.
    void validate() const;
};

struct LogMelSpectrogram {
    MatrixF values;  // [n_mels x n_frames]
    double frame_hop = 0.010;
    double window = 0.025;

    int n_mels() const { return static_cast<int>(values.rows()); }
    int n_frames() const { return static_cast<int>(values.cols()); }
};

// Grid coordinate of a patch: frequency row and time column.
struct PatchCoord {
    int freq = 0;
    int time = 0;
    bool operator==(const PatchCoord&) const = default;
};

// Tokens are stored time-major: token k sits at (k % F_p, k / F_p). Each row of
// `patches` is one patch flattened row-major (patch_f rows of patch_t frames).
struct PatchGrid {
    MatrixF patches;  // [K x patch_f*patch_t]
    int freq_patches = 0;
    int time_patches = 0;
    int patch_f = 16;
    int patch_t = 16;
    std::vector<PatchCoord> coords;

    int tokens() const { return freq_patches * time_patches; }
};

inline int token_index(int freq, int time, int freq_patches) { return time * freq_patches + freq; }

// Triangular HTK-scale filterbank, [n_mels x (n_fft/2 + 1)], peak weight 1.
MatrixF mel_filterbank(const FrontendConfig& cfg);

double hz_to_mel(double hz);
double mel_to_hz(double mel);
// Center frequency (Hz) of mel band `band`.
double mel_band_center(const FrontendConfig& cfg, int band);

// Linear-power mel energies [n_mels x n_frames], before the log.
MatrixF compute_mel_power(const AudioChunk& audio, const FrontendConfig& cfg);

LogMelSpectrogram compute_log_mel(const AudioChunk& audio, const FrontendConfig& cfg);

PatchGrid patchify(const LogMelSpectrogram& spec, int patch_f, int patch_t);

// Inverse of patchify over the retained region: [F_p*patch_f x T_p*patch_t].
MatrixF unpatchify(const PatchGrid& grid);

}  // namespace stemjepa
