#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

namespace stemjepa {

// Mono PCM in [-1, 1] nominal range.
struct AudioChunk {
    std::vector<float> samples;
    int sample_rate = 16000;

    double duration() const {
        return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
    }
    std::size_t size() const { return samples.size(); }
    bool empty() const { return samples.empty(); }
};

// Number of samples for a duration, round(duration * rate).
std::size_t samples_for(double duration_s, int sample_rate);

// Throws InputError if any sample is NaN/Inf.
void check_finite(const AudioChunk& audio);

enum class WavSampleFormat { kPcm16, kPcm24, kFloat32 };

struct WavInfo {
    int sample_rate = 0;
    int channels = 0;
    int bits_per_sample = 0;
    WavSampleFormat format = WavSampleFormat::kPcm16;
    std::uint64_t frames = 0;
    std::uint64_t data_offset = 0;
};

WavInfo read_wav_info(const std::filesystem::path& path);

// Reads `count` frames starting at `offset` (count < 0 reads to the end).
// Multi-channel data is downmixed by averaging the channels.
AudioChunk read_wav(const std::filesystem::path& path, std::uint64_t offset = 0,
                    std::int64_t count = -1);

void write_wav(const std::filesystem::path& path, const AudioChunk& audio,
               WavSampleFormat format = WavSampleFormat::kPcm16);

// Band-limited (windowed-sinc) sample rate conversion.
AudioChunk resample(const AudioChunk& audio, int target_rate);

}  // namespace stemjepa
