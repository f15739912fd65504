#include "stemjepa/audio.h"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>

#include "stemjepa/error.h"

namespace stemjepa {

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

std::uint16_t read_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

std::uint32_t read_u32(const unsigned char* p) {
    return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
           (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void put_u16(std::vector<char>& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>((v >> 8) & 0xFF));
}

void put_u32(std::vector<char>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

int bytes_per_sample(const WavInfo& info) { return info.bits_per_sample / 8; }

float decode_sample(const unsigned char* p, WavSampleFormat format) {
    switch (format) {
        case WavSampleFormat::kPcm16: {
            auto v = static_cast<std::int16_t>(read_u16(p));
            return static_cast<float>(v) / 32768.0f;
        }
        case WavSampleFormat::kPcm24: {
            std::int32_t v = p[0] | (p[1] << 8) | (p[2] << 16);
            if (v & 0x800000) v |= ~0xFFFFFF;
            return static_cast<float>(v) / 8388608.0f;
        }
        case WavSampleFormat::kFloat32: {
            float f;
            std::memcpy(&f, p, 4);
            return f;
        }
    }
    return 0.0f;
}

}  // namespace

std::size_t samples_for(double duration_s, int sample_rate) {
    return static_cast<std::size_t>(std::llround(duration_s * sample_rate));
}

void check_finite(const AudioChunk& audio) {
    for (float s : audio.samples) {
        if (!std::isfinite(s)) throw InputError("audio contains non-finite samples");
    }
}

WavInfo read_wav_info(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open WAV file: " + path.string());

    std::array<unsigned char, 12> riff{};
    if (!in.read(reinterpret_cast<char*>(riff.data()), riff.size()) ||
        std::memcmp(riff.data(), "RIFF", 4) != 0 || std::memcmp(riff.data() + 8, "WAVE", 4) != 0) {
        throw InputError("not a RIFF/WAVE file: " + path.string());
    }

    WavInfo info;
    bool have_fmt = false;
    std::uint16_t format_tag = 0;
    std::array<unsigned char, 8> header{};
    while (in.read(reinterpret_cast<char*>(header.data()), header.size())) {
        const std::uint32_t size = read_u32(header.data() + 4);
        if (std::memcmp(header.data(), "fmt ", 4) == 0) {
            std::vector<unsigned char> fmt(size);
            if (size < 16 || !in.read(reinterpret_cast<char*>(fmt.data()), size)) {
                throw InputError("truncated fmt chunk: " + path.string());
            }
            format_tag = read_u16(fmt.data());
            info.channels = read_u16(fmt.data() + 2);
            info.sample_rate = static_cast<int>(read_u32(fmt.data() + 4));
            info.bits_per_sample = read_u16(fmt.data() + 14);
            if (format_tag == kFormatExtensible && size >= 26) {
                format_tag = read_u16(fmt.data() + 24);
            }
            have_fmt = true;
            if (size % 2) in.seekg(1, std::ios::cur);
        } else if (std::memcmp(header.data(), "data", 4) == 0) {
            if (!have_fmt) throw InputError("data chunk before fmt chunk: " + path.string());
            info.data_offset = static_cast<std::uint64_t>(in.tellg());
            const int frame_bytes = info.channels * (info.bits_per_sample / 8);
            if (frame_bytes <= 0) throw InputError("invalid WAV frame size: " + path.string());
            info.frames = size / static_cast<std::uint32_t>(frame_bytes);
            break;
        } else {
            in.seekg(size + (size % 2), std::ios::cur);
        }
    }
    if (!have_fmt || info.data_offset == 0) {
        throw InputError("WAV file missing fmt or data chunk: " + path.string());
    }

    if (format_tag == kFormatPcm && info.bits_per_sample == 16) {
        info.format = WavSampleFormat::kPcm16;
    } else if (format_tag == kFormatPcm && info.bits_per_sample == 24) {
        info.format = WavSampleFormat::kPcm24;
    } else if (format_tag == kFormatFloat && info.bits_per_sample == 32) {
        info.format = WavSampleFormat::kFloat32;
    } else {
        throw InputError("unsupported WAV encoding (tag " + std::to_string(format_tag) + ", " +
                         std::to_string(info.bits_per_sample) + " bits): " + path.string());
    }
    return info;
}

AudioChunk read_wav(const std::filesystem::path& path, std::uint64_t offset, std::int64_t count) {
    const WavInfo info = read_wav_info(path);
    if (offset > info.frames) throw InputError("read offset beyond end of " + path.string());
    const std::uint64_t available = info.frames - offset;
    const std::uint64_t n = count < 0 ? available : std::min<std::uint64_t>(available, count);
    if (count >= 0 && static_cast<std::uint64_t>(count) > available) {
        throw InputError("read range beyond end of " + path.string());
    }

    const int bps = bytes_per_sample(info);
    const std::size_t frame_bytes = static_cast<std::size_t>(bps) * info.channels;
    std::vector<unsigned char> raw(n * frame_bytes);
    std::ifstream in(path, std::ios::binary);
    in.seekg(static_cast<std::streamoff>(info.data_offset + offset * frame_bytes));
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
        throw InputError("truncated WAV data: " + path.string());
    }

    AudioChunk out;
    out.sample_rate = info.sample_rate;
    out.samples.resize(n);
    const float inv_channels = 1.0f / static_cast<float>(info.channels);
    for (std::uint64_t i = 0; i < n; ++i) {
        const unsigned char* frame = raw.data() + i * frame_bytes;
        float acc = 0.0f;
        for (int c = 0; c < info.channels; ++c) acc += decode_sample(frame + c * bps, info.format);
        out.samples[i] = info.channels == 1 ? acc : acc * inv_channels;
    }
    return out;
}

void write_wav(const std::filesystem::path& path, const AudioChunk& audio, WavSampleFormat format) {
    const int bits = format == WavSampleFormat::kPcm16 ? 16 : format == WavSampleFormat::kPcm24 ? 24 : 32;
    const int bps = bits / 8;
    const auto data_bytes = static_cast<std::uint32_t>(audio.samples.size() * bps);

    std::vector<char> buf;
    buf.reserve(44 + data_bytes);
    buf.insert(buf.end(), {'R', 'I', 'F', 'F'});
    put_u32(buf, 36 + data_bytes);
    buf.insert(buf.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
    put_u32(buf, 16);
    put_u16(buf, format == WavSampleFormat::kFloat32 ? kFormatFloat : kFormatPcm);
    put_u16(buf, 1);
    put_u32(buf, static_cast<std::uint32_t>(audio.sample_rate));
    put_u32(buf, static_cast<std::uint32_t>(audio.sample_rate * bps));
    put_u16(buf, static_cast<std::uint16_t>(bps));
    put_u16(buf, static_cast<std::uint16_t>(bits));
    buf.insert(buf.end(), {'d', 'a', 't', 'a'});
    put_u32(buf, data_bytes);

    for (float s : audio.samples) {
        switch (format) {
            case WavSampleFormat::kPcm16: {
                const float c = std::clamp(s, -1.0f, 1.0f);
                const auto v = static_cast<std::int16_t>(std::lrint(std::min(c * 32768.0f, 32767.0f)));
                put_u16(buf, static_cast<std::uint16_t>(v));
                break;
            }
            case WavSampleFormat::kPcm24: {
                const float c = std::clamp(s, -1.0f, 1.0f);
                const auto v = static_cast<std::int32_t>(std::lrint(std::min(c * 8388608.0f, 8388607.0f)));
                for (int i = 0; i < 3; ++i) buf.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
                break;
            }
            case WavSampleFormat::kFloat32: {
                std::uint32_t bits32;
                std::memcpy(&bits32, &s, 4);
                put_u32(buf, bits32);
                break;
            }
        }
    }

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write WAV file: " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw IoError("failed writing WAV file: " + path.string());
}

AudioChunk resample(const AudioChunk& audio, int target_rate) {
    if (target_rate <= 0 || audio.sample_rate <= 0) throw ConfigError("invalid sample rate for resampling");
    if (target_rate == audio.sample_rate) return audio;

    const int g = std::gcd(target_rate, audio.sample_rate);
    const long up = target_rate / g;
    const long down = audio.sample_rate / g;
    const double ratio = static_cast<double>(target_rate) / audio.sample_rate;
    // Cutoff at the lower Nyquist, slightly inside to leave room for the transition band.
    const double cutoff = 0.95 * std::min(1.0, ratio);
    constexpr int kHalfTaps = 32;
    const double half_width = kHalfTaps / cutoff;

    const auto n_in = static_cast<long>(audio.samples.size());
    const auto n_out = static_cast<long>(std::llround(static_cast<double>(n_in) * up / down));
    AudioChunk out;
    out.sample_rate = target_rate;
    out.samples.resize(static_cast<std::size_t>(n_out));

    for (long m = 0; m < n_out; ++m) {
        const double center = static_cast<double>(m) * down / up;
        const long lo = static_cast<long>(std::ceil(center - half_width));
        const long hi = static_cast<long>(std::floor(center + half_width));
        double acc = 0.0;
        for (long k = std::max(lo, 0L); k <= std::min(hi, n_in - 1); ++k) {
            const double x = k - center;
            const double arg = std::numbers::pi * cutoff * x;
            const double sinc = std::abs(x) < 1e-12 ? 1.0 : std::sin(arg) / arg;
            const double w = 0.5 + 0.5 * std::cos(std::numbers::pi * x / half_width);
            acc += audio.samples[static_cast<std::size_t>(k)] * cutoff * sinc * w;
        }
        out.samples[static_cast<std::size_t>(m)] = static_cast<float>(acc);
    }
    return out;
}

}  // namespace stemjepa
