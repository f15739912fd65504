#pragma once

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "stemjepa/audio.h"
#include "stemjepa/config.h"
#include "stemjepa/frontend.h"
#include "stemjepa/model.h"

namespace testutil {

inline stemjepa::AudioChunk sine(double freq, double amp, double seconds, int rate = 16000, double phase = 0.0) {
    stemjepa::AudioChunk a;
    a.sample_rate = rate;
    a.samples.resize(stemjepa::samples_for(seconds, rate));
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        a.samples[i] = static_cast<float>(amp * std::sin(2.0 * std::numbers::pi * freq * i / rate + phase));
    }
    return a;
}

inline stemjepa::AudioChunk noise(double amp, double seconds, std::uint64_t seed, int rate = 16000) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-amp, amp);
    stemjepa::AudioChunk a;
    a.sample_rate = rate;
    a.samples.resize(stemjepa::samples_for(seconds, rate));
    for (auto& s : a.samples) s = static_cast<float>(u(rng));
    return a;
}

inline stemjepa::AudioChunk silence(double seconds, int rate = 16000) {
    return {std::vector<float>(stemjepa::samples_for(seconds, rate), 0.0f), rate};
}

inline std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("stemjepa_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

// Tiny model on the default 80x800 frontend grid.
inline stemjepa::ModelConfig tiny_model(int predictor_hidden = 32) {
    stemjepa::ModelConfig m;
    m.encoder = stemjepa::EncoderConfig::tiny();
    m.encoder.depth = 1;
    m.encoder.width = 16;
    m.encoder.heads = 2;
    m.encoder.patch_dim = 256;
    m.encoder.freq_patches = 5;
    m.encoder.max_time_patches = 50;
    m.predictor.hidden = predictor_hidden;
    m.predictor.label_dim = 8;
    return m;
}

// Run-config snapshot carrying `model`, as stored in checkpoints.
inline nlohmann::json snapshot_for(const stemjepa::ModelConfig& model) {
    stemjepa::RunConfig c;
    c.model = model;
    return stemjepa::to_json(c);
}

inline stemjepa::MatrixF random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed, double lo = -1.0,
                                       double hi = 1.0) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(lo, hi);
    stemjepa::MatrixF m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(u(rng));
    return m;
}

}  // namespace testutil
