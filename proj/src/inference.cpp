#include "stemjepa/inference.h"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <thread>

#include "stemjepa/error.h"

namespace stemjepa {

std::string to_string(Pooling p) { return p == Pooling::kMean ? "mean" : "freq_concat"; }

Pooling pooling_from_string(const std::string& name) {
    if (name == "mean") return Pooling::kMean;
    if (name == "freq_concat") return Pooling::kFreqConcat;
    throw ConfigError("unknown pooling '" + name + "' (expected mean|freq_concat)");
}

std::vector<AudioChunk> chunk_windows(const AudioChunk& audio, std::size_t chunk_samples, bool pad_short) {
    if (chunk_samples == 0) throw ConfigError("chunk length must be positive");
    if (audio.empty()) throw InputError("empty audio");
    std::vector<AudioChunk> out;
    if (audio.size() < chunk_samples) {
        if (!pad_short) {
            throw InputError("audio of " + std::to_string(audio.size()) + " samples is shorter than one chunk (" +
                             std::to_string(chunk_samples) + ")");
        }
        AudioChunk padded{std::vector<float>(chunk_samples, 0.0f), audio.sample_rate};
        std::copy(audio.samples.begin(), audio.samples.end(), padded.samples.begin());
        out.push_back(std::move(padded));
        return out;
    }
    const std::size_t n = audio.size() / chunk_samples;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto first = audio.samples.begin() + static_cast<std::ptrdiff_t>(i * chunk_samples);
        out.push_back(AudioChunk{std::vector<float>(first, first + static_cast<std::ptrdiff_t>(chunk_samples)),
                                 audio.sample_rate});
    }
    return out;
}

EmbeddingGrid encode_audio(const Encoder<float>& encoder, const AudioChunk& audio, const FrontendConfig& frontend) {
    const PatchGrid grid = patchify(compute_log_mel(audio, frontend), frontend.patch_f, frontend.patch_t);
    return encode(encoder, grid);
}

MatrixF frequency_concat(const EmbeddingGrid& grid) {
    const Eigen::Index frame_dim = static_cast<Eigen::Index>(grid.freq_patches) * grid.dim();
    return Eigen::Map<const MatrixF>(grid.vectors.data(), grid.time_patches, frame_dim);
}

Eigen::VectorXf mean_pool(const EmbeddingGrid& grid) {
    if (grid.tokens() == 0) throw InputError("cannot pool an empty embedding grid");
    return grid.vectors.colwise().mean().transpose();
}

Eigen::VectorXf freq_concat_pool(const EmbeddingGrid& grid) {
    if (grid.tokens() == 0) throw InputError("cannot pool an empty embedding grid");
    return frequency_concat(grid).colwise().mean().transpose();
}

Eigen::VectorXf pool(const EmbeddingGrid& grid, Pooling pooling) {
    return pooling == Pooling::kMean ? mean_pool(grid) : freq_concat_pool(grid);
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
    const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
    if (workers <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mutex;
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i = next++; i < n; i = next++) {
                try {
                    fn(i);
                } catch (...) {
                    std::lock_guard<std::mutex> lock(error_mutex);
                    if (!error) error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

}  // namespace stemjepa
