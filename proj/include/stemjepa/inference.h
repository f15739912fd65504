#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "stemjepa/audio.h"
#include "stemjepa/frontend.h"
#include "stemjepa/model.h"

namespace stemjepa {

// How a patch grid is reduced to one vector: mean over all patches (d values)
// or frequency concatenation followed by a mean over time (F_p*d values).
enum class Pooling { kMean, kFreqConcat };
std::string to_string(Pooling p);
Pooling pooling_from_string(const std::string& name);

// Consecutive non-overlapping windows of `chunk_samples`; the remainder is
// dropped. Audio shorter than one window is zero-padded when `pad_short` is
// set, otherwise an InputError is raised.
std::vector<AudioChunk> chunk_windows(const AudioChunk& audio, std::size_t chunk_samples, bool pad_short);

// Log-mel, patchify and encode one window.
EmbeddingGrid encode_audio(const Encoder<float>& encoder, const AudioChunk& audio, const FrontendConfig& frontend);

// Rows grouped per time column: [T_p x F_p*d]. Valid because tokens are time-major.
MatrixF frequency_concat(const EmbeddingGrid& grid);

// Mean over all patches, d values.
Eigen::VectorXf mean_pool(const EmbeddingGrid& grid);

// Mean over time of the frequency-concatenated frames, F_p*d values.
Eigen::VectorXf freq_concat_pool(const EmbeddingGrid& grid);

Eigen::VectorXf pool(const EmbeddingGrid& grid, Pooling pooling);

// Runs fn(i) for i in [0, n) on up to `threads` workers. Results must be
// written to per-index slots so the output does not depend on scheduling.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

}  // namespace stemjepa
