#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stemjepa/error.h"
#include "stemjepa/frontend.h"
#include "stemjepa/nn.h"

namespace stemjepa {

enum class PositionalEncoding { kLearned, kNone };

std::string to_string(PositionalEncoding kind);
PositionalEncoding positional_encoding_from_string(const std::string& name);

struct EncoderConfig {
    int depth = 4;
    int width = 64;
    int heads = 4;
    double mlp_ratio = 4.0;
    PositionalEncoding positional = PositionalEncoding::kLearned;
    int patch_dim = 256;        // patch_f * patch_t
    int freq_patches = 5;       // F_p
    int max_time_patches = 50;  // T_p of one training chunk

    int max_tokens() const { return freq_patches * max_time_patches; }
    int mlp_dim() const;
    void validate() const;

    // depth 4, width 64, heads 4
    static EncoderConfig tiny();
    // ViT-Base: depth 12, width 768, heads 12
    static EncoderConfig base();
};

enum class PredictorKind { kMlpConditioned, kMlpUnconditioned, kTransformer };

std::string to_string(PredictorKind kind);
PredictorKind predictor_kind_from_string(const std::string& name);

struct PredictorConfig {
    PredictorKind kind = PredictorKind::kMlpConditioned;
    int mlp_layers = 6;
    int hidden = 1024;
    int label_dim = 128;
    // Transformer variant.
    int depth = 4;
    int width = 0;  // 0 means the encoder width
    int heads = 4;
    double mlp_ratio = 4.0;

    bool conditioned() const { return kind != PredictorKind::kMlpUnconditioned; }
    void validate() const;
};

struct ModelConfig {
    EncoderConfig encoder;
    PredictorConfig predictor;
    std::vector<std::string> labels{"bass", "drums", "vocals", "other"};

    int label_index(const std::string& label) const;
    void validate() const;
};

// Patch-wise embeddings, row k aligned with coords[k] of the source grid.
struct EmbeddingGrid {
    MatrixF vectors;  // [K x d]
    int freq_patches = 0;
    int time_patches = 0;
    std::vector<PatchCoord> coords;

    int tokens() const { return static_cast<int>(vectors.rows()); }
    int dim() const { return static_cast<int>(vectors.cols()); }
};

template <typename T>
class Encoder {
public:
    using Mat = nn::Matrix<T>;

    struct Cache {
        Mat patches;
        std::vector<typename nn::TransformerBlock<T>::Cache> blocks;
        typename nn::LayerNorm<T>::Cache norm;
    };

    Encoder() = default;
    Encoder(const EncoderConfig& cfg, const std::string& prefix, nn::Rng& rng) : cfg_(cfg) {
        cfg.validate();
        patch_embed_ = nn::Linear<T>(prefix + ".patch_embed", cfg.patch_dim, cfg.width, rng);
        pos_ = nn::Parameter<T>(prefix + ".pos_embed",
                                cfg.positional == PositionalEncoding::kLearned
                                    ? nn::normal_init<T>(cfg.max_tokens(), cfg.width, 0.02, rng)
                                    : Mat::Zero(cfg.max_tokens(), cfg.width),
                                false);
        for (int i = 0; i < cfg.depth; ++i) {
            blocks_.emplace_back(prefix + ".blocks." + std::to_string(i), cfg.width, cfg.heads,
                                 cfg.mlp_dim(), rng);
        }
        norm_ = nn::LayerNorm<T>(prefix + ".norm", cfg.width);
    }

    const EncoderConfig& config() const { return cfg_; }

    // patches: [batch*seq_len x patch_dim], tokens in time-major grid order.
    Mat forward(const Mat& patches, int seq_len, Cache* cache) const {
        check_sequence(patches, seq_len);
        Mat x = patch_embed_.forward(patches);
        if (cfg_.positional == PositionalEncoding::kLearned) {
            const Eigen::Index batch = patches.rows() / seq_len;
            for (Eigen::Index b = 0; b < batch; ++b) {
                x.middleRows(b * seq_len, seq_len) += pos_.value.topRows(seq_len);
            }
        }
        if (cache) {
            cache->patches = patches;
            cache->blocks.resize(blocks_.size());
        }
        for (std::size_t i = 0; i < blocks_.size(); ++i) {
            x = blocks_[i].forward(x, seq_len, cache ? &cache->blocks[i] : nullptr);
        }
        return norm_.forward(x, cache ? &cache->norm : nullptr);
    }

    void backward(const Cache& cache, const Mat& dy, int seq_len) {
        Mat dx = norm_.backward(cache.norm, dy);
        for (std::size_t i = blocks_.size(); i-- > 0;) {
            dx = blocks_[i].backward(cache.blocks[i], dx, seq_len);
        }
        if (cfg_.positional == PositionalEncoding::kLearned) {
            const Eigen::Index batch = dx.rows() / seq_len;
            for (Eigen::Index b = 0; b < batch; ++b) {
                pos_.grad.topRows(seq_len) += dx.middleRows(b * seq_len, seq_len);
            }
        }
        patch_embed_.backward(cache.patches, dx);
    }

    nn::ParamRefs<T> params() {
        nn::ParamRefs<T> out;
        patch_embed_.collect(out);
        if (cfg_.positional == PositionalEncoding::kLearned) out.push_back(&pos_);
        for (auto& b : blocks_) b.collect(out);
        norm_.collect(out);
        return out;
    }

    nn::ConstParamRefs<T> params() const { return nn::as_const(const_cast<Encoder*>(this)->params()); }

private:
    void check_sequence(const Mat& patches, int seq_len) const {
        if (seq_len <= 0 || patches.rows() % seq_len != 0) {
            throw ConfigError("patch matrix rows are not a multiple of the sequence length");
        }
        if (seq_len > cfg_.max_tokens()) {
            throw ConfigError("token count " + std::to_string(seq_len) +
                              " exceeds the encoder maximum of " + std::to_string(cfg_.max_tokens()));
        }
        if (patches.cols() != cfg_.patch_dim) {
            throw ConfigError("patch size " + std::to_string(patches.cols()) +
                              " does not match encoder patch_dim " + std::to_string(cfg_.patch_dim));
        }
    }

    EncoderConfig cfg_;
    nn::Linear<T> patch_embed_;
    nn::Parameter<T> pos_;
    std::vector<nn::TransformerBlock<T>> blocks_;
    nn::LayerNorm<T> norm_;
};

template <typename T>
class Predictor {
public:
    using Mat = nn::Matrix<T>;

    struct Cache {
        Mat input;
        std::vector<Mat> pre;  // MLP pre-activations per hidden layer
        std::vector<Mat> act;  // inputs of each MLP layer
        Mat projected;
        std::vector<typename nn::TransformerBlock<T>::Cache> blocks;
        typename nn::LayerNorm<T>::Cache norm;
        Mat normed;
    };

    Predictor() = default;
    Predictor(const PredictorConfig& cfg, int embed_dim, int n_labels, int max_tokens, nn::Rng& rng)
        : cfg_(cfg), embed_dim_(embed_dim) {
        cfg.validate();
        label_table_ = nn::Parameter<T>("predictor.label_embed",
                                        nn::normal_init<T>(n_labels, cfg.label_dim, 1.0, rng), false);
        const int in_dim = embed_dim + (cfg.conditioned() ? cfg.label_dim : 0);
        if (cfg.kind == PredictorKind::kTransformer) {
            const int width = cfg.width > 0 ? cfg.width : embed_dim;
            in_proj_ = nn::Linear<T>("predictor.in_proj", in_dim, width, rng);
            pos_ = nn::Parameter<T>("predictor.pos_embed", nn::normal_init<T>(max_tokens, width, 0.02, rng),
                                    false);
            const int mlp_dim = static_cast<int>(std::lround(width * cfg.mlp_ratio));
            for (int i = 0; i < cfg.depth; ++i) {
                blocks_.emplace_back("predictor.blocks." + std::to_string(i), width, cfg.heads, mlp_dim, rng);
            }
            norm_ = nn::LayerNorm<T>("predictor.norm", width);
            out_proj_ = nn::Linear<T>("predictor.out_proj", width, embed_dim, rng);
        } else {
            int prev = in_dim;
            for (int i = 0; i < cfg.mlp_layers; ++i) {
                const int out = i + 1 == cfg.mlp_layers ? embed_dim : cfg.hidden;
                layers_.emplace_back("predictor.mlp." + std::to_string(i), prev, out, rng);
                prev = out;
            }
        }
    }

    const PredictorConfig& config() const { return cfg_; }
    const std::vector<nn::Linear<T>>& mlp_layers() const { return layers_; }
    const nn::Parameter<T>& label_table() const { return label_table_; }
    nn::Parameter<T>& label_table() { return label_table_; }

    // z: [batch*seq_len x d]; labels: one label index per sample (ignored when unconditioned).
    Mat forward(const Mat& z, int seq_len, std::span<const int> labels, Cache* cache) const {
        Mat x = conditioned_input(z, seq_len, labels);
        if (cache) cache->input = x;
        if (cfg_.kind == PredictorKind::kTransformer) {
            Mat h = in_proj_.forward(x);
            const Eigen::Index batch = h.rows() / seq_len;
            for (Eigen::Index b = 0; b < batch; ++b) h.middleRows(b * seq_len, seq_len) += pos_.value.topRows(seq_len);
            if (cache) {
                cache->blocks.resize(blocks_.size());
            }
            for (std::size_t i = 0; i < blocks_.size(); ++i) {
                h = blocks_[i].forward(h, seq_len, cache ? &cache->blocks[i] : nullptr);
            }
            Mat normed = norm_.forward(h, cache ? &cache->norm : nullptr);
            Mat y = out_proj_.forward(normed);
            if (cache) cache->normed = std::move(normed);
            return y;
        }
        if (cache) {
            cache->act.resize(layers_.size());
            cache->pre.resize(layers_.size() - 1);
        }
        for (std::size_t i = 0; i < layers_.size(); ++i) {
            if (cache) cache->act[i] = x;
            Mat y = layers_[i].forward(x);
            if (i + 1 == layers_.size()) return y;
            if (cache) cache->pre[i] = y;
            x = nn::relu(y);
        }
        return x;
    }

    // Returns dL/dz; accumulates predictor and label-table gradients.
    Mat backward(const Cache& cache, const Mat& dy, int seq_len, std::span<const int> labels) {
        Mat dx;
        if (cfg_.kind == PredictorKind::kTransformer) {
            Mat dh = norm_.backward(cache.norm, out_proj_.backward(cache.normed, dy));
            for (std::size_t i = blocks_.size(); i-- > 0;) dh = blocks_[i].backward(cache.blocks[i], dh, seq_len);
            const Eigen::Index batch = dh.rows() / seq_len;
            for (Eigen::Index b = 0; b < batch; ++b) pos_.grad.topRows(seq_len) += dh.middleRows(b * seq_len, seq_len);
            dx = in_proj_.backward(cache.input, dh);
        } else {
            dx = dy;
            for (std::size_t i = layers_.size(); i-- > 0;) {
                if (i + 1 < layers_.size()) dx = nn::relu_backward(cache.pre[i], dx);
                dx = layers_[i].backward(cache.act[i], dx);
            }
        }
        if (cfg_.conditioned()) {
            const Eigen::Index batch = dx.rows() / seq_len;
            for (Eigen::Index b = 0; b < batch; ++b) {
                label_table_.grad.row(labels[static_cast<std::size_t>(b)]) +=
                    dx.block(b * seq_len, embed_dim_, seq_len, cfg_.label_dim).colwise().sum();
            }
        }
        return dx.leftCols(embed_dim_);
    }

    // Predictor weights only (the label table is reported separately).
    nn::ParamRefs<T> network_params() {
        nn::ParamRefs<T> out;
        if (cfg_.kind == PredictorKind::kTransformer) {
            in_proj_.collect(out);
            out.push_back(&pos_);
            for (auto& b : blocks_) b.collect(out);
            norm_.collect(out);
            out_proj_.collect(out);
        } else {
            for (auto& l : layers_) l.collect(out);
        }
        return out;
    }

    nn::ParamRefs<T> params() {
        nn::ParamRefs<T> out = network_params();
        out.push_back(&label_table_);
        return out;
    }

    nn::ConstParamRefs<T> params() const { return nn::as_const(const_cast<Predictor*>(this)->params()); }

    std::size_t network_parameter_count() const {
        std::size_t n = 0;
        for (auto* p : const_cast<Predictor*>(this)->network_params()) n += static_cast<std::size_t>(p->size());
        return n;
    }

private:
    Mat conditioned_input(const Mat& z, int seq_len, std::span<const int> labels) const {
        if (!cfg_.conditioned()) return z;
        const Eigen::Index batch = z.rows() / seq_len;
        if (static_cast<Eigen::Index>(labels.size()) != batch) {
            throw InputError("predictor needs one label per sample");
        }
        Mat x(z.rows(), embed_dim_ + cfg_.label_dim);
        x.leftCols(embed_dim_) = z;
        for (Eigen::Index b = 0; b < batch; ++b) {
            const int l = labels[static_cast<std::size_t>(b)];
            if (l < 0 || l >= label_table_.value.rows()) throw InputError("label index out of range");
            x.block(b * seq_len, embed_dim_, seq_len, cfg_.label_dim).rowwise() = label_table_.value.row(l);
        }
        return x;
    }

    PredictorConfig cfg_;
    int embed_dim_ = 0;
    nn::Parameter<T> label_table_;
    std::vector<nn::Linear<T>> layers_;
    nn::Linear<T> in_proj_;
    nn::Parameter<T> pos_;
    std::vector<nn::TransformerBlock<T>> blocks_;
    nn::LayerNorm<T> norm_;
    nn::Linear<T> out_proj_;
};

// Context encoder, its EMA twin, and the conditioned predictor.
template <typename T>
struct BasicModelState {
    ModelConfig config;
    Encoder<T> context;
    Encoder<T> target;
    Predictor<T> predictor;
    std::int64_t step = 0;

    BasicModelState() = default;
    BasicModelState(const ModelConfig& cfg, std::uint64_t seed) : config(cfg) {
        cfg.validate();
        nn::Rng rng(seed);
        context = Encoder<T>(cfg.encoder, "context", rng);
        target = Encoder<T>(cfg.encoder, "target", rng);
        predictor = Predictor<T>(cfg.predictor, cfg.encoder.width, static_cast<int>(cfg.labels.size()),
                                 cfg.encoder.max_tokens(), rng);
        auto src = context.params();
        auto dst = target.params();
        for (std::size_t i = 0; i < src.size(); ++i) dst[i]->value = src[i]->value;
    }

    const nn::Parameter<T>& instrument_table() const { return predictor.label_table(); }

    // Parameters optimized by gradient descent: context encoder, predictor, label table.
    nn::ParamRefs<T> trainable() {
        nn::ParamRefs<T> out = context.params();
        for (auto* p : predictor.params()) out.push_back(p);
        return out;
    }

    // Every named tensor, in a fixed order.
    nn::ParamRefs<T> all() {
        nn::ParamRefs<T> out = trainable();
        for (auto* p : target.params()) out.push_back(p);
        return out;
    }
    nn::ConstParamRefs<T> all() const { return nn::as_const(const_cast<BasicModelState*>(this)->all()); }
};

using ModelState = BasicModelState<float>;

// Applies target <- tau * target + (1 - tau) * context to every target tensor.
template <typename T>
void ema_update(BasicModelState<T>& state, double tau) {
    if (!(tau >= 0.0 && tau <= 1.0)) {
        throw InputError("EMA rate must lie in [0, 1], got " + std::to_string(tau));
    }
    auto src = state.context.params();
    auto dst = state.target.params();
    const T keep = static_cast<T>(tau);
    const T mix = static_cast<T>(1.0 - tau);
    for (std::size_t i = 0; i < src.size(); ++i) {
        dst[i]->value = keep * dst[i]->value + mix * src[i]->value;
    }
}

template <typename T>
Predictor<T> make_predictor(PredictorKind kind, const PredictorConfig& base, int embed_dim, int n_labels,
                            int max_tokens, nn::Rng& rng) {
    PredictorConfig cfg = base;
    cfg.kind = kind;
    return Predictor<T>(cfg, embed_dim, n_labels, max_tokens, rng);
}

// Inference-mode helpers on the float model.
EmbeddingGrid encode(const Encoder<float>& encoder, const PatchGrid& grid);

// `label` may be empty for the unconditioned predictor.
EmbeddingGrid predict(const ModelState& state, const EmbeddingGrid& context,
                      const std::optional<std::string>& label);

}  // namespace stemjepa
