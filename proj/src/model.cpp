#include "stemjepa/model.h"

#include <algorithm>
#include <cmath>

namespace stemjepa {

std::string to_string(PositionalEncoding kind) {
    return kind == PositionalEncoding::kLearned ? "learned" : "none";
}

PositionalEncoding positional_encoding_from_string(const std::string& name) {
    if (name == "learned") return PositionalEncoding::kLearned;
    if (name == "none") return PositionalEncoding::kNone;
    throw ConfigError("unknown positional encoding '" + name + "' (expected learned|none)");
}

std::string to_string(PredictorKind kind) {
    switch (kind) {
        case PredictorKind::kMlpConditioned: return "mlp_cond";
        case PredictorKind::kMlpUnconditioned: return "mlp_uncond";
        case PredictorKind::kTransformer: return "transformer";
    }
    return "?";
}

PredictorKind predictor_kind_from_string(const std::string& name) {
    if (name == "mlp_cond") return PredictorKind::kMlpConditioned;
    if (name == "mlp_uncond") return PredictorKind::kMlpUnconditioned;
    if (name == "transformer") return PredictorKind::kTransformer;
    throw ConfigError("unknown predictor kind '" + name + "' (expected mlp_cond|mlp_uncond|transformer)");
}

int EncoderConfig::mlp_dim() const { return static_cast<int>(std::lround(width * mlp_ratio)); }

void EncoderConfig::validate() const {
    if (depth < 0) throw ConfigError("encoder.depth must be >= 0");
    if (width <= 0 || heads <= 0) throw ConfigError("encoder width and heads must be positive");
    if (width % heads != 0) {
        throw ConfigError("encoder width " + std::to_string(width) + " is not divisible by heads " +
                          std::to_string(heads));
    }
    if (mlp_ratio <= 0.0) throw ConfigError("encoder.mlp_ratio must be positive");
    if (patch_dim <= 0 || freq_patches <= 0 || max_time_patches <= 0) {
        throw ConfigError("encoder grid dimensions must be positive");
    }
}

EncoderConfig EncoderConfig::tiny() {
    EncoderConfig cfg;
    cfg.depth = 4;
    cfg.width = 64;
    cfg.heads = 4;
    return cfg;
}

EncoderConfig EncoderConfig::base() {
    EncoderConfig cfg;
    cfg.depth = 12;
    cfg.width = 768;
    cfg.heads = 12;
    return cfg;
}

void PredictorConfig::validate() const {
    if (kind == PredictorKind::kTransformer) {
        if (depth < 0 || heads <= 0) throw ConfigError("predictor transformer depth/heads invalid");
        if (width < 0) throw ConfigError("predictor.width must be >= 0");
        if (width > 0 && width % heads != 0) throw ConfigError("predictor width not divisible by heads");
        if (mlp_ratio <= 0.0) throw ConfigError("predictor.mlp_ratio must be positive");
    } else {
        if (mlp_layers < 1) throw ConfigError("predictor.mlp_layers must be >= 1");
        if (hidden <= 0) throw ConfigError("predictor.hidden must be positive");
    }
    if (label_dim <= 0) throw ConfigError("predictor.label_dim must be positive");
}

int ModelConfig::label_index(const std::string& label) const {
    auto it = std::find(labels.begin(), labels.end(), label);
    if (it == labels.end()) throw InputError("unknown instrument label '" + label + "'");
    return static_cast<int>(it - labels.begin());
}

void ModelConfig::validate() const {
    encoder.validate();
    predictor.validate();
    if (predictor.kind == PredictorKind::kTransformer) {
        const int w = predictor.width > 0 ? predictor.width : encoder.width;
        if (w % predictor.heads != 0) throw ConfigError("predictor width not divisible by heads");
    }
    if (labels.empty()) throw ConfigError("model.labels must not be empty");
    for (std::size_t i = 0; i < labels.size(); ++i) {
        for (std::size_t j = i + 1; j < labels.size(); ++j) {
            if (labels[i] == labels[j]) throw ConfigError("duplicate label '" + labels[i] + "'");
        }
    }
}

EmbeddingGrid encode(const Encoder<float>& encoder, const PatchGrid& grid) {
    if (grid.freq_patches != encoder.config().freq_patches) {
        throw ConfigError("grid has " + std::to_string(grid.freq_patches) +
                          " frequency patches, encoder expects " +
                          std::to_string(encoder.config().freq_patches));
    }
    EmbeddingGrid out;
    out.vectors = encoder.forward(grid.patches, grid.tokens(), nullptr);
    out.freq_patches = grid.freq_patches;
    out.time_patches = grid.time_patches;
    out.coords = grid.coords;
    return out;
}

EmbeddingGrid predict(const ModelState& state, const EmbeddingGrid& context,
                      const std::optional<std::string>& label) {
    std::vector<int> labels;
    if (state.config.predictor.conditioned()) {
        if (!label) throw InputError("the conditioned predictor requires an instrument label");
        labels.push_back(state.config.label_index(*label));
    }
    EmbeddingGrid out;
    out.vectors = state.predictor.forward(context.vectors, context.tokens(), labels, nullptr);
    out.freq_patches = context.freq_patches;
    out.time_patches = context.time_patches;
    out.coords = context.coords;
    return out;
}

}  // namespace stemjepa
