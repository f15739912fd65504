#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stemjepa/dataio.h"
#include "stemjepa/frontend.h"
#include "stemjepa/inference.h"
#include "stemjepa/model.h"
#include "stemjepa/training.h"

namespace stemjepa {

struct DataConfig {
    std::string manifest;     // corpus manifest path
    std::string musdb_root;   // alternative: MUSDB18-HQ directory, imported on first use
    std::size_t holdout_tracks = 0;
    ActivityConfig activity;
    int max_resample = 10;
    SynthSpec synth;
};

struct EvalConfig {
    Pooling pooling = Pooling::kMean;
    std::string metric = "cosine";
    std::string split = "holdout";  // holdout | train | all
    std::vector<int> recall_ks{1, 5, 10};
};

struct ProbeConfig {
    int hidden = 512;
    int batch_size = 256;
    double lr = 1e-3;
    double weight_decay = 0.0;
    int max_epochs = 200;
    int patience = 10;
    bool standardize = true;
};

struct AnalysisConfig {
    int max_shift = -1;  // offsets in [-max_shift, max_shift); -1 means M/2
    int align_tracks = 20;
    int clusters = 32;
    int kmeans_iterations = 100;
    int kmeans_restarts = 10;
    std::string cluster_unit = "patch";  // patch | frame
    std::string segments;                // labeled-segment JSON-lines
    int top_n = 80;
    std::string probe_dataset;           // JSON-lines {clip, label|labels, split}
    ProbeConfig probe;
};

struct RunConfig {
    FrontendConfig frontend;
    DataConfig data;
    std::string model_preset = "tiny";
    ModelConfig model;
    TrainConfig train;
    EvalConfig eval;
    AnalysisConfig analysis;
    std::uint64_t seed = 0;
    std::string output_dir = "runs/default";
    int threads = 1;

    // Fills encoder grid sizes from the frontend and validates every section.
    void resolve();
    PairSamplerConfig sampler() const;
};

// Preset defaults; "tiny" and "base" select encoder and predictor shapes.
ModelConfig model_preset(const std::string& name);

nlohmann::json to_json(const RunConfig& cfg);

// Strict parse: unknown keys and wrong types raise ConfigError. Missing keys keep defaults.
RunConfig run_config_from_json(const nlohmann::json& doc);

RunConfig load_run_config(const std::filesystem::path& path);

// Applies "section.key=value" overrides (value parsed as JSON, else as a string).
void apply_overrides(nlohmann::json& doc, const std::vector<std::string>& overrides);

}  // namespace stemjepa
