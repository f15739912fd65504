#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stemjepa/dataio.h"
#include "stemjepa/inference.h"
#include "stemjepa/model.h"

namespace stemjepa {

// ---------------------------------------------------------------------------
// Temporal alignment

enum class SequenceRole { kTarget, kPrediction };

struct TemporalEmbeddingSequence {
    MatrixF frames;  // [M x F_p*d], one row per time-patch column
    std::string source;

    int length() const { return static_cast<int>(frames.rows()); }
};

// Encodes consecutive chunk windows (remainder dropped) and concatenates the
// per-column frequency embeddings. The target role uses the EMA target
// encoder on `audio`; the prediction role encodes `audio` with the context
// encoder and applies the predictor conditioned on `label`.
TemporalEmbeddingSequence temporal_sequence(const AudioChunk& audio, const ModelState& state, SequenceRole role,
                                            const std::optional<std::string>& label, const FrontendConfig& frontend);

// (1/MS) sum_s sum_i <z_s[i], q_s[(i+j) mod M]> on unit-normalized frames.
double alignment_similarity(std::span<const MatrixF> z, std::span<const MatrixF> q, int shift);

// Same quantity for many shifts, sharing one Gram matrix per stem.
std::vector<double> alignment_similarities(std::span<const MatrixF> z, std::span<const MatrixF> q,
                                           std::span<const int> shifts);

struct AlignmentCurve {
    std::string track;
    std::vector<int> offsets;
    std::vector<double> values;
    double frame_seconds = 0.0;  // duration of one shift step
    int frames = 0;              // M
    int stems = 0;               // S

    int argmax_offset() const;
};

// Offsets in [-max_shift, max_shift); max_shift < 0 means M/2.
std::vector<int> alignment_offsets(int frames, int max_shift);

AlignmentCurve alignment_curve(const MultiTrackChunk& track, const ModelState& state, const FrontendConfig& frontend,
                               int max_shift);

void write_alignment_csv(const std::filesystem::path& path, std::span<const AlignmentCurve> curves);

// ---------------------------------------------------------------------------
// Clustering

struct KMeansConfig {
    int k = 32;
    int max_iterations = 100;
    int restarts = 10;
    std::uint64_t seed = 0;
};

struct KMeansResult {
    MatrixF centroids;
    std::vector<int> assignments;
    double inertia = 0.0;
};

// k-means++ seeding and Lloyd iterations; the best of `restarts` runs by
// inertia. Empty clusters are re-seeded with the point farthest from its centroid.
KMeansResult kmeans(const MatrixF& points, const KMeansConfig& cfg);

struct CooccurrenceMatrix {
    std::vector<std::string> vocabulary;
    std::vector<std::vector<std::int64_t>> counts;  // symmetric, vocabulary x vocabulary
    int k = 0;
    std::vector<int> assignments;

    // Sum over the upper triangle including the diagonal (each unordered pair once).
    std::int64_t total() const;
};

// Within each cluster, counts every unordered pair of members by their labels.
CooccurrenceMatrix cooccurrence_from_assignments(std::span<const int> assignments, std::span<const int> labels,
                                                 const std::vector<std::string>& vocabulary, int k);

CooccurrenceMatrix cluster_cooccurrence(const MatrixF& points, std::span<const int> labels,
                                        const std::vector<std::string>& vocabulary, const KMeansConfig& cfg);

nlohmann::json to_json(const CooccurrenceMatrix& m, int top_n);
void write_cooccurrence_csv(const std::filesystem::path& path, const CooccurrenceMatrix& m);

// Labeled segment of a clip: {"clip": path, "start": s, "end": s, "label": name}.
struct LabeledSegment {
    std::filesystem::path clip;
    double start = 0.0;
    double end = 0.0;
    std::string label;
};

std::vector<LabeledSegment> read_segments(const std::filesystem::path& jsonl);

struct LabeledVectors {
    MatrixF points;
    std::vector<int> labels;
    std::vector<std::string> vocabulary;
};

// Context-encoder embeddings of every clip; each patch ("patch") or
// frequency-concatenated frame ("frame") is labeled by the segment covering
// its time centre. Unlabeled positions are dropped.
LabeledVectors labeled_embeddings(std::span<const LabeledSegment> segments, const ModelState& state,
                                  const FrontendConfig& frontend, const std::string& unit);

// ---------------------------------------------------------------------------
// Global embeddings and probing

struct GlobalEmbedding {
    Eigen::VectorXf vector;  // F_p*d
    std::string clip;
};

// Frequency-concatenated frames averaged over time and over chunk windows.
// Clips shorter than one chunk are zero-padded.
GlobalEmbedding global_embedding(const AudioChunk& clip, const ModelState& state, const FrontendConfig& frontend,
                                 const std::string& id = {});

struct ProbeSplit {
    MatrixF x;
    std::vector<std::vector<int>> labels;  // one label set per row; exactly one for multiclass
};

struct ProbeDataset {
    std::vector<std::string> classes;
    bool multilabel = false;
    ProbeSplit train, valid, test;
};

struct ProbeReport {
    bool multilabel = false;
    int epochs = 0;
    int best_epoch = 0;
    std::vector<double> train_loss;  // per epoch
    std::vector<double> valid_metric;
    double test_accuracy = 0.0;  // multiclass
    double test_roc_auc = 0.0;   // multilabel, macro over classes with both outcomes
    double test_average_precision = 0.0;
};

struct ProbeOptions {
    int hidden = 512;
    int batch_size = 256;
    double lr = 1e-3;
    double weight_decay = 0.0;
    int max_epochs = 200;
    int patience = 10;
    bool standardize = true;
    std::uint64_t seed = 0;
};

// Builds a dataset from (train, valid, test) features and string label sets.
// Labels seen in valid or test but not in train raise InputError.
ProbeDataset make_probe_dataset(const std::vector<MatrixF>& features,
                                const std::vector<std::vector<std::vector<std::string>>>& labels, bool multilabel);

// One-hidden-layer MLP (ReLU) with softmax cross-entropy (multiclass) or
// sigmoid binary cross-entropy (multilabel), Adam, early stopping on validation.
ProbeReport probe_train_eval(const ProbeDataset& data, const ProbeOptions& opts);

double roc_auc(std::span<const double> scores, std::span<const int> truth);
double average_precision(std::span<const double> scores, std::span<const int> truth);

nlohmann::json to_json(const ProbeReport& r);

}  // namespace stemjepa
