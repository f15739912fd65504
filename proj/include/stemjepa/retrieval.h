#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stemjepa/dataio.h"
#include "stemjepa/inference.h"
#include "stemjepa/model.h"

namespace stemjepa {

struct StemKey {
    std::string track;
    std::string label;

    bool operator==(const StemKey&) const = default;
    std::string str() const { return track + "/" + label; }
};

struct PooledEmbedding {
    Eigen::VectorXf vector;
    StemKey key;
    bool active = true;  // false when the stem failed the activity check
};

enum class Metric { kCosine, kEuclidean };
std::string to_string(Metric m);
Metric metric_from_string(const std::string& name);

// Distance between two vectors, computed in double precision.
double distance(const Eigen::VectorXf& a, const Eigen::VectorXf& b, Metric metric);

// Reference set Z. Entry order is the stable key order used to break ties.
class RetrievalIndex {
public:
    RetrievalIndex() = default;
    RetrievalIndex(Pooling pooling, Metric metric) : pooling_(pooling), metric_(metric) {}

    // Throws InputError on duplicate keys, non-finite values or dimension mismatch.
    void add(PooledEmbedding entry);

    const std::vector<PooledEmbedding>& entries() const { return entries_; }
    const PooledEmbedding& entry(std::size_t i) const { return entries_.at(i); }
    std::size_t size() const { return entries_.size(); }
    int dim() const { return dim_; }
    Pooling pooling() const { return pooling_; }
    Metric metric() const { return metric_; }

    // Position of `key`, or InputError when absent.
    std::size_t find(const StemKey& key) const;
    bool contains(const StemKey& key) const { return lookup_.count(key.str()) > 0; }

    std::vector<double> distances(const Eigen::VectorXf& query) const;

private:
    std::vector<PooledEmbedding> entries_;
    std::map<std::string, std::size_t> lookup_;
    Pooling pooling_ = Pooling::kMean;
    Metric metric_ = Metric::kCosine;
    int dim_ = 0;
};

struct EmbedOptions {
    FrontendConfig frontend;
    Pooling pooling = Pooling::kMean;
    Metric metric = Metric::kCosine;
    ActivityConfig activity;
    int threads = 1;
};

// Context-encoder embeddings of every stem of the selected tracks, averaged
// over consecutive chunk windows (remainder dropped, short stems padded).
RetrievalIndex build_reference_set(const Corpus& corpus, std::span<const std::size_t> tracks,
                                   const ModelState& state, const EmbedOptions& opts);

// For each (track, stem): encode the mix of the other stems, predict
// conditioned on the stem label, and pool.
std::vector<PooledEmbedding> build_queries(const Corpus& corpus, std::span<const std::size_t> tracks,
                                           const ModelState& state, const EmbedOptions& opts);

// #{z : d(q, z) < d(q, z_truth)} / |Z|.
double normalized_rank(const Eigen::VectorXf& query, const StemKey& truth, const RetrievalIndex& index);

// Fraction of queries whose truth is among the K nearest entries. Ties are
// ordered by index position. K larger than |Z| is clamped (with a warning on stderr).
double recall_at_k(std::span<const PooledEmbedding> queries, const RetrievalIndex& index, int k);

enum class FailureCategory { kBothCorrect, kRightInstrument, kRightSong, kBothWrong };
std::string to_string(FailureCategory c);

struct QueryResult {
    StemKey key;
    std::size_t position = 0;    // 0-based place of the truth in the tie-broken sorted list
    double normalized_rank = 0.0;
    std::size_t nearest = 0;     // index entry ranked first
    FailureCategory category = FailureCategory::kBothWrong;
};

struct FailureReport {
    std::map<FailureCategory, std::size_t> counts;
    std::vector<std::string> labels;                  // confusion matrix axes
    std::vector<std::vector<std::size_t>> confusion;  // conditioning label x retrieved label
    std::vector<QueryResult> results;
};

FailureReport categorize_failures(std::span<const PooledEmbedding> queries, const RetrievalIndex& index);

struct InstrumentMetrics {
    std::size_t queries = 0;
    std::map<int, double> recall;
    double rank_mean = 0.0;
    double rank_median = 0.0;
};

struct RetrievalMetrics {
    std::size_t queries = 0;
    std::size_t references = 0;
    std::map<int, double> recall;
    double rank_mean = 0.0;
    double rank_median = 0.0;
    std::map<std::string, InstrumentMetrics> per_instrument;
    FailureReport failures;
};

RetrievalMetrics evaluate_retrieval(std::span<const PooledEmbedding> queries, const RetrievalIndex& index,
                                    const std::vector<int>& ks);

nlohmann::json to_json(const RetrievalMetrics& m);
// One row per query: track, label, position, normalized rank, category, nearest key.
void write_query_csv(const std::filesystem::path& path, const RetrievalMetrics& m, const RetrievalIndex& index);

// Embedding store: <stem>.f32 (row-major float32 matrix) and <stem>.json
// sidecar with keys, activity flags, dimension, pooling and metric.
void write_embedding_store(const std::filesystem::path& stem, std::span<const PooledEmbedding> entries, int dim,
                           Pooling pooling, Metric metric);

struct EmbeddingStore {
    std::vector<PooledEmbedding> entries;
    int dim = 0;
    Pooling pooling = Pooling::kMean;
    Metric metric = Metric::kCosine;
};

EmbeddingStore read_embedding_store(const std::filesystem::path& stem);

// Builds an index from a reference store and checks the query store against it.
RetrievalIndex index_from_store(const EmbeddingStore& store);
void check_compatible(const EmbeddingStore& queries, const RetrievalIndex& index);

}  // namespace stemjepa
