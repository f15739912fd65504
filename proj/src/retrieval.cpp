#include "stemjepa/retrieval.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <numeric>

#include "stemjepa/error.h"

namespace stemjepa {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Metric m) { return m == Metric::kCosine ? "cosine" : "euclidean"; }

Metric metric_from_string(const std::string& name) {
    if (name == "cosine") return Metric::kCosine;
    if (name == "euclidean") return Metric::kEuclidean;
    throw ConfigError("unknown metric '" + name + "' (expected cosine|euclidean)");
}

double distance(const Eigen::VectorXf& a, const Eigen::VectorXf& b, Metric metric) {
    if (a.size() != b.size()) {
        throw InputError("vector dimensions differ: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
    }
    const Eigen::VectorXd x = a.cast<double>();
    const Eigen::VectorXd y = b.cast<double>();
    if (metric == Metric::kEuclidean) return (x - y).norm();
    const double nx = x.norm(), ny = y.norm();
    if (nx == 0.0 || ny == 0.0) return 1.0;
    return 1.0 - x.dot(y) / (nx * ny);
}

// ---------------------------------------------------------------------------
// Index

void RetrievalIndex::add(PooledEmbedding entry) {
    if (!entry.vector.allFinite()) throw InputError("non-finite embedding for " + entry.key.str());
    if (entries_.empty()) {
        dim_ = static_cast<int>(entry.vector.size());
    } else if (entry.vector.size() != dim_) {
        throw InputError("embedding for " + entry.key.str() + " has dimension " +
                         std::to_string(entry.vector.size()) + ", index has " + std::to_string(dim_));
    }
    const auto [it, inserted] = lookup_.emplace(entry.key.str(), entries_.size());
    if (!inserted) throw InputError("duplicate index key " + entry.key.str());
    entries_.push_back(std::move(entry));
}

std::size_t RetrievalIndex::find(const StemKey& key) const {
    const auto it = lookup_.find(key.str());
    if (it == lookup_.end()) throw InputError("key " + key.str() + " is not in the reference set");
    return it->second;
}

std::vector<double> RetrievalIndex::distances(const Eigen::VectorXf& query) const {
    if (!entries_.empty() && query.size() != dim_) {
        throw InputError("query dimension " + std::to_string(query.size()) + " does not match reference dimension " +
                         std::to_string(dim_));
    }
    std::vector<double> d(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) d[i] = distance(query, entries_[i].vector, metric_);
    return d;
}

// ---------------------------------------------------------------------------
// Embedding extraction

namespace {

bool stem_active(const AudioChunk& audio, const ActivityConfig& cfg) {
    const auto rms = windowed_rms_db(audio, cfg.window_s, cfg.hop_s);
    return !rms.empty() && *std::max_element(rms.begin(), rms.end()) >= cfg.threshold_db;
}

template <typename F>
Eigen::VectorXf average_windows(const AudioChunk& audio, const EmbedOptions& opts, F&& embed_window) {
    const auto windows = chunk_windows(audio, opts.frontend.chunk_samples(), true);
    Eigen::VectorXf sum;
    for (const auto& w : windows) {
        Eigen::VectorXf v = embed_window(w);
        if (sum.size() == 0) {
            sum = std::move(v);
        } else {
            sum += v;
        }
    }
    return sum / static_cast<float>(windows.size());
}

void check_sample_rate(const Corpus& corpus, const FrontendConfig& frontend) {
    if (corpus.sample_rate() != frontend.sample_rate) {
        throw ConfigError("corpus sample rate " + std::to_string(corpus.sample_rate()) +
                          " differs from the frontend rate " + std::to_string(frontend.sample_rate));
    }
}

}  // namespace

RetrievalIndex build_reference_set(const Corpus& corpus, std::span<const std::size_t> tracks,
                                   const ModelState& state, const EmbedOptions& opts) {
    check_sample_rate(corpus, opts.frontend);
    std::vector<std::vector<PooledEmbedding>> per_track(tracks.size());
    parallel_for(tracks.size(), opts.threads, [&](std::size_t i) {
        const MultiTrackChunk chunk = corpus.read_full(tracks[i]);
        for (const auto& stem : chunk.stems) {
            PooledEmbedding e;
            e.key = {chunk.track_id, stem.label};
            e.active = stem_active(stem.audio, opts.activity);
            e.vector = average_windows(stem.audio, opts, [&](const AudioChunk& w) {
                return pool(encode_audio(state.context, w, opts.frontend), opts.pooling);
            });
            per_track[i].push_back(std::move(e));
        }
    });
    RetrievalIndex index(opts.pooling, opts.metric);
    for (auto& entries : per_track) {
        for (auto& e : entries) index.add(std::move(e));
    }
    return index;
}

std::vector<PooledEmbedding> build_queries(const Corpus& corpus, std::span<const std::size_t> tracks,
                                           const ModelState& state, const EmbedOptions& opts) {
    check_sample_rate(corpus, opts.frontend);
    const bool conditioned = state.config.predictor.conditioned();
    std::vector<std::vector<PooledEmbedding>> per_track(tracks.size());
    parallel_for(tracks.size(), opts.threads, [&](std::size_t i) {
        const MultiTrackChunk chunk = corpus.read_full(tracks[i]);
        if (chunk.stems.size() < 2) {
            throw InputError("track " + chunk.track_id + " has a single stem; no query can be formed");
        }
        for (std::size_t s = 0; s < chunk.stems.size(); ++s) {
            const std::string& label = chunk.stems[s].label;
            if (conditioned) state.config.label_index(label);
            std::vector<AudioChunk> others;
            for (std::size_t o = 0; o < chunk.stems.size(); ++o) {
                if (o != s) others.push_back(chunk.stems[o].audio);
            }
            const AudioChunk mix = mix_stems(others);
            PooledEmbedding q;
            q.key = {chunk.track_id, label};
            q.active = stem_active(chunk.stems[s].audio, opts.activity);
            q.vector = average_windows(mix, opts, [&](const AudioChunk& w) {
                const EmbeddingGrid ctx = encode_audio(state.context, w, opts.frontend);
                const EmbeddingGrid pred =
                    predict(state, ctx, conditioned ? std::optional<std::string>(label) : std::nullopt);
                return pool(pred, opts.pooling);
            });
            per_track[i].push_back(std::move(q));
        }
    });
    std::vector<PooledEmbedding> out;
    for (auto& entries : per_track) {
        for (auto& e : entries) out.push_back(std::move(e));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

struct Ranked {
    std::size_t truth = 0;
    std::size_t strictly_closer = 0;
    std::size_t position = 0;  // strictly closer + equal-distance entries earlier in key order
    std::size_t nearest = 0;
};

Ranked rank_query(const PooledEmbedding& query, const RetrievalIndex& index) {
    if (index.size() == 0) throw InputError("empty reference set");
    Ranked r;
    r.truth = index.find(query.key);
    const auto d = index.distances(query.vector);
    const double dt = d[r.truth];
    for (std::size_t i = 0; i < d.size(); ++i) {
        if (d[i] < dt) {
            ++r.strictly_closer;
            ++r.position;
        } else if (d[i] == dt && i < r.truth) {
            ++r.position;
        }
        if (d[i] < d[r.nearest]) r.nearest = i;
    }
    return r;
}

std::size_t clamp_k(int k, std::size_t size) {
    if (k < 1) throw InputError("K must be at least 1");
    if (static_cast<std::size_t>(k) > size) {
        std::cerr << "warning: K=" << k << " exceeds the reference set size " << size << "; clamping\n";
        return size;
    }
    return static_cast<std::size_t>(k);
}

FailureCategory classify(const StemKey& truth, const StemKey& nearest) {
    const bool song = truth.track == nearest.track;
    const bool instrument = truth.label == nearest.label;
    if (song && instrument) return FailureCategory::kBothCorrect;
    if (instrument) return FailureCategory::kRightInstrument;
    if (song) return FailureCategory::kRightSong;
    return FailureCategory::kBothWrong;
}

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double mean(const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double normalized_rank(const Eigen::VectorXf& query, const StemKey& truth, const RetrievalIndex& index) {
    PooledEmbedding q{query, truth, true};
    return static_cast<double>(rank_query(q, index).strictly_closer) / static_cast<double>(index.size());
}

double recall_at_k(std::span<const PooledEmbedding> queries, const RetrievalIndex& index, int k) {
    if (queries.empty()) throw InputError("no queries");
    const std::size_t kk = clamp_k(k, index.size());
    std::size_t hits = 0;
    for (const auto& q : queries) hits += rank_query(q, index).position < kk;
    return static_cast<double>(hits) / static_cast<double>(queries.size());
}

std::string to_string(FailureCategory c) {
    switch (c) {
        case FailureCategory::kBothCorrect: return "both_correct";
        case FailureCategory::kRightInstrument: return "right_instrument_wrong_song";
        case FailureCategory::kRightSong: return "right_song_wrong_instrument";
        case FailureCategory::kBothWrong: return "both_wrong";
    }
    return "unknown";
}

FailureReport categorize_failures(std::span<const PooledEmbedding> queries, const RetrievalIndex& index) {
    FailureReport rep;
    for (auto c : {FailureCategory::kBothCorrect, FailureCategory::kRightInstrument, FailureCategory::kRightSong,
                   FailureCategory::kBothWrong}) {
        rep.counts[c] = 0;
    }
    std::map<std::string, std::size_t> label_pos;
    auto label_slot = [&](const std::string& l) {
        auto it = label_pos.find(l);
        if (it != label_pos.end()) return it->second;
        label_pos.emplace(l, rep.labels.size());
        rep.labels.push_back(l);
        for (auto& row : rep.confusion) row.push_back(0);
        rep.confusion.emplace_back(rep.labels.size(), 0);
        return rep.labels.size() - 1;
    };
    for (const auto& e : index.entries()) label_slot(e.key.label);
    for (const auto& q : queries) {
        const Ranked r = rank_query(q, index);
        QueryResult res;
        res.key = q.key;
        res.position = r.position;
        res.normalized_rank = static_cast<double>(r.strictly_closer) / static_cast<double>(index.size());
        res.nearest = r.nearest;
        const StemKey& nk = index.entry(r.nearest).key;
        res.category = classify(q.key, nk);
        ++rep.counts[res.category];
        const std::size_t row = label_slot(q.key.label);
        const std::size_t col = label_slot(nk.label);
        ++rep.confusion[row][col];
        rep.results.push_back(std::move(res));
    }
    return rep;
}

RetrievalMetrics evaluate_retrieval(std::span<const PooledEmbedding> queries, const RetrievalIndex& index,
                                    const std::vector<int>& ks) {
    if (queries.empty()) throw InputError("no queries");
    RetrievalMetrics m;
    m.queries = queries.size();
    m.references = index.size();
    m.failures = categorize_failures(queries, index);

    std::vector<double> ranks;
    std::map<std::string, std::vector<const QueryResult*>> by_label;
    for (const auto& r : m.failures.results) {
        ranks.push_back(r.normalized_rank);
        by_label[r.key.label].push_back(&r);
    }
    m.rank_mean = mean(ranks);
    m.rank_median = median(ranks);
    for (int k : ks) {
        const std::size_t kk = clamp_k(k, index.size());
        std::size_t hits = 0;
        for (const auto& r : m.failures.results) hits += r.position < kk;
        m.recall[k] = static_cast<double>(hits) / static_cast<double>(m.queries);
    }
    for (const auto& [label, results] : by_label) {
        InstrumentMetrics im;
        im.queries = results.size();
        std::vector<double> lr;
        for (const auto* r : results) lr.push_back(r->normalized_rank);
        im.rank_mean = mean(lr);
        im.rank_median = median(lr);
        for (int k : ks) {
            const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), index.size());
            std::size_t hits = 0;
            for (const auto* r : results) hits += r->position < kk;
            im.recall[k] = static_cast<double>(hits) / static_cast<double>(im.queries);
        }
        m.per_instrument[label] = std::move(im);
    }
    return m;
}

json to_json(const RetrievalMetrics& m) {
    auto recall_json = [](const std::map<int, double>& r) {
        json out = json::object();
        for (const auto& [k, v] : r) out["R@" + std::to_string(k)] = v;
        return out;
    };
    json per = json::object();
    for (const auto& [label, im] : m.per_instrument) {
        per[label] = {{"queries", im.queries},
                      {"recall", recall_json(im.recall)},
                      {"normalized_rank_mean", im.rank_mean},
                      {"normalized_rank_median", im.rank_median}};
    }
    json failures = json::object();
    for (const auto& [c, n] : m.failures.counts) failures[to_string(c)] = n;
    return {{"queries", m.queries},
            {"references", m.references},
            {"recall", recall_json(m.recall)},
            {"normalized_rank_mean", m.rank_mean},
            {"normalized_rank_median", m.rank_median},
            {"per_instrument", per},
            {"failure_categories", failures},
            {"confusion", {{"labels", m.failures.labels}, {"counts", m.failures.confusion}}}};
}

void write_query_csv(const fs::path& path, const RetrievalMetrics& m, const RetrievalIndex& index) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "track,label,position,normalized_rank,category,nearest_track,nearest_label\n";
    char rank[32];
    for (const auto& r : m.failures.results) {
        const StemKey& nk = index.entry(r.nearest).key;
        std::snprintf(rank, sizeof(rank), "%.6f", r.normalized_rank);
        out << r.key.track << ',' << r.key.label << ',' << r.position << ',' << rank << ',' << to_string(r.category)
            << ',' << nk.track << ',' << nk.label << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// Embedding store

namespace {

fs::path with_suffix(const fs::path& stem, const char* ext) { return fs::path(stem.string() + ext); }

}  // namespace

void write_embedding_store(const fs::path& stem, std::span<const PooledEmbedding> entries, int dim, Pooling pooling,
                           Metric metric) {
    json keys = json::array();
    std::ofstream bin(with_suffix(stem, ".f32"), std::ios::binary | std::ios::trunc);
    if (!bin) throw IoError("cannot write " + with_suffix(stem, ".f32").string());
    for (const auto& e : entries) {
        if (e.vector.size() != dim) {
            throw InputError("embedding for " + e.key.str() + " has dimension " + std::to_string(e.vector.size()) +
                             ", store has " + std::to_string(dim));
        }
        bin.write(reinterpret_cast<const char*>(e.vector.data()),
                  static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(dim)));
        keys.push_back({{"track", e.key.track}, {"label", e.key.label}, {"active", e.active}});
    }
    if (!bin) throw IoError("failed writing " + with_suffix(stem, ".f32").string());
    const json side = {{"format", "stemjepa-embeddings"},
                       {"version", 1},
                       {"rows", entries.size()},
                       {"dim", dim},
                       {"dtype", "float32"},
                       {"layout", "row-major"},
                       {"pooling", to_string(pooling)},
                       {"metric", to_string(metric)},
                       {"keys", keys}};
    std::ofstream js(with_suffix(stem, ".json"), std::ios::trunc);
    if (!js) throw IoError("cannot write " + with_suffix(stem, ".json").string());
    js << side.dump(2) << '\n';
}

EmbeddingStore read_embedding_store(const fs::path& stem) {
    const fs::path side_path = with_suffix(stem, ".json");
    std::ifstream js(side_path);
    if (!js) throw IoError("embedding sidecar not found: " + side_path.string());
    json side;
    try {
        side = json::parse(js);
    } catch (const json::exception& e) {
        throw CorruptionError("malformed embedding sidecar " + side_path.string() + ": " + e.what());
    }
    EmbeddingStore store;
    std::size_t rows = 0;
    try {
        store.dim = side.at("dim").get<int>();
        rows = side.at("rows").get<std::size_t>();
        store.pooling = pooling_from_string(side.at("pooling").get<std::string>());
        store.metric = metric_from_string(side.at("metric").get<std::string>());
        const auto& keys = side.at("keys");
        if (keys.size() != rows) throw CorruptionError("sidecar key count does not match rows");
        store.entries.resize(rows);
        for (std::size_t i = 0; i < rows; ++i) {
            store.entries[i].key = {keys[i].at("track").get<std::string>(), keys[i].at("label").get<std::string>()};
            store.entries[i].active = keys[i].value("active", true);
        }
    } catch (const json::exception& e) {
        throw CorruptionError("invalid embedding sidecar " + side_path.string() + ": " + e.what());
    }
    const fs::path bin_path = with_suffix(stem, ".f32");
    std::ifstream bin(bin_path, std::ios::binary);
    if (!bin) throw IoError("embedding matrix not found: " + bin_path.string());
    std::error_code ec;
    const auto bytes = fs::file_size(bin_path, ec);
    if (ec || bytes != rows * static_cast<std::size_t>(store.dim) * sizeof(float)) {
        throw CorruptionError("embedding matrix " + bin_path.string() + " does not hold " + std::to_string(rows) +
                              "x" + std::to_string(store.dim) + " floats");
    }
    for (auto& e : store.entries) {
        e.vector.resize(store.dim);
        bin.read(reinterpret_cast<char*>(e.vector.data()),
                 static_cast<std::streamsize>(sizeof(float) * static_cast<std::size_t>(store.dim)));
    }
    if (!bin) throw CorruptionError("truncated embedding matrix " + bin_path.string());
    return store;
}

RetrievalIndex index_from_store(const EmbeddingStore& store) {
    RetrievalIndex index(store.pooling, store.metric);
    for (const auto& e : store.entries) index.add(e);
    return index;
}

void check_compatible(const EmbeddingStore& queries, const RetrievalIndex& index) {
    if (queries.dim != index.dim()) {
        throw InputError("query dimension " + std::to_string(queries.dim) + " does not match reference dimension " +
                         std::to_string(index.dim()));
    }
    if (queries.pooling != index.pooling()) {
        throw InputError("query pooling " + to_string(queries.pooling) + " differs from reference pooling " +
                         to_string(index.pooling()));
    }
}

}  // namespace stemjepa
