#include "stemjepa/analysis.h"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <set>

#include "stemjepa/error.h"
#include "stemjepa/nn.h"
#include "stemjepa/training.h"

namespace stemjepa {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Temporal alignment

TemporalEmbeddingSequence temporal_sequence(const AudioChunk& audio, const ModelState& state, SequenceRole role,
                                            const std::optional<std::string>& label, const FrontendConfig& frontend) {
    const bool conditioned = state.config.predictor.conditioned();
    if (role == SequenceRole::kPrediction && conditioned && !label) {
        throw InputError("the prediction role needs a conditioning label");
    }
    const auto windows = chunk_windows(audio, frontend.chunk_samples(), false);
    std::vector<MatrixF> parts;
    Eigen::Index rows = 0;
    for (const auto& w : windows) {
        EmbeddingGrid grid;
        if (role == SequenceRole::kTarget) {
            grid = encode_audio(state.target, w, frontend);
        } else {
            grid = predict(state, encode_audio(state.context, w, frontend), conditioned ? label : std::nullopt);
        }
        parts.push_back(frequency_concat(grid));
        rows += parts.back().rows();
    }
    TemporalEmbeddingSequence seq;
    seq.frames.resize(rows, parts.front().cols());
    Eigen::Index r = 0;
    for (const auto& p : parts) {
        seq.frames.middleRows(r, p.rows()) = p;
        r += p.rows();
    }
    if (!seq.frames.allFinite()) throw NumericalError("non-finite temporal embeddings");
    return seq;
}

namespace {

void check_sequences(std::span<const MatrixF> z, std::span<const MatrixF> q) {
    if (z.empty() || z.size() != q.size()) throw InputError("need the same non-zero number of z and q sequences");
    const Eigen::Index m = z[0].rows(), dim = z[0].cols();
    if (m == 0) throw InputError("empty embedding sequence");
    for (std::size_t s = 0; s < z.size(); ++s) {
        if (z[s].rows() != m || q[s].rows() != m) {
            throw InputError("sequence lengths differ across stems (" + std::to_string(m) + " vs " +
                             std::to_string(z[s].rows()) + "/" + std::to_string(q[s].rows()) + ")");
        }
        if (z[s].cols() != dim || q[s].cols() != dim) throw InputError("frame dimensions differ across sequences");
    }
}

Eigen::MatrixXd unit_rows(const MatrixF& x) {
    Eigen::MatrixXd out = x.cast<double>();
    for (Eigen::Index i = 0; i < out.rows(); ++i) {
        const double n = out.row(i).norm();
        if (n > 0.0) out.row(i) /= n;
    }
    return out;
}

}  // namespace

std::vector<double> alignment_similarities(std::span<const MatrixF> z, std::span<const MatrixF> q,
                                           std::span<const int> shifts) {
    check_sequences(z, q);
    const Eigen::Index m = z[0].rows();
    std::vector<double> out(shifts.size(), 0.0);
    for (std::size_t s = 0; s < z.size(); ++s) {
        const Eigen::MatrixXd gram = unit_rows(z[s]) * unit_rows(q[s]).transpose();
        for (std::size_t j = 0; j < shifts.size(); ++j) {
            const Eigen::Index shift = ((shifts[j] % m) + m) % m;
            // Sum of the shifted diagonal, split where the index wraps.
            double acc = gram.diagonal(shift).sum();
            if (shift > 0) acc += gram.diagonal(shift - m).sum();
            out[j] += acc;
        }
    }
    const double norm = static_cast<double>(m) * static_cast<double>(z.size());
    for (auto& v : out) v /= norm;
    return out;
}

double alignment_similarity(std::span<const MatrixF> z, std::span<const MatrixF> q, int shift) {
    const int shifts[] = {shift};
    return alignment_similarities(z, q, shifts)[0];
}

int AlignmentCurve::argmax_offset() const {
    if (values.empty()) throw InputError("empty alignment curve");
    const auto it = std::max_element(values.begin(), values.end());
    return offsets[static_cast<std::size_t>(it - values.begin())];
}

std::vector<int> alignment_offsets(int frames, int max_shift) {
    if (frames <= 0) throw InputError("no frames to shift");
    const int j = max_shift < 0 ? frames / 2 : max_shift;
    std::vector<int> out;
    for (int o = -j; o < j; ++o) out.push_back(o);
    if (out.empty()) out.push_back(0);
    return out;
}

AlignmentCurve alignment_curve(const MultiTrackChunk& track, const ModelState& state, const FrontendConfig& frontend,
                               int max_shift) {
    if (track.stems.size() < 2) throw InputError("track " + track.track_id + " needs at least two stems");
    std::vector<MatrixF> z, q;
    for (std::size_t s = 0; s < track.stems.size(); ++s) {
        std::vector<AudioChunk> others;
        for (std::size_t o = 0; o < track.stems.size(); ++o) {
            if (o != s) others.push_back(track.stems[o].audio);
        }
        z.push_back(temporal_sequence(track.stems[s].audio, state, SequenceRole::kTarget, std::nullopt, frontend).frames);
        q.push_back(temporal_sequence(mix_stems(others), state, SequenceRole::kPrediction, track.stems[s].label,
                                      frontend)
                        .frames);
    }
    AlignmentCurve curve;
    curve.track = track.track_id;
    curve.frames = static_cast<int>(z[0].rows());
    curve.stems = static_cast<int>(z.size());
    curve.frame_seconds = frontend.patch_t * frontend.hop_s;
    curve.offsets = alignment_offsets(curve.frames, max_shift);
    curve.values = alignment_similarities(z, q, curve.offsets);
    return curve;
}

void write_alignment_csv(const fs::path& path, std::span<const AlignmentCurve> curves) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "track,offset,seconds,similarity\n";
    char buf[96];
    for (const auto& c : curves) {
        for (std::size_t i = 0; i < c.offsets.size(); ++i) {
            std::snprintf(buf, sizeof(buf), "%d,%.3f,%.8f", c.offsets[i], c.offsets[i] * c.frame_seconds,
                          c.values[i]);
            out << c.track << ',' << buf << '\n';
        }
    }
    if (!out) throw IoError("failed writing " + path.string());
}

// ---------------------------------------------------------------------------
// k-means

namespace {

// Squared distances [n x k] via |x|^2 - 2 x.c + |c|^2, clamped at zero.
Eigen::MatrixXd squared_distances(const Eigen::MatrixXd& x, const Eigen::VectorXd& x_sq, const Eigen::MatrixXd& c) {
    Eigen::MatrixXd d = -2.0 * (x * c.transpose());
    d.colwise() += x_sq;
    d.rowwise() += c.rowwise().squaredNorm().transpose();
    return d.cwiseMax(0.0);
}

std::size_t weighted_pick(const std::vector<double>& w, std::mt19937_64& rng) {
    const double total = std::accumulate(w.begin(), w.end(), 0.0);
    if (!(total > 0.0)) return std::uniform_int_distribution<std::size_t>(0, w.size() - 1)(rng);
    const double u = std::uniform_real_distribution<double>(0.0, total)(rng);
    double acc = 0.0;
    for (std::size_t i = 0; i < w.size(); ++i) {
        acc += w[i];
        if (u < acc) return i;
    }
    return w.size() - 1;
}

KMeansResult kmeans_once(const Eigen::MatrixXd& x, const Eigen::VectorXd& x_sq, int k, int max_iter,
                         std::mt19937_64& rng) {
    const Eigen::Index n = x.rows();
    Eigen::MatrixXd c(k, x.cols());
    // k-means++ seeding
    std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
    std::size_t first = std::uniform_int_distribution<std::size_t>(0, static_cast<std::size_t>(n) - 1)(rng);
    c.row(0) = x.row(static_cast<Eigen::Index>(first));
    for (int j = 1; j < k; ++j) {
        for (Eigen::Index i = 0; i < n; ++i) {
            d2[static_cast<std::size_t>(i)] =
                std::min(d2[static_cast<std::size_t>(i)], (x.row(i) - c.row(j - 1)).squaredNorm());
        }
        c.row(j) = x.row(static_cast<Eigen::Index>(weighted_pick(d2, rng)));
    }

    std::vector<int> assign(static_cast<std::size_t>(n), -1);
    Eigen::VectorXd best_d(n);
    for (int iter = 0; iter < max_iter; ++iter) {
        const Eigen::MatrixXd d = squared_distances(x, x_sq, c);
        bool changed = false;
        for (Eigen::Index i = 0; i < n; ++i) {
            Eigen::Index a;
            best_d(i) = d.row(i).minCoeff(&a);
            if (assign[static_cast<std::size_t>(i)] != static_cast<int>(a)) {
                assign[static_cast<std::size_t>(i)] = static_cast<int>(a);
                changed = true;
            }
        }
        if (!changed && iter > 0) break;
        Eigen::MatrixXd sum = Eigen::MatrixXd::Zero(k, x.cols());
        std::vector<Eigen::Index> count(static_cast<std::size_t>(k), 0);
        for (Eigen::Index i = 0; i < n; ++i) {
            sum.row(assign[static_cast<std::size_t>(i)]) += x.row(i);
            ++count[static_cast<std::size_t>(assign[static_cast<std::size_t>(i)])];
        }
        for (int j = 0; j < k; ++j) {
            if (count[static_cast<std::size_t>(j)] > 0) {
                c.row(j) = sum.row(j) / static_cast<double>(count[static_cast<std::size_t>(j)]);
                continue;
            }
            // Empty cluster: move it onto the point farthest from its centroid.
            Eigen::Index far;
            best_d.maxCoeff(&far);
            c.row(j) = x.row(far);
            best_d(far) = 0.0;
            assign[static_cast<std::size_t>(far)] = j;
        }
    }
    const Eigen::MatrixXd d = squared_distances(x, x_sq, c);
    KMeansResult res;
    res.assignments.resize(static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::Index a;
        res.inertia += d.row(i).minCoeff(&a);
        res.assignments[static_cast<std::size_t>(i)] = static_cast<int>(a);
    }
    res.centroids = c.cast<float>();
    return res;
}

}  // namespace

KMeansResult kmeans(const MatrixF& points, const KMeansConfig& cfg) {
    if (cfg.k < 1) throw ConfigError("k must be at least 1");
    if (cfg.max_iterations < 1 || cfg.restarts < 1) throw ConfigError("k-means iterations and restarts must be >= 1");
    if (points.rows() < cfg.k) {
        throw InputError("k=" + std::to_string(cfg.k) + " exceeds the " + std::to_string(points.rows()) +
                         " available vectors");
    }
    if (!points.allFinite()) throw InputError("non-finite vectors passed to k-means");
    const Eigen::MatrixXd x = points.cast<double>();
    const Eigen::VectorXd x_sq = x.rowwise().squaredNorm();
    KMeansResult best;
    best.inertia = std::numeric_limits<double>::infinity();
    for (int r = 0; r < cfg.restarts; ++r) {
        std::seed_seq seq{cfg.seed, static_cast<std::uint64_t>(r)};
        std::mt19937_64 rng(seq);
        KMeansResult res = kmeans_once(x, x_sq, cfg.k, cfg.max_iterations, rng);
        if (res.inertia < best.inertia) best = std::move(res);
    }
    return best;
}

// ---------------------------------------------------------------------------
// Co-occurrence

std::int64_t CooccurrenceMatrix::total() const {
    std::int64_t t = 0;
    for (std::size_t a = 0; a < counts.size(); ++a) {
        for (std::size_t b = a; b < counts[a].size(); ++b) t += counts[a][b];
    }
    return t;
}

CooccurrenceMatrix cooccurrence_from_assignments(std::span<const int> assignments, std::span<const int> labels,
                                                 const std::vector<std::string>& vocabulary, int k) {
    if (assignments.size() != labels.size()) throw InputError("assignment and label counts differ");
    const std::size_t v = vocabulary.size();
    std::vector<std::vector<std::int64_t>> members(static_cast<std::size_t>(k), std::vector<std::int64_t>(v, 0));
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (assignments[i] < 0 || assignments[i] >= k) throw InputError("cluster id out of range");
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= v) throw InputError("label id out of range");
        ++members[static_cast<std::size_t>(assignments[i])][static_cast<std::size_t>(labels[i])];
    }
    CooccurrenceMatrix out;
    out.vocabulary = vocabulary;
    out.k = k;
    out.assignments.assign(assignments.begin(), assignments.end());
    out.counts.assign(v, std::vector<std::int64_t>(v, 0));
    for (const auto& m : members) {
        for (std::size_t a = 0; a < v; ++a) {
            out.counts[a][a] += m[a] * (m[a] - 1) / 2;
            for (std::size_t b = a + 1; b < v; ++b) {
                out.counts[a][b] += m[a] * m[b];
                out.counts[b][a] += m[a] * m[b];
            }
        }
    }
    return out;
}

CooccurrenceMatrix cluster_cooccurrence(const MatrixF& points, std::span<const int> labels,
                                        const std::vector<std::string>& vocabulary, const KMeansConfig& cfg) {
    if (static_cast<std::size_t>(points.rows()) != labels.size()) throw InputError("one label per vector required");
    const KMeansResult km = kmeans(points, cfg);
    return cooccurrence_from_assignments(km.assignments, labels, vocabulary, cfg.k);
}

json to_json(const CooccurrenceMatrix& m, int top_n) {
    struct Pair {
        std::size_t a, b;
        std::int64_t n;
    };
    std::vector<Pair> pairs;
    for (std::size_t a = 0; a < m.counts.size(); ++a) {
        for (std::size_t b = a; b < m.counts.size(); ++b) {
            if (m.counts[a][b] > 0) pairs.push_back({a, b, m.counts[a][b]});
        }
    }
    std::stable_sort(pairs.begin(), pairs.end(), [](const Pair& x, const Pair& y) { return x.n > y.n; });
    if (top_n >= 0 && pairs.size() > static_cast<std::size_t>(top_n)) pairs.resize(static_cast<std::size_t>(top_n));
    json top = json::array();
    for (const auto& p : pairs) top.push_back({{"a", m.vocabulary[p.a]}, {"b", m.vocabulary[p.b]}, {"count", p.n}});
    return {{"k", m.k}, {"vocabulary", m.vocabulary}, {"counts", m.counts}, {"total", m.total()}, {"top", top}};
}

void write_cooccurrence_csv(const fs::path& path, const CooccurrenceMatrix& m) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "label";
    for (const auto& v : m.vocabulary) out << ',' << v;
    out << '\n';
    for (std::size_t a = 0; a < m.counts.size(); ++a) {
        out << m.vocabulary[a];
        for (auto c : m.counts[a]) out << ',' << c;
        out << '\n';
    }
    if (!out) throw IoError("failed writing " + path.string());
}

std::vector<LabeledSegment> read_segments(const fs::path& jsonl) {
    std::ifstream in(jsonl);
    if (!in) throw IoError("segment file not found: " + jsonl.string());
    std::vector<LabeledSegment> out;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const json j = json::parse(line);
            LabeledSegment s;
            fs::path clip = j.at("clip").get<std::string>();
            s.clip = clip.is_absolute() ? clip : jsonl.parent_path() / clip;
            s.start = j.at("start").get<double>();
            s.end = j.at("end").get<double>();
            s.label = j.at("label").get<std::string>();
            if (!(s.end > s.start)) throw InputError("segment end must follow its start");
            out.push_back(std::move(s));
        } catch (const json::exception& e) {
            throw InputError(jsonl.string() + ":" + std::to_string(line_no) + ": " + e.what());
        } catch (const InputError& e) {
            throw InputError(jsonl.string() + ":" + std::to_string(line_no) + ": " + e.what());
        }
    }
    return out;
}

namespace {

AudioChunk load_clip(const fs::path& path, const FrontendConfig& frontend) {
    AudioChunk a = read_wav(path);
    if (a.sample_rate != frontend.sample_rate) a = resample(a, frontend.sample_rate);
    return a;
}

}  // namespace

LabeledVectors labeled_embeddings(std::span<const LabeledSegment> segments, const ModelState& state,
                                  const FrontendConfig& frontend, const std::string& unit) {
    if (unit != "patch" && unit != "frame") throw ConfigError("cluster unit must be patch or frame");
    LabeledVectors out;
    std::set<std::string> vocab;
    std::vector<std::string> clips;
    std::map<std::string, std::vector<const LabeledSegment*>> by_clip;
    for (const auto& s : segments) {
        vocab.insert(s.label);
        auto& list = by_clip[s.clip.string()];
        if (list.empty()) clips.push_back(s.clip.string());
        list.push_back(&s);
    }
    out.vocabulary.assign(vocab.begin(), vocab.end());
    std::map<std::string, int> vocab_id;
    for (std::size_t i = 0; i < out.vocabulary.size(); ++i) vocab_id[out.vocabulary[i]] = static_cast<int>(i);

    const double col_seconds = frontend.patch_t * frontend.hop_s;
    std::vector<Eigen::VectorXf> rows;
    for (const auto& clip : clips) {
        const AudioChunk audio = load_clip(clip, frontend);
        const auto windows = chunk_windows(audio, frontend.chunk_samples(), true);
        const auto& segs = by_clip[clip];
        for (std::size_t w = 0; w < windows.size(); ++w) {
            const EmbeddingGrid grid = encode_audio(state.context, windows[w], frontend);
            const MatrixF frames = frequency_concat(grid);
            for (int t = 0; t < grid.time_patches; ++t) {
                const double centre = static_cast<double>(w) * frontend.chunk_duration + (t + 0.5) * col_seconds;
                const LabeledSegment* hit = nullptr;
                for (const auto* s : segs) {
                    if (s->start <= centre && centre < s->end) {
                        hit = s;
                        break;
                    }
                }
                if (!hit) continue;
                const int id = vocab_id.at(hit->label);
                if (unit == "frame") {
                    rows.push_back(frames.row(t).transpose());
                    out.labels.push_back(id);
                } else {
                    for (int f = 0; f < grid.freq_patches; ++f) {
                        rows.push_back(grid.vectors.row(token_index(f, t, grid.freq_patches)).transpose());
                        out.labels.push_back(id);
                    }
                }
            }
        }
    }
    if (rows.empty()) throw InputError("no embedding falls inside a labeled segment");
    out.points.resize(static_cast<Eigen::Index>(rows.size()), rows.front().size());
    for (std::size_t i = 0; i < rows.size(); ++i) out.points.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
    return out;
}

// ---------------------------------------------------------------------------
// Global embeddings

GlobalEmbedding global_embedding(const AudioChunk& clip, const ModelState& state, const FrontendConfig& frontend,
                                 const std::string& id) {
    if (clip.empty()) throw InputError("empty clip" + (id.empty() ? std::string() : " " + id));
    const auto windows = chunk_windows(clip, frontend.chunk_samples(), true);
    Eigen::VectorXf sum;
    for (const auto& w : windows) {
        Eigen::VectorXf v = freq_concat_pool(encode_audio(state.context, w, frontend));
        if (sum.size() == 0) {
            sum = std::move(v);
        } else {
            sum += v;
        }
    }
    return {sum / static_cast<float>(windows.size()), id};
}

// ---------------------------------------------------------------------------
// Probe

ProbeDataset make_probe_dataset(const std::vector<MatrixF>& features,
                                const std::vector<std::vector<std::vector<std::string>>>& labels, bool multilabel) {
    if (features.size() != 3 || labels.size() != 3) throw InputError("expected train, valid and test splits");
    const char* names[] = {"train", "valid", "test"};
    std::set<std::string> train_classes;
    for (std::size_t s = 0; s < 3; ++s) {
        if (static_cast<std::size_t>(features[s].rows()) != labels[s].size()) {
            throw InputError(std::string(names[s]) + " split has mismatched feature and label counts");
        }
        if (labels[s].empty()) throw InputError(std::string(names[s]) + " split is empty");
        if (s > 0 && features[s].cols() != features[0].cols()) throw InputError("feature dimensions differ across splits");
    }
    for (const auto& row : labels[0]) {
        if (!multilabel && row.size() != 1) throw InputError("multiclass rows need exactly one label");
        train_classes.insert(row.begin(), row.end());
    }
    ProbeDataset ds;
    ds.multilabel = multilabel;
    ds.classes.assign(train_classes.begin(), train_classes.end());
    std::map<std::string, int> id;
    for (std::size_t i = 0; i < ds.classes.size(); ++i) id[ds.classes[i]] = static_cast<int>(i);
    ProbeSplit* splits[] = {&ds.train, &ds.valid, &ds.test};
    for (std::size_t s = 0; s < 3; ++s) {
        splits[s]->x = features[s];
        for (const auto& row : labels[s]) {
            if (!multilabel && row.size() != 1) throw InputError("multiclass rows need exactly one label");
            std::vector<int> ids;
            for (const auto& l : row) {
                const auto it = id.find(l);
                if (it == id.end()) {
                    throw InputError("label '" + l + "' in the " + names[s] + " split does not occur in train");
                }
                ids.push_back(it->second);
            }
            splits[s]->labels.push_back(std::move(ids));
        }
    }
    return ds;
}

double roc_auc(std::span<const double> scores, std::span<const int> truth) {
    if (scores.size() != truth.size()) throw InputError("score and label counts differ");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // Mann-Whitney statistic with average ranks for ties.
    double rank_sum = 0.0;
    std::size_t pos = 0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + 1 + j);
        for (std::size_t t = i; t < j; ++t) {
            if (truth[order[t]]) {
                rank_sum += avg;
                ++pos;
            }
        }
        i = j;
    }
    const std::size_t neg = scores.size() - pos;
    if (pos == 0 || neg == 0) return std::numeric_limits<double>::quiet_NaN();
    const double p = static_cast<double>(pos);
    return (rank_sum - p * (p + 1) / 2.0) / (p * static_cast<double>(neg));
}

double average_precision(std::span<const double> scores, std::span<const int> truth) {
    if (scores.size() != truth.size()) throw InputError("score and label counts differ");
    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    const auto total_pos = static_cast<double>(std::count_if(truth.begin(), truth.end(), [](int t) { return t != 0; }));
    if (total_pos == 0) return std::numeric_limits<double>::quiet_NaN();
    double ap = 0.0, tp = 0.0, seen = 0.0, prev_recall = 0.0;
    for (std::size_t i = 0; i < order.size();) {
        std::size_t j = i;
        while (j < order.size() && scores[order[j]] == scores[order[i]]) {
            tp += truth[order[j]] != 0;
            ++j;
        }
        seen = static_cast<double>(j);
        const double recall = tp / total_pos;
        ap += (recall - prev_recall) * (tp / seen);
        prev_recall = recall;
        i = j;
    }
    return ap;
}

namespace {

class ProbeNet {
public:
    ProbeNet(int in, int hidden, int out, nn::Rng& rng)
        : fc1_("probe.fc1", in, hidden, rng), fc2_("probe.fc2", hidden, out, rng) {}

    MatrixF forward(const MatrixF& x, MatrixF* pre) const {
        MatrixF h = fc1_.forward(x);
        MatrixF logits = fc2_.forward(nn::relu(h));
        if (pre) *pre = std::move(h);
        return logits;
    }

    void backward(const MatrixF& x, const MatrixF& pre, const MatrixF& dlogits) {
        const MatrixF dh = fc2_.backward(nn::relu(pre), dlogits);
        fc1_.backward(x, nn::relu_backward(pre, dh));
    }

    nn::ParamRefs<float> params() {
        nn::ParamRefs<float> out;
        fc1_.collect(out);
        fc2_.collect(out);
        return out;
    }

private:
    nn::Linear<float> fc1_, fc2_;
};

MatrixF targets_for(const ProbeSplit& split, std::span<const Eigen::Index> rows, int classes) {
    MatrixF y = MatrixF::Zero(static_cast<Eigen::Index>(rows.size()), classes);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (int c : split.labels[static_cast<std::size_t>(rows[i])]) y(static_cast<Eigen::Index>(i), c) = 1.0f;
    }
    return y;
}

// Mean loss over rows; `grad` receives dL/dlogits.
double probe_loss(const MatrixF& logits, const MatrixF& y, bool multilabel, MatrixF* grad) {
    const auto n = static_cast<double>(logits.rows());
    double loss = 0.0;
    if (grad) grad->resize(logits.rows(), logits.cols());
    for (Eigen::Index r = 0; r < logits.rows(); ++r) {
        if (multilabel) {
            for (Eigen::Index c = 0; c < logits.cols(); ++c) {
                const double z = logits(r, c), t = y(r, c);
                loss += std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z)));
                if (grad) (*grad)(r, c) = static_cast<float>((1.0 / (1.0 + std::exp(-z)) - t) / n);
            }
        } else {
            const double mx = logits.row(r).maxCoeff();
            const Eigen::ArrayXd e = (logits.row(r).cast<double>().array() - mx).exp();
            const double lse = std::log(e.sum()) + mx;
            Eigen::Index c;
            y.row(r).maxCoeff(&c);
            loss += lse - logits(r, c);
            if (grad) {
                grad->row(r) = (e / e.sum()).cast<float>().matrix().transpose();
                (*grad)(r, c) -= 1.0f;
                grad->row(r) /= static_cast<float>(n);
            }
        }
    }
    return loss / n;
}

double split_metric(const MatrixF& logits, const ProbeSplit& split, bool multilabel, int classes, double* ap_out) {
    if (!multilabel) {
        std::size_t correct = 0;
        for (Eigen::Index r = 0; r < logits.rows(); ++r) {
            Eigen::Index c;
            logits.row(r).maxCoeff(&c);
            correct += static_cast<int>(c) == split.labels[static_cast<std::size_t>(r)][0];
        }
        return static_cast<double>(correct) / static_cast<double>(logits.rows());
    }
    double auc_sum = 0.0, ap_sum = 0.0;
    int used = 0;
    for (int c = 0; c < classes; ++c) {
        std::vector<double> s(static_cast<std::size_t>(logits.rows()));
        std::vector<int> t(s.size(), 0);
        for (Eigen::Index r = 0; r < logits.rows(); ++r) {
            s[static_cast<std::size_t>(r)] = logits(r, c);
            const auto& l = split.labels[static_cast<std::size_t>(r)];
            t[static_cast<std::size_t>(r)] = std::find(l.begin(), l.end(), c) != l.end();
        }
        const double auc = roc_auc(s, t);
        if (std::isnan(auc)) continue;
        auc_sum += auc;
        ap_sum += average_precision(s, t);
        ++used;
    }
    if (ap_out) *ap_out = used ? ap_sum / used : 0.0;
    return used ? auc_sum / used : 0.0;
}

}  // namespace

ProbeReport probe_train_eval(const ProbeDataset& data, const ProbeOptions& opts) {
    if (opts.hidden < 1 || opts.batch_size < 1 || opts.max_epochs < 1 || opts.patience < 1 || !(opts.lr > 0)) {
        throw ConfigError("invalid probe options");
    }
    const int classes = static_cast<int>(data.classes.size());
    if (classes < 2 && !data.multilabel) throw InputError("a multiclass probe needs at least two classes");
    const Eigen::Index dim = data.train.x.cols();

    Eigen::RowVectorXf mu = Eigen::RowVectorXf::Zero(dim), inv_sd = Eigen::RowVectorXf::Ones(dim);
    if (opts.standardize) {
        mu = data.train.x.colwise().mean();
        const MatrixF centered = data.train.x.rowwise() - mu;
        const Eigen::RowVectorXf var = centered.array().square().colwise().mean();
        inv_sd = (var.array().sqrt() + 1e-6f).inverse();
    }
    auto prepare = [&](const MatrixF& x) -> MatrixF {
        return ((x.rowwise() - mu).array().rowwise() * inv_sd.array()).matrix();
    };
    const MatrixF xtrain = prepare(data.train.x), xvalid = prepare(data.valid.x), xtest = prepare(data.test.x);

    nn::Rng rng(opts.seed);
    ProbeNet net(static_cast<int>(dim), opts.hidden, classes, rng);
    auto params = net.params();
    AdamW<float> adam(0.9, 0.999, 1e-8, opts.weight_decay);
    adam.init(params);

    std::vector<Eigen::Index> all(static_cast<std::size_t>(xtrain.rows()));
    std::iota(all.begin(), all.end(), 0);
    const MatrixF ytrain = targets_for(data.train, all, classes);
    std::vector<Eigen::Index> all_valid(static_cast<std::size_t>(xvalid.rows()));
    std::iota(all_valid.begin(), all_valid.end(), 0);
    const MatrixF yvalid = targets_for(data.valid, all_valid, classes);

    ProbeReport rep;
    rep.multilabel = data.multilabel;
    std::vector<MatrixF> best;
    double best_metric = -std::numeric_limits<double>::infinity();
    double best_loss = std::numeric_limits<double>::infinity();
    int since_best = 0;
    std::vector<Eigen::Index> order = all;
    for (int epoch = 0; epoch < opts.max_epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(opts.batch_size)) {
            const std::size_t e = std::min(order.size(), b + static_cast<std::size_t>(opts.batch_size));
            const std::span<const Eigen::Index> rows(order.data() + b, e - b);
            MatrixF xb(static_cast<Eigen::Index>(rows.size()), dim);
            for (std::size_t i = 0; i < rows.size(); ++i) xb.row(static_cast<Eigen::Index>(i)) = xtrain.row(rows[i]);
            const MatrixF yb = targets_for(data.train, rows, classes);
            for (auto* p : params) p->zero_grad();
            MatrixF pre, grad;
            const MatrixF logits = net.forward(xb, &pre);
            probe_loss(logits, yb, data.multilabel, &grad);
            net.backward(xb, pre, grad);
            adam.step(params, opts.lr, 0.0);
        }
        rep.train_loss.push_back(probe_loss(net.forward(xtrain, nullptr), ytrain, data.multilabel, nullptr));
        const MatrixF valid_logits = net.forward(xvalid, nullptr);
        const double metric = split_metric(valid_logits, data.valid, data.multilabel, classes, nullptr);
        const double valid_loss = probe_loss(valid_logits, yvalid, data.multilabel, nullptr);
        rep.valid_metric.push_back(metric);
        rep.epochs = epoch + 1;
        // Ties on the metric go to the lower validation loss.
        if (metric > best_metric || (metric == best_metric && valid_loss < best_loss)) {
            best_metric = metric;
            best_loss = valid_loss;
            rep.best_epoch = epoch + 1;
            since_best = 0;
            best.clear();
            for (auto* p : params) best.push_back(p->value);
        } else if (++since_best >= opts.patience) {
            break;
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->value = best[i];
    const MatrixF test_logits = net.forward(xtest, nullptr);
    if (data.multilabel) {
        rep.test_roc_auc = split_metric(test_logits, data.test, true, classes, &rep.test_average_precision);
    } else {
        rep.test_accuracy = split_metric(test_logits, data.test, false, classes, nullptr);
    }
    return rep;
}

json to_json(const ProbeReport& r) {
    json j = {{"multilabel", r.multilabel},
              {"epochs", r.epochs},
              {"best_epoch", r.best_epoch},
              {"train_loss", r.train_loss},
              {"valid_metric", r.valid_metric}};
    if (r.multilabel) {
        j["test_roc_auc"] = r.test_roc_auc;
        j["test_average_precision"] = r.test_average_precision;
    } else {
        j["test_accuracy"] = r.test_accuracy;
    }
    return j;
}

}  // namespace stemjepa
