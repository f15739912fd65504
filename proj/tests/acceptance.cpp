// Acceptance runner: checks every criterion and prints one PASS/FAIL line each.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <iterator>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "stemjepa/analysis.h"
#include "stemjepa/commands.h"
#include "stemjepa/dataio.h"
#include "stemjepa/error.h"
#include "stemjepa/frontend.h"
#include "stemjepa/retrieval.h"
#include "stemjepa/training.h"

using namespace stemjepa;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

// Failed condition with a message; collected per criterion.
struct Checker {
    std::vector<std::string> failures;
    void expect(bool ok, const std::string& what) {
        if (!ok) failures.push_back(what);
    }
    Outcome done(std::string detail) const {
        if (failures.empty()) return {true, std::move(detail)};
        std::string msg = detail.empty() ? "" : detail + "; ";
        msg += "failed: " + failures.front();
        if (failures.size() > 1) msg += " (+" + std::to_string(failures.size() - 1) + " more)";
        return {false, msg};
    }
};

std::string fmt(double v, int digits = 4) {
    std::ostringstream os;
    os.precision(digits);
    os << v;
    return os.str();
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

MatrixF random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    MatrixF m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<float>(u(rng));
    return m;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("missing " + p.string());
    return json::parse(in);
}

std::vector<json> read_jsonl(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("missing " + p.string());
    std::vector<json> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty()) out.push_back(json::parse(line));
    }
    return out;
}

// ---------------------------------------------------------------------------

Outcome token_arithmetic() {
    Checker c;
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<float> u(-0.1f, 0.1f);
    AudioChunk a;
    a.sample_rate = 16000;
    a.samples.resize(samples_for(8.0, 16000));
    for (auto& s : a.samples) s = u(rng);
    const auto t0 = std::chrono::steady_clock::now();
    const FrontendConfig cfg;
    const LogMelSpectrogram mel = compute_log_mel(a, cfg);
    const PatchGrid g = patchify(mel, 16, 16);
    const double secs = seconds_since(t0);
    c.expect(mel.values.rows() == 80, "80 mel bands");
    c.expect(mel.n_frames() == 800, "800 frames");
    c.expect(g.tokens() == 250, "250 tokens");
    c.expect(g.patches.rows() == 250 && g.patches.cols() == 256, "250 x 256 patch matrix");
    c.expect(cfg.tokens_per_chunk() == 250, "tokens_per_chunk");
    c.expect(secs < 1.0, "runtime under 1 s");
    return c.done(std::to_string(mel.values.rows()) + "x" + std::to_string(mel.n_frames()) + " -> " +
                  std::to_string(g.tokens()) + " tokens in " + fmt(secs, 3) + " s");
}

nn::Matrix<double> unit_rows(nn::Matrix<double> m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) m.row(r).normalize();
    return m;
}

Outcome loss_identities() {
    Checker c;
    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd;
    double worst_identity = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const int k = 1 + static_cast<int>(rng() % 30);
        const int d = 2 + static_cast<int>(rng() % 30);
        const nn::Matrix<double> a = unit_rows(nn::Matrix<double>::NullaryExpr(k, d, [&] { return nd(rng); }));
        // Orthogonal partner: Gram-Schmidt against a random vector, row by row.
        nn::Matrix<double> b(k, d);
        for (int r = 0; r < k; ++r) {
            Eigen::RowVectorXd v = Eigen::RowVectorXd::NullaryExpr(d, [&] { return nd(rng); });
            v -= v.dot(a.row(r)) * a.row(r);
            b.row(r) = v.normalized();
        }
        const nn::Matrix<double> neg = -a;
        worst_identity = std::max({worst_identity, std::abs(jepa_loss<double>(a, a)),
                                   std::abs(jepa_loss<double>(a, b) - 2.0), std::abs(jepa_loss<double>(a, neg) - 4.0)});
    }
    c.expect(worst_identity <= 1e-9, "identities within 1e-9 (worst " + fmt(worst_identity) + ")");
    double lo = 4.0, hi = 0.0;
    for (int i = 0; i < 10000; ++i) {
        const int k = 1 + static_cast<int>(rng() % 20);
        const int d = 1 + static_cast<int>(rng() % 16);
        const MatrixF p = random_matrix(k, d, rng, -5, 5);
        const MatrixF t = random_matrix(k, d, rng, -5, 5);
        double l = 0.0;
        try {
            l = jepa_loss<float>(p, t);
        } catch (const NumericalError&) {
            continue;  // zero-norm row, guarded
        }
        lo = std::min(lo, l);
        hi = std::max(hi, l);
    }
    c.expect(lo >= 0.0 && hi <= 4.0, "0 <= loss <= 4 on random grids");
    return c.done("identity error " + fmt(worst_identity, 2) + ", random range [" + fmt(lo) + ", " + fmt(hi) + "]");
}

// d = 8, K = 4 model for the gradient check.
ModelConfig micro_model(PredictorKind kind) {
    ModelConfig m;
    m.encoder.depth = 2;
    m.encoder.width = 8;
    m.encoder.heads = 2;
    m.encoder.patch_dim = 16;
    m.encoder.freq_patches = 2;
    m.encoder.max_time_patches = 2;
    m.predictor.kind = kind;
    m.predictor.mlp_layers = 3;
    m.predictor.hidden = 16;
    m.predictor.label_dim = 4;
    m.predictor.depth = 1;
    m.predictor.heads = 2;
    return m;
}

double finite_difference_worst(PredictorKind kind, std::uint64_t seed, int* checked) {
    using MatD = nn::Matrix<double>;
    BasicModelState<double> s(micro_model(kind), seed);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> nd(0.0, 0.3);
    for (auto* p : s.target.params()) {
        for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] += nd(rng);
    }
    const int k = 4;
    const MatD ctx = MatD::NullaryExpr(8, 16, [&] { return nd(rng) * 3.0; });
    const MatD tgt = MatD::NullaryExpr(8, 16, [&] { return nd(rng) * 3.0; });
    const std::vector<int> labels{1, 3};
    const auto loss = [&] {
        const MatD z = s.context.forward(ctx, k, nullptr);
        return jepa_loss<double>(s.predictor.forward(z, k, labels, nullptr), s.target.forward(tgt, k, nullptr));
    };
    for (auto* p : s.all()) p->zero_grad();
    Encoder<double>::Cache ec;
    Predictor<double>::Cache pc;
    const MatD z = s.context.forward(ctx, k, &ec);
    const MatD pred = s.predictor.forward(z, k, labels, &pc);
    MatD g;
    jepa_loss<double>(pred, s.target.forward(tgt, k, nullptr), &g);
    s.context.backward(ec, s.predictor.backward(pc, g, k, labels), k);

    double worst = 0.0;
    const double h = 1e-6;
    for (auto* p : s.trainable()) {
        for (int trial = 0; trial < 4; ++trial) {
            const Eigen::Index i = static_cast<Eigen::Index>(rng() % static_cast<std::uint64_t>(p->value.size()));
            double& x = p->value.data()[i];
            const double saved = x;
            x = saved + h;
            const double up = loss();
            x = saved - h;
            const double down = loss();
            x = saved;
            const double numeric = (up - down) / (2.0 * h);
            const double analytic = p->grad.data()[i];
            const double scale = std::max(std::abs(numeric), std::abs(analytic));
            if (scale < 1e-7) continue;
            ++*checked;
            worst = std::max(worst, std::abs(numeric - analytic) / scale);
        }
    }
    return worst;
}

ModelConfig small_model() {
    ModelConfig m;
    m.encoder = EncoderConfig::tiny();
    m.encoder.depth = 1;
    m.encoder.width = 16;
    m.encoder.heads = 2;
    m.predictor.hidden = 32;
    m.predictor.label_dim = 8;
    return m;
}

PairBatch random_batch(const ModelConfig& m, int batch, int tokens, std::mt19937_64& rng) {
    PairBatch b;
    b.tokens = tokens;
    b.context = random_matrix(batch * tokens, m.encoder.patch_dim, rng, -2, 2);
    b.target = random_matrix(batch * tokens, m.encoder.patch_dim, rng, -2, 2);
    for (int i = 0; i < batch; ++i) b.labels.push_back(i % 4);
    return b;
}

Outcome gradient_contract() {
    Checker c;
    double worst = 0.0;
    int checked = 0;
    for (auto kind : {PredictorKind::kMlpConditioned, PredictorKind::kMlpUnconditioned, PredictorKind::kTransformer}) {
        for (std::uint64_t seed : {1u, 2u, 3u}) worst = std::max(worst, finite_difference_worst(kind, seed, &checked));
    }
    c.expect(worst <= 1e-4, "finite-difference relative error <= 1e-4 (worst " + fmt(worst) + ")");
    c.expect(checked > 100, "enough coordinates checked");

    const ModelConfig m = small_model();
    TrainConfig t;
    t.total_steps = 100;
    t.warmup_steps = 10;
    t.batch_size = 2;
    Trainer tr(ModelState(m, 1), t, FrontendConfig{});
    std::mt19937_64 rng(4);
    double accumulated = 0.0;
    for (int step = 0; step < 100; ++step) {
        tr.train_step(random_batch(m, 2, 20, rng));
        for (auto* p : tr.state().target.params()) accumulated += static_cast<double>(p->grad.cwiseAbs().sum());
    }
    c.expect(accumulated == 0.0, "target gradient exactly zero");
    return c.done("worst rel. error " + fmt(worst, 3) + " over " + std::to_string(checked) +
                  " coordinates; target |grad| sum " + fmt(accumulated));
}

Outcome ema_algebra() {
    Checker c;
    ModelState state(small_model(), 1);
    for (auto* p : state.context.params()) p->value.array() += 1.0f;
    std::vector<MatrixF> before;
    for (auto* p : state.target.params()) before.push_back(p->value);
    ema_update(state, 1.0);
    auto dst = state.target.params();
    auto src = state.context.params();
    bool keep = true, copy = true;
    for (std::size_t i = 0; i < dst.size(); ++i) keep = keep && dst[i]->value == before[i];
    ema_update(state, 0.0);
    for (std::size_t i = 0; i < dst.size(); ++i) copy = copy && dst[i]->value == src[i]->value;
    c.expect(keep, "tau = 1 keeps theta-bar");
    c.expect(copy, "tau = 0 copies theta");

    c.expect(ema_schedule(0, 5000, 0.996, 1.0) == 0.996, "schedule start");
    c.expect(ema_schedule(5000, 5000, 0.996, 1.0) == 1.0, "schedule end");
    c.expect(ema_schedule(2500, 5000, 0.996, 1.0) == 0.998, "schedule midpoint");

    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> tau(0.0, 1.0);
    bool shapes = true;
    int total = 0;
    for (int round = 0; round < 5; ++round) {
        const int steps = 1 + static_cast<int>(rng() % 50);
        for (int s = 0; s < steps; ++s) {
            for (auto* p : src) p->value.array() += 0.01f;
            ema_update(state, tau(rng));
        }
        total += steps;
        for (std::size_t i = 0; i < dst.size(); ++i) {
            shapes = shapes && dst[i]->value.rows() == src[i]->value.rows() &&
                     dst[i]->value.cols() == src[i]->value.cols();
        }
    }
    c.expect(shapes && src.size() == dst.size(), "theta-bar shape-identical to theta");
    return c.done("endpoints exact, midpoint 0.998 exact, shapes equal after " + std::to_string(total) + " updates of " +
                  std::to_string(dst.size()) + " tensors");
}

Outcome sampler_laws() {
    Checker c;
    const auto labels = default_labels();
    const auto tone = [](double hz, double amp) {
        AudioChunk a;
        a.sample_rate = 16000;
        a.samples.resize(800);
        for (std::size_t i = 0; i < a.samples.size(); ++i) {
            a.samples[i] = static_cast<float>(amp * std::sin(2.0 * 3.141592653589793 * hz * i / 16000.0));
        }
        return a;
    };
    MultiTrackChunk chunk;
    for (int i = 0; i < 4; ++i) chunk.stems.push_back({tone(200.0 + 100.0 * i, 0.3), labels[static_cast<std::size_t>(i)]});
    const ActivityMask mask = detect_active_stems(chunk, -50.0);
    c.expect(mask.active.size() == 4, "four active stems");
    DataRng rng(12345);
    const int n = 100000;
    std::array<int, 4> targets{}, sizes{};
    int overlap = 0;
    for (int i = 0; i < n; ++i) {
        const auto pair = std::get<ContextTargetPair>(sample_context_target(chunk, mask, rng));
        ++targets[static_cast<std::size_t>(pair.target_index)];
        ++sizes[pair.context_indices.size()];
        overlap += std::find(pair.context_indices.begin(), pair.context_indices.end(), pair.target_index) !=
                   pair.context_indices.end();
    }
    double worst_t = 0.0, worst_c = 0.0;
    for (int t : targets) worst_t = std::max(worst_t, std::abs(t / double(n) - 0.25));
    for (int k = 1; k <= 3; ++k) worst_c = std::max(worst_c, std::abs(sizes[static_cast<std::size_t>(k)] / double(n) - 1.0 / 3.0));
    c.expect(worst_t <= 0.01, "target uniform within 1%");
    c.expect(sizes[0] == 0 && worst_c <= 0.01, "|C| uniform over {1,2,3} within 1%");
    c.expect(overlap == 0, "t not in C");

    int resample = 0, small_draws = 0;
    AudioChunk zero;
    zero.sample_rate = 16000;
    zero.samples.assign(800, 0.0f);
    for (int active = 0; active < 2; ++active) {
        MultiTrackChunk few;
        for (int i = 0; i < 4; ++i) few.stems.push_back({i < active ? tone(300.0, 0.3) : zero, labels[static_cast<std::size_t>(i)]});
        const ActivityMask m = detect_active_stems(few, -50.0);
        for (int i = 0; i < 1000; ++i) {
            ++small_draws;
            resample += std::holds_alternative<NeedsResample>(sample_context_target(few, m, rng));
        }
    }
    c.expect(resample == small_draws, "|A| < 2 always NeedsResample");
    return c.done(std::to_string(n) + " draws: target dev " + fmt(worst_t, 3) + ", |C| dev " + fmt(worst_c, 3) +
                  ", t in C " + std::to_string(overlap) + ", resample " + std::to_string(resample) + "/" +
                  std::to_string(small_draws));
}

Outcome retrieval_oracle() {
    Checker c;
    std::mt19937_64 rng(2024);
    std::normal_distribution<float> nd;
    const auto random_vector = [&](int d) {
        Eigen::VectorXf v(d);
        for (int i = 0; i < d; ++i) v[i] = nd(rng);
        return v;
    };
    std::size_t rank_mismatch = 0, recall_mismatch = 0, monotone = 0, both = 0, largest = 0;
    for (int trial = 0; trial < 100; ++trial) {
        const Metric metric = trial % 2 ? Metric::kEuclidean : Metric::kCosine;
        const int tracks = 1 + static_cast<int>(rng() % 250);
        const int d = 1 + static_cast<int>(rng() % 12);
        RetrievalIndex idx(Pooling::kMean, metric);
        std::vector<PooledEmbedding> refs;
        for (int n = 0; n < tracks; ++n) {
            for (const auto& l : default_labels()) {
                PooledEmbedding e;
                e.key = {"t" + std::to_string(n), l};
                e.vector = random_vector(d);
                if (!refs.empty() && rng() % 10 == 0) e.vector = refs[rng() % refs.size()].vector;
                refs.push_back(e);
                idx.add(e);
            }
        }
        largest = std::max(largest, refs.size());
        std::vector<PooledEmbedding> queries;
        for (int i = 0; i < std::min<int>(static_cast<int>(refs.size()), 40); ++i) {
            PooledEmbedding q = refs[rng() % refs.size()];
            const int mode = static_cast<int>(rng() % 3);
            if (mode == 0) q.vector = random_vector(d);
            if (mode == 1) q.vector += 0.3f * random_vector(d);
            queries.push_back(q);
        }
        // Brute force: all pairwise distances in double, then a stable sort per query.
        std::vector<std::size_t> positions;
        for (const auto& q : queries) {
            std::vector<double> dist;
            std::size_t truth = 0;
            for (std::size_t i = 0; i < refs.size(); ++i) {
                const Eigen::VectorXf& r = refs[i].vector;
                double dot = 0, na = 0, nb = 0, sq = 0;
                for (int j = 0; j < d; ++j) {
                    dot += double(q.vector[j]) * r[j];
                    na += double(q.vector[j]) * q.vector[j];
                    nb += double(r[j]) * r[j];
                    sq += (double(q.vector[j]) - r[j]) * (double(q.vector[j]) - r[j]);
                }
                dist.push_back(metric == Metric::kEuclidean ? sq : (na == 0 || nb == 0) ? 1.0 : 1.0 - dot / std::sqrt(na * nb));
                if (refs[i].key == q.key) truth = i;
            }
            std::size_t closer = 0;
            for (double x : dist) closer += x < dist[truth];
            std::vector<std::size_t> order(refs.size());
            std::iota(order.begin(), order.end(), 0);
            std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return dist[a] < dist[b]; });
            positions.push_back(static_cast<std::size_t>(std::find(order.begin(), order.end(), truth) - order.begin()));
            rank_mismatch += normalized_rank(q.vector, q.key, idx) != double(closer) / double(refs.size());
        }
        double prev = 0.0;
        for (int k : {1, 2, 5, 10, 50, 1000}) {
            const std::size_t kk = std::min<std::size_t>(static_cast<std::size_t>(k), refs.size());
            std::size_t hits = 0;
            for (auto p : positions) hits += p < kk;
            const double r = recall_at_k(queries, idx, static_cast<int>(kk));
            recall_mismatch += r != double(hits) / double(queries.size());
            monotone += r < prev;
            prev = r;
        }
        const FailureReport rep = categorize_failures(queries, idx);
        both += double(rep.counts.at(FailureCategory::kBothCorrect)) / double(queries.size()) != recall_at_k(queries, idx, 1);
    }
    c.expect(largest <= 1000, "N <= 1000");
    c.expect(rank_mismatch == 0, "normalized_rank matches brute force");
    c.expect(recall_mismatch == 0, "recall_at_k matches brute force");
    c.expect(monotone == 0, "R@K monotone in K");
    c.expect(both == 0, "both-correct fraction equals R@1");
    return c.done("100 indices (N <= " + std::to_string(largest) + "): rank mismatches " +
                  std::to_string(rank_mismatch) + ", recall mismatches " + std::to_string(recall_mismatch) +
                  ", monotonicity breaks " + std::to_string(monotone) + ", both-correct mismatches " +
                  std::to_string(both));
}

Outcome alignment_oracle() {
    Checker c;
    std::mt19937_64 rng(7);
    double worst = 0.0, self_err = 0.0;
    bool circular = true;
    for (int trial = 0; trial < 20; ++trial) {
        const int stems = 1 + static_cast<int>(rng() % 4);
        const int m = 2 + static_cast<int>(rng() % 60);
        const int dim = 1 + static_cast<int>(rng() % 40);
        std::vector<MatrixF> z, q;
        for (int s = 0; s < stems; ++s) {
            z.push_back(random_matrix(m, dim, rng));
            q.push_back(random_matrix(m, dim, rng));
        }
        self_err = std::max(self_err, std::abs(alignment_similarity(z, z, 0) - 1.0));
        for (int j = -m - 3; j <= m + 3; ++j) {
            const double v = alignment_similarity(z, q, j);
            double total = 0.0;
            for (int s = 0; s < stems; ++s) {
                for (int i = 0; i < m; ++i) {
                    const int k = ((i + j) % m + m) % m;
                    double dot = 0, na = 0, nb = 0;
                    for (int d = 0; d < dim; ++d) {
                        const double a = z[static_cast<std::size_t>(s)](i, d), b = q[static_cast<std::size_t>(s)](k, d);
                        dot += a * b;
                        na += a * a;
                        nb += b * b;
                    }
                    total += dot / std::sqrt(na * nb);
                }
            }
            worst = std::max(worst, std::abs(v - total / (double(m) * stems)));
            circular = circular && v == alignment_similarity(z, q, j + m);
        }
    }
    c.expect(worst <= 1e-6, "vectorized matches the double loop within 1e-6");
    c.expect(circular, "s(j) == s(j + M) exactly");
    c.expect(self_err <= 1e-9, "self-similarity at j = 0 equals 1");
    return c.done("worst |vectorized - loop| " + fmt(worst, 3) + ", self-similarity error " + fmt(self_err, 3));
}

Outcome clustering_conservation() {
    Checker c;
    std::mt19937_64 rng(4);
    int mismatches = 0;
    for (int trial = 0; trial < 20; ++trial) {
        const int n = 20 + static_cast<int>(rng() % 300);
        const int k = 1 + static_cast<int>(rng() % 12);
        const int v = 1 + static_cast<int>(rng() % 6);
        const MatrixF pts = random_matrix(n, 5, rng);
        std::vector<int> labels;
        for (int i = 0; i < n; ++i) labels.push_back(static_cast<int>(rng() % static_cast<unsigned>(v)));
        std::vector<std::string> vocab;
        for (int i = 0; i < v; ++i) vocab.push_back("L" + std::to_string(i));
        KMeansConfig cfg;
        cfg.k = k;
        cfg.restarts = 2;
        cfg.seed = static_cast<std::uint64_t>(trial);
        const CooccurrenceMatrix m = cluster_cooccurrence(pts, labels, vocab, cfg);
        std::vector<std::int64_t> sizes(static_cast<std::size_t>(k), 0);
        for (int a : m.assignments) ++sizes[static_cast<std::size_t>(a)];
        std::int64_t expected = 0;
        for (auto s : sizes) expected += s * (s - 1) / 2;
        mismatches += m.total() != expected;
    }
    c.expect(mismatches == 0, "total equals the sum of C(m_c, 2)");

    std::normal_distribution<float> nd(0.0f, 0.1f);
    MatrixF pts(200, 3);
    std::vector<int> labels;
    for (int i = 0; i < 200; ++i) {
        for (int d = 0; d < 3; ++d) pts(i, d) = (i < 120 ? -10.0f : 10.0f) + nd(rng);
        labels.push_back(i < 120 ? 0 : 1);
    }
    KMeansConfig cfg;
    cfg.k = 2;
    const CooccurrenceMatrix blobs = cluster_cooccurrence(pts, labels, {"left", "right"}, cfg);
    c.expect(blobs.counts[0][1] == 0 && blobs.counts[1][0] == 0, "two blobs give zero cross-label counts");
    return c.done("20 random trials, " + std::to_string(mismatches) + " conservation mismatches; two-blob cross count " +
                  std::to_string(blobs.counts[0][1]));
}

// ---------------------------------------------------------------------------
// Desk-scale runs

struct DeskOptions {
    fs::path config;
    fs::path dir;
    fs::path corpus;
    int seeds = 3;
    bool run = false;
    bool verify = true;
};

CommandOptions command(const fs::path& out, std::vector<std::string> overrides = {}) {
    CommandOptions o;
    o.out = out.string();
    o.overrides = std::move(overrides);
    o.quiet = true;
    return o;
}

fs::path ensure_corpus(const DeskOptions& d) {
    const fs::path manifest = d.corpus / "manifest.json";
    if (fs::exists(manifest)) return manifest;
    std::cerr << "synthesizing desk corpus in " << d.corpus << '\n';
    CommandOptions o = command(d.corpus, {"seed=0"});
    o.config_path = d.config.string();
    o.force = true;
    return cmd_synth(o);
}

std::vector<std::string> desk_overrides(const fs::path& manifest, int seed) {
    return {"data.manifest=" + manifest.string(), "seed=" + std::to_string(seed)};
}

void run_desk_seed(const DeskOptions& d, const fs::path& manifest, int seed) {
    const fs::path dir = d.dir / ("seed" + std::to_string(seed));
    const fs::path train = dir / "train";
    if (!fs::exists(train / "log.jsonl") || read_jsonl(train / "log.jsonl").size() <
                                               static_cast<std::size_t>(read_json(d.config).at("train").at("total_steps").get<int>())) {
        std::cerr << "training seed " << seed << " into " << train << '\n';
        CommandOptions o = command(train, desk_overrides(manifest, seed));
        o.config_path = d.config.string();
        o.resume = fs::exists(train / "last.ckpt");
        o.quiet = false;
        cmd_train(o);
        fs::remove_all(train / "checkpoints");
    }
    for (const char* sub : {"retrieve", "align"}) {
        if (fs::exists(dir / sub / "config.json")) continue;
        CommandOptions o = command(dir / sub, {"data.manifest=" + manifest.string()});
        o.checkpoint = (train / "last.ckpt").string();
        if (std::string(sub) == "retrieve") {
            cmd_retrieve(o);
        } else {
            cmd_align(o);
        }
    }
}

// Recomputes retrieval and alignment from the stored checkpoint and compares bytes.
bool verify_desk_seed(const fs::path& dir, const fs::path& manifest, std::string* note) {
    const fs::path tmp = fs::temp_directory_path() / "stemjepa_acceptance_verify";
    fs::remove_all(tmp);
    CommandOptions o = command(tmp / "retrieve", {"data.manifest=" + manifest.string()});
    o.checkpoint = (dir / "train" / "last.ckpt").string();
    cmd_retrieve(o);
    o.out = (tmp / "align").string();
    cmd_align(o);
    bool same = true;
    for (const char* f : {"retrieve/metrics.json", "retrieve/queries.csv", "align/alignment.json", "align/alignment.csv"}) {
        if (slurp(tmp / f) != slurp(dir / f)) {
            same = false;
            *note += std::string(" ") + f + " differs;";
        }
    }
    fs::remove_all(tmp);
    return same;
}

struct DeskResults {
    Outcome retrieval, alignment;
};

DeskResults desk_scale(const DeskOptions& d) {
    DeskResults out;
    Checker c8, c9;
    const json base = read_json(d.config);
    const int total_steps = base.at("train").at("total_steps").get<int>();
    fs::path manifest;
    if (d.run || d.verify) manifest = ensure_corpus(d);
    if (d.run) {
        for (int s = 0; s < d.seeds; ++s) run_desk_seed(d, manifest, s);
    }
    int recall_passes = 0;
    std::ostringstream r8, r9;
    for (int s = 0; s < d.seeds; ++s) {
        const fs::path dir = d.dir / ("seed" + std::to_string(s));
        const std::string tag = "seed " + std::to_string(s);
        try {
            const json cfg = read_json(dir / "train" / "config.json");
            c8.expect(cfg.at("data").at("synth").at("tracks") == 200 && cfg.at("data").at("synth").at("duration") == 30.0,
                      tag + ": 200 x 30 s corpus");
            c8.expect(cfg.at("model").at("encoder").at("depth") == 4 && cfg.at("model").at("encoder").at("width") == 64,
                      tag + ": tiny preset");
            c8.expect(cfg.at("train").at("total_steps") == 5000 && cfg.at("train").at("batch_size") == 32,
                      tag + ": 5k steps, batch 32");
            c8.expect(cfg.at("seed") == s, tag + ": seed");

            const auto log = read_jsonl(dir / "train" / "log.jsonl");
            c8.expect(static_cast<int>(log.size()) == total_steps, tag + ": complete log");
            double min_std = 1e30, loss100 = NAN, loss_end = NAN;
            for (const auto& l : log) {
                min_std = std::min(min_std, l.at("embedding_std").get<double>());
                if (l.at("step") == 100) loss100 = l.at("loss");
                if (l.at("step") == total_steps - 1) loss_end = l.at("loss");
            }
            c8.expect(min_std > 1e-3, tag + ": embedding std stays above 1e-3");
            c8.expect(loss_end < loss100, tag + ": final loss below step-100 loss");
            double train_seconds = 0.0;
            if (fs::exists(dir / "train" / "timing.jsonl")) {
                for (const auto& l : read_jsonl(dir / "train" / "timing.jsonl")) train_seconds += l.at("step_seconds").get<double>();
            }
            c8.expect(train_seconds <= 4 * 3600.0, tag + ": training within 4 h on CPU");

            const json m = read_json(dir / "retrieve" / "metrics.json");
            const std::size_t refs = m.at("references");
            const double r5 = m.at("recall").at("R@5");
            const double chance = 5.0 / static_cast<double>(refs);
            c8.expect(refs == 160, tag + ": 160-entry reference set");
            recall_passes += r5 >= 3.0 * chance;

            const json a = read_json(dir / "align" / "alignment.json");
            const double frac = a.at("argmax_at_zero_fraction");
            c9.expect(a.at("tracks").size() == 20, tag + ": 20 held-out tracks");
            c9.expect(frac >= 0.6, tag + ": argmax at zero on >= 60% of tracks (" + fmt(frac) + ")");

            std::string note;
            if (d.verify) {
                const bool same = verify_desk_seed(dir, manifest, &note);
                c8.expect(same, tag + ": stored artifacts reproduce from the checkpoint:" + note);
                c9.expect(same, tag + ": stored curves reproduce from the checkpoint");
            }
            r8 << (s ? "; " : "") << tag << " R@5 " << fmt(r5, 3) << " (3x chance " << fmt(3 * chance, 3) << "), loss "
               << fmt(loss100, 3) << " -> " << fmt(loss_end, 3) << ", min std " << fmt(min_std, 3) << ", "
               << fmt(train_seconds / 3600.0, 2) << " h";
            r9 << (s ? "; " : "") << tag << " " << fmt(frac, 3);
        } catch (const std::exception& e) {
            c8.expect(false, tag + ": " + e.what());
            c9.expect(false, tag + ": " + e.what());
        }
    }
    const int need = (2 * d.seeds + 2) / 3;
    c8.expect(recall_passes >= need, "R@5 >= 3x chance in " + std::to_string(recall_passes) + " of " +
                                         std::to_string(d.seeds) + " seeds (need " + std::to_string(need) + ")");
    out.retrieval = c8.done(r8.str());
    out.alignment = c9.done("argmax-at-zero fraction: " + r9.str());
    return out;
}

// ---------------------------------------------------------------------------

std::map<std::string, std::string> tree_bytes(const fs::path& root) {
    std::map<std::string, std::string> out;
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (!e.is_regular_file()) continue;
        if (e.path().filename() == "timing.jsonl") continue;  // wall-clock measurements
        out[fs::relative(e.path(), root).string()] = slurp(e.path());
    }
    return out;
}

Outcome reproducibility() {
    Checker c;
    const fs::path root = fs::temp_directory_path() / "stemjepa_acceptance_repro";
    fs::remove_all(root);
    fs::create_directories(root);
    const json cfg = {
        {"data",
         {{"manifest", (root / "work" / "corpus" / "manifest.json").string()},
          {"holdout_tracks", 2},
          {"synth", {{"tracks", 10}, {"duration", 9.0}, {"keys", {"C", "G"}}}}}},
        {"model", {{"encoder", {{"depth", 1}, {"width", 16}, {"heads", 2}}}, {"predictor", {{"hidden", 32}, {"label_dim", 8}}}}},
        {"train", {{"total_steps", 8}, {"warmup_steps", 2}, {"batch_size", 4}, {"checkpoint_every", 4}, {"num_workers", 1}}},
        {"analysis", {{"align_tracks", 2}, {"clusters", 4}, {"kmeans_restarts", 2}, {"probe", {{"max_epochs", 10}, {"hidden", 16}}}}},
        {"threads", 1},
        {"seed", 11}};
    const fs::path config = root / "config.json";
    std::ofstream(config) << cfg.dump(2);

    std::vector<std::map<std::string, std::string>> runs;
    for (int rep = 0; rep < 2; ++rep) {
        const fs::path work = root / "work";
        fs::remove_all(work);
        const auto with = [&](const std::string& sub) {
            CommandOptions o = command(work / sub);
            o.config_path = config.string();
            o.checkpoint = (work / "train" / "last.ckpt").string();
            return o;
        };
        cmd_synth(with("corpus"));
        CommandOptions t = with("train");
        t.checkpoint.clear();
        cmd_train(t);
        cmd_embed(with("embed"));
        cmd_retrieve(with("retrieve"));
        cmd_align(with("align"));
        cmd_cluster(with("cluster"));
        cmd_probe(with("probe"));
        runs.push_back(tree_bytes(work));
    }
    std::size_t differing = 0;
    std::string first;
    for (const auto& [name, bytes] : runs[0]) {
        auto it = runs[1].find(name);
        if (it == runs[1].end() || it->second != bytes) {
            ++differing;
            if (first.empty()) first = name;
        }
    }
    c.expect(runs[0].size() == runs[1].size(), "same file set");
    c.expect(differing == 0, "byte-identical artifacts (first difference: " + first + ")");
    std::set<std::string> commands;
    for (const auto& [name, bytes] : runs[0]) commands.insert(name.substr(0, name.find('/')));
    c.expect(commands.size() == 7, "artifacts from all seven commands");
    fs::remove_all(root);
    return c.done(std::to_string(runs[0].size()) + " files from synth, train, embed, retrieve, align, cluster, probe; " +
                  std::to_string(differing) + " differ");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Stem-JEPA acceptance checks"};
    DeskOptions desk;
    desk.config = fs::path(STEMJEPA_SOURCE_DIR) / "configs" / "desk.json";
    desk.dir = fs::path(STEMJEPA_SOURCE_DIR) / "runs" / "desk";
    desk.corpus = fs::temp_directory_path() / "stemjepa_desk_corpus";
    std::vector<int> only;
    bool no_verify = false;
    app.add_option("--desk-config", desk.config, "run config for the desk-scale runs");
    app.add_option("--desk-dir", desk.dir, "directory holding seed<N>/{train,retrieve,align}");
    app.add_option("--corpus-dir", desk.corpus, "where the desk corpus is (re)generated");
    app.add_option("--seeds", desk.seeds, "number of desk-scale seeds")->check(CLI::Range(1, 100));
    app.add_flag("--run-desk", desk.run, "train and evaluate any desk-scale seed that is missing");
    app.add_flag("--no-verify", no_verify, "trust stored desk artifacts instead of recomputing them");
    app.add_option("--only", only, "criteria to run (default: all)");
    CLI11_PARSE(app, argc, argv);
    desk.verify = !no_verify;

    const auto wanted = [&](int n) { return only.empty() || std::find(only.begin(), only.end(), n) != only.end(); };
    const std::vector<std::pair<int, std::string>> names = {
        {1, "token arithmetic"},      {2, "loss identities"},     {3, "gradient contract"},
        {4, "EMA algebra"},           {5, "sampler laws"},        {6, "retrieval oracle"},
        {7, "alignment oracle"},      {8, "desk-scale retrieval"}, {9, "desk-scale alignment"},
        {10, "clustering conservation"}, {11, "reproducibility"}};
    const std::map<int, std::function<Outcome()>> single = {
        {1, token_arithmetic}, {2, loss_identities},  {3, gradient_contract}, {4, ema_algebra},
        {5, sampler_laws},     {6, retrieval_oracle}, {7, alignment_oracle},  {10, clustering_conservation},
        {11, reproducibility}};

    std::map<int, Outcome> results;
    for (const auto& [n, name] : names) {
        if (!wanted(n)) continue;
        if (n == 9 && results.count(9)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        try {
            if (n == 8 || n == 9) {
                const DeskResults d = desk_scale(desk);
                if (wanted(8)) results[8] = d.retrieval;
                if (wanted(9)) results[9] = d.alignment;
            } else {
                results[n] = single.at(n)();
            }
        } catch (const std::exception& e) {
            results[n] = {false, std::string("error: ") + e.what()};
            if (n == 8 && wanted(9)) results[9] = results[8];
        }
        const double secs = seconds_since(t0);
        for (int k : {n, 9}) {
            if (k == 9 && n != 8) continue;
            if (!results.count(k)) continue;
            const auto& r = results[k];
            std::cout << (r.pass ? "PASS" : "FAIL") << "  " << k << ". " << names[static_cast<std::size_t>(k - 1)].second
                      << ": " << r.detail << " [" << fmt(secs, 3) << " s]" << std::endl;
        }
    }
    int failed = 0;
    for (const auto& [n, r] : results) failed += !r.pass;
    std::cout << results.size() - static_cast<std::size_t>(failed) << "/" << results.size() << " criteria passed"
              << std::endl;
    return failed == 0 ? 0 : 1;
}
