#include <doctest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "stemjepa/error.h"
#include "stemjepa/model.h"
#include "test_util.h"

using namespace stemjepa;

namespace {

PatchGrid random_grid(int time_patches, std::uint64_t seed, double range = 3.0) {
    LogMelSpectrogram s;
    s.values = testutil::random_matrix(80, time_patches * 16, seed, -range, range);
    return patchify(s, 16, 16);
}

ModelConfig tiny_preset(PredictorKind kind = PredictorKind::kMlpConditioned) {
    ModelConfig m;
    m.encoder = EncoderConfig::tiny();
    m.predictor.kind = kind;
    m.predictor.hidden = 64;
    return m;
}

}  // namespace

TEST_CASE("encoder shapes: tiny preset") {
    const ModelState state(tiny_preset(), 1);
    for (int tp : {10, 50}) {
        const PatchGrid g = random_grid(tp, 2);
        const EmbeddingGrid z = encode(state.context, g);
        CHECK(z.tokens() == g.tokens());
        CHECK(z.dim() == 64);
        CHECK(z.coords.size() == g.coords.size());
        CHECK(z.freq_patches == 5);
        CHECK(z.time_patches == tp);
        const EmbeddingGrid p = predict(state, z, std::string("drums"));
        CHECK(p.tokens() == z.tokens());
        CHECK(p.dim() == 64);
        CHECK(p.coords.size() == z.coords.size());
    }
}

TEST_CASE("encoder shapes: ViT-Base width on 250 tokens") {
    ModelConfig m;
    m.encoder = EncoderConfig::base();
    m.encoder.depth = 1;  // width and token count are what the shape law checks
    m.predictor.mlp_layers = 2;
    nn::Rng rng(3);
    const Encoder<float> enc(m.encoder, "context", rng);
    const EmbeddingGrid z = encode(enc, random_grid(50, 4));
    CHECK(z.vectors.rows() == 250);
    CHECK(z.vectors.cols() == 768);
    CHECK(EncoderConfig::base().depth == 12);
    CHECK(EncoderConfig::base().heads == 12);
}

TEST_CASE("inference determinism") {
    const ModelState state(tiny_preset(), 5);
    const PatchGrid g = random_grid(50, 6);
    const EmbeddingGrid a = encode(state.context, g);
    const EmbeddingGrid b = encode(state.context, g);
    CHECK(a.vectors == b.vectors);
    CHECK(predict(state, a, std::string("bass")).vectors == predict(state, b, std::string("bass")).vectors);
    // same seed, same weights
    const ModelState twin(tiny_preset(), 5);
    CHECK(encode(twin.context, g).vectors == a.vectors);
    // target twin starts equal to the context encoder
    CHECK(encode(state.target, g).vectors == a.vectors);
}

TEST_CASE("mlp predictor is token-wise: permutation equivariance") {
    for (auto kind : {PredictorKind::kMlpConditioned, PredictorKind::kMlpUnconditioned}) {
        const ModelState state(tiny_preset(kind), 7);
        EmbeddingGrid z;
        z.vectors = testutil::random_matrix(40, 64, 8);
        z.freq_patches = 5;
        z.time_patches = 8;
        z.coords.resize(40);
        std::vector<int> perm(40);
        std::iota(perm.begin(), perm.end(), 0);
        std::shuffle(perm.begin(), perm.end(), std::mt19937(9));
        EmbeddingGrid zp = z;
        for (int i = 0; i < 40; ++i) zp.vectors.row(i) = z.vectors.row(perm[static_cast<std::size_t>(i)]);
        const MatrixF out = predict(state, z, std::string("vocals")).vectors;
        const MatrixF outp = predict(state, zp, std::string("vocals")).vectors;
        for (int i = 0; i < 40; ++i) CHECK(outp.row(i) == out.row(perm[static_cast<std::size_t>(i)]));
    }
}

TEST_CASE("conditioning sensitivity") {
    const ModelState state(tiny_preset(), 11);
    const EmbeddingGrid z = encode(state.context, random_grid(20, 12));
    const MatrixF bass = predict(state, z, std::string("bass")).vectors;
    const MatrixF drums = predict(state, z, std::string("drums")).vectors;
    CHECK((bass - drums).cwiseAbs().maxCoeff() > 1e-6f);
    CHECK_THROWS_AS(predict(state, z, std::string("kazoo")), InputError);
    CHECK_THROWS_AS(predict(state, z, std::nullopt), InputError);

    const ModelState uncond(tiny_preset(PredictorKind::kMlpUnconditioned), 11);
    const MatrixF u1 = predict(uncond, z, std::string("bass")).vectors;
    CHECK(predict(uncond, z, std::string("drums")).vectors == u1);
    CHECK(predict(uncond, z, std::nullopt).vectors == u1);

    const ModelState tr(tiny_preset(PredictorKind::kTransformer), 11);
    const MatrixF t1 = predict(tr, z, std::string("bass")).vectors;
    CHECK(t1.rows() == z.tokens());
    CHECK((t1 - predict(tr, z, std::string("other")).vectors).cwiseAbs().maxCoeff() > 1e-6f);
}

TEST_CASE("instrument table has one row per label") {
    ModelConfig m = tiny_preset();
    m.labels = {"a", "b", "c", "d", "e"};
    const ModelState state(m, 1);
    CHECK(state.instrument_table().value.rows() == 5);
    CHECK(state.instrument_table().value.cols() == 128);
}

TEST_CASE("predictor widths and closed-form parameter count") {
    nn::Rng rng(1);
    PredictorConfig cfg;
    const auto p = make_predictor<float>(PredictorKind::kMlpConditioned, cfg, 768, 4, 250, rng);
    REQUIRE(p.mlp_layers().size() == 6);
    CHECK(p.mlp_layers().front().weight.value.rows() == 896);
    CHECK(p.mlp_layers().back().weight.value.cols() == 768);
    const std::size_t expected = (896 * 1024 + 1024) + 4 * (1024 * 1024 + 1024) + (1024 * 768 + 768);
    CHECK(p.network_parameter_count() == expected);

    const auto u = make_predictor<float>(PredictorKind::kMlpUnconditioned, cfg, 64, 4, 250, rng);
    CHECK(u.mlp_layers().front().weight.value.rows() == 64);
    CHECK(u.mlp_layers().back().weight.value.cols() == 64);

    CHECK_THROWS_AS(predictor_kind_from_string("lstm"), ConfigError);
    CHECK(predictor_kind_from_string(to_string(PredictorKind::kTransformer)) == PredictorKind::kTransformer);
}

TEST_CASE("ema examples") {
    ModelState state(testutil::tiny_model(), 1);
    // Make theta and theta-bar differ.
    for (auto* p : state.context.params()) p->value.array() += 1.0f;
    const auto before = [&] {
        std::vector<MatrixF> v;
        for (auto* p : state.target.params()) v.push_back(p->value);
        return v;
    }();
    ema_update(state, 1.0);
    auto dst = state.target.params();
    for (std::size_t i = 0; i < dst.size(); ++i) CHECK(dst[i]->value == before[i]);
    ema_update(state, 0.0);
    auto src = state.context.params();
    for (std::size_t i = 0; i < dst.size(); ++i) CHECK(dst[i]->value == src[i]->value);

    for (auto* p : state.target.params()) p->value.setConstant(2.0f);
    for (auto* p : state.context.params()) p->value.setConstant(4.0f);
    ema_update(state, 0.5);
    for (auto* p : state.target.params()) CHECK((p->value.array() == 3.0f).all());

    CHECK_THROWS_AS(ema_update(state, 1.5), InputError);
    CHECK_THROWS_AS(ema_update(state, -0.1), InputError);
}

TEST_CASE("property: ema keeps shapes and stays in the convex hull of histories") {
    ModelState state(testutil::tiny_model(), 2);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> tau(0.0, 1.0);
    std::normal_distribution<float> step(0.0f, 0.5f);
    auto src = state.context.params();
    auto dst = state.target.params();
    REQUIRE(src.size() == dst.size());
    // Track the running min/max of each coordinate's combined history for a sample of coordinates.
    std::vector<std::pair<float, float>> hull;
    for (std::size_t i = 0; i < dst.size(); ++i) {
        const float v = dst[i]->value.data()[0];
        hull.emplace_back(v, v);
    }
    for (int it = 0; it < 200; ++it) {
        for (auto* p : src) p->value.data()[0] += step(rng);
        for (std::size_t i = 0; i < src.size(); ++i) {
            const float c = src[i]->value.data()[0];
            hull[i] = {std::min(hull[i].first, c), std::max(hull[i].second, c)};
        }
        ema_update(state, tau(rng));
        for (std::size_t i = 0; i < dst.size(); ++i) {
            REQUIRE(dst[i]->value.rows() == src[i]->value.rows());
            REQUIRE(dst[i]->value.cols() == src[i]->value.cols());
            const float t = dst[i]->value.data()[0];
            REQUIRE(t >= hull[i].first - 1e-5f);
            REQUIRE(t <= hull[i].second + 1e-5f);
        }
    }
}

TEST_CASE("property: finite outputs for inputs in [-10, 10]") {
    const ModelState state(tiny_preset(), 13);
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        const EmbeddingGrid z = encode(state.context, random_grid(50, seed, 10.0));
        CHECK(z.vectors.allFinite());
        CHECK(predict(state, z, std::string("other")).vectors.allFinite());
    }
}

TEST_CASE("configuration errors") {
    const ModelState state(tiny_preset(), 1);
    CHECK_THROWS_AS(encode(state.context, random_grid(51, 1)), ConfigError);
    EncoderConfig bad = EncoderConfig::tiny();
    bad.heads = 5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
    LogMelSpectrogram s;
    s.values = MatrixF::Zero(64, 160);
    CHECK_THROWS_AS(encode(state.context, patchify(s, 16, 16)), ConfigError);
}

TEST_CASE("positional encoding none makes the encoder permutation equivariant") {
    ModelConfig m = tiny_preset();
    m.encoder.positional = PositionalEncoding::kNone;
    const ModelState state(m, 17);
    const PatchGrid g = random_grid(4, 18);
    PatchGrid swapped = g;
    swapped.patches.row(0) = g.patches.row(3);
    swapped.patches.row(3) = g.patches.row(0);
    const MatrixF a = encode(state.context, g).vectors;
    const MatrixF b = encode(state.context, swapped).vectors;
    CHECK((a.row(0) - b.row(3)).cwiseAbs().maxCoeff() < 1e-5f);
    CHECK((a.row(1) - b.row(1)).cwiseAbs().maxCoeff() < 1e-5f);
}
