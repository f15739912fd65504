#include "stemjepa/training.h"

#include <chrono>
#include <cstring>
#include <fstream>
#include <numbers>

#include "stemjepa/config.h"

namespace stemjepa {

using json = nlohmann::json;

void TrainConfig::validate() const {
    if (total_steps <= 0) throw ConfigError("train.total_steps must be positive");
    if (batch_size <= 0) throw ConfigError("train.batch_size must be positive");
    if (warmup_steps < 0 || warmup_steps >= total_steps) {
        throw ConfigError("train.warmup_steps must satisfy 0 <= warmup < total_steps");
    }
    if (!(tau_start >= 0.0 && tau_start <= tau_end && tau_end <= 1.0)) {
        throw ConfigError("EMA rates must satisfy 0 <= tau_start <= tau_end <= 1");
    }
    if (base_lr < 0.0 || weight_decay < 0.0) throw ConfigError("learning rate and weight decay must be >= 0");
    if (num_workers < 1) throw ConfigError("train.num_workers must be >= 1");
}

double jepa_loss_cosine_form(const MatrixF& pred, const MatrixF& target) {
    double total = 0.0;
    for (Eigen::Index r = 0; r < pred.rows(); ++r) {
        const Eigen::RowVectorXd p = pred.row(r).cast<double>();
        const Eigen::RowVectorXd t = target.row(r).cast<double>();
        total += 2.0 - 2.0 * p.dot(t) / (p.norm() * t.norm());
    }
    return total / static_cast<double>(pred.rows());
}

double jepa_loss(const EmbeddingGrid& pred, const EmbeddingGrid& target) {
    if (pred.coords != target.coords) throw InputError("prediction and target grids have different coords");
    return jepa_loss<float>(pred.vectors, target.vectors);
}

double ema_schedule(std::int64_t step, std::int64_t total_steps, double tau0, double tau_end) {
    if (total_steps <= 0) throw ConfigError("total_steps must be positive");
    if (step >= total_steps) return tau_end;
    if (step <= 0) return tau0;
    return tau0 + (static_cast<double>(step) / static_cast<double>(total_steps)) * (tau_end - tau0);
}

double lr_schedule(std::int64_t step, std::int64_t total_steps, double base_lr, std::int64_t warmup_steps) {
    if (step < warmup_steps) {
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    }
    if (step >= total_steps) return 0.0;
    const double progress =
        static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
    return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double embedding_std(const MatrixF& embeddings) {
    if (embeddings.rows() < 2) return 0.0;
    Eigen::MatrixXd x = embeddings.cast<double>();
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        const double n = x.row(r).norm();
        if (n > 0.0) x.row(r) /= n;
    }
    const Eigen::RowVectorXd mean = x.colwise().mean();
    const Eigen::RowVectorXd var = (x.rowwise() - mean).array().square().colwise().sum() /
                                   static_cast<double>(x.rows() - 1);
    return var.array().sqrt().mean();
}

PairBatch make_batch(std::span<const ContextTargetPair> pairs, const FrontendConfig& frontend,
                     const ModelConfig& model) {
    PairBatch batch;
    if (pairs.empty()) return batch;
    const int patch_dim = frontend.patch_f * frontend.patch_t;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        const PatchGrid ctx = patchify(compute_log_mel(pairs[i].context, frontend), frontend.patch_f, frontend.patch_t);
        const PatchGrid tgt = patchify(compute_log_mel(pairs[i].target, frontend), frontend.patch_f, frontend.patch_t);
        if (i == 0) {
            batch.tokens = ctx.tokens();
            batch.context.resize(static_cast<Eigen::Index>(pairs.size()) * batch.tokens, patch_dim);
            batch.target.resize(batch.context.rows(), patch_dim);
        }
        if (ctx.tokens() != batch.tokens || tgt.tokens() != batch.tokens) {
            throw InputError("all pairs in a batch must produce the same token count");
        }
        const auto row0 = static_cast<Eigen::Index>(i) * batch.tokens;
        batch.context.middleRows(row0, batch.tokens) = ctx.patches;
        batch.target.middleRows(row0, batch.tokens) = tgt.patches;
        batch.labels.push_back(model.label_index(pairs[i].target_label));
    }
    return batch;
}

Trainer::Trainer(ModelState state, const TrainConfig& train, const FrontendConfig& frontend)
    : state_(std::move(state)), cfg_(train), frontend_(frontend),
      opt_(train.beta1, train.beta2, train.adam_eps, train.weight_decay) {
    cfg_.validate();
    opt_.init(state_.trainable());
}

TrainLogRecord Trainer::train_step(const PairBatch& batch) {
    const auto start = std::chrono::steady_clock::now();
    const int k = batch.tokens;
    auto trainable = state_.trainable();
    for (auto* p : trainable) p->zero_grad();

    auto& enc_cache = enc_cache_;
    auto& pred_cache = pred_cache_;
    const MatrixF z = state_.context.forward(batch.context, k, &enc_cache);
    // Target branch: inference only, so no gradient can reach the EMA encoder.
    const MatrixF z_target = state_.target.forward(batch.target, k, nullptr);
    const MatrixF z_pred = state_.predictor.forward(z, k, batch.labels, &pred_cache);

    MatrixF dpred;
    const double loss = jepa_loss<float>(z_pred, z_target, &dpred);
    if (!std::isfinite(loss)) {
        throw NumericalError("non-finite loss at step " + std::to_string(state_.step));
    }
    const MatrixF dz = state_.predictor.backward(pred_cache, dpred, k, batch.labels);
    state_.context.backward(enc_cache, dz, k);

    TrainLogRecord rec;
    rec.step = state_.step;
    rec.lr = lr_schedule(state_.step, cfg_.total_steps, cfg_.base_lr, cfg_.warmup_steps);
    rec.grad_norm = opt_.step(trainable, rec.lr, cfg_.grad_clip);
    if (!std::isfinite(rec.grad_norm)) {
        throw NumericalError("non-finite gradient norm at step " + std::to_string(state_.step));
    }
    rec.tau = ema_schedule(state_.step + 1, cfg_.total_steps, cfg_.tau_start, cfg_.tau_end);
    ema_update(state_, rec.tau);
    ++state_.step;

    rec.loss = loss;
    rec.embedding_std = embedding_std(z_target);
    rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    return rec;
}

PairBatch Trainer::sample_batch(const Corpus& corpus, std::span<const std::size_t> pool, std::int64_t step,
                                const PairSamplerConfig& sampler, std::vector<std::string>* skipped) const {
    std::vector<ContextTargetPair> pairs;
    pairs.reserve(static_cast<std::size_t>(cfg_.batch_size));
    for (int slot = 0; slot < cfg_.batch_size; ++slot) {
        DataRng rng = make_stream(cfg_.seed, 0, static_cast<std::uint64_t>(step), static_cast<std::uint64_t>(slot));
        auto pair = draw_training_pair(corpus, pool, sampler, rng, skipped);
        if (!pair) throw InputError("could not draw a non-silent context/target pair for step " + std::to_string(step));
        pairs.push_back(std::move(*pair));
    }
    return make_batch(pairs, frontend_, state_.config);
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[8] = {'S', 'J', 'E', 'P', 'A', 'C', 'K', 'P'};

std::uint64_t fnv1a(const char* data, std::size_t n) {
    std::uint64_t h = 1469598103934665603ULL;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= static_cast<unsigned char>(data[i]);
        h *= 1099511628211ULL;
    }
    return h;
}

class Writer {
public:
    template <typename T>
    void pod(const T& v) {
        const char* p = reinterpret_cast<const char*>(&v);
        buf.insert(buf.end(), p, p + sizeof(T));
    }
    void bytes(const std::string& s) {
        pod(static_cast<std::uint64_t>(s.size()));
        buf.insert(buf.end(), s.begin(), s.end());
    }
    void tensor(const std::string& name, const MatrixF& m) {
        pod(static_cast<std::uint32_t>(name.size()));
        buf.insert(buf.end(), name.begin(), name.end());
        pod(static_cast<std::uint32_t>(m.rows()));
        pod(static_cast<std::uint32_t>(m.cols()));
        const char* p = reinterpret_cast<const char*>(m.data());
        buf.insert(buf.end(), p, p + m.size() * sizeof(float));
    }
    std::vector<char> buf;
};

class Cursor {
public:
    Cursor(const std::vector<char>& data, std::size_t end, std::string path)
        : data_(data), end_(end), path_(std::move(path)) {}

    template <typename T>
    T pod() {
        need(sizeof(T));
        T v;
        std::memcpy(&v, data_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }
    std::string bytes(std::size_t n) {
        need(n);
        std::string s(data_.data() + pos_, n);
        pos_ += n;
        return s;
    }
    MatrixF matrix(std::uint32_t rows, std::uint32_t cols) {
        const std::size_t n = static_cast<std::size_t>(rows) * cols;
        need(n * sizeof(float));
        MatrixF m(rows, cols);
        std::memcpy(m.data(), data_.data() + pos_, n * sizeof(float));
        pos_ += n * sizeof(float);
        return m;
    }
    std::size_t position() const { return pos_; }

private:
    void need(std::size_t n) const {
        if (pos_ + n > end_) throw CorruptionError("checkpoint " + path_ + " is truncated or corrupted");
    }
    const std::vector<char>& data_;
    std::size_t end_;
    std::size_t pos_ = 0;
    std::string path_;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Trainer& trainer, const json& snapshot) {
    Writer w;
    w.buf.insert(w.buf.end(), std::begin(kMagic), std::end(kMagic));
    w.pod(kCheckpointVersion);
    w.bytes(snapshot.dump());
    w.pod(static_cast<std::int64_t>(trainer.state().step));
    w.pod(static_cast<std::int64_t>(trainer.optimizer().steps()));

    const auto params = trainer.state().all();
    const auto trainable_count = const_cast<ModelState&>(trainer.state()).trainable().size();
    const auto& m = trainer.optimizer().first_moments();
    const auto& v = trainer.optimizer().second_moments();
    w.pod(static_cast<std::uint32_t>(params.size() + 2 * trainable_count));
    for (const auto* p : params) w.tensor(p->name, p->value);
    for (std::size_t i = 0; i < trainable_count; ++i) w.tensor("adam.m." + params[i]->name, m[i]);
    for (std::size_t i = 0; i < trainable_count; ++i) w.tensor("adam.v." + params[i]->name, v[i]);
    w.pod(fnv1a(w.buf.data(), w.buf.size()));

    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write checkpoint " + tmp.string());
        out.write(w.buf.data(), static_cast<std::streamsize>(w.buf.size()));
        if (!out) throw IoError("failed writing checkpoint " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

ModelConfig model_config_from_snapshot(const json& snapshot) {
    return run_config_from_json(snapshot).model;
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("checkpoint not found: " + path.string());
    const std::vector<char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (data.size() < sizeof(kMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t) ||
        std::memcmp(data.data(), kMagic, sizeof(kMagic)) != 0) {
        throw CorruptionError("not a checkpoint file (bad magic or truncated): " + path.string());
    }
    std::uint32_t version;
    std::memcpy(&version, data.data() + sizeof(kMagic), sizeof(version));
    if (version != kCheckpointVersion) {
        throw ConfigError("incompatible checkpoint version " + std::to_string(version) + " (this build reads " +
                          std::to_string(kCheckpointVersion) + "): " + path.string());
    }
    const std::size_t body = data.size() - sizeof(std::uint64_t);
    std::uint64_t stored;
    std::memcpy(&stored, data.data() + body, sizeof(stored));
    if (stored != fnv1a(data.data(), body)) {
        throw CorruptionError("checkpoint checksum mismatch (truncated or corrupted): " + path.string());
    }

    Cursor cur(data, body, path.string());
    cur.bytes(sizeof(kMagic));
    cur.pod<std::uint32_t>();
    Checkpoint ckpt;
    try {
        ckpt.snapshot = json::parse(cur.bytes(cur.pod<std::uint64_t>()));
    } catch (const json::exception& e) {
        throw CorruptionError("checkpoint config snapshot is unreadable: " + std::string(e.what()));
    }
    const ModelConfig model_cfg = model_config_from_snapshot(ckpt.snapshot);
    ckpt.state = ModelState(model_cfg, 0);
    ckpt.state.step = cur.pod<std::int64_t>();
    ckpt.optimizer_steps = cur.pod<std::int64_t>();

    std::map<std::string, MatrixF> tensors;
    const auto count = cur.pod<std::uint32_t>();
    for (std::uint32_t i = 0; i < count; ++i) {
        std::string name = cur.bytes(cur.pod<std::uint32_t>());
        const auto rows = cur.pod<std::uint32_t>();
        const auto cols = cur.pod<std::uint32_t>();
        tensors.emplace(std::move(name), cur.matrix(rows, cols));
    }
    auto take = [&](const std::string& name, Eigen::Index rows, Eigen::Index cols) {
        auto it = tensors.find(name);
        if (it == tensors.end()) throw CorruptionError("checkpoint is missing tensor '" + name + "'");
        if (it->second.rows() != rows || it->second.cols() != cols) {
            throw ConfigError("checkpoint tensor '" + name + "' has shape " + std::to_string(it->second.rows()) + "x" +
                              std::to_string(it->second.cols()) + ", model expects " + std::to_string(rows) + "x" +
                              std::to_string(cols));
        }
        return it->second;
    };
    auto params = ckpt.state.all();
    for (auto* p : params) p->value = take(p->name, p->value.rows(), p->value.cols());
    const auto trainable = ckpt.state.trainable();
    for (auto* p : trainable) {
        ckpt.adam_m.push_back(take("adam.m." + p->name, p->value.rows(), p->value.cols()));
        ckpt.adam_v.push_back(take("adam.v." + p->name, p->value.rows(), p->value.cols()));
    }
    return ckpt;
}

void restore_trainer(Trainer& trainer, const Checkpoint& ckpt) {
    auto dst = trainer.state().all();
    const auto src = ckpt.state.all();
    if (dst.size() != src.size()) throw ConfigError("checkpoint model layout does not match the trainer");
    for (std::size_t i = 0; i < dst.size(); ++i) {
        if (dst[i]->name != src[i]->name || dst[i]->value.rows() != src[i]->value.rows() ||
            dst[i]->value.cols() != src[i]->value.cols()) {
            throw ConfigError("checkpoint tensor '" + src[i]->name + "' does not match model tensor '" +
                              dst[i]->name + "'");
        }
        dst[i]->value = src[i]->value;
    }
    trainer.state().step = ckpt.state.step;
    trainer.optimizer().first_moments() = ckpt.adam_m;
    trainer.optimizer().second_moments() = ckpt.adam_v;
    trainer.optimizer().set_steps(ckpt.optimizer_steps);
}

}  // namespace stemjepa
