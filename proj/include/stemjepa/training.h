#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "stemjepa/dataio.h"
#include "stemjepa/error.h"
#include "stemjepa/frontend.h"
#include "stemjepa/model.h"

namespace stemjepa {

struct TrainConfig {
    std::int64_t total_steps = 5000;
    int batch_size = 32;
    double base_lr = 3e-4;
    std::int64_t warmup_steps = 500;
    double tau_start = 0.996;
    double tau_end = 1.0;
    double weight_decay = 0.05;
    double beta1 = 0.9;
    double beta2 = 0.95;
    double adam_eps = 1e-8;
    double grad_clip = 3.0;  // global norm; <= 0 disables
    std::uint64_t seed = 0;
    std::int64_t checkpoint_every = 1000;
    double collapse_threshold = 1e-3;
    int num_workers = 1;

    void validate() const;
};

struct TrainLogRecord {
    std::int64_t step = 0;
    double loss = 0.0;
    double tau = 0.0;
    double lr = 0.0;
    double embedding_std = 0.0;
    double grad_norm = 0.0;
    double wall_time = 0.0;
};

// Row norms below this are rejected by the loss.
inline constexpr double kNormGuard = 1e-8;

// Mean over rows of || p/|p| - t/|t| ||^2. When `grad` is given it receives
// dL/dpred; the target is treated as a constant.
template <typename T>
double jepa_loss(const nn::Matrix<T>& pred, const nn::Matrix<T>& target, nn::Matrix<T>* grad = nullptr) {
    if (pred.rows() != target.rows() || pred.cols() != target.cols()) {
        throw InputError("prediction and target grids differ in shape");
    }
    if (pred.rows() == 0) throw InputError("empty embedding grid");
    const auto rows = static_cast<double>(pred.rows());
    if (grad) grad->resize(pred.rows(), pred.cols());
    double total = 0.0;
    for (Eigen::Index r = 0; r < pred.rows(); ++r) {
        const T pn = pred.row(r).norm();
        const T tn = target.row(r).norm();
        if (!(pn >= T(kNormGuard)) || !(tn >= T(kNormGuard))) {
            throw NumericalError("embedding row " + std::to_string(r) + " has (near-)zero norm");
        }
        const auto u = pred.row(r) / pn;
        const auto v = target.row(r) / tn;
        total += static_cast<double>((u - v).squaredNorm());
        if (grad) {
            const T dot = u.dot(v);
            grad->row(r) = (T(2) / static_cast<T>(rows) / pn) * (u * dot - v);
        }
    }
    return total / rows;
}

// Mean over rows of (2 - 2 cos); algebraically equal to jepa_loss.
double jepa_loss_cosine_form(const MatrixF& pred, const MatrixF& target);

double jepa_loss(const EmbeddingGrid& pred, const EmbeddingGrid& target);

// tau_i = tau0 + (i / T) * (tauT - tau0); steps past T clamp to tauT.
double ema_schedule(std::int64_t step, std::int64_t total_steps, double tau0, double tau_end);

// Linear warmup then cosine annealing to zero at T.
double lr_schedule(std::int64_t step, std::int64_t total_steps, double base_lr, std::int64_t warmup_steps);

// Per-dimension standard deviation of L2-normalized rows, averaged over dimensions.
double embedding_std(const MatrixF& embeddings);

template <typename T>
class AdamW {
public:
    AdamW() = default;
    AdamW(double beta1, double beta2, double eps, double weight_decay)
        : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

    void init(const nn::ParamRefs<T>& params) {
        m_.clear();
        v_.clear();
        for (auto* p : params) {
            m_.push_back(nn::Matrix<T>::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(nn::Matrix<T>::Zero(p->value.rows(), p->value.cols()));
        }
        t_ = 0;
    }

    // Clips the global gradient norm (when max_norm > 0), then applies one
    // decoupled-weight-decay Adam update. Returns the pre-clip gradient norm.
    double step(const nn::ParamRefs<T>& params, double lr, double max_norm) {
        double sq = 0.0;
        for (auto* p : params) sq += static_cast<double>(p->grad.squaredNorm());
        const double norm = std::sqrt(sq);
        const T clip = (max_norm > 0.0 && norm > max_norm) ? static_cast<T>(max_norm / (norm + 1e-6)) : T(1);
        ++t_;
        const T b1 = static_cast<T>(beta1_), b2 = static_cast<T>(beta2_);
        const T c1 = static_cast<T>(1.0 - std::pow(beta1_, static_cast<double>(t_)));
        const T c2 = static_cast<T>(1.0 - std::pow(beta2_, static_cast<double>(t_)));
        const T lr_t = static_cast<T>(lr);
        const T eps = static_cast<T>(eps_);
        const T wd = static_cast<T>(weight_decay_);
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& p = *params[i];
            const nn::Matrix<T> g = p.grad * clip;
            m_[i] = b1 * m_[i] + (T(1) - b1) * g;
            v_[i] = b2 * v_[i] + (T(1) - b2) * g.cwiseProduct(g);
            nn::Matrix<T> update =
                ((m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps)).matrix();
            if (p.decay) update += wd * p.value;
            p.value -= lr_t * update;
        }
        return norm;
    }

    std::int64_t steps() const { return t_; }
    void set_steps(std::int64_t t) { t_ = t; }
    std::vector<nn::Matrix<T>>& first_moments() { return m_; }
    std::vector<nn::Matrix<T>>& second_moments() { return v_; }
    const std::vector<nn::Matrix<T>>& first_moments() const { return m_; }
    const std::vector<nn::Matrix<T>>& second_moments() const { return v_; }

private:
    double beta1_ = 0.9, beta2_ = 0.95, eps_ = 1e-8, weight_decay_ = 0.0;
    std::vector<nn::Matrix<T>> m_, v_;
    std::int64_t t_ = 0;
};

// Stacked spectrogram patches for one batch of context/target pairs.
struct PairBatch {
    MatrixF context;  // [B*K x patch_dim]
    MatrixF target;
    std::vector<int> labels;
    int tokens = 0;
    int size() const { return static_cast<int>(labels.size()); }
};

PairBatch make_batch(std::span<const ContextTargetPair> pairs, const FrontendConfig& frontend,
                     const ModelConfig& model);

class Trainer {
public:
    Trainer(ModelState state, const TrainConfig& train, const FrontendConfig& frontend);

    ModelState& state() { return state_; }
    const ModelState& state() const { return state_; }
    const TrainConfig& config() const { return cfg_; }
    AdamW<float>& optimizer() { return opt_; }
    const AdamW<float>& optimizer() const { return opt_; }

    // One optimization step: context/predictor gradient update then EMA of the target encoder.
    TrainLogRecord train_step(const PairBatch& batch);

    // Draws the batch for `step` from the corpus; depends only on (seed, step).
    PairBatch sample_batch(const Corpus& corpus, std::span<const std::size_t> pool, std::int64_t step,
                           const PairSamplerConfig& sampler, std::vector<std::string>* skipped = nullptr) const;

private:
    ModelState state_;
    TrainConfig cfg_;
    FrontendConfig frontend_;
    AdamW<float> opt_;
    // Activation caches are kept between steps so their buffers are reused.
    Encoder<float>::Cache enc_cache_;
    Predictor<float>::Cache pred_cache_;
};

// Checkpoint container:
//   "SJEPACKP" | u32 version | u64 len + JSON snapshot | i64 step | i64 optimizer steps
//   | u32 count | count x (u32 name len, name, u32 rows, u32 cols, f32 data) | u64 FNV-1a checksum
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
    nlohmann::json snapshot;  // resolved run configuration
    ModelState state;
    std::int64_t optimizer_steps = 0;
    std::vector<MatrixF> adam_m, adam_v;
};

void save_checkpoint(const std::filesystem::path& path, const Trainer& trainer, const nlohmann::json& snapshot);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Restores parameters and optimizer state from a checkpoint into `trainer`.
void restore_trainer(Trainer& trainer, const Checkpoint& ckpt);

// Model config stored in a checkpoint snapshot.
ModelConfig model_config_from_snapshot(const nlohmann::json& snapshot);

}  // namespace stemjepa
