#pragma once

// Minimal dense layers with explicit backward passes. Activations are stacked
// as [batch*tokens x features] row-major matrices; layers that mix tokens
// (attention) take the per-sample sequence length explicitly.

#include <Eigen/Core>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

namespace stemjepa::nn {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using Rng = std::mt19937_64;

template <typename T>
struct Parameter {
    std::string name;
    Matrix<T> value;
    Matrix<T> grad;
    bool decay = true;

    Parameter() = default;
    Parameter(std::string n, Matrix<T> v, bool wd)
        : name(std::move(n)), value(std::move(v)), grad(Matrix<T>::Zero(value.rows(), value.cols())),
          decay(wd) {}

    void zero_grad() { grad.setZero(value.rows(), value.cols()); }
    Eigen::Index size() const { return value.size(); }
};

template <typename T>
using ParamRefs = std::vector<Parameter<T>*>;

template <typename T>
using ConstParamRefs = std::vector<const Parameter<T>*>;

template <typename T>
Matrix<T> xavier_uniform(int rows, int cols, Rng& rng) {
    const double bound = std::sqrt(6.0 / (rows + cols));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Matrix<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
    return m;
}

template <typename T>
Matrix<T> normal_init(int rows, int cols, double std, Rng& rng) {
    std::normal_distribution<double> dist(0.0, std);
    Matrix<T> m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(dist(rng));
    return m;
}

// y = x W + b with W stored [in x out].
template <typename T>
class Linear {
public:
    Linear() = default;
    Linear(const std::string& name, int in, int out, Rng& rng)
        : weight(name + ".weight", xavier_uniform<T>(in, out, rng), true),
          bias(name + ".bias", Matrix<T>::Zero(1, out), false) {}

    int in_features() const { return static_cast<int>(weight.value.rows()); }
    int out_features() const { return static_cast<int>(weight.value.cols()); }

    Matrix<T> forward(const Matrix<T>& x) const {
        Matrix<T> y(x.rows(), weight.value.cols());
        y.noalias() = x * weight.value;
        y.rowwise() += bias.value.row(0);
        return y;
    }

    // Accumulates parameter gradients; returns dL/dx.
    Matrix<T> backward(const Matrix<T>& x, const Matrix<T>& dy) {
        weight.grad.noalias() += x.transpose() * dy;
        bias.grad.row(0) += dy.colwise().sum();
        Matrix<T> dx(dy.rows(), weight.value.rows());
        dx.noalias() = dy * weight.value.transpose();
        return dx;
    }

    void collect(ParamRefs<T>& out) {
        out.push_back(&weight);
        out.push_back(&bias);
    }

    Parameter<T> weight;
    Parameter<T> bias;
};

template <typename T>
class LayerNorm {
public:
    struct Cache {
        Matrix<T> normalized;
        Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std;
    };

    LayerNorm() = default;
    LayerNorm(const std::string& name, int dim)
        : gamma(name + ".weight", Matrix<T>::Ones(1, dim), false),
          beta(name + ".bias", Matrix<T>::Zero(1, dim), false) {}

    Matrix<T> forward(const Matrix<T>& x, Cache* cache) const {
        const Eigen::Matrix<T, Eigen::Dynamic, 1> mean = x.rowwise().mean();
        Matrix<T> xhat = x.colwise() - mean;
        Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std =
            ((xhat.array().square().rowwise().sum() / static_cast<T>(x.cols())) + kEps).rsqrt();
        xhat.array().colwise() *= inv_std.array();
        Matrix<T> y = (xhat.array().rowwise() * gamma.value.row(0).array()).matrix();
        y.rowwise() += beta.value.row(0);
        if (cache) {
            cache->normalized = std::move(xhat);
            cache->inv_std = std::move(inv_std);
        }
        return y;
    }

    Matrix<T> backward(const Cache& cache, const Matrix<T>& dy) {
        gamma.grad.row(0) += (dy.array() * cache.normalized.array()).colwise().sum().matrix();
        beta.grad.row(0) += dy.colwise().sum();
        const Matrix<T> dxhat = (dy.array().rowwise() * gamma.value.row(0).array()).matrix();
        const Eigen::Matrix<T, Eigen::Dynamic, 1> mean_d = dxhat.rowwise().mean();
        const Eigen::Matrix<T, Eigen::Dynamic, 1> mean_dx =
            (dxhat.array() * cache.normalized.array()).rowwise().mean();
        Matrix<T> dx = dxhat.colwise() - mean_d;
        dx.array() -= cache.normalized.array().colwise() * mean_dx.array();
        dx.array().colwise() *= cache.inv_std.array();
        return dx;
    }

    void collect(ParamRefs<T>& out) {
        out.push_back(&gamma);
        out.push_back(&beta);
    }

    static constexpr T kEps = T(1e-6);
    Parameter<T> gamma;
    Parameter<T> beta;
};

// tanh approximation of GELU (vectorizes; the erf form does not).
inline constexpr double kGeluC = 0.79788456080286535588;  // sqrt(2/pi)
inline constexpr double kGeluA = 0.044715;

template <typename T>
Matrix<T> gelu(const Matrix<T>& x) {
    const auto a = x.array();
    const auto inner = T(kGeluC) * (a + T(kGeluA) * a.cube());
    return (T(0.5) * a * (T(1) + inner.tanh())).matrix();
}

template <typename T>
Matrix<T> gelu_backward(const Matrix<T>& x, const Matrix<T>& dy) {
    const auto a = x.array();
    const Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> t =
        (T(kGeluC) * (a + T(kGeluA) * a.cube())).tanh();
    const auto dinner = T(kGeluC) * (T(1) + T(3 * kGeluA) * a.square());
    return (dy.array() * (T(0.5) * (T(1) + t) + T(0.5) * a * (T(1) - t.square()) * dinner)).matrix();
}

template <typename T>
Matrix<T> relu(const Matrix<T>& x) {
    return x.cwiseMax(T(0));
}

template <typename T>
Matrix<T> relu_backward(const Matrix<T>& x, const Matrix<T>& dy) {
    return (x.array() > T(0)).select(dy, T(0));
}

template <typename T>
class MultiHeadAttention {
public:
    struct Cache {
        Matrix<T> input;
        Matrix<T> qkv;
        Matrix<T> heads;               // concatenated head outputs, before projection
        std::vector<Matrix<T>> probs;  // one [L x L] per (sample, head)
    };

    MultiHeadAttention() = default;
    MultiHeadAttention(const std::string& name, int dim, int n_heads, Rng& rng)
        : qkv_(name + ".qkv", dim, 3 * dim, rng), proj_(name + ".proj", dim, dim, rng),
          dim_(dim), heads_(n_heads) {}

    Matrix<T> forward(Matrix<T> x, int seq_len, Cache* cache) const {
        const Eigen::Index batch = x.rows() / seq_len;
        const int dh = dim_ / heads_;
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));
        Matrix<T> qkv = qkv_.forward(x);
        Matrix<T> heads(x.rows(), dim_);
        if (cache) cache->probs.resize(static_cast<std::size_t>(batch * heads_));
        Matrix<T> local(seq_len, seq_len);
        for (Eigen::Index b = 0; b < batch; ++b) {
            const Eigen::Index row0 = b * seq_len;
            for (int h = 0; h < heads_; ++h) {
                Matrix<T>& scores = cache ? cache->probs[static_cast<std::size_t>(b * heads_ + h)] : local;
                scores.resize(seq_len, seq_len);
                const auto q = qkv.block(row0, h * dh, seq_len, dh);
                const auto k = qkv.block(row0, dim_ + h * dh, seq_len, dh);
                const auto v = qkv.block(row0, 2 * dim_ + h * dh, seq_len, dh);
                scores.noalias() = (q * scale) * k.transpose();
                softmax_rows(scores);
                heads.block(row0, h * dh, seq_len, dh).noalias() = scores * v;
            }
        }
        Matrix<T> y = proj_.forward(heads);
        if (cache) {
            cache->input = std::move(x);
            cache->qkv = std::move(qkv);
            cache->heads = std::move(heads);
        }
        return y;
    }

    Matrix<T> backward(const Cache& cache, const Matrix<T>& dy, int seq_len) {
        const Eigen::Index batch = dy.rows() / seq_len;
        const int dh = dim_ / heads_;
        const T scale = T(1) / std::sqrt(static_cast<T>(dh));
        const Matrix<T> dheads = proj_.backward(cache.heads, dy);
        Matrix<T> dqkv(dy.rows(), 3 * dim_);
        Matrix<T> dp(seq_len, seq_len);
        for (Eigen::Index b = 0; b < batch; ++b) {
            const Eigen::Index row0 = b * seq_len;
            for (int h = 0; h < heads_; ++h) {
                const Matrix<T>& p = cache.probs[static_cast<std::size_t>(b * heads_ + h)];
                const auto q = cache.qkv.block(row0, h * dh, seq_len, dh);
                const auto k = cache.qkv.block(row0, dim_ + h * dh, seq_len, dh);
                const auto v = cache.qkv.block(row0, 2 * dim_ + h * dh, seq_len, dh);
                const auto dout = dheads.block(row0, h * dh, seq_len, dh);
                dqkv.block(row0, 2 * dim_ + h * dh, seq_len, dh).noalias() = p.transpose() * dout;
                dp.noalias() = dout * v.transpose();
                // softmax backward: dS = P * (dP - rowsum(dP * P))
                for (Eigen::Index r = 0; r < seq_len; ++r) {
                    const T inner = dp.row(r).dot(p.row(r));
                    dp.row(r) = scale * (p.row(r).array() * (dp.row(r).array() - inner)).matrix();
                }
                dqkv.block(row0, h * dh, seq_len, dh).noalias() = dp * k;
                dqkv.block(row0, dim_ + h * dh, seq_len, dh).noalias() = dp.transpose() * q;
            }
        }
        return qkv_.backward(cache.input, dqkv);
    }

    void collect(ParamRefs<T>& out) {
        qkv_.collect(out);
        proj_.collect(out);
    }

private:
    static void softmax_rows(Matrix<T>& s) {
        for (Eigen::Index r = 0; r < s.rows(); ++r) {
            const T mx = s.row(r).maxCoeff();
            s.row(r) = (s.row(r).array() - mx).exp();
            s.row(r) /= s.row(r).sum();
        }
    }

    Linear<T> qkv_;
    Linear<T> proj_;
    int dim_ = 0;
    int heads_ = 1;
};

// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
template <typename T>
class TransformerBlock {
public:
    struct Cache {
        typename LayerNorm<T>::Cache ln1;
        typename MultiHeadAttention<T>::Cache attn;
        typename LayerNorm<T>::Cache ln2;
        Matrix<T> mlp_in;
        Matrix<T> hidden_pre;
        Matrix<T> hidden;
    };

    TransformerBlock() = default;
    TransformerBlock(const std::string& name, int dim, int heads, int mlp_dim, Rng& rng)
        : ln1_(name + ".norm1", dim), attn_(name + ".attn", dim, heads, rng),
          ln2_(name + ".norm2", dim), fc1_(name + ".mlp.fc1", dim, mlp_dim, rng),
          fc2_(name + ".mlp.fc2", mlp_dim, dim, rng) {}

    Matrix<T> forward(const Matrix<T>& x, int seq_len, Cache* cache) const {
        Matrix<T> h = x + attn_.forward(ln1_.forward(x, cache ? &cache->ln1 : nullptr), seq_len,
                                        cache ? &cache->attn : nullptr);
        Matrix<T> mlp_in = ln2_.forward(h, cache ? &cache->ln2 : nullptr);
        Matrix<T> pre = fc1_.forward(mlp_in);
        Matrix<T> act = gelu(pre);
        h += fc2_.forward(act);
        if (cache) {
            cache->mlp_in = std::move(mlp_in);
            cache->hidden_pre = std::move(pre);
            cache->hidden = std::move(act);
        }
        return h;
    }

    Matrix<T> backward(const Cache& cache, const Matrix<T>& dy, int seq_len) {
        const Matrix<T> dact = fc2_.backward(cache.hidden, dy);
        const Matrix<T> dpre = gelu_backward(cache.hidden_pre, dact);
        const Matrix<T> dmlp_in = fc1_.backward(cache.mlp_in, dpre);
        Matrix<T> dx = dy + ln2_.backward(cache.ln2, dmlp_in);
        const Matrix<T> dattn_in = attn_.backward(cache.attn, dx, seq_len);
        dx += ln1_.backward(cache.ln1, dattn_in);
        return dx;
    }

    void collect(ParamRefs<T>& out) {
        ln1_.collect(out);
        attn_.collect(out);
        ln2_.collect(out);
        fc1_.collect(out);
        fc2_.collect(out);
    }

private:
    LayerNorm<T> ln1_;
    MultiHeadAttention<T> attn_;
    LayerNorm<T> ln2_;
    Linear<T> fc1_;
    Linear<T> fc2_;
};

template <typename T>
ConstParamRefs<T> as_const(const ParamRefs<T>& refs) {
    return ConstParamRefs<T>(refs.begin(), refs.end());
}

}  // namespace stemjepa::nn
