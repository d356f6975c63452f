// SPDX-License-Identifier: Apache-2.0

#include "ricl/metamodel.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include <Eigen/Dense>

namespace ricl {
namespace {

template <typename T>
using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowVec = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// ---------------------------------------------------------------------------
// Parameter views

template <typename T>
struct Params {
    const T* base;
    Eigen::Map<const Mat<T>> weight(const LinearSlot& s) const { return {base + s.weight, s.in, s.out}; }
    Eigen::Map<const RowVec<T>> bias(const LinearSlot& s) const { return {base + s.bias, s.out}; }
    Eigen::Map<const RowVec<T>> gain(const NormSlot& s) const { return {base + s.gain, s.dim}; }
    Eigen::Map<const RowVec<T>> offset(const NormSlot& s) const { return {base + s.bias, s.dim}; }
};

template <typename T>
struct Grads {
    T* base;
    Eigen::Map<Mat<T>> weight(const LinearSlot& s) const { return {base + s.weight, s.in, s.out}; }
    Eigen::Map<RowVec<T>> bias(const LinearSlot& s) const { return {base + s.bias, s.out}; }
    Eigen::Map<RowVec<T>> gain(const NormSlot& s) const { return {base + s.gain, s.dim}; }
    Eigen::Map<RowVec<T>> offset(const NormSlot& s) const { return {base + s.bias, s.dim}; }
};

// ---------------------------------------------------------------------------
// Layers

template <typename T>
Mat<T> linear(const Params<T>& p, const LinearSlot& s, const Mat<T>& x) {
    Mat<T> y = x * p.weight(s);
    y.rowwise() += p.bias(s);
    return y;
}

/// Accumulates dW, db and returns dx (skipped when `need_dx` is false).
template <typename T>
Mat<T> linear_backward(const Params<T>& p, const Grads<T>& g, const LinearSlot& s, const Mat<T>& x,
                       const Mat<T>& dy, bool need_dx = true) {
    g.weight(s).noalias() += x.transpose() * dy;
    g.bias(s) += dy.colwise().sum();
    if (!need_dx) {
        return {};
    }
    return dy * p.weight(s).transpose();
}

template <typename T>
struct NormCache {
    Mat<T> xhat;
    ColVec<T> rstd;
};

template <typename T>
Mat<T> layer_norm(const Params<T>& p, const NormSlot& s, const Mat<T>& x, T eps, NormCache<T>& c) {
    const ColVec<T> mean = x.rowwise().mean();
    const Mat<T> centered = x.colwise() - mean;
    const ColVec<T> var = centered.array().square().rowwise().mean();
    // sqrt(var + eps) >= sqrt(eps) > 0 for every row.
    c.rstd = (var.array() + eps).rsqrt();
    c.xhat = c.rstd.asDiagonal() * centered;
    Mat<T> y = (c.xhat.array().rowwise() * p.gain(s).array()).matrix();
    y.rowwise() += p.offset(s);
    return y;
}

template <typename T>
Mat<T> layer_norm_backward(const Params<T>& p, const Grads<T>& g, const NormSlot& s, const NormCache<T>& c,
                           const Mat<T>& dy) {
    g.gain(s) += (dy.array() * c.xhat.array()).colwise().sum().matrix();
    g.offset(s) += dy.colwise().sum();
    const Mat<T> dxhat = (dy.array().rowwise() * p.gain(s).array()).matrix();
    const ColVec<T> m1 = dxhat.rowwise().mean();
    const ColVec<T> m2 = (dxhat.array() * c.xhat.array()).rowwise().mean();
    Mat<T> inner = dxhat.colwise() - m1;
    inner -= m2.asDiagonal() * c.xhat;
    return c.rstd.asDiagonal() * inner;
}

template <typename T>
T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2.0)));
}

template <typename T>
T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x * T(std::numbers::sqrt2 / 2.0)));
    const T pdf = std::exp(T(-0.5) * x * x) * T(0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2);
    return cdf + x * pdf;
}

template <typename T>
struct AttentionCache {
    Mat<T> xq, xkv, q, k, v, o;
    std::vector<Mat<T>> probs;  // one Lq x Lk matrix per head
};

template <typename T>
Mat<T> attention(const Params<T>& p, const AttentionSlots& s, const Mat<T>& xq, const Mat<T>& xkv, int heads,
                 bool causal, AttentionCache<T>& c) {
    c.xq = xq;
    c.xkv = xkv;
    c.q = linear(p, s.query, xq);
    c.k = linear(p, s.key, xkv);
    c.v = linear(p, s.value, xkv);
    const int d = static_cast<int>(c.q.cols());
    const int dh = d / heads;
    const auto lq = c.q.rows();
    const auto lk = c.k.rows();
    const T scale = T(1) / std::sqrt(T(dh));
    c.o.resize(lq, d);
    c.probs.resize(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Mat<T>& pr = c.probs[static_cast<std::size_t>(h)];
        pr.noalias() = (c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose()) * scale;
        for (Eigen::Index i = 0; i < lq; ++i) {
            const Eigen::Index len = causal ? std::min<Eigen::Index>(i + 1, lk) : lk;
            auto row = pr.row(i);
            auto seg = row.head(len);
            const T mx = seg.maxCoeff();
            seg = (seg.array() - mx).exp().matrix();
            seg /= seg.sum();
            if (len < lk) {
                row.tail(lk - len).setZero();
            }
        }
        c.o.middleCols(h * dh, dh).noalias() = pr * c.v.middleCols(h * dh, dh);
    }
    return linear(p, s.output, c.o);
}

template <typename T>
struct AttentionInputGrads {
    Mat<T> dxq;
    Mat<T> dxkv;
};

template <typename T>
AttentionInputGrads<T> attention_backward(const Params<T>& p, const Grads<T>& g, const AttentionSlots& s,
                                          int heads, const AttentionCache<T>& c, const Mat<T>& dout) {
    const Mat<T> dout_o = linear_backward(p, g, s.output, c.o, dout);
    const int d = static_cast<int>(c.q.cols());
    const int dh = d / heads;
    const T scale = T(1) / std::sqrt(T(dh));
    Mat<T> dq = Mat<T>::Zero(c.q.rows(), d);
    Mat<T> dk = Mat<T>::Zero(c.k.rows(), d);
    Mat<T> dv = Mat<T>::Zero(c.v.rows(), d);
    for (int h = 0; h < heads; ++h) {
        const Mat<T>& pr = c.probs[static_cast<std::size_t>(h)];
        const auto doh = dout_o.middleCols(h * dh, dh);
        const Mat<T> dp = doh * c.v.middleCols(h * dh, dh).transpose();
        dv.middleCols(h * dh, dh).noalias() = pr.transpose() * doh;
        const ColVec<T> rowdot = (pr.array() * dp.array()).rowwise().sum();
        const Mat<T> ds = (pr.array() * (dp.array().colwise() - rowdot.array())).matrix() * scale;
        dq.middleCols(h * dh, dh).noalias() = ds * c.k.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh).noalias() = ds.transpose() * c.q.middleCols(h * dh, dh);
    }
    AttentionInputGrads<T> out;
    out.dxq = linear_backward(p, g, s.query, c.xq, dq);
    out.dxkv = linear_backward(p, g, s.key, c.xkv, dk);
    out.dxkv += linear_backward(p, g, s.value, c.xkv, dv);
    return out;
}

template <typename T>
struct FeedForwardCache {
    Mat<T> x, pre, act;
};

template <typename T>
Mat<T> feed_forward(const Params<T>& p, const LinearSlot& ff1, const LinearSlot& ff2, const Mat<T>& x,
                    FeedForwardCache<T>& c) {
    c.x = x;
    c.pre = linear(p, ff1, x);
    c.act = c.pre.unaryExpr([](T v) { return gelu(v); });
    return linear(p, ff2, c.act);
}

template <typename T>
Mat<T> feed_forward_backward(const Params<T>& p, const Grads<T>& g, const LinearSlot& ff1, const LinearSlot& ff2,
                             const FeedForwardCache<T>& c, const Mat<T>& dy) {
    const Mat<T> dact = linear_backward(p, g, ff2, c.act, dy);
    const Mat<T> dpre = (dact.array() * c.pre.unaryExpr([](T v) { return gelu_grad(v); }).array()).matrix();
    return linear_backward(p, g, ff1, c.x, dpre);
}

// ---------------------------------------------------------------------------
// Full model

template <typename T>
struct EncoderLayerCache {
    NormCache<T> norm1, norm2;
    AttentionCache<T> attn;
    FeedForwardCache<T> ff;
};

template <typename T>
struct DecoderLayerCache {
    NormCache<T> norm1, norm2, norm3;
    AttentionCache<T> self_attn, cross_attn;
    FeedForwardCache<T> ff;
};

template <typename T>
struct ForwardCache {
    Mat<T> enc_in, dec_init_in, dec_query_in;
    std::vector<EncoderLayerCache<T>> encoder;
    NormCache<T> encoder_norm;
    Mat<T> memory;
    std::vector<DecoderLayerCache<T>> decoder;
    NormCache<T> decoder_norm;
    Mat<T> head_in;  // final decoder states of the predicted steps
    ColVec<T> log_std_raw;
    ColVec<T> sigma;
};

template <typename T>
Mat<T> positional_rows(const ModelLayout& layout, Eigen::Index rows) {
    const Eigen::Map<const Mat<double>> table(layout.positional.data(), layout.positional_rows,
                                              layout.config().d_model);
    return table.topRows(rows).template cast<T>();
}

template <typename T>
PredictiveOutput run_forward(const ModelParams<T>& params, const TaskDataset& task, ForwardCache<T>& c) {
    check_task_shape(params.config, task);
    const ModelLayout& L = *params.layout;
    const ModelConfig& cfg = params.config;
    const Params<T> p{params.values.data()};
    const T eps = static_cast<T>(cfg.layernorm_epsilon);
    const int heads = cfg.n_heads;
    const Eigen::Index m = task.context_len();
    const Eigen::Index n = task.query_len();
    const Eigen::Index ic = task.init_len;
    const Eigen::Index h = n - ic;

    c.enc_in.resize(m, 2);
    for (Eigen::Index k = 0; k < m; ++k) {
        c.enc_in(k, 0) = static_cast<T>(task.context_u[k]);
        c.enc_in(k, 1) = static_cast<T>(task.context_y[k]);
    }
    Mat<T> x = linear(p, L.encoder_embed, c.enc_in) + positional_rows<T>(L, m);
    c.encoder.resize(L.encoder.size());
    for (std::size_t i = 0; i < L.encoder.size(); ++i) {
        const auto& s = L.encoder[i];
        auto& lc = c.encoder[i];
        const Mat<T> a = layer_norm(p, s.norm1, x, eps, lc.norm1);
        x += attention(p, s.attn, a, a, heads, false, lc.attn);
        const Mat<T> b = layer_norm(p, s.norm2, x, eps, lc.norm2);
        x += feed_forward(p, s.ff1, s.ff2, b, lc.ff);
    }
    c.memory = layer_norm(p, L.encoder_norm, x, eps, c.encoder_norm);

    c.dec_init_in.resize(ic, 2);
    for (Eigen::Index k = 0; k < ic; ++k) {
        c.dec_init_in(k, 0) = static_cast<T>(task.query_u[k]);
        c.dec_init_in(k, 1) = static_cast<T>(task.query_y[k]);
    }
    c.dec_query_in.resize(h, 1);
    for (Eigen::Index k = 0; k < h; ++k) {
        c.dec_query_in(k, 0) = static_cast<T>(task.query_u[ic + k]);
    }
    Mat<T> y(n, cfg.d_model);
    y.topRows(ic) = linear(p, L.decoder_init_embed, c.dec_init_in);
    y.bottomRows(h) = linear(p, L.decoder_query_embed, c.dec_query_in);
    y += positional_rows<T>(L, n);
    c.decoder.resize(L.decoder.size());
    for (std::size_t i = 0; i < L.decoder.size(); ++i) {
        const auto& s = L.decoder[i];
        auto& lc = c.decoder[i];
        const Mat<T> a = layer_norm(p, s.norm1, y, eps, lc.norm1);
        y += attention(p, s.self_attn, a, a, heads, true, lc.self_attn);
        const Mat<T> b = layer_norm(p, s.norm2, y, eps, lc.norm2);
        y += attention(p, s.cross_attn, b, c.memory, heads, false, lc.cross_attn);
        const Mat<T> e = layer_norm(p, s.norm3, y, eps, lc.norm3);
        y += feed_forward(p, s.ff1, s.ff2, e, lc.ff);
    }
    const Mat<T> out = layer_norm(p, L.decoder_norm, y, eps, c.decoder_norm);
    c.head_in = out.bottomRows(h);

    const Mat<T> mu = linear(p, L.mu_head, c.head_in);
    const Mat<T> log_std = linear(p, L.log_std_head, c.head_in);
    c.log_std_raw = log_std.col(0);
    c.sigma.resize(h);

    PredictiveOutput pred;
    pred.mu.resize(static_cast<std::size_t>(h));
    pred.sigma.resize(static_cast<std::size_t>(h));
    const T lim = static_cast<T>(kLogStdClamp);
    for (Eigen::Index k = 0; k < h; ++k) {
        const T raw = c.log_std_raw(k);
        if (!std::isfinite(mu(k, 0)) || !std::isfinite(raw)) {
            throw NumericError("forward: non-finite model output (training divergence)");
        }
        c.sigma(k) = std::exp(std::clamp(raw, -lim, lim));
        pred.mu[static_cast<std::size_t>(k)] = static_cast<double>(mu(k, 0));
        pred.sigma[static_cast<std::size_t>(k)] = static_cast<double>(c.sigma(k));
    }
    return pred;
}

template <typename T>
void run_backward(const ModelParams<T>& params, const ForwardCache<T>& c, const RiskEvaluation& risk, T* grad) {
    const ModelLayout& L = *params.layout;
    const int heads = params.config.n_heads;
    const Params<T> p{params.values.data()};
    const Grads<T> g{grad};
    const Eigen::Index h = c.head_in.rows();
    const Eigen::Index ic = c.dec_init_in.rows();
    const Eigen::Index n = ic + h;

    Mat<T> dmu(h, 1);
    Mat<T> dlog_std(h, 1);
    const T lim = static_cast<T>(kLogStdClamp);
    for (Eigen::Index k = 0; k < h; ++k) {
        dmu(k, 0) = static_cast<T>(risk.d_mu[static_cast<std::size_t>(k)]);
        const T raw = c.log_std_raw(k);
        const bool inside = raw >= -lim && raw <= lim;
        dlog_std(k, 0) = inside ? static_cast<T>(risk.d_sigma[static_cast<std::size_t>(k)]) * c.sigma(k) : T(0);
    }
    Mat<T> dhead = linear_backward(p, g, L.mu_head, c.head_in, dmu);
    dhead += linear_backward(p, g, L.log_std_head, c.head_in, dlog_std);

    Mat<T> dout = Mat<T>::Zero(n, params.config.d_model);
    dout.bottomRows(h) = dhead;
    Mat<T> dy = layer_norm_backward(p, g, L.decoder_norm, c.decoder_norm, dout);
    Mat<T> dmemory = Mat<T>::Zero(c.memory.rows(), c.memory.cols());
    for (std::size_t i = L.decoder.size(); i-- > 0;) {
        const auto& s = L.decoder[i];
        const auto& lc = c.decoder[i];
        const Mat<T> de = feed_forward_backward(p, g, s.ff1, s.ff2, lc.ff, dy);
        dy += layer_norm_backward(p, g, s.norm3, lc.norm3, de);
        const auto cross = attention_backward(p, g, s.cross_attn, heads, lc.cross_attn, dy);
        dmemory += cross.dxkv;
        dy += layer_norm_backward(p, g, s.norm2, lc.norm2, cross.dxq);
        const auto self = attention_backward(p, g, s.self_attn, heads, lc.self_attn, dy);
        const Mat<T> da = self.dxq + self.dxkv;
        dy += layer_norm_backward(p, g, s.norm1, lc.norm1, da);
    }
    linear_backward(p, g, L.decoder_init_embed, c.dec_init_in, Mat<T>(dy.topRows(ic)), false);
    linear_backward(p, g, L.decoder_query_embed, c.dec_query_in, Mat<T>(dy.bottomRows(h)), false);

    Mat<T> dx = layer_norm_backward(p, g, L.encoder_norm, c.encoder_norm, dmemory);
    for (std::size_t i = L.encoder.size(); i-- > 0;) {
        const auto& s = L.encoder[i];
        const auto& lc = c.encoder[i];
        const Mat<T> db = feed_forward_backward(p, g, s.ff1, s.ff2, lc.ff, dx);
        dx += layer_norm_backward(p, g, s.norm2, lc.norm2, db);
        const auto self = attention_backward(p, g, s.attn, heads, lc.attn, dx);
        const Mat<T> da = self.dxq + self.dxkv;
        dx += layer_norm_backward(p, g, s.norm1, lc.norm1, da);
    }
    linear_backward(p, g, L.encoder_embed, c.enc_in, dx, false);
}

template <typename T>
std::span<T> find_array(const ModelLayout& layout, AlignedVector<T>& values, std::string_view name) {
    const ArrayInfo* info = layout.find(name);
    if (info == nullptr) {
        throw ArgumentError("no parameter array named '" + std::string(name) + "'");
    }
    return std::span<T>(values).subspan(info->offset, info->size);
}

template <typename T>
std::span<const T> find_array(const ModelLayout& layout, const AlignedVector<T>& values, std::string_view name) {
    const ArrayInfo* info = layout.find(name);
    if (info == nullptr) {
        throw ArgumentError("no parameter array named '" + std::string(name) + "'");
    }
    return std::span<const T>(values).subspan(info->offset, info->size);
}

void check_risk_shape(const RiskEvaluation& r, std::size_t h) {
    if (r.d_mu.size() != h || r.d_sigma.size() != h) {
        throw ArgumentError("risk function returned derivatives of the wrong length");
    }
    if (!std::isfinite(r.value)) {
        throw NumericError("loss_and_grad: non-finite risk value");
    }
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

void ModelConfig::validate() const {
    if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
        throw ConfigError("model.d_model must be a positive multiple of model.n_heads");
    }
    if (n_encoder_layers < 0 || n_decoder_layers < 0) {
        throw ConfigError("model layer counts must be >= 0");
    }
    if (d_ff < 1) {
        throw ConfigError("model.d_ff must be >= 1");
    }
    if (max_context_len < 1 || max_query_len < 2) {
        throw ConfigError("model.max_context_len must be >= 1 and model.max_query_len >= 2");
    }
    if (!(layernorm_epsilon > 0.0) || !std::isfinite(layernorm_epsilon)) {
        throw ConfigError("model.layernorm_epsilon must be > 0");
    }
    if (positional_encoding != "sinusoidal") {
        throw ConfigError("model.positional_encoding must be \"sinusoidal\"");
    }
}

ModelConfig ModelConfig::full_scale() {
    ModelConfig c;
    c.d_model = 256;
    c.n_heads = 8;
    c.n_encoder_layers = 3;
    c.n_decoder_layers = 3;
    c.d_ff = 1024;
    c.max_context_len = 512;
    c.max_query_len = 256;
    return c;
}

json to_json(const ModelConfig& cfg) {
    return json{
        {"d_model", cfg.d_model},
        {"n_heads", cfg.n_heads},
        {"n_encoder_layers", cfg.n_encoder_layers},
        {"n_decoder_layers", cfg.n_decoder_layers},
        {"d_ff", cfg.d_ff},
        {"max_context_len", cfg.max_context_len},
        {"max_query_len", cfg.max_query_len},
        {"layernorm_epsilon", cfg.layernorm_epsilon},
        {"positional_encoding", cfg.positional_encoding},
    };
}

void read_model_config(StrictObject& obj, ModelConfig& cfg) {
    obj.get("d_model", cfg.d_model);
    obj.get("n_heads", cfg.n_heads);
    obj.get("n_encoder_layers", cfg.n_encoder_layers);
    obj.get("n_decoder_layers", cfg.n_decoder_layers);
    obj.get("d_ff", cfg.d_ff);
    obj.get("max_context_len", cfg.max_context_len);
    obj.get("max_query_len", cfg.max_query_len);
    obj.get("layernorm_epsilon", cfg.layernorm_epsilon);
    obj.get("positional_encoding", cfg.positional_encoding);
    obj.finish();
    cfg.validate();
}

ModelConfig model_config_from_json(const json& j, const std::string& path) {
    ModelConfig cfg;
    StrictObject obj(j, path);
    read_model_config(obj, cfg);
    return cfg;
}

std::int64_t param_count(const ModelConfig& cfg) {
    const std::int64_t d = cfg.d_model;
    const std::int64_t f = cfg.d_ff;
    const std::int64_t norm = 2 * d;
    const std::int64_t attn = 4 * (d * d + d);
    const std::int64_t ffn = 2 * d * f + f + d;
    const std::int64_t enc_layer = 2 * norm + attn + ffn;
    const std::int64_t dec_layer = 3 * norm + 2 * attn + ffn;
    const std::int64_t embeds = (2 * d + d) + (2 * d + d) + (d + d);
    const std::int64_t heads = 2 * (d + 1);
    return embeds + cfg.n_encoder_layers * enc_layer + norm + cfg.n_decoder_layers * dec_layer + norm + heads;
}

// ---------------------------------------------------------------------------
// Layout

ModelLayout::ModelLayout(const ModelConfig& cfg) : config_(cfg) {
    cfg.validate();
    const int d = cfg.d_model;
    encoder_embed = add_linear("encoder.embed", 2, d, InitKind::fan_in_normal);
    for (int i = 0; i < cfg.n_encoder_layers; ++i) {
        const std::string pre = "encoder.layers." + std::to_string(i) + ".";
        EncoderLayerSlots s;
        s.norm1 = add_norm(pre + "norm1", d);
        s.attn = add_attention(pre + "attn", d);
        s.norm2 = add_norm(pre + "norm2", d);
        s.ff1 = add_linear(pre + "ff1", d, cfg.d_ff, InitKind::fan_in_normal);
        s.ff2 = add_linear(pre + "ff2", cfg.d_ff, d, InitKind::fan_in_normal);
        encoder.push_back(s);
    }
    encoder_norm = add_norm("encoder.norm", d);
    decoder_init_embed = add_linear("decoder.init_embed", 2, d, InitKind::fan_in_normal);
    decoder_query_embed = add_linear("decoder.query_embed", 1, d, InitKind::fan_in_normal);
    for (int i = 0; i < cfg.n_decoder_layers; ++i) {
        const std::string pre = "decoder.layers." + std::to_string(i) + ".";
        DecoderLayerSlots s;
        s.norm1 = add_norm(pre + "norm1", d);
        s.self_attn = add_attention(pre + "self_attn", d);
        s.norm2 = add_norm(pre + "norm2", d);
        s.cross_attn = add_attention(pre + "cross_attn", d);
        s.norm3 = add_norm(pre + "norm3", d);
        s.ff1 = add_linear(pre + "ff1", d, cfg.d_ff, InitKind::fan_in_normal);
        s.ff2 = add_linear(pre + "ff2", cfg.d_ff, d, InitKind::fan_in_normal);
        decoder.push_back(s);
    }
    decoder_norm = add_norm("decoder.norm", d);
    mu_head = add_linear("head.mu", d, 1, InitKind::fan_in_normal);
    log_std_head = add_linear("head.log_std", d, 1, InitKind::small_fan_in_normal);

    positional_rows = std::max(cfg.max_context_len, cfg.max_query_len);
    positional.assign(static_cast<std::size_t>(positional_rows) * static_cast<std::size_t>(d), 0.0);
    for (int pos = 0; pos < positional_rows; ++pos) {
        for (int i = 0; i < d; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / d);
            const double angle = pos * freq;
            positional[static_cast<std::size_t>(pos) * d + i] = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    }
}

const ArrayInfo* ModelLayout::find(std::string_view name) const {
    for (const auto& a : arrays_) {
        if (a.name == name) {
            return &a;
        }
    }
    return nullptr;
}

std::size_t ModelLayout::add_array(const std::string& name, std::vector<std::int64_t> shape, InitKind init) {
    std::size_t size = 1;
    for (auto s : shape) {
        size *= static_cast<std::size_t>(s);
    }
    arrays_.push_back(ArrayInfo{name, std::move(shape), total_, size, init});
    const std::size_t offset = total_;
    total_ += size;
    return offset;
}

LinearSlot ModelLayout::add_linear(const std::string& name, int in, int out, InitKind init) {
    LinearSlot s;
    s.in = in;
    s.out = out;
    s.weight = add_array(name + ".weight", {in, out}, init);
    s.bias = add_array(name + ".bias", {out}, InitKind::zeros);
    return s;
}

NormSlot ModelLayout::add_norm(const std::string& name, int dim) {
    NormSlot s;
    s.dim = dim;
    s.gain = add_array(name + ".gain", {dim}, InitKind::ones);
    s.bias = add_array(name + ".bias", {dim}, InitKind::zeros);
    return s;
}

AttentionSlots ModelLayout::add_attention(const std::string& name, int dim) {
    AttentionSlots s;
    s.query = add_linear(name + ".query", dim, dim, InitKind::fan_in_normal);
    s.key = add_linear(name + ".key", dim, dim, InitKind::fan_in_normal);
    s.value = add_linear(name + ".value", dim, dim, InitKind::fan_in_normal);
    s.output = add_linear(name + ".output", dim, dim, InitKind::fan_in_normal);
    return s;
}

// ---------------------------------------------------------------------------
// Params

template <typename T>
std::span<T> ModelParams<T>::array(std::string_view name) {
    return find_array(*layout, values, name);
}

template <typename T>
std::span<const T> ModelParams<T>::array(std::string_view name) const {
    return find_array(*layout, values, name);
}

template <typename T>
std::span<const T> GradientBundle<T>::array(std::string_view name) const {
    return find_array(*layout, values, name);
}

template <typename T>
ModelParams<T> zero_params(const ModelConfig& cfg) {
    auto layout = std::make_shared<const ModelLayout>(cfg);
    const std::size_t n = layout->total();
    return ModelParams<T>{cfg, std::move(layout), AlignedVector<T>(n, T(0))};
}

template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, Rng& rng) {
    ModelParams<T> p = zero_params<T>(cfg);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (const auto& a : p.layout->arrays()) {
        T* dst = p.values.data() + a.offset;
        const double fan_in = a.shape.empty() ? 1.0 : static_cast<double>(a.shape.front());
        switch (a.init) {
            case InitKind::zeros:
                break;
            case InitKind::ones:
                std::fill(dst, dst + a.size, T(1));
                break;
            case InitKind::fan_in_normal:
            case InitKind::small_fan_in_normal: {
                // The log-std head starts near zero so that sigma = exp(s) ~ 1.
                const double scale = (a.init == InitKind::small_fan_in_normal ? 0.1 : 1.0) / std::sqrt(fan_in);
                for (std::size_t i = 0; i < a.size; ++i) {
                    dst[i] = static_cast<T>(scale * normal(rng));
                }
                break;
            }
        }
    }
    return p;
}

void check_task_shape(const ModelConfig& cfg, const TaskDataset& task) {
    const int m = task.context_len();
    const int n = task.query_len();
    if (task.context_y.size() != task.context_u.size() || task.query_y.size() != task.query_u.size()) {
        throw ArgumentError("task: input and output sequences differ in length");
    }
    if (m < 1 || m > cfg.max_context_len) {
        throw ArgumentError("task: context length " + std::to_string(m) + " outside [1, " +
                            std::to_string(cfg.max_context_len) + "]");
    }
    if (n > cfg.max_query_len) {
        throw ArgumentError("task: query length " + std::to_string(n) + " exceeds max_query_len " +
                            std::to_string(cfg.max_query_len));
    }
    if (!(task.init_len > 0 && task.init_len < n)) {
        throw ArgumentError("task: init_len must satisfy 0 < c < n");
    }
}

template <typename T>
PredictiveOutput forward(const ModelParams<T>& params, const TaskDataset& task) {
    ForwardCache<T> cache;
    return run_forward(params, task, cache);
}

template <typename T>
LossAndGrad<T> loss_and_grad(const ModelParams<T>& params, std::span<const TaskDataset> batch, const RiskFn& risk,
                             int threads) {
    if (batch.empty()) {
        throw ArgumentError("loss_and_grad: empty batch");
    }
    const std::size_t np = params.values.size();
    const std::size_t wave = static_cast<std::size_t>(std::max(1, threads));
    LossAndGrad<T> out;
    out.grad = GradientBundle<T>{params.layout, AlignedVector<T>(np, T(0))};
    out.risks.resize(batch.size());
    std::vector<AlignedVector<T>> buffers(std::min(wave, batch.size()), AlignedVector<T>(np));

    for (std::size_t first = 0; first < batch.size(); first += wave) {
        const std::size_t count = std::min(wave, batch.size() - first);
        parallel_for(count, threads, [&](std::size_t j) {
            AlignedVector<T>& buf = buffers[j];
            std::fill(buf.begin(), buf.end(), T(0));
            const TaskDataset& task = batch[first + j];
            ForwardCache<T> cache;
            const PredictiveOutput pred = run_forward(params, task, cache);
            const RiskEvaluation r = risk(task.target(), pred);
            check_risk_shape(r, pred.mu.size());
            out.risks[first + j] = r.value;
            run_backward(params, cache, r, buf.data());
        });
        for (std::size_t j = 0; j < count; ++j) {
            const AlignedVector<T>& buf = buffers[j];
            for (std::size_t i = 0; i < np; ++i) {
                out.grad.values[i] += buf[i];
            }
        }
    }

    double total = 0.0;
    for (double r : out.risks) {
        total += r;
    }
    out.loss = total / static_cast<double>(batch.size());
    const T inv = T(1) / static_cast<T>(batch.size());
    for (auto& v : out.grad.values) {
        v *= inv;
        if (!std::isfinite(v)) {
            throw NumericError("loss_and_grad: non-finite gradient");
        }
    }
    return out;
}

template <typename T>
std::vector<double> evaluate_risks(const ModelParams<T>& params, std::span<const TaskDataset> batch, const RiskFn& risk,
                                   int threads) {
    std::vector<double> risks(batch.size());
    parallel_for(batch.size(), threads, [&](std::size_t i) {
        const TaskDataset& task = batch[i];
        const PredictiveOutput pred = forward(params, task);
        const RiskEvaluation r = risk(task.target(), pred);
        if (!std::isfinite(r.value)) {
            throw NumericError("evaluate_risks: non-finite risk value");
        }
        risks[i] = r.value;
    });
    return risks;
}

#define RICL_INSTANTIATE(T)                                                                                         \
    template struct ModelParams<T>;                                                                                 \
    template struct GradientBundle<T>;                                                                              \
    template ModelParams<T> zero_params<T>(const ModelConfig&);                                                     \
    template ModelParams<T> init_params<T>(const ModelConfig&, Rng&);                                               \
    template PredictiveOutput forward<T>(const ModelParams<T>&, const TaskDataset&);                                \
    template LossAndGrad<T> loss_and_grad<T>(const ModelParams<T>&, std::span<const TaskDataset>, const RiskFn&,    \
                                             int);                                                                  \
    template std::vector<double> evaluate_risks<T>(const ModelParams<T>&, std::span<const TaskDataset>,             \
                                                   const RiskFn&, int);

RICL_INSTANTIATE(float)
RICL_INSTANTIATE(double)

#undef RICL_INSTANTIATE

}  // namespace ricl
