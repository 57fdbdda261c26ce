#ifndef ATTNSEG_VIT_HPP
#define ATTNSEG_VIT_HPP

// Vision Transformer with one class token per class, an optional register
// token, and per-head gated multi-head self-attention.
//
// Token layout: rows [0, C) are class tokens, [C, C + N) patch tokens in
// row-major patch order, and the register token is last when enabled.
// Activations are T x D matrices with one token per row; linear maps are
// applied on the right (x * W + b).

#include "attnseg/cls_masking.hpp"
#include "attnseg/core.hpp"
#include "attnseg/model_config.hpp"

#include <span>
#include <string>
#include <type_traits>
#include <vector>

namespace attnseg {

template <typename Scalar>
struct PatchEmbedParams {
    Mat<Scalar> proj;  // patch_dim x D
    Mat<Scalar> pos;   // N x D, patch tokens only
    Mat<Scalar> cls;   // C x D
    Mat<Scalar> reg;   // 1 x D, or 0 x D without a register token
};

template <typename Scalar>
struct LayerNormParams {
    RowVec<Scalar> scale;
    RowVec<Scalar> shift;
};

template <typename Scalar>
struct EncoderLayerParams {
    LayerNormParams<Scalar> ln1;
    // Per-head projections are column blocks [h * dh, (h + 1) * dh).
    Mat<Scalar> wq, wk, wv;
    RowVec<Scalar> bq, bk, bv;
    Mat<Scalar> wo;
    RowVec<Scalar> bo;
    LayerNormParams<Scalar> ln2;
    Mat<Scalar> w1;  // D x 4D
    RowVec<Scalar> b1;
    Mat<Scalar> w2;  // 4D x D
    RowVec<Scalar> b2;
};

/// One linear functional per class token: logit_c = <w_c, z_c> + b_c.
template <typename Scalar>
struct ClassifierParams {
    Mat<Scalar> weight;  // C x D
    Vec<Scalar> bias;    // C
};

template <typename Scalar>
struct TensorView {
    std::string name;
    std::span<Scalar> values;
    bool decay;
};

template <typename Scalar>
struct ModelParams {
    ModelConfig config;
    PatchEmbedParams<Scalar> embed;
    std::vector<EncoderLayerParams<Scalar>> layers;
    ClassifierParams<Scalar> head;

    /// Zero-valued parameters of the right shapes (also the gradient container).
    static ModelParams zeros(const ModelConfig& cfg)
    {
        cfg.validate();
        const int d = cfg.embed_dim;
        ModelParams p;
        p.config = cfg;
        p.embed.proj = Mat<Scalar>::Zero(cfg.patch_dim(), d);
        p.embed.pos = Mat<Scalar>::Zero(cfg.num_patches(), d);
        p.embed.cls = Mat<Scalar>::Zero(cfg.num_classes, d);
        p.embed.reg = Mat<Scalar>::Zero(cfg.use_reg ? 1 : 0, d);
        p.layers.resize(cfg.num_layers);
        for (auto& l : p.layers) {
            l.ln1 = {RowVec<Scalar>::Zero(d), RowVec<Scalar>::Zero(d)};
            l.ln2 = {RowVec<Scalar>::Zero(d), RowVec<Scalar>::Zero(d)};
            l.wq = l.wk = l.wv = l.wo = Mat<Scalar>::Zero(d, d);
            l.bq = l.bk = l.bv = l.bo = RowVec<Scalar>::Zero(d);
            l.w1 = Mat<Scalar>::Zero(d, cfg.mlp_dim());
            l.b1 = RowVec<Scalar>::Zero(cfg.mlp_dim());
            l.w2 = Mat<Scalar>::Zero(cfg.mlp_dim(), d);
            l.b2 = RowVec<Scalar>::Zero(d);
        }
        p.head.weight = Mat<Scalar>::Zero(cfg.num_classes, d);
        p.head.bias = Vec<Scalar>::Zero(cfg.num_classes);
        return p;
    }

    /// Truncated normal (sigma 0.02, cut at two sigma) for projections and
    /// tokens, zero biases, unit layer-norm scales.
    static ModelParams initialize(const ModelConfig& cfg, std::uint64_t seed)
    {
        ModelParams p = zeros(cfg);
        Rng rng(derive_seed(seed, 0x1417));
        std::normal_distribution<double> normal(0.0, 1.0);
        auto trunc_normal = [&](auto& m) {
            for (Eigen::Index i = 0; i < m.size(); ++i) {
                double z = normal(rng);
                while (std::abs(z) > 2.0) z = normal(rng);
                m.data()[i] = static_cast<Scalar>(0.02 * z);
            }
        };
        trunc_normal(p.embed.proj);
        trunc_normal(p.embed.pos);
        trunc_normal(p.embed.cls);
        trunc_normal(p.embed.reg);
        for (auto& l : p.layers) {
            l.ln1.scale.setOnes();
            l.ln2.scale.setOnes();
            trunc_normal(l.wq);
            trunc_normal(l.wk);
            trunc_normal(l.wv);
            trunc_normal(l.wo);
            trunc_normal(l.w1);
            trunc_normal(l.w2);
        }
        trunc_normal(p.head.weight);
        return p;
    }

    /// Flat views over every parameter tensor in a fixed order. `decay` marks
    /// the weight matrices that receive decoupled weight decay.
    std::vector<TensorView<Scalar>> tensors()
    {
        std::vector<TensorView<Scalar>> out;
        auto add = [&out](std::string name, auto& m, bool decay) {
            out.push_back({std::move(name), std::span<Scalar>(m.data(), static_cast<std::size_t>(m.size())), decay});
        };
        add("embed.proj", embed.proj, true);
        add("embed.pos", embed.pos, false);
        add("embed.cls", embed.cls, false);
        add("embed.reg", embed.reg, false);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            auto& l = layers[i];
            const std::string pre = "layer" + std::to_string(i) + ".";
            add(pre + "ln1.scale", l.ln1.scale, false);
            add(pre + "ln1.shift", l.ln1.shift, false);
            add(pre + "wq", l.wq, true);
            add(pre + "wk", l.wk, true);
            add(pre + "wv", l.wv, true);
            add(pre + "bq", l.bq, false);
            add(pre + "bk", l.bk, false);
            add(pre + "bv", l.bv, false);
            add(pre + "wo", l.wo, true);
            add(pre + "bo", l.bo, false);
            add(pre + "ln2.scale", l.ln2.scale, false);
            add(pre + "ln2.shift", l.ln2.shift, false);
            add(pre + "w1", l.w1, true);
            add(pre + "b1", l.b1, false);
            add(pre + "w2", l.w2, true);
            add(pre + "b2", l.b2, false);
        }
        add("head.weight", head.weight, true);
        add("head.bias", head.bias, false);
        return out;
    }

    std::size_t num_scalars()
    {
        std::size_t n = 0;
        for (const auto& t : tensors()) n += t.values.size();
        return n;
    }

    void set_zero()
    {
        for (auto& t : tensors()) std::fill(t.values.begin(), t.values.end(), Scalar(0));
    }

    template <typename Other>
    ModelParams<Other> cast() const
    {
        ModelParams<Other> o;
        o.config = config;
        o.embed = {embed.proj.template cast<Other>(), embed.pos.template cast<Other>(),
                   embed.cls.template cast<Other>(), embed.reg.template cast<Other>()};
        o.layers.resize(layers.size());
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const auto& a = layers[i];
            auto& b = o.layers[i];
            b.ln1 = {a.ln1.scale.template cast<Other>(), a.ln1.shift.template cast<Other>()};
            b.ln2 = {a.ln2.scale.template cast<Other>(), a.ln2.shift.template cast<Other>()};
            b.wq = a.wq.template cast<Other>();
            b.wk = a.wk.template cast<Other>();
            b.wv = a.wv.template cast<Other>();
            b.wo = a.wo.template cast<Other>();
            b.bq = a.bq.template cast<Other>();
            b.bk = a.bk.template cast<Other>();
            b.bv = a.bv.template cast<Other>();
            b.bo = a.bo.template cast<Other>();
            b.w1 = a.w1.template cast<Other>();
            b.b1 = a.b1.template cast<Other>();
            b.w2 = a.w2.template cast<Other>();
            b.b2 = a.b2.template cast<Other>();
        }
        o.head = {head.weight.template cast<Other>(), head.bias.template cast<Other>()};
        return o;
    }
};

/// Flattens image patches into rows, top-left patch first; within a patch
/// the order is (row, column, channel).
template <typename Scalar>
Mat<Scalar> patchify(const Image& image, const ModelConfig& cfg)
{
    if (image.height != cfg.image_size || image.width != cfg.image_size || image.channels != cfg.in_channels) {
        throw ConfigError("image " + std::to_string(image.height) + "x" + std::to_string(image.width) + "x" +
                          std::to_string(image.channels) + " does not match model input " +
                          std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) + "x" +
                          std::to_string(cfg.in_channels));
    }
    const int p = cfg.patch_size;
    const int g = cfg.grid();
    Mat<Scalar> out(cfg.num_patches(), cfg.patch_dim());
    for (int py = 0; py < g; ++py) {
        for (int px = 0; px < g; ++px) {
            const int row = py * g + px;
            int col = 0;
            for (int dy = 0; dy < p; ++dy) {
                for (int dx = 0; dx < p; ++dx) {
                    for (int c = 0; c < cfg.in_channels; ++c) {
                        out(row, col++) = static_cast<Scalar>(image.at(py * p + dy, px * p + dx, c));
                    }
                }
            }
        }
    }
    return out;
}

template <typename Scalar>
Mat<Scalar> embed_patches(const Image& image, const PatchEmbedParams<Scalar>& params, const ModelConfig& cfg)
{
    const Mat<Scalar> patches = patchify<Scalar>(image, cfg);
    if (params.proj.rows() != patches.cols() || params.pos.rows() != patches.rows()) {
        throw ConfigError("embed_patches: parameter shapes do not match config");
    }
    return patches * params.proj + params.pos;
}

template <typename Scalar>
Mat<Scalar> build_sequence(const Mat<Scalar>& patch_tokens, const PatchEmbedParams<Scalar>& params,
                           const ModelConfig& cfg)
{
    if (patch_tokens.rows() != cfg.num_patches() || patch_tokens.cols() != cfg.embed_dim) {
        throw ConfigError("build_sequence: expected " + std::to_string(cfg.num_patches()) + " patch tokens");
    }
    Mat<Scalar> seq(cfg.seq_len(), cfg.embed_dim);
    seq.topRows(cfg.num_classes) = params.cls;
    seq.middleRows(cfg.first_patch(), cfg.num_patches()) = patch_tokens;
    if (cfg.use_reg) seq.row(cfg.reg_index()) = params.reg.row(0);
    return seq;
}

template <typename Scalar>
struct LayerNormCache {
    Mat<Scalar> normalized;  // (x - mean) * rstd
    Vec<Scalar> rstd;
};

inline constexpr double kLayerNormEps = 1e-6;

template <typename Scalar>
Mat<Scalar> layer_norm(const Mat<Scalar>& x, const LayerNormParams<Scalar>& p, LayerNormCache<Scalar>* cache = nullptr)
{
    const Vec<Scalar> mean = x.rowwise().mean();
    Mat<Scalar> centered = x.colwise() - mean;
    const Vec<Scalar> var = centered.array().square().rowwise().mean();
    const Vec<Scalar> rstd = (var.array() + Scalar(kLayerNormEps)).rsqrt();
    centered = centered.array().colwise() * rstd.array();
    Mat<Scalar> out = (centered.array().rowwise() * p.scale.array()).rowwise() + p.shift.array();
    if (cache) {
        cache->normalized = std::move(centered);
        cache->rstd = rstd;
    }
    return out;
}

template <typename Scalar>
Mat<Scalar> layer_norm_backward(const Mat<Scalar>& dy, const LayerNormCache<Scalar>& cache,
                                const LayerNormParams<Scalar>& p, LayerNormParams<Scalar>& grad)
{
    grad.scale += (dy.array() * cache.normalized.array()).colwise().sum().matrix();
    grad.shift += dy.colwise().sum();
    const Mat<Scalar> dxhat = dy.array().rowwise() * p.scale.array();
    const Vec<Scalar> mean_d = dxhat.rowwise().mean();
    const Vec<Scalar> mean_dx = (dxhat.array() * cache.normalized.array()).rowwise().mean();
    Mat<Scalar> dx = dxhat.colwise() - mean_d;
    dx -= (cache.normalized.array().colwise() * mean_dx.array()).matrix();
    return dx.array().colwise() * cache.rstd.array();
}

/// In-place row softmax with max subtraction.
template <typename Scalar>
void softmax_rows(Mat<Scalar>& s)
{
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        auto row = s.row(r);
        const Scalar m = row.maxCoeff();
        row = (row.array() - m).exp();
        row /= row.sum();
    }
}

template <typename Scalar>
struct AttentionCache {
    Mat<Scalar> q, k, v;         // T x D, per-head column blocks
    std::vector<Mat<Scalar>> p;  // H x (T x T)
    Mat<Scalar> heads;           // T x D ungated head outputs
    Mat<Scalar> gated;           // T x D after gate scaling
};

template <typename Scalar>
struct MhsaResult {
    Mat<Scalar> out;                // T x D, after W^O
    std::vector<Mat<Scalar>> attn;  // H x (T x T)
};

namespace detail {

template <typename Scalar>
void check_gates(std::span<const Scalar> gates, int heads)
{
    if (static_cast<int>(gates.size()) != heads) {
        throw ConfigError("gated_mhsa: " + std::to_string(gates.size()) + " gates for " + std::to_string(heads) +
                          " heads");
    }
    for (Scalar g : gates) {
        if (!std::isfinite(static_cast<double>(g)) || g < Scalar(0) || g > Scalar(1)) {
            throw NumericError("gated_mhsa: gate value outside [0, 1]");
        }
    }
}

}  // namespace detail

/// concat_h(g_h * softmax(Q_h K_h^T / sqrt(dh)) V_h) W^O + b^O on an already
/// normalized sequence. Residual and layer norm belong to the caller.
template <typename Scalar>
MhsaResult<Scalar> gated_mhsa(const Mat<Scalar>& seq, const EncoderLayerParams<Scalar>& layer,
                              std::span<const Scalar> gates, AttentionCache<Scalar>* cache = nullptr)
{
    const int d = static_cast<int>(layer.wq.cols());
    const int heads = static_cast<int>(gates.size());
    detail::check_gates(gates, heads);
    if (heads <= 0 || d % heads != 0 || seq.cols() != layer.wq.rows()) {
        throw ConfigError("gated_mhsa: incompatible shapes");
    }
    if (!seq.allFinite()) throw NumericError("gated_mhsa: non-finite input sequence");
    const int dh = d / heads;
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));

    Mat<Scalar> q = (seq * layer.wq).rowwise() + layer.bq;
    Mat<Scalar> k = (seq * layer.wk).rowwise() + layer.bk;
    Mat<Scalar> v = (seq * layer.wv).rowwise() + layer.bv;

    MhsaResult<Scalar> res;
    res.attn.resize(heads);
    Mat<Scalar> concat(seq.rows(), d);
    Mat<Scalar> gated(seq.rows(), d);
    for (int h = 0; h < heads; ++h) {
        Mat<Scalar> s = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
        softmax_rows(s);
        concat.middleCols(h * dh, dh) = s * v.middleCols(h * dh, dh);
        gated.middleCols(h * dh, dh) = concat.middleCols(h * dh, dh) * gates[h];
        res.attn[h] = std::move(s);
    }
    res.out = (gated * layer.wo).rowwise() + layer.bo;
    if (cache) {
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->p = res.attn;
        cache->heads = std::move(concat);
        cache->gated = std::move(gated);
    }
    return res;
}

/// Gradient of gated_mhsa. Accumulates parameter gradients into `grad`
/// and d loss / d gate into `dgates`; returns d loss / d seq.
template <typename Scalar>
Mat<Scalar> gated_mhsa_backward(const Mat<Scalar>& dout, const Mat<Scalar>& seq, const AttentionCache<Scalar>& c,
                                const EncoderLayerParams<Scalar>& layer, std::span<const Scalar> gates,
                                EncoderLayerParams<Scalar>& grad, std::span<Scalar> dgates)
{
    const int d = static_cast<int>(layer.wq.cols());
    const int heads = static_cast<int>(gates.size());
    const int dh = d / heads;
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));

    grad.bo += dout.colwise().sum();
    grad.wo.noalias() += c.gated.transpose() * dout;
    const Mat<Scalar> dgated = dout * layer.wo.transpose();

    Mat<Scalar> dq(seq.rows(), d), dk(seq.rows(), d), dv(seq.rows(), d);
    for (int h = 0; h < heads; ++h) {
        const auto dgh = dgated.middleCols(h * dh, dh);
        dgates[h] += (dgh.array() * c.heads.middleCols(h * dh, dh).array()).sum();
        const Mat<Scalar> dhead = dgh * gates[h];
        const Mat<Scalar>& p = c.p[h];
        dv.middleCols(h * dh, dh).noalias() = p.transpose() * dhead;
        Mat<Scalar> dp = dhead * c.v.middleCols(h * dh, dh).transpose();
        const Vec<Scalar> inner = (dp.array() * p.array()).rowwise().sum();
        Mat<Scalar> ds = (p.array() * (dp.colwise() - inner).array()) * scale;
        dq.middleCols(h * dh, dh).noalias() = ds * c.k.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh).noalias() = ds.transpose() * c.q.middleCols(h * dh, dh);
    }
    grad.wq.noalias() += seq.transpose() * dq;
    grad.wk.noalias() += seq.transpose() * dk;
    grad.wv.noalias() += seq.transpose() * dv;
    grad.bq += dq.colwise().sum();
    grad.bk += dk.colwise().sum();
    grad.bv += dv.colwise().sum();
    Mat<Scalar> dseq = dq * layer.wq.transpose();
    dseq.noalias() += dk * layer.wk.transpose();
    dseq.noalias() += dv * layer.wv.transpose();
    return dseq;
}

template <typename Scalar>
Scalar gelu(Scalar x) noexcept
{
    return Scalar(0.5) * x * (Scalar(1) + std::erf(x * Scalar(0.70710678118654752)));
}

template <typename Scalar>
Scalar gelu_grad(Scalar x) noexcept
{
    const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x * Scalar(0.70710678118654752)));
    const Scalar pdf = std::exp(Scalar(-0.5) * x * x) * Scalar(0.39894228040143268);
    return cdf + x * pdf;
}

template <typename Scalar>
Vec<Scalar> classify(const Mat<Scalar>& cls_embeddings, const ClassifierParams<Scalar>& head)
{
    if (cls_embeddings.rows() != head.weight.rows() || cls_embeddings.cols() != head.weight.cols()) {
        throw ConfigError("classify: embeddings do not match classifier shape");
    }
    return (cls_embeddings.array() * head.weight.array()).rowwise().sum().matrix() + head.bias;
}

template <typename Scalar>
struct ForwardOutput {
    Vec<Scalar> logits;               // C
    Mat<Scalar> cls_embeddings;       // C x D, after output masking
    std::vector<Mat<Scalar>> attention;  // layer-major, L * H maps of T x T
    Mat<Scalar> reg_embedding;        // 1 x D, or empty without a register token
    int num_layers{0};
    int num_heads{0};

    const Mat<Scalar>& attn(int layer, int head) const { return attention.at(layer * num_heads + head); }
};

template <typename Scalar>
struct LayerTrace {
    LayerNormCache<Scalar> ln1;
    Mat<Scalar> ln1_out;
    AttentionCache<Scalar> attn;
    Mat<Scalar> mid;
    LayerNormCache<Scalar> ln2;
    Mat<Scalar> ln2_out;
    Mat<Scalar> pre_act;
    Mat<Scalar> act;
};

/// Everything the backward pass needs from one forward evaluation.
template <typename Scalar>
struct ForwardTrace {
    Mat<Scalar> patches;
    std::vector<LayerTrace<Scalar>> layers;
    Mat<Scalar> final_tokens;
    MaskVector mask;
};

/// Full forward pass. `gates` is num_layers x num_heads. Masked class tokens
/// have their output embeddings zeroed before classification; the register
/// token never reaches the classifier.
template <typename Scalar>
ForwardOutput<Scalar> encoder_forward(const Image& image, const ModelParams<Scalar>& params,
                                      const std::type_identity_t<Mat<Scalar>>& gates, const MaskVector& mask,
                                      ForwardTrace<Scalar>* trace = nullptr)
{
    const ModelConfig& cfg = params.config;
    if (gates.rows() != cfg.num_layers || gates.cols() != cfg.num_heads) {
        throw ConfigError("encoder_forward: gate matrix must be num_layers x num_heads");
    }
    if (mask.size() != cfg.num_classes) throw ConfigError("encoder_forward: mask length must equal num_classes");

    Mat<Scalar> patches = patchify<Scalar>(image, cfg);
    Mat<Scalar> z = build_sequence<Scalar>(patches * params.embed.proj + params.embed.pos, params.embed, cfg);

    ForwardOutput<Scalar> out;
    out.num_layers = cfg.num_layers;
    out.num_heads = cfg.num_heads;
    out.attention.reserve(static_cast<std::size_t>(cfg.num_layers) * cfg.num_heads);
    if (trace) {
        trace->patches = std::move(patches);
        trace->layers.assign(cfg.num_layers, {});
        trace->mask = mask;
    }

    for (int l = 0; l < cfg.num_layers; ++l) {
        const auto& layer = params.layers[l];
        LayerTrace<Scalar> local;
        LayerTrace<Scalar>& t = trace ? trace->layers[l] : local;
        const Mat<Scalar> gate_row = gates.row(l);
        const std::span<const Scalar> g(gate_row.data(), static_cast<std::size_t>(gate_row.size()));

        t.ln1_out = layer_norm(z, layer.ln1, &t.ln1);
        auto mhsa = gated_mhsa(t.ln1_out, layer, g, trace ? &t.attn : nullptr);
        t.mid = z + mhsa.out;
        for (auto& a : mhsa.attn) out.attention.push_back(std::move(a));

        t.ln2_out = layer_norm(t.mid, layer.ln2, &t.ln2);
        t.pre_act = (t.ln2_out * layer.w1).rowwise() + layer.b1;
        t.act = t.pre_act.unaryExpr([](Scalar x) { return gelu(x); });
        Mat<Scalar> next = (t.act * layer.w2).rowwise() + layer.b2;
        next += t.mid;
        z = std::move(next);
    }
    if (!z.allFinite()) throw NumericError("encoder_forward: non-finite activations");

    out.cls_embeddings = apply_output_mask(z.topRows(cfg.num_classes), mask);
    if (cfg.use_reg) out.reg_embedding = z.row(cfg.reg_index());
    out.logits = classify(out.cls_embeddings, params.head);
    if (trace) trace->final_tokens = std::move(z);
    return out;
}

/// Backpropagates d loss / d logits through a traced forward pass.
/// Parameter gradients are accumulated into `grad`; d loss / d gate
/// (num_layers x num_heads) into `dgates`.
template <typename Scalar>
void encoder_backward(const Vec<Scalar>& dlogits, const ForwardTrace<Scalar>& trace, const ModelParams<Scalar>& params,
                      const Mat<Scalar>& gates, ModelParams<Scalar>& grad, Mat<Scalar>& dgates)
{
    const ModelConfig& cfg = params.config;
    const Mat<Scalar> cls_out = apply_output_mask(trace.final_tokens.topRows(cfg.num_classes), trace.mask);

    grad.head.bias += dlogits;
    grad.head.weight += (cls_out.array().colwise() * dlogits.array()).matrix();

    Mat<Scalar> dz = Mat<Scalar>::Zero(cfg.seq_len(), cfg.embed_dim);
    for (int c = 0; c < cfg.num_classes; ++c) {
        if (!trace.mask.masked(c)) dz.row(c) = params.head.weight.row(c) * dlogits(c);
    }

    for (int l = cfg.num_layers - 1; l >= 0; --l) {
        const auto& layer = params.layers[l];
        auto& glayer = grad.layers[l];
        const auto& t = trace.layers[l];

        // MLP branch
        glayer.b2 += dz.colwise().sum();
        glayer.w2.noalias() += t.act.transpose() * dz;
        Mat<Scalar> dact = dz * layer.w2.transpose();
        dact.array() *= t.pre_act.unaryExpr([](Scalar x) { return gelu_grad(x); }).array();
        glayer.b1 += dact.colwise().sum();
        glayer.w1.noalias() += t.ln2_out.transpose() * dact;
        Mat<Scalar> dmid = dz + layer_norm_backward<Scalar>(dact * layer.w1.transpose(), t.ln2, layer.ln2, glayer.ln2);

        // attention branch
        const Mat<Scalar> gate_row = gates.row(l);
        RowVec<Scalar> dg = RowVec<Scalar>::Zero(cfg.num_heads);
        const Mat<Scalar> dln1 = gated_mhsa_backward<Scalar>(
            dmid, t.ln1_out, t.attn, layer, std::span<const Scalar>(gate_row.data(), gate_row.size()), glayer,
            std::span<Scalar>(dg.data(), dg.size()));
        dgates.row(l) += dg;
        dz = dmid + layer_norm_backward<Scalar>(dln1, t.ln1, layer.ln1, glayer.ln1);
    }

    grad.embed.cls += dz.topRows(cfg.num_classes);
    if (cfg.use_reg) grad.embed.reg += dz.row(cfg.reg_index());
    const auto dpatch = dz.middleRows(cfg.first_patch(), cfg.num_patches());
    grad.embed.pos += dpatch;
    grad.embed.proj.noalias() += trace.patches.transpose() * dpatch;
}

}  // namespace attnseg

#endif  // ATTNSEG_VIT_HPP
