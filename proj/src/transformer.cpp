#include "goskill/transformer.hpp"

#include <cmath>

namespace goskill::core {

Tensor causal_self_attention(const Tensor& x, const Tensor& wq, const Tensor& bq,
                             const Tensor& wk, const Tensor& bk, const Tensor& wv,
                             const Tensor& bv, const Tensor& wo, const Tensor& bo, int heads,
                             const std::vector<uint8_t>& valid) {
    const int d = x.cols();
    if (heads <= 0 || d % heads != 0) {
        throw ConfigError("attention width " + std::to_string(d) + " not divisible by " +
                          std::to_string(heads) + " heads");
    }
    const int hd = d / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));

    Tensor q = linear(x, wq, bq);
    Tensor k = linear(x, wk, bk);
    Tensor v = linear(x, wv, bv);

    std::vector<Tensor> outs;
    outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = col_slice(q, h * hd, hd);
        Tensor kh = col_slice(k, h * hd, hd);
        Tensor vh = col_slice(v, h * hd, hd);
        Tensor scores = scale(matmul_nt(qh, kh), inv_sqrt);
        Tensor probs = softmax_rows(mask_scores(scores, valid));
        outs.push_back(matmul(probs, vh));
    }
    return linear(heads == 1 ? outs[0] : concat_cols(outs), wo, bo);
}

Transformer::Transformer(ParamStore& store, const std::string& prefix, TransformerConfig config,
                         uint64_t seed)
    : config_(config), prefix_(prefix) {
    if (config_.dim <= 0 || config_.heads <= 0 || config_.layers <= 0 || config_.max_tokens <= 0) {
        throw ConfigError("transformer dimensions must be positive");
    }
    if (config_.dim % config_.heads != 0) {
        throw ConfigError("transformer width must be divisible by head count");
    }
    const int d = config_.dim;
    auto w = [&](const std::string& name, Shape shape) {
        return store.create(prefix + name, std::move(shape), Init::kTruncNormal002, seed);
    };
    auto zeros = [&](const std::string& name, Shape shape) {
        return store.create(prefix + name, std::move(shape), Init::kZeros, seed);
    };
    auto ones = [&](const std::string& name, Shape shape) {
        return store.create(prefix + name, std::move(shape), Init::kOnes, seed);
    };

    pos_ = w("pos", {config_.max_tokens, d});
    for (int l = 0; l < config_.layers; ++l) {
        const std::string lp = "h" + std::to_string(l) + ".";
        Layer layer;
        layer.ln1_g = ones(lp + "ln1.g", {d});
        layer.ln1_b = zeros(lp + "ln1.b", {d});
        layer.wq = w(lp + "attn.wq", {d, d});
        layer.bq = zeros(lp + "attn.bq", {d});
        layer.wk = w(lp + "attn.wk", {d, d});
        layer.bk = zeros(lp + "attn.bk", {d});
        layer.wv = w(lp + "attn.wv", {d, d});
        layer.bv = zeros(lp + "attn.bv", {d});
        layer.wo = w(lp + "attn.wo", {d, d});
        layer.bo = zeros(lp + "attn.bo", {d});
        layer.ln2_g = ones(lp + "ln2.g", {d});
        layer.ln2_b = zeros(lp + "ln2.b", {d});
        layer.w1 = w(lp + "mlp.w1", {d, 4 * d});
        layer.b1 = zeros(lp + "mlp.b1", {4 * d});
        layer.w2 = w(lp + "mlp.w2", {4 * d, d});
        layer.b2 = zeros(lp + "mlp.b2", {d});
        layers_.push_back(std::move(layer));
    }
    lnf_g_ = ones("lnf.g", {d});
    lnf_b_ = zeros("lnf.b", {d});
}

Tensor Transformer::forward(const Tensor& tokens, const std::vector<uint8_t>& valid,
                            Rng* dropout_rng) const {
    if (tokens.cols() != config_.dim) {
        throw ShapeError("transformer expects width " + std::to_string(config_.dim) + ", got " +
                         shape_str(tokens.shape()));
    }
    if (tokens.rows() > config_.max_tokens) {
        throw ShapeError("sequence length " + std::to_string(tokens.rows()) +
                         " exceeds positional table of " + std::to_string(config_.max_tokens));
    }
    auto drop = [&](Tensor t) {
        return dropout_rng ? dropout(t, config_.dropout, *dropout_rng) : t;
    };

    Tensor x = tokens;
    for (const Layer& layer : layers_) {
        Tensor attn = causal_self_attention(layer_norm(x, layer.ln1_g, layer.ln1_b), layer.wq,
                                            layer.bq, layer.wk, layer.bk, layer.wv, layer.bv,
                                            layer.wo, layer.bo, config_.heads, valid);
        x = add(x, drop(attn));
        Tensor hidden = relu(linear(layer_norm(x, layer.ln2_g, layer.ln2_b), layer.w1, layer.b1));
        x = add(x, drop(linear(hidden, layer.w2, layer.b2)));
    }
    return layer_norm(x, lnf_g_, lnf_b_);
}

Tensor Transformer::position(int t) const {
    if (t < 0 || t >= config_.max_tokens) {
        throw IndexError("position " + std::to_string(t) + " outside table of " +
                         std::to_string(config_.max_tokens));
    }
    return row_slice(pos_, t, 1);
}

Tensor Transformer::positions(int t0, int n) const {
    if (t0 < 0 || n < 1 || t0 + n > config_.max_tokens) {
        throw IndexError("positions [" + std::to_string(t0) + ", " + std::to_string(t0 + n) +
                         ") outside table of " + std::to_string(config_.max_tokens));
    }
    return row_slice(pos_, t0, n);
}

}  // namespace goskill::core
