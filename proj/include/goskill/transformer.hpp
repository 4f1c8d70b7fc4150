#pragma once

// Causal transformer backbone shared by the skill decoder, the skill policy,
// and the sequence-model baseline.  Works on a single [T, D] token matrix;
// batching is done by looping sequences, which keeps shapes simple and the
// backward pass exact.

#include <cstdint>
#include <string>
#include <vector>

#include "goskill/params.hpp"
#include "goskill/rng.hpp"
#include "goskill/tensor.hpp"

namespace goskill::core {

struct TransformerConfig {
    int dim = 128;
    int heads = 4;
    int layers = 4;
    int max_tokens = 128;  // positional table rows
    double dropout = 0.1;
};

// Multi-head causal self-attention over x [T, D].  `valid` marks real tokens
// (empty means all); padded keys are excluded from every softmax.
Tensor causal_self_attention(const Tensor& x, const Tensor& wq, const Tensor& bq,
                             const Tensor& wk, const Tensor& bk, const Tensor& wv,
                             const Tensor& bv, const Tensor& wo, const Tensor& bo, int heads,
                             const std::vector<uint8_t>& valid = {});

class Transformer {
public:
    // Registers all weights under `prefix` in the store (idempotent).
    Transformer(ParamStore& store, const std::string& prefix, TransformerConfig config,
                uint64_t seed);

    // tokens: [T, D] embeddings with positions already added.  `dropout_rng`
    // enables train-mode dropout; pass nullptr for deterministic inference.
    Tensor forward(const Tensor& tokens, const std::vector<uint8_t>& valid = {},
                   Rng* dropout_rng = nullptr) const;

    // Row `t` of the learned positional table.
    Tensor position(int t) const;
    // Rows [t0, t0+n) of the table as one [n, D] slice.
    Tensor positions(int t0, int n) const;

    const TransformerConfig& config() const { return config_; }
    const std::string& prefix() const { return prefix_; }

private:
    struct Layer {
        Tensor ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln2_g, ln2_b, w1, b1, w2, b2;
    };

    TransformerConfig config_;
    std::string prefix_;
    std::vector<Layer> layers_;
    Tensor pos_;
    Tensor lnf_g_, lnf_b_;
};

}  // namespace goskill::core
