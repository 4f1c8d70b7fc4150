#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "goskill/rng.hpp"
#include "goskill/transformer.hpp"
#include "support/gradcheck.hpp"

using namespace goskill;
using namespace goskill::core;
using goskill::testing::check_gradients;

namespace {

struct AttnParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

AttnParams make_attn(int d, uint64_t seed) {
    ParamStore store;
    AttnParams p;
    p.wq = store.create("wq", {d, d}, Init::kTruncNormal002, seed);
    p.bq = store.create("bq", {d}, Init::kZeros, seed);
    p.wk = store.create("wk", {d, d}, Init::kTruncNormal002, seed);
    p.bk = store.create("bk", {d}, Init::kZeros, seed);
    p.wv = store.create("wv", {d, d}, Init::kTruncNormal002, seed);
    p.bv = store.create("bv", {d}, Init::kZeros, seed);
    p.wo = store.create("wo", {d, d}, Init::kTruncNormal002, seed);
    p.bo = store.create("bo", {d}, Init::kZeros, seed);
    return p;
}

Tensor run_attn(const Tensor& x, const AttnParams& p, int heads,
                const std::vector<uint8_t>& valid = {}) {
    return causal_self_attention(x, p.wq, p.bq, p.wk, p.bk, p.wv, p.bv, p.wo, p.bo, heads, valid);
}

Tensor random_tokens(int t, int d, uint64_t seed, bool requires_grad = false) {
    Rng rng(seed);
    std::vector<double> vals(static_cast<size_t>(t) * d);
    for (double& v : vals) v = rng.normal(0.0, 1.0);
    return Tensor::from_data({t, d}, std::move(vals), requires_grad);
}

}  // namespace

TEST_CASE("single token attends only to itself") {
    const int d = 4;
    AttnParams p = make_attn(d, 11);
    Tensor x = random_tokens(1, d, 21);
    Tensor out = run_attn(x, p, 1);
    // With one position the probabilities collapse to 1, so the output is
    // just the value projection pushed through the output projection.
    Tensor expected = linear(linear(x, p.wv, p.bv), p.wo, p.bo);
    for (int j = 0; j < d; ++j) CHECK(out.at(0, j) == doctest::Approx(expected.at(0, j)));
}

TEST_CASE("causality: future tokens cannot influence the past") {
    const int d = 8, t = 5;
    AttnParams p = make_attn(d, 12);
    Tensor x = random_tokens(t, d, 22);
    Tensor base = run_attn(x, p, 2);

    Tensor poked = Tensor::from_data(x.shape(), x.to_vector());
    poked.values()[static_cast<size_t>(3) * d + 1] += 10.0;  // change token 3
    Tensor out = run_attn(poked, p, 2);

    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < d; ++j) {
            CHECK(out.at(i, j) == base.at(i, j));  // bit-identical at positions < 3
        }
    }
    bool differs = false;
    for (int j = 0; j < d; ++j) differs = differs || out.at(3, j) != base.at(3, j);
    CHECK(differs);
}

TEST_CASE("attention gradients match finite differences") {
    const int d = 4, t = 3;
    AttnParams p = make_attn(d, 13);
    Tensor x = random_tokens(t, d, 23, true);
    p.wq.set_requires_grad(true);
    p.wv.set_requires_grad(true);
    p.bo.set_requires_grad(true);

    auto r = check_gradients({x, p.wq, p.wv, p.bo}, [&] {
        Tensor out = run_attn(x, p, 1);
        return sum_all(mul(out, out));
    });
    CHECK_MESSAGE(r.ok, r.detail);
}

TEST_CASE("head count must divide the width") {
    AttnParams p = make_attn(6, 14);
    Tensor x = random_tokens(2, 6, 24);
    CHECK_THROWS_AS(run_attn(x, p, 4), ConfigError);
    CHECK_NOTHROW(run_attn(x, p, 3));
}

TEST_CASE("padded keys are invisible to valid queries") {
    const int d = 8, t = 6;
    AttnParams p = make_attn(d, 15);
    Tensor x = random_tokens(t, d, 25);
    std::vector<uint8_t> valid = {1, 1, 1, 1, 0, 0};

    Tensor base = run_attn(x, p, 2, valid);

    Tensor poked = Tensor::from_data(x.shape(), x.to_vector());
    for (int j = 0; j < d; ++j) poked.values()[static_cast<size_t>(4) * d + j] = 99.0;
    Tensor out = run_attn(poked, p, 2, valid);

    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j < d; ++j) CHECK(out.at(i, j) == base.at(i, j));
    }
}

TEST_CASE("transformer forward is deterministic and respects causality") {
    ParamStore store;
    TransformerConfig cfg{.dim = 16, .heads = 2, .layers = 2, .max_tokens = 12, .dropout = 0.1};
    Transformer model(store, "tf.", cfg, 99);

    Tensor x = random_tokens(6, 16, 31);
    Tensor a = model.forward(x);
    Tensor b = model.forward(x);
    CHECK(a.to_vector() == b.to_vector());

    Tensor poked = Tensor::from_data(x.shape(), x.to_vector());
    poked.values()[static_cast<size_t>(5) * 16 + 3] = 7.0;
    Tensor c = model.forward(poked);
    for (int i = 0; i < 5; ++i) {
        for (int j = 0; j < 16; ++j) CHECK(c.at(i, j) == a.at(i, j));
    }

    CHECK_THROWS_AS(model.forward(random_tokens(13, 16, 32)), ShapeError);
    CHECK_THROWS_AS(model.forward(random_tokens(4, 8, 33)), ShapeError);
    CHECK_THROWS_AS(model.position(12), IndexError);
    CHECK(model.position(0).cols() == 16);
}

TEST_CASE("transformer construction is idempotent over the store") {
    ParamStore store;
    TransformerConfig cfg{.dim = 8, .heads = 2, .layers = 1, .max_tokens = 4, .dropout = 0.0};
    Transformer a(store, "m.", cfg, 7);
    const size_t count = store.size();
    const uint64_t sum = store.checksum();
    Transformer b(store, "m.", cfg, 7);  // same prefix: reuses parameters
    CHECK(store.size() == count);
    CHECK(store.checksum() == sum);

    Tensor x = random_tokens(3, 8, 41);
    CHECK(a.forward(x).to_vector() == b.forward(x).to_vector());
}

TEST_CASE("full transformer gradients match finite differences") {
    ParamStore store;
    TransformerConfig cfg{.dim = 4, .heads = 1, .layers = 1, .max_tokens = 4, .dropout = 0.0};
    Transformer model(store, "g.", cfg, 17);

    Tensor x = random_tokens(3, 4, 42, true);
    std::vector<Tensor> leaves = {x, store.get("g.h0.attn.wq"), store.get("g.h0.mlp.w1"),
                                  store.get("g.lnf.g"), store.get("g.pos")};

    auto r = check_gradients(leaves, [&] {
        Tensor tokens = add(x, concat_rows({model.position(0), model.position(1), model.position(2)}));
        Tensor out = model.forward(tokens);
        return sum_all(mul(out, out));
    });
    CHECK_MESSAGE(r.ok, r.detail);
}

TEST_CASE("dropout only acts in training mode") {
    ParamStore store;
    TransformerConfig cfg{.dim = 8, .heads = 2, .layers = 1, .max_tokens = 4, .dropout = 0.5};
    Transformer model(store, "d.", cfg, 3);
    Tensor x = random_tokens(3, 8, 43);

    // Inference path ignores the dropout rate entirely.
    CHECK(model.forward(x).to_vector() == model.forward(x).to_vector());

    // Training path (tape + rng) perturbs activations.
    Rng rng(5);
    Tape tape;
    Tensor train_out = model.forward(x, {}, &rng);
    CHECK(train_out.to_vector() != model.forward(x).to_vector());
}
