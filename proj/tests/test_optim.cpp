#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <string>

#include "goskill/optim.hpp"
#include "goskill/params.hpp"
#include "goskill/tensor.hpp"

using namespace goskill;
using namespace goskill::core;

namespace {

// Unique temp path per test to keep cases independent.
std::string temp_path(const std::string& tag) {
    return "/tmp/goskill_test_" + tag + "_" + std::to_string(::getpid()) + ".ckpt";
}

}  // namespace

TEST_CASE("first adam step moves by about the learning rate") {
    Tensor w = Tensor::from_data({1}, {1.0}, true);
    w.grad()[0] = 1.0;
    Adam opt({w}, {.lr = 0.1});
    opt.step();
    // t=1: mhat = g, vhat = g^2, update = lr * g/(|g|+eps)
    CHECK(w.item() == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(opt.step_count() == 1);

    // The bias-corrected first step has the same size regardless of |g|.
    Tensor w2 = Tensor::from_data({1}, {1.0}, true);
    w2.grad()[0] = 17.0;
    Adam opt2({w2}, {.lr = 0.1});
    opt2.step();
    CHECK(w2.item() == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("zero gradient leaves parameters unchanged") {
    Tensor w = Tensor::from_data({3}, {1.0, -2.0, 0.5}, true);
    w.grad();  // allocate zeros
    Adam opt({w});
    opt.step();
    opt.step();
    CHECK(w.at(0) == 1.0);
    CHECK(w.at(1) == -2.0);
    CHECK(w.at(2) == 0.5);
}

TEST_CASE("identical states give bit-identical trajectories") {
    auto run = [] {
        Tensor w = Tensor::from_data({2}, {0.3, -0.4}, true);
        Adam opt({w}, {.lr = 0.05});
        for (int i = 0; i < 25; ++i) {
            w.zero_grad();
            Tape tape;
            Tensor target = Tensor::from_data({2}, {1.0, 2.0});
            tape.backward(mse_loss(w, target));
            opt.step();
        }
        return w.to_vector();
    };
    auto a = run();
    auto b = run();
    CHECK(a[0] == b[0]);
    CHECK(a[1] == b[1]);
}

TEST_CASE("adam converges on a quadratic") {
    Tensor w = Tensor::from_data({1}, {-4.0}, true);
    Adam opt({w}, {.lr = 0.1});
    Tensor target = Tensor::from_data({1}, {3.0});
    for (int i = 0; i < 400; ++i) {
        w.zero_grad();
        Tape tape;
        tape.backward(mse_loss(w, target));
        opt.step();
    }
    CHECK(w.item() == doctest::Approx(3.0).epsilon(1e-3));
}

TEST_CASE("non-finite gradients are reported with the parameter name") {
    Tensor w = Tensor::from_data({1}, {1.0}, true);
    w.set_name("policy.head.w");
    w.grad()[0] = std::nan("");
    Adam opt({w});
    try {
        opt.step();
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("policy.head.w") != std::string::npos);
    }
}

TEST_CASE("global norm clipping") {
    Tensor a = Tensor::from_data({1}, {0.0}, true);
    Tensor b = Tensor::from_data({1}, {0.0}, true);
    a.grad()[0] = 3.0;
    b.grad()[0] = 4.0;
    std::vector<Tensor> params = {a, b};

    const double norm = clip_global_norm(params, 1.0);
    CHECK(norm == doctest::Approx(5.0));
    CHECK(a.grad()[0] == doctest::Approx(0.6));
    CHECK(b.grad()[0] == doctest::Approx(0.8));

    // Under the threshold nothing moves.
    const double small = clip_global_norm(params, 10.0);
    CHECK(small == doctest::Approx(1.0));
    CHECK(a.grad()[0] == doctest::Approx(0.6));

    // Non-positive threshold only measures.
    a.grad()[0] = 30.0;
    const double measured = clip_global_norm(params, 0.0);
    CHECK(measured > 30.0);
    CHECK(a.grad()[0] == doctest::Approx(30.0));
}

TEST_CASE("parameter creation is seeded per name") {
    ParamStore store;
    Tensor w1 = store.create("enc.w", {4, 4}, Init::kTruncNormal002, 42);
    Tensor w2 = store.create("dec.w", {4, 4}, Init::kTruncNormal002, 42);
    CHECK(w1.to_vector() != w2.to_vector());

    ParamStore other;
    Tensor w1b = other.create("enc.w", {4, 4}, Init::kTruncNormal002, 42);
    CHECK(w1.to_vector() == w1b.to_vector());  // same (seed, name) → same values

    Tensor again = store.create("enc.w", {4, 4}, Init::kTruncNormal002, 42);
    CHECK(again.same_storage(w1));
    CHECK_THROWS_AS(store.create("enc.w", {2, 2}, Init::kZeros, 42), ConfigError);

    for (double v : w1.values()) CHECK(std::abs(v) <= 0.04 + 1e-12);

    Tensor ones = store.create("ln.gain", {4}, Init::kOnes, 42);
    Tensor zeros = store.create("ln.bias", {4}, Init::kZeros, 42);
    CHECK(ones.at(0) == 1.0);
    CHECK(zeros.at(0) == 0.0);
    CHECK(store.value_count() == 16 + 16 + 4 + 4);  // re-registration adds nothing
}

TEST_CASE("checkpoint round trip preserves bits and checksums") {
    const std::string path = temp_path("roundtrip");

    ParamStore store;
    store.create("enc.w", {3, 5}, Init::kTruncNormal002, 7);
    store.create("enc.b", {5}, Init::kZeros, 7);
    store.create("policy.w", {5, 2}, Init::kTruncNormal002, 7);
    const uint64_t full = store.checksum();
    const uint64_t enc_only = store.checksum("enc.");
    CHECK(full != enc_only);

    store.save(path);

    // Load into a differently initialized twin layout.
    ParamStore twin;
    twin.create("enc.w", {3, 5}, Init::kTruncNormal002, 999);
    twin.create("enc.b", {5}, Init::kZeros, 999);
    twin.create("policy.w", {5, 2}, Init::kTruncNormal002, 999);
    CHECK(twin.checksum() != full);
    twin.load(path);
    CHECK(twin.checksum() == full);
    CHECK(twin.get("enc.w").to_vector() == store.get("enc.w").to_vector());

    // Fresh store straight from the file.
    ParamStore fresh = ParamStore::from_file(path);
    CHECK(fresh.checksum() == full);
    CHECK(fresh.checksum("enc.") == enc_only);
    CHECK(fresh.names() == store.names());

    std::remove(path.c_str());
}

TEST_CASE("checkpoint loading rejects mismatches") {
    const std::string path = temp_path("mismatch");
    ParamStore store;
    store.create("a", {2, 2}, Init::kZeros, 1);
    store.save(path);

    ParamStore wrong_shape;
    wrong_shape.create("a", {4}, Init::kZeros, 1);
    CHECK_THROWS_AS(wrong_shape.load(path), DataError);

    ParamStore missing;
    missing.create("b", {2, 2}, Init::kZeros, 1);
    CHECK_THROWS_AS(missing.load(path), DataError);

    CHECK_THROWS_AS(ParamStore::from_file("/nonexistent/nope.ckpt"), IoError);

    // Corrupt the magic.
    {
        std::FILE* f = std::fopen(path.c_str(), "r+b");
        REQUIRE(f != nullptr);
        std::fputc('X', f);
        std::fclose(f);
    }
    CHECK_THROWS_AS(ParamStore::from_file(path), FormatError);
    std::remove(path.c_str());
}

TEST_CASE("prefix matching and trainability toggles") {
    ParamStore store;
    store.create("enc.w", {2}, Init::kZeros, 3);
    store.create("enc.b", {2}, Init::kZeros, 3);
    store.create("dec.w", {2}, Init::kZeros, 3);

    CHECK(store.match("enc.").size() == 2);
    CHECK(store.match().size() == 3);
    CHECK(store.get("dec.w").requires_grad());

    store.set_trainable("enc.", false);
    CHECK_FALSE(store.get("enc.w").requires_grad());
    CHECK_FALSE(store.get("enc.b").requires_grad());
    CHECK(store.get("dec.w").requires_grad());

    store.set_trainable("", true);
    CHECK(store.get("enc.w").requires_grad());

    CHECK_THROWS_AS(store.get("nope"), ConfigError);
}

TEST_CASE("frozen parameters receive no gradients") {
    ParamStore store;
    Tensor w = store.create("enc.w", {2, 2}, Init::kTruncNormal002, 5);
    store.set_trainable("enc.", false);

    Tape tape;
    Tensor x = Tensor::from_data({1, 2}, {1.0, 2.0}, true);
    Tensor y = matmul(x, w);
    tape.backward(sum_all(y));
    CHECK_FALSE(w.has_grad());
    CHECK(x.grad_at(0, 0) != 0.0);
}
