#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "goskill/errors.hpp"

namespace goskill::core {

using Shape = std::vector<int>;

size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major float64 tensor. Rank 1 or 2 is all the models need;
// batches are handled by flattening [B,T,D] into [B*T,D].
//
// Gradient storage lives next to the values and is allocated lazily the
// first time a backward pass touches the tensor.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
    static Tensor scalar(double value);

    bool defined() const { return static_cast<bool>(d_); }

    const Shape& shape() const;
    int ndim() const { return static_cast<int>(shape().size()); }
    size_t size() const;
    // 2-D helpers; rank-1 tensors behave as a single row.
    int rows() const;
    int cols() const;

    std::span<double> values();
    std::span<const double> values() const;
    std::vector<double> to_vector() const;

    bool requires_grad() const;
    void set_requires_grad(bool v);

    // Allocates (zeroed) on first access.
    std::span<double> grad();
    std::span<const double> grad() const;
    bool has_grad() const;
    void zero_grad();

    double item() const;
    double at(int i) const;
    double at(int r, int c) const;
    double grad_at(int i) const;
    double grad_at(int r, int c) const;

    const std::string& name() const;
    Tensor& set_name(std::string name);

    // Identity check on the underlying storage.
    bool same_storage(const Tensor& other) const { return d_ == other.d_; }

private:
    struct Data;
    std::shared_ptr<Data> d_;
};

// Records every primitive in execution order together with a closure that
// propagates output gradients to input gradients. Execution order is a
// topological order of the data flow, so running the closures in reverse
// visits each recorded node exactly once in reverse topological order.
//
// A tape is owned by a single training loop. Ops record onto the tape that
// is active on the current thread; with no active tape (inference) nothing
// is recorded and outputs do not require grad.
class Tape {
public:
    Tape();
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    void record(std::function<void()> backward_fn);
    // Seeds d(loss)/d(loss)=1 and replays the tape backwards once.
    void backward(const Tensor& loss);
    void clear();
    size_t node_count() const { return ops_.size(); }

    static Tape* active();

private:
    std::vector<std::function<void()>> ops_;
    Tape* previous_ = nullptr;
};

// When enabled, every op output is scanned for NaN/Inf (test mode).
// Module seams (losses, optimizer grads, emitted actions) are always checked.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();
void check_finite(const Tensor& t, const std::string& context);
void check_finite(std::span<const double> v, const std::string& context);

// ---- primitive ops (all differentiable unless noted) ----

Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T without materialising the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
// y = x*w + b over rows; x:[r,i], w:[i,o], b:[o].
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double c);
Tensor add_scalar(const Tensor& a, double c);
Tensor relu(const Tensor& a);

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5);
// Row-wise softmax with max-subtraction.
Tensor softmax_rows(const Tensor& x);

// Additive masking for attention scores: entries above the diagonal get a
// large negative constant; entries whose key is not valid likewise.
// `valid` may be empty (no padding). Not differentiable w.r.t. the mask.
Tensor mask_scores(const Tensor& scores, const std::vector<uint8_t>& valid);

// Zeroes a random fraction `rate` of entries and rescales the rest by
// 1/(1-rate). No-op when rate<=0 or no tape is active (inference).
class Rng;
Tensor dropout(const Tensor& x, double rate, Rng& rng);

Tensor row_slice(const Tensor& x, int row0, int nrows);
Tensor col_slice(const Tensor& x, int col0, int ncols);
Tensor block(const Tensor& x, int row0, int nrows, int col0, int ncols);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
// Row r of stream j lands at output row r*k + j (k = number of streams).
Tensor interleave_rows(const std::vector<Tensor>& streams);
// Gather rows; duplicate indices accumulate gradient.
Tensor select_rows(const Tensor& x, const std::vector<int>& indices);

Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);
// Identity forward, blocks gradient flow (stop-gradient).
Tensor detach(const Tensor& x);
// Forward equals e, backward routes gradients to z (quantization bypass).
Tensor straight_through(const Tensor& z, const Tensor& e);

// Weighted mean over rows of the squared error ||pred_r - target_r||^2.
// Empty weights = all ones. Weights are not differentiated.
Tensor mse_loss(const Tensor& pred, const Tensor& target, const std::vector<double>& row_weights = {});

// -log softmax(logits)[target] with max-subtraction; rank-1 logits.
Tensor softmax_cross_entropy(const Tensor& logits, int target);
// Row-wise variant, weighted mean over rows.
Tensor softmax_cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                                  const std::vector<double>& row_weights = {});

// -(1-p)^gamma * log(p) with p = probs[r, target_r]; weighted mean over
// rows. Gradients flow into the target entries of `probs` only (the softmax
// that produced the distribution handles the rest). p is clamped at 1e-12
// before the log; clamping events are counted in a diagnostic.
Tensor focal_loss(const Tensor& probs, const std::vector<int>& targets, double gamma,
                  const std::vector<double>& row_weights = {});
Tensor focal_loss(const Tensor& probs, int target, double gamma);
uint64_t focal_clamp_count();
void reset_focal_clamp_count();

// Non-differentiable helpers.
int argmax_row(const Tensor& x, int row);

}  // namespace goskill::core
