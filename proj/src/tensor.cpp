#include "goskill/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>

#include "goskill/rng.hpp"

namespace goskill::core {

namespace {

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<EMat>;
using CMapMat = Eigen::Map<const EMat>;

constexpr double kMaskValue = -1e9;

thread_local Tape* g_active_tape = nullptr;
std::atomic<bool> g_finite_checks{false};
std::atomic<uint64_t> g_focal_clamps{0};

CMapMat as_mat(const Tensor& t) {
    return CMapMat(t.values().data(), t.rows(), t.cols());
}

MapMat grad_mat(Tensor& t) {
    return MapMat(t.grad().data(), t.rows(), t.cols());
}

CMapMat out_grad(const Tensor& t) {
    return CMapMat(t.grad().data(), t.rows(), t.cols());
}

[[noreturn]] void shape_fail(const std::string& op, const Tensor& a) {
    throw ShapeError(op + ": unexpected shape " + shape_str(a.shape()));
}

[[noreturn]] void shape_fail(const std::string& op, const Tensor& a, const Tensor& b) {
    throw ShapeError(op + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " do not conform");
}

void maybe_check(const Tensor& t, const char* op) {
    if (finite_checks_enabled()) check_finite(t, op);
}

bool wants_grad(const Tensor& t) {
    return t.defined() && t.requires_grad();
}

// Finalizes an op: runs the finite check and, when a tape is active and any
// input carries grad, marks the output and records the closure.
Tensor finish(Tensor out, bool any_input_grad, const char* op_name,
              std::function<void()> backward_fn) {
    maybe_check(out, op_name);
    Tape* tape = Tape::active();
    if (tape && any_input_grad) {
        out.set_requires_grad(true);
        tape->record(std::move(backward_fn));
    }
    return out;
}

}  // namespace

size_t shape_numel(const Shape& shape) {
    size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(shape));
        n *= static_cast<size_t>(d);
    }
    return n;
}

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << "]";
    return os.str();
}

struct Tensor::Data {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;  // empty until first touched
    bool requires_grad = false;
    std::string name;
};

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    return from_data(std::move(shape), {}, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    const size_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    const size_t n = shape_numel(shape);
    if (data.empty()) data.assign(n, 0.0);
    if (data.size() != n) {
        throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                         shape_str(shape));
    }
    Tensor t;
    t.d_ = std::make_shared<Data>();
    t.d_->shape = std::move(shape);
    t.d_->value = std::move(data);
    t.d_->requires_grad = requires_grad;
    return t;
}

Tensor Tensor::scalar(double value) {
    return from_data({1}, {value});
}

const Shape& Tensor::shape() const {
    if (!d_) throw ShapeError("use of undefined tensor");
    return d_->shape;
}

size_t Tensor::size() const {
    return d_ ? d_->value.size() : 0;
}

int Tensor::rows() const {
    const Shape& s = shape();
    if (s.size() > 2) throw ShapeError("rows() on tensor of rank > 2");
    return s.size() == 2 ? s[0] : 1;
}

int Tensor::cols() const {
    const Shape& s = shape();
    if (s.size() > 2) throw ShapeError("cols() on tensor of rank > 2");
    return s.size() == 2 ? s[1] : s[0];
}

std::span<double> Tensor::values() {
    if (!d_) throw ShapeError("use of undefined tensor");
    return d_->value;
}

std::span<const double> Tensor::values() const {
    if (!d_) throw ShapeError("use of undefined tensor");
    return d_->value;
}

std::vector<double> Tensor::to_vector() const {
    auto v = values();
    return std::vector<double>(v.begin(), v.end());
}

bool Tensor::requires_grad() const {
    return d_ && d_->requires_grad;
}

void Tensor::set_requires_grad(bool v) {
    if (!d_) throw ShapeError("use of undefined tensor");
    d_->requires_grad = v;
}

std::span<double> Tensor::grad() {
    if (!d_) throw ShapeError("use of undefined tensor");
    if (d_->grad.empty()) d_->grad.assign(d_->value.size(), 0.0);
    return d_->grad;
}

std::span<const double> Tensor::grad() const {
    if (!d_) throw ShapeError("use of undefined tensor");
    if (d_->grad.empty()) d_->grad.assign(d_->value.size(), 0.0);
    return d_->grad;
}

bool Tensor::has_grad() const {
    return d_ && !d_->grad.empty();
}

void Tensor::zero_grad() {
    if (!d_) return;
    std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return values()[0];
}

double Tensor::at(int i) const {
    if (i < 0 || static_cast<size_t>(i) >= size()) throw IndexError("tensor index out of range");
    return values()[static_cast<size_t>(i)];
}

double Tensor::at(int r, int c) const {
    if (r < 0 || r >= rows() || c < 0 || c >= cols()) throw IndexError("tensor index out of range");
    return values()[static_cast<size_t>(r) * cols() + c];
}

double Tensor::grad_at(int i) const {
    if (i < 0 || static_cast<size_t>(i) >= size()) throw IndexError("tensor index out of range");
    return grad()[static_cast<size_t>(i)];
}

double Tensor::grad_at(int r, int c) const {
    if (r < 0 || r >= rows() || c < 0 || c >= cols()) throw IndexError("tensor index out of range");
    return grad()[static_cast<size_t>(r) * cols() + c];
}

const std::string& Tensor::name() const {
    static const std::string empty;
    return d_ ? d_->name : empty;
}

Tensor& Tensor::set_name(std::string name) {
    if (!d_) throw ShapeError("use of undefined tensor");
    d_->name = std::move(name);
    return *this;
}

Tape::Tape() {
    previous_ = g_active_tape;
    g_active_tape = this;
}

Tape::~Tape() {
    g_active_tape = previous_;
}

Tape* Tape::active() {
    return g_active_tape;
}

void Tape::record(std::function<void()> backward_fn) {
    ops_.push_back(std::move(backward_fn));
}

void Tape::backward(const Tensor& loss) {
    if (loss.size() != 1) throw ShapeError("backward expects a scalar loss");
    check_finite(loss, "loss");
    Tensor l = loss;
    l.grad()[0] += 1.0;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
}

void Tape::clear() {
    ops_.clear();
}

void set_finite_checks(bool enabled) {
    g_finite_checks.store(enabled);
}

bool finite_checks_enabled() {
    return g_finite_checks.load(std::memory_order_relaxed);
}

void check_finite(std::span<const double> v, const std::string& context) {
    for (size_t i = 0; i < v.size(); ++i) {
        if (!std::isfinite(v[i])) {
            throw NumericError("non-finite value in " + context + " at index " + std::to_string(i));
        }
    }
}

void check_finite(const Tensor& t, const std::string& context) {
    check_finite(t.values(), context);
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows()) shape_fail("matmul", a, b);
    const int m = a.rows(), n = b.cols();
    std::vector<double> vals(static_cast<size_t>(m) * n);
    MapMat(vals.data(), m, n).noalias() = as_mat(a) * as_mat(b);
    Tensor out = Tensor::from_data({m, n}, std::move(vals));
    Tensor A = a, B = b, O = out;
    return finish(std::move(out), wants_grad(a) || wants_grad(b), "matmul", [A, B, O]() mutable {
        if (A.requires_grad()) grad_mat(A).noalias() += out_grad(O) * as_mat(B).transpose();
        if (B.requires_grad()) grad_mat(B).noalias() += as_mat(A).transpose() * out_grad(O);
    });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols()) shape_fail("matmul_nt", a, b);
    const int m = a.rows(), n = b.rows();
    std::vector<double> vals(static_cast<size_t>(m) * n);
    MapMat(vals.data(), m, n).noalias() = as_mat(a) * as_mat(b).transpose();
    Tensor out = Tensor::from_data({m, n}, std::move(vals));
    Tensor A = a, B = b, O = out;
    return finish(std::move(out), wants_grad(a) || wants_grad(b), "matmul_nt", [A, B, O]() mutable {
        if (A.requires_grad()) grad_mat(A).noalias() += out_grad(O) * as_mat(B);
        if (B.requires_grad()) grad_mat(B).noalias() += out_grad(O).transpose() * as_mat(A);
    });
}

Tensor transpose(const Tensor& a) {
    const int r = a.rows(), c = a.cols();
    std::vector<double> vals(a.size());
    MapMat(vals.data(), c, r).noalias() = as_mat(a).transpose();
    Tensor out = Tensor::from_data({c, r}, std::move(vals));
    Tensor A = a, O = out;
    return finish(std::move(out), wants_grad(a), "transpose", [A, O]() mutable {
        grad_mat(A).noalias() += out_grad(O).transpose();
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.cols() != w.rows() || b.size() != static_cast<size_t>(w.cols())) {
        throw ShapeError("linear: x" + shape_str(x.shape()) + " w" + shape_str(w.shape()) + " b" +
                         shape_str(b.shape()) + " do not conform");
    }
    const int r = x.rows(), o = w.cols();
    std::vector<double> vals(static_cast<size_t>(r) * o);
    MapMat y(vals.data(), r, o);
    y.noalias() = as_mat(x) * as_mat(w);
    CMapMat bias(b.values().data(), 1, o);
    y.rowwise() += bias.row(0);
    Tensor out = Tensor::from_data({r, o}, std::move(vals));
    Tensor X = x, W = w, B = b, O = out;
    const bool any = wants_grad(x) || wants_grad(w) || wants_grad(b);
    return finish(std::move(out), any, "linear", [X, W, B, O]() mutable {
        CMapMat g = out_grad(O);
        if (X.requires_grad()) grad_mat(X).noalias() += g * as_mat(W).transpose();
        if (W.requires_grad()) grad_mat(W).noalias() += as_mat(X).transpose() * g;
        if (B.requires_grad()) {
            // Fixed-order accumulation: vectorized column reductions round
            // differently depending on buffer alignment, which varies between
            // allocations and would make retraining irreproducible.
            auto gb = B.grad();
            for (Eigen::Index i = 0; i < g.rows(); ++i) {
                for (Eigen::Index j = 0; j < g.cols(); ++j) {
                    gb[static_cast<size_t>(j)] += g(i, j);
                }
            }
        }
    });
}

// ---- elementwise ----

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_fail(op, a, b);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> vals(a.size());
    auto va = a.values(), vb = b.values();
    for (size_t i = 0; i < vals.size(); ++i) vals[i] = va[i] + vb[i];
    Tensor out = Tensor::from_data(a.shape(), std::move(vals));
    Tensor A = a, B = b, O = out;
    return finish(std::move(out), wants_grad(a) || wants_grad(b), "add", [A, B, O]() mutable {
        auto g = O.grad();
        if (A.requires_grad()) {
            auto ga = A.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (B.requires_grad()) {
            auto gb = B.grad();
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
        }
    });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<double> vals(a.size());
    auto va = a.values(), vb = b.values();
    for (size_t i = 0; i < vals.size(); ++i) vals[i] = va[i] - vb[i];
    Tensor out = Tensor::from_data(a.shape(), std::move(vals));
    Tensor A = a, B = b, O = out;
    return finish(std::move(out), wants_grad(a) || wants_grad(b), "sub", [A, B, O]() mutable {
        auto g = O.grad();
        if (A.requires_grad()) {
            auto ga = A.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        }
        if (B.requires_grad()) {
            auto gb = B.grad();
            for (size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
        }
    });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> vals(a.size());
    auto va = a.values(), vb = b.values();
    for (size_t i = 0; i < vals.size(); ++i) vals[i] = va[i] * vb[i];
    Tensor out = Tensor::from_data(a.shape(), std::move(vals));
    Tensor A = a, B = b, O = out;
    return finish(std::move(out), wants_grad(a) || wants_grad(b), "mul", [A, B, O]() mutable {
        auto g = O.grad();
        auto va = A.values(), vb = B.values();
        if (A.requires_grad()) {
            auto ga = A.grad();
            for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * vb[i];
        }
        if (B.requires_grad()) {
            auto gb = B.grad();
            for (size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * va[i];
        }
    });
}

Tensor scale(const Tensor& a, double c) {
    std::vector<double> vals(a.size());
    auto va = a.values();
    for (size_t i = 0; i < vals.size(); ++i) vals[i] = va[i] * c;
    Tensor out = Tensor::from_data(a.shape(), std::move(vals));
    Tensor A = a, O = out;
    return finish(std::move(out), wants_grad(a), "scale", [A, O, c]() mutable {
        auto g = O.grad();
        auto ga = A.grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c;
    });
}

Tensor add_scalar(const Tensor& a, double c) {
    std::vector<double> vals(a.size());
    auto va = a.values();
    for (size_t i = 0; i < vals.size(); ++i) vals[i] = va[i] + c;
    Tensor out = Tensor::from_data(a.shape(), std::move(vals));
    Tensor A = a, O = out;
    return finish(std::move(out), wants_grad(a), "add_scalar", [A, O]() mutable {
        auto g = O.grad();
        auto ga = A.grad();
        for (size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
}

Tensor relu(const Tensor& a) {
    std::vector<double> vals(a.size());
    auto va = a.values();
    for (size_t i = 0; i < vals.size(); ++i) vals[i] = va[i] > 0.0 ? va[i] : 0.0;
    Tensor out = Tensor::from_data(a.shape(), std::move(vals));
    Tensor A = a, O = out;
    return finish(std::move(out), wants_grad(a), "relu", [A, O]() mutable {
        auto g = O.grad();
        auto va = A.values();
        auto ga = A.grad();
        for (size_t i = 0; i < g.size(); ++i) {
            if (va[i] > 0.0) ga[i] += g[i];
        }
    });
}

// ---- normalization / softmax ----

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
    const int r = x.rows(), c = x.cols();
    if (gain.size() != static_cast<size_t>(c) || bias.size() != static_cast<size_t>(c)) {
        throw ShapeError("layer_norm: gain/bias size must match row width " + std::to_string(c));
    }
    std::vector<double> vals(x.size());
    std::vector<double> xhat(x.size());
    std::vector<double> inv_sigma(static_cast<size_t>(r));
    auto vx = x.values();
    auto vg = gain.values(), vb = bias.values();
    for (int i = 0; i < r; ++i) {
        const double* row = vx.data() + static_cast<size_t>(i) * c;
        double mean = 0.0;
        for (int j = 0; j < c; ++j) mean += row[j];
        mean /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) {
            const double d = row[j] - mean;
            var += d * d;
        }
        var /= c;
        const double is = 1.0 / std::sqrt(var + eps);
        inv_sigma[static_cast<size_t>(i)] = is;
        for (int j = 0; j < c; ++j) {
            const size_t k = static_cast<size_t>(i) * c + j;
            xhat[k] = (row[j] - mean) * is;
            vals[k] = xhat[k] * vg[j] + vb[j];
        }
    }
    Tensor out = Tensor::from_data(x.shape(), std::move(vals));
    Tensor X = x, G = gain, B = bias, O = out;
    const bool any = wants_grad(x) || wants_grad(gain) || wants_grad(bias);
    auto xh = std::make_shared<std::vector<double>>(std::move(xhat));
    auto isg = std::make_shared<std::vector<double>>(std::move(inv_sigma));
    return finish(std::move(out), any, "layer_norm", [X, G, B, O, xh, isg, r, c]() mutable {
        auto g = O.grad();
        auto vg = G.values();
        for (int i = 0; i < r; ++i) {
            const size_t off = static_cast<size_t>(i) * c;
            if (G.requires_grad() || B.requires_grad()) {
                auto gg = G.requires_grad() ? G.grad() : std::span<double>();
                auto gb = B.requires_grad() ? B.grad() : std::span<double>();
                for (int j = 0; j < c; ++j) {
                    if (!gg.empty()) gg[j] += g[off + j] * (*xh)[off + j];
                    if (!gb.empty()) gb[j] += g[off + j];
                }
            }
            if (X.requires_grad()) {
                double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
                for (int j = 0; j < c; ++j) {
                    const double dxh = g[off + j] * vg[j];
                    sum_dxhat += dxh;
                    sum_dxhat_xhat += dxh * (*xh)[off + j];
                }
                auto gx = X.grad();
                const double is = (*isg)[static_cast<size_t>(i)];
                for (int j = 0; j < c; ++j) {
                    const double dxh = g[off + j] * vg[j];
                    gx[off + j] +=
                        is * (dxh - sum_dxhat / c - (*xh)[off + j] * sum_dxhat_xhat / c);
                }
            }
        }
    });
}

Tensor softmax_rows(const Tensor& x) {
    const int r = x.rows(), c = x.cols();
    std::vector<double> vals(x.size());
    auto vx = x.values();
    for (int i = 0; i < r; ++i) {
        const size_t off = static_cast<size_t>(i) * c;
        double mx = vx[off];
        for (int j = 1; j < c; ++j) mx = std::max(mx, vx[off + j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) {
            vals[off + j] = std::exp(vx[off + j] - mx);
            sum += vals[off + j];
        }
        for (int j = 0; j < c; ++j) vals[off + j] /= sum;
    }
    Tensor out = Tensor::from_data(x.shape(), std::move(vals));
    Tensor X = x, O = out;
    return finish(std::move(out), wants_grad(x), "softmax_rows", [X, O, r, c]() mutable {
        auto g = O.grad();
        auto p = O.values();
        auto gx = X.grad();
        for (int i = 0; i < r; ++i) {
            const size_t off = static_cast<size_t>(i) * c;
            double dot = 0.0;
            for (int j = 0; j < c; ++j) dot += g[off + j] * p[off + j];
            for (int j = 0; j < c; ++j) gx[off + j] += p[off + j] * (g[off + j] - dot);
        }
    });
}

Tensor mask_scores(const Tensor& scores, const std::vector<uint8_t>& valid) {
    const int r = scores.rows(), c = scores.cols();
    if (r != c) throw ShapeError("mask_scores expects square score matrix, got " +
                                 shape_str(scores.shape()));
    if (!valid.empty() && static_cast<int>(valid.size()) != c) {
        throw ShapeError("mask_scores: validity vector length mismatch");
    }
    std::vector<double> vals(scores.size());
    auto vs = scores.values();
    for (int i = 0; i < r; ++i) {
        const size_t off = static_cast<size_t>(i) * c;
        for (int j = 0; j < c; ++j) {
            const bool masked = j > i || (!valid.empty() && valid[static_cast<size_t>(j)] == 0);
            vals[off + j] = masked ? kMaskValue : vs[off + j];
        }
    }
    Tensor out = Tensor::from_data(scores.shape(), std::move(vals));
    Tensor S = scores, O = out;
    auto keep = std::make_shared<std::vector<uint8_t>>(valid);
    return finish(std::move(out), wants_grad(scores), "mask_scores", [S, O, keep, r, c]() mutable {
        auto g = O.grad();
        auto gs = S.grad();
        for (int i = 0; i < r; ++i) {
            const size_t off = static_cast<size_t>(i) * c;
            for (int j = 0; j <= i; ++j) {
                if (keep->empty() || (*keep)[static_cast<size_t>(j)] != 0) gs[off + j] += g[off + j];
            }
        }
    });
}

Tensor dropout(const Tensor& x, double rate, Rng& rng) {
    if (rate <= 0.0 || Tape::active() == nullptr) return x;
    if (rate >= 1.0) throw ConfigError("dropout rate must be < 1");
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> mask(x.size());
    std::vector<double> vals(x.size());
    auto vx = x.values();
    for (size_t i = 0; i < vals.size(); ++i) {
        mask[i] = rng.uniform(0.0, 1.0) < rate ? 0.0 : keep_scale;
        vals[i] = vx[i] * mask[i];
    }
    Tensor out = Tensor::from_data(x.shape(), std::move(vals));
    Tensor X = x, O = out;
    auto m = std::make_shared<std::vector<double>>(std::move(mask));
    return finish(std::move(out), wants_grad(x), "dropout", [X, O, m]() mutable {
        auto g = O.grad();
        auto gx = X.grad();
        for (size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * (*m)[i];
    });
}

// ---- slicing / assembly ----

Tensor block(const Tensor& x, int row0, int nrows, int col0, int ncols) {
    const int r = x.rows(), c = x.cols();
    if (row0 < 0 || nrows <= 0 || row0 + nrows > r || col0 < 0 || ncols <= 0 || col0 + ncols > c) {
        throw ShapeError("block: window out of range for " + shape_str(x.shape()));
    }
    std::vector<double> vals(static_cast<size_t>(nrows) * ncols);
    auto vx = x.values();
    for (int i = 0; i < nrows; ++i) {
        const double* src = vx.data() + static_cast<size_t>(row0 + i) * c + col0;
        std::copy(src, src + ncols, vals.data() + static_cast<size_t>(i) * ncols);
    }
    Tensor out = Tensor::from_data({nrows, ncols}, std::move(vals));
    Tensor X = x, O = out;
    return finish(std::move(out), wants_grad(x), "block", [X, O, row0, col0, nrows, ncols, c]() mutable {
        auto g = O.grad();
        auto gx = X.grad();
        for (int i = 0; i < nrows; ++i) {
            double* dst = gx.data() + static_cast<size_t>(row0 + i) * c + col0;
            const double* src = g.data() + static_cast<size_t>(i) * ncols;
            for (int j = 0; j < ncols; ++j) dst[j] += src[j];
        }
    });
}

Tensor row_slice(const Tensor& x, int row0, int nrows) {
    return block(x, row0, nrows, 0, x.cols());
}

Tensor col_slice(const Tensor& x, int col0, int ncols) {
    return block(x, 0, x.rows(), col0, ncols);
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty input");
    const int c = parts[0].cols();
    int total = 0;
    bool any = false;
    for (const auto& p : parts) {
        if (p.cols() != c) shape_fail("concat_rows", parts[0], p);
        total += p.rows();
        any = any || wants_grad(p);
    }
    std::vector<double> vals(static_cast<size_t>(total) * c);
    size_t off = 0;
    for (const auto& p : parts) {
        auto v = p.values();
        std::copy(v.begin(), v.end(), vals.begin() + static_cast<long>(off));
        off += v.size();
    }
    Tensor out = Tensor::from_data({total, c}, std::move(vals));
    std::vector<Tensor> ps = parts;
    Tensor O = out;
    return finish(std::move(out), any, "concat_rows", [ps, O]() mutable {
        auto g = O.grad();
        size_t off = 0;
        for (auto& p : ps) {
            if (p.requires_grad()) {
                auto gp = p.grad();
                for (size_t i = 0; i < gp.size(); ++i) gp[i] += g[off + i];
            }
            off += p.size();
        }
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty input");
    const int r = parts[0].rows();
    int total = 0;
    bool any = false;
    for (const auto& p : parts) {
        if (p.rows() != r) shape_fail("concat_cols", parts[0], p);
        total += p.cols();
        any = any || wants_grad(p);
    }
    std::vector<double> vals(static_cast<size_t>(r) * total);
    int coff = 0;
    for (const auto& p : parts) {
        auto v = p.values();
        const int pc = p.cols();
        for (int i = 0; i < r; ++i) {
            std::copy(v.data() + static_cast<size_t>(i) * pc, v.data() + static_cast<size_t>(i + 1) * pc,
                      vals.data() + static_cast<size_t>(i) * total + coff);
        }
        coff += pc;
    }
    Tensor out = Tensor::from_data({r, total}, std::move(vals));
    std::vector<Tensor> ps = parts;
    Tensor O = out;
    return finish(std::move(out), any, "concat_cols", [ps, O, r, total]() mutable {
        auto g = O.grad();
        int coff = 0;
        for (auto& p : ps) {
            const int pc = p.cols();
            if (p.requires_grad()) {
                auto gp = p.grad();
                for (int i = 0; i < r; ++i) {
                    for (int j = 0; j < pc; ++j) {
                        gp[static_cast<size_t>(i) * pc + j] +=
                            g[static_cast<size_t>(i) * total + coff + j];
                    }
                }
            }
            coff += pc;
        }
    });
}

Tensor interleave_rows(const std::vector<Tensor>& streams) {
    if (streams.empty()) throw ShapeError("interleave_rows: empty input");
    const int r = streams[0].rows(), c = streams[0].cols();
    const int k = static_cast<int>(streams.size());
    bool any = false;
    for (const auto& s : streams) {
        if (s.rows() != r || s.cols() != c) shape_fail("interleave_rows", streams[0], s);
        any = any || wants_grad(s);
    }
    std::vector<double> vals(static_cast<size_t>(r) * k * c);
    for (int j = 0; j < k; ++j) {
        auto v = streams[static_cast<size_t>(j)].values();
        for (int i = 0; i < r; ++i) {
            std::copy(v.data() + static_cast<size_t>(i) * c, v.data() + static_cast<size_t>(i + 1) * c,
                      vals.data() + (static_cast<size_t>(i) * k + j) * c);
        }
    }
    Tensor out = Tensor::from_data({r * k, c}, std::move(vals));
    std::vector<Tensor> ss = streams;
    Tensor O = out;
    return finish(std::move(out), any, "interleave_rows", [ss, O, r, c, k]() mutable {
        auto g = O.grad();
        for (int j = 0; j < k; ++j) {
            auto& s = ss[static_cast<size_t>(j)];
            if (!s.requires_grad()) continue;
            auto gs = s.grad();
            for (int i = 0; i < r; ++i) {
                const double* src = g.data() + (static_cast<size_t>(i) * k + j) * c;
                double* dst = gs.data() + static_cast<size_t>(i) * c;
                for (int t = 0; t < c; ++t) dst[t] += src[t];
            }
        }
    });
}

Tensor select_rows(const Tensor& x, const std::vector<int>& indices) {
    const int r = x.rows(), c = x.cols();
    for (int idx : indices) {
        if (idx < 0 || idx >= r) throw IndexError("select_rows: index out of range");
    }
    const int n = static_cast<int>(indices.size());
    if (n == 0) throw ShapeError("select_rows: empty index list");
    std::vector<double> vals(static_cast<size_t>(n) * c);
    auto vx = x.values();
    for (int i = 0; i < n; ++i) {
        const double* src = vx.data() + static_cast<size_t>(indices[static_cast<size_t>(i)]) * c;
        std::copy(src, src + c, vals.data() + static_cast<size_t>(i) * c);
    }
    Tensor out = Tensor::from_data({n, c}, std::move(vals));
    Tensor X = x, O = out;
    auto idxs = std::make_shared<std::vector<int>>(indices);
    return finish(std::move(out), wants_grad(x), "select_rows", [X, O, idxs, c]() mutable {
        auto g = O.grad();
        auto gx = X.grad();
        for (size_t i = 0; i < idxs->size(); ++i) {
            double* dst = gx.data() + static_cast<size_t>((*idxs)[i]) * c;
            const double* src = g.data() + i * c;
            for (int j = 0; j < c; ++j) dst[j] += src[j];
        }
    });
}

// ---- reductions / grad-flow control ----

Tensor sum_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    Tensor out = Tensor::scalar(s);
    Tensor X = x, O = out;
    return finish(std::move(out), wants_grad(x), "sum_all", [X, O]() mutable {
        const double g = O.grad()[0];
        auto gx = X.grad();
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
}

Tensor mean_all(const Tensor& x) {
    double s = 0.0;
    for (double v : x.values()) s += v;
    const double n = static_cast<double>(x.size());
    Tensor out = Tensor::scalar(s / n);
    Tensor X = x, O = out;
    return finish(std::move(out), wants_grad(x), "mean_all", [X, O, n]() mutable {
        const double g = O.grad()[0] / n;
        auto gx = X.grad();
        for (size_t i = 0; i < gx.size(); ++i) gx[i] += g;
    });
}

Tensor detach(const Tensor& x) {
    return Tensor::from_data(x.shape(), x.to_vector());
}

Tensor straight_through(const Tensor& z, const Tensor& e) {
    require_same_shape("straight_through", z, e);
    Tensor out = Tensor::from_data(e.shape(), e.to_vector());
    Tensor Z = z, O = out;
    return finish(std::move(out), wants_grad(z), "straight_through", [Z, O]() mutable {
        auto g = O.grad();
        auto gz = Z.grad();
        for (size_t i = 0; i < g.size(); ++i) gz[i] += g[i];
    });
}

// ---- losses ----

namespace {

double weight_total(const std::vector<double>& w, int rows, const char* op) {
    if (w.empty()) return static_cast<double>(rows);
    if (static_cast<int>(w.size()) != rows) {
        throw ShapeError(std::string(op) + ": row weight length mismatch");
    }
    double total = 0.0;
    for (double x : w) total += x;
    if (total <= 0.0) throw DataError(std::string(op) + ": no rows carry weight");
    return total;
}

}  // namespace

Tensor mse_loss(const Tensor& pred, const Tensor& target, const std::vector<double>& row_weights) {
    require_same_shape("mse_loss", pred, target);
    const int r = pred.rows(), c = pred.cols();
    const double wtot = weight_total(row_weights, r, "mse_loss");
    auto vp = pred.values(), vt = target.values();
    double loss = 0.0;
    for (int i = 0; i < r; ++i) {
        const double w = row_weights.empty() ? 1.0 : row_weights[static_cast<size_t>(i)];
        if (w == 0.0) continue;
        double rowsq = 0.0;
        for (int j = 0; j < c; ++j) {
            const double d = vp[static_cast<size_t>(i) * c + j] - vt[static_cast<size_t>(i) * c + j];
            rowsq += d * d;
        }
        loss += w * rowsq;
    }
    Tensor out = Tensor::scalar(loss / wtot);
    Tensor P = pred, T = target, O = out;
    auto w = std::make_shared<std::vector<double>>(row_weights);
    return finish(std::move(out), wants_grad(pred), "mse_loss", [P, T, O, w, wtot, r, c]() mutable {
        const double g = O.grad()[0];
        auto vp = P.values();
        auto vt = T.values();
        auto gp = P.grad();
        for (int i = 0; i < r; ++i) {
            const double wi = w->empty() ? 1.0 : (*w)[static_cast<size_t>(i)];
            if (wi == 0.0) continue;
            const double f = 2.0 * wi * g / wtot;
            for (int j = 0; j < c; ++j) {
                const size_t k = static_cast<size_t>(i) * c + j;
                gp[k] += f * (vp[k] - vt[k]);
            }
        }
    });
}

Tensor softmax_cross_entropy_rows(const Tensor& logits, const std::vector<int>& targets,
                                  const std::vector<double>& row_weights) {
    const int r = logits.rows(), c = logits.cols();
    if (static_cast<int>(targets.size()) != r) {
        throw ShapeError("softmax_cross_entropy: target count mismatch");
    }
    for (int t : targets) {
        if (t < 0 || t >= c) throw IndexError("softmax_cross_entropy: target out of range");
    }
    const double wtot = weight_total(row_weights, r, "softmax_cross_entropy");
    auto vx = logits.values();
    std::vector<double> probs(logits.size());
    double loss = 0.0;
    for (int i = 0; i < r; ++i) {
        const size_t off = static_cast<size_t>(i) * c;
        double mx = vx[off];
        for (int j = 1; j < c; ++j) mx = std::max(mx, vx[off + j]);
        double sum = 0.0;
        for (int j = 0; j < c; ++j) {
            probs[off + j] = std::exp(vx[off + j] - mx);
            sum += probs[off + j];
        }
        const double logz = std::log(sum) + mx;
        for (int j = 0; j < c; ++j) probs[off + j] /= sum;
        const double w = row_weights.empty() ? 1.0 : row_weights[static_cast<size_t>(i)];
        loss += w * (logz - vx[off + targets[static_cast<size_t>(i)]]);
    }
    Tensor out = Tensor::scalar(loss / wtot);
    Tensor X = logits, O = out;
    auto p = std::make_shared<std::vector<double>>(std::move(probs));
    auto tg = std::make_shared<std::vector<int>>(targets);
    auto w = std::make_shared<std::vector<double>>(row_weights);
    return finish(std::move(out), wants_grad(logits), "softmax_cross_entropy",
                  [X, O, p, tg, w, wtot, r, c]() mutable {
                      const double g = O.grad()[0];
                      auto gx = X.grad();
                      for (int i = 0; i < r; ++i) {
                          const double wi = w->empty() ? 1.0 : (*w)[static_cast<size_t>(i)];
                          if (wi == 0.0) continue;
                          const double f = wi * g / wtot;
                          const size_t off = static_cast<size_t>(i) * c;
                          for (int j = 0; j < c; ++j) {
                              const double onehot = j == (*tg)[static_cast<size_t>(i)] ? 1.0 : 0.0;
                              gx[off + j] += f * ((*p)[off + j] - onehot);
                          }
                      }
                  });
}

Tensor softmax_cross_entropy(const Tensor& logits, int target) {
    if (logits.rows() != 1) {
        throw ShapeError("softmax_cross_entropy: expected a single row of logits");
    }
    return softmax_cross_entropy_rows(logits, {target});
}

uint64_t focal_clamp_count() {
    return g_focal_clamps.load();
}

void reset_focal_clamp_count() {
    g_focal_clamps.store(0);
}

Tensor focal_loss(const Tensor& probs, const std::vector<int>& targets, double gamma,
                  const std::vector<double>& row_weights) {
    if (gamma < 0.0) throw ConfigError("focal loss focusing parameter must be >= 0");
    const int r = probs.rows(), c = probs.cols();
    if (static_cast<int>(targets.size()) != r) throw ShapeError("focal_loss: target count mismatch");
    for (int t : targets) {
        if (t < 0 || t >= c) throw IndexError("focal_loss: target out of range");
    }
    const double wtot = weight_total(row_weights, r, "focal_loss");
    auto vp = probs.values();
    double loss = 0.0;
    for (int i = 0; i < r; ++i) {
        const double w = row_weights.empty() ? 1.0 : row_weights[static_cast<size_t>(i)];
        if (w == 0.0) continue;
        double p = vp[static_cast<size_t>(i) * c + targets[static_cast<size_t>(i)]];
        if (p < 1e-12) {
            g_focal_clamps.fetch_add(1, std::memory_order_relaxed);
            p = 1e-12;
        }
        const double focus = gamma == 0.0 ? 1.0 : std::pow(1.0 - std::min(p, 1.0), gamma);
        loss += w * (-focus * std::log(p));
    }
    Tensor out = Tensor::scalar(loss / wtot);
    Tensor P = probs, O = out;
    auto tg = std::make_shared<std::vector<int>>(targets);
    auto w = std::make_shared<std::vector<double>>(row_weights);
    return finish(std::move(out), wants_grad(probs), "focal_loss",
                  [P, O, tg, w, wtot, gamma, r, c]() mutable {
                      const double g = O.grad()[0];
                      auto vp = P.values();
                      auto gp = P.grad();
                      for (int i = 0; i < r; ++i) {
                          const double wi = w->empty() ? 1.0 : (*w)[static_cast<size_t>(i)];
                          if (wi == 0.0) continue;
                          const size_t k =
                              static_cast<size_t>(i) * c + (*tg)[static_cast<size_t>(i)];
                          const double p_raw = vp[k];
                          const double p = std::max(p_raw, 1e-12);
                          const double one_minus = std::max(1.0 - p_raw, 0.0);
                          double d = -std::pow(one_minus, gamma) / p;
                          if (gamma > 0.0 && one_minus > 0.0) {
                              d += gamma * std::pow(one_minus, gamma - 1.0) * std::log(p);
                          }
                          gp[k] += g * wi * d / wtot;
                      }
                  });
}

Tensor focal_loss(const Tensor& probs, int target, double gamma) {
    if (probs.rows() != 1) throw ShapeError("focal_loss: expected a single distribution row");
    return focal_loss(probs, std::vector<int>{target}, gamma);
}

int argmax_row(const Tensor& x, int row) {
    if (row < 0 || row >= x.rows()) throw IndexError("argmax_row: row out of range");
    const int c = x.cols();
    auto v = x.values();
    int best = 0;
    for (int j = 1; j < c; ++j) {
        if (v[static_cast<size_t>(row) * c + j] > v[static_cast<size_t>(row) * c + best]) best = j;
    }
    return best;
}

}  // namespace goskill::core
