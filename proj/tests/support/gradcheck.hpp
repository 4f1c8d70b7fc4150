#pragma once

// Finite-difference oracle for backward passes.  Each leaf is perturbed one
// entry at a time and the central difference is compared against the gradient
// the tape produced for the same scalar loss.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "goskill/tensor.hpp"

namespace goskill::testing {

struct GradCheckResult {
    bool ok = true;
    std::string detail;  // first offending entry, if any
    double worst_rel_err = 0.0;
};

// `loss_fn` must rebuild the graph from the leaves on every call so that the
// perturbed values are picked up.  Leaves must already have requires_grad set.
inline GradCheckResult check_gradients(std::vector<core::Tensor> leaves,
                                       const std::function<core::Tensor()>& loss_fn,
                                       double h = 1e-5, double tol = 1e-5) {
    using core::Tape;
    using core::Tensor;

    std::vector<std::vector<double>> analytic;
    {
        for (auto& leaf : leaves) leaf.zero_grad();
        Tape tape;
        Tensor loss = loss_fn();
        tape.backward(loss);
        for (auto& leaf : leaves) {
            auto g = leaf.grad();
            analytic.emplace_back(g.begin(), g.end());
            leaf.zero_grad();  // leave no residue for the caller or the next check
        }
    }

    GradCheckResult result;
    for (size_t li = 0; li < leaves.size(); ++li) {
        auto vals = leaves[li].values();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double saved = vals[i];
            vals[i] = saved + h;
            const double lp = loss_fn().item();
            vals[i] = saved - h;
            const double lm = loss_fn().item();
            vals[i] = saved;
            const double fd = (lp - lm) / (2.0 * h);
            const double an = analytic[li][i];
            const double rel = std::abs(fd - an) / std::max({1.0, std::abs(fd), std::abs(an)});
            result.worst_rel_err = std::max(result.worst_rel_err, rel);
            if (rel > tol && result.ok) {
                result.ok = false;
                result.detail = "leaf " + std::to_string(li) + " entry " + std::to_string(i) +
                                ": analytic " + std::to_string(an) + " vs fd " + std::to_string(fd);
            }
        }
    }
    return result;
}

}  // namespace goskill::testing
