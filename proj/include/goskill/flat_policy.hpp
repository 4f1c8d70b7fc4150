#pragma once

// Flat prompt-conditioned baseline: a decision-transformer-style learner that
// regresses per-step actions from (return-to-go, state, action) token triples
// with a demonstration prompt in front.  No skills, no hierarchy — every env
// step is a decision.  Serves as the comparison point for the skill pipeline
// and shares its evaluation protocol.

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "goskill/data.hpp"
#include "goskill/optim.hpp"
#include "goskill/transformer.hpp"

namespace goskill::run {

// One environment step as the policy sees it.
struct FlatStep {
    double rtg = 0.0;
    std::vector<double> state;
    std::array<double, 2> action{0.0, 0.0};
};

struct FlatSequence {
    std::vector<FlatStep> prompt;
    std::vector<FlatStep> history;  // ≥ 1 steps
};

struct FlatPolicyConfig {
    int state_dim = env::kStateDim;
    int action_dim = env::kActionDim;
    int context_steps = 20;  // K env steps of history
    int prompt_steps = 10;   // K* env steps of prompt
    double rtg_scale = 0.01;
    int batch_per_task = 8;
    core::TransformerConfig backbone{.dim = 128, .heads = 4, .layers = 4, .max_tokens = 0,
                                     .dropout = 0.1};
};

// The first K* steps of the task's highest-return trajectory, with
// return-to-go annotations (ties toward the earliest trajectory).
std::vector<FlatStep> select_flat_prompt(const env::Dataset& data, int task_id, int prompt_steps);

class FlatPolicy {
public:
    FlatPolicy(core::ParamStore& store, FlatPolicyConfig config, uint64_t seed);

    const FlatPolicyConfig& config() const { return config_; }

    // Predicted action at every history step (teacher-forced), read from the
    // state tokens so each prediction sees only the strict past plus its own
    // (return, state) pair.
    core::Tensor forward_actions(const FlatSequence& seq, core::Rng* dropout_rng = nullptr) const;

    // Deployment: the action for the pending step.  Past steps beyond the
    // context window are dropped from the front.
    std::array<double, 2> act(const std::vector<FlatStep>& prompt,
                              const std::vector<FlatStep>& past, double rtg_now,
                              std::span<const double> state_now) const;

    // One optimizer step: per-task minibatches of contiguous step windows
    // with that task's prompt, mean-squared error against stored actions.
    double train_step(const env::Dataset& data, core::Adam& opt, core::Rng& rng);

    uint64_t checksum() const;
    std::vector<core::Tensor> params() const;

private:
    core::Tensor build_tokens(const std::vector<FlatStep>& prompt,
                              const std::vector<FlatStep>& history, bool pending,
                              std::vector<int>& readout) const;

    core::ParamStore* store_;
    FlatPolicyConfig config_;
    core::Tensor proj_r_w_, proj_r_b_, proj_s_w_, proj_s_b_, proj_a_w_, proj_a_b_;
    core::Tensor head_w_, head_b_;
    core::Transformer backbone_;
};

}  // namespace goskill::run
