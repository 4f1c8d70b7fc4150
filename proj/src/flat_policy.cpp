#include "goskill/flat_policy.hpp"

#include <algorithm>
#include <cmath>

namespace goskill::run {

using core::Adam;
using core::Init;
using core::ParamStore;
using core::Rng;
using core::Tape;
using core::Tensor;

namespace {

FlatPolicyConfig normalized(FlatPolicyConfig c) {
    if (c.context_steps < 1 || c.prompt_steps < 1) {
        throw ConfigError("baseline context and prompt lengths must be positive");
    }
    if (c.state_dim < 1 || c.action_dim < 1) {
        throw ConfigError("baseline state and action dimensions must be positive");
    }
    if (c.batch_per_task < 1) throw ConfigError("baseline batch size must be positive");
    c.backbone.max_tokens = 3 * (c.prompt_steps + c.context_steps);
    return c;
}

void check_step_dims(const FlatStep& s, int state_dim, const char* where) {
    if (static_cast<int>(s.state.size()) != state_dim) {
        throw ContractError(std::string(where) + ": step state dimension mismatch");
    }
}

}  // namespace

std::vector<FlatStep> select_flat_prompt(const env::Dataset& data, int task_id, int prompt_steps) {
    const env::Trajectory* best = nullptr;
    for (const auto& traj : data.task(task_id).trajectories) {
        if (best == nullptr || traj.total_return() > best->total_return()) best = &traj;
    }
    if (best == nullptr || best->length() == 0) {
        throw DataError("task " + std::to_string(task_id) + " has no demonstrations");
    }
    const auto rtg = env::return_to_go(*best);
    std::vector<FlatStep> prompt;
    const int n = std::min(prompt_steps, best->length());
    for (int t = 0; t < n; ++t) {
        FlatStep step;
        step.rtg = rtg[static_cast<size_t>(t)];
        step.state = best->states[static_cast<size_t>(t)];
        step.action = best->actions[static_cast<size_t>(t)];
        prompt.push_back(std::move(step));
    }
    return prompt;
}

FlatPolicy::FlatPolicy(ParamStore& store, FlatPolicyConfig config, uint64_t seed)
    : store_(&store),
      config_(normalized(std::move(config))),
      backbone_(store, "flat.tf.", config_.backbone, seed) {
    const int dim = config_.backbone.dim;
    proj_r_w_ = store.create("flat.proj_r.w", {1, dim}, Init::kTruncNormal002, seed);
    proj_r_b_ = store.create("flat.proj_r.b", {dim}, Init::kZeros, seed);
    proj_s_w_ = store.create("flat.proj_s.w", {config_.state_dim, dim}, Init::kTruncNormal002, seed);
    proj_s_b_ = store.create("flat.proj_s.b", {dim}, Init::kZeros, seed);
    proj_a_w_ = store.create("flat.proj_a.w", {config_.action_dim, dim}, Init::kTruncNormal002, seed);
    proj_a_b_ = store.create("flat.proj_a.b", {dim}, Init::kZeros, seed);
    head_w_ = store.create("flat.head.w", {dim, config_.action_dim}, Init::kTruncNormal002, seed);
    head_b_ = store.create("flat.head.b", {config_.action_dim}, Init::kZeros, seed);
}

Tensor FlatPolicy::build_tokens(const std::vector<FlatStep>& prompt,
                                const std::vector<FlatStep>& history, bool pending,
                                std::vector<int>& readout) const {
    if (history.empty()) throw ContractError("baseline sequence has no steps");
    if (static_cast<int>(prompt.size()) > config_.prompt_steps) {
        throw ContractError("prompt longer than the configured prompt length");
    }
    if (static_cast<int>(history.size()) > config_.context_steps) {
        throw ContractError("history longer than the configured context length");
    }
    for (const auto& s : prompt) check_step_dims(s, config_.state_dim, "prompt");
    for (const auto& s : history) check_step_dims(s, config_.state_dim, "history");

    const int np = static_cast<int>(prompt.size());
    const int nh = static_cast<int>(history.size());
    const int n = np + nh;
    const int n_act = pending ? n - 1 : n;  // the pending step has no action yet

    std::vector<double> rtg(static_cast<size_t>(n));
    std::vector<double> states(static_cast<size_t>(n) * config_.state_dim);
    std::vector<double> actions(static_cast<size_t>(std::max(n_act, 0)) * config_.action_dim);
    auto fill_step = [&](int slot, const FlatStep& step, bool with_action) {
        rtg[static_cast<size_t>(slot)] = step.rtg * config_.rtg_scale;
        std::copy(step.state.begin(), step.state.end(),
                  states.begin() + static_cast<size_t>(slot) * config_.state_dim);
        if (with_action) {
            std::copy(step.action.begin(), step.action.end(),
                      actions.begin() + static_cast<size_t>(slot) * config_.action_dim);
        }
    };
    for (int i = 0; i < np; ++i) fill_step(i, prompt[static_cast<size_t>(i)], true);
    for (int i = 0; i < nh; ++i) {
        const bool last_pending = pending && i + 1 == nh;
        fill_step(np + i, history[static_cast<size_t>(i)], !last_pending);
    }

    Tensor pos = backbone_.positions(0, n);  // one positional row per env step
    Tensor r_tok = add(linear(Tensor::from_data({n, 1}, std::move(rtg)), proj_r_w_, proj_r_b_), pos);
    Tensor s_tok = add(linear(Tensor::from_data({n, config_.state_dim}, std::move(states)),
                              proj_s_w_, proj_s_b_),
                       pos);

    readout.clear();
    for (int k = 0; k < nh; ++k) readout.push_back(3 * (np + k) + 1);  // state-token rows

    if (n_act == n) {
        Tensor a_tok = add(linear(Tensor::from_data({n, config_.action_dim}, std::move(actions)),
                                  proj_a_w_, proj_a_b_),
                           pos);
        return core::interleave_rows({r_tok, s_tok, a_tok});
    }
    Tensor a_tok =
        add(linear(Tensor::from_data({n_act, config_.action_dim}, std::move(actions)),
                   proj_a_w_, proj_a_b_),
            core::row_slice(pos, 0, n_act));
    std::vector<Tensor> parts;
    parts.push_back(core::interleave_rows(
        {core::row_slice(r_tok, 0, n_act), core::row_slice(s_tok, 0, n_act), a_tok}));
    parts.push_back(core::row_slice(r_tok, n_act, 1));
    parts.push_back(core::row_slice(s_tok, n_act, 1));
    return concat_rows(parts);
}

Tensor FlatPolicy::forward_actions(const FlatSequence& seq, Rng* dropout_rng) const {
    std::vector<int> readout;
    Tensor tokens = build_tokens(seq.prompt, seq.history, /*pending=*/false, readout);
    Tensor h = backbone_.forward(tokens, {}, dropout_rng);
    return linear(select_rows(h, readout), head_w_, head_b_);
}

std::array<double, 2> FlatPolicy::act(const std::vector<FlatStep>& prompt,
                                      const std::vector<FlatStep>& past, double rtg_now,
                                      std::span<const double> state_now) const {
    std::vector<FlatStep> history;
    const size_t keep = static_cast<size_t>(config_.context_steps - 1);
    const size_t first = past.size() > keep ? past.size() - keep : 0;
    history.assign(past.begin() + static_cast<std::ptrdiff_t>(first), past.end());
    FlatStep pending;
    pending.rtg = rtg_now;
    pending.state.assign(state_now.begin(), state_now.end());
    history.push_back(std::move(pending));

    std::vector<int> readout;
    Tensor tokens = build_tokens(prompt, history, /*pending=*/true, readout);
    Tensor h = backbone_.forward(tokens);
    Tensor out = linear(core::row_slice(h, tokens.rows() - 1, 1), head_w_, head_b_);
    core::check_finite(out, "baseline action");
    return {out.at(0, 0), out.at(0, 1)};
}

double FlatPolicy::train_step(const env::Dataset& data, Adam& opt, Rng& rng) {
    opt.zero_grad();
    double loss_value = 0.0;
    {
        Tape tape;
        Tensor sum;
        int count = 0;
        for (const auto& task : data.tasks) {
            FlatSequence seq;
            seq.prompt = select_flat_prompt(data, task.task_id, config_.prompt_steps);
            std::vector<const env::Trajectory*> usable;
            for (const auto& traj : task.trajectories) {
                if (traj.length() > 0) usable.push_back(&traj);
            }
            if (usable.empty()) continue;
            for (int b = 0; b < config_.batch_per_task; ++b) {
                const auto& traj = *usable[rng.index(usable.size())];
                const auto rtg = env::return_to_go(traj);
                const int len = traj.length();
                const int start =
                    len > config_.context_steps
                        ? static_cast<int>(
                              rng.index(static_cast<size_t>(len - config_.context_steps) + 1))
                        : 0;
                const int n = std::min(config_.context_steps, len - start);

                seq.history.clear();
                std::vector<double> target;
                for (int t = start; t < start + n; ++t) {
                    FlatStep step;
                    step.rtg = rtg[static_cast<size_t>(t)];
                    step.state = traj.states[static_cast<size_t>(t)];
                    step.action = traj.actions[static_cast<size_t>(t)];
                    target.push_back(step.action[0]);
                    target.push_back(step.action[1]);
                    seq.history.push_back(std::move(step));
                }
                Tensor targets = Tensor::from_data({n, config_.action_dim}, std::move(target));
                Tensor seq_loss = mse_loss(forward_actions(seq, &rng), targets);
                sum = sum.defined() ? add(sum, seq_loss) : seq_loss;
                ++count;
            }
        }
        if (!sum.defined()) throw DataError("baseline batch is empty: no non-trivial trajectories");
        Tensor loss = scale(sum, 1.0 / count);
        loss_value = loss.item();
        tape.backward(loss);
    }
    auto params_list = params();
    core::clip_global_norm(params_list, 1.0);
    opt.step();
    return loss_value;
}

uint64_t FlatPolicy::checksum() const { return store_->checksum("flat."); }

std::vector<Tensor> FlatPolicy::params() const { return store_->match("flat."); }

}  // namespace goskill::run
