#include "goskill/skill_model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

namespace goskill::skill {

using core::Adam;
using core::Init;
using core::ParamStore;
using core::Rng;
using core::Tape;
using core::Tensor;

namespace {

SkillModelConfig normalized(SkillModelConfig c) {
    if (c.horizon < 1) throw ConfigError("skill horizon must be positive");
    if (c.codebook_size < 1) throw ConfigError("codebook must hold at least one code");
    if (c.latent_dim < 1) throw ConfigError("latent dimension must be positive");
    if (c.alpha < 0.0) throw ConfigError("commitment weight must be non-negative");
    if (c.batch_per_task < 1 || c.batch_per_class < 1) {
        throw ConfigError("skill-model batch sizes must be positive");
    }
    // prompt + (state, reached-goal, action) per step
    c.decoder.max_tokens = 1 + 3 * c.horizon;
    return c;
}

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double d = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        const double diff = a[i] - b[i];
        d += diff * diff;
    }
    return d;
}

// Flattens a window's action prefix a_{t0 .. t0+h-1}, zero-padded to H
// entries: the encoder input of the action-encoded variant.
void write_action_prefix(std::span<double> row, const std::vector<std::array<double, 2>>& actions,
                         int h, int horizon, int action_dim) {
    std::fill(row.begin(), row.end(), 0.0);
    for (int u = 0; u < h && u < horizon; ++u) {
        for (int a = 0; a < action_dim; ++a) row[u * action_dim + a] = actions[u][a];
    }
}

}  // namespace

SkillModel::SkillModel(ParamStore& store, SkillModelConfig config, uint64_t seed)
    : store_(&store),
      config_(normalized(std::move(config))),
      // A store that already holds the codebook came from a checkpoint or an
      // earlier model over the same store; its codes are meaningful.
      codebook_ready_(store.contains("skill.space.codebook")),
      backbone_(store, "skill.dec.tf.", config_.decoder, seed) {
    const int in_dim = config_.encoder_input_dim();
    const int hidden = config_.encoder_hidden;
    const int latent = config_.latent_dim;
    const int dim = config_.decoder.dim;

    enc_w1_ = store.create("skill.space.enc.w1", {in_dim, hidden}, Init::kTruncNormal002, seed);
    enc_b1_ = store.create("skill.space.enc.b1", {hidden}, Init::kZeros, seed);
    enc_w2_ = store.create("skill.space.enc.w2", {hidden, latent}, Init::kTruncNormal002, seed);
    enc_b2_ = store.create("skill.space.enc.b2", {latent}, Init::kZeros, seed);
    codebook_ =
        store.create("skill.space.codebook", {config_.codebook_size, latent}, Init::kTruncNormal002, seed);

    proj_s_w_ = store.create("skill.dec.proj_s.w", {config_.state_dim, dim}, Init::kTruncNormal002, seed);
    proj_s_b_ = store.create("skill.dec.proj_s.b", {dim}, Init::kZeros, seed);
    proj_g_w_ = store.create("skill.dec.proj_g.w", {latent, dim}, Init::kTruncNormal002, seed);
    proj_g_b_ = store.create("skill.dec.proj_g.b", {dim}, Init::kZeros, seed);
    proj_a_w_ = store.create("skill.dec.proj_a.w", {config_.action_dim, dim}, Init::kTruncNormal002, seed);
    proj_a_b_ = store.create("skill.dec.proj_a.b", {dim}, Init::kZeros, seed);
    head_w_ = store.create("skill.dec.head.w", {dim, config_.action_dim}, Init::kTruncNormal002, seed);
    head_b_ = store.create("skill.dec.head.b", {config_.action_dim}, Init::kZeros, seed);

    usage_.assign(static_cast<size_t>(config_.codebook_size), 0);
    last_used_step_.assign(static_cast<size_t>(config_.codebook_size), 0);
}

Tensor SkillModel::encode_rows(const Tensor& inputs) const {
    if (inputs.cols() != config_.encoder_input_dim()) {
        throw ShapeError("goal encoder expects width " +
                         std::to_string(config_.encoder_input_dim()) + ", got " +
                         core::shape_str(inputs.shape()));
    }
    return linear(relu(linear(inputs, enc_w1_, enc_b1_)), enc_w2_, enc_b2_);
}

std::vector<double> SkillModel::encode_goal(std::span<const double> s_from,
                                            std::span<const double> s_to) const {
    if (config_.action_encoded) {
        throw ConfigError("goal encoder reads action prefixes in the action-encoded variant");
    }
    if (s_from.size() != s_to.size() ||
        static_cast<int>(s_from.size()) != config_.state_dim) {
        throw ShapeError("encode_goal states must both have dimension " +
                         std::to_string(config_.state_dim));
    }
    std::vector<double> diff(s_from.size());
    for (size_t i = 0; i < diff.size(); ++i) diff[i] = s_to[i] - s_from[i];
    return encode_rows(Tensor::from_data({1, config_.state_dim}, std::move(diff))).to_vector();
}

void SkillModel::initialize_codebook(const std::vector<std::vector<double>>& samples, Rng& rng) {
    if (samples.empty()) throw DataError("codebook initialization needs at least one embedding");
    for (const auto& s : samples) {
        if (static_cast<int>(s.size()) != config_.latent_dim) {
            throw ShapeError("codebook sample dimension mismatch");
        }
    }
    const size_t n = samples.size();
    const int m = config_.codebook_size;
    std::vector<size_t> picks;
    picks.push_back(rng.index(n));
    std::vector<double> min_d2(n, 0.0);
    auto values = codebook_.values();
    for (int code = 1; code < m; ++code) {
        double total = 0.0;
        for (size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            for (size_t p : picks) best = std::min(best, squared_distance(samples[i], samples[p]));
            min_d2[i] = best;
            total += best;
        }
        if (total > 1e-12) {
            // farther samples more likely: spreads the initial codes out
            double r = rng.uniform(0.0, total);
            size_t chosen = n - 1;
            for (size_t i = 0; i < n; ++i) {
                r -= min_d2[i];
                if (r <= 0.0) {
                    chosen = i;
                    break;
                }
            }
            picks.push_back(chosen);
        } else {
            picks.push_back(rng.index(n));  // fewer distinct samples than codes
        }
    }
    for (int code = 0; code < m; ++code) {
        const auto& src = samples[picks[static_cast<size_t>(code)]];
        const bool duplicate =
            std::count(picks.begin(), picks.begin() + code, picks[static_cast<size_t>(code)]) > 0;
        for (int j = 0; j < config_.latent_dim; ++j) {
            double v = src[static_cast<size_t>(j)];
            if (duplicate) v += rng.truncated_normal(0.01);  // split reused samples apart
            values[static_cast<size_t>(code * config_.latent_dim + j)] = v;
        }
    }
    codebook_ready_ = true;
}

int SkillModel::nearest_code(std::span<const double> z) const {
    if (static_cast<int>(z.size()) != config_.latent_dim) {
        throw ShapeError("quantize expects a latent vector of dimension " +
                         std::to_string(config_.latent_dim));
    }
    const auto values = codebook_.values();
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int code = 0; code < config_.codebook_size; ++code) {
        const double d = squared_distance(
            z, values.subspan(static_cast<size_t>(code * config_.latent_dim),
                              static_cast<size_t>(config_.latent_dim)));
        if (d < best_d) {  // strict: ties keep the lowest index
            best_d = d;
            best = code;
        }
    }
    return best;
}

std::pair<int, std::vector<double>> SkillModel::quantize(std::span<const double> z) {
    const int index = nearest_code(z);
    ++usage_[static_cast<size_t>(index)];
    return {index, codebook_row_values(index)};
}

std::vector<double> SkillModel::codebook_row_values(int index) const {
    if (index < 0 || index >= config_.codebook_size) {
        throw IndexError("codebook index " + std::to_string(index) + " out of range");
    }
    const auto values = codebook_.values();
    return {values.begin() + index * config_.latent_dim,
            values.begin() + (index + 1) * config_.latent_dim};
}

Tensor SkillModel::codebook_row(int index) const { return row_slice(codebook_, index, 1); }

void SkillModel::reset_code_usage() { std::fill(usage_.begin(), usage_.end(), 0); }

Tensor SkillModel::vq_loss(const Tensor& z_row, const Tensor& e_row) const {
    Tensor to_codebook = sub(detach(z_row), e_row);
    Tensor to_encoder = sub(z_row, detach(e_row));
    return add(sum_all(mul(to_codebook, to_codebook)),
               scale(sum_all(mul(to_encoder, to_encoder)), config_.alpha));
}

Tensor SkillModel::decoder_tokens(const Tensor& skill_embedding, const Tensor& states,
                                  const Tensor& reached_goals, const Tensor& actions,
                                  int length) const {
    if (length < 1) throw ContractError("skill decoder needs at least one step of history");
    if (length > config_.horizon) {
        throw ContractError("history of " + std::to_string(length) +
                            " steps exceeds the skill horizon of " +
                            std::to_string(config_.horizon));
    }
    if (skill_embedding.rows() != 1 || skill_embedding.cols() != config_.latent_dim) {
        throw ShapeError("skill embedding must be one latent row");
    }
    if (states.rows() != length) throw ShapeError("state history length mismatch");
    if (config_.use_reached_goal &&
        (!reached_goals.defined() || reached_goals.rows() != length ||
         reached_goals.cols() != config_.latent_dim)) {
        throw ShapeError("reached-goal history must be one latent row per step");
    }
    const int n_actions = actions.defined() ? actions.rows() : 0;
    if (n_actions != length && n_actions != length - 1) {
        throw ShapeError("action history must cover every step or all but the last");
    }

    Tensor pos = backbone_.positions(1, length);  // the 3 tokens of a step share a row
    Tensor s_tok = add(linear(states, proj_s_w_, proj_s_b_), pos);
    // The no-reached-goal variant blanks the token content but keeps the slot.
    Tensor g_tok = config_.use_reached_goal
                       ? add(linear(reached_goals, proj_g_w_, proj_g_b_), pos)
                       : pos;
    Tensor prompt = add(linear(skill_embedding, proj_g_w_, proj_g_b_), backbone_.position(0));

    std::vector<Tensor> parts{prompt};
    if (n_actions > 0) {
        Tensor a_tok = add(linear(actions, proj_a_w_, proj_a_b_),
                           n_actions == length ? pos : backbone_.positions(1, n_actions));
        if (n_actions == length) {
            parts.push_back(core::interleave_rows({s_tok, g_tok, a_tok}));
        } else {
            parts.push_back(core::interleave_rows({row_slice(s_tok, 0, n_actions),
                                                   row_slice(g_tok, 0, n_actions), a_tok}));
            parts.push_back(row_slice(s_tok, n_actions, 1));
            parts.push_back(row_slice(g_tok, n_actions, 1));
        }
    } else if (length == 1) {
        parts.push_back(s_tok);
        parts.push_back(g_tok);
    } else {
        throw ShapeError("multi-step history requires the earlier actions");
    }
    return concat_rows(parts);
}

Tensor SkillModel::decode_window(const Tensor& skill_embedding, const Tensor& states,
                                 const Tensor& reached_goals, const Tensor& actions,
                                 Rng* dropout_rng) const {
    const int length = states.rows();
    if (!actions.defined() || actions.rows() != length) {
        throw ShapeError("window decoding is teacher-forced: one action per step");
    }
    Tensor tokens = decoder_tokens(skill_embedding, states, reached_goals, actions, length);
    Tensor h = backbone_.forward(tokens, {}, dropout_rng);
    // Predictions live on the reached-goal tokens: the last token before each
    // step's action, so every prediction is causal in the action it targets.
    std::vector<int> readout(static_cast<size_t>(length));
    for (int t = 0; t < length; ++t) readout[static_cast<size_t>(t)] = 2 + 3 * t;
    return linear(select_rows(h, readout), head_w_, head_b_);
}

std::vector<double> SkillModel::reached_goal_rows(
    const std::vector<std::vector<double>>& window_states,
    const std::vector<std::array<double, 2>>& window_actions, int length) const {
    const int latent = config_.latent_dim;
    std::vector<double> rows(static_cast<size_t>(length * latent), 0.0);
    if (!config_.use_reached_goal) return rows;  // tokens are blanked anyway

    const int in_dim = config_.encoder_input_dim();
    std::vector<double> inputs(static_cast<size_t>(length * in_dim), 0.0);
    for (int h = 0; h < length; ++h) {
        std::span<double> row(inputs.data() + static_cast<size_t>(h) * in_dim,
                              static_cast<size_t>(in_dim));
        if (config_.action_encoded) {
            write_action_prefix(row, window_actions, h, config_.horizon, config_.action_dim);
        } else {
            const auto& s0 = window_states.front();
            const auto& sh = window_states[static_cast<size_t>(h)];
            for (int j = 0; j < config_.state_dim; ++j) row[static_cast<size_t>(j)] = sh[j] - s0[j];
        }
    }
    Tensor z = encode_rows(Tensor::from_data({length, in_dim}, std::move(inputs)));
    const auto v = z.values();
    std::copy(v.begin(), v.end(), rows.begin());
    return rows;
}

std::array<double, 2> SkillModel::decode_next_action(
    std::span<const double> skill_embedding, const std::vector<std::vector<double>>& window_states,
    const std::vector<std::array<double, 2>>& window_actions) const {
    const int length = static_cast<int>(window_states.size());
    if (length < 1) throw ContractError("skill decoder needs the current state");
    if (static_cast<int>(window_actions.size()) != length - 1) {
        throw ShapeError("deployment history carries one action per completed step");
    }
    if (static_cast<int>(skill_embedding.size()) != config_.latent_dim) {
        throw ShapeError("skill embedding dimension mismatch");
    }

    Tensor emb = Tensor::from_data({1, config_.latent_dim},
                                   {skill_embedding.begin(), skill_embedding.end()});
    std::vector<double> flat_states(static_cast<size_t>(length * config_.state_dim));
    for (int t = 0; t < length; ++t) {
        const auto& s = window_states[static_cast<size_t>(t)];
        if (static_cast<int>(s.size()) != config_.state_dim) {
            throw ShapeError("window state dimension mismatch");
        }
        std::copy(s.begin(), s.end(), flat_states.begin() + static_cast<size_t>(t) * config_.state_dim);
    }
    Tensor states = Tensor::from_data({length, config_.state_dim}, std::move(flat_states));
    Tensor reached = Tensor::from_data(
        {length, config_.latent_dim}, reached_goal_rows(window_states, window_actions, length));
    Tensor actions;
    if (length > 1) {
        std::vector<double> flat(static_cast<size_t>((length - 1) * config_.action_dim));
        for (int t = 0; t + 1 < length; ++t) {
            for (int a = 0; a < config_.action_dim; ++a) {
                flat[static_cast<size_t>(t * config_.action_dim + a)] = window_actions[static_cast<size_t>(t)][a];
            }
        }
        actions = Tensor::from_data({length - 1, config_.action_dim}, std::move(flat));
    }

    Tensor tokens = decoder_tokens(emb, states, reached, actions, length);
    Tensor h = backbone_.forward(tokens);
    Tensor out = linear(row_slice(h, tokens.rows() - 1, 1), head_w_, head_b_);
    core::check_finite(out, "decoded action");
    return {out.at(0, 0), out.at(0, 1)};
}

ExtractionStats SkillModel::extraction_step(const env::Dataset& data, Adam& opt, Rng& rng,
                                            int step_index) {
    const int H = config_.horizon;
    struct WindowRef {
        const env::Trajectory* traj;
        int start;
    };
    std::vector<WindowRef> batch;
    for (const auto& task : data.tasks) {
        std::vector<WindowRef> candidates;
        for (const auto& traj : task.trajectories) {
            for (int t0 = 0; t0 + H <= traj.length(); t0 += H) {
                candidates.push_back({&traj, t0});
            }
        }
        if (candidates.empty()) continue;  // task has no full window
        for (int i = 0; i < config_.batch_per_task; ++i) {
            batch.push_back(candidates[rng.index(candidates.size())]);
        }
    }
    if (batch.empty()) throw DataError("dataset holds no full skill window");
    const int n = static_cast<int>(batch.size());
    const int in_dim = config_.encoder_input_dim();

    // One encoder pass over every window's offsets 0..H; the last row of each
    // group is the H-horizon goal, the first H rows are the reached-goals.
    std::vector<double> enc_in(static_cast<size_t>(n) * (H + 1) * in_dim, 0.0);
    for (int i = 0; i < n; ++i) {
        const auto& traj = *batch[static_cast<size_t>(i)].traj;
        const int t0 = batch[static_cast<size_t>(i)].start;
        for (int h = 0; h <= H; ++h) {
            std::span<double> row(enc_in.data() + (static_cast<size_t>(i) * (H + 1) + h) * in_dim,
                                  static_cast<size_t>(in_dim));
            if (config_.action_encoded) {
                std::vector<std::array<double, 2>> prefix(
                    traj.actions.begin() + t0, traj.actions.begin() + t0 + H);
                write_action_prefix(row, prefix, h, H, config_.action_dim);
            } else {
                const auto& s0 = traj.states[static_cast<size_t>(t0)];
                const auto& sh = traj.states[static_cast<size_t>(t0 + h)];
                for (int j = 0; j < config_.state_dim; ++j) row[static_cast<size_t>(j)] = sh[j] - s0[j];
            }
        }
    }

    if (config_.use_vq && !codebook_ready_) {
        // First batch seeds the codebook from the embedding distribution.
        Tensor z0 = encode_rows(Tensor::from_data({n * (H + 1), in_dim}, enc_in));
        std::vector<std::vector<double>> samples;
        for (int i = 0; i < n; ++i) {
            const auto v = z0.values().subspan(
                (static_cast<size_t>(i) * (H + 1) + H) * config_.latent_dim,
                static_cast<size_t>(config_.latent_dim));
            samples.emplace_back(v.begin(), v.end());
        }
        initialize_codebook(samples, rng);
        std::fill(last_used_step_.begin(), last_used_step_.end(), step_index);
    }

    opt.zero_grad();
    ExtractionStats stats;
    std::vector<std::vector<double>> batch_goals(static_cast<size_t>(n));
    {
        Tape tape;
        Tensor enc_out = encode_rows(Tensor::from_data({n * (H + 1), in_dim}, std::move(enc_in)));
        Tensor mse_sum, vq_sum;
        for (int i = 0; i < n; ++i) {
            const auto& traj = *batch[static_cast<size_t>(i)].traj;
            const int t0 = batch[static_cast<size_t>(i)].start;
            Tensor reached = row_slice(enc_out, i * (H + 1), H);
            Tensor z_goal = row_slice(enc_out, i * (H + 1) + H, 1);
            const auto z_values = z_goal.values();
            batch_goals[static_cast<size_t>(i)].assign(z_values.begin(), z_values.end());

            Tensor prompt = z_goal;
            if (config_.use_vq) {
                const int index = quantize(z_values).first;
                last_used_step_[static_cast<size_t>(index)] = step_index;
                Tensor code = codebook_row(index);
                Tensor vq = vq_loss(z_goal, code);
                vq_sum = vq_sum.defined() ? add(vq_sum, vq) : vq;
                prompt = straight_through(z_goal, code);
            }

            std::vector<double> flat_s(static_cast<size_t>(H * config_.state_dim));
            std::vector<double> flat_a(static_cast<size_t>(H * config_.action_dim));
            for (int h = 0; h < H; ++h) {
                const auto& s = traj.states[static_cast<size_t>(t0 + h)];
                std::copy(s.begin(), s.end(), flat_s.begin() + static_cast<size_t>(h) * config_.state_dim);
                for (int a = 0; a < config_.action_dim; ++a) {
                    flat_a[static_cast<size_t>(h * config_.action_dim + a)] =
                        traj.actions[static_cast<size_t>(t0 + h)][a];
                }
            }
            Tensor states = Tensor::from_data({H, config_.state_dim}, std::move(flat_s));
            Tensor actions = Tensor::from_data({H, config_.action_dim}, std::move(flat_a));
            Tensor pred = decode_window(prompt, states, reached, actions, &rng);
            Tensor mse = mse_loss(pred, actions);
            mse_sum = mse_sum.defined() ? add(mse_sum, mse) : mse;
        }
        Tensor total = scale(mse_sum, 1.0 / n);
        stats.mse = total.item();
        if (vq_sum.defined()) {
            Tensor vq_mean = scale(vq_sum, 1.0 / n);
            stats.vq = vq_mean.item();
            total = add(total, vq_mean);
        }
        stats.total = total.item();
        tape.backward(total);
    }
    auto params = extraction_params();
    core::clip_global_norm(params, 1.0);
    opt.step();

    if (config_.use_vq) {
        auto values = codebook_.values();
        for (int code = 0; code < config_.codebook_size; ++code) {
            if (step_index - last_used_step_[static_cast<size_t>(code)] < config_.dead_code_steps) {
                continue;
            }
            // Re-seed a dead code onto a live embedding from this batch.
            const auto& z = batch_goals[rng.index(batch_goals.size())];
            std::copy(z.begin(), z.end(), values.begin() + code * config_.latent_dim);
            last_used_step_[static_cast<size_t>(code)] = step_index;
            ++stats.reseeded;
        }
    }
    return stats;
}

std::vector<SkillSegment> SkillModel::prepare_segments(const env::Dataset& data) {
    const int H = config_.horizon;
    std::vector<SkillSegment> out;
    for (const auto& task : data.tasks) {
        for (size_t traj_index = 0; traj_index < task.trajectories.size(); ++traj_index) {
            const auto& traj = task.trajectories[traj_index];
            for (int t0 = 0; t0 < traj.length(); t0 += H) {
                const int length = std::min(H, traj.length() - t0);
                SkillSegment seg;
                seg.task_id = task.task_id;
                seg.traj_index = static_cast<int>(traj_index);
                seg.start_t = t0;
                seg.length = length;
                seg.partial = length < H;

                seg.states.resize(static_cast<size_t>((length + 1) * config_.state_dim));
                for (int h = 0; h <= length; ++h) {
                    const auto& s = traj.states[static_cast<size_t>(t0 + h)];
                    std::copy(s.begin(), s.end(),
                              seg.states.begin() + static_cast<size_t>(h) * config_.state_dim);
                }
                seg.actions.resize(static_cast<size_t>(length * config_.action_dim));
                std::vector<std::array<double, 2>> window_actions(length);
                std::vector<std::vector<double>> window_states(static_cast<size_t>(length));
                for (int h = 0; h < length; ++h) {
                    window_actions[static_cast<size_t>(h)] = traj.actions[static_cast<size_t>(t0 + h)];
                    window_states[static_cast<size_t>(h)] = traj.states[static_cast<size_t>(t0 + h)];
                    for (int a = 0; a < config_.action_dim; ++a) {
                        seg.actions[static_cast<size_t>(h * config_.action_dim + a)] =
                            window_actions[static_cast<size_t>(h)][a];
                    }
                }
                seg.reached = reached_goal_rows(window_states, window_actions, length);

                // Goal over the window end (the full horizon when available).
                std::vector<double> goal_in(static_cast<size_t>(config_.encoder_input_dim()), 0.0);
                if (config_.action_encoded) {
                    write_action_prefix(goal_in, window_actions, length, H, config_.action_dim);
                } else {
                    const auto& s0 = traj.states[static_cast<size_t>(t0)];
                    const auto& sH = traj.states[static_cast<size_t>(t0 + length)];
                    for (int j = 0; j < config_.state_dim; ++j) goal_in[static_cast<size_t>(j)] = sH[j] - s0[j];
                }
                seg.goal_embedding =
                    encode_rows(Tensor::from_data({1, config_.encoder_input_dim()}, std::move(goal_in)))
                        .to_vector();
                if (config_.use_vq) {
                    auto [index, code] = quantize(seg.goal_embedding);
                    seg.skill_index = index;
                    seg.skill_embedding = std::move(code);
                } else {
                    seg.skill_embedding = seg.goal_embedding;
                }
                out.push_back(std::move(seg));
            }
        }
    }
    return out;
}

std::vector<int> SkillModel::sample_enhancement_batch(const std::vector<SkillSegment>& segments,
                                                      Rng& rng) const {
    std::vector<int> full;
    for (size_t i = 0; i < segments.size(); ++i) {
        if (!segments[i].partial) full.push_back(static_cast<int>(i));
    }
    if (full.empty()) throw DataError("no full segments to train on");

    std::vector<int> picks;
    if (config_.use_vq && config_.resample) {
        std::vector<std::vector<int>> classes(static_cast<size_t>(config_.codebook_size));
        for (int i : full) {
            const int c = segments[static_cast<size_t>(i)].skill_index;
            if (c >= 0 && c < config_.codebook_size) classes[static_cast<size_t>(c)].push_back(i);
        }
        bool any = false;
        for (const auto& members : classes) {  // empty classes skipped
            if (members.empty()) continue;
            any = true;
            for (int k = 0; k < config_.batch_per_class; ++k) {
                picks.push_back(members[rng.index(members.size())]);
            }
        }
        if (!any) throw DataError("every skill class is empty");
    } else {
        // Uniform over segments at the nominal batch size, so the resampling
        // ablation differs only in how draws are distributed.
        const int total = config_.batch_per_class * config_.codebook_size;
        for (int k = 0; k < total; ++k) picks.push_back(full[rng.index(full.size())]);
    }
    return picks;
}

double SkillModel::enhancement_step(const std::vector<SkillSegment>& segments, Adam& opt,
                                    Rng& rng) {
    const std::vector<int> picks = sample_enhancement_batch(segments, rng);

    opt.zero_grad();
    double loss_value = 0.0;
    {
        Tape tape;
        Tensor sum;
        for (int pick : picks) {
            const auto& seg = segments[static_cast<size_t>(pick)];
            Tensor emb = Tensor::from_data({1, config_.latent_dim}, seg.skill_embedding);
            Tensor states = Tensor::from_data({seg.length, config_.state_dim},
                                              {seg.states.begin(),
                                               seg.states.begin() + seg.length * config_.state_dim});
            Tensor reached = Tensor::from_data({seg.length, config_.latent_dim}, seg.reached);
            Tensor actions = Tensor::from_data({seg.length, config_.action_dim}, seg.actions);
            Tensor mse = mse_loss(decode_window(emb, states, reached, actions, &rng), actions);
            sum = sum.defined() ? add(sum, mse) : mse;
        }
        Tensor loss = scale(sum, 1.0 / static_cast<double>(picks.size()));
        loss_value = loss.item();
        tape.backward(loss);
    }
    auto params = decoder_params();
    core::clip_global_norm(params, 1.0);
    opt.step();
    return loss_value;
}

void SkillModel::freeze_skill_space() { store_->set_trainable("skill.space.", false); }

uint64_t SkillModel::skill_space_checksum() const { return store_->checksum("skill.space."); }

uint64_t SkillModel::decoder_checksum() const { return store_->checksum("skill.dec."); }

std::vector<Tensor> SkillModel::extraction_params() const { return store_->match("skill."); }

std::vector<Tensor> SkillModel::decoder_params() const { return store_->match("skill.dec."); }

void save_assignments(const std::vector<SkillSegment>& segments, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << "task_id,segment_start_t,skill_index\n";
    for (const auto& seg : segments) {
        if (seg.partial) continue;
        out << seg.task_id << ',' << seg.start_t << ',' << seg.skill_index << '\n';
    }
    if (!out) throw IoError("failed writing " + path);
}

std::vector<std::array<int, 3>> load_assignments(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    std::string line;
    if (!std::getline(in, line) || line != "task_id,segment_start_t,skill_index") {
        throw FormatError("bad assignment header in " + path);
    }
    std::vector<std::array<int, 3>> rows;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::array<int, 3> row{};
        char c1 = 0, c2 = 0;
        std::istringstream ss(line);
        if (!(ss >> row[0] >> c1 >> row[1] >> c2 >> row[2]) || c1 != ',' || c2 != ',') {
            throw FormatError("bad assignment row in " + path + ": " + line);
        }
        rows.push_back(row);
    }
    return rows;
}

}  // namespace goskill::skill
