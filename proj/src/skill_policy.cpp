#include "goskill/skill_policy.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

namespace goskill::skill {

using core::Adam;
using core::Init;
using core::ParamStore;
using core::Rng;
using core::Tape;
using core::Tensor;

namespace {

constexpr char kPolicyCacheMagic[8] = {'G', 'S', 'K', 'P', 'O', 'L', 'C', '1'};
constexpr uint32_t kPolicyCacheVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw FormatError("truncated policy cache: " + path);
    return v;
}

void write_doubles(std::ofstream& out, const std::vector<double>& v) {
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> read_doubles(std::ifstream& in, size_t n, const std::string& path) {
    std::vector<double> v(n);
    in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw FormatError("truncated policy cache: " + path);
    return v;
}

SkillPolicyConfig normalized(SkillPolicyConfig c) {
    if (c.context_points < 1 || c.prompt_points < 1) {
        throw ConfigError("policy context and prompt lengths must be positive");
    }
    if (c.codebook_size < 1 || c.latent_dim < 1) {
        throw ConfigError("policy head dimensions must be positive");
    }
    if (c.gamma < 0.0) throw ConfigError("focal focusing parameter must be non-negative");
    if (c.batch_per_task < 1) throw ConfigError("policy batch size must be positive");
    c.backbone.max_tokens = 3 * (c.prompt_points + c.context_points);
    return c;
}

void check_record_dims(const PolicyRecord& r, int state_dim, int latent_dim, const char* where) {
    if (static_cast<int>(r.state.size()) != state_dim ||
        static_cast<int>(r.skill_embedding.size()) != latent_dim) {
        throw ContractError(std::string(where) + ": record dimensions do not match the policy");
    }
}

}  // namespace

std::vector<int> PolicyDataset::task_ids() const {
    std::vector<int> ids;
    for (const auto& traj : trajectories) {
        if (std::find(ids.begin(), ids.end(), traj.task_id) == ids.end()) {
            ids.push_back(traj.task_id);
        }
    }
    return ids;
}

PolicyDataset preprocess_policy_dataset(const env::Dataset& data, SkillModel& model) {
    // Labels are only reproducible against a frozen skill space.
    for (const auto& t : model.extraction_params()) {
        if (t.name().rfind("skill.space.", 0) == 0 && t.requires_grad()) {
            throw ContractError("skill space must be frozen before policy preprocessing");
        }
    }

    PolicyDataset out;
    out.horizon = model.config().horizon;
    out.state_dim = model.config().state_dim;
    out.latent_dim = model.config().latent_dim;
    out.dataset_hash = data.content_hash();
    out.skill_space_hash = model.skill_space_checksum();

    // Segments arrive grouped by (task, trajectory) with ascending start_t;
    // returns-to-go come straight from the stored rewards.
    const auto segments = model.prepare_segments(data);
    std::pair<int, int> open_key{-1, -1};
    std::vector<double> rtg;
    for (const auto& seg : segments) {
        const auto& src = data.task(seg.task_id).trajectories[static_cast<size_t>(seg.traj_index)];
        const auto key = std::make_pair(seg.task_id, seg.traj_index);
        if (key != open_key) {
            PolicyTrajectory traj;
            traj.task_id = seg.task_id;
            traj.traj_index = seg.traj_index;
            traj.total_return = src.total_return();
            out.trajectories.push_back(std::move(traj));
            rtg = env::return_to_go(src);
            open_key = key;
        }
        PolicyRecord rec;
        rec.rtg = rtg[static_cast<size_t>(seg.start_t)];
        rec.valid = seg.partial ? 0.0 : 1.0;
        rec.skill_index = seg.skill_index;
        rec.state = src.states[static_cast<size_t>(seg.start_t)];
        rec.skill_embedding = seg.skill_embedding;
        out.trajectories.back().records.push_back(std::move(rec));
    }
    return out;
}

void save_policy_dataset(const PolicyDataset& data, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out.write(kPolicyCacheMagic, sizeof(kPolicyCacheMagic));
    write_pod(out, kPolicyCacheVersion);
    write_pod(out, data.dataset_hash);
    write_pod(out, data.skill_space_hash);
    write_pod(out, static_cast<int32_t>(data.horizon));
    write_pod(out, static_cast<int32_t>(data.state_dim));
    write_pod(out, static_cast<int32_t>(data.latent_dim));
    write_pod(out, static_cast<uint64_t>(data.trajectories.size()));
    for (const auto& traj : data.trajectories) {
        write_pod(out, static_cast<int32_t>(traj.task_id));
        write_pod(out, static_cast<int32_t>(traj.traj_index));
        write_pod(out, traj.total_return);
        write_pod(out, static_cast<uint64_t>(traj.records.size()));
        for (const auto& rec : traj.records) {
            write_pod(out, rec.rtg);
            write_pod(out, rec.valid);
            write_pod(out, static_cast<int32_t>(rec.skill_index));
            write_doubles(out, rec.state);
            write_doubles(out, rec.skill_embedding);
        }
    }
    if (!out) throw IoError("failed writing " + path);
}

PolicyDataset load_policy_dataset(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read " + path);
    char magic[8] = {};
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kPolicyCacheMagic, sizeof(magic)) != 0) {
        throw FormatError("not a policy cache: " + path);
    }
    if (read_pod<uint32_t>(in, path) != kPolicyCacheVersion) {
        throw FormatError("unsupported policy cache version in " + path);
    }
    PolicyDataset data;
    data.dataset_hash = read_pod<uint64_t>(in, path);
    data.skill_space_hash = read_pod<uint64_t>(in, path);
    data.horizon = read_pod<int32_t>(in, path);
    data.state_dim = read_pod<int32_t>(in, path);
    data.latent_dim = read_pod<int32_t>(in, path);
    if (data.horizon < 1 || data.state_dim < 1 || data.latent_dim < 1) {
        throw FormatError("corrupt policy cache header in " + path);
    }
    const uint64_t n_traj = read_pod<uint64_t>(in, path);
    data.trajectories.reserve(n_traj);
    for (uint64_t i = 0; i < n_traj; ++i) {
        PolicyTrajectory traj;
        traj.task_id = read_pod<int32_t>(in, path);
        traj.traj_index = read_pod<int32_t>(in, path);
        traj.total_return = read_pod<double>(in, path);
        const uint64_t n_rec = read_pod<uint64_t>(in, path);
        traj.records.reserve(n_rec);
        for (uint64_t r = 0; r < n_rec; ++r) {
            PolicyRecord rec;
            rec.rtg = read_pod<double>(in, path);
            rec.valid = read_pod<double>(in, path);
            rec.skill_index = read_pod<int32_t>(in, path);
            rec.state = read_doubles(in, static_cast<size_t>(data.state_dim), path);
            rec.skill_embedding = read_doubles(in, static_cast<size_t>(data.latent_dim), path);
            traj.records.push_back(std::move(rec));
        }
        data.trajectories.push_back(std::move(traj));
    }
    return data;
}

PolicyDataset load_or_preprocess(const env::Dataset& data, SkillModel& model,
                                 const std::string& cache_path) {
    try {
        PolicyDataset cached = load_policy_dataset(cache_path);
        if (cached.dataset_hash == data.content_hash() &&
            cached.skill_space_hash == model.skill_space_checksum() &&
            cached.horizon == model.config().horizon) {
            return cached;
        }
    } catch (const IoError&) {
        // no cache yet
    } catch (const FormatError&) {
        // stale or corrupt cache: rebuild below
    }
    PolicyDataset fresh = preprocess_policy_dataset(data, model);
    save_policy_dataset(fresh, cache_path);
    return fresh;
}

std::vector<PolicyRecord> select_prompt(const PolicyDataset& data, int task_id, int prompt_points,
                                        uint64_t seed) {
    (void)seed;  // the reference strategy is the deterministic demo prefix
    const PolicyTrajectory* best = nullptr;
    for (const auto& traj : data.trajectories) {
        if (traj.task_id != task_id) continue;
        if (best == nullptr || traj.total_return > best->total_return) best = &traj;
    }
    if (best == nullptr || best->records.empty()) {
        throw DataError("task " + std::to_string(task_id) + " has no demonstrations");
    }
    const size_t n = std::min(static_cast<size_t>(prompt_points), best->records.size());
    return {best->records.begin(), best->records.begin() + static_cast<std::ptrdiff_t>(n)};
}

SkillPolicy::SkillPolicy(ParamStore& store, SkillPolicyConfig config, uint64_t seed)
    : store_(&store),
      config_(normalized(std::move(config))),
      backbone_(store, "policy.tf.", config_.backbone, seed) {
    const int dim = config_.backbone.dim;
    proj_r_w_ = store.create("policy.proj_r.w", {1, dim}, Init::kTruncNormal002, seed);
    proj_r_b_ = store.create("policy.proj_r.b", {dim}, Init::kZeros, seed);
    proj_s_w_ = store.create("policy.proj_s.w", {config_.state_dim, dim}, Init::kTruncNormal002, seed);
    proj_s_b_ = store.create("policy.proj_s.b", {dim}, Init::kZeros, seed);
    proj_z_w_ = store.create("policy.proj_z.w", {config_.latent_dim, dim}, Init::kTruncNormal002, seed);
    proj_z_b_ = store.create("policy.proj_z.b", {dim}, Init::kZeros, seed);
    const int head_out = config_.use_vq ? config_.codebook_size : config_.latent_dim;
    head_w_ = store.create("policy.head.w", {dim, head_out}, Init::kTruncNormal002, seed);
    head_b_ = store.create("policy.head.b", {head_out}, Init::kZeros, seed);
}

Tensor SkillPolicy::build_tokens(const std::vector<PolicyRecord>& prompt,
                                 const std::vector<PolicyRecord>& history, bool pending,
                                 std::vector<int>& readout) const {
    if (history.empty()) throw ContractError("policy sequence has no decision points");
    if (static_cast<int>(prompt.size()) > config_.prompt_points) {
        throw ContractError("prompt longer than the configured prompt length");
    }
    if (static_cast<int>(history.size()) > config_.context_points) {
        throw ContractError("history longer than the configured context length");
    }
    for (const auto& r : prompt) check_record_dims(r, config_.state_dim, config_.latent_dim, "prompt");
    for (size_t i = 0; i < history.size(); ++i) {
        const auto& r = history[i];
        if (pending && i + 1 == history.size()) {
            // The pending point has no skill embedding yet; only (rtg, state).
            if (static_cast<int>(r.state.size()) != config_.state_dim) {
                throw ContractError("pending decision point state dimension mismatch");
            }
        } else {
            check_record_dims(r, config_.state_dim, config_.latent_dim, "history");
        }
    }

    const int np = static_cast<int>(prompt.size());
    const int nh = static_cast<int>(history.size());
    const int n = np + nh;

    std::vector<double> rtg(static_cast<size_t>(n));
    std::vector<double> states(static_cast<size_t>(n) * config_.state_dim);
    const int n_emb = pending ? n - 1 : n;
    std::vector<double> embeddings(static_cast<size_t>(std::max(n_emb, 0)) * config_.latent_dim);
    auto fill_point = [&](int slot, const PolicyRecord& rec, bool with_embedding) {
        rtg[static_cast<size_t>(slot)] = rec.rtg * config_.rtg_scale;
        std::copy(rec.state.begin(), rec.state.end(),
                  states.begin() + static_cast<size_t>(slot) * config_.state_dim);
        if (with_embedding) {
            std::copy(rec.skill_embedding.begin(), rec.skill_embedding.end(),
                      embeddings.begin() + static_cast<size_t>(slot) * config_.latent_dim);
        }
    };
    for (int i = 0; i < np; ++i) fill_point(i, prompt[static_cast<size_t>(i)], true);
    for (int i = 0; i < nh; ++i) {
        const bool last_pending = pending && i + 1 == nh;
        fill_point(np + i, history[static_cast<size_t>(i)], !last_pending);
    }

    Tensor pos = backbone_.positions(0, n);  // one positional row per decision point
    Tensor r_tok = add(linear(Tensor::from_data({n, 1}, std::move(rtg)), proj_r_w_, proj_r_b_), pos);
    Tensor s_tok = add(linear(Tensor::from_data({n, config_.state_dim}, std::move(states)),
                              proj_s_w_, proj_s_b_),
                       pos);

    readout.clear();
    for (int k = 0; k < nh; ++k) readout.push_back(3 * (np + k) + 1);  // state-token rows

    if (n_emb == n) {
        Tensor z_tok = add(linear(Tensor::from_data({n, config_.latent_dim}, std::move(embeddings)),
                                  proj_z_w_, proj_z_b_),
                           pos);
        return core::interleave_rows({r_tok, s_tok, z_tok});
    }
    Tensor z_tok =
        add(linear(Tensor::from_data({n_emb, config_.latent_dim}, std::move(embeddings)),
                   proj_z_w_, proj_z_b_),
            core::row_slice(pos, 0, n_emb));
    std::vector<Tensor> parts;
    parts.push_back(core::interleave_rows(
        {core::row_slice(r_tok, 0, n_emb), core::row_slice(s_tok, 0, n_emb), z_tok}));
    parts.push_back(core::row_slice(r_tok, n_emb, 1));
    parts.push_back(core::row_slice(s_tok, n_emb, 1));
    return concat_rows(parts);
}

Tensor SkillPolicy::head_outputs(const PolicyTokenSequence& seq, Rng* dropout_rng) const {
    std::vector<int> readout;
    Tensor tokens = build_tokens(seq.prompt, seq.history, /*pending=*/false, readout);
    Tensor h = backbone_.forward(tokens, {}, dropout_rng);
    return linear(select_rows(h, readout), head_w_, head_b_);
}

Tensor SkillPolicy::forward_distributions(const PolicyTokenSequence& seq, Rng* dropout_rng) const {
    if (!config_.use_vq) {
        throw ConfigError("the continuous-skill policy has no distribution head");
    }
    return softmax_rows(head_outputs(seq, dropout_rng));
}

Tensor SkillPolicy::forward_latents(const PolicyTokenSequence& seq, Rng* dropout_rng) const {
    if (config_.use_vq) {
        throw ConfigError("the quantized-skill policy predicts indices, not latents");
    }
    return head_outputs(seq, dropout_rng);
}

std::vector<double> SkillPolicy::act(const std::vector<PolicyRecord>& prompt,
                                     const std::vector<PolicyRecord>& past, double rtg_now,
                                     std::span<const double> state_now) const {
    std::vector<PolicyRecord> history;
    // Keep the most recent context; the pending point takes one slot.
    const size_t keep = static_cast<size_t>(config_.context_points - 1);
    const size_t first = past.size() > keep ? past.size() - keep : 0;
    history.assign(past.begin() + static_cast<std::ptrdiff_t>(first), past.end());
    PolicyRecord pending;
    pending.rtg = rtg_now;
    pending.state.assign(state_now.begin(), state_now.end());
    history.push_back(std::move(pending));

    std::vector<int> readout;
    Tensor tokens = build_tokens(prompt, history, /*pending=*/true, readout);
    Tensor h = backbone_.forward(tokens);
    Tensor out = linear(core::row_slice(h, tokens.rows() - 1, 1), head_w_, head_b_);
    if (config_.use_vq) out = softmax_rows(out);
    core::check_finite(out, "policy output");
    return out.to_vector();
}

double SkillPolicy::train_step(const PolicyDataset& data, Adam& opt, Rng& rng) {
    if (data.state_dim != config_.state_dim || data.latent_dim != config_.latent_dim) {
        throw ConfigError("policy dataset dimensions do not match the policy");
    }
    // Group trajectories by task, in first-appearance order.
    std::vector<int> ids = data.task_ids();
    std::vector<std::vector<const PolicyTrajectory*>> by_task(ids.size());
    for (const auto& traj : data.trajectories) {
        const size_t slot = static_cast<size_t>(
            std::find(ids.begin(), ids.end(), traj.task_id) - ids.begin());
        by_task[slot].push_back(&traj);
    }

    opt.zero_grad();
    double loss_value = 0.0;
    {
        Tape tape;
        Tensor weighted_sum;
        double total_weight = 0.0;
        for (size_t ti = 0; ti < ids.size(); ++ti) {
            PolicyTokenSequence seq;
            seq.prompt = select_prompt(data, ids[ti], config_.prompt_points, 0);
            for (int b = 0; b < config_.batch_per_task; ++b) {
                const auto& traj = *by_task[ti][rng.index(by_task[ti].size())];
                const int n = static_cast<int>(traj.records.size());
                const int start =
                    n > config_.context_points
                        ? static_cast<int>(rng.index(static_cast<size_t>(n - config_.context_points) + 1))
                        : 0;
                const int count = std::min(config_.context_points, n - start);
                seq.history.assign(traj.records.begin() + start,
                                   traj.records.begin() + start + count);

                std::vector<double> weights;
                double seq_weight = 0.0;
                for (const auto& rec : seq.history) {
                    weights.push_back(rec.valid);
                    seq_weight += rec.valid;
                }
                if (seq_weight <= 0.0) continue;  // nothing unmasked to learn from

                Tensor seq_loss;
                if (config_.use_vq) {
                    std::vector<int> targets;
                    for (const auto& rec : seq.history) {
                        targets.push_back(std::max(rec.skill_index, 0));
                    }
                    seq_loss = focal_loss(forward_distributions(seq, &rng), targets,
                                          config_.gamma, weights);
                } else {
                    std::vector<double> target_latents;
                    for (const auto& rec : seq.history) {
                        target_latents.insert(target_latents.end(), rec.skill_embedding.begin(),
                                              rec.skill_embedding.end());
                    }
                    Tensor targets = Tensor::from_data(
                        {static_cast<int>(seq.history.size()), config_.latent_dim},
                        std::move(target_latents));
                    seq_loss = mse_loss(forward_latents(seq, &rng), targets, weights);
                }
                Tensor contribution = scale(seq_loss, seq_weight);
                weighted_sum = weighted_sum.defined() ? add(weighted_sum, contribution) : contribution;
                total_weight += seq_weight;
            }
        }
        if (!weighted_sum.defined()) throw DataError("policy batch has no unmasked decision points");
        Tensor loss = scale(weighted_sum, 1.0 / total_weight);
        loss_value = loss.item();
        tape.backward(loss);
    }
    auto params_list = params();
    core::clip_global_norm(params_list, 1.0);
    opt.step();
    return loss_value;
}

uint64_t SkillPolicy::checksum() const { return store_->checksum("policy."); }

std::vector<Tensor> SkillPolicy::params() const { return store_->match("policy."); }

}  // namespace goskill::skill
