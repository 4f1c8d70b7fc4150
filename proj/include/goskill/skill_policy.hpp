#pragma once

// High-level skill policy: trajectories are preprocessed into decision-point
// records spaced one skill horizon apart, and a prompt-conditioned causal
// transformer picks a skill index at each decision point, trained with focal
// loss to survive the class imbalance of the skill distribution.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "goskill/data.hpp"
#include "goskill/optim.hpp"
#include "goskill/skill_model.hpp"
#include "goskill/transformer.hpp"

namespace goskill::skill {

// One decision point T: return-to-go and state at T, the embedding and index
// of the skill executed over [T, T+H).  Partial trajectory tails keep their
// record as context but carry zero validity so they never enter the loss.
struct PolicyRecord {
    double rtg = 0.0;
    double valid = 1.0;
    int skill_index = -1;
    std::vector<double> state;
    std::vector<double> skill_embedding;
};

struct PolicyTrajectory {
    int task_id = -1;
    int traj_index = -1;
    double total_return = 0.0;
    std::vector<PolicyRecord> records;
};

// Preprocessed policy dataset, cacheable on disk and keyed by the source
// dataset hash, the frozen skill-space hash, and the horizon.
struct PolicyDataset {
    int horizon = 0;
    int state_dim = 0;
    int latent_dim = 0;
    uint64_t dataset_hash = 0;
    uint64_t skill_space_hash = 0;
    std::vector<PolicyTrajectory> trajectories;

    std::vector<int> task_ids() const;  // distinct, in first-appearance order
};

// Prompt plus history windows fed to the policy in one forward pass.
struct PolicyTokenSequence {
    std::vector<PolicyRecord> prompt;
    std::vector<PolicyRecord> history;  // ≥ 1 decision points
};

struct SkillPolicyConfig {
    int state_dim = env::kStateDim;
    int latent_dim = 64;
    int codebook_size = 16;  // M-way head
    int context_points = 20;   // K decision points of history
    int prompt_points = 10;    // K* decision points of prompt
    double rtg_scale = 0.01;   // fixed input scaling for raw returns
    double gamma = 2.0;        // focal focusing parameter
    int batch_per_task = 8;
    core::TransformerConfig backbone{.dim = 128, .heads = 4, .layers = 4, .max_tokens = 0,
                                     .dropout = 0.1};
    bool use_vq = true;  // off: regression head onto the continuous latent
};

// Splits every trajectory into decision points under the frozen skill model.
// The skill space must be frozen first: labels are only stable then.
PolicyDataset preprocess_policy_dataset(const env::Dataset& data, SkillModel& model);

// Binary cache round trip.
void save_policy_dataset(const PolicyDataset& data, const std::string& path);
PolicyDataset load_policy_dataset(const std::string& path);
// Loads the cache when its keys match (source hash, skill-space hash,
// horizon); otherwise rebuilds and rewrites it.
PolicyDataset load_or_preprocess(const env::Dataset& data, SkillModel& model,
                                 const std::string& cache_path);

// The first K* decision points of the task's highest-return demonstration
// (ties toward the earliest trajectory).  `seed` keeps the signature stable
// for stochastic prompt strategies; the reference strategy ignores it.
std::vector<PolicyRecord> select_prompt(const PolicyDataset& data, int task_id,
                                        int prompt_points, uint64_t seed);

class SkillPolicy {
public:
    SkillPolicy(core::ParamStore& store, SkillPolicyConfig config, uint64_t seed);

    const SkillPolicyConfig& config() const { return config_; }

    // Distribution over the M skills at every history decision point,
    // rows summing to one.  Requires the classification head (VQ mode).
    core::Tensor forward_distributions(const PolicyTokenSequence& seq,
                                       core::Rng* dropout_rng = nullptr) const;
    // Continuous latent prediction per decision point (no-VQ mode).
    core::Tensor forward_latents(const PolicyTokenSequence& seq,
                                 core::Rng* dropout_rng = nullptr) const;

    // Deployment: skill scores for the pending decision point, given the
    // prompt, completed past triples, and the current return-to-go/state.
    // Returns M probabilities (VQ) or a latent vector (no-VQ).  Past points
    // beyond the context window are dropped from the front.
    std::vector<double> act(const std::vector<PolicyRecord>& prompt,
                            const std::vector<PolicyRecord>& past, double rtg_now,
                            std::span<const double> state_now) const;

    // One optimizer step: per-task minibatches of history windows with that
    // task's prompt, focal loss (or MSE in no-VQ mode) over unmasked points.
    double train_step(const PolicyDataset& data, core::Adam& opt, core::Rng& rng);

    uint64_t checksum() const;
    std::vector<core::Tensor> params() const;

private:
    // Token matrix for prompt + history; when `pending` is set the final
    // point contributes only its (return, state) pair.  Returns the head
    // input rows of each history state token through `readout`.
    core::Tensor build_tokens(const std::vector<PolicyRecord>& prompt,
                              const std::vector<PolicyRecord>& history, bool pending,
                              std::vector<int>& readout) const;
    core::Tensor head_outputs(const PolicyTokenSequence& seq, core::Rng* dropout_rng) const;

    core::ParamStore* store_;
    SkillPolicyConfig config_;
    core::Tensor proj_r_w_, proj_r_b_, proj_s_w_, proj_s_b_, proj_z_w_, proj_z_b_;
    core::Tensor head_w_, head_b_;
    core::Transformer backbone_;
};

}  // namespace goskill::skill
