#pragma once

// Skill extraction machinery: a goal encoder over state differences, a
// vector-quantized skill codebook trained with the straight-through
// estimator, and a causal-transformer decoder that reconstructs the actions
// of an H-step window from a skill-embedding prompt.  Covers both training
// phases (joint extraction, then class-balanced decoder enhancement with the
// skill space frozen) and the ablation switches.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "goskill/data.hpp"
#include "goskill/optim.hpp"
#include "goskill/params.hpp"
#include "goskill/transformer.hpp"

namespace goskill::skill {

struct SkillModelConfig {
    int state_dim = env::kStateDim;
    int action_dim = env::kActionDim;
    int horizon = 10;       // H: steps per skill window
    int codebook_size = 16; // M
    int latent_dim = 64;    // |Z|
    double alpha = 0.25;    // VQ commitment weight
    int encoder_hidden = 128;
    core::TransformerConfig decoder{.dim = 128, .heads = 4, .layers = 4, .max_tokens = 0,
                                    .dropout = 0.1};
    int batch_per_task = 8;      // extraction minibatch per task
    int batch_per_class = 2;     // enhancement minibatch per skill class
    int dead_code_steps = 500;   // reseed a code unused this many steps

    // Ablation switches (all true/false = full method).
    bool use_reached_goal = true;  // off: reached-goal tokens zeroed
    bool use_vq = true;            // off: continuous embedding, no quantization
    bool action_encoded = false;   // on: encoder reads action prefixes, not state diffs
    bool resample = true;          // off: enhancement samples segments uniformly

    int encoder_input_dim() const {
        return action_encoded ? horizon * action_dim : state_dim;
    }
};

// One H-aligned window of a stored trajectory with its frozen-encoder
// annotations.  Row-major payloads sized by (length, dims).
struct SkillSegment {
    int task_id = -1;
    int traj_index = -1;
    int start_t = 0;
    int length = 0;
    bool partial = false;  // shorter than H (trajectory tail)
    int skill_index = -1;  // -1 when VQ is off
    std::vector<double> states;           // (length+1) x state_dim
    std::vector<double> actions;          // length x action_dim
    std::vector<double> reached;          // length x latent_dim
    std::vector<double> goal_embedding;   // z, latent_dim
    std::vector<double> skill_embedding;  // codebook row (== z when VQ off)
};

struct ExtractionStats {
    double total = 0.0;
    double mse = 0.0;
    double vq = 0.0;
    int reseeded = 0;  // dead codes replaced after this step
};

class SkillModel {
public:
    SkillModel(core::ParamStore& store, SkillModelConfig config, uint64_t seed);

    const SkillModelConfig& config() const { return config_; }

    // --- goal encoder ---
    // Batched MLP over rows of encoder inputs; graph-connected.
    core::Tensor encode_rows(const core::Tensor& inputs) const;
    // z = MLP(s_to - s_from); rejects the action-encoded variant.
    std::vector<double> encode_goal(std::span<const double> s_from,
                                    std::span<const double> s_to) const;

    // --- codebook ---
    bool codebook_ready() const { return codebook_ready_; }
    // Seeds the codebook from sample embeddings, spreading the picks by
    // squared-distance weighting so codes start distinct.
    void initialize_codebook(const std::vector<std::vector<double>>& samples, core::Rng& rng);
    int nearest_code(std::span<const double> z) const;  // pure nearest neighbor
    // Nearest code plus its embedding; bumps the usage counter.
    std::pair<int, std::vector<double>> quantize(std::span<const double> z);
    std::vector<double> codebook_row_values(int index) const;
    core::Tensor codebook_row(int index) const;  // graph view of one code
    const std::vector<uint64_t>& code_usage() const { return usage_; }
    void reset_code_usage();

    // ‖sg[z] − e‖² + α‖z − sg[e]‖² over one latent row each.
    core::Tensor vq_loss(const core::Tensor& z_row, const core::Tensor& e_row) const;

    // --- decoder ---
    // Teacher-forced window reconstruction: predicts one action per step from
    // the prompt and the (state, reached-goal, action) history before it.
    // reached may be empty when the reached-goal switch is off.
    core::Tensor decode_window(const core::Tensor& skill_embedding, const core::Tensor& states,
                               const core::Tensor& reached_goals, const core::Tensor& actions,
                               core::Rng* dropout_rng = nullptr) const;
    // Deployment helper: next action from the raw in-window history (window
    // start at states[0]); computes reached-goals per the active variant.
    std::array<double, 2> decode_next_action(
        std::span<const double> skill_embedding,
        const std::vector<std::vector<double>>& window_states,
        const std::vector<std::array<double, 2>>& window_actions) const;

    // Reached-goal latent rows for a window, honoring the ablation switches.
    std::vector<double> reached_goal_rows(const std::vector<std::vector<double>>& window_states,
                                          const std::vector<std::array<double, 2>>& window_actions,
                                          int length) const;

    // --- training ---
    // One joint optimizer step on encoder + codebook + decoder over one
    // uniformly sampled full-window minibatch per task.  Initializes the
    // codebook from the first batch and reseeds dead codes.
    ExtractionStats extraction_step(const env::Dataset& data, core::Adam& opt, core::Rng& rng,
                                    int step_index);

    // Splits every trajectory into H-aligned segments and annotates them with
    // frozen-encoder embeddings and skill labels.
    std::vector<SkillSegment> prepare_segments(const env::Dataset& data);

    // Indices into `segments` for one enhancement minibatch: an equal number
    // of full segments from every non-empty skill class, or uniform draws
    // when resampling (or VQ) is off.
    std::vector<int> sample_enhancement_batch(const std::vector<SkillSegment>& segments,
                                              core::Rng& rng) const;

    // One decoder-only step on a sampled enhancement minibatch.  Returns the
    // reconstruction loss.
    double enhancement_step(const std::vector<SkillSegment>& segments, core::Adam& opt,
                            core::Rng& rng);

    void freeze_skill_space();  // encoder + codebook stop training
    uint64_t skill_space_checksum() const;
    uint64_t decoder_checksum() const;
    std::vector<core::Tensor> extraction_params() const;  // encoder + codebook + decoder
    std::vector<core::Tensor> decoder_params() const;

private:
    core::Tensor decoder_tokens(const core::Tensor& skill_embedding, const core::Tensor& states,
                                const core::Tensor& reached_goals, const core::Tensor& actions,
                                int length) const;

    core::ParamStore* store_;
    SkillModelConfig config_;
    core::Tensor enc_w1_, enc_b1_, enc_w2_, enc_b2_;
    core::Tensor codebook_;
    core::Tensor proj_s_w_, proj_s_b_, proj_g_w_, proj_g_b_, proj_a_w_, proj_a_b_;
    core::Tensor head_w_, head_b_;
    bool codebook_ready_ = false;
    core::Transformer backbone_;
    std::vector<uint64_t> usage_;
    std::vector<int> last_used_step_;
};

// Writes `task_id,segment_start_t,skill_index` rows for full segments.
void save_assignments(const std::vector<SkillSegment>& segments, const std::string& path);
std::vector<std::array<int, 3>> load_assignments(const std::string& path);

}  // namespace goskill::skill
