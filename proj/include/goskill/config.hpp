#pragma once

// Run configuration: every hyperparameter of the pipeline in one struct, with
// a diff-friendly key=value text format.  A run directory always carries the
// exact config that produced it.

#include <cstdint>
#include <string>
#include <vector>

#include "goskill/flat_policy.hpp"
#include "goskill/runtime.hpp"
#include "goskill/skill_model.hpp"
#include "goskill/skill_policy.hpp"

namespace goskill::run {

struct RunConfig {
    // --- dataset ---
    std::vector<int> tasks = env::training_task_ids();
    int episodes_per_task = 24;
    std::string preset = "near-optimal";  // near-optimal | sub-optimal
    uint64_t data_seed = 1;

    // --- shared transformer shape (paper scale: 6 layers, 8 heads, 256) ---
    int model_dim = 128;
    int n_heads = 4;
    int n_layers = 4;
    std::string nonlinearity = "relu";  // fixed; recorded for completeness
    double dropout = 0.1;
    int context_points = 20;  // K
    int prompt_points = 10;   // K*
    int batch_per_task = 8;
    double lr = 3e-4;
    double grad_clip = 1.0;

    // --- skill space ---
    int horizon = 10;        // H
    int codebook_size = 16;  // M
    int latent_dim = 64;     // |Z|
    int encoder_hidden = 128;
    double alpha = 0.25;
    double gamma = 2.0;
    int batch_per_class = 2;
    int dead_code_steps = 500;
    double rtg_scale = 0.01;

    // --- iteration budget (paper scale: 30000 / 70000 / 70000) ---
    int iterations_extraction = 1800;
    int iterations_enhancement = 4200;
    int iterations_policy = 4200;
    bool parallel_phases = false;  // enhancement and policy on separate threads

    // --- ablation switches ---
    bool use_reached_goal = true;
    bool use_vq = true;
    bool action_encoded = false;
    bool use_focal = true;
    bool use_resample = true;

    // --- seeds and evaluation ---
    uint64_t seed = 0;
    int eval_episodes = 20;
    int eval_seeds = 3;
    uint64_t eval_base_seed = 7000;
    int max_steps = env::kHorizon;

    // Derived module configs, all consistent with one another.
    skill::SkillModelConfig skill_model_config() const;
    skill::SkillPolicyConfig skill_policy_config() const;
    FlatPolicyConfig flat_policy_config() const;
    EvalConfig eval_config() const;

    void validate() const;  // throws ConfigError on out-of-range fields
};

// Named ablation presets: "none", "no-rg", "no-vq", "ae", "no-focal",
// "no-resample".  Unknown names are a ConfigError.
void apply_ablation(RunConfig& config, const std::string& name);
std::vector<std::string> ablation_names();  // the five switchable variants

// One `key=value` per line; '#' starts a comment.  Serialization emits every
// field; parsing starts from defaults, applies the file, and validates.
// Unknown keys are a ConfigError (they are silent typos otherwise).
std::string serialize_config(const RunConfig& config);
RunConfig parse_config_text(const std::string& text);
void save_config(const RunConfig& config, const std::string& path);
RunConfig load_config(const std::string& path);

// Applies one `key=value` override string to an existing config.
void apply_override(RunConfig& config, const std::string& assignment);

}  // namespace goskill::run
