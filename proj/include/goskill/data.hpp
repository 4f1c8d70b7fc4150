#pragma once

// Offline trajectory datasets: scripted collection with a quality mix,
// self-describing binary serialization, and replay validation.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "goskill/env.hpp"

namespace goskill::env {

struct Trajectory {
    int task_id = -1;
    Quality quality = Quality::kRandom;
    uint64_t episode_seed = 0;
    bool success = false;
    std::vector<std::vector<double>> states;          // length + 1 entries
    std::vector<std::array<double, 2>> actions;       // length entries
    std::vector<double> rewards;                      // length entries

    int length() const { return static_cast<int>(actions.size()); }
    double total_return() const;
};

struct QualityMix {
    double expert = 0.0;
    double medium = 0.0;
    double random = 0.0;
};

struct TaskData {
    int task_id = -1;
    QualityMix mix;
    uint64_t seed = 0;
    std::vector<Trajectory> trajectories;  // generation order: random, medium, expert
};

struct Dataset {
    std::vector<TaskData> tasks;

    const TaskData& task(int task_id) const;  // unknown → ConfigError
    size_t trajectory_count() const;
    uint64_t content_hash() const;  // over all payloads; cache/manifest key
};

// Runs one scripted episode to completion (or controller truncation).
Trajectory run_scripted_episode(const TaskSpec& task, Quality quality, uint64_t episode_seed);

// Generates episodes_per_task trajectories per task in replay-buffer order:
// the random block first, then medium, then expert, with counts from the mix
// (fractions must sum to 1).  Mirrors how quality grows over a live agent's
// replay, which is what makes the first-half subset genuinely sub-optimal.
Dataset collect_dataset(const std::vector<int>& task_ids, QualityMix mix, int episodes_per_task,
                        uint64_t seed);

// First ⌈N/2⌉ trajectories of each task, in generation order.
Dataset sub_optimal_half(const Dataset& full);

// Suffix sums of rewards: r̂_t = Σ_{u ≥ t} reward_u.
std::vector<double> return_to_go(const Trajectory& traj);

// Directory layout: manifest.txt plus one task_<id>.bin per task.
void save_dataset(const Dataset& dataset, const std::string& dir);
Dataset load_dataset(const std::string& dir);

// Max |replayed − stored| over every state entry of every trajectory.
double max_replay_error(const Dataset& dataset);

}  // namespace goskill::env
