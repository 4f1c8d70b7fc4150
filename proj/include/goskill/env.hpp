#pragma once

// Deterministic 2D point-mass task suite.  Every task is an ordered list of
// waypoint primitives over a shared 9-dimensional state:
//   [px, py, vx, vy, progress, ox, oy, gx, gy]
// where (ox, oy) is the object, (gx, gy) the goal, and `progress` packs the
// completed-waypoint count plus the in-progress press charge.  Keeping all
// episode bookkeeping inside the state makes the transition a pure function
// of (task, state, action), which is what lets stored trajectories replay
// bit-exactly.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "goskill/errors.hpp"
#include "goskill/rng.hpp"

namespace goskill::env {

inline constexpr int kStateDim = 9;
inline constexpr int kActionDim = 2;
inline constexpr int kHorizon = 100;
inline constexpr double kDt = 0.1;
inline constexpr double kDamping = 0.9;
inline constexpr double kReachRadius = 0.2;
inline constexpr double kPressRadius = 0.3;
inline constexpr double kPressChargePerStep = 0.25;

enum class Waypoint : uint8_t {
    kReachObject,  // move to the object position
    kReachGoal,    // move to the goal position
    kPress,        // hold position at the object until the press charges
    kHome,         // return to the origin
};

struct TaskSpec {
    int task_id = -1;
    std::string name;
    std::vector<Waypoint> waypoints;
};

// Ten tasks built from the four primitives: ids 0..7 train, 8..9 are held out
// for fine-tuning.  Every primitive appears in several tasks so skills are
// structurally shared.
const std::vector<TaskSpec>& task_suite();
const TaskSpec& task_by_id(int task_id);  // unknown id → ConfigError
std::vector<int> training_task_ids();
std::vector<int> holdout_task_ids();

struct StepResult {
    std::vector<double> state;
    double reward = 0.0;
    bool done = false;  // final waypoint completed
};

// Deterministic initial state: agent at rest at the origin; object and goal
// positions sampled from the episode seed.
std::vector<double> env_reset(const TaskSpec& task, uint64_t episode_seed);

// Pure transition.  Actions are clipped to [-1, 1]; non-finite actions are a
// NumericError.  `done` fires only on completing the final waypoint — the
// horizon is the episode owner's business (see Env).
StepResult env_step(const TaskSpec& task, std::span<const double> state,
                    std::span<const double> action);

// Completed-waypoint count currently encoded in a state.
int waypoints_done(std::span<const double> state);

// Target position of the active waypoint, or the last waypoint's target if
// the task is complete.
std::array<double, 2> waypoint_target(const TaskSpec& task, std::span<const double> state);

// Stateful episode wrapper: counts steps and reports done on success or when
// the horizon runs out.
class Env {
public:
    explicit Env(const TaskSpec& task) : task_(&task) {}

    std::vector<double> reset(uint64_t episode_seed);
    StepResult step(std::span<const double> action);

    const std::vector<double>& state() const { return state_; }
    int steps() const { return steps_; }
    bool success() const { return success_; }

private:
    const TaskSpec* task_;
    std::vector<double> state_;
    int steps_ = 0;
    bool success_ = false;
};

enum class Quality : uint8_t { kRandom = 0, kMedium = 1, kExpert = 2 };

const char* quality_name(Quality q);

// Scripted behavior policies used only for dataset generation: a waypoint
// P-controller (expert), the same controller with action noise and a chance
// of stopping early (medium), and uniform noise (random).
class ScriptedController {
public:
    ScriptedController(Quality quality, uint64_t seed);

    std::array<double, 2> act(const TaskSpec& task, std::span<const double> state);

    // Medium episodes sometimes stop before the horizon; -1 means never.
    int truncate_after() const { return truncate_after_; }

private:
    Quality quality_;
    core::Rng rng_;
    int truncate_after_ = -1;
};

}  // namespace goskill::env
