#include "goskill/env.hpp"

#include <algorithm>
#include <cmath>

namespace goskill::env {

namespace {

// Reward shape: distance shaping dominates, waypoint/final bonuses mark
// structure, and a small time penalty breaks ties toward short episodes.
// Scaled so scripted-expert returns land roughly in [50, 150].
constexpr double kShapingGain = 12.0;
constexpr double kWaypointBonus = 12.0;
constexpr double kFinalBonus = 25.0;
constexpr double kTimePenalty = 0.05;
constexpr double kPressReward = 1.0;

// Arena for object/goal sampling.
constexpr double kArena = 0.9;
constexpr double kMinFromOrigin = 0.35;
constexpr double kMinSeparation = 0.5;

constexpr int kPx = 0, kPy = 1, kVx = 2, kVy = 3, kProgress = 4, kOx = 5, kOy = 6, kGx = 7,
              kGy = 8;

double dist(double ax, double ay, double bx, double by) {
    return std::hypot(ax - bx, ay - by);
}

std::array<double, 2> target_of(const TaskSpec& task, Waypoint w,
                                std::span<const double> state) {
    switch (w) {
        case Waypoint::kReachObject:
        case Waypoint::kPress:
            return {state[kOx], state[kOy]};
        case Waypoint::kReachGoal:
            return {state[kGx], state[kGy]};
        case Waypoint::kHome:
            return {0.0, 0.0};
    }
    throw ContractError("task " + std::to_string(task.task_id) + ": bad waypoint");
}

void check_state(std::span<const double> state) {
    if (state.size() != kStateDim) {
        throw ShapeError("state must have " + std::to_string(kStateDim) + " entries, got " +
                         std::to_string(state.size()));
    }
}

}  // namespace

const std::vector<TaskSpec>& task_suite() {
    using W = Waypoint;
    static const std::vector<TaskSpec> suite = {
        {0, "fetch", {W::kReachObject, W::kReachGoal}},
        {1, "press-go", {W::kPress, W::kReachGoal}},
        {2, "goal-fetch", {W::kReachGoal, W::kReachObject}},
        {3, "fetch-return", {W::kReachObject, W::kReachGoal, W::kHome}},
        {4, "press-home", {W::kPress, W::kHome}},
        {5, "goal-press", {W::kReachGoal, W::kPress}},
        {6, "goal-home", {W::kReachGoal, W::kHome}},
        {7, "fetch-via-home", {W::kReachObject, W::kHome, W::kReachGoal}},
        {8, "press-go-home", {W::kPress, W::kReachGoal, W::kHome}},
        {9, "goal-home-press", {W::kReachGoal, W::kHome, W::kPress}},
    };
    return suite;
}

const TaskSpec& task_by_id(int task_id) {
    const auto& suite = task_suite();
    if (task_id < 0 || static_cast<size_t>(task_id) >= suite.size()) {
        throw ConfigError("unknown task id " + std::to_string(task_id));
    }
    return suite[static_cast<size_t>(task_id)];
}

std::vector<int> training_task_ids() {
    return {0, 1, 2, 3, 4, 5, 6, 7};
}

std::vector<int> holdout_task_ids() {
    return {8, 9};
}

std::vector<double> env_reset(const TaskSpec& task, uint64_t episode_seed) {
    (void)task_by_id(task.task_id);  // validates the id
    core::Rng rng(core::mix_seed(episode_seed, static_cast<uint64_t>(task.task_id),
                                 core::fnv1a64("env-reset")));
    auto sample_point = [&rng] {
        while (true) {
            const double x = rng.uniform(-kArena, kArena);
            const double y = rng.uniform(-kArena, kArena);
            if (std::hypot(x, y) >= kMinFromOrigin) return std::array<double, 2>{x, y};
        }
    };
    std::array<double, 2> object = sample_point();
    std::array<double, 2> goal = sample_point();
    while (dist(object[0], object[1], goal[0], goal[1]) < kMinSeparation) goal = sample_point();

    std::vector<double> state(kStateDim, 0.0);
    state[kOx] = object[0];
    state[kOy] = object[1];
    state[kGx] = goal[0];
    state[kGy] = goal[1];
    return state;
}

int waypoints_done(std::span<const double> state) {
    check_state(state);
    return static_cast<int>(std::floor(state[kProgress] + 1e-9));
}

std::array<double, 2> waypoint_target(const TaskSpec& task, std::span<const double> state) {
    const int k = waypoints_done(state);
    const int n = static_cast<int>(task.waypoints.size());
    const int idx = std::min(k, n - 1);
    return target_of(task, task.waypoints[static_cast<size_t>(idx)], state);
}

StepResult env_step(const TaskSpec& task, std::span<const double> state,
                    std::span<const double> action) {
    check_state(state);
    if (action.size() != kActionDim) {
        throw ShapeError("action must have " + std::to_string(kActionDim) + " entries");
    }
    for (double a : action) {
        if (!std::isfinite(a)) throw NumericError("non-finite action");
    }
    const int n = static_cast<int>(task.waypoints.size());
    int k = waypoints_done(state);

    StepResult result;
    result.state.assign(state.begin(), state.end());
    if (k >= n) {  // already terminal; defensive no-op
        result.done = true;
        return result;
    }

    const double ax = std::clamp(action[0], -1.0, 1.0);
    const double ay = std::clamp(action[1], -1.0, 1.0);
    auto& s = result.state;

    const Waypoint active = task.waypoints[static_cast<size_t>(k)];
    const auto [tx, ty] = target_of(task, active, state);
    const double d_before = dist(s[kPx], s[kPy], tx, ty);

    // Semi-implicit Euler: the action influences position within the same
    // step, so reward shaping responds to the current action.
    s[kVx] = kDamping * s[kVx] + ax * kDt;
    s[kVy] = kDamping * s[kVy] + ay * kDt;
    s[kPx] += s[kVx] * kDt;
    s[kPy] += s[kVy] * kDt;

    const double d_after = dist(s[kPx], s[kPy], tx, ty);
    double reward = kShapingGain * (d_before - d_after) - kTimePenalty;

    double charge = s[kProgress] - static_cast<double>(k);
    bool completed = false;
    if (active == Waypoint::kPress) {
        if (d_after <= kPressRadius) {
            charge += kPressChargePerStep;
            reward += kPressReward;
            if (charge >= 1.0) completed = true;
        } else {
            charge = 0.0;  // drifting off the button drops the charge
        }
    } else if (d_after <= kReachRadius) {
        completed = true;
    }

    if (completed) {
        ++k;
        charge = 0.0;
        reward += kWaypointBonus;
        if (k == n) {
            reward += kFinalBonus;
            result.done = true;
        }
    }
    s[kProgress] = static_cast<double>(k) + charge;
    result.reward = reward;
    return result;
}

std::vector<double> Env::reset(uint64_t episode_seed) {
    state_ = env_reset(*task_, episode_seed);
    steps_ = 0;
    success_ = false;
    return state_;
}

StepResult Env::step(std::span<const double> action) {
    if (state_.empty()) throw ContractError("step before reset");
    StepResult r = env_step(*task_, state_, action);
    state_ = r.state;
    ++steps_;
    success_ = success_ || r.done;
    r.done = r.done || steps_ >= kHorizon;
    return r;
}

const char* quality_name(Quality q) {
    switch (q) {
        case Quality::kRandom:
            return "random";
        case Quality::kMedium:
            return "medium";
        case Quality::kExpert:
            return "expert";
    }
    return "?";
}

ScriptedController::ScriptedController(Quality quality, uint64_t seed)
    : quality_(quality), rng_(core::mix_seed(seed, core::fnv1a64("controller"))) {
    if (quality_ == Quality::kMedium && rng_.uniform(0.0, 1.0) < 0.3) {
        truncate_after_ = static_cast<int>(rng_.uniform(0.1 * kHorizon, 0.5 * kHorizon));
    }
}

std::array<double, 2> ScriptedController::act(const TaskSpec& task,
                                              std::span<const double> state) {
    if (quality_ == Quality::kRandom) {
        return {rng_.uniform(-1.0, 1.0), rng_.uniform(-1.0, 1.0)};
    }

    const auto [tx, ty] = waypoint_target(task, state);
    const int k = waypoints_done(state);
    const int n = static_cast<int>(task.waypoints.size());
    const bool pressing =
        k < n && task.waypoints[static_cast<size_t>(k)] == Waypoint::kPress;

    // P-controller on position with velocity damping; pressing needs a soft
    // landing, so it uses a gentler pull and stronger braking.
    const double kp = pressing ? 3.0 : 6.0;
    const double kd = pressing ? 4.0 : 3.0;
    double ax = kp * (tx - state[0]) - kd * state[2];
    double ay = kp * (ty - state[1]) - kd * state[3];

    if (quality_ == Quality::kMedium) {
        ax += rng_.normal(0.0, 0.6);
        ay += rng_.normal(0.0, 0.6);
    }
    return {std::clamp(ax, -1.0, 1.0), std::clamp(ay, -1.0, 1.0)};
}

}  // namespace goskill::env
