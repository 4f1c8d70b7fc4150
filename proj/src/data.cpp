#include "goskill/data.hpp"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

namespace goskill::env {

namespace {

constexpr char kDataMagic[8] = {'G', 'S', 'K', 'D', 'S', 'E', 'T', '1'};
constexpr uint32_t kDataVersion = 1;
constexpr const char* kManifestHeader = "goskill-dataset v1";

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw FormatError("truncated dataset file: " + path);
    return v;
}

}  // namespace

double Trajectory::total_return() const {
    return std::accumulate(rewards.begin(), rewards.end(), 0.0);
}

const TaskData& Dataset::task(int task_id) const {
    for (const auto& t : tasks) {
        if (t.task_id == task_id) return t;
    }
    throw ConfigError("dataset has no task " + std::to_string(task_id));
}

size_t Dataset::trajectory_count() const {
    size_t n = 0;
    for (const auto& t : tasks) n += t.trajectories.size();
    return n;
}

uint64_t Dataset::content_hash() const {
    uint64_t h = core::fnv1a64("", 0);
    auto mix_doubles = [&h](const double* p, size_t n) {
        h = core::fnv1a64(p, n * sizeof(double), h);
    };
    for (const auto& t : tasks) {
        const uint64_t id = static_cast<uint64_t>(t.task_id);
        h = core::fnv1a64(&id, sizeof(id), h);
        for (const auto& traj : t.trajectories) {
            const uint8_t q = static_cast<uint8_t>(traj.quality);
            h = core::fnv1a64(&q, sizeof(q), h);
            h = core::fnv1a64(&traj.episode_seed, sizeof(traj.episode_seed), h);
            for (const auto& s : traj.states) mix_doubles(s.data(), s.size());
            for (const auto& a : traj.actions) mix_doubles(a.data(), a.size());
            mix_doubles(traj.rewards.data(), traj.rewards.size());
        }
    }
    return h;
}

Trajectory run_scripted_episode(const TaskSpec& task, Quality quality, uint64_t episode_seed) {
    Trajectory traj;
    traj.task_id = task.task_id;
    traj.quality = quality;
    traj.episode_seed = episode_seed;

    Env env(task);
    traj.states.push_back(env.reset(episode_seed));
    ScriptedController controller(quality, episode_seed);

    while (true) {
        const auto action = controller.act(task, env.state());
        StepResult r = env.step(action);
        traj.actions.push_back(action);
        traj.rewards.push_back(r.reward);
        traj.states.push_back(r.state);
        if (r.done) break;
        if (controller.truncate_after() >= 0 && env.steps() >= controller.truncate_after()) break;
    }
    traj.success = env.success();
    return traj;
}

Dataset collect_dataset(const std::vector<int>& task_ids, QualityMix mix, int episodes_per_task,
                        uint64_t seed) {
    const double total = mix.expert + mix.medium + mix.random;
    if (std::abs(total - 1.0) > 1e-9 || mix.expert < 0 || mix.medium < 0 || mix.random < 0) {
        throw ConfigError("quality mix fractions must be non-negative and sum to 1");
    }
    if (episodes_per_task < 0) throw ConfigError("episodes_per_task must be >= 0");

    Dataset dataset;
    for (int id : task_ids) {
        const TaskSpec& task = task_by_id(id);
        TaskData data;
        data.task_id = id;
        data.mix = mix;
        data.seed = seed;

        const int n = episodes_per_task;
        const int n_random = static_cast<int>(std::lround(mix.random * n));
        const int n_medium = static_cast<int>(std::lround((mix.random + mix.medium) * n)) - n_random;
        const int n_expert = n - n_random - n_medium;

        int episode = 0;
        auto emit = [&](Quality q, int count) {
            for (int i = 0; i < count; ++i, ++episode) {
                const uint64_t ep_seed =
                    core::mix_seed(seed, static_cast<uint64_t>(id), static_cast<uint64_t>(episode));
                data.trajectories.push_back(run_scripted_episode(task, q, ep_seed));
            }
        };
        emit(Quality::kRandom, n_random);
        emit(Quality::kMedium, n_medium);
        emit(Quality::kExpert, n_expert);
        dataset.tasks.push_back(std::move(data));
    }
    return dataset;
}

Dataset sub_optimal_half(const Dataset& full) {
    Dataset out;
    for (const auto& t : full.tasks) {
        TaskData data;
        data.task_id = t.task_id;
        data.mix = t.mix;
        data.seed = t.seed;
        const size_t keep = (t.trajectories.size() + 1) / 2;
        data.trajectories.assign(t.trajectories.begin(),
                                 t.trajectories.begin() + static_cast<long>(keep));
        out.tasks.push_back(std::move(data));
    }
    return out;
}

std::vector<double> return_to_go(const Trajectory& traj) {
    if (traj.rewards.empty()) throw DataError("return_to_go on empty trajectory");
    std::vector<double> rtg(traj.rewards.size());
    double acc = 0.0;
    for (size_t i = traj.rewards.size(); i-- > 0;) {
        acc += traj.rewards[i];
        rtg[i] = acc;
    }
    return rtg;
}

void save_dataset(const Dataset& dataset, const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw IoError("cannot create dataset directory " + dir + ": " + ec.message());

    std::ofstream manifest(dir + "/manifest.txt", std::ios::trunc);
    if (!manifest) throw IoError("cannot write manifest in " + dir);
    manifest << kManifestHeader << "\n";

    for (const auto& t : dataset.tasks) {
        manifest << t.task_id << " " << t.trajectories.size() << " " << t.mix.expert << " "
                 << t.mix.medium << " " << t.mix.random << " " << t.seed << "\n";

        const std::string path = dir + "/task_" + std::to_string(t.task_id) + ".bin";
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        if (!out) throw IoError("cannot write " + path);
        out.write(kDataMagic, sizeof(kDataMagic));
        write_pod(out, kDataVersion);
        write_pod(out, static_cast<int32_t>(t.task_id));
        write_pod(out, static_cast<uint64_t>(t.trajectories.size()));
        write_pod(out, static_cast<int32_t>(kStateDim));
        write_pod(out, static_cast<int32_t>(kActionDim));
        for (const auto& traj : t.trajectories) {
            write_pod(out, static_cast<uint32_t>(traj.length()));
            write_pod(out, static_cast<uint8_t>(traj.quality));
            write_pod(out, static_cast<uint8_t>(traj.success ? 1 : 0));
            write_pod(out, traj.episode_seed);
            for (const auto& s : traj.states) {
                out.write(reinterpret_cast<const char*>(s.data()),
                          static_cast<long>(s.size() * sizeof(double)));
            }
            for (const auto& a : traj.actions) {
                out.write(reinterpret_cast<const char*>(a.data()),
                          static_cast<long>(a.size() * sizeof(double)));
            }
            out.write(reinterpret_cast<const char*>(traj.rewards.data()),
                      static_cast<long>(traj.rewards.size() * sizeof(double)));
        }
        if (!out) throw IoError("short write on " + path);
    }
    if (!manifest) throw IoError("short write on manifest in " + dir);
}

Dataset load_dataset(const std::string& dir) {
    std::ifstream manifest(dir + "/manifest.txt");
    if (!manifest) throw IoError("cannot read manifest in " + dir);
    std::string header;
    std::getline(manifest, header);
    if (header != kManifestHeader) {
        throw FormatError("unsupported dataset manifest in " + dir + ": '" + header + "'");
    }

    Dataset dataset;
    std::string line;
    while (std::getline(manifest, line)) {
        if (line.empty()) continue;
        std::istringstream fields(line);
        TaskData t;
        size_t declared = 0;
        if (!(fields >> t.task_id >> declared >> t.mix.expert >> t.mix.medium >> t.mix.random >>
              t.seed)) {
            throw FormatError("malformed manifest line: '" + line + "'");
        }

        const std::string path = dir + "/task_" + std::to_string(t.task_id) + ".bin";
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot read " + path);
        char magic[8];
        in.read(magic, sizeof(magic));
        if (!in || std::memcmp(magic, kDataMagic, sizeof(kDataMagic)) != 0) {
            throw FormatError("not a dataset file: " + path);
        }
        const auto version = read_pod<uint32_t>(in, path);
        if (version != kDataVersion) {
            throw FormatError("unsupported dataset version " + std::to_string(version) + ": " +
                              path);
        }
        const auto file_task = read_pod<int32_t>(in, path);
        if (file_task != t.task_id) throw FormatError("task id mismatch in " + path);
        const auto count = read_pod<uint64_t>(in, path);
        if (count != declared) {
            throw DataError("manifest declares " + std::to_string(declared) + " records, file " +
                            path + " has " + std::to_string(count));
        }
        const auto sdim = read_pod<int32_t>(in, path);
        const auto adim = read_pod<int32_t>(in, path);
        if (sdim != kStateDim || adim != kActionDim) {
            throw FormatError("dimension mismatch in " + path);
        }

        for (uint64_t i = 0; i < count; ++i) {
            Trajectory traj;
            traj.task_id = t.task_id;
            const auto len = read_pod<uint32_t>(in, path);
            traj.quality = static_cast<Quality>(read_pod<uint8_t>(in, path));
            traj.success = read_pod<uint8_t>(in, path) != 0;
            traj.episode_seed = read_pod<uint64_t>(in, path);
            traj.states.assign(len + 1, std::vector<double>(kStateDim));
            for (auto& s : traj.states) {
                in.read(reinterpret_cast<char*>(s.data()),
                        static_cast<long>(s.size() * sizeof(double)));
            }
            traj.actions.assign(len, {});
            for (auto& a : traj.actions) {
                in.read(reinterpret_cast<char*>(a.data()),
                        static_cast<long>(a.size() * sizeof(double)));
            }
            traj.rewards.assign(len, 0.0);
            in.read(reinterpret_cast<char*>(traj.rewards.data()),
                    static_cast<long>(traj.rewards.size() * sizeof(double)));
            if (!in) throw FormatError("truncated dataset file: " + path);
            t.trajectories.push_back(std::move(traj));
        }
        dataset.tasks.push_back(std::move(t));
    }
    return dataset;
}

double max_replay_error(const Dataset& dataset) {
    double worst = 0.0;
    for (const auto& t : dataset.tasks) {
        const TaskSpec& task = task_by_id(t.task_id);
        for (const auto& traj : t.trajectories) {
            std::vector<double> state = traj.states.at(0);
            for (int i = 0; i < traj.length(); ++i) {
                StepResult r = env_step(task, state, traj.actions[static_cast<size_t>(i)]);
                state = std::move(r.state);
                const auto& stored = traj.states[static_cast<size_t>(i) + 1];
                for (int j = 0; j < kStateDim; ++j) {
                    worst = std::max(worst,
                                     std::abs(state[static_cast<size_t>(j)] -
                                              stored[static_cast<size_t>(j)]));
                }
            }
        }
    }
    return worst;
}

}  // namespace goskill::env
