#include "goskill/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

namespace goskill::run {

namespace {

std::string format_value(int v) { return std::to_string(v); }
std::string format_value(uint64_t v) { return std::to_string(v); }
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(const std::string& v) { return v; }

std::string format_value(double v) {
    // Shortest representation that parses back to the same double.
    char buf[32];
    const auto res = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, res.ptr);
}

std::string format_value(const std::vector<int>& v) {
    std::string out;
    for (size_t i = 0; i < v.size(); ++i) {
        if (i > 0) out += ',';
        out += std::to_string(v[i]);
    }
    return out;
}

void parse_value(const std::string& s, int& out, const std::string& key) {
    const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw ConfigError("bad integer for " + key + ": '" + s + "'");
    }
}

void parse_value(const std::string& s, uint64_t& out, const std::string& key) {
    const auto res = std::from_chars(s.data(), s.data() + s.size(), out);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw ConfigError("bad unsigned integer for " + key + ": '" + s + "'");
    }
}

void parse_value(const std::string& s, double& out, const std::string& key) {
    try {
        size_t used = 0;
        out = std::stod(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
    } catch (const std::exception&) {
        throw ConfigError("bad number for " + key + ": '" + s + "'");
    }
}

void parse_value(const std::string& s, bool& out, const std::string& key) {
    if (s == "true" || s == "1") {
        out = true;
    } else if (s == "false" || s == "0") {
        out = false;
    } else {
        throw ConfigError("bad boolean for " + key + ": '" + s + "'");
    }
}

void parse_value(const std::string& s, std::string& out, const std::string&) { out = s; }

void parse_value(const std::string& s, std::vector<int>& out, const std::string& key) {
    out.clear();
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        int v = 0;
        parse_value(item, v, key);
        out.push_back(v);
    }
    if (out.empty()) throw ConfigError("empty list for " + key);
}

// Single source of truth for the field set: serialization, parsing, and
// overrides all walk this list.
template <typename F>
void visit_fields(RunConfig& c, F&& f) {
    f("tasks", c.tasks);
    f("episodes_per_task", c.episodes_per_task);
    f("preset", c.preset);
    f("data_seed", c.data_seed);
    f("model_dim", c.model_dim);
    f("n_heads", c.n_heads);
    f("n_layers", c.n_layers);
    f("nonlinearity", c.nonlinearity);
    f("dropout", c.dropout);
    f("context_points", c.context_points);
    f("prompt_points", c.prompt_points);
    f("batch_per_task", c.batch_per_task);
    f("lr", c.lr);
    f("grad_clip", c.grad_clip);
    f("horizon", c.horizon);
    f("codebook_size", c.codebook_size);
    f("latent_dim", c.latent_dim);
    f("encoder_hidden", c.encoder_hidden);
    f("alpha", c.alpha);
    f("gamma", c.gamma);
    f("batch_per_class", c.batch_per_class);
    f("dead_code_steps", c.dead_code_steps);
    f("rtg_scale", c.rtg_scale);
    f("iterations_extraction", c.iterations_extraction);
    f("iterations_enhancement", c.iterations_enhancement);
    f("iterations_policy", c.iterations_policy);
    f("parallel_phases", c.parallel_phases);
    f("use_reached_goal", c.use_reached_goal);
    f("use_vq", c.use_vq);
    f("action_encoded", c.action_encoded);
    f("use_focal", c.use_focal);
    f("use_resample", c.use_resample);
    f("seed", c.seed);
    f("eval_episodes", c.eval_episodes);
    f("eval_seeds", c.eval_seeds);
    f("eval_base_seed", c.eval_base_seed);
    f("max_steps", c.max_steps);
}

}  // namespace

skill::SkillModelConfig RunConfig::skill_model_config() const {
    skill::SkillModelConfig m;
    m.horizon = horizon;
    m.codebook_size = codebook_size;
    m.latent_dim = latent_dim;
    m.alpha = alpha;
    m.encoder_hidden = encoder_hidden;
    m.decoder = {.dim = model_dim, .heads = n_heads, .layers = n_layers, .max_tokens = 0,
                 .dropout = dropout};
    m.batch_per_task = batch_per_task;
    m.batch_per_class = batch_per_class;
    m.dead_code_steps = dead_code_steps;
    m.use_reached_goal = use_reached_goal;
    m.use_vq = use_vq;
    m.action_encoded = action_encoded;
    m.resample = use_resample;
    return m;
}

skill::SkillPolicyConfig RunConfig::skill_policy_config() const {
    skill::SkillPolicyConfig p;
    p.latent_dim = latent_dim;
    p.codebook_size = codebook_size;
    p.context_points = context_points;
    p.prompt_points = prompt_points;
    p.rtg_scale = rtg_scale;
    p.gamma = use_focal ? gamma : 0.0;  // focal off = plain cross-entropy
    p.batch_per_task = batch_per_task;
    p.backbone = {.dim = model_dim, .heads = n_heads, .layers = n_layers, .max_tokens = 0,
                  .dropout = dropout};
    p.use_vq = use_vq;
    return p;
}

FlatPolicyConfig RunConfig::flat_policy_config() const {
    FlatPolicyConfig f;
    f.context_steps = context_points;
    f.prompt_steps = prompt_points;
    f.rtg_scale = rtg_scale;
    f.batch_per_task = batch_per_task;
    f.backbone = {.dim = model_dim, .heads = n_heads, .layers = n_layers, .max_tokens = 0,
                  .dropout = dropout};
    return f;
}

EvalConfig RunConfig::eval_config() const {
    EvalConfig e;
    e.n_episodes = eval_episodes;
    e.n_seeds = eval_seeds;
    e.base_seed = eval_base_seed;
    e.max_steps = max_steps;
    e.codebook_size = use_vq ? codebook_size : 0;
    return e;
}

void RunConfig::validate() const {
    if (tasks.empty()) throw ConfigError("tasks must not be empty");
    for (int t : tasks) env::task_by_id(t);  // throws on unknown ids
    if (episodes_per_task < 1) throw ConfigError("episodes_per_task must be >= 1");
    if (preset != "near-optimal" && preset != "sub-optimal") {
        throw ConfigError("unknown dataset preset '" + preset +
                          "' (expected near-optimal or sub-optimal)");
    }
    if (model_dim < 1 || n_heads < 1 || n_layers < 1) {
        throw ConfigError("transformer dimensions must be positive");
    }
    if (model_dim % n_heads != 0) throw ConfigError("model_dim must be divisible by n_heads");
    if (nonlinearity != "relu") {
        throw ConfigError("only the relu nonlinearity is implemented");
    }
    if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
    if (context_points < 1 || prompt_points < 1) {
        throw ConfigError("context and prompt lengths must be >= 1");
    }
    if (batch_per_task < 1 || batch_per_class < 1) throw ConfigError("batch sizes must be >= 1");
    if (lr <= 0.0) throw ConfigError("lr must be positive");
    if (grad_clip <= 0.0) throw ConfigError("grad_clip must be positive");
    if (horizon < 1) throw ConfigError("horizon must be >= 1");
    if (codebook_size < 1) throw ConfigError("codebook_size must be >= 1");
    if (latent_dim < 1 || encoder_hidden < 1) throw ConfigError("latent dims must be >= 1");
    if (alpha < 0.0) throw ConfigError("alpha must be >= 0");
    if (gamma < 0.0) throw ConfigError("gamma must be >= 0");
    if (dead_code_steps < 1) throw ConfigError("dead_code_steps must be >= 1");
    if (rtg_scale <= 0.0) throw ConfigError("rtg_scale must be positive");
    if (iterations_extraction < 0 || iterations_enhancement < 0 || iterations_policy < 0) {
        throw ConfigError("iteration counts must be >= 0");
    }
    if (eval_episodes < 1 || eval_seeds < 1) throw ConfigError("evaluation needs >= 1 episode/seed");
    if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
}

void apply_ablation(RunConfig& config, const std::string& name) {
    if (name == "none") return;
    if (name == "no-rg") {
        config.use_reached_goal = false;
    } else if (name == "no-vq") {
        config.use_vq = false;
    } else if (name == "ae") {
        config.action_encoded = true;
    } else if (name == "no-focal") {
        config.use_focal = false;
    } else if (name == "no-resample") {
        config.use_resample = false;
    } else {
        throw ConfigError("unknown ablation '" + name +
                          "' (expected none, no-rg, no-vq, ae, no-focal, no-resample)");
    }
}

std::vector<std::string> ablation_names() {
    return {"no-rg", "no-vq", "ae", "no-focal", "no-resample"};
}

std::string serialize_config(const RunConfig& config) {
    std::string out;
    visit_fields(const_cast<RunConfig&>(config), [&](const char* key, const auto& value) {
        out += key;
        out += '=';
        out += format_value(value);
        out += '\n';
    });
    return out;
}

RunConfig parse_config_text(const std::string& text) {
    RunConfig config;
    std::stringstream ss(text);
    std::string line;
    int line_no = 0;
    while (std::getline(ss, line)) {
        ++line_no;
        const size_t hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        // Trim surrounding whitespace.
        const auto begin = line.find_first_not_of(" \t\r");
        if (begin == std::string::npos) continue;
        const auto end = line.find_last_not_of(" \t\r");
        line = line.substr(begin, end - begin + 1);

        apply_override(config, line);
    }
    config.validate();
    return config;
}

void apply_override(RunConfig& config, const std::string& assignment) {
    const size_t eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw ConfigError("expected key=value, got '" + assignment + "'");
    }
    const std::string key = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);
    bool matched = false;
    visit_fields(config, [&](const char* name, auto& field) {
        if (key == name) {
            parse_value(value, field, key);
            matched = true;
        }
    });
    if (!matched) throw ConfigError("unknown config key '" + key + "'");
}

void save_config(const RunConfig& config, const std::string& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << serialize_config(config);
    if (!out) throw IoError("failed writing " + path);
}

RunConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    std::stringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

}  // namespace goskill::run
