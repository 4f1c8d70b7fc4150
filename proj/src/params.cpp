#include "goskill/params.hpp"

#include <algorithm>
#include <cstring>
#include <fstream>

#include "goskill/rng.hpp"

namespace goskill::core {

namespace {

constexpr char kMagic[8] = {'G', 'S', 'K', 'C', 'K', 'P', 'T', '\0'};
constexpr uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
    out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_pod(std::ifstream& in, const std::string& path) {
    T v{};
    in.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!in) throw FormatError("truncated checkpoint: " + path);
    return v;
}

void fill(Tensor& t, Init init, uint64_t seed) {
    auto v = t.values();
    switch (init) {
        case Init::kZeros:
            std::fill(v.begin(), v.end(), 0.0);
            break;
        case Init::kOnes:
            std::fill(v.begin(), v.end(), 1.0);
            break;
        case Init::kTruncNormal002: {
            Rng rng(seed);
            for (double& x : v) x = rng.truncated_normal(0.02);
            break;
        }
    }
}

}  // namespace

Tensor ParamStore::create(const std::string& name, Shape shape, Init init, uint64_t seed) {
    for (size_t i = 0; i < order_.size(); ++i) {
        if (order_[i] == name) {
            if (tensors_[i].shape() != shape) {
                throw ConfigError("parameter '" + name + "' re-registered with shape " +
                                  shape_str(shape) + ", previously " +
                                  shape_str(tensors_[i].shape()));
            }
            return tensors_[i];
        }
    }
    Tensor t = Tensor::zeros(std::move(shape), true);
    fill(t, init, mix_seed(seed, fnv1a64(name)));
    t.set_name(name);
    order_.push_back(name);
    tensors_.push_back(t);
    return t;
}

Tensor ParamStore::get(const std::string& name) const {
    for (size_t i = 0; i < order_.size(); ++i) {
        if (order_[i] == name) return tensors_[i];
    }
    throw ConfigError("unknown parameter '" + name + "'");
}

bool ParamStore::contains(const std::string& name) const {
    return std::find(order_.begin(), order_.end(), name) != order_.end();
}

size_t ParamStore::value_count() const {
    size_t n = 0;
    for (const auto& t : tensors_) n += t.size();
    return n;
}

std::vector<Tensor> ParamStore::match(const std::string& prefix) const {
    std::vector<Tensor> out;
    for (size_t i = 0; i < order_.size(); ++i) {
        if (order_[i].starts_with(prefix)) out.push_back(tensors_[i]);
    }
    return out;
}

void ParamStore::zero_grads() {
    for (auto& t : tensors_) t.zero_grad();
}

void ParamStore::set_trainable(const std::string& prefix, bool trainable) {
    for (size_t i = 0; i < order_.size(); ++i) {
        if (order_[i].starts_with(prefix)) tensors_[i].set_requires_grad(trainable);
    }
}

uint64_t ParamStore::checksum(const std::string& prefix) const {
    uint64_t h = fnv1a64("", 0);
    for (size_t i = 0; i < order_.size(); ++i) {
        if (!order_[i].starts_with(prefix)) continue;
        h = fnv1a64(order_[i].data(), order_[i].size(), h);
        auto v = tensors_[i].values();
        h = fnv1a64(v.data(), v.size() * sizeof(double), h);
    }
    return h;
}

void ParamStore::save(const std::string& path) const {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint: " + path);
    out.write(kMagic, sizeof(kMagic));
    write_pod(out, kVersion);
    write_pod(out, static_cast<uint64_t>(order_.size()));
    for (size_t i = 0; i < order_.size(); ++i) {
        write_pod(out, static_cast<uint32_t>(order_[i].size()));
        out.write(order_[i].data(), static_cast<long>(order_[i].size()));
        const Shape& s = tensors_[i].shape();
        write_pod(out, static_cast<uint32_t>(s.size()));
        for (int d : s) write_pod(out, static_cast<int32_t>(d));
        auto v = tensors_[i].values();
        out.write(reinterpret_cast<const char*>(v.data()),
                  static_cast<long>(v.size() * sizeof(double)));
    }
    if (!out) throw IoError("short write on checkpoint: " + path);
}

namespace {

struct Entry {
    std::string name;
    Shape shape;
    std::vector<double> data;
};

std::vector<Entry> read_entries(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read checkpoint: " + path);
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
        throw FormatError("not a checkpoint file: " + path);
    }
    const auto version = read_pod<uint32_t>(in, path);
    if (version != kVersion) {
        throw FormatError("unsupported checkpoint version " + std::to_string(version) + ": " + path);
    }
    const auto count = read_pod<uint64_t>(in, path);
    std::vector<Entry> entries;
    entries.reserve(count);
    for (uint64_t e = 0; e < count; ++e) {
        Entry entry;
        const auto name_len = read_pod<uint32_t>(in, path);
        entry.name.resize(name_len);
        in.read(entry.name.data(), name_len);
        const auto ndim = read_pod<uint32_t>(in, path);
        for (uint32_t d = 0; d < ndim; ++d) {
            entry.shape.push_back(read_pod<int32_t>(in, path));
        }
        entry.data.resize(shape_numel(entry.shape));
        in.read(reinterpret_cast<char*>(entry.data.data()),
                static_cast<long>(entry.data.size() * sizeof(double)));
        if (!in) throw FormatError("truncated checkpoint: " + path);
        entries.push_back(std::move(entry));
    }
    return entries;
}

}  // namespace

void ParamStore::load(const std::string& path) {
    for (auto& entry : read_entries(path)) {
        if (!contains(entry.name)) {
            throw DataError("checkpoint entry '" + entry.name + "' has no matching parameter");
        }
        Tensor t = get(entry.name);
        if (t.shape() != entry.shape) {
            throw DataError("checkpoint entry '" + entry.name + "' has shape " +
                            shape_str(entry.shape) + ", expected " + shape_str(t.shape()));
        }
        auto v = t.values();
        std::copy(entry.data.begin(), entry.data.end(), v.begin());
    }
}

ParamStore ParamStore::from_file(const std::string& path) {
    ParamStore store;
    for (auto& entry : read_entries(path)) {
        Tensor t = Tensor::from_data(entry.shape, std::move(entry.data), true);
        t.set_name(entry.name);
        store.order_.push_back(entry.name);
        store.tensors_.push_back(t);
    }
    return store;
}

}  // namespace goskill::core
