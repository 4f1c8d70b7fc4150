#pragma once

// Named parameter registry with seeded initialization, checkpoint round-trip,
// and content checksums for freeze contracts.

#include <cstdint>
#include <string>
#include <vector>

#include "goskill/tensor.hpp"

namespace goskill::core {

enum class Init {
    kZeros,
    kOnes,
    kTruncNormal002,  // truncated normal, std 0.02, clipped at two sigma
};

class ParamStore {
public:
    // Registers (or returns the existing) parameter under `name`.  The init
    // seed is derived from (seed, name) so layouts can change without
    // reshuffling unrelated parameters.
    Tensor create(const std::string& name, Shape shape, Init init, uint64_t seed);

    Tensor get(const std::string& name) const;
    bool contains(const std::string& name) const;
    const std::vector<std::string>& names() const { return order_; }
    size_t size() const { return order_.size(); }
    size_t value_count() const;

    // Parameters whose name starts with `prefix`, in registration order.
    std::vector<Tensor> match(const std::string& prefix = "") const;

    void zero_grads();
    void set_trainable(const std::string& prefix, bool trainable);

    // FNV-1a over the little-endian value bytes of matching parameters, mixed
    // with their names; stable across save/load.
    uint64_t checksum(const std::string& prefix = "") const;

    void save(const std::string& path) const;

    // Restores values into already-registered parameters.  Every stored entry
    // must exist with a matching shape; missing/mismatched entries are errors.
    void load(const std::string& path);

    // Reads a checkpoint into a fresh store (parameters marked trainable).
    static ParamStore from_file(const std::string& path);

private:
    std::vector<std::string> order_;
    std::vector<Tensor> tensors_;
};

}  // namespace goskill::core
