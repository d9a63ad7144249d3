#pragma once

#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "diode/common.hpp"
#include "diode/tensor.hpp"

namespace diode {

// Group-tag matching: a tag matches its own group and every dotted
// subgroup, so "fpn" covers "fpn.0" and "fpn.1", and "cls_head.0"
// matches exactly.
inline bool groupMatches(const std::string& tag, const std::string& group) {
    if (group == tag) return true;
    return group.size() > tag.size() && group.compare(0, tag.size(), tag) == 0 &&
           group[tag.size()] == '.';
}

inline bool groupInSet(const std::set<std::string>& tags, const std::string& group) {
    for (const auto& tag : tags)
        if (groupMatches(tag, group)) return true;
    return false;
}

// Checkpoint names carry their group as a dotted prefix; this is the
// rule that recovers the tag on load.
inline std::string groupForName(const std::string& name) {
    const auto firstDot = name.find('.');
    const std::string head = name.substr(0, firstDot);
    if (head == "fpn" || head == "cls_head" || head == "dm_fpn" || head == "dm_ch") {
        if (firstDot == std::string::npos) return head;
        const auto secondDot = name.find('.', firstDot + 1);
        return name.substr(0, secondDot);
    }
    return head;
}

// Named, group-tagged parameter collection: the unit that EWC,
// freezing, snapshotting, and the optimizer act on. std::map keeps
// iteration order (and therefore every reduction) deterministic.
class ParameterStore {
public:
    struct Param {
        Tensor tensor;
        std::string group;
    };

    Tensor& create(const std::string& name, const std::string& group, std::vector<int> shape) {
        if (params_.count(name)) throw UsageError("parameter already exists: " + name);
        Param p;
        p.tensor = Tensor(std::move(shape));
        p.tensor.tracked = true;
        p.group = group;
        return params_.emplace(name, std::move(p)).first->second.tensor;
    }

    bool has(const std::string& name) const { return params_.count(name) != 0; }

    Tensor& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw UsageError("unknown parameter: " + name);
        return it->second.tensor;
    }

    const Tensor& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw UsageError("unknown parameter: " + name);
        return it->second.tensor;
    }

    const std::string& groupOf(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw UsageError("unknown parameter: " + name);
        return it->second.group;
    }

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }
    size_t count() const { return params_.size(); }

    int64_t totalElements() const {
        int64_t n = 0;
        for (const auto& [name, p] : params_) n += p.tensor.size();
        return n;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(params_.size());
        for (const auto& [name, p] : params_) out.push_back(name);
        return out;
    }

    std::set<std::string> groups() const {
        std::set<std::string> out;
        for (const auto& [name, p] : params_) out.insert(p.group);
        return out;
    }

    void zeroGrads() {
        for (auto& [name, p] : params_) {
            p.tensor.ensureGrad();
            p.tensor.zeroGrad();
        }
    }

    void clearGrads() {
        for (auto& [name, p] : params_) p.tensor.grad.clear();
    }

    uint64_t hashGroup(const std::string& tag) const {
        Fnv1a h;
        for (const auto& [name, p] : params_) {
            if (!groupMatches(tag, p.group)) continue;
            h.str(name);
            for (double v : p.tensor.data) h.f64(v);
        }
        return h.value();
    }

    uint64_t hashNames(const std::vector<std::string>& names) const {
        Fnv1a h;
        for (const auto& name : names) {
            h.str(name);
            for (double v : get(name).data) h.f64(v);
        }
        return h.value();
    }

private:
    std::map<std::string, Param> params_;
};

// theta <- theta - lr * grad for every parameter whose group is not
// frozen; frozen parameters stay bit-identical.
inline void sgdStep(ParameterStore& store, double lr, const std::set<std::string>& frozenTags) {
    if (lr <= 0) throw UsageError("sgdStep requires lr > 0");
    for (auto& [name, p] : store) {
        if (groupInSet(frozenTags, p.group)) continue;
        Tensor& t = p.tensor;
        if (t.grad.size() != t.data.size())
            throw UsageError("sgdStep: missing grad on trainable parameter " + name);
        for (size_t i = 0; i < t.data.size(); ++i) t.data[i] -= lr * t.grad[i];
    }
}

inline double gradL2Norm(const ParameterStore& store, const std::set<std::string>& frozenTags) {
    double acc = 0.0;
    for (const auto& [name, p] : store) {
        if (groupInSet(frozenTags, p.group)) continue;
        for (double g : p.tensor.grad) acc += g * g;
    }
    return std::sqrt(acc);
}

// ---- binary record format shared by checkpoints and importance files ----
// magic, u64 record count, then per record:
//   u32 name length, name bytes, u32 rank, u32 dims[rank],
//   f64 data[prod(dims)] little-endian.

namespace detail {

inline void putBytesLE(std::ostream& os, uint64_t v, int nbytes) {
    for (int i = 0; i < nbytes; ++i) {
        const char b = static_cast<char>((v >> (8 * i)) & 0xFF);
        os.put(b);
    }
}

inline uint64_t getBytesLE(std::istream& is, int nbytes) {
    uint64_t v = 0;
    for (int i = 0; i < nbytes; ++i) {
        const int c = is.get();
        if (c == EOF) throw UsageError("truncated binary file");
        v |= static_cast<uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
    }
    return v;
}

inline void putF64(std::ostream& os, double d) {
    uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    putBytesLE(os, bits, 8);
}

inline double getF64(std::istream& is) {
    const uint64_t bits = getBytesLE(is, 8);
    double d;
    std::memcpy(&d, &bits, sizeof(d));
    return d;
}

inline void writeRecord(std::ostream& os, const std::string& name, const std::vector<int>& shape,
                        const std::vector<double>& data) {
    putBytesLE(os, name.size(), 4);
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    putBytesLE(os, shape.size(), 4);
    for (int d : shape) putBytesLE(os, static_cast<uint64_t>(d), 4);
    for (double v : data) putF64(os, v);
}

inline void readRecord(std::istream& is, std::string& name, std::vector<int>& shape,
                       std::vector<double>& data) {
    const auto nameLen = static_cast<size_t>(getBytesLE(is, 4));
    name.resize(nameLen);
    is.read(name.data(), static_cast<std::streamsize>(nameLen));
    if (!is) throw UsageError("truncated record name");
    const auto rank = static_cast<size_t>(getBytesLE(is, 4));
    shape.resize(rank);
    int64_t n = 1;
    for (size_t i = 0; i < rank; ++i) {
        shape[i] = static_cast<int>(getBytesLE(is, 4));
        n *= shape[i];
    }
    data.resize(static_cast<size_t>(n));
    for (auto& v : data) v = getF64(is);
}

}  // namespace detail

inline constexpr const char* kCheckpointMagic = "DIODE1";

inline void saveCheckpoint(const ParameterStore& store, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw UsageError("cannot open checkpoint for writing: " + path);
    os.write(kCheckpointMagic, 6);
    detail::putBytesLE(os, store.count(), 8);
    for (const auto& [name, p] : store) detail::writeRecord(os, name, p.tensor.shape, p.tensor.data);
    if (!os) throw UsageError("checkpoint write failed: " + path);
}

inline ParameterStore loadCheckpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw UsageError("cannot open checkpoint: " + path);
    char magic[6];
    is.read(magic, 6);
    if (!is || std::string(magic, 6) != kCheckpointMagic)
        throw UsageError("bad checkpoint magic: " + path);
    const auto count = static_cast<size_t>(detail::getBytesLE(is, 8));
    ParameterStore store;
    for (size_t i = 0; i < count; ++i) {
        std::string name;
        std::vector<int> shape;
        std::vector<double> data;
        detail::readRecord(is, name, shape, data);
        Tensor& t = store.create(name, groupForName(name), shape);
        t.data = std::move(data);
    }
    return store;
}

}  // namespace diode
