#pragma once

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "diode/common.hpp"
#include "diode/detector.hpp"
#include "diode/data.hpp"
#include "diode/params.hpp"

namespace diode {

// Per-parameter nonnegative importance weights, name-aligned with a
// ParameterStore. Parameters created after estimation simply have no
// entry and count as importance zero until re-estimated.
struct ImportanceMatrix {
    std::map<std::string, std::vector<double>> values;

    bool aligned(const std::string& name, size_t n) const {
        auto it = values.find(name);
        return it != values.end() && it->second.size() == n;
    }
};

// Deep copy of all parameter values at the end of a task.
struct Snapshot {
    std::map<std::string, std::vector<double>> values;
    std::map<std::string, std::string> groups;

    static Snapshot of(const ParameterStore& store) {
        Snapshot s;
        for (const auto& [name, p] : store) {
            s.values.emplace(name, p.tensor.data);
            s.groups.emplace(name, p.group);
        }
        return s;
    }

    std::set<std::string> groupTags() const {
        std::set<std::string> out;
        for (const auto& [name, g] : groups) out.insert(g);
        return out;
    }
};

// Parameter-group tags whose members receive the EWC penalty.
struct GroupMask {
    std::set<std::string> tags;

    static GroupMask constrained() { return GroupMask{{"backbone", "fpn", "cls_tower"}}; }

    static GroupMask allOf(const Snapshot& snap) { return GroupMask{snap.groupTags()}; }

    bool covers(const std::string& group) const { return groupInSet(tags, group); }

    void validateAgainst(const ParameterStore& store) const {
        const auto groups = store.groups();
        for (const auto& tag : tags) {
            bool found = false;
            for (const auto& g : groups)
                if (groupMatches(tag, g)) {
                    found = true;
                    break;
                }
            if (!found) throw ConfigError("GroupMask tag not present in store: " + tag);
        }
    }
};

// ---- importance estimation ----

enum class GradReduce { Squared, Absolute };

// Mean over examples of a per-parameter reduction of the gradient of
// `perExampleLoss(tape, exampleIdx)`. The store is left unchanged
// (gradient buffers are scratch and cleared afterwards).
template <typename LossFn>
ImportanceMatrix gradientImportance(ParameterStore& store, int nExamples, GradReduce reduce,
                                    LossFn&& perExampleLoss) {
    if (nExamples < 1) throw UsageError("gradientImportance: need at least one example");
    ImportanceMatrix out;
    for (const auto& [name, p] : store)
        out.values.emplace(name, std::vector<double>(p.tensor.data.size(), 0.0));
    for (int i = 0; i < nExamples; ++i) {
        store.zeroGrads();
        Tape tape;
        const Tape::Var loss = perExampleLoss(tape, i);
        tape.backward(loss);
        for (auto& [name, acc] : out.values) {
            const Tensor& t = store.get(name);
            for (size_t k = 0; k < acc.size(); ++k)
                acc[k] += reduce == GradReduce::Squared ? t.grad[k] * t.grad[k]
                                                        : std::fabs(t.grad[k]);
        }
    }
    for (auto& [name, acc] : out.values)
        for (auto& v : acc) v /= nExamples;
    store.clearGrads();
    return out;
}

// Empirical Fisher: mean over examples of the squared gradient of the
// full detection loss at the current parameters.
inline ImportanceMatrix fisherImportance(Model& m, const std::vector<Sample>& dataset,
                                         int nSamples) {
    if (nSamples < 1) throw UsageError("fisherImportance: nSamples must be >= 1");
    if (dataset.empty()) throw UsageError("fisherImportance: empty dataset");
    const int n = std::min<int>(nSamples, static_cast<int>(dataset.size()));
    const auto tasks = m.allTasks();
    return gradientImportance(m.params, n, GradReduce::Squared, [&](Tape& tape, int i) {
        const Sample& sample = dataset[static_cast<size_t>(i)];
        const RawOutputs out = forward(m, tape, sample.image, tasks, ParamMode::Tracked);
        const TargetMap targets = assignTargets(sample.boxes, m.config);
        return detectionLoss(m, tape, out, targets);
    });
}

// MAS importance: mean over examples of |d ||g(x)||^2 / d theta| where
// g(x) is the concatenated pre-sigmoid classification output across
// levels and heads.
inline ImportanceMatrix masImportance(Model& m, const std::vector<Sample>& dataset, int nSamples) {
    if (nSamples < 1) throw UsageError("masImportance: nSamples must be >= 1");
    if (dataset.empty()) throw UsageError("masImportance: empty dataset");
    const int n = std::min<int>(nSamples, static_cast<int>(dataset.size()));
    const auto tasks = m.allTasks();
    return gradientImportance(m.params, n, GradReduce::Absolute, [&](Tape& tape, int i) {
        const Sample& sample = dataset[static_cast<size_t>(i)];
        const RawOutputs out = forward(m, tape, sample.image, tasks, ParamMode::Tracked);
        Tape::Var norm2 = tape.scalarConst(0.0);
        for (const auto& lv : out.levels)
            for (const auto& tl : lv.cls)
                norm2 = tape.add(norm2, tape.sum(tape.mul(tl.logits, tl.logits)));
        return norm2;
    });
}

// Entrywise sum on the union of names; a name present in only one
// input keeps its single value.
inline ImportanceMatrix accumulateImportance(const ImportanceMatrix& previous,
                                             const ImportanceMatrix& current) {
    ImportanceMatrix out = previous;
    for (const auto& [name, vals] : current.values) {
        auto it = out.values.find(name);
        if (it == out.values.end()) {
            out.values.emplace(name, vals);
        } else {
            if (it->second.size() != vals.size())
                throw ConfigError("accumulateImportance: size mismatch for " + name);
            for (size_t i = 0; i < vals.size(); ++i) it->second[i] += vals[i];
        }
    }
    return out;
}

// ---- penalties ----

// Eq.-style quadratic anchor penalty, built from tape primitives so
// its gradient comes out of reverse mode: (lambda/2) * sum_i F_i *
// (theta_i - theta*_i)^2 over parameters in masked groups. Parameters
// outside the mask receive no penalty nodes at all, hence bitwise-zero
// penalty gradient.
inline Tape::Var ewcPenalty(Tape& tape, ParameterStore& store, const Snapshot& snapshot,
                            const ImportanceMatrix& importance, double lambda,
                            const GroupMask& mask) {
    if (lambda < 0) throw UsageError("ewcPenalty: lambda must be >= 0");
    mask.validateAgainst(store);
    Tape::Var total = tape.scalarConst(0.0);
    for (auto& [name, p] : store) {
        if (!mask.covers(p.group)) continue;
        const auto snapIt = snapshot.values.find(name);
        if (snapIt == snapshot.values.end() || snapIt->second.size() != p.tensor.data.size())
            throw ConfigError("ewcPenalty: snapshot not aligned for " + name);
        if (!importance.aligned(name, p.tensor.data.size()))
            throw ConfigError("ewcPenalty: importance not aligned for " + name);
        const int sz = static_cast<int>(p.tensor.data.size());
        const Tape::Var theta = tape.leaf(p.tensor, name);
        const Tape::Var anchor = tape.constant({sz}, snapIt->second);
        const Tape::Var weight = tape.constant({sz}, importance.values.at(name));
        const Tape::Var diff = tape.sub(theta, anchor);
        total = tape.add(total, tape.sum(tape.mul(weight, tape.mul(diff, diff))));
    }
    return tape.mulScalar(total, lambda / 2.0);
}

// IncDet-style Huber-clipped variant, applied unmasked across every
// parameter aligned with the snapshot; per-parameter gradient
// magnitude never exceeds clipThreshold.
inline Tape::Var huberClippedPenalty(Tape& tape, ParameterStore& store, const Snapshot& snapshot,
                                     const ImportanceMatrix& importance, double lambda,
                                     double clipThreshold) {
    if (clipThreshold <= 0) throw UsageError("huberClippedPenalty: clipThreshold must be > 0");
    if (lambda < 0) throw UsageError("huberClippedPenalty: lambda must be >= 0");
    Tape::Var total = tape.scalarConst(0.0);
    for (auto& [name, p] : store) {
        const auto snapIt = snapshot.values.find(name);
        if (snapIt == snapshot.values.end()) continue;  // created after the anchor
        if (snapIt->second.size() != p.tensor.data.size())
            throw ConfigError("huberClippedPenalty: snapshot not aligned for " + name);
        if (!importance.aligned(name, p.tensor.data.size())) continue;
        const int sz = static_cast<int>(p.tensor.data.size());
        std::vector<double> curvature = importance.values.at(name);
        for (auto& v : curvature) v *= lambda;
        const Tape::Var theta = tape.leaf(p.tensor, name);
        const Tape::Var anchor = tape.constant({sz}, snapIt->second);
        const Tape::Var curv = tape.constant({sz}, curvature);
        total = tape.add(total, tape.huberPenaltySum(theta, anchor, curv, clipThreshold));
    }
    return total;
}

// ---- diagnostics ----

struct ImportanceStats {
    struct GroupStats {
        double min = 0, median = 0, max = 0;
        size_t count = 0;
    };
    std::map<std::string, GroupStats> perGroup;
    std::optional<double> maxMinRatio;  // max over smallest strictly-positive entry
    std::vector<std::pair<std::string, double>> topParams;  // by max entry
};

inline ImportanceStats importanceStats(const ImportanceMatrix& importance,
                                       const ParameterStore& store, int topK = 5) {
    ImportanceStats stats;
    std::map<std::string, std::vector<double>> byGroup;
    double globalMax = 0.0;
    double smallestPositive = std::numeric_limits<double>::infinity();
    std::vector<std::pair<std::string, double>> perParamMax;

    for (const auto& [name, p] : store) {
        auto it = importance.values.find(name);
        if (it == importance.values.end()) continue;
        if (it->second.size() != p.tensor.data.size())
            throw ConfigError("importanceStats: unaligned entry " + name);
        auto& bucket = byGroup[p.group];
        double paramMax = 0.0;
        for (double v : it->second) {
            bucket.push_back(v);
            paramMax = std::max(paramMax, v);
            globalMax = std::max(globalMax, v);
            if (v > 0) smallestPositive = std::min(smallestPositive, v);
        }
        perParamMax.emplace_back(name, paramMax);
    }

    for (auto& [group, vals] : byGroup) {
        std::sort(vals.begin(), vals.end());
        ImportanceStats::GroupStats g;
        g.count = vals.size();
        g.min = vals.front();
        g.max = vals.back();
        const size_t n = vals.size();
        g.median = n % 2 == 1 ? vals[n / 2] : 0.5 * (vals[n / 2 - 1] + vals[n / 2]);
        stats.perGroup.emplace(group, g);
    }

    if (globalMax > 0 && std::isfinite(smallestPositive))
        stats.maxMinRatio = globalMax / smallestPositive;

    std::sort(perParamMax.begin(), perParamMax.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    if (static_cast<int>(perParamMax.size()) > topK) perParamMax.resize(static_cast<size_t>(topK));
    stats.topParams = std::move(perParamMax);
    return stats;
}

// ---- serialization (checkpoint record format, IMPT1 magic) ----

inline constexpr const char* kImportanceMagic = "IMPT1";

inline void saveImportance(const ImportanceMatrix& imp, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw UsageError("cannot open importance file for writing: " + path);
    os.write(kImportanceMagic, 5);
    detail::putBytesLE(os, imp.values.size(), 8);
    for (const auto& [name, vals] : imp.values)
        detail::writeRecord(os, name, {static_cast<int>(vals.size())}, vals);
    if (!os) throw UsageError("importance write failed: " + path);
}

inline ImportanceMatrix loadImportance(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw UsageError("cannot open importance file: " + path);
    char magic[5];
    is.read(magic, 5);
    if (!is || std::string(magic, 5) != kImportanceMagic)
        throw UsageError("bad importance magic: " + path);
    const auto count = static_cast<size_t>(detail::getBytesLE(is, 8));
    ImportanceMatrix imp;
    for (size_t i = 0; i < count; ++i) {
        std::string name;
        std::vector<int> shape;
        std::vector<double> data;
        detail::readRecord(is, name, shape, data);
        imp.values.emplace(std::move(name), std::move(data));
    }
    return imp;
}

}  // namespace diode
