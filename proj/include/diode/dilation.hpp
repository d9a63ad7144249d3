#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "diode/common.hpp"
#include "diode/detector.hpp"

namespace diode {

// Task-specific model expansion: per-level 1x1 adapters on the FPN
// features, one shared 1x1 adapter after the classification tower, and
// a fresh 3x3 classification head per task. Adapters start as exact
// identity maps so the step begins from the old model's behavior.

namespace dilation_detail {

inline void initIdentityAdapter(Tensor& weight, int channels) {
    std::fill(weight.data.begin(), weight.data.end(), 0.0);
    for (int c = 0; c < channels; ++c)
        weight.data[static_cast<size_t>(c) * channels + c] = 1.0;
}

}  // namespace dilation_detail

// Adds the task head, and from the second incremental step (task >= 2)
// the identity-initialized dilatable adapters. Never touches existing
// parameter values.
inline void expandModel(Model& m, int taskIdx, int numNewClasses, Rng& rng) {
    if (taskIdx < 1) throw UsageError("expandModel: taskIdx must be >= 1");
    if (numNewClasses < 1) throw UsageError("expandModel: need at least one new class");
    if (m.params.has("cls_head." + std::to_string(taskIdx) + ".weight"))
        throw UsageError("expandModel: duplicate expansion for task " + std::to_string(taskIdx));

    addClassificationHead(m, taskIdx, numNewClasses, rng);

    if (taskIdx >= 2) {
        const int C = m.config.channels;
        for (int level = 0; level < m.config.numLevels(); ++level) {
            const std::string group = "dm_fpn." + std::to_string(taskIdx);
            const std::string prefix = group + "." + std::to_string(level);
            Tensor& w = m.params.create(prefix + ".weight", group, {C, C, 1, 1});
            dilation_detail::initIdentityAdapter(w, C);
            m.params.create(prefix + ".bias", group, {C});
        }
        const std::string group = "dm_ch." + std::to_string(taskIdx);
        Tensor& w = m.params.create(group + ".weight", group, {C, C, 1, 1});
        dilation_detail::initIdentityAdapter(w, C);
        m.params.create(group + ".bias", group, {C});
    }
}

// Classification logits of one task branch from precomputed FPN
// features (one Var per level). Branches for task >= 2 must own their
// adapters.
inline std::vector<Tape::Var> taskBranchForward(Model& m, Tape& tape,
                                                const std::vector<Tape::Var>& fpnFeatures,
                                                int task, ParamMode mode = ParamMode::Frozen) {
    if (task < 0 || task >= m.numTasks())
        throw ConfigError("taskBranchForward: no head for task " + std::to_string(task));
    if (task >= 2 && !m.hasAdapters(task))
        throw ConfigError("taskBranchForward: missing adapters for task " + std::to_string(task));
    detector_detail::ParamVars P(m, tape, mode);
    const std::string head = "cls_head." + std::to_string(task);
    std::vector<Tape::Var> out;
    for (int level = 0; level < m.config.numLevels(); ++level) {
        Tape::Var feature = fpnFeatures.at(static_cast<size_t>(level));
        Tape::Var towerOut;
        if (m.hasAdapters(task)) {
            const std::string dmf = "dm_fpn." + std::to_string(task) + "." + std::to_string(level);
            feature = tape.conv2d(feature, P(dmf + ".weight"), P(dmf + ".bias"), 1, 0);
            const Tape::Var tower =
                detector_detail::runTower(tape, P, "cls_tower", feature, m.config.tower_depth);
            const std::string dmc = "dm_ch." + std::to_string(task);
            towerOut = tape.conv2d(tower, P(dmc + ".weight"), P(dmc + ".bias"), 1, 0);
        } else {
            towerOut =
                detector_detail::runTower(tape, P, "cls_tower", feature, m.config.tower_depth);
        }
        out.push_back(tape.conv2d(towerOut, P(head + ".weight"), P(head + ".bias"), 1, 1));
    }
    return out;
}

// ---- parameter accounting ----

struct StepGrowth {
    int64_t added = 0;
    int64_t cumulative = 0;
    double cumulativeRatio = 0.0;
};

// Closed-form added-parameter count per step: step 1 adds only its
// head (9*C*k + k); step s >= 2 adds L*(C^2+C) + (C^2+C) adapters plus
// the head. Ratios are relative to the base model size.
inline std::vector<StepGrowth> countAddedParams(int channels, int levels,
                                                const std::vector<int>& classesPerStep,
                                                int64_t baseParamCount) {
    if (channels < 1 || levels < 1) throw ConfigError("countAddedParams: bad config");
    if (baseParamCount < 1) throw ConfigError("countAddedParams: base count must be positive");
    if (classesPerStep.size() < 2)
        throw ConfigError("countAddedParams: need the base step plus incremental steps");
    const int64_t C = channels;
    const int64_t adapterBlock = C * C + C;
    std::vector<StepGrowth> out;
    int64_t cumulative = 0;
    for (size_t s = 1; s < classesPerStep.size(); ++s) {
        const int k = classesPerStep[s];
        if (k < 1) throw ConfigError("countAddedParams: every step must add classes");
        StepGrowth g;
        g.added = 9 * C * k + k;
        if (s >= 2) g.added += (levels + 1) * adapterBlock;
        cumulative += g.added;
        g.cumulative = cumulative;
        g.cumulativeRatio = static_cast<double>(cumulative) / static_cast<double>(baseParamCount);
        out.push_back(g);
    }
    return out;
}

inline std::vector<StepGrowth> countAddedParams(const DetectorConfig& config,
                                                const std::vector<int>& classesPerStep,
                                                int64_t baseParamCount) {
    return countAddedParams(config.channels, config.numLevels(), classesPerStep, baseParamCount);
}

// ---- trainability policy ----

enum class Trainability { Frozen, Normal, EwcRegularized };

struct TrainabilityPolicy {
    std::map<std::string, Trainability> groups;

    std::set<std::string> frozenTags() const {
        std::set<std::string> out;
        for (const auto& [tag, mode] : groups)
            if (mode == Trainability::Frozen) out.insert(tag);
        return out;
    }

    std::set<std::string> ewcTags() const {
        std::set<std::string> out;
        for (const auto& [tag, mode] : groups)
            if (mode == Trainability::EwcRegularized) out.insert(tag);
        return out;
    }

    Trainability of(const std::string& group) const {
        for (const auto& [tag, mode] : groups)
            if (groupMatches(tag, group)) return mode;
        return Trainability::Normal;
    }
};

// Policy for training `step` (0-based task index): old classification
// heads and old adapters frozen; feature extractor EWC-regularized;
// regression path, current head, and current adapters trained
// normally.
inline TrainabilityPolicy buildTrainabilityPolicy(int step, int taskCount) {
    if (step < 0 || step >= taskCount) throw UsageError("buildTrainabilityPolicy: bad step");
    TrainabilityPolicy policy;
    policy.groups["backbone"] = Trainability::EwcRegularized;
    policy.groups["fpn"] = Trainability::EwcRegularized;
    policy.groups["cls_tower"] = Trainability::EwcRegularized;
    policy.groups["reg_tower"] = Trainability::Normal;
    policy.groups["reg_head"] = Trainability::Normal;
    policy.groups["ctr_head"] = Trainability::Normal;
    for (int t = 0; t < taskCount; ++t) {
        const std::string idx = std::to_string(t);
        const Trainability mode = t < step ? Trainability::Frozen : Trainability::Normal;
        policy.groups["cls_head." + idx] = mode;
        if (t >= 2) {
            policy.groups["dm_fpn." + idx] = mode;
            policy.groups["dm_ch." + idx] = mode;
        }
    }
    return policy;
}

}  // namespace diode
