#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "diode/box.hpp"
#include "diode/common.hpp"
#include "diode/params.hpp"
#include "diode/tensor.hpp"

namespace diode {

// Miniature anchor-free dense detector: small stride-2 conv backbone,
// per-level 1x1 laterals, shared 3x3 towers, per-task classification
// heads, center-ness and ltrb regression heads.
struct DetectorConfig {
    int image_size = 64;
    int in_channels = 1;
    int channels = 32;
    std::vector<int> strides = {8, 16};
    int tower_depth = 2;
    // upper bound of max(l,t,r,b) per level; last entry is +inf
    std::vector<double> level_size_limits = {20.0, std::numeric_limits<double>::infinity()};
    double focal_alpha = 0.25;
    int focal_gamma = 2;
    double head_bias_init = -2.0;
    double reg_bias_init = 2.0;  // initial ltrb = exp(2) ~ 7 px, near object scale

    int numLevels() const { return static_cast<int>(strides.size()); }

    void validate() const {
        if (strides.empty()) throw ConfigError("detector: at least one pyramid level");
        for (size_t i = 0; i < strides.size(); ++i) {
            if (strides[i] < 2 || (strides[i] & (strides[i] - 1)) != 0)
                throw ConfigError("detector: strides must be powers of two >= 2");
            if (i > 0 && strides[i] <= strides[i - 1])
                throw ConfigError("detector: strides must be strictly increasing");
            if (image_size % strides[i] != 0)
                throw ConfigError("detector: image size must be divisible by strides");
        }
        if (level_size_limits.size() != strides.size())
            throw ConfigError("detector: one size limit per level");
        for (size_t i = 0; i < level_size_limits.size(); ++i) {
            if (level_size_limits[i] <= 0) throw ConfigError("detector: size limits must be positive");
            if (i > 0 && level_size_limits[i] <= level_size_limits[i - 1])
                throw ConfigError("detector: size limits must be increasing");
        }
        if (!std::isinf(level_size_limits.back()))
            throw ConfigError("detector: last size limit must be infinite");
        if (channels < 2 || tower_depth < 1) throw ConfigError("detector: bad channels/tower");
        if (focal_gamma < 1) throw ConfigError("detector: focal gamma must be >= 1");
    }

    double levelLow(int level) const { return level == 0 ? 0.0 : level_size_limits[level - 1]; }
    double levelHigh(int level) const { return level_size_limits[level]; }
};

struct Model {
    DetectorConfig config;
    ParameterStore params;
    std::vector<int> classes_per_task;

    int numTasks() const { return static_cast<int>(classes_per_task.size()); }

    int numClassesSeen() const {
        int n = 0;
        for (int k : classes_per_task) n += k;
        return n;
    }

    int classOffset(int task) const {
        int off = 0;
        for (int t = 0; t < task; ++t) off += classes_per_task[t];
        return off;
    }

    // (task, channel) for a global class id
    std::pair<int, int> taskOfClass(int classId) const {
        int off = 0;
        for (int t = 0; t < numTasks(); ++t) {
            if (classId < off + classes_per_task[t]) return {t, classId - off};
            off += classes_per_task[t];
        }
        throw UsageError("class id beyond seen classes");
    }

    bool hasAdapters(int task) const {
        return params.has("dm_ch." + std::to_string(task) + ".weight");
    }

    std::vector<int> allTasks() const {
        std::vector<int> out(classes_per_task.size());
        for (size_t i = 0; i < out.size(); ++i) out[i] = static_cast<int>(i);
        return out;
    }
};

namespace detector_detail {

inline void fanInNormal(Tensor& t, int fanIn, Rng& rng) {
    const double stddev = 1.0 / std::sqrt(static_cast<double>(fanIn));
    for (auto& v : t.data) v = rng.normal(0.0, stddev);
}

// Backbone plan: alternate exact-halving 2x2/s2 convs with
// shape-preserving 3x3 feature convs on the first two stages. Strides
// must be powers of two, so the plan is fully determined by the
// deepest stride.
struct BackboneLayer {
    int out_channels;
    int kernel;
    int stride;   // 2 halves the map, 1 preserves it
    int padding;
    int mapStrideAfter;  // cumulative downsampling after this layer
};

inline std::vector<BackboneLayer> backbonePlan(const DetectorConfig& c) {
    std::vector<BackboneLayer> plan;
    const int C = c.channels;
    const int half = std::max(2, C / 2);
    int mapStride = 1;
    int stage = 0;
    while (mapStride < c.strides.back()) {
        const int out = stage == 0 ? half : C;
        plan.push_back({out, 2, 2, 0, mapStride * 2});
        mapStride *= 2;
        ++stage;
        if (stage <= 2 && mapStride < c.strides.back())
            plan.push_back({out, 3, 1, 1, mapStride});
    }
    return plan;
}

}  // namespace detector_detail

// Adds a 3x3 classification head for `task` with `numClasses` output
// channels; bias starts low so the initial foreground probability is
// small.
inline void addClassificationHead(Model& m, int task, int numClasses, Rng& rng) {
    if (numClasses < 1) throw ConfigError("classification head needs at least one class");
    const std::string prefix = "cls_head." + std::to_string(task);
    if (m.params.has(prefix + ".weight")) throw UsageError("duplicate head for task " + std::to_string(task));
    const int C = m.config.channels;
    Tensor& w = m.params.create(prefix + ".weight", prefix, {numClasses, C, 3, 3});
    detector_detail::fanInNormal(w, C * 9, rng);
    Tensor& b = m.params.create(prefix + ".bias", prefix, {numClasses});
    std::fill(b.data.begin(), b.data.end(), m.config.head_bias_init);
    if (task != static_cast<int>(m.classes_per_task.size()))
        throw UsageError("task heads must be added in order");
    m.classes_per_task.push_back(numClasses);
}

inline Model buildModel(const DetectorConfig& config, int baseClasses, Rng& rng) {
    config.validate();
    Model m;
    m.config = config;
    const int C = config.channels;

    // downsampling uses 2x2/s2 kernels so every stage halves exactly;
    // 3x3 feature convs sit between the first downsamples
    int inCh = config.in_channels;
    const auto plan = detector_detail::backbonePlan(config);
    for (size_t d = 0; d < plan.size(); ++d) {
        const auto& layer = plan[d];
        const std::string prefix = "backbone.conv" + std::to_string(d + 1);
        Tensor& w = m.params.create(prefix + ".weight", "backbone",
                                    {layer.out_channels, inCh, layer.kernel, layer.kernel});
        detector_detail::fanInNormal(w, inCh * layer.kernel * layer.kernel, rng);
        m.params.create(prefix + ".bias", "backbone", {layer.out_channels});
        inCh = layer.out_channels;
    }
    for (int l = 0; l < config.numLevels(); ++l) {
        const std::string group = "fpn." + std::to_string(l);
        Tensor& w = m.params.create(group + ".weight", group, {C, C, 1, 1});
        detector_detail::fanInNormal(w, C, rng);
        m.params.create(group + ".bias", group, {C});
    }
    for (const char* tower : {"cls_tower", "reg_tower"}) {
        for (int d = 0; d < config.tower_depth; ++d) {
            const std::string prefix = std::string(tower) + "." + std::to_string(d);
            Tensor& w = m.params.create(prefix + ".weight", tower, {C, C, 3, 3});
            detector_detail::fanInNormal(w, C * 9, rng);
            m.params.create(prefix + ".bias", tower, {C});
        }
    }
    Tensor& cw = m.params.create("ctr_head.weight", "ctr_head", {1, C, 3, 3});
    detector_detail::fanInNormal(cw, C * 9, rng);
    m.params.create("ctr_head.bias", "ctr_head", {1});
    Tensor& rw = m.params.create("reg_head.weight", "reg_head", {4, C, 3, 3});
    detector_detail::fanInNormal(rw, C * 9, rng);
    Tensor& rb = m.params.create("reg_head.bias", "reg_head", {4});
    std::fill(rb.data.begin(), rb.data.end(), config.reg_bias_init);

    addClassificationHead(m, 0, baseClasses, rng);
    return m;
}

// ---- target assignment ----

struct TargetMap {
    struct Level {
        int stride = 0;
        int h = 0, w = 0;
        std::vector<int> classId;      // -1 for background
        std::vector<double> ltrb;      // [4, h, w] row-major channel planes
        std::vector<double> centerness;
        std::vector<uint8_t> positive;
    };
    std::vector<Level> levels;

    int numPositives() const {
        int n = 0;
        for (const auto& lv : levels)
            for (uint8_t p : lv.positive) n += p;
        return n;
    }
};

// FCOS-style assignment: a pixel is positive for the smallest-area box
// strictly containing its center whose max(l,t,r,b) falls in the
// level's size range.
inline TargetMap assignTargets(const std::vector<BBox>& annotations,
                               const DetectorConfig& config) {
    config.validate();
    TargetMap map;
    for (int level = 0; level < config.numLevels(); ++level) {
        const int stride = config.strides[level];
        TargetMap::Level lv;
        lv.stride = stride;
        lv.h = config.image_size / stride;
        lv.w = config.image_size / stride;
        const size_t area = static_cast<size_t>(lv.h) * lv.w;
        lv.classId.assign(area, -1);
        lv.ltrb.assign(4 * area, 0.0);
        lv.centerness.assign(area, 0.0);
        lv.positive.assign(area, 0);

        const double lo = config.levelLow(level);
        const double hi = config.levelHigh(level);
        for (int i = 0; i < lv.h; ++i) {
            for (int j = 0; j < lv.w; ++j) {
                const double py = stride * (i + 0.5);
                const double px = stride * (j + 0.5);
                const BBox* best = nullptr;
                double bestL = 0, bestT = 0, bestR = 0, bestB = 0;
                for (const auto& box : annotations) {
                    if (!box.valid()) throw ConfigError("assignTargets: invalid box");
                    if (!box.contains(px, py)) continue;
                    const double l = px - box.x1, t = py - box.y1;
                    const double r = box.x2 - px, b = box.y2 - py;
                    const double m = std::max({l, t, r, b});
                    if (!(m > lo && m <= hi)) continue;
                    if (best) {
                        // smallest area wins; deterministic lexicographic
                        // tiebreak keeps assignment permutation-invariant
                        const auto key = [](const BBox& bb) {
                            return std::make_tuple(bb.area(), bb.x1, bb.y1, bb.x2, bb.y2,
                                                   bb.class_id);
                        };
                        if (!(key(box) < key(*best))) continue;
                    }
                    best = &box;
                    bestL = l;
                    bestT = t;
                    bestR = r;
                    bestB = b;
                }
                if (!best) continue;
                const size_t idx = static_cast<size_t>(i) * lv.w + j;
                lv.classId[idx] = best->class_id;
                lv.positive[idx] = 1;
                const size_t plane = static_cast<size_t>(lv.h) * lv.w;
                lv.ltrb[0 * plane + idx] = bestL;
                lv.ltrb[1 * plane + idx] = bestT;
                lv.ltrb[2 * plane + idx] = bestR;
                lv.ltrb[3 * plane + idx] = bestB;
                lv.centerness[idx] =
                    std::sqrt((std::min(bestL, bestR) / std::max(bestL, bestR)) *
                              (std::min(bestT, bestB) / std::max(bestT, bestB)));
            }
        }
        map.levels.push_back(std::move(lv));
    }
    return map;
}

// ---- forward ----

struct RawOutputs {
    struct TaskLogits {
        int task = 0;
        Tape::Var logits;  // [1, k_t, h, w]
    };
    struct Level {
        int stride = 0;
        int h = 0, w = 0;
        std::vector<TaskLogits> cls;
        Tape::Var centerness;  // [1, 1, h, w]
        Tape::Var ltrb;        // [1, 4, h, w], strictly positive
    };
    std::vector<Level> levels;
};

enum class ParamMode { Tracked, Frozen };

namespace detector_detail {

class ParamVars {
public:
    ParamVars(Model& m, Tape& tape, ParamMode mode) : m_(m), tape_(tape), mode_(mode) {}

    Tape::Var operator()(const std::string& name) {
        auto it = cache_.find(name);
        if (it != cache_.end()) return it->second;
        Tensor& t = m_.params.get(name);
        const Tape::Var v =
            mode_ == ParamMode::Tracked ? tape_.leaf(t, name) : tape_.constant(t);
        cache_.emplace(name, v);
        return v;
    }

private:
    Model& m_;
    Tape& tape_;
    ParamMode mode_;
    std::map<std::string, Tape::Var> cache_;
};

inline Tape::Var runTower(Tape& tape, ParamVars& P, const std::string& tower, Tape::Var x,
                          int depth) {
    for (int d = 0; d < depth; ++d) {
        const std::string prefix = tower + "." + std::to_string(d);
        x = tape.relu(tape.conv2d(x, P(prefix + ".weight"), P(prefix + ".bias"), 1, 1));
    }
    return x;
}

}  // namespace detector_detail

// Shared backbone + per-level lateral path: one feature map per
// pyramid level.
inline std::vector<Tape::Var> fpnFeatures(Model& m, Tape& tape, Tape::Var image,
                                          ParamMode mode = ParamMode::Tracked) {
    const DetectorConfig& cfg = m.config;
    detector_detail::ParamVars P(m, tape, mode);
    const auto plan = detector_detail::backbonePlan(cfg);
    std::vector<Tape::Var> taps(cfg.numLevels());
    Tape::Var x = image;
    for (size_t d = 0; d < plan.size(); ++d) {
        const auto& layer = plan[d];
        const std::string prefix = "backbone.conv" + std::to_string(d + 1);
        x = tape.relu(tape.conv2d(x, P(prefix + ".weight"), P(prefix + ".bias"), layer.stride,
                                  layer.padding));
        if (layer.stride == 1) continue;
        for (int l = 0; l < cfg.numLevels(); ++l)
            if (cfg.strides[l] == layer.mapStrideAfter) taps[l] = x;
    }
    std::vector<Tape::Var> features;
    for (int level = 0; level < cfg.numLevels(); ++level) {
        const std::string fpn = "fpn." + std::to_string(level);
        features.push_back(tape.conv2d(taps[level], P(fpn + ".weight"), P(fpn + ".bias"), 1, 0));
    }
    return features;
}

// Full forward pass for the given task branches. Task branches without
// adapters use the shared-tower path; branches that own adapters route
// each pyramid feature through the per-level 1x1 adapter, re-run the
// shared tower, and pass the result through the shared 1x1 adapter
// before the task head.
inline RawOutputs forward(Model& m, Tape& tape, Tape::Var image, const std::vector<int>& activeTasks,
                          ParamMode mode = ParamMode::Tracked) {
    const DetectorConfig& cfg = m.config;
    detector_detail::ParamVars P(m, tape, mode);

    for (int t : activeTasks)
        if (t < 0 || t >= m.numTasks())
            throw ConfigError("forward: task " + std::to_string(t) + " has no head");

    const std::vector<Tape::Var> features = fpnFeatures(m, tape, image, mode);

    RawOutputs out;
    for (int level = 0; level < cfg.numLevels(); ++level) {
        const Tape::Var feature = features[static_cast<size_t>(level)];

        RawOutputs::Level lv;
        lv.stride = cfg.strides[level];
        lv.h = cfg.image_size / lv.stride;
        lv.w = lv.h;

        // regression path, shared across tasks
        const Tape::Var regFeat =
            detector_detail::runTower(tape, P, "reg_tower", feature, cfg.tower_depth);
        lv.centerness = tape.conv2d(regFeat, P("ctr_head.weight"), P("ctr_head.bias"), 1, 1);
        // raw range clamped so exp cannot overflow and feed back
        lv.ltrb = tape.expv(tape.clamp(
            tape.conv2d(regFeat, P("reg_head.weight"), P("reg_head.bias"), 1, 1), -8.0, 8.0));

        // classification branches; the unadapted tower output is shared
        // by every branch without adapters
        Tape::Var sharedTower;
        for (int t : activeTasks) {
            const std::string head = "cls_head." + std::to_string(t);
            Tape::Var towerOut;
            if (m.hasAdapters(t)) {
                const std::string dmf =
                    "dm_fpn." + std::to_string(t) + "." + std::to_string(level);
                if (!m.params.has(dmf + ".weight"))
                    throw ConfigError("forward: missing adapter " + dmf);
                const Tape::Var adapted =
                    tape.conv2d(feature, P(dmf + ".weight"), P(dmf + ".bias"), 1, 0);
                const Tape::Var tower =
                    detector_detail::runTower(tape, P, "cls_tower", adapted, cfg.tower_depth);
                const std::string dmc = "dm_ch." + std::to_string(t);
                towerOut = tape.conv2d(tower, P(dmc + ".weight"), P(dmc + ".bias"), 1, 0);
            } else {
                if (!sharedTower.valid())
                    sharedTower = detector_detail::runTower(tape, P, "cls_tower", feature,
                                                            cfg.tower_depth);
                towerOut = sharedTower;
            }
            RawOutputs::TaskLogits tl;
            tl.task = t;
            tl.logits = tape.conv2d(towerOut, P(head + ".weight"), P(head + ".bias"), 1, 1);
            lv.cls.push_back(tl);
        }
        out.levels.push_back(std::move(lv));
    }
    return out;
}

inline RawOutputs forward(Model& m, Tape& tape, const Tensor& image,
                          const std::vector<int>& activeTasks,
                          ParamMode mode = ParamMode::Tracked) {
    return forward(m, tape, tape.constant(image), activeTasks, mode);
}

// ---- detection loss ----
// focal classification (normalized by positive count, min 1) +
// IoU loss on decoded ltrb over positives + binary cross-entropy on
// center-ness over positives.
inline Tape::Var detectionLoss(Model& m, Tape& tape, const RawOutputs& outputs,
                               const TargetMap& targets) {
    if (outputs.levels.size() != targets.levels.size())
        throw ConfigError("detectionLoss: level count mismatch");
    const double alpha = m.config.focal_alpha;
    const int gamma = m.config.focal_gamma;
    const int npos = targets.numPositives();
    const double posNorm = 1.0 / std::max(1, npos);

    Tape::Var total = tape.scalarConst(0.0);
    for (size_t li = 0; li < outputs.levels.size(); ++li) {
        const auto& olv = outputs.levels[li];
        const auto& tlv = targets.levels[li];
        const size_t plane = static_cast<size_t>(tlv.h) * tlv.w;
        if (olv.h != tlv.h || olv.w != tlv.w)
            throw ConfigError("detectionLoss: spatial size mismatch");

        // focal term over every task's logit map
        for (const auto& tl : olv.cls) {
            const int k = m.classes_per_task[tl.task];
            const int offset = m.classOffset(tl.task);
            std::vector<double> posWeight(static_cast<size_t>(k) * plane, 0.0);
            std::vector<double> negWeight(static_cast<size_t>(k) * plane, 1.0 - alpha);
            for (size_t p = 0; p < plane; ++p) {
                const int cls = tlv.classId[p];
                if (cls < 0) continue;
                const int channel = cls - offset;
                if (channel < 0 || channel >= k) continue;
                posWeight[static_cast<size_t>(channel) * plane + p] = alpha;
                negWeight[static_cast<size_t>(channel) * plane + p] = 0.0;
            }
            const Tape::Var z = tl.logits;
            const Tape::Var p = tape.sigmoid(z);
            const Tape::Var q = tape.sigmoid(tape.neg(z));  // 1 - p
            Tape::Var qPow = q;
            Tape::Var pPow = p;
            for (int g = 1; g < gamma; ++g) {
                qPow = tape.mul(qPow, q);
                pPow = tape.mul(pPow, p);
            }
            const auto shape = tape.shape(z);
            const Tape::Var wPos = tape.constant(shape, std::move(posWeight));
            const Tape::Var wNeg = tape.constant(shape, std::move(negWeight));
            const Tape::Var posTerm = tape.mul(wPos, tape.mul(qPow, tape.logSigmoid(z)));
            const Tape::Var negTerm = tape.mul(wNeg, tape.mul(pPow, tape.logSigmoid(tape.neg(z))));
            const Tape::Var focal =
                tape.mulScalar(tape.sum(tape.add(posTerm, negTerm)), -posNorm);
            total = tape.add(total, focal);
        }

        if (npos > 0) {
            std::vector<double> mask(plane, 0.0);
            for (size_t p = 0; p < plane; ++p) mask[p] = tlv.positive[p] ? 1.0 : 0.0;
            const Tape::Var maskVar = tape.constant({static_cast<int>(plane)}, mask);

            // IoU term from l,t,r,b distances around the shared center
            const auto ch = [&](Tape::Var v, int c) {
                return tape.slice(v, static_cast<int64_t>(c) * plane, static_cast<int64_t>(plane));
            };
            const Tape::Var lp = ch(olv.ltrb, 0), tp = ch(olv.ltrb, 1), rp = ch(olv.ltrb, 2),
                            bp = ch(olv.ltrb, 3);
            std::vector<double> lg(tlv.ltrb.begin(), tlv.ltrb.begin() + plane);
            std::vector<double> tg(tlv.ltrb.begin() + plane, tlv.ltrb.begin() + 2 * plane);
            std::vector<double> rg(tlv.ltrb.begin() + 2 * plane, tlv.ltrb.begin() + 3 * plane);
            std::vector<double> bg(tlv.ltrb.begin() + 3 * plane, tlv.ltrb.begin() + 4 * plane);
            const int planeI = static_cast<int>(plane);
            const Tape::Var lgv = tape.constant({planeI}, lg), tgv = tape.constant({planeI}, tg),
                            rgv = tape.constant({planeI}, rg), bgv = tape.constant({planeI}, bg);
            const Tape::Var interW = tape.add(tape.vmin(lp, lgv), tape.vmin(rp, rgv));
            const Tape::Var interH = tape.add(tape.vmin(tp, tgv), tape.vmin(bp, bgv));
            const Tape::Var inter = tape.mul(interW, interH);
            const Tape::Var areaP = tape.mul(tape.add(lp, rp), tape.add(tp, bp));
            std::vector<double> areaG(plane, 0.0);
            for (size_t p = 0; p < plane; ++p) areaG[p] = (lg[p] + rg[p]) * (tg[p] + bg[p]);
            const Tape::Var areaGv = tape.constant({planeI}, areaG);
            const Tape::Var uni = tape.sub(tape.add(areaP, areaGv), inter);
            const Tape::Var iou = tape.div(inter, uni);
            const Tape::Var iouLoss = tape.mul(maskVar, tape.sub(tape.scalarConst(1.0), iou));
            total = tape.add(total, tape.mulScalar(tape.sum(iouLoss), posNorm));

            // center-ness BCE over positives
            const Tape::Var zc = tape.slice(olv.centerness, 0, planeI);
            const Tape::Var yc = tape.constant({planeI}, tlv.centerness);
            const Tape::Var oneMinus = tape.constant(
                {planeI}, [&] {
                    std::vector<double> v(plane);
                    for (size_t p = 0; p < plane; ++p) v[p] = 1.0 - tlv.centerness[p];
                    return v;
                }());
            const Tape::Var bce = tape.neg(tape.add(tape.mul(yc, tape.logSigmoid(zc)),
                                                    tape.mul(oneMinus, tape.logSigmoid(tape.neg(zc)))));
            const Tape::Var ctrLoss = tape.mul(maskVar, bce);
            total = tape.add(total, tape.mulScalar(tape.sum(ctrLoss), posNorm));
        }
    }
    return total;
}

inline TargetMap assignTargets(const std::vector<BBox>& annotations, const Model& m) {
    return assignTargets(annotations, m.config);
}

// ---- decoding ----

struct DecodeOptions {
    double score_thresh = 0.05;
    double nms_iou = 0.5;
    int max_dets = 100;
};

namespace detector_detail {

struct Candidate {
    BBox box;
    int64_t order;  // deterministic (classId, pixel index) tiebreak
};

}  // namespace detector_detail

// Per-pixel score = sigmoid(cls logit) * sigmoid(center-ness); boxes
// decoded from ltrb, pooled over every head/level, then class-wise
// greedy NMS. Ties break by (classId, pixel order).
inline std::vector<BBox> decode(const Model& m, const Tape& tape, const RawOutputs& outputs,
                                const DecodeOptions& opts) {
    if (opts.score_thresh < 0 || opts.score_thresh > 1 || opts.nms_iou < 0 || opts.nms_iou > 1)
        throw UsageError("decode: thresholds must lie in [0,1]");
    const double imgExtent = m.config.image_size;
    std::vector<detector_detail::Candidate> cands;
    int64_t order = 0;
    for (const auto& lv : outputs.levels) {
        const size_t plane = static_cast<size_t>(lv.h) * lv.w;
        const auto& ctr = tape.val(lv.centerness);
        const auto& ltrb = tape.val(lv.ltrb);
        for (const auto& tl : lv.cls) {
            const auto& logits = tape.val(tl.logits);
            const int k = m.classes_per_task[tl.task];
            const int offset = m.classOffset(tl.task);
            for (int c = 0; c < k; ++c) {
                for (size_t p = 0; p < plane; ++p, ++order) {
                    const double zc = logits[static_cast<size_t>(c) * plane + p];
                    const double sCls = 1.0 / (1.0 + std::exp(-zc));
                    const double sCtr = 1.0 / (1.0 + std::exp(-ctr[p]));
                    const double score = sCls * sCtr;
                    if (score <= opts.score_thresh) continue;
                    const int i = static_cast<int>(p) / lv.w;
                    const int j = static_cast<int>(p) % lv.w;
                    const double px = lv.stride * (j + 0.5);
                    const double py = lv.stride * (i + 0.5);
                    BBox box;
                    box.x1 = px - ltrb[0 * plane + p];
                    box.y1 = py - ltrb[1 * plane + p];
                    box.x2 = px + ltrb[2 * plane + p];
                    box.y2 = py + ltrb[3 * plane + p];
                    box.class_id = offset + c;
                    box.score = score;
                    box = box.clipped(imgExtent, imgExtent);
                    if (!box.valid()) continue;
                    cands.push_back({box, order});
                }
            }
        }
    }

    std::sort(cands.begin(), cands.end(), [](const auto& a, const auto& b) {
        if (a.box.score != b.box.score) return a.box.score > b.box.score;
        if (a.box.class_id != b.box.class_id) return a.box.class_id < b.box.class_id;
        return a.order < b.order;
    });

    std::vector<BBox> kept;
    std::vector<char> suppressed(cands.size(), 0);
    for (size_t i = 0; i < cands.size() && static_cast<int>(kept.size()) < opts.max_dets; ++i) {
        if (suppressed[i]) continue;
        kept.push_back(cands[i].box);
        for (size_t j = i + 1; j < cands.size(); ++j) {
            if (suppressed[j] || cands[j].box.class_id != cands[i].box.class_id) continue;
            if (boxIoU(cands[i].box, cands[j].box) > opts.nms_iou) suppressed[j] = 1;
        }
    }
    return kept;
}

// Convenience inference path: forward + decode with untracked params.
inline std::vector<BBox> detect(Model& m, const Tensor& image, const std::vector<int>& tasks,
                                const DecodeOptions& opts) {
    Tape tape;
    const RawOutputs out = forward(m, tape, image, tasks, ParamMode::Frozen);
    return decode(m, tape, out, opts);
}

}  // namespace diode
