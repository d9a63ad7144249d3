#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "diode/box.hpp"
#include "diode/common.hpp"
#include "diode/tensor.hpp"

namespace diode {

// Procedural detection corpus: grayscale scenes of geometric shapes,
// class = shape kind x fill style. All geometry is integer-grid so the
// corpus is bit-identical across platforms and annotation boxes are
// exact.
struct SceneSpec {
    int image_size = 64;
    int num_classes = 8;
    int min_objects = 1;
    int max_objects = 4;
    double min_size_frac = 0.1875;  // 12 px at 64
    double max_size_frac = 0.4375;  // 28 px at 64
    double occlusion_iou = 0.2;
    int noise_level = 20;  // additive uniform [0, noise] on 0..255 scale
    uint64_t seed = 0;

    int minSidePx() const { return static_cast<int>(min_size_frac * image_size); }
    int maxSidePx() const { return static_cast<int>(max_size_frac * image_size); }

    void validate() const {
        if (image_size < 16) throw ConfigError("scene: image_size too small");
        if (num_classes < 1 || num_classes > 8) throw ConfigError("scene: 1..8 classes supported");
        if (min_objects < 1 || max_objects < min_objects)
            throw ConfigError("scene: bad objects-per-image range");
        if (minSidePx() < 8 || maxSidePx() >= image_size)
            throw ConfigError("scene: bad size range");
        if (occlusion_iou < 0 || occlusion_iou > 1) throw ConfigError("scene: bad occlusion");
    }
};

namespace scene_detail {

enum class Shape { Square, Circle, Triangle, Diamond };

// class id -> (shape, hollow): 0 solid square, 1 hollow square,
// 2 solid circle, 3 hollow circle, 4 solid triangle, 5 hollow
// triangle, 6 solid diamond, 7 hollow diamond.
inline Shape shapeOf(int classId) { return static_cast<Shape>(classId / 2); }
inline bool hollowOf(int classId) { return classId % 2 == 1; }

constexpr int kHollowThickness = 3;

inline bool insideSquare(int x, int y, int x0, int y0, int side) {
    return x >= x0 && x < x0 + side && y >= y0 && y < y0 + side;
}

inline bool insideCircle(int x, int y, int cx, int cy, int r) {
    const int dx = x - cx, dy = y - cy;
    return dx * dx + dy * dy <= r * r;
}

inline bool insideDiamond(int x, int y, int cx, int cy, int r) {
    return std::abs(x - cx) + std::abs(y - cy) <= r;
}

// Upright isoceles triangle: apex at (cx, y0), base row y0+h-1 spans
// cx-halfBase..cx+halfBase. Integer half-width per row.
inline bool insideTriangle(int x, int y, int cx, int y0, int h, int halfBase) {
    const int k = y - y0;
    if (k < 0 || k >= h) return false;
    const int halfw = h > 1 ? (k * halfBase) / (h - 1) : halfBase;
    return x >= cx - halfw && x <= cx + halfw;
}

struct Placed {
    int class_id;
    int x0, y0;   // anchor
    int extent;   // side for square, 2r+1 for circle/diamond, h for triangle
    int aux;      // halfBase for triangle, r otherwise
    int intensity;
    BBox bbox;
};

inline Placed makeObject(int classId, int side, int px, int py, int intensity) {
    Placed o;
    o.class_id = classId;
    o.intensity = intensity;
    const Shape s = shapeOf(classId);
    if (s == Shape::Square) {
        o.x0 = px;
        o.y0 = py;
        o.extent = side;
        o.aux = 0;
        o.bbox = {double(px), double(py), double(px + side), double(py + side), classId, -1.0};
    } else if (s == Shape::Circle || s == Shape::Diamond) {
        const int r = (side - 1) / 2;
        const int d = 2 * r + 1;
        o.x0 = px + r;  // center
        o.y0 = py + r;
        o.extent = d;
        o.aux = r;
        o.bbox = {double(px), double(py), double(px + d), double(py + d), classId, -1.0};
    } else {  // Triangle
        const int halfBase = (side - 1) / 2;
        const int w = 2 * halfBase + 1;
        o.x0 = px + halfBase;  // apex x
        o.y0 = py;
        o.extent = side;  // height
        o.aux = halfBase;
        o.bbox = {double(px), double(py), double(px + w), double(py + side), classId, -1.0};
    }
    return o;
}

inline bool insideOuter(const Placed& o, int x, int y) {
    switch (shapeOf(o.class_id)) {
        case Shape::Square: return insideSquare(x, y, o.x0, o.y0, o.extent);
        case Shape::Circle: return insideCircle(x, y, o.x0, o.y0, o.aux);
        case Shape::Diamond: return insideDiamond(x, y, o.x0, o.y0, o.aux);
        case Shape::Triangle: return insideTriangle(x, y, o.x0, o.y0, o.extent, o.aux);
    }
    return false;
}

inline bool insideInner(const Placed& o, int x, int y) {
    const int t = kHollowThickness;
    switch (shapeOf(o.class_id)) {
        case Shape::Square:
            return insideSquare(x, y, o.x0 + t, o.y0 + t, o.extent - 2 * t);
        case Shape::Circle:
            return insideCircle(x, y, o.x0, o.y0, o.aux - t);
        case Shape::Diamond:
            return insideDiamond(x, y, o.x0, o.y0, o.aux - t);
        case Shape::Triangle: {
            // shrink height and base, keep apex column
            const int h = o.extent - 2 * t;
            if (h <= 0) return false;
            return insideTriangle(x, y, o.x0, o.y0 + t + t / 2, h, std::max(0, o.aux - t));
        }
    }
    return false;
}

inline void paint(std::vector<uint8_t>& pix, int size, const Placed& o) {
    const bool hollow = hollowOf(o.class_id);
    const int x1 = static_cast<int>(o.bbox.x1), y1 = static_cast<int>(o.bbox.y1);
    const int x2 = static_cast<int>(o.bbox.x2), y2 = static_cast<int>(o.bbox.y2);
    for (int y = y1; y < y2; ++y) {
        for (int x = x1; x < x2; ++x) {
            if (!insideOuter(o, x, y)) continue;
            if (hollow && insideInner(o, x, y)) continue;
            pix[static_cast<size_t>(y) * size + x] = static_cast<uint8_t>(o.intensity);
        }
    }
}

}  // namespace scene_detail

struct Scene {
    std::vector<uint8_t> pixels;  // 8-bit grayscale, row-major
    std::vector<BBox> boxes;
    int size = 0;

    Tensor toTensor() const {
        Tensor t({1, 1, size, size});
        for (size_t i = 0; i < pixels.size(); ++i) t.data[i] = pixels[i] / 255.0;
        return t;
    }
};

// Renders one scene with the given per-object class choices. Object
// placement uses rejection sampling against the pairwise-overlap
// bound; a spec that cannot be satisfied raises GenerationError.
inline Scene renderSceneWithClasses(const SceneSpec& spec, Rng& rng,
                                    const std::vector<int>& classIds) {
    spec.validate();
    const int S = spec.image_size;
    Scene scene;
    scene.size = S;
    scene.pixels.assign(static_cast<size_t>(S) * S, 0);

    // background noise first, objects painted on top
    for (auto& p : scene.pixels)
        p = static_cast<uint8_t>(spec.noise_level > 0 ? rng.uniformInt(0, spec.noise_level) : 0);

    std::vector<scene_detail::Placed> placed;
    for (int classId : classIds) {
        if (classId < 0 || classId >= spec.num_classes)
            throw ConfigError("renderScene: class outside vocabulary");
        bool ok = false;
        for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
            const int side = rng.uniformInt(spec.minSidePx(), spec.maxSidePx());
            const int px = rng.uniformInt(0, S - side);
            const int py = rng.uniformInt(0, S - side);
            const int intensity = rng.uniformInt(160, 250);
            auto candidate = scene_detail::makeObject(classId, side, px, py, intensity);
            bool clash = false;
            for (const auto& other : placed)
                if (boxIoU(candidate.bbox, other.bbox) > spec.occlusion_iou) {
                    clash = true;
                    break;
                }
            if (!clash) {
                placed.push_back(candidate);
                ok = true;
            }
        }
        if (!ok) throw GenerationError("renderScene: placement failed after 1000 attempts");
    }
    for (const auto& o : placed) {
        scene_detail::paint(scene.pixels, S, o);
        scene.boxes.push_back(o.bbox);
    }
    return scene;
}

// Public form: classes sampled uniformly from the vocabulary,
// deterministic in (spec, index).
inline Scene renderScene(const SceneSpec& spec, uint64_t index) {
    Rng rng(mixSeed(spec.seed, index, 0xD10DE));
    const int n = rng.uniformInt(spec.min_objects, spec.max_objects);
    std::vector<int> classes;
    for (int i = 0; i < n; ++i) classes.push_back(rng.uniformInt(0, spec.num_classes - 1));
    return renderSceneWithClasses(spec, rng, classes);
}

// Keeps exactly the boxes whose class is in currentClasses, order
// preserved.
inline std::vector<BBox> maskAnnotations(const std::vector<BBox>& full,
                                         const std::vector<int>& currentClasses) {
    std::vector<BBox> out;
    for (const auto& b : full)
        if (std::find(currentClasses.begin(), currentClasses.end(), b.class_id) !=
            currentClasses.end())
            out.push_back(b);
    return out;
}

struct Sample {
    std::string id;
    Tensor image;
    std::vector<BBox> boxes;
};

struct DatasetSplit {
    std::string role;
    std::vector<Sample> samples;
};

// Ordered class partition plus materialized per-step splits. Training
// split s carries only step-s annotations; `trainFull` keeps the
// unmasked boxes for evaluation and oracles only.
struct TaskProtocol {
    std::vector<int> stepSizes;
    std::vector<std::vector<int>> stepClasses;
    std::vector<DatasetSplit> trainSteps;
    std::vector<DatasetSplit> trainFull;
    DatasetSplit test;
    SceneSpec scene;
    uint64_t seed = 0;

    int numSteps() const { return static_cast<int>(stepSizes.size()); }

    std::vector<int> classesSeenThrough(int step) const {
        std::vector<int> out;
        for (int s = 0; s <= step && s < numSteps(); ++s)
            out.insert(out.end(), stepClasses[s].begin(), stepClasses[s].end());
        return out;
    }
};

// Builds the multi-step protocol. New classes arrive in the fixed
// canonical order; each step-s train image contains at least one
// step-s object, and from step 1 onward previously seen classes are
// co-rendered with probability 1/2 but left unannotated in the masked
// split. The test split is annotation-complete.
inline TaskProtocol buildProtocol(const SceneSpec& scene, const std::vector<int>& stepSizes,
                                  int trainPerStep, int testSize, uint64_t seed) {
    scene.validate();
    int total = 0;
    for (int s : stepSizes) {
        if (s < 1) throw ConfigError("buildProtocol: step sizes must be >= 1");
        total += s;
    }
    if (total != scene.num_classes)
        throw ConfigError("buildProtocol: step sizes must sum to vocabulary size");
    if (trainPerStep < 1 || testSize < 1) throw ConfigError("buildProtocol: empty splits");

    TaskProtocol proto;
    proto.scene = scene;
    proto.seed = seed;
    proto.stepSizes = stepSizes;
    int next = 0;
    for (int s : stepSizes) {
        std::vector<int> cls;
        for (int i = 0; i < s; ++i) cls.push_back(next++);
        proto.stepClasses.push_back(cls);
    }

    const auto renderFor = [&](uint64_t streamTag, uint64_t index,
                               const std::vector<int>& classes) {
        Rng rng(mixSeed(mixSeed(seed, streamTag), index));
        return renderSceneWithClasses(scene, rng, classes);
    };

    for (int s = 0; s < proto.numSteps(); ++s) {
        DatasetSplit masked;
        DatasetSplit full;
        masked.role = "train-step-" + std::to_string(s);
        full.role = masked.role + "-full";
        const auto& stepCls = proto.stepClasses[s];
        std::vector<int> oldCls;
        for (int p = 0; p < s; ++p)
            oldCls.insert(oldCls.end(), proto.stepClasses[p].begin(), proto.stepClasses[p].end());

        for (int i = 0; i < trainPerStep; ++i) {
            Rng pick(mixSeed(mixSeed(seed, 1000 + s), i));
            std::vector<int> classes;
            // balance: cycle the guaranteed current-step object
            classes.push_back(stepCls[i % stepCls.size()]);
            const int extra = pick.uniformInt(0, scene.max_objects - 1);
            for (int e = 0; e < extra; ++e) {
                const bool old = !oldCls.empty() && pick.uniform() < 0.5;
                if (old)
                    classes.push_back(oldCls[pick.uniformInt(0, int(oldCls.size()) - 1)]);
                else
                    classes.push_back(stepCls[pick.uniformInt(0, int(stepCls.size()) - 1)]);
            }
            Scene sc = renderFor(2000 + s, static_cast<uint64_t>(i), classes);
            Sample sample;
            sample.id = "step" + std::to_string(s) + "_" + std::to_string(i);
            sample.image = sc.toTensor();
            sample.boxes = sc.boxes;
            full.samples.push_back(sample);
            sample.boxes = maskAnnotations(sc.boxes, stepCls);
            masked.samples.push_back(std::move(sample));
        }
        proto.trainSteps.push_back(std::move(masked));
        proto.trainFull.push_back(std::move(full));
    }

    proto.test.role = "test";
    for (int i = 0; i < testSize; ++i) {
        Rng pick(mixSeed(mixSeed(seed, 9000), i));
        std::vector<int> classes;
        classes.push_back(i % scene.num_classes);  // every class appears
        const int extra = pick.uniformInt(0, scene.max_objects - 1);
        for (int e = 0; e < extra; ++e)
            classes.push_back(pick.uniformInt(0, scene.num_classes - 1));
        Scene sc = renderFor(9999, static_cast<uint64_t>(i), classes);
        Sample sample;
        sample.id = "test_" + std::to_string(i);
        sample.image = sc.toTensor();
        sample.boxes = sc.boxes;
        proto.test.samples.push_back(std::move(sample));
    }
    return proto;
}

}  // namespace diode
