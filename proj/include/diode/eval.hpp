#pragma once

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "diode/box.hpp"
#include "diode/common.hpp"
#include "diode/data.hpp"
#include "diode/detector.hpp"

namespace diode {

inline double iou(const BBox& a, const BBox& b) { return boxIoU(a, b); }

// A detection or ground-truth box tagged with the image it belongs to.
struct TaggedBox {
    int image_id = 0;
    BBox box;
    int64_t det_id = 0;  // deterministic tiebreak for equal scores
};

// Average precision for one class: detections sorted by descending
// score (ties by det_id), greedy matching to the highest-IoU unmatched
// ground truth in the same image at IoU >= iouThresh, all-point
// interpolated area under the precision-recall curve. An optional
// 11-point variant is kept for sensitivity checks.
inline double averagePrecision(std::vector<TaggedBox> detections,
                               const std::vector<TaggedBox>& groundTruth, double iouThresh,
                               bool elevenPoint = false) {
    if (groundTruth.empty()) return detections.empty() ? 1.0 : 0.0;

    std::sort(detections.begin(), detections.end(), [](const TaggedBox& a, const TaggedBox& b) {
        if (a.box.score != b.box.score) return a.box.score > b.box.score;
        return a.det_id < b.det_id;
    });

    std::vector<char> gtMatched(groundTruth.size(), 0);
    std::vector<char> isTp(detections.size(), 0);
    for (size_t d = 0; d < detections.size(); ++d) {
        double bestIoU = 0.0;
        int bestGt = -1;
        for (size_t g = 0; g < groundTruth.size(); ++g) {
            if (gtMatched[g] || groundTruth[g].image_id != detections[d].image_id) continue;
            const double ov = boxIoU(detections[d].box, groundTruth[g].box);
            if (ov >= iouThresh && ov > bestIoU) {
                bestIoU = ov;
                bestGt = static_cast<int>(g);
            }
        }
        if (bestGt >= 0) {
            gtMatched[static_cast<size_t>(bestGt)] = 1;
            isTp[d] = 1;
        }
    }

    const double nGt = static_cast<double>(groundTruth.size());
    std::vector<double> precision(detections.size()), recall(detections.size());
    int tp = 0;
    for (size_t d = 0; d < detections.size(); ++d) {
        tp += isTp[d];
        precision[d] = static_cast<double>(tp) / static_cast<double>(d + 1);
        recall[d] = static_cast<double>(tp) / nGt;
    }

    if (elevenPoint) {
        double acc = 0.0;
        for (int k = 0; k <= 10; ++k) {
            const double r = k / 10.0;
            double best = 0.0;
            for (size_t d = 0; d < detections.size(); ++d)
                if (recall[d] >= r) best = std::max(best, precision[d]);
            acc += best;
        }
        return acc / 11.0;
    }

    // all-point interpolation: monotone precision envelope from the right
    double ap = 0.0;
    double envelope = 0.0;
    for (size_t d = detections.size(); d-- > 0;) {
        envelope = std::max(envelope, precision[d]);
        const double r = d > 0 ? recall[d - 1] : 0.0;
        ap += (recall[d] - r) * envelope;
    }
    return ap;
}

// ---- model evaluation ----

struct EvalOptions {
    double score_thresh = 0.05;
    double nms_iou = 0.5;
    int max_dets = 100;
    std::vector<double> thresholds = {0.50, 0.55, 0.60, 0.65, 0.70,
                                      0.75, 0.80, 0.85, 0.90, 0.95};
    bool eleven_point = false;
};

struct EvalResult {
    // ap[classId][thresholdIdx]
    std::map<int, std::vector<double>> perClassAp;
    std::vector<double> thresholds;
    double map50 = 0.0;
    double map5095 = 0.0;
    std::vector<int> flaggedEmptyClasses;

    double apOf(int classId, double thresh) const {
        auto it = perClassAp.find(classId);
        if (it == perClassAp.end()) return 0.0;
        for (size_t i = 0; i < thresholds.size(); ++i)
            if (std::fabs(thresholds[i] - thresh) < 1e-9) return it->second[i];
        return 0.0;
    }

    double meanApAt(double thresh, const std::vector<int>& classes) const {
        double acc = 0.0;
        int n = 0;
        for (int c : classes) {
            if (perClassAp.count(c)) {
                acc += apOf(c, thresh);
                ++n;
            }
        }
        return n > 0 ? acc / n : 0.0;
    }
};

// Aggregates per-class AP over a test split from precomputed per-image
// detections. Classes with no ground truth in the split are excluded
// from the mean and flagged.
inline EvalResult evaluateDetections(const std::vector<std::vector<BBox>>& detsPerImage,
                                     const DatasetSplit& testSplit,
                                     const std::vector<int>& classes,
                                     const EvalOptions& opts = EvalOptions{}) {
    if (detsPerImage.size() != testSplit.samples.size())
        throw UsageError("evaluateDetections: one detection list per image required");
    EvalResult result;
    result.thresholds = opts.thresholds;

    std::map<int, std::vector<TaggedBox>> detsByClass;
    std::map<int, std::vector<TaggedBox>> gtByClass;
    int64_t detId = 0;
    for (size_t i = 0; i < testSplit.samples.size(); ++i) {
        for (const auto& d : detsPerImage[i])
            detsByClass[d.class_id].push_back({static_cast<int>(i), d, detId++});
        for (const auto& g : testSplit.samples[i].boxes)
            gtByClass[g.class_id].push_back({static_cast<int>(i), g, 0});
    }

    double sum50 = 0.0, sumAll = 0.0;
    int counted = 0;
    for (int c : classes) {
        if (!gtByClass.count(c)) {
            result.flaggedEmptyClasses.push_back(c);
            continue;
        }
        std::vector<double> aps;
        for (double t : opts.thresholds)
            aps.push_back(averagePrecision(detsByClass[c], gtByClass[c], t, opts.eleven_point));
        sum50 += aps.front();
        double acc = 0.0;
        for (double a : aps) acc += a;
        sumAll += acc / static_cast<double>(aps.size());
        result.perClassAp.emplace(c, std::move(aps));
        ++counted;
    }
    if (counted > 0) {
        result.map50 = sum50 / counted;
        result.map5095 = sumAll / counted;
    }
    return result;
}

// Runs decode on every test image, then aggregates.
inline EvalResult evaluateModel(Model& m, const DatasetSplit& testSplit,
                                const std::vector<int>& classes,
                                const EvalOptions& opts = EvalOptions{}) {
    DecodeOptions dopts;
    dopts.score_thresh = opts.score_thresh;
    dopts.nms_iou = opts.nms_iou;
    dopts.max_dets = opts.max_dets;
    std::vector<std::vector<BBox>> dets;
    dets.reserve(testSplit.samples.size());
    for (const auto& sample : testSplit.samples)
        dets.push_back(detect(m, sample.image, m.allTasks(), dopts));
    return evaluateDetections(dets, testSplit, classes, opts);
}

}  // namespace diode
