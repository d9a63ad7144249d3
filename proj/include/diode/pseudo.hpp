#pragma once

#include <string>
#include <vector>

#include "diode/box.hpp"
#include "diode/common.hpp"
#include "diode/detector.hpp"

namespace diode {

// Old-class boxes predicted by the previous model on a new-task image,
// merged with the new ground truth; the two label sets never share a
// class by protocol.
struct MergedAnnotationSet {
    std::string imageId;
    std::vector<BBox> gtNew;
    std::vector<BBox> pseudoOld;

    std::vector<BBox> combined() const {
        std::vector<BBox> out = gtNew;
        out.insert(out.end(), pseudoOld.begin(), pseudoOld.end());
        return out;
    }
};

// Runs the frozen end-of-previous-step model on the image over the
// old-task heads only; boxes above the confidence threshold come back
// with their old class ids and scores.
inline std::vector<BBox> generatePseudo(Model& oldModel, const Tensor& image, double confThresh,
                                        double nmsIoU, int maxDets = 100) {
    if (confThresh <= 0 || confThresh >= 1)
        throw UsageError("generatePseudo: confThresh must lie in (0,1)");
    DecodeOptions opts;
    opts.score_thresh = confThresh;
    opts.nms_iou = nmsIoU;
    opts.max_dets = maxDets;
    return detect(oldModel, image, oldModel.allTasks(), opts);
}

// Concatenation with source markers; classes must be disjoint, nothing
// is deduplicated.
inline MergedAnnotationSet mergeAnnotations(const std::vector<BBox>& gtNew,
                                            const std::vector<BBox>& pseudoOld,
                                            std::string imageId = "") {
    for (const auto& g : gtNew)
        for (const auto& p : pseudoOld)
            if (g.class_id == p.class_id)
                throw ProtocolError("mergeAnnotations: class sets overlap on id " +
                                    std::to_string(g.class_id));
    MergedAnnotationSet out;
    out.imageId = std::move(imageId);
    out.gtNew = gtNew;
    out.pseudoOld = pseudoOld;
    return out;
}

}  // namespace diode
