#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "diode/common.hpp"

namespace diode {

// Axis-aligned box with class label and optional score. Ground truth,
// pseudo labels, and detections all share this shape; score < 0 marks
// ground truth.
struct BBox {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
    int class_id = -1;
    double score = -1.0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }

    bool valid() const { return x1 < x2 && y1 < y2; }

    bool contains(double px, double py) const { return px > x1 && px < x2 && py > y1 && py < y2; }

    BBox clipped(double w, double h) const {
        BBox b = *this;
        b.x1 = std::clamp(b.x1, 0.0, w);
        b.x2 = std::clamp(b.x2, 0.0, w);
        b.y1 = std::clamp(b.y1, 0.0, h);
        b.y2 = std::clamp(b.y2, 0.0, h);
        return b;
    }
};

inline double boxIoU(const BBox& a, const BBox& b) {
    const double ix = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
    const double iy = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
    const double inter = ix * iy;
    if (inter <= 0) return 0.0;
    const double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

}  // namespace diode
