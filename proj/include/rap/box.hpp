#pragma once

#include <algorithm>
#include <vector>

namespace rap {

/// Axis-aligned box in center-size pixel coordinates.
struct Box {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;

    double left() const { return x - 0.5 * w; }
    double right() const { return x + 0.5 * w; }
    double top() const { return y - 0.5 * h; }
    double bottom() const { return y + 0.5 * h; }

    static Box from_corners(double x0, double y0, double x1, double y1) {
        return Box{0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0};
    }

    /// Intersection with [0,width]x[0,height]; may come out with zero extent.
    Box clipped(double width, double height) const {
        double x0 = std::clamp(left(), 0.0, width);
        double x1 = std::clamp(right(), 0.0, width);
        double y0 = std::clamp(top(), 0.0, height);
        double y1 = std::clamp(bottom(), 0.0, height);
        return from_corners(x0, y0, x1, y1);
    }

    bool inside(double width, double height) const {
        return left() >= 0.0 && top() >= 0.0 && right() <= width && bottom() <= height;
    }

    friend bool operator==(const Box&, const Box&) = default;
};

/// The ground-truth object boxes of one image.
struct GroundTruth {
    std::vector<Box> boxes;

    friend bool operator==(const GroundTruth&, const GroundTruth&) = default;
};

}  // namespace rap
