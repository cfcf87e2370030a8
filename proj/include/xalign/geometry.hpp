#pragma once

#include <stdexcept>

namespace xalign::geom {

// Axis-aligned box, corner form, normalized image coordinates in [0,1].
struct BoxXYXY {
    double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

    double width() const { return x2 - x1; }
    double height() const { return y2 - y1; }
    double area() const { return width() * height(); }
    bool valid() const;
};

// Center form: (cx, cy) center, (w, h) non-negative extents.
struct BoxCCWH {
    double cx = 0, cy = 0, w = 0, h = 0;
};

BoxXYXY to_xyxy(const BoxCCWH& b);
BoxCCWH to_ccwh(const BoxXYXY& b);

// Clamp all corners into [0,1]. Keeps x1<=x2, y1<=y2.
BoxXYXY clamp_unit(const BoxXYXY& b);

// Intersection-over-union in [0,1]. Degenerate/disjoint pairs give 0.
double iou(const BoxXYXY& a, const BoxXYXY& b);

// Generalized IoU in [-1,1]: iou minus the enclosing-box penalty.
// A zero-area enclosing box returns 0.
double giou(const BoxXYXY& a, const BoxXYXY& b);

// Move each edge outward by ratio * the box extent along that axis, then
// clamp to [0,1]. ratio=0.5 doubles width and height (before clamping).
BoxXYXY expand_box(const BoxXYXY& b, double ratio);

}  // namespace xalign::geom
