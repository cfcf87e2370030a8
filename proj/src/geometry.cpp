#include "xalign/geometry.hpp"

#include <algorithm>
#include <cmath>

namespace xalign::geom {

bool BoxXYXY::valid() const {
    return std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2) &&
           x1 <= x2 && y1 <= y2;
}

BoxXYXY to_xyxy(const BoxCCWH& b) {
    return {b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0};
}

BoxCCWH to_ccwh(const BoxXYXY& b) {
    return {(b.x1 + b.x2) / 2.0, (b.y1 + b.y2) / 2.0, b.x2 - b.x1, b.y2 - b.y1};
}

BoxXYXY clamp_unit(const BoxXYXY& b) {
    auto cl = [](double v) { return std::min(1.0, std::max(0.0, v)); };
    return {cl(b.x1), cl(b.y1), cl(b.x2), cl(b.y2)};
}

static double intersection_area(const BoxXYXY& a, const BoxXYXY& b) {
    double iw = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
    double ih = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
    if (iw <= 0.0 || ih <= 0.0) return 0.0;
    return iw * ih;
}

double iou(const BoxXYXY& a, const BoxXYXY& b) {
    if (!a.valid() || !b.valid()) throw std::invalid_argument("iou: invalid box");
    double inter = intersection_area(a, b);
    double uni = a.area() + b.area() - inter;
    if (uni <= 0.0) return 0.0;
    return inter / uni;
}

double giou(const BoxXYXY& a, const BoxXYXY& b) {
    if (!a.valid() || !b.valid()) throw std::invalid_argument("giou: invalid box");
    double inter = intersection_area(a, b);
    double uni = a.area() + b.area() - inter;
    double cw = std::max(a.x2, b.x2) - std::min(a.x1, b.x1);
    double ch = std::max(a.y2, b.y2) - std::min(a.y1, b.y1);
    double enclosing = cw * ch;
    if (enclosing <= 0.0) return 0.0;
    double i = uni > 0.0 ? inter / uni : 0.0;
    return i - (enclosing - uni) / enclosing;
}

BoxXYXY expand_box(const BoxXYXY& b, double ratio) {
    if (!b.valid()) throw std::invalid_argument("expand_box: invalid box");
    if (ratio < 0.0) throw std::invalid_argument("expand_box: ratio must be >= 0");
    double w = b.width(), h = b.height();
    BoxXYXY out{b.x1 - ratio * w, b.y1 - ratio * h, b.x2 + ratio * w, b.y2 + ratio * h};
    return clamp_unit(out);
}

}  // namespace xalign::geom
