#pragma once

#include <span>
#include <utility>
#include <vector>

#include "xalign/geometry.hpp"

namespace xalign::assign {

// n_pred x n_gt matching cost matrix, row-major over predictions.
struct CostMatrix {
    int n_pred = 0;
    int n_gt = 0;
    std::vector<double> entries;

    CostMatrix() = default;
    CostMatrix(int np, int ng) : n_pred(np), n_gt(ng), entries(size_t(np) * ng, 0.0) {}

    double& at(int pred, int gt) { return entries[size_t(pred) * n_gt + gt]; }
    double at(int pred, int gt) const { return entries[size_t(pred) * n_gt + gt]; }
};

struct MatchResult {
    // (pred_index, gt_index), sorted by gt_index; every gt appears exactly once.
    std::vector<std::pair<int, int>> pairs;
    std::vector<int> unmatched_preds;  // ascending
    double total_cost = 0.0;
};

struct CostWeights {
    double cls = 2.0;
    double l1 = 5.0;
    double giou = 2.0;
};

// Minimum-cost injective assignment of every gt to a distinct pred
// (Kuhn-Munkres with potentials, O(n^3)): exact optimum. Among equal-cost
// optima the lexicographically smallest pair list (by gt order) is returned.
// Requires n_pred >= n_gt and finite entries.
MatchResult solve_assignment(const CostMatrix& c);

// Composite matching cost:
//   entry(i,j) = w.cls*(1 - sigmoid(logit_i))
//              + w.l1 * |box_i - box_j|_1   (center form, 4 coords)
//              + w.giou * (1 - giou(box_i, box_j))
CostMatrix match_cost(std::span<const double> pred_logits,
                      std::span<const geom::BoxCCWH> pred_boxes,
                      std::span<const geom::BoxCCWH> gt_boxes,
                      const CostWeights& w = {});

}  // namespace xalign::assign
