#include "xalign/assignment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "xalign/common.hpp"

namespace xalign::assign {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

struct JvSolution {
    std::vector<int> pred_for_gt;  // size n_gt
    std::vector<double> u;         // gt potentials, size n_gt + 1
    std::vector<double> v;         // pred potentials, size n_pred + 1
    double total = 0.0;
};

// Potentials-based Kuhn-Munkres over rows = gts (n) and cols = preds (m),
// n <= m. cost(i, j) fetched through the callable to avoid transposes.
template <typename CostFn>
JvSolution jv_solve(int n, int m, CostFn cost) {
    std::vector<double> u(n + 1, 0.0), v(m + 1, 0.0);
    std::vector<int> p(m + 1, 0), way(m + 1, 0);  // p[j]: 1-based gt matched to pred j
    std::vector<double> minv(m + 1);
    std::vector<char> used(m + 1);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::fill(minv.begin(), minv.end(), kInf);
        std::fill(used.begin(), used.end(), char(0));
        do {
            used[j0] = 1;
            int i0 = p[j0], j1 = 0;
            double delta = kInf;
            for (int j = 1; j <= m; ++j) {
                if (used[j]) continue;
                double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0);
    }
    JvSolution sol;
    sol.pred_for_gt.assign(n, -1);
    for (int j = 1; j <= m; ++j)
        if (p[j]) sol.pred_for_gt[p[j] - 1] = j - 1;
    sol.u = std::move(u);
    sol.v = std::move(v);
    for (int i = 0; i < n; ++i) sol.total += cost(i, sol.pred_for_gt[i]);
    return sol;
}

// Re-solve with some gts pinned to fixed preds; returns total cost of the
// best completion, or +inf when infeasible sizes.
double solve_with_fixed(const CostMatrix& c, const std::vector<int>& fixed_pred_for_gt) {
    std::vector<int> free_gts, free_preds;
    std::vector<char> pred_taken(c.n_pred, 0);
    double fixed_cost = 0.0;
    for (int g = 0; g < c.n_gt; ++g) {
        int p = fixed_pred_for_gt[g];
        if (p >= 0) {
            pred_taken[p] = 1;
            fixed_cost += c.at(p, g);
        } else {
            free_gts.push_back(g);
        }
    }
    for (int p = 0; p < c.n_pred; ++p)
        if (!pred_taken[p]) free_preds.push_back(p);
    if (free_gts.empty()) return fixed_cost;
    if (int(free_preds.size()) < int(free_gts.size())) return kInf;
    auto sub = jv_solve(int(free_gts.size()), int(free_preds.size()), [&](int i, int j) {
        return c.at(free_preds[j], free_gts[i]);
    });
    return fixed_cost + sub.total;
}

// Iterative Tarjan; returns the SCC id of every node of the digraph `adj`.
std::vector<int> scc_ids(const std::vector<std::vector<int>>& adj) {
    const int n = int(adj.size());
    std::vector<int> ids(n, -1), low(n, 0), num(n, -1), stk, frame_node, frame_edge;
    std::vector<char> on_stack(n, 0);
    int counter = 0, next_id = 0;
    for (int root = 0; root < n; ++root) {
        if (num[root] >= 0) continue;
        frame_node.assign(1, root);
        frame_edge.assign(1, 0);
        num[root] = low[root] = counter++;
        stk.push_back(root);
        on_stack[root] = 1;
        while (!frame_node.empty()) {
            int x = frame_node.back();
            if (frame_edge.back() < int(adj[x].size())) {
                int y = adj[x][frame_edge.back()++];
                if (num[y] < 0) {
                    num[y] = low[y] = counter++;
                    stk.push_back(y);
                    on_stack[y] = 1;
                    frame_node.push_back(y);
                    frame_edge.push_back(0);
                } else if (on_stack[y]) {
                    low[x] = std::min(low[x], num[y]);
                }
            } else {
                if (low[x] == num[x]) {
                    int y;
                    do {
                        y = stk.back();
                        stk.pop_back();
                        on_stack[y] = 0;
                        ids[y] = next_id;
                    } while (y != x);
                    ++next_id;
                }
                frame_node.pop_back();
                frame_edge.pop_back();
                if (!frame_node.empty())
                    low[frame_node.back()] = std::min(low[frame_node.back()], low[x]);
            }
        }
    }
    return ids;
}

}  // namespace

MatchResult solve_assignment(const CostMatrix& c) {
    if (c.n_pred < 1) throw std::invalid_argument("solve_assignment: need at least one prediction");
    if (c.n_gt < 0 || int(c.entries.size()) != c.n_pred * c.n_gt)
        throw std::invalid_argument("solve_assignment: malformed cost matrix");
    if (c.n_pred < c.n_gt)
        throw std::invalid_argument("solve_assignment: more ground truths than predictions");
    for (double e : c.entries)
        if (!std::isfinite(e)) throw std::invalid_argument("solve_assignment: non-finite cost entry");

    MatchResult res;
    if (c.n_gt == 0) {
        res.unmatched_preds.resize(c.n_pred);
        for (int p = 0; p < c.n_pred; ++p) res.unmatched_preds[p] = p;
        return res;
    }

    // Square the problem with zero-cost filler rows so every column ends up
    // matched. With all columns used, a perfect matching of tight edges
    // (reduced cost ~ 0) always has the optimal total, which makes tie
    // detection below exact instead of merely sufficient.
    const int m = c.n_gt;
    const int N = c.n_pred;
    std::vector<double> sq(size_t(N) * N, 0.0);
    for (int g = 0; g < m; ++g)
        for (int p = 0; p < N; ++p) sq[size_t(g) * N + p] = c.at(p, g);
    auto sol = jv_solve(N, N, [&](int i, int j) { return sq[size_t(i) * N + j]; });

    double scale = 1.0;
    for (double e : c.entries) scale = std::max(scale, std::abs(e));
    const double tol = 1e-9 * scale;
    const auto reduced = [&](int i, int j) {
        return sq[size_t(i) * N + j] - sol.u[i + 1] - sol.v[j + 1];
    };
    double total = 0.0;
    for (int g = 0; g < m; ++g) total += c.at(sol.pred_for_gt[g], g);

    // Every optimal assignment consists of tight edges only, so a second
    // optimum that moves a gt exists exactly when the tight subgraph has an
    // alternating cycle through a gt row. Walk columns: the column matched
    // to row i points at every other tight column of row i; a directed
    // cycle is then an alternating cycle, and it reassigns a gt when some
    // node on it is matched to a gt row (filler-only cycles merely permute
    // which preds stay unmatched). Tight non-assigned edges without such a
    // cycle are common and harmless, so this must not over-trigger: the
    // refinement below costs a full re-solve per (gt, candidate) pair.
    std::vector<std::vector<int>> adj(N);
    std::vector<char> src_is_gt(N, 0);
    for (int i = 0; i < N; ++i) {
        const int q = sol.pred_for_gt[i];
        src_is_gt[q] = (i < m);
        for (int j = 0; j < N; ++j)
            if (j != q && reduced(i, j) <= tol) adj[q].push_back(j);
    }
    const std::vector<int> comp = scc_ids(adj);
    bool ambiguous = false;
    for (int q = 0; q < N && !ambiguous; ++q) {
        if (!src_is_gt[q]) continue;
        for (int j : adj[q]) {
            if (comp[j] == comp[q]) {
                ambiguous = true;
                break;
            }
        }
    }

    std::vector<int> pred_for_gt(sol.pred_for_gt.begin(), sol.pred_for_gt.begin() + m);
    if (ambiguous) {
        // Resolve to the lexicographically smallest pair list (by gt order)
        // by pinning gts in order and re-solving the remainder. Only tight
        // edges can appear in an optimal assignment, so others are skipped.
        std::vector<int> fixed(m, -1);
        std::vector<char> taken(N, 0);
        for (int g = 0; g < m; ++g) {
            for (int p = 0; p < N; ++p) {
                if (taken[p] || reduced(g, p) > tol) continue;
                fixed[g] = p;
                if (solve_with_fixed(c, fixed) <= total + tol) {
                    taken[p] = 1;
                    break;
                }
                fixed[g] = -1;
            }
            if (fixed[g] < 0) throw std::logic_error("solve_assignment: tie refinement failed");
        }
        pred_for_gt = fixed;
    }

    std::vector<char> used(c.n_pred, 0);
    res.total_cost = 0.0;
    for (int g = 0; g < c.n_gt; ++g) {
        res.pairs.emplace_back(pred_for_gt[g], g);
        used[pred_for_gt[g]] = 1;
        res.total_cost += c.at(pred_for_gt[g], g);
    }
    for (int p = 0; p < c.n_pred; ++p)
        if (!used[p]) res.unmatched_preds.push_back(p);
    return res;
}

CostMatrix match_cost(std::span<const double> pred_logits,
                      std::span<const geom::BoxCCWH> pred_boxes,
                      std::span<const geom::BoxCCWH> gt_boxes,
                      const CostWeights& w) {
    if (pred_logits.size() != pred_boxes.size())
        throw std::invalid_argument("match_cost: logits/boxes size mismatch");
    if (w.cls < 0 || w.l1 < 0 || w.giou < 0)
        throw std::invalid_argument("match_cost: weights must be non-negative");
    const int np = int(pred_boxes.size());
    const int ng = int(gt_boxes.size());
    CostMatrix c(np, ng);
    for (int i = 0; i < np; ++i) {
        const double cls_term = w.cls * (1.0 - sigmoid(pred_logits[i]));
        const geom::BoxXYXY pi = geom::to_xyxy(pred_boxes[i]);
        for (int j = 0; j < ng; ++j) {
            const geom::BoxCCWH& g = gt_boxes[j];
            double l1 = std::abs(pred_boxes[i].cx - g.cx) + std::abs(pred_boxes[i].cy - g.cy) +
                        std::abs(pred_boxes[i].w - g.w) + std::abs(pred_boxes[i].h - g.h);
            double gi = geom::giou(pi, geom::to_xyxy(g));
            c.at(i, j) = cls_term + w.l1 * l1 + w.giou * (1.0 - gi);
        }
    }
    return c;
}

}  // namespace xalign::assign
