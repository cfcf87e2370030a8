#pragma once

#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "xalign/alignment.hpp"
#include "xalign/common.hpp"
#include "xalign/geometry.hpp"

namespace xalign::loss {

// A scalar loss plus its gradient. The meaning of `grads` depends on the
// producing op and is documented there (e.g. d/dlogits, d/dscores row-major,
// d/dembeddings concatenated in declared order).
struct LossValue {
    double value = 0.0;
    Vec grads;
};

// Boolean instance x text mask marking aligned pairs. Rows/columns with no
// positives are skipped by the contrastive losses.
struct PositiveMask {
    int n_inst = 0;
    int n_text = 0;
    std::vector<uint8_t> mask;  // row-major

    PositiveMask() = default;
    PositiveMask(int ni, int nt) : n_inst(ni), n_text(nt), mask(size_t(ni) * nt, 0) {}

    void set(int i, int j, bool v) { mask[size_t(i) * n_text + j] = v ? 1 : 0; }
    bool at(int i, int j) const { return mask[size_t(i) * n_text + j] != 0; }
};

// Mean binary cross-entropy with logits; grads = (sigmoid(z) - y)/n.
LossValue bce_objectness(std::span<const double> logits, std::span<const double> labels);

// Sum of |pred_k - gt_k| over the 4 center-form coords; grads = sign per coord.
LossValue l1_box(const geom::BoxCCWH& pred, const geom::BoxCCWH& gt);

// 1 - giou(pred, gt); grads w.r.t. pred (cx, cy, w, h). At exactly-touching
// configurations the one-sided subgradient is used (max/min prefer the pred
// argument at ties; the hinge at zero intersection takes the zero side).
LossValue giou_loss(const geom::BoxCCWH& pred, const geom::BoxCCWH& gt);

// Multi-positive InfoNCE over rows and columns:
//   loss_row(i) = -log( sum_{j in P_i} softmax_j(scores(i,:)) )
// total = (mean over rows with positives + mean over cols with positives)/2.
// grads are d/dscores, row-major. Throws if the mask has no positives at all.
LossValue infonce_rowcol(const align::SimilarityMatrix& sim, const PositiveMask& pairing);

// infonce_rowcol on the instance x sentence matrix built internally from the
// embeddings at temperature tau. grads = [d/dinst_embeds; d/dsentence_embeds],
// each block row-major in argument order.
LossValue sentence_contrastive(std::span<const Vec> inst_embeds,
                               std::span<const Vec> sentence_embeds,
                               const PositiveMask& pairing, double tau);

// Symmetric B x B InfoNCE with diagonal positives (image->caption +
// caption->image)/2. B < 2 is degenerate (no negatives): warns, returns the
// defined zero loss. grads = [d/dimage_embeds; d/dcaption_embeds].
LossValue caption_contrastive(std::span<const Vec> image_embeds,
                              std::span<const Vec> caption_embeds, double tau);

// Weighted sum of named parts; all part grads must share one length. Every
// weight must name an existing part and every part must carry a weight.
LossValue total_loss(const std::map<std::string, LossValue>& parts,
                     const std::map<std::string, double>& weights);

// Central-difference check: returns max over probed coordinates of
// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
// Probes all coordinates when max_coords <= 0 or exceeds the parameter count,
// otherwise a seed-deterministic sample of max_coords distinct coordinates.
// Throws on non-finite loss at any probe point.
double grad_check(const std::function<LossValue(const Vec&)>& f, const Vec& params,
                  double h, uint64_t seed, int max_coords = 0);

}  // namespace xalign::loss
