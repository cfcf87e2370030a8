#include "xalign/losses.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <stdexcept>

namespace xalign::loss {
namespace {

// Stable -log(sigmoid-style) BCE term: max(z,0) - z*y + log1p(exp(-|z|)).
double bce_term(double z, double y) {
    return std::max(z, 0.0) - z * y + std::log1p(std::exp(-std::abs(z)));
}

// Multi-positive InfoNCE over one score vector. Adds the gradient
// contribution (scaled by `scale`) into `grad_out`. Returns the loss.
double infonce_vector(std::span<const double> scores, std::span<const uint8_t> pos,
                      double scale, std::span<double> grad_out) {
    const size_t n = scores.size();
    double mx = scores[0];
    for (size_t j = 1; j < n; ++j) mx = std::max(mx, scores[j]);
    double z_all = 0.0, z_pos = 0.0;
    for (size_t j = 0; j < n; ++j) {
        const double e = std::exp(scores[j] - mx);
        z_all += e;
        if (pos[j]) z_pos += e;
    }
    const double s = z_pos / z_all;  // sum of positive softmax probabilities
    for (size_t j = 0; j < n; ++j) {
        const double q = std::exp(scores[j] - mx) / z_all;
        const double g = pos[j] ? q - q / s : q;
        grad_out[j] += scale * g;
    }
    return -std::log(s);
}

// Shared row/column InfoNCE kernel over an explicit matrix + mask.
LossValue infonce_matrix(int n_inst, int n_text, std::span<const double> scores,
                         const PositiveMask& pairing) {
    if (pairing.n_inst != n_inst || pairing.n_text != n_text)
        throw std::invalid_argument("infonce_rowcol: mask dims do not match scores");
    std::vector<int> valid_rows, valid_cols;
    for (int i = 0; i < n_inst; ++i)
        for (int j = 0; j < n_text; ++j)
            if (pairing.at(i, j)) {
                if (valid_rows.empty() || valid_rows.back() != i) valid_rows.push_back(i);
                break;
            }
    for (int j = 0; j < n_text; ++j)
        for (int i = 0; i < n_inst; ++i)
            if (pairing.at(i, j)) {
                valid_cols.push_back(j);
                break;
            }
    if (valid_rows.empty() && valid_cols.empty())
        throw std::invalid_argument("infonce_rowcol: mask has no positives");

    LossValue out;
    out.grads.assign(size_t(n_inst) * n_text, 0.0);
    const double row_scale = 1.0 / (2.0 * double(valid_rows.size()));
    const double col_scale = 1.0 / (2.0 * double(valid_cols.size()));

    double row_sum = 0.0;
    for (int i : valid_rows)
        row_sum += infonce_vector(scores.subspan(size_t(i) * n_text, size_t(n_text)),
                                  std::span<const uint8_t>(pairing.mask)
                                      .subspan(size_t(i) * n_text, size_t(n_text)),
                                  row_scale,
                                  std::span<double>(out.grads)
                                      .subspan(size_t(i) * n_text, size_t(n_text)));

    std::vector<double> col_scores(static_cast<size_t>(n_inst));
    std::vector<uint8_t> col_pos(static_cast<size_t>(n_inst));
    std::vector<double> col_grad(static_cast<size_t>(n_inst));
    double col_sum = 0.0;
    for (int j : valid_cols) {
        for (int i = 0; i < n_inst; ++i) {
            col_scores[size_t(i)] = scores[size_t(i) * n_text + j];
            col_pos[size_t(i)] = pairing.at(i, j) ? 1 : 0;
            col_grad[size_t(i)] = 0.0;
        }
        col_sum += infonce_vector(col_scores, col_pos, col_scale, col_grad);
        for (int i = 0; i < n_inst; ++i)
            out.grads[size_t(i) * n_text + j] += col_grad[size_t(i)];
    }
    out.value = (row_sum / double(valid_rows.size()) + col_sum / double(valid_cols.size())) / 2.0;
    return out;
}

// Chain a d/dscores gradient of the matrix M(i,j) = a_i . b_j / tau back to
// the two embedding lists, appending [d/da; d/db] into `out`.
LossValue embed_contrastive(std::span<const Vec> a, std::span<const Vec> b,
                            const PositiveMask& pairing, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("contrastive: temperature must be positive");
    const int na = int(a.size()), nb = int(b.size());
    if (na == 0 || nb == 0) throw std::invalid_argument("contrastive: empty embedding list");
    const size_t d = a[0].size();
    for (const Vec& v : a)
        if (v.size() != d) throw std::invalid_argument("contrastive: ragged embeddings");
    for (const Vec& v : b)
        if (v.size() != d) throw std::invalid_argument("contrastive: dim mismatch");

    std::vector<double> scores(size_t(na) * nb);
    for (int i = 0; i < na; ++i)
        for (int j = 0; j < nb; ++j)
            scores[size_t(i) * nb + j] = dot(a[size_t(i)], b[size_t(j)]) / tau;

    LossValue s = infonce_matrix(na, nb, scores, pairing);
    LossValue out;
    out.value = s.value;
    out.grads.assign((size_t(na) + nb) * d, 0.0);
    for (int i = 0; i < na; ++i)
        for (int j = 0; j < nb; ++j) {
            const double g = s.grads[size_t(i) * nb + j] / tau;
            if (g == 0.0) continue;
            for (size_t k = 0; k < d; ++k) {
                out.grads[size_t(i) * d + k] += g * b[size_t(j)][k];
                out.grads[(size_t(na) + size_t(j)) * d + k] += g * a[size_t(i)][k];
            }
        }
    return out;
}

}  // namespace

LossValue bce_objectness(std::span<const double> logits, std::span<const double> labels) {
    if (logits.size() != labels.size() || logits.empty())
        throw std::invalid_argument("bce_objectness: length mismatch or empty");
    const double n = double(logits.size());
    LossValue out;
    out.grads.resize(logits.size());
    for (size_t i = 0; i < logits.size(); ++i) {
        out.value += bce_term(logits[i], labels[i]) / n;
        out.grads[i] = (sigmoid(logits[i]) - labels[i]) / n;
    }
    return out;
}

LossValue l1_box(const geom::BoxCCWH& pred, const geom::BoxCCWH& gt) {
    const double p[4] = {pred.cx, pred.cy, pred.w, pred.h};
    const double g[4] = {gt.cx, gt.cy, gt.w, gt.h};
    LossValue out;
    out.grads.resize(4);
    for (int k = 0; k < 4; ++k) {
        out.value += std::abs(p[k] - g[k]);
        out.grads[k] = p[k] > g[k] ? 1.0 : (p[k] < g[k] ? -1.0 : 0.0);
    }
    return out;
}

LossValue giou_loss(const geom::BoxCCWH& pred, const geom::BoxCCWH& gt) {
    const geom::BoxXYXY a = geom::to_xyxy(pred);
    const geom::BoxXYXY b = geom::to_xyxy(gt);
    if (!a.valid() || !b.valid()) throw std::invalid_argument("giou_loss: invalid box");

    // Derivatives w.r.t. pred corners (ax1, ay1, ax2, ay2), then chained to
    // (cx, cy, w, h). Ties in max/min credit the pred argument (one-sided).
    const double wa = a.x2 - a.x1, ha = a.y2 - a.y1;
    const double area_a = wa * ha;
    const double area_b = (b.x2 - b.x1) * (b.y2 - b.y1);

    const double ix1 = std::max(a.x1, b.x1), iy1 = std::max(a.y1, b.y1);
    const double ix2 = std::min(a.x2, b.x2), iy2 = std::min(a.y2, b.y2);
    const double iw = std::max(0.0, ix2 - ix1), ih = std::max(0.0, iy2 - iy1);
    const double inter = iw * ih;
    const double uni = area_a + area_b - inter;

    const double cx1 = std::min(a.x1, b.x1), cy1 = std::min(a.y1, b.y1);
    const double cx2 = std::max(a.x2, b.x2), cy2 = std::max(a.y2, b.y2);
    const double cw = cx2 - cx1, ch = cy2 - cy1;
    const double enc = cw * ch;

    LossValue out;
    out.grads.assign(4, 0.0);
    if (uni <= 0.0 || enc <= 0.0) {
        // Degenerate convention: giou = 0, zero subgradient.
        out.value = 1.0;
        return out;
    }
    // giou = inter/uni - 1 + uni/enc
    out.value = 1.0 - (inter / uni - 1.0 + uni / enc);

    double dA[4] = {-ha, -wa, ha, wa};  // d area_a / d (ax1, ay1, ax2, ay2)
    double dI[4] = {0, 0, 0, 0};
    if (iw > 0.0 && ih > 0.0) {
        if (a.x1 >= b.x1) dI[0] = -ih;
        if (a.y1 >= b.y1) dI[1] = -iw;
        if (a.x2 <= b.x2) dI[2] = ih;
        if (a.y2 <= b.y2) dI[3] = iw;
    }
    double dC[4] = {0, 0, 0, 0};
    if (a.x1 <= b.x1) dC[0] = -ch;
    if (a.y1 <= b.y1) dC[1] = -cw;
    if (a.x2 >= b.x2) dC[2] = ch;
    if (a.y2 >= b.y2) dC[3] = cw;

    double d_corner[4];
    for (int k = 0; k < 4; ++k) {
        const double dU = dA[k] - dI[k];
        const double d_giou = (dI[k] * uni - inter * dU) / (uni * uni) +
                              (dU * enc - uni * dC[k]) / (enc * enc);
        d_corner[k] = -d_giou;
    }
    // Chain xyxy -> ccwh: x1 = cx - w/2, x2 = cx + w/2 (same for y).
    out.grads[0] = d_corner[0] + d_corner[2];
    out.grads[1] = d_corner[1] + d_corner[3];
    out.grads[2] = 0.5 * (d_corner[2] - d_corner[0]);
    out.grads[3] = 0.5 * (d_corner[3] - d_corner[1]);
    return out;
}

LossValue infonce_rowcol(const align::SimilarityMatrix& sim, const PositiveMask& pairing) {
    return infonce_matrix(sim.n_inst, sim.n_text, sim.scores, pairing);
}

LossValue sentence_contrastive(std::span<const Vec> inst_embeds,
                               std::span<const Vec> sentence_embeds,
                               const PositiveMask& pairing, double tau) {
    return embed_contrastive(inst_embeds, sentence_embeds, pairing, tau);
}

LossValue caption_contrastive(std::span<const Vec> image_embeds,
                              std::span<const Vec> caption_embeds, double tau) {
    if (image_embeds.size() != caption_embeds.size())
        throw std::invalid_argument("caption_contrastive: batch size mismatch");
    const int b = int(image_embeds.size());
    if (b < 2)
        std::cerr << "[warn] caption_contrastive: batch size " << b
                  << " has no negatives; loss is degenerate\n";
    PositiveMask diag(b, b);
    for (int i = 0; i < b; ++i) diag.set(i, i, true);
    return embed_contrastive(image_embeds, caption_embeds, diag, tau);
}

LossValue total_loss(const std::map<std::string, LossValue>& parts,
                     const std::map<std::string, double>& weights) {
    if (parts.empty()) throw std::invalid_argument("total_loss: no parts");
    for (const auto& [name, w] : weights) {
        if (w < 0.0) throw std::invalid_argument("total_loss: negative weight for " + name);
        if (!parts.count(name)) throw std::invalid_argument("total_loss: unknown part " + name);
    }
    size_t n = 0;
    for (const auto& [name, part] : parts) {
        if (!weights.count(name)) throw std::invalid_argument("total_loss: no weight for " + name);
        if (n == 0) n = part.grads.size();
        if (part.grads.size() != n)
            throw std::invalid_argument("total_loss: part gradient lengths differ");
    }
    LossValue out;
    out.grads.assign(n, 0.0);
    for (const auto& [name, part] : parts) {
        const double w = weights.at(name);
        out.value += w * part.value;
        axpy(w, part.grads, out.grads);
    }
    return out;
}

double grad_check(const std::function<LossValue(const Vec&)>& f, const Vec& params,
                  double h, uint64_t seed, int max_coords) {
    if (!(h > 0.0)) throw std::invalid_argument("grad_check: h must be positive");
    const LossValue at = f(params);
    if (!std::isfinite(at.value) || !all_finite(at.grads))
        throw std::runtime_error("grad_check: non-finite loss or gradient at base point");
    if (at.grads.size() != params.size())
        throw std::invalid_argument("grad_check: gradient length mismatch");

    std::vector<size_t> coords(params.size());
    for (size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    if (max_coords > 0 && size_t(max_coords) < coords.size()) {
        Rng rng(seed);
        rng.shuffle(coords);
        coords.resize(static_cast<size_t>(max_coords));
    }

    double worst = 0.0;
    Vec probe = params;
    for (size_t k : coords) {
        const double orig = probe[k];
        probe[k] = orig + h;
        const double up = f(probe).value;
        probe[k] = orig - h;
        const double dn = f(probe).value;
        probe[k] = orig;
        if (!std::isfinite(up) || !std::isfinite(dn))
            throw std::runtime_error("grad_check: non-finite loss at probe point");
        const double numeric = (up - dn) / (2.0 * h);
        const double analytic = at.grads[k];
        const double rel =
            std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
        worst = std::max(worst, rel);
    }
    return worst;
}

}  // namespace xalign::loss
