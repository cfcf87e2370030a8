#include "xalign/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "xalign/binio.hpp"

namespace xalign::train {

// ---------------------------------------------------------------------------
// Layout / Model
// ---------------------------------------------------------------------------

Layout::Layout(const ModelDims& d) : dims(d) {
    if (dims.vocab <= 0) dims.vocab = world::Vocab::size();
    if (dims.d_raw <= 0 || dims.d_joint <= 0 || dims.d_tok <= 0)
        throw std::invalid_argument("Layout: dimensions must be positive");
    const size_t dr = size_t(dims.d_raw), dj = size_t(dims.d_joint), dt = size_t(dims.d_tok);
    const size_t v = size_t(dims.vocab);
    fw = 0;
    fb = fw + dj * dr;
    gw = fb + dj;
    gb = gw + dj * dt;
    tok = gb + dj;
    ow = tok + v * dt;
    ob = ow + dr;
    bw = ob + 1;
    bb = bw + 4 * dr;
    total = bb + 4;
}

Model::Model(const ModelDims& dims, std::span<const double> flat) : lay_(dims), flat_(flat) {
    if (flat.size() != lay_.total)
        throw std::invalid_argument("Model: parameter vector length mismatch");
}

double Model::obj_logit(const Vec& x) const {
    const int dr = lay_.dims.d_raw;
    if (int(x.size()) != dr) throw std::invalid_argument("obj_logit: feature dim mismatch");
    double z = flat_[lay_.ob];
    for (int c = 0; c < dr; ++c) z += flat_[lay_.ow + size_t(c)] * x[size_t(c)];
    return z;
}

std::array<double, 4> Model::box_z(const Vec& x) const {
    const int dr = lay_.dims.d_raw;
    if (int(x.size()) != dr) throw std::invalid_argument("box_z: feature dim mismatch");
    std::array<double, 4> z;
    for (int k = 0; k < 4; ++k) {
        double s = flat_[lay_.bb + size_t(k)];
        const size_t row = lay_.bw + size_t(k) * size_t(dr);
        for (int c = 0; c < dr; ++c) s += flat_[row + size_t(c)] * x[size_t(c)];
        z[size_t(k)] = s;
    }
    return z;
}

namespace {

Vec project_linear(std::span<const double> w, std::span<const double> b, int d_out, int d_in,
                   const Vec& x, double* pre_norm, const char* what) {
    if (int(x.size()) != d_in) throw std::invalid_argument(std::string(what) + ": dim mismatch");
    Vec pre(static_cast<size_t>(d_out));
    for (int r = 0; r < d_out; ++r) {
        double s = b[size_t(r)];
        const size_t row = size_t(r) * size_t(d_in);
        for (int c = 0; c < d_in; ++c) s += w[row + size_t(c)] * x[size_t(c)];
        pre[size_t(r)] = s;
    }
    const double n = norm2(pre);
    if (!(n > 0.0) || !std::isfinite(n))
        throw std::runtime_error(std::string(what) + ": degenerate embedding (zero norm)");
    if (pre_norm) *pre_norm = n;
    for (double& v : pre) v /= n;
    return pre;
}

}  // namespace

Vec Model::project_f(const Vec& x, double* pre_norm) const {
    return project_linear(flat_.subspan(lay_.fw), flat_.subspan(lay_.fb), lay_.dims.d_joint,
                          lay_.dims.d_raw, x, pre_norm, "project_f");
}

Vec Model::project_g(const Vec& e, double* pre_norm) const {
    return project_linear(flat_.subspan(lay_.gw), flat_.subspan(lay_.gb), lay_.dims.d_joint,
                          lay_.dims.d_tok, e, pre_norm, "project_g");
}

std::span<const double> Model::token_row(int id) const {
    if (id < 0 || id >= lay_.dims.vocab)
        throw std::invalid_argument("token_row: id out of vocabulary");
    return flat_.subspan(lay_.tok + size_t(id) * size_t(lay_.dims.d_tok),
                         size_t(lay_.dims.d_tok));
}

Mat Model::token_table() const {
    Mat t(lay_.dims.vocab, lay_.dims.d_tok);
    std::copy_n(flat_.begin() + long(lay_.tok), t.data.size(), t.data.begin());
    return t;
}

Vec Model::text_embed(std::span<const int> content_ids) const {
    if (content_ids.empty()) throw std::invalid_argument("text_embed: empty token list");
    const int dt = lay_.dims.d_tok;
    Vec mean(size_t(dt), 0.0);
    for (int id : content_ids) {
        const auto row = token_row(id);
        for (int t = 0; t < dt; ++t) mean[size_t(t)] += row[size_t(t)];
    }
    for (double& v : mean) v /= double(content_ids.size());
    return project_g(align::normalize(mean));
}

// ---------------------------------------------------------------------------
// Config / state
// ---------------------------------------------------------------------------

void TrainConfig::validate() const {
    if (!(lr >= 0.0)) throw std::invalid_argument("train: lr must be >= 0");
    if (momentum < 0.0 || momentum >= 1.0)
        throw std::invalid_argument("train: momentum must be in [0,1)");
    if (ema_decay < 0.0 || ema_decay > 1.0)
        throw std::invalid_argument("train: ema_decay must be in [0,1]");
    if (epochs < 0 || batch_size < 1)
        throw std::invalid_argument("train: need epochs >= 0 and batch_size >= 1");
    if (!(tau > 0.0)) throw std::invalid_argument("train: tau must be positive");
    for (double w : {w_bce, w_l1, w_giou, w_phrase, w_sentence, w_caption})
        if (w < 0.0) throw std::invalid_argument("train: negative loss weight");
}

TrainState init_state(ModelDims dims, uint64_t seed) {
    if (dims.vocab <= 0) dims.vocab = world::Vocab::size();
    const Layout lay(dims);
    TrainState st;
    st.dims = lay.dims;
    st.seed = seed;
    st.params.assign(lay.total, 0.0);
    st.momentum.assign(lay.total, 0.0);
    Rng rng(mix_seed(seed, 0x1A17u));
    const double br = 1.0 / std::sqrt(double(dims.d_raw));
    const double bt = 1.0 / std::sqrt(double(dims.d_tok));
    for (size_t i = lay.fw; i < lay.fb; ++i) st.params[i] = rng.uniform(-br, br);
    for (size_t i = lay.gw; i < lay.gb; ++i) st.params[i] = rng.uniform(-bt, bt);
    for (size_t i = lay.tok; i < lay.ow; ++i) st.params[i] = rng.uniform(-bt, bt);
    for (size_t i = lay.ow; i < lay.ob; ++i) st.params[i] = rng.uniform(-br, br);
    if (dims.d_raw >= world::kMinRawDims) {
        // Proposal-refinement init: the raw features carry scaled logit-space
        // geometry at columns [18,22), so weight 4 on column 18+j makes the
        // box head reproduce the featurizer's box proposal at step 0. This
        // keeps Hungarian costs discriminative from the first step; a random
        // init leaves all heads predicting the same box, and the resulting
        // assignment churn stalls training for a long symmetric phase.
        for (int j = 0; j < 4; ++j)
            st.params[lay.bw + size_t(j) * size_t(dims.d_raw) + size_t(18 + j)] = 4.0;
    } else {
        for (size_t i = lay.bw; i < lay.bb; ++i) st.params[i] = rng.uniform(-br, br);
    }
    st.ema = st.params;
    return st;
}

geom::BoxXYXY pred_box(const Model& m, const Vec& x) {
    const std::array<double, 4> z = m.box_z(x);
    const geom::BoxCCWH b{sigmoid(z[0]), sigmoid(z[1]), sigmoid(z[2]), sigmoid(z[3])};
    return geom::clamp_unit(geom::to_xyxy(b));
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

double SceneForward::phrase_value() const {
    if (phrase_terms == 0) return 0.0;
    double s = caption.used ? caption.loss : 0.0;
    for (const QueryCache& q : queries)
        if (q.used) s += q.phrase;
    return s / double(phrase_terms);
}

double SceneForward::sentence_value() const {
    if (sentence_terms == 0) return 0.0;
    double s = 0.0;
    for (const QueryCache& q : queries)
        if (q.used) s += q.sentence;
    return s / double(sentence_terms);
}

namespace {

bool is_content_kind(int token_id) {
    const world::WordKind k = world::Vocab::kind(token_id);
    return k == world::WordKind::Spatial || k == world::WordKind::Size ||
           k == world::WordKind::Color || k == world::WordKind::Shape;
}

ColumnCache make_token_col(const Model& m, int id) {
    ColumnCache c;
    const auto row = m.token_row(id);
    c.input.assign(row.begin(), row.end());
    c.v = m.project_g(c.input, &c.pre_norm);
    c.src_ids = {id};
    c.dv.assign(size_t(m.dims().d_joint), 0.0);
    return c;
}

ColumnCache make_pooled_col(const Model& m, std::span<const int> ids) {
    ColumnCache c;
    const int dt = m.dims().d_tok;
    Vec mean(size_t(dt), 0.0);
    for (int id : ids) {
        const auto row = m.token_row(id);
        for (int t = 0; t < dt; ++t) mean[size_t(t)] += row[size_t(t)];
    }
    for (double& v : mean) v /= double(ids.size());
    c.pool_norm = norm2(mean);
    if (!(c.pool_norm > 0.0))
        throw std::runtime_error("forward_scene: zero-mean pooled span");
    c.input = mean;
    for (double& v : c.input) v /= c.pool_norm;
    c.v = m.project_g(c.input, &c.pre_norm);
    c.src_ids.assign(ids.begin(), ids.end());
    c.dv.assign(size_t(m.dims().d_joint), 0.0);
    return c;
}

}  // namespace

SceneForward forward_scene(const Model& m, const world::Scene& s,
                           const world::Featurizer& feat, const TrainConfig& cfg,
                           const assign::MatchResult* fixed_match) {
    SceneForward f;
    f.scene = &s;
    f.tau = cfg.tau;
    auto hyps = feat.featurize_scene(s);
    const int np = int(hyps.size());
    const int ng = int(s.objects.size());
    const int dj = m.dims().d_joint;

    f.insts.resize(static_cast<size_t>(np));
    std::vector<double> logits(static_cast<size_t>(np));
    std::vector<geom::BoxCCWH> boxes(static_cast<size_t>(np));
    for (int i = 0; i < np; ++i) {
        InstanceCache& ic = f.insts[size_t(i)];
        ic.x = std::move(hyps[size_t(i)].embed);
        ic.object_index = hyps[size_t(i)].object_index;
        ic.logit = m.obj_logit(ic.x);
        ic.z = m.box_z(ic.x);
        for (int k = 0; k < 4; ++k) ic.box[size_t(k)] = sigmoid(ic.z[size_t(k)]);
        ic.u = m.project_f(ic.x, &ic.pre_norm);
        logits[size_t(i)] = ic.logit;
        boxes[size_t(i)] = {ic.box[0], ic.box[1], ic.box[2], ic.box[3]};
    }

    std::vector<geom::BoxCCWH> gts;
    gts.reserve(static_cast<size_t>(ng));
    for (const world::SceneObject& o : s.objects) gts.push_back(geom::to_ccwh(o.box));
    if (fixed_match) f.match = *fixed_match;
    else f.match = assign::solve_assignment(assign::match_cost(logits, boxes, gts, cfg.match_weights));
    f.pred_of_gt.assign(size_t(ng), -1);
    for (const auto& [p, g] : f.match.pairs) f.pred_of_gt[size_t(g)] = p;

    // Detection losses.
    std::vector<double> labels(size_t(np), 0.0);
    for (const auto& [p, g] : f.match.pairs) labels[size_t(p)] = 1.0;
    loss::LossValue bce = loss::bce_objectness(logits, labels);
    f.bce = bce.value;
    f.dlogits = std::move(bce.grads);
    f.dbox_l1.assign(size_t(np), {0, 0, 0, 0});
    f.dbox_giou.assign(size_t(np), {0, 0, 0, 0});
    const int nm = int(f.match.pairs.size());
    for (const auto& [p, g] : f.match.pairs) {
        const loss::LossValue l1 = loss::l1_box(boxes[size_t(p)], gts[size_t(g)]);
        const loss::LossValue gi = loss::giou_loss(boxes[size_t(p)], gts[size_t(g)]);
        f.l1 += l1.value / nm;
        f.giou += gi.value / nm;
        for (int k = 0; k < 4; ++k) {
            f.dbox_l1[size_t(p)][size_t(k)] += l1.grads[size_t(k)] / nm;
            f.dbox_giou[size_t(p)][size_t(k)] += gi.grads[size_t(k)] / nm;
        }
    }

    // Per-query alignment losses (token-level + pooled-sentence level).
    for (const world::SceneQuery& q : s.queries) {
        QueryCache qc;
        const bool skip = q.targets.empty() || (q.has_score && !q.accepted);
        if (!skip) {
            const std::vector<int>& ids = q.text.token_ids;
            const int nt = int(ids.size());
            for (int p = 1; p < nt - 1; ++p) qc.cols.push_back(make_token_col(m, ids[size_t(p)]));
            const int nc = int(qc.cols.size());
            loss::PositiveMask mask(np, nc);
            int n_pos = 0;
            for (int t : q.targets) {
                const int pred = f.pred_of_gt[size_t(t)];
                for (int j = 0; j < nc; ++j)
                    if (is_content_kind(ids[size_t(1 + j)])) {
                        mask.set(pred, j, true);
                        ++n_pos;
                    }
            }
            if (n_pos > 0) {
                align::SimilarityMatrix sim(np, nc, cfg.tau);
                for (int i = 0; i < np; ++i)
                    for (int j = 0; j < nc; ++j)
                        sim.at(i, j) = dot(f.insts[size_t(i)].u, qc.cols[size_t(j)].v) / cfg.tau;
                loss::LossValue lv = loss::infonce_rowcol(sim, mask);
                qc.phrase = lv.value;
                qc.dscores = std::move(lv.grads);

                qc.sent = make_pooled_col(
                    m, std::span<const int>(ids).subspan(1, size_t(nt - 2)));
                align::SimilarityMatrix ssim(np, 1, cfg.tau);
                for (int i = 0; i < np; ++i)
                    ssim.at(i, 0) = dot(f.insts[size_t(i)].u, qc.sent.v) / cfg.tau;
                loss::PositiveMask smask(np, 1);
                for (int t : q.targets) smask.set(f.pred_of_gt[size_t(t)], 0, true);
                loss::LossValue sv = loss::infonce_rowcol(ssim, smask);
                qc.sentence = sv.value;
                qc.dsent_scores = std::move(sv.grads);

                qc.used = true;
                ++f.phrase_terms;
                ++f.sentence_terms;
            }
        }
        f.queries.push_back(std::move(qc));
    }

    // Caption token matrix: phrase-level supervision from caption spans.
    const std::vector<int>& cap_ids = s.caption.token_ids;
    const int ct = int(cap_ids.size());
    if (!s.caption.spans.empty() && ct > 2) {
        for (int p = 1; p < ct - 1; ++p)
            f.caption.cols.push_back(make_token_col(m, cap_ids[size_t(p)]));
        const int nc = int(f.caption.cols.size());
        loss::PositiveMask mask(np, nc);
        int n_pos = 0;
        for (size_t si = 0; si < s.caption.spans.size(); ++si) {
            const align::TokenSpan& sp = s.caption.spans[si];
            const int pred = f.pred_of_gt[size_t(s.caption_span_targets[si])];
            for (int p = sp.start; p < sp.end; ++p)
                if (is_content_kind(cap_ids[size_t(p)])) {
                    mask.set(pred, p - 1, true);
                    ++n_pos;
                }
        }
        if (n_pos > 0) {
            align::SimilarityMatrix sim(np, nc, cfg.tau);
            for (int i = 0; i < np; ++i)
                for (int j = 0; j < nc; ++j)
                    sim.at(i, j) = dot(f.insts[size_t(i)].u, f.caption.cols[size_t(j)].v) / cfg.tau;
            loss::LossValue lv = loss::infonce_rowcol(sim, mask);
            f.caption.loss = lv.value;
            f.caption.dscores = std::move(lv.grads);
            f.caption.used = true;
            ++f.phrase_terms;
        }
    }

    // Image embedding (mean of projected instance embeds) + pooled caption.
    Vec mean_u(size_t(dj), 0.0);
    for (const InstanceCache& ic : f.insts)
        for (int r = 0; r < dj; ++r) mean_u[size_t(r)] += ic.u[size_t(r)];
    for (double& v : mean_u) v /= double(np);
    f.img_mean_norm = norm2(mean_u);
    if (!(f.img_mean_norm > 0.0)) throw std::runtime_error("forward_scene: degenerate image embed");
    f.img = mean_u;
    for (double& v : f.img) v /= f.img_mean_norm;
    if (ct > 2)
        f.cap_col = make_pooled_col(m, std::span<const int>(cap_ids).subspan(1, size_t(ct - 2)));
    f.dimg.assign(size_t(dj), 0.0);
    return f;
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

PartGrads::PartGrads(size_t n)
    : bce(n, 0.0), l1(n, 0.0), giou(n, 0.0), phrase(n, 0.0), sentence(n, 0.0), caption(n, 0.0) {}

namespace {

// y = normalize(pre), given dL/dy and cached (y, ||pre||): dL/dpre.
Vec normalize_backward(const Vec& y, const Vec& dy, double pre_norm) {
    const double yd = dot(y, dy);
    Vec dpre(y.size());
    for (size_t r = 0; r < y.size(); ++r) dpre[r] = (dy[r] - y[r] * yd) / pre_norm;
    return dpre;
}

}  // namespace

void backward_scene(const Model& m, SceneForward& f, double scene_scale, PartGrads& pg) {
    const Layout& lay = m.layout();
    const int np = int(f.insts.size());
    const int dj = lay.dims.d_joint;
    const int dr = lay.dims.d_raw;
    const int dt = lay.dims.d_tok;
    const std::span<const double> flat = m.flat();

    // Detection heads.
    for (int i = 0; i < np; ++i) {
        const InstanceCache& ic = f.insts[size_t(i)];
        const double dlogit = f.dlogits[size_t(i)] * scene_scale;
        for (int c = 0; c < dr; ++c) pg.bce[lay.ow + size_t(c)] += dlogit * ic.x[size_t(c)];
        pg.bce[lay.ob] += dlogit;
        for (int k = 0; k < 4; ++k) {
            const double dsig = ic.box[size_t(k)] * (1.0 - ic.box[size_t(k)]);
            const double dz_l1 = f.dbox_l1[size_t(i)][size_t(k)] * scene_scale * dsig;
            const double dz_gi = f.dbox_giou[size_t(i)][size_t(k)] * scene_scale * dsig;
            if (dz_l1 == 0.0 && dz_gi == 0.0) continue;
            const size_t row = lay.bw + size_t(k) * size_t(dr);
            for (int c = 0; c < dr; ++c) {
                pg.l1[row + size_t(c)] += dz_l1 * ic.x[size_t(c)];
                pg.giou[row + size_t(c)] += dz_gi * ic.x[size_t(c)];
            }
            pg.l1[lay.bb + size_t(k)] += dz_l1;
            pg.giou[lay.bb + size_t(k)] += dz_gi;
        }
    }

    // Alignment parts. Accumulate d/du per part, and d/dv into column caches.
    Vec du_phrase(size_t(np) * size_t(dj), 0.0);
    Vec du_sentence(size_t(np) * size_t(dj), 0.0);
    Vec du_caption(size_t(np) * size_t(dj), 0.0);

    auto chain_matrix = [&](const Vec& dscores, std::vector<ColumnCache>& cols, Vec& du,
                            double scale) {
        const int nc = int(cols.size());
        for (int i = 0; i < np; ++i) {
            const Vec& u = f.insts[size_t(i)].u;
            for (int j = 0; j < nc; ++j) {
                const double g = dscores[size_t(i) * size_t(nc) + size_t(j)] * scale / f.tau;
                if (g == 0.0) continue;
                ColumnCache& col = cols[size_t(j)];
                for (int r = 0; r < dj; ++r) {
                    du[size_t(i) * size_t(dj) + size_t(r)] += g * col.v[size_t(r)];
                    col.dv[size_t(r)] += g * u[size_t(r)];
                }
            }
        }
    };

    const double phrase_scale = f.phrase_terms > 0 ? scene_scale / f.phrase_terms : 0.0;
    const double sent_scale = f.sentence_terms > 0 ? scene_scale / f.sentence_terms : 0.0;
    for (QueryCache& qc : f.queries) {
        if (!qc.used) continue;
        chain_matrix(qc.dscores, qc.cols, du_phrase, phrase_scale);
        std::vector<ColumnCache> sent_col(1);
        sent_col[0] = std::move(qc.sent);
        chain_matrix(qc.dsent_scores, sent_col, du_sentence, sent_scale);
        qc.sent = std::move(sent_col[0]);
    }
    if (f.caption.used) chain_matrix(f.caption.dscores, f.caption.cols, du_phrase, phrase_scale);

    // Image-embed chain for the batch caption loss (dimg set by the driver).
    {
        const double id_ = dot(f.img, f.dimg);
        if (id_ != 0.0 || norm2(f.dimg) != 0.0) {
            for (int r = 0; r < dj; ++r) {
                const double dmean = (f.dimg[size_t(r)] - f.img[size_t(r)] * id_) / f.img_mean_norm;
                const double per_inst = dmean / double(np);
                for (int i = 0; i < np; ++i)
                    du_caption[size_t(i) * size_t(dj) + size_t(r)] += per_inst;
            }
        }
    }

    // Backprop instance projections per part.
    auto backprop_instances = [&](const Vec& du, Vec& part) {
        for (int i = 0; i < np; ++i) {
            const InstanceCache& ic = f.insts[size_t(i)];
            Vec dy(du.begin() + long(size_t(i) * size_t(dj)),
                   du.begin() + long(size_t(i + 1) * size_t(dj)));
            bool any = false;
            for (double v : dy)
                if (v != 0.0) { any = true; break; }
            if (!any) continue;
            const Vec dpre = normalize_backward(ic.u, dy, ic.pre_norm);
            for (int r = 0; r < dj; ++r) {
                const size_t row = lay.fw + size_t(r) * size_t(dr);
                for (int c = 0; c < dr; ++c) part[row + size_t(c)] += dpre[size_t(r)] * ic.x[size_t(c)];
                part[lay.fb + size_t(r)] += dpre[size_t(r)];
            }
        }
    };
    backprop_instances(du_phrase, pg.phrase);
    backprop_instances(du_sentence, pg.sentence);
    backprop_instances(du_caption, pg.caption);

    // Backprop text columns into G and the token table.
    auto backprop_column = [&](ColumnCache& col, Vec& part, double extra_scale) {
        bool any = false;
        for (double v : col.dv)
            if (v != 0.0) { any = true; break; }
        if (!any) return;
        if (extra_scale != 1.0)
            for (double& v : col.dv) v *= extra_scale;
        const Vec dpre = normalize_backward(col.v, col.dv, col.pre_norm);
        Vec dinput(size_t(dt), 0.0);
        for (int r = 0; r < dj; ++r) {
            const size_t row = lay.gw + size_t(r) * size_t(dt);
            for (int t = 0; t < dt; ++t) {
                part[row + size_t(t)] += dpre[size_t(r)] * col.input[size_t(t)];
                dinput[size_t(t)] += flat[row + size_t(t)] * dpre[size_t(r)];
            }
            part[lay.gb + size_t(r)] += dpre[size_t(r)];
        }
        if (col.pool_norm > 0.0) {
            const double pd = dot(col.input, dinput);
            const double n_src = double(col.src_ids.size());
            for (int t = 0; t < dt; ++t) {
                const double dmean =
                    (dinput[size_t(t)] - col.input[size_t(t)] * pd) / col.pool_norm;
                for (int id : col.src_ids)
                    part[lay.tok + size_t(id) * size_t(dt) + size_t(t)] += dmean / n_src;
            }
        } else {
            const size_t row = lay.tok + size_t(col.src_ids[0]) * size_t(dt);
            for (int t = 0; t < dt; ++t) part[row + size_t(t)] += dinput[size_t(t)];
        }
    };

    for (QueryCache& qc : f.queries) {
        if (!qc.used) continue;
        for (ColumnCache& col : qc.cols) backprop_column(col, pg.phrase, 1.0);
        backprop_column(qc.sent, pg.sentence, 1.0);
    }
    for (ColumnCache& col : f.caption.cols) backprop_column(col, pg.phrase, 1.0);
    if (!f.cap_col.v.empty()) backprop_column(f.cap_col, pg.caption, 1.0);
}

// ---------------------------------------------------------------------------
// Batch driver
// ---------------------------------------------------------------------------

BatchResult run_batch(const ModelDims& dims, std::span<const double> params,
                      std::span<const world::Scene* const> scenes,
                      const world::Featurizer& feat, const TrainConfig& cfg,
                      const std::vector<const assign::MatchResult*>* fixed_matches) {
    cfg.validate();
    if (scenes.empty()) throw std::invalid_argument("run_batch: empty batch");
    if (fixed_matches && fixed_matches->size() != scenes.size())
        throw std::invalid_argument("run_batch: fixed_matches size mismatch");
    const Model m(dims, params);
    const Layout& lay = m.layout();
    const int nb = int(scenes.size());
    const int dj = lay.dims.d_joint;

    std::vector<SceneForward> fs;
    fs.reserve(static_cast<size_t>(nb));
    for (int b = 0; b < nb; ++b)
        fs.push_back(forward_scene(m, *scenes[size_t(b)], feat, cfg,
                                   fixed_matches ? (*fixed_matches)[size_t(b)] : nullptr));

    // Batch-level image-caption contrastive loss (needs >= 2 pairs to have
    // negatives; a singleton batch contributes a zero caption part).
    double cap_value = 0.0;
    if (nb >= 2) {
        std::vector<Vec> imgs, caps;
        imgs.reserve(static_cast<size_t>(nb));
        caps.reserve(static_cast<size_t>(nb));
        for (const SceneForward& f : fs) {
            imgs.push_back(f.img);
            caps.push_back(f.cap_col.v);
        }
        loss::LossValue lv = loss::caption_contrastive(imgs, caps, cfg.tau);
        cap_value = lv.value;
        for (int b = 0; b < nb; ++b)
            for (int r = 0; r < dj; ++r) {
                fs[size_t(b)].dimg[size_t(r)] = lv.grads[size_t(b) * size_t(dj) + size_t(r)];
                fs[size_t(b)].cap_col.dv[size_t(r)] =
                    lv.grads[(size_t(nb) + size_t(b)) * size_t(dj) + size_t(r)];
            }
    }

    PartGrads pg(lay.total);
    const double scene_scale = 1.0 / double(nb);
    for (SceneForward& f : fs) backward_scene(m, f, scene_scale, pg);

    BatchResult r;
    for (const SceneForward& f : fs) {
        r.bce += f.bce * scene_scale;
        r.l1 += f.l1 * scene_scale;
        r.giou += f.giou * scene_scale;
        r.phrase += f.phrase_value() * scene_scale;
        r.sentence += f.sentence_value() * scene_scale;
    }
    r.caption = cap_value;

    std::map<std::string, loss::LossValue> parts;
    parts["bce"] = {r.bce, std::move(pg.bce)};
    parts["l1"] = {r.l1, std::move(pg.l1)};
    parts["giou"] = {r.giou, std::move(pg.giou)};
    parts["phrase"] = {r.phrase, std::move(pg.phrase)};
    parts["sentence"] = {r.sentence, std::move(pg.sentence)};
    parts["caption"] = {r.caption, std::move(pg.caption)};
    const std::map<std::string, double> weights = {
        {"bce", cfg.w_bce},         {"l1", cfg.w_l1},       {"giou", cfg.w_giou},
        {"phrase", cfg.w_phrase},   {"sentence", cfg.w_sentence}, {"caption", cfg.w_caption}};
    loss::LossValue total = loss::total_loss(parts, weights);
    r.loss = total.value;
    r.grads = std::move(total.grads);
    return r;
}

// ---------------------------------------------------------------------------
// Optimizer / training loop
// ---------------------------------------------------------------------------

void sgd_step(Vec& params, Vec& momentum, const Vec& grads, double lr, double mu) {
    if (params.size() != momentum.size() || params.size() != grads.size())
        throw std::invalid_argument("sgd_step: size mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        momentum[i] = mu * momentum[i] + grads[i];
        params[i] -= lr * momentum[i];
    }
}

void ema_update(TrainState& st, double decay) {
    if (decay < 0.0 || decay > 1.0)
        throw std::invalid_argument("ema_update: decay must be in [0,1]");
    if (st.ema.size() != st.params.size())
        throw std::invalid_argument("ema_update: shape mismatch");
    for (size_t i = 0; i < st.ema.size(); ++i)
        st.ema[i] = decay * st.ema[i] + (1.0 - decay) * st.params[i];
}

TrainReport train(TrainState& st, const std::vector<world::Scene>& corpus,
                  const world::Featurizer& feat, const TrainConfig& cfg,
                  int64_t max_steps, std::ostream* log) {
    cfg.validate();
    if (corpus.empty()) throw std::invalid_argument("train: empty corpus");
    const Layout lay(st.dims);
    if (st.params.size() != lay.total || st.ema.size() != lay.total ||
        st.momentum.size() != lay.total)
        throw std::invalid_argument("train: state/layout mismatch");

    const size_t n = corpus.size();
    const uint64_t spe = (n + size_t(cfg.batch_size) - 1) / size_t(cfg.batch_size);
    const uint64_t total_steps = uint64_t(cfg.epochs) * spe;

    TrainReport rep;
    std::vector<size_t> perm(n);
    int64_t cur_epoch = -1;
    while (st.step < total_steps && (max_steps < 0 || rep.steps_run < uint64_t(max_steps))) {
        const int64_t epoch = int64_t(st.step / spe);
        const size_t pos = size_t(st.step % spe);
        if (epoch != cur_epoch) {
            std::iota(perm.begin(), perm.end(), size_t(0));
            Rng shuffler(mix_seed(st.seed, 0xE60C0000ull + uint64_t(epoch)));
            shuffler.shuffle(perm);
            cur_epoch = epoch;
        }
        std::vector<const world::Scene*> batch;
        const size_t lo = pos * size_t(cfg.batch_size);
        const size_t hi = std::min(n, lo + size_t(cfg.batch_size));
        for (size_t i = lo; i < hi; ++i) batch.push_back(&corpus[perm[i]]);

        const BatchResult res = run_batch(st.dims, st.params, batch, feat, cfg);
        if (!std::isfinite(res.loss) || !all_finite(res.grads))
            throw std::runtime_error("train: non-finite loss/gradient at step " +
                                     std::to_string(st.step));
        sgd_step(st.params, st.momentum, res.grads, cfg.lr, cfg.momentum);
        ++st.step;
        ema_update(st, cfg.ema_decay);
        rep.step_losses.push_back(res.loss);
        ++rep.steps_run;
        if (log && (st.step % 500 == 0 || st.step == total_steps))
            (*log) << "step " << st.step << "/" << total_steps << " loss " << res.loss
                   << " (bce " << res.bce << " l1 " << res.l1 << " giou " << res.giou
                   << " phrase " << res.phrase << " sent " << res.sentence << " cap "
                   << res.caption << ")\n";
    }
    rep.final_loss = rep.step_losses.empty() ? 0.0 : rep.step_losses.back();
    return rep;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kCkptMagic[8] = {'X', 'A', 'L', 'N', 'C', 'K', 'P', '1'};
constexpr uint32_t kCkptVersion = 1;

}  // namespace

void save_checkpoint(const TrainState& st, const std::string& path) {
    const Layout lay(st.dims);
    if (st.params.size() != lay.total || st.momentum.size() != lay.total ||
        st.ema.size() != lay.total)
        throw std::invalid_argument("save_checkpoint: state/layout mismatch");
    std::string buf;
    buf.append(kCkptMagic, sizeof(kCkptMagic));
    binio::put_u32(buf, kCkptVersion);
    binio::put_u32(buf, uint32_t(st.dims.d_raw));
    binio::put_u32(buf, uint32_t(st.dims.d_joint));
    binio::put_u32(buf, uint32_t(st.dims.d_tok));
    binio::put_u32(buf, uint32_t(st.dims.vocab));
    binio::put_u64(buf, st.step);
    binio::put_u64(buf, st.seed);
    const std::pair<const char*, const Vec*> arrays[] = {
        {"params", &st.params}, {"momentum", &st.momentum}, {"ema", &st.ema}};
    binio::put_u32(buf, uint32_t(std::size(arrays)));
    for (const auto& [name, vec] : arrays) {
        const std::string n = name;
        binio::put_u32(buf, uint32_t(n.size()));
        buf.append(n);
        binio::put_u64(buf, vec->size());
        binio::put_bytes(buf, vec->data(), vec->size() * sizeof(double));
    }
    binio::write_file_with_crc(buf, path, "checkpoint");
}

TrainState load_checkpoint(const std::string& path) {
    const std::string buf = binio::read_file_checked(path, "checkpoint");
    binio::Reader r(buf, "checkpoint");
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kCkptMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic");
    if (r.u32() != kCkptVersion) throw std::runtime_error("checkpoint: unsupported version");
    TrainState st;
    st.dims.d_raw = int(r.u32());
    st.dims.d_joint = int(r.u32());
    st.dims.d_tok = int(r.u32());
    st.dims.vocab = int(r.u32());
    st.step = r.u64();
    st.seed = r.u64();
    const Layout lay(st.dims);
    const uint32_t n_arrays = r.u32();
    if (n_arrays != 3) throw std::runtime_error("checkpoint: unexpected array count");
    const char* expect[] = {"params", "momentum", "ema"};
    Vec* dst[] = {&st.params, &st.momentum, &st.ema};
    for (uint32_t a = 0; a < n_arrays; ++a) {
        const uint32_t name_len = r.u32();
        const std::string name = r.str(name_len);
        if (name != expect[a]) throw std::runtime_error("checkpoint: unexpected array " + name);
        const uint64_t count = r.u64();
        if (count != lay.total) throw std::runtime_error("checkpoint: array length mismatch");
        dst[a]->resize(count);
        r.bytes(dst[a]->data(), count * sizeof(double));
    }
    r.expect_end();
    return st;
}

}  // namespace xalign::train
