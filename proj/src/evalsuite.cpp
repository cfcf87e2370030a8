#include "xalign/evalsuite.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include <json.hpp>

#include "xalign/alignment.hpp"

namespace xalign::eval {

// ---------------------------------------------------------------------------
// AP
// ---------------------------------------------------------------------------

namespace {

// 101-point interpolated AP from ordered hit flags and the GT count.
double ap_101(const std::vector<char>& tp_in_order, int n_gt) {
    if (n_gt <= 0) throw std::invalid_argument("ap_101: no ground truth");
    std::vector<double> rec, prec;
    rec.reserve(tp_in_order.size());
    prec.reserve(tp_in_order.size());
    int tp = 0, fp = 0;
    for (char f : tp_in_order) {
        if (f) ++tp;
        else ++fp;
        rec.push_back(double(tp) / double(n_gt));
        prec.push_back(double(tp) / double(tp + fp));
    }
    for (int i = int(prec.size()) - 2; i >= 0; --i)
        prec[size_t(i)] = std::max(prec[size_t(i)], prec[size_t(i) + 1]);
    double s = 0.0;
    for (int j = 0; j <= 100; ++j) {
        const double r = double(j) / 100.0;
        const auto it = std::lower_bound(rec.begin(), rec.end(), r);
        if (it != rec.end()) s += prec[size_t(it - rec.begin())];
    }
    return s / 101.0;
}

struct CatData {
    std::vector<const Detection*> dets;          // insertion order
    std::unordered_map<uint64_t, std::vector<const GroundTruth*>> gts_by_scene;
    int n_gt = 0;
};

double category_ap(const CatData& cd, double thr) {
    // Score-descending, stable on ties (insertion order).
    std::vector<const Detection*> order = cd.dets;
    std::stable_sort(order.begin(), order.end(),
                     [](const Detection* a, const Detection* b) { return a->score > b->score; });
    std::unordered_map<const GroundTruth*, char> used;
    std::vector<char> tp;
    tp.reserve(order.size());
    for (const Detection* d : order) {
        const GroundTruth* best = nullptr;
        double best_iou = thr;
        const auto it = cd.gts_by_scene.find(d->scene_id);
        if (it != cd.gts_by_scene.end()) {
            for (const GroundTruth* g : it->second) {
                if (used[g]) continue;
                const double v = geom::iou(d->box, g->box);
                if (v >= best_iou && (best == nullptr || v > best_iou)) {
                    best = g;
                    best_iou = v;
                }
            }
        }
        if (best) {
            used[best] = 1;
            tp.push_back(1);
        } else {
            tp.push_back(0);
        }
    }
    return ap_101(tp, cd.n_gt);
}

}  // namespace

ApResult ap_eval(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                 std::span<const double> iou_thresholds) {
    if (iou_thresholds.empty()) throw std::invalid_argument("ap_eval: no thresholds");
    std::map<int, CatData> cats;
    for (const GroundTruth& g : gts) {
        CatData& cd = cats[g.category_id];
        cd.gts_by_scene[g.scene_id].push_back(&g);
        ++cd.n_gt;
    }
    for (const Detection& d : dets) {
        const auto it = cats.find(d.category_id);
        if (it != cats.end()) it->second.dets.push_back(&d);  // no-GT categories excluded
    }
    ApResult r;
    r.n_categories = int(cats.size());
    if (cats.empty()) return r;
    r.per_threshold.assign(iou_thresholds.size(), 0.0);
    bool have_50 = false;
    for (size_t t = 0; t < iou_thresholds.size(); ++t) {
        double sum = 0.0;
        for (const auto& [cat, cd] : cats) sum += category_ap(cd, iou_thresholds[t]);
        r.per_threshold[t] = sum / double(cats.size());
        if (iou_thresholds[t] == 0.5) {
            r.ap50 = r.per_threshold[t];
            have_50 = true;
        }
        r.ap += r.per_threshold[t] / double(iou_thresholds.size());
    }
    if (!have_50) {
        double sum = 0.0;
        for (const auto& [cat, cd] : cats) sum += category_ap(cd, 0.5);
        r.ap50 = sum / double(cats.size());
    }
    return r;
}

// ---------------------------------------------------------------------------
// Recall@k
// ---------------------------------------------------------------------------

std::vector<int> recall_at_k(const RankedRetrieval& ranked,
                             std::span<const geom::BoxXYXY> gt_boxes,
                             std::span<const int> ks, double iou_thr) {
    for (size_t i = 0; i < ks.size(); ++i) {
        if (ks[i] < 1) throw std::invalid_argument("recall_at_k: k must be >= 1");
        if (i > 0 && ks[i] <= ks[i - 1])
            throw std::invalid_argument("recall_at_k: ks must be ascending");
    }
    std::vector<int> out;
    out.reserve(ks.size());
    size_t pos = 0;
    bool hit = false;
    for (int k : ks) {
        const size_t lim = std::min(ranked.hits.size(), size_t(k));
        for (; pos < lim && !hit; ++pos)
            for (const geom::BoxXYXY& g : gt_boxes)
                if (geom::iou(ranked.hits[pos].box, g) >= iou_thr) {
                    hit = true;
                    break;
                }
        out.push_back(hit ? 1 : 0);
    }
    return out;
}

double hypergeometric_hit_rate(size_t n, size_t g, int k) {
    if (k < 1) throw std::invalid_argument("hypergeometric_hit_rate: k must be >= 1");
    if (g == 0 || n == 0) return 0.0;
    if (g >= n) return 1.0;
    double p_miss = 1.0;
    for (int i = 0; i < k; ++i) {
        if (double(n) - double(g) - double(i) <= 0.0) return 1.0;
        if (size_t(i) >= n) break;
        p_miss *= (double(n) - double(g) - double(i)) / (double(n) - double(i));
    }
    return 1.0 - p_miss;
}

// ---------------------------------------------------------------------------
// Protocols
// ---------------------------------------------------------------------------

std::vector<EvalQuery> collect_queries(const std::vector<world::Scene>& corpus) {
    std::vector<EvalQuery> out;
    uint64_t qid = 0;
    for (const world::Scene& s : corpus) {
        for (const world::SceneQuery& q : s.queries) {
            if (q.targets.empty()) continue;
            if (q.has_score && !q.accepted) continue;
            EvalQuery eq;
            eq.query_id = qid++;
            eq.scene_id = s.scene_id;
            const auto& ids = q.text.token_ids;
            eq.content_ids.assign(ids.begin() + 1, ids.end() - 1);
            for (int t : q.targets) eq.gt_boxes.push_back(s.objects[size_t(t)].box);
            out.push_back(std::move(eq));
        }
    }
    return out;
}

namespace {

// Count of index entries whose stored box would qualify as a hit — the `g`
// of the hypergeometric chance baseline.
size_t qualifying_entries(const index::Index& ix, std::span<const geom::BoxXYXY> gts,
                          double thr) {
    size_t g = 0;
    for (size_t i = 0; i < ix.size(); ++i) {
        const index::IndexEntry& e = ix.entry(i);
        const geom::BoxXYXY b{e.box[0], e.box[1], e.box[2], e.box[3]};
        for (const geom::BoxXYXY& gt : gts)
            if (geom::iou(b, gt) >= thr) {
                ++g;
                break;
            }
    }
    return g;
}

RecallReport run_queries(const train::Model& model,
                         const std::function<const index::Index&(const EvalQuery&)>& index_of,
                         std::span<const EvalQuery> queries, const EvalOptions& opt) {
    if (opt.ks.empty()) throw std::invalid_argument("eval: no ks");
    RecallReport rep;
    std::map<int, double> hit_sum, chance_sum;
    for (const EvalQuery& q : queries) {
        const index::Index& ix = index_of(q);
        if (ix.size() == 0) throw std::invalid_argument("eval: empty database");
        const Vec v = model.text_embed(q.content_ids);
        RankedRetrieval rr;
        rr.query_id = q.query_id;
        rr.hits = ix.query(v, opt.ks.back(), opt.multiply_objectness);
        const std::vector<int> flags = recall_at_k(rr, q.gt_boxes, opt.ks, opt.iou_thr);
        const size_t g = qualifying_entries(ix, q.gt_boxes, opt.iou_thr);
        for (size_t i = 0; i < opt.ks.size(); ++i) {
            hit_sum[opt.ks[i]] += flags[i];
            chance_sum[opt.ks[i]] += hypergeometric_hit_rate(ix.size(), g, opt.ks[i]);
        }
        ++rep.n_queries;
    }
    for (int k : opt.ks) {
        rep.recall[k] = rep.n_queries ? hit_sum[k] / double(rep.n_queries) : 0.0;
        rep.chance[k] = rep.n_queries ? chance_sum[k] / double(rep.n_queries) : 0.0;
    }
    return rep;
}

}  // namespace

RecallReport mmis_protocol(const train::Model& model, const index::Index& ix,
                           std::span<const EvalQuery> queries, const EvalOptions& opt) {
    return run_queries(
        model, [&](const EvalQuery&) -> const index::Index& { return ix; }, queries, opt);
}

RecallReport grounding_protocol(const train::Model& model,
                                const std::vector<world::Scene>& corpus,
                                std::span<const EvalQuery> queries,
                                const world::Featurizer& feat, const EvalOptions& opt) {
    std::unordered_map<uint64_t, const world::Scene*> by_id;
    for (const world::Scene& s : corpus) by_id.emplace(s.scene_id, &s);
    std::unordered_map<uint64_t, index::Index> per_scene;
    const auto index_of = [&](const EvalQuery& q) -> const index::Index& {
        auto it = per_scene.find(q.scene_id);
        if (it == per_scene.end()) {
            const auto sit = by_id.find(q.scene_id);
            if (sit == by_id.end())
                throw std::invalid_argument("grounding: query references unknown scene");
            const std::vector<world::Scene> one{*sit->second};
            it = per_scene.emplace(q.scene_id, index::build_index(one, model, feat)).first;
        }
        return it->second;
    };
    return run_queries(model, index_of, queries, opt);
}

OvodReport ovod_protocol(const train::Model& model, const std::vector<world::Scene>& corpus,
                         const world::Featurizer& feat, const EvalOptions& opt,
                         bool held_out_categories, const world::SplitSpec& split) {
    // Categories: (color, shape) combinations present in the ground truth,
    // restricted to the requested side of the split.
    std::map<std::pair<int, int>, int> cat_id;
    for (const world::Scene& s : corpus)
        for (const world::SceneObject& o : s.objects) {
            if (split.is_held_out(o.color, o.category) != held_out_categories) continue;
            cat_id.emplace(std::make_pair(o.color, o.category), 0);
        }
    int next = 0;
    for (auto& [key, id] : cat_id) id = next++;

    OvodReport rep;
    rep.n_categories = int(cat_id.size());
    if (cat_id.empty()) return rep;

    // Text embedding per category: "a <color> <shape>".
    std::vector<Vec> cat_embed(cat_id.size());
    for (const auto& [key, id] : cat_id) {
        const std::vector<int> ids = {world::Vocab::kA, world::Vocab::color_word(key.first),
                                      world::Vocab::shape_word(key.second)};
        cat_embed[size_t(id)] = model.text_embed(ids);
    }

    std::vector<Detection> dets;
    std::vector<GroundTruth> gts;
    for (const world::Scene& s : corpus) {
        for (const world::SceneObject& o : s.objects) {
            const auto it = cat_id.find({o.color, o.category});
            if (it == cat_id.end()) continue;
            gts.push_back({s.scene_id, o.box, it->second});
        }
        const auto hyps = feat.featurize_scene(s);
        for (const auto& h : hyps) {
            const double logit = model.obj_logit(h.embed);
            const Vec u = model.project_f(h.embed);
            Vec sims(cat_embed.size());
            for (size_t c = 0; c < cat_embed.size(); ++c)
                sims[c] = dot(u, cat_embed[c]) / opt.tau;
            const Vec probs = align::ovod_score(logit, sims);
            const geom::BoxXYXY b = train::pred_box(model, h.embed);
            for (size_t c = 0; c < probs.size(); ++c)
                dets.push_back({s.scene_id, b, int(c), probs[c]});
        }
    }
    rep.n_detections = dets.size();
    const std::vector<double> thr = coco_thresholds();
    rep.ap = ap_eval(dets, gts, thr);
    return rep;
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

std::string metrics_json(const std::map<std::string, double>& metrics) {
    nlohmann::ordered_json j;
    for (const auto& [k, v] : metrics) j[k] = v;
    return j.dump(2);
}

std::string metrics_table(const std::map<std::string, double>& metrics) {
    size_t w = 0;
    for (const auto& [k, v] : metrics) w = std::max(w, k.size());
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os.precision(4);
    for (const auto& [k, v] : metrics)
        os << k << std::string(w - k.size() + 2, ' ') << v << "\n";
    return os.str();
}

}  // namespace xalign::eval
