#include "xalign/pseudolabel.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace xalign::pseudo {

std::vector<align::TokenSpan> extract_phrases(const align::TextSequence& caption) {
    const std::vector<int>& ids = caption.token_ids;
    if (!caption.has_boundary_tokens || ids.size() < 3 ||
        ids.front() != world::Vocab::kStart || ids.back() != world::Vocab::kEnd)
        throw std::invalid_argument("extract_phrases: caption lacks boundary framing");
    std::vector<align::TokenSpan> spans;
    int start = 1;
    const int end = int(ids.size()) - 1;
    for (int p = 1; p <= end; ++p) {
        const bool cut = p == end || ids[size_t(p)] == world::Vocab::kAnd;
        if (!cut) continue;
        if (p == start) throw std::invalid_argument("extract_phrases: empty phrase segment");
        bool has_shape = false;
        for (int q = start; q < p; ++q)
            if (world::Vocab::kind(ids[size_t(q)]) == world::WordKind::Shape) has_shape = true;
        if (!has_shape)
            throw std::invalid_argument("extract_phrases: segment without a shape word");
        spans.push_back({start, p, align::SpanKind::Phrase});
        start = p + 1;
    }
    return spans;
}

PseudoPair pseudo_ground(const train::Model& model, const world::Scene& scene,
                         const align::TokenSpan& span, const world::Featurizer& feat,
                         double threshold) {
    const std::vector<int>& ids = scene.caption.token_ids;
    if (span.start < 1 || span.end <= span.start || span.end > int(ids.size()) - 1)
        throw std::invalid_argument("pseudo_ground: span out of caption bounds");
    const auto hyps = feat.featurize_scene(scene);
    if (hyps.empty()) throw std::invalid_argument("pseudo_ground: scene has no hypotheses");

    const std::vector<int> content(ids.begin() + span.start, ids.begin() + span.end);
    const Vec v = model.text_embed(content);

    int best = 0;
    double best_score = -std::numeric_limits<double>::infinity();
    for (size_t i = 0; i < hyps.size(); ++i) {
        const Vec u = model.project_f(hyps[i].embed);
        const double s = dot(u, v);
        if (s > best_score) {  // strict: ties keep the lower instance index
            best_score = s;
            best = int(i);
        }
    }

    PseudoPair p;
    p.scene_id = scene.scene_id;
    p.span = span;
    p.box = train::pred_box(model, hyps[size_t(best)].embed);
    p.score = best_score;
    p.accepted = best_score >= threshold;
    p.instance_index = best;
    p.object_index = hyps[size_t(best)].object_index;
    return p;
}

std::vector<world::Scene> emit_pseudo_corpus(const train::Model& model,
                                             const std::vector<world::Scene>& corpus,
                                             const world::Featurizer& feat,
                                             double threshold, const std::string& path) {
    std::vector<world::Scene> out;
    out.reserve(corpus.size());
    for (const world::Scene& s : corpus) {
        world::Scene ps = s;
        ps.queries.clear();
        for (const align::TokenSpan& span : extract_phrases(s.caption)) {
            const PseudoPair pair = pseudo_ground(model, s, span, feat, threshold);
            world::SceneQuery q;
            q.text.token_ids.push_back(world::Vocab::kStart);
            q.text.token_ids.insert(q.text.token_ids.end(),
                                    s.caption.token_ids.begin() + span.start,
                                    s.caption.token_ids.begin() + span.end);
            q.text.token_ids.push_back(world::Vocab::kEnd);
            q.text.has_boundary_tokens = true;
            q.text.spans.push_back(
                {1, int(q.text.token_ids.size()) - 1, align::SpanKind::Phrase});
            if (pair.object_index >= 0) q.targets.push_back(pair.object_index);
            q.has_score = true;
            q.score = pair.score;
            q.accepted = pair.accepted;
            ps.queries.push_back(std::move(q));
        }
        out.push_back(std::move(ps));
    }
    std::stable_sort(out.begin(), out.end(),
                     [](const world::Scene& a, const world::Scene& b) {
                         return a.scene_id < b.scene_id;
                     });
    if (!path.empty()) world::save_corpus(out, path);
    return out;
}

}  // namespace xalign::pseudo
