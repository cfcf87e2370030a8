#include "xalign/alignment.hpp"

#include <cmath>
#include <stdexcept>

namespace xalign::align {

ProjectionHead init_head(int d_out, int d_in, Rng& rng) {
    if (d_out <= 0 || d_in <= 0) throw std::invalid_argument("init_head: dims must be positive");
    ProjectionHead h;
    h.weight = Mat(d_out, d_in);
    const double bound = 1.0 / std::sqrt(double(d_in));
    for (double& w : h.weight.data) w = rng.uniform(-bound, bound);
    h.bias.assign(size_t(d_out), 0.0);
    return h;
}

Vec normalize(const Vec& v) {
    const double n = norm2(v);
    if (!(n > 0.0) || !std::isfinite(n))
        throw std::invalid_argument("normalize: zero or non-finite vector");
    Vec out(v.size());
    for (size_t i = 0; i < v.size(); ++i) out[i] = v[i] / n;
    return out;
}

Vec project(const ProjectionHead& head, const Vec& v) {
    if (int(v.size()) != head.d_in())
        throw std::invalid_argument("project: input dim mismatch");
    Vec pre = head.weight.mul(v);
    for (int i = 0; i < head.d_out(); ++i) pre[size_t(i)] += head.bias[size_t(i)];
    return normalize(pre);
}

Vec pool_span(const TextSequence& t, const TokenSpan& span) {
    const int n = t.size();
    if (int(t.token_embeds.size()) != n)
        throw std::invalid_argument("pool_span: token_ids/token_embeds size mismatch");
    const int lo = span.start, hi = span.end;
    if (lo >= hi || lo < 0 || hi > n)
        throw std::invalid_argument("pool_span: empty or out-of-bounds span");
    // Boundary markers carry no content; a span that covers one is a caller
    // bug, not something to clamp away silently.
    if (t.has_boundary_tokens && (lo < 1 || hi > n - 1))
        throw std::invalid_argument("pool_span: span covers a boundary token");
    const size_t d = t.token_embeds[size_t(lo)].size();
    Vec mean(d, 0.0);
    for (int p = lo; p < hi; ++p) {
        const Vec& e = t.token_embeds[size_t(p)];
        if (e.size() != d) throw std::invalid_argument("pool_span: ragged token embeddings");
        for (size_t k = 0; k < d; ++k) mean[k] += e[k];
    }
    const double inv = 1.0 / double(hi - lo);
    for (double& x : mean) x *= inv;
    return normalize(mean);
}

SimilarityMatrix similarity(std::span<const Vec> insts, std::span<const Vec> texts, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("similarity: temperature must be positive");
    SimilarityMatrix s(int(insts.size()), int(texts.size()), tau);
    for (int i = 0; i < s.n_inst; ++i) {
        for (int j = 0; j < s.n_text; ++j) {
            if (insts[size_t(i)].size() != texts[size_t(j)].size())
                throw std::invalid_argument("similarity: dim mismatch");
            s.at(i, j) = dot(insts[size_t(i)], texts[size_t(j)]) / tau;
        }
    }
    return s;
}

Vec ovod_score(double objectness_logit, const Vec& category_scores) {
    if (category_scores.empty())
        throw std::invalid_argument("ovod_score: empty category scores");
    Vec probs = softmax(category_scores);
    const double obj = sigmoid(objectness_logit);
    for (double& p : probs) p *= obj;
    return probs;
}

}  // namespace xalign::align
