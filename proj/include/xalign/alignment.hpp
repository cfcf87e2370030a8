#pragma once

#include <span>
#include <vector>

#include "xalign/common.hpp"

namespace xalign::align {

// Linear map into the shared joint space; outputs are L2-normalized.
struct ProjectionHead {
    Mat weight;  // d_out x d_in
    Vec bias;    // d_out

    int d_in() const { return weight.cols; }
    int d_out() const { return weight.rows; }
};

// Uniform [-1/sqrt(d_in), 1/sqrt(d_in)] weights, zero bias.
ProjectionHead init_head(int d_out, int d_in, Rng& rng);

// L2-normalize(weight * v + bias). Throws on zero-norm output.
Vec project(const ProjectionHead& head, const Vec& v);

// L2-normalize. Throws on zero vector.
Vec normalize(const Vec& v);

enum class SpanKind { Phrase, Sentence };

struct TokenSpan {
    int start = 0;  // half-open [start, end) over token positions
    int end = 0;
    SpanKind kind = SpanKind::Phrase;
};

// Tokenized text with per-token embeddings. When has_boundary_tokens is set,
// position 0 and the last position hold start/end markers and are never
// included in pooled spans.
struct TextSequence {
    std::vector<int> token_ids;
    std::vector<Vec> token_embeds;
    std::vector<TokenSpan> spans;
    bool has_boundary_tokens = false;

    int size() const { return int(token_ids.size()); }
};

// Mean of the span's token embeddings, L2-normalized. The span must be
// non-empty, in bounds, and exclude boundary tokens.
Vec pool_span(const TextSequence& t, const TokenSpan& span);

struct SimilarityMatrix {
    int n_inst = 0;
    int n_text = 0;
    std::vector<double> scores;  // row-major, n_inst x n_text
    double temperature = 1.0;

    SimilarityMatrix() = default;
    SimilarityMatrix(int ni, int nt, double tau)
        : n_inst(ni), n_text(nt), scores(size_t(ni) * nt, 0.0), temperature(tau) {}

    double& at(int i, int j) { return scores[size_t(i) * n_text + j]; }
    double at(int i, int j) const { return scores[size_t(i) * n_text + j]; }
};

// scores(i,j) = dot(insts[i], texts[j]) / tau. Inputs are expected to be
// L2-normalized; tau must be positive.
SimilarityMatrix similarity(std::span<const Vec> insts, std::span<const Vec> texts, double tau);

// sigmoid(objectness_logit) * softmax(category_scores); sums to the
// objectness probability.
Vec ovod_score(double objectness_logit, const Vec& category_scores);

}  // namespace xalign::align
