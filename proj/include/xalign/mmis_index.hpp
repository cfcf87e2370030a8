#pragma once

// Exact top-k dot-product retrieval over projected instance embeddings, plus
// the joint cross-attention re-scoring baseline it is benchmarked against.
//
// The index is immutable after build: a contiguous f32 embedding matrix with
// parallel metadata, in canonical (scene_id, instance_index) order. Queries
// are exact blocked scans (optionally sharded with a deterministic merge) —
// no approximate structures.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "xalign/common.hpp"
#include "xalign/geometry.hpp"
#include "xalign/trainer.hpp"
#include "xalign/world.hpp"

namespace xalign::index {

struct IndexEntry {
    uint64_t scene_id = 0;
    uint32_t instance_index = 0;
    float box[4] = {0, 0, 0, 0};  // predicted box, xyxy
    float objectness = 0.0f;
};

struct Hit {
    float score = 0.0f;
    uint64_t scene_id = 0;
    uint32_t instance_index = 0;
    geom::BoxXYXY box;
    float objectness = 0.0f;
};

class Index {
  public:
    Index() = default;
    Index(int d) : d_(d) {}

    int dim() const { return d_; }
    size_t size() const { return entries_.size(); }
    std::span<const float> embed(size_t i) const {
        return {embeds_.data() + i * size_t(d_), size_t(d_)};
    }
    const IndexEntry& entry(size_t i) const { return entries_[i]; }

    // Appends one entry; build code must add entries in canonical order (or
    // call finalize(), which sorts).
    void add(const IndexEntry& e, std::span<const float> embed);

    // Sorts entries (with their embeddings) by (scene_id, instance_index).
    void finalize();

    // Exact top-k by f32 dot product; ties broken by (score desc, scene_id
    // asc, instance_index asc). `multiply_objectness` switches the ranking
    // score to similarity * objectness. k > n returns all entries sorted.
    std::vector<Hit> query(std::span<const float> q, int k,
                           bool multiply_objectness = false) const;
    std::vector<Hit> query(const Vec& q, int k, bool multiply_objectness = false) const;

    void save(const std::string& path) const;
    static Index load(const std::string& path);

  private:
    int d_ = 0;
    std::vector<float> embeds_;        // n x d, row-major
    std::vector<IndexEntry> entries_;  // parallel to rows
};

// Casts a normalized f64 embedding to the index's f32 query representation.
std::vector<float> to_f32(const Vec& v);

// One entry per instance hypothesis with sigmoid(objectness) >= floor, in
// canonical order. Embeddings come from the model's instance projection; the
// stored box is the model's predicted box.
Index build_index(const std::vector<world::Scene>& corpus, const train::Model& model,
                  const world::Featurizer& feat, double objectness_floor = 0.0);

// Sharded build: partitions scenes round-robin into `n_shards` indexes.
std::vector<Index> build_shards(const std::vector<world::Scene>& corpus,
                                const train::Model& model, const world::Featurizer& feat,
                                int n_shards, double objectness_floor = 0.0);

// Deterministic merge: result is identical to a single-shard build over the
// union (canonical order), regardless of shard count or order.
Index merge_shards(std::span<const Index> shards);

// Merges per-shard top-k hit lists into a global top-k (same tie rule).
std::vector<Hit> merge_hits(std::span<const std::vector<Hit>> per_shard, int k);

// ---------------------------------------------------------------------------
// Cross-attention re-scoring baseline (the expensive per-pair alternative).
// ---------------------------------------------------------------------------

// Single attention layer over the query tokens, with the instance embedding
// fused additively into every token first:
//   x_t   = tok_t + W_fuse * inst
//   q/k/v = Wq x, Wk x, Wv x;  A = softmax(q kᵀ / sqrt(d));  out = A v
//   score = w_out . mean_t(out_t) + b_out
// Per-pair cost O(T d² + T² d), vs O(d) for the indexed dot product.
struct CrossAttentionWeights {
    int d = 0;
    Mat w_fuse, wq, wk, wv;  // d x d each
    Vec w_out;               // d
    double b_out = 0.0;
};

CrossAttentionWeights make_cross_attention_weights(int d, uint64_t seed);

// Multiply-accumulate counter for the analytic-vs-instrumented FLOP check.
struct FlopCounter {
    uint64_t madds = 0;
};

double cross_attention_score(std::span<const Vec> tokens, const Vec& inst,
                             const CrossAttentionWeights& w, FlopCounter* fc = nullptr);

// Analytic multiply-add counts per scored pair.
uint64_t cross_attention_madds(int n_tokens, int d);
uint64_t dot_product_madds(int d);

// ---------------------------------------------------------------------------
// Scaling benchmark.
// ---------------------------------------------------------------------------

struct BenchPoint {
    size_t n = 0;
    double dot_scan_ns = 0.0;  // per query (min over repetitions)
};

struct BenchReport {
    std::vector<BenchPoint> points;
    double slope_ns_per_entry = 0.0;
    double r2 = 0.0;                 // linear fit of time vs N
    double doubling_ratio = 0.0;     // time(2N)/time(N) at the largest N/2
    double k1_vs_k100_ratio = 0.0;   // scan time ratio at fixed N
    double dot_ns_at_max = 0.0;      // per query at N_max
    double xattn_ns_at_max = 0.0;    // per query, cross-attention over all N_max
    double speedup = 0.0;            // xattn / dot
    uint64_t dot_madds = 0;          // analytic, per pair
    uint64_t xattn_madds = 0;        // analytic, per pair (== instrumented)
    int n_tokens = 0;
    int d = 0;
};

// Deterministic synthetic embeddings; times the exact scan at each N, the
// doubling ratio, the k-sensitivity, and one full cross-attention pass over
// the largest N.
BenchReport bench(std::span<const size_t> sizes, int k, int repetitions, int n_tokens,
                  int d, uint64_t seed);

}  // namespace xalign::index
