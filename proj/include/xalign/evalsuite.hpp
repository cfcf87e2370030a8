#pragma once

// Metrics and protocols: COCO-style AP for open-vocabulary detection,
// Recall@k for grounding / referring expressions, and full-database Recall@k
// for multi-modal instance search.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "xalign/geometry.hpp"
#include "xalign/mmis_index.hpp"
#include "xalign/trainer.hpp"
#include "xalign/world.hpp"

namespace xalign::eval {

struct Detection {
    uint64_t scene_id = 0;
    geom::BoxXYXY box;
    int category_id = 0;
    double score = 0.0;
};

struct GroundTruth {
    uint64_t scene_id = 0;
    geom::BoxXYXY box;
    int category_id = 0;
};

struct ApResult {
    double ap = 0.0;    // mean over thresholds and categories
    double ap50 = 0.0;  // at IoU 0.5
    std::vector<double> per_threshold;  // parallel to the threshold list
    int n_categories = 0;               // categories with ground truth
};

// COCO-style AP: per category and IoU threshold, detections sorted by score
// (ties by insertion order), greedy one-to-one matching against ground truth,
// 101-point interpolated precision/recall area, then mean over categories.
// Categories with no ground truth are excluded from the mean.
ApResult ap_eval(std::span<const Detection> dets, std::span<const GroundTruth> gts,
                 std::span<const double> iou_thresholds);

inline std::vector<double> coco_thresholds() {
    std::vector<double> t;
    for (int i = 0; i <= 9; ++i) t.push_back(0.5 + 0.05 * i);
    return t;
}

// Ranked boxes for one query, descending by score (ties already resolved).
struct RankedRetrieval {
    uint64_t query_id = 0;
    std::vector<index::Hit> hits;
};

// hit@k = 1 iff any of the top-k boxes reaches IoU >= iou_thr with any ground
// truth box. ks must be ascending; k beyond the list uses the available prefix.
std::vector<int> recall_at_k(const RankedRetrieval& ranked,
                             std::span<const geom::BoxXYXY> gt_boxes,
                             std::span<const int> ks, double iou_thr = 0.5);

// ---------------------------------------------------------------------------
// Protocols
// ---------------------------------------------------------------------------

struct EvalOptions {
    std::vector<int> ks = {1, 5, 10, 30};
    double iou_thr = 0.5;
    bool multiply_objectness = false;  // rank by raw similarity by default
    double tau = 0.07;                 // softmax temperature for OVOD scores
};

// One grounding/retrieval query: text content ids + the ground-truth boxes.
struct EvalQuery {
    uint64_t query_id = 0;
    uint64_t scene_id = 0;       // scene the query was annotated on
    std::vector<int> content_ids;
    std::vector<geom::BoxXYXY> gt_boxes;
};

struct RecallReport {
    std::map<int, double> recall;       // k -> mean hit rate
    std::map<int, double> chance;       // k -> hypergeometric baseline
    size_t n_queries = 0;
};

// Collects every annotated query of every scene (skipping empty-target and
// rejected pseudo queries).
std::vector<EvalQuery> collect_queries(const std::vector<world::Scene>& corpus);

// Full-database retrieval: ranks every index entry by similarity to the
// query embedding, then applies recall_at_k against the query's own boxes.
RecallReport mmis_protocol(const train::Model& model, const index::Index& ix,
                           std::span<const EvalQuery> queries, const EvalOptions& opt);

// Grounding / referring expressions: the same ranking restricted to the
// query's own scene. Implemented as single-scene retrieval through the exact
// same query path, so a one-scene database reduces to this by construction.
RecallReport grounding_protocol(const train::Model& model,
                                const std::vector<world::Scene>& corpus,
                                std::span<const EvalQuery> queries,
                                const world::Featurizer& feat, const EvalOptions& opt);

// Open-vocabulary detection: every (color, shape) combination present in the
// ground truth becomes a text-defined category ("a <color> <shape>"); each
// hypothesis contributes one detection per category with score
// sigmoid(objectness) * softmax(similarities / tau).
struct OvodReport {
    ApResult ap;
    int n_categories = 0;
    size_t n_detections = 0;
};

OvodReport ovod_protocol(const train::Model& model, const std::vector<world::Scene>& corpus,
                         const world::Featurizer& feat, const EvalOptions& opt,
                         bool held_out_categories, const world::SplitSpec& split);

// P(any of the top-k of a random ranking hits), with g qualifying entries out
// of n: 1 - C(n-g, k)/C(n, k), computed stably as 1 - prod_i (n-g-i)/(n-i).
double hypergeometric_hit_rate(size_t n, size_t g, int k);

// ---------------------------------------------------------------------------
// Report emission
// ---------------------------------------------------------------------------

// {metric_name: value} JSON object (sorted keys) and an aligned plain-text
// table of the same metrics.
std::string metrics_json(const std::map<std::string, double>& metrics);
std::string metrics_table(const std::map<std::string, double>& metrics);

}  // namespace xalign::eval
