#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "xalign/alignment.hpp"
#include "xalign/assignment.hpp"
#include "xalign/common.hpp"
#include "xalign/losses.hpp"
#include "xalign/world.hpp"

namespace xalign::train {

// ---------------------------------------------------------------------------
// Parameter layout. One flat f64 vector holds, in order:
//   F.weight (d_joint x d_raw), F.bias, G.weight (d_joint x d_tok), G.bias,
//   token_table (vocab x d_tok), obj_w (d_raw), obj_b, box_w (4 x d_raw), box_b.
// Checkpoints serialize this manifest order.
// ---------------------------------------------------------------------------

struct ModelDims {
    int d_raw = 48;
    int d_joint = 64;
    int d_tok = 32;
    int vocab = 0;  // 0 => use the world vocabulary size
};

struct Layout {
    ModelDims dims;
    size_t fw = 0, fb = 0, gw = 0, gb = 0, tok = 0, ow = 0, ob = 0, bw = 0, bb = 0;
    size_t total = 0;
    explicit Layout(const ModelDims& d);
};

// Non-owning view over a flat parameter vector with forward helpers.
class Model {
  public:
    Model(const ModelDims& dims, std::span<const double> flat);

    const Layout& layout() const { return lay_; }
    const ModelDims& dims() const { return lay_.dims; }

    double obj_logit(const Vec& x) const;
    std::array<double, 4> box_z(const Vec& x) const;  // pre-sigmoid

    // L2-normalized projections; optionally reports the pre-normalization norm.
    Vec project_f(const Vec& x, double* pre_norm = nullptr) const;
    Vec project_g(const Vec& e, double* pre_norm = nullptr) const;

    std::span<const double> token_row(int id) const;
    Mat token_table() const;  // copy, for the public token featurizer

    // Projected joint-space embedding of content token ids: mean of table
    // rows, L2-normalized, then G, normalized (the pooled-text path).
    Vec text_embed(std::span<const int> content_ids) const;

    std::span<const double> flat() const { return flat_; }

  private:
    Layout lay_;
    std::span<const double> flat_;
};

struct TrainConfig {
    double lr = 0.003;
    double momentum = 0.9;
    double ema_decay = 0.9998;
    int epochs = 64;
    int batch_size = 16;
    uint64_t seed = 42;
    double tau = 0.07;
    double w_bce = 1.0, w_l1 = 5.0, w_giou = 2.0;
    double w_phrase = 1.0, w_sentence = 1.0, w_caption = 1.0;
    assign::CostWeights match_weights{};

    void validate() const;
};

struct TrainState {
    ModelDims dims;
    Vec params;
    Vec momentum;
    Vec ema;
    uint64_t step = 0;
    uint64_t seed = 0;
};

TrainState init_state(ModelDims dims, uint64_t seed);

// Predicted box for raw features x: sigmoid box head (ccwh), converted to
// xyxy and clamped to the unit square. Shared by retrieval, evaluation, and
// pseudo-labeling so every consumer sees the same box.
geom::BoxXYXY pred_box(const Model& m, const Vec& x);

// ---------------------------------------------------------------------------
// Forward / backward over one scene.
// ---------------------------------------------------------------------------

// One projected text column (a single token, or a pooled span).
struct ColumnCache {
    Vec v;         // normalized projected vector (joint space)
    double pre_norm = 0.0;
    Vec input;     // d_tok vector fed to G (token row or pooled mean direction)
    std::vector<int> src_ids;  // vocabulary rows behind `input`
    double pool_norm = 0.0;    // ||mean|| when pooled; 0 for plain token columns
    Vec dv;        // accumulated upstream gradient (unweighted)
};

struct InstanceCache {
    Vec x;  // raw features
    double logit = 0.0;
    std::array<double, 4> z{}, box{};
    Vec u;  // projected normalized embed
    double pre_norm = 0.0;
    int object_index = -1;
};

struct QueryCache {
    bool used = false;
    std::vector<ColumnCache> cols;  // non-boundary token columns, in order
    ColumnCache sent;               // pooled whole-query column
    Vec dscores;                    // d loss / d score, insts x cols
    Vec dsent_scores;               // insts x 1
    double phrase = 0.0, sentence = 0.0;
};

struct CaptionCache {
    bool used = false;
    std::vector<ColumnCache> cols;
    Vec dscores;
    double loss = 0.0;
};

struct SceneForward {
    const world::Scene* scene = nullptr;
    double tau = 0.07;  // copied from the config; needed by backward
    std::vector<InstanceCache> insts;
    assign::MatchResult match;
    std::vector<int> pred_of_gt;

    double bce = 0.0, l1 = 0.0, giou = 0.0;
    Vec dlogits;  // d bce / d logit (includes the 1/n mean factor)
    std::vector<std::array<double, 4>> dbox_l1, dbox_giou;  // include 1/n_matched

    std::vector<QueryCache> queries;  // parallel to scene->queries
    CaptionCache caption;             // token-level phrase matrix over the caption
    int phrase_terms = 0;             // used queries + used caption matrix
    int sentence_terms = 0;

    // Image/caption embeddings for the batch-level contrastive loss.
    Vec img;  // normalized mean of instance embeds
    double img_mean_norm = 0.0;
    ColumnCache cap_col;  // pooled caption column
    Vec dimg;             // set by the batch driver (caption-loss gradient)

    double phrase_value() const;    // mean over phrase terms (0 when none)
    double sentence_value() const;  // mean over used queries (0 when none)
};

SceneForward forward_scene(const Model& m, const world::Scene& s,
                           const world::Featurizer& feat, const TrainConfig& cfg,
                           const assign::MatchResult* fixed_match = nullptr);

// Per-part parameter-space gradients; combined by total_loss at batch level.
struct PartGrads {
    Vec bce, l1, giou, phrase, sentence, caption;
    explicit PartGrads(size_t n);
};

// Accumulates this scene's contributions. `scene_scale` (1/batch) multiplies
// all per-scene parts; the caption part (driver-set dimg / cap_col.dv) is
// batch-level and enters with scale 1.
void backward_scene(const Model& m, SceneForward& f, double scene_scale, PartGrads& pg);

struct BatchResult {
    double loss = 0.0;
    double bce = 0.0, l1 = 0.0, giou = 0.0, phrase = 0.0, sentence = 0.0, caption = 0.0;
    Vec grads;
};

// Full forward+backward over a batch of scenes (losses assembled via
// total_loss). `fixed_matches`, when given, pins per-scene matchings (used by
// finite-difference tests where re-matching would break differentiability).
BatchResult run_batch(const ModelDims& dims, std::span<const double> params,
                      std::span<const world::Scene* const> scenes,
                      const world::Featurizer& feat, const TrainConfig& cfg,
                      const std::vector<const assign::MatchResult*>* fixed_matches = nullptr);

// SGD with momentum: v <- mu v + g; params <- params - lr v.
void sgd_step(Vec& params, Vec& momentum, const Vec& grads, double lr, double mu);

// ema <- decay ema + (1 - decay) params.
void ema_update(TrainState& st, double decay);

struct TrainReport {
    std::vector<double> step_losses;
    double final_loss = 0.0;
    uint64_t steps_run = 0;
};

// Runs until epochs are exhausted (or max_steps global steps reached).
// Resume-exact: epoch shuffles derive from (seed, epoch), so a state loaded
// from a checkpoint continues identically to an uninterrupted run.
TrainReport train(TrainState& st, const std::vector<world::Scene>& corpus,
                  const world::Featurizer& feat, const TrainConfig& cfg,
                  int64_t max_steps = -1, std::ostream* log = nullptr);

// Little-endian binary checkpoint: magic, version, dims, step/seed, named f64
// arrays (params/momentum/ema), CRC32 trailer. Round-trips bit-exactly.
void save_checkpoint(const TrainState& st, const std::string& path);
TrainState load_checkpoint(const std::string& path);

}  // namespace xalign::train
