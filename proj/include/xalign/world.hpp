#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "xalign/alignment.hpp"
#include "xalign/common.hpp"
#include "xalign/geometry.hpp"

namespace xalign::world {

// ---------------------------------------------------------------------------
// Closed vocabulary.  Word kinds drive which tokens carry alignment
// supervision (Filler words participate only as negatives and in pooling).
// ---------------------------------------------------------------------------

inline constexpr int kNumColors = 4;
inline constexpr int kNumShapes = 8;
inline constexpr int kNumSizes = 2;

enum class WordKind { Boundary, Filler, Spatial, Size, Color, Shape };

struct Vocab {
    static constexpr int kStart = 0;   // "<s>"
    static constexpr int kEnd = 1;     // "</s>"
    static constexpr int kA = 2;       // "a"
    static constexpr int kThe = 3;     // "the"
    static constexpr int kAnd = 4;     // "and"
    static constexpr int kLeftmost = 5;
    static constexpr int kRightmost = 6;
    static constexpr int kSizeBase = 7;   // "small", "large"
    static constexpr int kColorBase = 9;  // "red", "green", "blue", "yellow"
    static constexpr int kShapeBase = 13; // "circle" ... "ring"

    static int size();
    static const std::string& word(int id);
    static int id(const std::string& word);  // throws on unknown word
    static WordKind kind(int id);

    static int size_word(int size) { return kSizeBase + size; }
    static int color_word(int color) { return kColorBase + color; }
    static int shape_word(int shape) { return kShapeBase + shape; }
};

// ---------------------------------------------------------------------------
// Scenes.
// ---------------------------------------------------------------------------

struct SceneObject {
    int category = 0;  // shape
    int color = 0;
    int size = 0;  // 0 small, 1 large
    geom::BoxXYXY box;
};

// One text query over a scene. `text` carries token ids and spans only;
// embeddings are filled by the featurizer against the current token table.
// score/accepted are populated only in pseudo-labeled corpora.
struct SceneQuery {
    align::TextSequence text;
    std::vector<int> targets;  // object indices, ascending
    bool has_score = false;
    double score = 0.0;
    bool accepted = true;
};

struct Scene {
    uint64_t scene_id = 0;
    uint64_t seed = 0;  // per-scene stream; also seeds featurizer noise
    std::vector<SceneObject> objects;
    std::vector<SceneQuery> queries;
    align::TextSequence caption;
    std::vector<int> caption_span_targets;  // parallel to caption.spans
};

// Attribute combinations excluded from training-mode text.
struct SplitSpec {
    std::vector<std::pair<int, int>> held_out;  // (color, shape)
    bool is_held_out(int color, int shape) const;
};

enum class WorldMode { Train, HeldoutOnly, Unrestricted };

struct WorldConfig {
    int n_scenes = 5000;
    int min_objects = 6;
    int max_objects = 10;
    int n_queries = 4;
    int n_distractors = 2;
    double overlap_cap = 0.10;   // max pairwise IoU between placed objects
    double noise_sigma = 0.01;   // featurizer Gaussian noise
    double spatial_fraction = 0.25;  // probability of leftmost/rightmost templates
    double small_min = 0.05, small_max = 0.12;
    double large_min = 0.15, large_max = 0.30;
    WorldMode mode = WorldMode::Train;
    SplitSpec split;  // default filled by default_config()
    int d_raw = 48;
    int max_place_attempts = 1000;
    int max_scene_restarts = 64;

    void validate() const;  // throws on unsatisfiable/invalid settings
};

WorldConfig default_config();

WorldMode parse_mode(const std::string& s);
std::string mode_name(WorldMode m);

// Deterministic scene from (corpus_seed, scene_id, config).
Scene gen_scene(uint64_t corpus_seed, uint64_t scene_id, const WorldConfig& cfg);

std::vector<Scene> gen_corpus(uint64_t corpus_seed, const WorldConfig& cfg);

// ---------------------------------------------------------------------------
// Featurizers (the fixed stand-in for a detector backbone + text encoder).
// ---------------------------------------------------------------------------

struct InstanceHypothesis {
    Vec embed;          // raw instance features, d_raw
    double objectness_logit = 0.0;  // featurizer stand-in (+4 real, -4 distractor)
    geom::BoxCCWH box_pred;         // featurizer stand-in (true/distractor box)
    int object_index = -1;          // -1 for distractor hypotheses
};

// Raw feature layout (within d_raw, zero-padded to the configured width):
//   [0,8)   shape one-hot          [8,12)  color one-hot    [12,14) size one-hot
//   [14,18) box cx,cy,w,h          [18,22) logit-space cx,cy,w,h (scaled 1/4)
//   [22,30) shape counts /n        [30,34) color counts /n  [34,36) size counts /n
//   [36]    x-rank (strict-less count / max(1,n-1))         [37] y-rank
//   [38]    n_objects / max_objects
inline constexpr int kMinRawDims = 39;

class Featurizer {
  public:
    explicit Featurizer(WorldConfig cfg);

    // Pure given (obj, scene, noise_seed); increments the call counter.
    InstanceHypothesis featurize_instance(const SceneObject& obj, const Scene& scene,
                                          uint64_t noise_seed) const;

    // All real objects in order, then cfg.n_distractors distractor hypotheses.
    std::vector<InstanceHypothesis> featurize_scene(const Scene& scene) const;

    uint64_t calls() const { return calls_; }
    void reset_calls() const { calls_ = 0; }
    const WorldConfig& config() const { return cfg_; }

  private:
    InstanceHypothesis featurize_distractor(const Scene& scene, int k) const;

    WorldConfig cfg_;
    mutable uint64_t calls_ = 0;
};

// Wraps content ids with boundary tokens and looks up rows of `table`
// (vocab_size x d_tok). Throws on out-of-vocabulary ids.
align::TextSequence featurize_tokens(std::span<const int> content_ids, const Mat& table);

// Fills embeddings of an existing sequence (ids already include boundaries).
void fill_embeddings(align::TextSequence& text, const Mat& table);

// Whitespace tokenizer over the closed vocabulary (content words only).
std::vector<int> tokenize(const std::string& text);

// ---------------------------------------------------------------------------
// Corpus serialization: one JSON object per line, schema_version 1.
// ---------------------------------------------------------------------------

inline constexpr int kCorpusSchemaVersion = 1;

std::string scene_to_json(const Scene& s);
Scene scene_from_json(const std::string& line);

void save_corpus(const std::vector<Scene>& scenes, const std::string& path);
std::vector<Scene> load_corpus(const std::string& path);

}  // namespace xalign::world
