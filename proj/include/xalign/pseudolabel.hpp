#pragma once

// Pseudo object-language pairs from caption-only scenes: extract the noun
// phrases the caption grammar produced, ground each one with a trained model
// (argmax cosine over instance hypotheses), and emit a corpus that validates
// against the regular scene schema.

#include <string>
#include <vector>

#include "xalign/alignment.hpp"
#include "xalign/trainer.hpp"
#include "xalign/world.hpp"

namespace xalign::pseudo {

struct PseudoPair {
    uint64_t scene_id = 0;
    align::TokenSpan span;       // phrase position within the caption
    geom::BoxXYXY box;           // chosen predicted box
    double score = 0.0;          // pre-temperature cosine similarity
    bool accepted = false;       // score >= threshold
    int instance_index = -1;     // chosen hypothesis
    int object_index = -1;       // underlying object, -1 for distractors
};

// Noun-phrase spans of a grammar-generated caption: the "and"-separated
// segments between the boundary tokens. Throws if the caption does not parse
// (empty segment, missing boundaries, or a segment without a shape word).
std::vector<align::TokenSpan> extract_phrases(const align::TextSequence& caption);

// Grounds one phrase span: argmax over instance hypotheses of the cosine
// between the projected instance and the projected pooled span; ties broken
// by instance index. Throws if the scene yields no hypotheses.
PseudoPair pseudo_ground(const train::Model& model, const world::Scene& scene,
                         const align::TokenSpan& span, const world::Featurizer& feat,
                         double threshold);

// Default acceptance floor on the cosine (pre-temperature).
inline constexpr double kDefaultThreshold = 0.25;

// Grounds every caption phrase of every scene and writes a corpus in the
// regular scene schema: each scene keeps its objects and caption, and its
// queries are replaced by the pseudo pairs (phrase text, grounded target,
// {score, accepted}). Pairs grounded to a distractor get no target. Returns
// the pseudo corpus; `path` empty skips writing.
std::vector<world::Scene> emit_pseudo_corpus(const train::Model& model,
                                             const std::vector<world::Scene>& corpus,
                                             const world::Featurizer& feat,
                                             double threshold, const std::string& path);

}  // namespace xalign::pseudo
