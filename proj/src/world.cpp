#include "xalign/world.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace xalign::world {

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

namespace {

const std::vector<std::string>& word_table() {
    static const std::vector<std::string> words = {
        "<s>", "</s>", "a", "the", "and", "leftmost", "rightmost",
        "small", "large",
        "red", "green", "blue", "yellow",
        "circle", "square", "triangle", "star", "hexagon", "diamond", "cross", "ring"};
    return words;
}

const std::map<std::string, int>& word_ids() {
    static const std::map<std::string, int> ids = [] {
        std::map<std::string, int> m;
        for (int i = 0; i < int(word_table().size()); ++i) m[word_table()[size_t(i)]] = i;
        return m;
    }();
    return ids;
}

}  // namespace

int Vocab::size() { return int(word_table().size()); }

const std::string& Vocab::word(int id) {
    if (id < 0 || id >= size()) throw std::invalid_argument("Vocab::word: id out of range");
    return word_table()[size_t(id)];
}

int Vocab::id(const std::string& word) {
    auto it = word_ids().find(word);
    if (it == word_ids().end()) throw std::invalid_argument("unknown word: '" + word + "'");
    return it->second;
}

WordKind Vocab::kind(int id) {
    if (id == kStart || id == kEnd) return WordKind::Boundary;
    if (id == kA || id == kThe || id == kAnd) return WordKind::Filler;
    if (id == kLeftmost || id == kRightmost) return WordKind::Spatial;
    if (id >= kSizeBase && id < kSizeBase + kNumSizes) return WordKind::Size;
    if (id >= kColorBase && id < kColorBase + kNumColors) return WordKind::Color;
    if (id >= kShapeBase && id < kShapeBase + kNumShapes) return WordKind::Shape;
    throw std::invalid_argument("Vocab::kind: id out of range");
}

// ---------------------------------------------------------------------------
// Config
// ---------------------------------------------------------------------------

bool SplitSpec::is_held_out(int color, int shape) const {
    for (const auto& [c, s] : held_out)
        if (c == color && s == shape) return true;
    return false;
}

void WorldConfig::validate() const {
    if (n_scenes < 0) throw std::invalid_argument("world: n_scenes must be >= 0");
    if (min_objects < 1 || max_objects < min_objects)
        throw std::invalid_argument("world: need 1 <= min_objects <= max_objects");
    if (n_queries < 0 || n_distractors < 0)
        throw std::invalid_argument("world: negative query/distractor count");
    if (overlap_cap < 0.0 || overlap_cap > 1.0)
        throw std::invalid_argument("world: overlap_cap outside [0,1]");
    if (noise_sigma < 0.0) throw std::invalid_argument("world: negative noise_sigma");
    if (spatial_fraction < 0.0 || spatial_fraction > 1.0)
        throw std::invalid_argument("world: spatial_fraction outside [0,1]");
    if (!(small_min > 0.0 && small_min <= small_max && small_max < 1.0) ||
        !(large_min > 0.0 && large_min <= large_max && large_max < 1.0))
        throw std::invalid_argument("world: object extent ranges must lie in (0,1)");
    if (d_raw < kMinRawDims)
        throw std::invalid_argument("world: d_raw below minimum feature layout width");
    if (max_place_attempts < 1 || max_scene_restarts < 1)
        throw std::invalid_argument("world: attempt limits must be >= 1");
    std::set<std::pair<int, int>> seen;
    for (const auto& [c, s] : split.held_out) {
        if (c < 0 || c >= kNumColors || s < 0 || s >= kNumShapes)
            throw std::invalid_argument("world: held_out attribute out of range");
        if (!seen.insert({c, s}).second)
            throw std::invalid_argument("world: duplicate held_out combination");
    }
}

WorldConfig default_config() {
    WorldConfig cfg;
    cfg.split.held_out = {{0, 0}, {2, 3}, {1, 4}, {3, 6}};
    return cfg;
}

WorldMode parse_mode(const std::string& s) {
    if (s == "train") return WorldMode::Train;
    if (s == "heldout_only") return WorldMode::HeldoutOnly;
    if (s == "unrestricted") return WorldMode::Unrestricted;
    throw std::invalid_argument("world: unknown mode '" + s + "'");
}

std::string mode_name(WorldMode m) {
    switch (m) {
        case WorldMode::Train: return "train";
        case WorldMode::HeldoutOnly: return "heldout_only";
        case WorldMode::Unrestricted: return "unrestricted";
    }
    throw std::logic_error("mode_name: bad enum");
}

// ---------------------------------------------------------------------------
// Scene generation
// ---------------------------------------------------------------------------

namespace {

enum class Template {
    Shape, ColorShape, SizeShape, SizeColorShape,
    LeftShape, RightShape, LeftColorShape, RightColorShape,
};

bool has_color(Template t) {
    return t == Template::ColorShape || t == Template::SizeColorShape ||
           t == Template::LeftColorShape || t == Template::RightColorShape;
}
bool has_size(Template t) {
    return t == Template::SizeShape || t == Template::SizeColorShape;
}
bool is_spatial(Template t) {
    return t == Template::LeftShape || t == Template::RightShape ||
           t == Template::LeftColorShape || t == Template::RightColorShape;
}
bool is_rightmost(Template t) {
    return t == Template::RightShape || t == Template::RightColorShape;
}

Template drop_color(Template t) {
    switch (t) {
        case Template::ColorShape: return Template::Shape;
        case Template::SizeColorShape: return Template::SizeShape;
        case Template::LeftColorShape: return Template::LeftShape;
        case Template::RightColorShape: return Template::RightShape;
        default: return t;
    }
}

std::vector<int> phrase_ids(Template t, const SceneObject& o) {
    std::vector<int> ids;
    if (is_spatial(t)) {
        ids.push_back(Vocab::kThe);
        ids.push_back(is_rightmost(t) ? Vocab::kRightmost : Vocab::kLeftmost);
    } else {
        ids.push_back(Vocab::kA);
    }
    if (has_size(t)) ids.push_back(Vocab::size_word(o.size));
    if (has_color(t)) ids.push_back(Vocab::color_word(o.color));
    ids.push_back(Vocab::shape_word(o.category));
    return ids;
}

double center_x(const geom::BoxXYXY& b) { return 0.5 * (b.x1 + b.x2); }

std::vector<int> template_targets(Template t, const SceneObject& anchor, const Scene& scene) {
    std::vector<int> matches;
    for (int j = 0; j < int(scene.objects.size()); ++j) {
        const SceneObject& o = scene.objects[size_t(j)];
        if (o.category != anchor.category) continue;
        if (has_color(t) && o.color != anchor.color) continue;
        if (has_size(t) && o.size != anchor.size) continue;
        matches.push_back(j);
    }
    if (!is_spatial(t)) return matches;
    int best = matches[0];
    for (int j : matches) {
        const double cj = center_x(scene.objects[size_t(j)].box);
        const double cb = center_x(scene.objects[size_t(best)].box);
        if (is_rightmost(t) ? cj > cb : cj < cb) best = j;
    }
    return {best};
}

align::TextSequence make_query_text(const std::vector<int>& content) {
    align::TextSequence t;
    t.token_ids.push_back(Vocab::kStart);
    t.token_ids.insert(t.token_ids.end(), content.begin(), content.end());
    t.token_ids.push_back(Vocab::kEnd);
    t.has_boundary_tokens = true;
    t.spans.push_back({1, int(t.token_ids.size()) - 1, align::SpanKind::Phrase});
    return t;
}

bool place_objects(Rng& rng, const WorldConfig& cfg, std::vector<SceneObject>& out) {
    const int n = cfg.min_objects + int(rng.randint(uint64_t(cfg.max_objects - cfg.min_objects + 1)));
    out.clear();
    out.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i) {
        SceneObject o;
        // Resample attributes until the (shape, color, size) triple is unique
        // within the scene: no two objects look identical, so every caption
        // phrase can uniquely refer to its object. Symmetric rejection keeps
        // the attribute marginals uniform.
        for (int a = 0;; ++a) {
            o.category = int(rng.randint(kNumShapes));
            o.color = int(rng.randint(kNumColors));
            o.size = int(rng.randint(kNumSizes));
            bool dup = false;
            for (const SceneObject& prev : out)
                if (prev.category == o.category && prev.color == o.color && prev.size == o.size) {
                    dup = true;
                    break;
                }
            if (!dup) break;
            if (a >= cfg.max_place_attempts) return false;
        }
        const double lo = o.size == 0 ? cfg.small_min : cfg.large_min;
        const double hi = o.size == 0 ? cfg.small_max : cfg.large_max;
        bool placed = false;
        for (int a = 0; a < cfg.max_place_attempts; ++a) {
            const double w = rng.uniform(lo, hi);
            const double h = rng.uniform(lo, hi);
            const double cx = rng.uniform(w / 2.0, 1.0 - w / 2.0);
            const double cy = rng.uniform(h / 2.0, 1.0 - h / 2.0);
            const geom::BoxXYXY cand = geom::to_xyxy({cx, cy, w, h});
            bool ok = true;
            for (const SceneObject& prev : out)
                if (geom::iou(cand, prev.box) > cfg.overlap_cap) {
                    ok = false;
                    break;
                }
            if (ok) {
                o.box = cand;
                placed = true;
                break;
            }
        }
        if (!placed) return false;
        out.push_back(o);
    }
    return true;
}

}  // namespace

Scene gen_scene(uint64_t corpus_seed, uint64_t scene_id, const WorldConfig& cfg) {
    cfg.validate();
    Scene scene;
    scene.scene_id = scene_id;
    scene.seed = mix_seed(corpus_seed, scene_id);

    bool placed = false;
    Rng rng(scene.seed);
    for (int attempt = 0; attempt < cfg.max_scene_restarts; ++attempt) {
        rng = Rng(mix_seed(scene.seed, uint64_t(attempt)));
        if (place_objects(rng, cfg, scene.objects)) {
            placed = true;
            break;
        }
    }
    if (!placed)
        throw std::runtime_error(
            "gen_scene: unsatisfiable config — could not place objects under the overlap cap");

    // Held-out evaluation scenes must contain at least one held-out object.
    if (cfg.mode == WorldMode::HeldoutOnly) {
        if (cfg.split.held_out.empty())
            throw std::invalid_argument("gen_scene: heldout_only mode with empty held-out set");
        bool any = false;
        for (const SceneObject& o : scene.objects)
            if (cfg.split.is_held_out(o.color, o.category)) any = true;
        if (!any) {
            // Recolor one object to a held-out combination, keeping the
            // all-triples-distinct scene invariant.
            bool done = false;
            for (int a = 0; a < cfg.max_place_attempts && !done; ++a) {
                SceneObject& o = scene.objects[rng.randint(scene.objects.size())];
                const auto& [c, s] = cfg.split.held_out[rng.randint(cfg.split.held_out.size())];
                bool dup = false;
                for (const SceneObject& other : scene.objects)
                    if (&other != &o && other.category == s && other.color == c &&
                        other.size == o.size)
                        dup = true;
                if (dup) continue;
                o.color = c;
                o.category = s;
                done = true;
            }
            if (!done)
                throw std::runtime_error(
                    "gen_scene: could not inject a held-out object without duplicating a triple");
        }
    }

    // Caption: one phrase per object, joined by "and". Phrases escalate to the
    // more specific template when the chosen one would also describe another
    // object — referring phrases should identify their object when possible.
    scene.caption.token_ids.push_back(Vocab::kStart);
    scene.caption.has_boundary_tokens = true;
    const auto phrase_ambiguous = [&scene](Template tt, int self) {
        const SceneObject& a = scene.objects[size_t(self)];
        for (int j = 0; j < int(scene.objects.size()); ++j) {
            if (j == self) continue;
            const SceneObject& b = scene.objects[size_t(j)];
            if (b.category != a.category) continue;
            if (has_color(tt) && b.color != a.color) continue;
            if (has_size(tt) && b.size != a.size) continue;
            return true;
        }
        return false;
    };
    for (int i = 0; i < int(scene.objects.size()); ++i) {
        const SceneObject& o = scene.objects[size_t(i)];
        Template t = rng.uniform() < 0.5 ? Template::ColorShape : Template::SizeColorShape;
        if (t == Template::ColorShape && phrase_ambiguous(t, i)) t = Template::SizeColorShape;
        if (cfg.mode == WorldMode::Train && cfg.split.is_held_out(o.color, o.category))
            t = drop_color(t);
        if (i > 0) scene.caption.token_ids.push_back(Vocab::kAnd);
        const std::vector<int> ids = phrase_ids(t, o);
        const int start = int(scene.caption.token_ids.size());
        scene.caption.token_ids.insert(scene.caption.token_ids.end(), ids.begin(), ids.end());
        scene.caption.spans.push_back({start, start + int(ids.size()), align::SpanKind::Phrase});
        scene.caption_span_targets.push_back(i);
    }
    scene.caption.token_ids.push_back(Vocab::kEnd);

    // Queries.
    std::vector<int> heldout_objs;
    for (int i = 0; i < int(scene.objects.size()); ++i)
        if (cfg.split.is_held_out(scene.objects[size_t(i)].color, scene.objects[size_t(i)].category))
            heldout_objs.push_back(i);
    for (int q = 0; q < cfg.n_queries; ++q) {
        SceneQuery query;
        int anchor_idx;
        Template t;
        if (cfg.mode == WorldMode::HeldoutOnly) {
            anchor_idx = heldout_objs[rng.randint(heldout_objs.size())];
            t = rng.randint(2) == 0 ? Template::ColorShape : Template::SizeColorShape;
        } else {
            anchor_idx = int(rng.randint(scene.objects.size()));
            if (rng.uniform() < cfg.spatial_fraction) {
                static constexpr Template kSpatial[4] = {
                    Template::LeftShape, Template::RightShape,
                    Template::LeftColorShape, Template::RightColorShape};
                t = kSpatial[rng.randint(4)];
            } else {
                static constexpr Template kPlain[4] = {
                    Template::Shape, Template::ColorShape,
                    Template::SizeShape, Template::SizeColorShape};
                t = kPlain[rng.randint(4)];
            }
            const SceneObject& anchor = scene.objects[size_t(anchor_idx)];
            if (cfg.mode == WorldMode::Train && has_color(t) &&
                cfg.split.is_held_out(anchor.color, anchor.category))
                t = drop_color(t);
        }
        const SceneObject& anchor = scene.objects[size_t(anchor_idx)];
        query.text = make_query_text(phrase_ids(t, anchor));
        query.targets = template_targets(t, anchor, scene);
        scene.queries.push_back(std::move(query));
    }
    return scene;
}

std::vector<Scene> gen_corpus(uint64_t corpus_seed, const WorldConfig& cfg) {
    cfg.validate();
    std::vector<Scene> scenes;
    scenes.reserve(size_t(cfg.n_scenes));
    for (int i = 0; i < cfg.n_scenes; ++i)
        scenes.push_back(gen_scene(corpus_seed, uint64_t(i), cfg));
    return scenes;
}

// ---------------------------------------------------------------------------
// Featurizer
// ---------------------------------------------------------------------------

namespace {

double logit(double p) {
    const double c = std::clamp(p, 1e-4, 1.0 - 1e-4);
    return std::log(c / (1.0 - c));
}

// Shared raw-feature assembly for real objects and distractors.
Vec assemble_features(const WorldConfig& cfg, const Scene& scene, const geom::BoxCCWH& box,
                      int category, int color, int size, bool is_real, uint64_t noise_seed) {
    const int n = int(scene.objects.size());
    Vec x(size_t(cfg.d_raw), 0.0);
    if (is_real) {
        x[size_t(category)] = 1.0;
        x[size_t(8 + color)] = 1.0;
        x[size_t(12 + size)] = 1.0;
    }
    x[14] = box.cx;
    x[15] = box.cy;
    x[16] = box.w;
    x[17] = box.h;
    // Logit-space geometry is scaled down so its magnitude matches the one-hot
    // blocks; otherwise a single global learning rate overdrives the box head
    // (effective step scales with ||x||^2).
    x[18] = 0.25 * logit(box.cx);
    x[19] = 0.25 * logit(box.cy);
    x[20] = 0.25 * logit(box.w);
    x[21] = 0.25 * logit(box.h);
    for (const SceneObject& o : scene.objects) {
        x[size_t(22 + o.category)] += 1.0 / n;
        x[size_t(30 + o.color)] += 1.0 / n;
        x[size_t(34 + o.size)] += 1.0 / n;
    }
    int rank_x = 0, rank_y = 0;
    for (const SceneObject& o : scene.objects) {
        if (0.5 * (o.box.x1 + o.box.x2) < box.cx) ++rank_x;
        if (0.5 * (o.box.y1 + o.box.y2) < box.cy) ++rank_y;
    }
    const double denom = std::max(1, n - 1);
    x[36] = rank_x / denom;
    x[37] = rank_y / denom;
    x[38] = double(n) / double(cfg.max_objects);
    if (cfg.noise_sigma > 0.0) {
        Rng noise(noise_seed);
        for (double& v : x) v += cfg.noise_sigma * noise.normal();
    }
    return x;
}

constexpr uint64_t kDistractorSalt = 0xD157D157u;

}  // namespace

Featurizer::Featurizer(WorldConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

InstanceHypothesis Featurizer::featurize_instance(const SceneObject& obj, const Scene& scene,
                                                  uint64_t noise_seed) const {
    int idx = -1;
    for (int i = 0; i < int(scene.objects.size()); ++i) {
        const SceneObject& o = scene.objects[size_t(i)];
        if (o.category == obj.category && o.color == obj.color && o.size == obj.size &&
            o.box.x1 == obj.box.x1 && o.box.y1 == obj.box.y1 && o.box.x2 == obj.box.x2 &&
            o.box.y2 == obj.box.y2) {
            idx = i;
            break;
        }
    }
    if (idx < 0) throw std::invalid_argument("featurize_instance: object not in scene");
    ++calls_;
    InstanceHypothesis h;
    h.object_index = idx;
    h.box_pred = geom::to_ccwh(obj.box);
    h.objectness_logit = 4.0;
    h.embed = assemble_features(cfg_, scene, h.box_pred, obj.category, obj.color, obj.size,
                                /*is_real=*/true, noise_seed);
    return h;
}

InstanceHypothesis Featurizer::featurize_distractor(const Scene& scene, int k) const {
    ++calls_;
    const uint64_t seed = mix_seed(scene.seed, kDistractorSalt + uint64_t(k));
    Rng rng(seed);
    const double w = rng.uniform(cfg_.small_min, cfg_.large_max);
    const double h = rng.uniform(cfg_.small_min, cfg_.large_max);
    const geom::BoxCCWH box{rng.uniform(w / 2.0, 1.0 - w / 2.0),
                            rng.uniform(h / 2.0, 1.0 - h / 2.0), w, h};
    InstanceHypothesis hyp;
    hyp.object_index = -1;
    hyp.box_pred = box;
    hyp.objectness_logit = -4.0;
    hyp.embed = assemble_features(cfg_, scene, box, 0, 0, 0, /*is_real=*/false,
                                  mix_seed(seed, 1));
    return hyp;
}

std::vector<InstanceHypothesis> Featurizer::featurize_scene(const Scene& scene) const {
    std::vector<InstanceHypothesis> out;
    out.reserve(scene.objects.size() + size_t(cfg_.n_distractors));
    for (size_t i = 0; i < scene.objects.size(); ++i)
        out.push_back(featurize_instance(scene.objects[i], scene, mix_seed(scene.seed, i)));
    for (int k = 0; k < cfg_.n_distractors; ++k) out.push_back(featurize_distractor(scene, k));
    return out;
}

align::TextSequence featurize_tokens(std::span<const int> content_ids, const Mat& table) {
    align::TextSequence t;
    t.token_ids.reserve(content_ids.size() + 2);
    t.token_ids.push_back(Vocab::kStart);
    for (int id : content_ids) t.token_ids.push_back(id);
    t.token_ids.push_back(Vocab::kEnd);
    t.has_boundary_tokens = true;
    fill_embeddings(t, table);
    return t;
}

void fill_embeddings(align::TextSequence& text, const Mat& table) {
    if (table.rows != Vocab::size())
        throw std::invalid_argument("featurize_tokens: table row count != vocabulary size");
    text.token_embeds.clear();
    text.token_embeds.reserve(text.token_ids.size());
    for (int id : text.token_ids) {
        if (id < 0 || id >= table.rows)
            throw std::invalid_argument("featurize_tokens: token id out of vocabulary");
        const double* row = table.row(id);
        text.token_embeds.emplace_back(row, row + table.cols);
    }
}

std::vector<int> tokenize(const std::string& text) {
    std::vector<int> ids;
    std::istringstream in(text);
    std::string word;
    while (in >> word) ids.push_back(Vocab::id(word));
    return ids;
}

// ---------------------------------------------------------------------------
// Corpus serialization
// ---------------------------------------------------------------------------

namespace {

using ordered_json = nlohmann::ordered_json;

void require_keys(const ordered_json& j, const std::set<std::string>& required,
                  const std::set<std::string>& optional, const std::string& where) {
    for (const auto& [key, _] : j.items())
        if (!required.count(key) && !optional.count(key))
            throw std::runtime_error("corpus: unknown key '" + key + "' in " + where);
    for (const std::string& key : required)
        if (!j.contains(key))
            throw std::runtime_error("corpus: missing key '" + key + "' in " + where);
}

ordered_json tokens_json(const std::vector<int>& ids) {
    ordered_json arr = ordered_json::array();
    for (int id : ids) arr.push_back(Vocab::word(id));
    return arr;
}

std::vector<int> tokens_from_json(const ordered_json& arr) {
    std::vector<int> ids;
    for (const auto& w : arr) ids.push_back(Vocab::id(w.get<std::string>()));
    return ids;
}

}  // namespace

std::string scene_to_json(const Scene& s) {
    ordered_json j;
    j["schema_version"] = kCorpusSchemaVersion;
    j["scene_id"] = s.scene_id;
    j["seed"] = s.seed;
    j["objects"] = ordered_json::array();
    for (const SceneObject& o : s.objects) {
        ordered_json jo;
        jo["category"] = Vocab::word(Vocab::shape_word(o.category));
        jo["color"] = Vocab::word(Vocab::color_word(o.color));
        jo["size"] = Vocab::word(Vocab::size_word(o.size));
        jo["box"] = {o.box.x1, o.box.y1, o.box.x2, o.box.y2};
        j["objects"].push_back(jo);
    }
    j["queries"] = ordered_json::array();
    for (const SceneQuery& q : s.queries) {
        ordered_json jq;
        jq["tokens"] = tokens_json(q.text.token_ids);
        jq["targets"] = q.targets;
        if (q.has_score) {
            jq["score"] = q.score;
            jq["accepted"] = q.accepted;
        }
        j["queries"].push_back(jq);
    }
    ordered_json jc;
    jc["tokens"] = tokens_json(s.caption.token_ids);
    jc["spans"] = ordered_json::array();
    for (size_t i = 0; i < s.caption.spans.size(); ++i) {
        const align::TokenSpan& sp = s.caption.spans[i];
        jc["spans"].push_back({{"start", sp.start},
                               {"end", sp.end},
                               {"target", s.caption_span_targets[i]}});
    }
    j["caption"] = jc;
    return j.dump();
}

Scene scene_from_json(const std::string& line) {
    const ordered_json j = ordered_json::parse(line);
    require_keys(j, {"schema_version", "scene_id", "seed", "objects", "queries", "caption"}, {},
                 "scene");
    if (j["schema_version"].get<int>() != kCorpusSchemaVersion)
        throw std::runtime_error("corpus: unsupported schema_version");
    Scene s;
    s.scene_id = j["scene_id"].get<uint64_t>();
    s.seed = j["seed"].get<uint64_t>();
    for (const auto& jo : j["objects"]) {
        require_keys(jo, {"category", "color", "size", "box"}, {}, "object");
        SceneObject o;
        o.category = Vocab::id(jo["category"].get<std::string>()) - Vocab::kShapeBase;
        o.color = Vocab::id(jo["color"].get<std::string>()) - Vocab::kColorBase;
        o.size = Vocab::id(jo["size"].get<std::string>()) - Vocab::kSizeBase;
        if (o.category < 0 || o.category >= kNumShapes || o.color < 0 || o.color >= kNumColors ||
            o.size < 0 || o.size >= kNumSizes)
            throw std::runtime_error("corpus: attribute word of wrong kind");
        const auto& b = jo["box"];
        if (b.size() != 4) throw std::runtime_error("corpus: box must have 4 coordinates");
        o.box = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
        if (!o.box.valid()) throw std::runtime_error("corpus: invalid object box");
        s.objects.push_back(o);
    }
    for (const auto& jq : j["queries"]) {
        require_keys(jq, {"tokens", "targets"}, {"score", "accepted"}, "query");
        SceneQuery q;
        q.text.token_ids = tokens_from_json(jq["tokens"]);
        const int n = int(q.text.token_ids.size());
        if (n < 3 || q.text.token_ids.front() != Vocab::kStart ||
            q.text.token_ids.back() != Vocab::kEnd)
            throw std::runtime_error("corpus: query tokens must be <s> ... </s>");
        q.text.has_boundary_tokens = true;
        q.text.spans.push_back({1, n - 1, align::SpanKind::Phrase});
        for (const auto& t : jq["targets"]) {
            const int idx = t.get<int>();
            if (idx < 0 || idx >= int(s.objects.size()))
                throw std::runtime_error("corpus: query target out of range");
            q.targets.push_back(idx);
        }
        if (jq.contains("score") != jq.contains("accepted"))
            throw std::runtime_error("corpus: score and accepted must appear together");
        if (jq.contains("score")) {
            q.has_score = true;
            q.score = jq["score"].get<double>();
            q.accepted = jq["accepted"].get<bool>();
        }
        s.queries.push_back(std::move(q));
    }
    const auto& jc = j["caption"];
    require_keys(jc, {"tokens", "spans"}, {}, "caption");
    s.caption.token_ids = tokens_from_json(jc["tokens"]);
    s.caption.has_boundary_tokens = true;
    const int cn = int(s.caption.token_ids.size());
    if (cn < 2 || s.caption.token_ids.front() != Vocab::kStart ||
        s.caption.token_ids.back() != Vocab::kEnd)
        throw std::runtime_error("corpus: caption tokens must be <s> ... </s>");
    for (const auto& js : jc["spans"]) {
        require_keys(js, {"start", "end", "target"}, {}, "span");
        const int start = js["start"].get<int>(), end = js["end"].get<int>();
        const int target = js["target"].get<int>();
        if (start < 1 || end > cn - 1 || start >= end)
            throw std::runtime_error("corpus: caption span out of bounds");
        if (target < 0 || target >= int(s.objects.size()))
            throw std::runtime_error("corpus: caption span target out of range");
        s.caption.spans.push_back({start, end, align::SpanKind::Phrase});
        s.caption_span_targets.push_back(target);
    }
    return s;
}

void save_corpus(const std::vector<Scene>& scenes, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("save_corpus: cannot open " + path);
    for (const Scene& s : scenes) out << scene_to_json(s) << '\n';
    if (!out) throw std::runtime_error("save_corpus: write failed for " + path);
}

std::vector<Scene> load_corpus(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("load_corpus: cannot open " + path);
    std::vector<Scene> scenes;
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        try {
            scenes.push_back(scene_from_json(line));
        } catch (const std::exception& e) {
            throw std::runtime_error("load_corpus: " + path + ":" + std::to_string(line_no) +
                                     ": " + e.what());
        }
    }
    return scenes;
}

}  // namespace xalign::world
