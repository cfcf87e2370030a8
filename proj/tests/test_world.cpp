#include <doctest.h>

#include <xalign/common.hpp>
#include <xalign/geometry.hpp>
#include <xalign/world.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <set>
#include <string>
#include <vector>

using namespace xalign;
using world::Featurizer;
using world::InstanceHypothesis;
using world::Scene;
using world::SceneObject;
using world::SceneQuery;
using world::Vocab;
using world::WordKind;
using world::WorldConfig;
using world::WorldMode;

namespace {

// Independent re-derivation of a query's target set from its tokens alone:
// parse attribute words out of the phrase, match against the object list,
// then apply the spatial reduction. No shared code with the generator.
std::vector<int> targets_from_tokens(const Scene& sc, const SceneQuery& q) {
    bool leftmost = false, rightmost = false;
    int color = -1, size = -1, shape = -1;
    for (int id : q.text.token_ids) {
        switch (Vocab::kind(id)) {
            case WordKind::Spatial:
                (id == Vocab::kLeftmost ? leftmost : rightmost) = true;
                break;
            case WordKind::Size: size = id - Vocab::kSizeBase; break;
            case WordKind::Color: color = id - Vocab::kColorBase; break;
            case WordKind::Shape: shape = id - Vocab::kShapeBase; break;
            default: break;
        }
    }
    REQUIRE(shape >= 0);
    std::vector<int> matches;
    for (int i = 0; i < int(sc.objects.size()); ++i) {
        const SceneObject& o = sc.objects[size_t(i)];
        if (o.category != shape) continue;
        if (color >= 0 && o.color != color) continue;
        if (size >= 0 && o.size != size) continue;
        matches.push_back(i);
    }
    if ((leftmost || rightmost) && !matches.empty()) {
        int best = matches[0];
        auto cx = [&](int i) {
            return 0.5 * (sc.objects[size_t(i)].box.x1 + sc.objects[size_t(i)].box.x2);
        };
        for (int i : matches)
            if (rightmost ? cx(i) > cx(best) : cx(i) < cx(best)) best = i;
        return {best};
    }
    return matches;
}

struct SpanWords {
    int color = -1, size = -1, shape = -1;
};

SpanWords parse_span(const align::TextSequence& t, const align::TokenSpan& sp) {
    SpanWords w;
    for (int p = sp.start; p < sp.end; ++p) {
        const int id = t.token_ids[size_t(p)];
        switch (Vocab::kind(id)) {
            case WordKind::Size: w.size = id - Vocab::kSizeBase; break;
            case WordKind::Color: w.color = id - Vocab::kColorBase; break;
            case WordKind::Shape: w.shape = id - Vocab::kShapeBase; break;
            default: break;
        }
    }
    return w;
}

std::string temp_path(const std::string& stem) {
    return (std::filesystem::temp_directory_path() / stem).string();
}

}  // namespace

TEST_CASE("vocab: word/id round trip and kinds") {
    for (int id = 0; id < Vocab::size(); ++id) CHECK(Vocab::id(Vocab::word(id)) == id);
    CHECK_THROWS_AS(Vocab::id("walrus"), std::exception);
    CHECK(Vocab::kind(Vocab::kStart) == WordKind::Boundary);
    CHECK(Vocab::kind(Vocab::kThe) == WordKind::Filler);
    CHECK(Vocab::kind(Vocab::kLeftmost) == WordKind::Spatial);
    CHECK(Vocab::kind(Vocab::size_word(1)) == WordKind::Size);
    CHECK(Vocab::kind(Vocab::color_word(2)) == WordKind::Color);
    CHECK(Vocab::kind(Vocab::shape_word(7)) == WordKind::Shape);

    std::vector<int> ids = world::tokenize("the small red circle");
    CHECK(ids == std::vector<int>{Vocab::kThe, Vocab::size_word(0), Vocab::color_word(0),
                                  Vocab::shape_word(0)});
    CHECK_THROWS_AS(world::tokenize("a purple circle"), std::exception);
}

TEST_CASE("config validation rejects bad settings") {
    WorldConfig ok = world::default_config();
    CHECK_NOTHROW(ok.validate());

    WorldConfig c1 = ok;
    c1.min_objects = 5;
    c1.max_objects = 3;
    CHECK_THROWS_AS(c1.validate(), std::exception);

    WorldConfig c2 = ok;
    c2.d_raw = world::kMinRawDims - 1;
    CHECK_THROWS_AS(c2.validate(), std::exception);

    WorldConfig c3 = ok;
    c3.overlap_cap = 1.5;
    CHECK_THROWS_AS(c3.validate(), std::exception);

    WorldConfig c4 = ok;
    c4.split.held_out.push_back(c4.split.held_out.front());  // duplicate
    CHECK_THROWS_AS(c4.validate(), std::exception);

    WorldConfig c5 = ok;
    c5.split.held_out.push_back({0, world::kNumShapes});  // out of range
    CHECK_THROWS_AS(c5.validate(), std::exception);

    CHECK_THROWS_AS(world::parse_mode("sideways"), std::exception);
    CHECK(world::parse_mode("train") == WorldMode::Train);
    CHECK(world::mode_name(WorldMode::HeldoutOnly) == "heldout_only");
}

TEST_CASE("gen_scene: bit-exact determinism") {
    WorldConfig cfg = world::default_config();
    for (uint64_t id : {0ULL, 3ULL, 17ULL}) {
        Scene a = world::gen_scene(99, id, cfg);
        Scene b = world::gen_scene(99, id, cfg);
        CHECK(world::scene_to_json(a) == world::scene_to_json(b));
    }
    // Different scene ids give different scenes.
    CHECK(world::scene_to_json(world::gen_scene(99, 0, cfg)) !=
          world::scene_to_json(world::gen_scene(99, 1, cfg)));
}

TEST_CASE("gen_scene: single object forces the only possible query") {
    WorldConfig cfg = world::default_config();
    cfg.min_objects = 1;
    cfg.max_objects = 1;
    cfg.n_queries = 1;
    cfg.spatial_fraction = 0.0;
    Scene s = world::gen_scene(7, 0, cfg);
    REQUIRE(s.objects.size() == 1);
    REQUIRE(s.queries.size() == 1);
    CHECK(s.queries[0].targets == std::vector<int>{0});
    REQUIRE(s.caption.spans.size() == 1);
    CHECK(s.caption_span_targets == std::vector<int>{0});
}

TEST_CASE("gen_scene: structural invariants over a corpus") {
    WorldConfig cfg = world::default_config();
    cfg.n_scenes = 200;
    std::vector<Scene> corpus = world::gen_corpus(5, cfg);
    REQUIRE(int(corpus.size()) == cfg.n_scenes);

    for (const Scene& s : corpus) {
        const int n = int(s.objects.size());
        CHECK(n >= cfg.min_objects);
        CHECK(n <= cfg.max_objects);

        std::set<std::tuple<int, int, int>> triples;
        for (const SceneObject& o : s.objects) {
            CHECK(o.box.valid());
            CHECK(o.box.x1 >= 0.0);
            CHECK(o.box.y1 >= 0.0);
            CHECK(o.box.x2 <= 1.0);
            CHECK(o.box.y2 <= 1.0);
            // No two objects in a scene look identical.
            CHECK(triples.insert({o.category, o.color, o.size}).second);
        }
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j)
                CHECK(geom::iou(s.objects[size_t(i)].box, s.objects[size_t(j)].box) <=
                      cfg.overlap_cap + 1e-12);

        REQUIRE(int(s.queries.size()) == cfg.n_queries);
        for (const SceneQuery& q : s.queries) {
            REQUIRE(!q.targets.empty());
            for (int t : q.targets) {
                CHECK(t >= 0);
                CHECK(t < n);
            }
            CHECK(std::is_sorted(q.targets.begin(), q.targets.end()));
            // Dual route: recompute the targets from the tokens alone.
            CHECK(q.targets == targets_from_tokens(s, q));
        }

        // Caption: one phrase per object, span words match the target object.
        REQUIRE(s.caption.spans.size() == s.caption_span_targets.size());
        CHECK(int(s.caption.spans.size()) == n);
        for (size_t k = 0; k < s.caption.spans.size(); ++k) {
            const int tgt = s.caption_span_targets[k];
            REQUIRE(tgt >= 0);
            REQUIRE(tgt < n);
            const SceneObject& o = s.objects[size_t(tgt)];
            SpanWords w = parse_span(s.caption, s.caption.spans[k]);
            CHECK(w.shape == o.category);
            if (w.color >= 0) CHECK(w.color == o.color);
            if (w.size >= 0) CHECK(w.size == o.size);
            // A phrase that names a color identifies its object uniquely.
            if (w.color >= 0) {
                int matches = 0;
                for (const SceneObject& other : s.objects)
                    if (other.category == w.shape && other.color == w.color &&
                        (w.size < 0 || other.size == w.size))
                        ++matches;
                CHECK(matches == 1);
            }
        }
    }
}

TEST_CASE("gen_scene: unsatisfiable placement throws") {
    WorldConfig cfg = world::default_config();
    cfg.min_objects = 2;
    cfg.max_objects = 2;
    cfg.large_min = 0.9;
    cfg.large_max = 0.9;
    cfg.small_min = 0.89;
    cfg.small_max = 0.9;
    cfg.overlap_cap = 0.01;
    cfg.max_place_attempts = 50;
    cfg.max_scene_restarts = 4;
    CHECK_THROWS_AS(world::gen_scene(1, 0, cfg), std::exception);
}

TEST_CASE("attribute marginals stay uniform (3-sigma and chi-square)") {
    WorldConfig cfg = world::default_config();
    cfg.n_scenes = 10000;
    cfg.n_queries = 0;  // attribute statistics only; skip query generation
    std::vector<Scene> corpus = world::gen_corpus(123, cfg);

    std::vector<long long> shape(world::kNumShapes, 0), color(world::kNumColors, 0),
        size(world::kNumSizes, 0);
    long long total = 0;
    for (const Scene& s : corpus)
        for (const SceneObject& o : s.objects) {
            ++shape[size_t(o.category)];
            ++color[size_t(o.color)];
            ++size[size_t(o.size)];
            ++total;
        }

    // 99.9% chi-square critical values for df = bins - 1.
    auto check_uniform = [&](const std::vector<long long>& counts, double crit) {
        const double k = double(counts.size());
        const double expect = double(total) / k;
        const double sigma = std::sqrt(double(total) * (1.0 / k) * (1.0 - 1.0 / k));
        double chi2 = 0.0;
        for (long long c : counts) {
            CHECK(std::abs(double(c) - expect) <= 3.0 * sigma);
            chi2 += (double(c) - expect) * (double(c) - expect) / expect;
        }
        CHECK(chi2 < crit);
    };
    check_uniform(shape, 24.322);  // df = 7
    check_uniform(color, 16.266);  // df = 3
    check_uniform(size, 10.828);   // df = 1
}

TEST_CASE("featurize_instance: determinism and noise control") {
    WorldConfig cfg = world::default_config();
    cfg.noise_sigma = 0.0;
    Scene s = world::gen_scene(11, 0, cfg);
    Featurizer feat(cfg);
    InstanceHypothesis a = feat.featurize_instance(s.objects[0], s, 42);
    InstanceHypothesis b = feat.featurize_instance(s.objects[0], s, 42);
    CHECK(a.embed == b.embed);  // bit-identical at sigma = 0
    CHECK(a.objectness_logit == 4.0);
    CHECK(a.object_index == 0);

    WorldConfig noisy = cfg;
    noisy.noise_sigma = 0.05;
    Featurizer nf(noisy);
    InstanceHypothesis n1 = nf.featurize_instance(s.objects[0], s, 42);
    InstanceHypothesis n2 = nf.featurize_instance(s.objects[0], s, 42);
    InstanceHypothesis n3 = nf.featurize_instance(s.objects[0], s, 43);
    CHECK(n1.embed == n2.embed);  // same noise seed, same stream
    CHECK(n1.embed != n3.embed);

    SceneObject ghost = s.objects[0];
    ghost.box.x1 += 0.001;
    CHECK_THROWS_AS(feat.featurize_instance(ghost, s, 0), std::exception);
}

TEST_CASE("featurize_instance: color difference touches only the color block") {
    // Hand-built scene: two objects identical except for color (same box, so
    // ranks and geometry agree; same scene, so context counts agree).
    Scene s;
    s.scene_id = 1;
    s.seed = 1;
    SceneObject a;
    a.category = 2;
    a.color = 0;
    a.size = 1;
    a.box = {0.2, 0.2, 0.5, 0.5};
    SceneObject b = a;
    b.color = 3;
    s.objects = {a, b};

    WorldConfig cfg = world::default_config();
    cfg.noise_sigma = 0.0;
    Featurizer feat(cfg);
    const Vec ea = feat.featurize_instance(a, s, 0).embed;
    const Vec eb = feat.featurize_instance(b, s, 0).embed;
    REQUIRE(int(ea.size()) == cfg.d_raw);
    for (int k = 0; k < cfg.d_raw; ++k) {
        if (k >= 8 && k < 12) continue;
        CHECK(ea[size_t(k)] == eb[size_t(k)]);
    }
    CHECK(ea[8 + 0] == 1.0);
    CHECK(eb[8 + 3] == 1.0);
    CHECK(ea[8 + 3] == 0.0);
    CHECK(eb[8 + 0] == 0.0);
}

TEST_CASE("featurize_instance: x-rank block matches an independent sort") {
    WorldConfig cfg = world::default_config();
    cfg.noise_sigma = 0.0;
    Scene s = world::gen_scene(21, 4, cfg);
    Featurizer feat(cfg);
    const int n = int(s.objects.size());
    for (int i = 0; i < n; ++i) {
        const InstanceHypothesis h = feat.featurize_instance(s.objects[size_t(i)], s, 0);
        auto cx = [&](const SceneObject& o) { return 0.5 * (o.box.x1 + o.box.x2); };
        auto cy = [&](const SceneObject& o) { return 0.5 * (o.box.y1 + o.box.y2); };
        int below_x = 0, below_y = 0;
        for (const SceneObject& o : s.objects) {
            if (cx(o) < cx(s.objects[size_t(i)])) ++below_x;
            if (cy(o) < cy(s.objects[size_t(i)])) ++below_y;
        }
        const double denom = double(std::max(1, n - 1));
        CHECK(h.embed[36] == doctest::Approx(below_x / denom).epsilon(1e-12));
        CHECK(h.embed[37] == doctest::Approx(below_y / denom).epsilon(1e-12));
        CHECK(h.embed[38] == doctest::Approx(double(n) / cfg.max_objects).epsilon(1e-12));
    }
}

TEST_CASE("featurize_scene: real objects then distractors; call counter") {
    WorldConfig cfg = world::default_config();
    Scene s = world::gen_scene(31, 2, cfg);
    Featurizer feat(cfg);
    feat.reset_calls();
    std::vector<InstanceHypothesis> hyps = feat.featurize_scene(s);
    REQUIRE(int(hyps.size()) == int(s.objects.size()) + cfg.n_distractors);
    CHECK(feat.calls() == hyps.size());
    for (size_t i = 0; i < s.objects.size(); ++i) {
        CHECK(hyps[i].object_index == int(i));
        CHECK(hyps[i].objectness_logit == 4.0);
    }
    for (size_t i = s.objects.size(); i < hyps.size(); ++i) {
        CHECK(hyps[i].object_index == -1);
        CHECK(hyps[i].objectness_logit == -4.0);
        CHECK(geom::to_xyxy(hyps[i].box_pred).valid());
    }
}

TEST_CASE("featurize_tokens: table lookup semantics") {
    Rng rng(3);
    Mat table(Vocab::size(), 5);
    for (double& v : table.data) v = rng.normal();

    // Single content token: its row (plus boundary rows around it).
    std::vector<int> one = {Vocab::color_word(1)};
    align::TextSequence t = world::featurize_tokens(one, table);
    REQUIRE(t.size() == 3);
    CHECK(t.has_boundary_tokens);
    CHECK(t.token_ids.front() == Vocab::kStart);
    CHECK(t.token_ids.back() == Vocab::kEnd);
    for (int c = 0; c < 5; ++c) {
        CHECK(t.token_embeds[1][size_t(c)] == table.at(Vocab::color_word(1), c));
        CHECK(t.token_embeds[0][size_t(c)] == table.at(Vocab::kStart, c));
    }

    // Permuting two content tokens permutes the embedding rows.
    std::vector<int> ab = {Vocab::color_word(0), Vocab::shape_word(2)};
    std::vector<int> ba = {Vocab::shape_word(2), Vocab::color_word(0)};
    align::TextSequence tab = world::featurize_tokens(ab, table);
    align::TextSequence tba = world::featurize_tokens(ba, table);
    CHECK(tab.token_embeds[1] == tba.token_embeds[2]);
    CHECK(tab.token_embeds[2] == tba.token_embeds[1]);

    // After a table update, re-featurization reflects the new rows exactly.
    table.at(Vocab::color_word(0), 2) += 5.0;
    align::TextSequence t2 = world::featurize_tokens(ab, table);
    CHECK(t2.token_embeds[1][2] == table.at(Vocab::color_word(0), 2));
    CHECK(t2.token_embeds[1][2] != tab.token_embeds[1][2]);

    // Unknown ids and wrong-size tables are rejected.
    std::vector<int> bad = {Vocab::size() + 3};
    CHECK_THROWS_AS(world::featurize_tokens(bad, table), std::exception);
    Mat small(Vocab::size() - 1, 5);
    CHECK_THROWS_AS(world::featurize_tokens(one, small), std::exception);
}

TEST_CASE("held-out pairs never appear in training text") {
    WorldConfig cfg = world::default_config();
    cfg.n_scenes = 300;
    REQUIRE(!cfg.split.held_out.empty());
    std::vector<Scene> corpus = world::gen_corpus(77, cfg);

    auto scan_sequence = [&](const align::TextSequence& t, const align::TokenSpan& sp) {
        SpanWords w = parse_span(t, sp);
        if (w.color >= 0 && w.shape >= 0) CHECK(!cfg.split.is_held_out(w.color, w.shape));
    };
    for (const Scene& s : corpus) {
        for (const SceneQuery& q : s.queries)
            for (const align::TokenSpan& sp : q.text.spans) scan_sequence(q.text, sp);
        for (const align::TokenSpan& sp : s.caption.spans) scan_sequence(s.caption, sp);
    }
}

TEST_CASE("heldout_only mode: scenes carry and query held-out objects") {
    WorldConfig cfg = world::default_config();
    cfg.mode = WorldMode::HeldoutOnly;
    cfg.n_scenes = 100;
    std::vector<Scene> corpus = world::gen_corpus(88, cfg);
    for (const Scene& s : corpus) {
        bool any = false;
        for (const SceneObject& o : s.objects)
            any = any || cfg.split.is_held_out(o.color, o.category);
        CHECK(any);
        for (const SceneQuery& q : s.queries) {
            REQUIRE(!q.targets.empty());
            for (int t : q.targets) {
                const SceneObject& o = s.objects[size_t(t)];
                CHECK(cfg.split.is_held_out(o.color, o.category));
            }
            CHECK(q.targets == targets_from_tokens(s, q));
        }
    }

    WorldConfig empty = cfg;
    empty.split.held_out.clear();
    CHECK_THROWS_AS(world::gen_scene(1, 0, empty), std::exception);
}

TEST_CASE("corpus JSONL round trip") {
    WorldConfig cfg = world::default_config();
    cfg.n_scenes = 25;
    std::vector<Scene> corpus = world::gen_corpus(9, cfg);
    const std::string path = temp_path("xalign_world_roundtrip.jsonl");
    world::save_corpus(corpus, path);
    std::vector<Scene> loaded = world::load_corpus(path);
    REQUIRE(loaded.size() == corpus.size());
    for (size_t i = 0; i < corpus.size(); ++i)
        CHECK(world::scene_to_json(loaded[i]) == world::scene_to_json(corpus[i]));
    std::remove(path.c_str());
    CHECK_THROWS_AS(world::load_corpus(path), std::exception);  // gone
}

TEST_CASE("scene_from_json: strict schema") {
    WorldConfig cfg = world::default_config();
    Scene s = world::gen_scene(13, 0, cfg);
    const std::string good = world::scene_to_json(s);
    CHECK_NOTHROW(world::scene_from_json(good));

    // Unknown key at the top level.
    {
        std::string bad = good;
        bad.insert(1, "\"bogus\":3,");
        CHECK_THROWS_AS(world::scene_from_json(bad), std::exception);
    }
    // Missing schema_version.
    {
        std::string bad = good;
        const auto pos = bad.find("\"schema_version\":1,");
        REQUIRE(pos != std::string::npos);
        bad.erase(pos, std::string("\"schema_version\":1,").size());
        CHECK_THROWS_AS(world::scene_from_json(bad), std::exception);
    }
    // Wrong schema_version.
    {
        std::string bad = good;
        const auto pos = bad.find("\"schema_version\":1");
        bad.replace(pos, std::string("\"schema_version\":1").size(), "\"schema_version\":2");
        CHECK_THROWS_AS(world::scene_from_json(bad), std::exception);
    }
    // Attribute word of the wrong kind.
    {
        std::string bad = good;
        const auto pos = bad.find("\"color\":\"");
        REQUIRE(pos != std::string::npos);
        const auto vstart = pos + std::string("\"color\":\"").size();
        const auto vend = bad.find('"', vstart);
        bad.replace(vstart, vend - vstart, "circle");
        CHECK_THROWS_AS(world::scene_from_json(bad), std::exception);
    }
    // Malformed JSON.
    CHECK_THROWS_AS(world::scene_from_json("{not json"), std::exception);
    CHECK_THROWS_AS(world::scene_from_json(good.substr(0, good.size() / 2)), std::exception);
}
