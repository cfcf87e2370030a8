#include "xalign/config.hpp"

#include <fstream>
#include <initializer_list>
#include <stdexcept>

namespace xalign::config {

using nlohmann::json;

namespace {

[[noreturn]] void fail(const std::string& where, const std::string& what) {
    throw std::runtime_error("config: " + where + ": " + what);
}

void check_keys(const json& j, const std::string& where,
                std::initializer_list<const char*> allowed) {
    if (!j.is_object()) fail(where, "expected an object");
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) {
                ok = true;
                break;
            }
        if (!ok) fail(where, "unknown key \"" + key + "\"");
    }
}

template <class T>
void get_to(const json& j, const std::string& where, const char* key, T& out) {
    const auto it = j.find(key);
    if (it == j.end()) return;
    try {
        it->get_to(out);
    } catch (const json::exception& e) {
        fail(where + "." + key, e.what());
    }
}

void parse_world(const json& j, world::WorldConfig& w) {
    const std::string where = "world";
    check_keys(j, where,
               {"n_scenes", "min_objects", "max_objects", "n_queries", "n_distractors",
                "overlap_cap", "noise_sigma", "spatial_fraction", "small_min", "small_max",
                "large_min", "large_max", "mode", "held_out", "d_raw",
                "max_place_attempts", "max_scene_restarts"});
    get_to(j, where, "n_scenes", w.n_scenes);
    get_to(j, where, "min_objects", w.min_objects);
    get_to(j, where, "max_objects", w.max_objects);
    get_to(j, where, "n_queries", w.n_queries);
    get_to(j, where, "n_distractors", w.n_distractors);
    get_to(j, where, "overlap_cap", w.overlap_cap);
    get_to(j, where, "noise_sigma", w.noise_sigma);
    get_to(j, where, "spatial_fraction", w.spatial_fraction);
    get_to(j, where, "small_min", w.small_min);
    get_to(j, where, "small_max", w.small_max);
    get_to(j, where, "large_min", w.large_min);
    get_to(j, where, "large_max", w.large_max);
    get_to(j, where, "d_raw", w.d_raw);
    get_to(j, where, "max_place_attempts", w.max_place_attempts);
    get_to(j, where, "max_scene_restarts", w.max_scene_restarts);
    if (j.contains("mode")) {
        std::string m;
        get_to(j, where, "mode", m);
        try {
            w.mode = world::parse_mode(m);
        } catch (const std::exception& e) {
            fail(where + ".mode", e.what());
        }
    }
    if (j.contains("held_out")) {
        const json& h = j.at("held_out");
        if (!h.is_array()) fail(where + ".held_out", "expected an array of [color, shape]");
        w.split.held_out.clear();
        for (const json& e : h) {
            if (!e.is_array() || e.size() != 2 || !e[0].is_number_integer() ||
                !e[1].is_number_integer())
                fail(where + ".held_out", "each entry must be [color, shape]");
            w.split.held_out.emplace_back(e[0].get<int>(), e[1].get<int>());
        }
    }
}

void parse_model(const json& j, train::ModelDims& d, bool& d_raw_given) {
    const std::string where = "model";
    check_keys(j, where, {"d_raw", "d_joint", "d_tok"});
    d_raw_given = j.contains("d_raw");
    get_to(j, where, "d_raw", d.d_raw);
    get_to(j, where, "d_joint", d.d_joint);
    get_to(j, where, "d_tok", d.d_tok);
}

void parse_train(const json& j, train::TrainConfig& t) {
    const std::string where = "train";
    check_keys(j, where,
               {"lr", "momentum", "ema_decay", "epochs", "batch_size", "tau", "w_bce",
                "w_l1", "w_giou", "w_phrase", "w_sentence", "w_caption", "match_w_cls",
                "match_w_l1", "match_w_giou"});
    get_to(j, where, "lr", t.lr);
    get_to(j, where, "momentum", t.momentum);
    get_to(j, where, "ema_decay", t.ema_decay);
    get_to(j, where, "epochs", t.epochs);
    get_to(j, where, "batch_size", t.batch_size);
    get_to(j, where, "tau", t.tau);
    get_to(j, where, "w_bce", t.w_bce);
    get_to(j, where, "w_l1", t.w_l1);
    get_to(j, where, "w_giou", t.w_giou);
    get_to(j, where, "w_phrase", t.w_phrase);
    get_to(j, where, "w_sentence", t.w_sentence);
    get_to(j, where, "w_caption", t.w_caption);
    get_to(j, where, "match_w_cls", t.match_weights.cls);
    get_to(j, where, "match_w_l1", t.match_weights.l1);
    get_to(j, where, "match_w_giou", t.match_weights.giou);
}

void parse_eval(const json& j, eval::EvalOptions& e) {
    const std::string where = "eval";
    check_keys(j, where, {"ks", "iou_thr", "multiply_objectness", "tau"});
    get_to(j, where, "ks", e.ks);
    get_to(j, where, "iou_thr", e.iou_thr);
    get_to(j, where, "multiply_objectness", e.multiply_objectness);
    get_to(j, where, "tau", e.tau);
}

void parse_index(const json& j, IndexConfig& ix) {
    const std::string where = "index";
    check_keys(j, where, {"objectness_floor", "shards"});
    get_to(j, where, "objectness_floor", ix.objectness_floor);
    get_to(j, where, "shards", ix.shards);
}

void parse_pseudo(const json& j, PseudoConfig& p) {
    check_keys(j, "pseudo", {"threshold"});
    get_to(j, "pseudo", "threshold", p.threshold);
}

void parse_bench(const json& j, BenchConfig& b) {
    const std::string where = "bench";
    check_keys(j, where, {"sizes", "k", "repetitions", "n_tokens", "d"});
    get_to(j, where, "sizes", b.sizes);
    get_to(j, where, "k", b.k);
    get_to(j, where, "repetitions", b.repetitions);
    get_to(j, where, "n_tokens", b.n_tokens);
    get_to(j, where, "d", b.d);
}

}  // namespace

RunConfig from_json(const json& j) {
    check_keys(j, "<root>", {"schema_version", "seed", "world", "model", "train", "eval",
                             "index", "pseudo", "bench"});
    if (!j.contains("schema_version")) fail("<root>", "missing schema_version");
    int ver = 0;
    get_to(j, "<root>", "schema_version", ver);
    if (ver != kSchemaVersion)
        fail("<root>", "unsupported schema_version " + std::to_string(ver));
    RunConfig c;
    get_to(j, "<root>", "seed", c.seed);
    if (j.contains("world")) parse_world(j.at("world"), c.world);
    bool d_raw_given = false;
    if (j.contains("model")) parse_model(j.at("model"), c.dims, d_raw_given);
    if (!d_raw_given) c.dims.d_raw = c.world.d_raw;
    if (j.contains("train")) parse_train(j.at("train"), c.train);
    if (j.contains("eval")) parse_eval(j.at("eval"), c.eval);
    if (j.contains("index")) parse_index(j.at("index"), c.index);
    if (j.contains("pseudo")) parse_pseudo(j.at("pseudo"), c.pseudo);
    if (j.contains("bench")) parse_bench(j.at("bench"), c.bench);
    c.validate();
    return c;
}

RunConfig load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error("config: " + path + ": " + e.what());
    }
    return from_json(j);
}

void RunConfig::validate() const {
    world.validate();
    train.validate();
    if (dims.d_raw != world.d_raw)
        throw std::runtime_error("config: model.d_raw must equal world.d_raw");
    if (dims.d_joint < 1 || dims.d_tok < 1)
        throw std::runtime_error("config: model dimensions must be positive");
    if (eval.ks.empty()) throw std::runtime_error("config: eval.ks must be non-empty");
    for (size_t i = 0; i < eval.ks.size(); ++i) {
        if (eval.ks[i] < 1) throw std::runtime_error("config: eval.ks entries must be >= 1");
        if (i > 0 && eval.ks[i] <= eval.ks[i - 1])
            throw std::runtime_error("config: eval.ks must be ascending");
    }
    if (eval.iou_thr <= 0.0 || eval.iou_thr > 1.0)
        throw std::runtime_error("config: eval.iou_thr must be in (0,1]");
    if (!(eval.tau > 0.0)) throw std::runtime_error("config: eval.tau must be positive");
    if (index.objectness_floor < 0.0 || index.objectness_floor > 1.0)
        throw std::runtime_error("config: index.objectness_floor must be in [0,1]");
    if (index.shards < 1) throw std::runtime_error("config: index.shards must be >= 1");
    if (bench.sizes.empty()) throw std::runtime_error("config: bench.sizes must be non-empty");
    for (size_t i = 1; i < bench.sizes.size(); ++i)
        if (bench.sizes[i] <= bench.sizes[i - 1])
            throw std::runtime_error("config: bench.sizes must be ascending");
    if (bench.k < 1 || bench.repetitions < 1 || bench.n_tokens < 1 || bench.d < 1)
        throw std::runtime_error("config: bench parameters must be >= 1");
}

nlohmann::ordered_json to_json(const RunConfig& c) {
    nlohmann::ordered_json j;
    j["schema_version"] = kSchemaVersion;
    j["seed"] = c.seed;
    j["world"] = {{"n_scenes", c.world.n_scenes},
                  {"min_objects", c.world.min_objects},
                  {"max_objects", c.world.max_objects},
                  {"n_queries", c.world.n_queries},
                  {"n_distractors", c.world.n_distractors},
                  {"overlap_cap", c.world.overlap_cap},
                  {"noise_sigma", c.world.noise_sigma},
                  {"spatial_fraction", c.world.spatial_fraction},
                  {"small_min", c.world.small_min},
                  {"small_max", c.world.small_max},
                  {"large_min", c.world.large_min},
                  {"large_max", c.world.large_max},
                  {"mode", world::mode_name(c.world.mode)},
                  {"d_raw", c.world.d_raw},
                  {"max_place_attempts", c.world.max_place_attempts},
                  {"max_scene_restarts", c.world.max_scene_restarts}};
    nlohmann::ordered_json held = nlohmann::ordered_json::array();
    for (const auto& [color, shape] : c.world.split.held_out)
        held.push_back({color, shape});
    j["world"]["held_out"] = held;
    j["model"] = {{"d_raw", c.dims.d_raw}, {"d_joint", c.dims.d_joint}, {"d_tok", c.dims.d_tok}};
    j["train"] = {{"lr", c.train.lr},
                  {"momentum", c.train.momentum},
                  {"ema_decay", c.train.ema_decay},
                  {"epochs", c.train.epochs},
                  {"batch_size", c.train.batch_size},
                  {"tau", c.train.tau},
                  {"w_bce", c.train.w_bce},
                  {"w_l1", c.train.w_l1},
                  {"w_giou", c.train.w_giou},
                  {"w_phrase", c.train.w_phrase},
                  {"w_sentence", c.train.w_sentence},
                  {"w_caption", c.train.w_caption},
                  {"match_w_cls", c.train.match_weights.cls},
                  {"match_w_l1", c.train.match_weights.l1},
                  {"match_w_giou", c.train.match_weights.giou}};
    j["eval"] = {{"ks", c.eval.ks},
                 {"iou_thr", c.eval.iou_thr},
                 {"multiply_objectness", c.eval.multiply_objectness},
                 {"tau", c.eval.tau}};
    j["index"] = {{"objectness_floor", c.index.objectness_floor}, {"shards", c.index.shards}};
    j["pseudo"] = {{"threshold", c.pseudo.threshold}};
    j["bench"] = {{"sizes", c.bench.sizes},
                  {"k", c.bench.k},
                  {"repetitions", c.bench.repetitions},
                  {"n_tokens", c.bench.n_tokens},
                  {"d", c.bench.d}};
    return j;
}

}  // namespace xalign::config
