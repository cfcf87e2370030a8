// xalign: command-line surface for the synthetic vision-language pipeline.
// Subcommands: gen | train | eval-ovod | eval-ground | eval-mmis | index |
// query | bench | pseudolabel. JSON reports go to stdout, human-readable
// diagnostics to stderr; exit 0 on success.

#include <cstdint>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "xalign/config.hpp"
#include "xalign/evalsuite.hpp"
#include "xalign/mmis_index.hpp"
#include "xalign/pseudolabel.hpp"
#include "xalign/trainer.hpp"
#include "xalign/world.hpp"

namespace {

using namespace xalign;

struct Common {
    std::string config_path;
    int64_t seed = -1;   // -1: keep config value
    int threads = 1;     // upper bound on workers; execution is sequential
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config_path, "JSON config file (defaults when omitted)");
    cmd->add_option("--seed", c.seed, "override the config seed");
    cmd->add_option("--threads", c.threads, "cap on worker threads")
        ->check(CLI::PositiveNumber);
}

config::RunConfig load_config(const Common& c) {
    config::RunConfig cfg =
        c.config_path.empty() ? config::RunConfig{} : config::load_file(c.config_path);
    if (c.seed >= 0) cfg.seed = uint64_t(c.seed);
    cfg.validate();
    return cfg;
}

train::TrainState load_state(const std::string& ckpt_path) {
    return train::load_checkpoint(ckpt_path);
}

// The inference model: EMA weights unless --raw-weights asked for the live ones.
const Vec& pick_weights(const train::TrainState& st, bool raw) {
    return raw ? st.params : st.ema;
}

index::Index build_corpus_index(const config::RunConfig& cfg,
                                const std::vector<world::Scene>& corpus,
                                const train::Model& model, const world::Featurizer& feat) {
    if (cfg.index.shards == 1)
        return index::build_index(corpus, model, feat, cfg.index.objectness_floor);
    const auto shards = index::build_shards(corpus, model, feat, cfg.index.shards,
                                            cfg.index.objectness_floor);
    return index::merge_shards(shards);
}

void emit_report(const std::map<std::string, double>& metrics) {
    std::cout << eval::metrics_json(metrics) << "\n";
    std::cerr << eval::metrics_table(metrics);
}

int cmd_gen(const Common& com, const std::string& out) {
    const config::RunConfig cfg = load_config(com);
    const std::vector<world::Scene> corpus = world::gen_corpus(cfg.seed, cfg.world);
    world::save_corpus(corpus, out);
    size_t n_obj = 0, n_q = 0;
    for (const world::Scene& s : corpus) {
        n_obj += s.objects.size();
        n_q += s.queries.size();
    }
    nlohmann::ordered_json j{{"scenes", corpus.size()},
                             {"objects", n_obj},
                             {"queries", n_q},
                             {"path", out}};
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_train(const Common& com, const std::string& corpus_path, const std::string& out,
              const std::string& resume, int64_t max_steps) {
    const config::RunConfig cfg = load_config(com);
    const std::vector<world::Scene> corpus = world::load_corpus(corpus_path);
    const world::Featurizer feat(cfg.world);
    train::TrainConfig tcfg = cfg.train;
    tcfg.seed = cfg.seed;
    train::TrainState st =
        resume.empty() ? train::init_state(cfg.dims, cfg.seed) : load_state(resume);
    const train::TrainReport rep = train::train(st, corpus, feat, tcfg, max_steps, &std::cerr);
    train::save_checkpoint(st, out);
    nlohmann::ordered_json j{{"steps_run", rep.steps_run},
                             {"total_step", st.step},
                             {"final_loss", rep.final_loss},
                             {"checkpoint", out}};
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_eval_ovod(const Common& com, const std::string& corpus_path, const std::string& ckpt,
                  bool raw, bool held_out) {
    const config::RunConfig cfg = load_config(com);
    const std::vector<world::Scene> corpus = world::load_corpus(corpus_path);
    const train::TrainState st = load_state(ckpt);
    const train::Model model(st.dims, pick_weights(st, raw));
    const world::Featurizer feat(cfg.world);
    const eval::OvodReport rep =
        eval::ovod_protocol(model, corpus, feat, cfg.eval, held_out, cfg.world.split);
    emit_report({{"ap", rep.ap.ap},
                 {"ap50", rep.ap.ap50},
                 {"n_categories", double(rep.n_categories)},
                 {"n_detections", double(rep.n_detections)}});
    return 0;
}

int cmd_eval_ground(const Common& com, const std::string& corpus_path,
                    const std::string& ckpt, bool raw) {
    const config::RunConfig cfg = load_config(com);
    const std::vector<world::Scene> corpus = world::load_corpus(corpus_path);
    const train::TrainState st = load_state(ckpt);
    const train::Model model(st.dims, pick_weights(st, raw));
    const world::Featurizer feat(cfg.world);
    const auto queries = eval::collect_queries(corpus);
    const eval::RecallReport rep =
        eval::grounding_protocol(model, corpus, queries, feat, cfg.eval);
    std::map<std::string, double> m{{"n_queries", double(rep.n_queries)}};
    for (const auto& [k, v] : rep.recall) m["recall@" + std::to_string(k)] = v;
    for (const auto& [k, v] : rep.chance) m["chance@" + std::to_string(k)] = v;
    emit_report(m);
    return 0;
}

int cmd_eval_mmis(const Common& com, const std::string& corpus_path, const std::string& ckpt,
                  bool raw) {
    const config::RunConfig cfg = load_config(com);
    const std::vector<world::Scene> corpus = world::load_corpus(corpus_path);
    const train::TrainState st = load_state(ckpt);
    const train::Model model(st.dims, pick_weights(st, raw));
    const world::Featurizer feat(cfg.world);
    const index::Index ix = build_corpus_index(cfg, corpus, model, feat);
    const auto queries = eval::collect_queries(corpus);
    const eval::RecallReport rep = eval::mmis_protocol(model, ix, queries, cfg.eval);
    std::map<std::string, double> m{{"n_queries", double(rep.n_queries)},
                                    {"index_size", double(ix.size())}};
    for (const auto& [k, v] : rep.recall) m["recall@" + std::to_string(k)] = v;
    for (const auto& [k, v] : rep.chance) m["chance@" + std::to_string(k)] = v;
    emit_report(m);
    return 0;
}

int cmd_index(const Common& com, const std::string& corpus_path, const std::string& ckpt,
              const std::string& out, bool raw) {
    const config::RunConfig cfg = load_config(com);
    const std::vector<world::Scene> corpus = world::load_corpus(corpus_path);
    const train::TrainState st = load_state(ckpt);
    const train::Model model(st.dims, pick_weights(st, raw));
    const world::Featurizer feat(cfg.world);
    const index::Index ix = build_corpus_index(cfg, corpus, model, feat);
    ix.save(out);
    nlohmann::ordered_json j{{"entries", ix.size()}, {"dim", ix.dim()}, {"path", out}};
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_query(const Common& com, const std::string& index_path, const std::string& ckpt,
              const std::string& text, int k, bool use_objectness, bool raw) {
    const config::RunConfig cfg = load_config(com);
    (void)cfg;
    const index::Index ix = index::Index::load(index_path);
    const train::TrainState st = load_state(ckpt);
    const train::Model model(st.dims, pick_weights(st, raw));
    const std::vector<int> ids = world::tokenize(text);
    if (ids.empty()) throw std::runtime_error("query: empty text");
    const Vec v = model.text_embed(ids);
    const auto hits = ix.query(v, k, use_objectness);
    for (size_t r = 0; r < hits.size(); ++r) {
        nlohmann::ordered_json j{
            {"rank", r + 1},
            {"score", hits[r].score},
            {"scene_id", hits[r].scene_id},
            {"box", {hits[r].box.x1, hits[r].box.y1, hits[r].box.x2, hits[r].box.y2}}};
        std::cout << j.dump() << "\n";
    }
    return 0;
}

int cmd_bench(const Common& com) {
    const config::RunConfig cfg = load_config(com);
    const index::BenchReport rep =
        index::bench(cfg.bench.sizes, cfg.bench.k, cfg.bench.repetitions,
                     cfg.bench.n_tokens, cfg.bench.d, cfg.seed);
    nlohmann::ordered_json pts = nlohmann::ordered_json::array();
    for (const auto& p : rep.points)
        pts.push_back({{"n", p.n}, {"dot_scan_ns", p.dot_scan_ns}});
    nlohmann::ordered_json j{{"points", pts},
                             {"slope_ns_per_entry", rep.slope_ns_per_entry},
                             {"r2", rep.r2},
                             {"doubling_ratio", rep.doubling_ratio},
                             {"k1_vs_k100_ratio", rep.k1_vs_k100_ratio},
                             {"dot_ns_at_max", rep.dot_ns_at_max},
                             {"xattn_ns_at_max", rep.xattn_ns_at_max},
                             {"speedup", rep.speedup},
                             {"dot_madds_per_pair", rep.dot_madds},
                             {"xattn_madds_per_pair", rep.xattn_madds},
                             {"n_tokens", rep.n_tokens},
                             {"d", rep.d}};
    std::cout << j.dump(2) << "\n";
    return 0;
}

int cmd_pseudolabel(const Common& com, const std::string& corpus_path,
                    const std::string& ckpt, const std::string& out, double threshold,
                    bool raw) {
    const config::RunConfig cfg = load_config(com);
    const std::vector<world::Scene> corpus = world::load_corpus(corpus_path);
    const train::TrainState st = load_state(ckpt);
    const train::Model model(st.dims, pick_weights(st, raw));
    const world::Featurizer feat(cfg.world);
    const double thr = threshold < -1.0 ? cfg.pseudo.threshold : threshold;
    const auto pseudo_corpus = pseudo::emit_pseudo_corpus(model, corpus, feat, thr, out);
    size_t accepted = 0, total = 0;
    for (const world::Scene& s : pseudo_corpus)
        for (const world::SceneQuery& q : s.queries) {
            ++total;
            if (q.accepted) ++accepted;
        }
    nlohmann::ordered_json j{{"scenes", pseudo_corpus.size()},
                             {"pairs", total},
                             {"accepted", accepted},
                             {"threshold", thr},
                             {"path", out}};
    std::cout << j.dump(2) << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"instance-level vision-language alignment pipeline"};
    app.require_subcommand(1);

    Common com_gen, com_train, com_ovod, com_ground, com_mmis, com_index, com_query,
        com_bench, com_pseudo;

    auto* gen = app.add_subcommand("gen", "generate a synthetic scene corpus");
    std::string gen_out;
    add_common(gen, com_gen);
    gen->add_option("--out", gen_out, "output corpus (JSONL)")->required();

    auto* tr = app.add_subcommand("train", "train the alignment model");
    std::string tr_corpus, tr_out, tr_resume;
    int64_t tr_max_steps = -1;
    add_common(tr, com_train);
    tr->add_option("--corpus", tr_corpus, "training corpus (JSONL)")->required();
    tr->add_option("--out", tr_out, "output checkpoint")->required();
    tr->add_option("--resume", tr_resume, "resume from checkpoint");
    tr->add_option("--max-steps", tr_max_steps, "stop after this many steps");

    auto* ovod = app.add_subcommand("eval-ovod", "open-vocabulary detection AP");
    std::string ov_corpus, ov_ckpt;
    bool ov_raw = false, ov_held = false;
    add_common(ovod, com_ovod);
    ovod->add_option("--corpus", ov_corpus)->required();
    ovod->add_option("--ckpt", ov_ckpt)->required();
    ovod->add_flag("--raw-weights", ov_raw, "use live weights instead of the EMA");
    ovod->add_flag("--held-out", ov_held, "evaluate held-out categories only");

    auto* ground = app.add_subcommand("eval-ground", "single-scene grounding recall");
    std::string gr_corpus, gr_ckpt;
    bool gr_raw = false;
    add_common(ground, com_ground);
    ground->add_option("--corpus", gr_corpus)->required();
    ground->add_option("--ckpt", gr_ckpt)->required();
    ground->add_flag("--raw-weights", gr_raw);

    auto* mmis = app.add_subcommand("eval-mmis", "full-database retrieval recall");
    std::string mm_corpus, mm_ckpt;
    bool mm_raw = false;
    add_common(mmis, com_mmis);
    mmis->add_option("--corpus", mm_corpus)->required();
    mmis->add_option("--ckpt", mm_ckpt)->required();
    mmis->add_flag("--raw-weights", mm_raw);

    auto* idx = app.add_subcommand("index", "build and save a retrieval index");
    std::string ix_corpus, ix_ckpt, ix_out;
    bool ix_raw = false;
    add_common(idx, com_index);
    idx->add_option("--corpus", ix_corpus)->required();
    idx->add_option("--ckpt", ix_ckpt)->required();
    idx->add_option("--out", ix_out)->required();
    idx->add_flag("--raw-weights", ix_raw);

    auto* qy = app.add_subcommand("query", "run a text query against an index");
    std::string q_index, q_ckpt, q_text;
    int q_k = 5;
    bool q_obj = false, q_raw = false;
    add_common(qy, com_query);
    qy->add_option("--index", q_index)->required();
    qy->add_option("--ckpt", q_ckpt)->required();
    qy->add_option("--text", q_text)->required();
    qy->add_option("-k,--topk", q_k)->check(CLI::PositiveNumber);
    qy->add_flag("--use-objectness", q_obj, "multiply similarity by objectness");
    qy->add_flag("--raw-weights", q_raw);

    auto* be = app.add_subcommand("bench", "retrieval scaling benchmark");
    add_common(be, com_bench);

    auto* ps = app.add_subcommand("pseudolabel", "ground caption phrases into pseudo pairs");
    std::string ps_corpus, ps_ckpt, ps_out;
    double ps_thr = -2.0;  // sentinel: take the config value
    bool ps_raw = false;
    add_common(ps, com_pseudo);
    ps->add_option("--corpus", ps_corpus)->required();
    ps->add_option("--ckpt", ps_ckpt)->required();
    ps->add_option("--out", ps_out)->required();
    ps->add_option("--threshold", ps_thr, "acceptance floor on the cosine");
    ps->add_flag("--raw-weights", ps_raw);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) return cmd_gen(com_gen, gen_out);
        if (tr->parsed()) return cmd_train(com_train, tr_corpus, tr_out, tr_resume, tr_max_steps);
        if (ovod->parsed()) return cmd_eval_ovod(com_ovod, ov_corpus, ov_ckpt, ov_raw, ov_held);
        if (ground->parsed()) return cmd_eval_ground(com_ground, gr_corpus, gr_ckpt, gr_raw);
        if (mmis->parsed()) return cmd_eval_mmis(com_mmis, mm_corpus, mm_ckpt, mm_raw);
        if (idx->parsed()) return cmd_index(com_index, ix_corpus, ix_ckpt, ix_out, ix_raw);
        if (qy->parsed()) return cmd_query(com_query, q_index, q_ckpt, q_text, q_k, q_obj, q_raw);
        if (be->parsed()) return cmd_bench(com_bench);
        if (ps->parsed())
            return cmd_pseudolabel(com_pseudo, ps_corpus, ps_ckpt, ps_out, ps_thr, ps_raw);
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    std::cerr << "error: no subcommand\n";
    return 2;
}
