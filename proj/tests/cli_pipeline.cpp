// End-to-end exercise of the command-line binary (path passed as argv[1]):
// every subcommand runs against a small corpus, outputs are parsed and
// cross-checked, determinism is verified byte-for-byte, and the error paths
// return nonzero with a diagnostic. Prints one line per failed check and
// exits with the failure count.

#include <sys/wait.h>
#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

using nlohmann::json;

namespace {

int g_failures = 0;

void check(bool ok, const std::string& what) {
    if (!ok) {
        ++g_failures;
        std::cout << "FAIL: " << what << "\n";
    }
}

struct RunOut {
    int exit_code = -1;
    std::string out, err;
};

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void spit(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    out << content;
}

std::string g_dir;

RunOut run(const std::string& args) {
    const std::string out_path = g_dir + "/stdout.txt", err_path = g_dir + "/stderr.txt";
    const std::string cmd = args + " > " + out_path + " 2> " + err_path;
    const int status = std::system(cmd.c_str());
    RunOut r;
    r.exit_code = (status >= 0 && WIFEXITED(status)) ? WEXITSTATUS(status) : -1;
    r.out = slurp(out_path);
    r.err = slurp(err_path);
    return r;
}

// Parses text that may hold one JSON document or one per line; returns the
// first document.
json parse_first(const std::string& text) { return json::parse(text); }

}  // namespace

int main(int argc, char** argv) {
    if (argc < 2) {
        std::cout << "FAIL: usage: cli_pipeline <path-to-binary>\n";
        return 1;
    }
    const std::string bin = std::string("\"") + argv[1] + "\"";

    char tmpl[] = "/tmp/xalign_cli_XXXXXX";
    if (!mkdtemp(tmpl)) {
        std::cout << "FAIL: cannot create temp dir\n";
        return 1;
    }
    g_dir = tmpl;
    const std::string D = g_dir + "/";

    // Small but non-trivial configuration: 40 scenes, 30 training steps.
    spit(D + "cfg.json", R"({
      "schema_version": 1,
      "seed": 9,
      "world": {"n_scenes": 40, "n_queries": 2},
      "train": {"epochs": 6, "batch_size": 8, "lr": 0.01},
      "eval": {"ks": [1, 5, 10]}
    })");
    spit(D + "cfg_ho.json", R"({
      "schema_version": 1,
      "seed": 9,
      "world": {"n_scenes": 40, "n_queries": 2, "mode": "heldout_only"}
    })");
    spit(D + "cfg_cap.json", R"({
      "schema_version": 1,
      "seed": 31,
      "world": {"n_scenes": 15, "n_queries": 0}
    })");
    spit(D + "cfg_shards.json", R"({
      "schema_version": 1,
      "seed": 9,
      "world": {"n_scenes": 40, "n_queries": 2},
      "index": {"shards": 3}
    })");
    spit(D + "cfg_bench.json", R"({
      "schema_version": 1,
      "seed": 9,
      "bench": {"sizes": [200, 400, 800], "k": 3, "repetitions": 2, "n_tokens": 2, "d": 8}
    })");

    // --- gen: determinism, count reporting, mode and seed sensitivity ------
    auto g1 = run(bin + " gen --config " + D + "cfg.json --out " + D + "c1.jsonl");
    check(g1.exit_code == 0, "gen exits 0: " + g1.err);
    {
        const json j = parse_first(g1.out);
        check(j.at("scenes").get<size_t>() == 40, "gen reports 40 scenes");
        check(j.at("queries").get<size_t>() == 80, "gen reports 40*2 queries");
    }
    auto g2 = run(bin + " gen --config " + D + "cfg.json --out " + D + "c2.jsonl");
    check(g2.exit_code == 0, "second gen exits 0");
    check(slurp(D + "c1.jsonl") == slurp(D + "c2.jsonl"), "gen is byte-deterministic");

    auto gho = run(bin + " gen --config " + D + "cfg_ho.json --out " + D + "c_ho.jsonl");
    check(gho.exit_code == 0, "held-out gen exits 0");
    check(slurp(D + "c_ho.jsonl") != slurp(D + "c1.jsonl"), "held-out mode changes the corpus");

    auto gseed = run(bin + " gen --config " + D + "cfg.json --seed 77 --out " + D + "c_seed.jsonl");
    check(gseed.exit_code == 0, "--seed override exits 0");
    check(slurp(D + "c_seed.jsonl") != slurp(D + "c1.jsonl"), "--seed override changes the corpus");

    // --- train: step accounting, determinism, exact resume -----------------
    auto t1 = run(bin + " train --config " + D + "cfg.json --corpus " + D + "c1.jsonl --out " +
                  D + "ckpt.bin");
    check(t1.exit_code == 0, "train exits 0: " + t1.err);
    {
        const json j = parse_first(t1.out);
        check(j.at("steps_run").get<int>() == 30, "train runs 6 epochs x 5 batches = 30 steps");
        check(std::isfinite(j.at("final_loss").get<double>()), "final_loss is finite");
    }
    auto t2 = run(bin + " train --config " + D + "cfg.json --corpus " + D + "c1.jsonl --out " +
                  D + "ckpt2.bin");
    check(t2.exit_code == 0, "re-train exits 0");
    check(slurp(D + "ckpt.bin") == slurp(D + "ckpt2.bin"), "training is byte-deterministic");

    auto ta = run(bin + " train --config " + D + "cfg.json --corpus " + D + "c1.jsonl --out " +
                  D + "ck_half.bin --max-steps 15");
    check(ta.exit_code == 0, "train --max-steps exits 0");
    check(parse_first(ta.out).at("steps_run").get<int>() == 15, "--max-steps stops at 15");
    auto tb = run(bin + " train --config " + D + "cfg.json --corpus " + D + "c1.jsonl --out " +
                  D + "ck_resumed.bin --resume " + D + "ck_half.bin");
    check(tb.exit_code == 0, "resumed train exits 0");
    check(slurp(D + "ck_resumed.bin") == slurp(D + "ckpt.bin"),
          "interrupt+resume reproduces the uninterrupted checkpoint byte-for-byte");

    // --- index: entry accounting and shard invariance -----------------------
    auto ix1 = run(bin + " index --config " + D + "cfg.json --corpus " + D + "c1.jsonl --ckpt " +
                   D + "ckpt.bin --out " + D + "ix1.bin");
    check(ix1.exit_code == 0, "index exits 0: " + ix1.err);
    size_t n_entries = 0;
    {
        const json j = parse_first(ix1.out);
        n_entries = j.at("entries").get<size_t>();
        check(n_entries >= 40 * 8 && n_entries <= 40 * 12,
              "entry count matches objects+distractors per scene");
    }
    auto ix3 = run(bin + " index --config " + D + "cfg_shards.json --corpus " + D +
                   "c1.jsonl --ckpt " + D + "ckpt.bin --out " + D + "ix3.bin");
    check(ix3.exit_code == 0, "sharded index exits 0");
    check(slurp(D + "ix1.bin") == slurp(D + "ix3.bin"),
          "3-shard build merges to the byte-identical single-shard index");

    // --- query: shape, ordering, determinism --------------------------------
    auto q1 = run(bin + " query --index " + D + "ix1.bin --ckpt " + D +
                  "ckpt.bin --text \"red circle\" -k 7");
    check(q1.exit_code == 0, "query exits 0: " + q1.err);
    {
        std::istringstream lines(q1.out);
        std::string line;
        int rank = 0;
        double prev = std::numeric_limits<double>::infinity();
        while (std::getline(lines, line)) {
            if (line.empty()) continue;
            const json j = json::parse(line);
            ++rank;
            check(j.at("rank").get<int>() == rank, "query ranks are 1..k in order");
            const double s = j.at("score").get<double>();
            check(s <= prev, "query scores are non-increasing");
            check(j.at("box").size() == 4, "query hit carries a 4-coordinate box");
            prev = s;
        }
        check(rank == 7, "query returns exactly k=7 hits");
    }
    auto q2 = run(bin + " query --index " + D + "ix1.bin --ckpt " + D +
                  "ckpt.bin --text \"red circle\" -k 7");
    check(q1.out == q2.out, "query output is deterministic");
    auto q3 = run(bin + " query --index " + D + "ix1.bin --ckpt " + D +
                  "ckpt.bin --text \"large blue square\" -k 3 --use-objectness");
    check(q3.exit_code == 0, "query --use-objectness exits 0");

    // --- evals: monotone recall, sane report fields -------------------------
    auto eg = run(bin + " eval-ground --config " + D + "cfg.json --corpus " + D +
                  "c1.jsonl --ckpt " + D + "ckpt.bin");
    check(eg.exit_code == 0, "eval-ground exits 0: " + eg.err);
    {
        const json j = parse_first(eg.out);
        const double r1 = j.at("recall@1"), r5 = j.at("recall@5"), r10 = j.at("recall@10");
        check(r1 >= 0.0 && r10 <= 1.0 && r1 <= r5 && r5 <= r10,
              "grounding recall is monotone in k and within [0,1]");
        check(j.at("n_queries").get<double>() > 0, "grounding evaluated some queries");
        check(j.contains("chance@1"), "grounding reports the chance baseline");
    }
    auto em = run(bin + " eval-mmis --config " + D + "cfg.json --corpus " + D +
                  "c1.jsonl --ckpt " + D + "ckpt.bin");
    check(em.exit_code == 0, "eval-mmis exits 0: " + em.err);
    {
        const json j = parse_first(em.out);
        const double r1 = j.at("recall@1"), r5 = j.at("recall@5"), r10 = j.at("recall@10");
        check(r1 <= r5 && r5 <= r10, "retrieval recall is monotone in k");
        check(j.at("index_size").get<size_t>() == n_entries,
              "eval-mmis indexes the same entries as the index command");
    }
    auto eo = run(bin + " eval-ovod --config " + D + "cfg.json --corpus " + D +
                  "c1.jsonl --ckpt " + D + "ckpt.bin");
    check(eo.exit_code == 0, "eval-ovod exits 0: " + eo.err);
    {
        const json j = parse_first(eo.out);
        const double ap = j.at("ap"), ap50 = j.at("ap50");
        check(ap >= 0.0 && ap <= 1.0 && ap50 >= 0.0 && ap50 <= 1.0, "AP within [0,1]");
        check(j.at("n_categories").get<int>() >= 1, "seen evaluation has categories");
    }
    auto eoh = run(bin + " eval-ovod --config " + D + "cfg.json --corpus " + D +
                   "c1.jsonl --ckpt " + D + "ckpt.bin --held-out");
    check(eoh.exit_code == 0, "eval-ovod --held-out exits 0: " + eoh.err);
    {
        const json j = parse_first(eoh.out);
        if (j.at("n_categories").get<int>() >= 1) {
            const double ap = j.at("ap");
            check(ap >= 0.0 && ap <= 1.0, "held-out AP within [0,1]");
        }
    }

    // --- pseudolabel: pair accounting, threshold, corpus round trip ---------
    auto gc = run(bin + " gen --config " + D + "cfg_cap.json --out " + D + "cap.jsonl");
    check(gc.exit_code == 0, "caption-only gen exits 0");
    auto p1 = run(bin + " pseudolabel --config " + D + "cfg.json --corpus " + D +
                  "cap.jsonl --ckpt " + D + "ckpt.bin --out " + D + "pl.jsonl --threshold -1");
    check(p1.exit_code == 0, "pseudolabel exits 0: " + p1.err);
    size_t n_pairs = 0;
    {
        const json j = parse_first(p1.out);
        n_pairs = j.at("pairs").get<size_t>();
        check(j.at("scenes").get<size_t>() == 15, "pseudolabel keeps all scenes");
        check(n_pairs >= 15, "every caption yields at least one phrase");
        check(j.at("accepted").get<size_t>() == n_pairs, "threshold -1 accepts every pair");
        check(j.at("threshold").get<double>() == -1.0, "explicit threshold is honored");
    }
    auto p2 = run(bin + " pseudolabel --config " + D + "cfg.json --corpus " + D +
                  "cap.jsonl --ckpt " + D + "ckpt.bin --out " + D + "pl_strict.jsonl" +
                  " --threshold 1.5");
    check(p2.exit_code == 0, "strict pseudolabel exits 0");
    {
        const json j = parse_first(p2.out);
        check(j.at("pairs").get<size_t>() == n_pairs, "threshold does not change pair count");
        check(j.at("accepted").get<size_t>() == 0, "threshold 1.5 accepts nothing");
    }
    auto tp = run(bin + " train --config " + D + "cfg.json --corpus " + D + "pl.jsonl --out " +
                  D + "ckpt_pl.bin");
    check(tp.exit_code == 0, "training on the pseudo corpus exits 0: " + tp.err);

    // --- bench ---------------------------------------------------------------
    auto be = run(bin + " bench --config " + D + "cfg_bench.json");
    check(be.exit_code == 0, "bench exits 0: " + be.err);
    {
        const json j = parse_first(be.out);
        check(j.at("points").size() == 3, "bench reports one point per size");
        check(j.at("dot_madds_per_pair").get<int>() == 8, "dot madds equal d");
        // T=2, d=8: d^2 + 3 T d^2 + 2 T^2 d + T d + d = 64+384+64+16+8 = 536.
        check(j.at("xattn_madds_per_pair").get<int>() == 536,
              "cross-attention madds match the closed form");
        check(j.at("speedup").get<double>() > 1.0, "dot product beats cross-attention");
    }

    // --- error paths ----------------------------------------------------------
    check(run(bin).exit_code != 0, "no subcommand is an error");
    check(run(bin + " query --ckpt " + D + "ckpt.bin --text x").exit_code != 0,
          "missing required --index is an error");
    auto bad_corpus = run(bin + " train --config " + D + "cfg.json --corpus " + D +
                          "missing.jsonl --out " + D + "x.bin");
    check(bad_corpus.exit_code != 0, "missing corpus file is an error");
    check(bad_corpus.err.find("error") != std::string::npos, "missing corpus prints an error");

    spit(D + "bad_cfg.json", R"({"schema_version": 1, "world": {"n_scene": 5}})");
    auto bad_cfg = run(bin + " gen --config " + D + "bad_cfg.json --out " + D + "x.jsonl");
    check(bad_cfg.exit_code != 0, "unknown config key is an error");
    check(bad_cfg.err.find("n_scene") != std::string::npos, "config error names the bad key");

    spit(D + "trunc.bin", slurp(D + "ckpt.bin").substr(0, 100));
    auto bad_ckpt = run(bin + " eval-ground --config " + D + "cfg.json --corpus " + D +
                        "c1.jsonl --ckpt " + D + "trunc.bin");
    check(bad_ckpt.exit_code != 0, "truncated checkpoint is an error");

    if (g_failures == 0) std::cout << "cli_pipeline: all checks passed\n";
    return g_failures;
}
