#pragma once

// One structured JSON config document for the whole pipeline. Parsing is
// strict: a schema_version field is required, unknown keys are rejected at
// every level, and every section validates its ranges before any work runs.

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "xalign/evalsuite.hpp"
#include "xalign/pseudolabel.hpp"
#include "xalign/trainer.hpp"
#include "xalign/world.hpp"

namespace xalign::config {

inline constexpr int kSchemaVersion = 1;

struct IndexConfig {
    double objectness_floor = 0.0;
    int shards = 1;
};

struct PseudoConfig {
    double threshold = pseudo::kDefaultThreshold;
};

struct BenchConfig {
    std::vector<size_t> sizes = {1000, 10000, 100000};
    int k = 5;
    int repetitions = 5;
    int n_tokens = 8;
    int d = 64;
};

struct RunConfig {
    uint64_t seed = 42;
    world::WorldConfig world = world::default_config();
    train::ModelDims dims;
    train::TrainConfig train;
    eval::EvalOptions eval;
    IndexConfig index;
    PseudoConfig pseudo;
    BenchConfig bench;

    void validate() const;  // cross-section consistency + per-section checks
};

// Strict parse; throws std::runtime_error with the offending path on unknown
// keys, type mismatches, or schema_version != 1.
RunConfig from_json(const nlohmann::json& j);
RunConfig load_file(const std::string& path);

nlohmann::ordered_json to_json(const RunConfig& c);

}  // namespace xalign::config
