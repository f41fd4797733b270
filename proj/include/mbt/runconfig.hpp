#pragma once

// Plain-text key=value run configuration ('#' starts a comment). Unknown
// keys are rejected; CLI flags override file values via apply_kv.

#include <string>

#include "mbt/model.hpp"
#include "mbt/optim.hpp"

namespace mbt {

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    std::string train_dir;
    std::string val_dir;
    std::string test_dir;
    std::string out_dir = "runs/out";
    std::string ckpt;

    void validate() const {
        model.validate();
        train.validate();
    }
};

/// Applies one key=value assignment; throws ValueError naming unknown keys.
void apply_kv(RunConfig& cfg, const std::string& key, const std::string& value);

RunConfig parse_run_config(const std::string& path);

/// Fully-resolved config in the same key=value syntax (the provenance echo).
std::string render_run_config(const RunConfig& cfg);

}  // namespace mbt
