#pragma once

// Binary checkpoint container. Little-endian layout:
//   magic "MBT1"; u32 version=1; u32 config length + key=value text;
//   u64 tensor count; per tensor: u32 name length, name, u8 dtype (0 =
//   float32), u8 rank, rank x u64 dims, raw element data; trailing u64 step.
// EMA tensors carry the name prefix "ema/", optimizer moments "opt/m/" and
// "opt/v/".

#include <string>
#include <vector>

#include "mbt/model.hpp"
#include "mbt/optim.hpp"

namespace mbt {

struct Checkpoint {
    struct Entry {
        std::string name;
        std::vector<u64> dims;
        std::vector<float> data;
    };

    u32 version = 1;
    std::vector<std::pair<std::string, std::string>> config;  // ordered key=value
    std::vector<Entry> tensors;
    u64 step = 0;

    const Entry* find(const std::string& name) const;
    const std::string* config_value(const std::string& key) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Bridges between the container and live training state.
Checkpoint make_checkpoint(const ModelConfig& cfg, int epoch, const ParamTree<float>& params,
                           const EmaState<float>& ema, const AdamState<float>& adam);
ModelConfig config_from_checkpoint(const Checkpoint& ckpt);
int epoch_from_checkpoint(const Checkpoint& ckpt);  // -1 when absent

/// Copies "model", "ema/" and "opt/" tensors into live state; name or shape
/// mismatches are errors.
void restore_params(const Checkpoint& ckpt, ParamTree<float>& params, const std::string& prefix = "");
void restore_adam(const Checkpoint& ckpt, const ParamTree<float>& params, AdamState<float>& adam);

}  // namespace mbt
