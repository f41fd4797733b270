#pragma once

// Seeded training loop: crop -> augment -> forward -> L1 -> Adam -> EMA.

#include <functional>
#include <vector>

#include "mbt/checkpoint.hpp"
#include "mbt/data.hpp"
#include "mbt/model.hpp"
#include "mbt/optim.hpp"

namespace mbt {

struct StepRecord {
    i64 step = 0;
    int epoch = 0;
    double lr = 0;
    float loss = 0;
};

struct EpochRecord {
    int epoch = 0;
    double lr = 0;
    double mean_loss = 0;
    double val_psnr = 0;
};

struct TrainHooks {
    std::function<void(const StepRecord&)> on_step;
    std::function<bool(const EpochRecord&)> on_epoch;  // return true to stop early
    std::function<void(const Checkpoint&, int epoch)> on_checkpoint;
};

struct TrainResult {
    Checkpoint final_checkpoint;
    std::vector<StepRecord> steps;
    std::vector<EpochRecord> epochs;
};

/// Runs the full recipe. Every random draw is keyed by (seed, global step),
/// so a run resumed from a checkpoint continues the identical trajectory.
/// Validation PSNR uses the EMA weights on `val` (or the training set when
/// no validation split is given). Throws NumericError when the loss leaves
/// the finite range.
TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const PairDataset& trainset,
                  const PairDataset* val, const Checkpoint* resume = nullptr, const TrainHooks& hooks = {});

}  // namespace mbt
