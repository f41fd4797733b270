#pragma once

// Inference and dataset evaluation for float models.

#include "mbt/data.hpp"
#include "mbt/metrics.hpp"
#include "mbt/model.hpp"
#include "mbt/optim.hpp"

namespace mbt {

/// Upscales one image: reflection-pads the LR input to a multiple of the
/// largest pooling ratio, runs the model without recording, crops the output
/// to scale x the original dims, and quantizes to 8 bits.
Image super_resolve(const MbtModel<float>& model, const Image& lr);

struct EvalOptions {
    int shave = 0;
    bool y_channel = false;
    bool use_ema = true;
};

/// Per-image PSNR/SSIM over a dataset, aggregated deterministically. When an
/// EMA shadow is supplied and use_ema is set, evaluation runs with the
/// shadow weights and restores the live ones afterwards.
MetricReport evaluate(MbtModel<float>& model, const EmaState<float>* ema, const PairDataset& ds,
                      const EvalOptions& options = {});

}  // namespace mbt
