#include "mbt/eval.hpp"

#include <optional>

#include "mbt/ops.hpp"

namespace mbt {

Image super_resolve(const MbtModel<float>& model, const Image& lr) {
    const int ratio = model.cfg.max_pool_ratio();
    const int pad_w = (ratio - lr.width % ratio) % ratio;
    const int pad_h = (ratio - lr.height % ratio) % ratio;
    Tensor<float> x = image_to_tensor<float>(lr);
    if (pad_w || pad_h) x = pad2d(x, 0, pad_h, 0, pad_w, PadMode::Reflect);
    Tensor<float> sr = model.forward(x);
    const int r = model.cfg.scale;
    if (pad_w || pad_h) {
        Tensor<float> cropped({1, 3, static_cast<i64>(lr.height) * r, static_cast<i64>(lr.width) * r});
        const i64 full_w = sr.dim(3);
        const i64 out_h = cropped.dim(2), out_w = cropped.dim(3);
        for (i64 c = 0; c < 3; ++c)
            for (i64 y = 0; y < out_h; ++y)
                std::copy_n(sr.data() + (c * sr.dim(2) + y) * full_w, out_w,
                            cropped.data() + (c * out_h + y) * out_w);
        sr = cropped;
    }
    return tensor_to_image(sr);
}

MetricReport evaluate(MbtModel<float>& model, const EmaState<float>* ema, const PairDataset& ds,
                      const EvalOptions& options) {
    if (ds.items.empty()) throw ValueError("evaluate: empty dataset");
    ds.validate();
    if (ds.scale != model.cfg.scale)
        throw ValueError("evaluate: dataset scale x" + std::to_string(ds.scale) + " does not match model x" +
                         std::to_string(model.cfg.scale));

    // Swap in the EMA weights for the duration of the pass; restored on any
    // exit path.
    struct WeightSwap {
        ParamTree<float>* live = nullptr;
        ParamTree<float> saved;
        WeightSwap(ParamTree<float>& params, const ParamTree<float>& shadow) : live(&params), saved(params.clone()) {
            params.copy_values_from(shadow);
        }
        ~WeightSwap() { live->copy_values_from(saved); }
    };
    std::optional<WeightSwap> swap;
    if (ema && options.use_ema) swap.emplace(model.params, ema->shadow);

    std::vector<MetricRow> rows;
    rows.reserve(ds.items.size());
    for (const auto& item : ds.items) {
        Image sr = super_resolve(model, item.lr);
        rows.push_back(MetricRow{item.id, psnr(sr, item.hr, options.shave, options.y_channel),
                                 ssim(sr, item.hr, options.y_channel)});
    }
    return aggregate_report(std::move(rows));
}

}  // namespace mbt
