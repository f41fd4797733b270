#include "mbt/train.hpp"

#include <cmath>

#include "mbt/eval.hpp"
#include "mbt/ops.hpp"

namespace mbt {

namespace {

// Stream tag separating batch-assembly draws from everything else.
constexpr u64 kStepStreamTag = 0x53544550;  // "STEP"

void copy_into_batch(Tensor<float>& batch, i64 slot, const Image& img) {
    const i64 hw = batch.dim(2) * batch.dim(3);
    float* dst = batch.data() + slot * 3 * hw;
    for (i64 i = 0; i < hw; ++i)
        for (i64 c = 0; c < 3; ++c)
            dst[c * hw + i] = static_cast<float>(sample_to_float(img.pixels[static_cast<size_t>(i * 3 + c)]));
}

}  // namespace

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, const PairDataset& trainset,
                  const PairDataset* val, const Checkpoint* resume, const TrainHooks& hooks) {
    model_cfg.validate();
    train_cfg.validate();
    trainset.validate();
    if (trainset.items.empty()) throw ValueError("train: empty dataset");
    if (trainset.scale != model_cfg.scale) throw ValueError("train: dataset scale does not match the model");
    for (const auto& item : trainset.items)
        if (item.lr.width < train_cfg.patch_size || item.lr.height < train_cfg.patch_size)
            throw ValueError("train: patch size " + std::to_string(train_cfg.patch_size) + " exceeds LR image '" +
                             item.id + "'");
    if (train_cfg.patch_size % model_cfg.max_pool_ratio() != 0)
        throw ValueError("train: patch size must be divisible by the largest pooling ratio");

    MbtModel<float> model = MbtModel<float>::build(model_cfg, train_cfg.seed);
    EmaState<float> ema = EmaState<float>::init(model.params, train_cfg.ema_decay);
    AdamState<float> adam = AdamState<float>::init(model.params);

    int start_epoch = 0;
    if (resume) {
        restore_params(*resume, model.params);
        restore_params(*resume, ema.shadow, "ema/");
        restore_adam(*resume, model.params, adam);
        start_epoch = epoch_from_checkpoint(*resume) + 1;
        if (start_epoch < 0 || start_epoch > train_cfg.epochs)
            throw ValueError("train: resume epoch out of range");
    }

    const i64 n_images = static_cast<i64>(trainset.items.size());
    const i64 steps_per_epoch = train_cfg.steps_per_epoch > 0
                                    ? train_cfg.steps_per_epoch
                                    : (n_images + train_cfg.batch_size - 1) / train_cfg.batch_size;
    const int r = model_cfg.scale;
    const i64 p = train_cfg.patch_size;

    TrainResult result;
    Tensor<float> lr_batch({train_cfg.batch_size, 3, p, p});
    Tensor<float> hr_batch({train_cfg.batch_size, 3, p * r, p * r});

    int last_epoch = start_epoch - 1;
    for (int epoch = start_epoch; epoch < train_cfg.epochs; ++epoch) {
        const double lr = lr_at(epoch, train_cfg);
        double loss_sum = 0.0;
        for (i64 s = 0; s < steps_per_epoch; ++s) {
            const i64 gstep = static_cast<i64>(epoch) * steps_per_epoch + s;
            Rng rng(Rng::derive(train_cfg.seed, kStepStreamTag + static_cast<u64>(gstep)));

            for (i64 b = 0; b < train_cfg.batch_size; ++b) {
                const auto& item = trainset.items[static_cast<size_t>(rng.range(n_images))];
                auto [lr_patch, hr_patch] = sample_patch(item, static_cast<int>(p), r, rng);
                AugmentSpec spec;
                spec.rot_quarter = static_cast<int>(rng.range(4));
                spec.hflip = rng.range(2) == 1;
                copy_into_batch(lr_batch, b, augment_image(lr_patch, spec));
                copy_into_batch(hr_batch, b, augment_image(hr_patch, spec));
            }

            model.params.zero_grads();
            Tape<float> tape;
            Tensor<float> loss;
            {
                TapeScope<float> scope(tape);
                Tensor<float> pred = model.forward(lr_batch);
                loss = l1_loss(pred, hr_batch);
            }
            const float loss_value = loss.item();
            if (!std::isfinite(loss_value))
                throw NumericError("train: non-finite loss at step " + std::to_string(gstep) +
                                   " (no gradient clipping is applied; lower the learning rate)");
            tape.backward(loss);
            tape.clear();
            adam_step(model.params, adam, lr);
            ema_update(model.params, ema);

            loss_sum += loss_value;
            StepRecord rec{gstep, epoch, lr, loss_value};
            result.steps.push_back(rec);
            if (hooks.on_step) hooks.on_step(rec);
        }

        EpochRecord erec;
        erec.epoch = epoch;
        erec.lr = lr;
        erec.mean_loss = loss_sum / static_cast<double>(steps_per_epoch);
        erec.val_psnr = evaluate(model, &ema, val ? *val : trainset).mean_psnr;
        result.epochs.push_back(erec);
        last_epoch = epoch;

        const bool stop = hooks.on_epoch && hooks.on_epoch(erec);
        if (hooks.on_checkpoint && train_cfg.checkpoint_every > 0 &&
            ((epoch + 1) % train_cfg.checkpoint_every == 0 || epoch + 1 == train_cfg.epochs || stop))
            hooks.on_checkpoint(make_checkpoint(model_cfg, epoch, model.params, ema, adam), epoch);
        if (stop) break;
    }

    result.final_checkpoint = make_checkpoint(model_cfg, last_epoch, model.params, ema, adam);
    return result;
}

}  // namespace mbt
