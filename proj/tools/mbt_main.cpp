// Command-line entry point: train, eval, infer, gradcheck, info, synth.
//
// Exit codes: 0 success, 1 verification failure, 2 usage/config error,
// 3 numeric divergence.

#include <CLI11.hpp>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "mbt/checkpoint.hpp"
#include "mbt/data.hpp"
#include "mbt/eval.hpp"
#include "mbt/gradcheck.hpp"
#include "mbt/metrics.hpp"
#include "mbt/model.hpp"
#include "mbt/runconfig.hpp"
#include "mbt/train.hpp"

namespace fs = std::filesystem;
using namespace mbt;

namespace {

constexpr double kReferenceParamBudget = 3.21e6;

struct Args {
    std::string config_path, resume_path, out_dir;
    std::vector<std::string> overrides;
    std::string ckpt_path, data_dir, input_path, output_path;
    bool y_channel = false;
    int shave = 0;
    std::string csv_path;
    std::string block;
    std::uint64_t seed = 0;
    bool corrupt_backward = false;
    int count = 8, size = 64, scale = 2;
};

void apply_overrides(RunConfig& cfg, const std::vector<std::string>& overrides) {
    for (const std::string& kv : overrides) {
        const size_t eq = kv.find('=');
        if (eq == std::string::npos) throw ValueError("--set expects key=value, got '" + kv + "'");
        apply_kv(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
}

int cmd_train(const Args& args) {
    RunConfig cfg = parse_run_config(args.config_path);
    apply_overrides(cfg, args.overrides);
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    cfg.validate();
    if (cfg.train_dir.empty()) throw ValueError("config: train_dir is required");

    PairDataset trainset = load_dataset(cfg.train_dir, cfg.model.scale);
    PairDataset valset;
    const bool have_val = !cfg.val_dir.empty();
    if (have_val) valset = load_dataset(cfg.val_dir, cfg.model.scale);

    fs::create_directories(cfg.out_dir);
    {
        std::ofstream echo(fs::path(cfg.out_dir) / "config_resolved.txt");
        echo << render_run_config(cfg);
    }

    Checkpoint resume;
    const bool resuming = !args.resume_path.empty();
    if (resuming) resume = load_checkpoint(args.resume_path);

    std::ofstream step_log(fs::path(cfg.out_dir) / "train_log.csv");
    step_log << "step,epoch,lr,loss\n";
    std::ofstream epoch_log(fs::path(cfg.out_dir) / "epoch_log.csv");
    epoch_log << "epoch,lr,mean_loss,val_psnr\n";

    TrainHooks hooks;
    hooks.on_step = [&step_log](const StepRecord& rec) {
        char loss_buf[32];
        std::snprintf(loss_buf, sizeof(loss_buf), "%.9g", static_cast<double>(rec.loss));
        step_log << rec.step << "," << rec.epoch << "," << rec.lr << "," << loss_buf << "\n";
    };
    hooks.on_epoch = [&epoch_log](const EpochRecord& rec) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%d,%g,%.9g,%.6f", rec.epoch, rec.lr, rec.mean_loss, rec.val_psnr);
        epoch_log << buf << "\n";
        std::printf("epoch %4d  lr %g  loss %.6f  val_psnr %.3f dB\n", rec.epoch, rec.lr, rec.mean_loss,
                    rec.val_psnr);
        return false;
    };
    hooks.on_checkpoint = [&cfg](const Checkpoint& ckpt, int epoch) {
        char name[48];
        std::snprintf(name, sizeof(name), "ckpt_epoch_%04d.ckpt", epoch);
        save_checkpoint(ckpt, (fs::path(cfg.out_dir) / name).string());
        save_checkpoint(ckpt, (fs::path(cfg.out_dir) / "last.ckpt").string());
    };

    TrainResult result =
        train(cfg.model, cfg.train, trainset, have_val ? &valset : nullptr, resuming ? &resume : nullptr, hooks);
    save_checkpoint(result.final_checkpoint, (fs::path(cfg.out_dir) / "last.ckpt").string());
    std::printf("training done: %zu steps, final checkpoint in %s\n", result.steps.size(), cfg.out_dir.c_str());
    return 0;
}

// Builds the model from a checkpoint with the EMA weights active.
MbtModel<float> model_from_checkpoint(const Checkpoint& ckpt, bool use_ema) {
    ModelConfig cfg = config_from_checkpoint(ckpt);
    MbtModel<float> model = MbtModel<float>::build_zero(cfg);
    restore_params(ckpt, model.params, use_ema ? "ema/" : "");
    return model;
}

int cmd_eval(const Args& args) {
    Checkpoint ckpt = load_checkpoint(args.ckpt_path);
    MbtModel<float> model = model_from_checkpoint(ckpt, true);
    PairDataset ds = load_dataset(args.data_dir, model.cfg.scale);
    EvalOptions options;
    options.shave = args.shave;
    options.y_channel = args.y_channel;
    options.use_ema = false;  // EMA weights are already loaded
    MetricReport report = evaluate(model, nullptr, ds, options);
    std::cout << report.to_text();
    if (!args.csv_path.empty()) {
        std::ofstream csv(args.csv_path);
        csv << report.to_csv();
    }
    return 0;
}

int cmd_infer(const Args& args) {
    Checkpoint ckpt = load_checkpoint(args.ckpt_path);
    MbtModel<float> model = model_from_checkpoint(ckpt, true);
    Image input = read_ppm(args.input_path);
    Image output = super_resolve(model, input);
    write_ppm(output, args.output_path);
    std::printf("wrote %dx%d -> %dx%d: %s\n", input.width, input.height, output.width, output.height,
                args.output_path.c_str());
    return 0;
}

int cmd_gradcheck(const Args& args) {
    debug::corrupt_gelu_backward = args.corrupt_backward;
    std::vector<std::string> blocks = args.block.empty() ? gradcheck_blocks() : std::vector<std::string>{args.block};
    bool all_pass = true;
    std::string first_failure;
    for (const std::string& block : blocks) {
        GradCheckResult result = gradcheck_block(block, args.seed);
        for (const auto& [name, err] : result.group_errors)
            std::printf("  %-8s %-32s %.3e\n", block.c_str(), name.c_str(), err);
        std::printf("%s: max relative error %.3e  tolerance %.0e  [%s]\n", block.c_str(), result.worst,
                    result.tolerance, result.pass ? "pass" : "FAIL");
        if (!result.pass && first_failure.empty()) first_failure = block;
        all_pass = all_pass && result.pass;
    }
    if (!all_pass) {
        std::fprintf(stderr, "gradcheck failed in block '%s'\n", first_failure.c_str());
        return 1;
    }
    return 0;
}

int cmd_info(const Args& args) {
    ModelConfig cfg;
    if (!args.ckpt_path.empty()) {
        cfg = config_from_checkpoint(load_checkpoint(args.ckpt_path));
    } else if (!args.config_path.empty()) {
        RunConfig rc = parse_run_config(args.config_path);
        cfg = rc.model;
        cfg.validate();
    } else {
        throw ValueError("info: give --ckpt or --config");
    }

    MbtModel<float> model = MbtModel<float>::build_zero(cfg);
    std::printf("scale=%d channels=%d n_cptb=%d n_spal=%d heads=%d c1=%d c2=%d ffn_ratio=%d cab_squeeze=%d "
                "prm_hidden=%d pool_ratios=",
                cfg.scale, cfg.channels, cfg.n_cptb, cfg.n_spal, cfg.heads, cfg.c1, cfg.c2, cfg.ffn_ratio,
                cfg.cab_squeeze, cfg.prm_hidden);
    for (size_t i = 0; i < cfg.pool_ratios.size(); ++i) std::printf("%s%d", i ? "," : "", cfg.pool_ratios[i]);
    std::printf("\n\nparameters per module:\n");
    for (const auto& [name, count] : param_count_by_module(model.params))
        std::printf("  %-12s %10" PRId64 "\n", name.c_str(), count);
    const i64 total = model.params.total_params();
    std::printf("  %-12s %10" PRId64 "\n", "total", total);
    std::printf("\nreference budget %.2fM: ratio %.3f\n", kReferenceParamBudget / 1e6,
                static_cast<double>(total) / kReferenceParamBudget);
    return 0;
}

int cmd_synth(const Args& args) {
    PairDataset ds = synth_dataset(args.count, args.size, args.scale, args.seed);
    write_dataset(ds, args.out_dir);
    std::printf("wrote %d image pairs (hr %dx%d, x%d) to %s\n", args.count, args.size, args.size, args.scale,
                args.out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mbt: multi-granularity backprojection super-resolution"};
    app.require_subcommand(1);
    Args args;

    auto* train_cmd = app.add_subcommand("train", "Train a model from a run config");
    train_cmd->add_option("--config", args.config_path, "run config file")->required();
    train_cmd->add_option("--resume", args.resume_path, "checkpoint to resume from");
    train_cmd->add_option("--out", args.out_dir, "output directory (overrides out_dir)");
    train_cmd->add_option("--set", args.overrides, "override a config key (key=value, repeatable)");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset directory");
    eval_cmd->add_option("--ckpt", args.ckpt_path)->required();
    eval_cmd->add_option("--data", args.data_dir)->required();
    eval_cmd->add_flag("--y-channel", args.y_channel, "compute metrics on BT.601 luma");
    eval_cmd->add_option("--shave", args.shave, "border pixels to ignore");
    eval_cmd->add_option("--csv", args.csv_path, "write per-image metrics to a CSV file");

    auto* infer_cmd = app.add_subcommand("infer", "Super-resolve one PPM image");
    infer_cmd->add_option("--ckpt", args.ckpt_path)->required();
    infer_cmd->add_option("--input", args.input_path)->required();
    infer_cmd->add_option("--output", args.output_path)->required();

    auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference verification of the backward rules");
    grad_cmd->add_option("--block", args.block, "ppsa|cab|spal|cptb|prm|full (default: all)");
    grad_cmd->add_option("--seed", args.seed);
    grad_cmd->add_flag("--test-corrupt-backward", args.corrupt_backward)->group("");  // hidden test hook

    auto* info_cmd = app.add_subcommand("info", "Print config and parameter counts");
    info_cmd->add_option("--ckpt", args.ckpt_path);
    info_cmd->add_option("--config", args.config_path);

    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic LR/HR dataset");
    synth_cmd->add_option("--out", args.out_dir)->required();
    synth_cmd->add_option("--count", args.count);
    synth_cmd->add_option("--size", args.size);
    synth_cmd->add_option("--scale", args.scale);
    synth_cmd->add_option("--seed", args.seed);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (train_cmd->parsed()) return cmd_train(args);
        if (eval_cmd->parsed()) return cmd_eval(args);
        if (infer_cmd->parsed()) return cmd_infer(args);
        if (grad_cmd->parsed()) return cmd_gradcheck(args);
        if (info_cmd->parsed()) return cmd_info(args);
        if (synth_cmd->parsed()) return cmd_synth(args);
    } catch (const NumericError& e) {
        std::fprintf(stderr, "numeric divergence: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 2;
}
