// vsr: train | upscale | evaluate | flow | synth

#include <iostream>

#include "CLI11.hpp"
#include "vsr/train.hpp"

namespace {

void add_model_flags(CLI::App& cmd, vsr::TrainConfig& cfg)
{
    cmd.add_option("--scale", cfg.scale, "Upscaling factor (2, 4 or 8)");
    cmd.add_option("--seq-len", cfg.sequence_length, "Frames per sample");
    cmd.add_option("--crop", cfg.crop, "LR crop side used in training");
    cmd.add_option("--base-channels", cfg.base_channels, "Generator feature width");
    cmd.add_option("--lstm-hidden", cfg.lstm_hidden, "LSTM width");
    cmd.add_option("--residual-blocks", cfg.residual_blocks, "Residual block count (default: seq-len)");
    cmd.add_flag("--no-lstm{false}", cfg.use_lstm, "Bypass the LSTM and its projection");
    cmd.add_flag("--no-alignment{false}", cfg.use_alignment, "Skip optical-flow alignment of LR inputs");
    cmd.add_option("--smoothing-alpha", cfg.smoothing.alpha, "EMA weight of the newest flow");
}

int run(int argc, char** argv)
{
    CLI::App app{"Recurrent GAN video super-resolution"};
    app.require_subcommand(1);
    vsr::TrainConfig cfg;

    auto* train = app.add_subcommand("train", "Train generator and discriminator");
    add_model_flags(*train, cfg);
    std::size_t synth_clips = 0;
    std::string data, featnet;
    train->add_option("--data", data, "Dataset directory with <clip>/lr and <clip>/hr frame folders");
    train->add_option("--synthetic", synth_clips, "Train on N generated clips instead of --data");
    train->add_option("--epochs", cfg.epochs);
    train->add_option("--lr", cfg.learning_rate, "Adam learning rate for both networks");
    train->add_option("--batch", cfg.batch_size);
    train->add_option("--seed", cfg.seed);
    train->add_flag("--no-temporal-loss{false}", cfg.use_temporal_loss);
    train->add_option("--disc-dropout", cfg.disc_dropout, "Dropout after the discriminator conv blocks");
    train->add_option("--featnet", featnet, "Checkpoint with featnet.* weights");
    train->add_option("--out", cfg.output_dir, "Directory for checkpoint.vsrckpt and train_log.csv");

    auto* up = app.add_subcommand("upscale", "Upscale a frame directory");
    add_model_flags(*up, cfg);
    std::string input, ckpt, output;
    up->add_option("--input", input)->required();
    up->add_option("--checkpoint", ckpt)->required();
    up->add_option("--output", output)->required();

    auto* ev = app.add_subcommand("evaluate", "PSNR/SSIM of predicted frames against ground truth");
    std::string pred, gt, report;
    ev->add_option("--pred", pred)->required();
    ev->add_option("--gt", gt)->required();
    ev->add_option("--report", report, "Write <report>.txt and <report>.json");

    auto* fl = app.add_subcommand("flow", "Dump raw and smoothed flow plus aligned frames");
    std::string frames, flow_out;
    double alpha = 0.9;
    fl->add_option("--input", frames)->required();
    fl->add_option("--output", flow_out)->required();
    fl->add_option("--smoothing-alpha", alpha);

    auto* sy = app.add_subcommand("synth", "Write synthetic lr/hr clips");
    std::size_t count = 4, nframes = 6, hr_size = 128;
    std::uint64_t synth_seed = 0;
    std::string synth_out;
    sy->add_option("--out", synth_out)->required();
    sy->add_option("--clips", count);
    sy->add_option("--frames", nframes);
    sy->add_option("--size", hr_size, "HR frame side");
    sy->add_option("--scale", cfg.scale);
    sy->add_option("--seed", synth_seed);

    CLI11_PARSE(app, argc, argv);

    if (*train) {
        if (!data.empty()) cfg.data_dir = data;
        if (!featnet.empty()) cfg.featnet_checkpoint = featnet;
        std::cout << vsr::kTrainLogHeader << '\n';
        auto r = vsr::train(cfg, synth_clips, &std::cout);
        std::cout << "checkpoint=" << r.checkpoint_path.string() << '\n';
        if (r.discriminator_drift)
            std::cout << "warning: discriminator loss rising late in training; try --disc-dropout\n";
    } else if (*up) {
        auto out = vsr::upscale(input, ckpt, cfg, std::filesystem::path(output));
        std::cout << "wrote " << out.size() << " frames to " << output << '\n';
    } else if (*ev) {
        std::optional<std::filesystem::path> base;
        if (!report.empty()) base = report;
        std::cout << vsr::to_key_value(vsr::evaluate(pred, gt, base));
    } else if (*fl) {
        vsr::SmoothingParams sp;
        sp.alpha = alpha;
        auto r = vsr::flow_debug(vsr::load_frame_sequence(frames), std::filesystem::path(flow_out), sp);
        for (std::size_t i = 0; i < r.mean_magnitude.size(); ++i)
            std::cout << "pair " << i << " mean_magnitude=" << r.mean_magnitude[i] << '\n';
    } else if (*sy) {
        vsr::save_dataset(synth_out, vsr::synthetic_dataset(count, nframes, hr_size, cfg.scale, synth_seed));
        std::cout << "wrote " << count << " clips to " << synth_out << '\n';
    }
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    try {
        return run(argc, argv);
    } catch (const std::exception& e) {
        std::cerr << "vsr: " << e.what() << '\n';
        return 1;
    }
}
