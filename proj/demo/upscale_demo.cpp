// Runs a short training job on generated clips, then upscales a fresh clip
// and compares it with nearest-neighbour upscaling.

#include <cstdio>

#include "vsr/train.hpp"

int main()
{
    vsr::TrainConfig cfg;
    cfg.epochs = 10;
    cfg.seed = 1;
    cfg.base_channels = 16;
    cfg.write_checkpoints = false;
    auto result = vsr::train(cfg, 2);

    auto test = vsr::synthetic_dataset(1, cfg.sequence_length, cfg.crop * cfg.scale, cfg.scale, 42);
    vsr::prepare_inputs(test, cfg.use_alignment, cfg.flow, cfg.smoothing);
    const auto sr = vsr::upscale_sequence(test[0].lr_input, result.generator_config, result.generator);
    vsr::FrameSequence nn;
    for (const auto& f : test[0].lr.frames) nn.frames.push_back(vsr::nearest_upscale(f, cfg.scale));

    std::printf("final generator loss %.5f\n", result.log.back().g.total);
    std::printf("psnr generator %.2f dB, nearest neighbour %.2f dB\n", vsr::psnr(sr, test[0].hr),
                vsr::psnr(nn, test[0].hr));
}
