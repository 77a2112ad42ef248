#pragma once

// Adversarial training loop, inference over frame windows, evaluation and
// flow diagnostics. Everything is deterministic given the configured seed.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "vsr/data_io.hpp"
#include "vsr/flow.hpp"
#include "vsr/losses.hpp"
#include "vsr/metrics.hpp"
#include "vsr/models.hpp"
#include "vsr/optim.hpp"

namespace vsr {

struct TrainConfig {
    std::size_t epochs = 50;
    double learning_rate = 1e-4;
    std::size_t scale = 4;
    std::size_t sequence_length = 3;
    std::size_t batch_size = 1;
    std::uint64_t seed = 0;
    /// Low-resolution crop side; the generator's LSTM width is tied to it.
    std::size_t crop = 16;

    bool use_lstm = true;
    bool use_alignment = true;
    bool use_temporal_loss = true;
    double disc_dropout = 0.0;

    LossWeights weights;
    std::size_t base_channels = 64;
    std::size_t lstm_hidden = 256;
    std::optional<std::size_t> residual_blocks;
    std::vector<std::size_t> disc_channels = DiscriminatorConfig{}.channels;
    std::size_t disc_dense = 1024;
    FeatureNetConfig featnet;
    std::optional<std::filesystem::path> featnet_checkpoint;
    FlowParams flow;
    SmoothingParams smoothing;

    std::optional<std::filesystem::path> data_dir;
    std::filesystem::path output_dir = "vsr_out";
    /// Write a checkpoint at every epoch end.
    bool write_checkpoints = true;

    void validate() const
    {
        if (epochs < 1) throw ContractError("epochs must be >= 1");
        if (!(learning_rate > 0.0)) throw ContractError("learning rate must be positive");
        if (batch_size < 1 || sequence_length < 1 || crop < 1) throw ContractError("batch, sequence and crop must be >= 1");
        if (!is_power_of_two(scale) || scale < 2 || scale > 8) throw ContractError("scale must be 2, 4 or 8");
        if (!(disc_dropout >= 0.0 && disc_dropout < 1.0)) throw ContractError("disc dropout must lie in [0,1)");
        weights.validate();
    }

    GeneratorConfig generator(std::size_t lr_h, std::size_t lr_w) const
    {
        GeneratorConfig g;
        g.scale_factor = scale;
        g.sequence_length = sequence_length;
        g.base_channels = base_channels;
        g.lstm_hidden = lstm_hidden;
        g.lr_height = lr_h;
        g.lr_width = lr_w;
        g.residual_blocks = residual_blocks;
        g.use_lstm = use_lstm;
        return g;
    }

    DiscriminatorConfig discriminator() const
    {
        DiscriminatorConfig d;
        d.channels = disc_channels;
        d.dense_width = disc_dense;
        d.dropout_rate = disc_dropout;
        return d;
    }
};

struct TrainLogRow {
    std::size_t epoch = 0;
    LossBreakdown g;
    double d_loss = 0.0;
    double psnr_db = 0.0;
    double ssim = 0.0;
    double wall_seconds = 0.0;
};

inline const char* kTrainLogHeader =
    "epoch,g_total,g_image,g_adversarial,g_perceptual,g_tv,g_temporal,d_loss,psnr_db,ssim,wall_seconds";

inline std::string to_csv(const TrainLogRow& r)
{
    std::ostringstream os;
    os << std::setprecision(9) << r.epoch << ',' << r.g.total << ',' << r.g.image << ',' << r.g.adversarial << ','
       << r.g.perceptual << ',' << r.g.tv << ',' << r.g.temporal << ',' << r.d_loss << ',' << r.psnr_db << ','
       << r.ssim << ',' << std::setprecision(4) << r.wall_seconds;
    return os.str();
}

/// A low/high resolution clip pair; `lr_input` is what the generator sees
/// (the aligned LR frames when alignment is on).
struct ClipPair {
    FrameSequence lr;
    FrameSequence hr;
    FrameSequence lr_input;
};

/// Loads <dir>/<clip>/lr and <dir>/<clip>/hr frame directories, clips in name order.
inline std::vector<ClipPair> load_dataset(const std::filesystem::path& dir)
{
    namespace fs = std::filesystem;
    if (!fs::is_directory(dir)) throw IoError("dataset directory not found: " + dir.string());
    std::vector<fs::path> clips;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_directory() && fs::is_directory(e.path() / "lr") && fs::is_directory(e.path() / "hr"))
            clips.push_back(e.path());
    std::sort(clips.begin(), clips.end());
    std::vector<ClipPair> out;
    for (const auto& c : clips) {
        ClipPair p{load_frame_sequence(c / "lr"), load_frame_sequence(c / "hr"), {}};
        if (p.lr.size() != p.hr.size())
            throw ShapeError(c.string() + ": " + std::to_string(p.lr.size()) + " LR frames vs " +
                             std::to_string(p.hr.size()) + " HR frames");
        out.push_back(std::move(p));
    }
    if (out.empty()) throw IoError("no lr/hr clip directories under " + dir.string());
    return out;
}

inline void save_dataset(const std::filesystem::path& dir, const std::vector<ClipPair>& clips)
{
    for (std::size_t i = 0; i < clips.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "clip_%04zu", i);
        save_frame_sequence(dir / name / "lr", clips[i].lr);
        save_frame_sequence(dir / name / "hr", clips[i].hr);
    }
}

/// Translating-texture clips with random sub-4px velocities.
inline std::vector<ClipPair> synthetic_dataset(std::size_t count, std::size_t frames, std::size_t hr_size,
                                               std::size_t scale, std::uint64_t seed, double max_speed = 2.0)
{
    Rng rng(seed);
    std::uniform_real_distribution<double> speed(-max_speed, max_speed);
    std::vector<ClipPair> out;
    for (std::size_t i = 0; i < count; ++i) {
        SynthSpec spec;
        spec.kind = SynthKind::translating_texture;
        spec.vx = speed(rng);
        spec.vy = speed(rng);
        spec.frames = frames;
        spec.height = spec.width = hr_size;
        spec.scale = scale;
        spec.seed = rng();
        auto clip = synth_sequence(spec);
        out.push_back({std::move(clip.lr), std::move(clip.hr), {}});
    }
    return out;
}

/// Fills lr_input for each clip, aligning when requested.
inline void prepare_inputs(std::vector<ClipPair>& clips, bool align, const FlowParams& flow,
                           const SmoothingParams& smoothing)
{
    for (auto& c : clips) c.lr_input = align ? motion_compensate(c.lr, flow, smoothing) : c.lr;
}

/// True when d_loss rises over the final third of training and sits closer
/// to 1 than to the 0.5 equilibrium there.
inline bool discriminator_drift(const std::vector<double>& d_loss)
{
    if (d_loss.size() < 3) return false;
    const std::size_t start = d_loss.size() - d_loss.size() / 3;
    const std::size_t n = d_loss.size() - start;
    if (n < 2) return false;
    double mx = 0.0, my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        mx += double(i);
        my += d_loss[start + i];
    }
    mx /= double(n);
    my /= double(n);
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        sxy += (double(i) - mx) * (d_loss[start + i] - my);
        sxx += (double(i) - mx) * (double(i) - mx);
    }
    const double slope = sxy / sxx;
    return slope > 0.0 && my > 0.75;
}

struct TrainResult {
    std::vector<TrainLogRow> log;
    std::vector<double> step_totals;
    GeneratorConfig generator_config;
    ParamSet<float> generator;
    ParamSet<float> discriminator;
    ParamSet<float> featnet;
    std::filesystem::path checkpoint_path;
    bool discriminator_drift = false;
};

inline ParamSet<float> load_feature_net(const TrainConfig& cfg)
{
    auto p = init_feature_net<float>(cfg.featnet);
    if (cfg.featnet_checkpoint) {
        if (!std::filesystem::exists(*cfg.featnet_checkpoint))
            throw IoError("feature network checkpoint not found: " + cfg.featnet_checkpoint->string());
        load_params(read_checkpoint(*cfg.featnet_checkpoint), "featnet.", p);
    }
    return p;
}

inline Checkpoint make_checkpoint(const ParamSet<float>& g, const ParamSet<float>& d, const ParamSet<float>& f)
{
    Checkpoint ckpt;
    store_params(ckpt, "generator.", g);
    store_params(ckpt, "discriminator.", d);
    store_params(ckpt, "featnet.", f);
    return ckpt;
}

namespace detail {

struct Sample {
    std::size_t clip;
    std::size_t start;
};

inline std::vector<Sample> enumerate_windows(const std::vector<ClipPair>& clips, std::size_t steps)
{
    std::vector<Sample> out;
    for (std::size_t c = 0; c < clips.size(); ++c)
        for (std::size_t s = 0; s + steps <= clips[c].lr.size(); s += steps) out.push_back({c, s});
    return out;
}

inline FrameSequence window(const FrameSequence& seq, std::size_t start, std::size_t steps, std::size_t y,
                            std::size_t x, std::size_t size)
{
    FrameSequence out;
    for (std::size_t t = start; t < start + steps; ++t) out.frames.push_back(crop(seq[t], y, x, size, size));
    return out;
}

inline void set_trainable(const std::vector<Tensor<float>>& params, bool on)
{
    for (auto& t : params) {
        auto h = t;
        h.set_requires_grad(on);
    }
}

} // namespace detail

/// Runs adversarial training on `clips` (lr_input must be prepared).
inline TrainResult train_on(const TrainConfig& cfg, std::vector<ClipPair> clips, std::ostream* log_out = nullptr)
{
    cfg.validate();
    namespace fs = std::filesystem;
    if (clips.empty()) throw ContractError("train: empty dataset");
    const std::size_t steps = cfg.sequence_length, crop = cfg.crop, hr_crop = cfg.crop * cfg.scale;
    for (const auto& c : clips) {
        if (c.lr_input.size() != c.lr.size()) throw ContractError("train: clip inputs not prepared");
        if (c.lr[0].height * cfg.scale != c.hr[0].height || c.lr[0].width * cfg.scale != c.hr[0].width)
            throw ShapeError("train: HR frames are not scale x LR frames");
        if (c.lr[0].height < crop || c.lr[0].width < crop) throw ShapeError("train: crop larger than LR frames");
    }
    const auto samples = detail::enumerate_windows(clips, steps);
    if (samples.empty()) throw ContractError("train: no clip has sequence_length frames");

    Rng rng(cfg.seed);
    TrainResult result;
    result.generator_config = cfg.generator(crop, crop);
    const auto dcfg = cfg.discriminator();
    result.generator = init_generator<float>(result.generator_config, rng());
    result.discriminator = init_discriminator<float>(dcfg, rng());
    result.featnet = load_feature_net(cfg);
    auto& G = result.generator;
    auto& D = result.discriminator;
    const ParamSet<float>& F = result.featnet;
    const FeatureFn<float> features = [&](const Tensor<float>& x) { return feature_extract(x, cfg.featnet, F); };

    Adam<float> opt_g(G.trainable(), {cfg.learning_rate});
    const auto d_params = D.trainable();
    Adam<float> opt_d(d_params, {cfg.learning_rate});

    std::ofstream csv;
    if (cfg.write_checkpoints) {
        fs::create_directories(cfg.output_dir);
        csv.open(cfg.output_dir / "train_log.csv");
        if (!csv) throw IoError("cannot write training log in " + cfg.output_dir.string());
        csv << kTrainLogHeader << '\n';
    }

    const auto t0 = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(samples.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::vector<double> d_history;
    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        TrainLogRow row;
        row.epoch = epoch;
        std::size_t batches = 0, frames_scored = 0;
        for (std::size_t b0 = 0; b0 < order.size(); b0 += cfg.batch_size) {
            std::vector<FrameSequence> lr_batch, hr_batch;
            for (std::size_t k = b0; k < std::min(order.size(), b0 + cfg.batch_size); ++k) {
                const auto& s = samples[order[k]];
                const auto& clip = clips[s.clip];
                std::uniform_int_distribution<std::size_t> py(0, clip.lr[0].height - crop);
                std::uniform_int_distribution<std::size_t> px(0, clip.lr[0].width - crop);
                const std::size_t y = py(rng), x = px(rng);
                lr_batch.push_back(detail::window(clip.lr_input, s.start, steps, y, x, crop));
                hr_batch.push_back(detail::window(clip.hr, s.start, steps, y * cfg.scale, x * cfg.scale, hr_crop));
            }
            const std::size_t nb = lr_batch.size();
            auto lr = sequences_to_tensor<float>(lr_batch);
            auto hr = sequences_to_tensor<float>(hr_batch);
            auto real_flat = reshape(hr, {nb * steps, 3, hr_crop, hr_crop});

            auto fake = generator_forward(lr, result.generator_config, G, Mode::train);
            auto fake_flat = reshape(fake, {nb * steps, 3, hr_crop, hr_crop});

            // Discriminator step on detached fakes.
            auto d_real = discriminator_forward(real_flat, dcfg, D, Mode::train, &rng);
            auto d_fake = discriminator_forward(fake_flat.detach(), dcfg, D, Mode::train, &rng);
            auto d_loss = discriminator_loss(d_real, d_fake);
            opt_d.zero_grad();
            backward(d_loss);
            opt_d.step();

            // Generator step; the discriminator is frozen while its score is used.
            detail::set_trainable(d_params, false);
            auto d_fake_g = discriminator_forward(fake_flat, dcfg, D, Mode::train, &rng);
            auto g_loss = generator_total_loss(d_fake_g, fake, hr, cfg.weights, features, cfg.use_temporal_loss);
            detail::set_trainable(d_params, true);
            validate_finite(g_loss.total, "generator loss");
            opt_g.zero_grad();
            backward(g_loss.total);
            opt_g.step();

            result.step_totals.push_back(g_loss.parts.total);
            row.g.total += g_loss.parts.total;
            row.g.image += g_loss.parts.image;
            row.g.adversarial += g_loss.parts.adversarial;
            row.g.perceptual += g_loss.parts.perceptual;
            row.g.tv += g_loss.parts.tv;
            row.g.temporal += g_loss.parts.temporal;
            row.d_loss += double(d_loss.item());
            const auto outs = tensor_to_sequences(fake);
            for (std::size_t k = 0; k < nb; ++k)
                for (std::size_t t = 0; t < steps; ++t) {
                    row.psnr_db += psnr(outs[k][t], hr_batch[k][t]);
                    row.ssim += hr_crop >= 11 ? ssim(outs[k][t], hr_batch[k][t]) : 0.0;
                    ++frames_scored;
                }
            ++batches;
        }
        const double nb = double(batches);
        row.g.total /= nb;
        row.g.image /= nb;
        row.g.adversarial /= nb;
        row.g.perceptual /= nb;
        row.g.tv /= nb;
        row.g.temporal /= nb;
        row.d_loss /= nb;
        row.psnr_db /= double(frames_scored);
        row.ssim /= double(frames_scored);
        row.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        d_history.push_back(row.d_loss);
        result.log.push_back(row);
        if (log_out) *log_out << to_csv(row) << std::endl;
        if (cfg.write_checkpoints) {
            csv << to_csv(row) << '\n' << std::flush;
            result.checkpoint_path = cfg.output_dir / "checkpoint.vsrckpt";
            write_checkpoint(make_checkpoint(G, D, F), result.checkpoint_path);
        }
    }
    result.discriminator_drift = discriminator_drift(d_history);
    return result;
}

/// Loads or synthesises the dataset for `cfg` and trains.
inline TrainResult train(const TrainConfig& cfg, std::size_t synthetic_clips = 0, std::ostream* log_out = nullptr)
{
    std::vector<ClipPair> clips;
    if (cfg.data_dir)
        clips = load_dataset(*cfg.data_dir);
    else if (synthetic_clips > 0)
        clips = synthetic_dataset(synthetic_clips, cfg.sequence_length, 2 * cfg.crop * cfg.scale, cfg.scale,
                                  cfg.seed ^ 0x9e3779b97f4a7c15ULL);
    else
        throw ContractError("train: no dataset path and no synthetic clips requested");
    prepare_inputs(clips, cfg.use_alignment, cfg.flow, cfg.smoothing);
    return train_on(cfg, std::move(clips), log_out);
}

// ---------------------------------------------------------------------------
// Inference

/// Eval-mode generator over consecutive windows of T frames (stride T). A
/// trailing partial window is padded by repeating its last frame.
inline FrameSequence upscale_sequence(const FrameSequence& input, const GeneratorConfig& gcfg,
                                      const ParamSet<float>& G)
{
    if (input.empty()) throw ContractError("upscale: empty input");
    const std::size_t steps = gcfg.sequence_length;
    if (input[0].height != gcfg.lr_height || input[0].width != gcfg.lr_width)
        throw ShapeError("upscale: frames are " + std::to_string(input[0].width) + "x" +
                         std::to_string(input[0].height) + " but the generator expects " +
                         std::to_string(gcfg.lr_width) + "x" + std::to_string(gcfg.lr_height));
    NoGradGuard no_grad;
    FrameSequence out;
    out.fps = input.fps;
    for (std::size_t start = 0; start < input.size(); start += steps) {
        FrameSequence win;
        for (std::size_t t = 0; t < steps; ++t) win.frames.push_back(input[std::min(start + t, input.size() - 1)]);
        auto y = generator_forward(sequences_to_tensor<float>({win}), gcfg, G, Mode::eval);
        auto frames = tensor_to_sequences(y)[0];
        for (std::size_t t = 0; t < steps && start + t < input.size(); ++t) out.frames.push_back(frames[t]);
    }
    return out;
}

/// Full-frame upscaling of a frame directory with a trained checkpoint.
/// With the LSTM enabled the frames must match the training crop size.
inline FrameSequence upscale(const std::filesystem::path& input_dir, const std::filesystem::path& checkpoint,
                             const TrainConfig& cfg, const std::optional<std::filesystem::path>& output_dir)
{
    auto frames = load_frame_sequence(input_dir);
    const std::size_t h = frames[0].height, w = frames[0].width;
    if (cfg.use_lstm && (h != cfg.crop || w != cfg.crop))
        throw ShapeError("upscale: LSTM generator trained on " + std::to_string(cfg.crop) + "x" +
                         std::to_string(cfg.crop) + " inputs cannot run full-frame on " + std::to_string(w) + "x" +
                         std::to_string(h) + " frames");
    const auto gcfg = cfg.generator(h, w);
    auto G = init_generator<float>(gcfg, 0);
    load_params(read_checkpoint(checkpoint), "generator.", G);
    if (cfg.use_alignment) frames = motion_compensate(frames, cfg.flow, cfg.smoothing);
    auto out = upscale_sequence(frames, gcfg, G);
    if (output_dir) save_frame_sequence(*output_dir, out);
    return out;
}

// ---------------------------------------------------------------------------
// Evaluation

inline nlohmann::json to_json(const MetricReport& r)
{
    auto num = [](double v) -> nlohmann::json {
        if (std::isinf(v)) return nullptr;
        return v;
    };
    nlohmann::json j;
    j["psnr_db"] = num(r.psnr_db);
    j["ssim"] = r.ssim;
    j["frames"] = r.per_frame_psnr.size();
    j["infinite_psnr_frames"] = r.infinite_frames;
    j["all_psnr_infinite"] = r.all_psnr_infinite;
    if (r.temporal_inconsistency) j["temporal_inconsistency"] = *r.temporal_inconsistency;
    j["per_frame"] = nlohmann::json::array();
    for (std::size_t i = 0; i < r.per_frame_psnr.size(); ++i)
        j["per_frame"].push_back({{"psnr_db", num(r.per_frame_psnr[i])}, {"ssim", r.per_frame_ssim[i]}});
    return j;
}

inline MetricReport evaluate_sequences(const FrameSequence& pred, const FrameSequence& gt,
                                       const MetricParams& params = {})
{
    if (pred.size() != gt.size())
        throw ShapeError("evaluate: frame counts differ (" + std::to_string(pred.size()) + " predicted vs " +
                         std::to_string(gt.size()) + " ground truth)");
    auto report = evaluate_sequence(pred, gt, params);
    if (pred.size() >= 2) report.temporal_inconsistency = temporal_inconsistency(pred, gt);
    return report;
}

/// Scores a predicted frame directory against ground truth; writes
/// <out>.txt (key=value) and <out>.json when `report_base` is given.
inline MetricReport evaluate(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir,
                             const std::optional<std::filesystem::path>& report_base = std::nullopt)
{
    const auto report = evaluate_sequences(load_frame_sequence(pred_dir), load_frame_sequence(gt_dir));
    if (report_base) {
        auto base = *report_base;
        if (base.has_parent_path()) std::filesystem::create_directories(base.parent_path());
        std::ofstream txt(base.string() + ".txt"), js(base.string() + ".json");
        if (!txt || !js) throw IoError("cannot write report " + base.string());
        txt << to_key_value(report);
        js << to_json(report).dump(2) << '\n';
    }
    return report;
}

// ---------------------------------------------------------------------------
// Flow diagnostics

inline double mean_magnitude(const FlowField& f)
{
    double acc = 0.0;
    for (std::size_t i = 0; i < f.height * f.width; ++i) acc += std::hypot(f.vectors[2 * i], f.vectors[2 * i + 1]);
    return acc / double(f.height * f.width);
}

struct FlowDebugResult {
    std::vector<FlowField> raw;
    std::vector<FlowField> smoothed;
    FrameSequence aligned;
    std::vector<double> mean_magnitude;
};

/// Writes raw/smoothed flows (tensor containers) and aligned frames under `out_dir`.
inline FlowDebugResult flow_debug(const FrameSequence& frames, const std::optional<std::filesystem::path>& out_dir,
                                  const SmoothingParams& smoothing, const FlowParams& params = {})
{
    if (frames.size() < 2) throw ContractError("flow: need at least two frames");
    FlowDebugResult r;
    r.raw = estimate_motion_vectors(frames, fit_flow_params(params, frames[0].height, frames[0].width));
    r.smoothed = smooth_motion_vectors(r.raw, smoothing);
    r.aligned = align_frames(frames, r.smoothed);
    for (const auto& f : r.raw) r.mean_magnitude.push_back(mean_magnitude(f));
    if (out_dir) {
        namespace fs = std::filesystem;
        fs::create_directories(*out_dir);
        for (std::size_t i = 0; i < r.raw.size(); ++i) {
            char name[40];
            std::snprintf(name, sizeof(name), "raw_flow_%06zu.vtsr", i);
            save_tensor(*out_dir / name, to_raw(r.raw[i]));
            std::snprintf(name, sizeof(name), "smoothed_flow_%06zu.vtsr", i);
            save_tensor(*out_dir / name, to_raw(r.smoothed[i]));
        }
        save_frame_sequence(*out_dir / "aligned", r.aligned);
    }
    return r;
}

} // namespace vsr
