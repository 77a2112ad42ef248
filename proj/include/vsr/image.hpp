#pragma once

// Plain value types for frames and motion fields. These carry no gradient
// tracking; models consume them through to_tensor()/from_tensor().

#include <cstddef>
#include <string>
#include <vector>

#include "vsr/tensor.hpp"

namespace vsr {

/// Planar CHW image with float samples, nominally in [0,1].
struct Image {
    std::size_t channels = 0;
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> data;

    Image() = default;
    Image(std::size_t c, std::size_t h, std::size_t w, float fill = 0.0f)
        : channels(c), height(h), width(w), data(c * h * w, fill)
    {
    }

    float& at(std::size_t c, std::size_t y, std::size_t x) { return data[(c * height + y) * width + x]; }
    float at(std::size_t c, std::size_t y, std::size_t x) const { return data[(c * height + y) * width + x]; }

    bool same_dims(const Image& o) const { return channels == o.channels && height == o.height && width == o.width; }
    bool operator==(const Image& o) const = default;
};

/// Ordered frames; index order is temporal order.
struct FrameSequence {
    std::vector<Image> frames;
    double fps = 0.0;

    std::size_t size() const { return frames.size(); }
    bool empty() const { return frames.empty(); }
    const Image& operator[](std::size_t i) const { return frames[i]; }
    Image& operator[](std::size_t i) { return frames[i]; }
};

/// Dense displacement field, (dx, dy) interleaved per pixel. dx is the
/// column displacement, dy the row displacement, earlier frame to later.
struct FlowField {
    std::size_t height = 0;
    std::size_t width = 0;
    std::vector<float> vectors;

    FlowField() = default;
    FlowField(std::size_t h, std::size_t w, float dx = 0.0f, float dy = 0.0f) : height(h), width(w), vectors(2 * h * w)
    {
        for (std::size_t i = 0; i < h * w; ++i) {
            vectors[2 * i] = dx;
            vectors[2 * i + 1] = dy;
        }
    }

    float& dx(std::size_t y, std::size_t x) { return vectors[2 * (y * width + x)]; }
    float& dy(std::size_t y, std::size_t x) { return vectors[2 * (y * width + x) + 1]; }
    float dx(std::size_t y, std::size_t x) const { return vectors[2 * (y * width + x)]; }
    float dy(std::size_t y, std::size_t x) const { return vectors[2 * (y * width + x) + 1]; }

    bool operator==(const FlowField& o) const = default;
};

/// Stacks B sequences of T frames into a [B,T,C,H,W] tensor.
template <typename T = float>
Tensor<T> sequences_to_tensor(const std::vector<FrameSequence>& batch, bool requires_grad = false)
{
    if (batch.empty() || batch[0].empty()) throw ShapeError("sequences_to_tensor: empty batch");
    const Image& ref = batch[0][0];
    const std::size_t steps = batch[0].size();
    std::vector<T> values;
    values.reserve(batch.size() * steps * ref.data.size());
    for (const auto& seq : batch) {
        if (seq.size() != steps) throw ShapeError("sequences_to_tensor: ragged sequence lengths");
        for (const auto& f : seq.frames) {
            if (!f.same_dims(ref)) throw ShapeError("sequences_to_tensor: inconsistent frame dims");
            values.insert(values.end(), f.data.begin(), f.data.end());
        }
    }
    return Tensor<T>({batch.size(), steps, ref.channels, ref.height, ref.width}, std::move(values), requires_grad);
}

/// Inverse of sequences_to_tensor for a [B,T,C,H,W] tensor.
template <typename T>
std::vector<FrameSequence> tensor_to_sequences(const Tensor<T>& t)
{
    if (t.rank() != 5) throw ShapeError("tensor_to_sequences: expected [B,T,C,H,W], got " + to_string(t.shape()));
    const std::size_t b = t.dim(0), steps = t.dim(1), c = t.dim(2), h = t.dim(3), w = t.dim(4);
    std::vector<FrameSequence> out(b);
    std::size_t k = 0;
    for (std::size_t n = 0; n < b; ++n)
        for (std::size_t s = 0; s < steps; ++s) {
            Image img(c, h, w);
            for (auto& v : img.data) v = static_cast<float>(t[k++]);
            out[n].frames.push_back(std::move(img));
        }
    return out;
}

/// Single image as a [1,C,H,W] tensor.
template <typename T = float>
Tensor<T> image_to_tensor(const Image& img)
{
    return Tensor<T>({1, img.channels, img.height, img.width}, std::vector<T>(img.data.begin(), img.data.end()));
}

} // namespace vsr
