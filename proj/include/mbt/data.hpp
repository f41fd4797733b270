#pragma once

// LR/HR pair synthesis, patch sampling, augmentation, and the seeded
// procedural dataset generator used in place of a real corpus.

#include <string>
#include <utility>
#include <vector>

#include "mbt/image.hpp"
#include "mbt/rng.hpp"
#include "mbt/tensor.hpp"

namespace mbt {

struct PairItem {
    Image lr;
    Image hr;
    std::string id;
};

struct PairDataset {
    int scale = 2;
    std::vector<PairItem> items;

    /// Checks the exact scale relation on every pair.
    void validate() const;
};

/// Bicubic downsample by r (HR cropped to the largest multiple of r first),
/// clamped to [0,1] and quantized back to 8 bits.
Image make_lr(const Image& hr, int r);

struct AugmentSpec {
    int rot_quarter = 0;  // quarter-turns clockwise, 0..3
    bool hflip = false;
};

Image augment_image(const Image& img, const AugmentSpec& spec);
AugmentSpec inverse_augment(const AugmentSpec& spec);

Image crop_image(const Image& img, int x, int y, int w, int h);

/// Aligned random LR/HR patch pair; the HR offset is exactly scale times the
/// LR offset.
std::pair<Image, Image> sample_patch(const PairItem& item, int patch, int scale, Rng& rng);

/// Procedural HR content, float [0,1], 3 planes of size*size (planar order).
/// Kinds cycle through gratings, checkerboards, Gaussian blobs, and
/// piecewise-constant rectangles.
enum class SynthKind { Grating = 0, Checker = 1, Blobs = 2, Rects = 3 };
std::vector<double> synth_hr_field(int size, SynthKind kind, Rng& rng);

const char* synth_kind_name(SynthKind kind);

/// Seeded synthetic dataset: `count` HR images of size x size with their
/// bicubic LR counterparts. Size must be divisible by 8 * scale.
PairDataset synth_dataset(int count, int size, int scale, u64 seed);

/// Directory layout: dir/hr/<name>.ppm, dir/lr_x{r}/<name>.ppm and a
/// manifest.txt pinning the order (one file name per line).
void write_dataset(const PairDataset& ds, const std::string& dir);
PairDataset load_dataset(const std::string& dir, int scale);

// Image <-> tensor bridges ([1,3,H,W], values in [0,1]).
template <typename T>
Tensor<T> image_to_tensor(const Image& img) {
    Tensor<T> t({1, 3, img.height, img.width});
    T* p = t.data();
    const i64 hw = static_cast<i64>(img.width) * img.height;
    for (i64 i = 0; i < hw; ++i)
        for (i64 c = 0; c < 3; ++c)
            p[c * hw + i] = static_cast<T>(sample_to_float(img.pixels[static_cast<size_t>(i * 3 + c)]));
    return t;
}

template <typename T>
Image tensor_to_image(const Tensor<T>& t) {
    if (t.rank() != 4 || t.dim(0) != 1 || t.dim(1) != 3) throw ShapeError("tensor_to_image: expected [1,3,H,W]");
    Image img(static_cast<int>(t.dim(3)), static_cast<int>(t.dim(2)));
    const T* p = t.data();
    const i64 hw = t.dim(2) * t.dim(3);
    for (i64 i = 0; i < hw; ++i)
        for (i64 c = 0; c < 3; ++c)
            img.pixels[static_cast<size_t>(i * 3 + c)] = float_to_sample(static_cast<double>(p[c * hw + i]));
    return img;
}

}  // namespace mbt
