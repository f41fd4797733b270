#include "mbt/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "mbt/ops.hpp"

namespace fs = std::filesystem;

namespace mbt {

void PairDataset::validate() const {
    for (const auto& item : items) {
        if (item.hr.width != item.lr.width * scale || item.hr.height != item.lr.height * scale)
            throw ValueError("dataset: pair '" + item.id + "' violates the x" + std::to_string(scale) +
                             " dimension relation");
    }
}

Image make_lr(const Image& hr, int r) {
    if (r < 2) throw ValueError("make_lr: scale must be >= 2");
    const int cw = (hr.width / r) * r;
    const int ch = (hr.height / r) * r;
    if (cw == 0 || ch == 0) throw ValueError("make_lr: image smaller than the scale factor");
    Image cropped = crop_image(hr, 0, 0, cw, ch);

    Tensor<double> t = image_to_tensor<double>(cropped);
    Tensor<double> low = resample_bicubic(t, ch / r, cw / r);
    double* p = low.data();
    for (i64 i = 0; i < low.numel(); ++i) p[i] = std::clamp(p[i], 0.0, 1.0);
    return tensor_to_image(low);
}

Image crop_image(const Image& img, int x, int y, int w, int h) {
    if (x < 0 || y < 0 || w < 1 || h < 1 || x + w > img.width || y + h > img.height)
        throw ValueError("crop: window outside the image");
    Image out(w, h);
    for (int row = 0; row < h; ++row)
        std::copy_n(&img.pixels[(static_cast<size_t>(y + row) * img.width + x) * 3], static_cast<size_t>(w) * 3,
                    &out.pixels[static_cast<size_t>(row) * w * 3]);
    return out;
}

namespace {

Image rotate90_cw(const Image& in) {
    Image out(in.height, in.width);
    for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < in.width; ++x)
            for (int c = 0; c < 3; ++c)
                out.at(in.height - 1 - y, x, c) = in.at(x, y, c);
    return out;
}

Image hflip(const Image& in) {
    Image out(in.width, in.height);
    for (int y = 0; y < in.height; ++y)
        for (int x = 0; x < in.width; ++x)
            for (int c = 0; c < 3; ++c)
                out.at(in.width - 1 - x, y, c) = in.at(x, y, c);
    return out;
}

}  // namespace

Image augment_image(const Image& img, const AugmentSpec& spec) {
    Image out = img;
    for (int k = 0; k < ((spec.rot_quarter % 4) + 4) % 4; ++k) out = rotate90_cw(out);
    if (spec.hflip) out = hflip(out);
    return out;
}

AugmentSpec inverse_augment(const AugmentSpec& spec) {
    // Rotation then flip inverts as flip then counter-rotation; flipping
    // first mirrors the rotation direction, so the inverse rotation of k
    // quarter-turns under a flip is k itself.
    AugmentSpec inv;
    inv.hflip = spec.hflip;
    inv.rot_quarter = spec.hflip ? spec.rot_quarter % 4 : (4 - spec.rot_quarter % 4) % 4;
    return inv;
}

std::pair<Image, Image> sample_patch(const PairItem& item, int patch, int scale, Rng& rng) {
    if (patch < 1 || patch > item.lr.width || patch > item.lr.height)
        throw ValueError("sample_patch: patch " + std::to_string(patch) + " exceeds LR dims");
    const int ox = static_cast<int>(rng.range(item.lr.width - patch + 1));
    const int oy = static_cast<int>(rng.range(item.lr.height - patch + 1));
    Image lr = crop_image(item.lr, ox, oy, patch, patch);
    Image hr = crop_image(item.hr, ox * scale, oy * scale, patch * scale, patch * scale);
    return {std::move(lr), std::move(hr)};
}

const char* synth_kind_name(SynthKind kind) {
    switch (kind) {
        case SynthKind::Grating: return "grating";
        case SynthKind::Checker: return "checker";
        case SynthKind::Blobs: return "blobs";
        default: return "rects";
    }
}

std::vector<double> synth_hr_field(int size, SynthKind kind, Rng& rng) {
    const i64 hw = static_cast<i64>(size) * size;
    std::vector<double> field(static_cast<size_t>(3 * hw), 0.0);
    auto at = [&](i64 c, i64 y, i64 x) -> double& { return field[static_cast<size_t>(c * hw + y * size + x)]; };

    switch (kind) {
        case SynthKind::Grating: {
            // Two superposed sinusoidal gratings, wavelengths >= 6 px.
            const double f1 = 1.0 + rng.range(size / 6 - 1 > 0 ? size / 6 - 1 : 1);
            const double f2 = 1.0 + rng.range(size / 8 - 1 > 0 ? size / 8 - 1 : 1);
            const double th1 = rng.uniform() * 6.283185307179586;
            const double th2 = rng.uniform() * 6.283185307179586;
            const double ph1 = rng.uniform() * 6.283185307179586;
            const double ph2 = rng.uniform() * 6.283185307179586;
            const double a1 = 0.15 + 0.1 * rng.uniform();
            const double a2 = 0.08 + 0.08 * rng.uniform();
            for (int c = 0; c < 3; ++c) {
                const double base = 0.35 + 0.3 * rng.uniform();
                for (int y = 0; y < size; ++y)
                    for (int x = 0; x < size; ++x) {
                        const double u = static_cast<double>(x) / size, v = static_cast<double>(y) / size;
                        double val = base +
                                     a1 * std::sin(6.283185307179586 * f1 * (u * std::cos(th1) + v * std::sin(th1)) + ph1) +
                                     a2 * std::sin(6.283185307179586 * f2 * (u * std::cos(th2) + v * std::sin(th2)) + ph2);
                        at(c, y, x) = std::clamp(val, 0.0, 1.0);
                    }
            }
            break;
        }
        case SynthKind::Checker: {
            // Exactly two distinct sample values, shared by all channels.
            const int cells[] = {4, 8, 16};
            const int cell = cells[rng.range(3)];
            const double lo = 0.05 + 0.3 * rng.uniform();
            const double hi = 0.6 + 0.35 * rng.uniform();
            for (int y = 0; y < size; ++y)
                for (int x = 0; x < size; ++x) {
                    const double v = (((x / cell) + (y / cell)) % 2 == 0) ? lo : hi;
                    for (int c = 0; c < 3; ++c) at(c, y, x) = v;
                }
            break;
        }
        case SynthKind::Blobs: {
            const int count = 6 + static_cast<int>(rng.range(6));
            std::vector<double> cx(count), cy(count), sg(count), amp(count * 3);
            for (int i = 0; i < count; ++i) {
                cx[i] = rng.uniform() * size;
                cy[i] = rng.uniform() * size;
                sg[i] = size * (0.03 + 0.08 * rng.uniform());
                for (int c = 0; c < 3; ++c) amp[i * 3 + c] = (rng.uniform() - 0.35) * 0.8;
            }
            for (int c = 0; c < 3; ++c) {
                const double base = 0.3 + 0.2 * rng.uniform();
                for (int y = 0; y < size; ++y)
                    for (int x = 0; x < size; ++x) {
                        double val = base + 0.15 * (static_cast<double>(x) + y) / (2.0 * size);
                        for (int i = 0; i < count; ++i) {
                            const double dx = x - cx[i], dy = y - cy[i];
                            val += amp[i * 3 + c] * std::exp(-(dx * dx + dy * dy) / (2.0 * sg[i] * sg[i]));
                        }
                        at(c, y, x) = std::clamp(val, 0.0, 1.0);
                    }
            }
            break;
        }
        case SynthKind::Rects: {
            for (int c = 0; c < 3; ++c) {
                const double base = 0.2 + 0.5 * rng.uniform();
                for (i64 i = 0; i < hw; ++i) field[static_cast<size_t>(c * hw + i)] = base;
            }
            const int count = 5 + static_cast<int>(rng.range(6));
            for (int i = 0; i < count; ++i) {
                const int w = 4 + static_cast<int>(rng.range(size / 2));
                const int h = 4 + static_cast<int>(rng.range(size / 2));
                const int x0 = static_cast<int>(rng.range(size - w));
                const int y0 = static_cast<int>(rng.range(size - h));
                double col[3];
                for (double& v : col) v = rng.uniform();
                for (int y = y0; y < y0 + h; ++y)
                    for (int x = x0; x < x0 + w; ++x)
                        for (int c = 0; c < 3; ++c) at(c, y, x) = col[c];
            }
            break;
        }
    }
    return field;
}

PairDataset synth_dataset(int count, int size, int scale, u64 seed) {
    if (count < 1) throw ValueError("synth: count must be positive");
    if (size % (8 * scale) != 0)
        throw ValueError("synth: size " + std::to_string(size) + " must be divisible by " + std::to_string(8 * scale));
    PairDataset ds;
    ds.scale = scale;
    ds.items.reserve(static_cast<size_t>(count));
    const i64 hw = static_cast<i64>(size) * size;
    for (int i = 0; i < count; ++i) {
        Rng rng(Rng::derive(seed, static_cast<u64>(i)));
        const SynthKind kind = static_cast<SynthKind>(i % 4);
        std::vector<double> field = synth_hr_field(size, kind, rng);
        Image hr(size, size);
        for (i64 p = 0; p < hw; ++p)
            for (i64 c = 0; c < 3; ++c)
                hr.pixels[static_cast<size_t>(p * 3 + c)] = float_to_sample(field[static_cast<size_t>(c * hw + p)]);
        PairItem item;
        item.hr = hr;
        item.lr = make_lr(hr, scale);
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%s_%03d", synth_kind_name(kind), i);
        item.id = buf;
        ds.items.push_back(std::move(item));
    }
    return ds;
}

void write_dataset(const PairDataset& ds, const std::string& dir) {
    const fs::path root(dir);
    const fs::path hr_dir = root / "hr";
    const fs::path lr_dir = root / ("lr_x" + std::to_string(ds.scale));
    fs::create_directories(hr_dir);
    fs::create_directories(lr_dir);
    std::ofstream manifest(root / "manifest.txt");
    if (!manifest) throw FormatError("dataset: cannot write manifest in " + dir);
    for (const auto& item : ds.items) {
        const std::string name = item.id + ".ppm";
        write_ppm(item.hr, (hr_dir / name).string());
        write_ppm(item.lr, (lr_dir / name).string());
        manifest << name << "\n";
    }
}

PairDataset load_dataset(const std::string& dir, int scale) {
    const fs::path root(dir);
    const fs::path hr_dir = root / "hr";
    const fs::path lr_dir = root / ("lr_x" + std::to_string(scale));
    if (!fs::is_directory(hr_dir) || !fs::is_directory(lr_dir))
        throw ValueError("dataset: " + dir + " lacks hr/ or lr_x" + std::to_string(scale) + "/");

    std::vector<std::string> names;
    const fs::path manifest = root / "manifest.txt";
    if (fs::exists(manifest)) {
        std::ifstream in(manifest);
        std::string line;
        while (std::getline(in, line)) {
            if (!line.empty()) names.push_back(line);
        }
    } else {
        for (const auto& entry : fs::directory_iterator(hr_dir))
            if (entry.path().extension() == ".ppm") names.push_back(entry.path().filename().string());
        std::sort(names.begin(), names.end());
    }
    if (names.empty()) throw ValueError("dataset: no images found in " + dir);

    PairDataset ds;
    ds.scale = scale;
    for (const std::string& name : names) {
        PairItem item;
        item.hr = read_ppm((hr_dir / name).string());
        item.lr = read_ppm((lr_dir / name).string());
        item.id = fs::path(name).stem().string();
        ds.items.push_back(std::move(item));
    }
    ds.validate();
    return ds;
}

}  // namespace mbt
