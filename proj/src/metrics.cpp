#include "mbt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace mbt {

namespace {

void require_same_dims(const Image& a, const Image& b, const char* who) {
    if (a.width != b.width || a.height != b.height)
        throw ShapeError(std::string(who) + ": image dimensions differ");
}

// Per-pixel values on the [0,255] scale; 3 channels or 1 luma plane.
std::vector<double> planes_of(const Image& img, bool y_channel) {
    const size_t hw = static_cast<size_t>(img.width) * img.height;
    if (!y_channel) {
        std::vector<double> out(hw * 3);
        for (size_t i = 0; i < hw; ++i)
            for (int c = 0; c < 3; ++c)
                out[static_cast<size_t>(c) * hw + i] = static_cast<double>(img.pixels[i * 3 + c]);
        return out;
    }
    std::vector<double> out(hw);
    for (size_t i = 0; i < hw; ++i)
        out[i] = 0.299 * img.pixels[i * 3] + 0.587 * img.pixels[i * 3 + 1] + 0.114 * img.pixels[i * 3 + 2];
    return out;
}

}  // namespace

double psnr(const Image& a, const Image& b, int shave, bool y_channel) {
    require_same_dims(a, b, "psnr");
    if (shave < 0) throw ValueError("psnr: shave must be >= 0");
    const int w = a.width, h = a.height;
    if (w - 2 * shave < 1 || h - 2 * shave < 1) throw ValueError("psnr: shave removes the whole image");
    const std::vector<double> pa = planes_of(a, y_channel);
    const std::vector<double> pb = planes_of(b, y_channel);
    const size_t hw = static_cast<size_t>(w) * h;
    const size_t channels = pa.size() / hw;

    double se = 0.0;
    i64 count = 0;
    for (size_t c = 0; c < channels; ++c)
        for (int y = shave; y < h - shave; ++y)
            for (int x = shave; x < w - shave; ++x) {
                const double d = pa[c * hw + static_cast<size_t>(y) * w + x] - pb[c * hw + static_cast<size_t>(y) * w + x];
                se += d * d;
                ++count;
            }
    const double mse = se / static_cast<double>(count);
    if (mse == 0.0) return 100.0;  // documented cap for identical content
    return 10.0 * std::log10(255.0 * 255.0 / mse);
}

double ssim(const Image& a, const Image& b, bool y_channel) {
    require_same_dims(a, b, "ssim");
    const int w = a.width, h = a.height;
    constexpr int kWin = 11;
    if (w < kWin || h < kWin) throw ValueError("ssim: image smaller than the 11x11 window");

    // Normalized Gaussian window, sigma 1.5.
    double win[kWin * kWin];
    double wsum = 0.0;
    for (int dy = 0; dy < kWin; ++dy)
        for (int dx = 0; dx < kWin; ++dx) {
            const double d2 = (dy - 5.0) * (dy - 5.0) + (dx - 5.0) * (dx - 5.0);
            win[dy * kWin + dx] = std::exp(-d2 / (2.0 * 1.5 * 1.5));
            wsum += win[dy * kWin + dx];
        }
    for (double& v : win) v /= wsum;

    const double c1 = (0.01 * 255.0) * (0.01 * 255.0);
    const double c2 = (0.03 * 255.0) * (0.03 * 255.0);

    const std::vector<double> pa = planes_of(a, y_channel);
    const std::vector<double> pb = planes_of(b, y_channel);
    const size_t hw = static_cast<size_t>(w) * h;
    const size_t channels = pa.size() / hw;

    double total = 0.0;
    i64 windows = 0;
    for (size_t c = 0; c < channels; ++c) {
        const double* xa = pa.data() + c * hw;
        const double* xb = pb.data() + c * hw;
        for (int y = 0; y + kWin <= h; ++y)
            for (int x = 0; x + kWin <= w; ++x) {
                double mua = 0.0, mub = 0.0;
                for (int dy = 0; dy < kWin; ++dy)
                    for (int dx = 0; dx < kWin; ++dx) {
                        const double g = win[dy * kWin + dx];
                        mua += g * xa[static_cast<size_t>(y + dy) * w + x + dx];
                        mub += g * xb[static_cast<size_t>(y + dy) * w + x + dx];
                    }
                double va = 0.0, vb = 0.0, cov = 0.0;
                for (int dy = 0; dy < kWin; ++dy)
                    for (int dx = 0; dx < kWin; ++dx) {
                        const double g = win[dy * kWin + dx];
                        const double da = xa[static_cast<size_t>(y + dy) * w + x + dx] - mua;
                        const double db = xb[static_cast<size_t>(y + dy) * w + x + dx] - mub;
                        va += g * da * da;
                        vb += g * db * db;
                        cov += g * da * db;
                    }
                total += ((2.0 * mua * mub + c1) * (2.0 * cov + c2)) / ((mua * mua + mub * mub + c1) * (va + vb + c2));
                ++windows;
            }
    }
    return total / static_cast<double>(windows);
}

MetricReport aggregate_report(std::vector<MetricRow> rows) {
    std::sort(rows.begin(), rows.end(), [](const MetricRow& x, const MetricRow& y) { return x.id < y.id; });
    MetricReport report;
    report.rows = std::move(rows);
    std::map<std::string, ClassMean> classes;
    for (const auto& row : report.rows) {
        report.mean_psnr += row.psnr;
        report.mean_ssim += row.ssim;
        const size_t us = row.id.rfind('_');
        const std::string prefix = us == std::string::npos ? row.id : row.id.substr(0, us);
        auto& cm = classes[prefix];
        cm.prefix = prefix;
        cm.psnr += row.psnr;
        cm.ssim += row.ssim;
        ++cm.count;
    }
    if (!report.rows.empty()) {
        report.mean_psnr /= static_cast<double>(report.rows.size());
        report.mean_ssim /= static_cast<double>(report.rows.size());
    }
    for (auto& [prefix, cm] : classes) {
        cm.psnr /= cm.count;
        cm.ssim /= cm.count;
        report.class_means.push_back(cm);
    }
    return report;
}

std::string MetricReport::to_text() const {
    std::ostringstream os;
    os.precision(4);
    os << std::fixed;
    os << "image            psnr(dB)   ssim\n";
    for (const auto& row : rows) {
        os << row.id;
        for (size_t i = row.id.size(); i < 17; ++i) os << ' ';
        os << row.psnr << "    " << row.ssim << "\n";
    }
    if (class_means.size() > 1) {
        os << "-- per-class means --\n";
        for (const auto& cm : class_means) {
            os << cm.prefix;
            for (size_t i = cm.prefix.size(); i < 17; ++i) os << ' ';
            os << cm.psnr << "    " << cm.ssim << "  (" << cm.count << " images)\n";
        }
    }
    os << "mean             " << mean_psnr << "    " << mean_ssim << "  (" << rows.size() << " images)\n";
    return os.str();
}

std::string MetricReport::to_csv() const {
    std::ostringstream os;
    os.precision(9);
    os << "id,psnr,ssim\n";
    for (const auto& row : rows) os << row.id << "," << row.psnr << "," << row.ssim << "\n";
    os << "mean," << mean_psnr << "," << mean_ssim << "\n";
    return os.str();
}

}  // namespace mbt
