#pragma once

// PSNR and SSIM on 8-bit images, plus report aggregation.

#include <string>
#include <vector>

#include "mbt/image.hpp"

namespace mbt {

/// 10*log10(255^2 / MSE) with `shave` border pixels removed from both
/// images first. Zero MSE reports the 100 dB cap. y_channel switches the
/// comparison to BT.601 luma.
double psnr(const Image& a, const Image& b, int shave = 0, bool y_channel = false);

/// Mean local SSIM over valid 11x11 Gaussian windows (sigma 1.5, K1=0.01,
/// K2=0.03, L=255), averaged over channels (or BT.601 luma).
double ssim(const Image& a, const Image& b, bool y_channel = false);

struct MetricRow {
    std::string id;
    double psnr = 0;
    double ssim = 0;
};

struct ClassMean {
    std::string prefix;
    double psnr = 0;
    double ssim = 0;
    int count = 0;
};

struct MetricReport {
    std::vector<MetricRow> rows;  // sorted by id
    double mean_psnr = 0;
    double mean_ssim = 0;
    std::vector<ClassMean> class_means;

    std::string to_text() const;
    std::string to_csv() const;
};

/// Sorts rows by id, computes dataset means and per-class means keyed by the
/// identifier prefix (text before the last underscore).
MetricReport aggregate_report(std::vector<MetricRow> rows);

}  // namespace mbt
