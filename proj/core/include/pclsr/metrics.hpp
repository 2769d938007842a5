#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "pclsr/datapipe.hpp"
#include "pclsr/image.hpp"

namespace pclsr::metrics {

/// ITU-R BT.601 luma of a [0,1] RGB image, returned in [0,255]:
///   Y = 16 + 65.481 R + 128.553 G + 24.966 B
/// Inputs outside [0,1] by more than 1e-6 raise RangeError.
Image rgb_to_y(const Image& rgb);

/// PSNR on the Y channel after shaving `shave` pixels from every border.
/// Identical inputs give +infinity.
double psnr_y(const Image& sr, const Image& hr, int shave);

/// Single-scale SSIM on the Y channel: 11x11 Gaussian window (sigma 1.5),
/// K1 = 0.01, K2 = 0.03, L = 255, valid-window positions only, computed
/// after shaving. No pre-downsampling.
double ssim_y(const Image& sr, const Image& hr, int shave);

struct ImageScore {
  std::string name;
  double psnr = 0.0;
  double ssim = 0.0;
};

struct EvalReport {
  std::string dataset;
  int scale = 0;
  int shave = 0;
  std::vector<ImageScore> images;
  double mean_psnr = 0.0;
  double mean_ssim = 0.0;
};

/// PSNR values are capped at 100 dB in reports so identical images stay
/// representable in the CSV.
inline constexpr double kPsnrCap = 100.0;

using Upscaler = std::function<Image(const Image& lr)>;

/// Run `up` over every pair of the dataset and score against HR.
EvalReport evaluate_dataset(const data::Dataset& ds, const Upscaler& up, int shave);

/// Bicubic anchor: upscale LR with the pinned bicubic and clamp.
EvalReport evaluate_bicubic(const data::Dataset& ds, int shave);

/// name,psnr,ssim rows followed by a mean row.
void write_report_csv(const std::filesystem::path& path, const EvalReport& r);

}  // namespace pclsr::metrics
