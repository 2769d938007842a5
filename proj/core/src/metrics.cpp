#include "pclsr/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "pclsr/sampling.hpp"

namespace pclsr::metrics {

namespace {

void check_comparable(const Image& sr, const Image& hr, int shave, const char* op) {
  if (!sr.same_shape(hr))
    throw DimensionError(std::string(op) + ": image shape mismatch");
  if (sr.c != 3) throw DimensionError(std::string(op) + ": expected 3-channel images");
  if (shave < 0) throw ParamError(std::string(op) + ": negative shave");
  if (sr.h <= 2 * shave || sr.w <= 2 * shave)
    throw DimensionError(std::string(op) + ": nothing left after shaving");
}

Image shave_border(const Image& img, int shave) {
  if (shave == 0) return img;
  return crop(img, shave, shave, img.h - 2 * shave, img.w - 2 * shave);
}

double clamp_cap(double psnr) { return psnr > kPsnrCap ? kPsnrCap : psnr; }

}  // namespace

Image rgb_to_y(const Image& rgb) {
  if (rgb.c != 3) throw DimensionError("rgb_to_y: expected 3 channels");
  constexpr double slack = 1e-6;
  Image y(rgb.h, rgb.w, 1);
  for (int iy = 0; iy < rgb.h; ++iy)
    for (int ix = 0; ix < rgb.w; ++ix) {
      const double r = rgb.at(0, iy, ix), g = rgb.at(1, iy, ix), b = rgb.at(2, iy, ix);
      for (double v : {r, g, b})
        if (v < -slack || v > 1.0 + slack)
          throw RangeError("rgb_to_y: value " + std::to_string(v) + " outside [0,1]");
      y.at(0, iy, ix) = 16.0 + 65.481 * r + 128.553 * g + 24.966 * b;
    }
  return y;
}

double psnr_y(const Image& sr, const Image& hr, int shave) {
  check_comparable(sr, hr, shave, "psnr_y");
  const Image a = rgb_to_y(shave_border(sr, shave));
  const Image b = rgb_to_y(shave_border(hr, shave));
  double mse = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.data.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

double ssim_y(const Image& sr, const Image& hr, int shave) {
  check_comparable(sr, hr, shave, "ssim_y");
  const Image a = rgb_to_y(shave_border(sr, shave));
  const Image b = rgb_to_y(shave_border(hr, shave));
  constexpr int win = 11;
  constexpr double sigma = 1.5;
  constexpr double c1 = (0.01 * 255.0) * (0.01 * 255.0);
  constexpr double c2 = (0.03 * 255.0) * (0.03 * 255.0);
  if (a.h < win || a.w < win)
    throw DimensionError("ssim_y: image smaller than the 11x11 window");

  const std::vector<double> g = sampling::gaussian_taps(win, sigma);
  const int oh = a.h - win + 1, ow = a.w - win + 1;
  double total = 0.0;
  for (int y = 0; y < oh; ++y)
    for (int x = 0; x < ow; ++x) {
      double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
      for (int wy = 0; wy < win; ++wy)
        for (int wx = 0; wx < win; ++wx) {
          const double w = g[wy] * g[wx];
          const double va = a.at(0, y + wy, x + wx);
          const double vb = b.at(0, y + wy, x + wx);
          mx += w * va;
          my += w * vb;
          xx += w * va * va;
          yy += w * vb * vb;
          xy += w * va * vb;
        }
      const double sx = xx - mx * mx;
      const double sy = yy - my * my;
      const double sxy = xy - mx * my;
      total += ((2 * mx * my + c1) * (2 * sxy + c2)) /
               ((mx * mx + my * my + c1) * (sx + sy + c2));
    }
  return total / (static_cast<double>(oh) * ow);
}

EvalReport evaluate_dataset(const data::Dataset& ds, const Upscaler& up, int shave) {
  EvalReport r;
  r.dataset = ds.name;
  r.scale = ds.scale;
  r.shave = shave;
  double sp = 0, ss = 0;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto [lr, hr] = data::load_pair(ds, i);
    Image sr = up(lr);
    ImageScore score;
    score.name = ds.hr_files[i].filename().string();
    score.psnr = clamp_cap(psnr_y(sr, hr, shave));
    score.ssim = ssim_y(sr, hr, shave);
    sp += score.psnr;
    ss += score.ssim;
    r.images.push_back(std::move(score));
  }
  r.mean_psnr = sp / static_cast<double>(r.images.size());
  r.mean_ssim = ss / static_cast<double>(r.images.size());
  return r;
}

EvalReport evaluate_bicubic(const data::Dataset& ds, int shave) {
  return evaluate_dataset(
      ds,
      [&](const Image& lr) {
        Image sr = data::bicubic_upscale(lr, ds.scale);
        for (double& v : sr.data) v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
        return sr;
      },
      shave);
}

void write_report_csv(const std::filesystem::path& path, const EvalReport& r) {
  std::ofstream os(path);
  if (!os) throw IoError("write_report_csv: cannot write " + path.string());
  os << "name,psnr,ssim\n";
  char buf[160];
  for (const auto& s : r.images) {
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f\n", s.name.c_str(), s.psnr, s.ssim);
    os << buf;
  }
  std::snprintf(buf, sizeof(buf), "mean,%.6f,%.6f\n", r.mean_psnr, r.mean_ssim);
  os << buf;
}

}  // namespace pclsr::metrics
