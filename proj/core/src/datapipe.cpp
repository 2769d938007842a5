#include "pclsr/datapipe.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>

namespace pclsr::data {

namespace {

// Catmull-Rom style cubic, a = -0.5.
double cubic(double x) {
  x = std::abs(x);
  if (x <= 1.0) return (1.5 * x - 2.5) * x * x + 1.0;
  if (x < 2.0) return ((-0.5 * x + 2.5) * x - 4.0) * x + 2.0;
  return 0.0;
}

// Resample one axis. `axis` 0 stretches height, 1 width.
Image resize_axis(const Image& in, int out_len, int axis) {
  const int in_len = axis == 0 ? in.h : in.w;
  if (out_len <= 0) throw DimensionError("bicubic_resize: non-positive output size");
  const double scale = static_cast<double>(out_len) / in_len;
  const bool antialias = scale < 1.0;
  const double width = antialias ? 4.0 / scale : 4.0;
  const int taps = static_cast<int>(std::ceil(width)) + 2;

  std::vector<int> idx(static_cast<std::size_t>(out_len) * taps);
  std::vector<double> wgt(static_cast<std::size_t>(out_len) * taps);
  for (int i = 0; i < out_len; ++i) {
    const double u = (i + 0.5) / scale - 0.5;
    const int left = static_cast<int>(std::floor(u - width / 2.0));
    double sum = 0.0;
    for (int j = 0; j < taps; ++j) {
      const int k = left + j;
      const double x = u - k;
      const double w = antialias ? scale * cubic(scale * x) : cubic(x);
      wgt[static_cast<std::size_t>(i) * taps + j] = w;
      sum += w;
    }
    for (int j = 0; j < taps; ++j) {
      wgt[static_cast<std::size_t>(i) * taps + j] /= sum;
      int k = left + j;
      k = k < 0 ? 0 : (k >= in_len ? in_len - 1 : k);  // replicate edges
      idx[static_cast<std::size_t>(i) * taps + j] = k;
    }
  }

  Image out(axis == 0 ? out_len : in.h, axis == 0 ? in.w : out_len, in.c);
  for (int c = 0; c < in.c; ++c) {
    if (axis == 0) {
      for (int y = 0; y < out_len; ++y)
        for (int x = 0; x < in.w; ++x) {
          double acc = 0.0;
          for (int j = 0; j < taps; ++j)
            acc += wgt[static_cast<std::size_t>(y) * taps + j] *
                   in.at(c, idx[static_cast<std::size_t>(y) * taps + j], x);
          out.at(c, y, x) = acc;
        }
    } else {
      for (int y = 0; y < in.h; ++y)
        for (int x = 0; x < out_len; ++x) {
          double acc = 0.0;
          for (int j = 0; j < taps; ++j)
            acc += wgt[static_cast<std::size_t>(x) * taps + j] *
                   in.at(c, y, idx[static_cast<std::size_t>(x) * taps + j]);
          out.at(c, y, x) = acc;
        }
    }
  }
  return out;
}

const std::map<std::string, std::size_t>& known_benchmarks() {
  static const std::map<std::string, std::size_t> k = {
      {"set5", 5}, {"set14", 14}, {"b100", 100}, {"urban100", 100},
      {"manga109", 109}, {"div2k_crops", 0}};  // 0 = any non-empty count
  return k;
}

std::vector<std::filesystem::path> list_pngs(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  if (!std::filesystem::is_directory(dir)) return files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(),
                   [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    if (ext == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end(),
            [](const auto& a, const auto& b) { return a.filename() < b.filename(); });
  return files;
}

}  // namespace

Image bicubic_resize(const Image& img, int out_h, int out_w) {
  if (img.h <= 0 || img.w <= 0) throw DimensionError("bicubic_resize: empty input");
  Image tmp = resize_axis(img, out_h, 0);
  return resize_axis(tmp, out_w, 1);
}

Image bicubic_upscale(const Image& lr, int scale) {
  if (scale < 1) throw ParamError("bicubic_upscale: scale must be >= 1");
  return bicubic_resize(lr, lr.h * scale, lr.w * scale);
}

Image synthesize_lr(const Image& hr, int scale) {
  if (scale < 1) throw ParamError("synthesize_lr: scale must be >= 1");
  if (hr.h % scale || hr.w % scale)
    throw DimensionError("synthesize_lr: HR dims must be multiples of the scale (modcrop first)");
  return quantize8(bicubic_resize(hr, hr.h / scale, hr.w / scale));
}

Dataset open_dataset(const std::string& name_or_dir,
                     const std::filesystem::path& data_root, int scale) {
  if (scale < 1) throw ParamError("open_dataset: scale must be >= 1");
  Dataset ds;
  ds.scale = scale;

  const auto& known = known_benchmarks();
  const auto it = known.find(name_or_dir);
  std::filesystem::path base;
  if (it != known.end()) {
    if (data_root.empty())
      throw ConfigError("open_dataset: data root not set (pass --data-root or set "
                        "PCLSR_DATA_ROOT) for benchmark '" + name_or_dir + "'");
    ds.name = name_or_dir;
    base = data_root / name_or_dir;
    if (!std::filesystem::is_directory(base))
      throw IntegrityError("open_dataset: missing benchmark directory " + base.string());
  } else {
    base = name_or_dir;
    if (!std::filesystem::is_directory(base))
      throw ConfigError("open_dataset: '" + name_or_dir +
                        "' is neither a known benchmark nor a directory");
    ds.name = base.filename().string();
  }

  ds.hr_dir = std::filesystem::is_directory(base / "HR") ? base / "HR" : base;
  ds.hr_files = list_pngs(ds.hr_dir);
  if (ds.hr_files.empty())
    throw IntegrityError("open_dataset: no PNG files in " + ds.hr_dir.string());
  if (it != known.end() && it->second != 0 && ds.hr_files.size() != it->second)
    throw IntegrityError("open_dataset: benchmark '" + name_or_dir + "' expects " +
                         std::to_string(it->second) + " images, found " +
                         std::to_string(ds.hr_files.size()) + " in " + ds.hr_dir.string());

  std::filesystem::path lr_dir = base / ("LR_x" + std::to_string(scale));
  if (!std::filesystem::is_directory(lr_dir))
    lr_dir = base / "LR_bicubic" / ("X" + std::to_string(scale));
  if (std::filesystem::is_directory(lr_dir)) {
    auto lr_files = list_pngs(lr_dir);
    if (lr_files.size() != ds.hr_files.size())
      throw IntegrityError("open_dataset: " + lr_dir.string() + " holds " +
                           std::to_string(lr_files.size()) + " files but HR holds " +
                           std::to_string(ds.hr_files.size()));
    ds.lr_dir = lr_dir;
    ds.lr_files = std::move(lr_files);
  }
  return ds;
}

std::pair<Image, Image> load_pair(const Dataset& ds, std::size_t i) {
  if (i >= ds.size()) throw ParamError("load_pair: index out of range");
  Image hr = modcrop(read_png(ds.hr_files[i]), ds.scale);
  if (!ds.lr_files.empty()) {
    Image lr = read_png(ds.lr_files[i]);
    if (lr.h != hr.h / ds.scale || lr.w != hr.w / ds.scale)
      throw IntegrityError("load_pair: LR/HR dims inconsistent for " +
                           ds.hr_files[i].filename().string());
    return {std::move(lr), std::move(hr)};
  }
  Image lr = synthesize_lr(hr, ds.scale);
  return {std::move(lr), std::move(hr)};
}

std::pair<Image, Image> extract_patch_pair(const Image& hr, const Image* lr, int scale,
                                           int lr_patch, int top, int left) {
  if (scale < 1 || lr_patch < 1) throw ParamError("extract_patch_pair: bad scale or patch size");
  if (hr.h % scale || hr.w % scale)
    throw DimensionError("extract_patch_pair: HR dims must be multiples of the scale");
  const int lh = hr.h / scale, lw = hr.w / scale;
  if (top < 0 || left < 0 || top + lr_patch > lh || left + lr_patch > lw)
    throw DimensionError("extract_patch_pair: patch out of bounds");
  Image hrp = crop(hr, top * scale, left * scale, lr_patch * scale, lr_patch * scale);
  if (lr) {
    if (lr->h != lh || lr->w != lw)
      throw DimensionError("extract_patch_pair: LR dims inconsistent with HR/scale");
    return {crop(*lr, top, left, lr_patch, lr_patch), std::move(hrp)};
  }
  Image lrp = synthesize_lr(hrp, scale);
  return {std::move(lrp), std::move(hrp)};
}

}  // namespace pclsr::data
