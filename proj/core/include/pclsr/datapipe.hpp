#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "pclsr/image.hpp"

namespace pclsr::data {

/// Bicubic resize (Catmull-Rom style kernel with a = -0.5), antialiased when
/// downscaling, separable (height first, then width), border samples
/// replicated. Matches the conventional imresize used by the SR benchmarks.
Image bicubic_resize(const Image& img, int out_h, int out_w);

Image bicubic_upscale(const Image& lr, int scale);

/// quantize8(bicubic_resize(hr, h/scale, w/scale)); hr must be modcropped.
Image synthesize_lr(const Image& hr, int scale);

struct Dataset {
  std::string name;
  int scale = 0;
  std::filesystem::path hr_dir;
  std::filesystem::path lr_dir;  // empty when LR is synthesized on the fly
  std::vector<std::filesystem::path> hr_files;
  std::vector<std::filesystem::path> lr_files;

  std::size_t size() const { return hr_files.size(); }
};

/// Resolve a benchmark by name under `data_root` (expected layout
/// <root>/<name>/HR/*.png with optional <root>/<name>/LR_bicubic/X<scale>/)
/// or treat `name_or_dir` as a directory of HR PNGs. Known benchmark names
/// carry pinned image counts; a mismatch raises IntegrityError.
Dataset open_dataset(const std::string& name_or_dir,
                     const std::filesystem::path& data_root, int scale);

/// Load (lr, hr) for one entry. The HR image is modcropped to the scale;
/// LR is read from disk when the dataset has one, otherwise synthesized.
std::pair<Image, Image> load_pair(const Dataset& ds, std::size_t i);

/// Cut an aligned patch pair. When `lr` is present both images are cropped
/// ((top, left) in LR coordinates); otherwise the LR patch is synthesized
/// from the cropped HR patch.
std::pair<Image, Image> extract_patch_pair(const Image& hr, const Image* lr, int scale,
                                           int lr_patch, int top, int left);

}  // namespace pclsr::data
