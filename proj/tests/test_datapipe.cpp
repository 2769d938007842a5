#include <algorithm>
#include <cmath>
#include <doctest.h>
#include <vector>

#include "oracles.hpp"
#include "pclsr/datapipe.hpp"
#include "pclsr/errors.hpp"
#include "pclsr/image.hpp"

using namespace pclsr;
using oracles::max_abs_diff;
using oracles::random_image;

TEST_SUITE_BEGIN("datapipe");

TEST_CASE("bicubic downscale reproduces the frozen reference") {
  const Image src = oracles::ramp_card(8, 12);
  const Image out = data::bicubic_resize(src, 2, 3);
  REQUIRE(out.h == 2);
  REQUIRE(out.w == 3);
  REQUIRE(out.c == 1);
  const auto& want = oracles::ramp_card_down_2x3();
  CHECK(max_abs_diff(out.data.data(), want.data(), want.size()) <= 1e-12);
}

TEST_CASE("bicubic upscale reproduces the frozen reference row") {
  const Image src = oracles::small_card_2x3();
  const Image out = data::bicubic_resize(src, 8, 12);
  REQUIRE(out.h == 8);
  REQUIRE(out.w == 12);
  const auto& want = oracles::small_card_up_row0();
  CHECK(max_abs_diff(out.data.data(), want.data(), want.size()) <= 1e-12);
}

TEST_CASE("resizing to the same size is the identity") {
  const Image src = random_image(9, 13, 3, 42);
  const Image out = data::bicubic_resize(src, 9, 13);
  REQUIRE(out.same_shape(src));
  CHECK(max_abs_diff(out.data.data(), src.data.data(), src.size()) <= 1e-12);
}

TEST_CASE("constant images stay constant under resize") {
  Image src(10, 14, 3);
  std::fill(src.data.begin(), src.data.end(), 0.37);
  for (auto [h, w] : {std::pair{5, 7}, std::pair{20, 28}, std::pair{3, 30}}) {
    const Image out = data::bicubic_resize(src, h, w);
    double worst = 0.0;
    for (double v : out.data) worst = std::max(worst, std::abs(v - 0.37));
    CHECK(worst <= 1e-12);
  }
}

TEST_CASE("bicubic_upscale is resize by an integer factor") {
  const Image lr = random_image(6, 5, 3, 43);
  for (int s : {2, 3, 4}) {
    const Image a = data::bicubic_upscale(lr, s);
    const Image b = data::bicubic_resize(lr, 6 * s, 5 * s);
    REQUIRE(a.same_shape(b));
    CHECK(max_abs_diff(a.data.data(), b.data.data(), a.size()) == 0.0);
  }
}

TEST_CASE("synthesize_lr is quantized bicubic downscale") {
  Image hr = random_image(24, 16, 3, 44);
  hr = modcrop(hr, 4);
  const Image lr = data::synthesize_lr(hr, 4);
  REQUIRE(lr.h == 6);
  REQUIRE(lr.w == 4);
  const Image want = quantize8(data::bicubic_resize(hr, 6, 4));
  CHECK(max_abs_diff(lr.data.data(), want.data.data(), lr.size()) == 0.0);

  // Every sample sits exactly on the 8-bit grid.
  bool on_grid = true;
  for (double v : lr.data) {
    const double k = v * 255.0;
    on_grid = on_grid && std::abs(k - std::round(k)) <= 1e-9 && v >= 0.0 && v <= 1.0;
  }
  CHECK(on_grid);
}

TEST_CASE("quantize8 rounds half up onto the 8-bit grid") {
  Image img(1, 6, 1);
  img.data = {-0.25, 0.0, 0.5, 1.0, 1.75, 127.4 / 255.0};
  const Image q = quantize8(img);
  CHECK(q.data[0] == 0.0);
  CHECK(q.data[1] == 0.0);
  CHECK(q.data[2] == 128.0 / 255.0);  // 0.5*255 + 0.5 = 128.0
  CHECK(q.data[3] == 1.0);
  CHECK(q.data[4] == 1.0);
  CHECK(q.data[5] == 127.0 / 255.0);

  // Idempotent.
  const Image qq = quantize8(q);
  CHECK(max_abs_diff(q.data.data(), qq.data.data(), q.size()) == 0.0);
}

TEST_CASE("modcrop keeps the top-left corner") {
  const Image src = random_image(9, 7, 3, 45);
  const Image out = modcrop(src, 4);
  REQUIRE(out.h == 8);
  REQUIRE(out.w == 4);
  double worst = 0.0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 4; ++x)
        worst = std::max(worst, std::abs(out.at(c, y, x) - src.at(c, y, x)));
  CHECK(worst == 0.0);

  // Already-aligned images come back unchanged.
  const Image even = modcrop(out, 4);
  CHECK(even.same_shape(out));
}

TEST_CASE("crop maps coordinates with the given offset") {
  const Image src = random_image(10, 11, 2, 46);
  const Image out = crop(src, 3, 4, 5, 6);
  REQUIRE(out.h == 5);
  REQUIRE(out.w == 6);
  double worst = 0.0;
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 6; ++x)
        worst = std::max(worst, std::abs(out.at(c, y, x) - src.at(c, y + 3, x + 4)));
  CHECK(worst == 0.0);
}

TEST_CASE("flip and quarter turns move pixels as documented") {
  const Image src = random_image(4, 5, 2, 47);

  const Image f = flip_horizontal(src);
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 5; ++x)
        CHECK(f.at(c, y, x) == src.at(c, y, 4 - x));

  // One counter-clockwise turn: the top-right corner becomes top-left.
  const Image r1 = rotate90(src, 1);
  REQUIRE(r1.h == 5);
  REQUIRE(r1.w == 4);
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 4; ++y)
      for (int x = 0; x < 5; ++x)
        CHECK(r1.at(c, 4 - x, y) == src.at(c, y, x));

  // r=0 is the identity; four turns come back; r2 == r1 twice.
  const Image r0 = rotate90(src, 0);
  CHECK(max_abs_diff(r0.data.data(), src.data.data(), src.size()) == 0.0);
  const Image r4 = rotate90(rotate90(src, 2), 2);
  CHECK(max_abs_diff(r4.data.data(), src.data.data(), src.size()) == 0.0);
  const Image r2a = rotate90(src, 2);
  const Image r2b = rotate90(rotate90(src, 1), 1);
  CHECK(max_abs_diff(r2a.data.data(), r2b.data.data(), r2a.size()) == 0.0);
}

TEST_CASE("open_dataset resolves a plain directory of HR images") {
  const auto ds = data::open_dataset(oracles::toycrops().string(), "", 4);
  CHECK(ds.scale == 4);
  CHECK(ds.size() == 8);
  CHECK(ds.lr_dir.empty());
  // Sorted order, so pairs are stable across runs.
  for (std::size_t i = 1; i < ds.hr_files.size(); ++i)
    CHECK(ds.hr_files[i - 1].filename().string() < ds.hr_files[i].filename().string());
}

TEST_CASE("load_pair synthesizes LR consistently with the pinned pipeline") {
  const auto ds = data::open_dataset(oracles::toycrops().string(), "", 4);
  auto [lr, hr] = data::load_pair(ds, 2);
  CHECK(hr.h % 4 == 0);
  CHECK(hr.w % 4 == 0);
  CHECK(lr.h == hr.h / 4);
  CHECK(lr.w == hr.w / 4);
  const Image want = data::synthesize_lr(hr, 4);
  CHECK(max_abs_diff(lr.data.data(), want.data.data(), lr.size()) == 0.0);

  const Image direct = modcrop(read_png(ds.hr_files[2]), 4);
  CHECK(max_abs_diff(hr.data.data(), direct.data.data(), hr.size()) == 0.0);
}

TEST_CASE("extract_patch_pair cuts aligned windows") {
  Image hr = random_image(32, 40, 3, 48);
  hr = modcrop(hr, 4);

  SUBCASE("with an existing LR image both sides crop") {
    const Image lr = data::synthesize_lr(hr, 4);
    auto [lrp, hrp] = data::extract_patch_pair(hr, &lr, 4, 5, 2, 3);
    REQUIRE(lrp.h == 5);
    REQUIRE(lrp.w == 5);
    REQUIRE(hrp.h == 20);
    REQUIRE(hrp.w == 20);
    const Image lr_want = crop(lr, 2, 3, 5, 5);
    const Image hr_want = crop(hr, 8, 12, 20, 20);
    CHECK(max_abs_diff(lrp.data.data(), lr_want.data.data(), lrp.size()) == 0.0);
    CHECK(max_abs_diff(hrp.data.data(), hr_want.data.data(), hrp.size()) == 0.0);
  }

  SUBCASE("without an LR image the patch is synthesized from the HR crop") {
    auto [lrp, hrp] = data::extract_patch_pair(hr, nullptr, 4, 5, 2, 3);
    const Image hr_want = crop(hr, 8, 12, 20, 20);
    CHECK(max_abs_diff(hrp.data.data(), hr_want.data.data(), hrp.size()) == 0.0);
    const Image lr_want = data::synthesize_lr(hr_want, 4);
    CHECK(max_abs_diff(lrp.data.data(), lr_want.data.data(), lrp.size()) == 0.0);
  }

  SUBCASE("out-of-bounds patches are rejected") {
    const Image lr = data::synthesize_lr(hr, 4);
    CHECK_THROWS_AS(data::extract_patch_pair(hr, &lr, 4, 5, 4, 6), DimensionError);
    CHECK_THROWS_AS(data::extract_patch_pair(hr, &lr, 4, 9, 0, 0), DimensionError);
  }
}

TEST_CASE("unknown benchmark names are rejected") {
  CHECK_THROWS(data::open_dataset("/nonexistent/dir/hopefully", "", 4));
}

TEST_SUITE_END();
