#include <cmath>
#include <cstdint>
#include <doctest.h>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "oracles.hpp"
#include "pclsr/checkpoint.hpp"
#include "pclsr/errors.hpp"
#include "pclsr/trainer.hpp"

using namespace pclsr;
namespace fs = std::filesystem;
using nlohmann::json;

TEST_SUITE_BEGIN("trainer");

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("pclsr_train_test_" + std::to_string(::getpid()) + "_" +
            std::to_string(reinterpret_cast<std::uintptr_t>(this)));
    fs::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
};

// Smallest configuration validate() accepts; fast enough to run many times.
train::TrainConfig tiny_config() {
  train::TrainConfig cfg;
  cfg.dataset = oracles::toycrops().string();
  cfg.scale = 4;
  cfg.lr_patch = 16;
  cfg.batch_size = 2;
  cfg.sr_channels = 8;
  cfg.sr_resblocks = 1;
  cfg.embed_base = 4;
  cfg.embed_layers = 3;
  cfg.loss_layers = 2;
  cfg.k_pos = 1;
  cfg.k_neg = 1;
  cfg.steps = 6;
  cfg.checkpoint_every = 2;
  cfg.seed = 11;
  return cfg;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  REQUIRE(bool(is));
  std::ostringstream os;
  os << is.rdbuf();
  return os.str();
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) out.push_back(line);
  return out;
}

bool arrays_equal(const ckpt::Checkpoint& a, const ckpt::Checkpoint& b,
                  const std::string& prefix = "") {
  std::size_t matched = 0;
  for (const auto& [name, blob] : a.arrays) {
    if (name.rfind(prefix, 0) != 0) continue;
    const auto* other = b.find(name);
    if (!other) return false;
    if (other->bytes != blob.bytes) return false;
    ++matched;
  }
  return matched > 0;
}

}  // namespace

TEST_CASE("a run writes the documented artifact set") {
  TempDir tmp;
  const auto cfg = tiny_config();
  const auto res = train::run_training(cfg, tmp.path);
  CHECK(res.steps == 6);
  CHECK(res.run_dir == tmp.path);
  CHECK(res.final_checkpoint == tmp.path / "final.bin");
  CHECK(std::isfinite(res.final_l1));

  for (const char* f : {"config.snapshot.json", "manifest.json", "init.bin", "log.csv",
                        "ckpt_2.bin", "ckpt_4.bin", "final.bin", "summary.json"})
    CHECK(fs::exists(tmp.path / f));
  // The final step's periodic checkpoint is subsumed by final.bin.
  CHECK_FALSE(fs::exists(tmp.path / "ckpt_6.bin"));

  const auto log = lines_of(slurp(tmp.path / "log.csv"));
  REQUIRE(log.size() == 7);
  CHECK(log[0] == "step,l1,lcl,lcld,total");
  for (int i = 1; i <= 6; ++i) {
    std::istringstream row(log[std::size_t(i)]);
    std::string cell;
    std::getline(row, cell, ',');
    CHECK(cell == std::to_string(i));
    int ncols = 1;
    while (std::getline(row, cell, ',')) {
      CHECK(std::isfinite(std::stod(cell)));
      ++ncols;
    }
    CHECK(ncols == 5);
  }

  const json snap = json::parse(slurp(tmp.path / "config.snapshot.json"));
  CHECK(snap == json::parse(train::config_to_json(cfg)));

  const json man = json::parse(slurp(tmp.path / "manifest.json"));
  CHECK(man.at("tool_version") == "0.1.0");
  CHECK(man.at("seed") == 11);
  CHECK(man.at("dataset").at("scale") == 4);
  CHECK(man.at("dataset").at("images") == 8);
  REQUIRE(man.at("dataset").at("files").size() == 8);
  for (const auto& f : man.at("dataset").at("files")) {
    CHECK(f.contains("name"));
    CHECK(f.at("bytes").get<std::int64_t>() > 0);
    CHECK(f.at("fnv1a64").get<std::string>().size() == 16);
  }

  const json summary = json::parse(slurp(tmp.path / "summary.json"));
  CHECK(summary.at("steps") == 6);
  CHECK(summary.at("wall_seconds").get<double>() >= 0.0);
  CHECK(summary.at("final").at("l1").get<double>() == doctest::Approx(res.final_l1));

  const auto final = ckpt::load_checkpoint(tmp.path / "final.bin");
  CHECK(final.step == 6);
  CHECK(final.find("sr.head.w") != nullptr);
  CHECK(final.find("ed.stage.0.w") != nullptr);
  CHECK(final.find("adam_sr.m.0") != nullptr);
  CHECK(final.find_rng("patch_g") != nullptr);
  CHECK(json::parse(final.config_json) == json::parse(train::config_to_json(cfg)));

  // Mid-run checkpoints carry their step.
  CHECK(ckpt::load_checkpoint(tmp.path / "ckpt_4.bin").step == 4);

  // Refusing to clobber an existing run unless forced.
  CHECK_THROWS_AS(train::run_training(cfg, tmp.path), ConfigError);
  CHECK_NOTHROW(train::run_training(cfg, tmp.path, /*force=*/true));
}

TEST_CASE("reruns with the same seed are bitwise identical") {
  TempDir a, b;
  const auto cfg = tiny_config();
  train::run_training(cfg, a.path);
  train::run_training(cfg, b.path);
  CHECK(slurp(a.path / "log.csv") == slurp(b.path / "log.csv"));
  const auto ca = ckpt::load_checkpoint(a.path / "final.bin");
  const auto cb = ckpt::load_checkpoint(b.path / "final.bin");
  REQUIRE(ca.arrays.size() == cb.arrays.size());
  CHECK(arrays_equal(ca, cb));
  CHECK(arrays_equal(cb, ca));

  // A different seed diverges.
  TempDir c;
  auto cfg2 = cfg;
  cfg2.seed = 12;
  train::run_training(cfg2, c.path);
  CHECK(slurp(a.path / "log.csv") != slurp(c.path / "log.csv"));
}

TEST_CASE("the worker count does not change the numbers") {
  TempDir a, b;
  auto cfg = tiny_config();
  cfg.steps = 4;
  train::run_training(cfg, a.path);
  auto cfg2 = cfg;
  cfg2.workers = 2;
  train::run_training(cfg2, b.path);
  CHECK(slurp(a.path / "log.csv") == slurp(b.path / "log.csv"));
  const auto ca = ckpt::load_checkpoint(a.path / "final.bin");
  const auto cb = ckpt::load_checkpoint(b.path / "final.bin");
  CHECK(arrays_equal(ca, cb, "sr."));
  CHECK(arrays_equal(ca, cb, "ed."));
}

TEST_CASE("alpha zero with a learned embedding trains the generator like mode off") {
  TempDir a, b;
  auto cfg = tiny_config();
  cfg.steps = 4;
  cfg.alpha = 0.0;
  train::run_training(cfg, a.path);
  auto cfg2 = cfg;
  cfg2.embedding_mode = train::EmbeddingMode::off;
  train::run_training(cfg2, b.path);

  const auto ca = ckpt::load_checkpoint(a.path / "final.bin");
  const auto cb = ckpt::load_checkpoint(b.path / "final.bin");
  CHECK(arrays_equal(ca, cb, "sr."));
  CHECK(arrays_equal(ca, cb, "adam_sr"));
  // Mode off carries no embedding arrays at all.
  CHECK(cb.find("ed.stage.0.w") == nullptr);

  // The l1 columns agree line by line; lcl is zero in mode off.
  const auto la = lines_of(slurp(a.path / "log.csv"));
  const auto lb = lines_of(slurp(b.path / "log.csv"));
  REQUIRE(la.size() == lb.size());
  for (std::size_t i = 1; i < la.size(); ++i) {
    std::istringstream ra(la[i]), rb(lb[i]);
    std::string sa, sb;
    std::getline(ra, sa, ',');
    std::getline(rb, sb, ',');
    std::getline(ra, sa, ',');
    std::getline(rb, sb, ',');
    CHECK(sa == sb);  // l1
    std::getline(rb, sb, ',');
    CHECK(std::stod(sb) == 0.0);  // lcl
  }
}

TEST_CASE("a frozen embedding stays bitwise fixed and skips the adversary") {
  TempDir a, b;
  auto cfg = tiny_config();
  cfg.steps = 4;
  train::run_training(cfg, a.path);

  auto cfg2 = cfg;
  cfg2.embedding_mode = train::EmbeddingMode::frozen;
  cfg2.frozen_path = (a.path / "final.bin").string();
  train::run_training(cfg2, b.path);

  const auto src = ckpt::load_checkpoint(a.path / "final.bin");
  const auto out = ckpt::load_checkpoint(b.path / "final.bin");
  CHECK(arrays_equal(out, src, "ed."));
  CHECK(out.find("adam_ed.m.0") == nullptr);

  // No discriminator updates: the lcld column stays zero.
  const auto log = lines_of(slurp(b.path / "log.csv"));
  for (std::size_t i = 1; i < log.size(); ++i) {
    std::istringstream row(log[i]);
    std::string cell;
    for (int k = 0; k < 4; ++k) std::getline(row, cell, ',');
    CHECK(std::stod(cell) == 0.0);
  }
}

TEST_CASE("non-finite losses abort with diagnostics") {
  TempDir tmp;
  auto cfg = tiny_config();
  cfg.steps = 50;
  cfg.learning_rate = 1e150;
  CHECK_THROWS_AS(train::run_training(cfg, tmp.path), NumericError);
  CHECK(fs::exists(tmp.path / "abort_dump.json"));
  const json dump = json::parse(slurp(tmp.path / "abort_dump.json"));
  CHECK(dump.contains("step"));
}

TEST_CASE("resuming reproduces an uninterrupted run exactly") {
  TempDir straight, split;
  auto cfg6 = tiny_config();
  cfg6.checkpoint_every = 100;  // no mid-run checkpoints
  train::run_training(cfg6, straight.path);

  auto cfg3 = cfg6;
  cfg3.steps = 3;
  train::run_training(cfg3, split.path);
  const auto r = train::run_training(cfg6, split.path, /*force=*/false, nullptr,
                                     split.path / "final.bin");
  CHECK(r.steps == 6);

  CHECK(slurp(straight.path / "log.csv") == slurp(split.path / "log.csv"));
  const auto cs = ckpt::load_checkpoint(straight.path / "final.bin");
  const auto cp = ckpt::load_checkpoint(split.path / "final.bin");
  CHECK(cp.step == 6);
  REQUIRE(cs.arrays.size() == cp.arrays.size());
  CHECK(arrays_equal(cs, cp));

  // The initial snapshot is not rewritten on resume.
  CHECK(fs::exists(split.path / "init.bin"));
  CHECK(ckpt::load_checkpoint(split.path / "init.bin").step == 0);
}

TEST_CASE("checkpoints evaluate and upscale") {
  TempDir tmp;
  auto cfg = tiny_config();
  cfg.steps = 2;
  cfg.checkpoint_every = 100;
  train::run_training(cfg, tmp.path);
  const auto model = ckpt::load_checkpoint(tmp.path / "final.bin");
  const auto init = ckpt::load_checkpoint(tmp.path / "init.bin");

  const auto ds = data::open_dataset(oracles::toycrops().string(), "", 4);
  const auto report = train::evaluate_checkpoint(model, ds);
  REQUIRE(report.images.size() == 8);
  CHECK(report.scale == 4);
  CHECK(std::isfinite(report.mean_psnr));
  CHECK(report.mean_psnr > 0.0);
  CHECK(report.mean_ssim > -1.0);
  CHECK(report.mean_ssim <= 1.0);

  auto [lr, hr] = data::load_pair(ds, 0);
  const Image sr = train::upscale_image(model, lr);
  CHECK(sr.h == hr.h);
  CHECK(sr.w == hr.w);
  CHECK(sr.c == 3);
  double lo = 1e9, hi = -1e9;
  for (double v : sr.data) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  CHECK(lo >= 0.0);
  CHECK(hi <= 1.0);

  // Contrastive probe: deterministic, and finite for both endpoints.
  const double c_init = train::contrastive_eval(init, model, ds, 4, 5);
  const double c_final = train::contrastive_eval(model, model, ds, 4, 5);
  CHECK(std::isfinite(c_init));
  CHECK(std::isfinite(c_final));
  CHECK(train::contrastive_eval(init, model, ds, 4, 5) == c_init);
  CHECK_THROWS_AS(train::contrastive_eval(init, model, ds, 0, 5), ParamError);
}

TEST_CASE("config parsing, overrides and validation") {
  auto cfg = tiny_config();
  const auto text = train::config_to_json(cfg);
  const auto back = train::config_from_json_string(text);
  CHECK(train::config_to_json(back) == text);

  CHECK_THROWS_AS(train::config_from_json_string("{\"alfa\":0.1}"), ConfigError);
  CHECK_THROWS_AS(train::config_from_json_string("not json"), ConfigError);

  train::apply_override(cfg, "alpha=0.25");
  CHECK(cfg.alpha == 0.25);
  train::apply_override(cfg, "transform=fft");
  CHECK(cfg.transform == train::Transform::fft);
  train::apply_override(cfg, "embedding_mode=frozen:/some/where.bin");
  CHECK(cfg.embedding_mode == train::EmbeddingMode::frozen);
  CHECK(cfg.frozen_path == "/some/where.bin");
  CHECK_THROWS_AS(train::apply_override(cfg, "no_such_key=1"), ConfigError);
  CHECK_THROWS_AS(train::apply_override(cfg, "alpha"), ConfigError);
  CHECK_THROWS_AS(train::apply_override(cfg, "alpha=banana"), ConfigError);

  auto bad = tiny_config();
  bad.scale = 5;
  CHECK_THROWS_AS(train::validate(bad), ConfigError);
  bad = tiny_config();
  bad.lr_patch = 4;
  CHECK_THROWS_AS(train::validate(bad), ConfigError);
  bad = tiny_config();
  bad.batch_size = 1;  // learned embedding needs a batch of at least 2
  CHECK_THROWS_AS(train::validate(bad), ConfigError);
  bad = tiny_config();
  bad.alpha = -0.1;
  CHECK_THROWS_AS(train::validate(bad), ConfigError);
  bad = tiny_config();
  bad.embedding_mode = train::EmbeddingMode::frozen;
  bad.frozen_path.clear();
  CHECK_THROWS_AS(train::validate(bad), ConfigError);
  bad = tiny_config();
  bad.scale = 3;
  bad.lr_patch = 15;  // odd SR patch cannot be wavelet-packed
  CHECK_THROWS_AS(train::validate(bad), ConfigError);
  CHECK_NOTHROW(train::validate(tiny_config()));
}

TEST_SUITE_END();
