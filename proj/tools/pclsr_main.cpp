#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <CLI11.hpp>
#include <json.hpp>

#include "pclsr/checkpoint.hpp"
#include "pclsr/datapipe.hpp"
#include "pclsr/errors.hpp"
#include "pclsr/image.hpp"
#include "pclsr/metrics.hpp"
#include "pclsr/rng.hpp"
#include "pclsr/sampling.hpp"
#include "pclsr/spectral.hpp"
#include "pclsr/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace pclsr;

namespace {

fs::path resolve_data_root(const std::string& flag, const std::string& config_value = "") {
  if (!flag.empty()) return flag;
  if (!config_value.empty()) return config_value;
  if (const char* env = std::getenv("PCLSR_DATA_ROOT")) return env;
  return {};
}

void guard_overwrite(const fs::path& p, bool force) {
  if (!force && fs::exists(p))
    throw ConfigError(p.string() + " already exists (use --force to overwrite)");
}

void print_summary(const metrics::EvalReport& r) {
  std::printf("PSNR=%.4f SSIM=%.4f\n", r.mean_psnr, r.mean_ssim);
}

// --- train -----------------------------------------------------------------

struct TrainArgs {
  std::string config, out, resume, data_root;
  std::vector<std::string> overrides;
  std::uint64_t seed = 0;
  int workers = 0;
  bool seed_set = false, workers_set = false, force = false;
};

int cmd_train(const TrainArgs& a) {
  train::TrainConfig cfg;
  if (!a.resume.empty()) {
    const ckpt::Checkpoint head = ckpt::load_checkpoint(a.resume);
    cfg = train::config_from_json_string(head.config_json);
  } else {
    cfg = train::config_from_json_file(a.config);
  }
  for (const std::string& ov : a.overrides) train::apply_override(cfg, ov);
  if (a.seed_set) cfg.seed = a.seed;
  if (a.workers_set) cfg.workers = a.workers;
  cfg.data_root = resolve_data_root(a.data_root, cfg.data_root).string();
  train::validate(cfg);

  const std::int64_t total = cfg.steps;
  auto progress = [total](const train::StepRecord& r) {
    if (r.step % 100 == 0 || r.step == total)
      std::fprintf(stderr, "step %lld/%lld  l1=%.5f  lcl=%.5f  lcld=%.5f  (%.0f ms)\n",
                   static_cast<long long>(r.step), static_cast<long long>(total), r.l1,
                   r.lcl, r.lcld, r.ms);
  };
  const train::TrainResult res =
      train::run_training(cfg, a.out, a.force, progress, a.resume);
  std::printf("trained %lld steps, final l1=%.6f lcl=%.6f\ncheckpoint: %s\n",
              static_cast<long long>(res.steps), res.final_l1, res.final_lcl,
              res.final_checkpoint.string().c_str());
  return 0;
}

// --- eval / baseline ---------------------------------------------------------

int cmd_eval(const std::string& ckpt_path, const std::string& dataset,
             const std::string& data_root, int scale, const std::string& out, int workers,
             bool force) {
  const ckpt::Checkpoint c = ckpt::load_checkpoint(ckpt_path);
  const train::TrainConfig cfg = train::config_from_json_string(c.config_json);
  if (scale != 0 && scale != cfg.scale)
    throw ConfigError("--scale " + std::to_string(scale) + " contradicts the checkpoint (scale " +
                      std::to_string(cfg.scale) + ")");
  const data::Dataset ds =
      data::open_dataset(dataset, resolve_data_root(data_root), cfg.scale);
  guard_overwrite(out, force);
  metrics::EvalReport r = train::evaluate_checkpoint(c, ds, workers);
  metrics::write_report_csv(out, r);
  print_summary(r);
  return 0;
}

int cmd_baseline(const std::string& dataset, const std::string& data_root, int scale,
                 const std::string& out, bool force) {
  const data::Dataset ds = data::open_dataset(dataset, resolve_data_root(data_root), scale);
  guard_overwrite(out, force);
  metrics::EvalReport r = metrics::evaluate_bicubic(ds, scale);
  metrics::write_report_csv(out, r);
  print_summary(r);
  return 0;
}

// --- degrade -----------------------------------------------------------------

int cmd_degrade(const std::string& dataset, const std::string& data_root, int scale,
                bool force) {
  const data::Dataset ds = data::open_dataset(dataset, resolve_data_root(data_root), scale);
  const fs::path base = ds.hr_dir.filename() == "HR" ? ds.hr_dir.parent_path() : ds.hr_dir;
  const fs::path out_dir = base / ("LR_x" + std::to_string(scale));
  guard_overwrite(out_dir, force);
  fs::create_directories(out_dir);
  for (const fs::path& f : ds.hr_files) {
    const Image hr = modcrop(read_png(f), scale);
    write_png(out_dir / f.filename(), data::synthesize_lr(hr, scale));
  }
  std::printf("wrote %zu LR images to %s\n", ds.hr_files.size(), out_dir.string().c_str());
  return 0;
}

// --- augment-preview -----------------------------------------------------------

json spec_to_json(const sampling::KernelSpec& s) {
  json j;
  j["kind"] = s.kind == sampling::KernelKind::unsharp ? "unsharp" : "gaussian_blur";
  j["size"] = s.size;
  j["sigma"] = s.sigma;
  if (s.kind == sampling::KernelKind::unsharp) j["strength"] = s.strength;
  return j;
}

int cmd_augment_preview(const std::string& in, const std::string& out, int k_pos, int k_neg,
                        std::uint64_t seed, bool force) {
  const Image hr = read_png(in);
  fs::create_directories(out);
  const fs::path manifest_path = fs::path(out) / "preview.json";
  guard_overwrite(manifest_path, force);

  RandomSource rng(seed);
  std::vector<sampling::KernelSpec> negspecs, posspecs;
  const std::vector<Image> negs = sampling::make_negatives(hr, k_neg, rng, &negspecs);
  const std::vector<Image> poss = sampling::make_positives(hr, k_pos, rng, &posspecs);

  for (std::size_t i = 0; i < negs.size(); ++i)
    write_png(fs::path(out) / ("negatives_" + std::to_string(i) + ".png"), negs[i]);
  for (std::size_t j = 0; j < poss.size(); ++j)
    write_png(fs::path(out) / ("positives_" + std::to_string(j) + ".png"), poss[j]);

  json manifest;
  manifest["input"] = in;
  manifest["seed"] = seed;
  manifest["negatives"] = json::array();
  for (const auto& s : negspecs) manifest["negatives"].push_back(spec_to_json(s));
  manifest["positives"] = json::array();
  manifest["positives"].push_back("ground truth");
  for (const auto& s : posspecs) manifest["positives"].push_back(spec_to_json(s));
  std::ofstream os(manifest_path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + manifest_path.string());
  os << manifest.dump(2) << "\n";
  std::printf("wrote %zu positives and %zu negatives to %s\n", poss.size(), negs.size(),
              out.c_str());
  return 0;
}

// --- wavelet --------------------------------------------------------------------

// Affine [min,max] -> [0,1] for visualization; the mapping is recorded in the
// sidecar so values can be recovered.
std::pair<Image, json> rescale_band(const Tensor<double>& t) {
  double lo = t.data()[0], hi = t.data()[0];
  for (std::size_t i = 0; i < t.size(); ++i) {
    lo = std::min(lo, t.data()[i]);
    hi = std::max(hi, t.data()[i]);
  }
  Image img = to_image(t, 0);
  const double span = hi - lo;
  for (double& v : img.data) v = span > 0 ? (v - lo) / span : 0.0;
  json meta;
  meta["min"] = lo;
  meta["max"] = hi;
  return {std::move(img), std::move(meta)};
}

int cmd_wavelet(const std::string& in, const std::string& out, bool with_fft, bool force) {
  Image img = read_png(in);
  img = modcrop(img, 2);
  fs::create_directories(out);
  const fs::path meta_path = fs::path(out) / "wavelet.json";
  guard_overwrite(meta_path, force);

  const Tensor<double> x = to_tensor<double>(std::vector<Image>{img});
  const spectral::SubbandSet<double> s = spectral::haar_forward(x);

  json meta;
  meta["input"] = in;
  meta["height"] = img.h;
  meta["width"] = img.w;
  const std::pair<const char*, const Tensor<double>*> bands[] = {
      {"ll", &s.ll}, {"lh", &s.lh}, {"hl", &s.hl}, {"hh", &s.hh}};
  for (const auto& [name, band] : bands) {
    auto [vis, bmeta] = rescale_band(*band);
    write_png(fs::path(out) / (std::string(name) + ".png"), vis);
    meta[name] = bmeta;
  }
  if (with_fft) {
    const Tensor<double> spec = spectral::fft_highfreq(x, nullptr);
    auto [vis, bmeta] = rescale_band(spec);
    write_png(fs::path(out) / "fft.png", vis);
    meta["fft"] = bmeta;
  }
  std::ofstream os(meta_path, std::ios::trunc);
  if (!os) throw IoError("cannot write " + meta_path.string());
  os << meta.dump(2) << "\n";
  std::printf("wrote subbands to %s\n", out.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
#if defined(__GLIBC__)
  // Training allocates large per-step transient buffers; keeping them off
  // mmap and never returning them to the kernel avoids page-fault churn.
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 0x7fffffff);
#endif

  CLI::App app{"Super-resolution training and evaluation with wavelet-domain contrastive learning"};
  app.set_version_flag("--version", "0.1.0");
  app.require_subcommand(1);
  int rc = 0;

  // train
  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Train a model from a JSON config");
  auto* copt = train_cmd->add_option("--config", ta.config, "JSON config file");
  auto* ropt = train_cmd->add_option("--resume", ta.resume,
                                     "Checkpoint to resume from (config is read from it)");
  copt->excludes(ropt);
  ropt->excludes(copt);
  train_cmd->add_option("--out", ta.out, "Run directory")->required();
  auto* sopt = train_cmd->add_option("--seed", ta.seed, "Override the config seed");
  auto* wopt = train_cmd->add_option("--workers", ta.workers, "Override config worker count");
  train_cmd->add_option("--data-root", ta.data_root, "Dataset root (overrides config/env)");
  train_cmd->add_option("--override", ta.overrides, "key=value config override (repeatable)");
  train_cmd->add_flag("--force", ta.force, "Allow writing into a non-empty run directory");
  train_cmd->callback([&] {
    if (ta.config.empty() && ta.resume.empty())
      throw ConfigError("train needs --config or --resume");
    ta.seed_set = sopt->count() > 0;
    ta.workers_set = wopt->count() > 0;
    rc = cmd_train(ta);
  });

  // eval
  std::string ev_ckpt, ev_dataset, ev_root, ev_out = "report.csv";
  int ev_scale = 0, ev_workers = 1;
  bool ev_force = false;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a benchmark");
  eval_cmd->add_option("--checkpoint", ev_ckpt, "Trained checkpoint")->required();
  eval_cmd->add_option("--dataset", ev_dataset, "Benchmark name or HR directory")->required();
  eval_cmd->add_option("--data-root", ev_root, "Dataset root (or set PCLSR_DATA_ROOT)");
  eval_cmd->add_option("--scale", ev_scale, "Must match the checkpoint when given");
  eval_cmd->add_option("--out", ev_out, "Report CSV path")->capture_default_str();
  eval_cmd->add_option("--workers", ev_workers, "Threads for the forward pass")
      ->capture_default_str();
  eval_cmd->add_flag("--force", ev_force, "Overwrite an existing report");
  eval_cmd->callback(
      [&] { rc = cmd_eval(ev_ckpt, ev_dataset, ev_root, ev_scale, ev_out, ev_workers, ev_force); });

  // baseline
  std::string bl_dataset, bl_root, bl_out = "baseline.csv";
  int bl_scale = 4;
  bool bl_force = false;
  auto* bl_cmd = app.add_subcommand("baseline", "Bicubic upscaling baseline on a benchmark");
  bl_cmd->add_option("--dataset", bl_dataset, "Benchmark name or HR directory")->required();
  bl_cmd->add_option("--data-root", bl_root, "Dataset root (or set PCLSR_DATA_ROOT)");
  bl_cmd->add_option("--scale", bl_scale, "Upscaling factor")->capture_default_str();
  bl_cmd->add_option("--out", bl_out, "Report CSV path")->capture_default_str();
  bl_cmd->add_flag("--force", bl_force, "Overwrite an existing report");
  bl_cmd->callback([&] { rc = cmd_baseline(bl_dataset, bl_root, bl_scale, bl_out, bl_force); });

  // degrade
  std::string dg_dataset, dg_root;
  int dg_scale = 4;
  bool dg_force = false;
  auto* dg_cmd = app.add_subcommand("degrade", "Materialize the bicubic LR folder of a dataset");
  dg_cmd->add_option("--dataset", dg_dataset, "Benchmark name or HR directory")->required();
  dg_cmd->add_option("--data-root", dg_root, "Dataset root (or set PCLSR_DATA_ROOT)");
  dg_cmd->add_option("--scale", dg_scale, "Downscaling factor")->capture_default_str();
  dg_cmd->add_flag("--force", dg_force, "Overwrite an existing LR folder");
  dg_cmd->callback([&] { rc = cmd_degrade(dg_dataset, dg_root, dg_scale, dg_force); });

  // augment-preview
  std::string ap_in, ap_out;
  int ap_kpos = 4, ap_kneg = 4;
  std::uint64_t ap_seed = 0;
  bool ap_force = false;
  auto* ap_cmd =
      app.add_subcommand("augment-preview", "Sample positive/negative sets for one image");
  ap_cmd->add_option("--in", ap_in, "HR PNG")->required();
  ap_cmd->add_option("--out", ap_out, "Output directory")->required();
  ap_cmd->add_option("--k-pos", ap_kpos, "Sharpened positives")->capture_default_str();
  ap_cmd->add_option("--k-neg", ap_kneg, "Blurred negatives")->capture_default_str();
  ap_cmd->add_option("--seed", ap_seed, "Sampling seed")->capture_default_str();
  ap_cmd->add_flag("--force", ap_force, "Overwrite existing previews");
  ap_cmd->callback(
      [&] { rc = cmd_augment_preview(ap_in, ap_out, ap_kpos, ap_kneg, ap_seed, ap_force); });

  // wavelet
  std::string wv_in, wv_out;
  bool wv_fft = false, wv_force = false;
  auto* wv_cmd = app.add_subcommand("wavelet", "Decompose an image into Haar subbands");
  wv_cmd->add_option("--in", wv_in, "Input PNG")->required();
  wv_cmd->add_option("--out", wv_out, "Output directory")->required();
  wv_cmd->add_flag("--fft", wv_fft, "Also write the log-magnitude spectrum");
  wv_cmd->add_flag("--force", wv_force, "Overwrite existing outputs");
  wv_cmd->callback([&] { rc = cmd_wavelet(wv_in, wv_out, wv_fft, wv_force); });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ParamError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const RangeError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const DimensionError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  } catch (const SchemaError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return rc;
}
