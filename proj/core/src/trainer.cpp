#include "pclsr/trainer.hpp"

#include <omp.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "pclsr/adam.hpp"
#include "pclsr/losses.hpp"
#include "pclsr/nn.hpp"
#include "pclsr/rng.hpp"
#include "pclsr/sampling.hpp"
#include "pclsr/spectral.hpp"

namespace pclsr::train {

namespace {

using nlohmann::json;

// RNG sub-stream tags. Separate streams keep the generator trajectory
// independent of whether the contrastive branch is enabled.
enum : std::uint64_t {
  kStreamPatchG = 1,
  kStreamPatchD = 2,
  kStreamPosNeg = 3,
  kStreamInitSr = 4,
  kStreamInitEd = 5,
};

std::string transform_name(Transform t) {
  switch (t) {
    case Transform::haar: return "haar";
    case Transform::fft: return "fft";
    default: return "none";
  }
}
Transform transform_from(const std::string& s) {
  if (s == "haar") return Transform::haar;
  if (s == "fft") return Transform::fft;
  if (s == "none") return Transform::none;
  throw ConfigError("config: unknown transform '" + s + "'");
}

std::string mode_name(EmbeddingMode m) {
  switch (m) {
    case EmbeddingMode::learned: return "learned";
    case EmbeddingMode::frozen: return "frozen";
    default: return "off";
  }
}
// Accepts "learned", "off", "frozen" (path given separately via frozen_path)
// or the shorthand "frozen:<path>".
void set_mode(TrainConfig& c, const std::string& s) {
  if (s == "learned") c.embedding_mode = EmbeddingMode::learned;
  else if (s == "off") c.embedding_mode = EmbeddingMode::off;
  else if (s == "frozen") c.embedding_mode = EmbeddingMode::frozen;
  else if (s.rfind("frozen:", 0) == 0) {
    c.embedding_mode = EmbeddingMode::frozen;
    c.frozen_path = s.substr(7);
  } else {
    throw ConfigError("config: unknown embedding_mode '" + s + "'");
  }
}

std::string precision_name(Precision p) {
  return p == Precision::f32 ? "float32" : "float64";
}
Precision precision_from(const std::string& s) {
  if (s == "float32") return Precision::f32;
  if (s == "float64") return Precision::f64;
  throw ConfigError("config: unknown precision '" + s + "'");
}

void set_config_field(TrainConfig& c, const std::string& key, const json& v) {
  try {
    if (key == "dataset") c.dataset = v.get<std::string>();
    else if (key == "data_root") c.data_root = v.get<std::string>();
    else if (key == "scale") c.scale = v.get<int>();
    else if (key == "lr_patch") c.lr_patch = v.get<int>();
    else if (key == "batch_size") c.batch_size = v.get<int>();
    else if (key == "sr_channels") c.sr_channels = v.get<int>();
    else if (key == "sr_resblocks") c.sr_resblocks = v.get<int>();
    else if (key == "embed_base") c.embed_base = v.get<int>();
    else if (key == "embed_layers") c.embed_layers = v.get<int>();
    else if (key == "embed_spectral_norm") c.embed_spectral_norm = v.get<bool>();
    else if (key == "alpha") c.alpha = v.get<double>();
    else if (key == "tau") c.tau = v.get<double>();
    else if (key == "loss_layers") c.loss_layers = v.get<int>();
    else if (key == "k_pos") c.k_pos = v.get<int>();
    else if (key == "k_neg") c.k_neg = v.get<int>();
    else if (key == "use_pos_aug") c.use_pos_aug = v.get<bool>();
    else if (key == "use_neg_aug") c.use_neg_aug = v.get<bool>();
    else if (key == "transform") c.transform = transform_from(v.get<std::string>());
    else if (key == "embedding_mode") set_mode(c, v.get<std::string>());
    else if (key == "frozen_path") c.frozen_path = v.get<std::string>();
    else if (key == "steps") c.steps = v.get<std::int64_t>();
    else if (key == "learning_rate") c.learning_rate = v.get<double>();
    else if (key == "lr_halve_every") c.lr_halve_every = v.get<std::int64_t>();
    else if (key == "adam_beta1") c.adam_beta1 = v.get<double>();
    else if (key == "adam_beta2") c.adam_beta2 = v.get<double>();
    else if (key == "adam_eps") c.adam_eps = v.get<double>();
    else if (key == "d_steps_per_g") c.d_steps_per_g = v.get<int>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "precision") c.precision = precision_from(v.get<std::string>());
    else if (key == "workers") c.workers = v.get<int>();
    else if (key == "checkpoint_every") c.checkpoint_every = v.get<std::int64_t>();
    else throw ConfigError("config: unknown key '" + key + "'");
  } catch (const json::exception& e) {
    throw ConfigError("config: bad value for '" + key + "': " + e.what());
  }
}

}  // namespace

TrainConfig config_from_json_string(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  TrainConfig c;
  for (auto it = j.begin(); it != j.end(); ++it) set_config_field(c, it.key(), it.value());
  return c;
}

TrainConfig config_from_json_file(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("config: cannot open " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return config_from_json_string(ss.str());
}

std::string config_to_json(const TrainConfig& c) {
  json j;
  j["dataset"] = c.dataset;
  j["data_root"] = c.data_root;
  j["scale"] = c.scale;
  j["lr_patch"] = c.lr_patch;
  j["batch_size"] = c.batch_size;
  j["sr_channels"] = c.sr_channels;
  j["sr_resblocks"] = c.sr_resblocks;
  j["embed_base"] = c.embed_base;
  j["embed_layers"] = c.embed_layers;
  j["embed_spectral_norm"] = c.embed_spectral_norm;
  j["alpha"] = c.alpha;
  j["tau"] = c.tau;
  j["loss_layers"] = c.loss_layers;
  j["k_pos"] = c.k_pos;
  j["k_neg"] = c.k_neg;
  j["use_pos_aug"] = c.use_pos_aug;
  j["use_neg_aug"] = c.use_neg_aug;
  j["transform"] = transform_name(c.transform);
  j["embedding_mode"] = mode_name(c.embedding_mode);
  j["frozen_path"] = c.frozen_path;
  j["steps"] = c.steps;
  j["learning_rate"] = c.learning_rate;
  j["lr_halve_every"] = c.lr_halve_every;
  j["adam_beta1"] = c.adam_beta1;
  j["adam_beta2"] = c.adam_beta2;
  j["adam_eps"] = c.adam_eps;
  j["d_steps_per_g"] = c.d_steps_per_g;
  j["seed"] = c.seed;
  j["precision"] = precision_name(c.precision);
  j["workers"] = c.workers;
  j["checkpoint_every"] = c.checkpoint_every;
  return j.dump(2);
}

void apply_override(TrainConfig& cfg, const std::string& assignment) {
  const auto pos = assignment.find('=');
  if (pos == std::string::npos || pos == 0)
    throw ConfigError("override must look like key=value, got '" + assignment + "'");
  const std::string key = assignment.substr(0, pos);
  const std::string raw = assignment.substr(pos + 1);
  json v = json::parse(raw, nullptr, false);
  if (v.is_discarded()) v = raw;  // bare word: treat as string
  set_config_field(cfg, key, v);
}

void validate(const TrainConfig& c) {
  if (c.scale != 2 && c.scale != 3 && c.scale != 4)
    throw ConfigError("config: scale must be 2, 3 or 4");
  if (c.lr_patch < 8) throw ConfigError("config: lr_patch must be at least 8");
  if (c.batch_size < 1) throw ConfigError("config: batch_size must be positive");
  if (c.embedding_mode == EmbeddingMode::learned && c.batch_size < 2)
    throw ConfigError("config: batch_size must be at least 2 with a learned embedding");
  if (c.sr_channels < 8) throw ConfigError("config: sr_channels must be at least 8");
  if (c.sr_resblocks < 1) throw ConfigError("config: sr_resblocks must be at least 1");
  if (!(c.alpha >= 0)) throw ConfigError("config: alpha must be non-negative");
  if (!(c.tau > 0)) throw ConfigError("config: tau must be positive");
  if (c.loss_layers < 1 || c.loss_layers > c.embed_layers)
    throw ConfigError("config: loss_layers must be in [1, embed_layers]");
  if (c.k_pos < 0) throw ConfigError("config: k_pos must be non-negative");
  if (c.embedding_mode != EmbeddingMode::off && c.use_neg_aug && c.k_neg < 1)
    throw ConfigError("config: k_neg must be at least 1 when negatives are enabled");
  if (c.steps < 1) throw ConfigError("config: steps must be positive");
  if (!(c.learning_rate > 0)) throw ConfigError("config: learning_rate must be positive");
  if (c.d_steps_per_g < 1) throw ConfigError("config: d_steps_per_g must be at least 1");
  if (c.workers < 1) throw ConfigError("config: workers must be at least 1");
  if (c.embedding_mode == EmbeddingMode::frozen && c.frozen_path.empty())
    throw ConfigError("config: frozen embedding mode needs frozen_path");
  const int sr_size = c.lr_patch * c.scale;
  if (c.transform == Transform::haar && sr_size % 2)
    throw ConfigError("config: haar transform needs an even SR patch size");
  if (c.embedding_mode != EmbeddingMode::off) {
    int h = c.transform == Transform::haar ? sr_size / 2 : sr_size;
    for (int l = 0; l < c.embed_layers; ++l) {
      h = (h + 2 - 4) / 2 + 1;
      if (h < 1)
        throw ConfigError("config: patch too small for " + std::to_string(c.embed_layers) +
                          " embedding stages");
    }
  }
}

// ===========================================================================

namespace {

template <typename T>
void axpy(Tensor<T>& y, T a, const Tensor<T>& x) {
  check_same_shape(y, x, "axpy");
  T* py = y.data();
  const T* px = x.data();
  for (std::size_t i = 0; i < y.size(); ++i) py[i] += a * px[i];
}

struct Corpus {
  std::vector<Image> hr;  // modcropped
  std::vector<Image> lr;  // parallel to hr when the dataset ships LR files
  bool has_lr = false;
  std::string name;
};

Corpus load_corpus(const data::Dataset& ds, const TrainConfig& cfg) {
  Corpus corpus;
  corpus.name = ds.name;
  corpus.has_lr = !ds.lr_files.empty();
  for (std::size_t i = 0; i < ds.size(); ++i) {
    auto [lr, hr] = data::load_pair(ds, i);
    if (lr.h < cfg.lr_patch || lr.w < cfg.lr_patch) {
      std::fprintf(stderr, "warning: %s is smaller than one LR patch, skipping\n",
                   ds.hr_files[i].filename().string().c_str());
      continue;
    }
    if (corpus.has_lr) corpus.lr.push_back(std::move(lr));
    corpus.hr.push_back(std::move(hr));
  }
  if (corpus.hr.empty())
    throw ConfigError("no training image is large enough for lr_patch=" +
                      std::to_string(cfg.lr_patch));
  return corpus;
}

std::uint64_t fnv1a64_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw IoError("cannot read " + p.string());
  std::uint64_t h = 1469598103934665603ull;
  char buf[1 << 16];
  while (is) {
    is.read(buf, sizeof(buf));
    const std::streamsize n = is.gcount();
    for (std::streamsize i = 0; i < n; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 1099511628211ull;
    }
  }
  return h;
}

struct SlotDraw {
  int index = 0, top = 0, left = 0;
  sampling::AugChoice aug;
};

template <typename T>
class Trainer {
 public:
  Trainer(const TrainConfig& cfg)
      : cfg_(cfg),
        rng_patch_g_(derive_stream(cfg.seed, kStreamPatchG)),
        rng_patch_d_(derive_stream(cfg.seed, kStreamPatchD)),
        rng_posneg_(derive_stream(cfg.seed, kStreamPosNeg)),
        adam_sr_(static_cast<T>(cfg.adam_beta1), static_cast<T>(cfg.adam_beta2),
                 static_cast<T>(cfg.adam_eps)),
        adam_ed_(static_cast<T>(cfg.adam_beta1), static_cast<T>(cfg.adam_beta2),
                 static_cast<T>(cfg.adam_eps)) {}

  TrainResult run(const std::filesystem::path& out_dir, bool force, const StepCallback& cb,
                  const std::filesystem::path& resume);

 private:
  struct Batch {
    Tensor<T> lr_t, hr_t;
    std::vector<Image> hr_imgs;
    std::vector<SlotDraw> draws;
  };

  bool embedding_active() const { return cfg_.embedding_mode != EmbeddingMode::off; }
  bool contrastive_active() const {
    return embedding_active() && cfg_.use_neg_aug && cfg_.k_neg > 0;
  }
  bool learned() const { return cfg_.embedding_mode == EmbeddingMode::learned; }

  double lr_now(std::int64_t step) const {
    if (cfg_.lr_halve_every <= 0) return cfg_.learning_rate;
    const auto halvings = (step - 1) / cfg_.lr_halve_every;
    return cfg_.learning_rate * std::pow(0.5, static_cast<double>(halvings));
  }

  int transform_channels() const { return cfg_.transform == Transform::haar ? 9 : 3; }

  Tensor<T> apply_transform(const Tensor<T>& x, spectral::FftContext* ctx) {
    switch (cfg_.transform) {
      case Transform::haar: return spectral::hw_stack(x);
      case Transform::fft: return spectral::fft_highfreq(x, ctx);
      default: return x;
    }
  }

  Tensor<T> transform_vjp(const Tensor<T>& g, int h, int w, const spectral::FftContext& ctx) {
    switch (cfg_.transform) {
      case Transform::haar: return spectral::hw_stack_vjp(g, h, w);
      case Transform::fft: return spectral::fft_highfreq_vjp(ctx, g);
      default: return g;
    }
  }

  void init_models() {
    nn::SrConfig sc;
    sc.channels = cfg_.sr_channels;
    sc.resblocks = cfg_.sr_resblocks;
    sc.scale = cfg_.scale;
    RandomSource rng_sr = derive_stream(cfg_.seed, kStreamInitSr);
    sr_.init(sc, rng_sr);
    if (embedding_active()) {
      nn::EmbedConfig ec;
      ec.in_ch = transform_channels();
      ec.base = cfg_.embed_base;
      ec.layers = cfg_.embed_layers;
      ec.taps = cfg_.loss_layers;
      ec.spectral_norm = cfg_.embed_spectral_norm;
      RandomSource rng_ed = derive_stream(cfg_.seed, kStreamInitEd);
      ed_.init(ec, rng_ed);
      if (cfg_.embedding_mode == EmbeddingMode::frozen) load_frozen(cfg_.frozen_path);
    }
    sr_params_ = nn::param_sequence(sr_);
    if (embedding_active()) ed_params_ = nn::param_sequence(ed_);
  }

  void load_frozen(const std::filesystem::path& path) {
    const ckpt::Checkpoint c = ckpt::load_checkpoint(path);
    load_embed_params(c);
  }

  Batch make_batch(RandomSource& rng) {
    const int B = cfg_.batch_size;
    Batch b;
    b.draws.resize(B);
    for (int i = 0; i < B; ++i) {
      SlotDraw& d = b.draws[i];
      d.index = static_cast<int>(rng.uniform_int(0, static_cast<std::int64_t>(corpus_.hr.size()) - 1));
      const Image& hr = corpus_.hr[d.index];
      const int lh = hr.h / cfg_.scale, lw = hr.w / cfg_.scale;
      d.top = static_cast<int>(rng.uniform_int(0, lh - cfg_.lr_patch));
      d.left = static_cast<int>(rng.uniform_int(0, lw - cfg_.lr_patch));
      d.aug = sampling::sample_aug(rng);
    }
    last_draws_ = b.draws;
    std::vector<Image> lr_imgs(B);
    b.hr_imgs.resize(B);
#pragma omp parallel for num_threads(cfg_.workers) schedule(static)
    for (int i = 0; i < B; ++i) {
      const SlotDraw& d = b.draws[i];
      const Image* lr = corpus_.has_lr ? &corpus_.lr[d.index] : nullptr;
      auto [lrp, hrp] =
          data::extract_patch_pair(corpus_.hr[d.index], lr, cfg_.scale, cfg_.lr_patch, d.top, d.left);
      lr_imgs[i] = sampling::apply_aug(lrp, d.aug);
      b.hr_imgs[i] = sampling::apply_aug(hrp, d.aug);
    }
    b.lr_t = to_tensor<T>(lr_imgs);
    b.hr_t = to_tensor<T>(b.hr_imgs);
    return b;
  }

  [[noreturn]] void abort_non_finite(const std::filesystem::path& out_dir, double l1,
                                     double lcl, double lcld) {
    json dump;
    dump["step"] = step_;
    dump["l1"] = l1;
    dump["lcl"] = lcl;
    dump["lcld"] = lcld;
    json batch = json::array();
    for (const SlotDraw& d : last_draws_)
      batch.push_back({{"image", d.index}, {"top", d.top}, {"left", d.left}});
    dump["batch"] = batch;
    std::ofstream ds(out_dir / "abort_dump.json");
    ds << dump.dump(2) << "\n";
    throw NumericError("non-finite loss at step " + std::to_string(step_) +
                       " (diagnostics in abort_dump.json)");
  }

  double d_step() {
    Batch b = make_batch(rng_patch_d_);
    Tensor<T> sr = nn::sr_forward(sr_, b.lr_t, static_cast<nn::SrTrace<T>*>(nullptr), cfg_.workers);
    if (cfg_.embed_spectral_norm) ed_.refresh_sn();
    Tensor<T> real_in = apply_transform(b.hr_t, nullptr);
    Tensor<T> fake_in = apply_transform(sr, nullptr);
    nn::EmbedTrace<T> tr_r, tr_f;
    auto out_r = nn::embed_forward(ed_, real_in, true, &tr_r, cfg_.workers);
    auto out_f = nn::embed_forward(ed_, fake_in, true, &tr_f, cfg_.workers);
    std::vector<T> gr, gf;
    const T lcld = loss::contra_d_loss<T>(out_r.scores, out_f.scores, &gr, &gf);
    nn::EmbedGrads<T> grads;
    grads.zero_like(ed_);
    nn::embed_backward_params<T>(ed_, tr_r, gr, grads, cfg_.workers);
    nn::embed_backward_params<T>(ed_, tr_f, gf, grads, cfg_.workers);
    nn::finalize_embed_grads(ed_, grads);
    auto gseq = nn::grad_sequence(grads);
    adam_ed_.step(ed_params_, gseq, static_cast<T>(lr_now(step_)));
    return static_cast<double>(lcld);
  }

  void g_step(double& l1_out, double& lcl_out) {
    Batch b = make_batch(rng_patch_g_);
    const bool active = contrastive_active();
    const int B = cfg_.batch_size;
    const int K = active ? cfg_.k_neg : 0;
    const int P = active ? (cfg_.use_pos_aug ? cfg_.k_pos + 1 : 1) : 0;

    // Draw all degradation specs sequentially, then realize in parallel.
    std::vector<std::vector<sampling::KernelSpec>> negspec(B), posspec(B);
    if (active) {
      for (int i = 0; i < B; ++i) {
        for (int k = 0; k < K; ++k) negspec[i].push_back(sampling::sample_blur_spec(rng_posneg_));
        if (cfg_.use_pos_aug) {
          for (int j = 0; j < cfg_.k_pos; ++j) {
            sampling::KernelSpec s = sampling::sample_blur_spec(rng_posneg_);
            s.kind = sampling::KernelKind::unsharp;
            s.strength = rng_posneg_.uniform(0.2, 1.0);
            posspec[i].push_back(s);
          }
        }
      }
    }

    std::vector<std::vector<Image>> pos(P), neg(K);
    if (active) {
      for (int j = 0; j < P; ++j) pos[j].resize(B);
      for (int k = 0; k < K; ++k) neg[k].resize(B);
#pragma omp parallel for num_threads(cfg_.workers) schedule(static)
      for (int i = 0; i < B; ++i) {
        pos[0][i] = b.hr_imgs[i];
        for (int k = 0; k < K; ++k)
          neg[k][i] = sampling::gaussian_blur(b.hr_imgs[i], negspec[i][k]);
        for (int j = 1; j < P; ++j)
          pos[j][i] = sampling::unsharp(b.hr_imgs[i], posspec[i][j - 1]);
      }
    }

    nn::SrTrace<T> tr;
    Tensor<T> sr = nn::sr_forward(sr_, b.lr_t, &tr, cfg_.workers);
    Tensor<T> g_sr;
    const T l1 = loss::l1_loss(sr, b.hr_t, &g_sr);
    T lcl = T(0);
    if (active) {
      // d_step updated the raw weights after its sigma refresh; renormalize
      // with the current power-iteration vectors before using E_D here.
      if (cfg_.embed_spectral_norm && learned())
        for (auto& st : ed_.stages) st.recompute_sn_fixed_uv();
      spectral::FftContext fctx;
      Tensor<T> anchor_in = apply_transform(sr, &fctx);
      nn::EmbedTrace<T> etr;
      auto aout = nn::embed_forward(ed_, anchor_in, false, &etr, cfg_.workers);
      std::vector<FeaturePyramid<T>> pos_pyr(P), neg_pyr(K);
      for (int j = 0; j < P; ++j)
        pos_pyr[j] =
            nn::embed_forward(ed_, apply_transform(to_tensor<T>(pos[j]), nullptr), false,
                              static_cast<nn::EmbedTrace<T>*>(nullptr), cfg_.workers)
                .pyramid;
      for (int k = 0; k < K; ++k)
        neg_pyr[k] =
            nn::embed_forward(ed_, apply_transform(to_tensor<T>(neg[k]), nullptr), false,
                              static_cast<nn::EmbedTrace<T>*>(nullptr), cfg_.workers)
                .pyramid;
      FeaturePyramid<T> ganchor;
      lcl = loss::pcl_total_loss(aout.pyramid, pos_pyr, neg_pyr, static_cast<T>(cfg_.tau),
                                 cfg_.alpha > 0 ? &ganchor : nullptr);
      if (cfg_.alpha > 0) {
        Tensor<T> g_in = nn::embed_backward_input(ed_, etr, ganchor, cfg_.workers);
        Tensor<T> g_cl = transform_vjp(g_in, sr.h(), sr.w(), fctx);
        axpy(g_sr, static_cast<T>(cfg_.alpha), g_cl);
      }
    }
    nn::SrGrads<T> grads;
    grads.zero_like(sr_);
    nn::sr_backward(sr_, tr, g_sr, grads, cfg_.workers);
    auto gseq = nn::grad_sequence(grads);
    adam_sr_.step(sr_params_, gseq, static_cast<T>(lr_now(step_)));
    l1_out = static_cast<double>(l1);
    lcl_out = static_cast<double>(lcl);
  }

  // --- checkpoint plumbing ---------------------------------------------

  ckpt::Checkpoint snapshot() {
    ckpt::Checkpoint c;
    c.step = static_cast<std::uint64_t>(step_);
    c.config_json = config_to_json(cfg_);
    c.rng_states.emplace_back("patch_g", rng_patch_g_.serialize());
    c.rng_states.emplace_back("patch_d", rng_patch_d_.serialize());
    c.rng_states.emplace_back("posneg", rng_posneg_.serialize());
    nn::for_each_param(sr_, [&](const std::string& name, std::vector<T>& v,
                                const std::vector<std::int64_t>& shape) {
      c.arrays.emplace_back("sr." + name, ckpt::ArrayBlob::from(v, shape));
    });
    if (embedding_active()) {
      nn::for_each_param(ed_, [&](const std::string& name, std::vector<T>& v,
                                  const std::vector<std::int64_t>& shape) {
        c.arrays.emplace_back("ed." + name, ckpt::ArrayBlob::from(v, shape));
      });
      if (cfg_.embed_spectral_norm) {
        for (std::size_t l = 0; l < ed_.stages.size(); ++l) {
          c.arrays.emplace_back("ed_sn.u." + std::to_string(l),
                                ckpt::ArrayBlob::from(ed_.stages[l].sn_u));
          c.arrays.emplace_back("ed_sn.v." + std::to_string(l),
                                ckpt::ArrayBlob::from(ed_.stages[l].sn_v));
        }
      }
    }
    auto dump_adam = [&c](const std::string& prefix, Adam<T>& a) {
      std::vector<double> t = {static_cast<double>(a.t())};
      c.arrays.emplace_back(prefix + ".t", ckpt::ArrayBlob::from(t));
      for (std::size_t i = 0; i < a.m().size(); ++i) {
        c.arrays.emplace_back(prefix + ".m." + std::to_string(i),
                              ckpt::ArrayBlob::from(a.m()[i]));
        c.arrays.emplace_back(prefix + ".v." + std::to_string(i),
                              ckpt::ArrayBlob::from(a.v()[i]));
      }
    };
    dump_adam("adam_sr", adam_sr_);
    if (learned()) dump_adam("adam_ed", adam_ed_);
    return c;
  }

  void load_array_into(const ckpt::Checkpoint& c, const std::string& name,
                       std::vector<T>& dst) {
    const ckpt::ArrayBlob* b = c.find(name);
    if (!b) throw IntegrityError("checkpoint: missing array " + name);
    std::vector<T> v = b->to<T>();
    if (v.size() != dst.size())
      throw IntegrityError("checkpoint: array " + name + " has " + std::to_string(v.size()) +
                           " values, expected " + std::to_string(dst.size()));
    dst = std::move(v);
  }

  void load_embed_params(const ckpt::Checkpoint& c) {
    nn::for_each_param(ed_, [&](const std::string& name, std::vector<T>& v,
                                const std::vector<std::int64_t>&) {
      load_array_into(c, "ed." + name, v);
    });
    if (cfg_.embed_spectral_norm) {
      for (std::size_t l = 0; l < ed_.stages.size(); ++l) {
        load_array_into(c, "ed_sn.u." + std::to_string(l), ed_.stages[l].sn_u);
        load_array_into(c, "ed_sn.v." + std::to_string(l), ed_.stages[l].sn_v);
        ed_.stages[l].recompute_sn_fixed_uv();
      }
    }
  }

  void restore(const ckpt::Checkpoint& c) {
    nn::for_each_param(sr_, [&](const std::string& name, std::vector<T>& v,
                                const std::vector<std::int64_t>&) {
      load_array_into(c, "sr." + name, v);
    });
    if (embedding_active()) load_embed_params(c);
    auto restore_adam = [&](const std::string& prefix, Adam<T>& a,
                            const std::vector<std::vector<T>*>& params) {
      const ckpt::ArrayBlob* tb = c.find(prefix + ".t");
      if (!tb) throw IntegrityError("checkpoint: missing " + prefix + ".t");
      a.set_t(static_cast<std::int64_t>(tb->to<double>()[0]));
      a.m().resize(params.size());
      a.v().resize(params.size());
      for (std::size_t i = 0; i < params.size(); ++i) {
        a.m()[i].assign(params[i]->size(), T(0));
        a.v()[i].assign(params[i]->size(), T(0));
        load_array_into(c, prefix + ".m." + std::to_string(i), a.m()[i]);
        load_array_into(c, prefix + ".v." + std::to_string(i), a.v()[i]);
      }
    };
    restore_adam("adam_sr", adam_sr_, sr_params_);
    if (learned()) restore_adam("adam_ed", adam_ed_, ed_params_);
    auto restore_rng = [&](const char* name, RandomSource& r) {
      const std::string* s = c.find_rng(name);
      if (!s) throw IntegrityError(std::string("checkpoint: missing rng state ") + name);
      r.deserialize(*s);
    };
    restore_rng("patch_g", rng_patch_g_);
    restore_rng("patch_d", rng_patch_d_);
    restore_rng("posneg", rng_posneg_);
    step_ = static_cast<std::int64_t>(c.step);
  }

  // ----------------------------------------------------------------------

  TrainConfig cfg_;
  Corpus corpus_;
  nn::SrNet<T> sr_;
  nn::EmbedNet<T> ed_;
  std::vector<std::vector<T>*> sr_params_, ed_params_;
  RandomSource rng_patch_g_, rng_patch_d_, rng_posneg_;
  Adam<T> adam_sr_, adam_ed_;
  std::int64_t step_ = 0;
  std::vector<SlotDraw> last_draws_;
};

template <typename T>
TrainResult Trainer<T>::run(const std::filesystem::path& out_dir, bool force,
                            const StepCallback& cb, const std::filesystem::path& resume) {
  validate(cfg_);
  const data::Dataset ds = data::open_dataset(cfg_.dataset, cfg_.data_root, cfg_.scale);
  corpus_ = load_corpus(ds, cfg_);
  init_models();

  std::filesystem::create_directories(out_dir);
  const auto snapshot_path = out_dir / "config.snapshot.json";
  const bool resuming = !resume.empty();
  if (std::filesystem::exists(snapshot_path) && !force && !resuming)
    throw ConfigError("run directory " + out_dir.string() +
                      " already holds a run (use --force to overwrite)");
  if (resuming) restore(ckpt::load_checkpoint(resume));
  {
    std::ofstream os(snapshot_path, std::ios::trunc);
    if (!os) throw IoError("cannot write " + snapshot_path.string());
    os << config_to_json(cfg_) << "\n";
  }
  if (!resuming) {
    char hex[32];
    json files = json::array();
    for (const auto& f : ds.hr_files) {
      std::snprintf(hex, sizeof(hex), "%016llx",
                    static_cast<unsigned long long>(fnv1a64_file(f)));
      files.push_back({{"name", f.filename().string()},
                       {"bytes", std::filesystem::file_size(f)},
                       {"fnv1a64", hex}});
    }
    json manifest;
    manifest["tool_version"] = "0.1.0";
    manifest["seed"] = cfg_.seed;
    manifest["dataset"] = {{"name", corpus_.name},
                           {"scale", cfg_.scale},
                           {"images", corpus_.hr.size()},
                           {"files", files}};
    manifest["config"] = json::parse(config_to_json(cfg_));
    std::ofstream os(out_dir / "manifest.json", std::ios::trunc);
    if (!os) throw IoError("cannot write manifest.json");
    os << manifest.dump(2) << "\n";
    // The untouched initial parameters, so post-hoc analyses can compare
    // against the starting point of the run.
    ckpt::save_checkpoint(out_dir / "init.bin", snapshot());
  }

  const auto log_path = out_dir / "log.csv";
  std::ofstream log(log_path, resuming ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write " + log_path.string());
  if (!resuming) log << "step,l1,lcl,lcld,total\n";

  const auto wall_start = std::chrono::steady_clock::now();
  TrainResult result;
  result.run_dir = out_dir;
  double last_l1 = 0, last_lcl = 0;

  for (step_ = step_ + 1; step_ <= cfg_.steps; ++step_) {
    const auto t0 = std::chrono::steady_clock::now();
    double lcld = 0;
    if (learned()) {
      double acc = 0;
      for (int d = 0; d < cfg_.d_steps_per_g; ++d) acc += d_step();
      lcld = acc / cfg_.d_steps_per_g;
      if (!std::isfinite(lcld)) abort_non_finite(out_dir, 0.0, 0.0, lcld);
    }
    double l1 = 0, lcl = 0;
    g_step(l1, lcl);
    const double total = l1 + cfg_.alpha * lcl;
    if (!std::isfinite(l1) || !std::isfinite(lcl) || !std::isfinite(total))
      abort_non_finite(out_dir, l1, lcl, lcld);
    const double ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
            .count();

    char row[192];
    std::snprintf(row, sizeof(row), "%lld,%.17g,%.17g,%.17g,%.17g\n",
                  static_cast<long long>(step_), l1, lcl, lcld, total);
    log << row;
    if (step_ % 50 == 0) log.flush();

    if (cb) cb(StepRecord{step_, l1, lcl, lcld, total, ms});
    last_l1 = l1;
    last_lcl = lcl;

    if (cfg_.checkpoint_every > 0 && step_ % cfg_.checkpoint_every == 0 &&
        step_ != cfg_.steps)
      ckpt::save_checkpoint(out_dir / ("ckpt_" + std::to_string(step_) + ".bin"), snapshot());
  }
  step_ = cfg_.steps;
  log.flush();

  const auto final_path = out_dir / "final.bin";
  ckpt::save_checkpoint(final_path, snapshot());

  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - wall_start).count();
  json summary;
  summary["steps"] = cfg_.steps;
  summary["wall_seconds"] = wall;
  summary["final"] = {{"l1", last_l1}, {"lcl", last_lcl}};
  {
    std::ofstream os(out_dir / "summary.json", std::ios::trunc);
    os << summary.dump(2) << "\n";
  }

  result.steps = cfg_.steps;
  result.final_l1 = last_l1;
  result.final_lcl = last_lcl;
  result.final_checkpoint = final_path;
  return result;
}

}  // namespace

TrainResult run_training(const TrainConfig& cfg, const std::filesystem::path& out_dir,
                         bool force, const StepCallback& cb,
                         const std::filesystem::path& resume) {
  if (cfg.precision == Precision::f64) {
    Trainer<double> t(cfg);
    return t.run(out_dir, force, cb, resume);
  }
  Trainer<float> t(cfg);
  return t.run(out_dir, force, cb, resume);
}

// ===========================================================================

namespace {

template <typename T>
void load_named(const ckpt::Checkpoint& c, const std::string& name, std::vector<T>& dst) {
  const ckpt::ArrayBlob* b = c.find(name);
  if (!b) throw IntegrityError("checkpoint: missing array " + name);
  std::vector<T> loaded = b->to<T>();
  if (loaded.size() != dst.size())
    throw IntegrityError("checkpoint: array " + name + " size mismatch");
  dst = std::move(loaded);
}

template <typename T>
nn::SrNet<T> sr_from_checkpoint(const TrainConfig& cfg, const ckpt::Checkpoint& c) {
  nn::SrConfig sc;
  sc.channels = cfg.sr_channels;
  sc.resblocks = cfg.sr_resblocks;
  sc.scale = cfg.scale;
  RandomSource dummy(0);
  nn::SrNet<T> net;
  net.init(sc, dummy);
  nn::for_each_param(net, [&](const std::string& name, std::vector<T>& v,
                              const std::vector<std::int64_t>&) {
    load_named(c, "sr." + name, v);
  });
  return net;
}

template <typename T>
nn::EmbedNet<T> embed_from_checkpoint(const TrainConfig& cfg, const ckpt::Checkpoint& c) {
  nn::EmbedConfig ec;
  ec.in_ch = cfg.transform == Transform::haar ? 9 : 3;
  ec.base = cfg.embed_base;
  ec.layers = cfg.embed_layers;
  ec.taps = cfg.loss_layers;
  ec.spectral_norm = cfg.embed_spectral_norm;
  RandomSource dummy(0);
  nn::EmbedNet<T> net;
  net.init(ec, dummy);
  nn::for_each_param(net, [&](const std::string& name, std::vector<T>& v,
                              const std::vector<std::int64_t>&) {
    load_named(c, "ed." + name, v);
  });
  if (ec.spectral_norm) {
    for (std::size_t l = 0; l < net.stages.size(); ++l) {
      load_named(c, "ed_sn.u." + std::to_string(l), net.stages[l].sn_u);
      load_named(c, "ed_sn.v." + std::to_string(l), net.stages[l].sn_v);
      net.stages[l].recompute_sn_fixed_uv();
    }
  }
  return net;
}

template <typename T>
Image upscale_with(const TrainConfig& cfg, const ckpt::Checkpoint& c, const Image& lr,
                   int threads) {
  nn::SrNet<T> net = sr_from_checkpoint<T>(cfg, c);
  Tensor<T> in = to_tensor<T>(std::vector<Image>{lr});
  Tensor<T> out = nn::sr_forward(net, in, static_cast<nn::SrTrace<T>*>(nullptr), threads);
  Image sr = to_image(out, 0);
  for (double& v : sr.data) v = v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v);
  return sr;
}

template <typename T>
Tensor<T> eval_transform(Transform tf, const Tensor<T>& x) {
  switch (tf) {
    case Transform::haar: return spectral::hw_stack(x);
    case Transform::fft: return spectral::fft_highfreq(x, nullptr);
    default: return x;
  }
}

template <typename T>
double contrastive_eval_impl(const TrainConfig& mcfg, const ckpt::Checkpoint& model,
                             const TrainConfig& ecfg, const ckpt::Checkpoint& embed_src,
                             const data::Dataset& ds, int n_patches, std::uint64_t seed,
                             int threads) {
  nn::SrNet<T> sr_net = sr_from_checkpoint<T>(mcfg, model);
  nn::EmbedNet<T> ed = embed_from_checkpoint<T>(ecfg, embed_src);
  Corpus corpus = load_corpus(ds, mcfg);

  RandomSource rng(mix_seed(seed));
  std::vector<SlotDraw> draws(n_patches);
  for (SlotDraw& d : draws) {
    d.index = static_cast<int>(
        rng.uniform_int(0, static_cast<std::int64_t>(corpus.hr.size()) - 1));
    const Image& hr = corpus.hr[d.index];
    d.top = static_cast<int>(rng.uniform_int(0, hr.h / mcfg.scale - mcfg.lr_patch));
    d.left = static_cast<int>(rng.uniform_int(0, hr.w / mcfg.scale - mcfg.lr_patch));
  }
  const int K = ecfg.use_neg_aug ? ecfg.k_neg : 0;
  const int P = ecfg.use_pos_aug ? ecfg.k_pos + 1 : 1;
  std::vector<std::vector<sampling::KernelSpec>> negspec(n_patches), posspec(n_patches);
  for (int i = 0; i < n_patches; ++i) {
    for (int k = 0; k < K; ++k) negspec[i].push_back(sampling::sample_blur_spec(rng));
    for (int j = 1; j < P; ++j) {
      sampling::KernelSpec s = sampling::sample_blur_spec(rng);
      s.kind = sampling::KernelKind::unsharp;
      s.strength = rng.uniform(0.2, 1.0);
      posspec[i].push_back(s);
    }
  }

  std::vector<Image> lr_imgs(n_patches), hr_imgs(n_patches);
  std::vector<std::vector<Image>> pos(P), neg(K);
  for (int j = 0; j < P; ++j) pos[j].resize(n_patches);
  for (int k = 0; k < K; ++k) neg[k].resize(n_patches);
#pragma omp parallel for num_threads(threads) schedule(static)
  for (int i = 0; i < n_patches; ++i) {
    const SlotDraw& d = draws[i];
    const Image* lr = corpus.has_lr ? &corpus.lr[d.index] : nullptr;
    auto [lrp, hrp] = data::extract_patch_pair(corpus.hr[d.index], lr, mcfg.scale,
                                               mcfg.lr_patch, d.top, d.left);
    lr_imgs[i] = std::move(lrp);
    hr_imgs[i] = std::move(hrp);
    pos[0][i] = hr_imgs[i];
    for (int k = 0; k < K; ++k) neg[k][i] = sampling::gaussian_blur(hr_imgs[i], negspec[i][k]);
    for (int j = 1; j < P; ++j) pos[j][i] = sampling::unsharp(hr_imgs[i], posspec[i][j - 1]);
  }

  Tensor<T> sr = nn::sr_forward(sr_net, to_tensor<T>(lr_imgs), static_cast<nn::SrTrace<T>*>(nullptr), threads);
  auto aout = nn::embed_forward(ed, eval_transform(ecfg.transform, sr), false, static_cast<nn::EmbedTrace<T>*>(nullptr), threads);
  std::vector<FeaturePyramid<T>> pos_pyr(P), neg_pyr(K);
  for (int j = 0; j < P; ++j)
    pos_pyr[j] = nn::embed_forward(ed, eval_transform(ecfg.transform, to_tensor<T>(pos[j])),
                                   false, static_cast<nn::EmbedTrace<T>*>(nullptr), threads)
                     .pyramid;
  for (int k = 0; k < K; ++k)
    neg_pyr[k] = nn::embed_forward(ed, eval_transform(ecfg.transform, to_tensor<T>(neg[k])),
                                   false, static_cast<nn::EmbedTrace<T>*>(nullptr), threads)
                     .pyramid;
  return static_cast<double>(
      loss::pcl_total_loss(aout.pyramid, pos_pyr, neg_pyr, static_cast<T>(ecfg.tau),
                           static_cast<FeaturePyramid<T>*>(nullptr)));
}

}  // namespace

Image upscale_image(const ckpt::Checkpoint& c, const Image& lr, int threads) {
  const TrainConfig cfg = config_from_json_string(c.config_json);
  if (cfg.precision == Precision::f64) return upscale_with<double>(cfg, c, lr, threads);
  return upscale_with<float>(cfg, c, lr, threads);
}

metrics::EvalReport evaluate_checkpoint(const ckpt::Checkpoint& c, const data::Dataset& ds,
                                        int threads) {
  return metrics::evaluate_dataset(
      ds, [&](const Image& lr) { return upscale_image(c, lr, threads); }, ds.scale);
}

double contrastive_eval(const ckpt::Checkpoint& model, const ckpt::Checkpoint& embed_src,
                        const data::Dataset& ds, int n_patches, std::uint64_t seed,
                        int threads) {
  if (n_patches < 1) throw ParamError("contrastive_eval: n_patches must be positive");
  const TrainConfig mcfg = config_from_json_string(model.config_json);
  const TrainConfig ecfg = config_from_json_string(embed_src.config_json);
  if (mcfg.precision != ecfg.precision)
    throw SchemaError("contrastive_eval: model and embedding precision differ");
  if (mcfg.precision == Precision::f64)
    return contrastive_eval_impl<double>(mcfg, model, ecfg, embed_src, ds, n_patches, seed,
                                         threads);
  return contrastive_eval_impl<float>(mcfg, model, ecfg, embed_src, ds, n_patches, seed,
                                      threads);
}

}  // namespace pclsr::train
