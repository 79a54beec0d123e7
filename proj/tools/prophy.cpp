// SPDX-License-Identifier: Apache-2.0
#include <CLI11.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "prophy/analysis.hpp"
#include "prophy/backbone.hpp"
#include "prophy/container.hpp"
#include "prophy/synthdata.hpp"
#include "prophy/trainer.hpp"

namespace fs = std::filesystem;
using namespace prophy;

namespace {

/// Categories the toy taxonomy can actually prompt for, capped to the model.
std::vector<int> promptable_categories(const model::BackboneConfig& cfg) {
  std::vector<int> cats;
  for (int k = 0; k < synth::kPhenomenonKinds; ++k) {
    int c = synth::category_for(static_cast<synth::Phenomenon>(k));
    if (c < cfg.categories) cats.push_back(c);
  }
  std::sort(cats.begin(), cats.end());
  cats.erase(std::unique(cats.begin(), cats.end()), cats.end());
  require(!cats.empty(), "analyze: model has no promptable categories");
  return cats;
}

/// Geometry whose token grid matches the checkpoint's model config.
synth::VideoGeometry geometry_for(const model::BackboneConfig& cfg) {
  synth::VideoGeometry geom;
  geom.frames = cfg.grid_f * cfg.r_f;
  geom.height = cfg.grid_h * cfg.r_s;
  geom.width = cfg.grid_w * cfg.r_s;
  geom.r_f = cfg.r_f;
  geom.r_s = cfg.r_s;
  return geom;
}

/// One random single-phenomenon sample shaped for this model.
synth::SyntheticSample probe_sample(const model::BackboneConfig& cfg, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "analyze.probe"));
  auto kind = static_cast<synth::Phenomenon>(rng.uniform_int(synth::kPhenomenonKinds));
  synth::VideoGeometry geom = geometry_for(cfg);
  std::vector<synth::PhenomenonSpec> specs = {synth::random_spec(rng, kind, geom)};
  return synth::generate_sample(derive_seed(seed, "analyze.sample"), specs, geom, cfg.channels,
                                /*lift_seed=*/7);
}

/// Channel-0 latent grid tiled [H', F' * W'] for a quick-look image.
Tensor latent_tile(const Tensor& latent, const model::BackboneConfig& cfg) {
  Tensor tile({cfg.grid_h, static_cast<std::int64_t>(cfg.grid_f) * cfg.grid_w});
  std::int64_t token = 0;
  for (int f = 0; f < cfg.grid_f; ++f)
    for (int y = 0; y < cfg.grid_h; ++y)
      for (int x = 0; x < cfg.grid_w; ++x, ++token)
        tile.at(y, static_cast<std::int64_t>(f) * cfg.grid_w + x) = latent.at(token, 0);
  return tile;
}

int run_gen_corpus(const std::string& out, const synth::CorpusConfig& cc) {
  std::vector<synth::SyntheticSample> samples = synth::generate_corpus(cc);
  synth::save_corpus(out, samples);
  std::cout << "wrote " << samples.size() << " samples to " << out << "\n";
  return 0;
}

int run_train(const std::string& config_path, const std::string& corpus_dir,
              const std::string& out_dir, const std::string& resume) {
  std::vector<train::TrainSample> corpus;
  std::vector<train::StepMetrics> log;
  if (resume.empty()) {
    train::TrainConfig cfg = train::load_config(config_path);
    corpus = train::prepare_corpus(synth::load_corpus(corpus_dir), cfg.model, cfg.cap_fraction);
    train::TrainState state = train::run_training(cfg, corpus, out_dir, &log);
    std::cout << "trained " << state.step << " steps";
  } else {
    train::Checkpoint ckpt = train::load_checkpoint(resume);
    corpus = train::prepare_corpus(synth::load_corpus(corpus_dir), ckpt.config.model,
                                   ckpt.config.cap_fraction);
    int from = ckpt.state.step;
    train::run_training(ckpt.state, ckpt.config, corpus, out_dir, &log);
    std::cout << "resumed at step " << from << ", trained to " << ckpt.state.step;
  }
  if (!log.empty()) std::cout << ", final " << log.back().jsonl();
  std::cout << "\n";
  return 0;
}

int run_correlate(const train::Checkpoint& ckpt, const fs::path& out, std::uint64_t seed,
                  int per_group) {
  std::vector<int> cats = promptable_categories(ckpt.config.model);
  analysis::LogitCollection coll =
      analysis::collect_semantic_logits(ckpt.state.model, cats, per_group, seed);
  analysis::PearsonResult res = analysis::pearson_matrix(coll);
  analysis::save_pearson_csv(out / "pearson.csv", res);
  std::cout << "wrote " << (out / "pearson.csv").string() << " for " << cats.size()
            << " groups\n";
  return 0;
}

int run_pca(const train::Checkpoint& ckpt, const fs::path& out, std::uint64_t seed,
            int per_group, int dims) {
  std::vector<int> cats = promptable_categories(ckpt.config.model);
  analysis::LogitCollection coll =
      analysis::collect_semantic_logits(ckpt.state.model, cats, per_group, seed);
  analysis::PcaResult res = analysis::pca_project(coll, dims);
  analysis::save_pca_csv(out / "pca.csv", res, coll.labels);
  std::cout << "wrote " << (out / "pca.csv").string() << ", top ratio "
            << (res.ratios.empty() ? 0.0 : res.ratios[0]) << "\n";
  return 0;
}

int run_maps(const train::Checkpoint& ckpt, const fs::path& out, std::uint64_t seed, double t) {
  const model::Denoiser& d = ckpt.state.model;
  synth::SyntheticSample sample = probe_sample(d.config(), seed);
  Tensor x_t = analysis::probe_state(sample.latent, t, seed);
  analysis::ActivationMaps maps = analysis::expert_activation_maps(d, x_t, t, sample.caption);
  analysis::save_maps(out / "maps", maps);
  std::cout << "wrote " << (out / "maps").string() << " (" << d.config().e_attn
            << " attribute maps)\n";
  return 0;
}

int run_invert(const train::Checkpoint& ckpt, const fs::path& out, std::uint64_t seed, int steps,
               double guidance) {
  const model::Denoiser& d = ckpt.state.model;
  synth::SyntheticSample sample = probe_sample(d.config(), seed);
  analysis::InvertResult res = analysis::invert_experiment(d, sample.caption, steps, seed, guidance);
  analysis::save_invert_csv(out / "invert.csv", res);
  io::Container c;
  c.set_meta("format", "prophy-invert");
  c.add("normal", res.normal, io::DType::f64);
  c.add("inverted", res.inverted, io::DType::f64);
  c.save(out / "invert");
  analysis::write_pgm(out / "invert" / "normal.pgm", latent_tile(res.normal, d.config()));
  analysis::write_pgm(out / "invert" / "inverted.pgm", latent_tile(res.inverted, d.config()));
  std::cout << "wrote " << (out / "invert.csv").string() << " changed_fraction "
            << res.changed_fraction << " l2 " << res.l2 << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"toy progressive physical-alignment workbench"};
  app.require_subcommand(1);

  // gen-corpus
  auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic training corpus");
  std::string gen_out;
  synth::CorpusConfig cc;
  gen->add_option("--out", gen_out, "corpus directory")->required();
  gen->add_option("--size", cc.size, "number of samples");
  gen->add_option("--seed", cc.seed, "corpus seed");
  gen->add_option("--frames", cc.geom.frames, "frames per clip");
  gen->add_option("--height", cc.geom.height, "frame height");
  gen->add_option("--width", cc.geom.width, "frame width");
  gen->add_option("--rf", cc.geom.r_f, "temporal patch stride");
  gen->add_option("--rs", cc.geom.r_s, "spatial patch stride");
  gen->add_option("--channels", cc.channels, "latent channels");
  gen->add_option("--lift-seed", cc.lift_seed, "encoder lift seed");

  // train
  auto* tr = app.add_subcommand("train", "train on a generated corpus");
  std::string tr_config, tr_corpus, tr_out, tr_resume;
  tr->add_option("--config", tr_config, "key-value config file");
  tr->add_option("--corpus", tr_corpus, "corpus directory")->required();
  tr->add_option("--out", tr_out, "run directory for metrics and checkpoints")->required();
  tr->add_option("--resume", tr_resume, "checkpoint directory to continue from");

  // analyze <mode>
  auto* an = app.add_subcommand("analyze", "inspect a trained checkpoint");
  an->require_subcommand(1);
  std::string an_ckpt, an_out;
  std::uint64_t an_seed = 1;
  int per_group = 8, dims = 2, steps = 8;
  double t_probe = 0.5, guidance = 1.0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--ckpt", an_ckpt, "checkpoint directory")->required();
    sub->add_option("--out", an_out, "output directory")->required();
    sub->add_option("--seed", an_seed, "analysis seed");
  };
  auto* corr = an->add_subcommand("correlate", "pearson matrix of per-category router logits");
  add_common(corr);
  corr->add_option("--per-group", per_group, "prompts per category");
  auto* pca = an->add_subcommand("pca", "project per-prompt router logits");
  add_common(pca);
  pca->add_option("--per-group", per_group, "prompts per category");
  pca->add_option("--dims", dims, "components to keep");
  auto* maps = an->add_subcommand("maps", "expert activation maps on a probe sample");
  add_common(maps);
  maps->add_option("--t", t_probe, "probe time in (0, 1)");
  auto* inv = an->add_subcommand("invert", "paired normal/inverted generation");
  add_common(inv);
  inv->add_option("--steps", steps, "sampler steps");
  inv->add_option("--guidance", guidance, "guidance scale");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return run_gen_corpus(gen_out, cc);
    if (tr->parsed()) {
      if (tr_resume.empty() && tr_config.empty())
        throw Error("train: --config is required unless resuming");
      if (!tr_resume.empty() && !tr_config.empty())
        throw Error("train: --resume carries its own config; drop --config");
      return run_train(tr_config, tr_corpus, tr_out, tr_resume);
    }
    train::Checkpoint ckpt = train::load_checkpoint(an_ckpt);
    fs::create_directories(an_out);
    if (corr->parsed()) return run_correlate(ckpt, an_out, an_seed, per_group);
    if (pca->parsed()) return run_pca(ckpt, an_out, an_seed, per_group, dims);
    if (maps->parsed()) return run_maps(ckpt, an_out, an_seed, t_probe);
    if (inv->parsed()) return run_invert(ckpt, an_out, an_seed, steps, guidance);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
