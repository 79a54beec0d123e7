// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "prophy/backbone.hpp"
#include "prophy/losses.hpp"
#include "prophy/rng.hpp"
#include "prophy/synthdata.hpp"
#include "prophy/tensor.hpp"

namespace prophy::train {

enum class Schedule { constant, cosine_with_restarts };

Schedule schedule_from_name(const std::string& name);
std::string schedule_name(Schedule s);

/// Decoupled-weight-decay adaptive moment update.
struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct TrainConfig {
  std::int64_t steps = 2000;
  int batch = 8;
  double lr = 1e-4;
  Schedule schedule = Schedule::cosine_with_restarts;
  int restarts = 2;
  double cfg_dropout = 0.1;
  losses::LossWeights weights;
  AdamConfig adam;
  std::uint64_t seed = 1;
  std::int64_t checkpoint_interval = 500;
  double cap_fraction = 0.10;
  model::BackboneConfig model;

  void validate() const;
};

/// Plain-text `key = value` config, one pair per line, '#' comments. Model
/// fields use a "model." prefix; unknown keys are rejected.
TrainConfig parse_config(const std::string& text);
TrainConfig load_config(const std::filesystem::path& path);
std::string config_text(const TrainConfig& cfg);

/// One corpus entry prepared for the loop: clean latent, category label,
/// symbolic caption, and the fine-alignment target/mask.
struct TrainSample {
  Tensor latent;  // [N, C]
  Tensor q_s;     // [categories]
  std::vector<int> caption;
  Tensor q_r;   // [N, E_attn]
  Tensor mask;  // [N, E_attn]
};

/// Builds training samples from synthetic ground truth; alignment targets
/// come from the rendered footprints.
std::vector<TrainSample> prepare_corpus(const std::vector<synth::SyntheticSample>& samples,
                                        const model::BackboneConfig& mc, double cap_fraction);

struct StepMetrics {
  std::int64_t step = 0;
  double flow = 0.0;
  double coarse = 0.0;
  double fine = 0.0;
  double balance = 0.0;
  double total = 0.0;
  double lr = 0.0;
  double entropy = 0.0;  // expert-utilization entropy over top-k assignments
  int kept = 0;          // samples entering the coarse pairwise matrix
  std::string jsonl() const;
};

struct TrainState {
  std::int64_t step = 0;
  model::Denoiser model;
  std::map<std::string, Tensor> adam_m;
  std::map<std::string, Tensor> adam_v;
  StreamSet streams;

  TrainState(model::Denoiser m, StreamSet s) : model(std::move(m)), streams(std::move(s)) {}
};

TrainState init_state(const TrainConfig& cfg);

/// Learning rate for the step about to be taken (0-based). Cosine restarts
/// split the run into `restarts + 1` equal cycles, each decaying from the
/// base rate toward zero.
double schedule_lr(const TrainConfig& cfg, std::int64_t step);

/// In-place decoupled-weight-decay moment update; `t` is the 1-based step.
void adamw_update(Tensor& p, const Tensor& g, Tensor& m, Tensor& v, std::int64_t t, double lr,
                  const AdamConfig& cfg);

/// One optimizer step. Batch assembly draws from the per-purpose streams in
/// this fixed order, one pass per purpose over the batch slots:
///   1. data_order: uniform_int(corpus size) per slot;
///   2. timestep:   uniform(0.001, 0.999) per slot;
///   3. noise:      N*C standard normals per slot;
///   4. dropout:    uniform() per slot, text dropped when < cfg_dropout.
/// Dropped samples use the null embedding for their flow term and are
/// excluded from the coarse pairwise matrix (fewer than 2 left -> coarse 0).
/// Fine alignment and load balance run over all tokens. A non-finite loss
/// raises an error carrying every term.
StepMetrics train_step(TrainState& state, const TrainConfig& cfg,
                       const std::vector<TrainSample>& corpus);

/// Runs from state.step to cfg.steps, appending one JSON line per step to
/// out_dir/metrics.jsonl and writing checkpoint_<step> containers at the
/// checkpoint interval. With a null out_dir nothing is written.
void run_training(TrainState& state, const TrainConfig& cfg,
                  const std::vector<TrainSample>& corpus, const std::filesystem::path& out_dir,
                  std::vector<StepMetrics>* log = nullptr);

/// Fresh state trained to completion.
TrainState run_training(const TrainConfig& cfg, const std::vector<TrainSample>& corpus,
                        const std::filesystem::path& out_dir,
                        std::vector<StepMetrics>* log = nullptr);

struct Checkpoint {
  TrainConfig config;
  TrainState state;
};

void save_checkpoint(const TrainState& state, const TrainConfig& cfg,
                     const std::filesystem::path& dir);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace prophy::train
