// SPDX-License-Identifier: Apache-2.0
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "prophy/losses.hpp"
#include "prophy/synthdata.hpp"
#include "prophy/tape.hpp"
#include "prophy/trainer.hpp"

using namespace prophy;
using namespace prophy::train;

namespace {

std::filesystem::path temp_dir(const std::string& tag) {
  auto dir = std::filesystem::temp_directory_path() / ("prophy_trainer_" + tag);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

synth::VideoGeometry tiny_geom() {
  synth::VideoGeometry g;
  g.frames = 2;
  g.height = 8;
  g.width = 8;
  g.r_f = 2;
  g.r_s = 2;
  return g;
}

TrainConfig tiny_config() {
  TrainConfig cfg;
  cfg.steps = 4;
  cfg.batch = 3;
  cfg.lr = 1e-3;
  cfg.schedule = Schedule::constant;
  cfg.cfg_dropout = 0.1;
  cfg.seed = 11;
  cfg.checkpoint_interval = 2;
  model::BackboneConfig& m = cfg.model;
  m.depth = 2;
  m.channels = 8;
  m.heads = 2;
  m.grid_f = 1;
  m.grid_h = 4;
  m.grid_w = 4;
  m.r_f = 2;
  m.r_s = 2;
  m.text_dim = 6;
  m.vocab = synth::kVocabSize;
  m.pb_indices = {0, 1};
  m.e_s = 3;
  m.e_r = 4;
  m.top_k = 2;
  m.e_attn = 5;
  m.categories = 5;
  return cfg;
}

std::vector<TrainSample> tiny_corpus(const TrainConfig& cfg, int size = 10) {
  synth::CorpusConfig cc;
  cc.size = size;
  cc.seed = 5;
  cc.geom = tiny_geom();
  cc.channels = cfg.model.channels;
  cc.lift_seed = 7;
  return prepare_corpus(synth::generate_corpus(cc), cfg.model, cfg.cap_fraction);
}

std::map<std::string, Tensor> snapshot(const TrainState& state) {
  std::map<std::string, Tensor> out;
  for (const std::string& name : state.model.params().names())
    out.emplace(name, state.model.params().value(name));
  return out;
}

}  // namespace

TEST_CASE("config validation enforces the documented invariants") {
  TrainConfig cfg = tiny_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.batch = 1;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = tiny_config();
  cfg.cfg_dropout = 1.5;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = tiny_config();
  cfg.cfg_dropout = -0.1;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = tiny_config();
  cfg.weights.lambda2 = -1.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = tiny_config();
  cfg.checkpoint_interval = 0;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = tiny_config();
  cfg.lr = 0.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("config text round-trips every field") {
  TrainConfig cfg = tiny_config();
  cfg.steps = 123;
  cfg.lr = 3.25e-4;
  cfg.schedule = Schedule::cosine_with_restarts;
  cfg.restarts = 3;
  cfg.cfg_dropout = 0.25;
  cfg.weights = {0.3, 0.05, 0.007};
  cfg.seed = 99;
  cfg.model.pb_indices = {1};
  cfg.model.train_backbone = true;
  TrainConfig back = parse_config(config_text(cfg));
  CHECK(back.steps == cfg.steps);
  CHECK(back.batch == cfg.batch);
  CHECK(back.lr == cfg.lr);
  CHECK(back.schedule == cfg.schedule);
  CHECK(back.restarts == cfg.restarts);
  CHECK(back.cfg_dropout == cfg.cfg_dropout);
  CHECK(back.weights.lambda1 == cfg.weights.lambda1);
  CHECK(back.weights.lambda2 == cfg.weights.lambda2);
  CHECK(back.weights.lambda3 == cfg.weights.lambda3);
  CHECK(back.seed == cfg.seed);
  CHECK(back.cap_fraction == cfg.cap_fraction);
  CHECK(back.adam.weight_decay == cfg.adam.weight_decay);
  CHECK(back.model.pb_indices == cfg.model.pb_indices);
  CHECK(back.model.train_backbone == cfg.model.train_backbone);
  CHECK(back.model.vocab == cfg.model.vocab);
}

TEST_CASE("config parser handles comments and rejects junk") {
  TrainConfig base = tiny_config();
  std::string text = config_text(base) + "# trailing comment\n   \n";
  CHECK_NOTHROW(parse_config(text));
  CHECK_THROWS_AS(parse_config(config_text(base) + "mystery = 1\n"), Error);
  CHECK_THROWS_AS(parse_config(config_text(base) + "steps\n"), Error);
  CHECK_THROWS_AS(parse_config(config_text(base) + "lr = abc\n"), Error);
  CHECK_THROWS_AS(parse_config(config_text(base) + "schedule = linear\n"), Error);
}

TEST_CASE("learning-rate schedule closed forms") {
  TrainConfig cfg = tiny_config();
  cfg.lr = 2e-3;
  cfg.schedule = Schedule::constant;
  CHECK(schedule_lr(cfg, 0) == 2e-3);
  CHECK(schedule_lr(cfg, 3) == 2e-3);

  cfg.schedule = Schedule::cosine_with_restarts;
  cfg.steps = 300;
  cfg.restarts = 2;  // three cycles of 100 steps
  CHECK(schedule_lr(cfg, 0) == doctest::Approx(2e-3).epsilon(1e-15));
  CHECK(schedule_lr(cfg, 100) == doctest::Approx(2e-3).epsilon(1e-15));
  CHECK(schedule_lr(cfg, 200) == doctest::Approx(2e-3).epsilon(1e-15));
  CHECK(schedule_lr(cfg, 50) == doctest::Approx(1e-3).epsilon(1e-12));
  CHECK(schedule_lr(cfg, 99) == doctest::Approx(2e-3 * 0.5 * (1.0 + std::cos(M_PI * 0.99))));
  for (int s = 1; s < 100; ++s) CHECK(schedule_lr(cfg, s) < schedule_lr(cfg, s - 1));
}

TEST_CASE("adamw single update matches the hand formula") {
  AdamConfig ac;
  Tensor p({2}), g({2}), m({2}), v({2});
  p[0] = 0.5;
  p[1] = -1.25;
  g[0] = 0.2;
  g[1] = -0.4;
  Tensor p0 = p;
  adamw_update(p, g, m, v, 1, 1e-2, ac);
  for (int i = 0; i < 2; ++i) {
    double mi = (1.0 - ac.beta1) * g[i] / (1.0 - ac.beta1);
    double vi = (1.0 - ac.beta2) * g[i] * g[i] / (1.0 - ac.beta2);
    double expect = p0[i] - 1e-2 * (mi / (std::sqrt(vi) + ac.eps) + ac.weight_decay * p0[i]);
    CHECK(p[i] == doctest::Approx(expect).epsilon(1e-15));
    CHECK(m[i] == doctest::Approx((1.0 - ac.beta1) * g[i]).epsilon(1e-15));
    CHECK(v[i] == doctest::Approx((1.0 - ac.beta2) * g[i] * g[i]).epsilon(1e-15));
  }
}

TEST_CASE("adamw with zero gradient applies pure decoupled decay") {
  AdamConfig ac;
  Tensor p({1}), g({1}), m({1}), v({1});
  p[0] = 2.0;
  adamw_update(p, g, m, v, 1, 0.1, ac);
  CHECK(p[0] == doctest::Approx(2.0 - 0.1 * ac.weight_decay * 2.0).epsilon(1e-15));
  CHECK(m[0] == 0.0);
  CHECK(v[0] == 0.0);
}

TEST_CASE("prepare_corpus shapes targets and validates the model fit") {
  TrainConfig cfg = tiny_config();
  std::vector<TrainSample> corpus = tiny_corpus(cfg, 6);
  CHECK(corpus.size() == 6);
  for (const TrainSample& s : corpus) {
    CHECK(s.latent.shape() == Shape{16, 8});
    CHECK(s.q_s.numel() == 5);
    CHECK(s.q_r.shape() == Shape{16, 5});
    CHECK(s.mask.shape() == Shape{16, 5});
    CHECK(s.caption.size() == static_cast<std::size_t>(synth::kCaptionLen));
  }
  model::BackboneConfig wrong = cfg.model;
  wrong.channels = 16;
  synth::CorpusConfig cc;
  cc.size = 2;
  cc.seed = 5;
  cc.geom = tiny_geom();
  cc.channels = cfg.model.channels;
  CHECK_THROWS_AS(prepare_corpus(synth::generate_corpus(cc), wrong, 0.1), Error);
}

TEST_CASE("train_step metrics stream is deterministic across runs") {
  TrainConfig cfg = tiny_config();
  std::vector<TrainSample> corpus = tiny_corpus(cfg);
  TrainState a = init_state(cfg);
  TrainState b = init_state(cfg);
  for (int s = 0; s < 3; ++s) {
    StepMetrics ma = train_step(a, cfg, corpus);
    StepMetrics mb = train_step(b, cfg, corpus);
    CHECK(ma.jsonl() == mb.jsonl());
  }
  for (const std::string& name : a.model.params().names())
    CHECK(max_abs_diff(a.model.params().value(name), b.model.params().value(name)) == 0.0);
}

TEST_CASE("metrics satisfy the total identity and carry the schedule lr") {
  TrainConfig cfg = tiny_config();
  cfg.schedule = Schedule::cosine_with_restarts;
  cfg.steps = 6;
  cfg.restarts = 1;
  std::vector<TrainSample> corpus = tiny_corpus(cfg);
  TrainState state = init_state(cfg);
  for (int s = 0; s < 6; ++s) {
    StepMetrics m = train_step(state, cfg, corpus);
    double expect =
        losses::total_loss(m.flow, m.coarse, m.fine, m.balance, cfg.weights);
    CHECK(std::abs(m.total - expect) <= 1e-10);
    CHECK(m.lr == schedule_lr(cfg, s));
    CHECK(m.step == s);
    CHECK(m.flow > 0.0);
    CHECK(m.fine >= 0.0);
    // E_r * sum f_e p_e dips below 1 only when assignment fractions and mean
    // probabilities anti-correlate, which stays mild in practice.
    CHECK(m.balance > 0.5);
  }
}

TEST_CASE("expert-utilization entropy hits the uniform closed form when k = E_r") {
  TrainConfig cfg = tiny_config();
  cfg.model.top_k = cfg.model.e_r;  // every token selects every expert
  std::vector<TrainSample> corpus = tiny_corpus(cfg);
  TrainState state = init_state(cfg);
  StepMetrics m = train_step(state, cfg, corpus);
  CHECK(m.entropy == doctest::Approx(std::log(4.0)).epsilon(1e-12));
}

TEST_CASE("cfg dropout one keeps no samples and zeroes the coarse term") {
  TrainConfig cfg = tiny_config();
  cfg.cfg_dropout = 1.0;
  std::vector<TrainSample> corpus = tiny_corpus(cfg);
  TrainState state = init_state(cfg);
  for (int s = 0; s < 2; ++s) {
    StepMetrics m = train_step(state, cfg, corpus);
    CHECK(m.kept == 0);
    CHECK(m.coarse == 0.0);
  }
}

TEST_CASE("kept-sample count replays the documented dropout protocol") {
  TrainConfig cfg = tiny_config();
  cfg.cfg_dropout = 0.5;
  std::vector<TrainSample> corpus = tiny_corpus(cfg);
  TrainState state = init_state(cfg);
  StreamSet ref(derive_seed(cfg.seed, "train"));
  const std::int64_t n = cfg.model.tokens(), c = cfg.model.channels;
  for (int s = 0; s < 5; ++s) {
    for (int i = 0; i < cfg.batch; ++i)
      ref.data_order.uniform_int(static_cast<std::int64_t>(corpus.size()));
    for (int i = 0; i < cfg.batch; ++i) ref.timestep.uniform(0.001, 0.999);
    Tensor scratch({static_cast<std::int64_t>(cfg.batch) * n, c});
    ref.noise.fill_normal(scratch);
    int expect_kept = 0;
    for (int i = 0; i < cfg.batch; ++i)
      if (!(ref.dropout.uniform() < cfg.cfg_dropout)) ++expect_kept;
    StepMetrics m = train_step(state, cfg, corpus);
    CHECK(m.kept == expect_kept);
    if (expect_kept < 2) CHECK(m.coarse == 0.0);
  }
}

TEST_CASE("all lambdas zero reduces to a flow-only reference loop bitwise") {
  TrainConfig cfg = tiny_config();
  cfg.weights = {0.0, 0.0, 0.0};
  cfg.cfg_dropout = 0.0;
  cfg.steps = 3;
  std::vector<TrainSample> corpus = tiny_corpus(cfg);

  TrainState state = init_state(cfg);

  // Reference: plain rectified-flow training with the same draw protocol.
  model::Denoiser ref_model = model::Denoiser::init(cfg.model, derive_seed(cfg.seed, "model"));
  StreamSet ref_streams(derive_seed(cfg.seed, "train"));
  std::map<std::string, Tensor> ref_m, ref_v;
  for (const std::string& name : ref_model.params().trainable_names()) {
    ref_m.emplace(name, Tensor(ref_model.params().value(name).shape()));
    ref_v.emplace(name, Tensor(ref_model.params().value(name).shape()));
  }
  const std::int64_t n = cfg.model.tokens(), c = cfg.model.channels;

  for (int s = 0; s < 3; ++s) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(cfg.batch));
    for (int i = 0; i < cfg.batch; ++i)
      idx[static_cast<std::size_t>(i)] =
          ref_streams.data_order.uniform_int(static_cast<std::int64_t>(corpus.size()));
    std::vector<double> ts(static_cast<std::size_t>(cfg.batch));
    for (int i = 0; i < cfg.batch; ++i)
      ts[static_cast<std::size_t>(i)] = ref_streams.timestep.uniform(0.001, 0.999);
    Tensor noise({static_cast<std::int64_t>(cfg.batch) * n, c});
    ref_streams.noise.fill_normal(noise);
    for (int i = 0; i < cfg.batch; ++i) ref_streams.dropout.uniform();

    model::BatchInput batch;
    batch.x_t = Tensor({static_cast<std::int64_t>(cfg.batch) * n, c});
    batch.t = ts;
    batch.use_null.assign(static_cast<std::size_t>(cfg.batch), 0);
    Tensor target(batch.x_t.shape());
    for (int i = 0; i < cfg.batch; ++i) {
      const TrainSample& smp = corpus[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])];
      batch.captions.push_back(smp.caption);
      const double t = ts[static_cast<std::size_t>(i)];
      for (std::int64_t r = 0; r < n; ++r)
        for (std::int64_t j = 0; j < c; ++j) {
          batch.x_t.at(i * n + r, j) = (1.0 - t) * noise.at(i * n + r, j) + t * smp.latent.at(r, j);
          target.at(i * n + r, j) = smp.latent.at(r, j) - noise.at(i * n + r, j);
        }
    }
    ad::Tape tp;
    model::ForwardHandles h = ref_model.build(tp, batch);
    ad::Val diff = tp.sub(h.velocity, tp.input(target));
    ad::Val flow = tp.mean(tp.mul(diff, diff));
    tp.backward(flow);
    const double lr = schedule_lr(cfg, s);
    for (const std::string& name : ref_model.params().trainable_names())
      adamw_update(ref_model.params().value(name), tp.grad(h.leaves.at(name)), ref_m.at(name),
                   ref_v.at(name), s + 1, lr, cfg.adam);

    StepMetrics m = train_step(state, cfg, corpus);
    CHECK(m.flow == tp.value(flow)[0]);
    for (const std::string& name : state.model.params().names())
      CHECK(max_abs_diff(state.model.params().value(name), ref_model.params().value(name)) == 0.0);
  }
}

TEST_CASE("frozen backbone arrays are step-invariant") {
  TrainConfig cfg = tiny_config();
  std::vector<TrainSample> corpus = tiny_corpus(cfg);
  TrainState state = init_state(cfg);
  std::map<std::string, Tensor> before = snapshot(state);
  for (int s = 0; s < 3; ++s) train_step(state, cfg, corpus);
  bool branch_moved = false;
  for (const std::string& name : state.model.params().names()) {
    double d = max_abs_diff(state.model.params().value(name), before.at(name));
    if (name.rfind("backbone.", 0) == 0) CHECK(d == 0.0);
    if (name.rfind("branch.", 0) == 0 && d > 0.0) branch_moved = true;
  }
  CHECK(branch_moved);
}

TEST_CASE("non-finite loss aborts with a diagnostic dump") {
  TrainConfig cfg = tiny_config();
  std::vector<TrainSample> corpus = tiny_corpus(cfg);
  TrainState state = init_state(cfg);
  state.model.params().value("backbone.head.b")[0] = std::numeric_limits<double>::infinity();
  try {
    train_step(state, cfg, corpus);
    FAIL("expected a non-finite loss error");
  } catch (const Error& err) {
    std::string what = err.what();
    CHECK(what.find("non-finite") != std::string::npos);
    CHECK(what.find("flow=") != std::string::npos);
  }
}

TEST_CASE("steps zero returns the initial state unchanged") {
  TrainConfig cfg = tiny_config();
  cfg.steps = 0;
  std::vector<TrainSample> corpus = tiny_corpus(cfg);
  TrainState fresh = init_state(cfg);
  std::map<std::string, Tensor> before = snapshot(fresh);
  std::vector<StepMetrics> log;
  run_training(fresh, cfg, corpus, {}, &log);
  CHECK(fresh.step == 0);
  CHECK(log.empty());
  for (const auto& [name, value] : before)
    CHECK(max_abs_diff(fresh.model.params().value(name), value) == 0.0);
}

TEST_CASE("run_training writes per-step metrics and interval checkpoints") {
  TrainConfig cfg = tiny_config();
  cfg.steps = 2;
  cfg.checkpoint_interval = 1;
  std::vector<TrainSample> corpus = tiny_corpus(cfg);
  auto dir = temp_dir("run");
  std::vector<StepMetrics> log;
  TrainState state = run_training(cfg, corpus, dir, &log);
  CHECK(state.step == 2);
  CHECK(log.size() == 2);
  CHECK(std::filesystem::exists(dir / "checkpoint_000001" / "manifest"));
  CHECK(std::filesystem::exists(dir / "checkpoint_000002" / "manifest"));

  std::ifstream metrics(dir / "metrics.jsonl");
  std::string line;
  int lines = 0;
  while (std::getline(metrics, line)) {
    CHECK(line == log[static_cast<std::size_t>(lines)].jsonl());
    ++lines;
  }
  CHECK(lines == 2);

  Checkpoint ck = load_checkpoint(dir / "checkpoint_000002");
  CHECK(ck.state.step == 2);
  for (const std::string& name : state.model.params().names())
    CHECK(max_abs_diff(ck.state.model.params().value(name),
                       state.model.params().value(name)) == 0.0);
}

TEST_CASE("checkpoint round trip preserves state and config exactly") {
  TrainConfig cfg = tiny_config();
  std::vector<TrainSample> corpus = tiny_corpus(cfg);
  TrainState state = init_state(cfg);
  for (int s = 0; s < 2; ++s) train_step(state, cfg, corpus);

  auto dir = temp_dir("roundtrip");
  save_checkpoint(state, cfg, dir / "ck");
  Checkpoint ck = load_checkpoint(dir / "ck");
  CHECK(ck.state.step == state.step);
  CHECK(ck.config.lr == cfg.lr);
  CHECK(ck.config.cfg_dropout == cfg.cfg_dropout);
  CHECK(ck.config.weights.lambda1 == cfg.weights.lambda1);
  CHECK(ck.config.model.pb_indices == cfg.model.pb_indices);
  for (const std::string& name : state.model.params().names())
    CHECK(max_abs_diff(ck.state.model.params().value(name),
                       state.model.params().value(name)) == 0.0);
  for (const auto& [name, m] : state.adam_m)
    CHECK(max_abs_diff(ck.state.adam_m.at(name), m) == 0.0);
  for (const auto& [name, v] : state.adam_v)
    CHECK(max_abs_diff(ck.state.adam_v.at(name), v) == 0.0);
  CHECK(ck.state.streams.noise.save_state() == state.streams.noise.save_state());
  CHECK(ck.state.streams.dropout.save_state() == state.streams.dropout.save_state());
}

TEST_CASE("resumed training is bitwise identical to uninterrupted training") {
  TrainConfig cfg = tiny_config();
  cfg.steps = 16;
  cfg.checkpoint_interval = 100;  // no mid-run checkpoints needed
  std::vector<TrainSample> corpus = tiny_corpus(cfg);

  TrainState continuous = init_state(cfg);
  std::vector<StepMetrics> full_log;
  run_training(continuous, cfg, corpus, {}, &full_log);

  TrainState first = init_state(cfg);
  for (int s = 0; s < 6; ++s) train_step(first, cfg, corpus);
  auto dir = temp_dir("resume");
  save_checkpoint(first, cfg, dir / "ck");

  Checkpoint ck = load_checkpoint(dir / "ck");
  std::vector<StepMetrics> tail_log;
  run_training(ck.state, ck.config, corpus, {}, &tail_log);
  CHECK(ck.state.step == 16);
  CHECK(tail_log.size() == 10);
  for (std::size_t i = 0; i < tail_log.size(); ++i)
    CHECK(tail_log[i].jsonl() == full_log[i + 6].jsonl());
  for (const std::string& name : continuous.model.params().names())
    CHECK(max_abs_diff(ck.state.model.params().value(name),
                       continuous.model.params().value(name)) == 0.0);
}

TEST_CASE("corrupted checkpoints refuse to load") {
  TrainConfig cfg = tiny_config();
  TrainState state = init_state(cfg);
  auto dir = temp_dir("corrupt");
  save_checkpoint(state, cfg, dir / "ck");
  std::filesystem::resize_file(dir / "ck" / "param.backbone.pos.bin", 8);
  CHECK_THROWS_AS(load_checkpoint(dir / "ck"), Error);
  CHECK_THROWS_AS(load_checkpoint(dir / "missing"), Error);
}

TEST_CASE("seeded short run shows decreasing smoothed flow loss") {
  TrainConfig cfg = tiny_config();
  cfg.steps = 120;
  cfg.lr = 2e-3;
  cfg.checkpoint_interval = 1000;
  std::vector<TrainSample> corpus = tiny_corpus(cfg, 16);
  std::vector<StepMetrics> log;
  run_training(cfg, corpus, {}, &log);
  REQUIRE(log.size() == 120);
  double head = 0.0, tail = 0.0;
  for (int s = 0; s < 30; ++s) head += log[static_cast<std::size_t>(s)].flow;
  for (int s = 90; s < 120; ++s) tail += log[static_cast<std::size_t>(s)].flow;
  CHECK(tail / 30.0 < head / 30.0);
}
